//! Volumes in world space: trilinear resampling, affine warps, and the
//! preprocessing chain that turns a stored scan into a network input.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A 3-D scalar grid with voxel spacing in millimetres and a voxel-to-world
/// affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: Tensor,
    pub spacing: [f64; 3],
    pub affine: [[f64; 4]; 4],
}

impl Volume {
    pub fn new(grid: Tensor, spacing: [f64; 3], affine: [[f64; 4]; 4]) -> Result<Self> {
        if grid.rank() != 3 {
            return Err(Error::Shape(format!(
                "volume grid must be rank 3, got {:?}",
                grid.shape()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Input(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        invert3(linear_part(&affine))?;
        Ok(Volume { grid, spacing, affine })
    }

    /// Volume on the same grid dimensions with an axis-aligned affine
    /// `diag(spacing)` and zero offset.
    pub fn with_default_frame(grid: Tensor, spacing: [f64; 3]) -> Result<Self> {
        let affine = [
            [spacing[0], 0.0, 0.0, 0.0],
            [0.0, spacing[1], 0.0, 0.0],
            [0.0, 0.0, spacing[2], 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        Volume::new(grid, spacing, affine)
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.grid.shape();
        [s[0], s[1], s[2]]
    }

    /// World coordinates of the grid centre.
    pub fn world_center(&self) -> [f64; 3] {
        let d = self.dims();
        apply_affine(
            &self.affine,
            [
                (d[0] as f64 - 1.0) / 2.0,
                (d[1] as f64 - 1.0) / 2.0,
                (d[2] as f64 - 1.0) / 2.0,
            ],
        )
    }
}

/// Rigid-plus-scaling world-space transform: `x ↦ L·x + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTransform {
    pub linear: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub id: String,
}

impl AffineTransform {
    pub fn identity(id: &str) -> Self {
        AffineTransform {
            linear: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            id: id.to_string(),
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let l = &self.linear;
        [
            l[0][0] * p[0] + l[0][1] * p[1] + l[0][2] * p[2] + self.translation[0],
            l[1][0] * p[0] + l[1][1] * p[1] + l[1][2] * p[2] + self.translation[1],
            l[2][0] * p[0] + l[2][1] * p[1] + l[2][2] * p[2] + self.translation[2],
        ]
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let inv = invert3(self.linear)?;
        let t = &self.translation;
        let neg = [
            -(inv[0][0] * t[0] + inv[0][1] * t[1] + inv[0][2] * t[2]),
            -(inv[1][0] * t[0] + inv[1][1] * t[1] + inv[1][2] * t[2]),
            -(inv[2][0] * t[0] + inv[2][1] * t[1] + inv[2][2] * t[2]),
        ];
        Ok(AffineTransform {
            linear: inv,
            translation: neg,
            id: format!("{}~inv", self.id),
        })
    }

    /// The same linear action re-centred on `center`:
    /// `x ↦ L·(x − c) + c + t`.
    pub fn about(&self, center: [f64; 3]) -> AffineTransform {
        let lc = {
            let l = &self.linear;
            [
                l[0][0] * center[0] + l[0][1] * center[1] + l[0][2] * center[2],
                l[1][0] * center[0] + l[1][1] * center[1] + l[1][2] * center[2],
                l[2][0] * center[0] + l[2][1] * center[1] + l[2][2] * center[2],
            ]
        };
        AffineTransform {
            linear: self.linear,
            translation: [
                center[0] - lc[0] + self.translation[0],
                center[1] - lc[1] + self.translation[1],
                center[2] - lc[2] + self.translation[2],
            ],
            id: self.id.clone(),
        }
    }
}

fn rotation(axis: usize, degrees: f64, id: &str) -> AffineTransform {
    let r = degrees.to_radians();
    let (s, c) = r.sin_cos();
    let mut m = [[0.0; 3]; 3];
    let (u, v) = match axis {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    };
    m[axis][axis] = 1.0;
    m[u][u] = c;
    m[u][v] = -s;
    m[v][u] = s;
    m[v][v] = c;
    AffineTransform { linear: m, translation: [0.0; 3], id: id.to_string() }
}

fn scaling(factor: f64, id: &str) -> AffineTransform {
    AffineTransform {
        linear: [[factor, 0.0, 0.0], [0.0, factor, 0.0], [0.0, 0.0, factor]],
        translation: [0.0; 3],
        id: id.to_string(),
    }
}

/// The six built-in registration targets: mild rotations and scalings.
/// Apply them through `AffineTransform::about` with the volume centre so
/// content stays inside the field of view.
pub fn builtin_templates() -> Vec<AffineTransform> {
    let mut t3 = rotation(2, -3.0, "template:6");
    let shrink = scaling(0.98, "");
    t3.linear = matmul3(&t3.linear, &shrink.linear);
    vec![
        rotation(0, 4.0, "template:1"),
        rotation(1, -5.0, "template:2"),
        rotation(2, 6.0, "template:3"),
        scaling(0.96, "template:4"),
        scaling(1.05, "template:5"),
        t3,
    ]
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn linear_part(affine: &[[f64; 4]; 4]) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = affine[i][j];
        }
    }
    m
}

fn invert3(m: [[f64; 3]; 3]) -> Result<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-12 {
        return Err(Error::Transform(format!("singular linear part, det {det:e}")));
    }
    let inv_det = 1.0 / det;
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (a, b) = ((i + 1) % 3, (i + 2) % 3);
            let (c, d) = ((j + 1) % 3, (j + 2) % 3);
            // Transposed cofactor.
            inv[j][i] = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) * inv_det;
        }
    }
    Ok(inv)
}

fn apply_affine(a: &[[f64; 4]; 4], p: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * p[0] + a[0][1] * p[1] + a[0][2] * p[2] + a[0][3],
        a[1][0] * p[0] + a[1][1] * p[1] + a[1][2] * p[2] + a[1][3],
        a[2][0] * p[0] + a[2][1] * p[1] + a[2][2] * p[2] + a[2][3],
    ]
}

fn invert_affine4(a: &[[f64; 4]; 4]) -> Result<[[f64; 4]; 4]> {
    let inv_l = invert3(linear_part(a))?;
    let t = [a[0][3], a[1][3], a[2][3]];
    let mut out = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = inv_l[i][j];
        }
        out[i][3] = -(inv_l[i][0] * t[0] + inv_l[i][1] * t[1] + inv_l[i][2] * t[2]);
    }
    out[3][3] = 1.0;
    Ok(out)
}

/// Trilinear interpolation at continuous voxel coordinates; positions
/// outside the grid read as zero.
fn sample_trilinear(grid: &Tensor, p: [f64; 3]) -> f64 {
    let s = grid.shape();
    let (d1, d2, d3) = (s[0] as isize, s[1] as isize, s[2] as isize);
    let base = [p[0].floor(), p[1].floor(), p[2].floor()];
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    let data = grid.data();
    let mut acc = 0.0;
    for corner in 0..8 {
        let off = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
        let idx = [
            base[0] as isize + off[0] as isize,
            base[1] as isize + off[1] as isize,
            base[2] as isize + off[2] as isize,
        ];
        if idx[0] < 0 || idx[0] >= d1 || idx[1] < 0 || idx[1] >= d2 || idx[2] < 0 || idx[2] >= d3
        {
            continue;
        }
        let w = (0..3).fold(1.0, |acc, a| {
            acc * if off[a] == 1 { frac[a] } else { 1.0 - frac[a] }
        });
        if w == 0.0 {
            continue;
        }
        acc += w * data[((idx[0] * d2 + idx[1]) * d3 + idx[2]) as usize];
    }
    acc
}

/// Resamples a rank-3 grid to new dimensions with trilinear interpolation,
/// mapping corner voxels onto corner voxels.
pub fn resample_grid(grid: &Tensor, target: [usize; 3]) -> Result<Tensor> {
    if grid.rank() != 3 {
        return Err(Error::Shape(format!("expected rank-3 grid, got {:?}", grid.shape())));
    }
    if target.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("target dims must be positive, got {target:?}")));
    }
    let src = grid.shape();
    let step = |axis: usize| -> f64 {
        if target[axis] > 1 {
            (src[axis] as f64 - 1.0) / (target[axis] as f64 - 1.0)
        } else {
            0.0
        }
    };
    let start = |axis: usize| -> f64 {
        if target[axis] > 1 {
            0.0
        } else {
            (src[axis] as f64 - 1.0) / 2.0
        }
    };
    let (s0, s1, s2) = (step(0), step(1), step(2));
    let (b0, b1, b2) = (start(0), start(1), start(2));
    let mut out = Vec::with_capacity(target.iter().product());
    for i in 0..target[0] {
        let x = b0 + s0 * i as f64;
        for j in 0..target[1] {
            let y = b1 + s1 * j as f64;
            for k in 0..target[2] {
                let z = b2 + s2 * k as f64;
                out.push(sample_trilinear(grid, [x, y, z]));
            }
        }
    }
    Tensor::from_vec(&target, out)
}

/// Warps a volume by a world-space transform: each output voxel reads the
/// input at the transform's inverse image of its world position, on a grid
/// of `target` dimensions sharing the input's frame.
pub fn affine_resample(v: &Volume, t: &AffineTransform, target: [usize; 3]) -> Result<Volume> {
    if target.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("target dims must be positive, got {target:?}")));
    }
    let t_inv = t.inverse()?;
    let world_to_voxel = invert_affine4(&v.affine)?;
    let mut out = Vec::with_capacity(target.iter().product());
    for i in 0..target[0] {
        for j in 0..target[1] {
            for k in 0..target[2] {
                let w = apply_affine(&v.affine, [i as f64, j as f64, k as f64]);
                let p = t_inv.apply(w);
                let src = apply_affine(&world_to_voxel, p);
                out.push(sample_trilinear(&v.grid, src));
            }
        }
    }
    Volume::new(Tensor::from_vec(&target, out)?, v.spacing, v.affine)
}

/// Mirrors a volume along one grid axis, keeping the frame metadata.
pub fn flip_volume(v: &Volume, axis: usize) -> Result<Volume> {
    Volume::new(v.grid.flip(axis)?, v.spacing, v.affine)
}

/// Masking, resampling to the network grid, and min-max normalization.
/// The result has values in [0, 1] and a trailing channel axis; a constant
/// volume maps to all zeros.
pub fn preprocess_volume(
    v: &Volume,
    target: [usize; 3],
    mask: Option<&Volume>,
) -> Result<Tensor> {
    let grid = match mask {
        None => v.grid.clone(),
        Some(m) => {
            if m.grid.shape() != v.grid.shape() {
                return Err(Error::Shape(format!(
                    "mask grid {:?} does not match volume grid {:?}",
                    m.grid.shape(),
                    v.grid.shape()
                )));
            }
            let mut masked = v.grid.clone();
            for (x, &w) in masked.data_mut().iter_mut().zip(m.grid.data()) {
                *x *= w;
            }
            masked
        }
    };
    let resampled = resample_grid(&grid, target)?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &x in resampled.data() {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    let range = hi - lo;
    let normalized = if range > 0.0 {
        resampled.map(|x| (x - lo) / range)
    } else {
        Tensor::zeros(resampled.shape())
    };
    normalized.reshape(&[target[0], target[1], target[2], 1])
}
