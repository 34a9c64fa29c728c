//! Gradient-descent parameter updates: adaptive-moment and momentum SGD.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam { learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64 },
    Momentum { learning_rate: f64, momentum: f64 },
}

impl OptimizerKind {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerKind::Adam { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }

    pub fn momentum(learning_rate: f64, momentum: f64) -> Self {
        OptimizerKind::Momentum { learning_rate, momentum }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerKind::Adam { learning_rate, .. } => learning_rate,
            OptimizerKind::Momentum { learning_rate, .. } => learning_rate,
        }
    }

    pub fn with_learning_rate(self, learning_rate: f64) -> Self {
        match self {
            OptimizerKind::Adam { beta1, beta2, epsilon, .. } => {
                OptimizerKind::Adam { learning_rate, beta1, beta2, epsilon }
            }
            OptimizerKind::Momentum { momentum, .. } => {
                OptimizerKind::Momentum { learning_rate, momentum }
            }
        }
    }

    /// A zero learning rate is allowed so that no-op runs can be used as a
    /// diagnostic; negative or non-finite values are not.
    pub fn validate(&self) -> Result<()> {
        let check_lr = |lr: f64| {
            if !lr.is_finite() || lr < 0.0 {
                Err(Error::Input(format!("learning rate must be finite and >= 0, got {lr}")))
            } else {
                Ok(())
            }
        };
        match *self {
            OptimizerKind::Adam { learning_rate, beta1, beta2, epsilon } => {
                check_lr(learning_rate)?;
                for (name, decay) in [("beta1", beta1), ("beta2", beta2)] {
                    if !(0.0..1.0).contains(&decay) {
                        return Err(Error::Input(format!(
                            "{name} must lie in [0, 1), got {decay}"
                        )));
                    }
                }
                if !(epsilon > 0.0) {
                    return Err(Error::Input(format!("epsilon must be positive, got {epsilon}")));
                }
            }
            OptimizerKind::Momentum { learning_rate, momentum } => {
                check_lr(learning_rate)?;
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::Input(format!(
                        "momentum must lie in [0, 1), got {momentum}"
                    )));
                }
            }
        }
        Ok(())
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::adam(1e-3)
    }
}

/// Owns the per-parameter moment buffers; one instance per training run.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer { kind, steps: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn kind(&self) -> &OptimizerKind {
        &self.kind
    }

    fn align(&mut self, params: &[(String, &mut Tensor)], grads: &[(String, &Tensor)]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameter blocks vs {} gradient blocks",
                params.len(),
                grads.len()
            )));
        }
        for ((pn, p), (gn, g)) in params.iter().zip(grads) {
            if pn != gn {
                return Err(Error::Shape(format!(
                    "parameter block {pn} paired with gradient block {gn}"
                )));
            }
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "block {pn}: parameter shape {:?} vs gradient shape {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
            self.second = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        } else if self.first.len() != params.len()
            || self
                .first
                .iter()
                .zip(params)
                .any(|(buf, (_, p))| buf.len() != p.numel())
        {
            return Err(Error::Shape(
                "parameter blocks changed shape mid-run".into(),
            ));
        }
        Ok(())
    }

    /// One update over name-aligned parameter and gradient blocks.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &[(String, &Tensor)],
    ) -> Result<()> {
        self.kind.validate()?;
        self.align(params, grads)?;
        self.steps += 1;
        match self.kind {
            OptimizerKind::Adam { learning_rate, beta1, beta2, epsilon } => {
                let bias1 = 1.0 - beta1.powi(self.steps as i32);
                let bias2 = 1.0 - beta2.powi(self.steps as i32);
                for (i, (_, p)) in params.iter_mut().enumerate() {
                    let g = grads[i].1.data();
                    let m = &mut self.first[i];
                    let v = &mut self.second[i];
                    for (j, value) in p.data_mut().iter_mut().enumerate() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                        let m_hat = m[j] / bias1;
                        let v_hat = v[j] / bias2;
                        *value -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                    }
                }
            }
            OptimizerKind::Momentum { learning_rate, momentum } => {
                for (i, (_, p)) in params.iter_mut().enumerate() {
                    let g = grads[i].1.data();
                    let v = &mut self.first[i];
                    for (j, value) in p.data_mut().iter_mut().enumerate() {
                        v[j] = momentum * v[j] + g[j];
                        *value -= learning_rate * v[j];
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blocks(values: &[f64]) -> (Tensor, Tensor) {
        let p = Tensor::from_vec(&[values.len()], values.to_vec()).unwrap();
        let g = Tensor::from_vec(
            &[values.len()],
            values.iter().map(|v| v * 0.5 + 0.1).collect(),
        )
        .unwrap();
        (p, g)
    }

    fn run_steps(kind: OptimizerKind, start: &[f64], grad: &[f64], n: usize) -> Vec<f64> {
        let mut p = Tensor::from_vec(&[start.len()], start.to_vec()).unwrap();
        let g = Tensor::from_vec(&[grad.len()], grad.to_vec()).unwrap();
        let mut opt = Optimizer::new(kind);
        for _ in 0..n {
            let mut params = vec![("p".to_string(), &mut p)];
            let grads = vec![("p".to_string(), &g)];
            opt.step(&mut params, &grads).unwrap();
        }
        p.data().to_vec()
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        for kind in [OptimizerKind::adam(0.0), OptimizerKind::momentum(0.0, 0.9)] {
            let after = run_steps(kind, &[1.5, -0.25, 3.0], &[10.0, -2.0, 0.5], 7);
            assert_eq!(after, vec![1.5, -0.25, 3.0]);
        }
    }

    #[test]
    fn first_adaptive_step_moves_by_the_learning_rate_times_sign() {
        let lr = 0.01;
        let after = run_steps(OptimizerKind::adam(lr), &[0.0, 0.0], &[3.0, -0.7], 1);
        assert!((after[0] - (-lr)).abs() < 1e-6);
        assert!((after[1] - lr).abs() < 1e-6);
    }

    #[test]
    fn momentum_matches_the_hand_rolled_recurrence() {
        let (lr, mu) = (0.1, 0.9);
        let after = run_steps(OptimizerKind::momentum(lr, mu), &[1.0], &[2.0], 3);
        let mut p = 1.0;
        let mut v = 0.0;
        for _ in 0..3 {
            v = mu * v + 2.0;
            p -= lr * v;
        }
        assert!((after[0] - p).abs() < 1e-15);
    }

    #[test]
    fn adaptive_steps_descend_a_quadratic_bowl() {
        let mut p = Tensor::from_vec(&[3], vec![2.0, -1.5, 0.8]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::adam(0.05));
        for _ in 0..400 {
            let g = p.clone();
            let mut params = vec![("p".to_string(), &mut p)];
            let grads = vec![("p".to_string(), &g)];
            opt.step(&mut params, &grads).unwrap();
        }
        assert!(p.data().iter().all(|v| v.abs() < 1e-3), "{:?}", p.data());
    }

    #[test]
    fn misaligned_blocks_are_rejected() {
        let (mut p, g) = blocks(&[1.0, 2.0]);
        let mut opt = Optimizer::new(OptimizerKind::default());
        let mut params = vec![("a".to_string(), &mut p)];
        let grads = vec![("b".to_string(), &g)];
        assert!(opt.step(&mut params, &grads).is_err());

        let bad = Tensor::zeros(&[3]);
        let mut params = vec![("a".to_string(), &mut p)];
        let grads = vec![("a".to_string(), &bad)];
        assert!(opt.step(&mut params, &grads).is_err());
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        assert!(OptimizerKind::adam(-0.1).validate().is_err());
        assert!(OptimizerKind::adam(f64::NAN).validate().is_err());
        assert!(OptimizerKind::Adam {
            learning_rate: 1e-3,
            beta1: 1.0,
            beta2: 0.999,
            epsilon: 1e-8
        }
        .validate()
        .is_err());
        assert!(OptimizerKind::momentum(0.1, 1.0).validate().is_err());
        assert!(OptimizerKind::default().validate().is_ok());
    }
}
