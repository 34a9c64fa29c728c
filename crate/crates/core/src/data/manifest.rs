//! Dataset manifests: delimiter-separated rows of
//! `patient_id, visit_code, path, class, provenance` with a dataset-level
//! seed, plus grouping into ordered per-patient scan sequences.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const MANIFEST_COLUMNS: [&str; 5] =
    ["patient_id", "visit_code", "path", "class", "provenance"];

/// Where a manifest row came from: a source scan, one of the template
/// warps, a single-axis mirror, or a warp followed by a mirror.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Original,
    Template(usize),
    Flip(usize),
    TemplateFlip(usize, usize),
}

impl Provenance {
    pub fn is_original(&self) -> bool {
        matches!(self, Provenance::Original)
    }

    /// Short form used in generated file names.
    pub fn file_tag(&self) -> String {
        self.to_string().replace(':', "").replace('+', "_")
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Original => write!(f, "original"),
            Provenance::Template(k) => write!(f, "template:{k}"),
            Provenance::Flip(a) => write!(f, "flip:{a}"),
            Provenance::TemplateFlip(k, a) => write!(f, "template:{k}+flip:{a}"),
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse_part = |part: &str| -> Result<Provenance> {
            if let Some(k) = part.strip_prefix("template:") {
                let k: usize = k
                    .parse()
                    .map_err(|_| Error::Manifest(format!("bad template id in {s:?}")))?;
                if k == 0 {
                    return Err(Error::Manifest(format!("template ids start at 1, got {s:?}")));
                }
                Ok(Provenance::Template(k))
            } else if let Some(a) = part.strip_prefix("flip:") {
                let a: usize =
                    a.parse().map_err(|_| Error::Manifest(format!("bad flip axis in {s:?}")))?;
                if a > 2 {
                    return Err(Error::Manifest(format!("flip axis must be 0-2, got {s:?}")));
                }
                Ok(Provenance::Flip(a))
            } else {
                Err(Error::Manifest(format!("unknown provenance {s:?}")))
            }
        };
        match s {
            "original" => Ok(Provenance::Original),
            _ => match s.split_once('+') {
                None => parse_part(s),
                Some((first, second)) => {
                    match (parse_part(first)?, parse_part(second)?) {
                        (Provenance::Template(k), Provenance::Flip(a)) => {
                            Ok(Provenance::TemplateFlip(k, a))
                        }
                        _ => Err(Error::Manifest(format!(
                            "composite provenance must be template+flip, got {s:?}"
                        ))),
                    }
                }
            },
        }
    }
}

/// Position of a visit code in chronological order: BL, then V01, V02, ...
pub fn visit_rank(code: &str) -> Result<u32> {
    if code == "BL" {
        return Ok(0);
    }
    code.strip_prefix('V')
        .and_then(|n| n.parse::<u32>().ok())
        .filter(|&n| n > 0)
        .map(Ok)
        .unwrap_or_else(|| Err(Error::Manifest(format!("unknown visit code {code:?}"))))
}

/// Visit code for the `t`-th visit (0-based): BL, V01, V02, ...
pub fn visit_code(t: usize) -> String {
    if t == 0 {
        "BL".to_string()
    } else {
        format!("V{t:02}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub patient_id: String,
    pub visit_code: String,
    pub path: PathBuf,
    pub class: u8,
    pub provenance: Provenance,
}

/// One patient lineage under one provenance, visits in chronological
/// order. The sequence label is the class recorded at the latest visit.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub patient_id: String,
    pub provenance: Provenance,
    pub label: u8,
    pub visits: Vec<(String, PathBuf)>,
}

impl SequenceRecord {
    /// Sequence classifiers need at least two time points.
    pub fn is_trainable(&self) -> bool {
        self.visits.len() >= 2
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub seed: u64,
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn new(seed: u64, rows: Vec<ManifestRow>) -> Result<Self> {
        let m = DatasetManifest { seed, rows };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for row in &self.rows {
            if !(1..=4).contains(&row.class) {
                return Err(Error::Label(format!(
                    "class {} out of range 1-4 ({}, {})",
                    row.class, row.patient_id, row.visit_code
                )));
            }
            visit_rank(&row.visit_code)?;
            if !seen.insert(&row.path) {
                return Err(Error::Manifest(format!(
                    "duplicate path {}",
                    row.path.display()
                )));
            }
        }
        Ok(())
    }

    /// Rows per class, indexed by class − 1.
    pub fn class_counts(&self) -> [usize; 4] {
        let mut counts = [0usize; 4];
        for row in &self.rows {
            counts[row.class as usize - 1] += 1;
        }
        counts
    }

    /// Groups rows into per-(patient, provenance) sequences with visits in
    /// chronological order, sorted by patient id then provenance.
    pub fn sequences(&self) -> Result<Vec<SequenceRecord>> {
        let mut groups: BTreeMap<(String, String), Vec<&ManifestRow>> = BTreeMap::new();
        for row in &self.rows {
            groups
                .entry((row.patient_id.clone(), row.provenance.to_string()))
                .or_default()
                .push(row);
        }
        let mut out = Vec::with_capacity(groups.len());
        for ((patient_id, _), mut rows) in groups {
            let mut keyed: Vec<(u32, &ManifestRow)> = rows
                .drain(..)
                .map(|r| Ok((visit_rank(&r.visit_code)?, r)))
                .collect::<Result<_>>()?;
            keyed.sort_by_key(|(rank, _)| *rank);
            if keyed.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::Manifest(format!(
                    "patient {patient_id} has duplicate visit codes under one provenance"
                )));
            }
            let label = keyed.last().expect("non-empty group").1.class;
            out.push(SequenceRecord {
                patient_id,
                provenance: keyed[0].1.provenance.clone(),
                label,
                visits: keyed
                    .into_iter()
                    .map(|(_, r)| (r.visit_code.clone(), r.path.clone()))
                    .collect(),
            });
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "# seed={}", self.seed)?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(MANIFEST_COLUMNS)
            .map_err(|e| Error::Manifest(e.to_string()))?;
        for row in &self.rows {
            w.write_record([
                row.patient_id.as_str(),
                row.visit_code.as_str(),
                &row.path.display().to_string(),
                &row.class.to_string(),
                &row.provenance.to_string(),
            ])
            .map_err(|e| Error::Manifest(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut seed = 0u64;
        for line in text.lines() {
            match line.strip_prefix('#') {
                Some(rest) => {
                    if let Some(v) = rest.trim().strip_prefix("seed=") {
                        seed = v
                            .trim()
                            .parse()
                            .map_err(|_| Error::Manifest(format!("bad seed line {line:?}")))?;
                    }
                }
                None => break,
            }
        }
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(|e| Error::Manifest(e.to_string()))?;
        let got: Vec<&str> = headers.iter().collect();
        if got != MANIFEST_COLUMNS {
            return Err(Error::Manifest(format!(
                "header row {got:?}, expected {MANIFEST_COLUMNS:?}"
            )));
        }
        let mut rows = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| Error::Manifest(e.to_string()))?;
            if record.len() != MANIFEST_COLUMNS.len() {
                return Err(Error::Manifest(format!("row {record:?} has wrong arity")));
            }
            rows.push(ManifestRow {
                patient_id: record[0].to_string(),
                visit_code: record[1].to_string(),
                path: PathBuf::from(&record[2]),
                class: record[3]
                    .parse()
                    .map_err(|_| Error::Manifest(format!("bad class {:?}", &record[3])))?,
                provenance: record[4].parse()?,
            });
        }
        DatasetManifest::new(seed, rows)
    }
}
