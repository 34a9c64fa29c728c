//! Patient-disjoint dataset splitting: stratified hold-out and k-fold.

use crate::data::{LoadedSequence, SequenceRecord};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;

/// Sequence-level index split; the two sides are disjoint and cover the
/// input, and no patient contributes to both.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// (patient id, class label) per sequence, the view the splitters need.
pub fn record_keys(records: &[SequenceRecord]) -> Vec<(&str, u8)> {
    records.iter().map(|r| (r.patient_id.as_str(), r.label)).collect()
}

pub fn loaded_keys(data: &[LoadedSequence]) -> Vec<(&str, u8)> {
    data.iter().map(|s| (s.patient_id.as_str(), s.label)).collect()
}

fn patient_groups<'a>(sequences: &[(&'a str, u8)]) -> BTreeMap<&'a str, Vec<usize>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (patient, _)) in sequences.iter().enumerate() {
        groups.entry(patient).or_default().push(i);
    }
    groups
}

/// Splits whole patients so that every class keeps roughly `test_fraction`
/// of its sequences on the test side (exactly within one sequence when each
/// patient contributes a single sequence). Classes with fewer than two
/// patients cannot appear on both sides; they stay in training and a
/// warning is returned.
pub fn stratified_split(
    sequences: &[(&str, u8)],
    test_fraction: f64,
    seed: u64,
) -> Result<(SplitIndices, Vec<String>)> {
    if sequences.is_empty() {
        return Err(Error::Input("nothing to split".into()));
    }
    if !(0.0..1.0).contains(&test_fraction) || !test_fraction.is_finite() {
        return Err(Error::Input(format!(
            "test fraction must lie in [0, 1), got {test_fraction}"
        )));
    }

    let groups = patient_groups(sequences);
    let mut class_of_patient: BTreeMap<&str, u8> = BTreeMap::new();
    for (patient, indices) in &groups {
        let mut tally: BTreeMap<u8, usize> = BTreeMap::new();
        for &i in indices {
            *tally.entry(sequences[i].1).or_default() += 1;
        }
        let class = tally
            .iter()
            .max_by_key(|(label, count)| (*count, std::cmp::Reverse(**label)))
            .map(|(label, _)| *label)
            .expect("non-empty group");
        class_of_patient.insert(patient, class);
    }

    let mut by_class: BTreeMap<u8, Vec<&str>> = BTreeMap::new();
    for (patient, class) in &class_of_patient {
        by_class.entry(*class).or_default().push(patient);
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, patients) in &mut by_class {
        patients.shuffle(&mut rng);
        let class_total: usize = patients.iter().map(|p| groups[p].len()).sum();
        if patients.len() < 2 {
            warnings.push(format!(
                "class {class} has only {} patient(s); kept entirely in training",
                patients.len()
            ));
            for p in patients.iter() {
                train.extend_from_slice(&groups[p]);
            }
            continue;
        }
        let target = ((test_fraction * class_total as f64).round() as usize)
            .min(class_total.saturating_sub(1));
        let mut taken = 0usize;
        for p in patients.iter() {
            let size = groups[p].len();
            if taken < target && (taken + size).abs_diff(target) <= target - taken {
                test.extend_from_slice(&groups[p]);
                taken += size;
            } else {
                train.extend_from_slice(&groups[p]);
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((SplitIndices { train, test }, warnings))
}

/// Shuffled k-fold partition of `0..n`; the first `n % k` validation folds
/// hold one extra index.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<SplitIndices>> {
    if k == 0 {
        return Err(Error::Input("fold count must be positive".into()));
    }
    if n < k {
        return Err(Error::Size(format!("cannot make {k} folds from {n} items")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha12Rng::seed_from_u64(seed));

    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        let mut test: Vec<usize> = order[start..start + size].to_vec();
        let mut train: Vec<usize> =
            order[..start].iter().chain(&order[start + size..]).copied().collect();
        test.sort_unstable();
        train.sort_unstable();
        folds.push(SplitIndices { train, test });
        start += size;
    }
    Ok(folds)
}

/// K-fold over whole patients: every fold validates a patient-closed set of
/// sequences and trains on the rest. Validation sizes stay within one
/// sequence of each other whenever all patients contribute equally many
/// sequences.
pub fn grouped_kfold(patients: &[&str], k: usize, seed: u64) -> Result<Vec<SplitIndices>> {
    if k == 0 {
        return Err(Error::Input("fold count must be positive".into()));
    }
    let groups = patient_groups(
        &patients.iter().map(|&p| (p, 0u8)).collect::<Vec<_>>(),
    );
    if groups.len() < k {
        return Err(Error::Size(format!(
            "cannot make {k} patient-disjoint folds from {} patients",
            groups.len()
        )));
    }

    let mut ordered: Vec<(&str, Vec<usize>)> =
        groups.into_iter().map(|(p, idx)| (p, idx)).collect();
    ordered.shuffle(&mut ChaCha12Rng::seed_from_u64(seed));
    ordered.sort_by_key(|(_, idx)| std::cmp::Reverse(idx.len()));

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (_, indices) in ordered {
        let smallest = (0..k).min_by_key(|&f| members[f].len()).expect("k > 0");
        members[smallest].extend(indices);
    }

    let n = patients.len();
    let mut folds = Vec::with_capacity(k);
    for fold in members {
        let mut test = fold;
        test.sort_unstable();
        let in_test: Vec<bool> = {
            let mut mask = vec![false; n];
            for &i in &test {
                mask[i] = true;
            }
            mask
        };
        let train: Vec<usize> = (0..n).filter(|&i| !in_test[i]).collect();
        folds.push(SplitIndices { train, test });
    }
    Ok(folds)
}
