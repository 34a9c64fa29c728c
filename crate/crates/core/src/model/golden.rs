//! Canonical per-layer tables for the six architectures at full scale.
//!
//! These are the reference values `inspect --golden` diffs a freshly built
//! model against; any drift in layer maths or parameter layout shows up as
//! a mismatch here.

use crate::error::{Error, Result};
use crate::model::arch::ArchitectureId;
use crate::model::build::LayerRow;

const EXTRACTOR: [(&str, &str, usize); 14] = [
    ("InputLayer", "[(None, 128, 128, 64, 1)]", 0),
    ("Conv3D", "(None, 126, 126, 62, 64)", 1792),
    ("MaxPooling3D", "(None, 63, 63, 31, 64)", 0),
    ("BatchNormalization", "(None, 63, 63, 31, 64)", 256),
    ("Conv3D", "(None, 61, 61, 29, 64)", 110_656),
    ("MaxPooling3D", "(None, 30, 30, 14, 64)", 0),
    ("BatchNormalization", "(None, 30, 30, 14, 64)", 256),
    ("Conv3D", "(None, 28, 28, 12, 128)", 221_312),
    ("MaxPooling3D", "(None, 14, 14, 6, 128)", 0),
    ("BatchNormalization", "(None, 14, 14, 6, 128)", 512),
    ("Conv3D", "(None, 12, 12, 4, 256)", 884_992),
    ("MaxPooling3D", "(None, 6, 6, 2, 256)", 0),
    ("BatchNormalization", "(None, 6, 6, 2, 256)", 1024),
    ("GlobalMaxPooling3D", "(None, 256)", 0),
];

const GRU_ROWS: [(&str, &str, usize); 1] = [("GRU", "[(None, 128)]", 148_224)];
const SGRU_ROWS: [(&str, &str, usize); 2] = [
    ("GRU", "[(None, None, 128)]", 148_224),
    ("GRU", "[(None, 128)]", 99_072),
];
const SBIGRU_ROWS: [(&str, &str, usize); 2] = [
    ("GRU", "[(None, None, 256)]", 296_448),
    ("GRU", "[(None, 256)]", 296_448),
];
const LSTM_ROWS: [(&str, &str, usize); 1] = [("LSTM", "[(None, 128)]", 197_120)];
const SLSTM_ROWS: [(&str, &str, usize); 2] = [
    ("LSTM", "[(None, None, 128)]", 197_120),
    ("LSTM", "[(None, 128)]", 131_584),
];
const SBILSTM_ROWS: [(&str, &str, usize); 2] = [
    ("LSTM", "[(None, None, 256)]", 394_240),
    ("LSTM", "[(None, 256)]", 394_240),
];

/// Head rows; the first dense layer is wider on bidirectional stacks
/// because it consumes both direction halves.
fn head_rows(bidirectional: bool) -> [(&'static str, &'static str, usize); 8] {
    let first_dense = if bidirectional { 263_168 } else { 132_096 };
    [
        ("Dense", "[(None, 1024)]", first_dense),
        ("Dropout", "[(None, 1024)]", 0),
        ("Dense", "[(None, 512)]", 524_800),
        ("Dropout", "[(None, 512)]", 0),
        ("Dense", "[(None, 128)]", 65_664),
        ("Dropout", "[(None, 128)]", 0),
        ("Dense", "[(None, 64)]", 8_256),
        ("Dense", "[(None, 4)]", 260),
    ]
}

/// The expected full-scale accounting table for one architecture, in the
/// exact order `count_parameters` emits rows.
pub fn reference_table(id: ArchitectureId) -> Vec<LayerRow> {
    let recurrent: &[(&str, &str, usize)] = match id {
        ArchitectureId::Gru => &GRU_ROWS,
        ArchitectureId::SGru => &SGRU_ROWS,
        ArchitectureId::SbiGru => &SBIGRU_ROWS,
        ArchitectureId::Lstm => &LSTM_ROWS,
        ArchitectureId::SLstm => &SLSTM_ROWS,
        ArchitectureId::SbiLstm => &SBILSTM_ROWS,
    };
    EXTRACTOR
        .iter()
        .chain(recurrent)
        .chain(head_rows(id.bidirectional()).iter())
        .map(|&(layer, shape, params)| LayerRow::new(layer, shape.to_string(), params))
        .collect()
}

/// Compares a computed table against the reference for `id`; `Ok` means an
/// exact match, otherwise every discrepancy is listed in the error.
pub fn check_against_reference(id: ArchitectureId, actual: &[LayerRow]) -> Result<()> {
    let expected = reference_table(id);
    let diffs = crate::model::build::diff_tables(actual, &expected);
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::Divergence(format!(
            "{id} table deviates from the reference:\n{}",
            diffs.join("\n")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::arch::ScaleProfile;
    use crate::model::build::{count_parameters, Model};

    /// Every architecture, built at full scale, must reproduce its reference
    /// table cell for cell.
    #[test]
    fn built_models_match_reference_tables() {
        let profile = ScaleProfile::full();
        for id in ArchitectureId::ALL {
            let model = Model::build(id, &profile, 0).unwrap();
            let (rows, _) = count_parameters(&model);
            check_against_reference(id, &rows).unwrap();
        }
    }

    #[test]
    fn reference_totals() {
        // Shared extractor subtotal plus per-architecture remainders.
        let extractor: usize = EXTRACTOR.iter().map(|r| r.2).sum();
        assert_eq!(extractor, 1_220_800);
        let total = |id: ArchitectureId| -> usize {
            reference_table(id).iter().map(|r| r.params).sum()
        };
        assert_eq!(total(ArchitectureId::Gru), extractor + 148_224 + 731_076);
        assert_eq!(total(ArchitectureId::SbiLstm), extractor + 788_480 + 862_148);
    }

    #[test]
    fn mismatch_is_reported_with_row_detail() {
        let mut rows = reference_table(ArchitectureId::Gru);
        rows[1].params = 1793;
        let err = check_against_reference(ArchitectureId::Gru, &rows).unwrap_err();
        assert!(err.to_string().contains("row 1"));
    }
}
