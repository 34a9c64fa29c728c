//! Architecture identifiers and scale profiles.
//!
//! The six supported networks share one extractor and one head; they differ
//! only in the recurrent stack between them. A scale profile fixes the
//! input geometry and layer widths; `full` is the published configuration
//! and `reduced` is a proportionally shrunk variant small enough for tests
//! and desk experiments.

use crate::error::{Error, Result};
use std::fmt;

/// Number of progression stages the head classifies into.
pub const NUM_CLASSES: usize = 4;

/// Which recurrent stack sits between the extractor and the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArchitectureId {
    Gru,
    SGru,
    SbiGru,
    Lstm,
    SLstm,
    SbiLstm,
}

/// Cell flavor of an architecture's recurrent layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellFlavor {
    Lstm,
    Gru,
}

impl ArchitectureId {
    pub const ALL: [ArchitectureId; 6] = [
        ArchitectureId::Gru,
        ArchitectureId::SGru,
        ArchitectureId::SbiGru,
        ArchitectureId::Lstm,
        ArchitectureId::SLstm,
        ArchitectureId::SbiLstm,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ArchitectureId::Gru => "gru",
            ArchitectureId::SGru => "sgru",
            ArchitectureId::SbiGru => "sbigru",
            ArchitectureId::Lstm => "lstm",
            ArchitectureId::SLstm => "slstm",
            ArchitectureId::SbiLstm => "sbilstm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gru" => Ok(ArchitectureId::Gru),
            "sgru" => Ok(ArchitectureId::SGru),
            "sbigru" => Ok(ArchitectureId::SbiGru),
            "lstm" => Ok(ArchitectureId::Lstm),
            "slstm" => Ok(ArchitectureId::SLstm),
            "sbilstm" => Ok(ArchitectureId::SbiLstm),
            other => Err(Error::Input(format!(
                "unknown architecture {other:?}; expected one of gru|sgru|sbigru|lstm|slstm|sbilstm"
            ))),
        }
    }

    pub fn flavor(&self) -> CellFlavor {
        match self {
            ArchitectureId::Gru | ArchitectureId::SGru | ArchitectureId::SbiGru => CellFlavor::Gru,
            _ => CellFlavor::Lstm,
        }
    }

    /// Stacked variants run two recurrent layers, the first returning every
    /// timestep.
    pub fn stacked(&self) -> bool {
        !matches!(self, ArchitectureId::Gru | ArchitectureId::Lstm)
    }

    pub fn bidirectional(&self) -> bool {
        matches!(self, ArchitectureId::SbiGru | ArchitectureId::SbiLstm)
    }

    /// Row label used in layer tables.
    pub fn cell_label(&self) -> &'static str {
        match self.flavor() {
            CellFlavor::Gru => "GRU",
            CellFlavor::Lstm => "LSTM",
        }
    }
}

impl fmt::Display for ArchitectureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Input geometry and layer widths for one scale of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleProfile {
    pub name: String,
    /// Volume shape `[D1, D2, D3, C]` every input must match.
    pub input_shape: [usize; 4],
    /// Output channels of each conv block (conv 3x3x3 + pool 2x2x2 + batch
    /// norm per block).
    pub conv_channels: Vec<usize>,
    /// Hidden width of every recurrent cell.
    pub hidden_size: usize,
    /// Widths of the hidden dense layers; the output layer is always
    /// `NUM_CLASSES` wide.
    pub head_widths: Vec<usize>,
}

impl ScaleProfile {
    /// The published configuration.
    pub fn full() -> Self {
        ScaleProfile {
            name: "full".into(),
            input_shape: [128, 128, 64, 1],
            conv_channels: vec![64, 64, 128, 256],
            hidden_size: 128,
            head_widths: vec![1024, 512, 128, 64],
        }
    }

    /// Desk-scale variant: quarter widths, and only two conv blocks because
    /// the 32x32x16 grid runs out of depth after two pooling halvings.
    pub fn reduced() -> Self {
        ScaleProfile {
            name: "reduced".into(),
            input_shape: [32, 32, 16, 1],
            conv_channels: vec![16, 32],
            hidden_size: 32,
            head_widths: vec![256, 128, 32, 16],
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(ScaleProfile::full()),
            "reduced" => Ok(ScaleProfile::reduced()),
            other => Err(Error::Input(format!(
                "unknown profile {other:?}; expected full|reduced"
            ))),
        }
    }

    /// Feature width produced by the extractor (global pool over the last
    /// block's channels).
    pub fn feature_width(&self) -> usize {
        *self.conv_channels.last().expect("validated non-empty")
    }

    /// Shapes after each extractor stage: input, then conv and pool outputs
    /// per block. Fails if any stage would collapse an extent to zero.
    pub fn extractor_chain(&self) -> Result<Vec<[usize; 4]>> {
        self.validate()?;
        let mut chain = vec![self.input_shape];
        let mut cur = self.input_shape;
        for (b, &ch) in self.conv_channels.iter().enumerate() {
            for (d, name) in [(0, "conv"), (1, "conv"), (2, "conv")] {
                if cur[d] < 3 {
                    return Err(Error::Shape(format!(
                        "profile {:?}: block {b} {name} needs extent >= 3, got {:?}",
                        self.name,
                        &cur[..3]
                    )));
                }
            }
            cur = [cur[0] - 2, cur[1] - 2, cur[2] - 2, ch];
            chain.push(cur);
            if cur[0] < 2 || cur[1] < 2 || cur[2] < 2 {
                return Err(Error::Shape(format!(
                    "profile {:?}: block {b} pool needs extent >= 2, got {:?}",
                    self.name,
                    &cur[..3]
                )));
            }
            cur = [cur[0] / 2, cur[1] / 2, cur[2] / 2, ch];
            chain.push(cur);
        }
        Ok(chain)
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() {
            return Err(Error::Input("profile needs at least one conv block".into()));
        }
        if self.head_widths.is_empty() {
            return Err(Error::Input("profile needs at least one hidden dense layer".into()));
        }
        if self.hidden_size == 0
            || self.conv_channels.iter().any(|&c| c == 0)
            || self.head_widths.iter().any(|&w| w == 0)
        {
            return Err(Error::Input("profile widths must be positive".into()));
        }
        if self.input_shape[3] != 1 {
            return Err(Error::Input(format!(
                "input volumes must be single-channel, profile says {}",
                self.input_shape[3]
            )));
        }
        Ok(())
    }
}
