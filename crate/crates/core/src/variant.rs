//! Codec variants: a context template plus the network shape that reads it.

use std::fmt;
use std::str::FromStr;

use crate::context::{ContextError, TemplateVariant};
use crate::model::OutputArch;

/// Full codec configuration. `Nnoc` decodes one voxel at a time; the `Fnnoc*`
/// family never reads current-section occupancy, so a whole section of
/// contexts can be evaluated in one batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Nnoc,
    Fnnoc,
    /// fNNOC without the next section (75 inputs).
    Fnnoc1,
    /// fNNOC1 without section `z0 - 2` (50 inputs).
    Fnnoc2,
    /// fNNOC with a 3x3 window (36 inputs).
    Fnnoc3,
    /// fNNOC with a single sigmoid output.
    Fnnoc4,
    /// fNNOC with two hidden layers.
    Fnnoc5,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Nnoc,
        Variant::Fnnoc,
        Variant::Fnnoc1,
        Variant::Fnnoc2,
        Variant::Fnnoc3,
        Variant::Fnnoc4,
        Variant::Fnnoc5,
    ];

    pub fn template(self) -> TemplateVariant {
        match self {
            Variant::Nnoc => TemplateVariant::Nnoc,
            Variant::Fnnoc | Variant::Fnnoc4 | Variant::Fnnoc5 => TemplateVariant::Fnnoc,
            Variant::Fnnoc1 => TemplateVariant::Fnnoc1,
            Variant::Fnnoc2 => TemplateVariant::Fnnoc2,
            Variant::Fnnoc3 => TemplateVariant::Fnnoc3,
        }
    }

    pub fn arch(self) -> OutputArch {
        match self {
            Variant::Fnnoc4 => OutputArch::Sigmoid1,
            _ => OutputArch::Softmax2,
        }
    }

    pub fn hidden_layers(self) -> usize {
        match self {
            Variant::Fnnoc5 => 2,
            _ => 1,
        }
    }

    pub fn context_len(self) -> usize {
        self.template().context_len()
    }

    /// True when decoding can batch all contexts of a section.
    pub fn is_section_parallel(self) -> bool {
        self != Variant::Nnoc
    }

    /// Stable on-disk identifier. Ids 0..=4 coincide with the template ids.
    pub fn id(self) -> u8 {
        match self {
            Variant::Nnoc => 0,
            Variant::Fnnoc => 1,
            Variant::Fnnoc1 => 2,
            Variant::Fnnoc2 => 3,
            Variant::Fnnoc3 => 4,
            Variant::Fnnoc4 => 5,
            Variant::Fnnoc5 => 6,
        }
    }

    pub fn from_id(id: u8) -> Option<Variant> {
        Variant::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Nnoc => "nnoc",
            Variant::Fnnoc => "fnnoc",
            Variant::Fnnoc1 => "fnnoc1",
            Variant::Fnnoc2 => "fnnoc2",
            Variant::Fnnoc3 => "fnnoc3",
            Variant::Fnnoc4 => "fnnoc4",
            Variant::Fnnoc5 => "fnnoc5",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ContextError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == lower)
            .ok_or_else(|| ContextError::UnknownVariant(s.to_string()))
    }
}
