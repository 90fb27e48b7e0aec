//! The seven tissue classes and their fixed integer mapping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of tissue classes. Every mask, logit vector and confusion matrix
/// in the crate uses this channel count.
pub const NUM_CLASSES: usize = 7;

/// Tissue class. The discriminant is the value stored in label rasters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum ClassId {
    /// Viable background.
    Bg = 0,
    /// Viable tumor.
    Vt = 1,
    /// Necrosis.
    Nc = 2,
    /// Fibrosis / hyalination.
    Fh = 3,
    /// Hemorrhage / cystic change.
    Hc = 4,
    /// Inflammatory.
    If = 5,
    /// Non-tumor tissue.
    Nt = 6,
}

impl ClassId {
    pub const ALL: [ClassId; NUM_CLASSES] = [
        ClassId::Bg,
        ClassId::Vt,
        ClassId::Nc,
        ClassId::Fh,
        ClassId::Hc,
        ClassId::If,
        ClassId::Nt,
    ];

    pub fn from_u8(value: u8) -> Result<Self> {
        Self::ALL
            .get(value as usize)
            .copied()
            .ok_or(Error::InvalidClass(value))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self as usize]
    }
}

/// Short class names in label order.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["BG", "VT", "NC", "FH", "HC", "IF", "NT"];

/// Reference class proportions (percent) of the clinical patch dataset, in
/// label order. The printed values are rounded and sum to 100.01.
pub const REFERENCE_CLASS_PERCENT: [f64; NUM_CLASSES] =
    [2.86, 17.90, 14.84, 19.97, 1.13, 0.32, 42.99];

/// [`REFERENCE_CLASS_PERCENT`] renormalized to a probability vector.
pub fn reference_class_freqs() -> [f64; NUM_CLASSES] {
    let total: f64 = REFERENCE_CLASS_PERCENT.iter().sum();
    REFERENCE_CLASS_PERCENT.map(|p| p / total)
}

/// Validates a class-frequency vector: non-negative entries summing to 1 ± 1e-9.
pub fn validate_freqs(freqs: &[f64]) -> Result<()> {
    if freqs.len() != NUM_CLASSES {
        return Err(Error::InvalidFrequencies(format!(
            "expected {NUM_CLASSES} entries, got {}",
            freqs.len()
        )));
    }
    if let Some(f) = freqs.iter().find(|f| !f.is_finite() || **f < 0.0) {
        return Err(Error::InvalidFrequencies(format!(
            "entry {f} is negative or non-finite"
        )));
    }
    let sum: f64 = freqs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidFrequencies(format!(
            "entries sum to {sum}, not 1"
        )));
    }
    Ok(())
}
