//! Loss kernels with hand-derived gradients.

mod classification;
mod features;
mod gradcheck;
mod losses;

pub use classification::*;
pub use features::*;
pub use gradcheck::grad_check;
pub use losses::*;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pairs::DEFAULT_NEGATIVES;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    #[default]
    NceInter,
    NceIntra,
    Mse,
    Triplet,
}

impl LossVariant {
    pub fn is_nce(self) -> bool {
        matches!(self, LossVariant::NceInter | LossVariant::NceIntra)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub tau: f64,
    pub negatives: usize,
    pub lambda: f64,
    pub margin: f64,
    pub variant: LossVariant,
    pub triplet_form: TripletForm,
    pub pixel_cutoff: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TEMPERATURE,
            negatives: DEFAULT_NEGATIVES,
            lambda: DEFAULT_LAMBDA,
            margin: DEFAULT_TRIPLET_MARGIN,
            variant: LossVariant::default(),
            triplet_form: TripletForm::default(),
            pixel_cutoff: DEFAULT_PIXEL_CUTOFF,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau must be positive"));
        }
        if self.variant.is_nce() && self.negatives == 0 {
            return Err(Error::invalid("contrastive variants need at least one negative"));
        }
        if self.variant == LossVariant::Triplet && self.negatives == 0 {
            return Err(Error::invalid("triplet variant needs a negative"));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::invalid("margin must be non-negative"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if !(self.pixel_cutoff > 0.0 && self.pixel_cutoff < 1.0) {
            return Err(Error::invalid("pixel cutoff must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = LossConfig::default();
        c.validate().unwrap();
        assert_eq!(c.negatives, 16);
        assert_eq!(c.tau, 0.07);
        let bad = LossConfig { tau: 0.0, ..c };
        assert!(bad.validate().is_err());
        let bad = LossConfig { margin: -1.0, ..c };
        assert!(bad.validate().is_err());
    }
}
