//! Per-epoch cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_initial: f64,
    pub lr_final: f64,
    /// Epochs over which the rate decays; afterwards it stays at `lr_final`.
    pub decay_epochs: usize,
}

impl CosineSchedule {
    pub fn new(lr_initial: f64, lr_final: f64, decay_epochs: usize) -> Self {
        Self {
            lr_initial,
            lr_final,
            decay_epochs,
        }
    }

    /// Rate for 0-based `epoch`: `lr_final + (lr_initial - lr_final) * (1 + cos(pi e / E)) / 2`
    /// where `E = decay_epochs - 1`, so the last decay epoch runs at `lr_final`.
    pub fn lr(&self, epoch: usize) -> f64 {
        if self.decay_epochs <= 1 {
            return if epoch == 0 { self.lr_initial } else { self.lr_final };
        }
        let span = (self.decay_epochs - 1) as f64;
        let e = (epoch as f64).min(span);
        self.lr_final + 0.5 * (self.lr_initial - self.lr_final) * (1.0 + (std::f64::consts::PI * e / span).cos())
    }
}
