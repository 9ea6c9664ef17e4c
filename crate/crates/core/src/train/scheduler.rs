use serde::{Deserialize, Serialize};

use crate::Error;

/// Relative slack so that an improvement of exactly `min_delta` survives
/// floating-point subtraction.
const BOUNDARY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    /// `None` before the first epoch.
    pub best_train_loss: Option<f64>,
    pub epochs_since_improvement: usize,
    pub current_lr: f64,
    /// Number of reductions so far; `current_lr = lr0 / factor^reductions`.
    pub reductions: u32,
}

/// Divides the learning rate by `factor` whenever the training loss fails to
/// beat the best value so far by `min_delta` for `patience` epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    lr0: f64,
    factor: f64,
    patience: usize,
    min_delta: f64,
    state: PlateauState,
}

impl PlateauScheduler {
    pub fn new(lr0: f64, factor: f64, patience: usize, min_delta: f64) -> Self {
        Self {
            lr0,
            factor,
            patience,
            min_delta,
            state: PlateauState {
                best_train_loss: None,
                epochs_since_improvement: 0,
                current_lr: lr0,
                reductions: 0,
            },
        }
    }

    pub fn state(&self) -> PlateauState {
        self.state
    }

    pub fn lr(&self) -> f64 {
        self.state.current_lr
    }

    /// Records one epoch's training loss; returns true when the rate drops.
    pub fn step(&mut self, loss: f64) -> Result<bool, Error> {
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss {loss} passed to the plateau scheduler")));
        }
        let s = &mut self.state;
        let improved = match s.best_train_loss {
            None => true,
            Some(best) => {
                let slack = BOUNDARY_TOLERANCE * self.min_delta.max(f64::EPSILON);
                loss <= best - self.min_delta + slack
            }
        };
        if improved {
            s.best_train_loss = Some(loss);
            s.epochs_since_improvement = 0;
            return Ok(false);
        }
        s.epochs_since_improvement += 1;
        if s.epochs_since_improvement >= self.patience {
            s.reductions += 1;
            s.current_lr = self.lr0 / self.factor.powi(s.reductions as i32);
            s.epochs_since_improvement = 0;
            return Ok(true);
        }
        Ok(false)
    }
}
