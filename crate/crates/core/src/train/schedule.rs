use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reduce-on-plateau settings. `min_delta` is relative to the running best.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 10,
            min_delta: 1e-4,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::invalid(format!("scheduler factor must lie in (0, 1), got {}", self.factor)));
        }
        if self.patience == 0 {
            return Err(Error::invalid("scheduler patience must be at least 1"));
        }
        if !(self.min_delta >= 0.0) || !self.min_delta.is_finite() {
            return Err(Error::invalid(format!("scheduler min_delta must be non-negative, got {}", self.min_delta)));
        }
        Ok(())
    }
}

/// Halves (by `factor`) the learning rate after `patience` consecutive
/// epochs without a relative improvement of `min_delta` over the best loss.
/// On a reduction the best loss restarts from the current epoch's loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    cfg: SchedulerConfig,
    lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
    reductions: u32,
}

impl PlateauScheduler {
    pub fn new(cfg: SchedulerConfig, lr: f64) -> Self {
        Self {
            cfg,
            lr,
            best: None,
            bad_epochs: 0,
            reductions: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn reductions(&self) -> u32 {
        self.reductions
    }

    /// Feed one epoch's monitored loss (expected finite) and get the
    /// learning rate for the next epoch.
    pub fn update(&mut self, loss: f64) -> f64 {
        let improved = match self.best {
            None => true,
            Some(best) => loss < best - self.cfg.min_delta * best.abs(),
        };
        if improved {
            self.best = Some(loss);
            self.bad_epochs = 0;
            return self.lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.cfg.patience {
            self.lr *= self.cfg.factor;
            self.reductions += 1;
            self.bad_epochs = 0;
            self.best = Some(loss);
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(losses: &[f64]) -> Vec<f64> {
        let mut s = PlateauScheduler::new(SchedulerConfig::default(), 1e-4);
        losses.iter().map(|&l| s.update(l)).collect()
    }

    #[test]
    fn decreasing_losses_keep_lr() {
        let losses: Vec<f64> = (0..30).map(|i| 1.0 * 0.99f64.powi(i)).collect();
        assert!(run(&losses).iter().all(|&lr| lr == 1e-4));
    }

    #[test]
    fn reduction_lands_patience_epochs_after_best() {
        let mut losses = vec![1.0, 0.9, 0.8];
        losses.extend([0.8; 10]);
        let lrs = run(&losses);
        // best at index 2, reduced after the epoch at index 12
        assert!(lrs[..12].iter().all(|&lr| lr == 1e-4));
        assert_eq!(lrs[12], 5e-5);
    }

    #[test]
    fn two_patience_windows_quarter_the_lr() {
        let lrs = run(&[0.5; 21]);
        assert_eq!(lrs[10], 5e-5);
        assert_eq!(lrs[20], 2.5e-5);
    }

    #[test]
    fn tiny_gains_count_as_plateau() {
        let losses: Vec<f64> = (0..11).map(|i| 1.0 - 1e-6 * i as f64).collect();
        assert_eq!(*run(&losses).last().unwrap(), 5e-5);
    }

    #[test]
    fn rejects_bad_config() {
        let bad = SchedulerConfig {
            factor: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SchedulerConfig {
            patience: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
