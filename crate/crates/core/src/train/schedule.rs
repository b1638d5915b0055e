/// Reduce-on-plateau: when the monitored loss has not improved on the best
/// value by at least `min_delta` for `patience` consecutive epochs, divide the
/// rate by `factor` and start counting again.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    wait: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize, min_delta: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            min_delta,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Feeds one epoch's loss; returns the rate for the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                self.lr /= self.factor;
                self.wait = 0;
            }
        }
        self.lr
    }
}

/// Rate in effect during each epoch, given each epoch's monitored loss.
pub fn lr_trace(losses: &[f64], initial: f64, patience: usize, factor: f64) -> Vec<f64> {
    let mut s = PlateauSchedule::new(initial, factor, patience, 1e-4);
    losses
        .iter()
        .map(|&l| {
            let used = s.lr;
            s.observe(l);
            used
        })
        .collect()
}
