/// Reduce-on-plateau schedule tracking a metric where higher is better.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub best: f64,
    /// Validations since the last improvement.
    pub stale: u64,
    pub factor: f64,
    pub patience: u64,
    pub min_lr: f64,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: u64, min_lr: f64) -> Self {
        Self {
            lr: lr.max(min_lr),
            best: f64::NEG_INFINITY,
            stale: 0,
            factor,
            patience,
            min_lr,
        }
    }

    /// Records one validation result and returns the learning rate to use.
    pub fn step(&mut self, metric: f64) -> f64 {
        if metric > self.best {
            self.best = metric;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.stale = 0;
            }
        }
        self.lr
    }
}

impl Default for PlateauScheduler {
    fn default() -> Self {
        Self::new(0.004, 0.5, 5, 1e-7)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn improving_keeps_initial_rate() {
        let mut s = PlateauScheduler::default();
        for e in 0..30 {
            assert_eq!(s.step(e as f64), 0.004);
        }
    }

    #[test]
    fn five_stale_validations_halve() {
        let mut s = PlateauScheduler::default();
        s.step(10.0);
        for _ in 0..4 {
            assert_eq!(s.step(9.0), 0.004);
        }
        assert_eq!(s.step(10.0), 0.002);
    }

    #[test]
    fn floor_at_min_lr() {
        let mut s = PlateauScheduler::default();
        for _ in 0..10_000 {
            s.step(0.0);
        }
        assert_eq!(s.lr, 1e-7);
    }

    proptest! {
        #[test]
        fn non_increasing_and_bounded(metrics in prop::collection::vec(0.0f64..100.0, 1..200)) {
            let mut s = PlateauScheduler::default();
            let mut prev = s.lr;
            for m in metrics {
                let lr = s.step(m);
                prop_assert!(lr <= prev);
                prop_assert!(lr >= s.min_lr);
                prev = lr;
            }
        }
    }
}
