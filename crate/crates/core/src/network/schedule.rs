/// Linear ramps for the learning rate and momentum, indexed by epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub lr_epochs: f64,
    pub momentum_start: f64,
    pub momentum_max: f64,
    pub momentum_saturate_epoch: f64,
}

fn ramp(from: f64, to: f64, span: f64, t: f64) -> f64 {
    if span <= 0.0 || t >= span {
        return to;
    }
    from + (to - from) * (t.max(0.0) / span)
}

impl Schedule {
    /// Decays linearly from `lr_start` to `lr_end` over `lr_epochs`, then holds.
    pub fn lr_at(&self, epoch: f64) -> f64 {
        ramp(self.lr_start, self.lr_end, self.lr_epochs, epoch)
    }

    /// Rises linearly to `momentum_max` by `momentum_saturate_epoch`, then holds.
    pub fn momentum_at(&self, epoch: f64) -> f64 {
        ramp(
            self.momentum_start,
            self.momentum_max,
            self.momentum_saturate_epoch,
            epoch,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s() -> Schedule {
        Schedule {
            lr_start: 0.1,
            lr_end: 0.01,
            lr_epochs: 100.0,
            momentum_start: 0.5,
            momentum_max: 0.7,
            momentum_saturate_epoch: 10.0,
        }
    }

    #[test]
    fn lr_ramp() {
        assert!((s().lr_at(50.0) - 0.055).abs() < 1e-15);
        assert_eq!(s().lr_at(0.0), 0.1);
        assert_eq!(s().lr_at(100.0), 0.01);
        assert_eq!(s().lr_at(1e6), 0.01);
    }

    #[test]
    fn momentum_ramp() {
        assert!((s().momentum_at(5.0) - 0.6).abs() < 1e-15);
        assert_eq!(s().momentum_at(10.0), 0.7);
        assert_eq!(s().momentum_at(11.0), 0.7);
        let flat = Schedule {
            momentum_saturate_epoch: 0.0,
            ..s()
        };
        assert_eq!(flat.momentum_at(0.0), 0.7);
    }
}
