/// Learning rate as a function of the (0-based) epoch.
///
/// Between two breakpoints `(e0, r0)` and `(e1, r1)` the rate moves
/// geometrically, `r0 · (r1/r0)^((e − e0)/(e1 − e0))`; two breakpoints at the
/// same epoch give a step. Before the first breakpoint the first rate holds,
/// after the last the last rate holds.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningRateSchedule {
    breakpoints: Vec<(usize, f64)>,
}

impl LearningRateSchedule {
    pub fn new(breakpoints: Vec<(usize, f64)>) -> Result<Self, String> {
        if breakpoints.is_empty() {
            return Err("learning-rate schedule needs at least one breakpoint".into());
        }
        if let Some(&(e, r)) = breakpoints.iter().find(|(_, r)| !(r.is_finite() && *r >= 0.0)) {
            return Err(format!("learning rate {r} at epoch {e} must be finite and non-negative"));
        }
        if breakpoints.windows(2).any(|w| w[1].0 < w[0].0) {
            return Err("learning-rate breakpoint epochs must be non-decreasing".into());
        }
        if breakpoints.len() > 1 && breakpoints.iter().any(|&(_, r)| r == 0.0) {
            return Err("an interpolated learning-rate schedule needs positive rates".into());
        }
        Ok(LearningRateSchedule { breakpoints })
    }

    pub fn constant(rate: f64) -> Self {
        LearningRateSchedule::new(vec![(0, rate)]).expect("valid constant rate")
    }

    pub fn breakpoints(&self) -> &[(usize, f64)] {
        &self.breakpoints
    }

    pub fn rate_at(&self, epoch: usize) -> f64 {
        let bp = &self.breakpoints;
        let after = bp.partition_point(|&(e, _)| e <= epoch);
        if after == 0 {
            return bp[0].1;
        }
        if after == bp.len() {
            return bp[after - 1].1;
        }
        let (e0, r0) = bp[after - 1];
        let (e1, r1) = bp[after];
        let t = (epoch - e0) as f64 / (e1 - e0) as f64;
        r0 * (r1 / r0).powf(t)
    }
}
