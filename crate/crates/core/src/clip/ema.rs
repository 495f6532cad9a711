use crate::error::{Error, Result};

/// Per-group exponential moving average of gradient norms.
///
/// `S_j <- beta * S_j + (1 - beta) * norm`. A group's first observation
/// initializes `S_j` directly, so there is no warm-up bias and no
/// bias-correction term.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaScaleState {
    beta: f64,
    scales: Vec<f64>,
    initialized: Vec<bool>,
}

impl EmaScaleState {
    pub fn new(beta: f64, groups: usize) -> Result<Self> {
        validate_beta(beta)?;
        Ok(Self {
            beta,
            scales: vec![0.0; groups],
            initialized: vec![false; groups],
        })
    }

    pub(crate) fn from_parts(beta: f64, scales: Vec<f64>, initialized: Vec<bool>) -> Result<Self> {
        validate_beta(beta)?;
        if scales.len() != initialized.len() {
            return Err(Error::config("ema", "scale and flag counts differ"));
        }
        if let Some(s) = scales.iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(Error::config("ema.scale", format!("invalid scale {s}")));
        }
        Ok(Self {
            beta,
            scales,
            initialized,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    /// Current `S_j`, or `None` before the group's first observation.
    pub fn scale(&self, group: usize) -> Option<f64> {
        self.initialized[group].then(|| self.scales[group])
    }

    pub fn is_initialized(&self, group: usize) -> bool {
        self.initialized[group]
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn initialized(&self) -> &[bool] {
        &self.initialized
    }

    /// Folds `norm` into group `group` and returns the new `S_j`.
    ///
    /// `norm` must be finite and nonnegative; callers obtain it from
    /// [`group_norm`](crate::clip::group_norm), which rejects non-finite input.
    pub fn update(&mut self, group: usize, norm: f64) -> f64 {
        debug_assert!(norm.is_finite() && norm >= 0.0, "bad norm {norm}");
        let s = if self.initialized[group] {
            self.beta * self.scales[group] + (1.0 - self.beta) * norm
        } else {
            self.initialized[group] = true;
            norm
        };
        self.scales[group] = s;
        s
    }
}

fn validate_beta(beta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::config(
            "beta",
            format!("must lie in [0, 1), got {beta}"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_observation_initializes() {
        let mut ema = EmaScaleState::new(0.95, 1).unwrap();
        assert_eq!(ema.scale(0), None);
        assert_eq!(ema.update(0, 2.0), 2.0);
        assert_eq!(ema.scale(0), Some(2.0));
    }

    #[test]
    fn single_update_matches_scalar_reference() {
        let mut ema = EmaScaleState::from_parts(0.95, vec![1.0], vec![true]).unwrap();
        let expected = 0.95 * 1.0 + 0.05 * 2.0;
        assert!((ema.update(0, 2.0) - expected).abs() < 1e-15);
        assert!((expected - 1.05f64).abs() < 1e-12);
    }

    #[test]
    fn constant_input_contracts_geometrically() {
        let beta = 0.95;
        let g = 3.0;
        let mut ema = EmaScaleState::from_parts(beta, vec![0.5], vec![true]).unwrap();
        for _ in 0..200 {
            ema.update(0, g);
        }
        let bound = beta.powi(200) * 2.5;
        assert!((ema.scale(0).unwrap() - g).abs() <= bound * (1.0 + 1e-9));
    }

    #[test]
    fn beta_range_enforced() {
        assert!(EmaScaleState::new(1.0, 1).is_err());
        assert!(EmaScaleState::new(-0.1, 1).is_err());
        assert!(EmaScaleState::new(f64::NAN, 1).is_err());
        assert!(EmaScaleState::new(0.0, 1).is_ok());
    }

    #[test]
    fn groups_do_not_interact() {
        let mut ema = EmaScaleState::new(0.9, 2).unwrap();
        ema.update(0, 1.0);
        ema.update(1, 5.0);
        ema.update(0, 100.0);
        assert_eq!(ema.scale(1), Some(5.0));
    }
}
