use serde::{Deserialize, Serialize};

use super::GpError;

/// Squared-exponential covariance with additive observation noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelParams {
    /// Prior variance of the process (state-units²).
    pub signal_variance: f64,
    /// Correlation time (s).
    pub length_scale: f64,
    /// Measurement noise variance (state-units²).
    pub noise_variance: f64,
}

impl KernelParams {
    pub fn new(
        signal_variance: f64,
        length_scale: f64,
        noise_variance: f64,
    ) -> Result<Self, GpError> {
        let p = Self {
            signal_variance,
            length_scale,
            noise_variance,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GpError> {
        for (name, v) in [
            ("signal_variance", self.signal_variance),
            ("length_scale", self.length_scale),
            ("noise_variance", self.noise_variance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GpError::InvalidParams(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Noise-free covariance between two times.
    #[inline]
    pub fn covariance(&self, a: f64, b: f64) -> f64 {
        let r = (a - b) / self.length_scale;
        self.signal_variance * (-0.5 * r * r).exp()
    }

    pub fn with_noise(self, noise_variance: f64) -> Self {
        Self {
            noise_variance,
            ..self
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_positive() {
        assert!(KernelParams::new(1.0, 1.0, 0.0).is_err());
        assert!(KernelParams::new(-1.0, 1.0, 1e-3).is_err());
        assert!(KernelParams::new(1.0, f64::NAN, 1e-3).is_err());
        assert!(KernelParams::new(1.0, 1.0, 1e-3).is_ok());
    }

    #[test]
    fn covariance_shape() {
        let k = KernelParams::new(2.0, 0.5, 1e-3).unwrap();
        assert_eq!(k.covariance(3.0, 3.0), 2.0);
        assert!((k.covariance(0.0, 0.5) - 2.0 * (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(k.covariance(1.0, 2.0), k.covariance(2.0, 1.0));
    }
}
