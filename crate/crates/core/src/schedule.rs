//! Forward-diffusion noise schedule: per-step retention factors and their
//! cumulative products, plus the closed-form jump to any timestep.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear-beta schedule. `alphas[t] = 1 - beta_t`; `alpha_bars[t]` is the
/// running product up to and including step `t`. The reverse-process variance
/// is fixed (not learned) to the forward `beta_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Build a schedule with linearly spaced betas.
pub fn make_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if timesteps < 2 {
        return Err(Error::validation(format!(
            "timesteps {timesteps} must be at least 2"
        )));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::validation(format!(
            "beta range ({beta_start}, {beta_end}) must satisfy 0 < start <= end < 1"
        )));
    }
    let n = timesteps;
    let mut betas = Vec::with_capacity(n);
    for t in 0..n {
        let frac = if n == 1 { 0.0 } else { t as f64 / (n - 1) as f64 };
        betas.push(beta_start + (beta_end - beta_start) * frac);
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(n);
    let mut prod = 1.0;
    for &a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule {
        timesteps,
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.timesteps {
            return Err(Error::validation(format!(
                "timestep {t} out of range 0..{}",
                self.timesteps
            )));
        }
        Ok(())
    }

    /// Closed-form forward jump: sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
    pub fn add_noise(&self, z0: &Tensor, t: usize, epsilon: &Tensor) -> Result<Tensor> {
        self.check_step(t)?;
        z0.check_same_shape(epsilon, "add_noise")?;
        let abar = self.alpha_bars[t];
        let signal = libm::sqrt(abar);
        let noise = libm::sqrt(1.0 - abar);
        let data = z0
            .data()
            .iter()
            .zip(epsilon.data())
            .map(|(z, e)| signal * z + noise * e)
            .collect();
        Ok(Tensor::new(data, z0.shape()))
    }

    /// Single forward transition from step t-1 to t (the recursive form the
    /// closed-form jump is checked against).
    pub fn add_noise_single_step(&self, z_prev: &Tensor, t: usize, epsilon: &Tensor) -> Result<Tensor> {
        self.check_step(t)?;
        z_prev.check_same_shape(epsilon, "add_noise_single_step")?;
        let a = self.alphas[t];
        let signal = libm::sqrt(a);
        let noise = libm::sqrt(1.0 - a);
        let data = z_prev
            .data()
            .iter()
            .zip(epsilon.data())
            .map(|(z, e)| signal * z + noise * e)
            .collect();
        Ok(Tensor::new(data, z_prev.shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn hand_product_oracle() {
        let s = make_schedule(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alphas, vec![0.5, 0.5]);
        assert_eq!(s.alpha_bars, vec![0.5, 0.25]);
    }

    #[test]
    fn alpha_bars_strictly_decreasing() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        for w in s.alpha_bars.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(s.alphas.iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn single_timestep_rejected() {
        assert!(make_schedule(1, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 1.0).is_err());
    }

    #[test]
    fn near_identity_head() {
        // With a tiny beta head, abar_0 stays close to 1 and the t=0 jump is
        // nearly the identity on z0.
        let s = make_schedule(100, 1e-6, 1e-6).unwrap();
        let mut rng = Rng::new(0);
        let z0 = Tensor::randn(&mut rng, 1.0, &[4, 4]);
        let eps = Tensor::randn(&mut rng, 1.0, &[4, 4]);
        let z_t = s.add_noise(&z0, 0, &eps).unwrap();
        for (a, b) in z_t.data().iter().zip(z0.data()) {
            assert!((a - b).abs() < 1e-2);
        }
        assert!(s.alpha_bars[0] >= 0.99);
    }

    #[test]
    fn zero_signal_case() {
        let s = make_schedule(10, 0.1, 0.2).unwrap();
        let z0 = Tensor::zeros(&[3, 2]);
        let mut rng = Rng::new(5);
        let eps = Tensor::randn(&mut rng, 1.0, &[3, 2]);
        let t = 4;
        let z_t = s.add_noise(&z0, t, &eps).unwrap();
        let scale = libm::sqrt(1.0 - s.alpha_bars[t]);
        for (z, e) in z_t.data().iter().zip(eps.data()) {
            assert_eq!(*z, scale * e);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let s = make_schedule(10, 0.1, 0.2).unwrap();
        let z0 = Tensor::zeros(&[3, 2]);
        let eps = Tensor::zeros(&[2, 3]);
        assert!(s.add_noise(&z0, 0, &eps).is_err());
    }

    #[test]
    fn out_of_range_timestep_rejected() {
        let s = make_schedule(10, 0.1, 0.2).unwrap();
        let z0 = Tensor::zeros(&[2]);
        assert!(s.add_noise(&z0, 10, &z0.clone()).is_err());
    }

    /// Monte-Carlo oracle: composing T single-step transitions with fresh
    /// noise matches the closed form in distribution.
    #[test]
    fn closed_form_matches_recursion_in_distribution() {
        let t_steps = 20;
        let s = make_schedule(t_steps, 0.01, 0.05).unwrap();
        let mut rng = Rng::new(42);
        let z0 = Tensor::randn(&mut rng, 1.0, &[8]);
        let n = 10_000;

        let k = z0.numel();
        let mut sums = vec![0.0; k];
        let mut sq_sums = vec![0.0; k];
        for _ in 0..n {
            let mut z = z0.clone();
            for t in 0..t_steps {
                let eps = Tensor::randn(&mut rng, 1.0, &[8]);
                z = s.add_noise_single_step(&z, t, &eps).unwrap();
            }
            for (i, v) in z.data().iter().enumerate() {
                sums[i] += v;
                sq_sums[i] += v * v;
            }
        }

        let abar = s.alpha_bars[t_steps - 1];
        let expected_std = libm::sqrt(1.0 - abar);
        let signal = libm::sqrt(abar);
        let nf = n as f64;
        for i in 0..k {
            let mean = sums[i] / nf;
            let var = sq_sums[i] / nf - mean * mean;
            let expected_mean = signal * z0.data()[i];
            let se_mean = expected_std / libm::sqrt(nf);
            assert!(
                (mean - expected_mean).abs() < 3.0 * se_mean,
                "element {i}: mean {mean} vs {expected_mean} (3se {})",
                3.0 * se_mean
            );
            let expected_var = 1.0 - abar;
            let se_var = expected_var * libm::sqrt(2.0 / (nf - 1.0));
            assert!(
                (var - expected_var).abs() < 3.0 * se_var,
                "element {i}: var {var} vs {expected_var} (3se {})",
                3.0 * se_var
            );
        }
    }
}
