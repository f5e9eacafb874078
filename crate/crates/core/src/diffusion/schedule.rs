//! Forward noising and the deterministic DDIM update, over a linear beta
//! schedule with a coarse sampling subsequence.
//!
//! Sampling works over `t_sample + 1` nodes: node 0 is clean data (alpha-bar
//! treated as exactly 1) and node i >= 1 sits at training timestep
//! `taus[i-1]`. Both the sampling step i -> i-1 and the inversion step
//! i-1 -> i evaluate the model at node i's timestep, which makes the two
//! maps exact algebraic inverses for a shared noise prediction.

use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Cumulative alpha products, indexed by training timestep.
    pub alphas_bar: Vec<f64>,
    pub t_sample: usize,
    /// Training timesteps of sampling nodes 1..=t_sample, ascending.
    pub taus: Vec<usize>,
}

impl NoiseSchedule {
    pub fn new(t_train: usize, beta_start: f64, beta_end: f64, t_sample: usize) -> Result<Self> {
        if t_train == 0 || t_sample == 0 || t_sample > t_train {
            return Err(Error::config(format!(
                "schedule: t_train {t_train}, t_sample {t_sample}"
            )));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "schedule: betas ({beta_start}, {beta_end}) out of range"
            )));
        }
        let mut alphas_bar = Vec::with_capacity(t_train);
        let mut prod = 1.0;
        for i in 0..t_train {
            let beta = if t_train == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_train - 1) as f64
            };
            prod *= 1.0 - beta;
            alphas_bar.push(prod);
        }
        debug_assert!(alphas_bar.windows(2).all(|w| w[1] < w[0]));
        let step = t_train / t_sample;
        let taus: Vec<usize> = (0..t_sample).map(|i| (i + 1) * step - 1).collect();
        Ok(NoiseSchedule { t_train, beta_start, beta_end, alphas_bar, t_sample, taus })
    }

    /// The default schedule: 1000 training steps, betas 1e-4..0.02, 20
    /// sampling steps.
    pub fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::new(1000, 1e-4, 0.02, 20).expect("default schedule")
    }

    pub fn abar(&self, t: usize) -> Result<f64> {
        self.alphas_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::config(format!("timestep {t} outside [0, {})", self.t_train)))
    }

    /// Alpha-bar at sampling node `i` in 0..=t_sample.
    pub fn node_abar(&self, i: usize) -> Result<f64> {
        if i == 0 {
            return Ok(1.0);
        }
        let tau = *self
            .taus
            .get(i - 1)
            .ok_or_else(|| Error::config(format!("sampling node {i} outside 0..={}", self.t_sample)))?;
        self.abar(tau)
    }

    /// Training timestep the model sees at sampling node `i >= 1`.
    pub fn node_timestep(&self, i: usize) -> Result<usize> {
        self.taus
            .get(i.wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::config(format!("sampling node {i} has no timestep")))
    }

    /// `z_t = sqrt(abar) z0 + sqrt(1 - abar) noise` at training timestep `t`.
    pub fn forward_noise(&self, z0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        let abar = self.abar(t)?;
        scale_mix(z0, noise, abar)
    }

    /// Deterministic DDIM update from timestep `t` to `t_prev`
    /// (`None` = the clean endpoint). Requires `t_prev < t`.
    pub fn ddim_step(&self, z_t: &Tensor, eps: &Tensor, t: usize, t_prev: Option<usize>) -> Result<Tensor> {
        let a = self.abar(t)?;
        let b = match t_prev {
            Some(tp) => {
                if tp >= t {
                    return Err(Error::config(format!("ddim_step: t_prev {tp} >= t {t}")));
                }
                self.abar(tp)?
            }
            None => 1.0,
        };
        ddim_move(z_t, eps, a, b)
    }

    /// Exact inverse of `ddim_step` for the same `eps`: moves from `t_from`
    /// (`None` = clean) up to `t_to`.
    pub fn ddim_invert_step(
        &self,
        z: &Tensor,
        eps: &Tensor,
        t_from: Option<usize>,
        t_to: usize,
    ) -> Result<Tensor> {
        let a = match t_from {
            Some(tf) => {
                if tf >= t_to {
                    return Err(Error::config(format!("ddim_invert_step: t_from {tf} >= t_to {t_to}")));
                }
                self.abar(tf)?
            }
            None => 1.0,
        };
        let b = self.abar(t_to)?;
        ddim_move(z, eps, a, b)
    }
}

/// `sqrt(abar) z0 + sqrt(1 - abar) noise`.
pub fn scale_mix(z0: &Tensor, noise: &Tensor, abar: f64) -> Result<Tensor> {
    if z0.shape() != noise.shape() {
        return Err(Error::shape(format!(
            "forward noise: z0 {:?} vs noise {:?}",
            z0.shape(),
            noise.shape()
        )));
    }
    if abar == 1.0 {
        // Exact clean endpoint.
        return Ok(z0.clone());
    }
    z0.scale(abar.sqrt()).add(&noise.scale((1.0 - abar).sqrt()))
}

/// The shared DDIM transport between two alpha-bar levels:
/// `sqrt(to/from) z + (sqrt(1-to) - sqrt(to/from) sqrt(1-from)) eps`.
pub fn ddim_move(z: &Tensor, eps: &Tensor, abar_from: f64, abar_to: f64) -> Result<Tensor> {
    if z.shape() != eps.shape() {
        return Err(Error::shape(format!(
            "ddim: z {:?} vs eps {:?}",
            z.shape(),
            eps.shape()
        )));
    }
    let ratio = (abar_to / abar_from).sqrt();
    let coeff = (1.0 - abar_to).sqrt() - ratio * (1.0 - abar_from).sqrt();
    z.scale(ratio).add(&eps.scale(coeff))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::default_schedule();
        assert_eq!(s.alphas_bar.len(), 1000);
        assert!(s.alphas_bar[0] > 0.999, "abar[0] = {}", s.alphas_bar[0]);
        assert!(s.alphas_bar.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(s.taus.len(), 20);
        assert_eq!(s.taus[0], 49);
        assert_eq!(*s.taus.last().unwrap(), 999);
        assert!(NoiseSchedule::new(10, 0.0, 0.1, 2).is_err());
        assert!(NoiseSchedule::new(10, 0.1, 0.2, 11).is_err());
    }

    #[test]
    fn clean_alpha_returns_input_bitwise() {
        let mut r = rng::rng(1);
        let z0 = Tensor::randn(&[3, 4, 4], &mut r);
        let n = Tensor::randn(&[3, 4, 4], &mut r);
        let z = scale_mix(&z0, &n, 1.0).unwrap();
        assert_eq!(z.to_vec(), z0.to_vec());
    }

    #[test]
    fn zero_image_pure_noise_scaling() {
        let s = NoiseSchedule::default_schedule();
        let z0 = Tensor::zeros(&[2, 3]);
        let mut r = rng::rng(2);
        let n = Tensor::randn(&[2, 3], &mut r);
        let t = 499;
        let z = s.forward_noise(&z0, t, &n).unwrap();
        let want = (1.0 - s.abar(t).unwrap()).sqrt();
        for (zi, ni) in z.to_vec().iter().zip(n.to_vec()) {
            assert!((zi - want * ni).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_noise_matches_closed_form() {
        let s = NoiseSchedule::default_schedule();
        let mut r = rng::rng(3);
        let z0 = Tensor::randn(&[5], &mut r);
        let n = Tensor::randn(&[5], &mut r);
        for t in [0, 17, 499, 999] {
            let z = s.forward_noise(&z0, t, &n).unwrap();
            let a = s.abar(t).unwrap();
            for ((zi, z0i), ni) in z.to_vec().iter().zip(z0.to_vec()).zip(n.to_vec()) {
                let want = a.sqrt() * z0i + (1.0 - a).sqrt() * ni;
                assert!((zi - want).abs() < 1e-12);
            }
        }
        assert!(s.forward_noise(&z0, 1000, &n).is_err());
    }

    #[test]
    fn zero_eps_step_is_pure_rescale() {
        let s = NoiseSchedule::default_schedule();
        let mut r = rng::rng(4);
        let z = Tensor::randn(&[4], &mut r);
        let eps = Tensor::zeros(&[4]);
        let (t, tp) = (999, 949);
        let out = s.ddim_step(&z, &eps, t, Some(tp)).unwrap();
        let ratio = (s.abar(tp).unwrap() / s.abar(t).unwrap()).sqrt();
        for (o, zi) in out.to_vec().iter().zip(z.to_vec()) {
            assert!((o - ratio * zi).abs() < 1e-12);
        }
    }

    #[test]
    fn step_then_inverse_step_roundtrips() {
        let s = NoiseSchedule::default_schedule();
        let mut r = rng::rng(5);
        let z = Tensor::randn(&[3, 2, 2], &mut r);
        let eps = Tensor::randn(&[3, 2, 2], &mut r);
        for (t, tp) in [(999, Some(949)), (49, None), (499, Some(449))] {
            let down = s.ddim_step(&z, &eps, t, tp).unwrap();
            let back = s.ddim_invert_step(&down, &eps, tp, t).unwrap();
            for (b, zi) in back.to_vec().iter().zip(z.to_vec()) {
                assert!((b - zi).abs() < 1e-10, "{b} vs {zi}");
            }
        }
    }

    #[test]
    fn twenty_zero_eps_steps_telescope() {
        let s = NoiseSchedule::default_schedule();
        let mut r = rng::rng(6);
        let z_top = Tensor::randn(&[6], &mut r);
        let eps = Tensor::zeros(&[6]);
        let mut z = z_top.clone();
        for i in (1..=s.t_sample).rev() {
            let t = s.node_timestep(i).unwrap();
            let tp = if i >= 2 { Some(s.node_timestep(i - 1).unwrap()) } else { None };
            z = s.ddim_step(&z, &eps, t, tp).unwrap();
        }
        let want = 1.0 / s.abar(999).unwrap().sqrt();
        for (zi, ti) in z.to_vec().iter().zip(z_top.to_vec()) {
            assert!((zi - want * ti).abs() < 1e-9 * want, "{zi} vs {}", want * ti);
        }
    }
}
