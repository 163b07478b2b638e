//! x0-parameterised DDPM machinery.
//!
//! Timesteps are 1-based: `t = 1` is the least noisy step and `t = T` the
//! most noisy. Tables are held in `f64` and cast at the point of use.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{BinaryMask, Field};
use crate::scalar::Scalar;

const COSINE_S: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub beta_tilde: Vec<f64>,
    pub sigma2_floor: f64,
}

fn cosine_f(u: f64) -> f64 {
    let c = ((u + COSINE_S) / (1.0 + COSINE_S) * std::f64::consts::FRAC_PI_2).cos();
    c * c
}

/// Squared-cosine schedule with offset `s = 0.008` and `beta <= 0.999`.
pub fn make_cosine_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Argument(format!("schedule needs T >= 2, got {steps}")));
    }
    let tf = steps as f64;
    let f0 = cosine_f(0.0);
    let mut beta = Vec::with_capacity(steps);
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut beta_tilde = Vec::with_capacity(steps);
    let mut prev = 1.0;
    for t in 1..=steps {
        let target_prev = cosine_f((t - 1) as f64 / tf) / f0;
        let target = cosine_f(t as f64 / tf) / f0;
        let b = (1.0 - target / target_prev).clamp(0.0, MAX_BETA);
        let ab = prev * (1.0 - b);
        beta.push(b);
        alpha_bar.push(ab);
        beta_tilde.push((1.0 - prev) / (1.0 - ab) * b);
        prev = ab;
    }
    let sigma2_floor = beta_tilde[1];
    Ok(NoiseSchedule {
        steps,
        beta,
        alpha_bar,
        beta_tilde,
        sigma2_floor,
    })
}

impl NoiseSchedule {
    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::Argument(format!("timestep {t} outside [1, {}]", self.steps)));
        }
        Ok(())
    }

    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// `alpha_bar_{t-1}` with `alpha_bar_0 = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bar[t - 2]
        }
    }

    pub fn beta_tilde_at(&self, t: usize) -> f64 {
        self.beta_tilde[t - 1]
    }

    /// Loss weight of the data term. Uniform.
    pub fn lambda(&self, _t: usize) -> f64 {
        1.0
    }

    /// Coefficients `(c_x0, c_xt)` of the posterior mean.
    pub fn posterior_mean_coefs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar_at(t);
        let ab_prev = self.alpha_bar_prev(t);
        let b = self.beta_at(t);
        let c_x0 = ab_prev.sqrt() * b / (1.0 - ab);
        let c_xt = (1.0 - b).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (c_x0, c_xt)
    }
}

/// Residual tolerance `max(beta_tilde_t, beta_tilde_2)`.
pub fn posterior_sigma2(t: usize, sched: &NoiseSchedule) -> Result<f64> {
    sched.check_t(t)?;
    Ok(sched.beta_tilde_at(t).max(sched.sigma2_floor))
}

pub fn forward_diffuse_slice<T: Scalar>(x0: &[T], eps: &[T], t: usize, sched: &NoiseSchedule) -> Result<Vec<T>> {
    sched.check_t(t)?;
    if x0.len() != eps.len() {
        return Err(Error::Shape(format!("x0 has {} entries, eps {}", x0.len(), eps.len())));
    }
    let ab = sched.alpha_bar_at(t);
    let a = T::lit(ab.sqrt());
    let s = T::lit((1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + s * e).collect())
}

pub fn forward_diffuse<T: Scalar>(x0: &Field<T>, t: usize, eps: &Field<T>, sched: &NoiseSchedule) -> Result<Field<T>> {
    if !x0.shape_matches(eps) {
        return Err(Error::Shape("x0 and eps differ in shape".into()));
    }
    let values = forward_diffuse_slice(&x0.values, &eps.values, t, sched)?;
    Field::from_vec(x0.grid, x0.channels, values)
}

/// `lambda_t * ||x0 - x0_hat||^2`.
pub fn data_loss_slice<T: Scalar>(x0: &[T], x0_hat: &[T], lambda: T) -> T {
    let s: T = x0.iter().zip(x0_hat).map(|(&a, &b)| (a - b) * (a - b)).sum();
    lambda * s
}

pub fn data_loss<T: Scalar>(x0: &Field<T>, x0_hat: &Field<T>, t: usize, sched: &NoiseSchedule) -> Result<T> {
    sched.check_t(t)?;
    if !x0.shape_matches(x0_hat) {
        return Err(Error::Shape("x0 and x0_hat differ in shape".into()));
    }
    Ok(data_loss_slice(&x0.values, &x0_hat.values, T::lit(sched.lambda(t))))
}

/// One ancestral step. `noise` is ignored at `t = 1`.
pub fn reverse_step_slice<T: Scalar>(
    x_t: &[T],
    x0_hat: &[T],
    t: usize,
    sched: &NoiseSchedule,
    noise: &[T],
) -> Result<Vec<T>> {
    sched.check_t(t)?;
    if x_t.len() != x0_hat.len() || x_t.len() != noise.len() {
        return Err(Error::Shape("reverse step operands differ in length".into()));
    }
    let (c0, ct) = sched.posterior_mean_coefs(t);
    let (c0, ct) = (T::lit(c0), T::lit(ct));
    let sd = if t > 1 {
        T::lit(sched.beta_tilde_at(t).sqrt())
    } else {
        T::zero()
    };
    Ok(x_t
        .iter()
        .zip(x0_hat)
        .zip(noise)
        .map(|((&xt, &x0), &z)| c0 * x0 + ct * xt + sd * z)
        .collect())
}

pub fn reverse_step<T: Scalar>(
    x_t: &Field<T>,
    x0_hat: &Field<T>,
    t: usize,
    sched: &NoiseSchedule,
    noise: &Field<T>,
) -> Result<Field<T>> {
    if !x_t.shape_matches(x0_hat) || !x_t.shape_matches(noise) {
        return Err(Error::Shape("reverse step fields differ in shape".into()));
    }
    let values = reverse_step_slice(&x_t.values, &x0_hat.values, t, sched, &noise.values)?;
    Field::from_vec(x_t.grid, x_t.channels, values)
}

/// Overwrite entries with `mask = 1` in every channel.
pub fn clamp_observed<T: Scalar>(x: &Field<T>, mask: &BinaryMask, observed: &Field<T>) -> Result<Field<T>> {
    if !x.shape_matches(observed) || mask.grid != x.grid {
        return Err(Error::Shape("clamp operands differ in shape".into()));
    }
    let n = x.grid.len();
    let mut out = x.clone();
    for c in 0..x.channels {
        for (k, &m) in mask.values.iter().enumerate() {
            if m == 1 {
                out.values[c * n + k] = observed.values[c * n + k];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmaState<T> {
    pub decay: T,
    pub shadow: Vec<Vec<T>>,
}

impl<T: Scalar> EmaState<T> {
    pub fn new(decay: T, init: Vec<Vec<T>>) -> Result<Self> {
        if !(decay > T::zero() && decay < T::one()) {
            return Err(Error::Argument(format!("EMA decay {decay} outside (0, 1)")));
        }
        Ok(Self { decay, shadow: init })
    }

    /// `shadow <- decay * shadow + (1 - decay) * live`.
    pub fn update<'a>(&mut self, live: impl IntoIterator<Item = &'a [T]>) -> Result<()> {
        let d = self.decay;
        let e = T::one() - d;
        let mut seen = 0;
        for (k, p) in live.into_iter().enumerate() {
            let s = self
                .shadow
                .get_mut(k)
                .ok_or_else(|| Error::Shape(format!("EMA has {} tensors, live has more", k)))?;
            if s.len() != p.len() {
                return Err(Error::Shape(format!("EMA tensor {k}: {} vs {}", s.len(), p.len())));
            }
            for (a, &b) in s.iter_mut().zip(p) {
                *a = d * *a + e * b;
            }
            seen += 1;
        }
        if seen != self.shadow.len() {
            return Err(Error::Shape(format!("EMA has {} tensors, live has {seen}", self.shadow.len())));
        }
        Ok(())
    }
}

pub fn ema_update<T: Scalar>(mut ema: EmaState<T>, live: &[Vec<T>]) -> Result<EmaState<T>> {
    ema.update(live.iter().map(|v| v.as_slice()))?;
    Ok(ema)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{make_observation_mask, Grid2D};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn grid(n: usize) -> Grid2D {
        Grid2D::unit_square(n).unwrap()
    }

    #[test]
    fn schedule_shape_and_monotone() {
        let s = make_cosine_schedule(1000).unwrap();
        assert!(s.alpha_bar_at(1) < 1.0);
        for t in 2..=1000 {
            assert!(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
            assert!(s.beta_at(t) > 0.0 && s.beta_at(t) < 1.0);
        }
        assert_eq!(s.beta_tilde_at(1), 0.0);
        assert!(make_cosine_schedule(1).is_err());
    }

    #[test]
    fn alpha_bar_end_matches_closed_form() {
        // f(1) = cos^2(pi/2) vanishes, so the product is set by the 0.999 clip.
        let s = make_cosine_schedule(1000).unwrap();
        let f = |u: f64| ((u + 0.008) / 1.008 * std::f64::consts::PI / 2.0).cos().powi(2);
        let ab_999 = f(0.999) / f(0.0);
        assert!((s.alpha_bar_at(999) - ab_999).abs() < 1e-12);
        assert!(s.alpha_bar_at(1000) < 1e-3);
        assert!((s.alpha_bar_at(1000) - ab_999 * 0.001).abs() < 1e-15);
    }

    #[test]
    fn beta_tilde_ratio_tends_to_one() {
        let s = make_cosine_schedule(1000).unwrap();
        let f = |u: f64| ((u + 0.008) / 1.008 * std::f64::consts::PI / 2.0).cos().powi(2);
        let ab_prev = f(0.999) / f(0.0);
        let ratio = s.beta_tilde_at(1000) / s.beta_at(1000);
        assert!((ratio - (1.0 - ab_prev) / (1.0 - ab_prev * 0.001)).abs() < 1e-12);
        assert!((1.0 - ratio) < 1e-5);
    }

    #[test]
    fn sigma2_floor_and_tail() {
        let s = make_cosine_schedule(100).unwrap();
        assert_eq!(posterior_sigma2(1, &s).unwrap(), s.beta_tilde_at(2));
        assert_eq!(posterior_sigma2(100, &s).unwrap(), s.beta_tilde_at(100));
        for t in 2..=100 {
            assert_eq!(posterior_sigma2(t, &s).unwrap(), s.beta_tilde_at(t));
        }
        assert!(posterior_sigma2(0, &s).is_err());
        assert!(posterior_sigma2(101, &s).is_err());
    }

    #[test]
    fn forward_basic_cases() {
        let s = make_cosine_schedule(50).unwrap();
        let g = grid(4);
        let x0 = Field::from_fn(g, |x, y| x - 2.0 * y);
        let zero = Field::<f64>::zeros(g, 1);
        let xt = forward_diffuse(&x0, 7, &zero, &s).unwrap();
        let a = s.alpha_bar_at(7).sqrt();
        for (u, v) in xt.values.iter().zip(&x0.values) {
            assert!((u - a * v).abs() < 1e-15);
        }
        assert!(forward_diffuse(&x0, 0, &zero, &s).is_err());
        assert!(forward_diffuse(&x0, 51, &zero, &s).is_err());
        // t = 1 of a long schedule is nearly the identity.
        let long = make_cosine_schedule(4000).unwrap();
        let one = Field::<f64>::constant(g, 1, 1.0);
        let x1 = forward_diffuse(&x0, 1, &one, &long).unwrap();
        for (u, v) in x1.values.iter().zip(&x0.values) {
            assert!((u - v).abs() < 0.01);
        }
    }

    #[test]
    fn forward_variance_monte_carlo() {
        let s = make_cosine_schedule(100).unwrap();
        let t = 40;
        let x0 = [0.3f64, -1.2, 2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let eps: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            let xt = forward_diffuse_slice(&x0, &eps, t, &s).unwrap();
            for k in 0..3 {
                sum[k] += xt[k];
                sq[k] += xt[k] * xt[k];
            }
        }
        let want = 1.0 - s.alpha_bar_at(t);
        for k in 0..3 {
            let m = sum[k] / n as f64;
            let var = sq[k] / n as f64 - m * m;
            assert!((var / want - 1.0).abs() < 0.03, "coord {k}: {var} vs {want}");
        }
    }

    #[test]
    fn data_loss_cases() {
        let s = make_cosine_schedule(10).unwrap();
        let g = grid(3);
        let a = Field::<f64>::from_fn(g, |x, y| x * y);
        assert_eq!(data_loss(&a, &a, 3, &s).unwrap(), 0.0);
        let mut b = a.clone();
        b.values[4] += 1.0;
        assert!((data_loss(&a, &b, 3, &s).unwrap() - 1.0).abs() < 1e-15);
        b.values[4] += 2.0;
        assert!((data_loss(&a, &b, 3, &s).unwrap() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn reverse_identity_and_last_step() {
        let s = make_cosine_schedule(20).unwrap();
        for t in 1..=20 {
            let (c0, ct) = s.posterior_mean_coefs(t);
            let x = [0.7f64, -0.4];
            let z = [0.0f64; 2];
            // the coefficients sum to one only up to the sqrt factors, so
            // compare against the explicit combination
            let out = reverse_step_slice(&x, &x, t, &s, &z).unwrap();
            assert!((out[0] - (c0 + ct) * 0.7).abs() < 1e-14);
        }
        let x = [1.0f64, 2.0];
        let x0 = [0.5f64, 0.5];
        let a = reverse_step_slice(&x, &x0, 1, &s, &[9.0, -9.0]).unwrap();
        let b = reverse_step_slice(&x, &x0, 1, &s, &[0.0, 0.0]).unwrap();
        assert_eq!(a, b);
        // at t = 1 the mean returns x0_hat exactly
        for (u, v) in a.iter().zip(&x0) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_denoiser_recovers_sample() {
        let s = make_cosine_schedule(100).unwrap();
        let g = grid(16);
        let x0 = Field::<f64>::from_fn(g, |x, y| (3.0 * x).sin() * y);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let mut x = gauss(x0.values.len());
        for t in (1..=100).rev() {
            let z = gauss(x.len());
            x = reverse_step_slice(&x, &x0.values, t, &s, &z).unwrap();
        }
        let mse: f64 = x.iter().zip(&x0.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
        assert!(mse < 1e-3, "{mse}");
    }

    /// Exact mean/variance propagation of the oracle-denoiser chain.
    fn oracle_chain_mse(s: &NoiseSchedule, x0_sq: f64, dim: f64) -> Vec<f64> {
        // x_T ~ N(0, I): mean offset from x0 is -x0, variance 1
        let mut mean_gain = 0.0; // mean = mean_gain * x0
        let mut var = 1.0;
        let mut out = vec![(1.0 - mean_gain) * (1.0 - mean_gain) * x0_sq + dim * var];
        for t in (1..=s.steps).rev() {
            let (c0, ct) = s.posterior_mean_coefs(t);
            mean_gain = c0 + ct * mean_gain;
            var = ct * ct * var + if t > 1 { s.beta_tilde_at(t) } else { 0.0 };
            out.push((1.0 - mean_gain) * (1.0 - mean_gain) * x0_sq + dim * var);
        }
        out
    }

    #[test]
    fn oracle_chain_mse_non_increasing() {
        for steps in [10, 100] {
            let s = make_cosine_schedule(steps).unwrap();
            let m = oracle_chain_mse(&s, 40.0, 64.0);
            for w in m.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "T={steps}: {} -> {}", w[0], w[1]);
            }
            assert!(m.last().unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn clamp_cases() {
        let g = grid(4);
        let x = Field::<f64>::from_fn(g, |x, _| x);
        let obs = Field::<f64>::from_fn(g, |_, y| 10.0 + y);
        let all = BinaryMask::all(g, true);
        let none = BinaryMask::all(g, false);
        assert_eq!(clamp_observed(&x, &all, &obs).unwrap(), obs);
        assert_eq!(clamp_observed(&x, &none, &obs).unwrap(), x);
        let m = make_observation_mask(g, 0.3, 5).unwrap();
        let once = clamp_observed(&x, &m, &obs).unwrap();
        assert_eq!(clamp_observed(&once, &m, &obs).unwrap(), once);
    }

    #[test]
    fn ema_cases() {
        let mut e = EmaState::new(0.99f64, vec![vec![0.0; 3]]).unwrap();
        let live = vec![vec![1.0; 3]];
        for _ in 0..459 {
            e = ema_update(e, &live).unwrap();
        }
        assert!((e.shadow[0][0] - (1.0 - 0.99f64.powi(459))).abs() < 1e-12);
        assert!((e.shadow[0][0] - 0.99).abs() < 1e-3);
        let same = EmaState::new(0.99f64, vec![vec![2.0, -1.0]]).unwrap();
        let after = ema_update(same.clone(), &[vec![2.0, -1.0]]).unwrap();
        assert_eq!(after, same);
        assert!(ema_update(same.clone(), &[vec![1.0]]).is_err());
        assert!(ema_update(same, &[vec![1.0, 1.0], vec![0.0]]).is_err());
        assert!(EmaState::new(1.0f64, vec![]).is_err());
    }

    proptest! {
        #[test]
        fn schedule_identities(steps in 2usize..600) {
            let s = make_cosine_schedule(steps).unwrap();
            for t in 1..=steps {
                let ab = s.alpha_bar_prev(t) * (1.0 - s.beta_at(t));
                prop_assert!((ab - s.alpha_bar_at(t)).abs() <= 1e-15);
                let bt = (1.0 - s.alpha_bar_prev(t)) / (1.0 - s.alpha_bar_at(t)) * s.beta_at(t);
                prop_assert_eq!(bt, s.beta_tilde_at(t));
            }
        }

        #[test]
        fn clamp_commutes_with_deterministic_step(seed in 0u64..500, t in 1usize..30) {
            let s = make_cosine_schedule(30).unwrap();
            let g = grid(5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = || Field::<f64>::from_vec(g, 1, (0..25).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
            let (xt, x0, obs) = (draw(), draw(), draw());
            let zero = Field::<f64>::zeros(g, 1);
            let m = make_observation_mask(g, 0.4, seed).unwrap();
            let plain = reverse_step(&xt, &x0, t, &s, &zero).unwrap();
            let clamped = clamp_observed(&plain, &m, &obs).unwrap();
            for k in 0..25 {
                if m.values[k] == 0 {
                    prop_assert_eq!(plain.values[k], clamped.values[k]);
                } else {
                    prop_assert_eq!(clamped.values[k], obs.values[k]);
                }
            }
        }
    }
}
