//! Diagonal Gaussians parameterized by mean and log-variance.
//!
//! Every KL in the crate is computed from these closed forms. The gradient
//! helpers return partial derivatives with respect to the four parameter
//! vectors so the model code can chain them into its backward passes.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

pub const LOG_VAR_MIN: f64 = -12.0;
pub const LOG_VAR_MAX: f64 = 12.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
pub fn clamp_log_var(lv: f64) -> f64 {
    lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
}

/// `true` where the clamp is inactive, i.e. where the gradient passes through.
#[inline]
pub fn log_var_in_range(lv: f64) -> bool {
    (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&lv)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagGaussian {
    /// Builds the distribution, saturating `log_var` into `[-12, 12]`.
    ///
    /// # Panics
    /// If the two vectors differ in length.
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Self {
        assert_eq!(mean.len(), log_var.len(), "mean/log_var length mismatch");
        let log_var = log_var.into_iter().map(clamp_log_var).collect();
        DiagGaussian { mean, log_var }
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    #[inline]
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    #[inline]
    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn std_dev(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }

    /// `mean + exp(log_var / 2) ⊙ eps`.
    pub fn sample_reparam(&self, eps: &[f64]) -> Vec<f64> {
        assert_eq!(eps.len(), self.dim());
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect()
    }

    /// Draws `eps` from `rng` and returns `(z, eps)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let eps = standard_normal_vec(rng, self.dim());
        (self.sample_reparam(&eps), eps)
    }

    /// Log-density in nats.
    pub fn log_prob(&self, z: &[f64]) -> f64 {
        assert_eq!(z.len(), self.dim());
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(z)
            .map(|((m, lv), x)| {
                let d = x - m;
                -HALF_LN_2PI - 0.5 * lv - 0.5 * d * d * (-lv).exp()
            })
            .sum()
    }

    /// Differential entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.log_var
            .iter()
            .map(|lv| 0.5 * (1.0 + (2.0 * PI).ln() + lv))
            .sum()
    }
}

pub fn standard_prior(dim: usize) -> DiagGaussian {
    assert!(dim >= 1, "prior dimension must be positive");
    DiagGaussian::standard(dim)
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Closed-form `KL(q ‖ p)` in nats.
pub fn kl_divergence(q: &DiagGaussian, p: &DiagGaussian) -> f64 {
    assert_eq!(q.dim(), p.dim());
    kl_terms(q.mean(), q.log_var(), p.mean(), p.log_var())
}

/// `KL(N(mean, e^log_var) ‖ N(0, I))`.
pub fn kl_to_standard(q: &DiagGaussian) -> f64 {
    q.mean
        .iter()
        .zip(&q.log_var)
        .map(|(m, lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
        .sum()
}

fn kl_terms(mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64]) -> f64 {
    let mut kl = 0.0;
    for i in 0..mq.len() {
        let d = mq[i] - mp[i];
        kl += 0.5 * (lp[i] - lq[i]) + 0.5 * (lq[i] - lp[i]).exp() + 0.5 * d * d * (-lp[i]).exp() - 0.5;
    }
    kl
}

/// Partial derivatives of `KL(q ‖ p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KlGrads {
    pub d_mean_q: Vec<f64>,
    pub d_log_var_q: Vec<f64>,
    pub d_mean_p: Vec<f64>,
    pub d_log_var_p: Vec<f64>,
}

pub fn kl_divergence_grads(q: &DiagGaussian, p: &DiagGaussian) -> KlGrads {
    let n = q.dim();
    let mut g = KlGrads {
        d_mean_q: vec![0.0; n],
        d_log_var_q: vec![0.0; n],
        d_mean_p: vec![0.0; n],
        d_log_var_p: vec![0.0; n],
    };
    for i in 0..n {
        let inv_vp = (-p.log_var[i]).exp();
        let vq = q.log_var[i].exp();
        let d = q.mean[i] - p.mean[i];
        g.d_mean_q[i] = d * inv_vp;
        g.d_mean_p[i] = -d * inv_vp;
        g.d_log_var_q[i] = -0.5 + 0.5 * vq * inv_vp;
        g.d_log_var_p[i] = 0.5 - 0.5 * (vq + d * d) * inv_vp;
    }
    g
}

/// Partial derivatives of `log_prob(d, z)` with respect to `(z, mean, log_var)`.
pub fn log_prob_grads(d: &DiagGaussian, z: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = d.dim();
    let (mut dz, mut dm, mut dlv) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let inv_v = (-d.log_var[i]).exp();
        let r = z[i] - d.mean[i];
        dz[i] = -r * inv_v;
        dm[i] = r * inv_v;
        dlv[i] = -0.5 + 0.5 * r * r * inv_v;
    }
    (dz, dm, dlv)
}

/// Monte-Carlo estimate of `KL(q ‖ p)` as the mean of `log q(z) − log p(z)`,
/// `z ~ q`. Returns `(mean, standard error)`.
pub fn kl_monte_carlo<R: Rng + ?Sized>(
    q: &DiagGaussian,
    p: &DiagGaussian,
    samples: usize,
    rng: &mut R,
) -> (f64, f64) {
    let mut stats = RunningStats::default();
    let mut eps = vec![0.0; q.dim()];
    for _ in 0..samples {
        eps.iter_mut().for_each(|e| *e = rng.sample(StandardNormal));
        let z = q.sample_reparam(&eps);
        stats.push(q.log_prob(&z) - p.log_prob(&z));
    }
    (stats.mean(), stats.std_err())
}

/// Welford accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std_err(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

/// Numerically stable `ln Σ exp(xᵢ)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd_relative_error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> DiagGaussian {
        DiagGaussian::new(
            (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
    }

    #[test]
    fn sample_reparam_examples() {
        let d = DiagGaussian::new(vec![0.3, -1.0], vec![0.5, 2.0]);
        assert_eq!(d.sample_reparam(&[0.0, 0.0]), vec![0.3, -1.0]);
        let s = standard_prior(2);
        assert_eq!(s.sample_reparam(&[1.0, -1.0]), vec![1.0, -1.0]);
    }

    #[test]
    fn sample_gradient_wrt_log_var() {
        let lv = [0.4, -1.3];
        let e = [0.7, -2.1];
        let mean = vec![0.1, 0.2];
        let h = 1e-6;
        for i in 0..2 {
            let mut lp = lv.to_vec();
            lp[i] += h;
            let mut lm = lv.to_vec();
            lm[i] -= h;
            let zp = DiagGaussian::new(mean.clone(), lp).sample_reparam(&e)[i];
            let zm = DiagGaussian::new(mean.clone(), lm).sample_reparam(&e)[i];
            let numeric = (zp - zm) / (2.0 * h);
            let analytic = 0.5 * (0.5 * lv[i]).exp() * e[i];
            assert!(fd_relative_error(analytic, numeric) < 1e-8);
        }
    }

    #[test]
    fn log_prob_examples() {
        let s = standard_prior(1);
        assert!((s.log_prob(&[0.0]) + 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!((s.log_prob(&[1.0]) + 1.418_938_533_204_672_7).abs() < 1e-12);
        let d = DiagGaussian::new(vec![1.0, -2.0, 0.5], vec![0.3, -0.7, 1.1]);
        let mode: f64 = -0.5 * d.log_var().iter().map(|lv| (2.0 * PI).ln() + lv).sum::<f64>();
        assert!((d.log_prob(d.mean()) - mode).abs() < 1e-12);
        assert!((standard_prior(2).log_prob(&[0.0, 0.0]) + (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_gaussian(&mut rng, 3);
        assert_eq!(kl_divergence(&q, &q), 0.0);
        let q = DiagGaussian::new(vec![1.0], vec![0.0]);
        assert_eq!(kl_divergence(&q, &standard_prior(1)), 0.5);
        assert_eq!(kl_divergence(&standard_prior(4), &standard_prior(4)), 0.0);
        let q = random_gaussian(&mut rng, 4);
        assert!((kl_to_standard(&q) - kl_divergence(&q, &standard_prior(4))).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo_dim4() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..3 {
            let q = random_gaussian(&mut rng, 4);
            let p = random_gaussian(&mut rng, 4);
            let (mc, se) = kl_monte_carlo(&q, &p, 1_000_000, &mut rng);
            let exact = kl_divergence(&q, &p);
            assert!((mc - exact).abs() < 3.0 * se, "mc {mc} ± {se}, exact {exact}");
        }
    }

    #[test]
    fn log_var_is_clamped() {
        let d = DiagGaussian::new(vec![0.0, 0.0], vec![-40.0, 40.0]);
        assert_eq!(d.log_var(), &[LOG_VAR_MIN, LOG_VAR_MAX]);
    }

    #[test]
    fn kl_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let q = random_gaussian(&mut rng, 3);
            let p = random_gaussian(&mut rng, 3);
            let g = kl_divergence_grads(&q, &p);
            let h = 1e-6;
            let vecs = [q.mean(), q.log_var(), p.mean(), p.log_var()];
            let grads = [&g.d_mean_q, &g.d_log_var_q, &g.d_mean_p, &g.d_log_var_p];
            for (which, grad) in grads.iter().enumerate() {
                for i in 0..3 {
                    let bump = |s: f64| {
                        let mut v: Vec<Vec<f64>> = vecs.iter().map(|x| x.to_vec()).collect();
                        v[which][i] += s;
                        kl_divergence(
                            &DiagGaussian::new(v[0].clone(), v[1].clone()),
                            &DiagGaussian::new(v[2].clone(), v[3].clone()),
                        )
                    };
                    let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                    assert!(fd_relative_error(grad[i], numeric) < 1e-6);
                }
            }
        }
    }

    #[test]
    fn log_prob_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = random_gaussian(&mut rng, 2);
        let z = vec![0.3, -0.8];
        let (dz, dm, dlv) = log_prob_grads(&d, &z);
        let h = 1e-6;
        for i in 0..2 {
            let mut zp = z.clone();
            zp[i] += h;
            let mut zm = z.clone();
            zm[i] -= h;
            assert!(fd_relative_error(dz[i], (d.log_prob(&zp) - d.log_prob(&zm)) / (2.0 * h)) < 1e-6);
            let mut mp = d.mean().to_vec();
            mp[i] += h;
            let mut mm = d.mean().to_vec();
            mm[i] -= h;
            let fp = DiagGaussian::new(mp, d.log_var().to_vec()).log_prob(&z);
            let fm = DiagGaussian::new(mm, d.log_var().to_vec()).log_prob(&z);
            assert!(fd_relative_error(dm[i], (fp - fm) / (2.0 * h)) < 1e-6);
            let mut lp = d.log_var().to_vec();
            lp[i] += h;
            let mut lm = d.log_var().to_vec();
            lm[i] -= h;
            let fp = DiagGaussian::new(d.mean().to_vec(), lp).log_prob(&z);
            let fm = DiagGaussian::new(d.mean().to_vec(), lm).log_prob(&z);
            assert!(fd_relative_error(dlv[i], (fp - fm) / (2.0 * h)) < 1e-6);
        }
    }

    #[test]
    fn log_sum_exp_handles_extremes() {
        assert_eq!(log_sum_exp(&[-1e308, -1e308]), -1e308 + 2f64.ln());
        assert_eq!(log_sum_exp(&[3.0]), 3.0);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    fn gaussian_strategy(dim: usize) -> impl Strategy<Value = DiagGaussian> {
        (
            proptest::collection::vec(-5.0f64..5.0, dim),
            proptest::collection::vec(-6.0f64..6.0, dim),
        )
            .prop_map(|(m, lv)| DiagGaussian::new(m, lv))
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(q in gaussian_strategy(3), p in gaussian_strategy(3)) {
            prop_assert!(kl_divergence(&q, &p) >= -1e-12);
        }

        #[test]
        fn kl_zero_only_for_equal_parameters(q in gaussian_strategy(2), p in gaussian_strategy(2)) {
            let kl = kl_divergence(&q, &p);
            if kl < 1e-14 {
                for i in 0..2 {
                    prop_assert!((q.mean()[i] - p.mean()[i]).abs() < 1e-5);
                    prop_assert!((q.log_var()[i] - p.log_var()[i]).abs() < 1e-5);
                }
            }
            prop_assert_eq!(kl_divergence(&q, &q), 0.0);
        }
    }
}
