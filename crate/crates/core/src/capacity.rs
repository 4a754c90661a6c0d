//! Capacity meters: average rate, representational mutual information, and
//! the slack between them.
//!
//! The data distribution is the uniform distribution over the evaluated
//! dataset, so the aggregated posterior `q(z) = (1/N) Σ_n q(z|x_n)` is an exact
//! finite mixture. At one or two latent dimensions every quantity is computed
//! by trapezoid quadrature on a regular grid. For higher dimensions a
//! Monte-Carlo estimator scores samples against the full mixture.
//!
//! The quadrature computes `I_q` and `KL(q(z) ‖ p(z))` each from its own
//! integral, and `R^avg` from closed-form KLs. The identity
//! `R^avg = I_q + KL(q(z) ‖ p(z))` is then a genuine numerical check. The
//! error bound compares results against a grid at half the resolution.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Utterance;
use crate::distributions::{kl_to_standard, log_sum_exp, standard_normal_vec, DiagGaussian, RunningStats};
use crate::error::{Error, Result};
use crate::model::Model;

/// Largest dataset accepted by the quadrature meter.
pub const MAX_QUADRATURE_EXAMPLES: usize = 4096;
/// Half-width of each posterior's box, in standard deviations.
pub const BOX_SIGMAS: f64 = 6.0;
/// Smallest error bound ever reported, absorbing floating-point roundoff.
pub const ERROR_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Quadrature,
    MonteCarlo,
}

impl Method {
    fn as_str(self) -> &'static str {
        match self {
            Method::Quadrature => "quadrature",
            Method::MonteCarlo => "monte_carlo",
        }
    }
}

/// Axis-aligned grid with the same number of points on every axis.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadConfig {
    /// Points per axis at full resolution.
    pub points: usize,
    /// Error bound above which a report is flagged unreliable.
    pub tolerance: f64,
}

impl Default for QuadConfig {
    fn default() -> Self {
        QuadConfig {
            points: 512,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapacityReport {
    pub r_avg: f64,
    pub i_q: f64,
    pub aggregate_kl: f64,
    pub method: Method,
    /// Standard error of `i_q` (Monte Carlo only).
    pub mc_std_err: Option<f64>,
    /// Grid used (quadrature only).
    pub grid: Option<GridSpec>,
    /// Estimated quadrature error: the largest change in `i_q`,
    /// `aggregate_kl` or the identity residual when halving the resolution.
    pub error_bound: Option<f64>,
    /// `false` when the error bound exceeds the configured tolerance.
    pub reliable: bool,
    /// The tolerance `reliable` was judged against (quadrature only).
    pub tolerance: Option<f64>,
    pub examples: usize,
}

impl CapacityReport {
    /// `R^avg − I_q − KL(q(z) ‖ p(z))`.
    pub fn identity_residual(&self) -> f64 {
        self.r_avg - self.i_q - self.aggregate_kl
    }

    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method={}", self.method.as_str());
        let _ = writeln!(s, "examples={}", self.examples);
        let _ = writeln!(s, "r_avg={}", self.r_avg);
        let _ = writeln!(s, "i_q={}", self.i_q);
        let _ = writeln!(s, "aggregate_kl={}", self.aggregate_kl);
        let _ = writeln!(s, "identity_residual={}", self.identity_residual());
        if let Some(se) = self.mc_std_err {
            let _ = writeln!(s, "mc_std_err={se}");
        }
        if let Some(g) = &self.grid {
            let _ = writeln!(s, "grid_points={}", g.points);
            for (d, (lo, hi)) in g.lo.iter().zip(&g.hi).enumerate() {
                let _ = writeln!(s, "grid_lo_{d}={lo}");
                let _ = writeln!(s, "grid_hi_{d}={hi}");
            }
        }
        if let Some(e) = self.error_bound {
            let _ = writeln!(s, "error_bound={e}");
        }
        let _ = writeln!(s, "reliable={}", self.reliable);
        s
    }
}

// ---------------------------------------------------------------------------
// Posterior extraction

/// `q(z | x_n, y_n)` for every example; for a hierarchical model this is
/// `q(z_L | x_n, y_n)`.
pub fn posteriors(model: &Model, data: &[Utterance]) -> Result<Vec<DiagGaussian>> {
    let v = model.view();
    data.iter()
        .map(|u| {
            let r = v.encode_reference(&u.frames)?;
            let c = v.condition_summary(u.y_t, u.y_s)?;
            v.posterior(&r, &c)
        })
        .collect()
}

pub fn r_avg_of(posts: &[DiagGaussian]) -> f64 {
    if posts.is_empty() {
        return 0.0;
    }
    posts.iter().map(kl_to_standard).sum::<f64>() / posts.len() as f64
}

/// Dataset mean of the closed-form `KL(q(z|x) ‖ N(0, I))`.
pub fn r_avg(model: &Model, data: &[Utterance]) -> Result<f64> {
    Ok(r_avg_of(&posteriors(model, data)?))
}

// ---------------------------------------------------------------------------
// Quadrature

struct Axis {
    z: Vec<f64>,
    w: Vec<f64>,
}

fn trapezoid_axis(lo: f64, hi: f64, points: usize) -> Axis {
    if points == 1 {
        return Axis {
            z: vec![0.5 * (lo + hi)],
            w: vec![1.0],
        };
    }
    let h = (hi - lo) / (points - 1) as f64;
    let z = (0..points).map(|i| lo + h * i as f64).collect();
    let mut w = vec![h; points];
    w[0] *= 0.5;
    w[points - 1] *= 0.5;
    Axis { z, w }
}

fn log_normal_pdf(z: f64, mean: f64, log_var: f64) -> f64 {
    let d = z - mean;
    -0.5 * (2.0 * PI).ln() - 0.5 * log_var - 0.5 * d * d * (-log_var).exp()
}

/// One-dimensional factor of a component evaluated along an axis.
struct Factor {
    pdf: Vec<f64>,
    log_pdf: Vec<f64>,
}

fn factor(axis: &Axis, mean: f64, log_var: f64) -> Factor {
    let log_pdf: Vec<f64> = axis.z.iter().map(|&z| log_normal_pdf(z, mean, log_var)).collect();
    let pdf = log_pdf.iter().map(|l| l.exp()).collect();
    Factor { pdf, log_pdf }
}

/// A separable 2-D density table, `dens[j·p2 + k]`. One-dimensional problems
/// use a single dummy point on the second axis.
struct Grid2 {
    a1: Axis,
    a2: Axis,
}

impl Grid2 {
    fn new(spec: &GridSpec, points: usize) -> Self {
        let a1 = trapezoid_axis(spec.lo[0], spec.hi[0], points);
        let a2 = if spec.lo.len() > 1 {
            trapezoid_axis(spec.lo[1], spec.hi[1], points)
        } else {
            Axis {
                z: vec![0.0],
                w: vec![1.0],
            }
        };
        Grid2 { a1, a2 }
    }

    fn factors(&self, g: &DiagGaussian) -> (Factor, Factor) {
        let f1 = factor(&self.a1, g.mean()[0], g.log_var()[0]);
        let f2 = if g.dim() > 1 {
            factor(&self.a2, g.mean()[1], g.log_var()[1])
        } else {
            Factor {
                pdf: vec![1.0],
                log_pdf: vec![0.0],
            }
        };
        (f1, f2)
    }

    /// `acc += scale · f1 ⊗ f2`.
    fn add_outer(&self, acc: &mut [f64], f1: &Factor, f2: &Factor, scale: f64) {
        let p2 = self.a2.z.len();
        for (j, &a) in f1.pdf.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let s = a * scale;
            for (o, b) in acc[j * p2..(j + 1) * p2].iter_mut().zip(&f2.pdf) {
                *o += s * b;
            }
        }
    }

    /// `Σ w · d · ln d`, skipping points where the density underflowed to 0.
    fn neg_entropy(&self, dens: &[f64]) -> f64 {
        let p2 = self.a2.z.len();
        let mut s = 0.0;
        for (j, wj) in self.a1.w.iter().enumerate() {
            for (k, wk) in self.a2.w.iter().enumerate() {
                let d = dens[j * p2 + k];
                if d > 0.0 {
                    s += wj * wk * d * d.ln();
                }
            }
        }
        s
    }

    /// `Σ w · d · ln N(z; 0, I)`.
    fn cross_standard(&self, dens: &[f64], dim: usize) -> f64 {
        let p2 = self.a2.z.len();
        let c = -0.5 * dim as f64 * (2.0 * PI).ln();
        let mut s = 0.0;
        for (j, (zj, wj)) in self.a1.z.iter().zip(&self.a1.w).enumerate() {
            for (k, (zk, wk)) in self.a2.z.iter().zip(&self.a2.w).enumerate() {
                let d = dens[j * p2 + k];
                if d > 0.0 {
                    let r2 = zj * zj + if dim > 1 { zk * zk } else { 0.0 };
                    s += wj * wk * d * (c - 0.5 * r2);
                }
            }
        }
        s
    }

    fn mass(&self, dens: &[f64]) -> f64 {
        let p2 = self.a2.z.len();
        let mut s = 0.0;
        for (j, wj) in self.a1.w.iter().enumerate() {
            for (k, wk) in self.a2.w.iter().enumerate() {
                s += wj * wk * dens[j * p2 + k];
            }
        }
        s
    }

    fn len(&self) -> usize {
        self.a1.z.len() * self.a2.z.len()
    }
}

/// `∫ q ln q` for a single separable Gaussian, from 1-D sums with analytic
/// log-densities.
fn self_term_single(f1: &Factor, f2: &Factor, g: &Grid2) -> f64 {
    let m1: f64 = f1.pdf.iter().zip(&g.a1.w).map(|(p, w)| p * w).sum();
    let m2: f64 = f2.pdf.iter().zip(&g.a2.w).map(|(p, w)| p * w).sum();
    let e1: f64 = f1.pdf.iter().zip(&f1.log_pdf).zip(&g.a1.w).map(|((p, l), w)| p * l * w).sum();
    let e2: f64 = f2.pdf.iter().zip(&f2.log_pdf).zip(&g.a2.w).map(|((p, l), w)| p * l * w).sum();
    e1 * m2 + m1 * e2
}

/// Integrals needed for `I(X; Z)` when each `x_n` owns an equal-weight
/// Gaussian mixture `groups[n]` (a single Gaussian for flat posteriors).
#[derive(Debug, Clone, Copy)]
struct QuadTerms {
    /// `(1/N) Σ_n ∫ q_n ln q_n`
    mean_self: f64,
    /// `∫ q ln q`
    agg_self: f64,
    /// `∫ q ln p`
    agg_cross: f64,
    /// `∫ q`, which should be 1 when the grid resolves every component.
    mass: f64,
}

impl QuadTerms {
    fn i_q(&self) -> f64 {
        self.mean_self - self.agg_self
    }

    fn aggregate_kl(&self) -> f64 {
        self.agg_self - self.agg_cross
    }
}

fn grid_bounds(groups: &[Vec<DiagGaussian>], dim: usize) -> GridSpec {
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for g in groups.iter().flatten() {
        for d in 0..dim {
            let s = BOX_SIGMAS * (0.5 * g.log_var()[d]).exp();
            lo[d] = lo[d].min(g.mean()[d] - s);
            hi[d] = hi[d].max(g.mean()[d] + s);
        }
    }
    GridSpec { lo, hi, points: 0 }
}

fn quad_terms(groups: &[Vec<DiagGaussian>], dim: usize, spec: &GridSpec, points: usize) -> QuadTerms {
    let grid = Grid2::new(spec, points);
    let n = groups.len() as f64;
    let mut agg = vec![0.0; grid.len()];
    let mut scratch = vec![0.0; grid.len()];
    let mut mean_self = 0.0;
    for group in groups {
        let m = group.len() as f64;
        if group.len() == 1 {
            let (f1, f2) = grid.factors(&group[0]);
            mean_self += self_term_single(&f1, &f2, &grid);
            grid.add_outer(&mut agg, &f1, &f2, 1.0 / n);
        } else {
            scratch.iter_mut().for_each(|v| *v = 0.0);
            for comp in group {
                let (f1, f2) = grid.factors(comp);
                grid.add_outer(&mut scratch, &f1, &f2, 1.0 / m);
            }
            mean_self += grid.neg_entropy(&scratch);
            for (a, s) in agg.iter_mut().zip(&scratch) {
                *a += s / n;
            }
        }
    }
    QuadTerms {
        mean_self: mean_self / n,
        agg_self: grid.neg_entropy(&agg),
        agg_cross: grid.cross_standard(&agg, dim),
        mass: grid.mass(&agg),
    }
}

fn check_groups(groups: &[Vec<DiagGaussian>]) -> Result<usize> {
    let first = groups
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::input("no posteriors to evaluate"))?;
    let dim = first.dim();
    if !(1..=2).contains(&dim) {
        return Err(Error::config(format!("quadrature needs latent_dim ≤ 2, got {dim}")));
    }
    if groups.len() > MAX_QUADRATURE_EXAMPLES {
        return Err(Error::config(format!(
            "quadrature accepts at most {MAX_QUADRATURE_EXAMPLES} examples, got {}",
            groups.len()
        )));
    }
    if groups.iter().any(|g| g.is_empty()) || groups.iter().flatten().any(|g| g.dim() != dim) {
        return Err(Error::input("posterior groups must be non-empty with equal dimensions"));
    }
    Ok(dim)
}

/// Full- and half-resolution quadrature. Returns the full-resolution terms,
/// the grid, and the error bound.
fn quad_with_error(groups: &[Vec<DiagGaussian>], points: usize, r_avg: Option<f64>) -> Result<(QuadTerms, GridSpec, f64)> {
    if points < 4 {
        return Err(Error::config("quadrature needs at least 4 points per axis"));
    }
    let dim = check_groups(groups)?;
    let mut spec = grid_bounds(groups, dim);
    spec.points = points;
    let full = quad_terms(groups, dim, &spec, points);
    let half = quad_terms(groups, dim, &spec, points / 2);
    let mut err = (full.i_q() - half.i_q())
        .abs()
        .max((full.aggregate_kl() - half.aggregate_kl()).abs())
        .max((full.mass - 1.0).abs());
    if let Some(r) = r_avg {
        let res_full = r - full.i_q() - full.aggregate_kl();
        let res_half = r - half.i_q() - half.aggregate_kl();
        err = err.max((res_full - res_half).abs());
    }
    let scale = 1.0 + full.mean_self.abs() + full.agg_self.abs() + full.agg_cross.abs();
    Ok((full, spec, err.max(ERROR_FLOOR * scale)))
}

/// Quadrature report for a list of Gaussian posteriors (`latent_dim ≤ 2`).
pub fn mi_quadrature_of(posts: &[DiagGaussian], cfg: QuadConfig) -> Result<CapacityReport> {
    let groups: Vec<Vec<DiagGaussian>> = posts.iter().map(|g| vec![g.clone()]).collect();
    let r = r_avg_of(posts);
    let (t, grid, err) = quad_with_error(&groups, cfg.points, Some(r))?;
    Ok(CapacityReport {
        r_avg: r,
        i_q: t.i_q(),
        aggregate_kl: t.aggregate_kl(),
        method: Method::Quadrature,
        mc_std_err: None,
        grid: Some(grid),
        error_bound: Some(err),
        reliable: err <= cfg.tolerance,
        tolerance: Some(cfg.tolerance),
        examples: posts.len(),
    })
}

pub fn mi_quadrature(model: &Model, data: &[Utterance], cfg: QuadConfig) -> Result<CapacityReport> {
    if model.config().latent_dim > 2 {
        return Err(Error::config("quadrature needs latent_dim ≤ 2"));
    }
    mi_quadrature_of(&posteriors(model, data)?, cfg)
}

// ---------------------------------------------------------------------------
// Monte Carlo

/// Mixture estimator: for `z ~ q(·|x_n)`, score
/// `ln q(z|x_n) − ln[(1/N) Σ_m q(z|x_m)]`. Unbiased for the finite mixture.
pub fn mi_monte_carlo_of(posts: &[DiagGaussian], samples_per_x: usize, seed: u64) -> Result<CapacityReport> {
    if posts.is_empty() || samples_per_x == 0 {
        return Err(Error::input("need at least one posterior and one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ln_n = (posts.len() as f64).ln();
    let mut stats = RunningStats::default();
    let mut logs = vec![0.0; posts.len()];
    for q in posts {
        for _ in 0..samples_per_x {
            let (z, _) = q.sample(&mut rng);
            for (l, qm) in logs.iter_mut().zip(posts) {
                *l = qm.log_prob(&z);
            }
            stats.push(q.log_prob(&z) - (log_sum_exp(&logs) - ln_n));
        }
    }
    let r = r_avg_of(posts);
    Ok(CapacityReport {
        r_avg: r,
        i_q: stats.mean(),
        aggregate_kl: r - stats.mean(),
        method: Method::MonteCarlo,
        mc_std_err: Some(stats.std_err()),
        grid: None,
        error_bound: None,
        reliable: true,
        tolerance: None,
        examples: posts.len(),
    })
}

pub fn mi_monte_carlo(model: &Model, data: &[Utterance], samples_per_x: usize, seed: u64) -> Result<CapacityReport> {
    mi_monte_carlo_of(&posteriors(model, data)?, samples_per_x, seed)
}

// ---------------------------------------------------------------------------
// Bound verification

/// One inequality `lhs ≤ rhs + tol` (or `|lhs − rhs| ≤ tol` for equalities).
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    pub name: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    pub tol: f64,
    pub equality: bool,
}

impl BoundCheck {
    fn le(name: &'static str, lhs: f64, rhs: f64, tol: f64) -> Self {
        BoundCheck {
            name,
            lhs,
            rhs,
            tol,
            equality: false,
        }
    }

    fn eq(name: &'static str, lhs: f64, rhs: f64, tol: f64) -> Self {
        BoundCheck {
            name,
            lhs,
            rhs,
            tol,
            equality: true,
        }
    }

    /// Amount by which the check is violated (`≤ 0` when it holds).
    pub fn excess(&self) -> f64 {
        if self.equality {
            (self.lhs - self.rhs).abs() - self.tol
        } else {
            self.lhs - self.rhs - self.tol
        }
    }

    pub fn holds(&self) -> bool {
        self.excess() <= 0.0
    }

    pub fn describe(&self) -> String {
        let op = if self.equality { "==" } else { "<=" };
        format!(
            "{}: {} {op} {} (tol {:.3e}) -> {}",
            self.name,
            self.lhs,
            self.rhs,
            self.tol,
            if self.holds() { "ok" } else { "VIOLATED" }
        )
    }
}

/// Checks on a flat report: `I_q ≤ R^avg`, non-negative slack, and the
/// decomposition `R^avg = I_q + KL(q(z) ‖ p(z))`. A quadrature report whose
/// grid error exceeds its tolerance fails outright: nothing was verified.
pub fn check_flat_report(rep: &CapacityReport) -> Vec<BoundCheck> {
    let tol = rep.error_bound.unwrap_or(0.0).max(1e-6) + 3.0 * rep.mc_std_err.unwrap_or(0.0);
    let mut checks = vec![
        BoundCheck::le("I_q <= R_avg", rep.i_q, rep.r_avg, tol),
        BoundCheck::le("-aggregate_kl <= 0", -rep.aggregate_kl, 0.0, tol),
        BoundCheck::eq("R_avg == I_q + aggregate_kl", rep.r_avg, rep.i_q + rep.aggregate_kl, tol),
    ];
    if let (Some(err), Some(limit)) = (rep.error_bound, rep.tolerance) {
        checks.push(BoundCheck::le("grid error <= tolerance", err, limit, 0.0));
    }
    checks
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    pub checks: Vec<BoundCheck>,
    pub report_kv: String,
}

impl Verification {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(BoundCheck::holds)
    }

    pub fn failures(&self) -> Vec<&BoundCheck> {
        self.checks.iter().filter(|c| !c.holds()).collect()
    }
}

pub fn verify_flat_bounds(model: &Model, data: &[Utterance], cfg: QuadConfig) -> Result<(CapacityReport, Verification)> {
    let rep = mi_quadrature(model, data, cfg)?;
    let checks = check_flat_report(&rep);
    let v = Verification {
        checks,
        report_kv: rep.to_kv(),
    };
    Ok((rep, v))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HierConfig {
    /// `z_L` samples per example for marginalizing `q(z_H | x)`.
    pub mc_samples: usize,
    /// Grid points per axis for `z_L` quadrature.
    pub points: usize,
    /// Grid points per axis for the `z_H` mixtures, which are costlier.
    pub high_points: usize,
    pub seed: u64,
}

impl Default for HierConfig {
    fn default() -> Self {
        HierConfig {
            mc_samples: 256,
            points: 512,
            high_points: 128,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierReport {
    pub r_avg_high: f64,
    pub r_avg_high_se: f64,
    pub r_avg_low: f64,
    pub r_avg_low_se: f64,
    pub i_q_high: f64,
    pub i_q_high_error: f64,
    /// `I_{M/2} − I_M` for the `z_H` marginalization.
    pub i_q_high_bias: f64,
    pub i_q_low: f64,
    pub i_q_low_error: f64,
    pub i_q_joint: f64,
    pub i_q_joint_se: f64,
    pub examples: usize,
}

impl HierReport {
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "examples={}", self.examples);
        let _ = writeln!(s, "r_avg_high={}", self.r_avg_high);
        let _ = writeln!(s, "r_avg_high_se={}", self.r_avg_high_se);
        let _ = writeln!(s, "r_avg_low={}", self.r_avg_low);
        let _ = writeln!(s, "r_avg_low_se={}", self.r_avg_low_se);
        let _ = writeln!(s, "i_q_high={}", self.i_q_high);
        let _ = writeln!(s, "i_q_high_error={}", self.i_q_high_error);
        let _ = writeln!(s, "i_q_high_bias={}", self.i_q_high_bias);
        let _ = writeln!(s, "i_q_low={}", self.i_q_low);
        let _ = writeln!(s, "i_q_low_error={}", self.i_q_low_error);
        let _ = writeln!(s, "i_q_joint={}", self.i_q_joint);
        let _ = writeln!(s, "i_q_joint_se={}", self.i_q_joint_se);
        s
    }
}

/// Estimate the hierarchical capacity quantities.
///
/// For each example, `M` draws `z_L ~ q(z_L|x)` define both the mixture
/// `q(z_H|x) ≈ (1/M) Σ_j q(z_H | z_L^j)` and the Monte-Carlo average
/// `R^avg_H`. Using the same draws for both makes `I(X;Z_H) ≤ R^avg_H` exact
/// for the resulting empirical chain, up to quadrature error.
pub fn hier_report(model: &Model, data: &[Utterance], cfg: HierConfig) -> Result<HierReport> {
    let mc = model.config();
    if !mc.hierarchical {
        return Err(Error::config("model is not hierarchical"));
    }
    if mc.latent_dim > 2 || mc.high_latent_dim > 2 {
        return Err(Error::config("hierarchical verification needs latent dims ≤ 2"));
    }
    if data.is_empty() || cfg.mc_samples < 2 {
        return Err(Error::input("need data and at least 2 marginalization samples"));
    }
    let v = model.view();
    let q_low = posteriors(model, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut rh, mut rl) = (RunningStats::default(), RunningStats::default());
    let mut groups = Vec::with_capacity(data.len());
    for q in &q_low {
        let mut g = Vec::with_capacity(cfg.mc_samples);
        let mut rh_x = 0.0;
        let mut rl_x = 0.0;
        for _ in 0..cfg.mc_samples {
            let (z_low, _) = q.sample(&mut rng);
            let q_high = v.high_posterior(&z_low)?;
            rh_x += kl_to_standard(&q_high);
            let z_high = q_high.sample_reparam(&standard_normal_vec(&mut rng, mc.high_latent_dim));
            let p_low = v.conditional_prior(&z_high)?;
            rl_x += q.log_prob(&z_low) - p_low.log_prob(&z_low);
            g.push(q_high);
        }
        // Per-example means; the standard error is taken across examples.
        rh.push(rh_x / cfg.mc_samples as f64);
        rl.push(rl_x / cfg.mc_samples as f64);
        groups.push(g);
    }
    let (th, _, err_h) = quad_with_error(&groups, cfg.high_points, None)?;
    let halves: Vec<Vec<DiagGaussian>> = groups.iter().map(|g| g[..g.len() / 2].to_vec()).collect();
    let (th_half, _, _) = quad_with_error(&halves, cfg.high_points, None)?;

    let low_groups: Vec<Vec<DiagGaussian>> = q_low.iter().map(|g| vec![g.clone()]).collect();
    let (tl, _, err_l) = quad_with_error(&low_groups, cfg.points, None)?;

    // Joint estimator over (z_H, z_L): the q(z_H|z_L) factor appears in the
    // numerator and in every mixture term.
    let ln_n = (data.len() as f64).ln();
    let mut joint = RunningStats::default();
    let mut logs = vec![0.0; q_low.len()];
    let joint_rounds = 4;
    for _ in 0..joint_rounds {
        for q in &q_low {
            let (z_low, _) = q.sample(&mut rng);
            let q_high = v.high_posterior(&z_low)?;
            let z_high = q_high.sample_reparam(&standard_normal_vec(&mut rng, mc.high_latent_dim));
            let lh = q_high.log_prob(&z_high);
            for (l, qm) in logs.iter_mut().zip(&q_low) {
                *l = qm.log_prob(&z_low) + lh;
            }
            joint.push(q.log_prob(&z_low) + lh - (log_sum_exp(&logs) - ln_n));
        }
    }

    Ok(HierReport {
        r_avg_high: rh.mean(),
        r_avg_high_se: rh.std_err(),
        r_avg_low: rl.mean(),
        r_avg_low_se: rl.std_err(),
        i_q_high: th.i_q(),
        i_q_high_error: err_h,
        i_q_high_bias: th_half.i_q() - th.i_q(),
        i_q_low: tl.i_q(),
        i_q_low_error: err_l,
        i_q_joint: joint.mean(),
        i_q_joint_se: joint.std_err(),
        examples: data.len(),
    })
}

/// Itemized hierarchical checks:
/// `I(X;Z_H) ≤ R^avg_H`, `I(X;Z_L) ≤ R^avg_H + R^avg_L`,
/// `I(X;Z_L) = I(X;[Z_H,Z_L])`, and `I(X;Z_H) ≤ I(X;Z_L)`.
pub fn check_hier_report(r: &HierReport) -> Vec<BoundCheck> {
    let floor = 1e-6;
    let rate_se = (r.r_avg_high_se.powi(2) + r.r_avg_low_se.powi(2)).sqrt();
    vec![
        BoundCheck::le("I_q(X;Z_H) <= R_avg_H", r.i_q_high, r.r_avg_high, r.i_q_high_error.max(floor)),
        BoundCheck::le(
            "I_q(X;Z_L) <= R_avg_H + R_avg_L",
            r.i_q_low,
            r.r_avg_high + r.r_avg_low,
            r.i_q_low_error.max(floor) + 3.0 * rate_se,
        ),
        BoundCheck::eq(
            "I_q(X;[Z_H,Z_L]) == I_q(X;Z_L)",
            r.i_q_joint,
            r.i_q_low,
            r.i_q_low_error.max(floor) + 3.0 * r.i_q_joint_se,
        ),
        BoundCheck::le(
            "I_q(X;Z_H) <= I_q(X;Z_L)",
            r.i_q_high,
            r.i_q_low,
            (r.i_q_high_error + r.i_q_low_error).max(floor) + r.i_q_high_bias.abs(),
        ),
    ]
}

pub fn verify_hier_bounds(model: &Model, data: &[Utterance], cfg: HierConfig) -> Result<(HierReport, Verification)> {
    let rep = hier_report(model, data, cfg)?;
    let checks = check_hier_report(&rep);
    let v = Verification {
        checks,
        report_kv: rep.to_kv(),
    };
    Ok((rep, v))
}
