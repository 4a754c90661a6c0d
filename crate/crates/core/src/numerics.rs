//! Dense row-major matrices, the handful of differentiable operators the
//! models are built from, and the two optimizers used in training: Adam for
//! the model parameters and SGD with momentum (ascent) for Lagrange
//! multipliers.
//!
//! Backward passes are written by hand, one function per operator, and
//! composed by the model code in a fixed order. There is no tape.

use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::config("ragged rows"));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Kernels. Unchecked; callers guarantee dimensions.

/// `out += W x`
#[inline]
pub(crate) fn matvec_acc(w: &Matrix, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.cols, x.len());
    debug_assert_eq!(w.rows, out.len());
    for (o, row) in out.iter_mut().zip(w.data.chunks_exact(w.cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += Wᵀ d`
#[inline]
pub(crate) fn matvec_t_acc(w: &Matrix, d: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.rows, d.len());
    debug_assert_eq!(w.cols, out.len());
    for (&di, row) in d.iter().zip(w.data.chunks_exact(w.cols)) {
        if di != 0.0 {
            for (o, a) in out.iter_mut().zip(row) {
                *o += di * a;
            }
        }
    }
}

/// `g += d xᵀ`
#[inline]
pub(crate) fn outer_acc(g: &mut Matrix, d: &[f64], x: &[f64]) {
    debug_assert_eq!(g.rows, d.len());
    debug_assert_eq!(g.cols, x.len());
    let cols = g.cols;
    for (&di, row) in d.iter().zip(g.data.chunks_exact_mut(cols)) {
        if di != 0.0 {
            for (o, a) in row.iter_mut().zip(x) {
                *o += di * a;
            }
        }
    }
}

#[inline]
pub(crate) fn add_assign(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

// ---------------------------------------------------------------------------
// Affine

/// `W·input + b`.
pub fn affine(input: &[f64], w: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if w.cols != input.len() || w.rows != b.len() {
        return Err(Error::config(format!(
            "affine: W is {}x{}, input has {} entries, bias has {}",
            w.rows,
            w.cols,
            input.len(),
            b.len()
        )));
    }
    let mut out = b.to_vec();
    matvec_acc(w, input, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub d_input: Vec<f64>,
    pub d_w: Matrix,
    pub d_b: Vec<f64>,
}

pub fn affine_backward(input: &[f64], w: &Matrix, d_out: &[f64]) -> Result<AffineGrads> {
    if w.cols != input.len() || w.rows != d_out.len() {
        return Err(Error::config(format!(
            "affine backward: W is {}x{}, input has {}, d_out has {}",
            w.rows,
            w.cols,
            input.len(),
            d_out.len()
        )));
    }
    let mut d_input = vec![0.0; w.cols];
    matvec_t_acc(w, d_out, &mut d_input);
    let mut d_w = Matrix::zeros(w.rows, w.cols);
    outer_acc(&mut d_w, d_out, input);
    Ok(AffineGrads {
        d_input,
        d_w,
        d_b: d_out.to_vec(),
    })
}

// ---------------------------------------------------------------------------
// Scalar activations

const SOFTPLUS_GUARD: f64 = 30.0;

/// `ln(1 + eˣ)`, exact in the tails.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > SOFTPLUS_GUARD {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > SOFTPLUS_GUARD {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Softplus,
    Exp,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Softplus => softplus(x),
            Activation::Exp => x.exp(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the input `x` and the output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Softplus => sigmoid(x),
            Activation::Exp => y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    pub fn forward(self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|&x| self.apply(x)).collect()
    }

    /// Given the forward input and output plus the upstream gradient, return
    /// the gradient with respect to the input.
    pub fn backward(self, input: &[f64], output: &[f64], d_out: &[f64]) -> Vec<f64> {
        input
            .iter()
            .zip(output)
            .zip(d_out)
            .map(|((&x, &y), &d)| d * self.derivative(x, y))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Parameters and Adam

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    m: Matrix,
    v: Matrix,
}

impl Param {
    pub fn len(&self) -> usize {
        self.value.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameter tensors together with their gradient accumulators and
/// Adam moments. Registration order is stable and defines serialization order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Matrix) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter '{name}'")));
        }
        let (r, c) = (value.rows, value.cols);
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: Matrix::zeros(r, c),
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
        });
        self.by_name.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    #[inline]
    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].grad
    }

    #[inline]
    pub fn grad_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].grad
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn adam_steps(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g *= s);
        }
    }

    /// Rescale gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    /// One bias-corrected Adam update followed by clearing the gradients.
    /// Nothing is modified if any gradient is non-finite.
    pub fn adam_step(&mut self, lr: f64, cfg: AdamConfig) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFiniteGradient {
                name: p.name.clone(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            let it = p
                .value
                .data
                .iter_mut()
                .zip(p.grad.data.iter_mut())
                .zip(p.m.data.iter_mut().zip(p.v.data.iter_mut()));
            for ((w, g), (m, v)) in it {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * *g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * *g * *g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
                *g = 0.0;
            }
        }
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn moments(&self, id: ParamId) -> (&Matrix, &Matrix) {
        let p = &self.params[id.0];
        (&p.m, &p.v)
    }
}

/// Gradient accumulators laid out like a [`ParamStore`], filled by backward
/// passes that only hold a shared borrow of the parameter values.
#[derive(Debug, Clone)]
pub struct GradBuffer {
    grads: Vec<Matrix>,
}

impl GradBuffer {
    #[inline]
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.grads[id.0]
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }
}

impl ParamStore {
    /// Zeroed buffer matching every registered parameter's shape.
    pub fn grad_buffer(&self) -> GradBuffer {
        GradBuffer {
            grads: self.params.iter().map(|p| Matrix::zeros(p.value.rows, p.value.cols)).collect(),
        }
    }

    /// `grad += scale · buf` for every parameter.
    pub fn add_grads(&mut self, buf: &GradBuffer, scale: f64) {
        for (p, g) in self.params.iter_mut().zip(&buf.grads) {
            for (a, b) in p.grad.data.iter_mut().zip(&g.data) {
                *a += scale * b;
            }
        }
    }
}

/// Momentum SGD in the ascent direction:
/// `buffer ← momentum·buffer + grad`, `value ← value + lr·buffer`.
#[inline]
pub fn sgd_momentum_step(value: f64, grad: f64, buffer: f64, lr: f64, momentum: f64) -> (f64, f64) {
    let buffer = momentum * buffer + grad;
    (value + lr * buffer, buffer)
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

#[derive(Debug, Clone, PartialEq)]
pub struct FdEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst: Option<FdEntry>,
    pub checked: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    /// Step relative to `max(1, |p|)`.
    pub rel_step: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig { rel_step: 1e-3 }
    }
}

pub const FD_ABS_FLOOR: f64 = 1e-8;

/// `|a − n| / max(1e-8, |a| + |n|)`.
#[inline]
pub fn fd_relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / FD_ABS_FLOOR.max(analytic.abs() + numeric.abs())
}

/// Compare the gradients currently held in `store` against a five-point
/// central-difference estimate of `f`. Parameter values are restored on
/// return.
pub fn finite_diff_check<F>(store: &mut ParamStore, cfg: FdConfig, mut f: F) -> Result<FdReport>
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for pi in 0..store.params.len() {
        for k in 0..store.params[pi].value.data.len() {
            let orig = store.params[pi].value.data[k];
            let h = cfg.rel_step * orig.abs().max(1.0);
            let mut eval = |store: &mut ParamStore, x: f64| {
                store.params[pi].value.data[k] = x;
                f(store)
            };
            let fp2 = eval(store, orig + 2.0 * h);
            let fp1 = eval(store, orig + h);
            let fm1 = eval(store, orig - h);
            let fm2 = eval(store, orig - 2.0 * h);
            store.params[pi].value.data[k] = orig;
            if ![fp2, fp1, fm1, fm2].iter().all(|v| v.is_finite()) {
                return Err(Error::Training {
                    step: 0,
                    message: format!(
                        "gradient check: objective not finite when perturbing {}[{k}]",
                        store.params[pi].name
                    ),
                });
            }
            let numeric = (8.0 * (fp1 - fm1) - (fp2 - fm2)) / (12.0 * h);
            let analytic = store.params[pi].grad.data[k];
            let rel = fd_relative_error(analytic, numeric);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(FdEntry {
                    param: store.params[pi].name.clone(),
                    index: k,
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn affine_identity_and_hand_product() {
        let out = affine(&[3.0, 4.0], &Matrix::identity(2), &[0.0, 0.0]).unwrap();
        assert_eq!(out, vec![3.0, 4.0]);

        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let out = affine(&[1.0, 1.0], &w, &[1.0, 1.0]).unwrap();
        assert_eq!(out, vec![4.0, 8.0]);
    }

    #[test]
    fn affine_backward_is_transpose_multiply() {
        // d_input_j = Σ_i d_i W_ij, so d_out = (1, 0) picks the first row of W.
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let g = affine_backward(&[1.0, 1.0], &w, &[1.0, 0.0]).unwrap();
        assert_eq!(g.d_input, vec![1.0, 2.0]);
        assert_eq!(g.d_w.data(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(g.d_b, vec![1.0, 0.0]);
        // Same check against a one-sided difference of the linear map.
        let h = 0.5;
        let base = affine(&[1.0, 1.0], &w, &[1.0, 1.0]).unwrap()[0];
        let bumped = affine(&[1.0, 1.0 + h], &w, &[1.0, 1.0]).unwrap()[0];
        assert_eq!((bumped - base) / h, g.d_input[1]);
    }

    #[test]
    fn affine_dimension_mismatch() {
        let err = affine(&[1.0, 2.0, 3.0], &Matrix::identity(2), &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn activation_values() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(40.0) - 40.0).abs() < 1e-12);
        assert!(softplus(800.0).is_finite());
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert_eq!(Activation::Tanh.derivative(0.0, 0.0), 1.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((softplus(softplus_inverse(1.0)) - 1.0).abs() < 1e-15);
        assert!((softplus_inverse(1.0) - (std::f64::consts::E - 1.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn activation_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for act in [Activation::Tanh, Activation::Softplus, Activation::Exp, Activation::Sigmoid] {
            for _ in 0..200 {
                let x: f64 = rng.random_range(-5.0..5.0);
                let y = act.apply(x);
                let g = act.backward(&[x], &[y], &[1.0])[0];
                let h = 1e-5;
                let num = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!(fd_relative_error(g, num) < 1e-6, "{act:?} at {x}");
            }
        }
    }

    #[test]
    fn affine_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
            let w = Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let x: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
            let coef: Vec<f64> = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
            // f = coef · tanh(Wx + b)
            let f = |w: &Matrix, x: &[f64]| -> f64 {
                let y = affine(x, w, &b).unwrap();
                y.iter().zip(&coef).map(|(y, c)| c * y.tanh()).sum()
            };
            let y = affine(&x, &w, &b).unwrap();
            let t = Activation::Tanh.forward(&y);
            let d = Activation::Tanh.backward(&y, &t, &coef);
            let g = affine_backward(&x, &w, &d).unwrap();
            let h = 1e-6;
            for k in 0..r * c {
                let mut wp = w.clone();
                wp.data_mut()[k] += h;
                let mut wm = w.clone();
                wm.data_mut()[k] -= h;
                let num = (f(&wp, &x) - f(&wm, &x)) / (2.0 * h);
                assert!(fd_relative_error(g.d_w.data()[k], num) < 1e-4);
            }
            for k in 0..c {
                let mut xp = x.clone();
                xp[k] += h;
                let mut xm = x.clone();
                xm[k] -= h;
                let num = (f(&w, &xp) - f(&w, &xm)) / (2.0 * h);
                assert!(fd_relative_error(g.d_input[k], num) < 1e-4);
            }
        }
    }

    #[test]
    fn forward_ops_are_bitwise_deterministic() {
        let w = Matrix::from_rows(&[vec![0.3, -1.7], vec![2.2, 0.9]]).unwrap();
        let a = affine(&[0.1, 0.7], &w, &[0.5, -0.5]).unwrap();
        let b = affine(&[0.1, 0.7], &w, &[0.5, -0.5]).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(softplus(1.234).to_bits(), softplus(1.234).to_bits());
    }

    fn one_param_store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Matrix::from_vec(1, 1, vec![v]).unwrap()).unwrap();
        (s, id)
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [1e-3, 0.5, -7.0, 300.0] {
            let (mut s, id) = one_param_store(1.0);
            s.grad_mut(id).data_mut()[0] = g;
            s.adam_step(0.01, AdamConfig::default()).unwrap();
            let moved = s.value(id).data()[0] - 1.0;
            assert!((moved.abs() - 0.01).abs() < 1e-6 * (1.0 + 1.0 / g.abs()));
            assert_eq!(moved.signum(), -g.signum());
            assert_eq!(s.grad(id).data()[0], 0.0);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let (mut s, id) = one_param_store(2.5);
        s.grad_mut(id).data_mut()[0] = 1.0;
        s.adam_step(0.1, AdamConfig::default()).unwrap();
        let before = s.value(id).data()[0];
        let (m0, v0) = (s.moments(id).0.data()[0], s.moments(id).1.data()[0]);
        s.adam_step(0.1, AdamConfig::default()).unwrap();
        // A pure zero-gradient history keeps the value fixed; with history the
        // moments decay geometrically.
        let (m1, v1) = (s.moments(id).0.data()[0], s.moments(id).1.data()[0]);
        assert!((m1 - 0.9 * m0).abs() < 1e-15);
        assert!((v1 - 0.999 * v0).abs() < 1e-15);
        assert_ne!(before, s.value(id).data()[0]);

        let (mut fresh, id) = one_param_store(2.5);
        for _ in 0..10 {
            fresh.adam_step(0.1, AdamConfig::default()).unwrap();
        }
        assert_eq!(fresh.value(id).data()[0], 2.5);
    }

    #[test]
    fn adam_two_steps_match_hand_unrolled_recurrence() {
        let (mut s, id) = one_param_store(0.0);
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut expected = 0.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            s.grad_mut(id).data_mut()[0] = 1.0;
            s.adam_step(lr, AdamConfig::default()).unwrap();
            m = b1 * m + (1.0 - b1) * 1.0;
            v = b2 * v + (1.0 - b2) * 1.0;
            let mh = m / (1.0 - f64::powi(b1, t));
            let vh = v / (1.0 - f64::powi(b2, t));
            expected -= lr * mh / (vh.sqrt() + eps);
        }
        // Constant unit gradient: both corrected moments are exactly 1, so two
        // steps move by 2·lr/(1+eps).
        assert!((expected - (-0.2 / (1.0 + eps))).abs() < 1e-15);
        assert!((s.value(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_nan_gradient_with_name() {
        let (mut s, id) = one_param_store(1.0);
        s.grad_mut(id).data_mut()[0] = f64::NAN;
        match s.adam_step(0.1, AdamConfig::default()) {
            Err(Error::NonFiniteGradient { name }) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.value(id).data()[0], 1.0);
    }

    #[test]
    fn sgd_momentum_examples() {
        assert_eq!(sgd_momentum_step(0.3, 0.0, 0.0, 1e-5, 0.9), (0.3, 0.0));
        let (v, b) = sgd_momentum_step(0.0, 1.0, 0.0, 1e-5, 0.9);
        assert_eq!(b, 1.0);
        assert!((v - 1e-5).abs() < 1e-20);
        let mut buf = 0.0;
        let mut val = 0.0;
        for _ in 0..500 {
            (val, buf) = sgd_momentum_step(val, 1.0, buf, 1e-5, 0.9);
        }
        assert!((buf - 10.0).abs() < 1e-9);
        assert!(val > 0.0);
    }

    #[test]
    fn clip_grad_norm_caps_global_norm() {
        let mut s = ParamStore::new();
        let a = s.add("a", Matrix::zeros(1, 2)).unwrap();
        s.grad_mut(a).data_mut().copy_from_slice(&[30.0, 40.0]);
        assert_eq!(s.clip_grad_norm(5.0), 50.0);
        assert!((s.grad_norm() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn fd_check_quadratic_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = ParamStore::new();
        let a = s
            .add("a", Matrix::from_vec(2, 3, (0..6).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap())
            .unwrap();
        let b = s
            .add("b", Matrix::from_vec(1, 4, (0..4).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap())
            .unwrap();
        for id in [a, b] {
            let v = s.value(id).clone();
            s.grad_mut(id).data_mut().copy_from_slice(v.data());
        }
        let half_sq = |s: &ParamStore| -> f64 {
            s.params()
                .iter()
                .flat_map(|p| p.value.data().iter())
                .map(|x| 0.5 * x * x)
                .sum()
        };
        let rep = finite_diff_check(&mut s, FdConfig::default(), half_sq).unwrap();
        assert_eq!(rep.checked, 10);
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");

        s.zero_grads();
        let rep = finite_diff_check(&mut s, FdConfig::default(), |_| 4.2).unwrap();
        assert_eq!(rep.max_rel_error, 0.0);

        let err = finite_diff_check(&mut s, FdConfig::default(), |_| f64::NAN);
        assert!(err.is_err());
    }
}
