//! Small dense numeric kernel: row-major matrices, activations with their
//! derivatives, flat parameter views, Adam and the plateau schedule.

use crate::error::{PinError, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(PinError::Contract(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(PinError::Domain(format!(
                "non-finite matrix entry at index {pos}"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// `out += A[:, col..col + x.len()] · x`
    #[inline]
    pub fn add_matvec_cols(&self, col: usize, x: &[f64], out: &mut [f64]) {
        debug_assert!(col + x.len() <= self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols + col..r * self.cols + col + x.len()];
            *o += dot(row, x);
        }
    }

    /// `out += A · x`
    #[inline]
    pub fn add_matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        self.add_matvec_cols(0, x, out);
    }

    /// `out += A[:, col..col + out.len()]ᵀ · y`
    #[inline]
    pub fn add_matvec_t_cols(&self, col: usize, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert!(col + out.len() <= self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            let row = &self.data[r * self.cols + col..r * self.cols + col + out.len()];
            for (o, &a) in out.iter_mut().zip(row) {
                *o += a * yr;
            }
        }
    }

    /// `out += Aᵀ · y`
    #[inline]
    pub fn add_matvec_t(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.cols);
        self.add_matvec_t_cols(0, y, out);
    }

    /// `A[:, col..col + x.len()] += y · xᵀ`
    #[inline]
    pub fn add_outer_cols(&mut self, col: usize, y: &[f64], x: &[f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert!(col + x.len() <= self.cols);
        let cols = self.cols;
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            let row = &mut self.data[r * cols + col..r * cols + col + x.len()];
            for (a, &xc) in row.iter_mut().zip(x) {
                *a += yr * xc;
            }
        }
    }

    /// `A += y · xᵀ`
    #[inline]
    pub fn add_outer(&mut self, y: &[f64], x: &[f64]) {
        debug_assert_eq!(x.len(), self.cols);
        self.add_outer_cols(0, y, x);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Centered hard sigmoid `max(0, min(1, (1 + x) / 2))`.
pub fn hard_sigmoid(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(PinError::Domain(format!("hard sigmoid of {x}")));
    }
    Ok(hard_sigmoid_raw(x))
}

/// Unchecked variant of [`hard_sigmoid`] for inner loops.
#[inline]
pub fn hard_sigmoid_raw(x: f64) -> f64 {
    (0.5 * (1.0 + x)).clamp(0.0, 1.0)
}

/// Derivative of the centered hard sigmoid; zero at the kinks `|x| = 1`.
#[inline]
pub fn hard_sigmoid_derivative(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5
    } else {
        0.0
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// A collection of parameters viewed as a fixed sequence of flat blocks.
///
/// Block order and lengths must be stable for the lifetime of the value so
/// that optimizer state and gradients line up with it.
pub trait ParameterSet {
    fn blocks(&self) -> Vec<&[f64]>;
    fn blocks_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_parameters(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    fn block_shape(&self) -> Vec<usize> {
        self.blocks().iter().map(|b| b.len()).collect()
    }
}

impl ParameterSet for Vec<f64> {
    fn blocks(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }
}

impl ParameterSet for DenseMatrix {
    fn blocks(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Moment estimates and step counter of the Adam optimizer.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new<P: ParameterSet + ?Sized>(params: &P, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(PinError::Contract(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        let shape = params.block_shape();
        Ok(Self {
            first_moment: shape.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: shape.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            learning_rate,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
        })
    }

    /// Bias-correction denominators `(1 - β1^t, 1 - β2^t)` for the next step.
    pub fn bias_corrections(&self) -> (f64, f64) {
        let t = (self.step + 1) as i32;
        (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t))
    }
}

/// One Adam update with bias correction.
pub fn adam_step<P: ParameterSet + ?Sized>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
) -> Result<()> {
    let grad_blocks = grads.blocks();
    let shape: Vec<usize> = grad_blocks.iter().map(|b| b.len()).collect();
    let state_shape: Vec<usize> = state.first_moment.iter().map(Vec::len).collect();
    let param_shape = params.block_shape();
    if shape != param_shape || shape != state_shape {
        return Err(PinError::Contract(
            "adam: parameter, gradient and moment shapes differ".into(),
        ));
    }
    let (c1, c2) = state.bias_corrections();
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.epsilon, state.learning_rate);
    for (((p, g), m), v) in params
        .blocks_mut()
        .into_iter()
        .zip(grad_blocks)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(())
}

/// Reduce-on-plateau learning-rate schedule driven by validation loss.
#[derive(Clone, Debug)]
pub struct LrSchedule {
    pub factor: f64,
    pub patience: usize,
    /// Minimal absolute decrease that counts as an improvement.
    pub threshold: f64,
    pub best: f64,
    pub epochs_since_improvement: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::new(0.9, 5).expect("default schedule is valid")
    }
}

impl LrSchedule {
    pub fn new(factor: f64, patience: usize) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(PinError::Contract(format!(
                "plateau factor must lie in (0, 1), got {factor}"
            )));
        }
        Ok(Self {
            factor,
            patience,
            threshold: 1e-6,
            best: f64::INFINITY,
            epochs_since_improvement: 0,
        })
    }

    /// Records an epoch's validation loss; multiplies `learning_rate` by the
    /// factor after `patience` epochs without improvement. Returns whether a
    /// reduction happened.
    pub fn observe(&mut self, validation_loss: f64, learning_rate: &mut f64) -> bool {
        if validation_loss < self.best - self.threshold {
            self.best = validation_loss;
            self.epochs_since_improvement = 0;
            return false;
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement >= self.patience {
            *learning_rate *= self.factor;
            self.epochs_since_improvement = 0;
            return true;
        }
        false
    }
}

/// Central finite-difference gradient `(L(p + ε) - L(p - ε)) / 2ε`, one
/// coordinate at a time.
pub fn finite_difference_gradient<P, F>(mut loss: F, params: &P, epsilon: f64) -> P
where
    P: ParameterSet + Clone,
    F: FnMut(&P) -> f64,
{
    assert!(epsilon > 0.0, "finite difference step must be positive");
    let mut grad = params.clone();
    let mut probe = params.clone();
    let shape = params.block_shape();
    for (b, &len) in shape.iter().enumerate() {
        for i in 0..len {
            let orig = params.blocks()[b][i];
            probe.blocks_mut()[b][i] = orig + epsilon;
            let up = loss(&probe);
            probe.blocks_mut()[b][i] = orig - epsilon;
            let down = loss(&probe);
            probe.blocks_mut()[b][i] = orig;
            grad.blocks_mut()[b][i] = (up - down) / (2.0 * epsilon);
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hard_sigmoid_values() {
        assert_eq!(hard_sigmoid(0.0).unwrap(), 0.5);
        assert_eq!(hard_sigmoid(1.0).unwrap(), 1.0);
        assert_eq!(hard_sigmoid(-1.0).unwrap(), 0.0);
        assert_eq!(hard_sigmoid(0.5).unwrap(), 0.75);
        assert!(hard_sigmoid(f64::NAN).is_err());
        assert!(hard_sigmoid(f64::INFINITY).is_err());
    }

    #[test]
    fn hard_sigmoid_derivative_values() {
        assert_eq!(hard_sigmoid_derivative(0.0), 0.5);
        assert_eq!(hard_sigmoid_derivative(2.0), 0.0);
        assert_eq!(hard_sigmoid_derivative(1.0), 0.0);
        assert_eq!(hard_sigmoid_derivative(-1.0), 0.0);
    }

    #[test]
    fn derivative_agrees_with_central_differences_off_kinks() {
        let eps = 1e-6;
        for &x in &[-3.0, -0.99, -0.3, 0.0, 0.42, 0.98, 1.5] {
            let fd = (hard_sigmoid_raw(x + eps) - hard_sigmoid_raw(x - eps)) / (2.0 * eps);
            assert!((fd - hard_sigmoid_derivative(x)).abs() < 1e-9, "x={x}");
        }
    }

    proptest! {
        #[test]
        fn hard_sigmoid_bounded_monotone_lipschitz(a in -1e6f64..1e6, b in -1e6f64..1e6) {
            let (sa, sb) = (hard_sigmoid_raw(a), hard_sigmoid_raw(b));
            prop_assert!((0.0..=1.0).contains(&sa));
            if a <= b {
                prop_assert!(sa <= sb);
            }
            prop_assert!((sa - sb).abs() <= 0.5 * (a - b).abs() + 1e-12);
        }

        #[test]
        fn hard_sigmoid_fixed_under_reclamp(x in -10f64..10.0) {
            // σ(2σ(x) - 1) = σ(x) because 2σ(x) - 1 already lies in [-1, 1].
            let s = hard_sigmoid_raw(x);
            prop_assert!((hard_sigmoid_raw(2.0 * s - 1.0) - s).abs() < 1e-15);
        }
    }

    #[test]
    fn matrix_rejects_bad_input() {
        assert!(DenseMatrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(DenseMatrix::new(1, 2, vec![0.0, f64::NAN]).is_err());
        let m = DenseMatrix::new(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let mut out = vec![0.0; 2];
        m.add_matvec(&[1.0, 0.0, -1.0], &mut out);
        assert_eq!(out, vec![-2.0, -2.0]);
        let mut back = vec![0.0; 3];
        m.add_matvec_t(&[1.0, 1.0], &mut back);
        assert_eq!(back, vec![5.0, 7.0, 9.0]);
        let mut block = vec![0.0; 2];
        m.add_matvec_t_cols(1, &[1.0, 0.0], &mut block);
        assert_eq!(block, vec![2.0, 3.0]);
    }

    #[test]
    fn adam_zero_gradient_is_noop_from_fresh_state() {
        let mut p = vec![1.0, -2.0, 3.0];
        let g = vec![0.0; 3];
        let mut st = AdamState::new(&p, 1e-3).unwrap();
        for _ in 0..10 {
            adam_step(&mut p, &g, &mut st).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.step, 10);
    }

    #[test]
    fn adam_moments_decay_under_zero_gradient() {
        let mut p = vec![0.0];
        let mut st = AdamState::new(&p, 1e-3).unwrap();
        adam_step(&mut p, &vec![1.0], &mut st).unwrap();
        let (m0, v0) = (st.first_moment[0][0], st.second_moment[0][0]);
        adam_step(&mut p, &vec![0.0], &mut st).unwrap();
        assert!((st.first_moment[0][0] - 0.9 * m0).abs() < 1e-15);
        assert!((st.second_moment[0][0] - 0.999 * v0).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_bias_correction() {
        let p = vec![0.0];
        let st = AdamState::new(&p, 1e-3).unwrap();
        let (c1, c2) = st.bias_corrections();
        assert_eq!(c1, 1.0 - 0.9);
        assert_eq!(c2, 1.0 - 0.999);
        // First step moves by lr * g / (|g| + eps) = ~lr * sign(g).
        let mut p = vec![0.0];
        let mut st = AdamState::new(&p, 1e-3).unwrap();
        adam_step(&mut p, &vec![4.0], &mut st).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-11);
    }

    #[test]
    fn adam_constant_gradient_step_approaches_lr() {
        let lr = 0.01;
        let mut p = vec![0.0, 0.0];
        let g = vec![0.3, -2.0];
        let mut st = AdamState::new(&p, lr).unwrap();
        let mut prev = p.clone();
        for _ in 0..5000 {
            prev.clone_from(&p);
            adam_step(&mut p, &g, &mut st).unwrap();
        }
        assert!(((p[0] - prev[0]) + lr).abs() < 1e-6 * lr + 1e-9);
        assert!(((p[1] - prev[1]) - lr).abs() < 1e-6 * lr + 1e-9);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = vec![0.0, 1.0];
        let mut st = AdamState::new(&p, 1e-3).unwrap();
        assert!(adam_step(&mut p, &vec![0.0], &mut st).is_err());
        assert!(AdamState::new(&p, 0.0).is_err());
    }

    #[test]
    fn schedule_reduces_after_patience() {
        let mut sched = LrSchedule::default();
        let mut lr = 1e-3;
        assert!(!sched.observe(1.0, &mut lr));
        let mut trace = vec![lr];
        for _ in 0..12 {
            sched.observe(1.0, &mut lr);
            trace.push(lr);
        }
        // Two reductions after 5 and 10 stale epochs.
        assert!((lr - 1e-3 * 0.81).abs() < 1e-18);
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        // Sub-threshold improvements count as stale.
        let mut sched = LrSchedule::default();
        let mut lr = 1.0;
        sched.observe(1.0, &mut lr);
        for i in 1..=5 {
            sched.observe(1.0 - i as f64 * 1e-7, &mut lr);
        }
        assert_eq!(lr, 0.9);
        assert!(LrSchedule::new(1.0, 5).is_err());
    }

    #[test]
    fn finite_differences_on_closed_forms() {
        let g = finite_difference_gradient(|p: &Vec<f64>| 0.5 * p[0] * p[0], &vec![3.0], 1e-5);
        assert!((g[0] - 3.0).abs() < 1e-8);
        let g = finite_difference_gradient(|p: &Vec<f64>| 2.0 * p[0], &vec![-7.0], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-9);
    }
}
