//! Dense linear algebra, seeded initialization, the heavy-ball optimizer and
//! a central-difference gradient oracle.
//!
//! Everything here works on plain row-major `f64` storage. Vectors (biases,
//! latent codes) are `n x 1` matrices when they are trainable parameters and
//! bare slices everywhere else.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, LeopardError, Result};

/// Deterministic generator used for every random draw in the crate.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid_arg!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(invalid_arg!("row {i} has length {} (expected {cols})", row.len()));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// `n x 1` column holding `values`.
    pub fn column(values: Vec<f64>) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(invalid_arg!(
                "matvec: input length {} does not match {} columns",
                x.len(),
                self.cols
            ));
        }
        Ok((0..self.rows)
            .map(|r| dot(self.row(r), x))
            .collect())
    }

    /// `self^T * y`, computed without materializing the transpose.
    pub fn tmatvec(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(invalid_arg!(
                "transposed matvec: input length {} does not match {} rows",
                y.len(),
                self.rows
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self += scale * a b^T`.
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            let s = scale * ar;
            if s == 0.0 {
                continue;
            }
            for (w, &bc) in self.row_mut(r).iter_mut().zip(b) {
                *w += s * bc;
            }
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(alpha);
        m
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        if row.len() != self.cols {
            return Err(invalid_arg!("push_row: length {} vs {} columns", row.len(), self.cols));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn push_col(&mut self, col: &[f64]) -> Result<()> {
        if col.len() != self.rows {
            return Err(invalid_arg!("push_col: length {} vs {} rows", col.len(), self.rows));
        }
        let new_cols = self.cols + 1;
        let mut data = Vec::with_capacity(self.rows * new_cols);
        for (r, &v) in col.iter().enumerate() {
            data.extend_from_slice(self.row(r));
            data.push(v);
        }
        self.data = data;
        self.cols = new_cols;
        Ok(())
    }

    pub fn remove_row(&mut self, r: usize) -> Result<()> {
        if r >= self.rows {
            return Err(invalid_arg!("remove_row: index {r} out of {} rows", self.rows));
        }
        self.data.drain(r * self.cols..(r + 1) * self.cols);
        self.rows -= 1;
        Ok(())
    }

    pub fn remove_col(&mut self, c: usize) -> Result<()> {
        if c >= self.cols {
            return Err(invalid_arg!("remove_col: index {c} out of {} columns", self.cols));
        }
        let cols = self.cols;
        let mut i = 0;
        self.data.retain(|_| {
            let keep = i % cols != c;
            i += 1;
            keep
        });
        self.cols -= 1;
        Ok(())
    }

    fn check_same_shape(&self, other: &Matrix, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(invalid_arg!(
                "{what}: shape {:?} does not match {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Derivative of the rectifier expressed through its output (zero at the kink).
pub fn relu_grad_from_output(y: f64) -> f64 {
    if y > 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Matrix of shape `fan_out x fan_in` drawn from the Xavier uniform law
/// `U[-sqrt(6 / (fan_in + fan_out)), +sqrt(6 / (fan_in + fan_out))]`.
pub fn xavier_init(fan_in: usize, fan_out: usize, rng_seed: u64) -> Result<Matrix> {
    let mut rng = seeded_rng(rng_seed);
    xavier_with(&mut rng, fan_in, fan_out)
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn xavier_with<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Result<Matrix> {
    if fan_in == 0 || fan_out == 0 {
        return Err(invalid_arg!("xavier_init: fan_in={fan_in}, fan_out={fan_out} must be >= 1"));
    }
    let bound = xavier_bound(fan_in, fan_out);
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Matrix::from_vec(fan_out, fan_in, data)
}

/// Learning rate and momentum of the heavy-ball optimizer. Immutable for a run;
/// the per-tensor velocities live next to their parameters in [`Param`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl SgdMomentum {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(invalid_arg!("learning rate must be > 0, got {learning_rate}"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid_arg!("momentum must lie in [0, 1), got {momentum}"));
        }
        Ok(SgdMomentum {
            learning_rate,
            momentum,
        })
    }

    pub fn step(&self, param: &mut Param, grad: &Matrix) -> Result<()> {
        sgd_momentum_step(&mut param.value, grad, &mut param.velocity, self)
    }
}

/// `velocity <- momentum * velocity + grad; param <- param - lr * velocity`.
pub fn sgd_momentum_step(
    param: &mut Matrix,
    grad: &Matrix,
    velocity: &mut Matrix,
    opt: &SgdMomentum,
) -> Result<()> {
    param.check_same_shape(grad, "sgd step (gradient)")?;
    param.check_same_shape(velocity, "sgd step (velocity)")?;
    if !grad.is_finite() {
        return Err(LeopardError::NumericFailure("non-finite gradient".into()));
    }
    for ((w, v), g) in param
        .data
        .iter_mut()
        .zip(velocity.data.iter_mut())
        .zip(&grad.data)
    {
        *v = opt.momentum * *v + g;
        *w -= opt.learning_rate * *v;
    }
    Ok(())
}

/// A trainable tensor together with its momentum buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Matrix,
    pub velocity: Matrix,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let velocity = Matrix::zeros(value.rows(), value.cols());
        Param { value, velocity }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Param::new(Matrix::zeros(rows, cols))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        self.value.push_row(row)?;
        self.velocity.push_row(&vec![0.0; row.len()])
    }

    pub fn push_col(&mut self, col: &[f64]) -> Result<()> {
        self.value.push_col(col)?;
        self.velocity.push_col(&vec![0.0; col.len()])
    }

    pub fn remove_row(&mut self, r: usize) -> Result<()> {
        self.value.remove_row(r)?;
        self.velocity.remove_row(r)
    }

    pub fn remove_col(&mut self, c: usize) -> Result<()> {
        self.value.remove_col(c)?;
        self.velocity.remove_col(c)
    }
}

/// Central-difference gradient `(f(w + h) - f(w - h)) / 2h`, one coordinate at a time.
pub fn finite_diff_gradient<F>(loss_fn: F, params: &Matrix, step: f64) -> Result<Matrix>
where
    F: Fn(&Matrix) -> f64,
{
    if !(step > 0.0) {
        return Err(invalid_arg!("finite difference step must be > 0, got {step}"));
    }
    let mut probe = params.clone();
    let mut grad = Matrix::zeros(params.rows(), params.cols());
    for i in 0..params.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + step;
        let plus = loss_fn(&probe);
        probe.data[i] = orig - step;
        let minus = loss_fn(&probe);
        probe.data[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(LeopardError::NumericFailure(format!(
                "non-finite loss probing coordinate {i}"
            )));
        }
        grad.data[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

/// `|a - b| / max(|a|, |b|, abs_floor)`.
pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(abs_floor);
    (analytic - numeric).abs() / denom
}

/// Largest coordinate-wise [`relative_error`] between two equally shaped tensors.
pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix, abs_floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data
        .iter()
        .zip(&numeric.data)
        .map(|(&a, &n)| relative_error(a, n, abs_floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn scalar(v: f64) -> Matrix {
        Matrix::column(vec![v])
    }

    #[test]
    fn xavier_respects_bound_for_square_4() {
        let bound = xavier_bound(4, 4);
        assert_abs_diff_eq!(bound, 0.75f64.sqrt(), epsilon = 1e-15);
        assert!(bound < 0.8661);
        for seed in 0..20 {
            let m = xavier_init(4, 4, seed).unwrap();
            assert_eq!(m.shape(), (4, 4));
            assert!(m.data().iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn xavier_is_deterministic_per_seed() {
        let a = xavier_init(7, 3, 42).unwrap();
        let b = xavier_init(7, 3, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, xavier_init(7, 3, 43).unwrap());
    }

    #[test]
    fn xavier_mean_is_centered() {
        let mut rng = seeded_rng(9);
        let mut values = Vec::new();
        while values.len() < 10_000 {
            let m = xavier_with(&mut rng, 128, 128).unwrap();
            values.extend_from_slice(m.data());
        }
        values.truncate(10_000);
        assert!(mean(&values).abs() < 0.02);
    }

    #[test]
    fn xavier_rejects_zero_fans() {
        assert!(matches!(xavier_init(0, 3, 1), Err(LeopardError::InvalidArgument(_))));
        assert!(matches!(xavier_init(3, 0, 1), Err(LeopardError::InvalidArgument(_))));
    }

    #[test]
    fn heavy_ball_hand_iteration() {
        let opt = SgdMomentum::new(0.01, 0.95).unwrap();
        let mut p = Param::new(scalar(1.0));
        opt.step(&mut p, &scalar(0.5)).unwrap();
        assert_abs_diff_eq!(p.velocity.get(0, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.value.get(0, 0), 0.995, epsilon = 1e-15);
        opt.step(&mut p, &scalar(0.5)).unwrap();
        assert_abs_diff_eq!(p.velocity.get(0, 0), 0.975, epsilon = 1e-15);
        assert_abs_diff_eq!(p.value.get(0, 0), 0.98525, epsilon = 1e-15);
    }

    #[test]
    fn zero_gradient_zero_velocity_is_fixed_point() {
        let opt = SgdMomentum::new(0.01, 0.95).unwrap();
        let mut p = Param::new(Matrix::from_vec(2, 2, vec![1.0, -2.0, 3.0, 4.0]).unwrap());
        let before = p.clone();
        opt.step(&mut p, &Matrix::zeros(2, 2)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_rejects_shape_mismatch_and_nan() {
        let opt = SgdMomentum::new(0.01, 0.5).unwrap();
        let mut p = Param::zeros(2, 1);
        assert!(matches!(
            opt.step(&mut p, &Matrix::zeros(1, 2)),
            Err(LeopardError::InvalidArgument(_))
        ));
        assert!(matches!(
            opt.step(&mut p, &Matrix::column(vec![f64::NAN, 0.0])),
            Err(LeopardError::NumericFailure(_))
        ));
    }

    #[test]
    fn finite_difference_quadratic_is_exact() {
        let g = finite_diff_gradient(|w| w.get(0, 0).powi(2), &scalar(3.0), 1e-3).unwrap();
        assert_abs_diff_eq!(g.get(0, 0), 6.0, epsilon = 1e-9);

        let w = Matrix::column(vec![1.0, 2.0]);
        let g = finite_diff_gradient(|w| w.data().iter().map(|v| v * v).sum(), &w, 1e-4).unwrap();
        assert_abs_diff_eq!(g.get(0, 0), 2.0, epsilon = 1e-8);
        assert_abs_diff_eq!(g.get(1, 0), 4.0, epsilon = 1e-8);
    }

    #[test]
    fn relative_error_flags_wrong_gradient() {
        let err = relative_error(5.0, 6.0, 1e-6);
        assert_abs_diff_eq!(err, 1.0 / 6.0, epsilon = 1e-12);
        assert!(err > 1e-4);
    }

    #[test]
    fn finite_difference_reports_non_finite_loss() {
        let r = finite_diff_gradient(|w| (w.get(0, 0) - 1.0).ln(), &scalar(1.0), 1e-3);
        assert!(matches!(r, Err(LeopardError::NumericFailure(_))));
    }

    #[test]
    fn structural_edits_keep_shapes() {
        let mut m = Matrix::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        m.push_col(&[7., 8.]).unwrap();
        assert_eq!(m.row(1), &[4., 5., 6., 8.]);
        m.remove_col(1).unwrap();
        assert_eq!(m.row(0), &[1., 3., 7.]);
        m.push_row(&[9., 9., 9.]).unwrap();
        m.remove_row(0).unwrap();
        assert_eq!(m.shape(), (2, 3));
        assert_eq!(m.row(0), &[4., 6., 8.]);
    }

    proptest! {
        #[test]
        fn zero_momentum_equals_plain_descent(
            w in proptest::collection::vec(-10.0f64..10.0, 1..8),
            g in proptest::collection::vec(-10.0f64..10.0, 8),
            v0 in proptest::collection::vec(-1.0f64..1.0, 8),
            lr in 1e-4f64..1.0,
        ) {
            let n = w.len();
            let opt = SgdMomentum::new(lr, 0.0).unwrap();
            let grad = Matrix::column(g[..n].to_vec());
            let mut p = Param::new(Matrix::column(w.clone()));
            p.velocity = Matrix::column(v0[..n].to_vec());
            opt.step(&mut p, &grad).unwrap();
            for i in 0..n {
                prop_assert_eq!(p.value.get(i, 0), w[i] - lr * g[i]);
            }
        }

        #[test]
        fn xavier_never_leaves_bound(fan_in in 1usize..40, fan_out in 1usize..40, seed in any::<u64>()) {
            let m = xavier_init(fan_in, fan_out, seed).unwrap();
            let bound = xavier_bound(fan_in, fan_out);
            prop_assert!(m.data().iter().all(|v| v.abs() <= bound));
        }

        #[test]
        fn tmatvec_matches_explicit_transpose(
            data in proptest::collection::vec(-5.0f64..5.0, 12),
            y in proptest::collection::vec(-5.0f64..5.0, 3),
        ) {
            let m = Matrix::from_vec(3, 4, data).unwrap();
            let a = m.tmatvec(&y).unwrap();
            let b = m.transpose().matvec(&y).unwrap();
            for (x, z) in a.iter().zip(&b) {
                prop_assert!((x - z).abs() < 1e-12);
            }
        }
    }
}
