//! Graph-based activity regularization.
//!
//! All terms act on the rectified pre-softmax activities `B = max(0, Z)` of a
//! batch (`m` examples by `n` output nodes). With `N = BᵀB` and `v = diag(N)`:
//!
//! * affinity `α(B) = Σ_{i≠j} N_ij / ((n-1) Σ_i N_ii)`
//! * balance `β(B) = Σ_{i≠j} v_i v_j / ((n-1) Σ_i v_i²)`
//! * the unsupervised loss `U(B) = c_α α(B) + c_β (1 - β(B)) + c_F ‖B‖²_F`
//!
//! Neither ratio needs `N` itself: the off-diagonal mass of `N` is
//! `Σ_rows (rowsum² - rowsumsq)` and its trace is `‖B‖²_F`, so every term and
//! gradient here is `O(mn)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{matmul_nt, matmul_tn, relu, Matrix};

/// Nonnegative activity matrix with at least one row and two columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityMatrix(Matrix);

impl ActivityMatrix {
    pub fn new(b: Matrix) -> Result<Self> {
        if b.rows() < 1 || b.cols() < 2 {
            return Err(Error::Config(format!(
                "activity matrix must be at least 1x2, got {}x{}",
                b.rows(),
                b.cols()
            )));
        }
        if let Some(x) = b.data().iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
            return Err(Error::Config(format!(
                "activity matrix entries must be finite and nonnegative, found {x}"
            )));
        }
        Ok(Self(b))
    }

    /// `B = max(0, Z)`.
    pub fn rectify(z: &Matrix) -> Result<Self> {
        Self::new(relu(z))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }

    fn n(&self) -> usize {
        self.0.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GarCoefficients {
    pub c_alpha: f64,
    pub c_beta: f64,
    pub c_f: f64,
}

impl Default for GarCoefficients {
    /// `c_α = 0.1, c_β = 0.1, c_F = 0.0003`, the two-parent MNIST setting.
    fn default() -> Self {
        Self {
            c_alpha: 0.1,
            c_beta: 0.1,
            c_f: 0.0003,
        }
    }
}

impl GarCoefficients {
    pub fn new(c_alpha: f64, c_beta: f64, c_f: f64) -> Result<Self> {
        let c = Self {
            c_alpha,
            c_beta,
            c_f,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn zero() -> Self {
        Self {
            c_alpha: 0.0,
            c_beta: 0.0,
            c_f: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("c_alpha", self.c_alpha),
            ("c_beta", self.c_beta),
            ("c_f", self.c_f),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Coefficients with the Frobenius weight divided by the batch size.
    pub fn per_batch(&self, batch_size: usize) -> Self {
        Self {
            c_f: self.c_f / batch_size as f64,
            ..*self
        }
    }
}

/// A ratio term together with whether its denominator vanished.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioTerm {
    pub value: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GarLoss {
    pub total: f64,
    pub affinity: f64,
    pub balance: f64,
    pub frobenius_sq: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GarGradient {
    pub grad: Matrix,
    pub degenerate: bool,
}

/// `N = BᵀB`, `n x n`.
pub fn coactivation(b: &ActivityMatrix) -> Matrix {
    matmul_tn(b.matrix(), b.matrix()).expect("BᵀB is always conformable")
}

/// `M = BBᵀ`, `m x m`. Quadratic in the number of examples; use on subsets.
pub fn adjacency(b: &ActivityMatrix) -> Matrix {
    matmul_nt(b.matrix(), b.matrix()).expect("BBᵀ is always conformable")
}

/// Per-row sums and per-column squared norms.
struct Moments {
    row_sums: Vec<f64>,
    // v = diag(N)
    col_sq: Vec<f64>,
    // Σ_{i≠j} N_ij
    off_diag: f64,
    // trace(N) = ‖B‖²_F
    trace: f64,
}

fn moments(b: &Matrix) -> Moments {
    let mut row_sums = Vec::with_capacity(b.rows());
    let mut col_sq = vec![0.0; b.cols()];
    let mut off_diag = 0.0;
    for row in b.row_iter() {
        let mut s = 0.0;
        let mut sq = 0.0;
        for (acc, &x) in col_sq.iter_mut().zip(row) {
            s += x;
            sq += x * x;
            *acc += x * x;
        }
        row_sums.push(s);
        off_diag += (s * s - sq).max(0.0);
    }
    let trace = col_sq.iter().sum();
    Moments {
        row_sums,
        col_sq,
        off_diag,
        trace,
    }
}

fn affinity_from(mo: &Moments, n: usize) -> RatioTerm {
    if mo.trace <= 0.0 {
        return RatioTerm {
            value: 0.0,
            degenerate: true,
        };
    }
    RatioTerm {
        value: (mo.off_diag / ((n - 1) as f64 * mo.trace)).clamp(0.0, 1.0),
        degenerate: false,
    }
}

fn balance_from(mo: &Moments, n: usize) -> RatioTerm {
    let p: f64 = mo.col_sq.iter().sum();
    let q: f64 = mo.col_sq.iter().map(|v| v * v).sum();
    if q <= 0.0 {
        return RatioTerm {
            value: 0.0,
            degenerate: true,
        };
    }
    RatioTerm {
        value: ((p * p - q) / ((n - 1) as f64 * q)).clamp(0.0, 1.0),
        degenerate: false,
    }
}

pub fn affinity(b: &ActivityMatrix) -> RatioTerm {
    affinity_from(&moments(b.matrix()), b.n())
}

pub fn balance(b: &ActivityMatrix) -> RatioTerm {
    balance_from(&moments(b.matrix()), b.n())
}

pub fn frobenius_sq(b: &ActivityMatrix) -> f64 {
    b.matrix().frobenius_sq()
}

pub fn gar_loss(b: &ActivityMatrix, c: &GarCoefficients) -> GarLoss {
    let n = b.n();
    let mo = moments(b.matrix());
    let a = affinity_from(&mo, n);
    let bal = balance_from(&mo, n);
    let fro = mo.trace;
    GarLoss {
        total: c.c_alpha * a.value + c.c_beta * (1.0 - bal.value) + c.c_f * fro,
        affinity: a.value,
        balance: bal.value,
        frobenius_sq: fro,
        degenerate: a.degenerate || bal.degenerate,
    }
}

/// Analytic `∂U/∂B`.
///
/// * affinity: `∂off/∂B_ij = 2(r_i - B_ij)`, `∂tr/∂B_ij = 2B_ij`, quotient rule.
/// * balance: with `P = Σv`, `Q = Σv²`, `β = (P²/Q - 1)/(n-1)` and
///   `∂β/∂v_j = 2(P/Q - P² v_j / Q²)/(n-1)`, chained through `∂v_j/∂B_ij = 2B_ij`.
/// * Frobenius: `2B`.
///
/// An all-zero `B` yields a zero gradient with `degenerate` set.
pub fn gar_grad(b: &ActivityMatrix, c: &GarCoefficients) -> GarGradient {
    let bm = b.matrix();
    let (m, n) = bm.shape();
    let mo = moments(bm);
    if mo.trace <= 0.0 {
        return GarGradient {
            grad: Matrix::zeros(m, n),
            degenerate: true,
        };
    }
    let nm1 = (n - 1) as f64;
    let t = mo.trace;
    let p: f64 = mo.col_sq.iter().sum();
    let q: f64 = mo.col_sq.iter().map(|v| v * v).sum();

    let aff_scale = c.c_alpha / (nm1 * t * t);
    // −c_β · ∂β/∂B_ij = bal_coef_j · B_ij
    let bal_coef: Vec<f64> = mo
        .col_sq
        .iter()
        .map(|&v| -c.c_beta * 4.0 * (p / q - p * p * v / (q * q)) / nm1)
        .collect();

    let mut grad = Matrix::zeros(m, n);
    for i in 0..m {
        let r = mo.row_sums[i];
        let src = bm.row(i);
        let dst = grad.row_mut(i);
        for j in 0..n {
            let x = src[j];
            let d_aff = aff_scale * (2.0 * (r - x) * t - mo.off_diag * 2.0 * x);
            dst[j] = d_aff + bal_coef[j] * x + c.c_f * 2.0 * x;
        }
    }
    GarGradient {
        grad,
        degenerate: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn act(rows: &[&[f64]]) -> ActivityMatrix {
        ActivityMatrix::new(Matrix::from_rows(rows)).unwrap()
    }

    fn hand() -> ActivityMatrix {
        act(&[&[1.0, 1.0], &[0.0, 2.0]])
    }

    /// Central differences of `gar_loss` over every entry.
    fn numeric_grad(b: &Matrix, c: &GarCoefficients, h: f64) -> Matrix {
        let mut out = Matrix::zeros(b.rows(), b.cols());
        for i in 0..b.rows() {
            for j in 0..b.cols() {
                let mut plus = b.clone();
                plus[(i, j)] += h;
                let mut minus = b.clone();
                minus[(i, j)] -= h;
                let lp = gar_loss(&ActivityMatrix(plus), c).total;
                let lm = gar_loss(&ActivityMatrix(minus), c).total;
                out[(i, j)] = (lp - lm) / (2.0 * h);
            }
        }
        out
    }

    #[test]
    fn coactivation_examples() {
        assert_eq!(
            coactivation(&act(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]])),
            Matrix::from_rows(&[[2.0, 0.0], [0.0, 1.0]])
        );
        let ones = ActivityMatrix::new(Matrix::from_fn(3, 3, |_, _| 1.0)).unwrap();
        assert_eq!(coactivation(&ones), Matrix::from_fn(3, 3, |_, _| 3.0));
        assert_eq!(
            coactivation(&hand()),
            Matrix::from_rows(&[[1.0, 1.0], [1.0, 5.0]])
        );
    }

    #[test]
    fn adjacency_examples() {
        assert_eq!(adjacency(&act(&[&[1.0, 0.0], &[0.0, 1.0]])), Matrix::identity(2));
        assert_eq!(
            adjacency(&act(&[&[1.0, 0.0], &[1.0, 0.0]])),
            Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]])
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = Matrix::from_fn(5, 3, |_, _| rng.random_range(0.0..2.0));
        let m = adjacency(&ActivityMatrix::new(b.clone()).unwrap());
        for i in 0..5 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += b[(i, k)] * b[(j, k)];
                }
                assert_abs_diff_eq!(m[(i, j)], s, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn affinity_examples() {
        let orth = act(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(affinity(&orth).value, 0.0);
        let ones = ActivityMatrix::new(Matrix::from_fn(3, 3, |_, _| 1.0)).unwrap();
        assert_eq!(affinity(&ones).value, 1.0);
        assert_abs_diff_eq!(affinity(&hand()).value, 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn balance_examples() {
        let equal = act(&[&[3.0, 0.0], &[0.0, 3.0], &[4.0, 0.0], &[0.0, 4.0]]);
        assert_abs_diff_eq!(balance(&equal).value, 1.0, epsilon = 1e-15);
        let one_dead = act(&[&[3.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(balance(&one_dead).value, 0.0);
        assert_abs_diff_eq!(balance(&hand()).value, 5.0 / 13.0, epsilon = 1e-12);
    }

    #[test]
    fn all_zero_is_flagged_not_nan() {
        let z = ActivityMatrix::new(Matrix::zeros(4, 3)).unwrap();
        let a = affinity(&z);
        let b = balance(&z);
        assert!(a.degenerate && b.degenerate);
        assert_eq!((a.value, b.value), (0.0, 0.0));
        let g = gar_grad(&z, &GarCoefficients::default());
        assert!(g.degenerate);
        assert_eq!(g.grad, Matrix::zeros(4, 3));
        assert!(gar_loss(&z, &GarCoefficients::default()).degenerate);
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_sq(&ActivityMatrix::new(Matrix::zeros(2, 2)).unwrap()), 0.0);
        assert_eq!(frobenius_sq(&hand()), 6.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = Matrix::from_fn(6, 4, |_, _| rng.random_range(0.0..3.0));
        let mut direct = 0.0;
        for i in 0..6 {
            for j in 0..4 {
                direct += b[(i, j)] * b[(i, j)];
            }
        }
        assert_abs_diff_eq!(frobenius_sq(&ActivityMatrix(b)), direct, epsilon = 1e-12);
    }

    #[test]
    fn loss_examples() {
        let c = GarCoefficients::default();
        let expected = 0.1 / 3.0 + 0.1 * (8.0 / 13.0) + 0.0003 * 6.0;
        let l = gar_loss(&hand(), &c);
        assert_abs_diff_eq!(l.total, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(l.total, 0.09668, epsilon = 1e-5);

        let orth = act(&[&[2.0, 0.0], &[0.0, 2.0]]);
        assert_abs_diff_eq!(gar_loss(&orth, &c).total, 0.0003 * 8.0, epsilon = 1e-15);

        assert_eq!(gar_loss(&hand(), &GarCoefficients::zero()).total, 0.0);
    }

    #[test]
    fn rejects_invalid_inputs() {
        assert!(ActivityMatrix::new(Matrix::from_rows(&[[1.0, -0.5]])).is_err());
        assert!(ActivityMatrix::new(Matrix::from_rows(&[[1.0], [2.0]])).is_err());
        assert!(ActivityMatrix::new(Matrix::from_rows(&[[1.0, f64::NAN]])).is_err());
        assert!(GarCoefficients::new(-0.1, 0.1, 0.0).is_err());
        assert!(GarCoefficients::new(0.1, f64::INFINITY, 0.0).is_err());
    }

    #[test]
    fn frobenius_only_gradient_is_two_b() {
        let c = GarCoefficients::new(0.0, 0.0, 1.0).unwrap();
        let g = gar_grad(&hand(), &c);
        assert_eq!(g.grad, hand().matrix().scale(2.0));
    }

    #[test]
    fn affinity_gradient_matches_fd_on_orthogonal_equal_norm() {
        let b = act(&[&[1.5, 0.0], &[0.0, 1.5], &[0.0, 0.0]]);
        let c = GarCoefficients::new(1.0, 0.0, 0.0).unwrap();
        let analytic = gar_grad(&b, &c).grad;
        // zeros sit on the boundary of the domain: difference forward only
        let h = 1e-7;
        let base = gar_loss(&b, &c).total;
        let numeric = Matrix::from_fn(3, 2, |i, j| {
            let mut plus = b.matrix().clone();
            plus[(i, j)] += h;
            (gar_loss(&ActivityMatrix(plus), &c).total - base) / h
        });
        assert!(analytic.max_abs_diff(&numeric) < 1e-5);
    }

    #[test]
    fn full_gradient_matches_fd_on_random_8x6() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = Matrix::from_fn(8, 6, |_, _| rng.random_range(0.05..2.0));
        let c = GarCoefficients::default();
        let analytic = gar_grad(&ActivityMatrix(b.clone()), &c).grad;
        let numeric = numeric_grad(&b, &c, 1e-6);
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            if a.abs() < 1e-8 && n.abs() < 1e-8 {
                continue;
            }
            let rel = (a - n).abs() / a.abs().max(n.abs());
            assert!(rel <= 1e-4, "analytic {a} numeric {n}");
        }
    }

    fn nonneg(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(0.0f64..5.0, rows * cols)
            .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn ratios_bounded_and_scale_invariant(b in nonneg(7, 4), s in 0.01f64..100.0) {
            let b = ActivityMatrix::new(b).unwrap();
            let (a, bal) = (affinity(&b), balance(&b));
            prop_assume!(!a.degenerate);
            prop_assert!((0.0..=1.0).contains(&a.value));
            prop_assert!((0.0..=1.0).contains(&bal.value));
            let scaled = ActivityMatrix::new(b.matrix().scale(s)).unwrap();
            prop_assert!((affinity(&scaled).value - a.value).abs() < 1e-12);
            prop_assert!((balance(&scaled).value - bal.value).abs() < 1e-12);
        }

        #[test]
        fn traces_agree(b in nonneg(6, 3)) {
            let b = ActivityMatrix::new(b).unwrap();
            prop_assert!((coactivation(&b).trace() - adjacency(&b).trace()).abs() < 1e-9);
        }

        #[test]
        fn disjoint_supports_have_zero_affinity(
            vals in prop::collection::vec(0.1f64..5.0, 9),
            cols in prop::collection::vec(0usize..3, 9),
        ) {
            let mut b = Matrix::zeros(9, 3);
            for (i, (&v, &c)) in vals.iter().zip(&cols).enumerate() {
                b[(i, c)] = v;
            }
            let b = ActivityMatrix::new(b).unwrap();
            prop_assert_eq!(affinity(&b).value, 0.0);
            let n = coactivation(&b);
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        prop_assert_eq!(n[(i, j)], 0.0);
                    }
                }
            }
        }

        #[test]
        fn gradient_matches_central_differences(
            m in 2usize..=16,
            n in 2usize..=8,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = Matrix::from_fn(m, n, |_, _| rng.random_range(0.05..2.0));
            let c = GarCoefficients::default();
            let analytic = gar_grad(&ActivityMatrix(b.clone()), &c).grad;
            let numeric = numeric_grad(&b, &c, 1e-6);
            for (a, nu) in analytic.data().iter().zip(numeric.data()) {
                if a.abs() < 1e-8 && nu.abs() < 1e-8 {
                    continue;
                }
                let rel = (a - nu).abs() / a.abs().max(nu.abs());
                prop_assert!(rel <= 1e-4, "analytic {} numeric {}", a, nu);
            }
        }
    }
}
