//! Batch output matrix analytics.
//!
//! A classifier applied to a mini-batch of `B` samples over `K` classes
//! produces a row-stochastic `B × K` matrix. This module measures its batch
//! entropy and Frobenius norm and numerically checks that, along a path that
//! moves mass between one free coordinate and the last coordinate of a row,
//! the row square-sum and the row entropy always move in opposite
//! directions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default tolerance for the row-sum constraint.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Smallest coordinate produced by [`sample_interior_row`].
pub const MIN_COORDINATE: f64 = 1e-6;

/// Returns whether every row of `a` sums to one within `tol` and every entry
/// is at least `-tol`.
pub fn validate_output_matrix(a: &Tensor, tol: f64) -> Result<bool> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::Shape {
            op: "validate_output_matrix",
            lhs: a.shape(),
            rhs: (1, 1),
        });
    }
    let rows_ok = (0..a.rows()).all(|r| (a.row(r).iter().sum::<f64>() - 1.0).abs() <= tol);
    let entries_ok = a.data().iter().all(|&v| v >= -tol && v.is_finite());
    Ok(rows_ok && entries_ok)
}

/// A validated row-stochastic `B × K` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutputMatrix(Tensor);

impl BatchOutputMatrix {
    /// Validates with [`ROW_SUM_TOL`].
    pub fn new(a: Tensor) -> Result<Self> {
        Self::with_tolerance(a, ROW_SUM_TOL)
    }

    pub fn with_tolerance(a: Tensor, tol: f64) -> Result<Self> {
        if !validate_output_matrix(&a, tol)? {
            return Err(Error::Constraint(format!(
                "{}x{} matrix is not row-stochastic within {tol:e}",
                a.rows(),
                a.cols()
            )));
        }
        Ok(Self(a))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn batch_size(&self) -> usize {
        self.0.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.0.cols()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }
}

/// `-(1/B) Σᵢⱼ Aᵢⱼ ln Aᵢⱼ`, taking `0 ln 0 = 0`.
pub fn batch_entropy(a: &BatchOutputMatrix) -> f64 {
    let t = a.as_tensor();
    let total: f64 = t.data().iter().map(|&p| entropy_term(p)).sum();
    total / t.rows() as f64
}

/// `‖A‖_F`.
pub fn batch_frobenius(a: &BatchOutputMatrix) -> f64 {
    a.as_tensor().frobenius_norm()
}

#[inline]
fn entropy_term(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        -p * p.ln()
    }
}

/// Square sum of one row.
pub fn row_square_sum(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum()
}

/// Shannon entropy of one row (natural log).
pub fn row_entropy(row: &[f64]) -> f64 {
    row.iter().map(|&p| entropy_term(p)).sum()
}

/// A probability row, a free coordinate `j` and a perturbation size.
///
/// Moving along the probe adds `delta` to `row[j]` and subtracts it from the
/// last coordinate, the only one treated as dependent on `row[j]`. Indices
/// are zero-based, so `j` ranges over `0..K-1`.
#[derive(Clone, Debug, PartialEq)]
pub struct RowProbe {
    pub row: Vec<f64>,
    pub j: usize,
    pub delta: f64,
}

impl RowProbe {
    pub fn new(row: Vec<f64>, j: usize) -> Self {
        Self { row, j, delta: 0.0 }
    }

    fn check_index(&self) -> Result<()> {
        let k = self.row.len();
        if k < 2 || self.j >= k - 1 {
            return Err(Error::Index {
                what: "free coordinate (the last coordinate is dependent)",
                index: self.j,
                limit: k.saturating_sub(1),
            });
        }
        Ok(())
    }

    /// The row after moving `delta` along the path.
    pub fn perturbed(&self) -> Result<Vec<f64>> {
        self.shifted(self.delta)
    }

    fn shifted(&self, delta: f64) -> Result<Vec<f64>> {
        self.check_index()?;
        let last = self.row.len() - 1;
        let mut out = self.row.clone();
        out[self.j] += delta;
        out[last] -= delta;
        if !(0.0..=1.0).contains(&out[self.j]) || !(0.0..=1.0).contains(&out[last]) {
            return Err(Error::Domain(format!(
                "perturbation {delta} leaves the simplex at coordinates {} / {last}",
                self.j
            )));
        }
        Ok(out)
    }
}

/// Analytic partials of the row square-sum and row entropy along the probe
/// path: `(2·a_j − 2·a_K, ln(a_K / a_j))`.
pub fn row_partials(probe: &RowProbe) -> Result<(f64, f64)> {
    probe.check_index()?;
    if let Some(pos) = probe.row.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::Domain(format!(
            "row entry {pos} is {}; the entropy partial needs strictly positive entries",
            probe.row[pos]
        )));
    }
    let a_j = probe.row[probe.j];
    let a_k = probe.row[probe.row.len() - 1];
    let df = 2.0 * a_j - 2.0 * a_k;
    let dh = a_k.ln() - a_j.ln();
    Ok((df, dh))
}

/// Draws a row uniformly from the simplex via normalized exponentials, then
/// clamps every coordinate to at least [`MIN_COORDINATE`] and renormalizes.
pub fn sample_interior_row<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    let mut row: Vec<f64> = draws.iter().map(|d| (d / total).max(MIN_COORDINATE)).collect();
    // Clamping can only add mass; take it back from the largest coordinate.
    let excess: f64 = row.iter().sum::<f64>() - 1.0;
    if excess > 0.0 {
        let (imax, _) = row
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        row[imax] -= excess;
    }
    row
}

/// Counts from [`verify_opposite_monotonicity`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MonotonicityReport {
    pub k: usize,
    pub checked: usize,
    /// Cases where both partials vanished together (stationary point).
    pub both_zero: usize,
    pub sign_failures: usize,
    pub fd_failures: usize,
}

impl MonotonicityReport {
    pub fn passed(&self) -> bool {
        self.sign_failures == 0 && self.fd_failures == 0
    }
}

impl std::fmt::Display for MonotonicityReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "checked={} sign_failures={} fd_failures={}",
            self.checked, self.sign_failures, self.fd_failures
        )
    }
}

const DF_ZERO: f64 = 1e-12;
const DH_ZERO: f64 = 1e-9;
const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-6;

/// Outcome of checking one probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbeOutcome {
    pub both_zero: bool,
    pub sign_ok: bool,
    pub fd_ok: bool,
}

/// Checks the sign relation and finite-difference agreement for one probe.
pub fn check_probe(probe: &RowProbe) -> Result<ProbeOutcome> {
    let (df, dh) = row_partials(probe)?;
    let df_zero = df.abs() < DF_ZERO;
    let dh_zero = dh.abs() < DH_ZERO;
    let both_zero = df_zero && dh_zero;
    let sign_ok = if df_zero || dh_zero {
        df_zero == dh_zero
    } else {
        df.signum() == -dh.signum()
    };

    let a_j = probe.row[probe.j];
    let a_k = probe.row[probe.row.len() - 1];
    // The square sum is quadratic, so the nominal step is exact up to
    // rounding. The entropy has curvature ~1/a near the boundary and needs a
    // step proportional to the smaller moving coordinate.
    let step_f = FD_STEP.min(0.5 * a_j.min(a_k));
    let step_h = FD_STEP.min(1e-3 * a_j.min(a_k));
    let fd_f = central_difference(probe, step_f, row_square_sum)?;
    let fd_h = central_difference(probe, step_h, row_entropy)?;
    let fd_ok = close(df, fd_f) && close(dh, fd_h);

    Ok(ProbeOutcome {
        both_zero,
        sign_ok,
        fd_ok,
    })
}

fn central_difference(probe: &RowProbe, step: f64, f: fn(&[f64]) -> f64) -> Result<f64> {
    let plus = f(&probe.shifted(step)?);
    let minus = f(&probe.shifted(-step)?);
    Ok((plus - minus) / (2.0 * step))
}

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= FD_TOL * analytic.abs().max(1.0)
}

/// Samples `trials` interior rows with a random free coordinate each and
/// checks that the square-sum and entropy partials have opposite signs (or
/// vanish together), and that both agree with central differences.
pub fn verify_opposite_monotonicity(trials: usize, k: usize, seed: u64) -> Result<MonotonicityReport> {
    if trials == 0 {
        return Err(Error::Config("trials must be > 0".into()));
    }
    if k < 2 {
        return Err(Error::Config(format!("K must be >= 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = MonotonicityReport {
        k,
        ..Default::default()
    };
    for _ in 0..trials {
        let row = sample_interior_row(&mut rng, k);
        let j = rng.random_range(0..k - 1);
        let outcome = check_probe(&RowProbe::new(row, j))?;
        report.checked += 1;
        report.both_zero += usize::from(outcome.both_zero);
        report.sign_failures += usize::from(!outcome.sign_ok);
        report.fd_failures += usize::from(!outcome.fd_ok);
    }
    Ok(report)
}
