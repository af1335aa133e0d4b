//! Well-posedness certificates for a problem instance.
//!
//! Around the ground truth `x₀ = [ŝ; h]` the Hessian of the misfit
//! `f(x) = ½‖B(x) − ŷ‖²` equals `J*J`, with `J` the Jacobian of the bilinear
//! map `B(p̂, q)_n = sqrt(L)·p̂ ⊙ dft(pad(q_n))`:
//!
//! ```text
//!       ⎡ D_ŵ₀       D_ŝ F_K   0        …  0       ⎤
//! J = √L⎢ D_ŵ₁       0         D_ŝ F_K  …  0       ⎥
//!       ⎢ ⋮                              ⋱        ⎥
//!       ⎣ D_ŵ_{N−1}  0         0        …  D_ŝ F_K ⎦
//! ```
//!
//! Its kernel always contains the scalar-ambiguity direction
//! `v = [−ŝ; h]`. The kernel is exactly one-dimensional (given `LN ≥ L+KN−1`
//! and a signal without Fourier zeros) iff some channel has a nonzero last
//! tap and the channel polynomials `Σ_k h_n[k] zᵏ` share no root. This module
//! measures the kernel numerically and checks both conditions directly.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fourier::{dft_real, pad, ShortFilter};
use crate::model::{ProblemDims, ProblemInstance};

/// Default relative cutoff on singular values, as a fraction of `σ_max`.
pub const DEFAULT_NULLSPACE_REL_TOL: f64 = 1e-8;
/// Default absolute threshold below which a last tap counts as zero.
pub const DEFAULT_TAP_TOL: f64 = 1e-12;
/// Default absolute distance under which two roots are considered shared.
pub const DEFAULT_ROOT_TOL: f64 = 1e-7;

/// Necessary counting condition `L·N ≥ L + K·N − 1`.
pub fn info_count_ok(dims: ProblemDims) -> bool {
    dims.num_measurements() + 1 >= dims.num_unknowns()
}

/// Dense Jacobian of the bilinear map at the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMatrix {
    dims: ProblemDims,
    entries: DMatrix<Complex64>,
}

impl JacobianMatrix {
    pub fn dims(&self) -> ProblemDims {
        self.dims
    }

    pub fn entries(&self) -> &DMatrix<Complex64> {
        &self.entries
    }

    /// Singular values in decreasing order. Wide matrices are padded with
    /// zeros so there is always one value per column.
    pub fn singular_values(&self) -> Result<Vec<f64>> {
        let svd = self
            .entries
            .clone()
            .try_svd(false, false, f64::EPSILON, 100_000)
            .ok_or_else(|| Error::Numerical("SVD of the Jacobian did not converge".into()))?;
        let mut values: Vec<f64> = svd.singular_values.iter().copied().collect();
        values.sort_by(|a, b| b.total_cmp(a));
        values.resize(self.entries.ncols(), 0.0);
        Ok(values)
    }

    pub fn apply(&self, v: &DVector<Complex64>) -> DVector<Complex64> {
        &self.entries * v
    }
}

/// Builds `J` at the instance's ground truth.
pub fn build_jacobian(inst: &ProblemInstance) -> JacobianMatrix {
    let dims = inst.dims();
    let (l, k, n) = (dims.signal_len, dims.filter_len, dims.num_channels);
    let root_len = (l as f64).sqrt();
    let s_hat = dft_real(inst.signal());
    let mut entries = DMatrix::zeros(l * n, l + k * n);
    for (c, h) in inst.channels().iter().enumerate() {
        let w_hat = dft_real(&pad(h));
        for row in 0..l {
            entries[(c * l + row, row)] = w_hat[row] * root_len;
            for tap in 0..k {
                // sqrt(L) · ŝ[l] · F[l, k] with F[l, k] = exp(−2πi·l·k/L)/sqrt(L).
                let phase = -2.0 * std::f64::consts::PI * ((row * tap) % l) as f64 / l as f64;
                entries[(c * l + row, l + c * k + tap)] = s_hat[row] * Complex64::from_polar(1.0, phase);
            }
        }
    }
    JacobianMatrix { dims, entries }
}

/// Number of singular values at or below `rel_tol · σ_max`, counting the
/// structural zeros of a wide matrix.
pub fn nullspace_dim(jac: &JacobianMatrix, rel_tol: f64) -> Result<usize> {
    let values = jac.singular_values()?;
    Ok(count_null(&values, rel_tol))
}

fn count_null(values: &[f64], rel_tol: f64) -> usize {
    let sigma_max = values.first().copied().unwrap_or(0.0);
    let cutoff = rel_tol * sigma_max;
    values.iter().filter(|&&s| s <= cutoff).count()
}

/// Scalar-ambiguity direction `v = [−ŝ; h₀; …; h_{N−1}]`.
pub fn ambiguity_vector(inst: &ProblemInstance) -> DVector<Complex64> {
    let s_hat = dft_real(inst.signal());
    let taps = inst
        .channels()
        .iter()
        .flat_map(|h| h.coeffs().iter().map(|&c| Complex64::new(c, 0.0)));
    DVector::from_iterator(
        inst.dims().num_unknowns(),
        s_hat.iter().map(|v| -v).chain(taps),
    )
}

/// `‖J v‖ / ‖v‖`.
pub fn ambiguity_residual(jac: &JacobianMatrix, v: &DVector<Complex64>) -> f64 {
    jac.apply(v).norm() / v.norm()
}

/// A channel read as the polynomial `Σ_k c[k] zᵏ`, with its roots.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterPolynomial {
    coeffs: Vec<f64>,
    degree: usize,
    roots: Vec<Complex64>,
}

impl FilterPolynomial {
    /// Trims trailing coefficients with magnitude `≤ tail_tol` and computes
    /// the roots as companion-matrix eigenvalues.
    pub fn new(coeffs: &[f64], tail_tol: f64) -> Result<Self> {
        let degree = coeffs
            .iter()
            .rposition(|c| c.abs() > tail_tol)
            .ok_or(Error::DegenerateChannel { index: 0 })?;
        let roots = if degree == 0 {
            Vec::new()
        } else {
            let lead = coeffs[degree];
            let companion = DMatrix::from_fn(degree, degree, |r, c| {
                if c == degree - 1 {
                    -coeffs[r] / lead
                } else if r == c + 1 {
                    1.0
                } else {
                    0.0
                }
            });
            companion.complex_eigenvalues().iter().copied().collect()
        };
        Ok(Self {
            coeffs: coeffs.to_vec(),
            degree,
            roots,
        })
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn roots(&self) -> &[Complex64] {
        &self.roots
    }

    pub fn eval(&self, z: Complex64) -> Complex64 {
        self.coeffs[..=self.degree]
            .iter()
            .rev()
            .fold(Complex64::new(0.0, 0.0), |acc, &c| acc * z + c)
    }

    /// Monic-times-leading-coefficient expansion of the stored roots.
    pub fn reconstruct(&self) -> Vec<Complex64> {
        let mut poly = vec![Complex64::new(1.0, 0.0)];
        for &r in &self.roots {
            let mut next = vec![Complex64::new(0.0, 0.0); poly.len() + 1];
            for (i, &c) in poly.iter().enumerate() {
                next[i + 1] += c;
                next[i] -= c * r;
            }
            poly = next;
        }
        let lead = self.coeffs[self.degree];
        poly.iter().map(|c| c * lead).collect()
    }
}

/// Some channel has a last tap with magnitude above `DEFAULT_TAP_TOL`.
pub fn condition1(channels: &[ShortFilter]) -> bool {
    condition1_with_tol(channels, DEFAULT_TAP_TOL)
}

pub fn condition1_with_tol(channels: &[ShortFilter], tol_abs: f64) -> bool {
    channels
        .iter()
        .filter_map(|h| h.coeffs().last())
        .any(|c| c.abs() > tol_abs)
}

/// The channel polynomials share no common root.
///
/// With a single channel the question is ill-posed; this returns `true`
/// only for one-tap filters, which have no roots at all.
pub fn condition2(channels: &[ShortFilter]) -> Result<bool> {
    condition2_with_tol(channels, DEFAULT_ROOT_TOL, DEFAULT_TAP_TOL)
}

pub fn condition2_with_tol(channels: &[ShortFilter], root_tol: f64, tail_tol: f64) -> Result<bool> {
    let polys = channels
        .iter()
        .enumerate()
        .map(|(index, h)| {
            FilterPolynomial::new(h.coeffs(), tail_tol).map_err(|e| match e {
                Error::DegenerateChannel { .. } => Error::DegenerateChannel { index },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    match polys.as_slice() {
        [] => Err(Error::Dimension("need at least one channel".into())),
        [single] => Ok(single.coeffs().len() == 1),
        [first, rest @ ..] => {
            let shared = first.roots().iter().any(|r| {
                rest.iter()
                    .all(|p| p.roots().iter().any(|s| (r - s).norm() <= root_tol))
            });
            Ok(!shared)
        }
    }
}

/// `min_l |ŝ[l]| > 1e-10 · max_l |ŝ[l]|`.
pub fn fourier_zero_free(signal: &[f64]) -> bool {
    let mags: Vec<f64> = dft_real(signal).iter().map(|v| v.norm()).collect();
    let max = mags.iter().copied().fold(0.0, f64::max);
    let min = mags.iter().copied().fold(f64::INFINITY, f64::min);
    max > 0.0 && min > 1e-10 * max
}

/// Thresholds used by [`analyze_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisOptions {
    pub nullspace_rel_tol: f64,
    pub tap_tol: f64,
    pub root_tol: f64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            nullspace_rel_tol: DEFAULT_NULLSPACE_REL_TOL,
            tap_tol: DEFAULT_TAP_TOL,
            root_tol: DEFAULT_ROOT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentifiabilityReport {
    pub dims: ProblemDims,
    pub info_count_ok: bool,
    pub condition1_ok: bool,
    pub condition2_ok: bool,
    pub fourier_zero_free: bool,
    pub nullspace_dim: usize,
    /// The three smallest singular values of `J`, ascending.
    pub smallest_singular_values: [f64; 3],
    pub ambiguity_vector_residual: f64,
}

impl IdentifiabilityReport {
    pub const CSV_HEADER: &'static str =
        "info_count_ok,cond1,cond2,nullspace_dim,sigma_min1,sigma_min2,sigma_min3,fourier_zero_free";

    /// All hypotheses of the uniqueness result hold.
    pub fn predicts_identifiable(&self) -> bool {
        self.info_count_ok && self.condition1_ok && self.condition2_ok && self.fourier_zero_free
    }

    pub fn to_csv(&self) -> String {
        let [a, b, c] = self.smallest_singular_values;
        format!(
            "{},{},{},{},{a:.6e},{b:.6e},{c:.6e},{}",
            self.info_count_ok,
            self.condition1_ok,
            self.condition2_ok,
            self.nullspace_dim,
            self.fourier_zero_free
        )
    }
}

impl fmt::Display for IdentifiabilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let yes = |b: bool| if b { "yes" } else { "NO" };
        writeln!(f, "dimensions            {}", self.dims)?;
        writeln!(
            f,
            "information count     {} (LN = {}, L + KN - 1 = {})",
            yes(self.info_count_ok),
            self.dims.num_measurements(),
            self.dims.num_unknowns() - 1
        )?;
        writeln!(f, "last tap filled       {}", yes(self.condition1_ok))?;
        writeln!(f, "no shared root        {}", yes(self.condition2_ok))?;
        writeln!(f, "zero-free signal DFT  {}", yes(self.fourier_zero_free))?;
        writeln!(f, "null-space dimension  {}", self.nullspace_dim)?;
        writeln!(
            f,
            "smallest sing. values {:.3e} {:.3e} {:.3e}",
            self.smallest_singular_values[0],
            self.smallest_singular_values[1],
            self.smallest_singular_values[2]
        )?;
        write!(
            f,
            "|Jv|/|v| (ambiguity)  {:.3e}",
            self.ambiguity_vector_residual
        )
    }
}

pub fn analyze(inst: &ProblemInstance) -> Result<IdentifiabilityReport> {
    analyze_with(inst, &AnalysisOptions::default())
}

pub fn analyze_with(inst: &ProblemInstance, opts: &AnalysisOptions) -> Result<IdentifiabilityReport> {
    let dims = inst.dims();
    let jac = build_jacobian(inst);
    let values = jac.singular_values()?;
    let mut smallest = [0.0; 3];
    for (slot, v) in smallest.iter_mut().zip(values.iter().rev()) {
        *slot = *v;
    }
    let v = ambiguity_vector(inst);
    Ok(IdentifiabilityReport {
        dims,
        info_count_ok: info_count_ok(dims),
        condition1_ok: condition1_with_tol(inst.channels(), opts.tap_tol),
        condition2_ok: condition2_with_tol(inst.channels(), opts.root_tol, opts.tap_tol)?,
        fourier_zero_free: fourier_zero_free(inst.signal()),
        nullspace_dim: count_null(&values, opts.nullspace_rel_tol),
        smallest_singular_values: smallest,
        ambiguity_vector_residual: ambiguity_residual(&jac, &v),
    })
}

/// Channel families that violate one of the two conditions by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CounterexampleKind {
    /// Every channel has a zero last tap.
    NoTopTap,
    /// Every channel polynomial has the real root `β`.
    SharedRoot(f64),
}

impl std::str::FromStr for CounterexampleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "no-top-tap" || s == "no_top_tap" {
            return Ok(Self::NoTopTap);
        }
        let rest = s
            .strip_prefix("shared-root")
            .or_else(|| s.strip_prefix("shared_root"))
            .ok_or_else(|| Error::Unsupported(format!("unknown counterexample kind '{s}'")))?;
        let beta = match rest.strip_prefix(':').or_else(|| rest.strip_prefix('=')) {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Unsupported(format!("bad root value in '{s}'")))?,
            None if rest.is_empty() => 0.5,
            None => return Err(Error::Unsupported(format!("unknown counterexample kind '{s}'"))),
        };
        Ok(Self::SharedRoot(beta))
    }
}

/// Random Gaussian channels forced into a condition-violating family.
pub fn make_counterexample<R: Rng + ?Sized>(
    dims: ProblemDims,
    kind: CounterexampleKind,
    rng: &mut R,
) -> Result<Vec<ShortFilter>> {
    let (l, k) = (dims.signal_len, dims.filter_len);
    if k < 2 {
        return Err(Error::Unsupported(
            "counterexamples need filters with at least two taps".into(),
        ));
    }
    (0..dims.num_channels)
        .map(|_| {
            let base: Vec<f64> = (0..k - 1).map(|_| StandardNormal.sample(rng)).collect();
            let taps = match kind {
                CounterexampleKind::NoTopTap => {
                    let mut t = base;
                    t.push(0.0);
                    t
                }
                CounterexampleKind::SharedRoot(beta) => {
                    // (z − β)·g(z), g of degree K − 2.
                    let mut t = vec![0.0; k];
                    for (i, &g) in base.iter().enumerate() {
                        t[i] -= beta * g;
                        t[i + 1] += g;
                    }
                    t
                }
            };
            ShortFilter::new(taps, l)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::sample_instance;
    use crate::model::make_instance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(l: usize, k: usize, n: usize) -> ProblemDims {
        ProblemDims::new(l, k, n).unwrap()
    }

    fn filters(taps: &[&[f64]], l: usize) -> Vec<ShortFilter> {
        taps.iter().map(|t| ShortFilter::new(t.to_vec(), l).unwrap()).collect()
    }

    #[test]
    fn info_count_examples() {
        assert!(info_count_ok(dims(32, 16, 2)));
        assert!(!info_count_ok(dims(32, 32, 2)));
        assert!(info_count_ok(dims(32, 28, 8)));
    }

    #[test]
    fn single_channel_full_support_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let inst = sample_instance(dims(4, 4, 1), &mut rng);
        let jac = build_jacobian(&inst);
        assert_eq!(jac.entries().shape(), (4, 8));
        let s_hat = dft_real(inst.signal());
        let w_hat = dft_real(&pad(&inst.channels()[0]));
        for r in 0..4 {
            for c in 0..4 {
                let left = jac.entries()[(r, c)];
                if r == c {
                    assert!((left - w_hat[r] * 2.0).norm() < 1e-12);
                } else {
                    assert_eq!(left, Complex64::new(0.0, 0.0));
                }
            }
        }
        // Right block: sqrt(L)·D_ŝ·F.
        let f = |r: usize, c: usize| {
            Complex64::from_polar(0.5, -2.0 * std::f64::consts::PI * (r * c) as f64 / 4.0)
        };
        for r in 0..4 {
            for c in 0..4 {
                let want = s_hat[r] * f(r, c) * 2.0;
                assert!((jac.entries()[(r, 4 + c)] - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn nullspace_dim_one_for_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let inst = sample_instance(dims(8, 3, 3), &mut rng);
        assert_eq!(nullspace_dim(&build_jacobian(&inst), DEFAULT_NULLSPACE_REL_TOL).unwrap(), 1);
    }

    #[test]
    fn nullspace_grows_for_violations() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let d = dims(8, 3, 3);
        let s = sample_instance(d, &mut rng).signal().to_vec();
        for kind in [CounterexampleKind::NoTopTap, CounterexampleKind::SharedRoot(0.5)] {
            let hs = make_counterexample(d, kind, &mut rng).unwrap();
            let inst = make_instance(d, s.clone(), hs).unwrap();
            let dim = nullspace_dim(&build_jacobian(&inst), DEFAULT_NULLSPACE_REL_TOL).unwrap();
            assert!(dim >= 2, "{kind:?} gave {dim}");
        }
    }

    #[test]
    fn ambiguity_vector_is_in_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for d in [dims(8, 3, 3), dims(16, 4, 4), dims(7, 2, 5)] {
            let inst = sample_instance(d, &mut rng);
            let v = ambiguity_vector(&inst);
            assert_eq!(v.len(), d.num_unknowns());
            assert!(ambiguity_residual(&build_jacobian(&inst), &v) < 1e-10);
        }
    }

    #[test]
    fn condition1_examples() {
        assert!(condition1(&filters(&[&[1.0, 0.0], &[0.0, 1.0]], 4)));
        assert!(!condition1(&filters(&[&[1.0, 0.0], &[3.0, 0.0]], 4)));
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for _ in 0..1000 {
            let inst = sample_instance(dims(8, 4, 3), &mut rng);
            assert!(condition1(inst.channels()));
        }
    }

    #[test]
    fn condition2_examples() {
        assert!(condition2(&filters(&[&[1.0, 1.0], &[1.0, 2.0]], 4)).unwrap());
        assert!(!condition2(&filters(&[&[1.0, 1.0], &[2.0, 2.0]], 4)).unwrap());
        assert!(!condition2(&filters(&[&[0.0, 1.0], &[0.0, 3.0]], 4)).unwrap());
        assert_eq!(
            condition2(&filters(&[&[1.0, 1.0], &[0.0, 0.0]], 4)),
            Err(Error::DegenerateChannel { index: 1 })
        );
    }

    #[test]
    fn condition2_single_channel_convention() {
        assert!(!condition2(&filters(&[&[1.0, 2.0]], 4)).unwrap());
        assert!(condition2(&filters(&[&[3.0]], 4)).unwrap());
    }

    #[test]
    fn degree_zero_polynomial_has_no_roots() {
        // [2, 0] is the constant 2: no root can be shared.
        assert!(condition2(&filters(&[&[2.0, 0.0], &[1.0, 1.0]], 4)).unwrap());
    }

    #[test]
    fn roots_reconstruct_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for k in [2, 3, 5, 8, 16] {
            let coeffs: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
            let poly = FilterPolynomial::new(&coeffs, DEFAULT_TAP_TOL).unwrap();
            assert_eq!(poly.roots().len(), k - 1);
            let rebuilt = poly.reconstruct();
            let scale = coeffs.iter().map(|c| c * c).sum::<f64>().sqrt();
            for (a, b) in rebuilt.iter().zip(&coeffs) {
                assert!((a - Complex64::new(*b, 0.0)).norm() < 1e-8 * scale);
            }
            for r in poly.roots() {
                let dz = poly.eval(*r).norm();
                assert!(dz < 1e-8 * scale * (1.0 + r.norm()).powi(k as i32));
            }
        }
    }

    #[test]
    fn trailing_zeros_reduce_degree() {
        let poly = FilterPolynomial::new(&[1.0, -3.0, 2.0, 0.0, 1e-14], DEFAULT_TAP_TOL).unwrap();
        assert_eq!(poly.degree(), 2);
        let mut roots: Vec<f64> = poly.roots().iter().map(|r| r.re).collect();
        roots.sort_by(f64::total_cmp);
        assert!((roots[0] - 0.5).abs() < 1e-12 && (roots[1] - 1.0).abs() < 1e-12);
        assert!(FilterPolynomial::new(&[0.0, 0.0], DEFAULT_TAP_TOL).is_err());
    }

    #[test]
    fn counterexamples_violate_their_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let d = dims(16, 5, 3);
        let a = make_counterexample(d, CounterexampleKind::NoTopTap, &mut rng).unwrap();
        assert!(!condition1(&a));
        let b = make_counterexample(d, CounterexampleKind::SharedRoot(0.5), &mut rng).unwrap();
        assert!(!condition2(&b).unwrap());
        for h in &b {
            let p = FilterPolynomial::new(h.coeffs(), DEFAULT_TAP_TOL).unwrap();
            assert!(p.eval(Complex64::new(0.5, 0.0)).norm() < 1e-12);
        }
        assert!(make_counterexample(dims(8, 1, 2), CounterexampleKind::NoTopTap, &mut rng).is_err());
    }

    #[test]
    fn counterexample_kind_parses() {
        assert_eq!("no-top-tap".parse::<CounterexampleKind>().unwrap(), CounterexampleKind::NoTopTap);
        assert_eq!(
            "shared-root:0.25".parse::<CounterexampleKind>().unwrap(),
            CounterexampleKind::SharedRoot(0.25)
        );
        assert_eq!(
            "shared_root".parse::<CounterexampleKind>().unwrap(),
            CounterexampleKind::SharedRoot(0.5)
        );
        assert!("bogus".parse::<CounterexampleKind>().is_err());
        assert!("shared-root:x".parse::<CounterexampleKind>().is_err());
    }

    #[test]
    fn analyze_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let inst = sample_instance(dims(32, 8, 4), &mut rng);
        let rep = analyze(&inst).unwrap();
        assert!(rep.predicts_identifiable());
        assert_eq!(rep.nullspace_dim, 1);
        assert!(rep.smallest_singular_values[0] <= rep.smallest_singular_values[1]);
        assert!(rep.to_csv().starts_with("true,true,true,1,"));

        let d = dims(32, 8, 4);
        let hs = make_counterexample(d, CounterexampleKind::NoTopTap, &mut rng).unwrap();
        let bad = make_instance(d, inst.signal().to_vec(), hs).unwrap();
        let rep = analyze(&bad).unwrap();
        assert!(!rep.condition1_ok);
        assert!(rep.nullspace_dim >= 2);

        let over = sample_instance(dims(32, 32, 2), &mut rng);
        let rep = analyze(&over).unwrap();
        assert!(!rep.info_count_ok);
        assert!(rep.nullspace_dim >= 32);
    }

    /// `B(p̂, q)` flattened channel by channel.
    fn bilinear(p_hat: &[Complex64], q: &[f64], l: usize, k: usize) -> Vec<Complex64> {
        let root = (l as f64).sqrt();
        q.chunks(k)
            .flat_map(|h| {
                let mut padded = h.to_vec();
                padded.resize(l, 0.0);
                dft_real(&padded)
                    .into_iter()
                    .zip(p_hat)
                    .map(move |(w, p)| p * w * root)
            })
            .collect()
    }

    fn unknowns(inst: &ProblemInstance) -> (Vec<Complex64>, Vec<f64>) {
        let q = inst.channels().iter().flat_map(|h| h.coeffs().to_vec()).collect();
        (dft_real(inst.signal()), q)
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for (l, k, n) in [(8, 3, 2), (7, 2, 3), (16, 4, 4)] {
            let inst = sample_instance(dims(l, k, n), &mut rng);
            let jac = build_jacobian(&inst);
            let (p_hat, q) = unknowns(&inst);
            let eps = 1e-6;
            let mut worst = 0.0f64;
            for col in 0..l + k * n {
                let (mut pa, mut pb, mut qa, mut qb) = (p_hat.clone(), p_hat.clone(), q.clone(), q.clone());
                if col < l {
                    pa[col] += eps;
                    pb[col] -= eps;
                } else {
                    qa[col - l] += eps;
                    qb[col - l] -= eps;
                }
                let fa = bilinear(&pa, &qa, l, k);
                let fb = bilinear(&pb, &qb, l, k);
                for row in 0..l * n {
                    let fd = (fa[row] - fb[row]) / (2.0 * eps);
                    worst = worst.max((fd - jac.entries()[(row, col)]).norm());
                }
            }
            let scale = jac.entries().iter().map(|v| v.norm()).fold(0.0, f64::max);
            assert!(worst < 1e-6 * scale, "dims {l},{k},{n}: {worst}");
        }
    }

    #[test]
    fn misfit_hessian_at_truth_is_gram_of_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (l, k, n) = (8, 3, 2);
        let inst = sample_instance(dims(l, k, n), &mut rng);
        let (p_hat, q) = unknowns(&inst);
        let y = bilinear(&p_hat, &q, l, k);
        // Real coordinates: Re p̂, Im p̂, q.
        let dim = 2 * l + k * n;
        let f = |z: &[f64]| {
            let p: Vec<Complex64> = (0..l).map(|i| Complex64::new(z[i], z[l + i])).collect();
            let r = bilinear(&p, &z[2 * l..], l, k);
            0.5 * r.iter().zip(&y).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>()
        };
        let z0: Vec<f64> = p_hat
            .iter()
            .map(|v| v.re)
            .chain(p_hat.iter().map(|v| v.im))
            .chain(q.iter().copied())
            .collect();

        let jac = build_jacobian(&inst);
        let column = |c: usize| -> Vec<Complex64> {
            let (src, factor) = if c < l {
                (c, Complex64::new(1.0, 0.0))
            } else if c < 2 * l {
                (c - l, Complex64::new(0.0, 1.0))
            } else {
                (c - l, Complex64::new(1.0, 0.0))
            };
            jac.entries().column(src).iter().map(|v| v * factor).collect()
        };
        let cols: Vec<Vec<Complex64>> = (0..dim).map(column).collect();

        let eps = 1e-3;
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for i in 0..dim {
            for j in 0..dim {
                let at = |si: f64, sj: f64| {
                    let mut z = z0.clone();
                    z[i] += si * eps;
                    z[j] += sj * eps;
                    f(&z)
                };
                let fd = (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * eps * eps);
                let gram: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| (a.conj() * b).re).sum();
                worst = worst.max((fd - gram).abs());
                scale = scale.max(gram.abs());
            }
        }
        assert!(worst < 1e-4 * scale, "{worst} vs {scale}");
    }

    #[test]
    fn misfit_along_ambiguity_direction_is_quartic() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (l, k, n) = (16, 4, 3);
        let inst = sample_instance(dims(l, k, n), &mut rng);
        let (p_hat, q) = unknowns(&inst);
        let y = bilinear(&p_hat, &q, l, k);
        let y_sq: f64 = y.iter().map(|v| v.norm_sqr()).sum();
        for eps in [1e-1, 1e-2, 1e-3] {
            let p: Vec<Complex64> = p_hat.iter().map(|v| v * (1.0 - eps)).collect();
            let h: Vec<f64> = q.iter().map(|v| v * (1.0 + eps)).collect();
            let r = bilinear(&p, &h, l, k);
            let f = 0.5 * r.iter().zip(&y).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
            let want = 0.5 * eps.powi(4) * y_sq;
            assert!((f - want).abs() <= 1e-6 * want + 1e-20, "eps {eps}: {f} vs {want}");
        }
    }

    #[test]
    fn zero_free_detection() {
        assert!(fourier_zero_free(&[1.0, 0.0, 0.0, 0.0]));
        // [1, 1, 1, 1] only has a DC component.
        assert!(!fourier_zero_free(&[1.0, 1.0, 1.0, 1.0]));
        assert!(!fourier_zero_free(&[0.0; 4]));
    }
}
