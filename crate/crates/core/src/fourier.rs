//! Unitary DFT, circular convolution and its adjoint, and zero-padding of
//! short filters.
//!
//! The DFT is normalized by `1/sqrt(L)` in both directions, so it is an
//! isometry. The convolution identity therefore carries an explicit factor:
//!
//! ```text
//! dft(a ⊛ b) = sqrt(L) · dft(a) ⊙ dft(b)
//! ```
//!
//! Power-of-two lengths go through an iterative radix-2 FFT; every other
//! length uses the direct `O(L²)` sum, which is also exported for testing.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{dim_err, Error, Result};

/// A channel supported on its first `K` samples of an `L`-sample period.
#[derive(Debug, Clone, PartialEq)]
pub struct ShortFilter {
    coeffs: Vec<f64>,
    ambient_len: usize,
}

impl ShortFilter {
    pub fn new(coeffs: Vec<f64>, ambient_len: usize) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(dim_err("filter must have at least one tap"));
        }
        if coeffs.len() > ambient_len {
            return Err(dim_err(format!(
                "filter length {} exceeds ambient length {}",
                coeffs.len(),
                ambient_len
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("filter coefficients"));
        }
        Ok(Self { coeffs, ambient_len })
    }

    pub fn zeros(len: usize, ambient_len: usize) -> Self {
        Self {
            coeffs: vec![0.0; len],
            ambient_len,
        }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn ambient_len(&self) -> usize {
        self.ambient_len
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }
}

fn twiddle(sign: f64, num: usize, len: usize) -> Complex64 {
    Complex64::from_polar(1.0, sign * 2.0 * PI * num as f64 / len as f64)
}

/// Unnormalized direct transform with kernel `exp(sign · 2πi·l·k/L)`.
fn direct_sum(x: &[Complex64], sign: f64) -> Vec<Complex64> {
    let len = x.len();
    (0..len)
        .map(|l| {
            x.iter()
                .enumerate()
                .map(|(k, &v)| v * twiddle(sign, (l * k) % len, len))
                .sum()
        })
        .collect()
}

/// In-place unnormalized radix-2 transform. `buf.len()` must be a power of two.
fn radix2_in_place(buf: &mut [Complex64], sign: f64) {
    let len = buf.len();
    let bits = len.trailing_zeros();
    if bits == 0 {
        return;
    }
    for i in 0..len {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut half = 1;
    while half < len {
        let span = half * 2;
        let step = twiddle(sign, 1, span);
        for start in (0..len).step_by(span) {
            let mut w = Complex64::new(1.0, 0.0);
            for k in 0..half {
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
                w *= step;
            }
        }
        half = span;
    }
}

fn transform(x: &[Complex64], sign: f64) -> Vec<Complex64> {
    let len = x.len();
    let scale = 1.0 / (len as f64).sqrt();
    let mut out = if len.is_power_of_two() {
        let mut buf = x.to_vec();
        radix2_in_place(&mut buf, sign);
        buf
    } else {
        direct_sum(x, sign)
    };
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

/// Unitary forward DFT.
pub fn dft(x: &[Complex64]) -> Vec<Complex64> {
    transform(x, -1.0)
}

/// Unitary forward DFT of a real sequence.
pub fn dft_real(x: &[f64]) -> Vec<Complex64> {
    let buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    dft(&buf)
}

/// Unitary inverse DFT.
pub fn idft(x: &[Complex64]) -> Vec<Complex64> {
    transform(x, 1.0)
}

/// Unitary forward DFT by direct summation, for any length.
pub fn dft_direct(x: &[Complex64]) -> Vec<Complex64> {
    let scale = 1.0 / (x.len() as f64).sqrt();
    direct_sum(x, -1.0).into_iter().map(|v| v * scale).collect()
}

/// Unitary inverse DFT by direct summation, for any length.
pub fn idft_direct(x: &[Complex64]) -> Vec<Complex64> {
    let scale = 1.0 / (x.len() as f64).sqrt();
    direct_sum(x, 1.0).into_iter().map(|v| v * scale).collect()
}

/// Embeds a short filter into its ambient length (the first `K` columns of
/// the identity).
pub fn pad(h: &ShortFilter) -> Vec<f64> {
    let mut out = vec![0.0; h.ambient_len()];
    out[..h.len()].copy_from_slice(h.coeffs());
    out
}

/// Discards the imaginary part after checking it is round-off only.
pub(crate) fn real_part_checked(x: &[Complex64]) -> Vec<f64> {
    let norm = x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    let imag = x.iter().map(|v| v.im * v.im).sum::<f64>().sqrt();
    assert!(
        imag <= 1e-10 * norm.max(f64::MIN_POSITIVE),
        "imaginary residue {imag:e} too large for a real result (norm {norm:e})"
    );
    x.iter().map(|v| v.re).collect()
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(dim_err(format!(
            "sequence lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(dim_err("sequences must be non-empty"));
    }
    Ok(())
}

/// Circular convolution `(a ⊛ b)[i] = Σ_j a[j] b[(i - j) mod L]`.
pub fn circ_conv(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_same_len(a, b)?;
    let root_len = (a.len() as f64).sqrt();
    let fa = dft_real(a);
    let fb = dft_real(b);
    let prod: Vec<Complex64> = fa.iter().zip(&fb).map(|(x, y)| x * y * root_len).collect();
    Ok(real_part_checked(&idft(&prod)))
}

/// Circular cross-correlation `g[j] = Σ_i y[i] b[(i - j) mod L]`, the adjoint
/// of `x ↦ circ_conv(x, b)`.
pub fn circ_corr(y: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_same_len(y, b)?;
    let root_len = (y.len() as f64).sqrt();
    let fy = dft_real(y);
    let fb = dft_real(b);
    let prod: Vec<Complex64> = fy
        .iter()
        .zip(&fb)
        .map(|(x, w)| x * w.conj() * root_len)
        .collect();
    Ok(real_part_checked(&idft(&prod)))
}
