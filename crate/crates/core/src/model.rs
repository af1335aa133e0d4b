//! Problem instances, the lifted measurement operator and the recovery metric.
//!
//! Observations are `y_n = s ⊛ pad(h_n)`. In the Fourier domain the same
//! measurements read `ŷ_n = sqrt(L) · dft(s) ⊙ dft(pad(h_n))`, which is the
//! linear operator `A` applied to the rank-one lift `s hᵀ`. Nothing here
//! ever materializes the lift; all evaluations run on the factors.

use num_complex::Complex64;

use crate::error::{dim_err, Error, Result};
use crate::fourier::{circ_conv, dft_real, idft, pad, real_part_checked, ShortFilter};

/// Signal length `L`, filter support `K` and channel count `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ProblemDims {
    pub signal_len: usize,
    pub filter_len: usize,
    pub num_channels: usize,
}

impl ProblemDims {
    pub fn new(signal_len: usize, filter_len: usize, num_channels: usize) -> Result<Self> {
        if signal_len == 0 || filter_len == 0 || filter_len > signal_len {
            return Err(dim_err(format!(
                "need 1 <= K <= L, got L = {signal_len}, K = {filter_len}"
            )));
        }
        if num_channels == 0 {
            return Err(dim_err("need at least one channel"));
        }
        Ok(Self {
            signal_len,
            filter_len,
            num_channels,
        })
    }

    /// Number of scalar measurements, `L·N`.
    pub fn num_measurements(&self) -> usize {
        self.signal_len * self.num_channels
    }

    /// Number of scalar unknowns, `L + K·N`.
    pub fn num_unknowns(&self) -> usize {
        self.signal_len + self.filter_len * self.num_channels
    }
}

impl std::fmt::Display for ProblemDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "L={} K={} N={}",
            self.signal_len, self.filter_len, self.num_channels
        )
    }
}

/// A ground-truth signal and channel set together with their observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    dims: ProblemDims,
    signal: Vec<f64>,
    channels: Vec<ShortFilter>,
    observations: Vec<Vec<f64>>,
    observations_fourier: Vec<Vec<Complex64>>,
}

fn check_channels(dims: &ProblemDims, channels: &[ShortFilter]) -> Result<()> {
    if channels.len() != dims.num_channels {
        return Err(dim_err(format!(
            "expected {} channels, got {}",
            dims.num_channels,
            channels.len()
        )));
    }
    for (i, h) in channels.iter().enumerate() {
        if h.len() != dims.filter_len || h.ambient_len() != dims.signal_len {
            return Err(dim_err(format!(
                "channel {i} has {} taps in length {}, expected {} in {}",
                h.len(),
                h.ambient_len(),
                dims.filter_len,
                dims.signal_len
            )));
        }
    }
    Ok(())
}

/// Builds a noiseless instance from a signal and its channels.
pub fn make_instance(
    dims: ProblemDims,
    signal: Vec<f64>,
    channels: Vec<ShortFilter>,
) -> Result<ProblemInstance> {
    if signal.len() != dims.signal_len {
        return Err(dim_err(format!(
            "signal has length {}, expected {}",
            signal.len(),
            dims.signal_len
        )));
    }
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("signal"));
    }
    check_channels(&dims, &channels)?;
    let observations = channels
        .iter()
        .map(|h| circ_conv(&signal, &pad(h)))
        .collect::<Result<Vec<_>>>()?;
    let observations_fourier = observations.iter().map(|y| dft_real(y)).collect();
    Ok(ProblemInstance {
        dims,
        signal,
        channels,
        observations,
        observations_fourier,
    })
}

impl ProblemInstance {
    pub fn dims(&self) -> ProblemDims {
        self.dims
    }

    pub fn signal(&self) -> &[f64] {
        &self.signal
    }

    pub fn channels(&self) -> &[ShortFilter] {
        &self.channels
    }

    pub fn observations(&self) -> &[Vec<f64>] {
        &self.observations
    }

    pub fn observations_fourier(&self) -> &[Vec<Complex64>] {
        &self.observations_fourier
    }

    /// `‖ŷ‖₂²` summed over all channels.
    pub fn observation_energy(&self) -> f64 {
        self.observations_fourier
            .iter()
            .flatten()
            .map(|v| v.norm_sqr())
            .sum()
    }

    /// Replaces the observations (e.g. with noisy ones) and refreshes their
    /// Fourier transforms. The ground truth is kept.
    pub fn with_observations(mut self, observations: Vec<Vec<f64>>) -> Result<Self> {
        if observations.len() != self.dims.num_channels
            || observations.iter().any(|y| y.len() != self.dims.signal_len)
        {
            return Err(dim_err("observation shape does not match instance"));
        }
        if observations.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observations"));
        }
        self.observations_fourier = observations.iter().map(|y| dft_real(y)).collect();
        self.observations = observations;
        Ok(self)
    }

    pub fn ground_truth(&self) -> GroundTruthLift {
        GroundTruthLift::new(self.signal.clone(), &self.channels)
    }
}

/// Rank-one factor pair `(p, q)` standing for the lift `p qᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSolution {
    pub p: Vec<f64>,
    pub q: Vec<ShortFilter>,
}

impl CandidateSolution {
    pub fn new(p: Vec<f64>, q: Vec<ShortFilter>) -> Self {
        Self { p, q }
    }

    /// The filters concatenated into one length-`K·N` vector.
    pub fn q_concat(&self) -> Vec<f64> {
        concat_filters(&self.q)
    }

    /// Rebuilds a candidate from the concatenated filter view.
    pub fn from_concat(p: Vec<f64>, q: &[f64], filter_len: usize) -> Result<Self> {
        let ambient = p.len();
        if filter_len == 0 || q.len() % filter_len != 0 {
            return Err(dim_err("concatenated filter length is not a multiple of K"));
        }
        let q = q
            .chunks(filter_len)
            .map(|c| ShortFilter::new(c.to_vec(), ambient))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { p, q })
    }
}

pub(crate) fn concat_filters(q: &[ShortFilter]) -> Vec<f64> {
    q.iter().flat_map(|h| h.coeffs().iter().copied()).collect()
}

/// Norm data of the ground-truth lift `X₀ = s hᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthLift {
    pub frobenius_sq: f64,
    pub signal: Vec<f64>,
    pub channels_concat: Vec<f64>,
}

impl GroundTruthLift {
    pub fn new(signal: Vec<f64>, channels: &[ShortFilter]) -> Self {
        let channels_concat = concat_filters(channels);
        let frobenius_sq = dot(&signal, &signal) * dot(&channels_concat, &channels_concat);
        Self {
            frobenius_sq,
            signal,
            channels_concat,
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_factor_dims(p_len: usize, q: &[ShortFilter]) -> Result<()> {
    if p_len == 0 || q.is_empty() {
        return Err(dim_err("empty factor"));
    }
    let k = q[0].len();
    for h in q {
        if h.ambient_len() != p_len || h.len() != k {
            return Err(dim_err(format!(
                "filter of {} taps in length {} is inconsistent with p of length {p_len}",
                h.len(),
                h.ambient_len()
            )));
        }
    }
    Ok(())
}

/// Evaluates `A(p qᵀ)`: per channel `sqrt(L) · dft(p) ⊙ dft(pad(q_n))`.
pub fn forward(p: &[f64], q: &[ShortFilter]) -> Result<Vec<Vec<Complex64>>> {
    check_factor_dims(p.len(), q)?;
    let root_len = (p.len() as f64).sqrt();
    let p_hat = dft_real(p);
    Ok(q.iter()
        .map(|h| {
            dft_real(&pad(h))
                .iter()
                .zip(&p_hat)
                .map(|(a, b)| a * b * root_len)
                .collect()
        })
        .collect())
}

fn check_residual_dims(r: &[Vec<Complex64>], len: usize, channels: usize) -> Result<()> {
    if r.len() != channels || r.iter().any(|rn| rn.len() != len) {
        return Err(dim_err("residual shape does not match factors"));
    }
    Ok(())
}

/// Adjoint of `p ↦ A(p qᵀ)` with respect to the real inner product.
pub fn adjoint_p(r: &[Vec<Complex64>], q: &[ShortFilter]) -> Result<Vec<f64>> {
    let len = q.first().map(|h| h.ambient_len()).unwrap_or(0);
    check_factor_dims(len, q)?;
    check_residual_dims(r, len, q.len())?;
    let root_len = (len as f64).sqrt();
    let mut acc = vec![Complex64::new(0.0, 0.0); len];
    for (h, rn) in q.iter().zip(r) {
        for ((a, w), x) in acc.iter_mut().zip(dft_real(&pad(h))).zip(rn) {
            *a += w.conj() * x;
        }
    }
    Ok(idft(&acc).iter().map(|v| v.re * root_len).collect())
}

/// Adjoint of `q ↦ A(p qᵀ)` with respect to the real inner product.
pub fn adjoint_q(r: &[Vec<Complex64>], p: &[f64], filter_len: usize) -> Result<Vec<ShortFilter>> {
    let len = p.len();
    if filter_len == 0 || filter_len > len {
        return Err(dim_err("filter length must satisfy 1 <= K <= L"));
    }
    if r.is_empty() {
        return Err(dim_err("need at least one channel"));
    }
    check_residual_dims(r, len, r.len())?;
    let root_len = (len as f64).sqrt();
    let p_hat = dft_real(p);
    r.iter()
        .map(|rn| {
            let back: Vec<Complex64> = rn.iter().zip(&p_hat).map(|(x, w)| w.conj() * x).collect();
            let taps = idft(&back)[..filter_len]
                .iter()
                .map(|v| v.re * root_len)
                .collect();
            ShortFilter::new(taps, len)
        })
        .collect()
}

/// `‖X₀ − p qᵀ‖_F / ‖X₀‖_F` via the norm expansion
/// `‖s‖²‖h‖² − 2⟨s,p⟩⟨h,q⟩ + ‖p‖²‖q‖²`.
pub fn relative_outer_error(truth: &GroundTruthLift, cand: &CandidateSolution) -> Result<f64> {
    if truth.frobenius_sq <= 0.0 {
        return Err(Error::DegenerateTruth);
    }
    let q = cand.q_concat();
    if cand.p.len() != truth.signal.len() || q.len() != truth.channels_concat.len() {
        return Err(dim_err("candidate does not match ground-truth dimensions"));
    }
    let cross = dot(&truth.signal, &cand.p) * dot(&truth.channels_concat, &q);
    let sq = truth.frobenius_sq - 2.0 * cross + dot(&cand.p, &cand.p) * dot(&q, &q);
    Ok((sq.max(0.0) / truth.frobenius_sq).sqrt())
}

/// Time-domain residual `Σ_n ‖p ⊛ pad(q_n) − y_n‖²`.
pub fn time_domain_misfit(inst: &ProblemInstance, p: &[f64], q: &[ShortFilter]) -> Result<f64> {
    let mut total = 0.0;
    for (h, y) in q.iter().zip(inst.observations()) {
        let pred = circ_conv(p, &pad(h))?;
        total += pred.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total)
}

/// Inverse transform of a Fourier-domain channel vector that is known to
/// come from real data.
pub fn to_time_domain(x: &[Complex64]) -> Vec<f64> {
    real_part_checked(&idft(x))
}
