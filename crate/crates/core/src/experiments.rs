//! Monte Carlo campaigns: the noiseless phase-transition grid and the
//! noise-robustness sweep.
//!
//! Every trial draws its instance, noise and solver initialization from a
//! seed derived from `(base_seed, N, K, snr, trial_index)`, so any single
//! cell can be re-run on its own and parallel execution cannot change the
//! results. Aggregation sorts before reducing, which makes it independent
//! of the order outcomes arrive in.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fourier::ShortFilter;
use crate::model::{make_instance, relative_outer_error, ProblemDims, ProblemInstance};
use crate::solver::{solve, SolverConfig};

/// Draws `s` and every `h_n` with i.i.d. standard normal entries.
pub fn sample_instance<R: Rng + ?Sized>(dims: ProblemDims, rng: &mut R) -> ProblemInstance {
    let l = dims.signal_len;
    let signal: Vec<f64> = (0..l).map(|_| StandardNormal.sample(rng)).collect();
    let channels = (0..dims.num_channels)
        .map(|_| {
            let taps = (0..dims.filter_len).map(|_| StandardNormal.sample(rng)).collect();
            ShortFilter::new(taps, l).expect("validated dims")
        })
        .collect();
    make_instance(dims, signal, channels).expect("validated dims")
}

/// Noise standard deviation ratio for an SNR in dB: `10^(−snr/20)`.
pub fn noise_level(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 20.0)
}

/// Adds `v_n = σ·‖y_n‖·ν_n/‖ν_n‖` to every observation, with `ν_n` standard
/// Gaussian and `σ = 10^(−snr_db/20)`. `snr_db = +∞` leaves the instance as is.
pub fn add_noise<R: Rng + ?Sized>(
    inst: ProblemInstance,
    snr_db: f64,
    rng: &mut R,
) -> Result<ProblemInstance> {
    if snr_db == f64::INFINITY {
        return Ok(inst);
    }
    if !snr_db.is_finite() {
        return Err(Error::NonFinite("snr_db"));
    }
    let sigma = noise_level(snr_db);
    let mut noisy = Vec::with_capacity(inst.dims().num_channels);
    for (n, y) in inst.observations().iter().enumerate() {
        let y_norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if y_norm == 0.0 {
            return Err(Error::DegenerateObservation { channel: n });
        }
        let nu: Vec<f64> = (0..y.len()).map(|_| StandardNormal.sample(rng)).collect();
        let nu_norm = nu.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = sigma * y_norm / nu_norm;
        noisy.push(y.iter().zip(&nu).map(|(a, b)| a + scale * b).collect());
    }
    inst.with_observations(noisy)
}

/// Largest `K ≤ L` with `L·N ≥ L + K·N − 1`.
pub fn information_boundary(signal_len: usize, num_channels: usize) -> usize {
    let (l, n) = (signal_len as i64, num_channels as i64);
    // K ≤ (L·N − L + 1) / N
    let k = (l * n - l + 1) / n;
    k.clamp(0, l) as usize
}

/// Stable 64-bit mix (splitmix64 finalizer).
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-trial seed: `base_seed ⊕ hash(N, K, snr_bits, trial_index)`.
pub fn trial_seed(
    base_seed: u64,
    dims: ProblemDims,
    snr_db: Option<f64>,
    trial_index: usize,
) -> u64 {
    let snr_bits = snr_db.map_or(u64::MAX, f64::to_bits);
    let mut h = mix(dims.num_channels as u64);
    h = mix(h ^ dims.filter_len as u64);
    h = mix(h ^ dims.signal_len as u64);
    h = mix(h ^ snr_bits);
    h = mix(h ^ trial_index as u64);
    base_seed ^ h
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub dims: ProblemDims,
    pub trial_index: usize,
    pub success: bool,
    pub rel_error: f64,
    pub attempts: usize,
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub wall_time: Duration,
}

/// Runs one trial: fresh instance, optional noise, one solve.
pub fn run_trial(
    dims: ProblemDims,
    snr_db: Option<f64>,
    trial_index: usize,
    base_seed: u64,
    solver_config: &SolverConfig,
    success_threshold: f64,
) -> Result<TrialOutcome> {
    let start = Instant::now();
    let seed = trial_seed(base_seed, dims, snr_db, trial_index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inst = sample_instance(dims, &mut rng);
    let mut config = solver_config.clone();
    config.rng_seed = solver_config.rng_seed ^ seed;
    if let Some(snr) = snr_db {
        inst = add_noise(inst, snr, &mut rng)?;
        config = config.with_noise_budget(snr);
    }
    let result = solve(&inst, &config)?;
    let (rel_error, attempts) = if result.converged {
        (
            relative_outer_error(&inst.ground_truth(), &result.solution)?,
            result.attempts,
        )
    } else {
        (1.0, config.max_restarts)
    };
    Ok(TrialOutcome {
        dims,
        trial_index,
        success: rel_error < success_threshold,
        rel_error,
        attempts,
        snr_db,
        seed,
        wall_time: start.elapsed(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub signal_len: usize,
    pub channel_counts: Vec<usize>,
    pub filter_lens: Vec<usize>,
    pub trials_per_cell: usize,
    pub success_threshold: f64,
    pub base_seed: u64,
}

impl GridSpec {
    /// Reduced grid at `L = 32`: `N ∈ {2, 4, 8}`, eight filter lengths
    /// straddling the information boundary, 20 trials per cell.
    pub fn desk(base_seed: u64) -> Self {
        Self {
            signal_len: 32,
            channel_counts: vec![2, 4, 8],
            filter_lens: vec![2, 4, 8, 12, 16, 24, 28, 32],
            trials_per_cell: 20,
            success_threshold: 0.02,
            base_seed,
        }
    }

    /// Full `N ∈ 2..=10`, `K ∈ 1..=32` grid at `L = 32` with 100 trials per cell.
    pub fn full_scale(base_seed: u64) -> Self {
        Self {
            signal_len: 32,
            channel_counts: (2..=10).collect(),
            filter_lens: (1..=32).collect(),
            trials_per_cell: 100,
            success_threshold: 0.02,
            base_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials_per_cell == 0 {
            return Err(Error::Unsupported("trials_per_cell must be at least 1".into()));
        }
        if !(self.success_threshold > 0.0 && self.success_threshold < 1.0) {
            return Err(Error::Unsupported("success_threshold must lie in (0, 1)".into()));
        }
        for &n in &self.channel_counts {
            for &k in &self.filter_lens {
                ProblemDims::new(self.signal_len, k, n)?;
            }
        }
        Ok(())
    }

    fn cells(&self) -> Vec<ProblemDims> {
        let mut cells = Vec::new();
        for &n in &self.channel_counts {
            for &k in &self.filter_lens {
                cells.push(ProblemDims {
                    signal_len: self.signal_len,
                    filter_len: k,
                    num_channels: n,
                });
            }
        }
        cells.sort_by_key(|d| (d.num_channels, d.filter_len));
        cells.dedup();
        cells
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    /// `f64::INFINITY` denotes a noiseless point.
    pub snr_db_list: Vec<f64>,
    pub configs: Vec<ProblemDims>,
    pub trials_per_point: usize,
    pub success_threshold: f64,
    pub base_seed: u64,
}

impl NoiseSpec {
    /// `L = 32`, `K = 8`, `N ∈ {4, 6, 8}`, SNR 0..=80 dB in 10 dB steps, 20 trials.
    pub fn desk(base_seed: u64) -> Self {
        Self {
            snr_db_list: (0..=8).map(|i| 10.0 * i as f64).collect(),
            configs: [4, 6, 8]
                .iter()
                .map(|&n| ProblemDims::new(32, 8, n).expect("static dims"))
                .collect(),
            trials_per_point: 20,
            success_threshold: 0.02,
            base_seed,
        }
    }

    /// Same sweep averaged over 2800 trials per point.
    pub fn full_scale(base_seed: u64) -> Self {
        Self {
            trials_per_point: 2800,
            ..Self::desk(base_seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials_per_point == 0 {
            return Err(Error::Unsupported("trials_per_point must be at least 1".into()));
        }
        if self.snr_db_list.iter().any(|s| s.is_nan() || *s == f64::NEG_INFINITY) {
            return Err(Error::NonFinite("snr_db_list"));
        }
        for d in &self.configs {
            ProblemDims::new(d.signal_len, d.filter_len, d.num_channels)?;
        }
        Ok(())
    }
}

/// Summary of one `(N, K)` cell of the phase grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub dims: ProblemDims,
    pub trials: usize,
    pub successes: usize,
    /// `None` for an empty cell.
    pub success_prob: Option<f64>,
    /// Mean attempts over successful trials; `None` without successes.
    pub mean_attempts_success: Option<f64>,
    pub mean_rel_err: Option<f64>,
}

impl CellSummary {
    pub const CSV_HEADER: &'static str =
        "L,N,K,trials,successes,success_prob,mean_attempts_success,mean_rel_err";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.dims.signal_len,
            self.dims.num_channels,
            self.dims.filter_len,
            self.trials,
            self.successes,
            fmt_opt(self.success_prob),
            fmt_opt(self.mean_attempts_success),
            fmt_opt(self.mean_rel_err),
        )
    }
}

/// Summary of one `(config, snr)` point of the noise sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSummary {
    pub dims: ProblemDims,
    pub snr_db: Option<f64>,
    pub trials: usize,
    pub mean_rel_err: Option<f64>,
    pub median_rel_err: Option<f64>,
    /// Standard error of the mean; `None` with fewer than two trials.
    pub std_err: Option<f64>,
}

impl PointSummary {
    pub const CSV_HEADER: &'static str = "L,N,K,snr_db,trials,mean_rel_err,median_rel_err";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.dims.signal_len,
            self.dims.num_channels,
            self.dims.filter_len,
            fmt_snr(self.snr_db),
            self.trials,
            fmt_opt(self.mean_rel_err),
            fmt_opt(self.median_rel_err),
        )
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6e}")).unwrap_or_default()
}

fn fmt_snr(v: Option<f64>) -> String {
    match v {
        None => "inf".to_string(),
        Some(x) if x == f64::INFINITY => "inf".to_string(),
        Some(x) => format!("{x}"),
    }
}

fn sort_key(o: &TrialOutcome) -> (usize, usize, usize, u64, usize) {
    (
        o.dims.num_channels,
        o.dims.filter_len,
        o.dims.signal_len,
        o.snr_db.map_or(u64::MAX, f64::to_bits),
        o.trial_index,
    )
}

fn sorted(outcomes: &[TrialOutcome]) -> Vec<&TrialOutcome> {
    let mut v: Vec<&TrialOutcome> = outcomes.iter().collect();
    v.sort_by_key(|o| sort_key(o));
    v
}

/// Per-cell summaries for the given cells. Outcomes for cells not listed are
/// ignored; listed cells without outcomes produce a row with `trials = 0`.
pub fn aggregate_cells(outcomes: &[TrialOutcome], cells: &[ProblemDims]) -> Vec<CellSummary> {
    let mut groups: BTreeMap<(usize, usize, usize), Vec<&TrialOutcome>> = cells
        .iter()
        .map(|d| ((d.num_channels, d.filter_len, d.signal_len), Vec::new()))
        .collect();
    for o in sorted(outcomes) {
        let key = (o.dims.num_channels, o.dims.filter_len, o.dims.signal_len);
        if let Some(g) = groups.get_mut(&key) {
            g.push(o);
        }
    }
    groups
        .into_iter()
        .map(|((n, k, l), group)| {
            let trials = group.len();
            let successes = group.iter().filter(|o| o.success).count();
            let attempts: Vec<f64> = group
                .iter()
                .filter(|o| o.success)
                .map(|o| o.attempts as f64)
                .collect();
            let errors: Vec<f64> = group.iter().map(|o| o.rel_error).collect();
            CellSummary {
                dims: ProblemDims {
                    signal_len: l,
                    filter_len: k,
                    num_channels: n,
                },
                trials,
                successes,
                success_prob: (trials > 0).then(|| successes as f64 / trials as f64),
                mean_attempts_success: mean(&attempts),
                mean_rel_err: mean(&errors),
            }
        })
        .collect()
}

/// Per-point summaries of noise-sweep outcomes, sorted by `(N, K, L, snr)`.
pub fn aggregate_points(outcomes: &[TrialOutcome]) -> Vec<PointSummary> {
    let mut groups: BTreeMap<(usize, usize, usize, u64), Vec<&TrialOutcome>> = BTreeMap::new();
    for o in sorted(outcomes) {
        let key = (
            o.dims.num_channels,
            o.dims.filter_len,
            o.dims.signal_len,
            snr_order_key(o.snr_db),
        );
        groups.entry(key).or_default().push(o);
    }
    groups
        .into_values()
        .map(|group| {
            let first = group[0];
            let errors: Vec<f64> = group.iter().map(|o| o.rel_error).collect();
            PointSummary {
                dims: first.dims,
                snr_db: first.snr_db,
                trials: errors.len(),
                mean_rel_err: mean(&errors),
                median_rel_err: median(&errors),
                std_err: std_err(&errors),
            }
        })
        .collect()
}

/// Order-preserving key for SNR values (`None` = noiseless sorts last).
fn snr_order_key(snr: Option<f64>) -> u64 {
    match snr {
        None => u64::MAX,
        Some(x) => {
            let bits = x.to_bits();
            if x.is_sign_negative() {
                !bits
            } else {
                bits | (1 << 63)
            }
        }
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Some(if s.len() % 2 == 0 {
        0.5 * (s[m - 1] + s[m])
    } else {
        s[m]
    })
}

fn std_err(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v)?;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    Some((var / v.len() as f64).sqrt())
}

/// Least-squares slope of `log₁₀(mean_rel_err)` against SNR over finite points
/// with `snr_db ≥ min_snr_db`. `None` with fewer than two usable points.
pub fn fit_log_slope(points: &[PointSummary], min_snr_db: f64) -> Option<f64> {
    let xy: Vec<(f64, f64)> = points
        .iter()
        .filter_map(|p| {
            let snr = p.snr_db.filter(|s| s.is_finite() && *s >= min_snr_db)?;
            let err = p.mean_rel_err.filter(|e| *e > 0.0)?;
            Some((snr, err.log10()))
        })
        .collect();
    if xy.len() < 2 {
        return None;
    }
    let n = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Debug, Clone)]
pub struct PhaseGridReport {
    pub outcomes: Vec<TrialOutcome>,
    pub cells: Vec<CellSummary>,
    /// `(N, K*(N))` pairs.
    pub boundary: Vec<(usize, usize)>,
}

impl PhaseGridReport {
    pub fn grid_csv(&self) -> String {
        csv_block(
            CellSummary::CSV_HEADER,
            self.cells.iter().map(CellSummary::to_csv),
        )
    }

    pub fn boundary_csv(&self) -> String {
        csv_block("N,K_star", self.boundary.iter().map(|(n, k)| format!("{n},{k}")))
    }
}

#[derive(Debug, Clone)]
pub struct NoiseReport {
    pub outcomes: Vec<TrialOutcome>,
    pub points: Vec<PointSummary>,
}

impl NoiseReport {
    pub fn noise_csv(&self) -> String {
        csv_block(
            PointSummary::CSV_HEADER,
            self.points.iter().map(PointSummary::to_csv),
        )
    }

    /// Points belonging to one configuration, in increasing SNR order.
    pub fn curve(&self, dims: ProblemDims) -> Vec<PointSummary> {
        self.points.iter().filter(|p| p.dims == dims).cloned().collect()
    }
}

fn csv_block(header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

/// Runs every trial of the phase-transition grid.
pub fn run_phase_grid(spec: &GridSpec, solver_config: &SolverConfig) -> Result<PhaseGridReport> {
    spec.validate()?;
    solver_config.validate()?;
    let cells = spec.cells();
    let jobs: Vec<(ProblemDims, usize)> = cells
        .iter()
        .flat_map(|&d| (0..spec.trials_per_cell).map(move |t| (d, t)))
        .collect();
    let outcomes = jobs
        .par_iter()
        .map(|&(d, t)| {
            run_trial(d, None, t, spec.base_seed, solver_config, spec.success_threshold)
        })
        .collect::<Result<Vec<_>>>()?;
    let summaries = aggregate_cells(&outcomes, &cells);
    let mut ns = spec.channel_counts.clone();
    ns.sort_unstable();
    ns.dedup();
    let boundary = ns
        .iter()
        .map(|&n| (n, information_boundary(spec.signal_len, n)))
        .collect();
    Ok(PhaseGridReport {
        outcomes,
        cells: summaries,
        boundary,
    })
}

/// Runs every trial of the noise sweep.
pub fn run_noise_sweep(spec: &NoiseSpec, solver_config: &SolverConfig) -> Result<NoiseReport> {
    spec.validate()?;
    solver_config.validate()?;
    let mut jobs = Vec::new();
    for &d in &spec.configs {
        for &snr in &spec.snr_db_list {
            let snr = (snr != f64::INFINITY).then_some(snr);
            for t in 0..spec.trials_per_point {
                jobs.push((d, snr, t));
            }
        }
    }
    let outcomes = jobs
        .par_iter()
        .map(|&(d, snr, t)| {
            run_trial(d, snr, t, spec.base_seed, solver_config, spec.success_threshold)
        })
        .collect::<Result<Vec<_>>>()?;
    let points = aggregate_points(&outcomes);
    Ok(NoiseReport { outcomes, points })
}
