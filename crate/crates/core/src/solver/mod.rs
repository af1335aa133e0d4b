//! Rank-one factored recovery by the method of multipliers.
//!
//! The program
//!
//! ```text
//! minimize ½(‖p‖² + ‖q‖²)  subject to  A(p qᵀ) = ŷ
//! ```
//!
//! is attacked through its augmented Lagrangian
//!
//! ```text
//! L(p, q, λ, σ) = ½(‖p‖² + ‖q‖²) − Re⟨λ, A(p qᵀ) − ŷ⟩ + (σ/2)‖A(p qᵀ) − ŷ‖²
//! ```
//!
//! Each outer iteration minimizes `L` over `(p, q)` with L-BFGS, then
//! updates `λ` and `σ`. When the misfit stalls far above tolerance the
//! iterate is declared trapped and the whole procedure restarts from a fresh
//! Gaussian draw.

pub mod lbfgs;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Error, Result};
use crate::fourier::{dft_real, idft, ShortFilter};
use crate::model::{CandidateSolution, ProblemInstance};

pub use lbfgs::{LbfgsParams, LbfgsReport, LbfgsStatus};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Relative stopping threshold: converged once `‖A(pqᵀ) − ŷ‖² ≤ tol_misfit · ‖ŷ‖²`.
    pub tol_misfit: f64,
    pub sigma0: f64,
    pub penalty_growth: f64,
    /// `σ` grows unless feasibility shrank by at least this factor.
    pub feasibility_factor: f64,
    pub max_outer_iters: usize,
    pub lbfgs_memory: usize,
    pub lbfgs_grad_tol: f64,
    pub lbfgs_max_iters: usize,
    pub plateau_window: usize,
    pub plateau_rel_decrease: f64,
    pub plateau_misfit_factor: f64,
    pub max_restarts: usize,
    pub rng_seed: u64,
    /// Once below tolerance, keep iterating until one outer step lowers the
    /// misfit by less than this fraction. Zero stops at the first crossing.
    pub refine_rel_decrease: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol_misfit: 1e-12,
            sigma0: 1.0,
            penalty_growth: 10.0,
            feasibility_factor: 0.25,
            max_outer_iters: 2000,
            lbfgs_memory: 10,
            lbfgs_grad_tol: 1e-8,
            lbfgs_max_iters: 500,
            plateau_window: 20,
            plateau_rel_decrease: 1e-3,
            plateau_misfit_factor: 1e3,
            max_restarts: 50,
            rng_seed: 0,
            refine_rel_decrease: 0.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tol_misfit", self.tol_misfit),
            ("sigma0", self.sigma0),
            ("lbfgs_grad_tol", self.lbfgs_grad_tol),
            ("plateau_rel_decrease", self.plateau_rel_decrease),
            ("plateau_misfit_factor", self.plateau_misfit_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Unsupported(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.penalty_growth > 1.0) {
            return Err(Error::Unsupported("penalty_growth must exceed 1".into()));
        }
        if !(self.feasibility_factor > 0.0 && self.feasibility_factor < 1.0) {
            return Err(Error::Unsupported("feasibility_factor must lie in (0, 1)".into()));
        }
        if !(self.refine_rel_decrease >= 0.0 && self.refine_rel_decrease < 1.0) {
            return Err(Error::Unsupported("refine_rel_decrease must lie in [0, 1)".into()));
        }
        if self.plateau_window < 2 {
            return Err(Error::Unsupported("plateau_window must be at least 2".into()));
        }
        if self.lbfgs_memory == 0 || self.lbfgs_max_iters == 0 || self.max_outer_iters == 0 {
            return Err(Error::Unsupported(
                "lbfgs_memory, lbfgs_max_iters and max_outer_iters must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Stopping rule matched to a known per-channel SNR. The residual
    /// cannot fall much below the injected noise power `σ_noise²·‖y‖²`, so
    /// the threshold sits just above it; once there, iterations continue
    /// until the misfit settles, which lands on the least-squares fit rather
    /// than the first point of the path that crosses the threshold.
    pub fn with_noise_budget(mut self, snr_db: f64) -> Self {
        if snr_db.is_finite() {
            let sigma_noise = 10f64.powf(-snr_db / 20.0);
            self.tol_misfit = 1.1 * sigma_noise * sigma_noise;
            self.refine_rel_decrease = 1e-3;
        }
        self
    }

    fn lbfgs_params(&self) -> LbfgsParams {
        LbfgsParams {
            memory: self.lbfgs_memory,
            grad_tol: self.lbfgs_grad_tol,
            max_iters: self.lbfgs_max_iters,
            c1: 1e-4,
            c2: 0.9,
        }
    }
}

/// Iterate of the method of multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub p: Vec<f64>,
    pub q: Vec<ShortFilter>,
    /// Lagrange multipliers, one Fourier-domain vector per channel.
    pub lambda: Vec<Vec<Complex64>>,
    pub sigma: f64,
    /// Raw misfit `‖A(pqᵀ) − ŷ‖²` after each outer iteration of the current attempt.
    pub misfit_history: Vec<f64>,
    pub attempts: usize,
    pub outer_iter: usize,
    /// Feasibility `‖A(pqᵀ) − ŷ‖` seen at the previous multiplier update.
    pub prev_feasibility: Option<f64>,
}

impl SolverState {
    /// Fresh attempt from i.i.d. standard Gaussian factors.
    pub fn random<R: rand::Rng>(inst: &ProblemInstance, sigma0: f64, rng: &mut R) -> Self {
        let dims = inst.dims();
        let l = dims.signal_len;
        let p: Vec<f64> = (0..l).map(|_| StandardNormal.sample(rng)).collect();
        let q = (0..dims.num_channels)
            .map(|_| {
                let taps = (0..dims.filter_len).map(|_| StandardNormal.sample(rng)).collect();
                ShortFilter::new(taps, l).expect("dims already validated")
            })
            .collect();
        Self::from_factors(inst, p, q, sigma0)
    }

    pub fn from_factors(
        inst: &ProblemInstance,
        p: Vec<f64>,
        q: Vec<ShortFilter>,
        sigma0: f64,
    ) -> Self {
        let dims = inst.dims();
        Self {
            p,
            q,
            lambda: vec![vec![Complex64::new(0.0, 0.0); dims.signal_len]; dims.num_channels],
            sigma: sigma0,
            misfit_history: Vec::new(),
            attempts: 1,
            outer_iter: 0,
            prev_feasibility: None,
        }
    }

    pub fn candidate(&self) -> CandidateSolution {
        CandidateSolution::new(self.p.clone(), self.q.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub solution: CandidateSolution,
    pub attempts: usize,
    pub converged: bool,
    /// Absolute misfit `‖A(pqᵀ) − ŷ‖²` at exit.
    pub final_misfit: f64,
    pub outer_iters_total: usize,
}

/// One row of the optional per-outer-iteration trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub attempt: usize,
    pub outer_iter: usize,
    pub misfit: f64,
    pub sigma: f64,
    pub grad_norm: f64,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "attempt,outer_iter,misfit,sigma,grad_norm";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e}",
            self.attempt, self.outer_iter, self.misfit, self.sigma, self.grad_norm
        )
    }
}

/// Evaluates the augmented Lagrangian on the packed vector `[p; q₀; …; q_{N−1}]`.
struct Lagrangian<'a> {
    inst: &'a ProblemInstance,
    lambda: &'a [Vec<Complex64>],
    sigma: f64,
    len: usize,
    taps: usize,
    root_len: f64,
}

struct Evaluation {
    value: f64,
    misfit: f64,
}

impl<'a> Lagrangian<'a> {
    fn new(inst: &'a ProblemInstance, lambda: &'a [Vec<Complex64>], sigma: f64) -> Self {
        let dims = inst.dims();
        Self {
            inst,
            lambda,
            sigma,
            len: dims.signal_len,
            taps: dims.filter_len,
            root_len: (dims.signal_len as f64).sqrt(),
        }
    }

    fn fourier_factors(&self, x: &[f64]) -> (Vec<Complex64>, Vec<Vec<Complex64>>) {
        let (p, q) = x.split_at(self.len);
        let p_hat = dft_real(p);
        let mut buf = vec![0.0; self.len];
        let q_hat = q
            .chunks(self.taps)
            .map(|h| {
                buf[..self.taps].copy_from_slice(h);
                dft_real(&buf)
            })
            .collect();
        (p_hat, q_hat)
    }

    /// Residuals `A(pqᵀ) − ŷ` per channel.
    fn residuals(&self, p_hat: &[Complex64], q_hat: &[Vec<Complex64>]) -> Vec<Vec<Complex64>> {
        q_hat
            .iter()
            .zip(self.inst.observations_fourier())
            .map(|(qn, yn)| {
                qn.iter()
                    .zip(p_hat)
                    .zip(yn)
                    .map(|((a, b), y)| a * b * self.root_len - y)
                    .collect()
            })
            .collect()
    }

    fn value_parts(&self, x: &[f64], res: &[Vec<Complex64>]) -> Evaluation {
        let norm_sq: f64 = x.iter().map(|v| v * v).sum();
        let mut misfit = 0.0;
        let mut cross = 0.0;
        for (rn, ln) in res.iter().zip(self.lambda) {
            for (r, l) in rn.iter().zip(ln) {
                misfit += r.norm_sqr();
                cross += (l.conj() * r).re;
            }
        }
        Evaluation {
            value: 0.5 * norm_sq - cross + 0.5 * self.sigma * misfit,
            misfit,
        }
    }

    fn value(&self, x: &[f64]) -> Evaluation {
        let (p_hat, q_hat) = self.fourier_factors(x);
        let res = self.residuals(&p_hat, &q_hat);
        self.value_parts(x, &res)
    }

    fn value_and_grad(&self, x: &[f64], grad: &mut [f64]) -> Evaluation {
        let (p_hat, q_hat) = self.fourier_factors(x);
        let res = self.residuals(&p_hat, &q_hat);
        let eval = self.value_parts(x, &res);

        // Effective weight σ·res − λ, pulled back through the factor adjoints.
        let mut acc_p = vec![Complex64::new(0.0, 0.0); self.len];
        grad.copy_from_slice(x);
        let (_, grad_q) = grad.split_at_mut(self.len);
        for ((rn, ln), (qn, gq)) in res
            .iter()
            .zip(self.lambda)
            .zip(q_hat.iter().zip(grad_q.chunks_mut(self.taps)))
        {
            let weight: Vec<Complex64> = rn
                .iter()
                .zip(ln)
                .map(|(r, l)| r * self.sigma - l)
                .collect();
            for ((a, w), qv) in acc_p.iter_mut().zip(&weight).zip(qn) {
                *a += qv.conj() * w;
            }
            let back: Vec<Complex64> = weight.iter().zip(&p_hat).map(|(w, pv)| pv.conj() * w).collect();
            for (g, b) in gq.iter_mut().zip(idft(&back)) {
                *g += b.re * self.root_len;
            }
        }
        for (g, b) in grad[..self.len].iter_mut().zip(idft(&acc_p)) {
            *g += b.re * self.root_len;
        }
        eval
    }
}

fn check_state(inst: &ProblemInstance, p: &[f64], q: &[ShortFilter], lambda: &[Vec<Complex64>]) -> Result<()> {
    let dims = inst.dims();
    if p.len() != dims.signal_len
        || q.len() != dims.num_channels
        || q.iter().any(|h| h.len() != dims.filter_len || h.ambient_len() != dims.signal_len)
        || lambda.len() != dims.num_channels
        || lambda.iter().any(|l| l.len() != dims.signal_len)
    {
        return Err(dim_err("solver state does not match instance dimensions"));
    }
    Ok(())
}

fn pack(p: &[f64], q: &[ShortFilter]) -> Vec<f64> {
    let mut x = p.to_vec();
    for h in q {
        x.extend_from_slice(h.coeffs());
    }
    x
}

fn unpack(x: &[f64], p: &mut [f64], q: &mut [ShortFilter]) {
    let (xp, xq) = x.split_at(p.len());
    p.copy_from_slice(xp);
    let taps = xq.len() / q.len().max(1);
    for (h, chunk) in q.iter_mut().zip(xq.chunks(taps)) {
        h.coeffs_mut().copy_from_slice(chunk);
    }
}

/// Value of the augmented Lagrangian.
pub fn augmented_lagrangian(
    p: &[f64],
    q: &[ShortFilter],
    lambda: &[Vec<Complex64>],
    sigma: f64,
    inst: &ProblemInstance,
) -> Result<f64> {
    check_state(inst, p, q, lambda)?;
    Ok(Lagrangian::new(inst, lambda, sigma).value(&pack(p, q)).value)
}

/// Exact gradient of [`augmented_lagrangian`] with respect to the real
/// factors `p` and `q`.
pub fn al_gradient(
    p: &[f64],
    q: &[ShortFilter],
    lambda: &[Vec<Complex64>],
    sigma: f64,
    inst: &ProblemInstance,
) -> Result<(Vec<f64>, Vec<ShortFilter>)> {
    check_state(inst, p, q, lambda)?;
    let x = pack(p, q);
    let mut grad = vec![0.0; x.len()];
    Lagrangian::new(inst, lambda, sigma).value_and_grad(&x, &mut grad);
    let mut gp = vec![0.0; p.len()];
    let mut gq = q.to_vec();
    unpack(&grad, &mut gp, &mut gq);
    Ok((gp, gq))
}

/// Misfit `‖A(pqᵀ) − ŷ‖²` of the state's factors.
pub fn misfit(inst: &ProblemInstance, p: &[f64], q: &[ShortFilter]) -> f64 {
    let zero = vec![vec![Complex64::new(0.0, 0.0); inst.dims().signal_len]; inst.dims().num_channels];
    Lagrangian::new(inst, &zero, 0.0).value(&pack(p, q)).misfit
}

/// Minimizes the augmented Lagrangian over `(p, q)` at fixed `(λ, σ)`,
/// updating the state's factors in place.
pub fn inner_minimize(
    state: &mut SolverState,
    config: &SolverConfig,
    inst: &ProblemInstance,
) -> Result<LbfgsReport> {
    check_state(inst, &state.p, &state.q, &state.lambda)?;
    let lag = Lagrangian::new(inst, &state.lambda, state.sigma);
    let mut x = pack(&state.p, &state.q);
    let report = lbfgs::minimize(
        &mut x,
        |x, g| lag.value_and_grad(x, g).value,
        &config.lbfgs_params(),
    );
    unpack(&x, &mut state.p, &mut state.q);
    Ok(report)
}

/// Method-of-multipliers update: `λ ← λ − σ·(A(pqᵀ) − ŷ)`, and `σ ← γσ`
/// unless feasibility shrank to at most `η` times its previous value.
pub fn multiplier_update(
    state: &mut SolverState,
    config: &SolverConfig,
    inst: &ProblemInstance,
) -> Result<()> {
    check_state(inst, &state.p, &state.q, &state.lambda)?;
    let lag = Lagrangian::new(inst, &state.lambda, state.sigma);
    let (p_hat, q_hat) = lag.fourier_factors(&pack(&state.p, &state.q));
    let res = lag.residuals(&p_hat, &q_hat);
    let feasibility = res.iter().flatten().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    for (ln, rn) in state.lambda.iter_mut().zip(&res) {
        for (l, r) in ln.iter_mut().zip(rn) {
            *l -= r * state.sigma;
        }
    }
    if let Some(prev) = state.prev_feasibility {
        if feasibility > config.feasibility_factor * prev {
            state.sigma *= config.penalty_growth;
        }
    }
    state.prev_feasibility = Some(feasibility);
    Ok(())
}

/// True when the misfit has stopped decreasing over the last `W` outer
/// iterations while still sitting far above tolerance.
pub fn plateau_detected(history: &[f64], config: &SolverConfig, observation_energy: f64) -> bool {
    let window = config.plateau_window;
    if history.len() < window {
        return false;
    }
    let first = history[history.len() - window];
    let last = history[history.len() - 1];
    let rel_decrease = if first > 0.0 { (first - last) / first } else { 0.0 };
    rel_decrease < config.plateau_rel_decrease
        && last > config.plateau_misfit_factor * config.tol_misfit * observation_energy
}

/// Runs the full restart loop.
pub fn solve(inst: &ProblemInstance, config: &SolverConfig) -> Result<SolveResult> {
    solve_traced(inst, config, |_| {})
}

/// [`solve`] with a callback receiving one [`TraceRow`] per outer iteration.
pub fn solve_traced<T>(
    inst: &ProblemInstance,
    config: &SolverConfig,
    mut trace: T,
) -> Result<SolveResult>
where
    T: FnMut(TraceRow),
{
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let energy = inst.observation_energy();
    let target = config.tol_misfit * energy;

    let mut state = SolverState::random(inst, config.sigma0, &mut rng);
    let mut total_outer = 0;
    let mut restarts = 0;
    loop {
        let report = inner_minimize(&mut state, config, inst)?;
        total_outer += 1;
        state.outer_iter += 1;
        let current = misfit(inst, &state.p, &state.q);
        state.misfit_history.push(current);
        trace(TraceRow {
            attempt: state.attempts,
            outer_iter: state.outer_iter,
            misfit: current,
            sigma: state.sigma,
            grad_norm: report.grad_inf_norm,
        });

        let settled = match state.misfit_history.len() {
            _ if config.refine_rel_decrease == 0.0 => true,
            n if n >= 2 => {
                let prev = state.misfit_history[n - 2];
                prev - current <= config.refine_rel_decrease * prev
            }
            _ => false,
        };
        let below = current <= target;
        if below && (settled || total_outer >= config.max_outer_iters) {
            return Ok(SolveResult {
                solution: state.candidate(),
                attempts: state.attempts,
                converged: true,
                final_misfit: current,
                outer_iters_total: total_outer,
            });
        }
        if total_outer >= config.max_outer_iters {
            break;
        }
        multiplier_update(&mut state, config, inst)?;
        if plateau_detected(&state.misfit_history, config, energy) {
            if restarts == config.max_restarts {
                break;
            }
            restarts += 1;
            let attempts = state.attempts + 1;
            state = SolverState::random(inst, config.sigma0, &mut rng);
            state.attempts = attempts;
        }
    }
    let final_misfit = misfit(inst, &state.p, &state.q);
    Ok(SolveResult {
        solution: state.candidate(),
        attempts: state.attempts,
        converged: false,
        final_misfit,
        outer_iters_total: total_outer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{add_noise, sample_instance};
    use crate::fourier::dft_direct;
    use crate::model::{make_instance, relative_outer_error, time_domain_misfit, ProblemDims};

    fn dims(l: usize, k: usize, n: usize) -> ProblemDims {
        ProblemDims::new(l, k, n).unwrap()
    }

    fn instance(l: usize, k: usize, n: usize, seed: u64) -> ProblemInstance {
        sample_instance(dims(l, k, n), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn random_state(inst: &ProblemInstance, seed: u64) -> SolverState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut st = SolverState::random(inst, 0.0, &mut rng);
        st.sigma = 0.5 + 2.0 * rand::Rng::random::<f64>(&mut rng);
        for ln in &mut st.lambda {
            for v in ln.iter_mut() {
                *v = Complex64::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
            }
        }
        st
    }

    fn sq_norm(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    /// Lagrangian evaluated term by term: wrap-around convolution in time,
    /// then an O(L²) DFT.
    fn lagrangian_oracle(st: &SolverState, inst: &ProblemInstance) -> f64 {
        let l = inst.dims().signal_len;
        let mut total = 0.5 * (sq_norm(&st.p) + st.q.iter().map(|h| sq_norm(h.coeffs())).sum::<f64>());
        for ((h, y_hat), lam) in st.q.iter().zip(inst.observations_fourier()).zip(&st.lambda) {
            let mut conv = vec![Complex64::new(0.0, 0.0); l];
            for (i, c) in conv.iter_mut().enumerate() {
                for (k, &hk) in h.coeffs().iter().enumerate() {
                    c.re += hk * st.p[(i + l - k) % l];
                }
            }
            let pred = dft_direct(&conv);
            for ((a, y), lm) in pred.iter().zip(y_hat).zip(lam) {
                let r = a - y;
                total += -(lm.conj() * r).re + 0.5 * st.sigma * r.norm_sqr();
            }
        }
        total
    }

    #[test]
    fn lagrangian_at_truth_is_half_norms() {
        let inst = instance(16, 4, 3, 1);
        let truth = inst.ground_truth();
        let zero = vec![vec![Complex64::new(0.0, 0.0); 16]; 3];
        for sigma in [0.0, 1.0, 1e6] {
            let v = augmented_lagrangian(inst.signal(), inst.channels(), &zero, sigma, &inst).unwrap();
            let want = 0.5 * (sq_norm(&truth.signal) + sq_norm(&truth.channels_concat));
            assert!((v - want).abs() < 1e-10 * want);
        }
    }

    #[test]
    fn lagrangian_without_penalty_or_multiplier() {
        let inst = instance(8, 3, 2, 2);
        let mut st = random_state(&inst, 3);
        st.sigma = 0.0;
        st.lambda.iter_mut().flatten().for_each(|v| *v = Complex64::new(0.0, 0.0));
        let v = augmented_lagrangian(&st.p, &st.q, &st.lambda, 0.0, &inst).unwrap();
        let want = 0.5 * (sq_norm(&st.p) + sq_norm(&st.candidate().q_concat()));
        assert!((v - want).abs() < 1e-12 * want);
    }

    #[test]
    fn lagrangian_matches_direct_oracle() {
        for (l, k, n, seed) in [(4, 2, 1, 4), (8, 3, 2, 5), (7, 3, 3, 6), (16, 4, 4, 7)] {
            let inst = instance(l, k, n, seed);
            let st = random_state(&inst, seed + 100);
            let v = augmented_lagrangian(&st.p, &st.q, &st.lambda, st.sigma, &inst).unwrap();
            let want = lagrangian_oracle(&st, &inst);
            assert!((v - want).abs() < 1e-10 * want.abs().max(1.0), "{v} vs {want}");
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        for (l, k, n) in [(8, 3, 2), (16, 4, 4), (9, 2, 3)] {
            let inst = instance(l, k, n, 10 + l as u64);
            for trial in 0..5 {
                let st = random_state(&inst, 1000 + trial);
                let (gp, gq) = al_gradient(&st.p, &st.q, &st.lambda, st.sigma, &inst).unwrap();
                let analytic: Vec<f64> = gp.iter().copied().chain(gq.iter().flat_map(|h| h.coeffs().to_vec())).collect();
                let x = pack(&st.p, &st.q);
                let eval = |x: &[f64]| {
                    let (mut p, mut q) = (st.p.clone(), st.q.clone());
                    unpack(x, &mut p, &mut q);
                    augmented_lagrangian(&p, &q, &st.lambda, st.sigma, &inst).unwrap()
                };
                let eps = 1e-6;
                let fd: Vec<f64> = (0..x.len())
                    .map(|i| {
                        let (mut a, mut b) = (x.clone(), x.clone());
                        a[i] += eps;
                        b[i] -= eps;
                        (eval(&a) - eval(&b)) / (2.0 * eps)
                    })
                    .collect();
                let diff: f64 = analytic.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(diff < 1e-6 * sq_norm(&fd).sqrt(), "dims {l},{k},{n}: {diff}");
            }
        }
    }

    #[test]
    fn gradient_at_truth_is_the_factors() {
        let inst = instance(16, 4, 4, 20);
        let zero = vec![vec![Complex64::new(0.0, 0.0); 16]; 4];
        let (gp, gq) = al_gradient(inst.signal(), inst.channels(), &zero, 3.0, &inst).unwrap();
        for (a, b) in gp.iter().zip(inst.signal()) {
            assert!((a - b).abs() < 1e-10);
        }
        for (g, h) in gq.iter().zip(inst.channels()) {
            for (a, b) in g.coeffs().iter().zip(h.coeffs()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gradient_without_penalty_or_multiplier_is_identity() {
        let inst = instance(8, 3, 2, 21);
        let st = random_state(&inst, 22);
        let zero = vec![vec![Complex64::new(0.0, 0.0); 8]; 2];
        let (gp, gq) = al_gradient(&st.p, &st.q, &zero, 0.0, &inst).unwrap();
        assert_eq!(gp, st.p);
        assert_eq!(gq, st.q);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let inst = instance(8, 3, 2, 23);
        let st = random_state(&inst, 24);
        let err = augmented_lagrangian(&st.p[..7], &st.q, &st.lambda, 1.0, &inst);
        assert!(matches!(err, Err(Error::Dimension(_))));
        let err = al_gradient(&st.p, &st.q[..1], &st.lambda, 1.0, &inst);
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn inner_minimize_pure_norm_goes_to_zero() {
        let inst = instance(16, 4, 4, 30);
        let mut st = random_state(&inst, 31);
        st.sigma = 0.0;
        st.lambda.iter_mut().flatten().for_each(|v| *v = Complex64::new(0.0, 0.0));
        inner_minimize(&mut st, &SolverConfig::default(), &inst).unwrap();
        assert!(st.p.iter().all(|v| v.abs() < 1e-8));
        assert!(st.q.iter().flat_map(|h| h.coeffs()).all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn inner_minimize_from_truth_stays_feasible() {
        let inst = instance(16, 4, 4, 32);
        let mut st = SolverState::from_factors(&inst, inst.signal().to_vec(), inst.channels().to_vec(), 1e8);
        inner_minimize(&mut st, &SolverConfig::default(), &inst).unwrap();
        assert!(misfit(&inst, &st.p, &st.q) < 1e-10);
    }

    #[test]
    fn inner_minimize_descends_monotonically() {
        let inst = instance(16, 4, 4, 33);
        let mut st = SolverState::random(&inst, 1.0, &mut ChaCha8Rng::seed_from_u64(34));
        let rep = inner_minimize(&mut st, &SolverConfig::default(), &inst).unwrap();
        assert!(rep.accepted_values.len() > 2);
        for w in rep.accepted_values.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn multiplier_update_zero_residual() {
        let inst = instance(8, 3, 2, 40);
        let mut st = SolverState::from_factors(&inst, inst.signal().to_vec(), inst.channels().to_vec(), 2.0);
        st.prev_feasibility = Some(1.0);
        let before = st.lambda.clone();
        multiplier_update(&mut st, &SolverConfig::default(), &inst).unwrap();
        for (a, b) in st.lambda.iter().flatten().zip(before.iter().flatten()) {
            assert!((a - b).norm() < 1e-12);
        }
        assert_eq!(st.sigma, 2.0);
    }

    #[test]
    fn multiplier_update_first_iteration() {
        let inst = instance(8, 3, 2, 41);
        let mut st = random_state(&inst, 42);
        let sigma = st.sigma;
        let lam0 = st.lambda.clone();
        let pred = crate::model::forward(&st.p, &st.q).unwrap();
        multiplier_update(&mut st, &SolverConfig::default(), &inst).unwrap();
        assert_eq!(st.sigma, sigma);
        for n in 0..2 {
            for l in 0..8 {
                let r = pred[n][l] - inst.observations_fourier()[n][l];
                assert!((st.lambda[n][l] - (lam0[n][l] - r * sigma)).norm() < 1e-10);
            }
        }
        assert!(st.prev_feasibility.unwrap() > 0.0);
    }

    #[test]
    fn multiplier_update_grows_penalty_when_stalled() {
        let inst = instance(8, 3, 2, 43);
        let mut st = random_state(&inst, 44);
        st.sigma = 1.0;
        let cfg = SolverConfig::default();
        multiplier_update(&mut st, &cfg, &inst).unwrap();
        assert_eq!(st.sigma, 1.0);
        // Same factors again: feasibility did not shrink at all.
        multiplier_update(&mut st, &cfg, &inst).unwrap();
        assert_eq!(st.sigma, 10.0);
        // A factor-of-ten drop satisfies the η = 0.25 test.
        st.prev_feasibility = Some(st.prev_feasibility.unwrap() * 10.0);
        multiplier_update(&mut st, &cfg, &inst).unwrap();
        assert_eq!(st.sigma, 10.0);
    }

    #[test]
    fn plateau_examples() {
        let cfg = SolverConfig::default();
        let energy = 1.0;
        let geometric: Vec<f64> = (0..40).map(|i| 0.5f64.powi(i)).collect();
        assert!(!plateau_detected(&geometric, &cfg, energy));
        let stuck = vec![2e3 * cfg.tol_misfit; cfg.plateau_window];
        assert!(plateau_detected(&stuck, &cfg, energy));
        assert!(!plateau_detected(&stuck[1..], &cfg, energy));
        let done = vec![0.5 * cfg.tol_misfit; cfg.plateau_window];
        assert!(!plateau_detected(&done, &cfg, energy));
    }

    #[test]
    fn solves_small_gaussian_instance() {
        let inst = instance(16, 4, 4, 50);
        let res = solve(&inst, &SolverConfig::default()).unwrap();
        assert!(res.converged);
        assert!(res.final_misfit <= 1e-12 * inst.observation_energy());
        assert!(relative_outer_error(&inst.ground_truth(), &res.solution).unwrap() < 0.02);
    }

    #[test]
    fn recovers_impulse_instance() {
        let d = dims(16, 4, 3);
        let mut signal = vec![0.0; 16];
        signal[0] = 1.0;
        let channels = (0..3)
            .map(|n| {
                let mut t = vec![0.0; 4];
                t[n] = 1.0;
                ShortFilter::new(t, 16).unwrap()
            })
            .collect();
        let inst = make_instance(d, signal, channels).unwrap();
        let res = solve(&inst, &SolverConfig::default()).unwrap();
        assert!(res.converged);
        assert!(relative_outer_error(&inst.ground_truth(), &res.solution).unwrap() < 1e-6);
    }

    #[test]
    fn underdetermined_instances_fail() {
        let mut failures = 0;
        for seed in 0..20 {
            let inst = instance(32, 32, 2, 60 + seed);
            let res = solve(&inst, &SolverConfig { rng_seed: seed, ..SolverConfig::default() }).unwrap();
            let err = relative_outer_error(&inst.ground_truth(), &res.solution).unwrap();
            if !res.converged || err >= 0.02 {
                failures += 1;
            }
        }
        assert!(failures >= 19, "{failures}/20");
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let inst = instance(24, 6, 3, 70);
        let cfg = SolverConfig { rng_seed: 5, ..SolverConfig::default() };
        let run = || {
            let mut rows = Vec::new();
            let res = solve_traced(&inst, &cfg, |r| rows.push(r)).unwrap();
            (res, rows)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn rescaled_ground_truth_is_neutral() {
        let inst = instance(16, 4, 4, 80);
        let cfg = SolverConfig { rng_seed: 3, ..SolverConfig::default() };
        let base = solve(&inst, &cfg).unwrap();
        let base_err = relative_outer_error(&inst.ground_truth(), &base.solution).unwrap();
        for alpha in [2.0, 2.5] {
            let s: Vec<f64> = inst.signal().iter().map(|v| v * alpha).collect();
            let hs = inst
                .channels()
                .iter()
                .map(|h| ShortFilter::new(h.coeffs().iter().map(|v| v / alpha).collect(), 16).unwrap())
                .collect();
            let scaled = make_instance(inst.dims(), s, hs).unwrap();
            let res = solve(&scaled, &cfg).unwrap();
            let err = relative_outer_error(&scaled.ground_truth(), &res.solution).unwrap();
            assert!(res.converged && err < 0.02);
            if alpha == 2.0 {
                // Power-of-two scaling leaves the observations bit-identical.
                assert_eq!(scaled.observations(), inst.observations());
                assert_eq!(err.to_bits(), base_err.to_bits());
            }
        }
    }

    #[test]
    fn fourier_and_time_misfits_agree_along_the_path() {
        let inst = instance(16, 4, 4, 90);
        let cfg = SolverConfig::default();
        let mut st = SolverState::random(&inst, cfg.sigma0, &mut ChaCha8Rng::seed_from_u64(91));
        for _ in 0..6 {
            inner_minimize(&mut st, &cfg, &inst).unwrap();
            let f = misfit(&inst, &st.p, &st.q);
            let t = time_domain_misfit(&inst, &st.p, &st.q).unwrap();
            assert!((f - t).abs() <= 1e-10 * t.max(1e-300) + 1e-24, "{f} vs {t}");
            multiplier_update(&mut st, &cfg, &inst).unwrap();
        }
    }

    #[test]
    fn converged_runs_meet_the_feasibility_bound() {
        for seed in 0..5 {
            let inst = instance(32, 8, 4, 100 + seed);
            let cfg = SolverConfig { rng_seed: seed, ..SolverConfig::default() };
            let res = solve(&inst, &cfg).unwrap();
            if res.converged {
                assert!(res.final_misfit.sqrt() <= cfg.tol_misfit.sqrt() * inst.observation_energy().sqrt());
            }
        }
    }

    #[test]
    fn refinement_lowers_noisy_misfit() {
        let mut rng = ChaCha8Rng::seed_from_u64(110);
        let inst = sample_instance(dims(32, 8, 4), &mut rng);
        let noisy = add_noise(inst, 50.0, &mut rng).unwrap();
        let refined_cfg = SolverConfig::default().with_noise_budget(50.0);
        assert_eq!(refined_cfg.refine_rel_decrease, 1e-3);
        let first_cfg = SolverConfig { refine_rel_decrease: 0.0, ..refined_cfg.clone() };
        let first = solve(&noisy, &first_cfg).unwrap();
        let refined = solve(&noisy, &refined_cfg).unwrap();
        let budget = refined_cfg.tol_misfit * noisy.observation_energy();
        assert!(first.converged && refined.converged);
        assert!(first.final_misfit <= budget && refined.final_misfit <= first.final_misfit);
        let e1 = relative_outer_error(&noisy.ground_truth(), &first.solution).unwrap();
        let e2 = relative_outer_error(&noisy.ground_truth(), &refined.solution).unwrap();
        assert!(e2 <= e1, "{e2} vs {e1}");
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = [
            SolverConfig { tol_misfit: 0.0, ..SolverConfig::default() },
            SolverConfig { penalty_growth: 1.0, ..SolverConfig::default() },
            SolverConfig { feasibility_factor: 1.0, ..SolverConfig::default() },
            SolverConfig { plateau_window: 1, ..SolverConfig::default() },
            SolverConfig { refine_rel_decrease: -1.0, ..SolverConfig::default() },
            SolverConfig { lbfgs_memory: 0, ..SolverConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn noiseless_budget_is_untouched() {
        let cfg = SolverConfig::default().with_noise_budget(f64::INFINITY);
        assert_eq!(cfg, SolverConfig::default());
        let cfg = SolverConfig::default().with_noise_budget(40.0);
        assert!((cfg.tol_misfit - 1.1e-4).abs() < 1e-18);
    }
}
