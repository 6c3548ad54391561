//! Simulated annealing over the full aperture space or a learned latent
//! space, with stopping rules, a timing model and trial aggregation.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::arcdata::{Arc, NormalizedArc, ARC_CELLS, CHANNEL_CELLS, N_CONTROL_POINTS, N_LEAVES};
use crate::dose::{arc_apertures, combine, refine_with_unit_doses, DoseInfluence, DoseObjective};
use crate::error::{dim_mismatch, Error, Result};
use crate::grad::LatentDecoder;
use crate::stats::{bootstrap_median_se, median};

/// Leaves whose position spread exceeds this (mm) seed the region of interest.
pub const ROI_SIGMA_MM: f64 = 2.0;
pub const ROI_DILATION: usize = 2;

/// Mock geometry-informed initialization of one control point's row: running
/// maxima from leaf 0 forward over the first half and backward (wrapping)
/// over the second half; the backward sweep writes last.
pub fn geometry_init_row(target: &[f64]) -> Vec<f64> {
    let n = target.len();
    let mut s = target.to_vec();
    if n < 2 {
        return s;
    }
    let half = n / 2;
    for l in 0..half {
        s[l + 1] = s[l].max(target[l + 1]);
    }
    let wrap = |i: isize| ((i % n as isize + n as isize) % n as isize) as usize;
    for l in 0..half as isize {
        let (to, from) = (wrap(-(l + 1)), wrap(-l));
        s[to] = s[from].max(target[to]);
    }
    s
}

/// Row-wise [`geometry_init_row`] over a control-point-major channel grid.
pub fn geometry_init(channel: &[f64]) -> Vec<f64> {
    channel.chunks(N_LEAVES).flat_map(geometry_init_row).collect()
}

/// Both channels initialized independently.
pub fn geometry_init_arc(target: &Arc) -> Result<Arc> {
    Arc::new(
        format!("{}-init", target.id()),
        geometry_init(target.positions()),
        geometry_init(target.gaps()),
    )
}

fn varying_leaves(channel: &[f64]) -> Vec<bool> {
    (0..N_LEAVES)
        .map(|l| {
            let col: Vec<f64> = (0..N_CONTROL_POINTS).map(|c| channel[c * N_LEAVES + l]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            var.sqrt() > ROI_SIGMA_MM
        })
        .collect()
}

/// Dilate a leaf mask by `by` leaves on each side.
pub fn dilate(mask: &[bool], by: usize) -> Vec<bool> {
    let n = mask.len();
    (0..n)
        .map(|i| (i.saturating_sub(by)..=(i + by).min(n - 1)).any(|j| mask[j]))
        .collect()
}

/// Leaf region of interest: leaves whose spread over control points exceeds
/// 2 mm in either channel, dilated by two leaves.
pub fn select_roi(init: &Arc) -> Vec<bool> {
    let p = varying_leaves(init.positions());
    let g = varying_leaves(init.gaps());
    let union: Vec<bool> = p.iter().zip(&g).map(|(a, b)| *a || *b).collect();
    dilate(&union, ROI_DILATION)
}

/// `E = mean (s - s*)²` and per-cell absolute errors, both in mm.
pub fn position_objective(s: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if s.len() != ARC_CELLS || target.len() != ARC_CELLS {
        return Err(Error::ShapeMismatch(format!(
            "position objective needs two {ARC_CELLS}-vectors, got {} and {}",
            s.len(),
            target.len()
        )));
    }
    let err: Vec<f64> = s.iter().zip(target).map(|(a, b)| (a - b).abs()).collect();
    let e = err.iter().map(|v| v * v).sum::<f64>() / ARC_CELLS as f64;
    Ok((e, err))
}

/// Metropolis rule. Non-positive temperatures accept only strict decreases.
pub fn accept(delta_e: f64, temperature: f64, rng: &mut impl Rng) -> bool {
    let u: f64 = rng.gen();
    if delta_e < 0.0 {
        return true;
    }
    temperature > 0.0 && u < (-delta_e / temperature).exp()
}

/// Full aperture search. Each step picks one control point and moves a
/// random tenth of its mutable cells by integer mm steps.
#[derive(Debug, Clone, PartialEq)]
pub struct FullDaoSpace {
    /// Flat arc indices that may change (both channels).
    pub cells: Vec<usize>,
    pub mutation_fraction: f64,
    pub max_step: i64,
    /// `cells` grouped by control point, empty groups dropped.
    groups: Vec<Vec<usize>>,
}

impl FullDaoSpace {
    pub const MUTATION_FRACTION: f64 = 0.10;
    pub const MAX_STEP: i64 = 3;

    pub fn with_cells(cells: Vec<usize>) -> Self {
        let mut groups = vec![Vec::new(); N_CONTROL_POINTS];
        for &cell in &cells {
            groups[(cell % CHANNEL_CELLS) / N_LEAVES].push(cell);
        }
        groups.retain(|g| !g.is_empty());
        Self {
            cells,
            mutation_fraction: Self::MUTATION_FRACTION,
            max_step: Self::MAX_STEP,
            groups,
        }
    }

    /// Every cell of the ROI leaves, in both channels.
    pub fn from_roi(roi: &[bool]) -> Self {
        let mut cells = Vec::new();
        for ch in 0..2 {
            for c in 0..N_CONTROL_POINTS {
                for (l, _) in roi.iter().enumerate().filter(|(_, on)| **on) {
                    cells.push(ch * CHANNEL_CELLS + c * N_LEAVES + l);
                }
            }
        }
        Self::with_cells(cells)
    }

    /// Cells moved per step when control point group `g` is drawn.
    pub fn per_step(&self, g: usize) -> usize {
        let n = self.groups[g].len();
        ((self.mutation_fraction * n as f64).round() as usize).clamp(1, n)
    }

    /// Number of control points with mutable cells.
    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }
}

/// Search over decoder coordinates.
#[derive(Clone, Copy)]
pub struct LatentSpace<'a> {
    pub decoder: &'a dyn LatentDecoder,
    pub coords_per_step: usize,
    pub sigma: f64,
}

impl<'a> LatentSpace<'a> {
    pub const SIGMA: f64 = 0.1;

    pub fn new(decoder: &'a dyn LatentDecoder) -> Self {
        Self {
            decoder,
            coords_per_step: (decoder.latent_dim() / 8).max(1),
            sigma: Self::SIGMA,
        }
    }

    /// A random point near the origin.
    pub fn initial_state(&self, rng: &mut impl Rng) -> State {
        State::Latent(
            (0..self.decoder.latent_dim())
                .map(|_| Self::SIGMA * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )
    }
}

#[derive(Clone, Copy)]
pub enum SearchSpace<'a> {
    FullDao(&'a FullDaoSpace),
    Latent(LatentSpace<'a>),
}

/// Optimizer state: arc cells in mm, or latent coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum State {
    Cells(Vec<f64>),
    Latent(Vec<f64>),
}

impl SearchSpace<'_> {
    /// The arc a state stands for, flat and in mm.
    pub fn decode(&self, state: &State) -> Result<Vec<f64>> {
        match (self, state) {
            (SearchSpace::FullDao(_), State::Cells(v)) => Ok(v.clone()),
            (SearchSpace::Latent(l), State::Latent(z)) => Ok(l.decoder.decode_latent(z)?.to_mm(l.decoder.normalization())),
            _ => Err(Error::Config("state does not belong to the search space".into())),
        }
    }

    /// Candidate state. `temperature_ratio` is `T / T0`.
    pub fn propose(&self, state: &State, temperature_ratio: f64, rng: &mut impl Rng) -> State {
        match (self, state) {
            (SearchSpace::FullDao(space), State::Cells(v)) => {
                let mut out = v.clone();
                if space.groups.is_empty() {
                    return State::Cells(out);
                }
                let g = rng.gen_range(0..space.groups.len());
                let group = &space.groups[g];
                for i in sample(rng, group.len(), space.per_step(g)).into_iter() {
                    let cell = group[i];
                    let step = rng.gen_range(-space.max_step..=space.max_step) as f64;
                    out[cell] += step;
                    if cell >= CHANNEL_CELLS {
                        out[cell] = out[cell].max(0.0);
                    }
                }
                State::Cells(out)
            }
            (SearchSpace::Latent(space), State::Latent(z)) => {
                let mut out = z.clone();
                let sigma = space.sigma * temperature_ratio.min(1.0);
                let k = space.coords_per_step.min(z.len());
                for i in sample(rng, z.len(), k).into_iter() {
                    out[i] += sigma * rng.sample::<f64, _>(StandardNormal);
                }
                State::Latent(out)
            }
            _ => state.clone(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            SearchSpace::FullDao(_) => "full_dao".into(),
            SearchSpace::Latent(l) => format!("latent_d{}", l.decoder.latent_dim()),
        }
    }
}

/// Objective over decoded arcs (mm) and beam weights.
pub trait Objective: Sync {
    /// Beam weights carried in the optimizer state (0 for none).
    fn n_weights(&self) -> usize {
        0
    }

    fn evaluate(&self, arc: &[f64], weights: &[f64]) -> Result<f64>;

    /// Per-cell absolute errors, for objectives with a target arc.
    fn cell_errors(&self, _arc: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// Squared displacement from a target arc.
#[derive(Debug, Clone)]
pub struct PositionObjective {
    pub target: Vec<f64>,
}

impl PositionObjective {
    pub fn new(target: &Arc) -> Self {
        Self { target: target.to_vec() }
    }
}

impl Objective for PositionObjective {
    fn evaluate(&self, arc: &[f64], _weights: &[f64]) -> Result<f64> {
        Ok(position_objective(arc, &self.target)?.0)
    }

    fn cell_errors(&self, arc: &[f64]) -> Option<Vec<f64>> {
        position_objective(arc, &self.target).ok().map(|r| r.1)
    }
}

/// Dosimetric penalty of the arc's apertures at the given beam weights.
pub struct DoseCase<'a> {
    pub influence: &'a DoseInfluence,
    pub objective: &'a DoseObjective,
}

impl DoseCase<'_> {
    pub fn unit_doses(&self, arc: &[f64]) -> Result<Vec<Vec<f64>>> {
        let arc = Arc::from_vec("state", arc)?;
        self.influence.unit_doses(&arc_apertures(&arc, &self.influence.geometry)?)
    }
}

impl Objective for DoseCase<'_> {
    fn n_weights(&self) -> usize {
        self.influence.control_points()
    }

    fn evaluate(&self, arc: &[f64], weights: &[f64]) -> Result<f64> {
        let dose = combine(&self.unit_doses(arc)?, weights);
        Ok(self.objective.evaluate(&dose)?.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnealConfig {
    pub t0_samples: usize,
    pub target_acceptance: f64,
    /// Geometric cooling factor per iteration.
    pub beta: f64,
    pub seed: u64,
    /// Safety cap for open-ended stopping rules.
    pub max_iterations: usize,
    /// Standard deviation of a beam-weight step, relative to the mean weight.
    pub weight_step: f64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            t0_samples: 100,
            target_acceptance: 0.8,
            beta: 0.999,
            seed: 0,
            max_iterations: 1_000_000,
            weight_step: 0.1,
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!("cooling factor must be in (0, 1), got {}", self.beta)));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) || self.t0_samples == 0 {
            return Err(Error::Config("T0 calibration needs samples and an acceptance in (0, 1)".into()));
        }
        if self.max_iterations == 0 || !(self.weight_step >= 0.0) {
            return Err(Error::Config("max_iterations must be >= 1 and weight_step >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Iterations(usize),
    Seconds(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingRule {
    /// Stop once the best objective improved by less than `threshold`
    /// (relative) over the trailing window.
    RelativeImprovement { threshold: f64, window: Window },
    MaxIterations(usize),
    TimeBudget(f64),
}

impl Default for StoppingRule {
    fn default() -> Self {
        StoppingRule::RelativeImprovement {
            threshold: 0.01,
            window: Window::Iterations(500),
        }
    }
}

impl StoppingRule {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            StoppingRule::RelativeImprovement { threshold, window } => {
                threshold > 0.0
                    && match window {
                        Window::Iterations(n) => n >= 1,
                        Window::Seconds(s) => s > 0.0,
                    }
            }
            StoppingRule::MaxIterations(n) => n >= 1,
            StoppingRule::TimeBudget(s) => s > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid stopping rule {self:?}")))
        }
    }

    fn should_stop(&self, trace: &[TraceRow]) -> bool {
        let Some(last) = trace.last() else {
            return false;
        };
        let improved_less = |before: &TraceRow, threshold: f64| {
            before.best <= 0.0 || (before.best - last.best) < threshold * before.best
        };
        match *self {
            StoppingRule::MaxIterations(n) => trace.len() >= n,
            StoppingRule::TimeBudget(s) => last.time >= s,
            StoppingRule::RelativeImprovement { threshold, window } => match window {
                Window::Iterations(w) => trace.len() > w && improved_less(&trace[trace.len() - 1 - w], threshold),
                Window::Seconds(s) => {
                    let cutoff = last.time - s;
                    match trace.iter().rev().find(|r| r.time <= cutoff) {
                        Some(before) => improved_less(before, threshold),
                        None => false,
                    }
                }
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    /// Each iteration costs exactly `t_o + t_d`.
    Virtual,
    /// Wall clock, sleeping `t_d` per iteration.
    Real,
}

/// Per-iteration time `T_O + T_D`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingModel {
    pub clock: ClockMode,
    /// Simulated dose-calculation time per iteration (s).
    pub t_d: f64,
    /// Optimizer time charged per iteration by the virtual clock (s).
    pub t_o: f64,
}

impl Default for TimingModel {
    fn default() -> Self {
        Self {
            clock: ClockMode::Virtual,
            t_d: 0.0,
            t_o: NOMINAL_T_O_LATENT,
        }
    }
}

/// Nominal optimizer cost per iteration for the virtual clock (s).
pub const NOMINAL_T_O_FULL: f64 = 0.000_2;
pub const NOMINAL_T_O_PCA: f64 = 0.000_5;
pub const NOMINAL_T_O_LATENT: f64 = 0.004;

impl TimingModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_d >= 0.0) || !(self.t_o >= 0.0) {
            return Err(Error::Config("T_D and T_O must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub time: f64,
    /// Objective of the current state.
    pub objective: f64,
    pub best: f64,
    pub accepted: bool,
    pub temperature: f64,
}

#[derive(Debug, Clone)]
pub struct TrialMetrics {
    pub space: String,
    /// Iterations run, `N`.
    pub iterations: usize,
    /// Optimization time `τ` (s).
    pub time: f64,
    pub t0: f64,
    pub initial_objective: f64,
    pub best_objective: f64,
    pub best_state: State,
    pub best_arc: Vec<f64>,
    pub best_weights: Vec<f64>,
    /// Per-cell absolute errors at the best state (position objectives).
    pub errors: Option<Vec<f64>>,
    pub median_error: Option<f64>,
    /// Wall-clock optimizer time per iteration, excluding `T_D` (s).
    pub mean_measured_t_o: f64,
    pub trace: Vec<TraceRow>,
}

fn check_feasible(arc: &[f64], weights: &[f64]) {
    debug_assert!(
        arc[CHANNEL_CELLS..].iter().all(|g| *g >= 0.0),
        "negative gap in optimizer state"
    );
    debug_assert!(weights.iter().all(|w| *w >= 0.0), "negative beam weight in optimizer state");
}

fn perturb_weights(weights: &[f64], step: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = weights.to_vec();
    if out.is_empty() || step == 0.0 {
        return out;
    }
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    let scale = step * if mean > 0.0 { mean } else { 1.0 };
    let j = rng.gen_range(0..out.len());
    let noise = Normal::new(0.0, scale).expect("finite scale").sample(rng);
    out[j] = (out[j] + noise).max(0.0);
    out
}

fn finite(e: f64, iteration: usize) -> Result<f64> {
    if e.is_finite() {
        Ok(e)
    } else {
        Err(Error::NonFiniteObjective { iteration })
    }
}

/// One annealing run from `init`. Deterministic given `cfg.seed` under the
/// virtual clock.
pub fn run_trial(
    space: SearchSpace<'_>,
    objective: &dyn Objective,
    init: State,
    init_weights: &[f64],
    stopping: &StoppingRule,
    timing: &TimingModel,
    cfg: &AnnealConfig,
) -> Result<TrialMetrics> {
    cfg.validate()?;
    stopping.validate()?;
    timing.validate()?;
    if init_weights.len() != objective.n_weights() {
        return Err(dim_mismatch(objective.n_weights(), init_weights.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = init;
    let mut weights = init_weights.to_vec();
    let arc = space.decode(&state)?;
    check_feasible(&arc, &weights);
    let mut e = finite(objective.evaluate(&arc, &weights)?, 0)?;
    let initial_objective = e;

    let mut uphill = Vec::new();
    for _ in 0..cfg.t0_samples {
        let cand = space.propose(&state, 1.0, &mut rng);
        let cw = perturb_weights(&weights, cfg.weight_step, &mut rng);
        let ec = finite(objective.evaluate(&space.decode(&cand)?, &cw)?, 0)?;
        if ec > e {
            uphill.push(ec - e);
        }
    }
    let t0 = if uphill.is_empty() {
        f64::MIN_POSITIVE
    } else {
        -(uphill.iter().sum::<f64>() / uphill.len() as f64) / cfg.target_acceptance.ln()
    };

    let (mut best_e, mut best_state, mut best_weights, mut best_arc) = (e, state.clone(), weights.clone(), arc);
    let mut temperature = t0;
    let mut time = 0.0;
    let mut measured = 0.0;
    let mut trace = Vec::new();
    let wall = Instant::now();
    loop {
        let started = Instant::now();
        let iteration = trace.len() + 1;
        let cand = space.propose(&state, temperature / t0, &mut rng);
        let cw = perturb_weights(&weights, cfg.weight_step, &mut rng);
        let cand_arc = space.decode(&cand)?;
        check_feasible(&cand_arc, &cw);
        let ec = finite(objective.evaluate(&cand_arc, &cw)?, iteration)?;
        let accepted = accept(ec - e, temperature, &mut rng);
        if accepted {
            state = cand;
            weights = cw;
            e = ec;
            if e < best_e {
                best_e = e;
                best_state = state.clone();
                best_weights = weights.clone();
                best_arc = cand_arc;
            }
        }
        measured += started.elapsed().as_secs_f64();
        time = match timing.clock {
            ClockMode::Virtual => time + timing.t_o + timing.t_d,
            ClockMode::Real => {
                if timing.t_d > 0.0 {
                    std::thread::sleep(Duration::from_secs_f64(timing.t_d));
                }
                wall.elapsed().as_secs_f64()
            }
        };
        trace.push(TraceRow {
            iteration,
            time,
            objective: e,
            best: best_e,
            accepted,
            temperature,
        });
        temperature *= cfg.beta;
        if stopping.should_stop(&trace) || trace.len() >= cfg.max_iterations {
            break;
        }
    }
    let errors = objective.cell_errors(&best_arc);
    let median_error = errors.as_deref().map(median);
    Ok(TrialMetrics {
        space: space.label(),
        iterations: trace.len(),
        time,
        t0,
        initial_objective,
        best_objective: best_e,
        best_state,
        best_arc,
        best_weights,
        errors,
        median_error,
        mean_measured_t_o: measured / trace.len() as f64,
        trace,
    })
}

/// Medians over trials with bootstrap standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub trials: usize,
    pub median_error: f64,
    pub se_error: f64,
    pub median_iterations: f64,
    pub se_iterations: f64,
    pub median_time: f64,
    pub se_time: f64,
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

pub fn aggregate(trials: &[TrialMetrics], seed: u64) -> Result<Summary> {
    if trials.len() < 2 {
        return Err(Error::TooFewTrials {
            needed: 2,
            got: trials.len(),
        });
    }
    let errors: Vec<f64> = trials.iter().map(|t| t.median_error.unwrap_or(f64::NAN)).collect();
    let iterations: Vec<f64> = trials.iter().map(|t| t.iterations as f64).collect();
    let times: Vec<f64> = trials.iter().map(|t| t.time).collect();
    let stat = |v: &[f64], s: u64| (median(v), bootstrap_median_se(v, BOOTSTRAP_RESAMPLES, s));
    let (median_error, se_error) = if errors.iter().all(|e| e.is_finite()) {
        stat(&errors, seed)
    } else {
        (f64::NAN, f64::NAN)
    };
    let (median_iterations, se_iterations) = stat(&iterations, seed.wrapping_add(1));
    let (median_time, se_time) = stat(&times, seed.wrapping_add(2));
    Ok(Summary {
        trials: trials.len(),
        median_error,
        se_error,
        median_iterations,
        se_iterations,
        median_time,
        se_time,
    })
}

pub fn write_trace_csv(trial: &TrialMetrics, mut out: impl Write) -> Result<()> {
    writeln!(out, "iteration,virtual_time_s,objective,best_objective,accepted,temperature")?;
    for r in &trial.trace {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.iteration, r.time, r.objective, r.best, r.accepted as u8, r.temperature
        )?;
    }
    Ok(())
}

pub const SUMMARY_HEADER: &str =
    "space,d,t_d_s,trials,median_error_mm,se_error_mm,median_iterations,se_iterations,median_time_s,se_time_s";

pub fn summary_csv_row(space: &str, d: usize, t_d: f64, s: &Summary) -> String {
    format!(
        "{space},{d},{t_d},{},{},{},{},{},{},{}",
        s.trials,
        s.median_error, s.se_error, s.median_iterations, s.se_iterations, s.median_time, s.se_time
    )
}

/// Seed of trial `index` in an experiment seeded by `seed`.
pub fn trial_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// FullDAO position trial: geometry initialization and ROI from the target.
pub fn full_dao_position_trial(
    target: &Arc,
    stopping: &StoppingRule,
    timing: &TimingModel,
    cfg: &AnnealConfig,
) -> Result<TrialMetrics> {
    let init = geometry_init_arc(target)?;
    let space = FullDaoSpace::from_roi(&select_roi(&init));
    run_trial(
        SearchSpace::FullDao(&space),
        &PositionObjective::new(target),
        State::Cells(init.to_vec()),
        &[],
        stopping,
        timing,
        cfg,
    )
}

/// Latent position trial from a random point near the origin.
pub fn latent_position_trial(
    decoder: &dyn LatentDecoder,
    target: &Arc,
    stopping: &StoppingRule,
    timing: &TimingModel,
    cfg: &AnnealConfig,
) -> Result<TrialMetrics> {
    let space = LatentSpace::new(decoder);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let init = space.initial_state(&mut rng);
    run_trial(
        SearchSpace::Latent(space),
        &PositionObjective::new(target),
        init,
        &[],
        stopping,
        timing,
        cfg,
    )
}

/// Dose-case trial: beam weights refined before and after the stochastic
/// search.
#[derive(Debug, Clone)]
pub struct DoseTrial {
    pub metrics: TrialMetrics,
    /// Objective at the initial state after the first refinement.
    pub initial_objective: f64,
    /// Objective at the best state after the final refinement.
    pub final_objective: f64,
    pub final_weights: Vec<f64>,
}

impl DoseTrial {
    pub fn relative_reduction(&self) -> f64 {
        (self.initial_objective - self.final_objective) / self.initial_objective
    }
}

pub fn dose_trial(
    space: SearchSpace<'_>,
    case: &DoseCase<'_>,
    init: State,
    stopping: &StoppingRule,
    timing: &TimingModel,
    cfg: &AnnealConfig,
) -> Result<DoseTrial> {
    let n = case.n_weights();
    let start = crate::arcdata::BeamWeights::uniform(n, 1.0);
    let refined = refine_with_unit_doses(&case.unit_doses(&space.decode(&init)?)?, case.objective, &start)?;
    let initial_objective = *refined.trace.last().expect("trace has the initial value");
    let metrics = run_trial(space, case, init, refined.weights.as_slice(), stopping, timing, cfg)?;
    let y = crate::arcdata::BeamWeights::new(metrics.best_weights.clone())?;
    let last = refine_with_unit_doses(&case.unit_doses(&metrics.best_arc)?, case.objective, &y)?;
    Ok(DoseTrial {
        initial_objective,
        final_objective: *last.trace.last().expect("trace has the initial value"),
        final_weights: last.weights.as_slice().to_vec(),
        metrics,
    })
}

/// Beam's-eye-view aperture conforming to a sphere of `radius` (mm) centred
/// at the isocenter, identical at every control point. Leaf `l` sits at
/// `(l + 0.5)·pitch − 40·pitch` along the row axis.
pub fn conformal_arc(radius: f64, leaf_pitch: f64) -> Result<Arc> {
    let mut pos = vec![0.0; CHANNEL_CELLS];
    let mut gap = vec![0.0; CHANNEL_CELLS];
    for l in 0..N_LEAVES {
        let z = (l as f64 + 0.5 - N_LEAVES as f64 / 2.0) * leaf_pitch;
        let h = (radius * radius - z * z).max(0.0).sqrt();
        for c in 0..N_CONTROL_POINTS {
            pos[c * N_LEAVES + l] = -h;
            gap[c * N_LEAVES + l] = 2.0 * h;
        }
    }
    Arc::new("conformal", pos, gap)
}

/// Mutable cells of the dose-case FullDAO search: the sampled dose cells of
/// leaves inside the target projection, dilated by two leaves.
pub fn dose_dao_cells(init: &Arc, geometry: &crate::dose::BeamGeometry) -> Vec<usize> {
    let open: Vec<bool> = (0..N_LEAVES)
        .map(|l| (0..N_CONTROL_POINTS).any(|c| init.gap(c, l) > 0.0))
        .collect();
    let roi = dilate(&open, ROI_DILATION);
    let union: Vec<bool> = roi.iter().zip(select_roi(init)).map(|(a, b)| *a || b).collect();
    geometry
        .dose_cells()
        .into_iter()
        .filter(|&cell| union[cell % N_LEAVES])
        .collect()
}

/// Normalized arc of a latent point, for reports.
pub fn decode_normalized(decoder: &dyn LatentDecoder, z: &[f64]) -> Result<NormalizedArc> {
    decoder.decode_latent(z)
}

#[cfg(test)]
mod tests;
