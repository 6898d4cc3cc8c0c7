//! Simulators for delayed averaging dynamics and their damped, leader,
//! containment, aggregation and nonlinear variants.
//!
//! Every continuous-time variant is an instance of
//!
//! ```text
//! x_i'(t) = sum_{j != i} a_ij(t) psi_ij (x_j(t - h_ij(t)) - x_i(t)) - d_i(t) x_i(t) + c_i(t)
//! ```
//!
//! with piecewise-constant `A`, `d` and `c`. On a grid that contains every
//! breakpoint and every delay value the exact stepper is used: delayed reads
//! are held at the grid value `x(t_{k+1} - h)` over the step `[t_k, t_{k+1})`
//! (the sawtooth read `x(k - h0)` for sawtooth delays), so each step is a
//! linear ODE with constant data solved in closed form. Otherwise a fixed-step
//! RK4 with linear interpolation of the stored history is used.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ConvexSet;
use crate::schedule::{DelaySchedule, Lookup, WeightSchedule};

/// Largest refinement factor tried when aligning the step to the data.
const MAX_REFINE: usize = 1024;

fn is_multiple(v: f64, d: f64) -> bool {
    let q = v / d;
    (q - q.round()).abs() <= 1e-9 * q.abs().max(1.0)
}

/// Piecewise-constant matrix-valued signal; zero before its first breakpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseSignal {
    breakpoints: Vec<f64>,
    values: Vec<DMatrix<f64>>,
    zero: DMatrix<f64>,
}

/// Per-agent disturbance `f(t)`, an `n x m` piecewise-constant signal.
pub type DisturbanceSignal = PiecewiseSignal;

impl PiecewiseSignal {
    pub fn new(breakpoints: Vec<f64>, values: Vec<DMatrix<f64>>) -> Result<Self> {
        if values.is_empty() || breakpoints.len() != values.len() {
            return Err(Error::InvalidArgument("signal needs one value per breakpoint".into()));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("signal breakpoints not increasing".into()));
        }
        let (r, c) = values[0].shape();
        if values.iter().any(|v| v.shape() != (r, c)) {
            return Err(Error::InvalidArgument("signal values change shape".into()));
        }
        if values.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::InvalidArgument("signal values must be finite".into()));
        }
        Ok(Self { breakpoints, values, zero: DMatrix::zeros(r, c) })
    }

    pub fn constant(value: DMatrix<f64>) -> Self {
        let zero = DMatrix::zeros(value.nrows(), value.ncols());
        Self { breakpoints: vec![f64::NEG_INFINITY], values: vec![value], zero }
    }

    pub fn zero(rows: usize, cols: usize) -> Self {
        Self::constant(DMatrix::zeros(rows, cols))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.zero.shape()
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        self.breakpoints.iter().copied().filter(|b| b.is_finite()).collect()
    }

    pub fn value_at(&self, t: f64) -> &DMatrix<f64> {
        match self.breakpoints.partition_point(|&b| b <= t) {
            0 => &self.zero,
            p => &self.values[p - 1],
        }
    }

    /// Pointwise combination on the merged breakpoint set.
    pub fn zip_with(
        &self,
        other: &Self,
        f: impl Fn(&DMatrix<f64>, &DMatrix<f64>) -> DMatrix<f64>,
    ) -> Result<Self> {
        let mut bps: Vec<f64> = self.breakpoints.iter().chain(&other.breakpoints).copied().collect();
        bps.sort_by(|a, b| a.total_cmp(b));
        bps.dedup();
        let values = bps.iter().map(|&t| f(self.value_at(t), other.value_at(t))).collect();
        let zero = f(&self.zero, &other.zero);
        let mut out = Self::new(bps, values)?;
        out.zero = zero;
        Ok(out)
    }

    /// `int_{t1}^{t2} ||f(t)||_inf dt`.
    pub fn inf_norm_integral(&self, t1: f64, t2: f64) -> f64 {
        let mut cuts: Vec<f64> = self
            .breakpoints
            .iter()
            .copied()
            .filter(|&b| b > t1 && b < t2)
            .collect();
        cuts.insert(0, t1);
        cuts.push(t2);
        cuts.windows(2)
            .map(|w| (w[1] - w[0]) * self.value_at(w[0]).amax())
            .sum()
    }

    /// Pulses of the given masses on one coordinate of one agent: pulse `p`
    /// has height `mass / width` on `[start_p, start_p + width)`.
    pub fn pulse_train(
        n: usize,
        m: usize,
        agent: usize,
        pulses: &[(f64, f64)],
        width: f64,
    ) -> Result<Self> {
        if agent >= n || !(width > 0.0) {
            return Err(Error::InvalidArgument("bad pulse train".into()));
        }
        let mut bps = Vec::new();
        let mut vals = Vec::new();
        for &(start, mass) in pulses {
            if let Some(&last) = bps.last() {
                if start < last {
                    return Err(Error::InvalidArgument("pulses overlap".into()));
                }
            }
            let mut v = DMatrix::zeros(n, m);
            v.row_mut(agent).fill(mass / width);
            if bps.last() == Some(&start) {
                *vals.last_mut().unwrap() = v;
            } else {
                bps.push(start);
                vals.push(v);
            }
            bps.push(start + width);
            vals.push(DMatrix::zeros(n, m));
        }
        if bps.is_empty() {
            return Ok(Self::zero(n, m));
        }
        Self::new(bps, vals)
    }

    /// `count` pulses at `t = p * period`, masses `mass0 * ratio^p` (an L1
    /// signal when `ratio < 1`, constant mass when `ratio = 1`).
    pub fn geometric_pulses(
        n: usize,
        agent: usize,
        count: usize,
        period: f64,
        width: f64,
        mass0: f64,
        ratio: f64,
    ) -> Result<Self> {
        let pulses: Vec<(f64, f64)> =
            (0..count).map(|p| (p as f64 * period, mass0 * ratio.powi(p as i32))).collect();
        Self::pulse_train(n, 1, agent, &pulses, width)
    }
}

/// Prehistory `phi` on `[t* - h, t*)`, piecewise constant.
#[derive(Debug, Clone, PartialEq)]
pub enum Prehistory {
    /// Constant on the whole past.
    Constant(DMatrix<f64>),
    /// `(offset, value)` pieces: value holds on `[offset_k, offset_{k+1})`,
    /// the last one up to offset 0. Offsets are relative to `t*`.
    Pieces(Vec<(f64, DMatrix<f64>)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialCondition {
    pub start: f64,
    /// `n x m` state at `t*` (right-continuous).
    pub state: DMatrix<f64>,
    pub prehistory: Prehistory,
}

impl InitialCondition {
    pub fn new(start: f64, state: DMatrix<f64>, prehistory: Prehistory) -> Self {
        Self { start, state, prehistory }
    }

    /// Prehistory equal to the initial state.
    pub fn holding(start: f64, state: DMatrix<f64>) -> Self {
        let p = Prehistory::Constant(state.clone());
        Self { start, state, prehistory: p }
    }

    pub fn zero_prehistory(start: f64, state: DMatrix<f64>) -> Self {
        let p = Prehistory::Constant(DMatrix::zeros(state.nrows(), state.ncols()));
        Self { start, state, prehistory: p }
    }

    /// Scalar agents holding `values` on the prehistory.
    pub fn scalar(values: &[f64]) -> Self {
        Self::holding(0.0, DMatrix::from_column_slice(values.len(), 1, values))
    }

    /// Discrete-style window: `window[q] = x(t* - q)`; in continuous time the
    /// value `x(t* - q)` is held on `[t* - q, t* - q + 1)`.
    pub fn from_window(start: f64, window: Vec<DMatrix<f64>>) -> Result<Self> {
        let mut it = window.into_iter();
        let state = it
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty initial window".into()))?;
        let mut pieces: Vec<(f64, DMatrix<f64>)> =
            it.enumerate().map(|(q, v)| (-(q as f64 + 1.0), v)).collect();
        pieces.reverse();
        let prehistory = if pieces.is_empty() {
            Prehistory::Constant(state.clone())
        } else {
            Prehistory::Pieces(pieces)
        };
        Ok(Self { start, state, prehistory })
    }

    pub fn agent_count(&self) -> usize {
        self.state.nrows()
    }

    pub fn dims(&self) -> usize {
        self.state.ncols()
    }

    /// `phi(offset)` for `offset < 0`.
    pub fn prehistory_value(&self, offset: f64) -> Result<&DMatrix<f64>> {
        match &self.prehistory {
            Prehistory::Constant(v) => Ok(v),
            Prehistory::Pieces(p) => {
                // tolerate rounding of grid offsets at piece starts
                let idx = p.partition_point(|(o, _)| *o <= offset + 1e-9 * offset.abs().max(1.0));
                if idx == 0 {
                    return Err(Error::PrehistoryLookup {
                        t: self.start + offset,
                        start: self.start + p[0].0,
                    });
                }
                Ok(&p[idx - 1].1)
            }
        }
    }

    fn prehistory_offsets(&self) -> Vec<f64> {
        match &self.prehistory {
            Prehistory::Constant(_) => vec![],
            Prehistory::Pieces(p) => p.iter().map(|(o, _)| *o).collect(),
        }
    }

    fn validate(&self, n: usize, bound: f64) -> Result<()> {
        if self.state.nrows() != n {
            return Err(Error::Dimension { expected: n, found: self.state.nrows() });
        }
        if !(self.start >= 0.0) {
            return Err(Error::InvalidArgument(format!("start time {}", self.start)));
        }
        match &self.prehistory {
            Prehistory::Constant(v) => {
                if v.shape() != self.state.shape() {
                    return Err(Error::Dimension { expected: n, found: v.nrows() });
                }
            }
            Prehistory::Pieces(p) => {
                if p.iter().any(|(_, v)| v.shape() != self.state.shape()) {
                    return Err(Error::Dimension { expected: n, found: p[0].1.nrows() });
                }
                if p.windows(2).any(|w| !(w[1].0 > w[0].0)) || p.last().map(|x| x.0 >= 0.0) == Some(true) {
                    return Err(Error::InvalidArgument("prehistory offsets must increase below 0".into()));
                }
                if bound > 0.0 && p[0].0 > -bound + 1e-9 * bound.max(1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "prehistory starts at offset {} but delays reach {}",
                        p[0].0, bound
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    ExactExponential,
    RungeKutta4,
    DiscreteIteration,
}

/// Sampled solution. Samples before `start_index` are the prehistory on the
/// same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DMatrix<f64>>,
    pub start_index: usize,
    pub scheme: Scheme,
    pub step: f64,
    pub delay_bound: f64,
}

impl Trajectory {
    pub fn agent_count(&self) -> usize {
        self.states[0].nrows()
    }

    pub fn dims(&self) -> usize {
        self.states[0].ncols()
    }

    pub fn start_time(&self) -> f64 {
        self.times[self.start_index]
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn final_state(&self) -> &DMatrix<f64> {
        self.states.last().unwrap()
    }

    /// Samples from `t*` on.
    pub fn run_samples(&self) -> impl Iterator<Item = (f64, &DMatrix<f64>)> {
        self.times[self.start_index..].iter().copied().zip(&self.states[self.start_index..])
    }

    /// Index of the sample at time `t` (within grid rounding).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let tol = 1e-9 * self.step.max(1e-300).max(t.abs() * 1e-3);
        let p = self.times.partition_point(|&s| s < t - tol);
        (p < self.times.len() && (self.times[p] - t).abs() <= tol).then_some(p)
    }

    pub fn state_at(&self, t: f64) -> Option<&DMatrix<f64>> {
        self.index_of(t).map(|i| &self.states[i])
    }

    /// CSV with header `t,agent,coord,value`, one row per sample from `t*` on.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,agent,coord,value")?;
        for (t, x) in self.run_samples() {
            for i in 0..x.nrows() {
                for c in 0..x.ncols() {
                    writeln!(out, "{t},{i},{c},{}", x[(i, c)])?;
                }
            }
        }
        Ok(())
    }
}

/// Link gain `psi_ij(y, z)` of the nonlinear coupling `phi_ij = psi_ij (y - z)`.
pub trait Coupling: Sync {
    fn gain(&self, i: usize, j: usize, neighbour: &[f64], own: &[f64]) -> f64;

    /// Declared `(inf, sup)` of the gain on the compacts of interest.
    fn bounds(&self) -> Option<(f64, f64)> {
        None
    }
}

/// `psi = 1`: the linear dynamics.
#[derive(Debug, Clone, Copy, Default)]
pub struct UnitCoupling;

impl Coupling for UnitCoupling {
    fn gain(&self, _: usize, _: usize, _: &[f64], _: &[f64]) -> f64 {
        1.0
    }

    fn bounds(&self) -> Option<(f64, f64)> {
        Some((1.0, 1.0))
    }
}

/// `psi(y, z) = 1 / (1 + |y - z|^2)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct InverseSquareCoupling;

impl Coupling for InverseSquareCoupling {
    fn gain(&self, _: usize, _: usize, y: &[f64], z: &[f64]) -> f64 {
        let d2: f64 = y.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        1.0 / (1.0 + d2)
    }

    fn bounds(&self) -> Option<(f64, f64)> {
        Some((0.0, 1.0))
    }
}

/// Gain given by a closure.
pub struct FnCoupling<F>(pub F);

impl<F> Coupling for FnCoupling<F>
where
    F: Fn(usize, usize, &[f64], &[f64]) -> f64 + Sync,
{
    fn gain(&self, i: usize, j: usize, y: &[f64], z: &[f64]) -> f64 {
        (self.0)(i, j, y, z)
    }
}

/// Static leaders with attraction weights `b_ik(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderConfig {
    /// `L x m` leader positions.
    pub positions: DMatrix<f64>,
    /// `n x L` attraction weights.
    pub attraction: PiecewiseSignal,
}

impl LeaderConfig {
    pub fn new(positions: DMatrix<f64>, attraction: PiecewiseSignal) -> Result<Self> {
        if positions.nrows() == 0 {
            return Err(Error::InvalidArgument("leader set is empty".into()));
        }
        if attraction.shape().1 != positions.nrows() {
            return Err(Error::Dimension { expected: positions.nrows(), found: attraction.shape().1 });
        }
        if attraction.values.iter().any(|b| b.iter().any(|v| *v < 0.0)) {
            return Err(Error::InvalidArgument("attraction weights must be nonnegative".into()));
        }
        Ok(Self { positions, attraction })
    }

    /// `d_i(t) = sum_k b_ik(t)`.
    pub fn damping(&self) -> PiecewiseSignal {
        let f = |b: &DMatrix<f64>| DMatrix::from_fn(b.nrows(), 1, |i, _| b.row(i).sum());
        let mut out = self.attraction.clone();
        out.values = out.values.iter().map(f).collect();
        out.zero = f(&out.zero);
        out
    }

    /// `c_i(t) = sum_k b_ik(t) x_k`.
    pub fn forcing(&self) -> PiecewiseSignal {
        let mut out = self.attraction.clone();
        out.values = out.values.iter().map(|b| b * &self.positions).collect();
        out.zero = &out.zero * &self.positions;
        out
    }
}

/// A convex target set with per-agent selectors `omega_i(t)` in it.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub set: ConvexSet,
    /// `n x m` selector signal.
    pub selector: PiecewiseSignal,
}

impl TargetSet {
    pub fn new(set: ConvexSet, selector: PiecewiseSignal) -> Result<Self> {
        let check = |v: &DMatrix<f64>| -> Result<()> {
            for i in 0..v.nrows() {
                let p: Vec<f64> = v.row(i).iter().copied().collect();
                let d = set.distance(&p)?;
                if d > 1e-9 {
                    return Err(Error::Invariant(format!(
                        "selector of agent {i} lies {d} outside the target set"
                    )));
                }
            }
            Ok(())
        };
        selector.values.iter().try_for_each(check)?;
        Ok(Self { set, selector })
    }
}

/// The linear problem data shared by all continuous-time simulators.
#[derive(Clone, Copy)]
pub(crate) struct Problem<'a> {
    pub weights: &'a WeightSchedule,
    pub delays: &'a DelaySchedule,
    pub damping: Option<&'a PiecewiseSignal>,
    pub forcing: Option<&'a PiecewiseSignal>,
}

impl<'a> Problem<'a> {
    pub fn new(weights: &'a WeightSchedule, delays: &'a DelaySchedule) -> Self {
        Self { weights, delays, damping: None, forcing: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct GridPlan {
    pub start: f64,
    pub step: f64,
    pub steps: usize,
    /// Number of prehistory samples kept before `start`.
    pub pre: usize,
    pub scheme: Scheme,
}

impl GridPlan {
    pub fn time(&self, k: isize) -> f64 {
        self.start + k as f64 * self.step
    }
}

fn plan_grid(problem: &Problem, initial: &InitialCondition, t_end: f64, step: f64, refine: bool) -> Result<GridPlan> {
    let start = initial.start;
    let span = t_end - start;
    let bound = problem.delays.reach();
    let in_run = |t: &f64| *t >= start && *t <= t_end;
    let mut times: Vec<f64> = problem.weights.breakpoints().iter().copied().filter(in_run).collect();
    times.extend(problem.delays.breakpoints().into_iter().filter(in_run));
    for sig in [problem.damping, problem.forcing].into_iter().flatten() {
        times.extend(sig.breakpoints().into_iter().filter(in_run));
    }
    let mut durations = problem.delays.delay_values();
    durations.push(span);
    durations.extend(initial.prehistory_offsets().iter().filter(|o| **o > -bound - 1e-12).map(|o| -o));

    let aligned = |d: f64| {
        times.iter().all(|&t| is_multiple(t - start, d)) && durations.iter().all(|&v| is_multiple(v, d))
    };
    let max_m = if refine { MAX_REFINE } else { 1 };
    for m in 1..=max_m {
        let d = step / m as f64;
        if aligned(d) {
            let steps = (span / d).round() as usize;
            let pre = (bound / d - 1e-9).ceil().max(0.0) as usize;
            return Ok(GridPlan { start, step: d, steps, pre, scheme: Scheme::ExactExponential });
        }
    }
    if problem.delays.is_sawtooth() {
        return Err(Error::InvalidArgument(format!(
            "step {step} cannot be aligned with the sawtooth grid"
        )));
    }
    let min_delay = problem.delays.delay_values().first().copied().unwrap_or(f64::INFINITY);
    let mut d = if refine { step.min(min_delay) } else { step };
    let steps = (span / d).ceil().max(1.0) as usize;
    d = span / steps as f64;
    let pre = (bound / d - 1e-9).ceil().max(0.0) as usize;
    Ok(GridPlan { start, step: d, steps, pre, scheme: Scheme::RungeKutta4 })
}

/// `x' = Phi x + Gamma r` for one step of constant data.
#[derive(Debug, Clone)]
enum StepOperator {
    Diagonal { phi: Vec<f64>, gamma: Vec<f64> },
    Full { phi: DMatrix<f64>, gamma: DMatrix<f64> },
}

impl StepOperator {
    fn diagonal(alpha: &[f64], dt: f64) -> Self {
        let phi = alpha.iter().map(|&a| (-a * dt).exp()).collect();
        let gamma = alpha
            .iter()
            .map(|&a| if a > 0.0 { -(-a * dt).exp_m1() / a } else { dt })
            .collect();
        StepOperator::Diagonal { phi, gamma }
    }

    /// From the block exponential of `[[M dt, I dt], [0, 0]]`.
    fn full(m: &DMatrix<f64>, dt: f64) -> Self {
        let n = m.nrows();
        let mut big = DMatrix::zeros(2 * n, 2 * n);
        big.view_mut((0, 0), (n, n)).copy_from(&(m * dt));
        for i in 0..n {
            big[(i, n + i)] = dt;
        }
        let e = big.exp();
        StepOperator::Full {
            phi: e.view((0, 0), (n, n)).into_owned(),
            gamma: e.view((0, n), (n, n)).into_owned(),
        }
    }

    fn apply(&self, x: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            StepOperator::Diagonal { phi, gamma } => {
                DMatrix::from_fn(x.nrows(), x.ncols(), |i, c| phi[i] * x[(i, c)] + gamma[i] * r[(i, c)])
            }
            StepOperator::Full { phi, gamma } => phi * x + gamma * r,
        }
    }
}

/// Grid history indexed from `-pre`.
struct History<'a> {
    plan: GridPlan,
    initial: &'a InitialCondition,
    samples: Vec<DMatrix<f64>>,
}

impl<'a> History<'a> {
    fn new(plan: GridPlan, initial: &'a InitialCondition) -> Result<Self> {
        let mut samples = Vec::with_capacity(plan.pre + plan.steps + 1);
        for q in (1..=plan.pre).rev() {
            samples.push(initial.prehistory_value(-(q as f64) * plan.step)?.clone());
        }
        samples.push(initial.state.clone());
        Ok(Self { plan, initial, samples })
    }

    fn current(&self) -> &DMatrix<f64> {
        self.samples.last().unwrap()
    }

    /// Row `j` of the grid value at time `tau`.
    fn grid_row(&self, j: usize, tau: f64) -> Result<Vec<f64>> {
        let rel = (tau - self.plan.start) / self.plan.step;
        let k = rel.round();
        if k < 0.0 {
            let v = self.initial.prehistory_value(k * self.plan.step)?;
            return Ok(v.row(j).iter().copied().collect());
        }
        let idx = k as usize + self.plan.pre;
        let v = self.samples.get(idx).ok_or_else(|| {
            Error::Invariant(format!("delayed read at {tau} ahead of the computed history"))
        })?;
        Ok(v.row(j).iter().copied().collect())
    }

    /// Row `j` at arbitrary `tau` by linear interpolation on the grid.
    fn interpolated_row(&self, j: usize, tau: f64) -> Result<Vec<f64>> {
        if tau < self.plan.start {
            let v = self.initial.prehistory_value(tau - self.plan.start)?;
            return Ok(v.row(j).iter().copied().collect());
        }
        let rel = (tau - self.plan.start) / self.plan.step;
        let last = (self.samples.len() - 1 - self.plan.pre) as f64;
        let rel = rel.min(last);
        let k0 = rel.floor();
        let w = rel - k0;
        let a = &self.samples[k0 as usize + self.plan.pre];
        if w == 0.0 {
            return Ok(a.row(j).iter().copied().collect());
        }
        let b = &self.samples[k0 as usize + 1 + self.plan.pre];
        Ok(a.row(j).iter().zip(b.row(j).iter()).map(|(x, y)| (1.0 - w) * x + w * y).collect())
    }
}

struct ExactStepper<'a> {
    problem: Problem<'a>,
    coupling: Option<&'a dyn Coupling>,
    cache: Option<(DMatrix<f64>, StepOperator)>,
}

fn row_of(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

impl<'a> ExactStepper<'a> {
    fn gain(&self, i: usize, j: usize, y: &[f64], z: &[f64]) -> Result<f64> {
        let Some(c) = self.coupling else { return Ok(1.0) };
        let g = c.gain(i, j, y, z);
        if !(g > 0.0 && g.is_finite()) {
            return Err(Error::CouplingContract(format!("psi_{i}{j} evaluated to {g}")));
        }
        Ok(g)
    }

    /// Advances `x(t_k)` to `x(t_{k+1})`.
    fn step(&mut self, k: usize, hist: &History) -> Result<DMatrix<f64>> {
        let plan = hist.plan;
        let (t0, t1) = (plan.time(k as isize), plan.time(k as isize + 1));
        let mid = plan.start + (k as f64 + 0.5) * plan.step;
        let a = self.problem.weights.evaluate(mid)?;
        let x0 = hist.current();
        let (n, m) = x0.shape();
        let mut alpha = vec![0.0; n];
        let mut r = match self.problem.forcing {
            Some(f) => f.value_at(mid).clone(),
            None => DMatrix::zeros(n, m),
        };
        if let Some(d) = self.problem.damping {
            let d = d.value_at(mid);
            for i in 0..n {
                alpha[i] += d[(i, 0)];
            }
        }
        let mut current: Option<DMatrix<f64>> = None;
        for i in 0..n {
            let own = row_of(x0, i);
            for j in 0..n {
                let w = a[(i, j)];
                if i == j || w == 0.0 {
                    continue;
                }
                match self.problem.delays.lookup(i, j, t0, t1)? {
                    Lookup::Current => {
                        let y = row_of(x0, j);
                        let w = w * self.gain(i, j, &y, &own)?;
                        alpha[i] += w;
                        current.get_or_insert_with(|| DMatrix::zeros(n, n))[(i, j)] += w;
                    }
                    Lookup::HeldAt(tau) => {
                        let y = hist.grid_row(j, tau)?;
                        let w = w * self.gain(i, j, &y, &own)?;
                        alpha[i] += w;
                        for c in 0..m {
                            r[(i, c)] += w * y[c];
                        }
                    }
                }
            }
        }
        let op = match current {
            None => StepOperator::diagonal(&alpha, plan.step),
            Some(mut mm) => {
                for i in 0..n {
                    mm[(i, i)] -= alpha[i];
                }
                match &self.cache {
                    Some((key, op)) if *key == mm => op.clone(),
                    _ => {
                        let op = StepOperator::full(&mm, plan.step);
                        self.cache = Some((mm, op.clone()));
                        op
                    }
                }
            }
        };
        Ok(op.apply(x0, &r))
    }
}

struct Rk4Stepper<'a> {
    problem: Problem<'a>,
    coupling: Option<&'a dyn Coupling>,
}

impl<'a> Rk4Stepper<'a> {
    fn rhs(&self, s: f64, x: &DMatrix<f64>, a: &DMatrix<f64>, mid: f64, t1: f64, hist: &History) -> Result<DMatrix<f64>> {
        let (n, m) = x.shape();
        let mut dx = match self.problem.forcing {
            Some(f) => f.value_at(mid).clone(),
            None => DMatrix::zeros(n, m),
        };
        if let Some(d) = self.problem.damping {
            let d = d.value_at(mid);
            for i in 0..n {
                for c in 0..m {
                    dx[(i, c)] -= d[(i, 0)] * x[(i, c)];
                }
            }
        }
        // delays are evaluated from the left inside the step
        let s_eval = s.min(t1 - 1e-9 * hist.plan.step);
        for i in 0..n {
            let own = row_of(x, i);
            for j in 0..n {
                let w = a[(i, j)];
                if i == j || w == 0.0 {
                    continue;
                }
                let h = self.problem.delays.delay(i, j, s_eval)?;
                let y = if h == 0.0 { row_of(x, j) } else { hist.interpolated_row(j, s - h)? };
                let g = match self.coupling {
                    Some(c) => {
                        let g = c.gain(i, j, &y, &own);
                        if !(g > 0.0 && g.is_finite()) {
                            return Err(Error::CouplingContract(format!("psi_{i}{j} evaluated to {g}")));
                        }
                        g
                    }
                    None => 1.0,
                };
                for c in 0..m {
                    dx[(i, c)] += w * g * (y[c] - own[c]);
                }
            }
        }
        Ok(dx)
    }

    fn step(&self, k: usize, hist: &History) -> Result<DMatrix<f64>> {
        let plan = hist.plan;
        let (t0, t1) = (plan.time(k as isize), plan.time(k as isize + 1));
        let mid = 0.5 * (t0 + t1);
        let dt = plan.step;
        let a = self.problem.weights.evaluate(mid)?;
        let x = hist.current();
        let k1 = self.rhs(t0, x, a, mid, t1, hist)?;
        let k2 = self.rhs(t0 + 0.5 * dt, &(x + &k1 * (0.5 * dt)), a, mid, t1, hist)?;
        let k3 = self.rhs(t0 + 0.5 * dt, &(x + &k2 * (0.5 * dt)), a, mid, t1, hist)?;
        let k4 = self.rhs(t1, &(x + &k3 * dt), a, mid, t1, hist)?;
        Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
    }
}

pub(crate) fn run_continuous(
    problem: Problem,
    coupling: Option<&dyn Coupling>,
    initial: &InitialCondition,
    t_end: f64,
    step: f64,
    refine: bool,
) -> Result<Trajectory> {
    let plan = plan_continuous(&problem, initial, t_end, step, refine)?;
    run_on_plan(problem, coupling, initial, plan)
}

pub(crate) fn plan_continuous(
    problem: &Problem,
    initial: &InitialCondition,
    t_end: f64,
    step: f64,
    refine: bool,
) -> Result<GridPlan> {
    let w = problem.weights;
    if w.is_discrete() {
        return Err(Error::KindMismatch { expected: "continuous" });
    }
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step {step} must be positive")));
    }
    if t_end > w.horizon() {
        return Err(Error::OutOfRange { t: t_end, horizon: w.horizon() });
    }
    if t_end < initial.start {
        return Err(Error::InvalidArgument(format!("t_end {t_end} precedes start {}", initial.start)));
    }
    let n = w.agent_count();
    if problem.delays.agent_count() != n {
        return Err(Error::Dimension { expected: n, found: problem.delays.agent_count() });
    }
    initial.validate(n, problem.delays.reach())?;
    let m = initial.dims();
    if let Some(d) = problem.damping {
        if d.shape() != (n, 1) {
            return Err(Error::Dimension { expected: n, found: d.shape().0 });
        }
        if d.values.iter().any(|v| v.iter().any(|x| *x < 0.0)) {
            return Err(Error::InvalidArgument("damping must be nonnegative".into()));
        }
    }
    if let Some(f) = problem.forcing {
        if f.shape() != (n, m) {
            return Err(Error::Dimension { expected: n * m, found: f.shape().0 * f.shape().1 });
        }
    }
    if t_end == initial.start {
        let pre = (problem.delays.reach() / step - 1e-9).ceil().max(0.0) as usize;
        return Ok(GridPlan { start: initial.start, step, steps: 0, pre, scheme: Scheme::ExactExponential });
    }
    plan_grid(problem, initial, t_end, step, refine)
}

pub(crate) fn run_on_plan(
    problem: Problem,
    coupling: Option<&dyn Coupling>,
    initial: &InitialCondition,
    plan: GridPlan,
) -> Result<Trajectory> {
    let mut hist = History::new(plan, initial)?;
    match plan.scheme {
        Scheme::ExactExponential => {
            let mut st = ExactStepper { problem, coupling, cache: None };
            for k in 0..plan.steps {
                let next = st.step(k, &hist)?;
                hist.samples.push(next);
            }
        }
        _ => {
            let st = Rk4Stepper { problem, coupling };
            for k in 0..plan.steps {
                let next = st.step(k, &hist)?;
                hist.samples.push(next);
            }
        }
    }
    let times = (-(plan.pre as isize)..=plan.steps as isize).map(|k| plan.time(k)).collect();
    Ok(Trajectory {
        times,
        states: hist.samples,
        start_index: plan.pre,
        scheme: plan.scheme,
        step: plan.step,
        delay_bound: problem.delays.bound(),
    })
}

/// `Gamma_k (f_k + g_k)`: the exact-stepper increment of step `k` driven only by
/// the disturbance and by delayed reads that land in the prehistory.
pub(crate) fn prehistory_forcing_increment(
    problem: Problem,
    initial: &InitialCondition,
    plan: GridPlan,
    k: usize,
) -> Result<DMatrix<f64>> {
    let zero_state = DMatrix::zeros(initial.agent_count(), initial.dims());
    let mut hist = History::new(plan, initial)?;
    *hist.samples.last_mut().unwrap() = zero_state.clone();
    // later grid values are zero: only prehistory reads survive
    for _ in 0..k {
        hist.samples.push(zero_state.clone());
    }
    let mut st = ExactStepper { problem, coupling: None, cache: None };
    st.step(k, &hist)
}

/// Delayed linear consensus, optionally disturbed.
pub fn simulate_continuous(
    schedule: &WeightSchedule,
    delays: &DelaySchedule,
    initial: &InitialCondition,
    disturbance: Option<&DisturbanceSignal>,
    t_end: f64,
    step: f64,
) -> Result<Trajectory> {
    let problem = Problem { forcing: disturbance, ..Problem::new(schedule, delays) };
    run_continuous(problem, None, initial, t_end, step, true)
}

fn run_discrete(
    schedule: &WeightSchedule,
    delays: &DelaySchedule,
    initial: &InitialCondition,
    steps: usize,
    coupling: Option<&dyn Coupling>,
) -> Result<Trajectory> {
    if !schedule.is_discrete() {
        return Err(Error::KindMismatch { expected: "discrete" });
    }
    if !delays.is_integer_valued() || delays.bound().fract() != 0.0 {
        return Err(Error::InvalidArgument("discrete dynamics need integer delays".into()));
    }
    let n = schedule.agent_count();
    if delays.agent_count() != n {
        return Err(Error::Dimension { expected: n, found: delays.agent_count() });
    }
    initial.validate(n, delays.bound())?;
    if initial.start.fract() != 0.0 {
        return Err(Error::InvalidArgument("discrete start time must be an integer".into()));
    }
    let end = initial.start + steps as f64;
    if end > schedule.horizon() {
        return Err(Error::OutOfRange { t: end, horizon: schedule.horizon() });
    }
    let plan = GridPlan {
        start: initial.start,
        step: 1.0,
        steps,
        pre: delays.bound() as usize,
        scheme: Scheme::DiscreteIteration,
    };
    let mut hist = History::new(plan, initial)?;
    let m = initial.dims();
    for k in 0..steps {
        let t = plan.time(k as isize);
        let b = schedule.evaluate(t)?;
        let x = hist.current();
        let mut next = x.clone();
        for i in 0..n {
            let own = row_of(x, i);
            for j in 0..n {
                let w = b[(i, j)];
                if i == j || w == 0.0 {
                    continue;
                }
                let h = delays.delay(i, j, t)?;
                let y = hist.grid_row(j, t - h)?;
                let g = match coupling {
                    Some(c) => {
                        let g = c.gain(i, j, &y, &own);
                        if !(g > 0.0 && g <= 1.0) {
                            return Err(Error::CouplingContract(format!(
                                "discrete psi_{i}{j} = {g} outside (0, 1]"
                            )));
                        }
                        g
                    }
                    None => 1.0,
                };
                for c in 0..m {
                    next[(i, c)] += w * g * (y[c] - own[c]);
                }
            }
        }
        hist.samples.push(next);
    }
    let times = (-(plan.pre as isize)..=steps as isize).map(|k| plan.time(k)).collect();
    Ok(Trajectory {
        times,
        states: hist.samples,
        start_index: plan.pre,
        scheme: Scheme::DiscreteIteration,
        step: 1.0,
        delay_bound: delays.bound(),
    })
}

/// Discrete delayed averaging `x_i(t+1) = x_i(t) + sum_j a_ij (x_j(t - h_ij) - x_i(t))`.
pub fn simulate_discrete(
    schedule: &WeightSchedule,
    delays: &DelaySchedule,
    initial: &InitialCondition,
    steps: usize,
) -> Result<Trajectory> {
    run_discrete(schedule, delays, initial, steps, None)
}

/// Nonlinear couplings `a_ij psi_ij(y, z) (y - z)`. Dispatches on the schedule
/// kind; for discrete schedules `t_end` counts steps from the start time and
/// `step` is ignored.
pub fn simulate_nonlinear(
    schedule: &WeightSchedule,
    delays: &DelaySchedule,
    initial: &InitialCondition,
    coupling: &dyn Coupling,
    t_end: f64,
    step: f64,
) -> Result<Trajectory> {
    if schedule.is_discrete() {
        let steps = t_end - initial.start;
        if steps < 0.0 || steps.fract() != 0.0 {
            return Err(Error::InvalidArgument(format!("bad discrete end time {t_end}")));
        }
        return run_discrete(schedule, delays, initial, steps as usize, Some(coupling));
    }
    run_continuous(Problem::new(schedule, delays), Some(coupling), initial, t_end, step, true)
}

/// `x_i' = -d_i x_i + sum_j a_ij (x_j(t - h_ij) - x_i)`.
pub fn simulate_damped(
    schedule: &WeightSchedule,
    delays: &DelaySchedule,
    damping: &PiecewiseSignal,
    initial: &InitialCondition,
    t_end: f64,
    step: f64,
) -> Result<Trajectory> {
    let problem = Problem { damping: Some(damping), ..Problem::new(schedule, delays) };
    run_continuous(problem, None, initial, t_end, step, true)
}

/// `x_i' = d_i (x_w - x_i) + sum_j a_ij (x_j(t - h_ij) - x_i)` with a static
/// leader value `x_w` (one entry per coordinate).
pub fn simulate_leader_following(
    schedule: &WeightSchedule,
    delays: &DelaySchedule,
    damping: &PiecewiseSignal,
    leader: &[f64],
    initial: &InitialCondition,
    t_end: f64,
    step: f64,
) -> Result<Trajectory> {
    if leader.len() != initial.dims() {
        return Err(Error::Dimension { expected: initial.dims(), found: leader.len() });
    }
    let lv = DMatrix::from_row_slice(1, leader.len(), leader);
    let forcing = damping.zip_with(damping, |d, _| d * &lv)?;
    let problem = Problem { damping: Some(damping), forcing: Some(&forcing), ..Problem::new(schedule, delays) };
    run_continuous(problem, None, initial, t_end, step, true)
}

/// Max deviation between the leader-following run shifted by `-x_w` and the
/// damped run from the shifted initial condition.
pub fn leader_shift_gap(
    schedule: &WeightSchedule,
    delays: &DelaySchedule,
    damping: &PiecewiseSignal,
    leader: &[f64],
    initial: &InitialCondition,
    t_end: f64,
    step: f64,
) -> Result<f64> {
    let lead = simulate_leader_following(schedule, delays, damping, leader, initial, t_end, step)?;
    let shift = |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), m.ncols(), |i, c| m[(i, c)] - leader[c]);
    let prehistory = match &initial.prehistory {
        Prehistory::Constant(v) => Prehistory::Constant(shift(v)),
        Prehistory::Pieces(p) => Prehistory::Pieces(p.iter().map(|(o, v)| (*o, shift(v))).collect()),
    };
    let shifted = InitialCondition::new(initial.start, shift(&initial.state), prehistory);
    let damped = simulate_damped(schedule, delays, damping, &shifted, t_end, step)?;
    let mut gap = 0.0f64;
    for (a, b) in lead.states.iter().zip(&damped.states) {
        gap = gap.max((shift(a) - b).amax());
    }
    Ok(gap)
}

/// Containment with static leaders: `x_i' = sum_k b_ik (x_k - x_i) + sum_j a_ij (...)`.
pub fn simulate_containment(
    schedule: &WeightSchedule,
    delays: &DelaySchedule,
    leader: &LeaderConfig,
    initial: &InitialCondition,
    t_end: f64,
    step: f64,
) -> Result<Trajectory> {
    if leader.positions.ncols() != initial.dims() {
        return Err(Error::Dimension { expected: initial.dims(), found: leader.positions.ncols() });
    }
    let damping = leader.damping();
    let forcing = leader.forcing();
    let problem = Problem { damping: Some(&damping), forcing: Some(&forcing), ..Problem::new(schedule, delays) };
    run_continuous(problem, None, initial, t_end, step, true)
}

/// Target aggregation: `x_i' = d_i (omega_i(t) - x_i) + sum_j a_ij (...)`.
pub fn simulate_target_aggregation(
    schedule: &WeightSchedule,
    delays: &DelaySchedule,
    target: &TargetSet,
    damping: &PiecewiseSignal,
    initial: &InitialCondition,
    t_end: f64,
    step: f64,
) -> Result<Trajectory> {
    let forcing = damping.zip_with(&target.selector, |d, w| {
        DMatrix::from_fn(w.nrows(), w.ncols(), |i, c| d[(i, 0)] * w[(i, c)])
    })?;
    let problem = Problem { damping: Some(damping), forcing: Some(&forcing), ..Problem::new(schedule, delays) };
    run_continuous(problem, None, initial, t_end, step, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn pair(w: f64) -> DMatrix<f64> {
        dmatrix![0.0, w; w, 0.0]
    }

    #[test]
    fn two_agent_closed_form() {
        let s = WeightSchedule::constant(pair(1.0), 2.0).unwrap();
        let d = DelaySchedule::none(2);
        let tr = simulate_continuous(&s, &d, &InitialCondition::scalar(&[0.0, 1.0]), None, 1.0, 0.1).unwrap();
        assert_eq!(tr.scheme, Scheme::ExactExponential);
        let x = tr.final_state();
        assert!(((x[(1, 0)] - x[(0, 0)]) - (-2.0f64).exp()).abs() < 1e-13);
        assert!((x[(1, 0)] - x[(0, 0)] - 0.135_335_283_236_612_7).abs() < 1e-12);
    }

    #[test]
    fn zero_schedule_is_static() {
        let s = WeightSchedule::zero(3, 5.0).unwrap();
        let ic = InitialCondition::scalar(&[1.0, -2.0, 3.5]);
        let tr = simulate_continuous(&s, &DelaySchedule::uniform(3, 1.0).unwrap(), &ic, None, 5.0, 0.5).unwrap();
        assert!(tr.states.iter().all(|x| x == &ic.state));
    }

    #[test]
    fn consensus_manifold_is_fixed() {
        let s = WeightSchedule::constant(pair(2.0), 3.0).unwrap();
        let ic = InitialCondition::scalar(&[0.7, 0.7]);
        let tr = simulate_continuous(&s, &DelaySchedule::uniform(2, 0.5).unwrap(), &ic, None, 3.0, 0.25).unwrap();
        assert!(tr.states.iter().all(|x| x.iter().all(|v| *v == 0.7)));
    }

    #[test]
    fn invalid_arguments() {
        let s = WeightSchedule::constant(pair(1.0), 2.0).unwrap();
        let d = DelaySchedule::none(2);
        let ic = InitialCondition::scalar(&[0.0, 1.0]);
        assert!(simulate_continuous(&s, &d, &ic, None, 1.0, 0.0).is_err());
        assert!(matches!(simulate_continuous(&s, &d, &ic, None, 3.0, 0.1), Err(Error::OutOfRange { .. })));
        // prehistory too short for the delay bound
        let short = InitialCondition::new(
            0.0,
            dmatrix![0.0; 1.0],
            Prehistory::Pieces(vec![(-0.5, dmatrix![0.0; 0.0])]),
        );
        let dl = DelaySchedule::uniform(2, 1.0).unwrap();
        assert!(simulate_continuous(&s, &dl, &short, None, 1.0, 0.25).is_err());
    }

    #[test]
    fn discrete_examples() {
        let half = dmatrix![0.5, 0.5; 0.5, 0.5];
        let s = WeightSchedule::discrete(vec![half]).unwrap();
        let tr = simulate_discrete(&s, &DelaySchedule::none(2), &InitialCondition::scalar(&[0.0, 1.0]), 1).unwrap();
        assert_eq!(tr.final_state(), &dmatrix![0.5; 0.5]);

        let id = WeightSchedule::discrete(vec![DMatrix::identity(2, 2); 3]).unwrap();
        let tr = simulate_discrete(&id, &DelaySchedule::none(2), &InitialCondition::scalar(&[0.0, 1.0]), 3).unwrap();
        assert!(tr.states.iter().all(|x| x == &dmatrix![0.0; 1.0]));

        // x_i(k+1) = (1 - a_k) x_{1-i}(k) + a_k x_i(k), a_0 = 1/4
        let b = dmatrix![0.25, 0.75; 0.75, 0.25];
        let s = WeightSchedule::discrete(vec![b]).unwrap();
        let tr = simulate_discrete(&s, &DelaySchedule::none(2), &InitialCondition::scalar(&[0.0, 1.0]), 1).unwrap();
        assert_eq!(tr.final_state(), &dmatrix![0.75; 0.25]);
    }

    #[test]
    fn discrete_rejects_fractional_delays() {
        let s = WeightSchedule::discrete(vec![dmatrix![0.5, 0.5; 0.5, 0.5]]).unwrap();
        let d = DelaySchedule::uniform(2, 0.5).unwrap();
        assert!(simulate_discrete(&s, &d, &InitialCondition::scalar(&[0.0, 1.0]), 1).is_err());
    }

    #[test]
    fn unit_coupling_matches_linear_bitwise() {
        let s = WeightSchedule::piecewise(vec![0.0, 1.0], vec![pair(1.0), dmatrix![0.0, 0.3; 2.0, 0.0]], 4.0).unwrap();
        let d = DelaySchedule::constant(dmatrix![0.0, 0.0; 0.5, 0.0], 0.5).unwrap();
        let ic = InitialCondition::scalar(&[0.0, 1.0]);
        let lin = simulate_continuous(&s, &d, &ic, None, 4.0, 0.25).unwrap();
        let nl = simulate_nonlinear(&s, &d, &ic, &UnitCoupling, 4.0, 0.25).unwrap();
        assert_eq!(lin, nl);
    }

    #[test]
    fn inverse_square_coupling_is_slower() {
        let s = WeightSchedule::constant(pair(1.0), 5.0).unwrap();
        let d = DelaySchedule::none(2);
        let ic = InitialCondition::scalar(&[0.0, 1.0]);
        let lin = simulate_continuous(&s, &d, &ic, None, 5.0, 0.05).unwrap();
        let nl = simulate_nonlinear(&s, &d, &ic, &InverseSquareCoupling, 5.0, 0.05).unwrap();
        let diam = |x: &DMatrix<f64>| (x[(1, 0)] - x[(0, 0)]).abs();
        let mut prev = f64::INFINITY;
        for (a, b) in lin.states.iter().zip(&nl.states).skip(1) {
            assert!(diam(b) > diam(a));
            assert!(diam(b) <= prev);
            prev = diam(b);
        }
        let still = simulate_nonlinear(&s, &d, &InitialCondition::scalar(&[2.0, 2.0]), &InverseSquareCoupling, 5.0, 0.5)
            .unwrap();
        assert!(still.states.iter().all(|x| x == &dmatrix![2.0; 2.0]));
    }

    #[test]
    fn coupling_contract() {
        let s = WeightSchedule::constant(pair(1.0), 1.0).unwrap();
        let bad = FnCoupling(|_: usize, _: usize, _: &[f64], _: &[f64]| 0.0);
        let r = simulate_nonlinear(&s, &DelaySchedule::none(2), &InitialCondition::scalar(&[0.0, 1.0]), &bad, 1.0, 0.5);
        assert!(matches!(r, Err(Error::CouplingContract(_))));
        let big = FnCoupling(|_: usize, _: usize, _: &[f64], _: &[f64]| 1.5);
        let ds = WeightSchedule::discrete(vec![dmatrix![0.5, 0.5; 0.5, 0.5]]).unwrap();
        let r = simulate_nonlinear(&ds, &DelaySchedule::none(2), &InitialCondition::scalar(&[0.0, 1.0]), &big, 1.0, 1.0);
        assert!(matches!(r, Err(Error::CouplingContract(_))));
    }

    #[test]
    fn damped_examples() {
        let one = WeightSchedule::zero(1, 3.0).unwrap();
        let d = PiecewiseSignal::constant(dmatrix![1.0]);
        let tr = simulate_damped(&one, &DelaySchedule::none(1), &d, &InitialCondition::scalar(&[1.0]), 3.0, 0.5).unwrap();
        for (t, x) in tr.run_samples() {
            assert!((x[(0, 0)] - (-t).exp()).abs() < 1e-14);
        }

        // zero damping reproduces the undamped run
        let s = WeightSchedule::constant(pair(1.0), 2.0).unwrap();
        let dl = DelaySchedule::uniform(2, 0.5).unwrap();
        let ic = InitialCondition::scalar(&[0.0, 1.0]);
        let z = PiecewiseSignal::zero(2, 1);
        let a = simulate_damped(&s, &dl, &z, &ic, 2.0, 0.25).unwrap();
        let b = simulate_continuous(&s, &dl, &ic, None, 2.0, 0.25).unwrap();
        assert_eq!(a.states, b.states);

        // cascade: x1' = -x1, x2' = x1 - x2 -> x1 = e^{-t}, x2 = t e^{-t}
        let s = WeightSchedule::constant(dmatrix![0.0, 0.0; 1.0, 0.0], 4.0).unwrap();
        let d = PiecewiseSignal::constant(dmatrix![1.0; 0.0]);
        let tr = simulate_damped(&s, &DelaySchedule::none(2), &d, &InitialCondition::scalar(&[1.0, 0.0]), 4.0, 0.25)
            .unwrap();
        for (t, x) in tr.run_samples() {
            assert!((x[(0, 0)] - (-t).exp()).abs() < 1e-13);
            assert!((x[(1, 0)] - t * (-t).exp()).abs() < 1e-13);
        }
        assert!(simulate_damped(&s, &DelaySchedule::none(2), &PiecewiseSignal::constant(dmatrix![-1.0; 0.0]),
            &InitialCondition::scalar(&[1.0, 0.0]), 1.0, 0.25).is_err());
    }

    #[test]
    fn leader_following_examples() {
        let s = WeightSchedule::constant(dmatrix![0.0, 0.0; 1.0, 0.0], 12.0).unwrap();
        let dl = DelaySchedule::none(2);
        let d = PiecewiseSignal::constant(dmatrix![1.0; 0.0]);
        let ic = InitialCondition::scalar(&[0.0, 0.0]);
        let tr = simulate_leader_following(&s, &dl, &d, &[5.0], &ic, 12.0, 0.5).unwrap();
        for (t, x) in tr.run_samples() {
            // cascade oracle: x1 = 5(1 - e^{-t}), x2 = 5(1 - e^{-t} - t e^{-t})
            assert!((x[(0, 0)] - 5.0 * (1.0 - (-t).exp())).abs() < 1e-12);
            assert!((x[(1, 0)] - 5.0 * (1.0 - (-t).exp() - t * (-t).exp())).abs() < 1e-12);
        }
        assert!((tr.final_state()[(1, 0)] - 5.0).abs() < 1e-3);

        let zero = simulate_leader_following(&s, &dl, &d, &[0.0], &InitialCondition::scalar(&[1.0, 2.0]), 3.0, 0.5).unwrap();
        let damped = simulate_damped(&s, &dl, &d, &InitialCondition::scalar(&[1.0, 2.0]), 3.0, 0.5).unwrap();
        assert_eq!(zero.states, damped.states);

        let eq = simulate_leader_following(&s, &dl, &d, &[5.0], &InitialCondition::scalar(&[5.0, 5.0]), 3.0, 0.5).unwrap();
        assert!(eq.states.iter().all(|x| x == &dmatrix![5.0; 5.0]));

        let gap = leader_shift_gap(&s, &DelaySchedule::uniform(2, 1.0).unwrap(), &d, &[5.0],
            &InitialCondition::scalar(&[0.0, 3.0]), 6.0, 0.5).unwrap();
        assert!(gap < 1e-10);
    }

    #[test]
    fn containment_midpoint() {
        // no network arcs: x' = (0 - x) + (1 - x) per coordinate -> midpoint
        let s = WeightSchedule::zero(1, 20.0).unwrap();
        let leaders = LeaderConfig::new(
            dmatrix![0.0, 0.0; 1.0, 0.0],
            PiecewiseSignal::constant(dmatrix![1.0, 1.0]),
        )
        .unwrap();
        let ic = InitialCondition::holding(0.0, dmatrix![3.0, 0.0]);
        let tr = simulate_containment(&s, &DelaySchedule::none(1), &leaders, &ic, 20.0, 0.5).unwrap();
        for (t, x) in tr.run_samples() {
            assert!((x[(0, 0)] - (0.5 + 2.5 * (-2.0 * t).exp())).abs() < 1e-12);
            assert_eq!(x[(0, 1)], 0.0);
        }
        assert!(LeaderConfig::new(DMatrix::zeros(0, 2), PiecewiseSignal::zero(1, 0)).is_err());
    }

    #[test]
    fn aggregation_decays_to_center() {
        let s = WeightSchedule::zero(2, 10.0).unwrap();
        let ball = ConvexSet::Ball { center: vec![0.0, 0.0], radius: 1.0 };
        let target = TargetSet::new(ball, PiecewiseSignal::zero(2, 2)).unwrap();
        let d = PiecewiseSignal::constant(dmatrix![1.0; 1.0]);
        let ic = InitialCondition::holding(0.0, dmatrix![3.0, 4.0; -2.0, 0.0]);
        let tr = simulate_target_aggregation(&s, &DelaySchedule::none(2), &target, &d, &ic, 10.0, 0.5).unwrap();
        let x = tr.final_state();
        assert!((x[(0, 0)] - 3.0 * (-10.0f64).exp()).abs() < 1e-14);
        let outside = PiecewiseSignal::constant(dmatrix![2.0, 0.0; 0.0, 0.0]);
        let ball = ConvexSet::Ball { center: vec![0.0, 0.0], radius: 1.0 };
        assert!(matches!(TargetSet::new(ball, outside), Err(Error::Invariant(_))));
    }

    #[test]
    fn misaligned_data_falls_back_to_rk4() {
        let s = WeightSchedule::piecewise(vec![0.0, 1.0 / 3.0_f64.sqrt()], vec![pair(1.0), pair(2.0)], 2.0).unwrap();
        let ic = InitialCondition::scalar(&[0.0, 1.0]);
        let tr = simulate_continuous(&s, &DelaySchedule::none(2), &ic, None, 2.0, 0.01).unwrap();
        assert_eq!(tr.scheme, Scheme::RungeKutta4);
        // closed form: diameter exp(-2 int_0^2 (a_12 + a_21)/2 ...) = exp(-2 t1 - 4 (2 - t1))
        let t1 = 1.0 / 3.0_f64.sqrt();
        let expect = (-2.0 * t1 - 4.0 * (2.0 - t1)).exp();
        let x = tr.final_state();
        assert!(((x[(1, 0)] - x[(0, 0)]) - expect).abs() < 1e-4);
    }

    #[test]
    fn pulses_and_norm_integral() {
        let f = PiecewiseSignal::geometric_pulses(2, 0, 3, 1.0, 0.5, 1.0, 0.5).unwrap();
        assert!((f.inf_norm_integral(0.0, 1.0) - 1.0).abs() < 1e-15);
        assert!((f.inf_norm_integral(1.0, 2.0) - 0.5).abs() < 1e-15);
        assert!((f.inf_norm_integral(0.0, 10.0) - 1.75).abs() < 1e-15);
        assert_eq!(f.value_at(-1.0), &DMatrix::zeros(2, 1));
    }
}
