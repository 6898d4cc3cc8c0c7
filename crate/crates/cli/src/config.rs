//! Scenario configuration: JSON schema and the objects built from it.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use consensus_lab::dynamics::{DisturbanceSignal, InitialCondition, LeaderConfig, PiecewiseSignal, Prehistory, TargetSet};
use consensus_lab::metrics::ConvexSet;
use consensus_lab::reduction::{counterexample_schedule, reduce_discrete};
use consensus_lab::schedule::{geometric_on_intervals, make_intermittent, DelaySchedule, WeightSchedule};
use nalgebra::DMatrix;
use serde::Deserialize;

pub const SPEC_VERSION: &str = "1";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub spec_version: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Which statement about the dynamics the scenario exercises.
    #[serde(default)]
    pub covers: String,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub delays: DelaySpec,
    pub initial: InitialSpec,
    #[serde(default)]
    pub disturbance: Option<DisturbanceSpec>,
    #[serde(default)]
    pub leaders: Option<LeaderSpec>,
    #[serde(default)]
    pub target: Option<TargetSpec>,
    #[serde(default)]
    pub coupling: CouplingSpec,
    #[serde(default)]
    pub t_end: Option<f64>,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default)]
    pub analyses: Vec<Analysis>,
    #[serde(default)]
    pub certificate: CertificateSpec,
    #[serde(default)]
    pub expect: Option<Expectation>,
    #[serde(default)]
    pub plots: Option<bool>,
}

fn default_step() -> f64 {
    0.5
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Constant { matrix: Vec<Vec<f64>>, horizon: f64 },
    Intermittent {
        base: Vec<Vec<f64>>,
        #[serde(default)]
        on: Vec<(f64, f64)>,
        #[serde(default)]
        geometric: Option<Geometric>,
        horizon: f64,
    },
    AppendixA { steps: usize },
    ReductionOfDiscrete {
        #[serde(default)]
        matrices: Vec<Vec<Vec<f64>>>,
        #[serde(default)]
        matrix: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        steps: Option<usize>,
    },
    File { path: PathBuf },
}

/// `count` intervals `[2^p, 2^p + width)` for `p = first, first + 1, ...`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometric {
    pub count: usize,
    pub width: f64,
    #[serde(default)]
    pub first: u32,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DelaySpec {
    #[default]
    None,
    Uniform { delay: f64 },
    Constant { matrix: Vec<Vec<f64>>, bound: f64 },
    File { path: PathBuf },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum StateSpec {
    Scalar(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

impl StateSpec {
    fn matrix(&self) -> Result<DMatrix<f64>> {
        match self {
            StateSpec::Scalar(v) => Ok(DMatrix::from_column_slice(v.len(), 1, v)),
            StateSpec::Rows(r) => rows_to_matrix(r),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum PrehistorySpec {
    Named(NamedPrehistory),
    Pieces(Vec<PieceSpec>),
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NamedPrehistory {
    Hold,
    Zero,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PieceSpec {
    pub offset: f64,
    pub state: StateSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    #[serde(default)]
    pub state: Option<StateSpec>,
    #[serde(default)]
    pub prehistory: Option<PrehistorySpec>,
    /// Discrete window `x(0), x(-1), ...`.
    #[serde(default)]
    pub window: Vec<StateSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DisturbanceSpec {
    /// `count` pulses every `period`, masses `mass * ratio^p`.
    Pulses { agent: usize, count: usize, period: f64, width: f64, mass: f64, ratio: f64 },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderSpec {
    pub positions: Vec<Vec<f64>>,
    pub attraction: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub set: ConvexSet,
    /// Selector values cycled on unit intervals.
    pub selectors: Vec<Vec<Vec<f64>>>,
    pub damping: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum CouplingSpec {
    #[default]
    Unit,
    InverseSquare,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Analysis {
    Aqsc,
    Nits,
    Evolution,
    Contraction,
    CauchyCheck,
    ReductionCheck,
    Hull,
    Disturbance,
    MuSegments,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateSpec {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Use the uniform grid of this period instead of the greedy search.
    #[serde(default)]
    pub period: Option<f64>,
    #[serde(default = "default_ratio")]
    pub nits_ratio: f64,
}

impl Default for CertificateSpec {
    fn default() -> Self {
        Self { epsilon: default_epsilon(), period: None, nits_ratio: default_ratio() }
    }
}

fn default_epsilon() -> f64 {
    0.5
}

fn default_ratio() -> f64 {
    2.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub consensus: Option<bool>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub hull_tolerance: Option<f64>,
}

fn default_tolerance() -> f64 {
    1e-6
}

pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    ensure!(rows.iter().all(|row| row.len() == c), "ragged matrix rows");
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl Scenario {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let sc: Scenario = serde_json::from_str(text).with_context(|| format!("{origin}: malformed scenario"))?;
        ensure!(
            sc.spec_version == SPEC_VERSION,
            "{origin}: spec_version {} is not supported (expected {SPEC_VERSION})",
            sc.spec_version
        );
        ensure!(sc.step > 0.0, "{origin}: step must be positive");
        Ok(sc)
    }
}

/// A scenario with every object built, file references resolved relative to `base`.
pub struct Built {
    pub schedule: WeightSchedule,
    pub delays: DelaySchedule,
    /// Discrete source when the continuous schedule is a reduction.
    pub discrete: Option<(WeightSchedule, DelaySchedule)>,
    pub initial: InitialCondition,
    pub disturbance: Option<DisturbanceSignal>,
    pub leaders: Option<LeaderConfig>,
    pub target: Option<(TargetSet, PiecewiseSignal)>,
    pub t_end: f64,
}

fn read(base: &Path, path: &Path) -> Result<String> {
    let full = base.join(path);
    std::fs::read_to_string(&full).with_context(|| format!("cannot read {}", full.display()))
}

fn delays_for(spec: &DelaySpec, n: usize, base: &Path) -> Result<DelaySchedule> {
    Ok(match spec {
        DelaySpec::None => DelaySchedule::none(n),
        DelaySpec::Uniform { delay } => DelaySchedule::uniform(n, *delay)?,
        DelaySpec::Constant { matrix, bound } => DelaySchedule::constant(rows_to_matrix(matrix)?, *bound)?,
        DelaySpec::File { path } => DelaySchedule::from_json(&read(base, path)?)?,
    })
}

impl Scenario {
    pub fn build(&self, base: &Path) -> Result<Built> {
        let mut discrete = None;
        let schedule = match &self.schedule {
            ScheduleSpec::Constant { matrix, horizon } => WeightSchedule::constant(rows_to_matrix(matrix)?, *horizon)?,
            ScheduleSpec::Intermittent { base: m, on, geometric, horizon } => {
                let mut on = on.clone();
                if let Some(g) = geometric {
                    on.extend(
                        geometric_on_intervals(g.count + g.first as usize, g.width)
                            .into_iter()
                            .skip(g.first as usize),
                    );
                }
                make_intermittent(&rows_to_matrix(m)?, &on, *horizon)?
            }
            ScheduleSpec::AppendixA { steps } => {
                let d = counterexample_schedule(*steps)?;
                let dl = delays_for(&self.delays, 2, base)?;
                discrete = Some((d, dl));
                WeightSchedule::zero(2, 1.0)?
            }
            ScheduleSpec::ReductionOfDiscrete { matrices, matrix, steps } => {
                let mut mats: Vec<DMatrix<f64>> = matrices.iter().map(|m| rows_to_matrix(m)).collect::<Result<_>>()?;
                if let Some(m) = matrix {
                    let m = rows_to_matrix(m)?;
                    let count = steps.context("a repeated matrix needs `steps`")?;
                    mats.extend(std::iter::repeat_n(m, count));
                }
                ensure!(!mats.is_empty(), "reduction-of-discrete needs matrices");
                let d = WeightSchedule::discrete(mats)?;
                let dl = delays_for(&self.delays, d.agent_count(), base)?;
                discrete = Some((d, dl));
                WeightSchedule::zero(1, 1.0)?
            }
            ScheduleSpec::File { path } => WeightSchedule::from_json(&read(base, path)?)?,
        };
        let (schedule, delays) = match &discrete {
            Some((d, dl)) => {
                let red = reduce_discrete(d, dl)?;
                (red.weights, red.delays)
            }
            None => {
                let dl = delays_for(&self.delays, schedule.agent_count(), base)?;
                (schedule, dl)
            }
        };
        let n = schedule.agent_count();
        let t_end = self.t_end.unwrap_or(schedule.horizon());
        ensure!(t_end <= schedule.horizon(), "t_end {t_end} exceeds the schedule horizon {}", schedule.horizon());

        let initial = self.initial_condition()?;
        ensure!(initial.agent_count() == n, "initial state has {} agents, schedule has {n}", initial.agent_count());
        let disturbance = match &self.disturbance {
            Some(DisturbanceSpec::Pulses { agent, count, period, width, mass, ratio }) => {
                ensure!(initial.dims() == 1, "pulse disturbances act on scalar agents");
                Some(DisturbanceSignal::geometric_pulses(n, *agent, *count, *period, *width, *mass, *ratio)?)
            }
            None => None,
        };
        let leaders = match &self.leaders {
            Some(l) => Some(LeaderConfig::new(
                rows_to_matrix(&l.positions)?,
                PiecewiseSignal::constant(rows_to_matrix(&l.attraction)?),
            )?),
            None => None,
        };
        let target = match &self.target {
            Some(t) => {
                ensure!(!t.selectors.is_empty(), "target needs at least one selector");
                let count = t_end.ceil().max(1.0) as usize;
                let values = (0..count)
                    .map(|k| rows_to_matrix(&t.selectors[k % t.selectors.len()]))
                    .collect::<Result<Vec<_>>>()?;
                let selector = PiecewiseSignal::new((0..count).map(|k| k as f64).collect(), values)?;
                let damping = PiecewiseSignal::constant(DMatrix::from_column_slice(t.damping.len(), 1, &t.damping));
                Some((TargetSet::new(t.set.clone(), selector)?, damping))
            }
            None => None,
        };
        if leaders.is_some() && target.is_some() {
            bail!("a scenario has either leaders or a target, not both");
        }
        Ok(Built { schedule, delays, discrete, initial, disturbance, leaders, target, t_end })
    }

    fn initial_condition(&self) -> Result<InitialCondition> {
        let spec = &self.initial;
        if !spec.window.is_empty() {
            ensure!(spec.state.is_none(), "give either `state` or `window`");
            let window = spec.window.iter().map(StateSpec::matrix).collect::<Result<Vec<_>>>()?;
            return Ok(InitialCondition::from_window(0.0, window)?);
        }
        let state = spec.state.as_ref().context("initial condition needs `state` or `window`")?.matrix()?;
        Ok(match &spec.prehistory {
            None | Some(PrehistorySpec::Named(NamedPrehistory::Hold)) => InitialCondition::holding(0.0, state),
            Some(PrehistorySpec::Named(NamedPrehistory::Zero)) => InitialCondition::zero_prehistory(0.0, state),
            Some(PrehistorySpec::Pieces(p)) => {
                let pieces = p.iter().map(|pc| Ok((pc.offset, pc.state.matrix()?))).collect::<Result<Vec<_>>>()?;
                InitialCondition::new(0.0, state, Prehistory::Pieces(pieces))
            }
        })
    }
}
