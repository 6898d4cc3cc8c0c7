//! Time-varying weight matrices, delay functions and the graphs derived from them.
//!
//! Continuous schedules are piecewise constant on `[b_s, b_{s+1})`, evaluated
//! right-continuously. Discrete schedules hold one row-stochastic matrix per
//! integer time `k = 0..K` and have horizon `K`.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use petgraph::algo::condensation;
use petgraph::graph::DiGraph;
use petgraph::Direction;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-sum tolerance for discrete (stochastic) schedules.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    #[serde(rename = "continuous-piecewise-constant")]
    Continuous,
    #[serde(rename = "discrete-sequence")]
    Discrete,
}

/// The weight function `A(t)` of the averaging dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSchedule {
    n: usize,
    kind: ScheduleKind,
    breakpoints: Vec<f64>,
    segments: Vec<DMatrix<f64>>,
    horizon: f64,
}

fn check_square(m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.nrows() != n {
        return Err(Error::Dimension { expected: n, found: m.nrows() });
    }
    if m.ncols() != n {
        return Err(Error::Dimension { expected: n, found: m.ncols() });
    }
    Ok(())
}

impl WeightSchedule {
    /// Continuous piecewise-constant schedule. Diagonal entries are set to zero.
    pub fn piecewise(
        breakpoints: Vec<f64>,
        segments: Vec<DMatrix<f64>>,
        horizon: f64,
    ) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::ScheduleInvariant("schedule has no segments".into()));
        }
        if breakpoints.len() != segments.len() {
            return Err(Error::ScheduleInvariant(format!(
                "{} breakpoints for {} segments",
                breakpoints.len(),
                segments.len()
            )));
        }
        if breakpoints[0] != 0.0 {
            return Err(Error::ScheduleInvariant("first breakpoint must be 0".into()));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::ScheduleInvariant("breakpoints not strictly increasing".into()));
        }
        let last = *breakpoints.last().unwrap();
        if !horizon.is_finite() || horizon < last {
            return Err(Error::ScheduleInvariant(format!(
                "horizon {horizon} precedes last breakpoint {last}"
            )));
        }
        let n = segments[0].nrows();
        if n == 0 {
            return Err(Error::ScheduleInvariant("empty agent set".into()));
        }
        let mut segments = segments;
        for (s, m) in segments.iter_mut().enumerate() {
            check_square(m, n)?;
            if let Some(v) = m.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::ScheduleInvariant(format!(
                    "segment {s} has entry {v}; weights must be finite and nonnegative"
                )));
            }
            m.fill_diagonal(0.0);
        }
        Ok(Self { n, kind: ScheduleKind::Continuous, breakpoints, segments, horizon })
    }

    pub fn constant(matrix: DMatrix<f64>, horizon: f64) -> Result<Self> {
        Self::piecewise(vec![0.0], vec![matrix], horizon)
    }

    pub fn zero(n: usize, horizon: f64) -> Result<Self> {
        Self::constant(DMatrix::zeros(n, n), horizon)
    }

    /// Discrete sequence `B(0), ..., B(K-1)` of row-stochastic matrices.
    pub fn discrete(matrices: Vec<DMatrix<f64>>) -> Result<Self> {
        if matrices.is_empty() {
            return Err(Error::ScheduleInvariant("schedule has no segments".into()));
        }
        let n = matrices[0].nrows();
        if n == 0 {
            return Err(Error::ScheduleInvariant("empty agent set".into()));
        }
        for (k, m) in matrices.iter().enumerate() {
            check_square(m, n)?;
            if let Some(v) = m.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::ScheduleInvariant(format!("B({k}) has entry {v}")));
            }
            for i in 0..n {
                let s: f64 = m.row(i).sum();
                if (s - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(Error::ScheduleInvariant(format!(
                        "row {i} of B({k}) sums to {s}, not 1"
                    )));
                }
            }
        }
        let horizon = matrices.len() as f64;
        let breakpoints = (0..matrices.len()).map(|k| k as f64).collect();
        Ok(Self { n, kind: ScheduleKind::Discrete, breakpoints, segments: matrices, horizon })
    }

    pub fn agent_count(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn is_discrete(&self) -> bool {
        self.kind == ScheduleKind::Discrete
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn segments(&self) -> &[DMatrix<f64>] {
        &self.segments
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// `[start, end)` of segment `s`; the last segment ends at the horizon.
    pub fn segment_span(&self, s: usize) -> (f64, f64) {
        let start = self.breakpoints[s];
        let end = self.breakpoints.get(s + 1).copied().unwrap_or(self.horizon);
        (start, end)
    }

    /// Index of the segment active at `t` (right-continuous).
    pub fn segment_index(&self, t: f64) -> Result<usize> {
        let out = match self.kind {
            ScheduleKind::Continuous => !(0.0..=self.horizon).contains(&t),
            ScheduleKind::Discrete => !(t >= 0.0 && t < self.horizon),
        };
        if out || t.is_nan() {
            return Err(Error::OutOfRange { t, horizon: self.horizon });
        }
        Ok(self.breakpoints.partition_point(|&b| b <= t) - 1)
    }

    pub fn evaluate(&self, t: f64) -> Result<&DMatrix<f64>> {
        Ok(&self.segments[self.segment_index(t)?])
    }

    /// `A_{t1}^{t2}`: the exact integral of a continuous schedule, or the sum of
    /// `B(k)` over integer `t1 <= k < t2` for a discrete one.
    pub fn integrate_weights(&self, t1: f64, t2: f64) -> Result<DMatrix<f64>> {
        if t2 < t1 {
            return Err(Error::InvalidArgument(format!("reversed interval [{t1}, {t2}]")));
        }
        if t1 < 0.0 || t2 > self.horizon {
            let t = if t1 < 0.0 { t1 } else { t2 };
            return Err(Error::OutOfRange { t, horizon: self.horizon });
        }
        let mut acc = DMatrix::zeros(self.n, self.n);
        match self.kind {
            ScheduleKind::Continuous => {
                for (s, m) in self.segments.iter().enumerate() {
                    let (a, b) = self.segment_span(s);
                    let len = b.min(t2) - a.max(t1);
                    if len > 0.0 {
                        acc += m * len;
                    }
                }
            }
            ScheduleKind::Discrete => {
                if t1.fract() != 0.0 || t2.fract() != 0.0 {
                    return Err(Error::InvalidArgument(
                        "discrete schedules integrate over integer times".into(),
                    ));
                }
                for k in (t1 as usize)..(t2 as usize) {
                    acc += &self.segments[k];
                }
            }
        }
        Ok(acc)
    }

    /// Exact integral of the exit rate `sum_j a_ij` over `[t1, t2]`.
    pub fn integrate_exit_rate(&self, agent: usize, t1: f64, t2: f64) -> Result<f64> {
        let m = self.integrate_weights(t1, t2)?;
        Ok((0..self.n).filter(|&j| j != agent).map(|j| m[(agent, j)]).sum())
    }

    /// Drops `[0, offset)` and re-bases time so that `offset` becomes 0.
    pub fn shifted(&self, offset: f64) -> Result<Self> {
        if self.is_discrete() {
            if offset.fract() != 0.0 || offset < 0.0 || offset >= self.horizon {
                return Err(Error::InvalidArgument(format!("bad discrete shift {offset}")));
            }
            return Self::discrete(self.segments[offset as usize..].to_vec());
        }
        let first = self.segment_index(offset)?;
        let mut bps = vec![0.0];
        bps.extend(self.breakpoints[first + 1..].iter().map(|b| b - offset));
        Self::piecewise(bps, self.segments[first..].to_vec(), self.horizon - offset)
    }

    /// Drops everything from `horizon` on.
    pub fn truncated(&self, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon <= self.horizon) {
            return Err(Error::InvalidArgument(format!("cannot cut horizon {} to {horizon}", self.horizon)));
        }
        if self.is_discrete() {
            if horizon.fract() != 0.0 {
                return Err(Error::InvalidArgument(format!("bad discrete horizon {horizon}")));
            }
            return Self::discrete(self.segments[..horizon as usize].to_vec());
        }
        let keep = self.breakpoints.partition_point(|&b| b < horizon);
        Self::piecewise(self.breakpoints[..keep].to_vec(), self.segments[..keep].to_vec(), horizon)
    }

    /// Same data on a longer horizon; the last segment is extended.
    pub fn with_horizon(&self, horizon: f64) -> Result<Self> {
        if horizon < self.horizon || self.is_discrete() {
            return Err(Error::InvalidArgument(format!(
                "cannot extend horizon {} to {horizon}",
                self.horizon
            )));
        }
        let mut out = self.clone();
        out.horizon = horizon;
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ScheduleDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ScheduleDoc = serde_json::from_str(text)?;
        doc.try_into()
    }
}

/// Serialized layout of a [`WeightSchedule`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleDoc {
    pub n: usize,
    pub kind: ScheduleKind,
    #[serde(default)]
    pub breakpoints: Vec<f64>,
    pub segments: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub horizon: Option<f64>,
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], n: usize) -> Result<DMatrix<f64>> {
    if rows.len() != n {
        return Err(Error::Dimension { expected: n, found: rows.len() });
    }
    for r in rows {
        if r.len() != n {
            return Err(Error::Dimension { expected: n, found: r.len() });
        }
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl From<&WeightSchedule> for ScheduleDoc {
    fn from(s: &WeightSchedule) -> Self {
        ScheduleDoc {
            n: s.n,
            kind: s.kind,
            breakpoints: s.breakpoints.clone(),
            segments: s.segments.iter().map(matrix_to_rows).collect(),
            horizon: Some(s.horizon),
        }
    }
}

impl TryFrom<ScheduleDoc> for WeightSchedule {
    type Error = Error;

    fn try_from(doc: ScheduleDoc) -> Result<Self> {
        let mats = doc
            .segments
            .iter()
            .map(|m| matrix_from_rows(m, doc.n))
            .collect::<Result<Vec<_>>>()?;
        match doc.kind {
            ScheduleKind::Discrete => WeightSchedule::discrete(mats),
            ScheduleKind::Continuous => {
                let bps = if doc.breakpoints.is_empty() && mats.len() == 1 {
                    vec![0.0]
                } else {
                    doc.breakpoints
                };
                let horizon = doc
                    .horizon
                    .ok_or_else(|| Error::Serde("continuous schedule needs a horizon".into()))?;
                WeightSchedule::piecewise(bps, mats, horizon)
            }
        }
    }
}

/// Builds the intermittent schedule `a_ij(t) = alpha(t) * base_ij` where
/// `alpha` is the indicator of the given on-intervals.
pub fn make_intermittent(
    base: &DMatrix<f64>,
    on_intervals: &[(f64, f64)],
    horizon: f64,
) -> Result<WeightSchedule> {
    let n = base.nrows();
    let zero = DMatrix::zeros(n, n);
    let mut bps = vec![0.0];
    let mut segs = vec![zero.clone()];
    let mut cursor = 0.0;
    for &(a, b) in on_intervals {
        if !(b > a) || a < cursor {
            return Err(Error::InvalidArgument(format!(
                "on-interval [{a}, {b}) empty, overlapping or out of order"
            )));
        }
        if a == 0.0 {
            segs[0] = base.clone();
        } else if a == cursor && cursor > 0.0 {
            // adjacent interval: the previous "off" segment has zero length
            *segs.last_mut().unwrap() = base.clone();
        } else {
            bps.push(a);
            segs.push(base.clone());
        }
        bps.push(b);
        segs.push(zero.clone());
        cursor = b;
    }
    if horizon < cursor {
        return Err(Error::InvalidArgument(format!(
            "horizon {horizon} ends before the last on-interval"
        )));
    }
    if horizon == cursor && bps.len() > 1 {
        bps.pop();
        segs.pop();
    }
    WeightSchedule::piecewise(bps, segs, horizon)
}

/// On-intervals `[2^p, 2^p + width)` for `p = 0..count`.
pub fn geometric_on_intervals(count: usize, width: f64) -> Vec<(f64, f64)> {
    (0..count)
        .map(|p| {
            let a = 2f64.powi(p as i32);
            (a, a + width)
        })
        .collect()
}

/// The graph of arcs `(j, i)` with weight `a_ij >= epsilon`.
///
/// Arc `(j, i)` means agent `j` influences agent `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonGraph {
    pub n: usize,
    pub arcs: BTreeSet<(usize, usize)>,
    pub epsilon: f64,
}

impl SkeletonGraph {
    pub fn new(n: usize, arcs: impl IntoIterator<Item = (usize, usize)>, epsilon: f64) -> Self {
        Self { n, arcs: arcs.into_iter().collect(), epsilon }
    }

    fn digraph(&self) -> DiGraph<usize, ()> {
        let mut g = DiGraph::new();
        let nodes: Vec<_> = (0..self.n).map(|v| g.add_node(v)).collect();
        for &(j, i) in &self.arcs {
            g.add_edge(nodes[j], nodes[i], ());
        }
        g
    }

    /// Returns a root reaching every node, if one exists.
    pub fn is_quasi_strongly_connected(&self) -> Option<usize> {
        if self.n == 0 {
            return None;
        }
        // QSC iff the condensation has a single source component.
        let cond = condensation(self.digraph(), true);
        let mut sources = cond
            .node_indices()
            .filter(|&c| cond.neighbors_directed(c, Direction::Incoming).next().is_none());
        let first = sources.next()?;
        if sources.next().is_some() {
            return None;
        }
        cond[first].iter().copied().min()
    }

    pub fn is_strongly_connected(&self) -> bool {
        self.n > 0 && condensation(self.digraph(), true).node_count() == 1
    }

    /// Undirected connected components (used for persistent graphs of
    /// type-symmetric schedules).
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut label: Vec<usize> = (0..self.n).collect();
        fn find(l: &mut [usize], v: usize) -> usize {
            let mut r = v;
            while l[r] != r {
                r = l[r];
            }
            l[v] = r;
            r
        }
        for &(j, i) in &self.arcs {
            let (a, b) = (find(&mut label, j), find(&mut label, i));
            if a != b {
                label[a.max(b)] = a.min(b);
            }
        }
        let mut out: Vec<Vec<usize>> = Vec::new();
        let mut roots: Vec<usize> = Vec::new();
        for v in 0..self.n {
            let r = find(&mut label, v);
            match roots.iter().position(|&x| x == r) {
                Some(p) => out[p].push(v),
                None => {
                    roots.push(r);
                    out.push(vec![v]);
                }
            }
        }
        out
    }
}

pub fn epsilon_skeleton(matrix: &DMatrix<f64>, epsilon: f64) -> SkeletonGraph {
    let n = matrix.nrows();
    let arcs = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && matrix[(i, j)] >= epsilon)
        .map(|(i, j)| (j, i));
    SkeletonGraph::new(n, arcs, epsilon)
}

/// Finite-horizon estimate of the persistent graph.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistentEstimate {
    pub graph: SkeletonGraph,
    /// Total weight `int_0^H a_ij` per entry; callers judge the margin.
    pub totals: DMatrix<f64>,
}

pub fn persistent_graph_estimate(
    schedule: &WeightSchedule,
    growth_threshold: f64,
) -> Result<PersistentEstimate> {
    let totals = schedule.integrate_weights(0.0, schedule.horizon())?;
    let graph = epsilon_skeleton(&totals, growth_threshold);
    Ok(PersistentEstimate { graph, totals })
}

#[derive(Debug, Clone, PartialEq)]
pub enum DelayProfile {
    /// `h_ij` constant in time.
    Constant(DMatrix<f64>),
    /// `h_ij` constant on `[b_s, b_{s+1})`.
    PiecewiseConstant { breakpoints: Vec<f64>, segments: Vec<DMatrix<f64>> },
    /// `h_ij(t) = t - k + offsets[k]_ij` on `[k, k+1)`.
    Sawtooth { offsets: Vec<DMatrix<f64>> },
}

/// Per-link delays `h_ij(t)` in `[0, bound]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DelaySchedule {
    n: usize,
    bound: f64,
    profile: DelayProfile,
}

/// How a link reads its neighbour over one grid step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Lookup {
    /// `h = 0`: the current neighbour state.
    Current,
    /// The neighbour state at a fixed past time.
    HeldAt(f64),
}

impl DelaySchedule {
    pub fn none(n: usize) -> Self {
        Self { n, bound: 0.0, profile: DelayProfile::Constant(DMatrix::zeros(n, n)) }
    }

    pub fn constant(delays: DMatrix<f64>, bound: f64) -> Result<Self> {
        let n = delays.nrows();
        check_square(&delays, n)?;
        let s = Self { n, bound, profile: DelayProfile::Constant(delays) };
        s.validate()?;
        Ok(s)
    }

    pub fn uniform(n: usize, delay: f64) -> Result<Self> {
        let mut m = DMatrix::from_element(n, n, delay);
        m.fill_diagonal(0.0);
        Self::constant(m, delay)
    }

    pub fn piecewise(breakpoints: Vec<f64>, segments: Vec<DMatrix<f64>>, bound: f64) -> Result<Self> {
        if segments.is_empty() || breakpoints.len() != segments.len() || breakpoints[0] != 0.0 {
            return Err(Error::ScheduleInvariant(
                "delay breakpoints must start at 0 and match segments".into(),
            ));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::ScheduleInvariant("delay breakpoints not increasing".into()));
        }
        let n = segments[0].nrows();
        for m in &segments {
            check_square(m, n)?;
        }
        let s = Self { n, bound, profile: DelayProfile::PiecewiseConstant { breakpoints, segments } };
        s.validate()?;
        Ok(s)
    }

    pub fn sawtooth(offsets: Vec<DMatrix<f64>>, bound: f64) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::ScheduleInvariant("sawtooth delays need offsets".into()));
        }
        let n = offsets[0].nrows();
        for m in &offsets {
            check_square(m, n)?;
        }
        let s = Self { n, bound, profile: DelayProfile::Sawtooth { offsets } };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if !(self.bound >= 0.0 && self.bound.is_finite()) {
            return Err(Error::ScheduleInvariant(format!("delay bound {}", self.bound)));
        }
        let check = |m: &DMatrix<f64>, extra: f64, integer: bool| -> Result<()> {
            for i in 0..self.n {
                for j in 0..self.n {
                    if i == j {
                        continue;
                    }
                    let h = m[(i, j)];
                    if !(h >= 0.0 && h + extra <= self.bound) {
                        return Err(Error::ScheduleInvariant(format!(
                            "delay h_{i}{j} = {h} (+{extra}) outside [0, {}]",
                            self.bound
                        )));
                    }
                    if integer && h.fract() != 0.0 {
                        return Err(Error::ScheduleInvariant(format!(
                            "sawtooth offset {h} is not an integer"
                        )));
                    }
                }
            }
            Ok(())
        };
        match &self.profile {
            DelayProfile::Constant(m) => check(m, 0.0, false),
            DelayProfile::PiecewiseConstant { segments, .. } => {
                segments.iter().try_for_each(|m| check(m, 0.0, false))
            }
            // h(t) approaches offset + 1 at the right end of each unit interval
            DelayProfile::Sawtooth { offsets } => offsets.iter().try_for_each(|m| check(m, 1.0, true)),
        }
    }

    pub fn agent_count(&self) -> usize {
        self.n
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn profile(&self) -> &DelayProfile {
        &self.profile
    }

    pub fn is_sawtooth(&self) -> bool {
        matches!(self.profile, DelayProfile::Sawtooth { .. })
    }

    fn matrix_at(&self, t: f64) -> Result<&DMatrix<f64>> {
        match &self.profile {
            DelayProfile::Constant(m) => Ok(m),
            DelayProfile::PiecewiseConstant { breakpoints, segments } => {
                if t < 0.0 {
                    return Err(Error::OutOfRange { t, horizon: f64::INFINITY });
                }
                Ok(&segments[breakpoints.partition_point(|&b| b <= t) - 1])
            }
            DelayProfile::Sawtooth { offsets } => {
                let k = t.floor();
                if k < 0.0 || k as usize >= offsets.len() {
                    return Err(Error::OutOfRange { t, horizon: offsets.len() as f64 });
                }
                Ok(&offsets[k as usize])
            }
        }
    }

    /// `h_ij(t)`.
    pub fn delay(&self, i: usize, j: usize, t: f64) -> Result<f64> {
        let m = self.matrix_at(t)?;
        Ok(match self.profile {
            DelayProfile::Sawtooth { .. } => t - t.floor() + m[(i, j)],
            _ => m[(i, j)],
        })
    }

    /// Time breakpoints at which some delay jumps.
    pub fn breakpoints(&self) -> Vec<f64> {
        match &self.profile {
            DelayProfile::Constant(_) => vec![],
            DelayProfile::PiecewiseConstant { breakpoints, .. } => breakpoints.clone(),
            DelayProfile::Sawtooth { offsets } => (0..=offsets.len()).map(|k| k as f64).collect(),
        }
    }

    /// How far before the current time a delayed read can land. Sawtooth
    /// reads land on `k - offset`, so the reach is the largest offset.
    pub fn reach(&self) -> f64 {
        match &self.profile {
            DelayProfile::Sawtooth { offsets } => offsets.iter().flat_map(|m| m.iter().copied()).fold(0.0, f64::max),
            _ => self.bound,
        }
    }

    /// Distinct positive delay values of constant/piecewise profiles.
    pub fn delay_values(&self) -> Vec<f64> {
        let mats: Vec<&DMatrix<f64>> = match &self.profile {
            DelayProfile::Constant(m) => vec![m],
            DelayProfile::PiecewiseConstant { segments, .. } => segments.iter().collect(),
            DelayProfile::Sawtooth { .. } => vec![],
        };
        let mut vals: Vec<f64> = mats
            .iter()
            .flat_map(|m| {
                (0..self.n).flat_map(move |i| (0..self.n).filter(move |&j| j != i).map(move |j| m[(i, j)]))
            })
            .filter(|&h| h > 0.0)
            .collect();
        vals.sort_by(|a, b| a.total_cmp(b));
        vals.dedup();
        vals
    }

    /// True when every delay takes integer values at integer times.
    pub fn is_integer_valued(&self) -> bool {
        let int = |m: &DMatrix<f64>| m.iter().all(|h| h.fract() == 0.0);
        match &self.profile {
            DelayProfile::Constant(m) => int(m),
            DelayProfile::PiecewiseConstant { breakpoints, segments } => {
                breakpoints.iter().all(|b| b.fract() == 0.0) && segments.iter().all(int)
            }
            DelayProfile::Sawtooth { .. } => false,
        }
    }

    /// Neighbour read used by the grid-held stepper over `[t0, t1)`.
    pub(crate) fn lookup(&self, i: usize, j: usize, t0: f64, t1: f64) -> Result<Lookup> {
        let mid = 0.5 * (t0 + t1);
        let m = self.matrix_at(mid)?;
        Ok(match self.profile {
            DelayProfile::Sawtooth { .. } => Lookup::HeldAt(mid.floor() - m[(i, j)]),
            _ if m[(i, j)] == 0.0 => Lookup::Current,
            _ => Lookup::HeldAt(t1 - m[(i, j)]),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&DelayDoc::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DelayDoc = serde_json::from_str(text)?;
        doc.try_into()
    }
}

/// Serialized layout of a [`DelaySchedule`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DelayDoc {
    pub n: usize,
    pub kind: String,
    pub bound: f64,
    #[serde(default)]
    pub breakpoints: Vec<f64>,
    #[serde(default)]
    pub segments: Vec<Vec<Vec<f64>>>,
}

impl From<&DelaySchedule> for DelayDoc {
    fn from(d: &DelaySchedule) -> Self {
        let (kind, breakpoints, segments) = match &d.profile {
            DelayProfile::Constant(m) => ("constant", vec![], vec![matrix_to_rows(m)]),
            DelayProfile::PiecewiseConstant { breakpoints, segments } => (
                "piecewise-constant",
                breakpoints.clone(),
                segments.iter().map(matrix_to_rows).collect(),
            ),
            DelayProfile::Sawtooth { offsets } => {
                ("sawtooth", vec![], offsets.iter().map(matrix_to_rows).collect())
            }
        };
        DelayDoc { n: d.n, kind: kind.into(), bound: d.bound, breakpoints, segments }
    }
}

impl TryFrom<DelayDoc> for DelaySchedule {
    type Error = Error;

    fn try_from(doc: DelayDoc) -> Result<Self> {
        let mats = doc
            .segments
            .iter()
            .map(|m| matrix_from_rows(m, doc.n))
            .collect::<Result<Vec<_>>>()?;
        match doc.kind.as_str() {
            "none" => Ok(DelaySchedule::none(doc.n)),
            "constant" => {
                let m = mats.into_iter().next().unwrap_or_else(|| DMatrix::zeros(doc.n, doc.n));
                DelaySchedule::constant(m, doc.bound)
            }
            "piecewise-constant" => DelaySchedule::piecewise(doc.breakpoints, mats, doc.bound),
            "sawtooth" => DelaySchedule::sawtooth(mats, doc.bound),
            other => Err(Error::Serde(format!("unknown delay kind {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn swap() -> DMatrix<f64> {
        dmatrix![0.0, 1.0; 1.0, 0.0]
    }

    #[test]
    fn evaluate_constant_and_right_continuous() {
        let s = WeightSchedule::constant(swap(), 2.0).unwrap();
        assert_eq!(s.evaluate(0.5).unwrap(), &swap());
        let s = WeightSchedule::piecewise(vec![0.0, 1.0], vec![swap(), swap() * 2.0], 2.0).unwrap();
        assert_eq!(s.evaluate(1.0).unwrap(), &(swap() * 2.0));
        assert_eq!(s.evaluate(0.999).unwrap(), &swap());
        assert!(matches!(s.evaluate(2.5), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn discrete_identity_and_stochastic_rows() {
        let s = WeightSchedule::discrete(vec![DMatrix::identity(2, 2)]).unwrap();
        assert_eq!(s.evaluate(0.0).unwrap(), &DMatrix::identity(2, 2));
        let bad = WeightSchedule::discrete(vec![dmatrix![0.5, 0.4; 0.5, 0.5]]);
        assert!(matches!(bad, Err(Error::ScheduleInvariant(_))));
    }

    #[test]
    fn continuous_diagonal_is_zeroed() {
        let s = WeightSchedule::constant(dmatrix![3.0, 1.0; 1.0, 5.0], 1.0).unwrap();
        assert_eq!(s.evaluate(0.0).unwrap(), &swap());
    }

    #[test]
    fn negative_weight_rejected() {
        assert!(WeightSchedule::constant(dmatrix![0.0, -1.0; 1.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn integrate_constant_and_empty() {
        let s = WeightSchedule::constant(swap(), 2.0).unwrap();
        assert_eq!(s.integrate_weights(0.0, 2.0).unwrap(), swap() * 2.0);
        assert_eq!(s.integrate_weights(1.3, 1.3).unwrap(), DMatrix::zeros(2, 2));
        assert!(matches!(s.integrate_weights(1.0, 0.5), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn integrate_intermittent() {
        let s = make_intermittent(&swap(), &[(0.0, 1.0), (4.0, 5.0)], 5.0).unwrap();
        assert_eq!(s.integrate_weights(0.0, 5.0).unwrap(), swap() * 2.0);
        assert_eq!(s.integrate_weights(1.0, 4.0).unwrap(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn skeleton_examples() {
        let g = epsilon_skeleton(&dmatrix![0.0, 2.0; 0.1, 0.0], 1.0);
        // a_12 = 2: agent 2 influences agent 1
        assert_eq!(g.arcs, BTreeSet::from([(1, 0)]));
        assert!(epsilon_skeleton(&dmatrix![0.0, 2.0; 0.1, 0.0], 3.0).arcs.is_empty());
        assert_eq!(epsilon_skeleton(&swap(), 1.0).arcs.len(), 2);
    }

    #[test]
    fn connectivity_examples() {
        let chain = SkeletonGraph::new(3, [(0, 1), (1, 2)], 1.0);
        assert_eq!(chain.is_quasi_strongly_connected(), Some(0));
        assert!(!chain.is_strongly_connected());
        assert_eq!(SkeletonGraph::new(2, [], 1.0).is_quasi_strongly_connected(), None);
        let complete = SkeletonGraph::new(3, [(0, 1), (1, 0), (0, 2), (2, 0), (1, 2), (2, 1)], 1.0);
        assert!(complete.is_quasi_strongly_connected().is_some());
        let cycle = SkeletonGraph::new(3, [(0, 1), (1, 2), (2, 0)], 1.0);
        assert!(cycle.is_strongly_connected());
        assert!(SkeletonGraph::new(1, [], 1.0).is_strongly_connected());
    }

    #[test]
    fn persistent_examples() {
        let s = WeightSchedule::constant(dmatrix![0.0, 1.0; 0.0, 0.0], 10.0).unwrap();
        let est = persistent_graph_estimate(&s, 5.0).unwrap();
        assert_eq!(est.graph.arcs, BTreeSet::from([(1, 0)]));
        assert_eq!(est.totals[(0, 1)], 10.0);

        // a_12(t) = 2^{-t} held constant on unit intervals: total sum_k 2^{-k} < 2
        let segs: Vec<_> = (0..30).map(|k| dmatrix![0.0, 0.5f64.powi(k); 0.0, 0.0]).collect();
        let bps = (0..30).map(|k| k as f64).collect();
        let s = WeightSchedule::piecewise(bps, segs, 30.0).unwrap();
        let est = persistent_graph_estimate(&s, 5.0).unwrap();
        assert!(est.graph.arcs.is_empty());
        assert!(est.totals[(0, 1)] < 2.0);

        let z = WeightSchedule::zero(3, 4.0).unwrap();
        assert!(persistent_graph_estimate(&z, 0.1).unwrap().graph.arcs.is_empty());
    }

    #[test]
    fn intermittent_examples() {
        let s = make_intermittent(&swap(), &[(0.0, 1.0)], 1.0).unwrap();
        assert_eq!(s.segments().len(), 1);
        let z = make_intermittent(&swap(), &[], 3.0).unwrap();
        assert_eq!(z.integrate_weights(0.0, 3.0).unwrap(), DMatrix::zeros(2, 2));
        let g = make_intermittent(&swap(), &geometric_on_intervals(5, 1.0), 17.0).unwrap();
        let active = g.segments().iter().filter(|m| m.sum() > 0.0).count();
        assert_eq!(active, 5);
        assert!(make_intermittent(&swap(), &[(0.0, 2.0), (1.0, 3.0)], 3.0).is_err());
    }

    #[test]
    fn json_round_trip() {
        let s = make_intermittent(&swap(), &[(1.0, 2.0)], 4.0).unwrap();
        assert_eq!(WeightSchedule::from_json(&s.to_json().unwrap()).unwrap(), s);
        let d = DelaySchedule::sawtooth(vec![dmatrix![0.0, 1.0; 0.0, 0.0]], 2.0).unwrap();
        assert_eq!(DelaySchedule::from_json(&d.to_json().unwrap()).unwrap(), d);
    }

    #[test]
    fn delay_bounds_enforced() {
        assert!(DelaySchedule::constant(dmatrix![0.0, 3.0; 0.0, 0.0], 2.0).is_err());
        // sawtooth reaches offset + 1
        assert!(DelaySchedule::sawtooth(vec![dmatrix![0.0, 1.0; 0.0, 0.0]], 1.5).is_err());
        let d = DelaySchedule::sawtooth(vec![dmatrix![0.0, 1.0; 0.0, 0.0]; 2], 2.0).unwrap();
        assert!((d.delay(0, 1, 1.25).unwrap() - 1.25).abs() < 1e-15);
    }
}
