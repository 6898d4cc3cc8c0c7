//! Diagnostics computed from trajectories: window extrema, diameters,
//! contraction ratios, set distances and disturbance reports.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::connectivity::ConnectivityCertificate;
use crate::dynamics::{DisturbanceSignal, Trajectory};
use crate::error::{Error, Result};
use crate::schedule::WeightSchedule;

/// Convex set in `R^m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ConvexSet {
    /// Convex hull of the listed vertices (`m <= 3`).
    Polytope { vertices: Vec<Vec<f64>> },
    Ball { center: Vec<f64>, radius: f64 },
}

impl ConvexSet {
    pub fn dims(&self) -> Option<usize> {
        match self {
            ConvexSet::Polytope { vertices } => vertices.first().map(Vec::len),
            ConvexSet::Ball { center, .. } => Some(center.len()),
        }
    }

    /// Euclidean distance from `point` to the set, 0 inside.
    pub fn distance(&self, point: &[f64]) -> Result<f64> {
        match self {
            ConvexSet::Ball { center, radius } => {
                if center.len() != point.len() {
                    return Err(Error::Dimension { expected: center.len(), found: point.len() });
                }
                if !(*radius >= 0.0) {
                    return Err(Error::InvalidArgument(format!("ball radius {radius}")));
                }
                let r: f64 = center.iter().zip(point).map(|(c, p)| (p - c) * (p - c)).sum::<f64>().sqrt();
                Ok((r - radius).max(0.0))
            }
            ConvexSet::Polytope { vertices } => polytope_distance(vertices, point),
        }
    }
}

/// Distance to `conv(vertices)`: the nearest point lies in the relative
/// interior of some face spanned by at most `m + 1` vertices, where it equals
/// the projection onto that face's affine hull. Every such feasible projection
/// is a hull point, so the minimum over them is exact.
fn polytope_distance(vertices: &[Vec<f64>], q: &[f64]) -> Result<f64> {
    if vertices.is_empty() {
        return Err(Error::InvalidArgument("empty vertex list".into()));
    }
    let m = q.len();
    if m > 3 {
        return Err(Error::InvalidArgument(format!("polytope distance supports m <= 3, got {m}")));
    }
    if let Some(v) = vertices.iter().find(|v| v.len() != m) {
        return Err(Error::Dimension { expected: m, found: v.len() });
    }
    let q = DVector::from_column_slice(q);
    let pts: Vec<DVector<f64>> = vertices.iter().map(|v| DVector::from_column_slice(v)).collect();
    let mut best = f64::INFINITY;
    let max_size = (m + 1).min(pts.len());
    let mut subset = Vec::with_capacity(max_size);
    fn visit(
        pts: &[DVector<f64>],
        q: &DVector<f64>,
        from: usize,
        max_size: usize,
        subset: &mut Vec<usize>,
        best: &mut f64,
    ) {
        if !subset.is_empty() {
            if let Some(d) = face_projection(pts, subset, q) {
                *best = best.min(d);
            }
        }
        if subset.len() == max_size {
            return;
        }
        for k in from..pts.len() {
            subset.push(k);
            visit(pts, q, k + 1, max_size, subset, best);
            subset.pop();
        }
    }
    visit(&pts, &q, 0, max_size, &mut subset, &mut best);
    Ok(best)
}

fn face_projection(pts: &[DVector<f64>], subset: &[usize], q: &DVector<f64>) -> Option<f64> {
    let v0 = &pts[subset[0]];
    if subset.len() == 1 {
        return Some((q - v0).norm());
    }
    let k = subset.len() - 1;
    let e = DMatrix::from_columns(&subset[1..].iter().map(|&s| &pts[s] - v0).collect::<Vec<_>>());
    let gram = e.transpose() * &e;
    let scale = gram.diagonal().amax();
    if scale == 0.0 || gram.determinant().abs() <= 1e-12 * scale.powi(k as i32) {
        return None;
    }
    let lam = gram.lu().solve(&(e.transpose() * (q - v0)))?;
    let tol = 1e-12;
    if lam.iter().any(|l| *l < -tol) || lam.sum() > 1.0 + tol {
        return None;
    }
    Some((q - v0 - &e * lam).norm())
}

/// Distance of every agent's position (rows of `state`) to `set`.
pub fn hull_distance(state: &DMatrix<f64>, set: &ConvexSet) -> Result<Vec<f64>> {
    (0..state.nrows())
        .map(|i| set.distance(&state.row(i).iter().copied().collect::<Vec<_>>()))
        .collect()
}

/// `lambda(t)` and `Lambda(t)` per coordinate over `[t - window, t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowExtrema {
    pub times: Vec<f64>,
    /// `lower[s][c]`.
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
    pub window: f64,
}

impl WindowExtrema {
    /// Largest increase of `Lambda` or decrease of `lambda` between samples.
    pub fn monotonicity_violation(&self) -> f64 {
        let mut worst = 0.0f64;
        for s in 1..self.times.len() {
            for c in 0..self.lower[s].len() {
                worst = worst.max(self.upper[s][c] - self.upper[s - 1][c]);
                worst = worst.max(self.lower[s - 1][c] - self.lower[s][c]);
            }
        }
        worst
    }
}

/// Sliding-window extrema over the run samples, the window reaching into the
/// prehistory samples.
pub fn window_extrema(trajectory: &Trajectory, window: f64) -> WindowExtrema {
    let m = trajectory.dims();
    let times = &trajectory.times;
    let tol = 1e-9 * trajectory.step.max(1.0);
    let column = |c: usize, s: usize, upper: bool| {
        let x = &trajectory.states[s];
        let col = x.column(c);
        if upper { col.max() } else { col.min() }
    };
    let mut lower = vec![vec![0.0; m]; times.len() - trajectory.start_index];
    let mut upper = lower.clone();
    for c in 0..m {
        for (is_upper, out) in [(false, &mut lower), (true, &mut upper)] {
            // monotone deque of sample indices
            let mut dq: VecDeque<usize> = VecDeque::new();
            let mut left = 0usize;
            for s in 0..times.len() {
                let v = column(c, s, is_upper);
                while let Some(&b) = dq.back() {
                    let w = column(c, b, is_upper);
                    if (is_upper && w <= v) || (!is_upper && w >= v) {
                        dq.pop_back();
                    } else {
                        break;
                    }
                }
                dq.push_back(s);
                while times[left] < times[s] - window - tol {
                    left += 1;
                }
                while dq.front().is_some_and(|&f| f < left) {
                    dq.pop_front();
                }
                if s >= trajectory.start_index {
                    out[s - trajectory.start_index][c] = column(c, *dq.front().unwrap(), is_upper);
                }
            }
        }
    }
    WindowExtrema {
        times: times[trajectory.start_index..].to_vec(),
        lower,
        upper,
        window,
    }
}

/// `D(t) = max_c (Lambda_c(t) - lambda_c(t))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiameterSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl DiameterSeries {
    pub fn last(&self) -> f64 {
        *self.values.last().unwrap()
    }

    pub fn first(&self) -> f64 {
        self.values[0]
    }

    /// `D` at the latest sample not after `t`.
    pub fn at(&self, t: f64) -> f64 {
        let p = self.times.partition_point(|&s| s <= t + 1e-9);
        self.values[p.saturating_sub(1)]
    }

    /// Consensus reached: final value below `tol` and the tail never rises.
    pub fn consensus(&self, tol: f64) -> bool {
        let tail = &self.values[self.values.len() * 3 / 4..];
        self.last() <= tol && tail.windows(2).all(|w| w[1] <= w[0] + 1e-10)
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,D")?;
        for (t, d) in self.times.iter().zip(&self.values) {
            writeln!(out, "{t},{d}")?;
        }
        Ok(())
    }
}

pub fn diameter_series(extrema: &WindowExtrema) -> DiameterSeries {
    let values = extrema
        .lower
        .iter()
        .zip(&extrema.upper)
        .map(|(lo, hi)| lo.iter().zip(hi).map(|(a, b)| b - a).fold(0.0, f64::max))
        .collect();
    DiameterSeries { times: extrema.times.clone(), values }
}

/// `alpha_i(t) = sum_{j != i} a_ij(t)`.
pub fn exit_rates(schedule: &WeightSchedule, t: f64) -> Result<Vec<f64>> {
    let a = schedule.evaluate(t)?;
    Ok((0..a.nrows())
        .map(|i| (0..a.ncols()).filter(|&j| j != i).map(|j| a[(i, j)]).sum())
        .collect())
}

/// Largest violation of the per-coordinate envelope
/// `lambda(s) (1 - e) + x_i(s) e <= x_i(t) <= x_i(s) e + Lambda(s) (1 - e)`,
/// `e = exp(-int_s^t alpha_i)`, over pairs `s <= t` with `s` on every
/// `stride`-th run sample.
pub fn envelope_violation(
    trajectory: &Trajectory,
    extrema: &WindowExtrema,
    schedule: &WeightSchedule,
    stride: usize,
) -> Result<f64> {
    let k0 = trajectory.start_index;
    let runs = &trajectory.states[k0..];
    let times = &trajectory.times[k0..];
    let n = trajectory.agent_count();
    let mut worst = 0.0f64;
    for s in (0..runs.len()).step_by(stride.max(1)) {
        for i in 0..n {
            let mut integral = 0.0;
            for t in s..runs.len() {
                if t > s {
                    integral += schedule.integrate_exit_rate(i, times[t - 1], times[t])?;
                }
                let e = (-integral).exp();
                for c in 0..trajectory.dims() {
                    let x = runs[t][(i, c)];
                    let xs = runs[s][(i, c)];
                    let hi = xs * e + extrema.upper[s][c] * (1.0 - e);
                    let lo = xs * e + extrema.lower[s][c] * (1.0 - e);
                    worst = worst.max(x - hi).max(lo - x);
                }
            }
        }
    }
    Ok(worst)
}

/// Measured contraction of `D` over blocks of `2(n - 1)` certificate intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub block_intervals: usize,
    /// `(t_start, t_end, D(t_end) / D(t_start))` per complete block.
    pub ratios: Vec<(f64, f64, f64)>,
    /// Blocks skipped because `D(t_start)` was at rounding level.
    pub below_noise: usize,
    pub theta: f64,
    pub insufficient_horizon: bool,
    pub pass: bool,
}

/// Ratios below this fraction of the initial diameter are rounding noise.
pub const CONTRACTION_NOISE_FLOOR: f64 = 1e-13;

pub fn contraction_fit(
    diameter: &DiameterSeries,
    certificate: &ConnectivityCertificate,
    n: usize,
) -> ContractionReport {
    let block = (2 * n.saturating_sub(1)).max(1);
    let seq = &certificate.sequence;
    let end = *diameter.times.last().unwrap();
    let floor = CONTRACTION_NOISE_FLOOR * diameter.at(seq[0]);
    let mut ratios = Vec::new();
    let mut below_noise = 0;
    let mut r = 0;
    while r + block < seq.len() && seq[r + block] <= end + 1e-9 {
        let (t0, t1) = (seq[r], seq[r + block]);
        let d0 = diameter.at(t0);
        if d0 <= floor || d0 == 0.0 {
            below_noise += 1;
        } else {
            ratios.push((t0, t1, diameter.at(t1) / d0));
        }
        r += block;
    }
    let theta = ratios.iter().map(|r| r.2).fold(0.0, f64::max);
    let complete = ratios.len() + below_noise;
    ContractionReport {
        block_intervals: block,
        insufficient_horizon: complete == 0,
        pass: complete > 0 && theta < 1.0,
        ratios,
        below_noise,
        theta,
    }
}

/// Qualitative robustness check over the final quarter of the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceReport {
    /// `int_{t_p}^{t_{p+1}} ||f||_inf` per certificate interval.
    pub masses: Vec<f64>,
    pub tail_mass: f64,
    pub tail_diameter: f64,
    pub final_diameter: f64,
    pub masses_vanishing: bool,
    pub diameter_vanishing: bool,
    /// `masses -> 0` implies `D -> 0` at the given tolerance.
    pub implication_holds: bool,
    pub note: String,
}

pub fn disturbance_bound_check(
    diameter: &DiameterSeries,
    certificate: &ConnectivityCertificate,
    disturbance: &DisturbanceSignal,
    tol: f64,
) -> DisturbanceReport {
    let seq = &certificate.sequence;
    let end = *diameter.times.last().unwrap();
    let start = diameter.times[0];
    let cut = start + 0.75 * (end - start);
    let masses: Vec<f64> = seq
        .windows(2)
        .filter(|w| w[1] <= end + 1e-9)
        .map(|w| disturbance.inf_norm_integral(w[0], w[1]))
        .collect();
    let peak = masses.iter().copied().fold(0.0, f64::max);
    let tail_mass = seq
        .windows(2)
        .zip(&masses)
        .filter(|(w, _)| w[0] >= cut)
        .map(|(_, m)| *m)
        .fold(0.0, f64::max);
    let tail_diameter = diameter
        .times
        .iter()
        .zip(&diameter.values)
        .filter(|(t, _)| **t >= cut)
        .map(|(_, d)| *d)
        .fold(0.0, f64::max);
    let masses_vanishing = tail_mass <= tol * peak.max(f64::MIN_POSITIVE) || tail_mass == 0.0;
    let diameter_vanishing = tail_diameter <= tol;
    DisturbanceReport {
        masses,
        tail_mass,
        tail_diameter,
        final_diameter: diameter.last(),
        masses_vanishing,
        diameter_vanishing,
        implication_holds: !masses_vanishing || diameter_vanishing,
        note: format!("limits approximated by maxima over t >= {cut}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate_continuous, InitialCondition};
    use crate::schedule::DelaySchedule;
    use nalgebra::dmatrix;

    #[test]
    fn distance_examples() {
        let seg = ConvexSet::Polytope { vertices: vec![vec![0.0, 0.0], vec![1.0, 0.0]] };
        assert_eq!(seg.distance(&[2.0, 0.0]).unwrap(), 1.0);
        assert_eq!(seg.distance(&[0.5, 0.0]).unwrap(), 0.0);
        assert!((seg.distance(&[0.5, 2.0]).unwrap() - 2.0).abs() < 1e-15);
        let ball = ConvexSet::Ball { center: vec![0.0, 0.0], radius: 1.0 };
        assert!((ball.distance(&[1.0, 1.0]).unwrap() - (2f64.sqrt() - 1.0)).abs() < 1e-15);
        assert_eq!(ball.distance(&[0.3, 0.1]).unwrap(), 0.0);
        let empty = ConvexSet::Polytope { vertices: vec![] };
        assert!(empty.distance(&[0.0]).is_err());
        let tri = ConvexSet::Polytope {
            vertices: vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0], vec![0.5, 0.5]],
        };
        assert_eq!(tri.distance(&[0.4, 0.4]).unwrap(), 0.0);
        assert!((tri.distance(&[2.0, 2.0]).unwrap() - 2f64.sqrt()).abs() < 1e-14);
        assert!((tri.distance(&[-1.0, -1.0]).unwrap() - 2f64.sqrt()).abs() < 1e-14);
        let tet = ConvexSet::Polytope {
            vertices: vec![vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
        };
        assert!((tet.distance(&[1.0, 1.0, 1.0]).unwrap() - 2.0 / 3f64.sqrt()).abs() < 1e-14);
        assert_eq!(tet.distance(&[0.1, 0.1, 0.1]).unwrap(), 0.0);
    }

    #[test]
    fn extrema_and_diameter_closed_form() {
        let s = WeightSchedule::constant(dmatrix![0.0, 1.0; 1.0, 0.0], 3.0).unwrap();
        let ic = InitialCondition::scalar(&[0.0, 1.0]);
        let tr = simulate_continuous(&s, &DelaySchedule::none(2), &ic, None, 3.0, 0.25).unwrap();
        let ex = window_extrema(&tr, 0.0);
        let d = diameter_series(&ex);
        for (t, v) in d.times.iter().zip(&d.values) {
            assert!((v - (-2.0 * t).exp()).abs() < 1e-13);
        }
        assert_eq!(ex.monotonicity_violation(), 0.0);
        assert!(envelope_violation(&tr, &ex, &s, 1).unwrap() < 1e-12);
    }

    #[test]
    fn window_reaches_prehistory() {
        let s = WeightSchedule::constant(dmatrix![0.0, 1.0; 1.0, 0.0], 4.0).unwrap();
        let ic = InitialCondition::new(
            0.0,
            dmatrix![0.0; 1.0],
            crate::dynamics::Prehistory::Pieces(vec![(-1.0, dmatrix![-1.0; 2.0])]),
        );
        let tr = simulate_continuous(&s, &DelaySchedule::uniform(2, 1.0).unwrap(), &ic, None, 4.0, 0.5).unwrap();
        let ex = window_extrema(&tr, 1.0);
        assert_eq!(ex.lower[0][0], -1.0);
        assert_eq!(ex.upper[0][0], 2.0);
        assert!(ex.monotonicity_violation() <= 1e-12);
        let const_tr = simulate_continuous(&s, &DelaySchedule::none(2), &InitialCondition::scalar(&[3.0, 3.0]), None, 1.0, 0.5)
            .unwrap();
        let d = diameter_series(&window_extrema(&const_tr, 0.5));
        assert!(d.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn contraction_on_two_agents() {
        let s = WeightSchedule::constant(dmatrix![0.0, 1.0; 1.0, 0.0], 6.0).unwrap();
        let tr = simulate_continuous(&s, &DelaySchedule::none(2), &InitialCondition::scalar(&[0.0, 1.0]), None, 6.0, 0.5)
            .unwrap();
        let d = diameter_series(&window_extrema(&tr, 0.0));
        let cert = crate::connectivity::uniform_certificate(&s, 1.0, 0.5).unwrap().unwrap();
        let rep = contraction_fit(&d, &cert, 2);
        assert!(rep.pass);
        assert_eq!(rep.block_intervals, 2);
        for (t0, t1, r) in &rep.ratios {
            assert!((r - (-2.0 * (t1 - t0)).exp()).abs() < 1e-9);
        }
    }

    #[test]
    fn exit_rate_sums() {
        let s = WeightSchedule::constant(dmatrix![0.0, 1.0, 2.0; 0.5, 0.0, 0.0; 0.0, 0.0, 0.0], 1.0).unwrap();
        assert_eq!(exit_rates(&s, 0.5).unwrap(), vec![3.0, 0.5, 0.0]);
    }
}
