//! Reduction of discrete delayed averaging to continuous dynamics with
//! sawtooth delays.
//!
//! On `[k, k+1)` the continuous weights are
//! `a_ij = -b_ij(k) ln b_ii(k) / (1 - b_ii(k))` and the delays
//! `h_ij(t) = t - k + h_ij(k)`, which freezes every neighbour read at
//! `x_j(k - h_ij(k))`. Agent `i` then relaxes at rate `-ln b_ii(k)` toward a
//! fixed convex combination, reproducing `x(k+1)` of the discrete map.

use nalgebra::DMatrix;

use crate::dynamics::{simulate_continuous, simulate_discrete, InitialCondition};
use crate::error::{Error, Result};
use crate::schedule::{DelaySchedule, WeightSchedule};

/// `-ln(b) / (1 - b)`, continuous at `b = 1`.
pub fn log_ratio(b: f64) -> f64 {
    let u = 1.0 - b;
    if u < 1e-6 {
        1.0 + u / 2.0 + u * u / 3.0 + u * u * u / 4.0
    } else if b < 0.5 {
        -b.ln() / u
    } else {
        -(-u).ln_1p() / u
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReductionResult {
    pub weights: WeightSchedule,
    pub delays: DelaySchedule,
    /// Number of unit intervals (steps of the source schedule).
    pub steps: usize,
}

impl ReductionResult {
    /// Largest `|sum_{j != i} a_ij - (-ln b_ii)|` over intervals and agents.
    pub fn exit_rate_gap(&self, source: &WeightSchedule) -> f64 {
        let mut worst = 0.0f64;
        for (a, b) in self.weights.segments().iter().zip(source.segments()) {
            for i in 0..a.nrows() {
                let rate: f64 = (0..a.ncols()).filter(|&j| j != i).map(|j| a[(i, j)]).sum();
                worst = worst.max((rate + b[(i, i)].ln()).abs());
            }
        }
        worst
    }
}

pub fn reduce_discrete(schedule: &WeightSchedule, delays: &DelaySchedule) -> Result<ReductionResult> {
    if !schedule.is_discrete() {
        return Err(Error::KindMismatch { expected: "discrete" });
    }
    if !delays.is_integer_valued() {
        return Err(Error::InvalidArgument("reduction needs integer delays".into()));
    }
    let n = schedule.agent_count();
    let steps = schedule.segments().len();
    let mut segments = Vec::with_capacity(steps);
    let mut offsets = Vec::with_capacity(steps);
    for (k, b) in schedule.segments().iter().enumerate() {
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            let bii = b[(i, i)];
            if !(bii > 0.0) {
                return Err(Error::ReductionDomain { k, agent: i, value: bii });
            }
            let factor = log_ratio(bii);
            for j in 0..n {
                if j != i {
                    a[(i, j)] = b[(i, j)] * factor;
                }
            }
        }
        segments.push(a);
        offsets.push(DMatrix::from_fn(n, n, |i, j| {
            if i == j { 0.0 } else { delays.delay(i, j, k as f64).unwrap_or(0.0) }
        }));
    }
    let breakpoints = (0..steps).map(|k| k as f64).collect();
    let weights = WeightSchedule::piecewise(breakpoints, segments, steps as f64)?;
    let bound = offsets.iter().flat_map(|m| m.iter().copied()).fold(0.0, f64::max) + 1.0;
    let delays = DelaySchedule::sawtooth(offsets, bound)?;
    Ok(ReductionResult { weights, delays, steps })
}

/// Largest `|x_i(k) - z_i(k)|` over `k <= k_end` between the discrete run `x`
/// and the reduced continuous run `z`, both from `initial`.
pub fn verify_reduction(
    schedule: &WeightSchedule,
    delays: &DelaySchedule,
    initial: &InitialCondition,
    k_end: usize,
) -> Result<f64> {
    verify_reduction_with_step(schedule, delays, initial, k_end, 1.0)
}

/// As [`verify_reduction`] with a continuous step `1 / m`.
pub fn verify_reduction_with_step(
    schedule: &WeightSchedule,
    delays: &DelaySchedule,
    initial: &InitialCondition,
    k_end: usize,
    step: f64,
) -> Result<f64> {
    if initial.start != 0.0 {
        return Err(Error::InvalidArgument("reduction runs start at 0".into()));
    }
    let red = reduce_discrete(schedule, delays)?;
    let x = simulate_discrete(schedule, delays, initial, k_end)?;
    let z = simulate_continuous(&red.weights, &red.delays, initial, None, k_end as f64, step)?;
    let mut worst = 0.0f64;
    for k in 0..=k_end {
        let t = k as f64;
        let a = x.state_at(t).ok_or_else(|| Error::Invariant(format!("no discrete sample at {t}")))?;
        let b = z.state_at(t).ok_or_else(|| Error::Invariant(format!("no continuous sample at {t}")))?;
        worst = worst.max((a - b).amax());
    }
    Ok(worst)
}

/// Two agents swapping with self-weight `a_k = 4^{-(k+1)}`: the discrete map
/// `x_i(k+1) = (1 - a_k) x_{1-i}(k) + a_k x_i(k)`.
pub fn counterexample_schedule(steps: usize) -> Result<WeightSchedule> {
    let mats = (0..steps)
        .map(|k| {
            let a = 0.25f64.powi(k as i32 + 1);
            DMatrix::from_row_slice(2, 2, &[a, 1.0 - a, 1.0 - a, a])
        })
        .collect();
    WeightSchedule::discrete(mats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn formula_examples() {
        let e = (-1.0f64).exp();
        let s = WeightSchedule::discrete(vec![dmatrix![e, 1.0 - e; 1.0 - e, e]]).unwrap();
        let r = reduce_discrete(&s, &DelaySchedule::none(2)).unwrap();
        assert!((r.weights.segments()[0][(0, 1)] - 1.0).abs() < 1e-15);

        let s = WeightSchedule::discrete(vec![dmatrix![1.0, 0.0; 0.5, 0.5]]).unwrap();
        let r = reduce_discrete(&s, &DelaySchedule::none(2)).unwrap();
        assert_eq!(r.weights.segments()[0][(0, 1)], 0.0);
        assert!((r.weights.segments()[0][(1, 0)] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(r.exit_rate_gap(&s) < 1e-15);

        let bad = WeightSchedule::discrete(vec![dmatrix![0.0, 1.0; 0.5, 0.5]]).unwrap();
        assert!(matches!(
            reduce_discrete(&bad, &DelaySchedule::none(2)),
            Err(Error::ReductionDomain { k: 0, agent: 0, .. })
        ));
    }

    #[test]
    fn log_ratio_is_smooth_at_one() {
        assert_eq!(log_ratio(1.0), 1.0);
        for b in [1.0f64 - 1e-7, 1.0 - 1e-6, 1.0 - 2e-6, 0.9, 0.3, 1e-20] {
            let direct = -b.ln() / (1.0 - b);
            assert!((log_ratio(b) - direct).abs() < 1e-9 * direct, "{b}");
        }
    }

    #[test]
    fn equivalence_examples() {
        let half = WeightSchedule::discrete(vec![dmatrix![0.5, 0.5; 0.5, 0.5]; 10]).unwrap();
        let ic = InitialCondition::scalar(&[0.0, 1.0]);
        assert_eq!(verify_reduction(&half, &DelaySchedule::none(2), &ic, 0).unwrap(), 0.0);
        assert!(verify_reduction(&half, &DelaySchedule::none(2), &ic, 10).unwrap() <= 1e-12);

        let ring = dmatrix![0.5, 0.5, 0.0; 0.0, 0.5, 0.5; 0.5, 0.0, 0.5];
        let s = WeightSchedule::discrete(vec![ring; 20]).unwrap();
        let d = DelaySchedule::uniform(3, 1.0).unwrap();
        let ic = InitialCondition::from_window(0.0, vec![dmatrix![0.0; 1.0; 2.0], dmatrix![1.0; -1.0; 0.5]]).unwrap();
        assert!(verify_reduction(&s, &d, &ic, 20).unwrap() <= 1e-12);
        assert!(verify_reduction_with_step(&s, &d, &ic, 20, 0.25).unwrap() <= 1e-12);
    }

    #[test]
    fn counterexample_weights() {
        let s = counterexample_schedule(6).unwrap();
        let r = reduce_discrete(&s, &DelaySchedule::none(2)).unwrap();
        for (k, a) in r.weights.segments().iter().enumerate() {
            let expect = (k as f64 + 1.0) * 4f64.ln();
            assert!((a[(0, 1)] - expect).abs() < 1e-13 * expect);
        }
    }
}
