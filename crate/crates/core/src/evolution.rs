//! Evolutionary matrices `U(t, t*)` of the delayed linear dynamics and the
//! structural checks built on them.
//!
//! Column `i` of `U(t, t*)` is the solution started from `e_i` with zero
//! prehistory. All `n` columns are advanced together as one `n x n` state.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::connectivity::ConnectivityCertificate;
use crate::dynamics::{
    plan_continuous, prehistory_forcing_increment, run_on_plan, simulate_discrete, DisturbanceSignal,
    GridPlan, InitialCondition, Problem, Scheme, Trajectory,
};
use crate::error::{Error, Result};
use crate::schedule::{epsilon_skeleton, DelaySchedule, WeightSchedule};

/// Entries down to this value are rounding and clamp to 0.
pub const NEGATIVE_TOL: f64 = 1e-12;
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvolutionaryMatrix {
    pub start: f64,
    pub end: f64,
    #[serde(serialize_with = "serialize_rows")]
    pub matrix: DMatrix<f64>,
    pub scheme: Scheme,
    pub step: f64,
}

fn serialize_rows<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(crate::schedule::matrix_to_rows(m))
}

impl EvolutionaryMatrix {
    fn checked(start: f64, end: f64, mut matrix: DMatrix<f64>, scheme: Scheme, step: f64) -> Result<Self> {
        let low = matrix.min();
        if low < -NEGATIVE_TOL {
            return Err(Error::Invariant(format!("U({end}, {start}) has entry {low}")));
        }
        matrix.apply(|v| *v = v.max(0.0));
        let top = (0..matrix.nrows()).map(|i| matrix.row(i).sum()).fold(0.0, f64::max);
        if top > 1.0 + ROW_SUM_TOL {
            return Err(Error::Invariant(format!("U({end}, {start}) has row sum {top}")));
        }
        Ok(Self { start, end, matrix, scheme, step })
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.matrix.nrows()).map(|i| self.matrix.row(i).sum()).collect()
    }

    /// `n x n` CSV with a `t_star,t` header line.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# t_star={},t={}", self.start, self.end)?;
        for i in 0..self.matrix.nrows() {
            let row: Vec<String> = self.matrix.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn identity_run(
    schedule: &WeightSchedule,
    delays: &DelaySchedule,
    t_star: f64,
    t_end: f64,
    step: f64,
) -> Result<Trajectory> {
    let n = schedule.agent_count();
    let ic = InitialCondition::zero_prehistory(t_star, DMatrix::identity(n, n));
    if schedule.is_discrete() {
        let steps = t_end - t_star;
        if steps.fract() != 0.0 {
            return Err(Error::InvalidArgument(format!("discrete span {steps} is not an integer")));
        }
        return simulate_discrete(schedule, delays, &ic, steps as usize);
    }
    let problem = Problem::new(schedule, delays);
    let plan = plan_continuous(&problem, &ic, t_end, step, true)?;
    run_on_plan(problem, None, &ic, plan)
}

/// `U(t, t*)`.
pub fn compute_evolutionary(
    schedule: &WeightSchedule,
    delays: &DelaySchedule,
    t_star: f64,
    t: f64,
    step: f64,
) -> Result<EvolutionaryMatrix> {
    if t < t_star {
        return Err(Error::InvalidArgument(format!("t = {t} precedes t* = {t_star}")));
    }
    let tr = identity_run(schedule, delays, t_star, t, step)?;
    EvolutionaryMatrix::checked(t_star, t, tr.final_state().clone(), tr.scheme, tr.step)
}

/// `U(t_k, t*)` at each requested time, from one run. Times must lie on the
/// run grid.
pub fn evolution_series(
    schedule: &WeightSchedule,
    delays: &DelaySchedule,
    t_star: f64,
    times: &[f64],
    step: f64,
) -> Result<Vec<EvolutionaryMatrix>> {
    let last = times.iter().copied().fold(t_star, f64::max);
    let tr = identity_run(schedule, delays, t_star, last, step)?;
    times
        .iter()
        .map(|&t| {
            let x = tr
                .state_at(t)
                .ok_or_else(|| Error::InvalidArgument(format!("time {t} is off the run grid")))?;
            EvolutionaryMatrix::checked(t_star, t, x.clone(), tr.scheme, tr.step)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowSumFloor {
    pub holds: bool,
    pub measured: f64,
    pub bound: f64,
}

/// Row sums of `U` against `psi = exp(-(n - 1) mu)`.
pub fn verify_row_sum_floor(u: &EvolutionaryMatrix, mu: f64) -> RowSumFloor {
    let n = u.matrix.nrows();
    let bound = (-((n - 1) as f64) * mu).exp();
    let measured = u.row_sums().into_iter().fold(f64::INFINITY, f64::min);
    RowSumFloor { holds: measured >= bound - ROW_SUM_TOL, measured, bound }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentReport {
    pub p: usize,
    pub from: f64,
    pub to: f64,
    /// `exp(-2 (n - 1) ell)`.
    pub diagonal_bound: f64,
    pub min_diagonal: f64,
    pub diagonal_ok: bool,
    /// `epsilon * exp(-3 (n - 1) ell)`, the threshold the argument delivers.
    pub skeleton_threshold: f64,
    pub skeleton_connected: bool,
    /// `exp(-3 (n - 1) ell)` without the `epsilon` factor.
    pub unscaled_threshold: f64,
    pub unscaled_connected: bool,
    /// Smallest off-diagonal entry among arcs the threshold keeps, minus the threshold.
    pub skeleton_margin: f64,
}

/// Diagonal and skeleton structure of `U(t_{p+2}, t_p)`.
pub fn verify_segment_structure(
    schedule: &WeightSchedule,
    delays: &DelaySchedule,
    certificate: &ConnectivityCertificate,
    p: usize,
    step: f64,
) -> Result<SegmentReport> {
    let seq = &certificate.sequence;
    if p + 2 >= seq.len() {
        return Err(Error::InvalidArgument(format!(
            "certificate has {} points, segment {p} needs {}",
            seq.len(),
            p + 3
        )));
    }
    let bound = delays.bound();
    if seq.windows(2).any(|w| w[1] - w[0] < bound - 1e-12) {
        return Err(Error::InvalidArgument("certificate gaps shorter than the delay bound".into()));
    }
    let eps = certificate
        .epsilon
        .ok_or_else(|| Error::InvalidArgument("certificate carries no epsilon".into()))?;
    let n = schedule.agent_count();
    let (from, to) = (seq[p], seq[p + 2]);
    let u = compute_evolutionary(schedule, delays, from, to, step)?;
    let k = (n - 1) as f64;
    let diagonal_bound = (-2.0 * k * certificate.ell).exp();
    let unscaled_threshold = (-3.0 * k * certificate.ell).exp();
    let skeleton_threshold = eps * unscaled_threshold;
    let min_diagonal = u.matrix.diagonal().min();
    let connected = |thr: f64| n == 1 || epsilon_skeleton(&u.matrix, thr).is_quasi_strongly_connected().is_some();
    let kept = u
        .matrix
        .iter()
        .enumerate()
        .filter(|(idx, v)| idx % n != idx / n && **v >= skeleton_threshold)
        .map(|(_, v)| *v)
        .fold(f64::INFINITY, f64::min);
    Ok(SegmentReport {
        p,
        from,
        to,
        diagonal_bound,
        min_diagonal,
        diagonal_ok: min_diagonal >= diagonal_bound - 1e-12,
        skeleton_threshold,
        skeleton_connected: connected(skeleton_threshold),
        unscaled_threshold,
        unscaled_connected: connected(unscaled_threshold),
        skeleton_margin: kept - skeleton_threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CauchyReport {
    pub discrepancy: f64,
    pub scheme: Scheme,
    pub steps: usize,
}

fn sub_plan(plan: GridPlan, k: usize) -> GridPlan {
    GridPlan { start: plan.time(k as isize), steps: plan.steps - k, ..plan }
}

/// `U(t, t_k)` on the grid of `plan`.
fn evolution_on_plan(problem: Problem, plan: GridPlan, k: usize, n: usize) -> Result<DMatrix<f64>> {
    let sp = sub_plan(plan, k);
    let ic = InitialCondition::zero_prehistory(sp.start, DMatrix::identity(n, n));
    Ok(run_on_plan(problem, None, &ic, sp)?.final_state().clone())
}

/// Max-norm gap between the simulated `x(t)` and the variation-of-constants
/// formula `U(t, t*) x* + int U(t, s) (f(s) + g(s)) ds`, where `g` collects
/// delayed reads that land in the prehistory.
pub fn reconstruct_cauchy(
    schedule: &WeightSchedule,
    delays: &DelaySchedule,
    initial: &InitialCondition,
    disturbance: Option<&DisturbanceSignal>,
    t: f64,
    step: f64,
) -> Result<CauchyReport> {
    let problem = Problem { forcing: disturbance, ..Problem::new(schedule, delays) };
    let plan = plan_continuous(&problem, initial, t, step, true)?;
    let direct = run_on_plan(problem, None, initial, plan)?;
    let n = schedule.agent_count();
    let homogeneous = Problem::new(schedule, delays);
    let mut recon = evolution_on_plan(homogeneous, plan, 0, n)? * &initial.state;
    match plan.scheme {
        Scheme::ExactExponential => {
            // exact per step: the forcing enters as Gamma_k (f_k + g_k) at t_{k+1}
            for k in 0..plan.steps {
                let w = prehistory_forcing_increment(problem, initial, plan, k)?;
                if w.iter().all(|v| *v == 0.0) {
                    continue;
                }
                recon += evolution_on_plan(homogeneous, plan, k + 1, n)? * w;
            }
        }
        _ => {
            let mut prev: Option<DMatrix<f64>> = None;
            for k in 0..=plan.steps {
                let s = plan.time(k as isize);
                let src = forcing_density(problem, initial, s)?;
                let val = evolution_on_plan(homogeneous, plan, k, n)? * src;
                if let Some(p) = prev {
                    recon += (p + &val) * (0.5 * plan.step);
                }
                prev = Some(val);
            }
        }
    }
    Ok(CauchyReport {
        discrepancy: (direct.final_state() - recon).amax(),
        scheme: plan.scheme,
        steps: plan.steps,
    })
}

/// `f(s) + g(s)` with `g_i(s) = sum_j a_ij phi_j(s - h_ij)` over reads before `t*`.
fn forcing_density(problem: Problem, initial: &InitialCondition, s: f64) -> Result<DMatrix<f64>> {
    let (n, m) = initial.state.shape();
    let mut out = match problem.forcing {
        Some(f) => f.value_at(s).clone(),
        None => DMatrix::zeros(n, m),
    };
    let a = problem.weights.evaluate(s.min(problem.weights.horizon() - 1e-12))?;
    for i in 0..n {
        for j in 0..n {
            if i == j || a[(i, j)] == 0.0 {
                continue;
            }
            let tau = s - problem.delays.delay(i, j, s)?;
            if tau < initial.start {
                let phi = initial.prehistory_value(tau - initial.start)?;
                for c in 0..m {
                    out[(i, c)] += a[(i, j)] * phi[(j, c)];
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowConsensus {
    /// `linked[i][j]`: rows `i` and `j` settled and equal within tolerance.
    pub linked: Vec<Vec<bool>>,
    pub global: bool,
}

/// Consensus verdict from the last two matrices of a `U(t_k, t*)` sequence.
pub fn consensus_from_rows(sequence: &[EvolutionaryMatrix], tol: f64) -> RowConsensus {
    let Some(last) = sequence.last() else {
        return RowConsensus { linked: vec![], global: false };
    };
    let u = &last.matrix;
    let n = u.nrows();
    let settled: Vec<bool> = (0..n)
        .map(|i| match sequence.len() {
            1 => false,
            len => (u.row(i) - sequence[len - 2].matrix.row(i)).amax() <= tol,
        })
        .collect();
    let linked: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| settled[i] && settled[j] && (u.row(i) - u.row(j)).amax() <= tol)
                .collect()
        })
        .collect();
    let global = n == 1 || linked.iter().all(|r| r.iter().all(|b| *b));
    RowConsensus { linked, global }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectivity::uniform_certificate;
    use crate::dynamics::Prehistory;
    use nalgebra::dmatrix;

    #[test]
    fn trivial_cases() {
        let one = WeightSchedule::zero(1, 5.0).unwrap();
        let u = compute_evolutionary(&one, &DelaySchedule::none(1), 0.0, 5.0, 1.0).unwrap();
        assert_eq!(u.matrix, dmatrix![1.0]);
        let z = WeightSchedule::zero(3, 2.0).unwrap();
        let u = compute_evolutionary(&z, &DelaySchedule::uniform(3, 1.0).unwrap(), 0.0, 2.0, 0.5).unwrap();
        assert_eq!(u.matrix, DMatrix::identity(3, 3));
        assert!(verify_row_sum_floor(&u, 7.0).holds);
        assert!(compute_evolutionary(&z, &DelaySchedule::none(3), 1.0, 0.5, 0.5).is_err());
    }

    #[test]
    fn two_agent_closed_form() {
        let s = WeightSchedule::constant(dmatrix![0.0, 1.0; 1.0, 0.0], 3.0).unwrap();
        for t in [0.5, 1.0, 3.0] {
            let u = compute_evolutionary(&s, &DelaySchedule::none(2), 0.0, t, 0.5).unwrap();
            let e = (-2.0 * t).exp();
            let expect = dmatrix![(1.0 + e) / 2.0, (1.0 - e) / 2.0; (1.0 - e) / 2.0, (1.0 + e) / 2.0];
            assert!((u.matrix - expect).amax() < 1e-14);
        }
    }

    #[test]
    fn delayed_row_sum_floor() {
        let s = WeightSchedule::constant(dmatrix![0.0, 1.0; 1.0, 0.0], 4.0).unwrap();
        let d = DelaySchedule::uniform(2, 1.0).unwrap();
        let mu = crate::connectivity::compute_mu(&s, 1.0, 0.5).unwrap();
        assert!((mu - 1.0).abs() < 1e-12);
        for t in [0.5, 1.0, 2.0, 4.0] {
            let u = compute_evolutionary(&s, &d, 0.0, t, 0.5).unwrap();
            let r = verify_row_sum_floor(&u, mu);
            assert!(r.holds, "{r:?}");
            assert!((r.bound - (-1.0f64).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn complete_graph_segment_structure() {
        let s = WeightSchedule::constant(DMatrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 1.0 }), 10.0).unwrap();
        let cert = uniform_certificate(&s, 1.0, 1.0).unwrap().unwrap();
        let d = DelaySchedule::uniform(3, 1.0).unwrap();
        let rep = verify_segment_structure(&s, &d, &cert, 2, 0.5).unwrap();
        assert!(rep.diagonal_ok && rep.skeleton_connected, "{rep:?}");
        assert!(rep.min_diagonal > rep.diagonal_bound);
        assert!(rep.skeleton_margin > 0.0);
        assert!(verify_segment_structure(&s, &d, &cert, 9, 0.5).is_err());
    }

    #[test]
    fn cauchy_examples() {
        let s = WeightSchedule::piecewise(
            vec![0.0, 1.5],
            vec![dmatrix![0.0, 1.0; 0.5, 0.0], dmatrix![0.0, 0.2; 2.0, 0.0]],
            4.0,
        )
        .unwrap();
        let d = DelaySchedule::constant(dmatrix![0.0, 1.0; 0.5, 0.0], 1.0).unwrap();
        let zero = InitialCondition::zero_prehistory(0.0, dmatrix![0.0; 1.0]);
        assert!(reconstruct_cauchy(&s, &d, &zero, None, 4.0, 0.5).unwrap().discrepancy <= 1e-8);
        let hold = InitialCondition::scalar(&[0.0, 1.0]);
        assert!(reconstruct_cauchy(&s, &d, &hold, None, 4.0, 0.5).unwrap().discrepancy <= 1e-6);
        assert_eq!(reconstruct_cauchy(&s, &d, &hold, None, 0.0, 0.5).unwrap().discrepancy, 0.0);
        let pieces = InitialCondition::new(
            0.0,
            dmatrix![0.0; 1.0],
            Prehistory::Pieces(vec![(-1.0, dmatrix![3.0; -1.0]), (-0.5, dmatrix![-2.0; 0.5])]),
        );
        let f = DisturbanceSignal::pulse_train(2, 1, 1, &[(0.5, 1.0), (2.0, -0.5)], 0.5).unwrap();
        let rep = reconstruct_cauchy(&s, &d, &pieces, Some(&f), 4.0, 0.5).unwrap();
        assert_eq!(rep.scheme, Scheme::ExactExponential);
        assert!(rep.discrepancy <= 1e-6, "{rep:?}");
    }

    #[test]
    fn rows_consensus() {
        let z = WeightSchedule::zero(2, 4.0).unwrap();
        let seq = evolution_series(&z, &DelaySchedule::none(2), 0.0, &[1.0, 2.0], 1.0).unwrap();
        let v = consensus_from_rows(&seq, 1e-6);
        assert!(!v.global && !v.linked[0][1]);

        let s = WeightSchedule::constant(dmatrix![0.0, 1.0; 1.0, 0.0], 8.0).unwrap();
        let seq = evolution_series(&s, &DelaySchedule::none(2), 0.0, &[7.0, 7.5], 0.5).unwrap();
        let v = consensus_from_rows(&seq, 1e-6);
        assert!(v.global);
        assert!((seq[1].matrix[(0, 0)] - 0.5).abs() < 1e-6);

        let one = WeightSchedule::zero(1, 1.0).unwrap();
        let seq = evolution_series(&one, &DelaySchedule::none(1), 0.0, &[1.0], 1.0).unwrap();
        assert!(consensus_from_rows(&seq, 1e-6).global);
    }
}
