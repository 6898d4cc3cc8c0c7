//! Connectivity certificates (AQSC, NITS, UQSC) and the schedule bounds they rely on.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{epsilon_skeleton, SkeletonGraph, WeightSchedule};

/// Relative tolerance for comparisons between integrals.
pub const INTEGRAL_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CertificateKind {
    Aqsc,
    Nits,
    Uqsc,
}

/// A sequence `(t_p)` with the constants witnessing a connectivity condition
/// on the finite horizon `[0, verified_horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityCertificate {
    pub kind: CertificateKind,
    pub sequence: Vec<f64>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(rename = "K", default)]
    pub ratio_bound: Option<f64>,
    pub ell: f64,
    pub verified_horizon: f64,
}

impl ConnectivityCertificate {
    pub fn interval_count(&self) -> usize {
        self.sequence.len().saturating_sub(1)
    }
}

fn max_offdiag(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut best = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                best = best.max(m[(i, j)]);
            }
        }
    }
    best
}

/// `ell`: the largest off-diagonal integral over the intervals of `sequence`.
pub fn sequence_ell(schedule: &WeightSchedule, sequence: &[f64]) -> Result<f64> {
    let mut ell = 0.0f64;
    for w in sequence.windows(2) {
        ell = ell.max(max_offdiag(&schedule.integrate_weights(w[0], w[1])?));
    }
    Ok(ell)
}

fn check_sequence(schedule: &WeightSchedule, sequence: &[f64]) -> Result<()> {
    if sequence.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("sequence must be strictly increasing".into()));
    }
    if let (Some(&a), Some(&b)) = (sequence.first(), sequence.last()) {
        if a < 0.0 || b > schedule.horizon() {
            return Err(Error::OutOfRange { t: if a < 0.0 { a } else { b }, horizon: schedule.horizon() });
        }
    }
    if schedule.is_discrete() && sequence.iter().any(|t| t.fract() != 0.0) {
        return Err(Error::InvalidArgument("discrete sequences must be integer".into()));
    }
    Ok(())
}

/// Largest window integral `sup_t int_t^{t+D} a_ij` over candidate window starts.
///
/// Starts are the stride grid, every breakpoint, and every breakpoint minus `D`;
/// the window integral is piecewise linear in `t` with kinks only there, so the
/// result is exact for piecewise-constant schedules.
pub fn compute_mu(schedule: &WeightSchedule, window: f64, stride: f64) -> Result<f64> {
    let horizon = schedule.horizon();
    if !(window > 0.0) || window > horizon {
        return Err(Error::InvalidArgument(format!(
            "window {window} must lie in (0, horizon {horizon}]"
        )));
    }
    if !(stride > 0.0) {
        return Err(Error::InvalidArgument(format!("stride {stride} must be positive")));
    }
    let last_start = horizon - window;
    let mut starts: Vec<f64> = Vec::new();
    let mut k = 0usize;
    loop {
        let t = k as f64 * stride;
        if t > last_start {
            break;
        }
        starts.push(t);
        k += 1;
    }
    for &b in schedule.breakpoints() {
        starts.push(b);
        starts.push(b - window);
    }
    starts.push(last_start);
    if schedule.is_discrete() {
        for s in starts.iter_mut() {
            *s = s.round();
        }
        if window.fract() != 0.0 {
            return Err(Error::InvalidArgument("discrete windows must be integer".into()));
        }
    }
    let mut mu = 0.0f64;
    for t in starts {
        if t < 0.0 || t > last_start {
            continue;
        }
        mu = mu.max(max_offdiag(&schedule.integrate_weights(t, t + window)?));
    }
    Ok(mu)
}

/// Why greedy certificate construction stopped before covering any interval.
#[derive(Debug, Clone, PartialEq)]
pub struct AqscFailure {
    pub stalled_from: f64,
    pub stalled_to: f64,
    pub last_union: SkeletonGraph,
    pub partial_sequence: Vec<f64>,
}

/// First time `t > from` (within the horizon) at which the union over
/// `[from, t]` is quasi-strongly `epsilon`-connected.
fn next_connected_time(schedule: &WeightSchedule, from: f64, epsilon: f64) -> Result<Option<f64>> {
    let horizon = schedule.horizon();
    let qsc = |t: f64| -> Result<bool> {
        let u = schedule.integrate_weights(from, t)?;
        Ok(epsilon_skeleton(&u, epsilon).is_quasi_strongly_connected().is_some())
    };
    if schedule.is_discrete() {
        let mut t = from + 1.0;
        while t <= horizon {
            if qsc(t)? {
                return Ok(Some(t));
            }
            t += 1.0;
        }
        return Ok(None);
    }
    if !qsc(horizon)? {
        return Ok(None);
    }
    let n = schedule.agent_count();
    let first = schedule.segment_index(from)?;
    for s in first..schedule.segments().len() {
        let (a, b) = schedule.segment_span(s);
        let (a, b) = (a.max(from), b.min(horizon));
        if b <= a {
            continue;
        }
        if !qsc(b)? {
            continue;
        }
        // The union is monotone in t, so the first connected time inside this
        // segment is one of the entry crossing times.
        let base = schedule.integrate_weights(from, a)?;
        let rate = &schedule.segments()[s];
        let mut crossings: Vec<f64> = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let r = rate[(i, j)];
                if i != j && r > 0.0 && base[(i, j)] < epsilon {
                    let t = a + (epsilon - base[(i, j)]) / r;
                    if t <= b {
                        crossings.push(t);
                    }
                }
            }
        }
        crossings.sort_by(|x, y| x.total_cmp(y));
        for c in crossings {
            // nudge past rounding so the recomputed integral clears epsilon
            let mut t = c.max(a);
            for _ in 0..64 {
                if t > b || qsc(t)? {
                    break;
                }
                t = t.next_up();
            }
            if t <= b && qsc(t)? {
                return Ok(Some(t));
            }
        }
        return Ok(Some(b));
    }
    Ok(None)
}

/// Greedy minimal AQSC sequence: `t_0 = 0` and each `t_{p+1}` is the first time
/// the union over `[t_p, t_{p+1}]` becomes quasi-strongly `epsilon`-connected.
pub fn find_aqsc_sequence(
    schedule: &WeightSchedule,
    epsilon: f64,
) -> Result<std::result::Result<ConnectivityCertificate, AqscFailure>> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be positive")));
    }
    let mut seq = vec![0.0];
    let mut t = 0.0;
    while let Some(next) = next_connected_time(schedule, t, epsilon)? {
        seq.push(next);
        t = next;
        if t >= schedule.horizon() {
            break;
        }
    }
    if seq.len() < 2 {
        let u = schedule.integrate_weights(t, schedule.horizon())?;
        return Ok(Err(AqscFailure {
            stalled_from: t,
            stalled_to: schedule.horizon(),
            last_union: epsilon_skeleton(&u, epsilon),
            partial_sequence: seq,
        }));
    }
    let ell = sequence_ell(schedule, &seq)?;
    let verified_horizon = *seq.last().unwrap();
    Ok(Ok(ConnectivityCertificate {
        kind: CertificateKind::Aqsc,
        sequence: seq,
        epsilon: Some(epsilon),
        ratio_bound: None,
        ell,
        verified_horizon,
    }))
}

/// Re-checks an AQSC/UQSC certificate against its schedule: every union graph
/// is quasi-strongly `epsilon`-connected and `ell` matches the recomputation.
pub fn verify_aqsc(schedule: &WeightSchedule, cert: &ConnectivityCertificate) -> Result<bool> {
    check_sequence(schedule, &cert.sequence)?;
    let eps = cert
        .epsilon
        .ok_or_else(|| Error::InvalidArgument("certificate lacks epsilon".into()))?;
    for w in cert.sequence.windows(2) {
        let u = schedule.integrate_weights(w[0], w[1])?;
        if epsilon_skeleton(&u, eps).is_quasi_strongly_connected().is_none() {
            return Ok(false);
        }
    }
    let ell = sequence_ell(schedule, &cert.sequence)?;
    Ok((ell - cert.ell).abs() <= 1e-9 * ell.max(1.0))
}

/// Certificate for the uniform grid `t_p = p * period` when every window union
/// is connected; `None` otherwise.
pub fn uniform_certificate(
    schedule: &WeightSchedule,
    period: f64,
    epsilon: f64,
) -> Result<Option<ConnectivityCertificate>> {
    let seq = uniform_sequence(schedule.horizon(), period);
    let cert = ConnectivityCertificate {
        kind: CertificateKind::Uqsc,
        ell: sequence_ell(schedule, &seq)?,
        verified_horizon: *seq.last().unwrap_or(&0.0),
        sequence: seq,
        epsilon: Some(epsilon),
        ratio_bound: None,
    };
    if cert.sequence.len() < 2 || !verify_aqsc(schedule, &cert)? {
        return Ok(None);
    }
    Ok(Some(cert))
}

/// Candidate sequence `0, T, 2T, ...` up to `horizon`.
pub fn uniform_sequence(horizon: f64, period: f64) -> Vec<f64> {
    let count = (horizon / period + 1e-9).floor() as usize;
    (0..=count).map(|p| p as f64 * period).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NitsReport {
    pub holds: bool,
    /// `(p, i, j)` where `int a_ij > K int a_ji` on interval `p`.
    pub violations: Vec<(usize, usize, usize)>,
    pub ell: f64,
}

impl NitsReport {
    pub fn certificate(&self, sequence: &[f64], k: f64) -> Option<ConnectivityCertificate> {
        self.holds.then(|| ConnectivityCertificate {
            kind: CertificateKind::Nits,
            sequence: sequence.to_vec(),
            epsilon: None,
            ratio_bound: Some(k),
            ell: self.ell,
            verified_horizon: *sequence.last().unwrap_or(&0.0),
        })
    }
}

/// Non-instantaneous type-symmetry on a caller-supplied sequence.
pub fn check_nits(schedule: &WeightSchedule, sequence: &[f64], k: f64) -> Result<NitsReport> {
    if !(k >= 1.0) {
        return Err(Error::InvalidArgument(format!("ratio bound K = {k} must be >= 1")));
    }
    check_sequence(schedule, sequence)?;
    let n = schedule.agent_count();
    let mut violations = Vec::new();
    for (p, w) in sequence.windows(2).enumerate() {
        let u = schedule.integrate_weights(w[0], w[1])?;
        for i in 0..n {
            for j in 0..n {
                if i != j && u[(i, j)] > k * u[(j, i)] * (1.0 + INTEGRAL_RTOL) {
                    violations.push((p, i, j));
                }
            }
        }
    }
    Ok(NitsReport {
        holds: violations.is_empty(),
        violations,
        ell: sequence_ell(schedule, sequence)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArcBalance {
    pub holds: bool,
    /// Largest `a_ij / a_km` over persistent arc pairs at the sampled segments.
    pub worst_ratio: f64,
}

/// Anytime arc-balance between every pair of persistent arcs.
pub fn check_arc_balance(
    schedule: &WeightSchedule,
    persistent: &SkeletonGraph,
    k: f64,
    sample_times: &[f64],
) -> Result<ArcBalance> {
    let mut worst = 1.0f64;
    let mut segs: Vec<usize> = sample_times
        .iter()
        .map(|&t| schedule.segment_index(t))
        .collect::<Result<_>>()?;
    segs.sort_unstable();
    segs.dedup();
    for s in segs {
        let m = &schedule.segments()[s];
        let vals: Vec<f64> = persistent.arcs.iter().map(|&(j, i)| m[(i, j)]).collect();
        let hi = vals.iter().copied().fold(0.0, f64::max);
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        if hi == 0.0 {
            continue;
        }
        worst = worst.max(if lo == 0.0 { f64::INFINITY } else { hi / lo });
    }
    Ok(ArcBalance { holds: worst <= k * (1.0 + INTEGRAL_RTOL), worst_ratio: worst })
}

/// Smallest diagonal entry of a discrete schedule and whether it reaches `eta`.
pub fn check_strong_aperiodicity(schedule: &WeightSchedule, eta: f64) -> Result<(bool, f64)> {
    if !schedule.is_discrete() {
        return Err(Error::KindMismatch { expected: "discrete" });
    }
    let floor = schedule
        .segments()
        .iter()
        .flat_map(|m| m.diagonal().iter().copied().collect::<Vec<_>>())
        .fold(f64::INFINITY, f64::min);
    Ok((floor >= eta, floor))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DwellFailure {
    pub span: f64,
    pub dwell: f64,
}

/// Passes to the subsequence `t_0, t_k, t_2k, ...` with the smallest `k` whose
/// gaps are all at least `dwell`; `ell` is recomputed.
pub fn thin_by_dwell(
    schedule: &WeightSchedule,
    cert: &ConnectivityCertificate,
    dwell: f64,
) -> Result<std::result::Result<(ConnectivityCertificate, usize), DwellFailure>> {
    if cert.kind == CertificateKind::Nits {
        return Err(Error::InvalidArgument("dwell thinning applies to AQSC/UQSC certificates".into()));
    }
    let seq = &cert.sequence;
    for k in 1..seq.len() {
        let sub: Vec<f64> = seq.iter().copied().step_by(k).collect();
        if sub.len() < 2 {
            break;
        }
        if sub.windows(2).all(|w| w[1] - w[0] >= dwell) {
            let mut out = cert.clone();
            out.ell = sequence_ell(schedule, &sub)?;
            out.verified_horizon = *sub.last().unwrap();
            out.sequence = sub;
            return Ok(Ok((out, k)));
        }
    }
    Ok(Err(DwellFailure {
        span: seq.last().copied().unwrap_or(0.0) - seq.first().copied().unwrap_or(0.0),
        dwell,
    }))
}

/// Schedule-level diagnostics: weight bounds, aperiodicity floor, arc balance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    /// `(D, mu_D)` pairs, nondecreasing in `D`.
    pub mu_table: Vec<(f64, f64)>,
    pub aperiodicity_floor: Option<f64>,
    pub arc_balance_ratio: Option<f64>,
    pub notes: Vec<String>,
}

pub fn analyze_schedule(
    schedule: &WeightSchedule,
    windows: &[f64],
    stride: f64,
    persistent: Option<&SkeletonGraph>,
) -> Result<AnalysisReport> {
    let mut mu_table = Vec::new();
    let mut sorted = windows.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    for d in sorted {
        if d <= schedule.horizon() {
            mu_table.push((d, compute_mu(schedule, d, stride)?));
        }
    }
    let aperiodicity_floor = if schedule.is_discrete() {
        Some(check_strong_aperiodicity(schedule, 0.0)?.1)
    } else {
        None
    };
    let arc_balance_ratio = match persistent {
        Some(g) => Some(check_arc_balance(schedule, g, 1.0, schedule.breakpoints())?.worst_ratio),
        None => None,
    };
    let notes = vec![format!(
        "all quantities measured on the finite horizon [0, {}]",
        schedule.horizon()
    )];
    Ok(AnalysisReport { mu_table, aperiodicity_floor, arc_balance_ratio, notes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{geometric_on_intervals, make_intermittent};
    use nalgebra::dmatrix;

    fn complete(n: usize, w: f64) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { w })
    }

    #[test]
    fn mu_examples() {
        let s = WeightSchedule::constant(complete(3, 2.5), 10.0).unwrap();
        assert!((compute_mu(&s, 2.0, 0.5).unwrap() - 5.0).abs() < 1e-12);
        let z = WeightSchedule::zero(2, 5.0).unwrap();
        assert_eq!(compute_mu(&z, 1.0, 0.5).unwrap(), 0.0);
        assert!(compute_mu(&z, 6.0, 0.5).is_err());
    }

    #[test]
    fn mu_intermittent_window_sweep() {
        // on-intervals of length 1 separated by gaps >= D
        let on = [(0.0, 1.0), (4.0, 5.0), (9.0, 10.0)];
        let s = make_intermittent(&complete(2, 1.0), &on, 12.0).unwrap();
        for d in [0.25, 0.5, 1.0, 2.0, 3.0] {
            // brute force: fine sweep of window starts
            let mut brute = 0.0f64;
            let mut t = 0.0;
            while t + d <= 12.0 + 1e-12 {
                brute = brute.max(s.integrate_weights(t, (t + d).min(12.0)).unwrap()[(0, 1)]);
                t += 1.0 / 64.0;
            }
            let mu = compute_mu(&s, d, 1.0).unwrap();
            assert!((mu - brute).abs() < 1e-12, "D={d}: {mu} vs {brute}");
            assert!((mu - d.min(1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn aqsc_complete_graph() {
        let s = WeightSchedule::constant(complete(3, 1.0), 3.0).unwrap();
        let cert = find_aqsc_sequence(&s, 0.5).unwrap().unwrap();
        assert_eq!(cert.sequence.len(), 7);
        for (p, t) in cert.sequence.iter().enumerate() {
            assert!((t - 0.5 * p as f64).abs() < 1e-12);
        }
        assert!((cert.ell - 0.5).abs() < 1e-12);
        assert!(verify_aqsc(&s, &cert).unwrap());
    }

    #[test]
    fn aqsc_zero_schedule_fails_at_origin() {
        let z = WeightSchedule::zero(3, 5.0).unwrap();
        let f = find_aqsc_sequence(&z, 0.1).unwrap().unwrap_err();
        assert_eq!(f.stalled_from, 0.0);
        assert!(f.last_union.arcs.is_empty());
    }

    #[test]
    fn aqsc_intermittent_chain() {
        // chain 1 -> 2 -> 3 with unit weights
        let base = dmatrix![0.0, 0.0, 0.0; 1.0, 0.0, 0.0; 0.0, 1.0, 0.0];
        let on = geometric_on_intervals(5, 1.0);
        let s = make_intermittent(&base, &on, 17.0).unwrap();
        let cert = find_aqsc_sequence(&s, 1.0).unwrap().unwrap();
        // greedy oracle: union reaches 1 exactly at each on-interval end
        assert_eq!(cert.sequence, vec![0.0, 2.0, 3.0, 5.0, 9.0, 17.0]);
        assert!(cert.ell <= 1.0 + 1e-12);
    }

    #[test]
    fn nits_examples() {
        let sym = WeightSchedule::piecewise(
            vec![0.0, 1.0],
            vec![dmatrix![0.0, 1.0; 1.0, 0.0], dmatrix![0.0, 3.0; 3.0, 0.0]],
            4.0,
        )
        .unwrap();
        assert!(check_nits(&sym, &[0.0, 0.5, 2.0, 4.0], 1.0).unwrap().holds);

        let one_sided = WeightSchedule::constant(dmatrix![0.0, 1.0; 0.0, 0.0], 3.0).unwrap();
        let r = check_nits(&one_sided, &[0.0, 1.0, 2.0, 3.0], 10.0).unwrap();
        assert!(!r.holds);
        assert!(r.violations.contains(&(0, 0, 1)));

        let ratio2 = WeightSchedule::constant(dmatrix![0.0, 2.0; 1.0, 0.0], 2.0).unwrap();
        assert!(check_nits(&ratio2, &[0.0, 1.0, 2.0], 2.0).unwrap().holds);
        assert!(!check_nits(&ratio2, &[0.0, 1.0, 2.0], 1.5).unwrap().holds);
    }

    #[test]
    fn arc_balance_examples() {
        let base = dmatrix![0.0, 2.0, 0.0; 1.0, 0.0, 0.0; 0.0, 4.0, 0.0];
        let s = make_intermittent(&base, &[(1.0, 2.0), (5.0, 6.0)], 8.0).unwrap();
        let persistent = epsilon_skeleton(&base, 1e-12);
        let times: Vec<f64> = (0..8).map(|k| k as f64 + 0.5).collect();
        let r = check_arc_balance(&s, &persistent, 4.0, &times).unwrap();
        assert!(r.holds);
        assert_eq!(r.worst_ratio, 4.0);

        let s = WeightSchedule::piecewise(
            vec![0.0, 1.0],
            vec![dmatrix![0.0, 1.0; 1.0, 0.0], dmatrix![0.0, 1.0; 0.0, 0.0]],
            2.0,
        )
        .unwrap();
        let g = SkeletonGraph::new(2, [(0, 1), (1, 0)], 1.0);
        assert!(!check_arc_balance(&s, &g, 100.0, &[0.5, 1.5]).unwrap().holds);

        let single = SkeletonGraph::new(2, [(1, 0)], 1.0);
        let r = check_arc_balance(&s, &single, 1.0, &[0.5, 1.5]).unwrap();
        assert!(r.holds);
        assert_eq!(r.worst_ratio, 1.0);
    }

    #[test]
    fn strong_aperiodicity_examples() {
        let half = dmatrix![0.5, 0.5; 0.5, 0.5];
        let s = WeightSchedule::discrete(vec![half.clone(), half.clone()]).unwrap();
        assert_eq!(check_strong_aperiodicity(&s, 0.3).unwrap(), (true, 0.5));
        let perm = WeightSchedule::discrete(vec![dmatrix![0.0, 1.0; 1.0, 0.0]]).unwrap();
        assert_eq!(check_strong_aperiodicity(&perm, 0.3).unwrap(), (false, 0.0));
        let lazy = WeightSchedule::discrete(vec![
            (DMatrix::identity(3, 3) + dmatrix![0.0, 1.0, 0.0; 0.0, 0.0, 1.0; 1.0, 0.0, 0.0]) * 0.5,
        ])
        .unwrap();
        assert_eq!(check_strong_aperiodicity(&lazy, 0.3).unwrap(), (true, 0.5));
        let cont = WeightSchedule::zero(2, 1.0).unwrap();
        assert!(matches!(check_strong_aperiodicity(&cont, 0.3), Err(Error::KindMismatch { .. })));
    }

    #[test]
    fn dwell_examples() {
        let s = WeightSchedule::constant(complete(2, 1.0), 4.0).unwrap();
        let mk = |seq: Vec<f64>| ConnectivityCertificate {
            kind: CertificateKind::Aqsc,
            ell: sequence_ell(&s, &seq).unwrap(),
            verified_horizon: *seq.last().unwrap(),
            sequence: seq,
            epsilon: Some(0.05),
            ratio_bound: None,
        };
        let (c, k) = thin_by_dwell(&s, &mk(vec![0.0, 1.0, 2.0, 3.0, 4.0]), 2.0).unwrap().unwrap();
        assert_eq!((c.sequence, k), (vec![0.0, 2.0, 4.0], 2));
        let (c, k) = thin_by_dwell(&s, &mk(vec![0.0, 2.0, 4.0]), 2.0).unwrap().unwrap();
        assert_eq!((c.sequence, k), (vec![0.0, 2.0, 4.0], 1));
        let tenths: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).collect();
        let (c, k) = thin_by_dwell(&s, &mk(tenths), 0.35).unwrap().unwrap();
        assert_eq!(k, 4);
        assert_eq!(c.sequence.len(), 3);
        assert!((c.sequence[2] - 0.8).abs() < 1e-12);
        assert!(thin_by_dwell(&s, &mk(vec![0.0, 1.0]), 2.0).unwrap().is_err());
    }
}
