//! One scenario end to end: simulate, analyse, write artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use consensus_lab::connectivity::{
    check_nits, compute_mu, find_aqsc_sequence, uniform_certificate, uniform_sequence, ConnectivityCertificate,
};
use consensus_lab::dynamics::{
    simulate_containment, simulate_continuous, simulate_discrete, simulate_nonlinear, simulate_target_aggregation,
    InverseSquareCoupling, Trajectory,
};
use consensus_lab::evolution::{
    consensus_from_rows, evolution_series, reconstruct_cauchy, verify_row_sum_floor, verify_segment_structure,
};
use consensus_lab::metrics::{
    contraction_fit, diameter_series, disturbance_bound_check, hull_distance, window_extrema, ConvexSet, DiameterSeries,
};
use consensus_lab::reduction::{reduce_discrete, verify_reduction_with_step};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{Analysis, Built, CouplingSpec, Scenario};
use crate::plot;

pub const CAUCHY_TOL: f64 = 1e-6;
pub const REDUCTION_TOL: f64 = 1e-12;
pub const HULL_TOL: f64 = 1e-4;
pub const INSIDE_TOL: f64 = 1e-10;
pub const DISTURBANCE_TOL: f64 = 1e-3;
const MU_SEGMENT_CAP: usize = 64;
const EVOLUTION_SAMPLES: usize = 8;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub spec_version: String,
    pub name: String,
    pub description: String,
    pub covers: String,
    pub agents: usize,
    pub dims: usize,
    pub t_end: f64,
    pub step: f64,
    pub scheme: consensus_lab::dynamics::Scheme,
    pub delay_bound: f64,
    pub initial_diameter: f64,
    pub final_diameter: f64,
    pub consensus: bool,
    pub consensus_tolerance: f64,
    pub analyses: Map<String, Value>,
    pub checks: Vec<Check>,
    pub pass: bool,
}

fn check(checks: &mut Vec<Check>, name: &str, pass: bool, detail: String) {
    checks.push(Check { name: name.into(), pass, detail });
}

fn simulate(sc: &Scenario, b: &Built, step: f64) -> Result<Trajectory> {
    let (s, d, ic, t) = (&b.schedule, &b.delays, &b.initial, b.t_end);
    let nonlinear = sc.coupling == CouplingSpec::InverseSquare;
    if nonlinear && (b.disturbance.is_some() || b.leaders.is_some() || b.target.is_some()) {
        bail!("inverse-square coupling runs without disturbance, leaders or target");
    }
    let tr = if let Some(l) = &b.leaders {
        simulate_containment(s, d, l, ic, t, step)?
    } else if let Some((target, damping)) = &b.target {
        simulate_target_aggregation(s, d, target, damping, ic, t, step)?
    } else if nonlinear {
        simulate_nonlinear(s, d, ic, &InverseSquareCoupling, t, step)?
    } else {
        simulate_continuous(s, d, ic, b.disturbance.as_ref(), t, step)?
    };
    Ok(tr)
}

/// Greedy or uniform certificate, whichever the scenario asks for.
fn certificate(sc: &Scenario, b: &Built) -> Result<(Option<ConnectivityCertificate>, Value)> {
    let eps = sc.certificate.epsilon;
    if let Some(period) = sc.certificate.period {
        let cert = uniform_certificate(&b.schedule, period, eps)?;
        let v = json!({ "found": cert.is_some(), "certificate": cert });
        return Ok((cert, v));
    }
    Ok(match find_aqsc_sequence(&b.schedule, eps)? {
        Ok(cert) => {
            let v = json!({ "found": true, "certificate": cert });
            (Some(cert), v)
        }
        Err(f) => {
            let v = json!({
                "found": false,
                "stalled_from": f.stalled_from,
                "stalled_to": f.stalled_to,
                "partial_sequence": f.partial_sequence,
                "last_union_components": f.last_union.components(),
            });
            (None, v)
        }
    })
}

fn worst(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, f64::max)
}

pub fn run(sc: &Scenario, base: &Path, out: &Path, step_override: Option<f64>) -> Result<Report> {
    let built = sc.build(base)?;
    let step = step_override.unwrap_or(sc.step);
    if !(step > 0.0) {
        bail!("step must be positive, got {step}");
    }
    let b = &built;
    let n = b.schedule.agent_count();
    let tr = simulate(sc, b, step)?;
    let window = b.delays.bound();
    let dm = diameter_series(&window_extrema(&tr, window));
    let tolerance = sc.expect.as_ref().map_or(1e-6, |e| e.tolerance);

    let mut analyses = Map::new();
    let mut checks = Vec::new();
    if let Some(e) = sc.expect.as_ref().and_then(|e| e.consensus) {
        let got = dm.consensus(tolerance);
        check(&mut checks, "consensus", got == e, format!("expected {e}, final diameter {:.6e}", dm.last()));
    }

    let wants = |a: Analysis| sc.analyses.contains(&a);
    let needs_cert = [Analysis::Aqsc, Analysis::Contraction, Analysis::Disturbance, Analysis::Evolution]
        .into_iter()
        .any(wants);
    let (mut cert, cert_value) = if needs_cert { certificate(sc, b)? } else { (None, Value::Null) };
    if wants(Analysis::Aqsc) {
        check(&mut checks, "aqsc", cert.is_some(), format!("epsilon {}", sc.certificate.epsilon));
        analyses.insert("aqsc".into(), cert_value);
    }

    if wants(Analysis::Nits) {
        let seq = uniform_sequence(b.schedule.horizon(), sc.certificate.period.unwrap_or(1.0));
        let k = sc.certificate.nits_ratio;
        let rep = check_nits(&b.schedule, &seq, k)?;
        check(&mut checks, "nits", rep.holds, format!("K = {k}, {} violations, ell {:.4}", rep.violations.len(), rep.ell));
        if cert.is_none() {
            cert = rep.certificate(&seq, k);
        }
        analyses.insert("nits".into(), serde_json::to_value(&rep)?);
    }

    if wants(Analysis::MuSegments) {
        let count = (b.schedule.horizon().floor() as usize).min(MU_SEGMENT_CAP);
        let mut rows = Vec::with_capacity(count);
        for k in 0..count {
            let seg = b.schedule.shifted(k as f64)?.truncated(1.0)?;
            rows.push(json!({ "segment": k, "mu_1": compute_mu(&seg, 1.0, 0.25)? }));
        }
        analyses.insert("mu_segments".into(), Value::Array(rows));
    }

    if wants(Analysis::Evolution) {
        let end = b.t_end;
        let mut times: Vec<f64> = (1..=EVOLUTION_SAMPLES)
            .map(|k| ((end * k as f64 / EVOLUTION_SAMPLES as f64) / step).round() * step)
            .filter(|t| *t > 0.0 && *t <= end)
            .collect();
        times.dedup();
        let us = evolution_series(&b.schedule, &b.delays, 0.0, &times, step)?;
        let mu = compute_mu(&b.schedule, window.max(step), step)?;
        let floors: Vec<_> = us.iter().map(|u| verify_row_sum_floor(u, mu)).collect();
        let floor_ok = floors.iter().all(|f| f.holds);
        let min_entry = us.iter().map(|u| u.matrix.min()).fold(f64::INFINITY, f64::min);
        let max_row = us.iter().flat_map(|u| u.row_sums()).fold(f64::NEG_INFINITY, f64::max);
        check(
            &mut checks,
            "evolution",
            floor_ok && min_entry >= 0.0 && max_row <= 1.0 + 1e-9,
            format!("min entry {min_entry:.3e}, max row sum {max_row:.12}, floor {:.4e}", floors[0].bound),
        );
        let rows = consensus_from_rows(&us, 1e-6);
        let segment = match &cert {
            Some(c) if c.sequence.len() >= 3 => match verify_segment_structure(&b.schedule, &b.delays, c, 0, step) {
                Ok(rep) => serde_json::to_value(rep)?,
                Err(e) => json!({ "skipped": e.to_string() }),
            },
            _ => Value::Null,
        };
        let last = us.last().context("no evolution samples")?;
        analyses.insert(
            "evolution".into(),
            json!({
                "mu": mu,
                "row_sum_floors": floors,
                "final_matrix": { "start": last.start, "end": last.end, "rows": rows_of(&last.matrix) },
                "row_consensus": rows,
                "first_segment": segment,
            }),
        );
    }

    if wants(Analysis::Contraction) {
        match &cert {
            Some(c) => {
                let rep = contraction_fit(&dm, c, n);
                check(&mut checks, "contraction", rep.pass, format!("theta {:.4} over {} blocks", rep.theta, rep.ratios.len()));
                analyses.insert("contraction".into(), serde_json::to_value(&rep)?);
            }
            None => check(&mut checks, "contraction", false, "no connectivity certificate".into()),
        }
    }

    if wants(Analysis::CauchyCheck) {
        if b.leaders.is_some() || b.target.is_some() || sc.coupling != CouplingSpec::Unit {
            bail!("cauchy-check applies to linear runs without leaders or target");
        }
        let rep = reconstruct_cauchy(&b.schedule, &b.delays, &b.initial, b.disturbance.as_ref(), b.t_end, step)?;
        check(&mut checks, "cauchy-check", rep.discrepancy <= CAUCHY_TOL, format!("discrepancy {:.3e}", rep.discrepancy));
        analyses.insert("cauchy_check".into(), serde_json::to_value(&rep)?);
    }

    if wants(Analysis::ReductionCheck) {
        let (ds, dd) = b.discrete.as_ref().context("reduction-check needs a discrete source schedule")?;
        let k_end = b.t_end.floor() as usize;
        let red = reduce_discrete(ds, dd)?;
        let disc_step = if step < 1.0 { 1.0 / (1.0 / step).round() } else { 1.0 };
        let gap = verify_reduction_with_step(ds, dd, &b.initial, k_end, disc_step)?;
        let x = simulate_discrete(ds, dd, &b.initial, k_end)?;
        let discrete_d = diameter_series(&window_extrema(&x, dd.bound().max(1.0)));
        check(&mut checks, "reduction-check", gap <= REDUCTION_TOL, format!("max gap {gap:.3e} over {k_end} steps"));
        analyses.insert(
            "reduction_check".into(),
            json!({
                "steps": k_end,
                "max_gap": gap,
                "exit_rate_gap": red.exit_rate_gap(ds),
                "discrete_final_diameter": discrete_d.last(),
                "discrete_final_state": rows_of(x.final_state()),
            }),
        );
    }

    if wants(Analysis::Hull) {
        let set = if let Some(l) = &b.leaders {
            ConvexSet::Polytope { vertices: rows_of(&l.positions) }
        } else if let Some((t, _)) = &b.target {
            t.set.clone()
        } else {
            bail!("hull analysis needs leaders or a target");
        };
        let tol = sc.expect.as_ref().and_then(|e| e.hull_tolerance).unwrap_or(HULL_TOL);
        let start = hull_distance(&b.initial.state, &set)?;
        let inside: Vec<usize> = (0..n).filter(|&i| start[i] <= INSIDE_TOL).collect();
        let mut excursion = 0.0f64;
        for x in &tr.states[tr.start_index..] {
            let d = hull_distance(x, &set)?;
            excursion = excursion.max(worst(inside.iter().map(|&i| d[i])));
        }
        let end = hull_distance(tr.final_state(), &set)?;
        let far = worst(end.iter().copied());
        check(
            &mut checks,
            "hull",
            far <= tol && excursion <= INSIDE_TOL,
            format!("final max distance {far:.3e}, excursion of {} inside agents {excursion:.3e}", inside.len()),
        );
        analyses.insert(
            "hull".into(),
            json!({ "set": set, "final_distances": end, "inside_at_start": inside, "inside_excursion": excursion }),
        );
    }

    if wants(Analysis::Disturbance) {
        let dist = b.disturbance.as_ref().context("disturbance analysis needs a disturbance")?;
        match &cert {
            Some(c) => {
                let rep = disturbance_bound_check(&dm, c, dist, DISTURBANCE_TOL);
                check(&mut checks, "disturbance", rep.implication_holds, rep.note.clone());
                analyses.insert("disturbance".into(), serde_json::to_value(&rep)?);
            }
            None => check(&mut checks, "disturbance", false, "no connectivity certificate".into()),
        }
    }

    let pass = checks.iter().all(|c| c.pass);
    let report = Report {
        spec_version: sc.spec_version.clone(),
        name: sc.name.clone(),
        description: sc.description.clone(),
        covers: sc.covers.clone(),
        agents: n,
        dims: tr.dims(),
        t_end: b.t_end,
        step,
        scheme: tr.scheme,
        delay_bound: window,
        initial_diameter: dm.first(),
        final_diameter: dm.last(),
        consensus: dm.consensus(tolerance),
        consensus_tolerance: tolerance,
        analyses,
        checks,
        pass,
    };
    write_artifacts(out, &tr, &dm, &report, sc.plots.unwrap_or(true))?;
    Ok(report)
}

fn rows_of(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn write_artifacts(out: &Path, tr: &Trajectory, dm: &DiameterSeries, report: &Report, plots: bool) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut f = create(&out.join("trajectory.csv"))?;
    tr.write_csv(&mut f)?;
    f.flush()?;
    let mut f = create(&out.join("diameter.csv"))?;
    dm.write_csv(&mut f)?;
    f.flush()?;
    let mut f = create(&out.join("report.json"))?;
    serde_json::to_writer_pretty(&mut f, report)?;
    writeln!(f)?;
    f.flush()?;
    if plots {
        std::fs::write(out.join("diameter.svg"), plot::diameter_svg(dm, &report.name))?;
        std::fs::write(out.join("trajectory.svg"), plot::trajectory_svg(tr, &report.name))?;
    }
    Ok(())
}
