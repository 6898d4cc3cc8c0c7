#![allow(dead_code)]

use consensus_lab::dynamics::{InitialCondition, Prehistory};
use consensus_lab::schedule::{DelaySchedule, WeightSchedule};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Multiple of `quantum` in `[lo, hi]`.
pub fn grid_value(rng: &mut impl Rng, lo: f64, hi: f64, quantum: f64) -> f64 {
    let a = (lo / quantum).ceil() as i64;
    let b = (hi / quantum).floor() as i64;
    rng.random_range(a..=b) as f64 * quantum
}

pub fn complete_graph(n: usize, w: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { w })
}

/// Directed chain `0 -> 1 -> ... -> n-1` with weight `w`.
pub fn chain(n: usize, w: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if i == j + 1 { w } else { 0.0 })
}

pub struct LinearCase {
    pub seed: u64,
    pub schedule: WeightSchedule,
    pub delays: DelaySchedule,
    pub initial: InitialCondition,
}

/// Random piecewise-constant schedule on a 0.25 grid with constant delays in
/// `[0, bound]` and a piecewise prehistory covering `[-bound, 0)`.
pub fn random_linear_case(seed: u64, horizon: f64, bound: f64, dims: usize) -> LinearCase {
    let mut r = rng(seed);
    let n = r.random_range(2..=6usize);
    let mut bps = vec![0.0];
    loop {
        let next = bps.last().unwrap() + grid_value(&mut r, 0.5, 2.0, 0.25);
        if next >= horizon {
            break;
        }
        bps.push(next);
    }
    let segs = bps
        .iter()
        .map(|_| {
            DMatrix::from_fn(n, n, |i, j| {
                if i != j && r.random_bool(0.5) { r.random_range(0.0..2.0) } else { 0.0 }
            })
        })
        .collect();
    let schedule = WeightSchedule::piecewise(bps, segs, horizon).unwrap();
    let hm = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { grid_value(&mut r, 0.0, bound, 0.25) });
    let delays = DelaySchedule::constant(hm, bound).unwrap();
    let mut value = || DMatrix::from_fn(n, dims, |_, _| r.random_range(-1.0..1.0));
    let pieces = vec![(-bound, value()), (-bound / 2.0, value())];
    let initial = InitialCondition::new(0.0, value(), Prehistory::Pieces(pieces));
    LinearCase { seed, schedule, delays, initial }
}

pub struct DiscreteCase {
    pub schedule: WeightSchedule,
    pub delays: DelaySchedule,
    pub initial: InitialCondition,
}

/// Random row-stochastic schedule with diagonal at least `eta` and integer
/// delays up to `max_delay`.
pub fn random_discrete_case(seed: u64, steps: usize, max_delay: usize, eta: f64) -> DiscreteCase {
    let mut r = rng(seed);
    let n = r.random_range(2..=5usize);
    let mats = (0..steps)
        .map(|_| {
            let mut m = DMatrix::zeros(n, n);
            for i in 0..n {
                let diag = r.random_range(eta..1.0);
                let raw: Vec<f64> =
                    (0..n).map(|j| if j != i && r.random_bool(0.6) { r.random::<f64>() } else { 0.0 }).collect();
                let total: f64 = raw.iter().sum();
                if total == 0.0 {
                    m[(i, i)] = 1.0;
                    continue;
                }
                for j in 0..n {
                    m[(i, j)] = raw[j] / total * (1.0 - diag);
                }
                m[(i, i)] = 1.0 - (0..n).filter(|&j| j != i).map(|j| m[(i, j)]).sum::<f64>();
            }
            m
        })
        .collect();
    let schedule = WeightSchedule::discrete(mats).unwrap();
    let hm = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { r.random_range(0..=max_delay) as f64 });
    let delays = DelaySchedule::constant(hm, max_delay as f64).unwrap();
    let window = (0..=max_delay).map(|_| DMatrix::from_fn(n, 1, |_, _| r.random_range(-1.0..1.0))).collect();
    let initial = InitialCondition::from_window(0.0, window).unwrap();
    DiscreteCase { schedule, delays, initial }
}

/// `prod_{k<terms} (1 - 2 * 4^{-(k+1)})`.
pub fn swap_product(terms: usize) -> f64 {
    (0..terms).map(|k| 1.0 - 2.0 * 0.25f64.powi(k as i32 + 1)).product()
}
