//! Helpers shared by the integration tests: random feeders, independent
//! oracles and a finite-difference gradient checker.
#![allow(dead_code)]

use std::collections::{HashMap, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use voltrisk::feeder::{BusId, DerSpec, FeederFile, FeederModel, LineSpec, LoadSpec, VoltageBounds};
use voltrisk::nn::{FeatureStats, PolicyParams};
use voltrisk::opf::{OperatingCondition, OpfSolution, Sample, SolveStatus};

/// Random radial feeder with `n` non-reference buses and shuffled bus ids.
pub fn random_tree<R: Rng>(rng: &mut R, n: usize, n_der: usize, bounds: f64) -> FeederFile {
    let mut ids: Vec<u32> = (1..=(3 * n as u32 + 5)).collect();
    ids.shuffle(rng);
    let reference = ids[0];
    let buses: Vec<u32> = ids[1..=n].to_vec();
    let mut lines = Vec::with_capacity(n);
    for (k, &b) in buses.iter().enumerate() {
        let parent = if k == 0 || rng.gen_bool(0.2) {
            reference
        } else {
            buses[rng.gen_range(0..k)]
        };
        lines.push(LineSpec {
            from: BusId(parent),
            to: BusId(b),
            r: rng.gen_range(0.002..0.05),
            x: rng.gen_range(0.002..0.05),
        });
    }
    lines.shuffle(rng);
    let mut der_buses = buses.clone();
    der_buses.shuffle(rng);
    let der = der_buses[..n_der.min(n)]
        .iter()
        .map(|&b| DerSpec { bus: BusId(b), q_max: rng.gen_range(0.05..0.4) })
        .collect();
    let loads = buses
        .iter()
        .map(|&b| LoadSpec { bus: BusId(b), p_nominal: rng.gen_range(0.0..0.2) })
        .collect();
    let mut listed: Vec<BusId> = buses.into_iter().map(BusId).collect();
    listed.shuffle(rng);
    FeederFile {
        name: None,
        reference: BusId(reference),
        buses: listed,
        lines,
        der,
        loads,
        v_bounds: VoltageBounds { lower: -bounds, upper: bounds },
    }
}

/// Sensitivity oracle: enumerate each bus's path to the reference and sum
/// impedances over the shared lines.
pub fn path_oracle(file: &FeederFile, order: &[BusId]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut adj: HashMap<u32, Vec<(u32, usize)>> = HashMap::new();
    for (k, l) in file.lines.iter().enumerate() {
        adj.entry(l.from.0).or_default().push((l.to.0, k));
        adj.entry(l.to.0).or_default().push((l.from.0, k));
    }
    let mut via: HashMap<u32, (u32, usize)> = HashMap::new();
    let mut queue = VecDeque::from([file.reference.0]);
    let mut seen = vec![file.reference.0];
    while let Some(u) = queue.pop_front() {
        for &(w, k) in adj.get(&u).map(Vec::as_slice).unwrap_or(&[]) {
            if !seen.contains(&w) {
                seen.push(w);
                via.insert(w, (u, k));
                queue.push_back(w);
            }
        }
    }
    let path = |mut b: u32| {
        let mut lines = Vec::new();
        while b != file.reference.0 {
            let (p, k) = via[&b];
            lines.push(k);
            b = p;
        }
        lines
    };
    let paths: Vec<Vec<usize>> = order.iter().map(|b| path(b.0)).collect();
    let n = order.len();
    let mut r = vec![vec![0.0; n]; n];
    let mut x = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            for &k in &paths[i] {
                if paths[j].contains(&k) {
                    r[i][j] += file.lines[k].r;
                    x[i][j] += file.lines[k].x;
                }
            }
        }
    }
    (r, x)
}

pub fn random_condition<R: Rng>(rng: &mut R, model: &FeederModel, t: usize, scale: f64) -> OperatingCondition {
    let n = model.n_buses();
    let mut oc = OperatingCondition::zeros(t, n);
    for i in 0..n {
        oc.p_load[i] = scale * rng.gen_range(0.0..0.3);
        oc.q_load[i] = oc.p_load[i] * rng.gen_range(0.3..0.5);
    }
    for &i in model.der_indices() {
        oc.p_gen[i] = scale * rng.gen_range(0.0..0.4);
    }
    oc
}

pub fn labeled(condition: OperatingCondition, z: Vec<f64>) -> Sample {
    Sample {
        condition,
        solution: OpfSolution {
            q_gen: z,
            objective: 0.0,
            kkt_residual: 0.0,
            status: SolveStatus::Optimal,
            slack_used: 0.0,
        },
    }
}

/// Random small network with nonzero biases and nontrivial feature scaling.
pub fn random_params<R: Rng>(rng: &mut R) -> PolicyParams {
    let h1 = rng.gen_range(3..7);
    let h2 = rng.gen_range(3..7);
    let mut p = PolicyParams::init(&[5, h1, h2, 1], rng).unwrap();
    for l in &mut p.layers {
        l.biases.iter_mut().for_each(|b| *b = rng.gen_range(-0.3..0.3));
    }
    p.feat_stats = FeatureStats {
        mean: (0..5).map(|_| rng.gen_range(-0.2..0.2)).collect(),
        std: (0..5).map(|_| rng.gen_range(0.1..1.0)).collect(),
    };
    p
}

/// Smallest |pre-activation| over every hidden unit, recomputed from scratch.
pub fn min_hidden_margin(p: &PolicyParams, inputs: &[[f64; 5]]) -> f64 {
    let mut margin = f64::INFINITY;
    for raw in inputs {
        let mut y: Vec<f64> = (0..5).map(|j| (raw[j] - p.feat_stats.mean[j]) / p.feat_stats.std[j]).collect();
        for l in &p.layers[..p.layers.len() - 1] {
            let z: Vec<f64> = (0..l.n_out)
                .map(|o| l.biases[o] + (0..l.n_in).map(|i| l.weights[o * l.n_in + i] * y[i]).sum::<f64>())
                .collect();
            margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
            y = z.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    margin
}

pub fn raw_features(batch: &[Sample], model: &FeederModel) -> Vec<[f64; 5]> {
    use voltrisk::nn::{Broadcast, FeatureVector};
    let mut out = Vec::new();
    for s in batch {
        let head = Broadcast::of(&s.condition);
        for &i in model.der_indices() {
            out.push(FeatureVector::new(&s.condition, i, head).to_array());
        }
    }
    out
}

/// Parameter vector used for finite differences: network weights then the
/// two CVaR auxiliaries.
pub fn theta(p: &PolicyParams) -> Vec<f64> {
    let mut t = p.flat_weights();
    t.push(p.beta_q);
    t.push(p.beta_v);
    t
}

pub fn with_theta(p: &PolicyParams, t: &[f64]) -> PolicyParams {
    let mut q = p.clone();
    let n = q.n_weights();
    q.set_flat_weights(&t[..n]).unwrap();
    q.beta_q = t[n];
    q.beta_v = t[n + 1];
    q
}

pub const FD_STEP: f64 = 1e-5;

/// Largest relative error between an analytic gradient and central
/// differences of `loss`. Components are compared relative to the larger of
/// the two magnitudes, floored at `floor` to absorb cancellation noise in
/// near-zero entries.
pub fn fd_max_rel_error(
    p: &PolicyParams,
    analytic: &[f64],
    floor: f64,
    loss: impl Fn(&PolicyParams) -> f64,
) -> f64 {
    let t0 = theta(p);
    let mut worst: f64 = 0.0;
    for i in 0..t0.len() {
        let mut tp = t0.clone();
        tp[i] += FD_STEP;
        let mut tm = t0.clone();
        tm[i] -= FD_STEP;
        let numeric = (loss(&with_theta(p, &tp)) - loss(&with_theta(p, &tm))) / (2.0 * FD_STEP);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

pub struct GradCase {
    pub model: FeederModel,
    pub s: voltrisk::feeder::SensitivityPair,
    pub params: PolicyParams,
    pub batch: Vec<Sample>,
    pub cfg: voltrisk::nn::LossConfig,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

/// Random net, feeder and batch with every ReLU at least `1e-3` from its kink
/// and the CVaR auxiliaries near the middle of the batch losses.
pub fn gradient_case<R: Rng>(rng: &mut R, mode: voltrisk::nn::LossMode) -> GradCase {
    use voltrisk::nn::{prediction_losses, voltage_losses, LossConfig};
    loop {
        let n = rng.gen_range(3..9);
        let n_der = rng.gen_range(1..=n.min(4));
        let file = random_tree(rng, n, n_der, 0.05);
        let model = FeederModel::from_file(file).unwrap();
        let s = voltrisk::feeder::build_sensitivities(&model);
        let (b, alpha) = if rng.gen_bool(0.5) { (10, 0.2) } else { (5, 0.4) };
        let batch: Vec<Sample> = (0..b)
            .map(|t| {
                let oc = random_condition(rng, &model, t, 1.0);
                let mut z = vec![0.0; model.n_buses()];
                for &i in model.der_indices() {
                    z[i] = rng.gen_range(-0.2..0.2);
                }
                labeled(oc, z)
            })
            .collect();
        let mut params = random_params(rng);
        if min_hidden_margin(&params, &raw_features(&batch, &model)) < 1e-3 {
            continue;
        }
        let refs: Vec<&Sample> = batch.iter().collect();
        let lq = prediction_losses(&params, &refs, &model);
        let lv = voltage_losses(&params, &refs, &model, &s).unwrap();
        params.beta_q = median(&lq) * rng.gen_range(0.8..1.2);
        params.beta_v = median(&lv) * rng.gen_range(0.8..1.2);
        let spread = |v: &[f64]| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (hi - lo).max(1e-3)
        };
        let cfg = LossConfig {
            mode,
            lambda_q: rng.gen_range(0.5..2.0),
            lambda_v: rng.gen_range(0.5..2.0),
            alpha,
            // Sharpness well above the difference step keeps truncation error small.
            tau_q: (0.2 * spread(&lq)).max(5e-3),
            tau_v: rng.gen_range(5e-3..2e-2),
        };
        return GradCase { model, s, params, batch, cfg };
    }
}

/// Max relative finite-difference error of the combined loss for one case.
pub fn check_gradient_case(case: &GradCase, floor: f64) -> f64 {
    use voltrisk::nn::combined_loss_grad;
    let refs: Vec<&Sample> = case.batch.iter().collect();
    let loss = |p: &PolicyParams| {
        combined_loss_grad(p, &refs, &case.model, Some(&case.s), &case.cfg)
            .unwrap()
            .loss
    };
    let c = combined_loss_grad(&case.params, &refs, &case.model, Some(&case.s), &case.cfg).unwrap();
    let mut analytic = c.grad.flat_weights();
    analytic.push(c.grad.beta_q);
    analytic.push(c.grad.beta_v);
    fd_max_rel_error(&case.params, &analytic, floor, loss)
}

/// Star feeder with `n` identical branches and DERs on the first `n_der`.
pub fn star_feeder(n: u32, n_der: u32) -> FeederModel {
    FeederModel::from_file(FeederFile {
        name: None,
        reference: BusId(0),
        buses: (1..=n).map(BusId).collect(),
        lines: (1..=n)
            .map(|i| LineSpec { from: BusId(0), to: BusId(i), r: 0.01 * i as f64, x: 0.02 * i as f64 })
            .collect(),
        der: (1..=n_der).map(|b| DerSpec { bus: BusId(b), q_max: 0.3 }).collect(),
        loads: vec![],
        v_bounds: VoltageBounds { lower: -0.05, upper: 0.05 },
    })
    .unwrap()
}

/// Dataset whose targets are a fixed affine function of each DER node's raw
/// features, so a linear policy can fit it exactly.
pub fn linear_teacher<R: Rng>(rng: &mut R, model: &FeederModel, k: usize) -> voltrisk::opf::Dataset {
    use voltrisk::nn::{Broadcast, FeatureVector};
    let w = [0.8, -0.6, 1.5, 0.3, -0.9];
    let b = 0.05;
    let samples = (0..k)
        .map(|t| {
            let oc = random_condition(rng, model, t, 1.0);
            let head = Broadcast::of(&oc);
            let mut z = vec![0.0; model.n_buses()];
            for &i in model.der_indices() {
                let f = FeatureVector::new(&oc, i, head).to_array();
                z[i] = b + f.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            }
            labeled(oc, z)
        })
        .collect();
    voltrisk::opf::Dataset {
        samples,
        feeder_ref: model.content_hash(),
        split_index: k * 4 / 5,
        dropped: 0,
    }
}

/// Dataset labeled by the dispatch solver on random conditions of `model`.
pub fn solved_dataset<R: Rng>(rng: &mut R, model: &FeederModel, k: usize, scale: f64) -> voltrisk::opf::Dataset {
    let profiles: Vec<OperatingCondition> = (0..k).map(|t| random_condition(rng, model, t, scale)).collect();
    voltrisk::opf::generate_dataset(model, &profiles, 1e-6, 0.8).unwrap()
}

/// Checks every batch-selection bookkeeping rule on a training log.
pub fn check_log(log: &voltrisk::trainer::TrainLog, selection: bool, reset: bool) -> Result<(), String> {
    let mut prev: Option<&voltrisk::trainer::IterationRecord> = None;
    let mut running = 0.0;
    for (k, r) in log.records.iter().enumerate() {
        let new_epoch = prev.is_none_or(|p| p.epoch != r.epoch);
        if new_epoch && reset {
            running = 0.0;
        }
        if selection && r.threshold != running {
            return Err(format!("row {k}: threshold {} but running value {running}", r.threshold));
        }
        let should_accept = !selection || r.batch_cvar >= r.threshold;
        if r.accepted != should_accept {
            return Err(format!("row {k}: accepted={} with cvar {} vs threshold {}", r.accepted, r.batch_cvar, r.threshold));
        }
        if !r.accepted {
            if r.batch_cvar >= r.threshold {
                return Err(format!("row {k}: skipped batch not below threshold"));
            }
            if r.param_delta != 0.0 || r.loss.is_some() {
                return Err(format!("row {k}: skipped batch changed parameters"));
            }
        }
        if selection && r.accepted {
            if r.batch_cvar < running {
                return Err(format!("row {k}: threshold would decrease within epoch"));
            }
            running = r.batch_cvar;
        }
        prev = Some(r);
    }
    let updates = log.records.iter().filter(|r| r.accepted).count();
    if updates != log.totals.gradient_updates || log.records.len() != log.totals.batches_drawn {
        return Err("totals disagree with records".into());
    }
    if log.totals.gradient_updates > log.totals.batches_drawn {
        return Err("more updates than batches".into());
    }
    Ok(())
}

/// Head, one junction, and two DER buses (2 and 3) on separate branches.
pub fn three_bus(bounds: f64) -> FeederModel {
    FeederModel::from_file(FeederFile {
        name: None,
        reference: BusId(0),
        buses: vec![BusId(0), BusId(1), BusId(2), BusId(3)],
        lines: vec![
            LineSpec { from: BusId(0), to: BusId(1), r: 0.04, x: 0.08 },
            LineSpec { from: BusId(1), to: BusId(2), r: 0.05, x: 0.06 },
            LineSpec { from: BusId(1), to: BusId(3), r: 0.03, x: 0.09 },
        ],
        der: vec![DerSpec { bus: BusId(2), q_max: 0.3 }, DerSpec { bus: BusId(3), q_max: 0.25 }],
        loads: vec![],
        v_bounds: VoltageBounds { lower: -bounds, upper: bounds },
    })
    .unwrap()
}

/// Brute-force dispatch for a feeder with exactly two DER buses.
///
/// The first DER's output is scanned on a grid (refined around the incumbent);
/// for each value the second DER's feasible set is an interval and its best
/// value within it is found in closed form. Minimizing out the second variable
/// leaves a convex function of the first, so refinement cannot lock onto a
/// wrong basin. Returns `(objective, q at the two DER buses)`, or None if no
/// grid point is feasible.
pub fn grid_oracle(
    model: &FeederModel,
    s: &voltrisk::feeder::SensitivityPair,
    oc: &OperatingCondition,
) -> Option<(f64, [f64; 2])> {
    use voltrisk::opf::{objective_value, uncontrolled_voltage};
    let der = model.der_indices();
    assert_eq!(der.len(), 2);
    let (a, b) = (der[0], der[1]);
    let cap = [model.q_limits()[a], model.q_limits()[b]];
    let bounds = model.v_bounds();
    let h = uncontrolled_voltage(oc, s).unwrap();
    let n = model.n_buses();
    let rq: Vec<f64> = (0..n).map(|i| (0..n).map(|j| s.r[(i, j)] * oc.q_load[j]).sum()).collect();

    // Best feasible second output for a given first output.
    let inner = |q0: f64| -> Option<f64> {
        let (mut lo, mut hi) = (-cap[1], cap[1]);
        for i in 0..n {
            let base = h[i] + s.x[(i, a)] * q0;
            let k = s.x[(i, b)];
            lo = lo.max((bounds.lower - base) / k);
            hi = hi.min((bounds.upper - base) / k);
        }
        if lo > hi {
            return None;
        }
        Some(((rq[b] - s.r[(a, b)] * q0) / s.r[(b, b)]).clamp(lo, hi))
    };
    let value = |q0: f64, q1: f64| {
        let mut q = vec![0.0; n];
        q[a] = q0;
        q[b] = q1;
        objective_value(&q, &oc.q_load, &s.r).unwrap()
    };

    let steps = 2000;
    let (mut lo, mut hi) = (-cap[0], cap[0]);
    let mut best: Option<(f64, [f64; 2])> = None;
    for _ in 0..8 {
        let step = (hi - lo) / steps as f64;
        for k in 0..=steps {
            let q0 = lo + step * k as f64;
            if let Some(q1) = inner(q0) {
                let f = value(q0, q1);
                if best.is_none_or(|(bf, _)| f < bf) {
                    best = Some((f, [q0, q1]));
                }
            }
        }
        let (_, c) = best?;
        lo = (c[0] - 2.0 * step).max(-cap[0]);
        hi = (c[0] + 2.0 * step).min(cap[0]);
    }
    best
}
