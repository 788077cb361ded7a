mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voltrisk::feeder::{build_sensitivities, BusId, DerSpec, FeederFile, FeederModel, LineSpec, VoltageBounds};
use voltrisk::nn::{
    combined_loss_grad, cvar_q_loss_grad, cvar_v_loss_grad, mse_loss_grad, LossConfig, LossMode,
    PolicyParams,
};
use voltrisk::opf::{OperatingCondition, Sample};

use common::{check_gradient_case, gradient_case, labeled};

fn fd_mode(mode: LossMode, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..50 {
        let case = gradient_case(&mut rng, mode);
        let err = check_gradient_case(&case, 1e-10);
        assert!(err < 1e-5, "{mode} case {k}: relative error {err:e}");
    }
}

#[test]
fn finite_differences_mse() {
    fd_mode(LossMode::Mse, 101);
}

#[test]
fn finite_differences_cvar_q() {
    fd_mode(LossMode::CvarQ, 102);
}

#[test]
fn finite_differences_cvar_qv() {
    fd_mode(LossMode::CvarQV, 103);
}

fn one_bus() -> FeederModel {
    FeederModel::from_file(FeederFile {
        name: None,
        reference: BusId(0),
        buses: vec![BusId(1)],
        lines: vec![LineSpec { from: BusId(0), to: BusId(1), r: 0.02, x: 0.04 }],
        der: vec![DerSpec { bus: BusId(1), q_max: 0.5 }],
        loads: vec![],
        v_bounds: VoltageBounds { lower: -0.05, upper: 0.05 },
    })
    .unwrap()
}

#[test]
fn voltage_gradient_by_hand_on_linear_net() {
    let m = one_bus();
    let s = build_sensitivities(&m);
    let mut p = PolicyParams::zeros(&[5, 1]).unwrap();
    p.layers[0].weights = vec![0.2, -0.1, 0.3, 0.05, -0.4];
    p.layers[0].biases = vec![0.02];
    p.beta_v = 0.01;
    let tau = 0.01;

    for &(pg, pc, qc) in &[(0.0, 1.5, 0.6), (2.0, 0.1, 0.05)] {
        let mut oc = OperatingCondition::zeros(0, 1);
        oc.p_gen[0] = pg;
        oc.p_load[0] = pc;
        oc.q_load[0] = qc;
        let x = [pg, pc, qc, pc - pg, qc];
        let q = 0.02 + x.iter().zip(&p.layers[0].weights).map(|(a, b)| a * b).sum::<f64>();
        let v = 0.02 * (pg - pc) - 0.04 * qc + 0.04 * q;
        // m = tau log(e^{v/tau} + e^{-v/tau}); dm/dq = tanh(v/tau) * X
        let mval = tau * ((v / tau).exp() + (-v / tau).exp()).ln();
        let hinge = 1.0 / (1.0 + (-(mval - p.beta_v) / tau).exp());
        let dq = hinge * (v / tau).tanh() * 0.04;

        let sample = labeled(oc, vec![0.0]);
        let lg = cvar_v_loss_grad(&p, &[&sample], &m, &s, 1.0, tau).unwrap();
        for j in 0..5 {
            let expected = dq * x[j];
            assert!((lg.grad.layers[0].weights[j] - expected).abs() < 1e-12 * (1.0 + expected.abs()));
        }
        // The derivative wrt the bias carries the sign of the deviation.
        assert_eq!(lg.grad.layers[0].biases[0].signum(), v.signum());
        assert!((lg.grad.beta_v - (1.0 - hinge)).abs() < 1e-12);
    }
}

fn star(n: u32, der: &[u32]) -> FeederModel {
    FeederModel::from_file(FeederFile {
        name: None,
        reference: BusId(0),
        buses: (1..=n).map(BusId).collect(),
        lines: (1..=n)
            .map(|i| LineSpec { from: BusId(0), to: BusId(i), r: 0.03, x: 0.05 })
            .collect(),
        der: der.iter().map(|&b| DerSpec { bus: BusId(b), q_max: 0.3 }).collect(),
        loads: vec![],
        v_bounds: VoltageBounds { lower: -0.05, upper: 0.05 },
    })
    .unwrap()
}

#[test]
fn hinge_limit_follows_worst_sample() {
    let m = star(3, &[1, 2, 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p0 = PolicyParams::init(&[5, 6, 1], &mut rng).unwrap();
    let mut batch: Vec<Sample> = (0..5)
        .map(|t| {
            let mut oc = OperatingCondition::zeros(t, 3);
            oc.p_load = vec![0.1, 0.2, 0.15];
            labeled(oc, vec![0.0; 3])
        })
        .collect();
    batch[3].solution.q_gen = vec![2.0, -2.0, 2.0];
    let refs: Vec<&Sample> = batch.iter().collect();
    let worst = mse_loss_grad(&p0, &[&batch[3]], &m).unwrap();
    let mut p = p0.clone();
    // beta between the worst loss and the rest
    p.beta_q = 0.5 * worst.loss;
    let lg = cvar_q_loss_grad(&p, &refs, &m, 0.2, 1e-6).unwrap();
    let expected: Vec<f64> = worst.grad.flat_weights().iter().map(|g| g / (0.2 * 5.0)).collect();
    let got = lg.grad.flat_weights();
    for (a, b) in got.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
    }
    assert!((lg.grad.beta_q - 0.0).abs() < 1e-9);
}

#[test]
fn heavy_risk_weight_points_along_risk_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let case = gradient_case(&mut rng, LossMode::CvarQ);
    let refs: Vec<&Sample> = case.batch.iter().collect();
    let pure = cvar_q_loss_grad(&case.params, &refs, &case.model, case.cfg.alpha, case.cfg.tau_q)
        .unwrap()
        .grad
        .flat_weights();
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let target = unit(&pure);
    let mut prev = f64::INFINITY;
    for lambda in [1.0, 1e2, 1e4, 1e6] {
        let cfg = LossConfig { lambda_q: lambda, ..case.cfg };
        let g = combined_loss_grad(&case.params, &refs, &case.model, None, &cfg)
            .unwrap()
            .grad
            .flat_weights();
        let dist: f64 = unit(&g).iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dist <= prev + 1e-12);
        prev = dist;
    }
    assert!(prev < 1e-5);
}

fn cfg(mode: LossMode) -> LossConfig {
    LossConfig { mode, lambda_q: 1.0, lambda_v: 1.0, alpha: 0.5, tau_q: 0.01, tau_v: 0.01 }
}

fn bus_data() -> impl Strategy<Value = Vec<(f64, f64, f64, f64)>> {
    prop::collection::vec((0.0..0.4f64, 0.0..0.3f64, 0.0..0.1f64, -0.3..0.3f64), 4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permuting_symmetric_ders_leaves_loss_unchanged(
        data in prop::collection::vec(bus_data(), 4),
        perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
        seed in 0u64..1000,
    ) {
        let m = star(4, &[1, 2, 3, 4]);
        let s = build_sensitivities(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = PolicyParams::init(&[5, 5, 1], &mut rng).unwrap();
        let build = |order: &[usize]| -> Vec<Sample> {
            data.iter().enumerate().map(|(t, rows)| {
                let mut oc = OperatingCondition::zeros(t, 4);
                let mut z = vec![0.0; 4];
                for (slot, &src) in order.iter().enumerate() {
                    let (pg, pc, qc, zz) = rows[src];
                    oc.p_gen[slot] = pg;
                    oc.p_load[slot] = pc;
                    oc.q_load[slot] = qc;
                    z[slot] = zz;
                }
                labeled(oc, z)
            }).collect()
        };
        let a = build(&[0, 1, 2, 3]);
        let b = build(&perm);
        let ra: Vec<&Sample> = a.iter().collect();
        let rb: Vec<&Sample> = b.iter().collect();
        for mode in [LossMode::Mse, LossMode::CvarQ, LossMode::CvarQV] {
            let la = combined_loss_grad(&p, &ra, &m, Some(&s), &cfg(mode)).unwrap().loss;
            let lb = combined_loss_grad(&p, &rb, &m, Some(&s), &cfg(mode)).unwrap().loss;
            prop_assert!((la - lb).abs() <= 1e-12 * (1.0 + la.abs()));
        }
    }

    #[test]
    fn losses_are_nonnegative(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for mode in [LossMode::Mse, LossMode::CvarQ, LossMode::CvarQV] {
            let case = gradient_case(&mut rng, mode);
            let refs: Vec<&Sample> = case.batch.iter().collect();
            let c = combined_loss_grad(&case.params, &refs, &case.model, Some(&case.s), &case.cfg).unwrap();
            prop_assert!(c.loss >= 0.0);
            prop_assert!(c.components.mse >= 0.0);
            prop_assert!(c.components.cvar_q.unwrap_or(0.0) >= 0.0);
            prop_assert!(c.components.cvar_v.unwrap_or(0.0) >= 0.0);
        }
    }
}
