use noisefit::circuit_io::{Circuit, CouplingMap, Gate};
use noisefit::linalg_diff::ops::upper_pairs;
use noisefit::noise_model::{lower, NoiseModel, NoisyProgram};
use noisefit::oracle_sim::{identity_resolver, injection_resolver, synth_counts};
use noisefit::trainer::{evaluate, locate_param, loss_and_grad, train, LossKind, TrainConfig};

fn three_qubit() -> Circuit {
    let mut c = Circuit::new(3, 3);
    c.push(Gate::Sx, &[0]);
    c.push(Gate::Cz, &[0, 1]);
    c.push(Gate::Sx, &[2]);
    c.push(Gate::Cz, &[1, 2]);
    c.push(Gate::Rz(0.3), &[1]);
    c.push(Gate::Sx, &[1]);
    c.measure_all();
    c
}

fn synthetic(c: &Circuit, p: f64, shots: u64) -> (NoisyProgram, noisefit::circuit_io::CountsDistribution) {
    let types = c.gate_types();
    let prog = lower(c, &NoiseModel::init_identity(&types, 4).unwrap(), &CouplingMap::linear(c.num_qubits)).unwrap();
    let counts = synth_counts(&prog, &injection_resolver(&types, p, p).unwrap(), shots, 1).unwrap();
    (prog, counts)
}

/// (row, col) of H(θ) that a local parameter index feeds.
fn h_entry(local: usize, dn: usize) -> (usize, usize) {
    if local < dn {
        return (local, local);
    }
    upper_pairs(dn).nth((local - dn) / 2).unwrap()
}

#[test]
fn identity_is_stationary_along_dissipative_directions() {
    let c = three_qubit();
    let (prog, counts) = synthetic(&c, 0.05, 4000);
    let model = NoiseModel::init_identity(&c.gate_types(), 4).unwrap();
    for loss in [LossKind::Nll, LossKind::ot_default()] {
        let cfg = TrainConfig { loss, ..TrainConfig::default() };
        let (_, g) = loss_and_grad(&prog, &counts, &model, &cfg).unwrap();
        let mut coherent = 0.0f64;
        for (i, gi) in g.iter().enumerate() {
            let (key, local) = locate_param(&model, i).unwrap();
            let d = key.dim();
            let (r, col) = h_entry(local, d * model.n_kraus());
            if r < d && col < d {
                coherent = coherent.max(gi.abs());
            } else {
                assert!(gi.abs() < 1e-12, "{key} entry ({r},{col}) has gradient {gi}");
            }
        }
        assert!(coherent > 1e-6, "no coherent gradient at all");
    }
}

#[test]
fn noiseless_counts_sit_on_the_entropy_floor() {
    let mut c = Circuit::new(2, 2);
    c.push(Gate::X, &[0]);
    c.push(Gate::Cz, &[0, 1]);
    c.measure_all();
    let types = c.gate_types();
    let model = NoiseModel::init_identity(&types, 4).unwrap();
    let prog = lower(&c, &model, &CouplingMap::linear(2)).unwrap();
    let counts = synth_counts(&prog, &identity_resolver(&types), 1000, 3).unwrap();
    let cfg = TrainConfig { max_iters: 3, ..TrainConfig::default() };
    let r = train(&prog, &counts, &model, &cfg, None).unwrap();
    assert!((r.history.records[0].loss - r.entropy_floor).abs() < 1e-6);
    let ev = evaluate(&prog, &counts, &model, &cfg).unwrap();
    assert!((ev.classical_fidelity - 1.0).abs() < 1e-6);
    assert!(ev.infidelity.iter().all(|row| row.infidelity.abs() < 1e-12));
}

#[test]
fn ot_loss_trends_down() {
    let c = three_qubit();
    let (prog, counts) = synthetic(&c, 0.03, 8192);
    let model = NoiseModel::init_random(&c.gate_types(), 4, 1e-3, 2).unwrap();
    let cfg = TrainConfig { loss: LossKind::ot_default(), max_iters: 100, learning_rate: 3e-3, ..TrainConfig::default() };
    let r = train(&prog, &counts, &model, &cfg, None).unwrap();
    let l = r.history.losses();
    let first: f64 = l[..50].iter().sum::<f64>() / 50.0;
    let last: f64 = l[50..].iter().sum::<f64>() / 50.0;
    assert!(last < first, "{first} -> {last}");
    assert!(r.gradient_check.unwrap() < 1e-3);
}

#[test]
fn runs_are_deterministic_and_keep_the_best_model() {
    let c = three_qubit();
    let (prog, counts) = synthetic(&c, 0.02, 4096);
    let model = NoiseModel::init_random(&c.gate_types(), 4, 1e-3, 5).unwrap();
    let cfg = TrainConfig { max_iters: 25, learning_rate: 1e-2, ..TrainConfig::default() };
    let a = train(&prog, &counts, &model, &cfg, None).unwrap();
    let b = train(&prog, &counts, &model, &cfg, None).unwrap();
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(a.history.losses()), bits(b.history.losses()));
    assert_eq!(a.model.to_json(), b.model.to_json());
    assert!(a.history.losses().iter().all(|&l| a.best_loss <= l));
    let cfg_eval = TrainConfig { loss: LossKind::Nll, ..cfg };
    let best = evaluate(&prog, &counts, &a.model, &cfg_eval).unwrap();
    assert!((best.nll - a.best_loss).abs() < 1e-12);
}
