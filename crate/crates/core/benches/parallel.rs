//! Sequential vs rayon execution of the data-parallel kernels: shot
//! sampling, Sinkhorn potential updates, and the LABS angle grid.

use std::collections::BTreeMap;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use noisefit::channels::depolarizing_2q_channel;
use noisefit::circuit_io::GateType;
use noisefit::labs_app::{build_qaoa_parity_circuit, grid_search, lower_parity_circuit, LabsConfig, QaoaParams};
use noisefit::linalg_diff::{ComplexTensor, Primitive};
use noisefit::losses::SinkhornOp;
use noisefit::mpdo;
use noisefit::noise_model::ChannelKey;
use noisefit::par::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn sampling(c: &mut Criterion) {
    let cfg = LabsConfig { chi: 16, kappa: 16, ..LabsConfig::default() };
    let pc = build_qaoa_parity_circuit(4, QaoaParams::new(0.4, 0.3).unwrap()).unwrap();
    let prog = lower_parity_circuit(&pc).unwrap();
    let sets = BTreeMap::from([(ChannelKey::Gate(GateType::Cz), depolarizing_2q_channel(0.01).unwrap())]);
    let st = mpdo::run_kraus(&prog, &sets, cfg.sim()).unwrap();
    let mut g = c.benchmark_group("sample_16384_shots");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| mpdo::sample(black_box(&st), &prog.measured, 16384, 7, exec).unwrap())
        });
    }
    g.finish();
}

fn sinkhorn(c: &mut Criterion) {
    let width = 8;
    let n = 1usize << width;
    let cost: Vec<f64> = (0..n * n).map(|k| ((k / n) ^ (k % n)).count_ones() as f64).collect();
    let mu: Vec<f64> = (0..n).map(|x| 1.0 + (x % 7) as f64).collect();
    let nu: Vec<f64> = (0..n).map(|x| 1.0 + (x % 5) as f64).collect();
    let (sm, sn) = (mu.iter().sum::<f64>(), nu.iter().sum::<f64>());
    let mu = ComplexTensor::from_real(&mu.iter().map(|v| v / sm).collect::<Vec<_>>(), &[n]).unwrap();
    let nu: Vec<f64> = nu.iter().map(|v| v / sn).collect();
    let mut g = c.benchmark_group("sinkhorn_256x256_64_iters");
    for (name, exec) in MODES {
        let op = SinkhornOp::new(nu.clone(), cost.clone(), 0.1, 64).unwrap().with_exec(exec);
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| op.forward(&[black_box(&mu)]).unwrap()));
    }
    g.finish();
}

fn labs_grid(c: &mut Criterion) {
    let mut g = c.benchmark_group("labs_grid_n4_3x3");
    g.sample_size(10);
    for (name, exec) in MODES {
        let cfg = LabsConfig { chi: 16, kappa: 4, exec, ..LabsConfig::default() };
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| grid_search(black_box(4), 3, &cfg).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, sampling, sinkhorn, labs_grid);
criterion_main!(benches);
