use halfrad::ensembles::*;
use halfrad::oracle::OracleConfig;
use halfrad::recovery::*;
use halfrad::stream::substream;
use halfrad::vecops::l2_norm;
use std::time::Instant;

fn run_exact(inst: &MeasurementInstance, seed: u64) -> (f64, f64, u64, u64) {
    let truth = inst.truth.as_ref().unwrap();
    let x_star = truth.x_star.to_dense();
    let mut oracle = OracleConfig::practical(inst.meta.s, inst.meta.d)
        .for_instance(&inst.a, Some(truth.m));
    oracle.max_inner_iters = Some(150 * inst.meta.n);
    let cfg = RecoveryConfig::exact(oracle, 1.0, 1e-6);
    let mut rng = substream(seed, 77);
    let t0 = Instant::now();
    let report = recover_exact(&inst.a, &inst.b, &cfg, &mut rng, Some(&x_star)).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let err = l2_norm(
        &report.signal.to_dense().iter().zip(&x_star).map(|(a, b)| a - b).collect::<Vec<_>>(),
    );
    (err, dt, report.oracle_samples, report.iterations)
}

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "c1".into());
    let (kind, n_total, label) = match mode.as_str() {
        "c2" => (AdversaryKind::DuplicateRow, 800, "dup800"),
        _ => (AdversaryKind::None, 200, "gauss200"),
    };
    for seed in 0..3u64 {
        let spec = AdversarySpec { kind: kind.clone(), n_total };
        let inst = make_instance(&spec, 200, 400, 5, None, 1.0, seed).unwrap();
        let (err, dt, samples, iters) = run_exact(&inst, seed);
        println!("{label} seed {seed}: err={err:.3e} time={dt:.2}s samples={samples} oracle_calls={iters}");
    }
}
