use orthrus::sb::SbEngine;
use orthrus::sim::config::ScenarioConfig;
use orthrus::sim::run_scenario;

fn main() {
    for (n, f, engine, txs) in [
        (4usize, 1usize, SbEngine::Ideal, 400usize),
        (4, 1, SbEngine::Pbft, 400),
        (8, 2, SbEngine::Ideal, 400),
        (8, 2, SbEngine::Pbft, 400),
        (16, 5, SbEngine::Ideal, 400),
        (16, 5, SbEngine::Pbft, 400),
        (16, 5, SbEngine::Ideal, 1000),
    ] {
        let mut cfg = ScenarioConfig::default();
        cfg.scenario.replicas = n;
        cfg.scenario.faults_tolerated = f;
        cfg.scenario.engine = engine;
        cfg.scenario.epoch_length = 8;
        cfg.scenario.batch_size = 64;
        cfg.scenario.batch_timeout_ms = 50;
        cfg.workload.accounts = 200;
        cfg.workload.total_txs = txs;
        cfg.workload.submit_rate_tps = 2000;
        cfg.network.straggler_replica = Some(1);
        let start = std::time::Instant::now();
        let result = run_scenario(&cfg, 1).expect("run");
        println!(
            "n={n} f={f} engine={engine} txs={txs}: wall={:?} sim={:.2}s confirmed={} ok={}",
            start.elapsed(),
            result.completion as f64 / 1e9,
            result.metrics.confirmed_count(),
            result.passed(),
        );
    }
}
