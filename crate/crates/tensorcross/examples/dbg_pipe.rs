use tensorcross::cross::CrossOptions;
use tensorcross::pipeline::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(6);
    let inner: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(10);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let kt: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(10);
    let kv: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(6);
    for seed in 1..=5u64 {
        let task = SyntheticTask::generate(&[6, 6, 6], 2, kt, kv, seed).unwrap();
        let cfg = PipelineConfig {
            ranks: vec![3, 3, 2],
            n_channels: 2,
            neighborhood: 3,
            hidden: 8,
            epochs,
            inner_steps: inner,
            feature_rank: 3,
            head: HeadKind::Scalar,
            use_covariate: false,
            lr,
            seed,
            cross: CrossOptions { max_sweeps: 2, val_size: 32, ..CrossOptions::default() },
        };
        let t0 = std::time::Instant::now();
        let r = run_experiment(&task, &cfg).unwrap();
        let first = r.trace.first().map(|t| t.loss).unwrap_or(0.0);
        let last = r.trace.last().map(|t| t.loss).unwrap_or(0.0);
        println!(
            "seed {seed}: loss {first:.4}->{last:.4} train {:.4}->{:.4} val {:.4}->{:.4} ratio {:.3} ({:.1?})",
            r.untrained.train_rmse, r.trained.train_rmse,
            r.untrained.val_rmse, r.trained.val_rmse,
            r.trained.val_rmse / r.untrained.val_rmse,
            t0.elapsed()
        );
    }
}
