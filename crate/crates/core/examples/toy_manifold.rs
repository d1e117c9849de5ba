//! Trains a small SMIXAE on a torus or helix embedded in R^100 and reports
//! explained variance.
//!
//! cargo run --release --example toy_manifold -- torus 20000 0.001

use smixae::data::{manifold_shard, ManifoldKind, ManifoldSpec};
use smixae::eval::{core_metrics, sequential_batches};
use smixae::model::{AuxNorm, SmixaeConfig};
use smixae::train::{train, TrainRunConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let kind = args.get(1).map_or("torus", String::as_str);
    let steps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5000);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let normalize = args.get(4).is_none_or(|s| s != "raw");
    let lambda: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(9e-6);
    let manifold = match kind {
        "helix" => ManifoldKind::Helix { radius: 1.0, pitch: 1.0, turns: 3.0 },
        _ => ManifoldKind::Torus { major_radius: 2.0, minor_radius: 0.75 },
    };
    let spec = ManifoldSpec { kind: manifold, noise_sigma: 0.0, ambient_dim: 100 };
    let shards = [manifold_shard(&spec, 50_000, 1, 2).unwrap()];
    let model = SmixaeConfig {
        n: 100,
        j: 8,
        p: 16,
        b: 3,
        k: 1,
        lambda_aux: lambda,
        threshold_lr: 0.1,
        leaky_slope: 1e-4,
        decoder_init_norm: 0.1,
        aux_norm: AuxNorm::Scaled,
    };
    let run = TrainRunConfig {
        model: model.clone(),
        total_tokens: steps * 256,
        batch_size: 256,
        lr,
        warmup_steps: steps / 20,
        decay_fraction: 0.2,
        adam: Default::default(),
        seed: 0,
        checkpoint_every: 0,
        log_every: (steps / 10).max(1),
        normalize_input: normalize,
        frac_alive_window: 100,
    };
    let t0 = std::time::Instant::now();
    let out = train(&run, &shards, None).unwrap();
    for r in &out.log {
        println!("step {:>6} mse {:.5} aux {:.2e} fired {:.2} t {:.4}", r.step, r.mse, r.aux, r.frac_experts_fired_window, r.t);
    }
    let rep = core_metrics(&out.params, &model, sequential_batches(&shards, 4096), out.normalization.as_ref()).unwrap();
    println!("{kind}: EV {:.4}  L0 {:.3}  alive {:.2}  ({:.1}s)", rep.explained_variance, rep.l0_expert, rep.frac_alive, t0.elapsed().as_secs_f64());
}
