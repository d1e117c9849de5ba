//! Compares the trailing fraction of alive experts with and without the
//! auxiliary loss on a sparse sum of 16 embedded manifolds.
//!
//! cargo run --release --example aux_revival -- 3000 5

use smixae::data::{sample_mlrh, ManifoldKind, MlrhFeature, MlrhSpec};
use smixae::model::SmixaeConfig;
use smixae::train::{tiny_run, train};

fn spec() -> MlrhSpec {
    let features = (0..16)
        .map(|f| MlrhFeature {
            kind: match f % 4 {
                0 => ManifoldKind::Torus { major_radius: 2.0, minor_radius: 0.75 },
                1 => ManifoldKind::Helix { radius: 1.0, pitch: 1.0, turns: 2.0 },
                2 => ManifoldKind::Circle { radius: 1.5 },
                _ => ManifoldKind::Line { length: 3.0 },
            },
            noise_sigma: 0.0,
            embed_seed: 100 + f as u64,
            offset: None,
            frame: None,
        })
        .collect();
    MlrhSpec { features, active_per_sample: 2, n: 64 }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let shard = sample_mlrh(&spec(), 50_000, 7).unwrap();
    for seed in 0..seeds {
        let mut alive = Vec::new();
        for lambda in [9e-6, 0.0] {
            let mut model = SmixaeConfig::full_scale(64);
            (model.j, model.k, model.lambda_aux) = (32, 4, lambda);
            let mut run = tiny_run(model, steps, 256);
            run.seed = seed;
            let out = train(&run, std::slice::from_ref(&shard), None).unwrap();
            alive.push(out.final_frac_alive);
        }
        println!("seed {seed}: alive with aux {:.4}, without {:.4}", alive[0], alive[1]);
    }
}
