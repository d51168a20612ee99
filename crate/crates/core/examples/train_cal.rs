//! Scratch harness: staged training schedules against a corpus file.
//! Usage: train_cal <corpus.jsonl> <lr:epochs> [<lr:epochs> ...]

use riskforge_core::io::load_corpus;
use riskforge_core::motion_prior::{ModelConfig, MotionPriorModel, TrainingConfig};
use std::time::Instant;

fn main() {
    let mut args = std::env::args().skip(1);
    let corpus_path = args.next().expect("corpus path");
    let stages: Vec<(f64, usize)> = args
        .map(|s| {
            let (lr, ep) = s.split_once(':').expect("lr:epochs");
            (lr.parse().unwrap(), ep.parse().unwrap())
        })
        .collect();
    let scenes = load_corpus(corpus_path.as_ref()).expect("corpus loads");
    eprintln!("{} scenes", scenes.len());

    let env_num = |k: &str, d: f64| -> f64 {
        std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
    };
    let batch = env_num("BATCH", 32.0) as usize;
    let w_kl = env_num("WKL", 0.1);
    let hidden = env_num("HIDDEN", 64.0) as usize;
    let latent = env_num("LATENT", 16.0) as usize;
    eprintln!("batch {batch} w_kl {w_kl} hidden {hidden} latent {latent}");

    let mc = ModelConfig {
        hidden_dim: hidden,
        latent_dim: latent,
        ..ModelConfig::default()
    };
    let t0 = Instant::now();
    let mut model: Option<MotionPriorModel<f64>> = None;
    for (i, (lr, epochs)) in stages.iter().enumerate() {
        let tc = TrainingConfig {
            learning_rate: *lr,
            epochs: *epochs,
            seed: i as u64,
            batch_size: batch,
            w_kl,
            ..TrainingConfig::default()
        };
        let history = match &mut model {
            None => {
                let (m, h) = MotionPriorModel::train(&scenes, &mc, &tc).expect("train");
                model = Some(m);
                h
            }
            Some(m) => m.fit(&scenes, &tc).expect("fit"),
        };
        let last = history.last().unwrap();
        let mse = model.as_ref().unwrap().reconstruction_mse(&scenes).unwrap();
        eprintln!(
            "stage {i} lr {lr} x{epochs}: loss {:.4} recon {:.4} kl {:.4} -> posterior-mean MSE {:.4} ({:.1} s)",
            last.total,
            last.recon,
            last.kl,
            mse,
            t0.elapsed().as_secs_f64()
        );
    }
}
