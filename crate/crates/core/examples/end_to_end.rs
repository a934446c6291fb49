//! End-to-end walkthrough: generate a synthetic scene, pretrain the
//! conditional encoder, train the denoiser, and sample labels.
//!
//!     cargo run --release --example end_to_end [epochs] [lr] [repeat] [batch]

use std::time::Instant;

use pointdiffusion::condition::{pretrain_condition, ConditionParams, PretrainConfig};
use pointdiffusion::config::ModelConfig;
use pointdiffusion::data::{generate_scene, SceneSpec};
use pointdiffusion::eval::Sampler;
use pointdiffusion::geometry::IndexCache;
use pointdiffusion::network::init_params;
use pointdiffusion::schedule::make_linear_schedule;
use pointdiffusion::train::{train_denoiser, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(150);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(3e-3);
    let repeat: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(4);
    let batch: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1);

    let (cloud, labels) = generate_scene(&SceneSpec::separable(3, 86, 7)).unwrap();
    println!("scene: {} points, 3 classes", cloud.n_points());

    let cfg = ModelConfig::default_for(3);
    let cache = IndexCache::new();

    let t0 = Instant::now();
    let mut cond = ConditionParams::init(&cfg, 1).unwrap();
    let pcfg = PretrainConfig {
        lr: 5e-3,
        weight_decay: 0.0,
        epochs: 80,
        seed: 1,
    };
    let dataset = vec![(cloud.clone(), labels.clone())];
    let report = pretrain_condition(&dataset, &mut cond, &cfg, &pcfg, &cache).unwrap();
    println!(
        "pretrain: accuracy {:.4} in {:.1}s ({} epochs)",
        report.train_accuracy,
        t0.elapsed().as_secs_f64(),
        pcfg.epochs
    );

    // At 20 steps the betas must be large enough that the forward process
    // actually reaches the pure-noise state sampling starts from.
    let sched = make_linear_schedule(20, 0.02, 0.45).unwrap();
    let tcfg = TrainConfig {
        gamma: 0.5,
        lr,
        weight_decay: 0.0,
        epochs,
        batch_size: batch,
        seed: 2,
        ..Default::default()
    };
    let scenes: Vec<_> = (0..repeat)
        .map(|_| (cloud.clone(), labels.clone()))
        .collect();
    let t1 = Instant::now();
    let mut dnet = init_params(&cfg, 3).unwrap();
    let fit =
        train_denoiser(&scenes, &cond, &mut dnet, &cfg, &tcfg, &sched, &cache, None).unwrap();
    let train_secs = t1.elapsed().as_secs_f64();
    println!(
        "train: {} steps in {:.1}s ({:.2}s/step), loss {:.4} -> {:.4}",
        fit.steps,
        train_secs,
        train_secs / fit.steps as f64,
        fit.step_losses.first().unwrap(),
        fit.step_losses.last().unwrap()
    );

    let t2 = Instant::now();
    let sampler = Sampler {
        cfg: &cfg,
        condition: &cond,
        denoiser: &dnet,
        beta_start: 0.02,
        beta_end: 0.45,
    };
    let eval_scenes = vec![(cloud, labels)];
    let report = sampler.evaluate(&eval_scenes, 20, 9).unwrap();
    println!(
        "eval: mIoU {:.4}, accuracy {:.4} in {:.1}s",
        report.miou,
        report.accuracy,
        t2.elapsed().as_secs_f64()
    );
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
