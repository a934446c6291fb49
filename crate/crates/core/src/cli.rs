//! Command-line surface: data generation, pretraining, training, sampling,
//! evaluation, step sweeps, the perturbation suite, and gradient checks.
//!
//! Configuration is a flat UTF-8 `key=value` file (`#` starts a comment)
//! plus `--key value` flag overrides; flags win. Unknown keys are usage
//! errors that list the valid keys. Exit codes: 0 success, 1 usage error,
//! 2 runtime error.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::condition::{pretrain_condition, ConditionParams, PretrainConfig};
use crate::config::ModelConfig;
use crate::data::{generate_scene, grid_subsample, load_cloud, save_cloud, SceneSpec};
use crate::error::Error;
use crate::eval::{miou, run_perturbation_suite, sweep_steps, Sampler};
use crate::geometry::{IndexCache, PointCloud};
use crate::network::{init_params, load_model, save_model};
use crate::train::{grad_check, train_denoiser, GradCheckTarget, LabelLoss, TrainConfig};

/// `(key, description)` for every accepted configuration key.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("t", "diffusion step count (default 20)"),
    ("beta_start", "first variance of the linear schedule (default 1e-4)"),
    ("beta_end", "last variance of the linear schedule (default 0.02)"),
    ("gamma", "loss balance in (0,1) (default 0.5)"),
    ("k", "neighborhood size (default 16)"),
    ("levels", "encoder/decoder level count (default 4)"),
    ("channels", "comma list: stem width then one width per level"),
    ("ratios", "comma list of per-level downsample ratios (default 0.25 each)"),
    ("time_dim", "sinusoidal time embedding width (default 32)"),
    ("cond_levels", "conditional encoder depth (default 2)"),
    ("use_logits", "condition on head logits instead of features (0|1)"),
    ("lr", "denoiser learning rate (default 3e-3)"),
    ("weight_decay", "decoupled weight decay (default 0)"),
    ("epochs", "denoiser training epochs (default 200)"),
    ("batch", "training batch size (default 4)"),
    ("milestones", "comma list of epochs where lr decays"),
    ("lr_decay", "lr multiplier at each milestone (default 0.1)"),
    ("label_loss", "label term: mse|ce (default mse)"),
    ("scale", "label signal scale (default 1.0)"),
    ("seed", "seed for the subcommand's randomized parts (default 0)"),
    ("pre_lr", "conditional pretraining learning rate (default 5e-3)"),
    ("pre_epochs", "conditional pretraining epochs (default 150)"),
    ("preset", "gen-data scene preset: separable|hard (default separable)"),
    ("classes", "gen-data class count (default 3)"),
    ("points", "gen-data total point count (default 256)"),
    ("cell", "gen-data grid-subsample cell size, 0 disables (default 0)"),
    ("max_points", "guard on the point count after subsampling (default 80000)"),
    ("repeat", "training dataset: number of copies of the scene (default 4)"),
    ("data", "input cloud path (.pdpc)"),
    ("pred", "predicted-labels cloud path for eval (.pdpc)"),
    ("ckpt", "model checkpoint path (.pdck)"),
    ("out", "output path for the subcommand's artifact"),
    ("out_dir", "directory for reports and default outputs (default out)"),
    ("steps", "comma list of step counts for sweep-steps (default 5,10,20)"),
    ("block", "gradcheck target: linear|nle|pft|dpn|net (default nle)"),
    ("h", "gradcheck finite-difference step (default per target)"),
    ("tol", "gradcheck pass tolerance (default per target)"),
];

const SUBCOMMANDS: &[&str] = &[
    "gen-data",
    "pretrain",
    "train",
    "sample",
    "eval",
    "sweep-steps",
    "perturb",
    "gradcheck",
];

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: &str) -> CliError {
    CliError::Usage(msg.to_string())
}

fn key_listing() -> String {
    let mut out = String::from("valid keys:\n");
    for (k, d) in CONFIG_KEYS {
        out.push_str(&format!("  {k:<13} {d}\n"));
    }
    out
}

/// Flat configuration: defaults, then file values, then flag overrides.
pub struct Config {
    values: HashMap<String, String>,
}

impl Config {
    fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let key = key.to_ascii_lowercase();
        if !CONFIG_KEYS.iter().any(|(k, _)| *k == key) {
            return Err(usage(&format!(
                "unknown configuration key {key:?}\n{}",
                key_listing()
            )));
        }
        self.values.insert(key, value.to_string());
        Ok(())
    }

    fn parse_file(&mut self, path: &Path) -> CliResult<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| usage(&format!("cannot read config file {}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(usage(&format!(
                    "{}:{}: expected key=value, got {raw:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    fn str_or(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }

    fn required(&self, key: &str) -> CliResult<String> {
        self.get(key)
            .map(|s| s.to_string())
            .ok_or_else(|| usage(&format!("missing required key {key:?}")))
    }

    fn usize_or(&self, key: &str, default: usize) -> CliResult<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| usage(&format!("key {key:?}: {v:?} is not a count"))),
        }
    }

    fn u64_or(&self, key: &str, default: u64) -> CliResult<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| usage(&format!("key {key:?}: {v:?} is not an integer"))),
        }
    }

    fn f64_or(&self, key: &str, default: f64) -> CliResult<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| usage(&format!("key {key:?}: {v:?} is not a number"))),
        }
    }

    fn bool_or(&self, key: &str, default: bool) -> CliResult<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("0") | Some("false") => Ok(false),
            Some("1") | Some("true") => Ok(true),
            Some(v) => Err(usage(&format!("key {key:?}: {v:?} is not 0|1"))),
        }
    }

    fn usize_list(&self, key: &str, default: &[usize]) -> CliResult<Vec<usize>> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| usage(&format!("key {key:?}: {p:?} is not a count")))
                })
                .collect(),
        }
    }

    fn f64_list(&self, key: &str, default: &[f64]) -> CliResult<Vec<f64>> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| usage(&format!("key {key:?}: {p:?} is not a number")))
                })
                .collect(),
        }
    }
}

fn default_channels(levels: usize) -> Vec<usize> {
    let mut plan = Vec::with_capacity(levels + 1);
    let mut width = 32usize;
    plan.push(width);
    for _ in 0..levels {
        width = (width * 2).min(256);
        plan.push(width);
    }
    plan
}

fn model_config_from(cfg: &Config, n_classes: usize) -> CliResult<ModelConfig> {
    let levels = cfg.usize_or("levels", 4)?;
    let channels = cfg.usize_list("channels", &default_channels(levels))?;
    if channels.len() != levels + 1 {
        return Err(usage(&format!(
            "channels has {} entries but levels={} needs {}",
            channels.len(),
            levels,
            levels + 1
        )));
    }
    let ratios = cfg.f64_list("ratios", &vec![0.25; levels])?;
    let mc = ModelConfig {
        n_classes,
        channels,
        k: cfg.usize_or("k", 16)?,
        ratios,
        time_dim: cfg.usize_or("time_dim", 32)?,
        label_scale: cfg.f64_or("scale", 1.0)?,
        feature_dim: 0,
        cond_levels: cfg.usize_or("cond_levels", 2)?,
        use_logits: cfg.bool_or("use_logits", false)?,
    };
    mc.validate().map_err(|e| usage(&e.to_string()))?;
    Ok(mc)
}

fn out_dir(cfg: &Config) -> CliResult<PathBuf> {
    let dir = PathBuf::from(cfg.str_or("out_dir", "out"));
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn load_labeled(path: &str) -> CliResult<(PointCloud, Vec<usize>, usize)> {
    let file = load_cloud(Path::new(path))?;
    let labels = file.labels.ok_or_else(|| {
        CliError::Runtime(format!("{path} carries no labels, but labels are required"))
    })?;
    Ok((file.cloud, labels, file.n_classes))
}

/// The training dataset: the labeled scene, listed `repeat` times so one
/// epoch takes several optimizer steps with fresh noise draws.
fn training_set(
    cloud: &PointCloud,
    labels: &[usize],
    repeat: usize,
) -> Vec<(PointCloud, Vec<usize>)> {
    (0..repeat.max(1))
        .map(|_| (cloud.clone(), labels.to_vec()))
        .collect()
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_gen_data(cfg: &Config) -> CliResult<()> {
    let classes = cfg.usize_or("classes", 3)?;
    let points = cfg.usize_or("points", 256)?;
    if classes < 2 || points < classes {
        return Err(usage("need at least 2 classes and one point per class"));
    }
    let seed = cfg.u64_or("seed", 0)?;
    let preset = cfg.str_or("preset", "separable");
    let mut spec = match preset.as_str() {
        "separable" => SceneSpec::separable(classes, 1, seed),
        "hard" => SceneSpec::hard(classes, 1, seed),
        other => return Err(usage(&format!("unknown preset {other:?}"))),
    };
    // Distribute the total as evenly as possible.
    let base = points / classes;
    let extra = points % classes;
    for (i, c) in spec.classes.iter_mut().enumerate() {
        c.count = base + usize::from(i < extra);
    }
    let (mut cloud, mut labels) = generate_scene(&spec)?;
    let cell = cfg.f64_or("cell", 0.0)?;
    if cell > 0.0 {
        let (c, l) = grid_subsample(&cloud, &labels, cell)?;
        cloud = c;
        labels = l;
    }
    let max_points = cfg.usize_or("max_points", 80_000)?;
    if cloud.n_points() > max_points {
        return Err(CliError::Runtime(format!(
            "scene has {} points, above the max_points guard of {max_points}",
            cloud.n_points()
        )));
    }
    let dir = out_dir(cfg)?;
    let out = cfg.str_or("out", dir.join("scene.pdpc").to_str().unwrap());
    save_cloud(Path::new(&out), &cloud, Some(&labels), classes)?;
    println!(
        "wrote {} points, {} classes to {out}",
        cloud.n_points(),
        classes
    );
    Ok(())
}

fn cmd_pretrain(cfg: &Config) -> CliResult<()> {
    let data = cfg.required("data")?;
    let (cloud, labels, n_classes) = load_labeled(&data)?;
    let mc = model_config_from(cfg, n_classes)?;
    let seed = cfg.u64_or("seed", 0)?;
    let mut params = ConditionParams::init(&mc, seed)?;
    let pcfg = PretrainConfig {
        lr: cfg.f64_or("pre_lr", 5e-3)?,
        weight_decay: cfg.f64_or("weight_decay", 0.0)?,
        epochs: cfg.usize_or("pre_epochs", 150)?,
        seed,
    };
    let cache = IndexCache::new();
    let dataset = vec![(cloud, labels)];
    let report = pretrain_condition(&dataset, &mut params, &mc, &pcfg, &cache)?;
    let dir = out_dir(cfg)?;
    let out = cfg.str_or("out", dir.join("model.pdck").to_str().unwrap());
    save_model(Path::new(&out), &mc, &params, None)?;
    println!(
        "pretrained conditional network: accuracy {:.4} over {} epochs; wrote {out}",
        report.train_accuracy, pcfg.epochs
    );
    Ok(())
}

fn cmd_train(cfg: &Config) -> CliResult<()> {
    let data = cfg.required("data")?;
    let (cloud, labels, _) = load_labeled(&data)?;
    let dir = out_dir(cfg)?;
    let ckpt_path = cfg.str_or("ckpt", dir.join("model.pdck").to_str().unwrap());
    let ckpt = load_model(Path::new(&ckpt_path))?;
    let mc = ckpt.config.clone();
    let seed = cfg.u64_or("seed", 0)?;
    let tcfg = TrainConfig {
        gamma: cfg.f64_or("gamma", 0.5)?,
        lr: cfg.f64_or("lr", 3e-3)?,
        weight_decay: cfg.f64_or("weight_decay", 0.0)?,
        epochs: cfg.usize_or("epochs", 200)?,
        batch_size: cfg.usize_or("batch", 4)?,
        seed,
        label_loss: LabelLoss::parse(&cfg.str_or("label_loss", "mse"))?,
        freeze_condition: true,
        milestones: cfg.usize_list("milestones", &[])?,
        lr_decay: cfg.f64_or("lr_decay", 0.1)?,
    };
    let sched = crate::schedule::make_linear_schedule(
        cfg.usize_or("t", 20)?,
        cfg.f64_or("beta_start", 1e-4)?,
        cfg.f64_or("beta_end", 0.02)?,
    )?;
    let mut dnet = init_params(&mc, seed)?;
    let scenes = training_set(&cloud, &labels, cfg.usize_or("repeat", 4)?);
    let cache = IndexCache::new();
    let log_path = dir.join("train_log.csv");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| CliError::Runtime(format!("cannot open {}: {e}", log_path.display())))?;
    let report = train_denoiser(
        &scenes,
        &ckpt.condition,
        &mut dnet,
        &mc,
        &tcfg,
        &sched,
        &cache,
        Some(&mut log),
    )?;
    let out = cfg.str_or("out", &ckpt_path);
    save_model(Path::new(&out), &mc, &ckpt.condition, Some(&dnet))?;
    let last = report.step_losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained denoiser for {} steps (final loss {last:.6}); wrote {out}",
        report.steps
    );
    Ok(())
}

fn sampler_from<'a>(cfg: &Config, ckpt: &'a crate::network::ModelCheckpoint) -> CliResult<Sampler<'a>> {
    let denoiser = ckpt
        .denoiser
        .as_ref()
        .ok_or_else(|| CliError::Runtime("checkpoint has no denoiser; run train first".into()))?;
    Ok(Sampler {
        cfg: &ckpt.config,
        condition: &ckpt.condition,
        denoiser,
        beta_start: cfg.f64_or("beta_start", 1e-4)?,
        beta_end: cfg.f64_or("beta_end", 0.02)?,
    })
}

fn cmd_sample(cfg: &Config) -> CliResult<()> {
    let data = cfg.required("data")?;
    let file = load_cloud(Path::new(&data))?;
    let dir = out_dir(cfg)?;
    let ckpt_path = cfg.str_or("ckpt", dir.join("model.pdck").to_str().unwrap());
    let ckpt = load_model(Path::new(&ckpt_path))?;
    let sampler = sampler_from(cfg, &ckpt)?;
    let t = cfg.usize_or("t", 20)?;
    let seed = cfg.u64_or("seed", 0)?;
    let sched = crate::schedule::make_linear_schedule(t, sampler.beta_start, sampler.beta_end)?;
    let cache = IndexCache::new();
    let bundle =
        crate::condition::condition_bundle(&file.cloud, sampler.condition, &cache, sampler.cfg)?;
    let (pred, trace) = crate::network::sample_labels(
        &file.cloud,
        &bundle,
        &sched,
        seed,
        sampler.denoiser,
        &cache,
        sampler.cfg,
        0,
    )?;
    let out = cfg.str_or("out", dir.join("labels.pdpc").to_str().unwrap());
    save_cloud(
        Path::new(&out),
        &file.cloud,
        Some(&pred),
        sampler.cfg.n_classes,
    )?;
    let mut histogram = vec![0usize; sampler.cfg.n_classes];
    for &p in &pred {
        histogram[p] += 1;
    }
    println!(
        "sampled labels over {} steps (seed {seed}); class histogram {histogram:?}; wrote {out}",
        trace.steps
    );
    Ok(())
}

fn cmd_eval(cfg: &Config) -> CliResult<()> {
    let data = cfg.required("data")?;
    let (cloud, gt, n_classes) = load_labeled(&data)?;
    let dir = out_dir(cfg)?;
    let report = if let Some(pred_path) = cfg.get("pred") {
        // Compare a predicted-labels file directly against the ground truth.
        let (pred_cloud, pred, _) = load_labeled(pred_path)?;
        if pred_cloud.n_points() != cloud.n_points() {
            return Err(CliError::Runtime(format!(
                "{pred_path} has {} points, data has {}",
                pred_cloud.n_points(),
                cloud.n_points()
            )));
        }
        miou(&pred, &gt, n_classes)?
    } else {
        let ckpt_path = cfg.str_or("ckpt", dir.join("model.pdck").to_str().unwrap());
        let ckpt = load_model(Path::new(&ckpt_path))?;
        let sampler = sampler_from(cfg, &ckpt)?;
        let scenes = vec![(cloud, gt)];
        let mut report =
            sampler.evaluate(&scenes, cfg.usize_or("t", 20)?, cfg.u64_or("seed", 0)?)?;
        report.meta.gamma = cfg.f64_or("gamma", 0.5)?;
        // Desk-scale stand-ins for a compute budget: parameter counts.
        use crate::nn::Params as _;
        println!(
            "parameters: denoiser {}, condition {}",
            ckpt.denoiser.as_ref().map_or(0, |d| d.param_count()),
            ckpt.condition.param_count()
        );
        report
    };
    let mut csv = String::from("class,iou\n");
    for (c, iou) in report.per_class_iou.iter().enumerate() {
        match iou {
            Some(v) => {
                println!("class {c}: IoU {v:.6}");
                csv.push_str(&format!("{c},{v:.6}\n"));
            }
            None => {
                println!("class {c}: absent");
                csv.push_str(&format!("{c},absent\n"));
            }
        }
    }
    println!("mIoU {:.6}", report.miou);
    println!("accuracy {:.6}", report.accuracy);
    csv.push_str(&format!("miou,{:.6}\naccuracy,{:.6}\n", report.miou, report.accuracy));
    let csv_path = dir.join("eval.csv");
    fs::write(&csv_path, csv)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", csv_path.display())))?;
    Ok(())
}

fn cmd_sweep_steps(cfg: &Config) -> CliResult<()> {
    let data = cfg.required("data")?;
    let (cloud, gt, _) = load_labeled(&data)?;
    let dir = out_dir(cfg)?;
    let ckpt_path = cfg.str_or("ckpt", dir.join("model.pdck").to_str().unwrap());
    let ckpt = load_model(Path::new(&ckpt_path))?;
    let sampler = sampler_from(cfg, &ckpt)?;
    let steps = cfg.usize_list("steps", &[5, 10, 20])?;
    let scenes = vec![(cloud, gt)];
    let report = sweep_steps(&sampler, &scenes, &steps, cfg.u64_or("seed", 0)?)?;
    for row in &report.rows {
        println!(
            "steps {:>3}: mIoU {:.6}, {:.3}s per scene",
            row.steps, row.miou, row.seconds
        );
    }
    let csv_path = dir.join("sweep.csv");
    fs::write(&csv_path, report.to_csv())
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", csv_path.display())))?;
    let svg_path = dir.join("sweep.svg");
    fs::write(&svg_path, report.to_svg())
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", svg_path.display())))?;
    println!("wrote {} and {}", csv_path.display(), svg_path.display());
    Ok(())
}

fn cmd_perturb(cfg: &Config) -> CliResult<()> {
    let data = cfg.required("data")?;
    let (cloud, gt, _) = load_labeled(&data)?;
    let dir = out_dir(cfg)?;
    let ckpt_path = cfg.str_or("ckpt", dir.join("model.pdck").to_str().unwrap());
    let ckpt = load_model(Path::new(&ckpt_path))?;
    let sampler = sampler_from(cfg, &ckpt)?;
    let scenes = vec![(cloud, gt)];
    let report = run_perturbation_suite(
        &sampler,
        &scenes,
        cfg.usize_or("t", 20)?,
        cfg.u64_or("seed", 0)?,
    )?;
    for (name, m) in &report.rows {
        println!("{name:<11} mIoU {m:.6}");
    }
    let csv_path = dir.join("perturbation.csv");
    fs::write(&csv_path, report.to_csv())
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", csv_path.display())))?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn cmd_gradcheck(cfg: &Config) -> CliResult<()> {
    let target = GradCheckTarget::parse(&cfg.str_or("block", "nle"))?;
    let (default_h, default_tol, default_seed) = match target {
        GradCheckTarget::Linear => (1e-5, 1e-6, 3u64),
        GradCheckTarget::Net => (1e-5, 1e-3, 11),
        _ => (1e-4, 1e-4, 4),
    };
    let h = cfg.f64_or("h", default_h)?;
    let tol = cfg.f64_or("tol", default_tol)?;
    let seed = cfg.u64_or("seed", default_seed)?;
    let report = grad_check(target, h, tol, seed)?;
    println!("{}", report.summary_line());
    if report.pass {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: {}",
            report.summary_line()
        )))
    }
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

fn run(args: &[String]) -> CliResult<()> {
    let Some(subcommand) = args.first() else {
        return Err(usage(&format!(
            "usage: pointdiffusion <subcommand> [--config FILE] [--key value ...]\nsubcommands: {}",
            SUBCOMMANDS.join(", ")
        )));
    };
    if !SUBCOMMANDS.contains(&subcommand.as_str()) {
        return Err(usage(&format!(
            "unknown subcommand {subcommand:?}; expected one of: {}",
            SUBCOMMANDS.join(", ")
        )));
    }
    let mut cfg = Config {
        values: HashMap::new(),
    };
    // First pass: locate --config so file values sit under flag overrides.
    let rest = &args[1..];
    let mut i = 0;
    let mut pairs: Vec<(String, String)> = Vec::new();
    while i < rest.len() {
        let arg = &rest[i];
        let Some(stripped) = arg.strip_prefix("--") else {
            return Err(usage(&format!("unexpected argument {arg:?}")));
        };
        let (key, value) = if let Some((k, v)) = stripped.split_once('=') {
            (k.to_string(), v.to_string())
        } else {
            let Some(value) = rest.get(i + 1) else {
                return Err(usage(&format!("flag --{stripped} is missing its value")));
            };
            i += 1;
            (stripped.to_string(), value.clone())
        };
        pairs.push((key, value));
        i += 1;
    }
    for (key, value) in &pairs {
        if key == "config" {
            cfg.parse_file(Path::new(value))?;
        }
    }
    for (key, value) in &pairs {
        if key != "config" {
            cfg.set(key, value)?;
        }
    }
    match subcommand.as_str() {
        "gen-data" => cmd_gen_data(&cfg),
        "pretrain" => cmd_pretrain(&cfg),
        "train" => cmd_train(&cfg),
        "sample" => cmd_sample(&cfg),
        "eval" => cmd_eval(&cfg),
        "sweep-steps" => cmd_sweep_steps(&cfg),
        "perturb" => cmd_perturb(&cfg),
        "gradcheck" => cmd_gradcheck(&cfg),
        _ => unreachable!(),
    }
}

/// Run the CLI; returns the process exit code.
pub fn cli_main(args: &[String]) -> i32 {
    match run(args) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("pointdiffusion-cli-{tag}"));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn missing_subcommand_and_unknown_subcommand_are_usage_errors() {
        assert_eq!(cli_main(&[]), 1);
        assert_eq!(cli_main(&args(&["frobnicate"])), 1);
    }

    #[test]
    fn unknown_key_is_a_usage_error() {
        let dir = temp_dir("unknown-key");
        let out = dir.join("scene.pdpc");
        assert_eq!(
            cli_main(&args(&[
                "gen-data",
                "--bogus",
                "1",
                "--out",
                out.to_str().unwrap()
            ])),
            1
        );
    }

    #[test]
    fn missing_config_file_is_a_usage_error() {
        assert_eq!(
            cli_main(&args(&["gen-data", "--config", "/nonexistent/config.cfg"])),
            1
        );
    }

    #[test]
    fn config_file_parses_comments_and_overrides() {
        let dir = temp_dir("config-file");
        let cfg_path = dir.join("run.cfg");
        fs::write(&cfg_path, "# comment line\npoints = 30\nclasses=3 # trailing\n\n").unwrap();
        let out = dir.join("scene.pdpc");
        // Flag override beats the file: 24 points, not 30.
        let code = cli_main(&args(&[
            "gen-data",
            "--config",
            cfg_path.to_str().unwrap(),
            "--points",
            "24",
            "--out",
            out.to_str().unwrap(),
            "--out_dir",
            dir.to_str().unwrap(),
        ]));
        assert_eq!(code, 0);
        let file = load_cloud(&out).unwrap();
        assert_eq!(file.cloud.n_points(), 24);
    }

    #[test]
    fn bad_config_line_is_a_usage_error() {
        let dir = temp_dir("bad-line");
        let cfg_path = dir.join("bad.cfg");
        fs::write(&cfg_path, "points 30\n").unwrap();
        assert_eq!(
            cli_main(&args(&["gen-data", "--config", cfg_path.to_str().unwrap()])),
            1
        );
    }

    #[test]
    fn gen_data_then_eval_against_itself_is_perfect() {
        let dir = temp_dir("self-eval");
        let out = dir.join("scene.pdpc");
        let code = cli_main(&args(&[
            "gen-data",
            "--preset",
            "separable",
            "--seed",
            "7",
            "--points",
            "60",
            "--out",
            out.to_str().unwrap(),
            "--out_dir",
            dir.to_str().unwrap(),
        ]));
        assert_eq!(code, 0);
        // Oracle labels evaluated against themselves: mIoU 1.0.
        let code = cli_main(&args(&[
            "eval",
            "--data",
            out.to_str().unwrap(),
            "--pred",
            out.to_str().unwrap(),
            "--out_dir",
            dir.to_str().unwrap(),
        ]));
        assert_eq!(code, 0);
        let csv = fs::read_to_string(dir.join("eval.csv")).unwrap();
        assert!(csv.contains("miou,1.000000"), "{csv}");
    }

    #[test]
    fn gen_data_is_seed_deterministic_on_disk() {
        let dir = temp_dir("gen-determinism");
        let a = dir.join("a.pdpc");
        let b = dir.join("b.pdpc");
        for out in [&a, &b] {
            let code = cli_main(&args(&[
                "gen-data",
                "--seed",
                "9",
                "--points",
                "48",
                "--out",
                out.to_str().unwrap(),
                "--out_dir",
                dir.to_str().unwrap(),
            ]));
            assert_eq!(code, 0);
        }
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn gradcheck_subcommand_reports_and_succeeds() {
        let code = cli_main(&args(&["gradcheck", "--block", "linear"]));
        assert_eq!(code, 0);
    }

    #[test]
    fn gen_data_respects_max_points_guard() {
        let dir = temp_dir("max-points");
        let out = dir.join("scene.pdpc");
        let code = cli_main(&args(&[
            "gen-data",
            "--points",
            "300",
            "--max_points",
            "100",
            "--out",
            out.to_str().unwrap(),
            "--out_dir",
            dir.to_str().unwrap(),
        ]));
        assert_eq!(code, 2);
    }

    #[test]
    fn grid_subsample_cell_is_applied() {
        let dir = temp_dir("cell");
        let out = dir.join("scene.pdpc");
        let code = cli_main(&args(&[
            "gen-data",
            "--points",
            "120",
            "--cell",
            "2.0",
            "--out",
            out.to_str().unwrap(),
            "--out_dir",
            dir.to_str().unwrap(),
        ]));
        assert_eq!(code, 0);
        let file = load_cloud(&out).unwrap();
        assert!(file.cloud.n_points() < 120);
    }
}
