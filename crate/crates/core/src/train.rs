//! Training: the two-term objective, the optimizer loop over a frozen
//! conditional network, and the finite-difference gradient checker.
//!
//! Each step draws a fresh step index and noise per scene, noises the clean
//! label signal in closed form, predicts the noise, reconstructs the
//! deterministic previous state (no re-injected noise during training), and
//! minimizes `gamma * |eps - eps_hat|^2 + (1 - gamma) * |x0 - x_prev_hat|^2`
//! averaged over entries. Only denoiser parameters move; condition
//! parameters enter the graph as constants through the bundle.

use std::io::Write;
use std::rc::Rc;
use std::time::Instant;

use crate::autodiff::Graph;
use crate::blocks::{dpn_graph, nle_graph, pft_graph, DpnParams, NleParams, PftParams};
use crate::condition::{condition_bundle, ConditionBundle, ConditionParams};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{knn, IndexCache, PointCloud};
use crate::network::{init_params, predict_noise_graph, BlockParams, DenoiseNetParams};
use crate::nn::{assign_params, flatten_params, AdamW, Binder, Linear, Params};
use crate::rng::Rng;
use crate::schedule::{encode_labels, forward_sample, make_linear_schedule, NoiseSchedule};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Which label-reconstruction term the objective uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelLoss {
    /// Squared error between the clean signal and the reconstructed state.
    Mse,
    /// Softmax cross-entropy over the class axis of the clean-state estimate.
    Ce,
}

impl LabelLoss {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mse" => Ok(LabelLoss::Mse),
            "ce" => Ok(LabelLoss::Ce),
            other => Err(Error::InvalidArgument(format!(
                "unknown label loss {other:?} (expected mse|ce)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub label_loss: LabelLoss,
    /// Condition parameters stay frozen; only `true` is supported.
    pub freeze_condition: bool,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.5,
            lr: 3e-3,
            weight_decay: 0.0,
            epochs: 200,
            batch_size: 4,
            seed: 0,
            label_loss: LabelLoss::Mse,
            freeze_condition: true,
            milestones: Vec::new(),
            lr_decay: 0.1,
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma {gamma} outside (0, 1)"
        )));
    }
    Ok(())
}

/// The combined objective over plain tensors:
/// `gamma * mse(eps, eps_hat) + (1 - gamma) * mse(x0, x_prev_hat)`.
pub fn total_loss(
    eps: &Tensor,
    eps_hat: &Tensor,
    x0: &Tensor,
    x_prev_hat: &Tensor,
    gamma: f64,
) -> Result<f64> {
    check_gamma(gamma)?;
    if eps.shape() != eps_hat.shape() || x0.shape() != x_prev_hat.shape() {
        return Err(Error::ShapeMismatch("loss operand shapes".into()));
    }
    let mse = |a: &Tensor, b: &Tensor| -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.len() as f64
    };
    Ok(gamma * mse(eps, eps_hat) + (1.0 - gamma) * mse(x0, x_prev_hat))
}

// ---------------------------------------------------------------------------
// Train step
// ---------------------------------------------------------------------------

/// One scene of a training batch: cloud, ground-truth classes, and its
/// precomputed condition bundle.
pub struct TrainItem<'a> {
    pub cloud: &'a PointCloud,
    pub labels: &'a [usize],
    pub bundle: &'a ConditionBundle,
}

/// Mutable training state threaded between steps.
pub struct TrainState {
    pub opt: AdamW,
    pub rng: Rng,
    pub steps_done: u64,
}

impl TrainState {
    pub fn new(tcfg: &TrainConfig) -> Self {
        TrainState {
            opt: AdamW::new(tcfg.lr, tcfg.weight_decay),
            rng: Rng::from_seed(tcfg.seed),
            steps_done: 0,
        }
    }
}

/// One optimizer step over a batch. Returns the batch-mean loss and the
/// gradient L2 norm. Condition parameters are untouched by construction:
/// they are never bound as differentiable leaves here.
pub fn train_step(
    batch: &[TrainItem<'_>],
    params: &mut DenoiseNetParams,
    state: &mut TrainState,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    sched: &NoiseSchedule,
    cache: &IndexCache,
) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch"));
    }
    check_gamma(tcfg.gamma)?;
    if !tcfg.freeze_condition {
        return Err(Error::InvalidArgument(
            "joint condition training is not supported; the conditional network stays frozen"
                .into(),
        ));
    }
    let m = cfg.n_classes;
    let t_max = sched.t_max();
    let mut grad_accum: Vec<f64> = vec![0.0; flatten_params(params).len()];
    let mut loss_accum = 0.0;

    for item in batch {
        if item.cloud.n_points() != item.labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} points",
                item.labels.len(),
                item.cloud.n_points()
            )));
        }
        let t = state.rng.below(t_max) + 1;
        let x0 = encode_labels(item.labels, m, cfg.label_scale)?;
        let eps = Tensor::randn(&[item.cloud.n_points(), m], &mut state.rng);
        let x_t = forward_sample(&x0, t, &eps, sched)?;

        let mut g = Graph::new();
        let mut binder = Binder::new(&mut g, true);
        let ids = params.bind(&mut binder);
        let leaves = binder.into_leaves();
        let x_t_node = g.constant(x_t.values().clone());
        let eps_hat =
            predict_noise_graph(&mut g, &ids, x_t_node, t, item.cloud, item.bundle, cache, cfg)?;

        // Deterministic reverse mean (no noise during training):
        // x_prev = (x_t - beta/sqrt(1 - a_bar) * eps_hat) / sqrt(alpha)
        let beta = sched.beta(t)?;
        let alpha = sched.alpha(t)?;
        let a_bar = sched.alpha_bar(t)?;
        let eps_coeff = beta / (1.0 - a_bar).sqrt();
        let scaled = g.scale(eps_hat, eps_coeff);
        let num = g.sub(x_t_node, scaled);
        let x_prev_hat = g.scale(num, 1.0 / alpha.sqrt());

        let eps_node = g.constant(eps.clone());
        let eps_diff = g.sub(eps_node, eps_hat);
        let loss_eps = g.mean_sq(eps_diff);

        let label_term = match tcfg.label_loss {
            LabelLoss::Mse => {
                let x0_node = g.constant(x0.values().clone());
                let diff = g.sub(x0_node, x_prev_hat);
                g.mean_sq(diff)
            }
            LabelLoss::Ce => {
                // Clean-state estimate from the predicted noise:
                // x0_hat = (x_t - sqrt(1 - a_bar) * eps_hat) / sqrt(a_bar)
                let scaled = g.scale(eps_hat, (1.0 - a_bar).sqrt());
                let num = g.sub(x_t_node, scaled);
                let x0_hat = g.scale(num, 1.0 / a_bar.sqrt());
                g.cross_entropy(x0_hat, Rc::new(item.labels.to_vec()))
            }
        };

        let weighted_eps = g.scale(loss_eps, tcfg.gamma);
        let weighted_label = g.scale(label_term, 1.0 - tcfg.gamma);
        let loss = g.add(weighted_eps, weighted_label);
        loss_accum += g.value(loss).item();

        let mut grads = g.backward(loss);
        let mut offset = 0;
        for &leaf in &leaves {
            let len = g.value(leaf).len();
            if let Some(grad) = grads.take(leaf) {
                for (acc, &gv) in grad_accum[offset..offset + len].iter_mut().zip(grad.data())
                {
                    *acc += gv;
                }
            }
            offset += len;
        }
    }

    let inv_b = 1.0 / batch.len() as f64;
    for v in grad_accum.iter_mut() {
        *v *= inv_b;
    }
    let grad_norm = grad_accum.iter().map(|v| v * v).sum::<f64>().sqrt();

    state.opt.begin_step();
    let mut idx = 0;
    let mut offset = 0;
    params.visit_mut("", &mut |_, t| {
        let len = t.len();
        let grad = Tensor::from_vec(t.shape(), grad_accum[offset..offset + len].to_vec());
        state.opt.update_one(idx, t, &grad);
        idx += 1;
        offset += len;
    });
    state.steps_done += 1;
    Ok((loss_accum * inv_b, grad_norm))
}

// ---------------------------------------------------------------------------
// Full fit loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FitReport {
    /// Batch-mean loss per optimizer step.
    pub step_losses: Vec<f64>,
    pub steps: u64,
}

/// Train the denoiser over a dataset for `tcfg.epochs` epochs, batching
/// scenes in order. Progress rows `epoch,step,loss,grad_norm,seconds` are
/// appended to `log` when given.
#[allow(clippy::too_many_arguments)]
pub fn train_model(
    scenes: &[(PointCloud, Vec<usize>)],
    bundles: &[ConditionBundle],
    params: &mut DenoiseNetParams,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    sched: &NoiseSchedule,
    cache: &IndexCache,
    mut log: Option<&mut dyn Write>,
) -> Result<FitReport> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput("training dataset"));
    }
    if scenes.len() != bundles.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} bundles for {} scenes",
            bundles.len(),
            scenes.len()
        )));
    }
    let start = Instant::now();
    let mut state = TrainState::new(tcfg);
    let mut step_losses = Vec::new();
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "epoch,step,loss,grad_norm,seconds").map_err(Error::Io)?;
    }
    let bs = tcfg.batch_size.max(1);
    for epoch in 0..tcfg.epochs {
        if tcfg.milestones.contains(&epoch) {
            state.opt.lr *= tcfg.lr_decay;
        }
        let mut first = 0;
        while first < scenes.len() {
            let last = (first + bs).min(scenes.len());
            let batch: Vec<TrainItem<'_>> = (first..last)
                .map(|i| TrainItem {
                    cloud: &scenes[i].0,
                    labels: &scenes[i].1,
                    bundle: &bundles[i],
                })
                .collect();
            let (loss, grad_norm) =
                train_step(&batch, params, &mut state, cfg, tcfg, sched, cache)?;
            step_losses.push(loss);
            if let Some(w) = log.as_deref_mut() {
                writeln!(
                    w,
                    "{},{},{:.9},{:.9},{:.3}",
                    epoch,
                    state.steps_done,
                    loss,
                    grad_norm,
                    start.elapsed().as_secs_f64()
                )
                .map_err(Error::Io)?;
            }
            first = last;
        }
    }
    Ok(FitReport {
        steps: state.steps_done,
        step_losses,
    })
}

/// Convenience wrapper: build bundles for every scene with the given frozen
/// condition parameters, then train.
#[allow(clippy::too_many_arguments)]
pub fn train_denoiser(
    scenes: &[(PointCloud, Vec<usize>)],
    condition: &ConditionParams,
    params: &mut DenoiseNetParams,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    sched: &NoiseSchedule,
    cache: &IndexCache,
    log: Option<&mut dyn Write>,
) -> Result<FitReport> {
    let bundles: Result<Vec<ConditionBundle>> = scenes
        .iter()
        .map(|(cloud, _)| condition_bundle(cloud, condition, cache, cfg))
        .collect();
    train_model(scenes, &bundles?, params, cfg, tcfg, sched, cache, log)
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCheckTarget {
    /// A single linear layer (gradients are exact up to rounding).
    Linear,
    Nle,
    Pft,
    Dpn,
    /// The full micro denoising network through the training objective.
    Net,
}

impl GradCheckTarget {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "linear" => Ok(GradCheckTarget::Linear),
            "nle" => Ok(GradCheckTarget::Nle),
            "pft" => Ok(GradCheckTarget::Pft),
            "dpn" => Ok(GradCheckTarget::Dpn),
            "net" => Ok(GradCheckTarget::Net),
            other => Err(Error::InvalidArgument(format!(
                "unknown gradcheck block {other:?} (expected linear|nle|pft|dpn|net)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GradCheckTarget::Linear => "linear",
            GradCheckTarget::Nle => "nle",
            GradCheckTarget::Pft => "pft",
            GradCheckTarget::Dpn => "dpn",
            GradCheckTarget::Net => "net",
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub target: GradCheckTarget,
    pub param_count: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn summary_line(&self) -> String {
        format!(
            "{} max_rel_err={:.3e} pass={}",
            self.target.name(),
            self.max_rel_err,
            self.pass
        )
    }
}

/// Compare an analytic gradient against central differences of `eval` at
/// `at`. Relative error uses `max(|analytic|, |numeric|, 1e-8)`.
pub fn check_gradients(
    eval: &dyn Fn(&[f64]) -> f64,
    at: &[f64],
    analytic: &[f64],
    h: f64,
) -> f64 {
    assert_eq!(at.len(), analytic.len());
    let mut max_rel = 0.0f64;
    let mut probe = at.to_vec();
    for i in 0..at.len() {
        probe[i] = at[i] + h;
        let plus = eval(&probe);
        probe[i] = at[i] - h;
        let minus = eval(&probe);
        probe[i] = at[i];
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    max_rel
}

/// A parameter set plus a loss evaluator: `run(params, true)` also returns
/// the flat analytic gradient in visit order.
type RunFn<P> = Rc<dyn Fn(&P, bool) -> (f64, Vec<f64>)>;

fn run_check<P: Params + Clone + 'static>(
    target: GradCheckTarget,
    template: P,
    run: RunFn<P>,
    h: f64,
    tol: f64,
) -> GradCheckReport {
    let at = flatten_params(&template);
    let (_, analytic) = run(&template, true);
    assert_eq!(analytic.len(), at.len(), "grad/param alignment");
    let eval = {
        let run = Rc::clone(&run);
        move |flat: &[f64]| -> f64 {
            let mut p = template.clone();
            assign_params(&mut p, flat);
            run(&p, false).0
        }
    };
    let max_rel_err = check_gradients(&eval, &at, &analytic, h);
    GradCheckReport {
        target,
        param_count: at.len(),
        max_rel_err,
        tol,
        pass: max_rel_err < tol,
    }
}

fn flat_grads_for(
    g: &Graph,
    grads: &mut crate::autodiff::Gradients,
    leaves: &[crate::autodiff::NodeId],
) -> Vec<f64> {
    let mut flat = Vec::new();
    for &l in leaves {
        match grads.take(l) {
            Some(t) => flat.extend_from_slice(t.data()),
            None => flat.extend(std::iter::repeat_n(0.0, g.value(l).len())),
        }
    }
    flat
}

fn micro_net_config() -> ModelConfig {
    ModelConfig {
        n_classes: 3,
        channels: vec![6, 8, 10],
        k: 4,
        ratios: vec![0.5, 0.5],
        time_dim: 8,
        label_scale: 1.0,
        feature_dim: 0,
        cond_levels: 2,
        use_logits: false,
    }
}

/// Run the finite-difference gradient check for one target at step `h`,
/// passing when the worst relative error stays under `tol`.
pub fn grad_check(target: GradCheckTarget, h: f64, tol: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::from_seed(seed);
    match target {
        GradCheckTarget::Linear => {
            let layer = Linear::kaiming(5, 4, &mut rng);
            let x = Tensor::randn(&[7, 5], &mut rng);
            let target_t = Tensor::randn(&[7, 4], &mut rng);
            let run: RunFn<Linear> = Rc::new(move |params, want| {
                let mut g = Graph::new();
                let mut b = Binder::new(&mut g, want);
                let ids = params.bind(&mut b);
                let leaves = b.into_leaves();
                let xn = g.constant(x.clone());
                let out = ids.apply(&mut g, xn);
                let tn = g.constant(target_t.clone());
                let d = g.sub(out, tn);
                let loss = g.mean_sq(d);
                let flat = if want {
                    let mut grads = g.backward(loss);
                    flat_grads_for(&g, &mut grads, &leaves)
                } else {
                    Vec::new()
                };
                (g.value(loss).item(), flat)
            });
            Ok(run_check(target, layer, run, h, tol))
        }
        GradCheckTarget::Nle => {
            let (n, c, k) = (16, 8, 4);
            let pts: Vec<[f64; 3]> = (0..n)
                .map(|_| [rng.normal(), rng.normal(), rng.normal()])
                .collect();
            let table = knn(&pts, &pts, k)?;
            let x_t = Tensor::randn(&[n, c], &mut rng);
            let sem = Tensor::randn(&[n, c], &mut rng);
            let p = Tensor::randn(&[n, k, c], &mut rng);
            let target_t = Tensor::randn(&[n, c], &mut rng);
            let params = NleParams::init(c, c, c, &mut rng);
            let run: RunFn<NleParams> = Rc::new(move |params, want| {
                let mut g = Graph::new();
                let mut b = Binder::new(&mut g, want);
                let ids = params.bind(&mut b);
                let leaves = b.into_leaves();
                let x = g.constant(x_t.clone());
                let s = g.constant(sem.clone());
                let pc = g.constant(p.clone());
                let out = nle_graph(&mut g, &ids, x, s, pc, &table);
                let tn = g.constant(target_t.clone());
                let d = g.sub(out, tn);
                let loss = g.mean_sq(d);
                let flat = if want {
                    let mut grads = g.backward(loss);
                    flat_grads_for(&g, &mut grads, &leaves)
                } else {
                    Vec::new()
                };
                (g.value(loss).item(), flat)
            });
            Ok(run_check(target, params, run, h, tol))
        }
        GradCheckTarget::Pft => {
            let (n, c, k) = (16, 8, 4);
            let pts: Vec<[f64; 3]> = (0..n)
                .map(|_| [rng.normal(), rng.normal(), rng.normal()])
                .collect();
            let table = knn(&pts, &pts, k)?;
            let f = Tensor::randn(&[n, c], &mut rng);
            let p = Tensor::randn(&[n, k, c], &mut rng);
            let target_t = Tensor::randn(&[n, c], &mut rng);
            let mut params = PftParams::init(c, &mut rng);
            // The output projection is zero at init, which would zero most
            // gradients; the checker perturbs it so every parameter matters.
            params.wo = Linear::kaiming(c, c, &mut rng);
            let run: RunFn<PftParams> = Rc::new(move |params, want| {
                let mut g = Graph::new();
                let mut b = Binder::new(&mut g, want);
                let ids = params.bind(&mut b);
                let leaves = b.into_leaves();
                let fid = g.constant(f.clone());
                let pc = g.constant(p.clone());
                let out = pft_graph(&mut g, &ids, fid, pc, &table);
                let tn = g.constant(target_t.clone());
                let d = g.sub(out, tn);
                let loss = g.mean_sq(d);
                let flat = if want {
                    let mut grads = g.backward(loss);
                    flat_grads_for(&g, &mut grads, &leaves)
                } else {
                    Vec::new()
                };
                (g.value(loss).item(), flat)
            });
            Ok(run_check(target, params, run, h, tol))
        }
        GradCheckTarget::Dpn => {
            let (n, c, k) = (16, 8, 4);
            let pts: Vec<[f64; 3]> = (0..n)
                .map(|_| [rng.normal(), rng.normal(), rng.normal()])
                .collect();
            let table = knn(&pts, &pts, k)?;
            let f = Tensor::randn(&[n, c], &mut rng);
            let p = Tensor::randn(&[n, k, c], &mut rng);
            let target_t = Tensor::randn(&[n, c], &mut rng);
            let params = DpnParams::init(c, &mut rng);
            let run: RunFn<DpnParams> = Rc::new(move |params, want| {
                let mut g = Graph::new();
                let mut b = Binder::new(&mut g, want);
                let ids = params.bind(&mut b);
                let leaves = b.into_leaves();
                let fid = g.constant(f.clone());
                let pc = g.constant(p.clone());
                let out = dpn_graph(&mut g, &ids, fid, pc, &table);
                let tn = g.constant(target_t.clone());
                let d = g.sub(out, tn);
                let loss = g.mean_sq(d);
                let flat = if want {
                    let mut grads = g.backward(loss);
                    flat_grads_for(&g, &mut grads, &leaves)
                } else {
                    Vec::new()
                };
                (g.value(loss).item(), flat)
            });
            Ok(run_check(target, params, run, h, tol))
        }
        GradCheckTarget::Net => {
            let cfg = micro_net_config();
            let n = 12;
            let pts: Vec<[f64; 3]> = (0..n)
                .map(|_| [rng.normal(), rng.normal(), rng.normal()])
                .collect();
            let cloud = PointCloud::new(pts)?;
            let labels: Vec<usize> = (0..n).map(|i| i % cfg.n_classes).collect();
            let cond = ConditionParams::init(&cfg, seed ^ 0x5eed)?;
            let cache = IndexCache::new();
            let bundle = condition_bundle(&cloud, &cond, &cache, &cfg)?;
            let sched = make_linear_schedule(4, 0.02, 0.2)?;
            let t = 2usize;
            let x0 = encode_labels(&labels, cfg.n_classes, cfg.label_scale)?;
            let eps = Tensor::randn(&[n, cfg.n_classes], &mut rng);
            let x_t = forward_sample(&x0, t, &eps, &sched)?;

            let mut params = init_params(&cfg, seed ^ 0xbeef)?;
            // Re-randomize the zero-initialized head and both frequency-block
            // output projections so gradients flow through every parameter.
            // The draw is deliberately small: a full-scale random head turns
            // the deep stack into an amplifier whose loss magnitude drowns
            // small gradients in f64 rounding, making finite differences
            // meaningless. Real training starts from the zero head anyway.
            let small = 0.3;
            let scaled_kaiming = |c_in: usize, c_out: usize, rng: &mut Rng| {
                let mut l = Linear::kaiming(c_in, c_out, rng);
                for v in l.w.data_mut() {
                    *v *= small;
                }
                l
            };
            params.head = scaled_kaiming(cfg.channels[0], cfg.n_classes, &mut rng);
            for level in params.enc.iter_mut() {
                if let BlockParams::Pft(p) = &mut level.block {
                    p.wo = scaled_kaiming(p.channels(), p.channels(), &mut rng);
                }
            }
            for level in params.dec.iter_mut() {
                if let BlockParams::Pft(p) = &mut level.block {
                    p.wo = scaled_kaiming(p.channels(), p.channels(), &mut rng);
                }
            }

            // Evaluate at a generic point: structural zeros (for example the
            // weight MLP's bias, whose self-neighbor inputs are exactly zero)
            // would otherwise sit directly on a ReLU kink where one-sided and
            // central differences disagree by construction.
            let mut flat = flatten_params(&params);
            for v in flat.iter_mut() {
                *v += rng.uniform_in(-0.05, 0.05);
            }
            assign_params(&mut params, &flat);

            let gamma = 0.5;
            let beta = sched.beta(t)?;
            let alpha = sched.alpha(t)?;
            let a_bar = sched.alpha_bar(t)?;
            let run: RunFn<DenoiseNetParams> = Rc::new(move |params, want| {
                let mut g = Graph::new();
                let mut b = Binder::new(&mut g, want);
                let ids = params.bind(&mut b);
                let leaves = b.into_leaves();
                let x_t_node = g.constant(x_t.values().clone());
                let eps_hat =
                    predict_noise_graph(&mut g, &ids, x_t_node, t, &cloud, &bundle, &cache, &cfg)
                        .expect("micro network forward");
                let scaled = g.scale(eps_hat, beta / (1.0 - a_bar).sqrt());
                let num = g.sub(x_t_node, scaled);
                let x_prev_hat = g.scale(num, 1.0 / alpha.sqrt());
                let eps_node = g.constant(eps.clone());
                let d_eps = g.sub(eps_node, eps_hat);
                let l_eps = g.mean_sq(d_eps);
                let x0_node = g.constant(x0.values().clone());
                let d_lab = g.sub(x0_node, x_prev_hat);
                let l_lab = g.mean_sq(d_lab);
                let we = g.scale(l_eps, gamma);
                let wl = g.scale(l_lab, 1.0 - gamma);
                let loss = g.add(we, wl);
                let flat = if want {
                    let mut grads = g.backward(loss);
                    flat_grads_for(&g, &mut grads, &leaves)
                } else {
                    Vec::new()
                };
                (g.value(loss).item(), flat)
            });
            Ok(run_check(target, params, run, h, tol))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneSpec};
    use crate::network::encode_condition_section;

    fn micro_scene(seed: u64) -> (PointCloud, Vec<usize>) {
        generate_scene(&SceneSpec::separable(3, 16, seed)).unwrap()
    }

    #[test]
    fn total_loss_examples() {
        // Residuals engineered so the two mean squares are 2.0 and 4.0.
        let eps = Tensor::from_vec(&[1, 2], vec![2f64.sqrt(), -(2f64.sqrt())]);
        let eps_hat = Tensor::zeros(&[1, 2]);
        let x0 = Tensor::from_vec(&[1, 2], vec![2.0, -2.0]);
        let x_prev = Tensor::zeros(&[1, 2]);
        let loss = total_loss(&eps, &eps_hat, &x0, &x_prev, 0.5).unwrap();
        assert!((loss - 3.0).abs() < 1e-12);

        // Perfect prediction: loss is exactly zero.
        assert_eq!(
            total_loss(&eps, &eps, &x0, &x0, 0.5).unwrap(),
            0.0
        );

        // gamma at the upper boundary keeps only the noise term.
        let nearly_one = 1.0 - 1e-9;
        let loss = total_loss(&eps, &eps_hat, &x0, &x_prev, nearly_one).unwrap();
        assert!((loss - 2.0).abs() < 1e-7);

        assert!(total_loss(&eps, &eps_hat, &x0, &x_prev, 0.0).is_err());
        assert!(total_loss(&eps, &eps_hat, &x0, &x_prev, 1.0).is_err());
    }

    #[test]
    fn total_loss_is_affine_in_gamma() {
        let mut rng = Rng::from_seed(5);
        let eps = Tensor::randn(&[4, 3], &mut rng);
        let eps_hat = Tensor::randn(&[4, 3], &mut rng);
        let x0 = Tensor::randn(&[4, 3], &mut rng);
        let x_prev = Tensor::randn(&[4, 3], &mut rng);
        let at = |g: f64| total_loss(&eps, &eps_hat, &x0, &x_prev, g).unwrap();
        let l25 = at(0.25);
        let l50 = at(0.5);
        let l75 = at(0.75);
        // Affine: midpoint of endpoints equals the middle value.
        assert!(((l25 + l75) / 2.0 - l50).abs() < 1e-12);
        assert!(l25 >= 0.0 && l50 >= 0.0 && l75 >= 0.0);
    }

    fn training_fixture(
        seed: u64,
    ) -> (
        ModelConfig,
        ConditionParams,
        DenoiseNetParams,
        (PointCloud, Vec<usize>),
        ConditionBundle,
        IndexCache,
        NoiseSchedule,
    ) {
        let cfg = micro_net_config();
        let cond = ConditionParams::init(&cfg, seed).unwrap();
        let net = init_params(&cfg, seed + 1).unwrap();
        let scene = micro_scene(seed + 2);
        let cache = IndexCache::new();
        let bundle = condition_bundle(&scene.0, &cond, &cache, &cfg).unwrap();
        let sched = make_linear_schedule(6, 1e-3, 0.1).unwrap();
        (cfg, cond, net, scene, bundle, cache, sched)
    }

    #[test]
    fn train_step_rejects_empty_batch_and_bad_gamma() {
        let (cfg, _cond, mut net, _scene, _bundle, cache, sched) = training_fixture(31);
        let tcfg = TrainConfig::default();
        let mut state = TrainState::new(&tcfg);
        assert!(
            train_step(&[], &mut net, &mut state, &cfg, &tcfg, &sched, &cache).is_err()
        );
    }

    #[test]
    fn zero_learning_rate_leaves_params_bitwise_unchanged() {
        let (cfg, _cond, mut net, scene, bundle, cache, sched) = training_fixture(32);
        let tcfg = TrainConfig {
            lr: 0.0,
            ..Default::default()
        };
        let mut state = TrainState::new(&tcfg);
        let before = flatten_params(&net);
        let item = TrainItem {
            cloud: &scene.0,
            labels: &scene.1,
            bundle: &bundle,
        };
        train_step(&[item], &mut net, &mut state, &cfg, &tcfg, &sched, &cache).unwrap();
        assert_eq!(flatten_params(&net), before);
    }

    #[test]
    fn condition_params_are_byte_identical_across_training() {
        let (cfg, cond, mut net, scene, bundle, cache, sched) = training_fixture(33);
        let tcfg = TrainConfig {
            lr: 1e-2,
            ..Default::default()
        };
        let mut state = TrainState::new(&tcfg);
        let cond_before = encode_condition_section(&cond);
        for _ in 0..20 {
            let item = TrainItem {
                cloud: &scene.0,
                labels: &scene.1,
                bundle: &bundle,
            };
            train_step(&[item], &mut net, &mut state, &cfg, &tcfg, &sched, &cache).unwrap();
        }
        assert_eq!(encode_condition_section(&cond), cond_before);
        assert_eq!(state.steps_done, 20);
    }

    #[test]
    fn loss_decreases_on_an_overfit_scene() {
        let (cfg, cond, mut net, scene, _bundle, cache, sched) = training_fixture(34);
        let tcfg = TrainConfig {
            lr: 5e-3,
            epochs: 60,
            batch_size: 1,
            seed: 7,
            ..Default::default()
        };
        let scenes = vec![scene];
        let report = train_denoiser(
            &scenes, &cond, &mut net, &cfg, &tcfg, &sched, &cache, None,
        )
        .unwrap();
        let head: f64 = report.step_losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = report.step_losses[report.step_losses.len() - 10..]
            .iter()
            .sum::<f64>()
            / 10.0;
        assert!(tail < head, "head {head} tail {tail}");
    }

    #[test]
    fn training_is_seed_deterministic() {
        let run = || {
            let (cfg, cond, mut net, scene, _b, cache, sched) = training_fixture(35);
            let tcfg = TrainConfig {
                lr: 2e-3,
                epochs: 5,
                batch_size: 1,
                seed: 11,
                ..Default::default()
            };
            let scenes = vec![scene];
            train_denoiser(&scenes, &cond, &mut net, &cfg, &tcfg, &sched, &cache, None)
                .unwrap();
            flatten_params(&net)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ce_label_loss_also_trains() {
        let (cfg, cond, mut net, scene, _bundle, cache, sched) = training_fixture(36);
        let tcfg = TrainConfig {
            lr: 5e-3,
            epochs: 10,
            batch_size: 1,
            label_loss: LabelLoss::Ce,
            ..Default::default()
        };
        let scenes = vec![scene];
        let report = train_denoiser(
            &scenes, &cond, &mut net, &cfg, &tcfg, &sched, &cache, None,
        )
        .unwrap();
        assert!(report.step_losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn gradcheck_linear_is_near_exact() {
        let report = grad_check(GradCheckTarget::Linear, 1e-5, 1e-6, 3).unwrap();
        assert!(report.pass, "{}", report.summary_line());
        let line = report.summary_line();
        assert!(line.starts_with("linear max_rel_err="), "{line}");
        assert!(line.ends_with("pass=true"), "{line}");
    }

    #[test]
    fn gradcheck_blocks_pass_at_spec_tolerance() {
        for target in [
            GradCheckTarget::Nle,
            GradCheckTarget::Pft,
            GradCheckTarget::Dpn,
        ] {
            let report = grad_check(target, 1e-4, 1e-4, 4).unwrap();
            assert!(report.pass, "{}", report.summary_line());
        }
    }

    #[test]
    fn gradcheck_detects_a_corrupted_gradient() {
        // Doubling one analytic entry must push the relative error past tol.
        let eval = |p: &[f64]| p.iter().map(|v| v * v).sum::<f64>();
        let at = vec![1.0, 2.0, 3.0];
        let mut analytic = vec![2.0, 4.0, 6.0];
        assert!(check_gradients(&eval, &at, &analytic, 1e-5) < 1e-8);
        analytic[1] *= 2.0;
        assert!(check_gradients(&eval, &at, &analytic, 1e-5) > 0.4);
    }
}
