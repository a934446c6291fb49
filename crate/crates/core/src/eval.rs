//! Evaluation: per-class IoU, sampling-step sweeps, and the test-time
//! perturbation suite, with CSV and SVG report emission.

use std::fmt::Write as _;
use std::time::Instant;

use crate::condition::{condition_bundle, ConditionParams};
use crate::config::ModelConfig;
use crate::data::{perturb, Perturbation};
use crate::error::{Error, Result};
use crate::geometry::{IndexCache, PointCloud};
use crate::network::{sample_labels, DenoiseNetParams};
use crate::rng::mix_seed;
use crate::schedule::make_linear_schedule;

// ---------------------------------------------------------------------------
// mIoU
// ---------------------------------------------------------------------------

/// Run metadata attached to an evaluation report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMeta {
    pub seed: u64,
    pub steps: usize,
    pub gamma: f64,
    pub config_hash: u64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// IoU per class; `None` where the class appears in neither prediction
    /// nor ground truth (excluded from the mean).
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub accuracy: f64,
    pub point_count: usize,
    pub meta: RunMeta,
}

/// Intersection-over-union per class and their mean. Classes absent from
/// both prediction and ground truth are excluded from the mean.
pub fn miou(pred: &[usize], gt: &[usize], n_classes: usize) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            gt.len()
        )));
    }
    if pred.iter().chain(gt).any(|&c| c >= n_classes) {
        return Err(Error::InvalidArgument(format!(
            "label out of range for {n_classes} classes"
        )));
    }
    let mut intersection = vec![0usize; n_classes];
    let mut union = vec![0usize; n_classes];
    let mut correct = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            intersection[p] += 1;
            union[p] += 1;
            correct += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let per_class_iou: Vec<Option<f64>> = intersection
        .iter()
        .zip(&union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(EvalReport {
        per_class_iou,
        miou,
        accuracy: if pred.is_empty() {
            0.0
        } else {
            correct as f64 / pred.len() as f64
        },
        point_count: pred.len(),
        meta: RunMeta::default(),
    })
}

// ---------------------------------------------------------------------------
// Sampling-based evaluation
// ---------------------------------------------------------------------------

/// Everything needed to sample labels from a trained model.
pub struct Sampler<'a> {
    pub cfg: &'a ModelConfig,
    pub condition: &'a ConditionParams,
    pub denoiser: &'a DenoiseNetParams,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Sampler<'_> {
    /// Sample labels for every scene and pool the IoU counts into one
    /// report. Scene `i` draws from a sub-seed mixed from `seed` and `i`.
    pub fn evaluate(
        &self,
        scenes: &[(PointCloud, Vec<usize>)],
        t_steps: usize,
        seed: u64,
    ) -> Result<EvalReport> {
        let (report, _) = self.evaluate_timed(scenes, t_steps, seed)?;
        Ok(report)
    }

    /// Like [`Sampler::evaluate`], also reporting the mean wall-clock
    /// sampling seconds per scene (reverse steps only; conditioning and
    /// index building are excluded).
    pub fn evaluate_timed(
        &self,
        scenes: &[(PointCloud, Vec<usize>)],
        t_steps: usize,
        seed: u64,
    ) -> Result<(EvalReport, f64)> {
        if scenes.is_empty() {
            return Err(Error::EmptyInput("evaluation dataset"));
        }
        let sched = make_linear_schedule(t_steps, self.beta_start, self.beta_end)?;
        let mut all_pred = Vec::new();
        let mut all_gt = Vec::new();
        let mut sample_seconds = 0.0;
        for (i, (cloud, labels)) in scenes.iter().enumerate() {
            let cache = IndexCache::new();
            let bundle = condition_bundle(cloud, self.condition, &cache, self.cfg)?;
            // Warm every level's indices so the timed section measures the
            // reverse process itself.
            let _ = crate::network::predict_noise(
                &crate::schedule::LabelField::new(
                    crate::tensor::Tensor::zeros(&[cloud.n_points(), self.cfg.n_classes]),
                    crate::schedule::LabelEncoding::Continuous,
                )?,
                1,
                cloud,
                &bundle,
                self.denoiser,
                &cache,
                self.cfg,
            )?;
            let start = Instant::now();
            let (pred, _) = sample_labels(
                cloud,
                &bundle,
                &sched,
                mix_seed(seed, i as u64),
                self.denoiser,
                &cache,
                self.cfg,
                0,
            )?;
            sample_seconds += start.elapsed().as_secs_f64();
            all_pred.extend(pred);
            all_gt.extend_from_slice(labels);
        }
        let mut report = miou(&all_pred, &all_gt, self.cfg.n_classes)?;
        report.meta = RunMeta {
            seed,
            steps: t_steps,
            gamma: 0.0,
            config_hash: config_hash(self.cfg),
        };
        Ok((report, sample_seconds / scenes.len() as f64))
    }
}

/// FNV-1a over the canonical rendering of the model configuration.
pub fn config_hash(cfg: &ModelConfig) -> u64 {
    let text = format!("{cfg:?}");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

// ---------------------------------------------------------------------------
// Step sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub steps: usize,
    pub miou: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("steps,miou,seconds\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.6},{:.4}", r.steps, r.miou, r.seconds);
        }
        out
    }

    /// Self-contained line plot of mIoU against sampling steps.
    pub fn to_svg(&self) -> String {
        let xs: Vec<f64> = self.rows.iter().map(|r| r.steps as f64).collect();
        let ys: Vec<f64> = self.rows.iter().map(|r| r.miou).collect();
        line_plot_svg("mIoU vs sampling steps", &xs, &ys, "steps", "mIoU")
    }
}

/// Sample with a fresh linear schedule per requested step count and report
/// mIoU plus mean per-scene sampling seconds.
pub fn sweep_steps(
    sampler: &Sampler<'_>,
    scenes: &[(PointCloud, Vec<usize>)],
    steps: &[usize],
    seed: u64,
) -> Result<SweepReport> {
    if steps.is_empty() {
        return Err(Error::EmptyInput("step list"));
    }
    let mut rows = Vec::with_capacity(steps.len());
    for &t in steps {
        let (report, seconds) = sampler.evaluate_timed(scenes, t, seed)?;
        rows.push(SweepRow {
            steps: t,
            miou: report.miou,
            seconds,
        });
    }
    Ok(SweepReport { rows })
}

// ---------------------------------------------------------------------------
// Perturbation suite
// ---------------------------------------------------------------------------

pub const PERTURBATION_JITTER_SIGMA: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct PerturbationReport {
    /// Exactly ten rows: none, permute, three z rotations, two shifts, two
    /// scalings, jitter.
    pub rows: Vec<(String, f64)>,
}

impl PerturbationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("perturbation,miou\n");
        for (name, m) in &self.rows {
            let _ = writeln!(out, "{name},{m:.6}");
        }
        out
    }

    pub fn miou_of(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|(n, _)| n == name).map(|(_, m)| *m)
    }
}

/// The test-time robustness protocol: evaluate unperturbed, then under point
/// permutation, z rotations of pi/2, pi, 3pi/2, shifts of +/-0.2, scalings
/// of 0.8 and 1.2, and Gaussian jitter.
pub fn run_perturbation_suite(
    sampler: &Sampler<'_>,
    scenes: &[(PointCloud, Vec<usize>)],
    t_steps: usize,
    seed: u64,
) -> Result<PerturbationReport> {
    use std::f64::consts::PI;
    let cases: Vec<(String, Option<Perturbation>)> = vec![
        ("none".into(), None),
        ("permute".into(), Some(Perturbation::Permute { seed })),
        ("rot_pi_2".into(), Some(Perturbation::RotateZ { angle: PI / 2.0 })),
        ("rot_pi".into(), Some(Perturbation::RotateZ { angle: PI })),
        (
            "rot_3pi_2".into(),
            Some(Perturbation::RotateZ { angle: 3.0 * PI / 2.0 }),
        ),
        ("shift_+0.2".into(), Some(Perturbation::Shift { offset: 0.2 })),
        ("shift_-0.2".into(), Some(Perturbation::Shift { offset: -0.2 })),
        ("scale_0.8".into(), Some(Perturbation::Scale { factor: 0.8 })),
        ("scale_1.2".into(), Some(Perturbation::Scale { factor: 1.2 })),
        (
            "jitter".into(),
            Some(Perturbation::Jitter {
                sigma: PERTURBATION_JITTER_SIGMA,
                seed,
            }),
        ),
    ];
    let mut rows = Vec::with_capacity(cases.len());
    for (name, kind) in cases {
        let eval_scenes: Vec<(PointCloud, Vec<usize>)> = match kind {
            None => scenes.to_vec(),
            Some(kind) => scenes
                .iter()
                .map(|(cloud, labels)| perturb(cloud, labels, kind))
                .collect::<Result<Vec<_>>>()?,
        };
        let report = sampler.evaluate(&eval_scenes, t_steps, seed)?;
        rows.push((name, report.miou));
    }
    Ok(PerturbationReport { rows })
}

// ---------------------------------------------------------------------------
// SVG plotting
// ---------------------------------------------------------------------------

/// Minimal self-contained SVG line plot.
pub fn line_plot_svg(title: &str, xs: &[f64], ys: &[f64], xlabel: &str, ylabel: &str) -> String {
    assert_eq!(xs.len(), ys.len());
    let (w, h) = (480.0, 320.0);
    let (ml, mr, mt, mb) = (56.0, 16.0, 36.0, 44.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let (x_min, x_max) = bounds(xs);
    let (y_min, y_max) = bounds(ys);
    let sx = |x: f64| ml + (x - x_min) / (x_max - x_min).max(1e-12) * pw;
    let sy = |y: f64| mt + ph - (y - y_min) / (y_max - y_min).max(1e-12) * ph;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    );
    let _ = writeln!(svg, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>",
        w / 2.0
    );
    // Axes.
    let _ = writeln!(
        svg,
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        mt + ph,
        ml + pw,
        mt + ph
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>",
        mt + ph
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{xlabel}</text>",
        ml + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 14 {})\">{ylabel}</text>",
        mt + ph / 2.0,
        mt + ph / 2.0
    );
    // Axis extremes.
    let _ = writeln!(
        svg,
        "<text x=\"{ml}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{x_min:.0}</text>",
        mt + ph + 16.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{x_max:.0}</text>",
        ml + pw,
        mt + ph + 16.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{y_min:.3}</text>",
        ml - 6.0,
        mt + ph
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{y_max:.3}</text>",
        ml - 6.0,
        mt + 4.0
    );
    // Polyline and markers.
    let points: Vec<String> = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y)))
        .collect();
    let _ = writeln!(
        svg,
        "<polyline fill=\"none\" stroke=\"#2060c0\" stroke-width=\"2\" points=\"{}\"/>",
        points.join(" ")
    );
    for (&x, &y) in xs.iter().zip(ys) {
        let _ = writeln!(
            svg,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#2060c0\"/>",
            sx(x),
            sy(y)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn bounds(v: &[f64]) -> (f64, f64) {
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if (max - min).abs() < 1e-12 {
        (min - 0.5, max + 0.5)
    } else {
        (min, max)
    }
}
