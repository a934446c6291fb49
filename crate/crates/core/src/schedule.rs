//! Diffusion mathematics: the variance schedule, forward noising, the
//! reverse denoising step, and the label/signal codec.
//!
//! The forward chain multiplies the signal by `sqrt(1 - beta_t)` and adds
//! `sqrt(beta_t)` of fresh noise per step; its closed form reaches any step
//! directly through the cumulative products `alpha_bar`. The reverse step
//! removes the predicted noise component and re-injects `sqrt(beta_t)` of
//! noise, except at the final step where the draw is forced to zero.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance schedule tables, indexed by step `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    rhos: Vec<f64>,
}

impl NoiseSchedule {
    /// Build from explicit per-step variances. Degenerate `beta = 0` entries
    /// are allowed here (they make the step an exact identity), while
    /// [`make_linear_schedule`] enforces strictly positive variances.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        if betas.iter().any(|&b| !(0.0..1.0).contains(&b)) {
            return Err(Error::InvalidArgument(
                "every beta must lie in [0, 1)".into(),
            ));
        }
        let alphas: Vec<f64> = betas.iter().map(|&b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        let rhos = betas.iter().map(|&b| b.sqrt()).collect();
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
            rhos,
        })
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<usize> {
        if t < 1 || t > self.t_max() {
            return Err(Error::StepOutOfRange {
                t,
                t_max: self.t_max(),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check_t(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.check_t(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.check_t(t)?])
    }

    /// Reverse-step noise scale, `rho_t = sqrt(beta_t)`.
    pub fn rho(&self, t: usize) -> Result<f64> {
        Ok(self.rhos[self.check_t(t)?])
    }
}

/// Linearly interpolated variance schedule, endpoints inclusive.
pub fn make_linear_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_steps < 1 {
        return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "beta range ({beta_start}, {beta_end}) must satisfy 0 < start <= end < 1"
        )));
    }
    let betas = if t_steps == 1 {
        vec![beta_start]
    } else {
        (0..t_steps)
            .map(|i| {
                let frac = i as f64 / (t_steps - 1) as f64;
                beta_start + frac * (beta_end - beta_start)
            })
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// How a label field's rows are encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelEncoding {
    /// Rows sum to one with a single active class.
    OneHot,
    /// Arbitrary finite values (diffusion states, scaled signals).
    Continuous,
}

/// Per-point class distribution, the diffusion state variable.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelField {
    values: Tensor,
    encoding: LabelEncoding,
}

impl LabelField {
    pub fn new(values: Tensor, encoding: LabelEncoding) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "label field must be [N, M], got {:?}",
                values.shape()
            )));
        }
        if !values.all_finite() {
            return Err(Error::InvalidArgument(
                "label values must be finite".into(),
            ));
        }
        if encoding == LabelEncoding::OneHot {
            let m = values.shape()[1];
            for row in 0..values.shape()[0] {
                let r = &values.data()[row * m..(row + 1) * m];
                let ones = r.iter().filter(|&&v| v == 1.0).count();
                let zeros = r.iter().filter(|&&v| v == 0.0).count();
                if ones != 1 || zeros != m - 1 {
                    return Err(Error::InvalidArgument(format!(
                        "row {row} is not one-hot"
                    )));
                }
            }
        }
        Ok(LabelField { values, encoding })
    }

    /// Strict one-hot rows from class indices.
    pub fn one_hot(classes: &[usize], n_classes: usize) -> Result<Self> {
        let mut values = Tensor::zeros(&[classes.len(), n_classes]);
        for (i, &c) in classes.iter().enumerate() {
            if c >= n_classes {
                return Err(Error::InvalidArgument(format!(
                    "class {c} out of range for {n_classes} classes"
                )));
            }
            values.data_mut()[i * n_classes + c] = 1.0;
        }
        LabelField::new(values, LabelEncoding::OneHot)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn encoding(&self) -> LabelEncoding {
        self.encoding
    }

    pub fn n_points(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_classes(&self) -> usize {
        self.values.shape()[1]
    }
}

fn check_eps(x: &LabelField, eps: &Tensor) -> Result<()> {
    if eps.shape() != x.values().shape() {
        return Err(Error::ShapeMismatch(format!(
            "noise {:?} vs state {:?}",
            eps.shape(),
            x.values().shape()
        )));
    }
    Ok(())
}

/// One forward step: `x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps`.
pub fn forward_step(
    x_prev: &LabelField,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<LabelField> {
    check_eps(x_prev, eps)?;
    let beta = sched.beta(t)?;
    let keep = (1.0 - beta).sqrt();
    let noise = beta.sqrt();
    let values = x_prev
        .values()
        .zip_map(eps, |x, e| keep * x + noise * e)?;
    LabelField::new(values, LabelEncoding::Continuous)
}

/// Closed-form jump to step `t`:
/// `x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_sample(
    x0: &LabelField,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<LabelField> {
    check_eps(x0, eps)?;
    let ab = sched.alpha_bar(t)?;
    let keep = ab.sqrt();
    let noise = (1.0 - ab).sqrt();
    let values = x0.values().zip_map(eps, |x, e| keep * x + noise * e)?;
    LabelField::new(values, LabelEncoding::Continuous)
}

/// One reverse step:
/// `x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)
///            + sqrt(beta_t) z`,
/// with `z` forced to zero at `t = 1` so the final state is noise-free.
pub fn reverse_step(
    x_t: &LabelField,
    eps_hat: &Tensor,
    t: usize,
    z: &Tensor,
    sched: &NoiseSchedule,
) -> Result<LabelField> {
    check_eps(x_t, eps_hat)?;
    check_eps(x_t, z)?;
    let beta = sched.beta(t)?;
    let alpha = sched.alpha(t)?;
    let ab = sched.alpha_bar(t)?;
    if beta == 0.0 {
        // alpha = 1 and no noise is re-injected: the step is the identity.
        return LabelField::new(x_t.values().clone(), LabelEncoding::Continuous);
    }
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let eps_coeff = beta / (1.0 - ab).sqrt();
    let rho = sched.rho(t)?;
    let mut values = x_t
        .values()
        .zip_map(eps_hat, |x, e| inv_sqrt_alpha * (x - eps_coeff * e))?;
    if t > 1 {
        for (v, &n) in values.data_mut().iter_mut().zip(z.data()) {
            *v += rho * n;
        }
    }
    LabelField::new(values, LabelEncoding::Continuous)
}

/// Signal encoding of class indices: `+scale` at the class, `-scale`
/// elsewhere, centering the diffusion signal around zero.
pub fn encode_labels(classes: &[usize], n_classes: usize, scale: f64) -> Result<LabelField> {
    if scale <= 0.0 {
        return Err(Error::InvalidArgument("label scale must be > 0".into()));
    }
    let mut values = Tensor::full(&[classes.len(), n_classes], -scale);
    for (i, &c) in classes.iter().enumerate() {
        if c >= n_classes {
            return Err(Error::InvalidArgument(format!(
                "class {c} out of range for {n_classes} classes"
            )));
        }
        values.data_mut()[i * n_classes + c] = scale;
    }
    LabelField::new(values, LabelEncoding::Continuous)
}

/// Per-row argmax, ties to the lower class index.
pub fn decode_labels(x: &LabelField) -> Vec<usize> {
    let m = x.n_classes();
    let mut classes = Vec::with_capacity(x.n_points());
    for row in 0..x.n_points() {
        let r = &x.values().data()[row * m..(row + 1) * m];
        let mut best = 0;
        for (c, &v) in r.iter().enumerate() {
            if v > r[best] {
                best = c;
            }
        }
        classes.push(best);
    }
    classes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn linear_schedule_endpoints_and_tables() {
        let s = make_linear_schedule(2, 0.0001, 0.02).unwrap();
        assert_eq!(s.beta(1).unwrap(), 0.0001);
        assert_eq!(s.beta(2).unwrap(), 0.02);
        // alpha_bar_2 = 0.9999 * 0.98
        assert!((s.alpha_bar(2).unwrap() - 0.979902).abs() < 1e-12);

        let s1 = make_linear_schedule(1, 0.5, 0.5).unwrap();
        assert!((s1.rho(1).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);

        assert!(make_linear_schedule(0, 0.1, 0.2).is_err());
        assert!(make_linear_schedule(5, 0.0, 0.2).is_err());
        assert!(make_linear_schedule(5, 0.3, 0.2).is_err());
        assert!(make_linear_schedule(5, 0.3, 1.0).is_err());
    }

    #[test]
    fn alpha_bar_strictly_decreases() {
        let s = make_linear_schedule(50, 1e-4, 0.02).unwrap();
        for t in 1..50 {
            assert!(s.alpha_bar(t + 1).unwrap() < s.alpha_bar(t).unwrap());
        }
    }

    #[test]
    fn forward_step_hand_arithmetic() {
        let s = NoiseSchedule::from_betas(vec![0.19]).unwrap();
        let x = LabelField::new(Tensor::from_vec(&[1, 1], vec![1.0]), LabelEncoding::Continuous)
            .unwrap();
        let eps = Tensor::from_vec(&[1, 1], vec![1.0]);
        let y = forward_step(&x, 1, &eps, &s).unwrap();
        // sqrt(0.81) + sqrt(0.19) = 0.9 + 0.4358898...
        assert!((y.values().data()[0] - 1.3358898943540674).abs() < 1e-12);

        // beta = 0: the step is the identity regardless of eps.
        let s0 = NoiseSchedule::from_betas(vec![0.0]).unwrap();
        let y0 = forward_step(&x, 1, &eps, &s0).unwrap();
        assert_eq!(y0.values().data(), x.values().data());

        // eps = 0: pure shrinkage.
        let zero = Tensor::zeros(&[1, 1]);
        let ys = forward_step(&x, 1, &zero, &s).unwrap();
        assert!((ys.values().data()[0] - 0.81f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn forward_sample_hand_arithmetic() {
        // Construct a schedule whose alpha_bar_1 = 0.25.
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let x0 = LabelField::new(Tensor::from_vec(&[1, 1], vec![1.0]), LabelEncoding::Continuous)
            .unwrap();
        let eps = Tensor::from_vec(&[1, 1], vec![1.0]);
        let y = forward_sample(&x0, 1, &eps, &s).unwrap();
        assert!((y.values().data()[0] - (0.5 + 0.75f64.sqrt())).abs() < 1e-12);

        // eps = 0 scales by sqrt(alpha_bar).
        let zero = Tensor::zeros(&[1, 1]);
        let y = forward_sample(&x0, 1, &zero, &s).unwrap();
        assert!((y.values().data()[0] - 0.5).abs() < 1e-12);

        // Deep schedule: alpha_bar tiny, x_t is dominated by the noise.
        let s = make_linear_schedule(400, 1e-2, 0.2).unwrap();
        let y = forward_sample(&x0, 400, &eps, &s).unwrap();
        assert!((y.values().data()[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn reverse_step_hand_arithmetic() {
        let s = NoiseSchedule::from_betas(vec![0.19]).unwrap();
        let x = LabelField::new(Tensor::from_vec(&[1, 1], vec![1.0]), LabelEncoding::Continuous)
            .unwrap();
        let eps_hat = Tensor::from_vec(&[1, 1], vec![0.19f64.sqrt()]);
        let z = Tensor::zeros(&[1, 1]);
        let y = reverse_step(&x, &eps_hat, 1, &z, &s).unwrap();
        assert!((y.values().data()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn reverse_step_beta_zero_is_identity() {
        let s = NoiseSchedule::from_betas(vec![0.0]).unwrap();
        let mut rng = Rng::from_seed(7);
        let x = LabelField::new(Tensor::randn(&[4, 3], &mut rng), LabelEncoding::Continuous)
            .unwrap();
        let eps_hat = Tensor::randn(&[4, 3], &mut rng);
        let z = Tensor::randn(&[4, 3], &mut rng);
        let y = reverse_step(&x, &eps_hat, 1, &z, &s).unwrap();
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn forward_then_reverse_with_true_noise_recovers_x0() {
        let s = make_linear_schedule(1, 0.37, 0.37).unwrap();
        let mut rng = Rng::from_seed(11);
        let x0 = LabelField::new(Tensor::randn(&[8, 4], &mut rng), LabelEncoding::Continuous)
            .unwrap();
        let eps = Tensor::randn(&[8, 4], &mut rng);
        let x1 = forward_sample(&x0, 1, &eps, &s).unwrap();
        let z = Tensor::zeros(&[8, 4]);
        let back = reverse_step(&x1, &eps, 1, &z, &s).unwrap();
        assert!(back.values().max_abs_diff(x0.values()) < 1e-12);
    }

    #[test]
    fn step_bounds_are_enforced() {
        let s = make_linear_schedule(3, 1e-4, 0.02).unwrap();
        let x = LabelField::new(Tensor::zeros(&[1, 1]), LabelEncoding::Continuous).unwrap();
        let eps = Tensor::zeros(&[1, 1]);
        assert!(forward_step(&x, 0, &eps, &s).is_err());
        assert!(forward_step(&x, 4, &eps, &s).is_err());
        assert!(forward_sample(&x, 4, &eps, &s).is_err());
        assert!(reverse_step(&x, &eps, 0, &eps, &s).is_err());
    }

    #[test]
    fn iterated_forward_matches_closed_form_marginals() {
        // Mean of iterated forward_step tends to sqrt(alpha_bar_t) x0 and
        // variance to 1 - alpha_bar_t; modest trial count keeps this quick.
        let s = make_linear_schedule(10, 0.05, 0.3).unwrap();
        let trials = 4000;
        let x0_value = 0.8;
        let mut rng = Rng::from_seed(2024);
        let x0 = LabelField::new(
            Tensor::full(&[trials, 1], x0_value),
            LabelEncoding::Continuous,
        )
        .unwrap();
        let mut x = x0;
        for t in 1..=10 {
            let eps = Tensor::randn(&[trials, 1], &mut rng);
            x = forward_step(&x, t, &eps, &s).unwrap();
        }
        let data = x.values().data();
        let mean: f64 = data.iter().sum::<f64>() / trials as f64;
        let var: f64 =
            data.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (trials - 1) as f64;
        let want_mean = s.alpha_bar(10).unwrap().sqrt() * x0_value;
        let want_var = 1.0 - s.alpha_bar(10).unwrap();
        assert!(
            (mean - want_mean).abs() / want_mean.abs() < 0.05,
            "mean {mean} vs {want_mean}"
        );
        assert!(
            (var - want_var).abs() / want_var < 0.05,
            "var {var} vs {want_var}"
        );
    }

    #[test]
    fn encode_decode_round_trip_and_ties() {
        let f = encode_labels(&[1], 3, 1.0).unwrap();
        assert_eq!(f.values().data(), &[-1.0, 1.0, -1.0]);

        for scale in [0.1, 1.0, 7.5] {
            let classes = vec![0usize, 2, 1, 3, 3, 0];
            let enc = encode_labels(&classes, 4, scale).unwrap();
            assert_eq!(decode_labels(&enc), classes);
        }

        let tie = LabelField::new(
            Tensor::from_vec(&[1, 3], vec![0.2, 0.2, 0.1]),
            LabelEncoding::Continuous,
        )
        .unwrap();
        assert_eq!(decode_labels(&tie), vec![0]);

        assert!(encode_labels(&[5], 3, 1.0).is_err());
        assert!(encode_labels(&[0], 3, 0.0).is_err());
    }

    #[test]
    fn decode_invariant_under_monotone_transform() {
        let mut rng = Rng::from_seed(55);
        let x = LabelField::new(Tensor::randn(&[20, 5], &mut rng), LabelEncoding::Continuous)
            .unwrap();
        let base = decode_labels(&x);
        for transform in [|v: f64| v.exp(), |v: f64| 3.0 * v + 10.0, |v: f64| v.tanh()] {
            let y = LabelField::new(x.values().map(transform), LabelEncoding::Continuous)
                .unwrap();
            assert_eq!(decode_labels(&y), base);
        }
    }

    #[test]
    fn one_hot_validation() {
        let ok = LabelField::one_hot(&[0, 2, 1], 3).unwrap();
        assert_eq!(ok.encoding(), LabelEncoding::OneHot);
        assert!(LabelField::one_hot(&[3], 3).is_err());
        let bad = Tensor::from_vec(&[1, 3], vec![0.5, 0.5, 0.0]);
        assert!(LabelField::new(bad, LabelEncoding::OneHot).is_err());
    }
}
