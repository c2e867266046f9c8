//! The three-term Bayesian loss `J = J_NN + J_PI + J_PR`, its exact
//! gradient, Adam, and the full training loop in supervised and
//! unsupervised modes.
//!
//! Per mini-batch, `J_NN` (label fidelity, supervised only) and `J_PI`
//! (data-space physics consistency) are summed over samples and the weight
//! prior `J_PR` is added once, matching the total-loss line of the training
//! algorithm literally rather than scaling by batch fraction.

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::field::{op_apply, op_vjp, Field, ForwardOperator};
use crate::neural::{backward, forward, init_params, ArchSpec, DropoutState, NetParams};
use crate::rng::{stream_id, substream, Purpose};
use crate::uq::{psnr, ssim};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Supervised,
    Unsupervised,
}

/// Per-batch loss values and their total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub j_nn: f64,
    pub j_pi: f64,
    pub j_pr: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(j_nn: f64, j_pi: f64, j_pr: f64) -> Self {
        Self { j_nn, j_pi, j_pr, total: j_nn + j_pi + j_pr }
    }
}

/// Optional image-domain smoothness prior on the network output: a smoothed
/// `gamma * ||grad f||_beta^beta` over circular forward differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagePrior {
    pub gamma: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub v_eps: f64,
    /// Reference variance; required in supervised mode.
    pub v_f: Option<f64>,
    /// Weight-prior strength.
    pub gamma_w: f64,
    /// Weight-prior norm exponent in (0, 2].
    pub beta_w: f64,
    /// Smoothing for beta < 2 norms so gradients exist at 0.
    pub smooth_delta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    pub early_stop_patience: usize,
    /// Optional extra image-domain prior on the network output.
    pub image_prior: Option<ImagePrior>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Supervised,
            v_eps: 0.01,
            v_f: Some(0.01),
            gamma_w: 1e-6,
            beta_w: 2.0,
            smooth_delta: 1e-6,
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 300,
            dropout_rate: 0.1,
            seed: 0,
            early_stop_patience: 20,
            image_prior: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.v_eps <= 0.0 {
            problems.push("v_eps must be strictly positive".to_string());
        }
        if self.mode == TrainMode::Supervised && self.v_f.is_none() {
            problems.push("supervised mode requires v_f".to_string());
        }
        if let Some(v) = self.v_f {
            if v <= 0.0 {
                problems.push("v_f must be strictly positive".to_string());
            }
        }
        if self.gamma_w < 0.0 {
            problems.push("gamma_w must be non-negative".to_string());
        }
        if !(self.beta_w > 0.0 && self.beta_w <= 2.0) {
            problems.push("beta_w must be in (0, 2]".to_string());
        }
        if self.smooth_delta <= 0.0 {
            problems.push("smooth_delta must be positive".to_string());
        }
        if self.learning_rate <= 0.0 {
            problems.push("learning_rate must be positive".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            problems.push("dropout_rate must be in [0, 1)".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// One logged epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub wall_ms: u64,
}

pub type TrainLog = Vec<TrainLogRow>;

/// Label-fidelity term: `||f_T - f_nn||^2 / (2 v_f)`, summed over pixels.
pub fn loss_jnn(f_nn: &Field, f_t: &Field, v_f: f64) -> Result<f64> {
    if f_nn.shape() != f_t.shape() {
        return Err(Error::Shape("loss_jnn shape mismatch".into()));
    }
    if v_f <= 0.0 {
        return Err(Error::Contract("v_f must be positive".into()));
    }
    let d = f_t.sub(f_nn);
    Ok(d.dot(&d) / (2.0 * v_f))
}

/// Physics-consistency term: `||g_T - A f_nn||^2 / (2 v_eps)`.
pub fn loss_jpi(f_nn: &Field, g_t: &Field, a: &ForwardOperator, v_eps: f64) -> Result<f64> {
    if v_eps <= 0.0 {
        return Err(Error::Contract("v_eps must be positive".into()));
    }
    let pred = op_apply(a, f_nn)?;
    if pred.shape() != g_t.shape() {
        return Err(Error::Shape("loss_jpi shape mismatch".into()));
    }
    let d = g_t.sub(&pred);
    Ok(d.dot(&d) / (2.0 * v_eps))
}

/// Sparsity-enforcing weight prior: `gamma_w * sum_j (w_j^2 + delta^2)^(beta/2)`
/// for `beta < 2`, exactly `gamma_w * sum w_j^2` for `beta = 2`.
pub fn loss_jpr(w: &NetParams, gamma_w: f64, beta_w: f64, delta: f64) -> Result<f64> {
    if gamma_w < 0.0 || !(beta_w > 0.0 && beta_w <= 2.0) || delta <= 0.0 {
        return Err(Error::Contract("invalid weight-prior hyperparameters".into()));
    }
    if gamma_w == 0.0 {
        return Ok(0.0);
    }
    let sum: f64 = if beta_w == 2.0 {
        w.values.iter().map(|v| v * v).sum()
    } else {
        w.values
            .iter()
            .map(|v| (v * v + delta * delta).powf(beta_w / 2.0))
            .sum()
    };
    Ok(gamma_w * sum)
}

fn grad_jpr(w: &NetParams, gamma_w: f64, beta_w: f64, delta: f64) -> Vec<f64> {
    if gamma_w == 0.0 {
        return vec![0.0; w.values.len()];
    }
    if beta_w == 2.0 {
        w.values.iter().map(|v| 2.0 * gamma_w * v).collect()
    } else {
        w.values
            .iter()
            .map(|v| gamma_w * beta_w * v * (v * v + delta * delta).powf(beta_w / 2.0 - 1.0))
            .collect()
    }
}

/// Smoothed image-gradient prior value and its gradient wrt the image.
fn image_prior_value_grad(f: &Field, prior: &ImagePrior, delta: f64) -> (f64, Field) {
    let (w, h) = f.shape();
    let mut value = 0.0;
    let mut grad = Field::zeros(w, h);
    let pow = prior.beta / 2.0;
    // Circular forward differences in x and y.
    for y in 0..h {
        for x in 0..w {
            for (nx, ny) in [((x + 1) % w, y), (x, (y + 1) % h)] {
                let d = f.at(nx, ny) - f.at(x, y);
                let base = d * d + delta * delta;
                value += base.powf(pow);
                let dcoef = prior.beta * d * base.powf(pow - 1.0);
                grad.set(nx, ny, grad.at(nx, ny) + dcoef);
                grad.set(x, y, grad.at(x, y) - dcoef);
            }
        }
    }
    (prior.gamma * value, grad.scaled(prior.gamma))
}

/// One training sample the loss is evaluated on.
pub type Sample<'a> = (&'a Field, Option<&'a Field>);

fn batch_forward(
    batch: &[Sample],
    params: &NetParams,
    a: &ForwardOperator,
    cfg: &TrainConfig,
    dropout_seed_base: Option<u64>,
) -> Result<(LossBreakdown, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Contract("batch must be non-empty".into()));
    }
    let mut j_nn = 0.0;
    let mut j_pi = 0.0;
    let mut grad = vec![0.0; params.values.len()];
    let mut j_img = 0.0;
    for (i, (g_t, f_t)) in batch.iter().enumerate() {
        let drop = match dropout_seed_base {
            Some(base) if cfg.dropout_rate > 0.0 => {
                DropoutState::enabled(cfg.dropout_rate, base.wrapping_add(i as u64))
            }
            _ => DropoutState::disabled(),
        };
        let (f_nn, tape) = forward(params, g_t, &drop)?;
        // Cotangent of the total loss wrt the network output.
        let mut cot = Field::zeros(f_nn.width(), f_nn.height());
        if cfg.mode == TrainMode::Supervised {
            let f_t = f_t.ok_or_else(|| {
                Error::Contract("supervised training requires labeled samples".into())
            })?;
            let v_f = cfg.v_f.expect("validated");
            j_nn += loss_jnn(&f_nn, f_t, v_f)?;
            cot.axpy(1.0 / v_f, &f_nn.sub(f_t));
        }
        let pred = op_apply(a, &f_nn)?;
        let resid = pred.sub(g_t);
        j_pi += resid.dot(&resid) / (2.0 * cfg.v_eps);
        cot = cot.add(&op_vjp(a, &f_nn, &resid.scaled(1.0 / cfg.v_eps))?);
        if let Some(prior) = &cfg.image_prior {
            let (v, g) = image_prior_value_grad(&f_nn, prior, cfg.smooth_delta);
            j_img += v;
            cot = cot.add(&g);
        }
        let sample_grad = backward(params, &tape, &cot)?;
        for (acc, gi) in grad.iter_mut().zip(&sample_grad) {
            *acc += gi;
        }
    }
    let j_pr = loss_jpr(params, cfg.gamma_w, cfg.beta_w, cfg.smooth_delta)? + j_img;
    for (acc, gp) in grad
        .iter_mut()
        .zip(grad_jpr(params, cfg.gamma_w, cfg.beta_w, cfg.smooth_delta))
    {
        *acc += gp;
    }
    Ok((LossBreakdown::new(j_nn, j_pi, j_pr), grad))
}

/// Loss over a batch: `J_NN` and `J_PI` summed per sample, `J_PR` once.
pub fn loss_total(
    batch: &[Sample],
    params: &NetParams,
    a: &ForwardOperator,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    batch_forward(batch, params, a, cfg, None).map(|(l, _)| l)
}

/// Gradient of [`loss_total`] with respect to the flat parameter vector.
pub fn grad_total(
    batch: &[Sample],
    params: &NetParams,
    a: &ForwardOperator,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    batch_forward(batch, params, a, cfg, None).map(|(_, g)| g)
}

/// Adam first/second moment state.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One Adam update with bias-corrected moments; `t` starts at 1.
pub fn adam_step(
    w: &mut NetParams,
    grad: &[f64],
    state: &mut AdamState,
    eta: f64,
    t: usize,
) -> Result<()> {
    if grad.len() != w.values.len() || state.m.len() != grad.len() {
        return Err(Error::Contract("adam state/gradient dimension mismatch".into()));
    }
    if t == 0 {
        return Err(Error::Contract("adam step index starts at 1".into()));
    }
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..grad.len() {
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * grad[i];
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        w.values[i] -= eta * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

fn dataset_samples(set: &Dataset, indices: &[usize]) -> Vec<(Field, Option<Field>)> {
    indices
        .iter()
        .map(|&i| {
            let (g, f) = &set.pairs[i];
            (g.clone(), f.clone())
        })
        .collect()
}

fn as_sample_refs(owned: &[(Field, Option<Field>)]) -> Vec<Sample<'_>> {
    owned.iter().map(|(g, f)| (g, f.as_ref())).collect()
}

/// Validation metrics with dropout disabled: loss breakdown plus mean
/// PSNR/SSIM against references when the split is labeled (NaN otherwise).
fn eval_split(
    set: &Dataset,
    params: &NetParams,
    a: &ForwardOperator,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, f64, f64)> {
    if set.is_empty() {
        return Ok((LossBreakdown::new(0.0, 0.0, 0.0), f64::NAN, f64::NAN));
    }
    let owned: Vec<_> = set.pairs.clone();
    let refs = as_sample_refs(&owned);
    let (loss, _) = batch_forward(&refs, params, a, cfg, None)?;
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut n = 0usize;
    for (g, f_t) in &set.pairs {
        if let Some(f_t) = f_t {
            let (f_nn, _) = forward(params, g, &DropoutState::disabled())?;
            let range = (f_t.max() - f_t.min()).max(f64::EPSILON);
            psnr_sum += psnr(&f_nn, f_t, range)?;
            ssim_sum += ssim(&f_nn, f_t, range)?;
            n += 1;
        }
    }
    if n == 0 {
        Ok((loss, f64::NAN, f64::NAN))
    } else {
        Ok((loss, psnr_sum / n as f64, ssim_sum / n as f64))
    }
}

/// Mini-batch training with Adam, per-epoch validation, and early stopping
/// on validation total loss. Returns the parameters of the best validation
/// epoch (or the last epoch when no validation set is given) and the log.
pub fn train(
    train_set: &Dataset,
    val_set: &Dataset,
    arch: &ArchSpec,
    a: &ForwardOperator,
    cfg: &TrainConfig,
) -> Result<(NetParams, TrainLog)> {
    cfg.validate()?;
    arch.validate()?;
    if train_set.is_empty() && cfg.max_epochs > 0 {
        return Err(Error::Contract("training set is empty".into()));
    }
    if cfg.mode == TrainMode::Supervised && !train_set.is_supervised() {
        return Err(Error::Contract(
            "supervised training requires a labeled training set".into(),
        ));
    }
    let mut params = init_params(arch, cfg.seed)?;
    let mut log = TrainLog::new();
    if cfg.max_epochs == 0 {
        return Ok((params, log));
    }
    let mut adam = AdamState::new(params.values.len());
    let mut t = 0usize;
    let mut best_params = params.clone();
    let mut best_val = f64::INFINITY;
    let mut epochs_since_best = 0usize;
    let n = train_set.len();
    for epoch in 0..cfg.max_epochs {
        let start = std::time::Instant::now();
        // Shuffle without replacement (Fisher-Yates on an index vector).
        let mut indices: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = substream(cfg.seed, Purpose::Shuffle, 0, epoch as u64);
        for i in (1..n).rev() {
            let j = rand::Rng::gen_range(&mut shuffle_rng, 0..=i);
            indices.swap(i, j);
        }
        let mut train_loss = LossBreakdown::new(0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for (b, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            let owned = dataset_samples(train_set, chunk);
            let refs = as_sample_refs(&owned);
            // Distinct dropout masks per (epoch, batch, sample).
            let mask_base = stream_id(
                Purpose::Dropout,
                0,
                (epoch as u64) << 20 | (b as u64) << 8,
            )
            .wrapping_add(cfg.seed);
            let (loss, grad) = batch_forward(&refs, &params, a, cfg, Some(mask_base))?;
            if !loss.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training loss at epoch {epoch}: {loss:?}"
                )));
            }
            t += 1;
            adam_step(&mut params, &grad, &mut adam, cfg.learning_rate, t)?;
            train_loss.j_nn += loss.j_nn;
            train_loss.j_pi += loss.j_pi;
            train_loss.j_pr += loss.j_pr;
            batches += 1;
        }
        let inv = 1.0 / batches.max(1) as f64;
        let train_avg = LossBreakdown::new(
            train_loss.j_nn * inv,
            train_loss.j_pi * inv,
            train_loss.j_pr * inv,
        );
        let (val_loss, val_psnr, val_ssim) = eval_split(val_set, &params, a, cfg)?;
        let monitored = if val_set.is_empty() { train_avg.total } else { val_loss.total };
        if monitored < best_val {
            best_val = monitored;
            best_params = params.clone();
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
        }
        log.push(TrainLogRow {
            epoch,
            train: train_avg,
            val: val_loss,
            val_psnr,
            val_ssim,
            wall_ms: start.elapsed().as_millis() as u64,
        });
        if cfg.early_stop_patience > 0 && epochs_since_best >= cfg.early_stop_patience {
            break;
        }
    }
    Ok((best_params, log))
}
