//! Monte-Carlo dropout inference: posterior predictive mean, per-pixel
//! sample variance, a data-space consistency score, and the image metrics
//! (MSE, PSNR, SSIM) used to evaluate reconstructions.

use crate::error::{Error, Result};
use crate::field::{op_apply, Field, ForwardOperator};
use crate::neural::{forward, DropoutState, NetParams};
use crate::rng::{stream_id, Purpose};

/// Output of MC-dropout inference.
#[derive(Debug, Clone)]
pub struct UqResult {
    /// Pixel-wise mean over the `n_samples` stochastic forward passes.
    pub mean: Field,
    /// Unbiased per-pixel sample variance (divisor `n_samples - 1`).
    pub var_diag: Field,
    pub n_samples: usize,
    /// `||g - mean_t(A f_t)||^2`: how well the averaged prediction explains
    /// the observation it was computed from.
    pub consistency: f64,
}

/// Runs `n_samples` forward passes with independent dropout masks and
/// aggregates them. With `dropout_rate == 0` every pass is identical, the
/// variance is exactly zero, and one pass suffices; seeds are per-sample so
/// increasing `n_samples` only appends new draws.
pub fn mc_dropout_infer(
    params: &NetParams,
    g: &Field,
    a: &ForwardOperator,
    dropout_rate: f64,
    n_samples: usize,
    seed: u64,
) -> Result<UqResult> {
    if n_samples == 0 {
        return Err(Error::Contract("n_samples must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::Contract("dropout_rate must be in [0, 1)".into()));
    }
    let (ow, oh) = params.arch.output_shape;
    let mut mean = Field::zeros(ow, oh);
    let mut m2 = Field::zeros(ow, oh);
    let mut pred_mean: Option<Field> = None;
    let effective = if dropout_rate == 0.0 { 1 } else { n_samples };
    for t in 0..effective {
        let drop = if dropout_rate == 0.0 {
            DropoutState::disabled()
        } else {
            DropoutState::enabled(
                dropout_rate,
                stream_id(Purpose::Dropout, 1, t as u64).wrapping_add(seed),
            )
        };
        let (f_t, _) = forward(params, g, &drop)?;
        // Welford update keeps the running mean and squared deviations.
        let k = (t + 1) as f64;
        for i in 0..mean.values().len() {
            let x = f_t.values()[i];
            let d = x - mean.values()[i];
            mean.values_mut()[i] += d / k;
            let d2 = x - mean.values()[i];
            m2.values_mut()[i] += d * d2;
        }
        let pred = op_apply(a, &f_t)?;
        pred_mean = Some(match pred_mean {
            None => pred,
            Some(acc) => acc.add(&pred),
        });
    }
    let var_diag = if effective > 1 {
        m2.scaled(1.0 / (effective - 1) as f64)
    } else {
        Field::zeros(ow, oh)
    };
    let g_hat = pred_mean.expect("n_samples >= 1").scaled(1.0 / effective as f64);
    if g_hat.shape() != g.shape() {
        return Err(Error::Shape("observation does not match operator output".into()));
    }
    let r = g.sub(&g_hat);
    Ok(UqResult {
        mean,
        var_diag,
        n_samples,
        consistency: r.dot(&r),
    })
}

/// Mean squared error over all pixels.
pub fn mse(pred: &Field, reference: &Field) -> Result<f64> {
    if pred.shape() != reference.shape() {
        return Err(Error::Shape("mse shape mismatch".into()));
    }
    let d = pred.sub(reference);
    Ok(d.dot(&d) / d.values().len() as f64)
}

/// Peak signal-to-noise ratio `10 log10(range^2 / MSE)` in dB; identical
/// images give `+inf`.
pub fn psnr(pred: &Field, reference: &Field, data_range: f64) -> Result<f64> {
    if data_range <= 0.0 {
        return Err(Error::Contract("data_range must be positive".into()));
    }
    let e = mse(pred, reference)?;
    if e == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (data_range * data_range / e).log10())
    }
}

const SSIM_WINDOW: usize = 8;

/// Mean structural similarity over uniform 8x8 windows at stride 1, with
/// the usual stabilizers `C1 = (0.01 range)^2`, `C2 = (0.03 range)^2`.
/// Images must be at least 8x8.
pub fn ssim(pred: &Field, reference: &Field, data_range: f64) -> Result<f64> {
    if pred.shape() != reference.shape() {
        return Err(Error::Shape("ssim shape mismatch".into()));
    }
    if data_range <= 0.0 {
        return Err(Error::Contract("data_range must be positive".into()));
    }
    let (w, h) = pred.shape();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "ssim requires images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for wy in 0..=(h - SSIM_WINDOW) {
        for wx in 0..=(w - SSIM_WINDOW) {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let x = pred.at(wx + dx, wy + dy);
                    let y = reference.at(wx + dx, wy + dy);
                    sx += x;
                    sy += y;
                    sxx += x * x;
                    syy += y * y;
                    sxy += x * y;
                }
            }
            let mx = sx / n;
            let my = sy / n;
            let vx = sxx / n - mx * mx;
            let vy = syy / n - my * my;
            let cov = sxy / n - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}
