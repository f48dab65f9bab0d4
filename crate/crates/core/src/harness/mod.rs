//! Training and evaluation loops, mismatch experiments, and reports.

mod report;
mod train;

pub mod experiment;

pub use report::{compare_storage, EvalReport, ReportRow, StorageReport, TrialRecord, CSV_HEADER};
pub use train::{train, TrainLog, TrainSpec};

use djscc_tensor::Tensor;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::sample_loo;
use crate::data::{batch_tensor, MultibandImage};
use crate::error::{domain, Result};
use crate::link::{noise_sigma, sample_awgn};
use crate::model::{psnr, AttentionSwitch, ConditionSpec, Network};

/// How the channel gain is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fading {
    /// Loo-distributed gains from the condition's parameters.
    #[default]
    Loo,
    /// `h ≡ 1`: AWGN only.
    Unit,
    /// `h ≡ 0`: the decoder sees noise alone.
    Zero,
}

/// Draw `k` gains then `k` noise samples for one transmission.
pub(crate) fn draw_channel<R: Rng>(
    fading: Fading,
    condition: &ConditionSpec,
    power: f64,
    k: usize,
    rng: &mut R,
) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    let gains = match fading {
        Fading::Loo => sample_loo(&condition.loo()?, k, rng)?,
        Fading::Unit => vec![Complex64::new(1.0, 0.0); k],
        Fading::Zero => vec![Complex64::new(0.0, 0.0); k],
    };
    let noise = sample_awgn(&noise_sigma(condition.snr_db, power)?, k, rng)?;
    Ok((gains, noise))
}

pub(crate) fn paired(rows: &[Vec<Complex64>]) -> Tensor<f32> {
    let k = rows.first().map_or(0, Vec::len);
    let data = rows.iter().flatten().flat_map(|z| [z.re as f32, z.im as f32]).collect();
    Tensor::new([rows.len(), 2 * k], data).expect("rows of equal length")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub trials_per_image: usize,
    pub seed: u64,
    pub fading: Fading,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { trials_per_image: 10, seed: 0, fading: Fading::Loo }
    }
}

/// Random source for one (image, trial) pair: the master seed selects the
/// key and the pair selects the stream, so tasks can run in any order.
pub fn trial_rng(seed: u64, image: usize, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((image as u64) << 32) | trial as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub mean_psnr_db: f64,
    pub trials: Vec<TrialRecord>,
}

/// Mean PSNR over `trials_per_image` transmissions of every image. The
/// attention modules see `assumed`; the channel is drawn from `actual`.
pub fn evaluate_mismatched(
    net: &Network,
    assumed: &ConditionSpec,
    actual: &ConditionSpec,
    images: &[MultibandImage],
    opts: &EvalOptions,
) -> Result<EvalOutcome> {
    if images.is_empty() || opts.trials_per_image == 0 {
        return Err(domain("evaluation needs at least one image and one trial"));
    }
    let k = net.channels().k;
    let power = net.config().power_constraint;
    let t = opts.trials_per_image;
    let per_image: Vec<Result<Vec<TrialRecord>>> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let mut gains = Vec::with_capacity(t);
            let mut noise = Vec::with_capacity(t);
            for trial in 0..t {
                let (h, n) = draw_channel(opts.fading, actual, power, k, &mut trial_rng(opts.seed, i, trial))?;
                gains.push(h);
                noise.push(n);
            }
            let batch = batch_tensor(&vec![img; t])?;
            let recon = net.transmit(&batch, &vec![*assumed; t], &paired(&gains), &paired(&noise), AttentionSwitch::Active)?;
            let original = img.to_hwc();
            (0..t)
                .map(|trial| {
                    let x_hat = recon.batch_item(trial)?.reshape(original.shape())?;
                    Ok(TrialRecord { image: i, trial, psnr_db: psnr(&original, &x_hat, 1.0)? })
                })
                .collect()
        })
        .collect();
    let mut trials = Vec::with_capacity(images.len() * t);
    for r in per_image {
        trials.extend(r?);
    }
    let mean_psnr_db = trials.iter().map(|r| r.psnr_db).sum::<f64>() / trials.len() as f64;
    Ok(EvalOutcome { mean_psnr_db, trials })
}

pub fn evaluate(net: &Network, condition: &ConditionSpec, images: &[MultibandImage], opts: &EvalOptions) -> Result<EvalOutcome> {
    evaluate_mismatched(net, condition, condition, images, opts)
}

fn row(
    model: &str,
    trained: &ConditionSpec,
    eval: &ConditionSpec,
    net: &Network,
    outcome: &EvalOutcome,
) -> (ReportRow, Vec<TrialRecord>) {
    let r = ReportRow {
        model: model.to_string(),
        trained: *trained,
        eval: *eval,
        ratio: net.channels().realized_ratio,
        mean_psnr_db: outcome.mean_psnr_db,
        n_trials: outcome.trials.len(),
    };
    (r, outcome.trials.clone())
}

/// Evaluate at each SNR in `snr_list` with the fading of `fading_condition`.
/// Attention modules receive the evaluated SNR. `trained` is the condition
/// reported in the trained-condition columns: the training condition of a
/// per-condition model, or the condition an adaptable model is given.
pub fn snr_mismatch_sweep(
    net: &Network,
    model: &str,
    trained: &ConditionSpec,
    fading_condition: &ConditionSpec,
    snr_list: &[f64],
    images: &[MultibandImage],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for &snr in snr_list {
        let cond = fading_condition.with_snr(snr);
        let outcome = evaluate(net, &cond, images, opts)?;
        let (r, log) = row(model, trained, &cond, net, &outcome);
        report.push(r, log);
    }
    Ok(report)
}

/// One report row for attention given `assumed` and the channel `actual`.
pub fn state_mismatch(
    net: &Network,
    model: &str,
    trained: &ConditionSpec,
    assumed: &ConditionSpec,
    actual: &ConditionSpec,
    images: &[MultibandImage],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let outcome = evaluate_mismatched(net, assumed, actual, images, opts)?;
    let mut report = EvalReport::default();
    let (r, log) = row(model, trained, actual, net, &outcome);
    report.push(r, log);
    Ok(report)
}

/// Plain evaluation packaged as a single report row.
pub fn evaluation_row(
    net: &Network,
    model: &str,
    trained: &ConditionSpec,
    condition: &ConditionSpec,
    images: &[MultibandImage],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    state_mismatch(net, model, trained, condition, condition, images, opts)
}
