//! Ladder sequence-VAE over padded macro-action segments.
//!
//! Segments are zero-padded to a fixed length `L` and carry two indicator
//! channels (`action_on`, `action_off`) marking real versus padded timesteps.
//! The encoder is a small conv stack with three latent heads ("ladders") at
//! increasing depth; each ladder has its own KL term with an information
//! capacity `C` that ramps linearly from 0 to a calibrated `C_last` during
//! training. The loss is
//!
//! ```text
//! MSE(x, recon) + beta * sum_over_ladders |KL_ladder - C_ladder|
//! ```
//!
//! Decoding mirrors the encoder; at use time the indicator channels are
//! passed through a softmax per timestep and the decoded sequence is cut at
//! the first timestep where `action_off` wins.

mod model;

pub use model::{FavaeModel, FavaeNets};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::PrimitiveAction;
use crate::segmentation::{MacroSegment, ACTION_DIM};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Channels fed to the encoder: the action dims plus the two indicators.
pub const INPUT_CHANNELS: usize = ACTION_DIM + 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaddedSegment {
    /// L action rows; rows at and beyond `true_length` are zero.
    pub actions: Vec<[f64; 2]>,
    pub action_on: Vec<f64>,
    pub action_off: Vec<f64>,
    pub true_length: usize,
}

impl PaddedSegment {
    pub fn padded_len(&self) -> usize {
        self.actions.len()
    }

    /// Channel-major tensor (4, L): ax, ay, action_on, action_off.
    pub fn to_tensor(&self) -> Tensor {
        let len = self.padded_len();
        let mut data = Vec::with_capacity(INPUT_CHANNELS * len);
        data.extend(self.actions.iter().map(|a| a[0]));
        data.extend(self.actions.iter().map(|a| a[1]));
        data.extend_from_slice(&self.action_on);
        data.extend_from_slice(&self.action_off);
        Tensor::new(vec![INPUT_CHANNELS, len], data).unwrap()
    }
}

/// Zero-pad a segment to length `input_len` and attach indicator channels.
pub fn pad_segment(seg: &MacroSegment, input_len: usize) -> Result<PaddedSegment> {
    if seg.len() > input_len {
        return Err(Error::usage(format!(
            "segment of length {} exceeds FAVAE input length {input_len}; split it first",
            seg.len()
        )));
    }
    if seg.is_empty() {
        return Err(Error::usage("cannot pad an empty segment"));
    }
    let l = seg.len();
    let mut actions = Vec::with_capacity(input_len);
    for a in &seg.actions {
        actions.push([a.ax(), a.ay()]);
    }
    actions.resize(input_len, [0.0, 0.0]);
    let action_on: Vec<f64> = (0..input_len).map(|t| if t < l { 1.0 } else { 0.0 }).collect();
    let action_off: Vec<f64> = action_on.iter().map(|v| 1.0 - v).collect();
    Ok(PaddedSegment {
        actions,
        action_on,
        action_off,
        true_length: l,
    })
}

/// Halve segments recursively until every piece fits into `input_len`.
pub fn split_overlong(seg: &MacroSegment, input_len: usize) -> Vec<MacroSegment> {
    if seg.len() <= input_len {
        return vec![seg.clone()];
    }
    let mid = seg.len() / 2;
    let left = MacroSegment {
        actions: seg.actions[..mid].to_vec(),
        episode: seg.episode,
        start: seg.start,
        end: seg.start + mid,
    };
    let right = MacroSegment {
        actions: seg.actions[mid..].to_vec(),
        episode: seg.episode,
        start: seg.start + mid,
        end: seg.end,
    };
    let mut out = split_overlong(&left, input_len);
    out.extend(split_overlong(&right, input_len));
    out
}

/// Input length for the model: the 95th percentile of segment lengths,
/// rounded up to the next admissible conv length (L ≡ 3 mod 4, at least 11).
pub fn choose_input_len(lengths: &[usize]) -> usize {
    let mut sorted: Vec<usize> = lengths.to_vec();
    sorted.sort_unstable();
    let p95 = if sorted.is_empty() {
        11
    } else {
        let idx = ((sorted.len() as f64) * 0.95).ceil() as usize;
        sorted[idx.saturating_sub(1).min(sorted.len() - 1)]
    };
    let mut len = p95.max(11);
    while len % 4 != 3 {
        len += 1;
    }
    len
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderConfig {
    /// Latent width of each ladder (the ladder count is this length).
    pub latent_dims: Vec<usize>,
    pub beta: f64,
    /// Per-ladder capacity targets; populated by [`calibrate_capacity`].
    pub c_last: Vec<f64>,
    pub anneal_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Padded input length L.
    pub input_len: usize,
    /// Encoder conv channels (first, second) and dense trunk width.
    pub channels: (usize, usize, usize),
}

impl LadderConfig {
    pub fn for_input_len(input_len: usize) -> Self {
        LadderConfig {
            latent_dims: vec![4, 4, 4],
            beta: 50.0,
            c_last: Vec::new(),
            anneal_epochs: 240,
            epochs: 300,
            batch_size: 64,
            learning_rate: 1e-3,
            input_len,
            channels: (32, 64, 64),
        }
    }

    pub fn num_ladders(&self) -> usize {
        self.latent_dims.len()
    }

    pub fn total_latent_dim(&self) -> usize {
        self.latent_dims.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_ladders() != 3 {
            return Err(Error::config("the ladder network uses exactly 3 ladders"));
        }
        if self.beta <= 0.0 {
            return Err(Error::config("beta must be positive"));
        }
        if !self.c_last.is_empty() && self.c_last.len() != self.num_ladders() {
            return Err(Error::config("need one C_last per ladder"));
        }
        if self.c_last.iter().any(|c| *c < 0.0) {
            return Err(Error::config("C_last must be non-negative"));
        }
        if self.input_len < 11 || self.input_len % 4 != 3 {
            return Err(Error::config(
                "input_len must be at least 11 and congruent to 3 mod 4",
            ));
        }
        Ok(())
    }

    /// Scheduled capacity at `epoch`: a linear ramp from 0 to C_last over
    /// `anneal_epochs`, constant afterwards.
    pub fn scheduled_c(&self, epoch: usize) -> Vec<f64> {
        let frac = if self.anneal_epochs == 0 {
            1.0
        } else {
            (epoch as f64 / self.anneal_epochs as f64).min(1.0)
        };
        self.c_last.iter().map(|c| c * frac).collect()
    }
}

/// Posterior parameters and sample for each ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub mu: Vec<Vec<f64>>,
    pub logvar: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
}

impl LatentCode {
    pub fn concat_z(&self) -> Vec<f64> {
        self.z.iter().flatten().copied().collect()
    }
}

/// Closed-form diagonal-Gaussian KL to the standard normal, summed over
/// latent dimensions.
pub fn gaussian_kl(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    /// Batch-mean KL per ladder.
    pub kl: Vec<f64>,
}

/// The capacity-annealed loss over a batch: reconstruction error plus
/// `beta * sum |KL_ladder - C_ladder|` with the KL batch-meaned per ladder.
///
/// The reconstruction term is the per-sample *sum* of squared errors
/// (batch-meaned), matching the KL's per-dimension-sum convention; a
/// per-element mean would rescale beta by the sequence size.
pub fn favae_loss(
    inputs: &[Tensor],
    recons: &[Tensor],
    codes: &[LatentCode],
    cfg: &LadderConfig,
    c_current: &[f64],
) -> Result<LossBreakdown> {
    if inputs.len() != recons.len() || inputs.len() != codes.len() || inputs.is_empty() {
        return Err(Error::config("favae_loss: mismatched or empty batch"));
    }
    let batch = inputs.len() as f64;
    let mut recon = 0.0;
    for (x, r) in inputs.iter().zip(recons) {
        if x.shape() != r.shape() {
            return Err(Error::config("favae_loss: input/recon shape mismatch"));
        }
        let sample_sse: f64 = x
            .data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        recon += sample_sse / batch;
    }
    let ladders = cfg.num_ladders();
    let mut kl = vec![0.0; ladders];
    for code in codes {
        for (l, k) in kl.iter_mut().enumerate() {
            *k += gaussian_kl(&code.mu[l], &code.logvar[l]) / batch;
        }
    }
    let penalty: f64 = kl
        .iter()
        .zip(c_current)
        .map(|(k, c)| (k - c).abs())
        .sum();
    Ok(LossBreakdown {
        total: recon + cfg.beta * penalty,
        recon,
        kl,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub kl: Vec<f64>,
    pub scheduled_c: Vec<f64>,
}

/// Train a throwaway model with a small beta and zero capacity; the final
/// per-ladder KL over the corpus becomes `C_last`.
pub fn calibrate_capacity(
    corpus: &[PaddedSegment],
    cfg: &LadderConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut calib_cfg = cfg.clone();
    calib_cfg.beta = 0.1;
    calib_cfg.c_last = vec![0.0; cfg.num_ladders()];
    calib_cfg.anneal_epochs = 0;
    let model = train_favae_inner(corpus, &calib_cfg, seed)?;
    // Final KL over the whole corpus at the trained parameters.
    let batch = corpus.len() as f64;
    let mut kl = vec![0.0; cfg.num_ladders()];
    for seg in corpus {
        let code = model.encode_mean(seg)?;
        for (l, k) in kl.iter_mut().enumerate() {
            *k += gaussian_kl(&code.mu[l], &code.logvar[l]) / batch;
        }
    }
    Ok(kl)
}

/// Train with the linear capacity ramp. `cfg.c_last` must be populated.
pub fn train_favae(corpus: &[PaddedSegment], cfg: &LadderConfig, seed: u64) -> Result<FavaeModel> {
    if cfg.c_last.len() != cfg.num_ladders() {
        return Err(Error::usage(
            "cfg.c_last is empty; run calibrate_capacity first",
        ));
    }
    train_favae_inner(corpus, cfg, seed)
}

fn train_favae_inner(
    corpus: &[PaddedSegment],
    cfg: &LadderConfig,
    seed: u64,
) -> Result<FavaeModel> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::usage("cannot train FAVAE on an empty corpus"));
    }
    for seg in corpus {
        if seg.padded_len() != cfg.input_len {
            return Err(Error::config(format!(
                "segment padded to {} but model expects {}",
                seg.padded_len(),
                cfg.input_len
            )));
        }
    }
    let mut model = FavaeModel::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfa4a_e001);
    let inputs: Vec<Tensor> = corpus.iter().map(|s| s.to_tensor()).collect();

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..cfg.epochs {
        let c_current = cfg.scheduled_c(epoch);
        order.shuffle(&mut rng);
        let mut epoch_recon = 0.0;
        let mut epoch_kl = vec![0.0; cfg.num_ladders()];
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Tensor> = chunk.iter().map(|&i| &inputs[i]).collect();
            let noise: Vec<Vec<Vec<f64>>> = chunk
                .iter()
                .map(|_| {
                    cfg.latent_dims
                        .iter()
                        .map(|&d| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
                        .collect()
                })
                .collect();
            let stats = model.train_batch(&batch, &noise, &c_current)?;
            epoch_recon += stats.recon;
            for (acc, k) in epoch_kl.iter_mut().zip(&stats.kl) {
                *acc += k;
            }
            batches += 1.0;
        }
        epoch_recon /= batches;
        for k in &mut epoch_kl {
            *k /= batches;
        }
        let penalty: f64 = epoch_kl
            .iter()
            .zip(&c_current)
            .map(|(k, c)| (k - c).abs())
            .sum();
        let total = epoch_recon + cfg.beta * penalty;
        if !total.is_finite() {
            return Err(Error::numerical(format!(
                "FAVAE training diverged at epoch {epoch}"
            )));
        }
        model.training_log.push(EpochLog {
            epoch,
            total,
            recon: epoch_recon,
            kl: epoch_kl,
            scheduled_c: c_current,
        });
    }
    Ok(model)
}

/// Decode a raw latent vector (all ladders concatenated) into a trimmed
/// primitive-action sequence.
pub fn decode_z(model: &FavaeModel, z: &[f64]) -> Result<Vec<PrimitiveAction>> {
    trim_decoded(&model.decode(z)?, model.cfg.input_len)
}

/// Decode a latent code and cut the sequence where `action_off` first wins
/// the per-timestep softmax; a timestep-0 cut is clamped to length 1.
pub fn decode_and_trim(model: &FavaeModel, z: &LatentCode) -> Result<Vec<PrimitiveAction>> {
    let recon = model.decode(&z.concat_z())?;
    trim_decoded(&recon, model.cfg.input_len)
}

pub(crate) fn trim_decoded(recon: &Tensor, input_len: usize) -> Result<Vec<PrimitiveAction>> {
    let d = recon.data();
    let on = &d[2 * input_len..3 * input_len];
    let off = &d[3 * input_len..4 * input_len];
    // Softmax over two logits preserves order, so compare them directly.
    let mut cut = input_len;
    for t in 0..input_len {
        if off[t] > on[t] {
            cut = t;
            break;
        }
    }
    let len = cut.max(1);
    let actions = (0..len)
        .map(|t| {
            PrimitiveAction::new(
                d[t].clamp(-1.0, 1.0),
                d[input_len + t].clamp(-1.0, 1.0),
            )
        })
        .collect();
    Ok(actions)
}

/// Decode-and-trim the base segment's posterior mean with one latent
/// coordinate swept over `values`, all others held fixed.
pub fn latent_traversal(
    model: &FavaeModel,
    base: &PaddedSegment,
    ladder: usize,
    index: usize,
    values: &[f64],
) -> Result<Vec<Vec<PrimitiveAction>>> {
    let dims = &model.cfg.latent_dims;
    if ladder >= dims.len() || index >= dims[ladder] {
        return Err(Error::usage(format!(
            "latent index ({ladder},{index}) out of range for dims {dims:?}"
        )));
    }
    let code = model.encode_mean(base)?;
    values
        .iter()
        .map(|&v| {
            let mut z = code.clone();
            z.z[ladder][index] = v;
            decode_and_trim(model, &z)
        })
        .collect()
}
