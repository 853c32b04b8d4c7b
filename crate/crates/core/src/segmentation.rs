//! Unsupervised segmentation of action sequences.
//!
//! Slide a fixed window over each episode's actions, train an autoencoder on
//! all windows, measure the encoded-feature distance between adjacent windows,
//! pick peaks of that distance series, and cut the episode at the peaks.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::PrimitiveAction;
use crate::nn::{
    adam_step, backward, forward_cached, AdamConfig, Block, NetworkSpec, OptimizerState,
    ParamSet,
};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const ACTION_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub window_size: usize,
    pub stride: usize,
    /// Total neighborhood size of the peak rule (split evenly per side).
    pub peak_neighborhood: usize,
    pub peak_margin: f64,
    pub ae_hidden: usize,
    pub ae_code: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window_size: 4,
            stride: 1,
            peak_neighborhood: 10,
            peak_margin: 0.05,
            ae_hidden: 16,
            ae_code: 4,
            epochs: 200,
            batch_size: 64,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size < 2 || self.stride < 1 || self.peak_margin < 0.0 {
            return Err(Error::config(
                "window_size >= 2, stride >= 1, peak_margin >= 0 required",
            ));
        }
        Ok(())
    }
}

/// A contiguous slice of one episode's action sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroSegment {
    pub actions: Vec<PrimitiveAction>,
    pub episode: usize,
    pub start: usize,
    pub end: usize,
}

impl MacroSegment {
    pub fn len(&self) -> usize {
        self.actions.len()
    }
    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Overlapping windows, each flattened to `window_size * ACTION_DIM` values.
pub fn slice_windows(actions: &[PrimitiveAction], cfg: &WindowConfig) -> Vec<Vec<f64>> {
    if actions.len() < cfg.window_size {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + cfg.window_size <= actions.len() {
        let mut w = Vec::with_capacity(cfg.window_size * ACTION_DIM);
        for a in &actions[start..start + cfg.window_size] {
            w.push(a.ax());
            w.push(a.ay());
        }
        out.push(w);
        start += cfg.stride;
    }
    out
}

/// The encoder half of the trained window autoencoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowEncoder {
    spec: NetworkSpec,
    params: ParamSet,
    /// Per-epoch mean reconstruction MSE.
    pub training_loss: Vec<f64>,
}

impl WindowEncoder {
    /// Encoded feature of one flattened window.
    pub fn encode(&self, window: &[f64]) -> Result<Vec<f64>> {
        let x = Tensor::from_vec(window.to_vec());
        // Blocks 0..3 are the encoder half; run up to the code activation.
        let cache = forward_cached(&self.spec, &self.params, &x)?;
        Ok(cache_code(&cache))
    }
}

fn cache_code(cache: &crate::nn::ForwardCache) -> Vec<f64> {
    // activation index 3 = output of block 2 (the code layer)
    cache_activation(cache, 3)
}

fn cache_activation(cache: &crate::nn::ForwardCache, idx: usize) -> Vec<f64> {
    cache.activation(idx).data().to_vec()
}

fn ae_spec(input: usize, cfg: &WindowConfig, seed: u64) -> NetworkSpec {
    NetworkSpec::new(
        vec![input],
        vec![
            Block::Dense {
                input,
                output: cfg.ae_hidden,
            },
            Block::Tanh,
            Block::Dense {
                input: cfg.ae_hidden,
                output: cfg.ae_code,
            },
            Block::Dense {
                input: cfg.ae_code,
                output: cfg.ae_hidden,
            },
            Block::Tanh,
            Block::Dense {
                input: cfg.ae_hidden,
                output: input,
            },
        ],
        seed,
    )
    .expect("window AE spec is static")
}

/// Train the sliding-window autoencoder under MSE; returns the encoder half.
pub fn train_window_ae(
    windows: &[Vec<f64>],
    cfg: &WindowConfig,
    seed: u64,
) -> Result<WindowEncoder> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::usage("cannot train the window AE on zero windows"));
    }
    let input = windows[0].len();
    let spec = ae_spec(input, cfg, seed);
    let mut params = spec.init_params();
    let mut opt = OptimizerState::new(&params, AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xae5e_ed01);

    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut training_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = params.zeros_like();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let x = Tensor::from_vec(windows[i].clone());
                let cache = forward_cached(&spec, &params, &x)?;
                let y = cache.output();
                let n = y.numel() as f64;
                let mut g = Tensor::zeros(y.shape().to_vec());
                for (j, (yv, xv)) in y.data().iter().zip(x.data()).enumerate() {
                    let d = yv - xv;
                    batch_loss += d * d / n;
                    g.data_mut()[j] = 2.0 * d / n;
                }
                let (pg, _) = backward(&spec, &params, &cache, &g)?;
                grads.add_assign(&pg);
            }
            grads.scale(1.0 / chunk.len() as f64);
            adam_step(&mut params, &grads, &mut opt)?;
            epoch_loss += batch_loss;
        }
        epoch_loss /= windows.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::numerical(format!(
                "window AE diverged at epoch {epoch} (loss {epoch_loss})"
            )));
        }
        training_loss.push(epoch_loss);
    }
    Ok(WindowEncoder {
        spec,
        params,
        training_loss,
    })
}

/// d[i] = ‖q(w_{i+1}) − q(w_i)‖₂; length is one less than the window count.
pub fn distance_series(encoder: &WindowEncoder, windows: &[Vec<f64>]) -> Result<Vec<f64>> {
    if windows.len() < 2 {
        return Ok(Vec::new());
    }
    let codes: Result<Vec<Vec<f64>>> = windows.iter().map(|w| encoder.encode(w)).collect();
    let codes = codes?;
    Ok(codes
        .windows(2)
        .map(|pair| {
            pair[0]
                .iter()
                .zip(&pair[1])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Indices that are highest within their neighborhood by at least the margin.
///
/// The neighborhood is `peak_neighborhood` points total, half per side. Ties
/// (possible only with margin 0) go to the smaller index. Output is sorted.
pub fn find_peaks(d: &[f64], cfg: &WindowConfig) -> Vec<usize> {
    let half = cfg.peak_neighborhood / 2;
    let mut peaks = Vec::new();
    for j in 0..d.len() {
        let lo = j.saturating_sub(half);
        let hi = (j + half).min(d.len().saturating_sub(1));
        let mut is_peak = true;
        let mut strictly_above_any = false;
        for k in lo..=hi {
            if k == j {
                continue;
            }
            let beats_margin = d[j] >= d[k] + cfg.peak_margin;
            let beats_tie = d[j] > d[k] || k > j;
            if !(beats_margin && beats_tie) {
                is_peak = false;
                break;
            }
            strictly_above_any |= d[j] > d[k];
        }
        if is_peak && strictly_above_any {
            peaks.push(j);
        }
    }
    peaks
}

/// Cut the episode at `peak + window_size/2` (window-center alignment) and
/// merge segments shorter than 2 steps into their predecessor.
pub fn segment_episode(
    actions: &[PrimitiveAction],
    peaks: &[usize],
    cfg: &WindowConfig,
    episode: usize,
) -> Vec<MacroSegment> {
    let len = actions.len();
    if len == 0 {
        return Vec::new();
    }
    // Distance index i compares windows i and i+1, so the later window starts
    // at action (i+1); center-align the cut inside that window.
    let mut cuts: Vec<usize> = peaks
        .iter()
        .map(|&p| p + 1 + cfg.window_size / 2)
        .filter(|&c| c > 0 && c < len)
        .collect();
    cuts.dedup();

    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(len);

    let mut segments: Vec<(usize, usize)> = Vec::new();
    for pair in bounds.windows(2) {
        let (s, e) = (pair[0], pair[1]);
        if e <= s {
            continue;
        }
        if e - s < 2 {
            if let Some(last) = segments.last_mut() {
                last.1 = e;
                continue;
            }
        }
        segments.push((s, e));
    }
    // A single too-short remainder with no predecessor stays as its own
    // segment; tiling wins over the minimum length.
    segments
        .into_iter()
        .map(|(s, e)| MacroSegment {
            actions: actions[s..e].to_vec(),
            episode,
            start: s,
            end: e,
        })
        .collect()
}

/// End-to-end segmentation of a demonstration corpus.
///
/// Returns the per-episode segments, the trained encoder, and the per-episode
/// distance series (for export/plotting).
pub fn segment_corpus(
    episodes: &[Vec<PrimitiveAction>],
    cfg: &WindowConfig,
    seed: u64,
) -> Result<(Vec<Vec<MacroSegment>>, WindowEncoder, Vec<Vec<f64>>)> {
    cfg.validate()?;
    let per_episode_windows: Vec<Vec<Vec<f64>>> = episodes
        .iter()
        .map(|a| slice_windows(a, cfg))
        .collect();
    let all_windows: Vec<Vec<f64>> = per_episode_windows.iter().flatten().cloned().collect();
    if all_windows.is_empty() {
        return Err(Error::usage(
            "corpus has no episode long enough for a single window",
        ));
    }
    let encoder = train_window_ae(&all_windows, cfg, seed)?;

    let mut segments = Vec::with_capacity(episodes.len());
    let mut distances = Vec::with_capacity(episodes.len());
    for (ep, (actions, windows)) in episodes.iter().zip(&per_episode_windows).enumerate() {
        if windows.is_empty() {
            // Too short to slice: the whole episode is one segment.
            distances.push(Vec::new());
            segments.push(vec![MacroSegment {
                actions: actions.clone(),
                episode: ep,
                start: 0,
                end: actions.len(),
            }]);
            continue;
        }
        let d = distance_series(&encoder, windows)?;
        let peaks = find_peaks(&d, cfg);
        segments.push(segment_episode(actions, &peaks, cfg, ep));
        distances.push(d);
    }
    Ok((segments, encoder, distances))
}

/// Synthetic corpus with planted regime changes, used as the segmentation
/// oracle: each episode concatenates constant (plus small noise) action
/// regimes with well-separated levels.
pub fn synthetic_regime_corpus(
    episodes: usize,
    changes_per_episode: usize,
    seed: u64,
) -> (Vec<Vec<PrimitiveAction>>, Vec<Vec<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = Vec::with_capacity(episodes);
    let mut boundaries = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut actions = Vec::new();
        let mut cuts = Vec::new();
        let mut level = [rng.gen_range(-1.0..1.0f64), rng.gen_range(-1.0..1.0f64)];
        for regime in 0..=changes_per_episode {
            let len = rng.gen_range(8..16);
            for _ in 0..len {
                actions.push(PrimitiveAction::new(
                    level[0] + rng.gen_range(-0.02..0.02),
                    level[1] + rng.gen_range(-0.02..0.02),
                ));
            }
            if regime < changes_per_episode {
                cuts.push(actions.len());
                // Force a clear jump to the next regime.
                level = loop {
                    let next = [rng.gen_range(-1.0..1.0f64), rng.gen_range(-1.0..1.0f64)];
                    let dist = ((next[0] - level[0]).powi(2) + (next[1] - level[1]).powi(2)).sqrt();
                    if dist > 0.8 {
                        break next;
                    }
                };
            }
        }
        corpus.push(actions);
        boundaries.push(cuts);
    }
    (corpus, boundaries)
}

#[cfg(test)]
mod tests;
