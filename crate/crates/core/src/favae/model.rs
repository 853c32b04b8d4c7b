//! The ladder network itself: seven block chains composed by hand.
//!
//! ```text
//! x (4,L) ─ trunk1 ─ h1 (c1,l1) ─ trunk2 ─ h2 (c2,l2) ─ trunk3 ─ h3 (d)
//!               │                     │                     │
//!             head1                 head2                 head3
//!               │                     │                     │
//!          (mu1,lv1)             (mu2,lv2)             (mu3,lv3)
//!
//! z = concat(z1, z2, z3) ─ decoder ─ recon (4,L)
//! ```
//!
//! Gradients flow back from the reconstruction through the decoder into each
//! ladder's `z`, through the reparameterization into (mu, logvar), through
//! the heads into the trunk activations, and down the trunk — with the
//! capacity penalty's `sign(KL - C)` term added at the (mu, logvar) stage.

use std::path::Path;

use crate::checkpoint::{self, CheckpointBundle};
use crate::nn::{
    adam_step, backward, forward, forward_cached, reparameterize, AdamConfig, Block, NetworkSpec,
    OptimizerState, ParamSet,
};
use crate::tensor::Tensor;
use crate::{Error, Result};

use super::{
    gaussian_kl, EpochLog, LadderConfig, LatentCode, LossBreakdown, PaddedSegment, INPUT_CHANNELS,
};

const NET_NAMES: [&str; 7] = [
    "trunk1", "trunk2", "trunk3", "head1", "head2", "head3", "decoder",
];

/// The seven chains, in [`NET_NAMES`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct FavaeNets {
    pub nets: Vec<(NetworkSpec, ParamSet)>,
}

impl FavaeNets {
    fn spec(&self, i: usize) -> &NetworkSpec {
        &self.nets[i].0
    }

    fn params(&self, i: usize) -> &ParamSet {
        &self.nets[i].1
    }
}

/// Conv lengths after each stride-2 kernel-3 stage.
fn conv_lengths(input_len: usize) -> (usize, usize) {
    let l1 = (input_len - 3) / 2 + 1;
    let l2 = (l1 - 3) / 2 + 1;
    (l1, l2)
}

fn build_specs(cfg: &LadderConfig, seed: u64) -> Result<Vec<NetworkSpec>> {
    let (c1, c2, d) = cfg.channels;
    let (l1, l2) = conv_lengths(cfg.input_len);
    let dims = &cfg.latent_dims;
    let total_z = cfg.total_latent_dim();
    let chains: Vec<(Vec<usize>, Vec<Block>)> = vec![
        (
            vec![INPUT_CHANNELS, cfg.input_len],
            vec![
                Block::Conv1d {
                    in_channels: INPUT_CHANNELS,
                    out_channels: c1,
                    kernel: 3,
                    stride: 2,
                },
                Block::Tanh,
            ],
        ),
        (
            vec![c1, l1],
            vec![
                Block::Conv1d {
                    in_channels: c1,
                    out_channels: c2,
                    kernel: 3,
                    stride: 2,
                },
                Block::Tanh,
            ],
        ),
        (
            vec![c2, l2],
            vec![
                Block::Flatten,
                Block::Dense {
                    input: c2 * l2,
                    output: d,
                },
                Block::Tanh,
            ],
        ),
        (
            vec![c1, l1],
            vec![
                Block::Flatten,
                Block::Dense {
                    input: c1 * l1,
                    output: 2 * dims[0],
                },
            ],
        ),
        (
            vec![c2, l2],
            vec![
                Block::Flatten,
                Block::Dense {
                    input: c2 * l2,
                    output: 2 * dims[1],
                },
            ],
        ),
        (
            vec![d],
            vec![Block::Dense {
                input: d,
                output: 2 * dims[2],
            }],
        ),
        (
            vec![total_z],
            vec![
                Block::Dense {
                    input: total_z,
                    output: d,
                },
                Block::Tanh,
                Block::Dense {
                    input: d,
                    output: c2 * l2,
                },
                Block::Tanh,
                Block::Reshape {
                    channels: c2,
                    len: l2,
                },
                Block::ConvTranspose1d {
                    in_channels: c2,
                    out_channels: c1,
                    kernel: 3,
                    stride: 2,
                },
                Block::Tanh,
                Block::ConvTranspose1d {
                    in_channels: c1,
                    out_channels: INPUT_CHANNELS,
                    kernel: 3,
                    stride: 2,
                },
            ],
        ),
    ];
    chains
        .into_iter()
        .enumerate()
        .map(|(i, (shape, blocks))| NetworkSpec::new(shape, blocks, seed.wrapping_add(i as u64)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FavaeModel {
    pub cfg: LadderConfig,
    pub nets: FavaeNets,
    pub training_log: Vec<EpochLog>,
    /// A corpus segment kept with the model so latent traversals have a
    /// canonical base point without re-reading the training data.
    pub reference: Option<PaddedSegment>,
    opt: Vec<OptimizerState>,
}

impl FavaeModel {
    pub fn new(cfg: LadderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let specs = build_specs(&cfg, seed)?;
        // Fail fast if the shape algebra is inconsistent.
        for spec in &specs {
            spec.output_shape()?;
        }
        let adam = AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        };
        let nets: Vec<(NetworkSpec, ParamSet)> = specs
            .into_iter()
            .map(|s| {
                let p = s.init_params();
                (s, p)
            })
            .collect();
        let opt = nets
            .iter()
            .map(|(_, p)| OptimizerState::new(p, adam))
            .collect();
        Ok(FavaeModel {
            cfg,
            nets: FavaeNets { nets },
            training_log: Vec::new(),
            reference: None,
            opt,
        })
    }

    /// Posterior at the mean: z = mu (no sampling noise).
    pub fn encode_mean(&self, seg: &PaddedSegment) -> Result<LatentCode> {
        let zero_noise: Vec<Vec<f64>> = self
            .cfg
            .latent_dims
            .iter()
            .map(|&d| vec![0.0; d])
            .collect();
        self.encode_with_noise(&seg.to_tensor(), &zero_noise)
    }

    pub fn encode_with_noise(&self, x: &Tensor, noise: &[Vec<f64>]) -> Result<LatentCode> {
        let h1 = forward(self.nets.spec(0), self.nets.params(0), x)?;
        let h2 = forward(self.nets.spec(1), self.nets.params(1), &h1)?;
        let h3 = forward(self.nets.spec(2), self.nets.params(2), &h2)?;
        let heads = [
            forward(self.nets.spec(3), self.nets.params(3), &h1)?,
            forward(self.nets.spec(4), self.nets.params(4), &h2)?,
            forward(self.nets.spec(5), self.nets.params(5), &h3)?,
        ];
        let mut code = LatentCode {
            mu: Vec::new(),
            logvar: Vec::new(),
            z: Vec::new(),
        };
        for (l, out) in heads.iter().enumerate() {
            let dim = self.cfg.latent_dims[l];
            let mu = out.data()[..dim].to_vec();
            let lv = out.data()[dim..].to_vec();
            code.z.push(reparameterize(&mu, &lv, &noise[l]));
            code.mu.push(mu);
            code.logvar.push(lv);
        }
        Ok(code)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Tensor> {
        if z.len() != self.cfg.total_latent_dim() {
            return Err(Error::usage(format!(
                "latent has {} dims, model expects {}",
                z.len(),
                self.cfg.total_latent_dim()
            )));
        }
        forward(self.nets.spec(6), self.nets.params(6), &Tensor::from_vec(z.to_vec()))
    }

    pub fn reconstruct_mean(&self, seg: &PaddedSegment) -> Result<Tensor> {
        let code = self.encode_mean(seg)?;
        self.decode(&code.concat_z())
    }

    /// One gradient step over a batch. `noise` is per-sample, per-ladder
    /// standard-normal noise for the reparameterization.
    pub fn train_batch(
        &mut self,
        batch: &[&Tensor],
        noise: &[Vec<Vec<f64>>],
        c_current: &[f64],
    ) -> Result<LossBreakdown> {
        if batch.is_empty() || batch.len() != noise.len() {
            return Err(Error::config("train_batch: empty or mismatched batch"));
        }
        let b = batch.len() as f64;
        let ladders = self.cfg.num_ladders();

        // Forward pass: keep every cache for the backward sweep.
        struct SampleFwd {
            trunks: Vec<crate::nn::ForwardCache>,
            heads: Vec<crate::nn::ForwardCache>,
            dec: crate::nn::ForwardCache,
            mu: Vec<Vec<f64>>,
            logvar: Vec<Vec<f64>>,
        }
        let mut fwds = Vec::with_capacity(batch.len());
        let mut recon_loss = 0.0;
        let mut kl = vec![0.0; ladders];
        for (x, n) in batch.iter().zip(noise) {
            let c0 = forward_cached(self.nets.spec(0), self.nets.params(0), x)?;
            let c1 = forward_cached(self.nets.spec(1), self.nets.params(1), c0.output())?;
            let c2 = forward_cached(self.nets.spec(2), self.nets.params(2), c1.output())?;
            let hc = vec![
                forward_cached(self.nets.spec(3), self.nets.params(3), c0.output())?,
                forward_cached(self.nets.spec(4), self.nets.params(4), c1.output())?,
                forward_cached(self.nets.spec(5), self.nets.params(5), c2.output())?,
            ];
            let mut mu = Vec::new();
            let mut logvar = Vec::new();
            let mut z = Vec::new();
            for (l, head) in hc.iter().enumerate() {
                let dim = self.cfg.latent_dims[l];
                let m = head.output().data()[..dim].to_vec();
                let lv = head.output().data()[dim..].to_vec();
                kl[l] += gaussian_kl(&m, &lv) / b;
                z.extend(reparameterize(&m, &lv, &n[l]));
                mu.push(m);
                logvar.push(lv);
            }
            let dec = forward_cached(
                self.nets.spec(6),
                self.nets.params(6),
                &Tensor::from_vec(z),
            )?;
            recon_loss += x
                .data()
                .iter()
                .zip(dec.output().data())
                .map(|(a, r)| (a - r) * (a - r))
                .sum::<f64>()
                / b;
            fwds.push(SampleFwd {
                trunks: vec![c0, c1, c2],
                heads: hc,
                dec,
                mu,
                logvar,
            });
        }

        // sign(KL - C) for the absolute-value capacity penalty; zero exactly
        // at the kink so the subgradient is well defined.
        let kl_sign: Vec<f64> = kl
            .iter()
            .zip(c_current)
            .map(|(k, c)| {
                let d = k - c;
                if d == 0.0 {
                    0.0
                } else {
                    d.signum()
                }
            })
            .collect();

        // Backward pass, accumulating gradients per network.
        let mut grads: Vec<ParamSet> = self.nets.nets.iter().map(|(_, p)| p.zeros_like()).collect();
        for ((x, n), f) in batch.iter().zip(noise).zip(&fwds) {
            // d(sum of squared errors)/d(recon), batch-meaned
            let grecon = Tensor::new(
                x.shape().to_vec(),
                x.data()
                    .iter()
                    .zip(f.dec.output().data())
                    .map(|(a, r)| 2.0 * (r - a) / b)
                    .collect(),
            )?;
            let (gdec, gz) = backward(self.nets.spec(6), self.nets.params(6), &f.dec, &grecon)?;
            grads[6].add_assign(&gdec);

            // Split the latent gradient per ladder and add the KL term.
            let mut gh_trunk: Vec<Option<Tensor>> = vec![None, None, None];
            let mut offset = 0;
            for l in 0..ladders {
                let dim = self.cfg.latent_dims[l];
                let gz_l = &gz.data()[offset..offset + dim];
                offset += dim;
                let kcoef = self.cfg.beta * kl_sign[l] / b;
                let mut ghead = vec![0.0; 2 * dim];
                for i in 0..dim {
                    let m = f.mu[l][i];
                    let lv = f.logvar[l][i];
                    // z = mu + exp(lv/2) * noise
                    ghead[i] = gz_l[i] + kcoef * m;
                    ghead[dim + i] =
                        gz_l[i] * n[l][i] * 0.5 * (lv / 2.0).exp() + kcoef * 0.5 * (lv.exp() - 1.0);
                }
                let (gh, gin) = backward(
                    self.nets.spec(3 + l),
                    self.nets.params(3 + l),
                    &f.heads[l],
                    &Tensor::from_vec(ghead),
                )?;
                grads[3 + l].add_assign(&gh);
                gh_trunk[l] = Some(gin);
            }

            // Trunk sweep from the top: each stage receives its head's
            // gradient plus the gradient flowing down from the stage above.
            let mut from_above: Option<Tensor> = None;
            for stage in (0..3).rev() {
                let mut g = gh_trunk[stage].take().unwrap();
                if let Some(up) = from_above.take() {
                    g.add_assign(&up);
                }
                let (gt, gin) = backward(
                    self.nets.spec(stage),
                    self.nets.params(stage),
                    &f.trunks[stage],
                    &g,
                )?;
                grads[stage].add_assign(&gt);
                from_above = Some(gin);
            }
        }

        for (i, g) in grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite gradient in {}",
                    NET_NAMES[i]
                )));
            }
            adam_step(&mut self.nets.nets[i].1, g, &mut self.opt[i])?;
        }

        let penalty: f64 = kl
            .iter()
            .zip(c_current)
            .map(|(k, c)| (k - c).abs())
            .sum();
        Ok(LossBreakdown {
            total: recon_loss + self.cfg.beta * penalty,
            recon: recon_loss,
            kl,
        })
    }

    /// Loss and gradients without updating parameters; used by gradient
    /// checks. Returns per-network gradients in [`NET_NAMES`] order.
    pub fn loss_and_grads(
        &self,
        batch: &[&Tensor],
        noise: &[Vec<Vec<f64>>],
        c_current: &[f64],
    ) -> Result<(LossBreakdown, Vec<ParamSet>)> {
        let mut probe = self.clone();
        // Run train_batch with a zero learning rate so parameters stay put,
        // then recompute the gradients by diffing optimizer moments is
        // fragile; instead reuse the real path with lr = 0 and recover the
        // gradients from the first-moment estimate (m = (1-beta1) * g after
        // one step from zero state).
        for o in &mut probe.opt {
            o.config.learning_rate = 0.0;
        }
        let stats = probe.train_batch(batch, noise, c_current)?;
        let grads = probe
            .opt
            .iter()
            .zip(&self.nets.nets)
            .map(|(o, (_, p))| {
                let mut g = p.zeros_like();
                for (gt, mt) in g.tensors.iter_mut().zip(o.first_moment()) {
                    for (gv, mv) in gt.1.data_mut().iter_mut().zip(mt.data()) {
                        *gv = mv / (1.0 - o.config.beta1);
                    }
                }
                g
            })
            .collect();
        Ok((stats, grads))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "favae",
            "config": self.cfg,
            "training_log": self.training_log,
            "reference": self.reference,
        });
        let bundle = CheckpointBundle {
            meta,
            networks: self
                .nets
                .nets
                .iter()
                .enumerate()
                .map(|(i, (s, p))| (NET_NAMES[i].to_string(), s.clone(), p.clone()))
                .collect(),
        };
        checkpoint::save(path, &bundle)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bundle = checkpoint::load(path)?;
        if bundle.meta.get("kind").and_then(|k| k.as_str()) != Some("favae") {
            return Err(Error::config("checkpoint is not a FAVAE model"));
        }
        let cfg: LadderConfig = serde_json::from_value(
            bundle
                .meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::config("FAVAE checkpoint missing config"))?,
        )?;
        let training_log: Vec<EpochLog> = bundle
            .meta
            .get("training_log")
            .cloned()
            .map(serde_json::from_value)
            .transpose()?
            .unwrap_or_default();
        let reference: Option<PaddedSegment> = bundle
            .meta
            .get("reference")
            .cloned()
            .map(serde_json::from_value)
            .transpose()?
            .unwrap_or_default();
        let mut nets = Vec::new();
        for name in NET_NAMES {
            let (s, p) = bundle.network(name)?;
            nets.push((s.clone(), p.clone()));
        }
        let adam = AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        };
        let opt = nets
            .iter()
            .map(|(_, p): &(NetworkSpec, ParamSet)| OptimizerState::new(p, adam))
            .collect();
        Ok(FavaeModel {
            cfg,
            nets: FavaeNets { nets },
            training_log,
            reference,
            opt,
        })
    }
}
