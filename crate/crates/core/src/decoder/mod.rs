//! Query decoder: support/query fusion with cross large-kernel attention,
//! multi-scale attention gates between levels, and a one-channel head.
//!
//! Pyramids are indexed from the finest level (`pyramid[0]`, level 1) to
//! the coarsest. The decoder walks them coarse to fine.

mod blocks;
mod checkpoint;
mod loss;
mod optim;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use blocks::{clka_block, fuse_support_query, lka_attention, lka_kernel_sizes, lka_support, msag_gate, Graph};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use loss::{mask_to_target, predict_mask, seg_loss, LossParts};
pub use optim::Adam;

use crate::error::{Error, Result};
use crate::spectral::PrototypeSet;
use crate::tensorkit::{BatchStats, BnMode, Real, Tape, Tensor, Var};

pub const LEVELS: usize = 4;

/// Statistics used by the batch norms when predicting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceNorm {
    /// Statistics of the query itself, as during training. Episodes carry a
    /// single query, so training-mode statistics are per image and this
    /// keeps prediction consistent with what the decoder was trained on.
    Query,
    /// Running estimates accumulated during training.
    Running,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Channels of each pyramid level, finest first.
    pub level_channels: Vec<usize>,
    /// Target large-kernel size `K` and decomposition factor `d`.
    pub lka_kernel: usize,
    pub lka_dilation: usize,
    /// Dilation rates of the 3x3 atrous bank inside each gate.
    pub atrous_rates: Vec<usize>,
    /// Width of the gate's intermediate representation.
    pub gate_channels: usize,
    pub use_clka: bool,
    pub use_msag: bool,
    pub bn_momentum: f64,
    pub inference_norm: InferenceNorm,
    /// Seed of the parameter initialization.
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            level_channels: vec![64, 64, 64, 64],
            lka_kernel: 21,
            lka_dilation: 3,
            atrous_rates: vec![1, 2, 3],
            gate_channels: 32,
            use_clka: true,
            use_msag: true,
            bn_momentum: 0.1,
            inference_norm: InferenceNorm::Query,
            seed: 0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.level_channels.len() != LEVELS {
            return Err(Error::Config(format!(
                "decoder expects {LEVELS} pyramid levels, got {}",
                self.level_channels.len()
            )));
        }
        if self.level_channels.contains(&0) || self.gate_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.lka_kernel == 0 || self.lka_dilation == 0 {
            return Err(Error::Config("LKA kernel and dilation must be positive".into()));
        }
        if self.atrous_rates.is_empty() || self.atrous_rates.contains(&0) {
            return Err(Error::Config("atrous rates must be non-empty and positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!(
                "bn_momentum {} outside [0, 1]",
                self.bn_momentum
            )));
        }
        Ok(())
    }
}

/// Running statistics of one batch norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Running<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Name prefix of the block at `level` (0 = finest), numbered like the
/// pyramid: `b1` finest, `b4` coarsest.
pub(crate) fn block_name(level: usize) -> String {
    format!("b{}", level + 1)
}

#[derive(Clone, Debug)]
pub struct Decoder<T> {
    pub config: DecoderConfig,
    pub params: BTreeMap<String, Tensor<T>>,
    pub running: BTreeMap<String, Running<T>>,
}

/// One recorded forward pass.
pub struct Pass<T> {
    pub logits: Var,
    /// Tape handle of every parameter, by name.
    pub vars: BTreeMap<String, Var>,
    /// Batch statistics of every batch norm (training mode only).
    pub stats: BTreeMap<String, BatchStats<T>>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    /// He-normal weights for a layer with `fan_in` inputs per output.
    fn he<T: Real>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        Tensor::from_fn(shape, |_| T::of(normal.sample(&mut self.rng))).expect("valid shape")
    }
}

impl<T: Real> Decoder<T> {
    pub fn new(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let mut params = BTreeMap::new();
        let mut running = BTreeMap::new();
        let mut add_bn = |params: &mut BTreeMap<String, Tensor<T>>, name: String, c: usize| {
            params.insert(format!("{name}.gamma"), Tensor::ones(&[c]).expect("c > 0"));
            params.insert(format!("{name}.beta"), Tensor::zeros(&[c]).expect("c > 0"));
            running.insert(
                name,
                Running {
                    mean: vec![T::zero(); c],
                    var: vec![T::one(); c],
                },
            );
        };
        let (dw, dwd) = lka_kernel_sizes(config.lka_kernel, config.lka_dilation);
        let g = config.gate_channels;
        for level in (0..LEVELS).rev() {
            let b = block_name(level);
            let m = config.level_channels[level];
            params.insert(format!("{b}.fuse.weight"), init.he(&[m, m, 2, 1, 1], 2 * m));
            params.insert(format!("{b}.fuse.bias"), Tensor::zeros(&[m])?);
            if config.use_clka {
                params.insert(format!("{b}.lka.dw.weight"), init.he(&[m, 1, dw, dw], dw * dw));
                params.insert(format!("{b}.lka.dwd.weight"), init.he(&[m, 1, dwd, dwd], dwd * dwd));
                params.insert(format!("{b}.lka.pw.weight"), init.he(&[m, m, 1, 1], m));
            }
            if level + 1 == LEVELS {
                continue;
            }
            let prev = config.level_channels[level + 1];
            if config.use_msag {
                params.insert(format!("{b}.gate.ce.weight"), init.he(&[g, m, 1, 1], m));
                add_bn(&mut params, format!("{b}.gate.ce_bn"), g);
                params.insert(format!("{b}.gate.cd.weight"), init.he(&[g, prev, 1, 1], prev));
                add_bn(&mut params, format!("{b}.gate.cd_bn"), g);
                for &r in &config.atrous_rates {
                    params.insert(format!("{b}.gate.at{r}.weight"), init.he(&[g, g, 3, 3], 9 * g));
                }
                params.insert(format!("{b}.gate.c.weight"), init.he(&[1, g, 1, 1], g));
                add_bn(&mut params, format!("{b}.gate.c_bn"), 1);
            } else {
                params.insert(format!("{b}.merge.weight"), init.he(&[prev, m + prev, 1, 1], m + prev));
                params.insert(format!("{b}.merge.bias"), Tensor::zeros(&[prev])?);
            }
            params.insert(format!("{b}.refine.weight"), init.he(&[m, prev, 3, 3], 9 * prev));
            add_bn(&mut params, format!("{b}.refine.bn"), m);
        }
        let c1 = config.level_channels[0];
        params.insert("head.weight".into(), init.he(&[1, c1, 1, 1], c1));
        params.insert("head.bias".into(), Tensor::zeros(&[1])?);
        Ok(Decoder {
            config,
            params,
            running,
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(name, t)| (name.clone(), tape.param(t.clone())))
            .collect()
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        prototypes: &PrototypeSet,
        pyramid: &[Tensor<T>],
        mode: BnMode,
    ) -> Result<Pass<T>> {
        let vars = self.register(tape);
        self.forward_with(tape, vars, prototypes, pyramid, mode)
    }

    /// Forward pass over parameters already on the tape.
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        vars: BTreeMap<String, Var>,
        prototypes: &PrototypeSet,
        pyramid: &[Tensor<T>],
        mode: BnMode,
    ) -> Result<Pass<T>> {
        let cfg = &self.config;
        if pyramid.len() != LEVELS || prototypes.levels.len() != LEVELS {
            return Err(Error::Config(format!(
                "decoder expects {LEVELS} levels, got {} query and {} prototype levels",
                pyramid.len(),
                prototypes.levels.len()
            )));
        }
        let mut sizes = Vec::with_capacity(LEVELS);
        for (l, t) in pyramid.iter().enumerate() {
            let (n, c, h, w) = t.dims4()?;
            if n != 1 || c != cfg.level_channels[l] || prototypes.levels[l].len() != c {
                return Err(Error::invalid(format!(
                    "level {}: query {:?} / prototype {} do not match {} channels",
                    l + 1,
                    t.shape(),
                    prototypes.levels[l].len(),
                    cfg.level_channels[l]
                )));
            }
            sizes.push((h, w));
        }
        if sizes.windows(2).any(|p| p[0].0 <= p[1].0 || p[0].1 <= p[1].1) {
            return Err(Error::invalid(format!(
                "level sizes must strictly grow toward the finest level, got {sizes:?}"
            )));
        }

        let mut g = Graph::new(tape, vars, &self.running, mode);
        let mut prev: Option<Var> = None;
        for level in (0..LEVELS).rev() {
            let b = block_name(level);
            let proto = prototypes.levels[level].iter().map(|&v| T::of(v)).collect();
            let proto = Tensor::new(vec![1, cfg.level_channels[level], 1, 1], proto)?;
            let proto = g.tape.constant(proto);
            let fq = g.tape.constant(pyramid[level].clone());
            let weight = g.var(&format!("{b}.fuse.weight"))?;
            let bias = g.var(&format!("{b}.fuse.bias"))?;
            let f = fuse_support_query(g.tape, proto, fq, weight, Some(bias))?;
            let x_e = if cfg.use_clka {
                clka_block(&mut g, &b, f, cfg.lka_kernel, cfg.lka_dilation)?
            } else {
                f
            };
            let out = match prev {
                None => x_e,
                Some(p) => {
                    let (h, w) = sizes[level];
                    let x_d = g.tape.resize(p, h, w)?;
                    let merged = if cfg.use_msag {
                        msag_gate(&mut g, &b, x_e, x_d, &cfg.atrous_rates)?
                    } else {
                        let cat = g.tape.concat(x_e, x_d)?;
                        g.conv(
                            cat,
                            &format!("{b}.merge"),
                            crate::tensorkit::ConvSpec::pointwise(),
                            true,
                        )?
                    };
                    let r = g.conv(
                        merged,
                        &format!("{b}.refine"),
                        crate::tensorkit::ConvSpec::same(3, 1)?,
                        false,
                    )?;
                    let r = g.bn(r, &format!("{b}.refine.bn"))?;
                    g.tape.relu(r)
                }
            };
            prev = Some(out);
        }
        let top = prev.expect("at least one level");
        let logits = g.conv(top, "head", crate::tensorkit::ConvSpec::pointwise(), true)?;
        let (vars, stats) = g.finish();
        Ok(Pass { logits, vars, stats })
    }

    /// Prediction logits `[1, 1, H_1, W_1]`, normalized per
    /// `config.inference_norm`. Parameters and running estimates are left
    /// untouched.
    pub fn logits(&self, prototypes: &PrototypeSet, pyramid: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mode = match self.config.inference_norm {
            InferenceNorm::Query => BnMode::Train,
            InferenceNorm::Running => BnMode::Infer,
        };
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, prototypes, pyramid, mode)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Folds the batch statistics of a training pass into the running
    /// estimates.
    pub fn absorb_stats(&mut self, stats: &BTreeMap<String, BatchStats<T>>) {
        let m = T::of(self.config.bn_momentum);
        for (name, s) in stats {
            if let Some(r) = self.running.get_mut(name) {
                let blend = |old: &mut [T], new: &[T]| {
                    old.iter_mut()
                        .zip(new)
                        .for_each(|(o, &n)| *o = (T::one() - m) * *o + m * n);
                };
                blend(&mut r.mean, &s.mean);
                blend(&mut r.var, &s.var);
            }
        }
    }

    /// Same decoder in another float type.
    pub fn cast<U: Real>(&self) -> Decoder<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect();
        Decoder {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
            running: self
                .running
                .iter()
                .map(|(k, r)| {
                    (
                        k.clone(),
                        Running {
                            mean: conv(&r.mean),
                            var: conv(&r.var),
                        },
                    )
                })
                .collect(),
        }
    }
}
