//! Training and evaluation loops.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Sample, Split};
use super::encoder::{EncoderConfig, ToyEncoder};
use super::prototypes::{shot_prototype, PrototypeMode};
use super::sampler::{sample_episode, supports_for_query};
use crate::decoder::{mask_to_target, predict_mask, seg_loss, Adam, Decoder, DecoderConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Mask, MetricsRow};
use crate::spectral::{mean_prototypes, PrototypeSet, SpectralConfig};
use crate::tensorkit::{BnMode, Tape, Tensor};

/// Spectral settings for 64x64 toy images: the affinity grid matches the
/// finest (stride 4) level.
pub fn toy_spectral() -> SpectralConfig {
    SpectralConfig {
        grid_h: 16,
        grid_w: 16,
        ..Default::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub lr: f64,
    pub seed: u64,
    /// Shots per training episode.
    pub k: usize,
    /// Spectral (true) or ground-truth-box (false) support prototypes.
    pub annotation_free: bool,
    /// Held-out mIoU is logged every this many episodes (0 disables it).
    pub heldout_every: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub spectral: SpectralConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 500,
            lr: 1e-3,
            seed: 0,
            k: 1,
            annotation_free: true,
            heldout_every: 100,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            spectral: toy_spectral(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and non-negative",
                self.lr
            )));
        }
        if self.episodes == 0 || self.k == 0 {
            return Err(Error::Config("episodes and k must be at least 1".into()));
        }
        if self.encoder.channels != self.decoder.level_channels {
            return Err(Error::Config(format!(
                "encoder channels {:?} differ from decoder level channels {:?}",
                self.encoder.channels, self.decoder.level_channels
            )));
        }
        self.decoder.validate()
    }

    pub fn mode(&self) -> PrototypeMode {
        if self.annotation_free {
            PrototypeMode::AnnotationFree
        } else {
            PrototypeMode::OracleMask
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub episode: usize,
    pub loss_bce: f64,
    pub loss_dice: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heldout_miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub mode: PrototypeMode,
    pub seed: u64,
    pub threads: usize,
    pub threshold: f64,
    pub spectral: SpectralConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 1,
            mode: PrototypeMode::AnnotationFree,
            seed: 0,
            threads: 1,
            threshold: 0.5,
            spectral: toy_spectral(),
        }
    }
}

/// Maps `f` over `items` on up to `threads` scoped threads, keeping order.
fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Per-sample encoder outputs and single-shot prototypes.
struct SampleCache {
    pyramids: BTreeMap<(u32, usize), Vec<Tensor<f32>>>,
    shots: BTreeMap<(u32, usize), PrototypeSet>,
}

impl SampleCache {
    fn build(
        ds: &Dataset,
        classes: &[u32],
        enc: &ToyEncoder,
        mode: PrototypeMode,
        spectral: &SpectralConfig,
        threads: usize,
    ) -> Result<Self> {
        let keys: Vec<(u32, usize)> = classes
            .iter()
            .map(|&c| ds.class_samples(c).map(|s| (0..s.len()).map(move |i| (c, i))))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let computed = par_map(&keys, threads, |&(c, i)| {
            let s = ds.sample(c, i)?;
            let pyr = enc.encode(&s.image)?;
            let proto = shot_prototype(&pyr, Some(&s.mask), mode, spectral)
                .map_err(|e| e.context(format!("support prototype of class {c} sample {i}")))?;
            Ok((pyr, proto))
        })?;
        let mut cache = SampleCache {
            pyramids: BTreeMap::new(),
            shots: BTreeMap::new(),
        };
        for (key, (pyr, proto)) in keys.into_iter().zip(computed) {
            cache.pyramids.insert(key, pyr);
            cache.shots.insert(key, proto);
        }
        Ok(cache)
    }

    fn prototypes(&self, class: u32, supports: &[usize]) -> Result<PrototypeSet> {
        let sets: Vec<PrototypeSet> = supports.iter().map(|&i| self.shots[&(class, i)].clone()).collect();
        mean_prototypes(&sets)
    }
}

/// Predicted mask for one query at the query's resolution.
pub fn predict(
    decoder: &Decoder<f32>,
    prototypes: &PrototypeSet,
    query_pyramid: &[Tensor<f32>],
    out_h: usize,
    out_w: usize,
    threshold: f64,
) -> Result<Mask> {
    let logits = decoder.logits(prototypes, query_pyramid)?;
    predict_mask(&logits, threshold, out_h, out_w)
}

/// Encodes supports and query, builds the prototypes and predicts the query
/// mask; metrics are added when the query mask is known.
pub fn run_inference(
    decoder: &Decoder<f32>,
    enc: &ToyEncoder,
    supports: &[(&Tensor<f32>, Option<&Mask>)],
    query: &Tensor<f32>,
    query_mask: Option<(u32, &Mask)>,
    mode: PrototypeMode,
    spectral: &SpectralConfig,
) -> Result<(Mask, Option<MetricsRow>)> {
    if supports.is_empty() {
        return Err(Error::invalid("inference needs at least one support"));
    }
    let sets = supports
        .iter()
        .enumerate()
        .map(|(i, (img, mask))| {
            let pyr = enc.encode(img)?;
            shot_prototype(&pyr, *mask, mode, spectral).map_err(|e| e.context(format!("support {i}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let protos = mean_prototypes(&sets)?;
    let (_, _, h, w) = query.dims4()?;
    let pred = predict(decoder, &protos, &enc.encode(query)?, h, w, 0.5)?;
    let row = match query_mask {
        Some((class, gt)) => Some(MetricsRow::compute(class, &pred, gt)?),
        None => None,
    };
    Ok((pred, row))
}

/// Every sample of the held-out classes serves once as the query, with `k`
/// supports drawn from the rest of its class under a per-query seed.
pub fn evaluate_split(
    ds: &Dataset,
    split: Split,
    decoder: &Decoder<f32>,
    enc: &ToyEncoder,
    cfg: &EvalConfig,
) -> Result<Vec<MetricsRow>> {
    let classes = ds.classes(split).to_vec();
    let cache = SampleCache::build(ds, &classes, enc, cfg.mode, &cfg.spectral, cfg.threads)?;
    evaluate_cached(ds, &classes, &cache, decoder, cfg)
}

fn evaluate_cached(
    ds: &Dataset,
    classes: &[u32],
    cache: &SampleCache,
    decoder: &Decoder<f32>,
    cfg: &EvalConfig,
) -> Result<Vec<MetricsRow>> {
    let mut queries = Vec::new();
    for &c in classes {
        let n = ds.class_samples(c)?.len();
        for q in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(((c as u64) << 32) | q as u64);
            queries.push((c, q, supports_for_query(n, q, cfg.k, &mut rng)?));
        }
    }
    par_map(&queries, cfg.threads, |(c, q, supports)| {
        let protos = cache.prototypes(*c, supports)?;
        let Sample { mask, .. } = ds.sample(*c, *q)?;
        let pred = predict(
            decoder,
            &protos,
            &cache.pyramids[&(*c, *q)],
            mask.height(),
            mask.width(),
            cfg.threshold,
        )?;
        MetricsRow::compute(*c, &pred, mask)
    })
}

pub struct TrainOutput {
    pub decoder: Decoder<f32>,
    pub log: Vec<LogRecord>,
}

/// Episodic training of the decoder with the encoder frozen. `on_record`
/// sees every log record as it is produced.
pub fn train_toy(
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&LogRecord) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    ds.validate()?;
    if ds.train_classes.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let enc = ToyEncoder::new(cfg.encoder.clone())?;
    let mut decoder = Decoder::<f32>::new(cfg.decoder.clone())?;
    let mut adam = Adam::new(cfg.lr);
    let mode = cfg.mode();
    let cache = SampleCache::build(ds, &ds.train_classes, &enc, mode, &cfg.spectral, 1)?;
    let heldout = if cfg.heldout_every > 0 && !ds.test_classes.is_empty() {
        Some(SampleCache::build(ds, &ds.test_classes, &enc, mode, &cfg.spectral, 1)?)
    } else {
        None
    };
    let eval_cfg = EvalConfig {
        k: 1,
        mode,
        seed: cfg.seed,
        spectral: cfg.spectral.clone(),
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.episodes);
    for ep in 1..=cfg.episodes {
        let episode = sample_episode(ds, Split::Train, cfg.k, &mut rng)?;
        let protos = cache.prototypes(episode.class, &episode.supports)?;
        let pyramid = &cache.pyramids[&(episode.class, episode.query)];
        let (_, _, h1, w1) = pyramid[0].dims4()?;
        let target = mask_to_target(&ds.sample(episode.class, episode.query)?.mask, h1, w1)?;

        let mut tape = Tape::new();
        let pass = decoder.forward(&mut tape, &protos, pyramid, BnMode::Train)?;
        let loss = seg_loss(&mut tape, pass.logits, &target)?;
        if !(loss.bce.is_finite() && loss.dice.is_finite()) {
            return Err(Error::NonFinite(format!("loss at episode {ep} (seed {})", cfg.seed)));
        }
        let grads = tape.backward(loss.total)?;
        let named = pass
            .vars
            .iter()
            .filter_map(|(name, v)| grads.get(*v).map(|g| (name.clone(), g.clone())))
            .collect();
        adam.step(&mut decoder.params, &named)?;
        decoder.absorb_stats(&pass.stats);

        let heldout_miou = match &heldout {
            Some(hc) if ep % cfg.heldout_every == 0 => Some(
                evaluate(&evaluate_cached(ds, &ds.test_classes, hc, &decoder, &eval_cfg)?)
                    .overall
                    .miou,
            ),
            _ => None,
        };
        let record = LogRecord {
            episode: ep,
            loss_bce: loss.bce,
            loss_dice: loss.dice,
            lr: cfg.lr,
            heldout_miou,
        };
        on_record(&record)?;
        log.push(record);
    }
    Ok(TrainOutput { decoder, log })
}
