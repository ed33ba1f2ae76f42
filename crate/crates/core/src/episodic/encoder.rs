use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorkit::{conv2d, relu, ConvSpec, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Output channels of the four stages.
    pub channels: Vec<usize>,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: vec![64, 64, 64, 64],
            seed: 7,
        }
    }
}

/// Frozen random convolutional feature extractor producing a four-level
/// pyramid at strides 4, 8, 16 and 32.
///
/// Every layer is a bias-free 3x3 stride-2 convolution followed by ReLU;
/// the first stage stacks two of them. The weights are fixed at
/// construction and never exposed mutably.
#[derive(Clone, Debug)]
pub struct ToyEncoder {
    config: EncoderConfig,
    layers: Vec<Tensor<f32>>,
    /// Index of the layer closing each stage.
    taps: Vec<usize>,
}

const STRIDE: usize = 32;

impl ToyEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        if config.channels.len() != 4 || config.channels.contains(&0) {
            return Err(Error::Config("toy encoder needs four positive channel counts".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = &config.channels;
        let widths = [
            (3, c[0].div_ceil(2)),
            (c[0].div_ceil(2), c[0]),
            (c[0], c[1]),
            (c[1], c[2]),
            (c[2], c[3]),
        ];
        let layers = widths
            .iter()
            .map(|&(cin, cout)| {
                let normal = Normal::new(0.0, (2.0 / (9 * cin) as f64).sqrt()).expect("positive std");
                Tensor::from_fn(&[cout, cin, 3, 3], |_| normal.sample(&mut rng) as f32)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ToyEncoder {
            config,
            layers,
            taps: vec![1, 2, 3, 4],
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn channels(&self) -> &[usize] {
        &self.config.channels
    }

    /// Pyramid of `image` (`[1, 3, H, W]`, sides divisible by 32), finest
    /// level first.
    pub fn encode(&self, image: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        let (n, c, h, w) = image.dims4()?;
        if n != 1 || c != 3 {
            return Err(Error::invalid(format!(
                "expected a [1, 3, H, W] image, got {:?}",
                image.shape()
            )));
        }
        if h % STRIDE != 0 || w % STRIDE != 0 {
            return Err(Error::invalid(format!("image {h}x{w} is not divisible by {STRIDE}")));
        }
        let spec = ConvSpec::new(3, 3).with_stride(2).with_padding(1);
        let mut x = image.clone();
        let mut out = Vec::with_capacity(4);
        for (i, wgt) in self.layers.iter().enumerate() {
            x = relu(&conv2d(&x, wgt, None, &spec)?);
            if self.taps.contains(&i) {
                out.push(x.clone());
            }
        }
        Ok(out)
    }

    /// Order-sensitive checksum of all weights (FNV-1a over the bit
    /// patterns).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.layers.iter().flat_map(|l| l.data()) {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}
