//! Procedural few-shot dataset: each class is a shape family with its own
//! colour and stripe texture on a low-saturation noisy background.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::tensorkit::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub train_classes: usize,
    pub test_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train_classes: 8,
            test_classes: 4,
            per_class: 10,
            image_size: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Ellipse,
    Rectangle,
    Ring,
    Blob,
}

impl ShapeFamily {
    pub fn of_class(class: u32) -> Self {
        match class % 4 {
            0 => ShapeFamily::Ellipse,
            1 => ShapeFamily::Rectangle,
            2 => ShapeFamily::Ring,
            _ => ShapeFamily::Blob,
        }
    }
}

/// Class-level appearance shared by all samples of the class.
#[derive(Clone, Copy, Debug)]
struct Style {
    family: ShapeFamily,
    rgb: [f64; 3],
    stripe_freq: f64,
    stripe_angle: f64,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn style(class: u32) -> Style {
    // golden-ratio hue spacing keeps neighbouring ids far apart in colour
    let hue = (class as f64 * 0.618_034).fract();
    Style {
        family: ShapeFamily::of_class(class),
        rgb: hsv_to_rgb(hue, 0.85, 0.9),
        stripe_freq: 3.0 + (class % 3) as f64 * 2.0,
        stripe_angle: (class as f64 * 0.37).fract() * PI,
    }
}

/// Inside-test of one randomly posed shape, in pixel units.
struct Pose {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
    lobes: [(f64, f64, f64); 3],
}

impl Pose {
    fn contains(&self, family: ShapeFamily, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.theta.cos(), self.theta.sin());
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        match family {
            ShapeFamily::Ellipse => (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0,
            ShapeFamily::Rectangle => u.abs() <= self.a && v.abs() <= self.b,
            ShapeFamily::Ring => {
                let r = (dx * dx + dy * dy).sqrt();
                r <= self.a && r >= 0.55 * self.a
            }
            ShapeFamily::Blob => self
                .lobes
                .iter()
                .any(|&(ox, oy, r)| (dx - ox).powi(2) + (dy - oy).powi(2) <= r * r),
        }
    }
}

fn draw(class: u32, size: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let st = style(class);
    let s = size as f64;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut tries = 0;
    let mask = loop {
        tries += 1;
        let a = s * rng.random_range(0.16..0.26);
        let pose = Pose {
            cx: s * rng.random_range(0.35..0.65),
            cy: s * rng.random_range(0.35..0.65),
            a,
            b: a * rng.random_range(0.55..0.9),
            theta: rng.random_range(0.0..PI),
            lobes: std::array::from_fn(|_| {
                let ang = rng.random_range(0.0..TAU);
                let off = a * rng.random_range(0.2..0.6);
                (off * ang.cos(), off * ang.sin(), a * rng.random_range(0.45..0.7))
            }),
        };
        let mask = Mask::from_fn(size, size, |r, c| {
            pose.contains(st.family, c as f64 + 0.5, r as f64 + 0.5)
        });
        let frac = mask.count() as f64 / (size * size) as f64;
        if (0.06..0.4).contains(&frac) {
            break mask;
        }
        if tries > 100 {
            return Err(Error::invalid(format!("could not place a shape of class {class}")));
        }
    };

    let gray = rng.random_range(0.35..0.6);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.03..0.03));
    let phase = rng.random_range(0.0..TAU);
    let (fc, fs) = (st.stripe_angle.cos(), st.stripe_angle.sin());
    let mut data = vec![0f32; 3 * size * size];
    for r in 0..size {
        for c in 0..size {
            let p = r * size + c;
            let px: [f64; 3] = if mask.get(r, c) {
                let t = TAU * st.stripe_freq * (c as f64 * fc + r as f64 * fs) / s + phase;
                let shade = 0.75 + 0.25 * t.sin();
                std::array::from_fn(|ch| st.rgb[ch] * shade + 0.03 * noise.sample(rng))
            } else {
                let n = 0.08 * noise.sample(rng);
                std::array::from_fn(|ch| gray + tint[ch] + n + 0.02 * noise.sample(rng))
            };
            for (ch, v) in px.iter().enumerate() {
                data[ch * size * size + p] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(Sample {
        image: Tensor::new(vec![1, 3, size, size], data)?,
        mask,
    })
}

/// Classes `0..train_classes` form the training split, the next
/// `test_classes` ids the held-out split.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.image_size == 0 || !cfg.image_size.is_multiple_of(32) {
        return Err(Error::invalid(format!(
            "image size {} is not a multiple of 32",
            cfg.image_size
        )));
    }
    if cfg.per_class == 0 || cfg.train_classes == 0 || cfg.test_classes == 0 {
        return Err(Error::invalid("class and sample counts must be positive"));
    }
    let mut samples = BTreeMap::new();
    let total = (cfg.train_classes + cfg.test_classes) as u32;
    for class in 0..total {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(class as u64 + 1);
        let drawn = (0..cfg.per_class)
            .map(|_| draw(class, cfg.image_size, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        samples.insert(class, drawn);
    }
    let ds = Dataset {
        samples,
        train_classes: (0..cfg.train_classes as u32).collect(),
        test_classes: (cfg.train_classes as u32..total).collect(),
        image_size: cfg.image_size,
        seed: cfg.seed,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        let g = hsv_to_rgb(1.0 / 3.0, 1.0, 1.0);
        assert!((g[1] - 1.0).abs() < 1e-12 && g[0].abs() < 1e-12);
    }

    #[test]
    fn families_cycle() {
        assert_eq!(ShapeFamily::of_class(6), ShapeFamily::Ring);
        assert_eq!(ShapeFamily::of_class(7), ShapeFamily::Blob);
    }
}
