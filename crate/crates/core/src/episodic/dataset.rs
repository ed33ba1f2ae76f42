use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iocli::{read_npy, read_pgm, write_npy, write_pgm};
use crate::metrics::Mask;
use crate::tensorkit::Tensor;

/// Which side of the class split a request refers to. Support and test
/// draw from the same (held-out) classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Support,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, 3, H, W]` RGB in `[0, 1]`.
    pub image: Tensor<f32>,
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: BTreeMap<u32, Vec<Sample>>,
    pub train_classes: Vec<u32>,
    pub test_classes: Vec<u32>,
    pub image_size: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassEntry {
    id: u32,
    split: Split,
    images: Vec<String>,
    masks: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    image_size: usize,
    seed: u64,
    classes: Vec<ClassEntry>,
}

const MANIFEST: &str = "dataset.json";

impl Dataset {
    /// Checks the split invariants: disjoint, covering and non-empty.
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.train_classes.iter().find(|c| self.test_classes.contains(c)) {
            return Err(Error::invalid(format!(
                "class {c} is in both the train and test splits"
            )));
        }
        for c in self.train_classes.iter().chain(&self.test_classes) {
            if self.samples.get(c).is_none_or(|s| s.is_empty()) {
                return Err(Error::invalid(format!("class {c} has no samples")));
            }
        }
        if self.samples.len() != self.train_classes.len() + self.test_classes.len() {
            return Err(Error::invalid("some classes are in no split"));
        }
        Ok(())
    }

    pub fn classes(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.train_classes,
            Split::Support | Split::Test => &self.test_classes,
        }
    }

    pub fn class_samples(&self, class: u32) -> Result<&[Sample]> {
        self.samples
            .get(&class)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("unknown class {class}")))
    }

    pub fn sample(&self, class: u32, index: usize) -> Result<&Sample> {
        self.class_samples(class)?
            .get(index)
            .ok_or_else(|| Error::invalid(format!("class {class} has no sample {index}")))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut classes = Vec::new();
        for (&id, samples) in &self.samples {
            let split = if self.train_classes.contains(&id) {
                Split::Train
            } else {
                Split::Test
            };
            let mut entry = ClassEntry {
                id,
                split,
                images: Vec::new(),
                masks: Vec::new(),
            };
            for (i, s) in samples.iter().enumerate() {
                let image = format!("c{id:03}_{i:03}.npy");
                let mask = format!("c{id:03}_{i:03}.pgm");
                write_npy(dir.join(&image), &s.image)?;
                write_pgm(dir.join(&mask), &s.mask)?;
                entry.images.push(image);
                entry.masks.push(mask);
            }
            classes.push(entry);
        }
        let manifest = Manifest {
            image_size: self.image_size,
            seed: self.seed,
            classes,
        };
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::from(e).context(path.display().to_string()))?;
        let mut ds = Dataset {
            samples: BTreeMap::new(),
            train_classes: Vec::new(),
            test_classes: Vec::new(),
            image_size: manifest.image_size,
            seed: manifest.seed,
        };
        for c in manifest.classes {
            if c.images.len() != c.masks.len() {
                return Err(Error::invalid(format!("class {}: image and mask counts differ", c.id)));
            }
            let mut samples = Vec::with_capacity(c.images.len());
            for (img, mask) in c.images.iter().zip(&c.masks) {
                let image: Tensor<f32> = read_npy(dir.join(img))?;
                let mask = read_pgm(dir.join(mask))?;
                let (n, ch, h, w) = image.dims4()?;
                if n != 1 || ch != 3 || (h, w) != (mask.height(), mask.width()) {
                    return Err(Error::invalid(format!(
                        "{img}: image {:?} does not match its {}x{} mask",
                        image.shape(),
                        mask.height(),
                        mask.width()
                    )));
                }
                samples.push(Sample { image, mask });
            }
            match c.split {
                Split::Train => ds.train_classes.push(c.id),
                Split::Support | Split::Test => ds.test_classes.push(c.id),
            }
            if ds.samples.insert(c.id, samples).is_some() {
                return Err(Error::invalid(format!("class {} listed twice", c.id)));
            }
        }
        ds.validate()?;
        Ok(ds)
    }
}
