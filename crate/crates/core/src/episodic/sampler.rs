use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Split};
use crate::error::{Error, Result};

/// One k-shot task: `supports` and `query` index samples of `class`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub class: u32,
    pub supports: Vec<usize>,
    pub query: usize,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.supports.len()
    }
}

/// Draws `k + 1` distinct samples of `class`; the last one is the query.
pub fn sample_class_episode<R: Rng>(ds: &Dataset, class: u32, k: usize, rng: &mut R) -> Result<Episode> {
    if k == 0 {
        return Err(Error::invalid("episodes need at least one support"));
    }
    let n = ds.class_samples(class)?.len();
    if n < k + 1 {
        return Err(Error::invalid(format!(
            "class {class} has {n} samples, a {k}-shot episode needs {}",
            k + 1
        )));
    }
    let mut picked = sample(rng, n, k + 1).into_vec();
    let query = picked.pop().expect("k + 1 >= 2 picks");
    Ok(Episode {
        class,
        supports: picked,
        query,
    })
}

/// Uniform class of `split`, then a uniform draw without replacement.
pub fn sample_episode<R: Rng>(ds: &Dataset, split: Split, k: usize, rng: &mut R) -> Result<Episode> {
    let classes = ds.classes(split);
    if classes.is_empty() {
        return Err(Error::invalid(format!("split {split:?} has no classes")));
    }
    let class = classes[rng.random_range(0..classes.len())];
    sample_class_episode(ds, class, k, rng)
}

/// `k` supports for a fixed query, drawn from the other samples of its
/// class.
pub fn supports_for_query<R: Rng>(n: usize, query: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < k + 1 || query >= n {
        return Err(Error::invalid(format!(
            "cannot pick {k} supports besides sample {query} out of {n}"
        )));
    }
    Ok(sample(rng, n - 1, k)
        .into_iter()
        .map(|i| if i >= query { i + 1 } else { i })
        .collect())
}
