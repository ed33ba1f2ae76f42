use crate::error::{Error, Result};
use crate::tensorkit::{bilinear_resize, Real, Tensor};

/// Per-pixel stacked multi-level features on a common grid, one row per
/// pixel (row-major over the grid), rows L2-normalized.
#[derive(Clone, Debug)]
pub struct Hypercolumn {
    features: Vec<f64>,
    dims: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Channel count contributed by each pyramid level, in input order.
    pub level_dims: Vec<usize>,
    /// Rows whose stacked feature had zero norm (left as zero vectors).
    pub zero_rows: usize,
}

impl Hypercolumn {
    pub fn rows(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dims..(i + 1) * self.dims]
    }

    /// Builds a hypercolumn directly from row features; rows are normalized.
    pub fn from_rows(grid_h: usize, grid_w: usize, dims: usize, features: Vec<f64>) -> Result<Self> {
        if grid_h * grid_w * dims != features.len() || dims == 0 {
            return Err(Error::invalid(format!(
                "{grid_h}x{grid_w} grid with {dims} dims needs {} values, got {}",
                grid_h * grid_w * dims,
                features.len()
            )));
        }
        let mut hc = Hypercolumn {
            features,
            dims,
            grid_h,
            grid_w,
            level_dims: vec![dims],
            zero_rows: 0,
        };
        hc.normalize_rows();
        Ok(hc)
    }

    fn normalize_rows(&mut self) {
        let mut zero_rows = 0;
        for row in self.features.chunks_mut(self.dims) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 && n.is_finite() {
                row.iter_mut().for_each(|v| *v /= n);
            } else {
                row.fill(0.0);
                zero_rows += 1;
            }
        }
        if zero_rows > 0 {
            log::warn!("{zero_rows} hypercolumn rows had zero norm and were left as zero vectors");
        }
        self.zero_rows = zero_rows;
    }
}

/// Resizes every `[1, M_l, H_l, W_l]` level to `target_h x target_w`,
/// concatenates channels per pixel and L2-normalizes each pixel's vector.
pub fn build_hypercolumn<T: Real>(pyramid: &[Tensor<T>], target_h: usize, target_w: usize) -> Result<Hypercolumn> {
    if pyramid.is_empty() {
        return Err(Error::invalid("hypercolumn needs at least one pyramid level"));
    }
    let mut level_dims = Vec::with_capacity(pyramid.len());
    let mut resized = Vec::with_capacity(pyramid.len());
    for (l, level) in pyramid.iter().enumerate() {
        let (b, c, _, _) = level.dims4()?;
        if b != 1 {
            return Err(Error::invalid(format!("pyramid level {l} has batch {b}, expected 1")));
        }
        level_dims.push(c);
        resized.push(bilinear_resize(&level.cast::<f64>(), target_h, target_w)?);
    }
    let dims: usize = level_dims.iter().sum();
    let rows = target_h * target_w;
    let mut features = vec![0.0; rows * dims];
    let mut offset = 0;
    for (level, &c) in resized.iter().zip(&level_dims) {
        for ch in 0..c {
            for (p, &v) in level.plane(0, ch).iter().enumerate() {
                features[p * dims + offset + ch] = v;
            }
        }
        offset += c;
    }
    let mut hc = Hypercolumn {
        features,
        dims,
        grid_h: target_h,
        grid_w: target_w,
        level_dims,
        zero_rows: 0,
    };
    hc.normalize_rows();
    Ok(hc)
}
