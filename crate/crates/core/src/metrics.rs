//! Overlap metrics for binary masks and their aggregation into reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if h * w != data.len() || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "{h}x{w} mask needs {} pixels, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Mask { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: bool) -> Self {
        Mask {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Mask { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.w + c]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.contains(&true)
    }
}

/// Pixel counts of a prediction against a ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn of(pred: &Mask, gt: &Mask) -> Result<Self> {
        if (pred.h, pred.w) != (gt.h, gt.w) {
            return Err(Error::invalid(format!(
                "mask shapes differ: {}x{} vs {}x{}",
                pred.h, pred.w, gt.h, gt.w
            )));
        }
        let mut c = Confusion {
            tp: 0,
            fp: 0,
            fn_: 0,
            tn: 0,
        };
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn intersection(&self) -> usize {
        self.tp
    }

    pub fn union(&self) -> usize {
        self.tp + self.fp + self.fn_
    }

    pub fn iou(&self) -> f64 {
        match self.union() {
            0 => 1.0,
            u => self.tp as f64 / u as f64,
        }
    }

    pub fn dsc(&self) -> f64 {
        match 2 * self.tp + self.fp + self.fn_ {
            0 => 1.0,
            d => (2 * self.tp) as f64 / d as f64,
        }
    }

    pub fn hammoude(&self) -> f64 {
        match self.union() {
            0 => 0.0,
            u => 100.0 * (self.fp + self.fn_) as f64 / u as f64,
        }
    }

    pub fn xor(&self) -> Result<f64> {
        let gt = self.tp + self.fn_;
        let sym = self.fp + self.fn_;
        match (gt, sym) {
            (0, 0) => Ok(0.0),
            (0, _) => Err(Error::invalid("XOR is undefined for an empty ground truth")),
            (g, s) => Ok(100.0 * s as f64 / g as f64),
        }
    }
}

pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.iou())
}

pub fn dsc(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.dsc())
}

/// Symmetric difference over union, in percent.
pub fn hammoude(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.hammoude())
}

/// Symmetric difference over ground-truth area, in percent.
pub fn xor_metric(pred: &Mask, gt: &Mask) -> Result<f64> {
    Confusion::of(pred, gt)?.xor()
}

/// Metrics of one predicted mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub class: u32,
    pub iou: f64,
    pub dsc: f64,
    pub hm: f64,
    pub xor: f64,
    #[serde(flatten)]
    pub counts: Confusion,
}

impl MetricsRow {
    pub fn compute(class: u32, pred: &Mask, gt: &Mask) -> Result<Self> {
        let c = Confusion::of(pred, gt)?;
        Ok(MetricsRow {
            class,
            iou: c.iou(),
            dsc: c.dsc(),
            hm: c.hammoude(),
            xor: c.xor()?,
            counts: c,
        })
    }
}

/// Mean unweighted over classes, each class the mean of its rows.
pub fn miou(rows: &[MetricsRow]) -> f64 {
    evaluate(rows).overall.miou
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub id: u32,
    pub iou: f64,
    pub dsc: f64,
    pub hm: f64,
    pub xor: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overall {
    pub miou: f64,
    pub mdsc: f64,
    pub mhm: f64,
    pub mxor: f64,
}

/// One cell of the module ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub use_clka: bool,
    pub use_msag: bool,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub classes: Vec<ClassSummary>,
    pub overall: Overall,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Vec<AblationEntry>>,
}

/// Groups rows by class (ascending id) and averages.
pub fn evaluate(rows: &[MetricsRow]) -> Report {
    let mut by_class: BTreeMap<u32, Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        by_class.entry(r.class).or_default().push(r);
    }
    let classes: Vec<ClassSummary> = by_class
        .into_iter()
        .map(|(id, rs)| {
            let n = rs.len();
            let mean = |f: fn(&MetricsRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n as f64;
            ClassSummary {
                id,
                iou: mean(|r| r.iou),
                dsc: mean(|r| r.dsc),
                hm: mean(|r| r.hm),
                xor: mean(|r| r.xor),
                n,
            }
        })
        .collect();
    let k = classes.len().max(1) as f64;
    let mean = |f: fn(&ClassSummary) -> f64| classes.iter().map(f).sum::<f64>() / k;
    let overall = Overall {
        miou: mean(|c| c.iou),
        mdsc: mean(|c| c.dsc),
        mhm: mean(|c| c.hm),
        mxor: mean(|c| c.xor),
    };
    Report {
        classes,
        overall,
        ablation: None,
    }
}

impl Report {
    /// Fixed-width table, one line per class plus the overall means.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>6} {:>4} {:>7} {:>7} {:>8} {:>8}",
            "class", "n", "IoU", "DSC", "HM", "XOR"
        );
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{:>6} {:>4} {:>7.4} {:>7.4} {:>8.2} {:>8.2}",
                c.id, c.n, c.iou, c.dsc, c.hm, c.xor
            );
        }
        let o = &self.overall;
        let _ = writeln!(
            s,
            "{:>6} {:>4} {:>7.4} {:>7.4} {:>8.2} {:>8.2}",
            "mean", "", o.miou, o.mdsc, o.mhm, o.mxor
        );
        if let Some(ab) = &self.ablation {
            let _ = writeln!(s, "\n{:>6} {:>6} {:>7}", "CLKA", "MS-AG", "mIoU");
            for e in ab {
                let mark = |b: bool| if b { "yes" } else { "no" };
                let _ = writeln!(s, "{:>6} {:>6} {:>7.4}", mark(e.use_clka), mark(e.use_msag), e.miou);
            }
        }
        s
    }
}
