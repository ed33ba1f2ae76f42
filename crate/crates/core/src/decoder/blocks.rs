use std::collections::BTreeMap;

use super::Running;
use crate::error::{Error, Result};
use crate::tensorkit::{BatchStats, BnMode, ConvSpec, Real, Tape, Var};

const BN_EPS: f64 = 1e-5;

/// Kernel sizes `(dw, dwd)` of the large-kernel decomposition: a
/// `(2d-1)`-wide local depthwise kernel and a `ceil(K/d)`-wide dilated one,
/// the latter bumped to the next odd size so "same" padding is symmetric.
pub fn lka_kernel_sizes(k: usize, d: usize) -> (usize, usize) {
    let dwd = k.div_ceil(d);
    (2 * d - 1, if dwd.is_multiple_of(2) { dwd + 1 } else { dwd })
}

/// Per-axis impulse-response extent of the decomposed kernel.
pub fn lka_support(k: usize, d: usize) -> usize {
    let (dw, dwd) = lka_kernel_sizes(k, d);
    dw + d * (dwd - 1)
}

/// Forward-pass context: the tape, parameter handles by name, and batch
/// norm bookkeeping.
pub struct Graph<'a, T> {
    pub tape: &'a mut Tape<T>,
    vars: BTreeMap<String, Var>,
    running: &'a BTreeMap<String, Running<T>>,
    mode: BnMode,
    stats: BTreeMap<String, BatchStats<T>>,
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(
        tape: &'a mut Tape<T>,
        vars: BTreeMap<String, Var>,
        running: &'a BTreeMap<String, Running<T>>,
        mode: BnMode,
    ) -> Self {
        Graph {
            tape,
            vars,
            running,
            mode,
            stats: BTreeMap::new(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    /// Convolution with weight `{prefix}.weight` and, when `bias` is set,
    /// `{prefix}.bias`.
    pub fn conv(&mut self, x: Var, prefix: &str, spec: ConvSpec, bias: bool) -> Result<Var> {
        let w = self.var(&format!("{prefix}.weight"))?;
        let b = if bias {
            Some(self.var(&format!("{prefix}.bias"))?)
        } else {
            None
        };
        self.tape.conv2d(x, w, b, spec)
    }

    /// Batch norm with `{name}.gamma` / `{name}.beta`.
    pub fn bn(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.var(&format!("{name}.gamma"))?;
        let beta = self.var(&format!("{name}.beta"))?;
        let running = match self.mode {
            BnMode::Train => None,
            BnMode::Infer => {
                let r = self
                    .running
                    .get(name)
                    .ok_or_else(|| Error::Config(format!("no running statistics for {name}")))?;
                Some((r.mean.as_slice(), r.var.as_slice()))
            }
        };
        let (y, stats) = self.tape.batch_norm(x, gamma, beta, running, T::of(BN_EPS))?;
        if let Some(s) = stats {
            self.stats.insert(name.to_string(), s);
        }
        Ok(y)
    }

    pub fn finish(self) -> (BTreeMap<String, Var>, BTreeMap<String, BatchStats<T>>) {
        (self.vars, self.stats)
    }
}

/// `ReLU(conv3d(stack(tile(prototype), f_q)))`: the prototype `[1, M, 1, 1]`
/// is tiled over the query plane and the two planes are collapsed by a
/// depth-2 convolution with weight `[M, M, 2, 1, 1]`.
pub fn fuse_support_query<T: Real>(
    tape: &mut Tape<T>,
    prototype: Var,
    f_q: Var,
    weight: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let q_shape = tape.value(f_q).shape().to_vec();
    let p_shape = tape.value(prototype).shape().to_vec();
    if q_shape.len() != 4 || p_shape != [1, q_shape[1], 1, 1] {
        return Err(Error::invalid(format!(
            "prototype {p_shape:?} does not match query features {q_shape:?}"
        )));
    }
    let plane = tape.expand(prototype, &q_shape)?;
    let stacked = tape.stack(plane, f_q)?;
    let fused = tape.conv3d_fuse(stacked, weight, bias, ConvSpec::pointwise())?;
    Ok(tape.relu(fused))
}

/// `pw(dwd(dw(F)))` with bias-free depthwise, dilated depthwise and
/// pointwise convolutions; no normalization of the result.
pub fn lka_attention<T: Real>(g: &mut Graph<'_, T>, prefix: &str, f: Var, k: usize, d: usize) -> Result<Var> {
    let channels = g.tape.value(f).dims4()?.1;
    let (dw, dwd) = lka_kernel_sizes(k, d);
    let x = g.conv(
        f,
        &format!("{prefix}.lka.dw"),
        ConvSpec::same(dw, 1)?.with_groups(channels),
        false,
    )?;
    let x = g.conv(
        x,
        &format!("{prefix}.lka.dwd"),
        ConvSpec::same(dwd, d)?.with_groups(channels),
        false,
    )?;
    g.conv(x, &format!("{prefix}.lka.pw"), ConvSpec::pointwise(), false)
}

/// `Attention(F) * F`.
pub fn clka_block<T: Real>(g: &mut Graph<'_, T>, prefix: &str, f: Var, k: usize, d: usize) -> Result<Var> {
    let attn = lka_attention(g, prefix, f, k, d)?;
    g.tape.mul(attn, f)
}

/// Multi-scale attention gate: `x_d * sigmoid(BN(C(q)))` with
/// `q = sum_r atrous_r(ReLU(BN(C_e x_e) + BN(C_d x_d)))`. The one-channel
/// gate is broadcast over the channels of `x_d`.
pub fn msag_gate<T: Real>(g: &mut Graph<'_, T>, prefix: &str, x_e: Var, x_d: Var, rates: &[usize]) -> Result<Var> {
    let (_, _, he, we) = g.tape.value(x_e).dims4()?;
    let (_, _, hd, wd) = g.tape.value(x_d).dims4()?;
    if (he, we) != (hd, wd) {
        return Err(Error::invalid(format!(
            "gate inputs differ spatially: {he}x{we} vs {hd}x{wd}"
        )));
    }
    let p = format!("{prefix}.gate");
    let e = g.conv(x_e, &format!("{p}.ce"), ConvSpec::pointwise(), false)?;
    let e = g.bn(e, &format!("{p}.ce_bn"))?;
    let d = g.conv(x_d, &format!("{p}.cd"), ConvSpec::pointwise(), false)?;
    let d = g.bn(d, &format!("{p}.cd_bn"))?;
    let s = g.tape.add(e, d)?;
    let s = g.tape.relu(s);
    let mut q: Option<Var> = None;
    for &r in rates {
        let y = g.conv(s, &format!("{p}.at{r}"), ConvSpec::same(3, r)?, false)?;
        q = Some(match q {
            None => y,
            Some(acc) => g.tape.add(acc, y)?,
        });
    }
    let q = q.ok_or_else(|| Error::Config("empty atrous bank".into()))?;
    let c = g.conv(q, &format!("{p}.c"), ConvSpec::pointwise(), false)?;
    let c = g.bn(c, &format!("{p}.c_bn"))?;
    let gate = g.tape.sigmoid(c);
    g.tape.mul(x_d, gate)
}
