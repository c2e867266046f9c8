//! Compact neural-network engine with exact reverse-mode gradients.
//!
//! Two architectures: a multilayer perceptron and a small convolutional
//! encoder-decoder with skip connections ("U-Net-lite"). Both compile to a
//! flat op program executed over a flat parameter vector, so forward,
//! backward, and initialization share one layout. Gradients are explicit
//! per-layer backward rules recorded on an activation tape, not a general
//! expression-graph autodiff: the layer set is small and closed, and
//! exactness is testable layer by layer against finite differences.
//!
//! Dropout is inverted (masks scaled by `1/(1-rate)` at sample time), so
//! deterministic inference needs no rescaling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::rng::{from_seed, substream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchKind {
    Mlp { hidden: Vec<usize> },
    ConvEd { base_channels: usize, depth: usize },
}

/// Declared network architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    #[serde(flatten)]
    pub kind: ArchKind,
    pub input_shape: (usize, usize),
    pub output_shape: (usize, usize),
    pub dropout_rate: f64,
    pub activation: Activation,
}

impl ArchSpec {
    pub fn mlp(
        input_shape: (usize, usize),
        output_shape: (usize, usize),
        hidden: Vec<usize>,
        dropout_rate: f64,
    ) -> Self {
        Self {
            kind: ArchKind::Mlp { hidden },
            input_shape,
            output_shape,
            dropout_rate,
            activation: Activation::Relu,
        }
    }

    pub fn conv_ed(shape: (usize, usize), base_channels: usize, depth: usize, dropout_rate: f64) -> Self {
        Self {
            kind: ArchKind::ConvEd { base_channels, depth },
            input_shape: shape,
            output_shape: shape,
            dropout_rate,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(0.0..1.0).contains(&self.dropout_rate) {
            problems.push(format!("dropout_rate {} must be in [0,1)", self.dropout_rate));
        }
        match &self.kind {
            ArchKind::Mlp { hidden } => {
                if hidden.iter().any(|&h| h == 0) {
                    problems.push("MLP hidden sizes must be positive".into());
                }
            }
            ArchKind::ConvEd { base_channels, depth } => {
                if *base_channels == 0 {
                    problems.push("base_channels must be positive".into());
                }
                if *depth == 0 {
                    problems.push("ConvED depth must be at least 1".into());
                }
                if self.input_shape != self.output_shape {
                    problems.push("ConvED requires input_shape == output_shape".into());
                }
                let div = 1usize << *depth.min(&63);
                if self.input_shape.0 % div != 0 || self.input_shape.1 % div != 0 {
                    problems.push(format!(
                        "ConvED depth {depth} requires dimensions divisible by {div}"
                    ));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn param_count(&self) -> usize {
        let (_, layout) = plan(self);
        layout.iter().map(|e| e.len).sum()
    }
}

/// A named contiguous slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    /// (fan_in, fan_out) for weight tensors; `None` for biases.
    pub fan: Option<(usize, usize)>,
}

/// One step of the compiled op program. Param indices refer to layout slots.
#[derive(Debug, Clone)]
enum Op {
    Linear { w: usize, b: usize, in_n: usize, out_n: usize },
    Conv3x3 { w: usize, b: usize, in_ch: usize, out_ch: usize, stride: usize },
    Conv1x1 { w: usize, b: usize, in_ch: usize, out_ch: usize },
    Relu,
    Dropout,
    Upsample2x,
    SaveSkip(usize),
    ConcatSkip(usize),
}

/// Build the op program and parameter layout for an architecture.
fn plan(arch: &ArchSpec) -> (Vec<Op>, Vec<LayoutEntry>) {
    let mut ops = Vec::new();
    let mut layout: Vec<LayoutEntry> = Vec::new();
    let mut offset = 0usize;
    let mut push = |layout: &mut Vec<LayoutEntry>, name: String, len: usize, fan: Option<(usize, usize)>| {
        let entry_offset = offset;
        layout.push(LayoutEntry { name, offset: entry_offset, len, fan });
        offset += len;
        layout.len() - 1
    };
    match &arch.kind {
        ArchKind::Mlp { hidden } => {
            let in_n = arch.input_shape.0 * arch.input_shape.1;
            let out_n = arch.output_shape.0 * arch.output_shape.1;
            let mut sizes = vec![in_n];
            sizes.extend_from_slice(hidden);
            sizes.push(out_n);
            for i in 0..sizes.len() - 1 {
                let (ni, no) = (sizes[i], sizes[i + 1]);
                let w = push(&mut layout, format!("fc{i}.w"), ni * no, Some((ni, no)));
                let b = push(&mut layout, format!("fc{i}.b"), no, None);
                ops.push(Op::Linear { w, b, in_n: ni, out_n: no });
                if i < sizes.len() - 2 {
                    ops.push(Op::Relu);
                    ops.push(Op::Dropout);
                }
            }
        }
        ArchKind::ConvEd { base_channels, depth } => {
            let ch = |l: usize| -> usize {
                if l == 0 {
                    1
                } else {
                    base_channels << (l - 1)
                }
            };
            ops.push(Op::SaveSkip(0));
            for l in 1..=*depth {
                let (ci, co) = (ch(l - 1), ch(l));
                let w = push(&mut layout, format!("enc{l}.w"), co * ci * 9, Some((ci * 9, co * 9)));
                let b = push(&mut layout, format!("enc{l}.b"), co, None);
                ops.push(Op::Conv3x3 { w, b, in_ch: ci, out_ch: co, stride: 2 });
                ops.push(Op::Relu);
                ops.push(Op::Dropout);
                if l < *depth {
                    ops.push(Op::SaveSkip(l));
                }
            }
            for l in (1..=*depth).rev() {
                let skip_ch = ch(l - 1);
                let ci = ch(l) + skip_ch;
                let co = if l == 1 { *base_channels } else { ch(l - 1) };
                ops.push(Op::Upsample2x);
                ops.push(Op::ConcatSkip(l - 1));
                let w = push(&mut layout, format!("dec{l}.w"), co * ci * 9, Some((ci * 9, co * 9)));
                let b = push(&mut layout, format!("dec{l}.b"), co, None);
                ops.push(Op::Conv3x3 { w, b, in_ch: ci, out_ch: co, stride: 1 });
                ops.push(Op::Relu);
                ops.push(Op::Dropout);
            }
            let w = push(&mut layout, "head.w".into(), *base_channels, Some((*base_channels, 1)));
            let b = push(&mut layout, "head.b".into(), 1, None);
            ops.push(Op::Conv1x1 { w, b, in_ch: *base_channels, out_ch: 1 });
        }
    }
    (ops, layout)
}

/// Flat parameter vector of a declared architecture with its layout map.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub arch: ArchSpec,
    pub values: Vec<f64>,
    pub layout: Vec<LayoutEntry>,
}

impl NetParams {
    /// New parameters from an explicit value vector (e.g. a loaded
    /// checkpoint). The length must match the architecture.
    pub fn from_values(arch: ArchSpec, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let (_, layout) = plan(&arch);
        let expect: usize = layout.iter().map(|e| e.len).sum();
        if values.len() != expect {
            return Err(Error::Contract(format!(
                "parameter count mismatch: architecture implies {expect}, got {}",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("parameters contain non-finite values".into()));
        }
        Ok(Self { arch, values, layout })
    }

    pub fn slice(&self, entry: usize) -> &[f64] {
        let e = &self.layout[entry];
        &self.values[e.offset..e.offset + e.len]
    }
}

/// Glorot-uniform weights, zero biases, deterministic per seed.
pub fn init_params(arch: &ArchSpec, seed: u64) -> Result<NetParams> {
    arch.validate()?;
    let (_, layout) = plan(arch);
    let total: usize = layout.iter().map(|e| e.len).sum();
    let mut values = vec![0.0; total];
    for (i, e) in layout.iter().enumerate() {
        if let Some((fan_in, fan_out)) = e.fan {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut rng = substream(seed, Purpose::Init, 0, i as u64);
            for v in &mut values[e.offset..e.offset + e.len] {
                *v = rng.gen_range(-bound..bound);
            }
        }
    }
    Ok(NetParams { arch: arch.clone(), values, layout })
}

/// Dropout configuration for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct DropoutState {
    pub enabled: bool,
    pub rate: f64,
    pub rng_seed: u64,
}

impl DropoutState {
    pub fn disabled() -> Self {
        Self { enabled: false, rate: 0.0, rng_seed: 0 }
    }

    pub fn enabled(rate: f64, rng_seed: u64) -> Self {
        Self { enabled: true, rate, rng_seed }
    }

    fn active(&self) -> bool {
        self.enabled && self.rate > 0.0
    }
}

/// Channel-major activation tensor.
#[derive(Debug, Clone)]
struct Tensor {
    ch: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    fn zeros(ch: usize, h: usize, w: usize) -> Self {
        Self { ch, h, w, data: vec![0.0; ch * h * w] }
    }

    #[inline]
    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }

    #[inline]
    fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    #[inline]
    fn add_at(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] += v;
    }
}

enum TapeEntry {
    Input(Tensor),
    /// Post-activation values (mask for the ReLU derivative).
    ReluOut(Vec<f64>),
    /// Per-element multipliers, empty when dropout was inactive.
    DropoutMask(Vec<f64>),
    Shape { ch: usize, h: usize, w: usize },
    None,
}

/// Recorded intermediates from one forward pass, consumed by [`backward`].
pub struct ActivationTape {
    entries: Vec<TapeEntry>,
    param_count: usize,
    input_shape: (usize, usize),
}

fn linear_forward(w: &[f64], b: &[f64], x: &[f64], in_n: usize, out_n: usize) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..in_n {
        let xi = x[i];
        if xi != 0.0 {
            let row = &w[i * out_n..(i + 1) * out_n];
            for (o, wv) in row.iter().enumerate() {
                y[o] += wv * xi;
            }
        }
    }
    debug_assert_eq!(y.len(), out_n);
    y
}

fn conv3x3_forward(w: &[f64], b: &[f64], input: &Tensor, out_ch: usize, stride: usize) -> Tensor {
    let (ih, iw) = (input.h, input.w);
    // Zero padding 1: "same" size at stride 1, exact halving at stride 2.
    let (oh, ow) = if stride == 1 { (ih, iw) } else { (ih / 2, iw / 2) };
    let mut out = Tensor::zeros(out_ch, oh, ow);
    let in_ch = input.ch;
    for o in 0..out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[o];
                for c in 0..in_ch {
                    for ky in 0..3usize {
                        let y = (oy * stride + ky) as isize - 1;
                        if y < 0 || y >= ih as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let x = (ox * stride + kx) as isize - 1;
                            if x < 0 || x >= iw as isize {
                                continue;
                            }
                            let wv = w[((o * in_ch + c) * 3 + ky) * 3 + kx];
                            acc += wv * input.at(c, y as usize, x as usize);
                        }
                    }
                }
                out.set(o, oy, ox, acc);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    w: &[f64],
    input: &Tensor,
    gout: &Tensor,
    out_ch: usize,
    stride: usize,
    gw: &mut [f64],
    gb: &mut [f64],
) -> Tensor {
    let in_ch = input.ch;
    let mut gin = Tensor::zeros(in_ch, input.h, input.w);
    for o in 0..out_ch {
        for oy in 0..gout.h {
            for ox in 0..gout.w {
                let go = gout.at(o, oy, ox);
                if go == 0.0 {
                    continue;
                }
                gb[o] += go;
                for c in 0..in_ch {
                    for ky in 0..3usize {
                        let y = (oy * stride + ky) as isize - 1;
                        if y < 0 || y >= input.h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let x = (ox * stride + kx) as isize - 1;
                            if x < 0 || x >= input.w as isize {
                                continue;
                            }
                            let widx = ((o * in_ch + c) * 3 + ky) * 3 + kx;
                            gw[widx] += go * input.at(c, y as usize, x as usize);
                            gin.add_at(c, y as usize, x as usize, go * w[widx]);
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Run the network. Returns the output field and the tape for [`backward`].
pub fn forward(params: &NetParams, g: &Field, drop: &DropoutState) -> Result<(Field, ActivationTape)> {
    if g.shape() != params.arch.input_shape {
        return Err(Error::Shape(format!(
            "input shape {:?} does not match architecture input {:?}",
            g.shape(),
            params.arch.input_shape
        )));
    }
    if drop.enabled && !(0.0..1.0).contains(&drop.rate) {
        return Err(Error::Contract(format!("dropout rate {} must be in [0,1)", drop.rate)));
    }
    let (ops, _) = plan(&params.arch);
    let mut entries = Vec::with_capacity(ops.len());
    let mut skips: Vec<Option<Tensor>> = vec![None; ops.len()];
    let mut drop_rng = from_seed(drop.rng_seed);
    let keep = 1.0 - drop.rate;
    let mut cur = Tensor {
        ch: 1,
        h: g.height(),
        w: g.width(),
        data: g.values().to_vec(),
    };
    for op in &ops {
        match op {
            Op::Linear { w, b, in_n, out_n } => {
                if cur.data.len() != *in_n {
                    return Err(Error::Shape("linear layer input size mismatch".into()));
                }
                let y = linear_forward(params.slice(*w), params.slice(*b), &cur.data, *in_n, *out_n);
                entries.push(TapeEntry::Input(cur));
                cur = Tensor { ch: 1, h: 1, w: *out_n, data: y };
            }
            Op::Conv3x3 { w, b, in_ch, out_ch, stride } => {
                if cur.ch != *in_ch {
                    return Err(Error::Shape("conv layer channel mismatch".into()));
                }
                let y = conv3x3_forward(params.slice(*w), params.slice(*b), &cur, *out_ch, *stride);
                entries.push(TapeEntry::Input(cur));
                cur = y;
            }
            Op::Conv1x1 { w, b, in_ch, out_ch } => {
                if cur.ch != *in_ch {
                    return Err(Error::Shape("1x1 conv channel mismatch".into()));
                }
                let wv = params.slice(*w);
                let bv = params.slice(*b);
                let mut out = Tensor::zeros(*out_ch, cur.h, cur.w);
                for o in 0..*out_ch {
                    for c in 0..*in_ch {
                        let wc = wv[o * in_ch + c];
                        for i in 0..cur.h * cur.w {
                            out.data[o * cur.h * cur.w + i] += wc * cur.data[c * cur.h * cur.w + i];
                        }
                    }
                    for i in 0..cur.h * cur.w {
                        out.data[o * cur.h * cur.w + i] += bv[o];
                    }
                }
                entries.push(TapeEntry::Input(cur));
                cur = out;
            }
            Op::Relu => {
                for v in &mut cur.data {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                entries.push(TapeEntry::ReluOut(cur.data.clone()));
            }
            Op::Dropout => {
                if drop.active() {
                    let mask: Vec<f64> = (0..cur.data.len())
                        .map(|_| {
                            if drop_rng.gen::<f64>() < drop.rate {
                                0.0
                            } else {
                                1.0 / keep
                            }
                        })
                        .collect();
                    for (v, m) in cur.data.iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    entries.push(TapeEntry::DropoutMask(mask));
                } else {
                    entries.push(TapeEntry::DropoutMask(Vec::new()));
                }
            }
            Op::Upsample2x => {
                entries.push(TapeEntry::Shape { ch: cur.ch, h: cur.h, w: cur.w });
                let mut out = Tensor::zeros(cur.ch, cur.h * 2, cur.w * 2);
                for c in 0..cur.ch {
                    for y in 0..out.h {
                        for x in 0..out.w {
                            out.set(c, y, x, cur.at(c, y / 2, x / 2));
                        }
                    }
                }
                cur = out;
            }
            Op::SaveSkip(k) => {
                skips[*k] = Some(cur.clone());
                entries.push(TapeEntry::None);
            }
            Op::ConcatSkip(k) => {
                let skip = skips[*k]
                    .clone()
                    .ok_or_else(|| Error::Contract("skip slot used before save".into()))?;
                entries.push(TapeEntry::Shape { ch: cur.ch, h: cur.h, w: cur.w });
                let mut data = cur.data;
                data.extend_from_slice(&skip.data);
                cur = Tensor { ch: cur.ch + skip.ch, h: skip.h, w: skip.w, data };
            }
        }
    }
    let (ow, oh) = params.arch.output_shape;
    if cur.data.len() != ow * oh {
        return Err(Error::Shape("network output does not match declared output shape".into()));
    }
    let out = Field::new(ow, oh, cur.data)?;
    Ok((
        out,
        ActivationTape {
            entries,
            param_count: params.values.len(),
            input_shape: g.shape(),
        },
    ))
}

/// Vector-Jacobian product: the exact gradient of `<output, grad_out>` with
/// respect to every parameter. The tape must come from a matching forward.
pub fn backward(params: &NetParams, tape: &ActivationTape, grad_out: &Field) -> Result<Vec<f64>> {
    if tape.param_count != params.values.len() || tape.input_shape != params.arch.input_shape {
        return Err(Error::Contract("stale tape: does not match these parameters".into()));
    }
    if grad_out.shape() != params.arch.output_shape {
        return Err(Error::Shape("grad_out does not match architecture output shape".into()));
    }
    let (ops, _) = plan(&params.arch);
    if ops.len() != tape.entries.len() {
        return Err(Error::Contract("stale tape: op count mismatch".into()));
    }
    let mut grad = vec![0.0; params.values.len()];
    let (ow, oh) = params.arch.output_shape;
    let mut cur = Tensor { ch: 1, h: oh, w: ow, data: grad_out.values().to_vec() };
    let mut skip_grads: Vec<Option<Tensor>> = vec![None; ops.len()];
    for (op, entry) in ops.iter().zip(tape.entries.iter()).rev() {
        match (op, entry) {
            (Op::Linear { w, b, in_n, out_n }, TapeEntry::Input(x)) => {
                let e_w = &params.layout[*w];
                let e_b = &params.layout[*b];
                let wv = params.slice(*w);
                let mut gx = vec![0.0; *in_n];
                for i in 0..*in_n {
                    let xi = x.data[i];
                    let row = &wv[i * out_n..(i + 1) * out_n];
                    let grow = &mut grad[e_w.offset + i * out_n..e_w.offset + (i + 1) * out_n];
                    let mut acc = 0.0;
                    for o in 0..*out_n {
                        let go = cur.data[o];
                        grow[o] += go * xi;
                        acc += row[o] * go;
                    }
                    gx[i] = acc;
                }
                for o in 0..*out_n {
                    grad[e_b.offset + o] += cur.data[o];
                }
                cur = Tensor { ch: x.ch, h: x.h, w: x.w, data: gx };
            }
            (Op::Conv3x3 { w, b, in_ch: _, out_ch, stride }, TapeEntry::Input(x)) => {
                let e_w = &params.layout[*w];
                let e_b = &params.layout[*b];
                let wv = params.slice(*w).to_vec();
                let (gw_slice, gb_slice) = {
                    // Split-borrow the two disjoint layout regions.
                    let (lo, hi) = if e_w.offset < e_b.offset {
                        (e_w.clone(), e_b.clone())
                    } else {
                        (e_b.clone(), e_w.clone())
                    };
                    let (first, second) = grad.split_at_mut(hi.offset);
                    let a = &mut first[lo.offset..lo.offset + lo.len];
                    let b2 = &mut second[..hi.len];
                    if e_w.offset < e_b.offset {
                        (a, b2)
                    } else {
                        (b2, a)
                    }
                };
                cur = conv3x3_backward(&wv, x, &cur, *out_ch, *stride, gw_slice, gb_slice);
            }
            (Op::Conv1x1 { w, b, in_ch, out_ch }, TapeEntry::Input(x)) => {
                let e_w = &params.layout[*w];
                let e_b = &params.layout[*b];
                let wv = params.slice(*w).to_vec();
                let plane = x.h * x.w;
                let mut gin = Tensor::zeros(*in_ch, x.h, x.w);
                for o in 0..*out_ch {
                    let gout_plane = &cur.data[o * plane..(o + 1) * plane];
                    grad[e_b.offset + o] += gout_plane.iter().sum::<f64>();
                    for c in 0..*in_ch {
                        let mut acc = 0.0;
                        let in_plane = &x.data[c * plane..(c + 1) * plane];
                        let gin_plane = &mut gin.data[c * plane..(c + 1) * plane];
                        let wc = wv[o * in_ch + c];
                        for i in 0..plane {
                            acc += gout_plane[i] * in_plane[i];
                            gin_plane[i] += wc * gout_plane[i];
                        }
                        grad[e_w.offset + o * in_ch + c] += acc;
                    }
                }
                cur = gin;
            }
            (Op::Relu, TapeEntry::ReluOut(out)) => {
                for (g, o) in cur.data.iter_mut().zip(out) {
                    if *o <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            (Op::Dropout, TapeEntry::DropoutMask(mask)) => {
                if !mask.is_empty() {
                    for (g, m) in cur.data.iter_mut().zip(mask) {
                        *g *= m;
                    }
                }
            }
            (Op::Upsample2x, TapeEntry::Shape { ch, h, w }) => {
                let mut gin = Tensor::zeros(*ch, *h, *w);
                for c in 0..*ch {
                    for y in 0..cur.h {
                        for x in 0..cur.w {
                            gin.add_at(c, y / 2, x / 2, cur.at(c, y, x));
                        }
                    }
                }
                cur = gin;
            }
            (Op::ConcatSkip(k), TapeEntry::Shape { ch, h, w }) => {
                let main_len = ch * h * w;
                let skip_data = cur.data.split_off(main_len);
                let skip_ch = cur.ch - ch;
                skip_grads[*k] = Some(Tensor { ch: skip_ch, h: *h, w: *w, data: skip_data });
                cur = Tensor { ch: *ch, h: *h, w: *w, data: cur.data };
            }
            (Op::SaveSkip(k), TapeEntry::None) => {
                if let Some(sg) = skip_grads[*k].take() {
                    if sg.data.len() != cur.data.len() {
                        return Err(Error::Contract("stale tape: skip shape mismatch".into()));
                    }
                    for (g, s) in cur.data.iter_mut().zip(&sg.data) {
                        *g += s;
                    }
                }
            }
            _ => return Err(Error::Contract("stale tape: entry does not match op".into())),
        }
    }
    Ok(grad)
}
