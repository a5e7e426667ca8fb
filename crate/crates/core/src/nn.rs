//! Layer primitives, the desk-scale student/teacher architectures, and the
//! fine-tuning protocol (head replacement, backbone freezing).
//!
//! Linear weights are stored [in_features, out_features]; conv weights
//! [out_channels, in_channels, kh, kw]. The model keeps a `head_boundary`
//! layer index: everything below it is backbone, everything at or above it
//! is the classification head.

use crate::error::{Error, Result};
use crate::rng::{op_ids, SplitMix64};
use crate::tensor::{conv2d_raw, matmul_raw, maxpool2d_raw, Tape, Tensor, Var};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named parameter with a frozen flag. Frozen parameters receive no
/// optimizer updates and no gradient buffers.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

#[derive(Debug, Clone)]
pub enum LayerKind {
    Conv2d { stride: usize, padding: usize },
    Linear,
    Relu,
    MaxPool2d { window: usize },
    Dropout { p: f64 },
    Flatten,
    Residual(Vec<Layer>),
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub kind: LayerKind,
    pub params: Vec<Param>,
}

impl Layer {
    pub fn relu() -> Layer {
        Layer {
            kind: LayerKind::Relu,
            params: vec![],
        }
    }

    pub fn maxpool2(window: usize) -> Layer {
        Layer {
            kind: LayerKind::MaxPool2d { window },
            params: vec![],
        }
    }

    pub fn flatten() -> Layer {
        Layer {
            kind: LayerKind::Flatten,
            params: vec![],
        }
    }

    pub fn dropout(p: f64) -> Layer {
        Layer {
            kind: LayerKind::Dropout { p },
            params: vec![],
        }
    }

    pub fn conv2d(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut SplitMix64,
    ) -> Layer {
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Layer {
            kind: LayerKind::Conv2d { stride, padding },
            params: vec![
                Param {
                    name: "weight".into(),
                    value: Tensor::uniform_init(
                        vec![out_channels, in_channels, kernel, kernel],
                        bound,
                        rng,
                    ),
                    frozen: false,
                },
                Param {
                    name: "bias".into(),
                    value: Tensor::uniform_init(vec![out_channels], bound, rng),
                    frozen: false,
                },
            ],
        }
    }

    pub fn linear(in_features: usize, out_features: usize, rng: &mut SplitMix64) -> Layer {
        let bound = 1.0 / (in_features as f64).sqrt();
        Layer {
            kind: LayerKind::Linear,
            params: vec![
                Param {
                    name: "weight".into(),
                    value: Tensor::uniform_init(vec![in_features, out_features], bound, rng),
                    frozen: false,
                },
                Param {
                    name: "bias".into(),
                    value: Tensor::uniform_init(vec![out_features], bound, rng),
                    frozen: false,
                },
            ],
        }
    }

    pub fn residual(inner: Vec<Layer>) -> Layer {
        Layer {
            kind: LayerKind::Residual(inner),
            params: vec![],
        }
    }
}

/// Parameter count of one conv filter: in_channels * kh * kw + 1.
pub fn conv_filter_param_count(in_channels: usize, kh: usize, kw: usize) -> usize {
    in_channels * kh * kw + 1
}

/// Ordered layer graph with a backbone/head split.
#[derive(Debug, Clone)]
pub struct Model {
    pub name: String,
    pub layers: Vec<Layer>,
    pub head_boundary: usize,
}

fn visit<'a>(prefix: &str, layers: &'a [Layer], out: &mut Vec<(String, &'a Param)>) {
    for (i, layer) in layers.iter().enumerate() {
        let base = format!("{prefix}layer{i}");
        for p in &layer.params {
            out.push((format!("{base}.{}", p.name), p));
        }
        if let LayerKind::Residual(inner) = &layer.kind {
            visit(&format!("{base}.inner."), inner, out);
        }
    }
}

fn visit_mut<'a>(
    prefix: &str,
    layers: &'a mut [Layer],
    out: &mut Vec<(String, &'a mut Param)>,
) {
    for (i, layer) in layers.iter_mut().enumerate() {
        let base = format!("{prefix}layer{i}");
        let is_res = matches!(layer.kind, LayerKind::Residual(_));
        for p in &mut layer.params {
            out.push((format!("{base}.{}", p.name), p));
        }
        if is_res {
            if let LayerKind::Residual(inner) = &mut layer.kind {
                visit_mut(&format!("{base}.inner."), inner, out);
            }
        }
    }
}

impl Model {
    /// Flat (path, param) list in a stable order; optimizer state and
    /// checkpoints index by this order.
    pub fn flat_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        visit("", &self.layers, &mut out);
        out
    }

    pub fn flat_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        visit_mut("", &mut self.layers, &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.flat_params().iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.flat_params()
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Output width of the final linear layer.
    pub fn num_classes(&self) -> usize {
        for layer in self.layers.iter().rev() {
            if matches!(layer.kind, LayerKind::Linear) {
                return layer.params[0].value.shape[1];
            }
        }
        0
    }

    /// FNV-1a over the raw parameter bytes; used by tests and manifests to
    /// detect any parameter change.
    pub fn params_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (_, p) in self.flat_params() {
            for v in &p.value.data {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    /// Forward pass on a tape. Returns the output var and param leaf vars in
    /// `flat_params` order (frozen params get non-differentiable leaves).
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        input: Tensor,
        mode: Mode,
        rng: &mut SplitMix64,
    ) -> Result<(Var, Vec<Var>)> {
        let mut param_vars = Vec::new();
        let x = tape.leaf(input, false);
        let out = forward_layers(&self.layers, tape, x, mode, rng, &mut param_vars)?;
        Ok((out, param_vars))
    }

    /// Tape-free inference (eval semantics: dropout is the identity).
    /// Read-only, safe to call from many threads at once.
    pub fn forward_eval(&self, input: &Tensor) -> Result<Tensor> {
        eval_layers(&self.layers, input)
    }

    pub fn freeze_backbone(&mut self) {
        let boundary = self.head_boundary;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            set_frozen(layer, i < boundary);
        }
    }

    pub fn unfreeze_all(&mut self) {
        for layer in &mut self.layers {
            set_frozen(layer, false);
        }
    }

    /// Re-initializes the head layers for a new class count. Backbone
    /// parameters are untouched bitwise. Head init is uniform in
    /// +/- 1/sqrt(fan_in), drawn from the HEAD_INIT stream of `seed`.
    pub fn replace_head(&mut self, new_num_classes: usize, seed: u64) {
        let mut rng = SplitMix64::stream(seed, 0, op_ids::HEAD_INIT);
        for layer in &mut self.layers[self.head_boundary..] {
            if let LayerKind::Linear = layer.kind {
                let in_features = layer.params[0].value.shape[0];
                let bound = 1.0 / (in_features as f64).sqrt();
                layer.params[0].value =
                    Tensor::uniform_init(vec![in_features, new_num_classes], bound, &mut rng);
                layer.params[0].frozen = false;
                layer.params[1].value =
                    Tensor::uniform_init(vec![new_num_classes], bound, &mut rng);
                layer.params[1].frozen = false;
            }
        }
    }

    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        self.flat_params()
            .into_iter()
            .map(|(n, p)| (n, p.value.clone()))
            .collect()
    }

    /// Loads named tensors into matching parameters; every entry must match
    /// an existing parameter path and shape.
    pub fn load_state(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let mut params = self.flat_params_mut();
        for (name, tensor) in entries {
            let slot = params
                .iter_mut()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            if slot.1.value.shape != tensor.shape {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {name}: {:?} vs {:?}",
                    slot.1.value.shape, tensor.shape
                )));
            }
            slot.1.value = tensor.clone();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries = self.state_tensors();
        save_checkpoint(path, &entries)
    }

    pub fn load_from(&mut self, path: &Path) -> Result<()> {
        let entries = load_checkpoint(path)?;
        self.load_state(&entries)
    }
}

fn set_frozen(layer: &mut Layer, frozen: bool) {
    for p in &mut layer.params {
        p.frozen = frozen;
    }
    if let LayerKind::Residual(inner) = &mut layer.kind {
        for l in inner {
            set_frozen(l, frozen);
        }
    }
}

fn forward_layers(
    layers: &[Layer],
    tape: &mut Tape,
    mut x: Var,
    mode: Mode,
    rng: &mut SplitMix64,
    param_vars: &mut Vec<Var>,
) -> Result<Var> {
    for layer in layers {
        x = match &layer.kind {
            LayerKind::Conv2d { stride, padding } => {
                let w = tape.leaf(layer.params[0].value.clone(), !layer.params[0].frozen);
                let b = tape.leaf(layer.params[1].value.clone(), !layer.params[1].frozen);
                param_vars.push(w);
                param_vars.push(b);
                tape.conv2d(x, w, b, *stride, *padding)?
            }
            LayerKind::Linear => {
                let w = tape.leaf(layer.params[0].value.clone(), !layer.params[0].frozen);
                let b = tape.leaf(layer.params[1].value.clone(), !layer.params[1].frozen);
                param_vars.push(w);
                param_vars.push(b);
                let m = tape.matmul(x, w)?;
                tape.add_bias_2d(m, b)?
            }
            LayerKind::Relu => tape.relu(x),
            LayerKind::MaxPool2d { window } => tape.maxpool2d(x, *window)?,
            LayerKind::Dropout { p } => match mode {
                Mode::Train if *p > 0.0 => tape.dropout(x, *p, rng)?,
                _ => x,
            },
            LayerKind::Flatten => {
                let shape = tape.value(x).shape.clone();
                let n = shape[0];
                let rest: usize = shape[1..].iter().product();
                tape.reshape(x, vec![n, rest])?
            }
            LayerKind::Residual(inner) => {
                let fx = forward_layers(inner, tape, x, mode, rng, param_vars)?;
                if tape.value(fx).shape != tape.value(x).shape {
                    return Err(Error::ShapeMismatch(format!(
                        "residual inner output {:?} vs input {:?}",
                        tape.value(fx).shape,
                        tape.value(x).shape
                    )));
                }
                tape.add(x, fx)?
            }
        };
    }
    Ok(x)
}

fn eval_layers(layers: &[Layer], input: &Tensor) -> Result<Tensor> {
    let mut x = input.clone();
    for layer in layers {
        x = match &layer.kind {
            LayerKind::Conv2d { stride, padding } => conv2d_raw(
                &x,
                &layer.params[0].value,
                &layer.params[1].value,
                *stride,
                *padding,
            )?,
            LayerKind::Linear => {
                let w = &layer.params[0].value;
                let b = &layer.params[1].value;
                let (n, k_in, k_out) = (x.shape[0], w.shape[0], w.shape[1]);
                if x.shape.len() != 2 || x.shape[1] != k_in {
                    return Err(Error::ShapeMismatch(format!(
                        "linear input {:?} vs weight {:?}",
                        x.shape, w.shape
                    )));
                }
                let mut out = matmul_raw(&x.data, &w.data, n, k_in, k_out);
                for i in 0..n {
                    for j in 0..k_out {
                        out[i * k_out + j] += b.data[j];
                    }
                }
                Tensor::new(vec![n, k_out], out)
            }
            LayerKind::Relu => Tensor::new(
                x.shape.clone(),
                x.data.iter().map(|v| v.max(0.0)).collect(),
            ),
            LayerKind::MaxPool2d { window } => maxpool2d_raw(&x, *window)?.0,
            LayerKind::Dropout { .. } => x,
            LayerKind::Flatten => {
                let n = x.shape[0];
                let rest: usize = x.shape[1..].iter().product();
                x.reshape(vec![n, rest])?
            }
            LayerKind::Residual(inner) => {
                let fx = eval_layers(inner, &x)?;
                if fx.shape != x.shape {
                    return Err(Error::ShapeMismatch(format!(
                        "residual inner output {:?} vs input {:?}",
                        fx.shape, x.shape
                    )));
                }
                Tensor::new(
                    x.shape.clone(),
                    x.data.iter().zip(&fx.data).map(|(a, b)| a + b).collect(),
                )
            }
        };
    }
    Ok(x)
}

/// Desk-scale student: conv(3->8) / relu / pool, residual(8), conv(8->16) /
/// relu / pool, flatten, linear head. Input is 3 x `side` x `side`; `side`
/// must be divisible by 4.
pub fn build_student_for(side: usize, num_classes: usize, seed: u64) -> Model {
    assert!(num_classes >= 2);
    assert!(side % 4 == 0, "input side must be divisible by 4");
    let mut rng = SplitMix64::stream(seed, 0, op_ids::MODEL_INIT);
    let q = side / 4;
    let layers = vec![
        Layer::conv2d(3, 8, 3, 1, 1, &mut rng),
        Layer::relu(),
        Layer::maxpool2(2),
        Layer::residual(vec![
            Layer::conv2d(8, 8, 3, 1, 1, &mut rng),
            Layer::relu(),
            Layer::conv2d(8, 8, 3, 1, 1, &mut rng),
        ]),
        Layer::conv2d(8, 16, 3, 1, 1, &mut rng),
        Layer::relu(),
        Layer::maxpool2(2),
        Layer::flatten(),
        Layer::linear(16 * q * q, num_classes, &mut rng),
    ];
    Model {
        name: "student".into(),
        head_boundary: 8,
        layers,
    }
}

/// Same pattern as the student with doubled widths and one extra residual
/// block; strictly more parameters.
pub fn build_teacher_for(side: usize, num_classes: usize, seed: u64) -> Model {
    assert!(num_classes >= 2);
    assert!(side % 4 == 0, "input side must be divisible by 4");
    let mut rng = SplitMix64::stream(seed, 1, op_ids::MODEL_INIT);
    let q = side / 4;
    let layers = vec![
        Layer::conv2d(3, 16, 3, 1, 1, &mut rng),
        Layer::relu(),
        Layer::maxpool2(2),
        Layer::residual(vec![
            Layer::conv2d(16, 16, 3, 1, 1, &mut rng),
            Layer::relu(),
            Layer::conv2d(16, 16, 3, 1, 1, &mut rng),
        ]),
        Layer::residual(vec![
            Layer::conv2d(16, 16, 3, 1, 1, &mut rng),
            Layer::relu(),
            Layer::conv2d(16, 16, 3, 1, 1, &mut rng),
        ]),
        Layer::conv2d(16, 32, 3, 1, 1, &mut rng),
        Layer::relu(),
        Layer::maxpool2(2),
        Layer::flatten(),
        Layer::linear(32 * q * q, num_classes, &mut rng),
    ];
    Model {
        name: "teacher".into(),
        head_boundary: 9,
        layers,
    }
}

pub fn build_student(num_classes: usize) -> Model {
    build_student_for(32, num_classes, 0)
}

pub fn build_teacher(num_classes: usize) -> Model {
    build_teacher_for(32, num_classes, 0)
}

// ----------------------------------------------------------------------------
// DTKD checkpoint format
// ----------------------------------------------------------------------------
// magic "DTKD", version u32 LE, tensor count u32 LE, then per tensor:
// name length u16 LE + UTF-8 name, rank u8, dims u64 LE, values f64 LE.

const MAGIC: &[u8; 4] = b"DTKD";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::TruncatedFile(format!(
                "need {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let nlen = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(cur.take(nlen)?.to_vec())
            .map_err(|_| Error::Format("non-UTF-8 tensor name".into()))?;
        let rank = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(shape, data)));
    }
    if cur.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last tensor",
            buf.len() - cur.pos
        )));
    }
    Ok(entries)
}
