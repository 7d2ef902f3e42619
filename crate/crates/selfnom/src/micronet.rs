//! Minimal differentiable network engine: 1D convolutions, dense layers,
//! batch normalization, tanh, and an optional side branch whose output is
//! concatenated with the main features. Forward, hand-derived backward, and
//! plain SGD updates over a single flat parameter vector.
//!
//! The layer set is exactly what the self-nomination scoring network needs;
//! there is no general autodiff. Batch normalization couples samples, so the
//! batch forward is the primary entry point; training mode uses mini-batch
//! statistics and maintains running statistics for evaluation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("stale cache: cache does not match this network or batch")]
    StaleCache,
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint file: {0}")]
    BadFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv1d { in_ch: usize, out_ch: usize, kernel: usize },
    Dense { inp: usize, out: usize },
    BatchNorm { width: usize },
    Tanh,
}

impl LayerKind {
    fn param_count(&self) -> usize {
        match *self {
            LayerKind::Conv1d { in_ch, out_ch, kernel } => out_ch * in_ch * kernel + out_ch,
            LayerKind::Dense { inp, out } => out * inp + out,
            LayerKind::BatchNorm { width } => 2 * width,
            LayerKind::Tanh => 0,
        }
    }

    fn running_count(&self) -> usize {
        match *self {
            LayerKind::BatchNorm { width } => 2 * width,
            _ => 0,
        }
    }
}

/// Architecture: a trunk over the channel features, an optional weight
/// branch whose output is concatenated with the trunk features, and a head
/// that reduces the joint features to the scalar score.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub input_len: usize,
    pub trunk: Vec<LayerKind>,
    pub weight_branch: Option<Vec<LayerKind>>,
    pub head: Vec<LayerKind>,
}

/// Shape of the activations entering a layer: `channels x len`; dense layers
/// see the flattened width `channels * len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Shape {
    ch: usize,
    len: usize,
}

impl Shape {
    fn flat(&self) -> usize {
        self.ch * self.len
    }
}

fn propagate(shape: Shape, layer: &LayerKind) -> Result<Shape, NetError> {
    match *layer {
        LayerKind::Conv1d { in_ch, out_ch, kernel } => {
            if shape.ch != in_ch || shape.len < kernel {
                return Err(NetError::ShapeMismatch(format!(
                    "conv1d expects {in_ch} channels and len >= {kernel}, got {shape:?}"
                )));
            }
            Ok(Shape {
                ch: out_ch,
                len: shape.len - kernel + 1,
            })
        }
        LayerKind::Dense { inp, out } => {
            if shape.flat() != inp {
                return Err(NetError::ShapeMismatch(format!(
                    "dense expects width {inp}, got {}",
                    shape.flat()
                )));
            }
            Ok(Shape { ch: 1, len: out })
        }
        LayerKind::BatchNorm { width } => {
            if shape.flat() != width {
                return Err(NetError::ShapeMismatch(format!(
                    "batchnorm expects width {width}, got {}",
                    shape.flat()
                )));
            }
            Ok(Shape {
                ch: 1,
                len: width,
            })
        }
        LayerKind::Tanh => Ok(Shape {
            ch: 1,
            len: shape.flat(),
        }),
    }
}

/// Default full-CSI architecture: two 1D convolutions over the interleaved
/// real/imag features, then the dense/batchnorm/tanh stack down to a scalar.
pub fn full_csi_spec(n_antennas: usize, pf_aware: bool) -> NetSpec {
    let input_len = 2 * n_antennas;
    let trunk = vec![
        LayerKind::Conv1d { in_ch: 1, out_ch: 8, kernel: 5 },
        LayerKind::Conv1d { in_ch: 8, out_ch: 8, kernel: 5 },
    ];
    let flat = 8 * (input_len - 8);
    let wb_width = if pf_aware { 8 } else { 0 };
    let head = vec![
        LayerKind::Dense { inp: flat + wb_width, out: 64 },
        LayerKind::BatchNorm { width: 64 },
        LayerKind::Tanh,
        LayerKind::Dense { inp: 64, out: 32 },
        LayerKind::BatchNorm { width: 32 },
        LayerKind::Tanh,
        LayerKind::Dense { inp: 32, out: 1 },
    ];
    NetSpec {
        input_len,
        trunk,
        weight_branch: pf_aware.then(|| vec![LayerKind::Dense { inp: 1, out: 8 }, LayerKind::Tanh]),
        head,
    }
}

/// Default CQI architecture: the convolutional stages are omitted and the
/// scalar norm feeds the dense stack directly.
pub fn cqi_spec(pf_aware: bool) -> NetSpec {
    let wb_width = if pf_aware { 8 } else { 0 };
    let head = vec![
        LayerKind::Dense { inp: 1 + wb_width, out: 32 },
        LayerKind::BatchNorm { width: 32 },
        LayerKind::Tanh,
        LayerKind::Dense { inp: 32, out: 32 },
        LayerKind::BatchNorm { width: 32 },
        LayerKind::Tanh,
        LayerKind::Dense { inp: 32, out: 1 },
    ];
    NetSpec {
        input_len: 1,
        trunk: Vec::new(),
        weight_branch: pf_aware.then(|| vec![LayerKind::Dense { inp: 1, out: 8 }, LayerKind::Tanh]),
        head,
    }
}

/// Row-major batch of real-valued feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Batch {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map(|v| v.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c);
            data.extend(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

enum LayerCache {
    Conv { input: Batch },
    Dense { input: Batch },
    BatchNormTrain { xhat: Batch, invstd: Vec<f64> },
    BatchNormEval { xhat: Batch, invstd: Vec<f64> },
    Tanh { output: Batch },
}

/// Activation cache from one batch forward; consumed by `backward`.
pub struct Cache {
    trunk: Vec<LayerCache>,
    wb: Vec<LayerCache>,
    head: Vec<LayerCache>,
    trunk_width: usize,
    wb_width: usize,
    batch: usize,
    param_count: usize,
}

/// Gradient aligned with the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

#[derive(Debug, Clone, Copy)]
pub enum Direction {
    Ascend,
    Descend,
}

/// The scoring network: flat trainable parameters with per-layer views plus
/// batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetSpec,
    pub params: Vec<f64>,
    pub running: Vec<f64>,
    pub mode: Mode,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

struct SegmentMeta {
    // (param offset, running offset, input shape) per layer
    layers: Vec<(usize, usize, Shape)>,
    out_shape: Shape,
}

impl Network {
    pub fn init(spec: NetSpec, seed: u64) -> Self {
        let mut net = Self {
            spec,
            params: Vec::new(),
            running: Vec::new(),
            mode: Mode::Train,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        };
        let (pc, rc) = net.counts();
        net.params = vec![0.0; pc];
        net.running = vec![0.0; rc];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        net.init_params(&mut rng);
        net
    }

    fn init_params(&mut self, rng: &mut impl Rng) {
        let segs = [
            self.spec.trunk.clone(),
            self.spec.weight_branch.clone().unwrap_or_default(),
            self.spec.head.clone(),
        ];
        let mut po = 0usize;
        let mut ro = 0usize;
        for seg in &segs {
            for layer in seg {
                let pc = layer.param_count();
                match *layer {
                    LayerKind::Conv1d { in_ch, kernel, .. } => {
                        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
                        for p in &mut self.params[po..po + pc] {
                            *p = rng.gen_range(-bound..bound);
                        }
                    }
                    LayerKind::Dense { inp, .. } => {
                        let bound = 1.0 / (inp as f64).sqrt();
                        for p in &mut self.params[po..po + pc] {
                            *p = rng.gen_range(-bound..bound);
                        }
                    }
                    LayerKind::BatchNorm { width } => {
                        // scale = 1, shift = 0; running var starts at 1
                        for p in &mut self.params[po..po + width] {
                            *p = 1.0;
                        }
                        for r in &mut self.running[ro + width..ro + 2 * width] {
                            *r = 1.0;
                        }
                    }
                    LayerKind::Tanh => {}
                }
                po += pc;
                ro += layer.running_count();
            }
        }
    }

    fn counts(&self) -> (usize, usize) {
        let mut pc = 0;
        let mut rc = 0;
        for seg in [
            &self.spec.trunk,
            self.spec.weight_branch.as_ref().unwrap_or(&Vec::new()),
            &self.spec.head,
        ] {
            for l in seg {
                pc += l.param_count();
                rc += l.running_count();
            }
        }
        (pc, rc)
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn segment_meta(&self) -> Result<(SegmentMeta, Option<SegmentMeta>, SegmentMeta), NetError> {
        let mut po = 0usize;
        let mut ro = 0usize;
        let mut build = |layers: &[LayerKind], mut shape: Shape| -> Result<SegmentMeta, NetError> {
            let mut out = Vec::with_capacity(layers.len());
            for l in layers {
                out.push((po, ro, shape));
                shape = propagate(shape, l)?;
                po += l.param_count();
                ro += l.running_count();
            }
            Ok(SegmentMeta {
                layers: out,
                out_shape: shape,
            })
        };
        let trunk = build(
            &self.spec.trunk,
            Shape {
                ch: 1,
                len: self.spec.input_len,
            },
        )?;
        let wb = match &self.spec.weight_branch {
            Some(layers) => Some(build(layers, Shape { ch: 1, len: 1 })?),
            None => None,
        };
        let joint = trunk.out_shape.flat() + wb.as_ref().map(|m| m.out_shape.flat()).unwrap_or(0);
        let head = build(&self.spec.head, Shape { ch: 1, len: joint })?;
        if head.out_shape.flat() != 1 {
            return Err(NetError::ShapeMismatch(
                "head must end in a scalar output".into(),
            ));
        }
        Ok((trunk, wb, head))
    }

    fn forward_segment(
        &mut self,
        layers: &[LayerKind],
        meta: &SegmentMeta,
        mut x: Batch,
    ) -> (Batch, Vec<LayerCache>) {
        let mut caches = Vec::with_capacity(layers.len());
        for (l, (po, ro, shape)) in layers.iter().zip(&meta.layers) {
            let (y, cache) = self.forward_layer(l, *po, *ro, *shape, x);
            caches.push(cache);
            x = y;
        }
        (x, caches)
    }

    fn forward_layer(
        &mut self,
        layer: &LayerKind,
        po: usize,
        ro: usize,
        shape: Shape,
        x: Batch,
    ) -> (Batch, LayerCache) {
        let b = x.rows;
        match *layer {
            LayerKind::Conv1d { in_ch, out_ch, kernel } => {
                let out_len = shape.len - kernel + 1;
                let mut y = Batch::zeros(b, out_ch * out_len);
                let wlen = out_ch * in_ch * kernel;
                let (w, bias) = self.params[po..po + wlen + out_ch].split_at(wlen);
                for s in 0..b {
                    let xin = x.row(s);
                    let yout = &mut y.data[s * out_ch * out_len..(s + 1) * out_ch * out_len];
                    for oc in 0..out_ch {
                        for t in 0..out_len {
                            let mut acc = bias[oc];
                            for ic in 0..in_ch {
                                let wbase = (oc * in_ch + ic) * kernel;
                                let xbase = ic * shape.len + t;
                                for k in 0..kernel {
                                    acc += w[wbase + k] * xin[xbase + k];
                                }
                            }
                            yout[oc * out_len + t] = acc;
                        }
                    }
                }
                (y, LayerCache::Conv { input: x })
            }
            LayerKind::Dense { inp, out } => {
                let mut y = Batch::zeros(b, out);
                let wlen = out * inp;
                let (w, bias) = self.params[po..po + wlen + out].split_at(wlen);
                for s in 0..b {
                    let xin = x.row(s);
                    let yout = &mut y.data[s * out..(s + 1) * out];
                    for o in 0..out {
                        let mut acc = bias[o];
                        let wrow = &w[o * inp..(o + 1) * inp];
                        for i in 0..inp {
                            acc += wrow[i] * xin[i];
                        }
                        yout[o] = acc;
                    }
                }
                (y, LayerCache::Dense { input: x })
            }
            LayerKind::BatchNorm { width } => {
                let gamma = &self.params[po..po + width];
                let beta = &self.params[po + width..po + 2 * width];
                let mut y = Batch::zeros(b, width);
                let mut xhat = Batch::zeros(b, width);
                let mut invstd = vec![0.0; width];
                match self.mode {
                    Mode::Train => {
                        let mut mean = vec![0.0; width];
                        let mut var = vec![0.0; width];
                        for s in 0..b {
                            for j in 0..width {
                                mean[j] += x.data[s * width + j];
                            }
                        }
                        for m in &mut mean {
                            *m /= b as f64;
                        }
                        for s in 0..b {
                            for j in 0..width {
                                let d = x.data[s * width + j] - mean[j];
                                var[j] += d * d;
                            }
                        }
                        for v in &mut var {
                            *v /= b as f64;
                        }
                        for j in 0..width {
                            invstd[j] = 1.0 / (var[j] + self.bn_eps).sqrt();
                        }
                        for s in 0..b {
                            for j in 0..width {
                                let xh = (x.data[s * width + j] - mean[j]) * invstd[j];
                                xhat.data[s * width + j] = xh;
                                y.data[s * width + j] = gamma[j] * xh + beta[j];
                            }
                        }
                        let mom = self.bn_momentum;
                        for j in 0..width {
                            self.running[ro + j] = (1.0 - mom) * self.running[ro + j] + mom * mean[j];
                            self.running[ro + width + j] =
                                (1.0 - mom) * self.running[ro + width + j] + mom * var[j];
                        }
                        (y, LayerCache::BatchNormTrain { xhat, invstd })
                    }
                    Mode::Eval => {
                        for j in 0..width {
                            invstd[j] = 1.0 / (self.running[ro + width + j] + self.bn_eps).sqrt();
                        }
                        for s in 0..b {
                            for j in 0..width {
                                let xh = (x.data[s * width + j] - self.running[ro + j]) * invstd[j];
                                xhat.data[s * width + j] = xh;
                                y.data[s * width + j] = gamma[j] * xh + beta[j];
                            }
                        }
                        (y, LayerCache::BatchNormEval { xhat, invstd })
                    }
                }
            }
            LayerKind::Tanh => {
                let mut y = x;
                for v in &mut y.data {
                    *v = v.tanh();
                }
                (y.clone(), LayerCache::Tanh { output: y })
            }
        }
    }

    /// Batch forward producing one scalar score per sample.
    ///
    /// `weight_inputs` must be a one-column batch when the spec carries a
    /// weight branch and absent otherwise. Train mode requires batch size at
    /// least 2 when the network contains batch normalization.
    pub fn forward_batch(
        &mut self,
        inputs: &Batch,
        weight_inputs: Option<&Batch>,
    ) -> Result<(Vec<f64>, Cache), NetError> {
        if inputs.cols != self.spec.input_len {
            return Err(NetError::ShapeMismatch(format!(
                "input width {} != {}",
                inputs.cols, self.spec.input_len
            )));
        }
        let has_bn = self
            .spec
            .trunk
            .iter()
            .chain(self.spec.head.iter())
            .chain(self.spec.weight_branch.iter().flatten())
            .any(|l| matches!(l, LayerKind::BatchNorm { .. }));
        if self.mode == Mode::Train && has_bn && inputs.rows < 2 {
            return Err(NetError::ShapeMismatch(
                "train mode with batchnorm needs batch size >= 2".into(),
            ));
        }
        match (&self.spec.weight_branch, weight_inputs) {
            (Some(_), None) => {
                return Err(NetError::ShapeMismatch("weight input missing".into()))
            }
            (None, Some(_)) => {
                return Err(NetError::ShapeMismatch("unexpected weight input".into()))
            }
            (Some(_), Some(w)) if w.rows != inputs.rows || w.cols != 1 => {
                return Err(NetError::ShapeMismatch("weight input must be Bx1".into()))
            }
            _ => {}
        }

        let (tm, wm, hm) = self.segment_meta()?;
        let trunk_layers = self.spec.trunk.clone();
        let (tout, tcache) = self.forward_segment(&trunk_layers, &tm, inputs.clone());
        let (wout, wcache, wb_width) = match (&wm, weight_inputs) {
            (Some(meta), Some(w)) => {
                let layers = self.spec.weight_branch.clone().unwrap();
                let (o, c) = self.forward_segment(&layers, meta, w.clone());
                let width = o.cols;
                (Some(o), c, width)
            }
            _ => (None, Vec::new(), 0),
        };
        let trunk_width = tout.cols;
        let joint = match &wout {
            Some(w) => {
                let mut j = Batch::zeros(inputs.rows, trunk_width + wb_width);
                for s in 0..inputs.rows {
                    j.data[s * (trunk_width + wb_width)..s * (trunk_width + wb_width) + trunk_width]
                        .copy_from_slice(tout.row(s));
                    j.data[s * (trunk_width + wb_width) + trunk_width
                        ..(s + 1) * (trunk_width + wb_width)]
                        .copy_from_slice(w.row(s));
                }
                j
            }
            None => tout,
        };
        let head_layers = self.spec.head.clone();
        let (hout, hcache) = self.forward_segment(&head_layers, &hm, joint);
        let scores = (0..inputs.rows).map(|s| hout.data[s]).collect();
        Ok((
            scores,
            Cache {
                trunk: tcache,
                wb: wcache,
                head: hcache,
                trunk_width,
                wb_width,
                batch: inputs.rows,
                param_count: self.params.len(),
            },
        ))
    }

    /// Single-sample forward; deterministic in eval mode.
    pub fn forward(&mut self, input: &[f64], weight: Option<f64>) -> Result<f64, NetError> {
        let b = Batch::from_rows(vec![input.to_vec()]);
        let w = weight.map(|v| Batch::from_rows(vec![vec![v]]));
        let (scores, _) = self.forward_batch(&b, w.as_ref())?;
        Ok(scores[0])
    }

    fn backward_segment(
        &self,
        layers: &[LayerKind],
        meta: &SegmentMeta,
        caches: &[LayerCache],
        mut dy: Batch,
        grad: &mut [f64],
    ) -> Batch {
        for ((l, (po, _ro, shape)), cache) in layers.iter().zip(&meta.layers).zip(caches).rev() {
            dy = self.backward_layer(l, *po, *shape, cache, dy, grad);
        }
        dy
    }

    fn backward_layer(
        &self,
        layer: &LayerKind,
        po: usize,
        shape: Shape,
        cache: &LayerCache,
        dy: Batch,
        grad: &mut [f64],
    ) -> Batch {
        let b = dy.rows;
        match (*layer, cache) {
            (LayerKind::Conv1d { in_ch, out_ch, kernel }, LayerCache::Conv { input }) => {
                let out_len = shape.len - kernel + 1;
                let wlen = out_ch * in_ch * kernel;
                let w = &self.params[po..po + wlen];
                let mut dx = Batch::zeros(b, in_ch * shape.len);
                for s in 0..b {
                    let xin = input.row(s);
                    let dyr = dy.row(s);
                    let dxr = &mut dx.data[s * in_ch * shape.len..(s + 1) * in_ch * shape.len];
                    for oc in 0..out_ch {
                        for t in 0..out_len {
                            let g = dyr[oc * out_len + t];
                            if g == 0.0 {
                                continue;
                            }
                            grad[po + wlen + oc] += g;
                            for ic in 0..in_ch {
                                let wbase = (oc * in_ch + ic) * kernel;
                                let xbase = ic * shape.len + t;
                                for k in 0..kernel {
                                    grad[po + wbase + k] += g * xin[xbase + k];
                                    dxr[xbase + k] += g * w[wbase + k];
                                }
                            }
                        }
                    }
                }
                dx
            }
            (LayerKind::Dense { inp, out }, LayerCache::Dense { input }) => {
                let wlen = out * inp;
                let w = &self.params[po..po + wlen];
                let mut dx = Batch::zeros(b, inp);
                for s in 0..b {
                    let xin = input.row(s);
                    let dyr = dy.row(s);
                    let dxr = &mut dx.data[s * inp..(s + 1) * inp];
                    for o in 0..out {
                        let g = dyr[o];
                        if g == 0.0 {
                            continue;
                        }
                        grad[po + wlen + o] += g;
                        let wrow = &w[o * inp..(o + 1) * inp];
                        for i in 0..inp {
                            grad[po + o * inp + i] += g * xin[i];
                            dxr[i] += g * wrow[i];
                        }
                    }
                }
                dx
            }
            (LayerKind::BatchNorm { width }, LayerCache::BatchNormTrain { xhat, invstd }) => {
                let gamma = &self.params[po..po + width];
                let mut dgamma = vec![0.0; width];
                let mut dbeta = vec![0.0; width];
                let mut mean_dxhat = vec![0.0; width];
                let mut mean_dxhat_xhat = vec![0.0; width];
                for s in 0..b {
                    for j in 0..width {
                        let g = dy.data[s * width + j];
                        let xh = xhat.data[s * width + j];
                        dgamma[j] += g * xh;
                        dbeta[j] += g;
                        let dxh = g * gamma[j];
                        mean_dxhat[j] += dxh;
                        mean_dxhat_xhat[j] += dxh * xh;
                    }
                }
                for j in 0..width {
                    grad[po + j] += dgamma[j];
                    grad[po + width + j] += dbeta[j];
                    mean_dxhat[j] /= b as f64;
                    mean_dxhat_xhat[j] /= b as f64;
                }
                let mut dx = Batch::zeros(b, width);
                for s in 0..b {
                    for j in 0..width {
                        let dxh = dy.data[s * width + j] * gamma[j];
                        let xh = xhat.data[s * width + j];
                        dx.data[s * width + j] =
                            invstd[j] * (dxh - mean_dxhat[j] - xh * mean_dxhat_xhat[j]);
                    }
                }
                dx
            }
            (LayerKind::BatchNorm { width }, LayerCache::BatchNormEval { xhat, invstd }) => {
                let gamma = &self.params[po..po + width];
                let mut dx = Batch::zeros(b, width);
                for s in 0..b {
                    for j in 0..width {
                        let g = dy.data[s * width + j];
                        grad[po + j] += g * xhat.data[s * width + j];
                        grad[po + width + j] += g;
                        dx.data[s * width + j] = g * gamma[j] * invstd[j];
                    }
                }
                dx
            }
            (LayerKind::Tanh, LayerCache::Tanh { output }) => {
                let mut dx = dy;
                for (d, y) in dx.data.iter_mut().zip(&output.data) {
                    *d *= 1.0 - y * y;
                }
                dx
            }
            _ => unreachable!("cache/layer mismatch"),
        }
    }

    /// Exact gradient of `sum_s upstream[s] * c_s` with respect to the flat
    /// parameter vector, in whichever statistics mode the forward ran.
    pub fn backward(&self, cache: &Cache, upstream: &[f64]) -> Result<Gradient, NetError> {
        if cache.batch != upstream.len() || cache.param_count != self.params.len() {
            return Err(NetError::StaleCache);
        }
        let (tm, wm, hm) = self.segment_meta()?;
        let mut grad = vec![0.0; self.params.len()];
        let dy = Batch::from_rows(upstream.iter().map(|&u| vec![u]).collect());
        let djoint = self.backward_segment(&self.spec.head, &hm, &cache.head, dy, &mut grad);
        let (dtrunk, dwb) = if cache.wb_width > 0 {
            let mut dt = Batch::zeros(cache.batch, cache.trunk_width);
            let mut dw = Batch::zeros(cache.batch, cache.wb_width);
            for s in 0..cache.batch {
                let j = djoint.row(s);
                dt.data[s * cache.trunk_width..(s + 1) * cache.trunk_width]
                    .copy_from_slice(&j[..cache.trunk_width]);
                dw.data[s * cache.wb_width..(s + 1) * cache.wb_width]
                    .copy_from_slice(&j[cache.trunk_width..]);
            }
            (dt, Some(dw))
        } else {
            (djoint, None)
        };
        if !self.spec.trunk.is_empty() {
            self.backward_segment(&self.spec.trunk, &tm, &cache.trunk, dtrunk, &mut grad);
        }
        if let (Some(layers), Some(meta), Some(dw)) = (&self.spec.weight_branch, &wm, dwb) {
            self.backward_segment(layers, meta, &cache.wb, dw, &mut grad);
        }
        Ok(Gradient(grad))
    }
}

/// `theta <- theta -/+ lr * g` elementwise.
pub fn sgd_step(params: &mut [f64], gradient: &Gradient, learning_rate: f64, direction: Direction) {
    assert!(learning_rate > 0.0);
    assert_eq!(params.len(), gradient.0.len());
    let sign = match direction {
        Direction::Ascend => 1.0,
        Direction::Descend => -1.0,
    };
    for (p, g) in params.iter_mut().zip(&gradient.0) {
        *p += sign * learning_rate * g;
    }
}

const CKPT_MAGIC: &[u8; 4] = b"SNCK";
const CKPT_VERSION: u32 = 1;

/// Policy metadata stored alongside the raw network in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    /// 0 = full CSI, 1 = CQI
    pub input_mode: u32,
    pub pf_aware: bool,
    /// 0 = direct optimization, 1 = policy gradient
    pub method: u32,
    /// featurization scale 1/median(||h||) frozen at training time
    pub feature_scale: f64,
    pub n_antennas: u32,
    pub gamma: f64,
    pub lambda: f64,
}

fn write_layers(w: &mut impl Write, layers: &[LayerKind]) -> std::io::Result<()> {
    w.write_all(&(layers.len() as u32).to_le_bytes())?;
    for l in layers {
        let (kind, a, b, c): (u32, u32, u32, u32) = match *l {
            LayerKind::Conv1d { in_ch, out_ch, kernel } => {
                (0, in_ch as u32, out_ch as u32, kernel as u32)
            }
            LayerKind::Dense { inp, out } => (1, inp as u32, out as u32, 0),
            LayerKind::BatchNorm { width } => (2, width as u32, 0, 0),
            LayerKind::Tanh => (3, 0, 0, 0),
        };
        for v in [kind, a, b, c] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_layers(r: &mut impl Read) -> Result<Vec<LayerKind>, NetError> {
    let mut u = [0u8; 4];
    r.read_exact(&mut u)?;
    let n = u32::from_le_bytes(u) as usize;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let mut vals = [0u32; 4];
        for v in &mut vals {
            r.read_exact(&mut u)?;
            *v = u32::from_le_bytes(u);
        }
        let l = match vals[0] {
            0 => LayerKind::Conv1d {
                in_ch: vals[1] as usize,
                out_ch: vals[2] as usize,
                kernel: vals[3] as usize,
            },
            1 => LayerKind::Dense {
                inp: vals[1] as usize,
                out: vals[2] as usize,
            },
            2 => LayerKind::BatchNorm {
                width: vals[1] as usize,
            },
            3 => LayerKind::Tanh,
            k => return Err(NetError::BadFile(format!("unknown layer kind {k}"))),
        };
        layers.push(l);
    }
    Ok(layers)
}

/// Writes a checkpoint: "SNCK" magic, version, architecture, metadata, then
/// parameters, running statistics, the dual variable, and the sharpness, all
/// as little-endian 64-bit floats. Round-trips bit-exactly.
pub fn write_checkpoint(path: &Path, net: &Network, meta: &CheckpointMeta) -> Result<(), NetError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(net.spec.input_len as u32).to_le_bytes())?;
    write_layers(&mut w, &net.spec.trunk)?;
    match &net.spec.weight_branch {
        Some(layers) => {
            w.write_all(&1u32.to_le_bytes())?;
            write_layers(&mut w, layers)?;
        }
        None => w.write_all(&0u32.to_le_bytes())?,
    }
    write_layers(&mut w, &net.spec.head)?;
    w.write_all(&meta.input_mode.to_le_bytes())?;
    w.write_all(&(meta.pf_aware as u32).to_le_bytes())?;
    w.write_all(&meta.method.to_le_bytes())?;
    w.write_all(&meta.n_antennas.to_le_bytes())?;
    w.write_all(&meta.feature_scale.to_le_bytes())?;
    w.write_all(&(net.params.len() as u32).to_le_bytes())?;
    for p in &net.params {
        w.write_all(&p.to_le_bytes())?;
    }
    w.write_all(&(net.running.len() as u32).to_le_bytes())?;
    for r in &net.running {
        w.write_all(&r.to_le_bytes())?;
    }
    w.write_all(&meta.lambda.to_le_bytes())?;
    w.write_all(&meta.gamma.to_le_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(Network, CheckpointMeta), NetError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(NetError::BadFile("bad magic".into()));
    }
    let mut u = [0u8; 4];
    let mut read_u32 = |r: &mut dyn Read| -> Result<u32, NetError> {
        r.read_exact(&mut u)?;
        Ok(u32::from_le_bytes(u))
    };
    let version = read_u32(&mut r)?;
    if version != CKPT_VERSION {
        return Err(NetError::BadFile(format!("unsupported version {version}")));
    }
    let input_len = read_u32(&mut r)? as usize;
    let trunk = read_layers(&mut r)?;
    let has_wb = read_u32(&mut r)? != 0;
    let weight_branch = if has_wb { Some(read_layers(&mut r)?) } else { None };
    let head = read_layers(&mut r)?;
    let input_mode = read_u32(&mut r)?;
    let pf_aware = read_u32(&mut r)? != 0;
    let method = read_u32(&mut r)?;
    let n_antennas = read_u32(&mut r)?;
    let mut f = [0u8; 8];
    let mut read_f64 = |r: &mut dyn Read| -> Result<f64, NetError> {
        r.read_exact(&mut f)?;
        Ok(f64::from_le_bytes(f))
    };
    let feature_scale = read_f64(&mut r)?;
    let spec = NetSpec {
        input_len,
        trunk,
        weight_branch,
        head,
    };
    let mut net = Network {
        spec,
        params: Vec::new(),
        running: Vec::new(),
        mode: Mode::Eval,
        bn_eps: 1e-5,
        bn_momentum: 0.1,
    };
    let (pc, rc) = net.counts();
    let np = {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        u32::from_le_bytes(b) as usize
    };
    if np != pc {
        return Err(NetError::BadFile(format!(
            "parameter count {np} does not match architecture ({pc})"
        )));
    }
    let read_f64v = |r: &mut dyn Read, n: usize| -> Result<Vec<f64>, NetError> {
        let mut v = Vec::with_capacity(n);
        let mut f = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut f)?;
            v.push(f64::from_le_bytes(f));
        }
        Ok(v)
    };
    net.params = read_f64v(&mut r, np)?;
    let nr = {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        u32::from_le_bytes(b) as usize
    };
    if nr != rc {
        return Err(NetError::BadFile(format!(
            "running stat count {nr} does not match architecture ({rc})"
        )));
    }
    net.running = read_f64v(&mut r, nr)?;
    let lambda = read_f64v(&mut r, 1)?[0];
    let gamma = read_f64v(&mut r, 1)?[0];
    Ok((
        net,
        CheckpointMeta {
            input_mode,
            pf_aware,
            method,
            feature_scale,
            n_antennas,
            gamma,
            lambda,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dense_spec() -> NetSpec {
        NetSpec {
            input_len: 3,
            trunk: Vec::new(),
            weight_branch: None,
            head: vec![LayerKind::Dense { inp: 3, out: 1 }],
        }
    }

    #[test]
    fn zero_weights_zero_score() {
        let spec = NetSpec {
            input_len: 4,
            trunk: Vec::new(),
            weight_branch: None,
            head: vec![
                LayerKind::Dense { inp: 4, out: 5 },
                LayerKind::Tanh,
                LayerKind::Dense { inp: 5, out: 1 },
            ],
        };
        let mut net = Network::init(spec, 0);
        for p in &mut net.params {
            *p = 0.0;
        }
        net.set_mode(Mode::Eval);
        let c = net.forward(&[1.0, -2.0, 3.0, 0.5], None).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn single_dense_is_linear() {
        let mut net = Network::init(tiny_dense_spec(), 1);
        net.params.copy_from_slice(&[2.0, -1.0, 0.5, 0.0]);
        net.set_mode(Mode::Eval);
        let x = [1.0, 2.0, 4.0];
        let c = net.forward(&x, None).unwrap();
        assert!((c - (2.0 - 2.0 + 2.0)).abs() < 1e-15);
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        // random 2-layer dense+tanh net against an index-by-index evaluation
        let spec = NetSpec {
            input_len: 4,
            trunk: Vec::new(),
            weight_branch: None,
            head: vec![
                LayerKind::Dense { inp: 4, out: 3 },
                LayerKind::Tanh,
                LayerKind::Dense { inp: 3, out: 1 },
            ],
        };
        let mut net = Network::init(spec, 7);
        net.set_mode(Mode::Eval);
        let x = [0.3, -1.2, 0.8, 2.0];
        let c = net.forward(&x, None).unwrap();
        let p = &net.params;
        let mut hidden = [0.0f64; 3];
        for o in 0..3 {
            let mut acc = p[12 + o];
            for i in 0..4 {
                acc += p[o * 4 + i] * x[i];
            }
            hidden[o] = acc.tanh();
        }
        let mut out = p[15 + 3];
        for i in 0..3 {
            out += p[15 + i] * hidden[i];
        }
        assert!((c - out).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_zero_variance_outputs_shift() {
        let spec = NetSpec {
            input_len: 2,
            trunk: Vec::new(),
            weight_branch: None,
            head: vec![
                LayerKind::BatchNorm { width: 2 },
                LayerKind::Dense { inp: 2, out: 1 },
            ],
        };
        let mut net = Network::init(spec, 3);
        // beta = [0.7, -0.3]
        net.params[2] = 0.7;
        net.params[3] = -0.3;
        // dense picks out feature 0
        net.params[4] = 1.0;
        net.params[5] = 0.0;
        net.params[6] = 0.0;
        net.set_mode(Mode::Train);
        let b = Batch::from_rows(vec![vec![5.0, 1.0]; 4]);
        let (scores, _) = net.forward_batch(&b, None).unwrap();
        for c in scores {
            assert!((c - 0.7).abs() < 1e-9, "score {c}");
        }
    }

    #[test]
    fn eval_mode_deterministic() {
        let mut net = Network::init(full_csi_spec(8, false), 11);
        net.set_mode(Mode::Eval);
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = net.forward(&x, None).unwrap();
        let b = net.forward(&x, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn running_stats_converge_to_batch_stats() {
        let mut net = Network::init(cqi_spec(false), 13);
        net.set_mode(Mode::Train);
        // stationary stream
        let batch = Batch::from_rows(
            (0..32)
                .map(|i| vec![((i * 37 % 100) as f64 / 50.0) - 1.0])
                .collect(),
        );
        let mut last_train = Vec::new();
        for _ in 0..400 {
            let (c, _) = net.forward_batch(&batch, None).unwrap();
            last_train = c;
        }
        net.set_mode(Mode::Eval);
        let (eval_c, _) = net.forward_batch(&batch, None).unwrap();
        for (a, b) in last_train.iter().zip(&eval_c) {
            assert!((a - b).abs() < 1e-3, "train {a} vs eval {b}");
        }
    }

    #[test]
    fn backward_zero_upstream() {
        let mut net = Network::init(full_csi_spec(8, true), 17);
        net.set_mode(Mode::Train);
        let x = Batch::from_rows((0..4).map(|i| vec![i as f64 * 0.1; 16]).collect());
        let w = Batch::from_rows((0..4).map(|i| vec![i as f64 * 0.2]).collect());
        let (_, cache) = net.forward_batch(&x, Some(&w)).unwrap();
        let g = net.backward(&cache, &[0.0; 4]).unwrap();
        assert!(g.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_single_dense_gradient_is_input() {
        let mut net = Network::init(tiny_dense_spec(), 19);
        net.set_mode(Mode::Eval);
        let x = Batch::from_rows(vec![vec![0.5, -2.0, 3.0]]);
        let (_, cache) = net.forward_batch(&x, None).unwrap();
        let g = net.backward(&cache, &[1.0]).unwrap();
        assert_eq!(&g.0[..3], &[0.5, -2.0, 3.0]);
        assert_eq!(g.0[3], 1.0); // bias
    }

    #[test]
    fn stale_cache_detected() {
        let mut net = Network::init(tiny_dense_spec(), 23);
        net.set_mode(Mode::Eval);
        let x = Batch::from_rows(vec![vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 0.0]]);
        let (_, cache) = net.forward_batch(&x, None).unwrap();
        assert!(matches!(
            net.backward(&cache, &[1.0]),
            Err(NetError::StaleCache)
        ));
    }

    /// Central finite differences of `sum_s upstream[s] * c_s` over every
    /// parameter; the independent oracle for the hand-derived backward.
    pub fn finite_difference_gradient(
        net: &mut Network,
        x: &Batch,
        w: Option<&Batch>,
        upstream: &[f64],
        step: f64,
    ) -> Vec<f64> {
        let mut grad = vec![0.0; net.params.len()];
        for i in 0..net.params.len() {
            let orig = net.params[i];
            net.params[i] = orig + step;
            let (cp, _) = net.forward_batch(x, w).unwrap();
            net.params[i] = orig - step;
            let (cm, _) = net.forward_batch(x, w).unwrap();
            net.params[i] = orig;
            let lp: f64 = cp.iter().zip(upstream).map(|(c, u)| c * u).sum();
            let lm: f64 = cm.iter().zip(upstream).map(|(c, u)| c * u).sum();
            grad[i] = (lp - lm) / (2.0 * step);
        }
        grad
    }

    fn random_spec(rng: &mut impl rand::Rng) -> (NetSpec, bool) {
        // up to 4 layers mixing every kind, sometimes with the weight branch
        let use_conv = rng.gen_bool(0.5);
        let pf = rng.gen_bool(0.4);
        if use_conv {
            let n = 6 + rng.gen_range(0..3) * 2;
            let trunk = vec![LayerKind::Conv1d { in_ch: 1, out_ch: 3, kernel: 3 }];
            let flat = 3 * (n - 2);
            let wbw = if pf { 4 } else { 0 };
            let head = vec![
                LayerKind::Dense { inp: flat + wbw, out: 5 },
                LayerKind::BatchNorm { width: 5 },
                LayerKind::Tanh,
                LayerKind::Dense { inp: 5, out: 1 },
            ];
            (
                NetSpec {
                    input_len: n,
                    trunk,
                    weight_branch: pf
                        .then(|| vec![LayerKind::Dense { inp: 1, out: 4 }, LayerKind::Tanh]),
                    head,
                },
                pf,
            )
        } else {
            let n = rng.gen_range(2..6);
            let wbw = if pf { 4 } else { 0 };
            let head = vec![
                LayerKind::Dense { inp: n + wbw, out: 6 },
                LayerKind::BatchNorm { width: 6 },
                LayerKind::Tanh,
                LayerKind::Dense { inp: 6, out: 1 },
            ];
            (
                NetSpec {
                    input_len: n,
                    trunk: Vec::new(),
                    weight_branch: pf
                        .then(|| vec![LayerKind::Dense { inp: 1, out: 4 }, LayerKind::Tanh]),
                    head,
                },
                pf,
            )
        }
    }

    #[test]
    fn gradient_check_random_nets() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for trial in 0..30 {
            let (spec, pf) = random_spec(&mut rng);
            let mut net = Network::init(spec.clone(), 1000 + trial);
            net.set_mode(if trial % 2 == 0 { Mode::Train } else { Mode::Eval });
            let bsz = 4;
            let x = Batch::from_rows(
                (0..bsz)
                    .map(|_| (0..spec.input_len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
                    .collect(),
            );
            let w = pf.then(|| {
                Batch::from_rows((0..bsz).map(|_| vec![rng.gen::<f64>()]).collect())
            });
            let upstream: Vec<f64> = (0..bsz).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let (_, cache) = net.forward_batch(&x, w.as_ref()).unwrap();
            let g = net.backward(&cache, &upstream).unwrap();
            let fd = finite_difference_gradient(&mut net, &x, w.as_ref(), &upstream, 1e-5);
            for (i, (a, b)) in g.0.iter().zip(&fd).enumerate() {
                let denom = a.abs().max(b.abs()).max(1e-3);
                assert!(
                    (a - b).abs() / denom <= 1e-6,
                    "trial {trial} param {i}: backward {a} vs fd {b}"
                );
            }
        }
    }

    #[test]
    fn sgd_step_roundtrip() {
        let mut net = Network::init(tiny_dense_spec(), 5);
        let orig = net.params.clone();
        let g = Gradient(vec![2.0, -1.0, 0.5, 3.0]);
        sgd_step(&mut net.params, &g, 0.1, Direction::Descend);
        assert!((net.params[0] - (orig[0] - 0.2)).abs() < 1e-15);
        sgd_step(&mut net.params, &g, 0.1, Direction::Ascend);
        for (a, b) in net.params.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn tanh_final_score_bounded() {
        let spec = NetSpec {
            input_len: 3,
            trunk: Vec::new(),
            weight_branch: None,
            head: vec![LayerKind::Dense { inp: 3, out: 1 }, LayerKind::Tanh],
        };
        let mut net = Network::init(spec, 41);
        for p in &mut net.params {
            *p *= 100.0;
        }
        net.set_mode(Mode::Eval);
        let c = net.forward(&[10.0, -5.0, 20.0], None).unwrap();
        assert!(c.abs() <= 1.0);
    }

    #[test]
    fn checkpoint_bit_exact_roundtrip() {
        let mut net = Network::init(full_csi_spec(8, true), 43);
        net.set_mode(Mode::Train);
        let x = Batch::from_rows((0..4).map(|i| vec![0.1 * i as f64; 16]).collect());
        let w = Batch::from_rows((0..4).map(|i| vec![0.25 * i as f64]).collect());
        let _ = net.forward_batch(&x, Some(&w)).unwrap();
        let meta = CheckpointMeta {
            input_mode: 0,
            pf_aware: true,
            method: 1,
            feature_scale: 0.731,
            n_antennas: 8,
            gamma: 10.0,
            lambda: 0.42,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.snck");
        write_checkpoint(&path, &net, &meta).unwrap();
        let (mut net2, meta2) = read_checkpoint(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(net.spec, net2.spec);
        assert_eq!(net.params, net2.params);
        assert_eq!(net.running, net2.running);
        net.set_mode(Mode::Eval);
        net2.set_mode(Mode::Eval);
        let xi: Vec<f64> = (0..16).map(|i| (i as f64).cos()).collect();
        let a = net.forward(&xi, Some(0.5)).unwrap();
        let b = net2.forward(&xi, Some(0.5)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
