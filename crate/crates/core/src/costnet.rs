//! Convolutional cost encoder with hand-written backward passes.
//!
//! Layout (channels in parentheses):
//!
//! ```text
//! input (K+1) -> conv3x3 (32) -> affine -> relu -> maxpool 2x2, keep switches
//!             -> conv3x3 (64) -> affine -> relu -> unpool with the switches
//!             -> conv3x3 (32) -> affine -> relu -> conv1x1 (1) + bias -> relu
//! ```
//!
//! Unpooling channel `c` reuses the switches of pooled channel `c % 32`.
//! Everything is `f64` so gradient checks are meaningful.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const WIDTH1: usize = 32;
pub const WIDTH2: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Padding {
    #[default]
    Zero,
    /// Wrap-around borders; only useful for equivariance checks.
    Toroidal,
}

/// One named parameter array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamArray {
    fn zeros(name: &str, shape: &[usize]) -> Self {
        Self { name: name.to_string(), shape: shape.to_vec(), values: vec![0.0; shape.iter().product()] }
    }
}

/// Ordered collection of parameter arrays; gradients use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub arrays: Vec<ParamArray>,
}

impl ParamSet {
    pub fn zeros_like(&self) -> Self {
        Self {
            arrays: self
                .arrays
                .iter()
                .map(|a| ParamArray { name: a.name.clone(), shape: a.shape.clone(), values: vec![0.0; a.values.len()] })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.arrays.iter().map(|a| a.values.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.arrays.iter().flat_map(|a| a.values.iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::ShapeMismatch { expected: format!("{} values", self.len()), got: format!("{}", flat.len()) });
        }
        let mut off = 0;
        for a in &mut self.arrays {
            let n = a.values.len();
            a.values.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Array index and offset of a flat coordinate.
    pub fn locate(&self, mut flat: usize) -> Option<(usize, usize)> {
        for (i, a) in self.arrays.iter().enumerate() {
            if flat < a.values.len() {
                return Some((i, flat));
            }
            flat -= a.values.len();
        }
        None
    }

    pub fn get_flat(&self, flat: usize) -> f64 {
        let (a, i) = self.locate(flat).expect("flat index in range");
        self.arrays[a].values[i]
    }

    pub fn set_flat(&mut self, flat: usize, v: f64) {
        let (a, i) = self.locate(flat).expect("flat index in range");
        self.arrays[a].values[i] = v;
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            for (x, y) in a.values.iter_mut().zip(&b.values) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.arrays {
            a.values.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn fill(&mut self, v: f64) {
        for a in &mut self.arrays {
            a.values.iter_mut().for_each(|x| *x = v);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.iter().all(|a| a.values.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.arrays.iter().flat_map(|a| a.values.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }

    fn same_layout(&self, other: &ParamSet) -> bool {
        self.arrays.len() == other.arrays.len()
            && self.arrays.iter().zip(&other.arrays).all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }
}

/// Per-cell cost output plus whatever the producing model needs for backward.
#[derive(Debug, Clone)]
pub struct CostField {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    cache: Option<Cache>,
}

impl CostField {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Drop the cached intermediates.
    pub fn detach(mut self) -> Self {
        self.cache = None;
        self
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

#[derive(Debug, Clone)]
enum Cache {
    Encoder(Box<EncoderCache>),
    Linear(Tensor),
}

#[derive(Debug, Clone)]
struct EncoderCache {
    input: Tensor,
    z1: Vec<f64>,
    r1: Vec<f64>,
    switches: Vec<u32>,
    p1: Vec<f64>,
    z2: Vec<f64>,
    r2: Vec<f64>,
    z3: Vec<f64>,
    r3: Vec<f64>,
    z4: Vec<f64>,
}

/// Anything that maps a posterior tensor to a cost field and back.
pub trait CostModel {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn forward(&self, input: &Tensor) -> Result<CostField>;
    /// Gradients of `sum_j upstream_j * C(j)` with respect to the parameters
    /// and the input.
    fn backward(&self, field: &CostField, upstream: &[(usize, f64)]) -> Result<(ParamSet, Tensor)>;
}

const CONV1: usize = 0;
const SCALE1: usize = 1;
const SHIFT1: usize = 2;
const CONV2: usize = 3;
const SCALE2: usize = 4;
const SHIFT2: usize = 5;
const CONV3: usize = 6;
const SCALE3: usize = 7;
const SHIFT3: usize = 8;
const HEAD: usize = 9;
const HEAD_BIAS: usize = 10;

/// The encoder-decoder cost network.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEncoder {
    pub params: ParamSet,
    pub padding: Padding,
    pub in_channels: usize,
    pub seed: u64,
}

impl CostEncoder {
    fn layout(in_channels: usize) -> ParamSet {
        ParamSet {
            arrays: vec![
                ParamArray::zeros("conv1", &[WIDTH1, in_channels, 3, 3]),
                ParamArray::zeros("scale1", &[WIDTH1]),
                ParamArray::zeros("shift1", &[WIDTH1]),
                ParamArray::zeros("conv2", &[WIDTH2, WIDTH1, 3, 3]),
                ParamArray::zeros("scale2", &[WIDTH2]),
                ParamArray::zeros("shift2", &[WIDTH2]),
                ParamArray::zeros("conv3", &[WIDTH1, WIDTH2, 3, 3]),
                ParamArray::zeros("scale3", &[WIDTH1]),
                ParamArray::zeros("shift3", &[WIDTH1]),
                ParamArray::zeros("head", &[1, WIDTH1, 1, 1]),
                ParamArray::zeros("head_bias", &[1]),
            ],
        }
    }

    /// All parameters zero.
    pub fn zeros(in_channels: usize) -> Self {
        Self { params: Self::layout(in_channels), padding: Padding::Zero, in_channels, seed: 0 }
    }

    /// Uniform(-a, a) conv weights with `a = sqrt(1 / fan_in)`, unit affine
    /// scales, and a head bias of one so the initial field is positive.
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut net = Self::zeros(in_channels);
        net.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in [CONV1, CONV2, CONV3, HEAD] {
            let arr = &mut net.params.arrays[i];
            let fan_in: usize = arr.shape[1..].iter().product();
            let a = (1.0 / fan_in as f64).sqrt();
            for v in &mut arr.values {
                *v = rng.gen_range(-a..a);
            }
        }
        for i in [SCALE1, SCALE2, SCALE3] {
            net.params.arrays[i].values.fill(1.0);
        }
        net.params.arrays[HEAD_BIAS].values[0] = 1.0;
        net
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    fn p(&self, i: usize) -> &[f64] {
        &self.params.arrays[i].values
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let (c, h, w) = input.shape();
        if c != self.in_channels || h < 4 || w < 4 || h % 2 != 0 || w % 2 != 0 || input.data.len() != c * h * w {
            return Err(Error::ShapeMismatch {
                expected: format!("{}xHxW with H, W >= 4 and even", self.in_channels),
                got: format!("{c}x{h}x{w}"),
            });
        }
        if !input.is_finite() {
            return Err(Error::NonFinite("cost encoder input".into()));
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> EncoderCheckpoint {
        EncoderCheckpoint {
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            in_channels: self.in_channels,
            padding: self.padding,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: EncoderCheckpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: ck.version, expected: CHECKPOINT_VERSION });
        }
        let layout = Self::layout(ck.in_channels);
        if !layout.same_layout(&ck.params) || ck.params.arrays.iter().any(|a| a.values.len() != a.shape.iter().product::<usize>()) {
            return Err(Error::Schema("parameter arrays do not match the encoder layout".into()));
        }
        if !ck.params.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(Self { params: ck.params, padding: ck.padding, in_channels: ck.in_channels, seed: ck.seed })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.checkpoint()).map_err(|e| Error::Schema(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: EncoderCheckpoint = serde_json::from_str(&text).map_err(|e| Error::Schema(e.to_string()))?;
        Self::from_checkpoint(ck)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderCheckpoint {
    pub version: u32,
    pub seed: u64,
    pub in_channels: usize,
    pub padding: Padding,
    pub params: ParamSet,
}

impl CostModel for CostEncoder {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, input: &Tensor) -> Result<CostField> {
        self.check_input(input)?;
        let (cin, h, w) = input.shape();
        let (hp, wp) = (h / 2, w / 2);
        let pad = self.padding;

        let z1 = conv_forward(&input.data, cin, h, w, self.p(CONV1), WIDTH1, 3, pad);
        let r1 = affine_relu(&z1, self.p(SCALE1), self.p(SHIFT1), h * w);
        let (p1, switches) = maxpool(&r1, WIDTH1, h, w);
        let z2 = conv_forward(&p1, WIDTH1, hp, wp, self.p(CONV2), WIDTH2, 3, pad);
        let r2 = affine_relu(&z2, self.p(SCALE2), self.p(SHIFT2), hp * wp);
        let z3 = unpool_conv_forward(&r2, &switches, hp, wp, self.p(CONV3), pad);
        let r3 = affine_relu(&z3, self.p(SCALE3), self.p(SHIFT3), h * w);
        let mut z4 = conv_forward(&r3, WIDTH1, h, w, self.p(HEAD), 1, 1, pad);
        let bias = self.p(HEAD_BIAS)[0];
        z4.iter_mut().for_each(|v| *v += bias);
        let values: Vec<f64> = z4.iter().map(|v| v.max(0.0)).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost field".into()));
        }
        let cache = EncoderCache { input: input.clone(), z1, r1, switches, p1, z2, r2, z3, r3, z4 };
        Ok(CostField { width: w, height: h, values, cache: Some(Cache::Encoder(Box::new(cache))) })
    }

    fn backward(&self, field: &CostField, upstream: &[(usize, f64)]) -> Result<(ParamSet, Tensor)> {
        let Some(Cache::Encoder(c)) = &field.cache else { return Err(Error::NoForwardCache) };
        let (cin, h, w) = c.input.shape();
        let (hp, wp) = (h / 2, w / 2);
        let pad = self.padding;
        let hw = h * w;
        let mut grads = self.params.zeros_like();

        let mut dz4 = vec![0.0; hw];
        for &(j, g) in upstream {
            if j >= hw {
                return Err(Error::invalid(format!("upstream cell {j} outside the {w}x{h} grid")));
            }
            if c.z4[j] > 0.0 {
                dz4[j] += g;
            }
        }
        grads.arrays[HEAD_BIAS].values[0] = dz4.iter().sum();
        let mut dr3 = vec![0.0; WIDTH1 * hw];
        conv_backward(&c.r3, WIDTH1, h, w, self.p(HEAD), 1, 1, pad, &dz4, &mut grads.arrays[HEAD].values, Some(&mut dr3));

        let dz3 = affine_relu_backward(&dr3, &c.z3, &c.r3, self.p(SCALE3), hw, &mut grads.arrays, SCALE3, SHIFT3);
        let dr2 = unpool_conv_backward(&c.r2, &c.switches, hp, wp, self.p(CONV3), pad, &dz3, &mut grads.arrays[CONV3].values);
        let dz2 = affine_relu_backward(&dr2, &c.z2, &c.r2, self.p(SCALE2), hp * wp, &mut grads.arrays, SCALE2, SHIFT2);
        let mut dp1 = vec![0.0; WIDTH1 * hp * wp];
        conv_backward(&c.p1, WIDTH1, hp, wp, self.p(CONV2), WIDTH2, 3, pad, &dz2, &mut grads.arrays[CONV2].values, Some(&mut dp1));

        let mut dr1 = vec![0.0; WIDTH1 * hw];
        for ch in 0..WIDTH1 {
            for q in 0..hp * wp {
                let s = c.switches[ch * hp * wp + q] as usize;
                dr1[ch * hw + s] += dp1[ch * hp * wp + q];
            }
        }
        let dz1 = affine_relu_backward(&dr1, &c.z1, &c.r1, self.p(SCALE1), hw, &mut grads.arrays, SCALE1, SHIFT1);
        let mut din = Tensor::zeros(cin, h, w);
        conv_backward(&c.input.data, cin, h, w, self.p(CONV1), WIDTH1, 3, pad, &dz1, &mut grads.arrays[CONV1].values, Some(&mut din.data));
        Ok((grads, din))
    }
}

/// `C = W x + b` per cell with no nonlinearity. Used as a reference model.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCost {
    pub params: ParamSet,
}

impl LinearCost {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = ParamArray::zeros("weight", &[in_channels]);
        w.values.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let mut b = ParamArray::zeros("bias", &[1]);
        b.values[0] = rng.gen_range(-1.0..1.0);
        Self { params: ParamSet { arrays: vec![w, b] } }
    }
}

impl CostModel for LinearCost {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, input: &Tensor) -> Result<CostField> {
        let (c, h, w) = input.shape();
        if c != self.params.arrays[0].values.len() {
            return Err(Error::ShapeMismatch { expected: format!("{} channels", self.params.arrays[0].values.len()), got: c.to_string() });
        }
        let mut values = vec![self.params.arrays[1].values[0]; h * w];
        for (ch, wt) in self.params.arrays[0].values.iter().enumerate() {
            for (v, x) in values.iter_mut().zip(input.channel(ch)) {
                *v += wt * x;
            }
        }
        Ok(CostField { width: w, height: h, values, cache: Some(Cache::Linear(input.clone())) })
    }

    fn backward(&self, field: &CostField, upstream: &[(usize, f64)]) -> Result<(ParamSet, Tensor)> {
        let Some(Cache::Linear(input)) = &field.cache else { return Err(Error::NoForwardCache) };
        let mut grads = self.params.zeros_like();
        let mut din = Tensor::zeros(input.channels, input.height, input.width);
        let hw = input.plane();
        for &(j, g) in upstream {
            if j >= hw {
                return Err(Error::invalid(format!("upstream cell {j} outside the grid")));
            }
            grads.arrays[1].values[0] += g;
            for ch in 0..input.channels {
                grads.arrays[0].values[ch] += g * input.data[ch * hw + j];
                din.data[ch * hw + j] += g * self.params.arrays[0].values[ch];
            }
        }
        Ok((grads, din))
    }
}

/// Contiguous runs `(out_offset, in_offset, len)` pairing output cells with
/// input cells displaced by `(dy, dx)`.
fn runs(h: usize, w: usize, dy: isize, dx: isize, pad: Padding) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::with_capacity(2 * h);
    for y in 0..h {
        let sy = y as isize + dy;
        match pad {
            Padding::Zero => {
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize);
                if x1 as usize <= x0 {
                    continue;
                }
                let sx0 = (x0 as isize + dx) as usize;
                out.push((y * w + x0, sy as usize * w + sx0, x1 as usize - x0));
            }
            Padding::Toroidal => {
                let sy = sy.rem_euclid(h as isize) as usize;
                let d = dx.rem_euclid(w as isize) as usize;
                out.push((y * w, sy * w + d, w - d));
                if d > 0 {
                    out.push((y * w + w - d, sy * w, d));
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(input: &[f64], cin: usize, h: usize, w: usize, weight: &[f64], cout: usize, k: usize, pad: Padding) -> Vec<f64> {
    let hw = h * w;
    let r = (k / 2) as isize;
    let mut out = vec![0.0; cout * hw];
    let offsets: Vec<Vec<(usize, usize, usize)>> = (0..k * k)
        .map(|t| runs(h, w, (t / k) as isize - r, (t % k) as isize - r, pad))
        .collect();
    for co in 0..cout {
        let o = &mut out[co * hw..(co + 1) * hw];
        for ci in 0..cin {
            let inp = &input[ci * hw..(ci + 1) * hw];
            let wk = &weight[(co * cin + ci) * k * k..][..k * k];
            for (t, segs) in offsets.iter().enumerate() {
                let wv = wk[t];
                if wv == 0.0 {
                    continue;
                }
                for &(oo, io, len) in segs {
                    for (a, b) in o[oo..oo + len].iter_mut().zip(&inp[io..io + len]) {
                        *a += wv * b;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    k: usize,
    pad: Padding,
    dout: &[f64],
    dweight: &mut [f64],
    mut dinput: Option<&mut [f64]>,
) {
    let hw = h * w;
    let r = (k / 2) as isize;
    let offsets: Vec<Vec<(usize, usize, usize)>> = (0..k * k)
        .map(|t| runs(h, w, (t / k) as isize - r, (t % k) as isize - r, pad))
        .collect();
    for co in 0..cout {
        let d = &dout[co * hw..(co + 1) * hw];
        if d.iter().all(|v| *v == 0.0) {
            continue;
        }
        for ci in 0..cin {
            let inp = &input[ci * hw..(ci + 1) * hw];
            let base = (co * cin + ci) * k * k;
            for (t, segs) in offsets.iter().enumerate() {
                let mut acc = 0.0;
                for &(oo, io, len) in segs {
                    for (a, b) in d[oo..oo + len].iter().zip(&inp[io..io + len]) {
                        acc += a * b;
                    }
                }
                dweight[base + t] += acc;
                if let Some(din) = dinput.as_deref_mut() {
                    let wv = weight[base + t];
                    if wv == 0.0 {
                        continue;
                    }
                    let di = &mut din[ci * hw..(ci + 1) * hw];
                    for &(oo, io, len) in segs {
                        for (a, b) in di[io..io + len].iter_mut().zip(&d[oo..oo + len]) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
}

fn affine_relu(z: &[f64], scale: &[f64], shift: &[f64], plane: usize) -> Vec<f64> {
    z.chunks(plane)
        .zip(scale.iter().zip(shift))
        .flat_map(|(zc, (s, b))| zc.iter().map(move |v| (s * v + b).max(0.0)))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn affine_relu_backward(
    dr: &[f64],
    z: &[f64],
    r: &[f64],
    scale: &[f64],
    plane: usize,
    grads: &mut [ParamArray],
    scale_idx: usize,
    shift_idx: usize,
) -> Vec<f64> {
    let mut dz = vec![0.0; dr.len()];
    for (ch, s) in scale.iter().enumerate() {
        let range = ch * plane..(ch + 1) * plane;
        let (mut ds, mut db) = (0.0, 0.0);
        for ((dzv, &d), (&zv, &rv)) in dz[range.clone()].iter_mut().zip(&dr[range.clone()]).zip(z[range.clone()].iter().zip(&r[range])) {
            if rv > 0.0 {
                ds += d * zv;
                db += d;
                *dzv = d * s;
            }
        }
        grads[scale_idx].values[ch] += ds;
        grads[shift_idx].values[ch] += db;
    }
    dz
}

/// 2x2 stride-2 max pooling; ties keep the first cell in row-major order.
fn maxpool(r: &[f64], ch: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let (hp, wp) = (h / 2, w / 2);
    let mut out = vec![0.0; ch * hp * wp];
    let mut sw = vec![0u32; ch * hp * wp];
    for c in 0..ch {
        let plane = &r[c * h * w..(c + 1) * h * w];
        for py in 0..hp {
            for px in 0..wp {
                let mut best = (2 * py) * w + 2 * px;
                for s in [(2 * py) * w + 2 * px + 1, (2 * py + 1) * w + 2 * px, (2 * py + 1) * w + 2 * px + 1] {
                    if plane[s] > plane[best] {
                        best = s;
                    }
                }
                out[(c * hp + py) * wp + px] = plane[best];
                sw[(c * hp + py) * wp + px] = best as u32;
            }
        }
    }
    (out, sw)
}

/// Output cell fed by input cell `s` through kernel tap `t` of a 3x3 conv.
#[inline]
fn tap_target(s: usize, t: usize, h: usize, w: usize, pad: Padding) -> Option<usize> {
    let y = (s / w) as isize - (t / 3) as isize + 1;
    let x = (s % w) as isize - (t % 3) as isize + 1;
    match pad {
        Padding::Zero => (y >= 0 && x >= 0 && y < h as isize && x < w as isize).then(|| y as usize * w + x as usize),
        Padding::Toroidal => Some(y.rem_euclid(h as isize) as usize * w + x.rem_euclid(w as isize) as usize),
    }
}

/// `[co][ci][t]` to `[ci][t][co]`.
fn transpose_kernel(weight: &[f64], cout: usize, cin: usize) -> Vec<f64> {
    let mut out = vec![0.0; weight.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..9 {
                out[(ci * 9 + t) * cout + co] = weight[(co * cin + ci) * 9 + t];
            }
        }
    }
    out
}

/// Index unpooling followed by the decoder conv3x3. The unpooled map has a
/// single non-zero per 2x2 block, so the conv is computed as a scatter from
/// the pooled cells. Returns the channel-major conv output.
fn unpool_conv_forward(r2: &[f64], switches: &[u32], hp: usize, wp: usize, weight: &[f64], pad: Padding) -> Vec<f64> {
    let (h, w, q) = (2 * hp, 2 * wp, hp * wp);
    let wt = transpose_kernel(weight, WIDTH1, WIDTH2);
    let mut acc = vec![0.0; h * w * WIDTH1];
    for ci in 0..WIDTH2 {
        let sw = &switches[(ci % WIDTH1) * q..][..q];
        for (i, &s) in sw.iter().enumerate() {
            let val = r2[ci * q + i];
            if val == 0.0 {
                continue;
            }
            for t in 0..9 {
                let Some(pos) = tap_target(s as usize, t, h, w, pad) else { continue };
                let wrow = &wt[(ci * 9 + t) * WIDTH1..][..WIDTH1];
                for (a, b) in acc[pos * WIDTH1..][..WIDTH1].iter_mut().zip(wrow) {
                    *a += val * b;
                }
            }
        }
    }
    let mut out = vec![0.0; WIDTH1 * h * w];
    for pos in 0..h * w {
        for co in 0..WIDTH1 {
            out[co * h * w + pos] = acc[pos * WIDTH1 + co];
        }
    }
    out
}

/// Backward of [`unpool_conv_forward`]: accumulates the kernel gradient and
/// returns the gradient at the pooled decoder activations. Entries where the
/// activation is zero are left at zero since the ReLU gate drops them anyway.
#[allow(clippy::too_many_arguments)]
fn unpool_conv_backward(
    r2: &[f64],
    switches: &[u32],
    hp: usize,
    wp: usize,
    weight: &[f64],
    pad: Padding,
    dz3: &[f64],
    dweight: &mut [f64],
) -> Vec<f64> {
    let (h, w, q) = (2 * hp, 2 * wp, hp * wp);
    let wt = transpose_kernel(weight, WIDTH1, WIDTH2);
    let mut dzt = vec![0.0; h * w * WIDTH1];
    for co in 0..WIDTH1 {
        for pos in 0..h * w {
            dzt[pos * WIDTH1 + co] = dz3[co * h * w + pos];
        }
    }
    let mut dwt = vec![0.0; wt.len()];
    let mut dr2 = vec![0.0; r2.len()];
    for ci in 0..WIDTH2 {
        let sw = &switches[(ci % WIDTH1) * q..][..q];
        for (i, &s) in sw.iter().enumerate() {
            let val = r2[ci * q + i];
            if val == 0.0 {
                continue;
            }
            let mut g = 0.0;
            for t in 0..9 {
                let Some(pos) = tap_target(s as usize, t, h, w, pad) else { continue };
                let d = &dzt[pos * WIDTH1..][..WIDTH1];
                let base = (ci * 9 + t) * WIDTH1;
                for ((dw, wv), dv) in dwt[base..base + WIDTH1].iter_mut().zip(&wt[base..base + WIDTH1]).zip(d) {
                    *dw += val * dv;
                    g += wv * dv;
                }
            }
            dr2[ci * q + i] = g;
        }
    }
    for co in 0..WIDTH1 {
        for ci in 0..WIDTH2 {
            for t in 0..9 {
                dweight[(co * WIDTH2 + ci) * 9 + t] += dwt[(ci * 9 + t) * WIDTH1 + co];
            }
        }
    }
    dr2
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    /// One update in place; increments `t` first so the first call uses t = 1.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", self.m.len()),
                got: format!("{} params / {} grads", params.len(), grads.len()),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i}")));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub trials: usize,
    pub max_rel_error: f64,
    /// `(array name, offset)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub tol: f64,
    pub passed: bool,
}

pub const GRAD_CHECK_ABS_FLOOR: f64 = 1e-6;

/// Compare analytic and central-difference gradients of
/// `sum_j upstream_j * C(j)` on `trials` random parameter coordinates.
///
/// A coordinate's error is `|a - n| / max(|a|, |n|, floor / tol)`, so
/// differences below the absolute floor always pass.
pub fn gradient_check<M: CostModel>(
    model: &mut M,
    input: &Tensor,
    upstream: &[(usize, f64)],
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let field = model.forward(input)?;
    let (grads, _) = model.backward(&field, upstream)?;
    let loss = |m: &M| -> Result<f64> {
        let f = m.forward(input)?;
        Ok(upstream.iter().map(|&(j, g)| g * f.values[j]).sum())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.params().len();
    let mut report = GradCheckReport { trials, max_rel_error: 0.0, worst: None, tol, passed: true };
    for _ in 0..trials {
        let i = rng.gen_range(0..n);
        let orig = model.params().get_flat(i);
        let step = 1e-5 * orig.abs().max(1.0);
        model.params_mut().set_flat(i, orig + step);
        let up = loss(model)?;
        model.params_mut().set_flat(i, orig - step);
        let down = loss(model)?;
        model.params_mut().set_flat(i, orig);
        let numeric = (up - down) / (2.0 * step);
        let analytic = grads.get_flat(i);
        let denom = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_ABS_FLOOR / tol);
        let err = (analytic - numeric).abs() / denom;
        if err > report.max_rel_error || report.worst.is_none() {
            let (a, off) = model.params().locate(i).expect("index in range");
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((model.params().arrays[a].name.clone(), off));
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
