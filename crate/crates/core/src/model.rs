//! Reference encoder–decoder segmentation network with hand-written
//! reverse-mode gradients.
//!
//! ```text
//! x ─ enc1 (s2, relu) ─ e1 ─ enc2 (s2, relu) ─ e2 ─ bottleneck (relu) ─(+e2)─ b
//! b ─ up ─ dec1 (relu) ─(+e1)─ d1 ─ up ─ dec2 (relu) ─ d2 ─ features ─ f_D ─ head (1x1) ─ p
//! ```
//!
//! Input planes are the three colour channels scaled to [0, 1] followed by a
//! one-hot class plane per class, so a single network serves every
//! partially-labelled class. `f_D` is the linear output of the last decoder
//! layer; `c` is the foreground softmax of `p`.

use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{softmax_foreground, FeatureMap, Logits, PixelGrid, RgbImage, Size};
use crate::rng;

pub const DOWNSAMPLE: usize = 4;
pub const KERNEL: usize = 3;
pub const DEFAULT_CHANNELS: usize = 16;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

const MAGIC: &[u8; 4] = b"CASC";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub in_channels: usize,
    pub channels: usize,
    pub class_count: usize,
    pub kernel: usize,
}

impl Architecture {
    pub fn new(channels: usize, class_count: usize) -> Self {
        Self {
            in_channels: 3 + class_count,
            channels,
            class_count,
            kernel: KERNEL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    velocity: Vec<f64>,
}

impl Param {
    fn new(name: &str, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.to_string(),
            shape,
            value: vec![0.0; n],
            grad: vec![0.0; n],
            velocity: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    weight: usize,
    bias: usize,
}

impl Conv {
    fn pad(&self) -> usize {
        self.k / 2
    }
}

#[derive(Debug, Clone, Copy)]
struct Layers {
    enc1: Conv,
    enc2: Conv,
    bottleneck: Conv,
    dec1: Conv,
    dec2: Conv,
    features: Conv,
    head: Conv,
}

/// Model outputs for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutputs {
    pub logits: Logits,
    pub features: FeatureMap,
    pub confidence: PixelGrid,
}

/// Intermediates retained for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    input: FeatureMap,
    e1: FeatureMap,
    e2: FeatureMap,
    r: FeatureMap,
    up_b: FeatureMap,
    d1r: FeatureMap,
    up_d1: FeatureMap,
    d2: FeatureMap,
    features: FeatureMap,
}

#[derive(Debug, Clone)]
pub struct ModelState {
    arch: Architecture,
    params: Vec<Param>,
    layers: Layers,
    trace: Option<Trace>,
}

impl ModelState {
    /// Seeded He-normal initialisation for the rectified layers, fan-in
    /// scaled normal for the linear feature and head layers; zero biases.
    pub fn init(seed: u64, channels: usize, class_count: usize) -> Result<Self> {
        if channels < 2 {
            return Err(Error::InvalidArgument(format!("channels {channels} < 2")));
        }
        if class_count == 0 {
            return Err(Error::InvalidArgument("class_count must be positive".into()));
        }
        let mut state = Self::zeroed(Architecture::new(channels, class_count));
        let mut r = rng::seeded(seed);
        let specs = state.layer_list();
        for (conv, gain) in specs {
            let fan_in = (conv.cin * conv.k * conv.k) as f64;
            let std = (gain / fan_in).sqrt();
            for w in state.params[conv.weight].value.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut r);
                *w = z * std;
            }
        }
        Ok(state)
    }

    /// All parameters zero.
    pub fn zeroed(arch: Architecture) -> Self {
        let ch = arch.channels;
        let mut params = Vec::new();
        let mut conv = |name: &str, cin: usize, cout: usize, k: usize, stride: usize| {
            let weight = params.len();
            params.push(Param::new(&format!("{name}.weight"), vec![cout, cin, k, k]));
            params.push(Param::new(&format!("{name}.bias"), vec![cout]));
            Conv {
                cin,
                cout,
                k,
                stride,
                weight,
                bias: weight + 1,
            }
        };
        let k = arch.kernel;
        let layers = Layers {
            enc1: conv("enc1", arch.in_channels, ch, k, 2),
            enc2: conv("enc2", ch, 2 * ch, k, 2),
            bottleneck: conv("bottleneck", 2 * ch, 2 * ch, k, 1),
            dec1: conv("dec1", 2 * ch, ch, k, 1),
            dec2: conv("dec2", ch, ch, k, 1),
            features: conv("features", ch, ch, k, 1),
            head: conv("head", ch, 2, 1, 1),
        };
        Self {
            arch,
            params,
            layers,
            trace: None,
        }
    }

    fn layer_list(&self) -> [(Conv, f64); 7] {
        let l = self.layers;
        [
            (l.enc1, 2.0),
            (l.enc2, 2.0),
            (l.bottleneck, 2.0),
            (l.dec1, 2.0),
            (l.dec2, 2.0),
            (l.features, 1.0),
            (l.head, 1.0),
        ]
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in &p.value {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn quantize_f32(&mut self) {
        for p in &mut self.params {
            for v in &mut p.value {
                *v = f64::from(*v as f32);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    fn check_input(&self, input: &FeatureMap) -> Result<()> {
        if input.channels() != self.arch.in_channels {
            return Err(Error::shape(
                "model input channels",
                input.channels(),
                self.arch.in_channels,
            ));
        }
        let Size { width, height } = input.size();
        if width % DOWNSAMPLE != 0 || height % DOWNSAMPLE != 0 {
            return Err(Error::BadSpatialSize {
                width,
                height,
                factor: DOWNSAMPLE,
            });
        }
        Ok(())
    }

    /// Inference-only forward pass.
    pub fn forward(&self, input: &FeatureMap) -> Result<ForwardOutputs> {
        self.forward_traced(input).map(|(out, _)| out)
    }

    /// Forward pass that also returns the intermediates for
    /// [`ModelState::accumulate_gradients`].
    pub fn forward_traced(&self, input: &FeatureMap) -> Result<(ForwardOutputs, Trace)> {
        self.check_input(input)?;
        let l = &self.layers;
        let e1 = relu(self.conv(&l.enc1, input));
        let e2 = relu(self.conv(&l.enc2, &e1));
        let r = relu(self.conv(&l.bottleneck, &e2));
        let b = add(&r, &e2);
        let up_b = upsample2(&b);
        let d1r = relu(self.conv(&l.dec1, &up_b));
        let d1 = add(&d1r, &e1);
        let up_d1 = upsample2(&d1);
        let d2 = relu(self.conv(&l.dec2, &up_d1));
        let features = self.conv(&l.features, &d2);
        let p = self.conv(&l.head, &features);
        let Size { width, height } = p.size();
        let logits = Logits::new(width, height, p.plane(0).to_vec(), p.plane(1).to_vec())?;
        let confidence = softmax_foreground(&logits)?;
        let out = ForwardOutputs {
            logits,
            features: features.clone(),
            confidence,
        };
        let trace = Trace {
            input: input.clone(),
            e1,
            e2,
            r,
            up_b,
            d1r,
            up_d1,
            d2,
            features,
        };
        Ok((out, trace))
    }

    /// Forward pass that keeps its trace inside the state for [`ModelState::backward`].
    pub fn forward_cached(&mut self, input: &FeatureMap) -> Result<ForwardOutputs> {
        let (out, trace) = self.forward_traced(input)?;
        self.trace = Some(trace);
        Ok(out)
    }

    /// Consumes the cached trace and accumulates parameter gradients.
    pub fn backward(&mut self, grad_logits: &Logits, grad_features: &FeatureMap) -> Result<()> {
        let trace = self.trace.take().ok_or(Error::BackwardWithoutForward)?;
        self.accumulate_gradients(&trace, grad_logits, grad_features)
    }

    /// Adds `∂L/∂θ` into the gradient buffers given upstream gradients on
    /// the logits and on `f_D`.
    pub fn accumulate_gradients(
        &mut self,
        trace: &Trace,
        grad_logits: &Logits,
        grad_features: &FeatureMap,
    ) -> Result<()> {
        let size = trace.features.size();
        if grad_logits.size() != size || grad_features.size() != size {
            return Err(Error::shape("upstream gradients", grad_logits.size(), size));
        }
        if grad_features.channels() != self.arch.channels {
            return Err(Error::shape(
                "feature gradient channels",
                grad_features.channels(),
                self.arch.channels,
            ));
        }
        let l = self.layers;
        let mut dp = FeatureMap::zeros(2, size.width, size.height);
        dp.plane_mut(0).copy_from_slice(grad_logits.background());
        dp.plane_mut(1).copy_from_slice(grad_logits.foreground());

        let mut d_features = self.conv_backward(&l.head, &trace.features, &dp, true);
        add_assign(&mut d_features, grad_features);
        let mut d_d2 = self.conv_backward(&l.features, &trace.d2, &d_features, true);
        relu_mask(&mut d_d2, &trace.d2);
        let d_up_d1 = self.conv_backward(&l.dec2, &trace.up_d1, &d_d2, true);
        let d_d1 = downsample_sum2(&d_up_d1);

        let mut d_d1r = d_d1.clone();
        relu_mask(&mut d_d1r, &trace.d1r);
        let mut d_e1 = d_d1;
        let d_up_b = self.conv_backward(&l.dec1, &trace.up_b, &d_d1r, true);
        let d_b = downsample_sum2(&d_up_b);

        let mut d_r = d_b.clone();
        relu_mask(&mut d_r, &trace.r);
        let mut d_e2 = d_b;
        let from_bottleneck = self.conv_backward(&l.bottleneck, &trace.e2, &d_r, true);
        add_assign(&mut d_e2, &from_bottleneck);
        relu_mask(&mut d_e2, &trace.e2);
        let from_enc2 = self.conv_backward(&l.enc2, &trace.e1, &d_e2, true);
        add_assign(&mut d_e1, &from_enc2);
        relu_mask(&mut d_e1, &trace.e1);
        self.conv_backward(&l.enc1, &trace.input, &d_e1, false);
        Ok(())
    }

    /// `θ ← θ - lr·v` with `v ← momentum·v + ∂L/∂θ`; gradients are cleared.
    pub fn sgd_step(&mut self, learning_rate: f64, momentum: f64) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::DivergedGradient(p.name.clone()));
        }
        for p in &mut self.params {
            for ((v, g), vel) in p.value.iter_mut().zip(&mut p.grad).zip(&mut p.velocity) {
                *vel = momentum * *vel + *g;
                *v -= learning_rate * *vel;
                *g = 0.0;
            }
        }
        Ok(())
    }

    fn conv(&self, conv: &Conv, input: &FeatureMap) -> FeatureMap {
        conv_forward(
            conv,
            &self.params[conv.weight].value,
            &self.params[conv.bias].value,
            input,
        )
    }

    /// Accumulates weight/bias gradients; returns the input gradient when asked.
    fn conv_backward(
        &mut self,
        conv: &Conv,
        input: &FeatureMap,
        grad_out: &FeatureMap,
        want_input: bool,
    ) -> FeatureMap {
        let (wi, bi) = (conv.weight, conv.bias);
        let weight = std::mem::take(&mut self.params[wi].value);
        let mut grad_w = std::mem::take(&mut self.params[wi].grad);
        let grad_in = conv_backward(conv, &weight, input, grad_out, &mut grad_w, want_input);
        for (co, g) in self.params[bi].grad.iter_mut().enumerate() {
            *g += grad_out.plane(co).iter().sum::<f64>();
        }
        self.params[wi].value = weight;
        self.params[wi].grad = grad_w;
        grad_in
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_checkpoint(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(&mut bytes.as_slice())
    }

    /// Little-endian: magic, version, architecture, parameter count, then
    /// per parameter its name, dims and `f32` values, each length-prefixed.
    pub fn write_checkpoint<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        let u32s = |out: &mut W, v: usize| out.write_all(&(v as u32).to_le_bytes());
        u32s(out, FORMAT_VERSION as usize)?;
        u32s(out, self.arch.in_channels)?;
        u32s(out, self.arch.channels)?;
        u32s(out, self.arch.class_count)?;
        u32s(out, self.arch.kernel)?;
        u32s(out, self.params.len())?;
        for p in &self.params {
            u32s(out, p.name.len())?;
            out.write_all(p.name.as_bytes())?;
            u32s(out, p.shape.len())?;
            for &d in &p.shape {
                u32s(out, d)?;
            }
            u32s(out, p.value.len())?;
            for &v in &p.value {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<Self> {
        let bad = |m: &str| Error::BadCheckpoint(m.to_string());
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("missing CASC magic"));
        }
        let read_u32 = |input: &mut R| -> Result<usize> {
            let mut b = [0u8; 4];
            input.read_exact(&mut b).map_err(|_| bad("truncated"))?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let version = read_u32(input)?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::BadCheckpoint(format!("unsupported version {version}")));
        }
        let arch = Architecture {
            in_channels: read_u32(input)?,
            channels: read_u32(input)?,
            class_count: read_u32(input)?,
            kernel: read_u32(input)?,
        };
        if arch.kernel != KERNEL || arch.in_channels != 3 + arch.class_count || arch.channels < 2 {
            return Err(bad("unsupported architecture"));
        }
        let mut state = Self::zeroed(arch);
        let count = read_u32(input)?;
        if count != state.params.len() {
            return Err(bad("parameter count mismatch"));
        }
        for p in &mut state.params {
            let name_len = read_u32(input)?;
            let mut name = vec![0u8; name_len];
            input.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
            if name != p.name.as_bytes() {
                return Err(Error::BadCheckpoint(format!(
                    "expected parameter {}, found {}",
                    p.name,
                    String::from_utf8_lossy(&name)
                )));
            }
            let ndims = read_u32(input)?;
            let dims = (0..ndims).map(|_| read_u32(input)).collect::<Result<Vec<_>>>()?;
            if dims != p.shape {
                return Err(Error::BadCheckpoint(format!("shape mismatch for {}", p.name)));
            }
            let n = read_u32(input)?;
            if n != p.value.len() {
                return Err(Error::BadCheckpoint(format!("length mismatch for {}", p.name)));
            }
            let mut buf = vec![0u8; 4 * n];
            input.read_exact(&mut buf).map_err(|_| bad("truncated values"))?;
            for (v, chunk) in p.value.iter_mut().zip(buf.chunks_exact(4)) {
                let x = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
                if !x.is_finite() {
                    return Err(Error::BadCheckpoint(format!("non-finite value in {}", p.name)));
                }
                *v = f64::from(x);
            }
        }
        Ok(state)
    }
}

/// Stacks the colour planes (scaled to [0, 1]) with one-hot class planes.
pub fn encode_input(image: &RgbImage, class_index: usize, class_count: usize) -> Result<FeatureMap> {
    if class_index >= class_count {
        return Err(Error::InvalidArgument(format!(
            "class index {class_index} >= class count {class_count}"
        )));
    }
    let Size { width, height } = image.size();
    let n = width * height;
    let mut input = FeatureMap::zeros(3 + class_count, width, height);
    for ch in 0..3 {
        let plane = input.plane_mut(ch);
        for (i, px) in plane.iter_mut().enumerate() {
            *px = f64::from(image.data()[3 * i + ch]) / 255.0;
        }
    }
    input.plane_mut(3 + class_index)[..n].fill(1.0);
    Ok(input)
}

fn conv_forward(conv: &Conv, weight: &[f64], bias: &[f64], input: &FeatureMap) -> FeatureMap {
    let Size { width: wi, height: hi } = input.size();
    let (s, k, pad) = (conv.stride, conv.k, conv.pad());
    let (wo, ho) = (wi / s, hi / s);
    let mut out = FeatureMap::zeros(conv.cout, wo, ho);
    for co in 0..conv.cout {
        let plane = out.plane_mut(co);
        plane.fill(bias[co]);
        for ci in 0..conv.cin {
            let src = input.plane(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let w = weight[((co * conv.cin + ci) * k + ky) * k + kx];
                    let (x0, x1) = valid_range(wo, wi, s, kx, pad);
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= hi {
                            continue;
                        }
                        let row = &src[iy as usize * wi..(iy as usize + 1) * wi];
                        let dst = &mut plane[oy * wo..(oy + 1) * wo];
                        if s == 1 {
                            let off = kx as isize - pad as isize;
                            let srow = &row[(x0 as isize + off) as usize..(x1 as isize + off) as usize];
                            for (d, &v) in dst[x0..x1].iter_mut().zip(srow) {
                                *d += w * v;
                            }
                        } else {
                            for ox in x0..x1 {
                                dst[ox] += w * row[ox * s + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    conv: &Conv,
    weight: &[f64],
    input: &FeatureMap,
    grad_out: &FeatureMap,
    grad_w: &mut [f64],
    want_input: bool,
) -> FeatureMap {
    let Size { width: wi, height: hi } = input.size();
    let (s, k, pad) = (conv.stride, conv.k, conv.pad());
    let (wo, ho) = (grad_out.width(), grad_out.height());
    let mut grad_in = FeatureMap::zeros(conv.cin, wi, hi);
    for co in 0..conv.cout {
        let gplane = grad_out.plane(co);
        for ci in 0..conv.cin {
            let src = input.plane(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((co * conv.cin + ci) * k + ky) * k + kx;
                    let w = weight[widx];
                    let (x0, x1) = valid_range(wo, wi, s, kx, pad);
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= hi {
                            continue;
                        }
                        let iy = iy as usize;
                        let grow = &gplane[oy * wo..(oy + 1) * wo];
                        let row = &src[iy * wi..(iy + 1) * wi];
                        if s == 1 {
                            let off = kx as isize - pad as isize;
                            let lo = (x0 as isize + off) as usize;
                            let hi_x = (x1 as isize + off) as usize;
                            for (&g, &v) in grow[x0..x1].iter().zip(&row[lo..hi_x]) {
                                acc += g * v;
                            }
                            if want_input {
                                let drow = &mut grad_in.plane_mut(ci)[iy * wi..(iy + 1) * wi];
                                for (d, &g) in drow[lo..hi_x].iter_mut().zip(&grow[x0..x1]) {
                                    *d += w * g;
                                }
                            }
                        } else {
                            for ox in x0..x1 {
                                acc += grow[ox] * row[ox * s + kx - pad];
                            }
                            if want_input {
                                let drow = &mut grad_in.plane_mut(ci)[iy * wi..(iy + 1) * wi];
                                for ox in x0..x1 {
                                    drow[ox * s + kx - pad] += w * grow[ox];
                                }
                            }
                        }
                    }
                    grad_w[widx] += acc;
                }
            }
        }
    }
    grad_in
}

/// Output columns whose input column `ox * s + kx - pad` lies inside `0..wi`.
fn valid_range(wo: usize, wi: usize, s: usize, kx: usize, pad: usize) -> (usize, usize) {
    let x0 = if kx >= pad { 0 } else { (pad - kx).div_ceil(s) };
    let mut x1 = wo;
    while x1 > x0 && (x1 - 1) * s + kx >= wi + pad {
        x1 -= 1;
    }
    (x0, x1)
}

fn relu(mut m: FeatureMap) -> FeatureMap {
    for v in m.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    m
}

/// Zeroes gradient entries whose rectified activation was not positive.
fn relu_mask(grad: &mut FeatureMap, activation: &FeatureMap) {
    for (g, &a) in grad.as_mut_slice().iter_mut().zip(activation.as_slice()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

fn add(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    let mut out = a.clone();
    add_assign(&mut out, b);
    out
}

fn add_assign(a: &mut FeatureMap, b: &FeatureMap) {
    for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *x += y;
    }
}

/// Nearest-neighbour 2x upsampling.
fn upsample2(m: &FeatureMap) -> FeatureMap {
    let Size { width, height } = m.size();
    let (w2, h2) = (2 * width, 2 * height);
    let mut out = FeatureMap::zeros(m.channels(), w2, h2);
    for ch in 0..m.channels() {
        let src = m.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h2 {
            for x in 0..w2 {
                dst[y * w2 + x] = src[(y / 2) * width + x / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
fn downsample_sum2(m: &FeatureMap) -> FeatureMap {
    let Size { width, height } = m.size();
    let (w2, h2) = (width / 2, height / 2);
    let mut out = FeatureMap::zeros(m.channels(), w2, h2);
    for ch in 0..m.channels() {
        let src = m.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..height {
            for x in 0..width {
                dst[(y / 2) * w2 + x / 2] += src[y * width + x];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(seed: u64, w: usize, h: usize, classes: usize) -> FeatureMap {
        let mut r = rng::seeded(seed);
        let vals = (0..(3 + classes) * w * h).map(|_| rng::unit(&mut r)).collect();
        FeatureMap::from_vec(3 + classes, w, h, vals).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelState::init(11, 4, 4).unwrap();
        let b = ModelState::init(11, 4, 4).unwrap();
        let c = ModelState::init(12, 4, 4).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
        assert_eq!(a.params()[0].shape, vec![4, 7, 3, 3]);
        assert!(a.params().iter().filter(|p| p.name.ends_with("bias")).all(|p| p.value.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn init_rejects_single_channel() {
        assert!(ModelState::init(0, 1, 4).is_err());
    }

    #[test]
    fn forward_shapes() {
        let m = ModelState::init(1, 16, 4).unwrap();
        let out = m.forward(&input(2, 64, 64, 4)).unwrap();
        assert_eq!(out.logits.size(), Size::new(64, 64));
        assert_eq!(out.features.channels(), 16);
        assert_eq!(out.features.size(), Size::new(64, 64));
        assert!(out.confidence.as_slice().iter().all(|&c| c > 0.0 && c < 1.0));
    }

    #[test]
    fn zero_model_is_undecided() {
        let m = ModelState::zeroed(Architecture::new(4, 2));
        let out = m.forward(&input(3, 8, 8, 2)).unwrap();
        assert!(out.logits.foreground().iter().all(|&v| v == 0.0));
        assert!(out.confidence.as_slice().iter().all(|&c| c == 0.5));
    }

    #[test]
    fn forward_is_deterministic() {
        let m = ModelState::init(5, 4, 4).unwrap();
        let x = input(6, 16, 16, 4);
        assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
    }

    #[test]
    fn bad_spatial_size_is_reported() {
        let m = ModelState::init(5, 4, 4).unwrap();
        let err = m.forward(&input(6, 18, 16, 4)).unwrap_err();
        assert!(err.to_string().contains("divisible by 4"), "{err}");
    }

    #[test]
    fn backward_requires_forward() {
        let mut m = ModelState::init(5, 4, 1).unwrap();
        let g = Logits::zeros(8, 8);
        let f = FeatureMap::zeros(4, 8, 8);
        assert!(matches!(m.backward(&g, &f), Err(Error::BackwardWithoutForward)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut m = ModelState::init(5, 4, 1).unwrap();
        m.forward_cached(&input(1, 8, 8, 1)).unwrap();
        m.backward(&Logits::zeros(8, 8), &FeatureMap::zeros(4, 8, 8)).unwrap();
        assert!(m.params().iter().all(|p| p.grad.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn sgd_step_examples() {
        let mut m = ModelState::zeroed(Architecture::new(2, 1));
        m.params_mut()[0].value[0] = 1.0;
        // f(θ) = θ² → ∂f/∂θ = 2θ
        m.params_mut()[0].grad[0] = 2.0;
        m.sgd_step(0.1, 0.0).unwrap();
        assert!((m.params()[0].value[0] - 0.8).abs() < 1e-15);
        assert_eq!(m.params()[0].grad[0], 0.0);

        let before = m.checksum();
        m.params_mut()[0].grad[0] = 3.0;
        m.sgd_step(0.0, 0.0).unwrap();
        assert_eq!(before, m.checksum());

        m.params_mut()[1].grad[0] = f64::NAN;
        assert!(matches!(m.sgd_step(0.1, 0.9), Err(Error::DivergedGradient(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact_at_f32() {
        let mut m = ModelState::init(9, 4, 2).unwrap();
        m.quantize_f32();
        let x = input(4, 16, 16, 2);
        let before = m.forward(&x).unwrap();
        let mut bytes = Vec::new();
        m.write_checkpoint(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"CASC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let loaded = ModelState::read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(loaded.checksum(), m.checksum());
        assert_eq!(loaded.forward(&x).unwrap(), before);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(ModelState::read_checkpoint(&mut &b"NOPE\x01\0\0\0"[..]).is_err());
        let m = ModelState::init(9, 4, 2).unwrap();
        let mut bytes = Vec::new();
        m.write_checkpoint(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(ModelState::read_checkpoint(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn upsample_adjoint() {
        // <up(a), b> == <a, down(b)>
        let a = input(1, 4, 4, 0);
        let b = input(2, 8, 8, 0);
        let lhs: f64 = upsample2(&a).as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.as_slice().iter().zip(downsample_sum2(&b).as_slice()).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    /// Probe loss `L = Σ gp·p + Σ gf·f_D` with fixed random upstream weights.
    #[test]
    fn gradients_match_finite_differences() {
        let mut m = ModelState::init(21, 3, 2).unwrap();
        // non-zero biases exercise every path
        for p in m.params_mut() {
            if p.name.ends_with("bias") {
                for (i, v) in p.value.iter_mut().enumerate() {
                    *v = 0.05 * ((i as f64) * 1.3 + 0.7).sin() + 0.01;
                }
            }
        }
        let x = input(22, 8, 8, 2);
        let mut r = rng::seeded(23);
        let gp: Vec<f64> = (0..2 * 64).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect();
        let gf: Vec<f64> = (0..3 * 64).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect();
        let probe = |m: &ModelState| -> f64 {
            let out = m.forward(&x).unwrap();
            let p: Vec<f64> = out.logits.background().iter().chain(out.logits.foreground()).copied().collect();
            p.iter().zip(&gp).map(|(a, b)| a * b).sum::<f64>()
                + out.features.as_slice().iter().zip(&gf).map(|(a, b)| a * b).sum::<f64>()
        };
        m.forward_cached(&x).unwrap();
        let gl = Logits::new(8, 8, gp[..64].to_vec(), gp[64..].to_vec()).unwrap();
        let gfm = FeatureMap::from_vec(3, 8, 8, gf.clone()).unwrap();
        m.backward(&gl, &gfm).unwrap();

        let h = 1e-5;
        for pi in 0..m.params().len() {
            for j in 0..m.params()[pi].len() {
                let mut plus = m.clone();
                plus.params_mut()[pi].value[j] += h;
                let mut minus = m.clone();
                minus.params_mut()[pi].value[j] -= h;
                let numeric = (probe(&plus) - probe(&minus)) / (2.0 * h);
                let analytic = m.params()[pi].grad[j];
                let denom = numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    (numeric - analytic).abs() / denom < 1e-5,
                    "{}[{j}]: numeric {numeric} analytic {analytic}",
                    m.params()[pi].name
                );
            }
        }
    }
}
