//! Dense grid tensors and the handful of numerical kernels the voting head
//! needs: stride-1 convolution with its backward pass, ReLU, inverted
//! dropout, per-location normalization, Gaussian smoothing, bilinear
//! resampling and SGD with momentum.
//!
//! Everything is `f32`; reductions whose precision matters (norms, bias
//! gradients) accumulate in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `width × height × channels` grid stored channel-fastest:
/// element `(w, h, c)` lives at `(h * width + w) * channels + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Tensor3 {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::config(format!(
                "tensor data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Tensor3 {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn index(&self, w: usize, h: usize, c: usize) -> usize {
        (h * self.width + w) * self.channels + c
    }

    #[inline]
    pub fn get(&self, w: usize, h: usize, c: usize) -> f32 {
        self.data[self.index(w, h, c)]
    }

    #[inline]
    pub fn set(&mut self, w: usize, h: usize, c: usize, v: f32) {
        let i = self.index(w, h, c);
        self.data[i] = v;
    }

    /// The feature vector at one grid location.
    #[inline]
    pub fn location(&self, w: usize, h: usize) -> &[f32] {
        let start = (h * self.width + w) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn location_mut(&mut self, w: usize, h: usize) -> &mut [f32] {
        let start = (h * self.width + w) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of channel `c` as a row-major `width × height` plane.
    pub fn channel_plane(&self, c: usize) -> Vec<f32> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn set_channel_plane(&mut self, c: usize, plane: &[f32]) {
        assert_eq!(plane.len(), self.num_cells());
        for (cell, v) in plane.iter().enumerate() {
            self.data[cell * self.channels + c] = *v;
        }
    }
}

/// Convolution weights laid out as `[kh][kw][cin][cout]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvKernel {
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvKernel {
    pub fn zeros(kh: usize, kw: usize, cin: usize, cout: usize) -> Result<Self> {
        Self::new(kh, kw, cin, cout, vec![0.0; kh * kw * cin * cout], vec![0.0; cout])
    }

    pub fn new(
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
            return Err(Error::config(format!("kernel extent {kh}x{kw} must be odd")));
        }
        if weights.len() != kh * kw * cin * cout {
            return Err(Error::config(format!(
                "kernel weights length {} does not match {kh}x{kw}x{cin}x{cout}",
                weights.len()
            )));
        }
        if bias.len() != cout {
            return Err(Error::config(format!(
                "bias length {} does not match cout {cout}",
                bias.len()
            )));
        }
        Ok(ConvKernel {
            kh,
            kw,
            cin,
            cout,
            weights,
            bias,
        })
    }

    /// Offset of weight `(i, j, c, o)` where `i` runs over rows and `j` over
    /// columns of the kernel window.
    #[inline]
    pub fn index(&self, i: usize, j: usize, c: usize, o: usize) -> usize {
        ((i * self.kw + j) * self.cin + c) * self.cout + o
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize, c: usize, o: usize) -> f32 {
        self.weights[self.index(i, j, c, o)]
    }

    /// The `cout`-long weight row for one tap and input channel.
    #[inline]
    fn tap_row(&self, i: usize, j: usize, c: usize) -> &[f32] {
        let start = ((i * self.kw + j) * self.cin + c) * self.cout;
        &self.weights[start..start + self.cout]
    }

    pub fn same_shape(&self, other: &ConvKernel) -> bool {
        self.kh == other.kh && self.kw == other.kw && self.cin == other.cin && self.cout == other.cout
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Padding {
    /// Zero padding that keeps the spatial size.
    #[default]
    Same,
    /// No padding; output shrinks by `k - 1` per axis.
    Valid,
}

impl Padding {
    fn offsets(self, k: &ConvKernel) -> (usize, usize) {
        match self {
            Padding::Same => (k.kh / 2, k.kw / 2),
            Padding::Valid => (0, 0),
        }
    }

    fn output_dims(self, x: &Tensor3, k: &ConvKernel) -> Result<(usize, usize)> {
        match self {
            Padding::Same => Ok((x.width, x.height)),
            Padding::Valid => {
                if x.width < k.kw || x.height < k.kh {
                    return Err(Error::config(format!(
                        "input {}x{} smaller than kernel {}x{}",
                        x.width, x.height, k.kw, k.kh
                    )));
                }
                Ok((x.width - k.kw + 1, x.height - k.kh + 1))
            }
        }
    }
}

/// Output grid cell fed by input `(h, w)` through tap `(i, j)`, if in range.
#[inline]
fn tap_target(
    h: usize,
    w: usize,
    i: usize,
    j: usize,
    (ph, pw): (usize, usize),
    (out_w, out_h): (usize, usize),
) -> Option<(usize, usize)> {
    let oh = (h + ph).checked_sub(i)?;
    let ow = (w + pw).checked_sub(j)?;
    (oh < out_h && ow < out_w).then_some((oh, ow))
}

/// Stride-1 cross-correlation:
/// `out[h, w, o] = bias[o] + Σ_{i,j,c} k[i, j, c, o] · x[h + i - ph, w + j - pw, c]`
/// with out-of-range taps reading zero.
///
/// Evaluated input-major, so zero inputs (the common case after ReLU and
/// dropout) cost nothing.
pub fn conv2d_forward(x: &Tensor3, k: &ConvKernel, pad: Padding) -> Result<Tensor3> {
    if x.channels != k.cin {
        return Err(Error::config(format!(
            "conv input has {} channels, kernel expects {}",
            x.channels, k.cin
        )));
    }
    let (out_w, out_h) = pad.output_dims(x, k)?;
    let offsets = pad.offsets(k);
    let mut out = Tensor3::zeros(out_w, out_h, k.cout);
    for cell in out.data.chunks_exact_mut(k.cout) {
        cell.copy_from_slice(&k.bias);
    }
    for h in 0..x.height {
        for w in 0..x.width {
            let xin = x.location(w, h);
            for (c, &v) in xin.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                for i in 0..k.kh {
                    for j in 0..k.kw {
                        let Some((oh, ow)) = tap_target(h, w, i, j, offsets, (out_w, out_h)) else {
                            continue;
                        };
                        let row = k.tap_row(i, j, c);
                        let dst = out.location_mut(ow, oh);
                        for (d, wv) in dst.iter_mut().zip(row) {
                            *d += v * wv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `Σ grad_out ⊙ conv2d_forward(x, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub grad_x: Tensor3,
    pub grad_weights: Vec<f32>,
    pub grad_bias: Vec<f32>,
}

/// Which input-gradient entries the caller needs.
#[derive(Debug, Clone, Copy)]
pub enum InputGrad<'a> {
    All,
    /// Skip the input gradient entirely (left at zero).
    Skip,
    /// Only entries whose flag is set; the rest are left at zero.
    Where(&'a [bool]),
}

pub fn conv2d_backward(
    x: &Tensor3,
    k: &ConvKernel,
    grad_out: &Tensor3,
    pad: Padding,
) -> Result<ConvGrads> {
    conv2d_backward_with(x, k, grad_out, pad, InputGrad::All)
}

pub fn conv2d_backward_with(
    x: &Tensor3,
    k: &ConvKernel,
    grad_out: &Tensor3,
    pad: Padding,
    input_grad: InputGrad<'_>,
) -> Result<ConvGrads> {
    if x.channels != k.cin {
        return Err(Error::config(format!(
            "conv input has {} channels, kernel expects {}",
            x.channels, k.cin
        )));
    }
    let (out_w, out_h) = pad.output_dims(x, k)?;
    if grad_out.width != out_w || grad_out.height != out_h || grad_out.channels != k.cout {
        return Err(Error::config(format!(
            "grad_out is {}x{}x{}, expected {out_w}x{out_h}x{}",
            grad_out.width, grad_out.height, grad_out.channels, k.cout
        )));
    }
    if let InputGrad::Where(mask) = input_grad {
        if mask.len() != x.data.len() {
            return Err(Error::config("input-gradient mask does not match input size"));
        }
    }
    let offsets = pad.offsets(k);

    let mut grad_bias = vec![0.0f64; k.cout];
    for cell in grad_out.data.chunks_exact(k.cout) {
        for (b, g) in grad_bias.iter_mut().zip(cell) {
            *b += f64::from(*g);
        }
    }

    let mut grad_x = Tensor3::zeros(x.width, x.height, x.channels);
    if grad_out.data.iter().all(|g| *g == 0.0) {
        return Ok(ConvGrads {
            grad_x,
            grad_weights: vec![0.0; k.weights.len()],
            grad_bias: vec![0.0; k.cout],
        });
    }
    // Sums run in f64; weight gradients add up one product per grid cell.
    let mut grad_weights = vec![0.0f64; k.weights.len()];

    for h in 0..x.height {
        for w in 0..x.width {
            let base = (h * x.width + w) * x.channels;
            for c in 0..x.channels {
                let v = x.data[base + c];
                let want_x = match input_grad {
                    InputGrad::All => true,
                    InputGrad::Skip => false,
                    InputGrad::Where(mask) => mask[base + c],
                };
                if v == 0.0 && !want_x {
                    continue;
                }
                let mut gx = 0.0f64;
                for i in 0..k.kh {
                    for j in 0..k.kw {
                        let Some((oh, ow)) = tap_target(h, w, i, j, offsets, (out_w, out_h)) else {
                            continue;
                        };
                        let g = grad_out.location(ow, oh);
                        let start = k.index(i, j, c, 0);
                        if v != 0.0 {
                            let gw = &mut grad_weights[start..start + k.cout];
                            let v = f64::from(v);
                            for (d, gv) in gw.iter_mut().zip(g) {
                                *d += v * f64::from(*gv);
                            }
                        }
                        if want_x {
                            let row = &k.weights[start..start + k.cout];
                            gx += row.iter().zip(g).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum::<f64>();
                        }
                    }
                }
                if want_x {
                    grad_x.data[base + c] = gx as f32;
                }
            }
        }
    }

    Ok(ConvGrads {
        grad_x,
        grad_weights: grad_weights.into_iter().map(|w| w as f32).collect(),
        grad_bias: grad_bias.into_iter().map(|b| b as f32).collect(),
    })
}

pub fn relu(x: &Tensor3) -> Tensor3 {
    let mut out = x.clone();
    for v in &mut out.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Passes the gradient where `x > 0`; the subgradient at zero is zero.
pub fn relu_backward(x: &Tensor3, grad_out: &Tensor3) -> Result<Tensor3> {
    if !x.same_shape(grad_out) {
        return Err(Error::config("relu_backward shape mismatch"));
    }
    let data = x
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor3::from_vec(x.width, x.height, x.channels, data)
}

/// Keep-mask of one dropout draw plus the survivor scale `1 / (1 - p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
    pub scale: f32,
}

impl DropoutMask {
    pub fn keep_all(len: usize) -> Self {
        DropoutMask {
            keep: vec![true; len],
            scale: 1.0,
        }
    }

    pub fn apply(&self, x: &Tensor3) -> Tensor3 {
        let mut out = x.clone();
        for (v, &k) in out.data.iter_mut().zip(&self.keep) {
            *v = if k { *v * self.scale } else { 0.0 };
        }
        out
    }
}

/// Inverted dropout. In training mode each element is zeroed with
/// probability `p` and survivors are scaled by `1 / (1 - p)`; in inference
/// mode the input passes through untouched.
pub fn dropout(x: &Tensor3, p: f32, seed: u64, training: bool) -> Result<(Tensor3, DropoutMask)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok((x.clone(), DropoutMask::keep_all(x.data.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep: Vec<bool> = (0..x.data.len()).map(|_| rng.gen::<f32>() >= p).collect();
    let mask = DropoutMask {
        keep,
        scale: 1.0 / (1.0 - p),
    };
    Ok((mask.apply(x), mask))
}

pub fn dropout_backward(mask: &DropoutMask, grad_out: &Tensor3) -> Result<Tensor3> {
    if mask.keep.len() != grad_out.data.len() {
        return Err(Error::config("dropout mask does not match gradient size"));
    }
    Ok(mask.apply(grad_out))
}

/// Divides every location vector by `max(‖x‖₂, eps)`.
pub fn l2_normalize_locations(x: &Tensor3, eps: f32) -> Tensor3 {
    let mut out = x.clone();
    if x.channels == 0 {
        return out;
    }
    for cell in out.data.chunks_exact_mut(x.channels) {
        let norm = cell
            .iter()
            .map(|v| f64::from(*v) * f64::from(*v))
            .sum::<f64>()
            .sqrt();
        let denom = norm.max(f64::from(eps));
        for v in cell.iter_mut() {
            *v = (f64::from(*v) / denom) as f32;
        }
    }
    out
}

/// Normalized 1-D Gaussian taps for `sigma`, truncated at `⌈3σ⌉`.
pub fn gaussian_taps(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let s2 = 2.0 * f64::from(sigma) * f64::from(sigma);
    let raw: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / s2).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|t| (t / total) as f32).collect()
}

/// Separable Gaussian smoothing of a row-major `width × height` plane with
/// zero-padded borders. No rescaling.
pub fn gaussian_filter_2d_raw(map: &[f32], width: usize, height: usize, sigma: f32) -> Result<Vec<f32>> {
    if !(sigma > 0.0) {
        return Err(Error::config(format!("gaussian sigma {sigma} must be positive")));
    }
    if map.len() != width * height {
        return Err(Error::config("gaussian plane size mismatch"));
    }
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;

    let mut rows = vec![0.0f32; map.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0f32;
            for (t, &tap) in taps.iter().enumerate() {
                let sx = x as isize + t as isize - r;
                if sx >= 0 && (sx as usize) < width {
                    acc += tap * map[y * width + sx as usize];
                }
            }
            rows[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0f32; map.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0f32;
            for (t, &tap) in taps.iter().enumerate() {
                let sy = y as isize + t as isize - r;
                if sy >= 0 && (sy as usize) < height {
                    acc += tap * rows[sy as usize * width + x];
                }
            }
            out[y * width + x] = acc;
        }
    }
    Ok(out)
}

/// Gaussian smoothing followed by a rescale that restores the input's
/// maximum, so a binary plane keeps peak value 1.
pub fn gaussian_filter_2d(map: &[f32], width: usize, height: usize, sigma: f32) -> Result<Vec<f32>> {
    let mut out = gaussian_filter_2d_raw(map, width, height, sigma)?;
    let in_max = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let out_max = out.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if in_max > 0.0 && out_max > 0.0 {
        let scale = in_max / out_max;
        for v in &mut out {
            *v *= scale;
        }
    }
    Ok(out)
}

/// Bilinear resampling of every channel to `new_width × new_height` using
/// pixel-center alignment: output cell `x` samples source coordinate
/// `(x + 0.5) · W / W' - 0.5`, clamped to the grid.
pub fn resize_bilinear(x: &Tensor3, new_width: usize, new_height: usize) -> Result<Tensor3> {
    if new_width == 0 || new_height == 0 {
        return Err(Error::config("cannot resample to an empty grid"));
    }
    if x.width == 0 || x.height == 0 {
        return Err(Error::config("cannot resample an empty grid"));
    }
    if new_width == x.width && new_height == x.height {
        return Ok(x.clone());
    }
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f32)> {
        let ratio = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let xs = axis(new_width, x.width);
    let ys = axis(new_height, x.height);
    let c = x.channels;
    let mut out = Tensor3::zeros(new_width, new_height, c);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let a = x.location(x0, y0);
            let b = x.location(x1, y0);
            let cc = x.location(x0, y1);
            let d = x.location(x1, y1);
            let dst = out.location_mut(ox, oy);
            for ch in 0..c {
                let top = a[ch] * (1.0 - fx) + b[ch] * fx;
                let bottom = cc[ch] * (1.0 - fx) + d[ch] * fx;
                dst[ch] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be >= 0"));
        }
        Ok(())
    }
}

/// One momentum-SGD update of a single parameter buffer:
/// `v ← μ·v + g + λ·θ; θ ← θ − η·v`.
pub fn sgd_step(
    params: &mut [f32],
    grads: &[f32],
    velocity: &mut [f32],
    cfg: SgdConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::config(format!(
            "sgd shape mismatch: params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = cfg.momentum * *v + *g + cfg.weight_decay * *p;
        *p -= cfg.lr * *v;
    }
    Ok(())
}

/// Momentum SGD over a fixed list of parameter buffers. Velocity buffers are
/// allocated on the first step.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Sgd {
            config,
            velocity: Vec::new(),
        })
    }

    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::config("sgd: parameter and gradient lists differ in length"));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::config("sgd: parameter list changed between steps"));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            sgd_step(p, g, v, self.config)?;
        }
        Ok(())
    }
}
