//! The two-layer voting head.
//!
//! Normalized backbone features pass through a 1×1 concept layer (template
//! matching by dot product), ReLU and dropout, then a K×K voting layer whose
//! per-(concept, part) slices are the spatial heatmaps. Training maximizes the
//! mean per-part dice coefficient between the part map and a smoothed label
//! cube.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::annotation::SceneAnnotation;
use crate::error::{Error, Result};
use crate::formats::NamedTensor;
use crate::geometry::nearest_grid_point;
use crate::seed::mix;
use crate::tensor::{
    conv2d_backward_with, conv2d_forward, dropout, dropout_backward, gaussian_filter_2d, relu,
    relu_backward, ConvKernel, DropoutMask, InputGrad, Padding, Sgd, Tensor3,
};

/// Smoothing added to both sides of the dice ratio; an empty channel
/// (no label, no response) scores 1.
pub const DICE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub num_concepts: usize,
    pub num_parts: usize,
    pub feature_dim: usize,
    pub kernel_size: usize,
    pub dropout_p: f32,
}

impl HeadConfig {
    pub fn with_parts(num_parts: usize) -> Self {
        HeadConfig {
            num_concepts: 256,
            num_parts,
            feature_dim: 512,
            kernel_size: 15,
            dropout_p: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config(format!("voting kernel size {} must be odd", self.kernel_size)));
        }
        if self.num_concepts == 0 || self.num_parts == 0 || self.feature_dim == 0 {
            return Err(Error::config("head dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

/// Fast-RCNN style anchor deltas `(dx, dy, dlogw, dlogh)` for one part.
pub type BoxDeltas = [f32; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct DeepVotingModel {
    /// `1 × 1 × D × |V|`; each output channel is one visual concept template.
    pub concept: ConvKernel,
    /// `K × K × |V| × |S|`; slice `[.., .., v, s]` is the heatmap of concept
    /// `v` voting for part `s`.
    pub voting: ConvKernel,
    pub dropout_p: f32,
    pub box_regressor: Vec<BoxDeltas>,
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    /// Concept-layer pre-activation.
    pub pre_activation: Tensor3,
    /// `Y`: concept map after ReLU.
    pub concepts: Tensor3,
    /// `Y'`: what the voting layer actually saw (equals `Y` at inference).
    pub voted: Tensor3,
    pub mask: DropoutMask,
    /// `Z`: semantic part map.
    pub parts: Tensor3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub concept_weights: Vec<f32>,
    pub concept_bias: Vec<f32>,
    pub voting_weights: Vec<f32>,
    pub voting_bias: Vec<f32>,
}

impl HeadGrads {
    fn zeros_like(model: &DeepVotingModel) -> Self {
        HeadGrads {
            concept_weights: vec![0.0; model.concept.weights.len()],
            concept_bias: vec![0.0; model.concept.bias.len()],
            voting_weights: vec![0.0; model.voting.weights.len()],
            voting_bias: vec![0.0; model.voting.bias.len()],
        }
    }

    fn add_scaled(&mut self, other: &HeadGrads, s: f32) {
        let pairs = [
            (&mut self.concept_weights, &other.concept_weights),
            (&mut self.concept_bias, &other.concept_bias),
            (&mut self.voting_weights, &other.voting_weights),
            (&mut self.voting_bias, &other.voting_bias),
        ];
        for (dst, src) in pairs {
            for (d, v) in dst.iter_mut().zip(src) {
                *d += s * v;
            }
        }
    }
}

impl DeepVotingModel {
    /// Concept templates are unit-normal draws normalized to unit length;
    /// voting weights are uniform in ±0.01; all biases start at zero.
    pub fn init(cfg: &HeadConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (d, v, s, k) = (cfg.feature_dim, cfg.num_concepts, cfg.num_parts, cfg.kernel_size);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let scale = 1.0 / (d as f32).sqrt();
        let mut templates = vec![0.0f32; d * v];
        for t in &mut templates {
            let z: f32 = StandardNormal.sample(&mut rng);
            *t = z * scale;
        }
        for concept in 0..v {
            let norm = (0..d)
                .map(|i| f64::from(templates[i * v + concept]).powi(2))
                .sum::<f64>()
                .sqrt()
                .max(1e-12);
            for i in 0..d {
                let t = &mut templates[i * v + concept];
                *t = (f64::from(*t) / norm) as f32;
            }
        }
        let concept = ConvKernel::new(1, 1, d, v, templates, vec![0.0; v])?;

        let voting_weights = (0..k * k * v * s).map(|_| rng.gen_range(-0.01f32..=0.01)).collect();
        let voting = ConvKernel::new(k, k, v, s, voting_weights, vec![0.0; s])?;

        Ok(DeepVotingModel {
            concept,
            voting,
            dropout_p: cfg.dropout_p,
            box_regressor: vec![[0.0; 4]; s],
        })
    }

    pub fn from_kernels(concept: ConvKernel, voting: ConvKernel, dropout_p: f32) -> Result<Self> {
        if concept.kh != 1 || concept.kw != 1 {
            return Err(Error::config("concept kernel must be 1x1"));
        }
        if voting.cin != concept.cout {
            return Err(Error::config(format!(
                "voting kernel expects {} concepts, concept layer has {}",
                voting.cin, concept.cout
            )));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::config("dropout outside [0, 1)"));
        }
        let parts = voting.cout;
        Ok(DeepVotingModel {
            concept,
            voting,
            dropout_p,
            box_regressor: vec![[0.0; 4]; parts],
        })
    }

    pub fn config(&self) -> HeadConfig {
        HeadConfig {
            num_concepts: self.num_concepts(),
            num_parts: self.num_parts(),
            feature_dim: self.feature_dim(),
            kernel_size: self.kernel_size(),
            dropout_p: self.dropout_p,
        }
    }

    pub fn num_concepts(&self) -> usize {
        self.concept.cout
    }

    pub fn num_parts(&self) -> usize {
        self.voting.cout
    }

    pub fn feature_dim(&self) -> usize {
        self.concept.cin
    }

    pub fn kernel_size(&self) -> usize {
        self.voting.kh
    }

    /// Runs the head. Dropout is active only when `training` is set; `seed`
    /// fixes the drop mask.
    pub fn forward(&self, features: &Tensor3, training: bool, seed: u64) -> Result<ForwardPass> {
        if features.channels != self.feature_dim() {
            return Err(Error::config(format!(
                "features have {} channels, model expects {}",
                features.channels,
                self.feature_dim()
            )));
        }
        let pre_activation = conv2d_forward(features, &self.concept, Padding::Same)?;
        let concepts = relu(&pre_activation);
        let (voted, mask) = dropout(&concepts, self.dropout_p, seed, training)?;
        let parts = conv2d_forward(&voted, &self.voting, Padding::Same)?;
        Ok(ForwardPass {
            pre_activation,
            concepts,
            voted,
            mask,
            parts,
        })
    }

    /// Back-propagates `grad_parts` (∂loss/∂Z) through the voting layer, the
    /// dropout mask, ReLU and the concept layer.
    pub fn backward(&self, features: &Tensor3, pass: &ForwardPass, grad_parts: &Tensor3) -> Result<HeadGrads> {
        // Only entries that survived both ReLU and dropout carry gradient
        // back to the concept layer.
        let live: Vec<bool> = pass
            .pre_activation
            .data
            .iter()
            .zip(&pass.mask.keep)
            .map(|(a, k)| *a > 0.0 && *k)
            .collect();
        let vg = conv2d_backward_with(&pass.voted, &self.voting, grad_parts, Padding::Same, InputGrad::Where(&live))?;
        let grad_concepts = dropout_backward(&pass.mask, &vg.grad_x)?;
        let grad_pre = relu_backward(&pass.pre_activation, &grad_concepts)?;
        let cg = conv2d_backward_with(features, &self.concept, &grad_pre, Padding::Same, InputGrad::Skip)?;
        Ok(HeadGrads {
            concept_weights: cg.grad_weights,
            concept_bias: cg.grad_bias,
            voting_weights: vg.grad_weights,
            voting_bias: vg.grad_bias,
        })
    }

    /// Dice loss `1 − D(Z, L)` and its parameter gradients for one scene.
    pub fn loss_and_grads(
        &self,
        features: &Tensor3,
        labels: &Tensor3,
        training: bool,
        seed: u64,
    ) -> Result<(f64, HeadGrads)> {
        let pass = self.forward(features, training, seed)?;
        let dice = dice_coefficient(&pass.parts, labels, DICE_EPS)?;
        let grad_z = dice_loss_backward(&pass.parts, labels, DICE_EPS)?;
        let grads = self.backward(features, &pass, &grad_z)?;
        Ok((1.0 - dice, grads))
    }

    /// One optimizer step on the mean dice loss of `batch`. Returns the loss
    /// measured before the update.
    pub fn train_step(&mut self, opt: &mut Sgd, batch: &[(&Tensor3, &Tensor3)], seed: u64) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::config("train_step needs a non-empty batch"));
        }
        let mut total = HeadGrads::zeros_like(self);
        let mut loss = 0.0;
        let share = 1.0 / batch.len() as f32;
        for (i, (features, labels)) in batch.iter().enumerate() {
            let (l, g) = self.loss_and_grads(features, labels, true, mix(seed, i as u64))?;
            loss += l;
            total.add_scaled(&g, share);
        }
        opt.step(
            &mut [
                &mut self.concept.weights,
                &mut self.concept.bias,
                &mut self.voting.weights,
                &mut self.voting.bias,
            ],
            &[
                &total.concept_weights,
                &total.concept_bias,
                &total.voting_weights,
                &total.voting_bias,
            ],
        )?;
        Ok(loss / batch.len() as f64)
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let (d, v, s, k) = (self.feature_dim(), self.num_concepts(), self.num_parts(), self.kernel_size());
        vec![
            NamedTensor::new("concept.weight", &[1, 1, d, v], self.concept.weights.clone()),
            NamedTensor::new("concept.bias", &[v], self.concept.bias.clone()),
            NamedTensor::new("voting.weight", &[k, k, v, s], self.voting.weights.clone()),
            NamedTensor::new("voting.bias", &[s], self.voting.bias.clone()),
            NamedTensor::new("dropout_p", &[1], vec![self.dropout_p]),
            NamedTensor::new(
                "box_regressor",
                &[s, 4],
                self.box_regressor.iter().flatten().copied().collect(),
            ),
        ]
    }

    /// Rebuilds a model from checkpoint tensors; unknown names are ignored.
    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let find = |name: &str| -> Result<&NamedTensor> {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::data(format!("checkpoint is missing tensor {name}")))
        };
        let cw = find("concept.weight")?;
        let vw = find("voting.weight")?;
        let cd = cw.dims_usize();
        let vd = vw.dims_usize();
        if cd.len() != 4 || vd.len() != 4 {
            return Err(Error::data("kernel tensors must have rank 4"));
        }
        let concept = ConvKernel::new(cd[0], cd[1], cd[2], cd[3], cw.data.clone(), find("concept.bias")?.data.clone())?;
        let voting = ConvKernel::new(vd[0], vd[1], vd[2], vd[3], vw.data.clone(), find("voting.bias")?.data.clone())?;
        let dropout_p = find("dropout_p")?.data.first().copied().unwrap_or(0.5);
        let mut model = DeepVotingModel::from_kernels(concept, voting, dropout_p)?;
        if let Ok(reg) = find("box_regressor") {
            if reg.data.len() != model.num_parts() * 4 {
                return Err(Error::data("box_regressor does not match part count"));
            }
            model.box_regressor = reg.data.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        }
        Ok(model)
    }
}

/// Per-channel dice sums accumulated in f64: `(Σ z·l, Σ z² + l²)`.
fn channel_sums(z: &Tensor3, l: &Tensor3) -> Vec<(f64, f64)> {
    let mut sums = vec![(0.0f64, 0.0f64); z.channels];
    for (zc, lc) in z.data.chunks_exact(z.channels).zip(l.data.chunks_exact(l.channels)) {
        for (s, (zv, lv)) in sums.iter_mut().zip(zc.iter().zip(lc)) {
            let (zv, lv) = (f64::from(*zv), f64::from(*lv));
            s.0 += zv * lv;
            s.1 += zv * zv + lv * lv;
        }
    }
    sums
}

/// Mean over part channels of `(2 Σ z·l + ε) / (Σ (z² + l²) + ε)`.
///
/// Bounded by `[0, 1]` only for nonnegative `Z`; the voting layer can produce
/// negative responses and those are scored as-is.
pub fn dice_coefficient(z: &Tensor3, l: &Tensor3, eps: f64) -> Result<f64> {
    if !z.same_shape(l) {
        return Err(Error::config(format!(
            "dice shape mismatch: {}x{}x{} vs {}x{}x{}",
            z.width, z.height, z.channels, l.width, l.height, l.channels
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::config("dice eps must be positive"));
    }
    if z.channels == 0 {
        return Ok(1.0);
    }
    let sums = channel_sums(z, l);
    let total: f64 = sums.iter().map(|(zl, sq)| (2.0 * zl + eps) / (sq + eps)).sum();
    Ok(total / z.channels as f64)
}

/// Gradient of `1 − D(Z, L)` with respect to `Z`.
///
/// Per channel, with `num = 2 Σ z·l + ε` and `den = Σ (z² + l²) + ε`:
/// `∂(num/den)/∂z = (2 l · den − 2 z · num) / den²`; the loss gradient is the
/// negation of that divided by the number of channels.
pub fn dice_loss_backward(z: &Tensor3, l: &Tensor3, eps: f64) -> Result<Tensor3> {
    if !z.same_shape(l) {
        return Err(Error::config("dice shape mismatch"));
    }
    if !(eps > 0.0) {
        return Err(Error::config("dice eps must be positive"));
    }
    let mut grad = Tensor3::zeros(z.width, z.height, z.channels);
    if z.channels == 0 {
        return Ok(grad);
    }
    let coeffs: Vec<(f64, f64, f64)> = channel_sums(z, l)
        .into_iter()
        .map(|(zl, sq)| {
            let num = 2.0 * zl + eps;
            let den = sq + eps;
            (num, den, den * den)
        })
        .collect();
    let inv_s = 1.0 / z.channels as f64;
    for ((g, zc), lc) in grad
        .data
        .chunks_exact_mut(z.channels)
        .zip(z.data.chunks_exact(z.channels))
        .zip(l.data.chunks_exact(l.channels))
    {
        for (c, &(num, den, den2)) in coeffs.iter().enumerate() {
            let (zv, lv) = (f64::from(zc[c]), f64::from(lc[c]));
            let d = (2.0 * lv * den - 2.0 * zv * num) / den2;
            g[c] = (-d * inv_s) as f32;
        }
    }
    Ok(grad)
}

/// Ground-truth part map: each annotated part center is snapped to its
/// nearest grid point (pixel / 16), the binary plane is Gaussian-smoothed and
/// rescaled to peak 1.
pub fn make_label_cube(
    annotation: &SceneAnnotation,
    grid_w: usize,
    grid_h: usize,
    num_parts: usize,
    sigma: f32,
) -> Result<Tensor3> {
    let mut planes = vec![vec![0.0f32; grid_w * grid_h]; num_parts];
    for part in &annotation.parts {
        if part.part_id >= num_parts {
            return Err(Error::config(format!(
                "{}: part id {} outside 0..{num_parts}",
                annotation.image_id, part.part_id
            )));
        }
        let (gx, gy) = nearest_grid_point(part.center[0], part.center[1], grid_w, grid_h);
        planes[part.part_id][gy * grid_w + gx] = 1.0;
    }
    let mut cube = Tensor3::zeros(grid_w, grid_h, num_parts);
    for (s, plane) in planes.iter().enumerate() {
        if plane.iter().all(|v| *v == 0.0) {
            continue;
        }
        let smooth = gaussian_filter_2d(plane, grid_w, grid_h, sigma)?;
        cube.set_channel_plane(s, &smooth);
    }
    Ok(cube)
}
