//! Score decomposition into voting contributions, top concept responses,
//! and grayscale renderings of voting kernels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Scene;
use crate::detect::{Detection, ScaleSource, WorkingGrid};
use crate::error::{Error, Result};
use crate::formats::write_bytes;
use crate::geometry::{PixelBox, GRID_STRIDE};
use crate::model::DeepVotingModel;
use crate::tensor::{conv2d_forward, l2_normalize_locations, relu, Padding, Tensor3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteContribution {
    pub concept_id: usize,
    /// Cell the concept response was read from.
    pub source: (usize, usize),
    /// `source − peak`, in cells.
    pub offset: (i32, i32),
    pub weight: f32,
    pub response: f32,
    /// `weight × response`.
    pub value: f64,
}

/// Every voting term behind `Z[peak, part_id]`, largest first.
///
/// `concepts` must be the concept map the voting layer consumed in the same
/// forward pass. Off-grid taps read zero and are omitted, so the values plus
/// the part's voting bias reproduce the score.
pub fn decompose_score(
    model: &DeepVotingModel,
    concepts: &Tensor3,
    peak: (usize, usize),
    part_id: usize,
) -> Result<Vec<VoteContribution>> {
    let k = &model.voting;
    if concepts.channels != k.cin {
        return Err(Error::Input(format!(
            "concept cache has {} channels, model has {} concepts",
            concepts.channels, k.cin
        )));
    }
    if part_id >= k.cout {
        return Err(Error::Input(format!("part {part_id} outside 0..{}", k.cout)));
    }
    if peak.0 >= concepts.width || peak.1 >= concepts.height {
        return Err(Error::Input(format!(
            "peak {peak:?} outside the {}x{} concept cache",
            concepts.width, concepts.height
        )));
    }
    let (ph, pw) = ((k.kh / 2) as i32, (k.kw / 2) as i32);
    let mut out = Vec::with_capacity(k.kh * k.kw * k.cin);
    for i in 0..k.kh {
        for j in 0..k.kw {
            let offset = (j as i32 - pw, i as i32 - ph);
            let (sx, sy) = (peak.0 as i32 + offset.0, peak.1 as i32 + offset.1);
            if sx < 0 || sy < 0 || sx as usize >= concepts.width || sy as usize >= concepts.height {
                continue;
            }
            let source = (sx as usize, sy as usize);
            let y = concepts.location(source.0, source.1);
            for (c, &response) in y.iter().enumerate() {
                let weight = k.weight(i, j, c, part_id);
                out.push(VoteContribution {
                    concept_id: c,
                    source,
                    offset,
                    weight,
                    response,
                    value: f64::from(weight) * f64::from(response),
                });
            }
        }
    }
    out.sort_by(|a, b| {
        b.value
            .total_cmp(&a.value)
            .then(a.concept_id.cmp(&b.concept_id))
            .then((a.offset.1, a.offset.0).cmp(&(b.offset.1, b.offset.0)))
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptResponse {
    pub image_id: String,
    pub cell: (usize, usize),
    pub response: f32,
    /// The cell's 16-pixel patch, for looking up image evidence.
    pub patch: PixelBox,
}

/// Concept map `Y` of a scene at its stored resolution.
pub fn concept_map(model: &DeepVotingModel, features: &Tensor3) -> Result<Tensor3> {
    let x = l2_normalize_locations(features, 1e-8);
    Ok(relu(&conv2d_forward(&x, &model.concept, Padding::Same)?))
}

/// Global top-`n` responses of every concept across `scenes`, ties broken
/// by image id then row-major cell.
pub fn top_responses_per_concept(
    model: &DeepVotingModel,
    scenes: &[Scene],
    n: usize,
) -> Result<Vec<Vec<ConceptResponse>>> {
    let v = model.num_concepts();
    let mut best: Vec<Vec<ConceptResponse>> = vec![Vec::new(); v];
    let rank = |a: &ConceptResponse, b: &ConceptResponse| {
        b.response
            .total_cmp(&a.response)
            .then_with(|| a.image_id.cmp(&b.image_id))
            .then((a.cell.1, a.cell.0).cmp(&(b.cell.1, b.cell.0)))
    };
    for scene in scenes {
        let y = concept_map(model, &scene.features)?;
        for (c, list) in best.iter_mut().enumerate() {
            for h in 0..y.height {
                for w in 0..y.width {
                    list.push(ConceptResponse {
                        image_id: scene.id().to_string(),
                        cell: (w, h),
                        response: y.get(w, h, c),
                        patch: PixelBox::new(w as f32 * GRID_STRIDE, h as f32 * GRID_STRIDE, GRID_STRIDE, GRID_STRIDE),
                    });
                }
            }
            list.sort_by(rank);
            list.truncate(n);
        }
    }
    Ok(best)
}

/// The `K × K` voting slice of `(concept_id, part_id)` as a binary PGM. Pixel
/// `(du, dv)` is `round(128 + 127 · w / max|w|)`, so zero weights are 128.
pub fn heatmap_pgm(model: &DeepVotingModel, concept_id: usize, part_id: usize) -> Result<Vec<u8>> {
    let k = &model.voting;
    if concept_id >= k.cin || part_id >= k.cout {
        return Err(Error::Input(format!(
            "concept {concept_id} / part {part_id} outside {}x{}",
            k.cin, k.cout
        )));
    }
    let slice: Vec<f32> = (0..k.kh)
        .flat_map(|i| (0..k.kw).map(move |j| (i, j)))
        .map(|(i, j)| k.weight(i, j, concept_id, part_id))
        .collect();
    let peak = slice.iter().fold(0.0f32, |m, w| m.max(w.abs()));
    let mut out = format!("P5\n{} {}\n255\n", k.kw, k.kh).into_bytes();
    out.extend(slice.iter().map(|w| {
        if peak == 0.0 {
            128
        } else {
            (128.0 + 127.0 * w / peak).round().clamp(0.0, 255.0) as u8
        }
    }));
    Ok(out)
}

pub fn render_heatmap(model: &DeepVotingModel, concept_id: usize, part_id: usize, path: &Path) -> Result<()> {
    write_bytes(path, &heatmap_pgm(model, concept_id, part_id)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cue {
    pub concept_id: usize,
    pub offset: (i32, i32),
    pub contribution: f64,
    /// Source cell in the input frame, in pixels.
    pub source_box: PixelBox,
    pub occluded_evidence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainReport {
    pub image_id: String,
    pub detection: Detection,
    pub score: f32,
    pub bias: f32,
    /// Sum of every contribution; equals `score − bias`.
    pub contribution_sum: f64,
    /// Cues are ranked by contribution value.
    pub ranking: String,
    pub cues: Vec<Cue>,
}

impl ExplainReport {
    /// Relative gap between `Σ contributions + bias` and the score.
    pub fn exactness_error(&self) -> f64 {
        let recon = self.contribution_sum + f64::from(self.bias);
        let score = f64::from(self.score);
        (recon - score).abs() / score.abs().max(1e-12)
    }
}

/// Explains `detection` by re-running the head on the same scale-normalized
/// grid and decomposing the peak. Fails when the recomputed score disagrees
/// with the detection.
pub fn explain_report(
    model: &DeepVotingModel,
    scale: ScaleSource<'_>,
    scene: &Scene,
    detection: &Detection,
    top_k: usize,
) -> Result<ExplainReport> {
    let grid = WorkingGrid::prepare(&scene.features, scale)?;
    let pass = model.forward(&grid.features, false, 0)?;
    let (px, py) = detection.peak;
    if px >= pass.parts.width || py >= pass.parts.height || detection.part_id >= pass.parts.channels {
        return Err(Error::Input(format!("detection peak {:?} is not on this scene's grid", detection.peak)));
    }
    let score = pass.parts.get(px, py, detection.part_id);
    if score != detection.score {
        return Err(Error::Input(format!(
            "{}: detection score {} does not match recomputed {score}",
            scene.id(),
            detection.score
        )));
    }
    let all = decompose_score(model, &pass.voted, detection.peak, detection.part_id)?;
    let contribution_sum = all.iter().map(|c| c.value).sum();
    let cues = all
        .iter()
        .take(top_k)
        .map(|c| {
            let cell = PixelBox::new(
                c.source.0 as f32 * GRID_STRIDE,
                c.source.1 as f32 * GRID_STRIDE,
                GRID_STRIDE,
                GRID_STRIDE,
            );
            let source_box = grid.to_input_frame(&cell);
            let (cx, cy) = source_box.center();
            Cue {
                concept_id: c.concept_id,
                offset: c.offset,
                contribution: c.value,
                source_box,
                occluded_evidence: scene.annotation.occluded_at(cx, cy),
            }
        })
        .collect();
    Ok(ExplainReport {
        image_id: scene.id().to_string(),
        detection: detection.clone(),
        score,
        bias: model.voting.bias[detection.part_id],
        contribution_sum,
        ranking: "contribution".to_string(),
        cues,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadConfig;
    use crate::tensor::ConvKernel;

    fn random_model(seed: u64) -> DeepVotingModel {
        let cfg = HeadConfig {
            num_concepts: 5,
            num_parts: 2,
            feature_dim: 6,
            kernel_size: 5,
            dropout_p: 0.5,
        };
        let mut m = DeepVotingModel::init(&cfg, seed).unwrap();
        for (i, w) in m.voting.weights.iter_mut().enumerate() {
            *w = ((i * 37 % 23) as f32 - 11.0) / 7.0;
        }
        m.voting.bias = vec![0.25, -0.5];
        m
    }

    fn features(seed: u64) -> Tensor3 {
        let data = (0..9 * 7 * 6)
            .map(|i| (((i as u64 * 2654435761 + seed) % 1000) as f32) / 500.0 - 1.0)
            .collect();
        Tensor3::from_vec(9, 7, 6, data).unwrap()
    }

    #[test]
    fn single_weight_gives_single_contribution() {
        let concept = ConvKernel::new(1, 1, 1, 1, vec![1.0], vec![0.0]).unwrap();
        let mut w = vec![0.0; 9];
        w[2 * 3 + 1] = 2.0;
        let voting = ConvKernel::new(3, 3, 1, 1, w, vec![0.5]).unwrap();
        let m = DeepVotingModel::from_kernels(concept, voting, 0.0).unwrap();
        let mut x = Tensor3::zeros(4, 4, 1);
        x.set(1, 2, 0, 0.75);
        let pass = m.forward(&x, false, 0).unwrap();
        let c = decompose_score(&m, &pass.voted, (1, 1), 0).unwrap();
        let nonzero: Vec<_> = c.iter().filter(|c| c.value != 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert_eq!(nonzero[0].offset, (0, 1));
        assert_eq!(nonzero[0].value, f64::from(pass.parts.get(1, 1, 0) - 0.5));
    }

    #[test]
    fn zero_concepts_leave_bias() {
        let m = random_model(1);
        let y = Tensor3::zeros(9, 7, 5);
        let c = decompose_score(&m, &y, (4, 3), 1).unwrap();
        assert!(c.iter().all(|c| c.value == 0.0));
        assert!(decompose_score(&m, &Tensor3::zeros(9, 7, 4), (0, 0), 0).is_err());
        assert!(decompose_score(&m, &y, (9, 0), 0).is_err());
    }

    #[test]
    fn decomposition_is_exact() {
        for seed in 0..10 {
            let m = random_model(seed);
            let x = l2_normalize_locations(&features(seed), 1e-8);
            let pass = m.forward(&x, false, 0).unwrap();
            for (peak, part) in [((0, 0), 0), ((4, 3), 1), ((8, 6), 0), ((2, 5), 1)] {
                let c = decompose_score(&m, &pass.voted, peak, part).unwrap();
                let recon = c.iter().map(|c| c.value).sum::<f64>() + f64::from(m.voting.bias[part]);
                let z = f64::from(pass.parts.get(peak.0, peak.1, part));
                assert!((recon - z).abs() <= 1e-5 * z.abs().max(1.0), "{recon} vs {z}");
            }
        }
    }

    #[test]
    fn removing_top_contribution_subtracts_it() {
        let m = random_model(3);
        let x = l2_normalize_locations(&features(3), 1e-8);
        let pass = m.forward(&x, false, 0).unwrap();
        let top = decompose_score(&m, &pass.voted, (4, 3), 0).unwrap()[0].clone();
        assert!(top.value > 0.0);
        let mut y = pass.voted.clone();
        y.set(top.source.0, top.source.1, top.concept_id, 0.0);
        let z2 = conv2d_forward(&y, &m.voting, Padding::Same).unwrap().get(4, 3, 0);
        let drop = f64::from(pass.parts.get(4, 3, 0)) - f64::from(z2);
        assert!((drop - top.value).abs() < 1e-5);
    }

    fn pixels(pgm: &[u8]) -> &[u8] {
        let mut newlines = 0;
        let start = pgm
            .iter()
            .position(|b| {
                newlines += usize::from(*b == b'\n');
                newlines == 3
            })
            .unwrap();
        &pgm[start + 1..]
    }

    #[test]
    fn heatmap_encoding() {
        let mut m = random_model(0);
        let zero = {
            m.voting.weights.iter_mut().for_each(|w| *w = 0.0);
            heatmap_pgm(&m, 2, 1).unwrap()
        };
        assert!(zero.starts_with(b"P5\n5 5\n255\n"));
        assert!(pixels(&zero).iter().all(|p| *p == 128));

        let idx = m.voting.index(1, 3, 2, 1);
        m.voting.weights[idx] = 0.4;
        let one = heatmap_pgm(&m, 2, 1).unwrap();
        let px = pixels(&one);
        assert_eq!(px[5 + 3], 255);
        assert_eq!(px.iter().filter(|p| **p != 128).count(), 1);

        let m = random_model(4);
        let mut neg = m.clone();
        neg.voting.weights.iter_mut().for_each(|w| *w = -*w);
        let (a, b) = (heatmap_pgm(&m, 1, 0).unwrap(), heatmap_pgm(&neg, 1, 0).unwrap());
        for (p, q) in pixels(&a).iter().zip(pixels(&b)) {
            assert!((i32::from(*p) + i32::from(*q) - 256).abs() <= 1);
        }
        assert!(heatmap_pgm(&m, 5, 0).is_err());
    }

    #[test]
    fn top_responses_rank_and_truncate() {
        let concept = ConvKernel::new(1, 1, 1, 1, vec![1.0], vec![0.0]).unwrap();
        let voting = ConvKernel::new(1, 1, 1, 1, vec![1.0], vec![0.0]).unwrap();
        let m = DeepVotingModel::from_kernels(concept, voting, 0.0).unwrap();
        let mut x = Tensor3::zeros(3, 3, 1);
        x.set(2, 1, 0, 1.0);
        let scene = Scene {
            features: x,
            annotation: crate::annotation::SceneAnnotation {
                image_id: "one".into(),
                object_box: PixelBox::new(0.0, 0.0, 48.0, 48.0),
                scale_ratio: 1.0,
                parts: vec![],
                occlusion: Default::default(),
            },
        };
        let top = top_responses_per_concept(&m, std::slice::from_ref(&scene), 100).unwrap();
        assert_eq!(top[0].len(), 9);
        assert_eq!(top[0][0].cell, (2, 1));
        assert_eq!(top[0][0].patch, PixelBox::new(32.0, 16.0, 16.0, 16.0));
        assert_eq!(top[0][1].cell, (0, 0));
    }

    #[test]
    fn report_with_no_cues_is_still_exact() {
        let m = random_model(2);
        let scene = Scene {
            features: features(2),
            annotation: crate::annotation::SceneAnnotation {
                image_id: "r".into(),
                object_box: PixelBox::new(0.0, 0.0, 112.0, 112.0),
                scale_ratio: 0.5,
                parts: vec![],
                occlusion: Default::default(),
            },
        };
        let scale = ScaleSource::Given(224.0 / 144.0);
        let grid = WorkingGrid::prepare(&scene.features, scale).unwrap();
        let pass = m.forward(&grid.features, false, 0).unwrap();
        let det = Detection {
            image_id: "r".into(),
            part_id: 1,
            bbox: PixelBox::new(0.0, 0.0, 100.0, 100.0),
            score: pass.parts.get(3, 2, 1),
            peak: (3, 2),
        };
        let r = explain_report(&m, scale, &scene, &det, 0).unwrap();
        assert!(r.cues.is_empty());
        assert!(r.exactness_error() < 1e-5);
        let r3 = explain_report(&m, scale, &scene, &det, 3).unwrap();
        assert_eq!(r3.cues.len(), 3);
        assert!(r3.cues[0].contribution >= r3.cues[1].contribution);
        let stale = Detection { score: det.score + 1.0, ..det };
        assert!(explain_report(&m, scale, &scene, &stale, 3).is_err());
    }
}
