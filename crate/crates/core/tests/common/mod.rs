//! Oracles shared by the integration and acceptance targets.

#![allow(dead_code)]

use deepvote::detect::Detection;
use deepvote::eval::GroundTruth;
use deepvote::geometry::PixelBox;
use deepvote::model::{dice_coefficient, dice_loss_backward, DeepVotingModel, DICE_EPS};
use deepvote::tensor::{conv2d_backward, conv2d_forward, dropout, dropout_backward, relu, relu_backward};
use deepvote::tensor::{ConvKernel, DropoutMask, Padding, Tensor3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Step for central differences on the f64 reference.
const FD_STEP: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, floor)`. Analytic gradients accumulate in f32,
/// so entries that cancel to below the floor carry O(1e-7) absolute error
/// and are judged against the floor instead of their own size.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: &'static str,
    pub instances: usize,
    pub entries: usize,
    pub worst: f64,
}

impl GradCheck {
    fn new(name: &'static str) -> Self {
        GradCheck {
            name,
            instances: 0,
            entries: 0,
            worst: 0.0,
        }
    }

    fn record(&mut self, analytic: &[f32], numeric: &[f64]) {
        assert_eq!(analytic.len(), numeric.len(), "{}: gradient length", self.name);
        for (a, n) in analytic.iter().zip(numeric) {
            self.worst = self.worst.max(rel_err(f64::from(*a), *n));
        }
        self.entries += analytic.len();
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn tensor(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Tensor3 {
    Tensor3::from_vec(w, h, c, uniform(rng, w * h * c, -1.0, 1.0)).unwrap()
}

fn wide(v: &[f32]) -> Vec<f64> {
    v.iter().map(|x| f64::from(*x)).collect()
}

/// f64 conv over row-major `(h, w, c)` data, written in gather form.
#[allow(clippy::too_many_arguments)]
fn ref_conv(
    x: &[f64],
    (xw, xh, cin): (usize, usize, usize),
    wts: &[f64],
    bias: &[f64],
    (kh, kw, cout): (usize, usize, usize),
    pad: Padding,
) -> (Vec<f64>, usize, usize) {
    let (ph, pw, ow, oh) = match pad {
        Padding::Same => (kh / 2, kw / 2, xw, xh),
        Padding::Valid => (0, 0, xw + 1 - kw, xh + 1 - kh),
    };
    let mut out = vec![0.0; ow * oh * cout];
    for h in 0..oh {
        for w in 0..ow {
            for o in 0..cout {
                let mut acc = bias[o];
                for i in 0..kh {
                    for j in 0..kw {
                        let (sh, sw) = (h as i64 + i as i64 - ph as i64, w as i64 + j as i64 - pw as i64);
                        if sh < 0 || sw < 0 || sh >= xh as i64 || sw >= xw as i64 {
                            continue;
                        }
                        for c in 0..cin {
                            let xv = x[((sh as usize * xw) + sw as usize) * cin + c];
                            acc += wts[((i * kw + j) * cin + c) * cout + o] * xv;
                        }
                    }
                }
                out[(h * ow + w) * cout + o] = acc;
            }
        }
    }
    (out, ow, oh)
}

fn ref_dice(z: &[f64], l: &[f64], channels: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..channels {
        let (mut zl, mut sq) = (0.0, 0.0);
        for (zv, lv) in z.iter().skip(c).step_by(channels).zip(l.iter().skip(c).step_by(channels)) {
            zl += zv * lv;
            sq += zv * zv + lv * lv;
        }
        total += (2.0 * zl + DICE_EPS) / (sq + DICE_EPS);
    }
    total / channels as f64
}

/// Central differences of `f` with respect to every entry of `params`.
fn numeric_grad(params: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + FD_STEP;
            let up = f(&p);
            p[i] = orig - FD_STEP;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_conv(rng: &mut ChaCha8Rng, out: &mut GradCheck) {
    let k = [1usize, 3, 5][rng.gen_range(0..3)];
    let pad = if rng.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
    let (w, h) = (rng.gen_range(k..k + 4), rng.gen_range(k..k + 4));
    let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
    let x = tensor(rng, w, h, cin);
    let kernel = ConvKernel::new(
        k,
        k,
        cin,
        cout,
        uniform(rng, k * k * cin * cout, -1.0, 1.0),
        uniform(rng, cout, -1.0, 1.0),
    )
    .unwrap();
    let y = conv2d_forward(&x, &kernel, pad).unwrap();
    let g = tensor(rng, y.width, y.height, y.channels);
    let grads = conv2d_backward(&x, &kernel, &g, pad).unwrap();

    let (xs, ws, bs, gs) = (wide(&x.data), wide(&kernel.weights), wide(&kernel.bias), wide(&g.data));
    let shape = (k, k, cout);
    let dims = (w, h, cin);
    out.record(
        &grads.grad_x.data,
        &numeric_grad(&xs, |p| dot(&ref_conv(p, dims, &ws, &bs, shape, pad).0, &gs)),
    );
    out.record(
        &grads.grad_weights,
        &numeric_grad(&ws, |p| dot(&ref_conv(&xs, dims, p, &bs, shape, pad).0, &gs)),
    );
    out.record(
        &grads.grad_bias,
        &numeric_grad(&bs, |p| dot(&ref_conv(&xs, dims, &ws, p, shape, pad).0, &gs)),
    );
    out.instances += 1;
}

fn check_relu(rng: &mut ChaCha8Rng, out: &mut GradCheck) {
    let (w, h, c) = (rng.gen_range(2..6), rng.gen_range(2..6), rng.gen_range(1..4));
    // Keep away from the kink so central differences see one side only.
    let data = (0..w * h * c)
        .map(|_| {
            let v: f32 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    let x = Tensor3::from_vec(w, h, c, data).unwrap();
    let g = tensor(rng, w, h, c);
    let _ = relu(&x);
    let analytic = relu_backward(&x, &g).unwrap();
    let gs = wide(&g.data);
    let numeric = numeric_grad(&wide(&x.data), |p| {
        p.iter().zip(&gs).map(|(v, gv)| v.max(0.0) * gv).sum()
    });
    out.record(&analytic.data, &numeric);
    out.instances += 1;
}

/// Inference-mode dropout is the identity; training mode with a frozen mask
/// is linear in its input.
fn check_dropout(rng: &mut ChaCha8Rng, out: &mut GradCheck) {
    let (w, h, c) = (rng.gen_range(2..6), rng.gen_range(2..6), rng.gen_range(1..4));
    let x = tensor(rng, w, h, c);
    let g = tensor(rng, w, h, c);
    let gs = wide(&g.data);
    let xs = wide(&x.data);
    for training in [false, true] {
        let (_, mask) = dropout(&x, 0.5, rng.gen(), training).unwrap();
        let analytic = dropout_backward(&mask, &g).unwrap();
        let keep = mask.keep.clone();
        let scale = f64::from(mask.scale);
        let numeric = numeric_grad(&xs, |p| {
            p.iter()
                .zip(&keep)
                .zip(&gs)
                .map(|((v, k), gv)| if *k { v * scale * gv } else { 0.0 })
                .sum()
        });
        out.record(&analytic.data, &numeric);
    }
    out.instances += 1;
}

fn check_dice(rng: &mut ChaCha8Rng, out: &mut GradCheck) {
    let (w, h, c) = (rng.gen_range(2..6), rng.gen_range(2..6), rng.gen_range(1..4));
    let z = tensor(rng, w, h, c);
    let l = Tensor3::from_vec(w, h, c, uniform(rng, w * h * c, 0.0, 1.0)).unwrap();
    let analytic = dice_loss_backward(&z, &l, DICE_EPS).unwrap();
    let ls = wide(&l.data);
    let numeric = numeric_grad(&wide(&z.data), |p| 1.0 - ref_dice(p, &ls, c));
    out.record(&analytic.data, &numeric);
    // The f32 path and the f64 reference agree on the loss itself.
    let d = dice_coefficient(&z, &l, DICE_EPS).unwrap();
    assert!((d - ref_dice(&wide(&z.data), &ls, c)).abs() < 1e-5);
    out.instances += 1;
}

struct HeadShape {
    w: usize,
    h: usize,
    d: usize,
    v: usize,
    s: usize,
    k: usize,
}

fn ref_head_loss(
    x: &[f64],
    sh: &HeadShape,
    params: [&[f64]; 4],
    mask: &DropoutMask,
    labels: &[f64],
) -> f64 {
    let [cw, cb, vw, vb] = params;
    let (pre, _, _) = ref_conv(x, (sh.w, sh.h, sh.d), cw, cb, (1, 1, sh.v), Padding::Same);
    let scale = f64::from(mask.scale);
    let y: Vec<f64> = pre
        .iter()
        .zip(&mask.keep)
        .map(|(a, k)| if *k { a.max(0.0) * scale } else { 0.0 })
        .collect();
    let (z, _, _) = ref_conv(&y, (sh.w, sh.h, sh.v), vw, vb, (sh.k, sh.k, sh.s), Padding::Same);
    1.0 - ref_dice(&z, labels, sh.s)
}

fn check_head(rng: &mut ChaCha8Rng, out: &mut GradCheck) {
    let sh = HeadShape {
        w: rng.gen_range(3..7),
        h: rng.gen_range(3..7),
        d: rng.gen_range(2..5),
        v: rng.gen_range(2..5),
        s: rng.gen_range(1..3),
        k: [1usize, 3, 5][rng.gen_range(0..3)],
    };
    let concept = ConvKernel::new(
        1,
        1,
        sh.d,
        sh.v,
        uniform(rng, sh.d * sh.v, -1.0, 1.0),
        uniform(rng, sh.v, -0.2, 0.4),
    )
    .unwrap();
    let voting = ConvKernel::new(
        sh.k,
        sh.k,
        sh.v,
        sh.s,
        uniform(rng, sh.k * sh.k * sh.v * sh.s, -1.0, 1.0),
        uniform(rng, sh.s, -0.5, 0.5),
    )
    .unwrap();
    let model = DeepVotingModel::from_kernels(concept, voting, 0.5).unwrap();
    let x = tensor(rng, sh.w, sh.h, sh.d);
    let labels = Tensor3::from_vec(sh.w, sh.h, sh.s, uniform(rng, sh.w * sh.h * sh.s, 0.0, 1.0)).unwrap();
    let training = rng.gen_bool(0.5);
    let seed: u64 = rng.gen();
    let pass = model.forward(&x, training, seed).unwrap();
    // Pre-activations within one step of zero would straddle the ReLU kink.
    if pass.pre_activation.data.iter().any(|a| f64::from(*a).abs() < 1e-3) {
        return;
    }
    let (_, grads) = model.loss_and_grads(&x, &labels, training, seed).unwrap();

    let xs = wide(&x.data);
    let ls = wide(&labels.data);
    let cw = wide(&model.concept.weights);
    let cb = wide(&model.concept.bias);
    let vw = wide(&model.voting.weights);
    let vb = wide(&model.voting.bias);
    let mask = &pass.mask;
    out.record(
        &grads.concept_weights,
        &numeric_grad(&cw, |p| ref_head_loss(&xs, &sh, [p, &cb, &vw, &vb], mask, &ls)),
    );
    out.record(
        &grads.concept_bias,
        &numeric_grad(&cb, |p| ref_head_loss(&xs, &sh, [&cw, p, &vw, &vb], mask, &ls)),
    );
    out.record(
        &grads.voting_weights,
        &numeric_grad(&vw, |p| ref_head_loss(&xs, &sh, [&cw, &cb, p, &vb], mask, &ls)),
    );
    out.record(
        &grads.voting_bias,
        &numeric_grad(&vb, |p| ref_head_loss(&xs, &sh, [&cw, &cb, &vw, p], mask, &ls)),
    );
    out.instances += 1;
}

/// Runs every backward against central differences of an independent f64
/// forward until each component has `instances` accepted draws.
pub fn gradient_suite(seed: u64, instances: usize) -> Vec<GradCheck> {
    type Check = fn(&mut ChaCha8Rng, &mut GradCheck);
    let checks: [(&'static str, Check); 5] = [
        ("conv", check_conv),
        ("relu", check_relu),
        ("dropout", check_dropout),
        ("dice", check_dice),
        ("head", check_head),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    checks
        .iter()
        .map(|(name, check)| {
            let mut report = GradCheck::new(name);
            let mut attempts = 0;
            while report.instances < instances {
                attempts += 1;
                assert!(attempts < instances * 20, "{name}: too many rejected draws");
                check(&mut rng, &mut report);
            }
            report
        })
        .collect()
}

/// AP as the mean over recall levels `k / n` of the best precision reached
/// by any prefix holding at least `k` true positives.
pub fn staircase_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for k in 1..=num_gt {
        let mut best: f64 = 0.0;
        let mut hits = 0;
        for (i, &t) in tp.iter().enumerate() {
            hits += usize::from(t);
            if hits >= k {
                best = best.max(hits as f64 / (i + 1) as f64);
            }
        }
        total += best;
    }
    total / num_gt as f64
}

fn oracle_iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = (a.x as f64, a.y as f64, (a.x + a.w) as f64, (a.y + a.h) as f64);
    let (bx0, by0, bx1, by1) = (b.x as f64, b.y as f64, (b.x + b.w) as f64, (b.y + b.h) as f64);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    inter / ((ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter)
}

/// Greedy matching by exhaustive scan over ground truths, in score order
/// with ties broken by image id then row-major peak.
pub fn brute_force_tp(dets: &[Detection], gts: &[GroundTruth], thresh: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&dets[a], &dets[b]);
        y.score
            .partial_cmp(&x.score)
            .unwrap()
            .then(x.image_id.cmp(&y.image_id))
            .then((x.peak.1, x.peak.0).cmp(&(y.peak.1, y.peak.0)))
    });
    let mut used = vec![false; gts.len()];
    let mut tp = Vec::new();
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, truth) in gts.iter().enumerate() {
            if used[g] || truth.image_id != dets[i].image_id {
                continue;
            }
            let v = oracle_iou(&dets[i].bbox, &truth.bbox);
            if v >= thresh && best.map_or(true, |(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
        }
        tp.push(best.is_some());
    }
    tp
}

/// A few images with boxes on a coarse lattice so IoU ties and score ties
/// both occur.
pub fn micro_instance(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GroundTruth>) {
    let images = rng.gen_range(1..4);
    let lattice_box = |rng: &mut ChaCha8Rng| {
        PixelBox::new(
            rng.gen_range(0..6) as f32 * 8.0,
            rng.gen_range(0..6) as f32 * 8.0,
            rng.gen_range(2..6) as f32 * 8.0,
            rng.gen_range(2..6) as f32 * 8.0,
        )
    };
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for img in 0..images {
        let id = format!("img{img}");
        for _ in 0..rng.gen_range(0..4) {
            gts.push(GroundTruth {
                image_id: id.clone(),
                bbox: lattice_box(rng),
            });
        }
        for p in 0..rng.gen_range(0..7) {
            let anchored = gts.iter().filter(|g| g.image_id == id).count() > 0 && rng.gen_bool(0.5);
            let bbox = if anchored {
                let g = gts.iter().filter(|g| g.image_id == id).last().unwrap().bbox;
                PixelBox::new(g.x + rng.gen_range(-1..2) as f32 * 4.0, g.y, g.w, g.h)
            } else {
                lattice_box(rng)
            };
            dets.push(Detection {
                image_id: id.clone(),
                part_id: 0,
                bbox,
                score: rng.gen_range(0..5) as f32 / 4.0,
                peak: (p, 0),
            });
        }
    }
    (dets, gts)
}
