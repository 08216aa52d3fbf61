//! Independent oracles shared by the integration tests and the acceptance run.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use defectforge::augment::{synthesize_sample, AllocationPolicy, DefectPatch, ImageBed, Overlap};
use defectforge::datakit::{
    export_coco, import_coco, manifest_from_str, manifest_to_string, AnnotatedImage, Annotation, BoundingBox,
    DatasetManifest, PatchOrigin,
};
use defectforge::evalkit::{evaluate, Detection, EvalConfig};
use defectforge::gpwgan::{gradient_penalty, Mlp, MlpSpec, OutputActivation};
use defectforge::ndgrad::{grad, Array, Tape, Tensor};
use defectforge::raster::GrayImage;
use defectforge::seed::rng_for;
use rand::Rng;

fn uniform_array(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        return norm(&diff);
    }
    norm(&diff) / scale
}

/// Central differences of `f` around every element of every input.
fn central_differences(inputs: &[Array], f: &dyn Fn(&[Array]) -> f64) -> Vec<f64> {
    let mut out = Vec::new();
    for k in 0..inputs.len() {
        for j in 0..inputs[k].len() {
            let v = inputs[k].data()[j];
            let h = 1e-5 * v.abs().max(1.0);
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] = v + h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] = v - h;
            out.push((f(&plus) - f(&minus)) / (2.0 * h));
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
enum Act {
    Tanh,
    Sigmoid,
    Softplus,
    Leaky,
    Square,
}

#[derive(Debug, Clone, Copy)]
enum Head {
    MeanSquare,
    Gram,
    Norm,
    LogRecip,
}

/// A small randomly wired network: dense layers with assorted activations
/// and one of several scalar heads.
#[derive(Debug, Clone)]
pub struct RandomNet {
    acts: Vec<Act>,
    head: Head,
    /// `x`, then `w, b` per layer.
    pub inputs: Vec<Array>,
}

pub fn random_net(seed: u64) -> RandomNet {
    let mut rng = rng_for(seed, "oracle/first-order", 0);
    let m = rng.random_range(1..=4);
    let layers = rng.random_range(1..=3);
    let mut widths = vec![rng.random_range(1..=4)];
    for _ in 0..layers {
        widths.push(rng.random_range(1..=5));
    }
    let mut inputs = vec![uniform_array(&mut rng, &[m, widths[0]], 1.0)];
    let mut acts = Vec::new();
    for pair in widths.windows(2) {
        inputs.push(uniform_array(&mut rng, &[pair[0], pair[1]], 1.0));
        inputs.push(uniform_array(&mut rng, &[1, pair[1]], 0.5));
        acts.push(match rng.random_range(0..5) {
            0 => Act::Tanh,
            1 => Act::Sigmoid,
            2 => Act::Softplus,
            3 => Act::Leaky,
            _ => Act::Square,
        });
    }
    let head = match rng.random_range(0..4) {
        0 => Head::MeanSquare,
        1 => Head::Gram,
        2 => Head::Norm,
        _ => Head::LogRecip,
    };
    RandomNet { acts, head, inputs }
}

impl RandomNet {
    fn output(&self, t: &[Tensor]) -> Tensor {
        let m = t[0].shape()[0];
        let ones = Tensor::constant(Array::full(&[m, 1], 1.0));
        let mut h = t[0].clone();
        for (i, act) in self.acts.iter().enumerate() {
            let z = h.matmul(&t[1 + 2 * i]).unwrap().add(&ones.matmul(&t[2 + 2 * i]).unwrap()).unwrap();
            h = match act {
                Act::Tanh => z.tanh(),
                Act::Sigmoid => z.sigmoid(),
                Act::Softplus => z.softplus(),
                Act::Leaky => z.leaky_relu(0.2),
                Act::Square => z.square(),
            }
            .unwrap();
        }
        match self.head {
            Head::MeanSquare => h.square().unwrap().mean().unwrap(),
            Head::Gram => h.transpose().unwrap().matmul(&h).unwrap().sum().unwrap(),
            Head::Norm => h.l2_norm().unwrap().add_scalar(0.1).unwrap().sqrt().unwrap(),
            Head::LogRecip => {
                let n = h.shape().iter().product();
                let flat = h.reshape(&[n]).unwrap();
                flat.square().unwrap().add_scalar(1.0).unwrap().recip().unwrap().ln().unwrap().sum().unwrap().neg().unwrap()
            }
        }
    }

    pub fn value(&self, inputs: &[Array]) -> f64 {
        let t: Vec<Tensor> = inputs.iter().cloned().map(Tensor::constant).collect();
        self.output(&t).item().unwrap()
    }

    pub fn gradient(&self) -> Vec<f64> {
        let tape = Tape::new();
        let t: Vec<Tensor> = self.inputs.iter().cloned().map(|a| tape.leaf(a)).collect();
        let out = self.output(&t);
        let refs: Vec<&Tensor> = t.iter().collect();
        grad(&out, &refs, false).unwrap().iter().flat_map(|g| g.data().to_vec()).collect()
    }
}

/// Relative error between reverse-mode and central-difference gradients of
/// one random network.
pub fn first_order_error(seed: u64) -> f64 {
    let net = random_net(seed);
    let fd = central_differences(&net.inputs, &|a| net.value(a));
    relative_error(&net.gradient(), &fd)
}

fn random_critic(seed: u64) -> (Mlp, Array) {
    let mut rng = rng_for(seed, "oracle/second-order", 0);
    let d = rng.random_range(2..=4);
    let hidden: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=6)).collect();
    let spec = MlpSpec {
        input: d,
        hidden,
        output: 1,
        activation: OutputActivation::Linear,
    };
    let mlp = Mlp::init(spec, &mut rng);
    let m = rng.random_range(1..=4);
    (mlp, uniform_array(&mut rng, &[m, d], 1.0))
}

fn penalty_at(mlp: &Mlp, params: &[Array], x_hat: &Array, lambda: f64) -> (f64, Vec<f64>) {
    let mut p = mlp.params.clone();
    for ((_, slot), v) in p.iter_mut().zip(params) {
        *slot = v.clone();
    }
    let critic = Mlp {
        spec: mlp.spec.clone(),
        params: p,
    };
    let tape = Tape::new();
    let bound = critic.bind(&tape);
    let xh = tape.leaf(x_hat.clone());
    let gp = gradient_penalty(&bound, &xh, lambda).unwrap();
    let g = grad(&gp, &bound.params(), false).unwrap();
    (gp.item().unwrap(), g.iter().flat_map(|t| t.data().to_vec()).collect())
}

/// Relative error of the penalty's parameter gradient (a second-order
/// quantity) against central differences of the penalty itself.
pub fn second_order_error(seed: u64) -> f64 {
    let (mlp, x_hat) = random_critic(seed);
    let params: Vec<Array> = mlp.params.iter().map(|(_, a)| a.clone()).collect();
    let (_, analytic) = penalty_at(&mlp, &params, &x_hat, 10.0);
    let fd = central_differences(&params, &|p| penalty_at(&mlp, p, &x_hat, 10.0).0);
    relative_error(&analytic, &fd)
}

/// Penalty and its gradient for the critic `D(x) = x · w`, where both are
/// known in closed form.
pub fn linear_critic_penalty(w: [f64; 2], lambda: f64) -> (f64, [f64; 2]) {
    let tape = Tape::new();
    let wt = tape.leaf(Array::new(vec![2, 1], w.to_vec()).unwrap());
    let critic = defectforge::gpwgan::LinearCritic { w: wt.clone() };
    let xh = tape.leaf(Array::new(vec![3, 2], vec![0.1, -0.7, 2.0, 0.3, -1.2, 0.0]).unwrap());
    let gp = gradient_penalty(&critic, &xh, lambda).unwrap();
    let g = grad(&gp, &[&wt], false).unwrap().remove(0);
    (gp.item().unwrap(), [g.data()[0], g.data()[1]])
}

fn bb(x: u32, y: u32, w: u32, h: u32) -> BoundingBox {
    BoundingBox::new(x, y, w, h).unwrap()
}

fn pixel_set(b: &BoundingBox) -> BTreeSet<(u64, u64)> {
    let mut s = BTreeSet::new();
    for y in u64::from(b.y)..b.bottom() {
        for x in u64::from(b.x)..b.right() {
            s.insert((x, y));
        }
    }
    s
}

/// IoU by counting covered pixels.
pub fn pixel_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (pa, pb) = (pixel_set(a), pixel_set(b));
    let inter = pa.intersection(&pb).count();
    if inter == 0 {
        return 0.0;
    }
    inter as f64 / pa.union(&pb).count() as f64
}

fn grid_box(rng: &mut impl Rng) -> BoundingBox {
    let (x, y) = (rng.random_range(0..5) * 3, rng.random_range(0..5) * 3);
    bb(x, y, rng.random_range(2..=9), rng.random_range(2..=9))
}

/// A random detection problem on a coarse grid so that boxes collide often
/// and scores tie.
pub fn random_detection_instance(seed: u64) -> (DatasetManifest, Vec<Detection>) {
    let mut rng = rng_for(seed, "oracle/ap", 0);
    let n_classes = rng.random_range(1..=3);
    let classes: Vec<String> = (0..n_classes).map(|c| format!("c{c}")).collect();
    let n_images = rng.random_range(1..=3);
    let mut m = DatasetManifest::new(classes.clone());
    for id in 0..n_images {
        m.images.push(AnnotatedImage {
            id: id as u64 * 7 + 1,
            file: format!("{id}.png"),
            width: 24,
            height: 24,
            annotations: Vec::new(),
            pixels: None,
        });
    }
    let mut dets = Vec::new();
    for class in &classes {
        for _ in 0..rng.random_range(0..=6) {
            let img = rng.random_range(0..n_images);
            let b = grid_box(&mut rng);
            m.images[img].annotations.push(Annotation {
                class_label: class.clone(),
                bbox: b,
            });
        }
        for _ in 0..rng.random_range(0..=10) {
            let img = rng.random_range(0..n_images);
            dets.push(Detection {
                image_id: m.images[img].id,
                class_label: class.clone(),
                bbox: grid_box(&mut rng),
                score: f64::from(rng.random_range(0..5u32)) / 4.0,
            });
        }
    }
    // Interleave classes so ranking cannot lean on input grouping.
    for i in (1..dets.len()).rev() {
        let j = rng.random_range(0..=i);
        dets.swap(i, j);
    }
    (m, dets)
}

/// Per-class AP (`None` without ground truth) and mAP by direct
/// construction of the precision-recall list.
pub fn brute_force_ap(gt: &DatasetManifest, dets: &[Detection], iou_thr: f64) -> (Vec<(String, Option<f64>)>, Option<f64>) {
    let mut classes = gt.classes.clone();
    for d in dets {
        if !classes.contains(&d.class_label) {
            classes.push(d.class_label.clone());
        }
    }
    let mut per_class = Vec::new();
    for class in &classes {
        let gts: Vec<(u64, BoundingBox)> = gt
            .images
            .iter()
            .flat_map(|img| {
                img.annotations
                    .iter()
                    .filter(|a| &a.class_label == class)
                    .map(move |a| (img.id, a.bbox))
            })
            .collect();
        let mut remaining: Vec<usize> = (0..dets.len()).filter(|&i| &dets[i].class_label == class).collect();
        let mut ranked = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for k in 1..remaining.len() {
                if dets[remaining[k]].score > dets[remaining[best]].score {
                    best = k;
                }
            }
            ranked.push(remaining.remove(best));
        }
        let mut taken = vec![false; gts.len()];
        let mut flags = Vec::new();
        for &i in &ranked {
            let mut choice: Option<(usize, f64)> = None;
            for (g, (img, b)) in gts.iter().enumerate() {
                if *img != dets[i].image_id || taken[g] {
                    continue;
                }
                let v = pixel_iou(&dets[i].bbox, b);
                if choice.is_none_or(|(_, c)| v > c) {
                    choice = Some((g, v));
                }
            }
            let hit = matches!(choice, Some((_, v)) if v >= iou_thr);
            if hit {
                taken[choice.unwrap().0] = true;
            }
            flags.push(hit);
        }
        if gts.is_empty() {
            per_class.push((class.clone(), None));
            continue;
        }
        let (mut tp, mut ap, mut prev_r) = (0usize, 0.0, 0.0);
        for (k, &f) in flags.iter().enumerate() {
            tp += usize::from(f);
            let p = tp as f64 / (k + 1) as f64;
            let r = tp as f64 / gts.len() as f64;
            ap += p * (r - prev_r);
            prev_r = r;
        }
        per_class.push((class.clone(), Some(ap)));
    }
    let aps: Vec<f64> = per_class.iter().filter_map(|c| c.1).collect();
    let map = if aps.is_empty() {
        None
    } else {
        let mut s = 0.0;
        for a in &aps {
            s += a;
        }
        Some(s / aps.len() as f64)
    };
    (per_class, map)
}

/// Whether `evaluate` agrees bit for bit with the brute-force construction.
pub fn ap_matches_oracle(seed: u64) -> Result<(), String> {
    let (gt, dets) = random_detection_instance(seed);
    let (expected, map) = brute_force_ap(&gt, &dets, 0.5);
    match (evaluate(&gt, &dets, &EvalConfig::default()), map) {
        (Err(_), None) => Ok(()),
        (Ok(report), Some(map)) => {
            if report.map != map {
                return Err(format!("seed {seed}: mAP {} vs {map}", report.map));
            }
            for (class, ap) in expected {
                if report.ap(&class) != ap {
                    return Err(format!("seed {seed}: class {class} AP {:?} vs {ap:?}", report.ap(&class)));
                }
            }
            Ok(())
        }
        (got, want) => Err(format!("seed {seed}: got {got:?}, oracle mAP {want:?}")),
    }
}

/// Greedy suppression by exhaustive rescans: repeatedly take the best
/// remaining box (first on ties) and drop everything overlapping it by at
/// least `thr`.
pub fn nms_reference(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut alive: Vec<bool> = vec![true; dets.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && best.is_none_or(|b| dets[i].score > dets[b].score) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        alive[b] = false;
        kept.push(dets[b].clone());
        for i in 0..dets.len() {
            if alive[i] && pixel_iou(&dets[i].bbox, &dets[b].bbox) >= thr {
                alive[i] = false;
            }
        }
    }
    kept
}

pub fn random_nms_case(seed: u64) -> (Vec<Detection>, f64) {
    let mut rng = rng_for(seed, "oracle/nms", 0);
    let n = rng.random_range(0..=15);
    let dets = (0..n)
        .map(|_| Detection {
            image_id: 0,
            class_label: "a".into(),
            bbox: bb(
                rng.random_range(0..6) * 2,
                rng.random_range(0..6) * 2,
                rng.random_range(1..=8),
                rng.random_range(1..=8),
            ),
            score: f64::from(rng.random_range(0..6u32)) / 5.0,
        })
        .collect();
    let thr = [0.0, 0.3, 0.5, 0.7][rng.random_range(0..4)];
    (dets, thr)
}

fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> GrayImage {
    GrayImage::new(w, h, (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// Random beds and a pool of patches with fractional masks, including hard
/// zeros and ones.
pub fn random_augment_inputs(seed: u64) -> (Vec<ImageBed>, Vec<DefectPatch>) {
    let mut rng = rng_for(seed, "oracle/augment", 0);
    let beds = (0..rng.random_range(1..=3))
        .map(|i| {
            let (w, h) = (rng.random_range(24..=40), rng.random_range(24..=40));
            ImageBed {
                pixels: Arc::new(random_image(&mut rng, w, h)),
                source_id: format!("bed-{i}"),
            }
        })
        .collect();
    let pool = (0..rng.random_range(1..=5))
        .map(|i| {
            let (w, h) = (rng.random_range(2..=8), rng.random_range(2..=8));
            let mut p = DefectPatch::real(random_image(&mut rng, w, h), format!("k{}", i % 2), format!("patch-{i}"));
            for v in p.mask.data_mut() {
                *v = match rng.random_range(0..4) {
                    0 => 0.0,
                    1 => 1.0,
                    _ => rng.random_range(0.0..1.0),
                };
            }
            if i % 2 == 1 {
                p.origin = PatchOrigin::Generated;
            }
            p
        })
        .collect();
    (beds, pool)
}

/// Checks one synthesized sample against an independent recomposition.
pub fn augment_roundtrip(seed: u64) -> Result<(), String> {
    let (beds, pool) = random_augment_inputs(seed);
    let policy = AllocationPolicy {
        defects_per_bed: [1, 4],
        overlap: Overlap::Disjoint,
        ..AllocationPolicy::default()
    };
    let sample = synthesize_sample(&beds, &pool, &policy, seed).map_err(|e| e.to_string())?;
    let again = synthesize_sample(&beds, &pool, &policy, seed).map_err(|e| e.to_string())?;
    let img = sample.image.pixels().map_err(|e| e.to_string())?;
    let img2 = again.image.pixels().map_err(|e| e.to_string())?;
    let bits = |g: &GrayImage| g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    if bits(img) != bits(img2) || img.to_u8() != img2.to_u8() || sample.provenance != again.provenance {
        return Err(format!("seed {seed}: rerun differs"));
    }
    let bed = beds
        .iter()
        .find(|b| b.source_id == sample.provenance.bed_source)
        .ok_or("unknown bed")?;
    let placements = &sample.provenance.placements;
    if placements.len() != sample.image.annotations.len() || placements.is_empty() {
        return Err(format!("seed {seed}: {} placements", placements.len()));
    }
    let mut covered = vec![false; img.width() * img.height()];
    for (i, rec) in placements.iter().enumerate() {
        let ann = &sample.image.annotations[i];
        let b = ann.bbox;
        if b.to_array() != rec.bbox || ann.class_label != rec.class {
            return Err(format!("seed {seed}: annotation {i} disagrees with provenance"));
        }
        let patch = pool.iter().find(|p| p.source == rec.source).ok_or("unknown patch")?;
        if (patch.width(), patch.height()) != (b.w as usize, b.h as usize) || patch.class_label != ann.class_label {
            return Err(format!("seed {seed}: box {i} does not fit its patch"));
        }
        for other in &sample.image.annotations[..i] {
            if pixel_iou(&other.bbox, &b) != 0.0 {
                return Err(format!("seed {seed}: overlapping boxes"));
            }
        }
        for py in 0..b.h as usize {
            for px in 0..b.w as usize {
                let (x, y) = (b.x as usize + px, b.y as usize + py);
                let m = patch.mask.get(px, py);
                let want = m * patch.pixels.get(px, py) + (1.0 - m) * bed.pixels.get(x, y);
                if img.get(x, y).to_bits() != want.to_bits() {
                    return Err(format!("seed {seed}: pixel ({x},{y}) {} != {want}", img.get(x, y)));
                }
                covered[y * img.width() + x] = true;
            }
        }
    }
    for y in 0..img.height() {
        for x in 0..img.width() {
            if !covered[y * img.width() + x] && img.get(x, y).to_bits() != bed.pixels.get(x, y).to_bits() {
                return Err(format!("seed {seed}: background pixel ({x},{y}) changed"));
            }
        }
    }
    Ok(())
}

pub fn random_manifest(seed: u64) -> DatasetManifest {
    let mut rng = rng_for(seed, "oracle/manifest", 0);
    let classes: Vec<String> = (0..rng.random_range(0..=4)).map(|c| format!("class {c}")).collect();
    let mut m = DatasetManifest::new(classes.clone());
    let mut id = rng.random_range(0..100u64);
    for i in 0..rng.random_range(0..=6) {
        id += rng.random_range(1..50);
        let (w, h) = (rng.random_range(1..=300u32), rng.random_range(1..=300u32));
        let annotations = if classes.is_empty() {
            Vec::new()
        } else {
            (0..rng.random_range(0..=5))
                .map(|_| {
                    let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
                    Annotation {
                        class_label: classes[rng.random_range(0..classes.len())].clone(),
                        bbox: bb(x, y, rng.random_range(1..=w - x), rng.random_range(1..=h - y)),
                    }
                })
                .collect()
        };
        m.images.push(AnnotatedImage {
            id,
            file: format!("img/{i:03}.png"),
            width: w,
            height: h,
            annotations,
            pixels: None,
        });
    }
    m
}

/// Canonical text and COCO JSON both reproduce the manifest.
pub fn formats_roundtrip(seed: u64) -> Result<(), String> {
    let m = random_manifest(seed);
    let text = manifest_to_string(&m);
    let back = manifest_from_str(&text, "canonical").map_err(|e| e.to_string())?;
    if back != m {
        return Err(format!("seed {seed}: canonical round trip differs"));
    }
    let coco_text = serde_json::to_string(&export_coco(&m)).map_err(|e| e.to_string())?;
    let coco = serde_json::from_str(&coco_text).map_err(|e| e.to_string())?;
    let back = import_coco(&coco, "coco").map_err(|e| e.to_string())?;
    if back != m {
        return Err(format!("seed {seed}: COCO round trip differs"));
    }
    Ok(())
}
