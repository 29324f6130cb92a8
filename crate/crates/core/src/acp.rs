//! Affordances via context prediction: training-patch sampling, masked
//! asymmetric contexts, targets and losses, and multi-scale heatmap
//! inference.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array_file::write_array;
use crate::detections::{Detection, FrameDetections};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image_ops::{blur_plane, Image, Normalization};
use crate::models::{AcpModel, AcpModelSpec, AcpOutput, MaskRegion};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcpConfig {
    pub hand_scale_range: (f32, f32),
    pub object_scale_range: (f32, f32),
    pub det_conf_min: f32,
    /// Largest accepted hand or object side at the reference width.
    pub det_max_side: f32,
    /// Smallest object side (reference width) for object patches.
    pub object_min_side: f32,
    /// Image width the pixel constants refer to.
    pub reference_width: f32,
    pub hand_patches_per_hand: usize,
    pub object_patches_per_object: usize,
    pub negatives_per_frame: usize,
    pub pos_weight: f32,
    pub grasp_loss_weight: f32,
    pub grasp_neg_count: usize,
    pub infer_patch_sides: Vec<f32>,
    pub infer_patches_per_side: usize,
    pub aggregation: Aggregation,
    pub smooth: bool,
    pub smooth_sigma: f32,
    pub combine_weight: f32,
    pub no_hand_prediction: bool,
    pub no_hand_hiding: bool,
    pub symmetric_context: bool,
    pub no_contact_filtering: bool,
    pub no_object_prediction: bool,
}

impl Default for AcpConfig {
    fn default() -> Self {
        AcpConfig {
            hand_scale_range: (1.0, 1.3),
            object_scale_range: (0.5, 0.75),
            det_conf_min: 0.8,
            det_max_side: 150.0,
            object_min_side: 20.0,
            reference_width: 1920.0,
            hand_patches_per_hand: 1,
            object_patches_per_object: 1,
            negatives_per_frame: 1,
            pos_weight: 4.0,
            grasp_loss_weight: 0.5,
            grasp_neg_count: 15,
            infer_patch_sides: vec![60.0, 100.0, 160.0],
            infer_patches_per_side: 300,
            aggregation: Aggregation::Mean,
            smooth: true,
            smooth_sigma: 25.0,
            combine_weight: 2.0 / 3.0,
            no_hand_prediction: false,
            no_hand_hiding: false,
            symmetric_context: false,
            no_contact_filtering: false,
            no_object_prediction: false,
        }
    }
}

impl AcpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("acp: {m}")));
        let ordered = |r: (f32, f32)| r.0 > 0.0 && r.0 <= r.1;
        if !ordered(self.hand_scale_range) || !ordered(self.object_scale_range) {
            return bad("scale ranges must be positive and ordered");
        }
        if !(self.pos_weight > 0.0 && self.grasp_loss_weight > 0.0) {
            return bad("loss weights must be positive");
        }
        if !(self.reference_width > 0.0 && self.det_max_side > 0.0) {
            return bad("reference_width and det_max_side must be positive");
        }
        if self.infer_patch_sides.is_empty() || self.infer_patch_sides.iter().any(|&s| s <= 0.0) {
            return bad("need positive inference patch sides");
        }
        if self.infer_patches_per_side == 0 {
            return bad("infer_patches_per_side must be positive");
        }
        if !(0.0..=1.0).contains(&self.combine_weight) {
            return bad("combine_weight must be in [0, 1]");
        }
        Ok(())
    }

    /// Pixel scale factor for an image of the given width.
    pub fn scale(&self, image_width: f32) -> f32 {
        image_width / self.reference_width
    }

    fn accepts(&self, d: &Detection, scale: f32) -> bool {
        d.score >= self.det_conf_min && d.bbox.width().max(d.bbox.height()) <= self.det_max_side * scale
    }

    /// Hands that may seed positive patches.
    pub fn usable_hands<'a>(&self, frame: &'a FrameDetections) -> Vec<&'a Detection> {
        let scale = self.scale(frame.image_size.0 as f32);
        frame
            .detections
            .iter()
            .filter(|d| d.is_hand() && (self.no_contact_filtering || d.in_contact()) && self.accepts(d, scale))
            .collect()
    }

    pub fn usable_objects<'a>(&self, frame: &'a FrameDetections) -> Vec<&'a Detection> {
        let scale = self.scale(frame.image_size.0 as f32);
        frame
            .detections
            .iter()
            .filter(|d| !d.is_hand() && self.accepts(d, scale))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchRole {
    HandPos,
    ObjectPos,
    Negative,
}

/// Square patch; the hidden region of a context sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub center: (f32, f32),
    pub side: f32,
    pub role: PatchRole,
    /// Grasp scores of the hand that seeded a `HandPos` patch.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grasp_scores: Option<Vec<f32>>,
}

impl PatchSpec {
    pub fn new(center: (f32, f32), side: f32, role: PatchRole) -> Self {
        PatchSpec {
            center,
            side,
            role,
            grasp_scores: None,
        }
    }

    pub fn bbox(&self) -> Result<BBox> {
        BBox::from_center(self.center.0, self.center.1, self.side, self.side)
    }
}

/// Boxes pasted into segmentation targets for one frame.
pub fn gt_boxes(frame: &FrameDetections, cfg: &AcpConfig) -> Vec<BBox> {
    let mut boxes: Vec<BBox> = cfg.usable_hands(frame).iter().map(|d| d.bbox).collect();
    if !cfg.no_object_prediction {
        boxes.extend(cfg.usable_objects(frame).iter().map(|d| d.bbox));
    }
    boxes
}

/// Draws hand-positive, object-positive and negative patches for a frame.
pub fn sample_training_patches(frame: &FrameDetections, cfg: &AcpConfig, rng: &mut ChaCha8Rng) -> Vec<PatchSpec> {
    let (w, h) = (frame.image_size.0 as f32, frame.image_size.1 as f32);
    let scale = cfg.scale(w);
    let hands = cfg.usable_hands(frame);
    let mut out = Vec::new();
    for hand in &hands {
        let base = hand.bbox.width().max(hand.bbox.height());
        for _ in 0..cfg.hand_patches_per_hand {
            let side = base * rng.random_range(cfg.hand_scale_range.0..=cfg.hand_scale_range.1);
            let mut p = PatchSpec::new(hand.bbox.center(), side, PatchRole::HandPos);
            p.grasp_scores = hand.grasp_scores.clone();
            out.push(p);
        }
    }
    if !cfg.no_object_prediction {
        for obj in cfg.usable_objects(frame) {
            let b = obj.bbox;
            if b.width().min(b.height()) <= cfg.object_min_side * scale {
                continue;
            }
            for _ in 0..cfg.object_patches_per_object {
                let side = b.width().min(b.height()) * rng.random_range(cfg.object_scale_range.0..=cfg.object_scale_range.1);
                let cx = rng.random_range(b.x1 + side / 2.0..=b.x2 - side / 2.0);
                let cy = rng.random_range(b.y1 + side / 2.0..=b.y2 - side / 2.0);
                out.push(PatchSpec::new((cx, cy), side, PatchRole::ObjectPos));
            }
        }
    }
    let sides: Vec<f32> = if hands.is_empty() {
        cfg.infer_patch_sides.iter().map(|s| s * scale).collect()
    } else {
        hands
            .iter()
            .map(|d| d.bbox.width().max(d.bbox.height()) * cfg.hand_scale_range.0)
            .collect()
    };
    let all_hands: Vec<BBox> = frame.detections.iter().filter(|d| d.is_hand()).map(|d| d.bbox).collect();
    for _ in 0..cfg.negatives_per_frame {
        for _ in 0..20 {
            let side = sides[rng.random_range(0..sides.len())].min(w).min(h);
            let cx = rng.random_range(side / 2.0..=w - side / 2.0);
            let cy = rng.random_range(side / 2.0..=h - side / 2.0);
            let p = PatchSpec::new((cx, cy), side, PatchRole::Negative);
            let Ok(b) = p.bbox() else { break };
            if all_hands.iter().all(|hb| hb.intersection_area(&b) == 0.0) {
                out.push(p);
                break;
            }
        }
    }
    out
}

/// Placement of a patch inside its context window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContextLayout {
    /// Context window `[x0, y0, x1, y1]` in image coordinates.
    pub window: [f32; 4],
    /// Hidden region in network-input pixels.
    pub mask: MaskRegion,
    /// Image-space area covered by the hidden region.
    pub footprint: [f32; 4],
}

/// Computes the 2s × 2s context window with the patch at its bottom
/// center (or center when `symmetric`), shifted to stay inside the image.
pub fn context_layout(patch: &PatchSpec, image_size: (usize, usize), input_size: usize, symmetric: bool) -> Result<ContextLayout> {
    let s = patch.side;
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Degenerate(format!("patch side {s}")));
    }
    let (w, h) = (image_size.0 as f32, image_size.1 as f32);
    let (cx, cy) = patch.center;
    let mut x0 = cx - s;
    let mut y0 = if symmetric { cy - s } else { cy + s / 2.0 - 2.0 * s };
    let fit = |v: f32, extent: f32| {
        if 2.0 * s <= extent {
            v.clamp(0.0, extent - 2.0 * s)
        } else {
            (extent - 2.0 * s) / 2.0
        }
    };
    x0 = fit(x0, w);
    y0 = fit(y0, h);
    let k = input_size as f32 / (2.0 * s);
    let half = input_size / 2;
    let place = |v: f32| ((v * k).round().max(0.0) as usize).min(input_size - half);
    let mx = place(cx - s / 2.0 - x0);
    let my = place(cy - s / 2.0 - y0);
    let fx = x0 + mx as f32 / k;
    let fy = y0 + my as f32 / k;
    Ok(ContextLayout {
        window: [x0, y0, x0 + 2.0 * s, y0 + 2.0 * s],
        mask: MaskRegion {
            x0: mx,
            y0: my,
            x1: mx + half,
            y1: my + half,
        },
        footprint: [fx, fy, fx + s, fy + s],
    })
}

/// Per-class grasp supervision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraspLabel {
    Pos,
    Neg,
    Ignore,
}

/// Argmax positive (lowest index on ties), the `min(k, G−1)` lowest
/// scores negative, the rest ignored.
pub fn grasp_targets(scores: &[f32], k: usize) -> Result<Vec<GraspLabel>> {
    let g = scores.len();
    if g < 2 {
        return Err(Error::invalid("grasp targets need at least two classes"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite grasp score".into()));
    }
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut labels = vec![GraspLabel::Ignore; g];
    labels[order[0]] = GraspLabel::Pos;
    for &i in order[1..].iter().rev().take(k.min(g - 1)) {
        labels[i] = GraspLabel::Neg;
    }
    Ok(labels)
}

#[derive(Clone, Debug)]
pub struct ContextSample {
    /// `[3, S, S]`, normalized, hidden region filled with zero.
    pub input: Tensor,
    /// `SEG_SIZE × SEG_SIZE` values in `{0, 1}`.
    pub seg_target: Vec<f32>,
    pub grasp_target: Option<Vec<GraspLabel>>,
    pub layout: ContextLayout,
}

/// Resamples the context window to `input_size²` and normalizes it,
/// without hiding anything.
pub fn extract_context(image: &Image, layout: &ContextLayout, input_size: usize, norm: &Normalization) -> Result<Tensor> {
    Ok(image.resample(layout.window, input_size, input_size)?.to_tensor(norm))
}

/// Sets the hidden region of a `[3, S, S]` input to the fill value.
pub fn hide_region(input: &mut Tensor, mask: &MaskRegion) {
    let s = input.shape()[2];
    let data = input.data_mut();
    for c in 0..3 {
        for y in mask.y0..mask.y1 {
            data[(c * s + y) * s + mask.x0..(c * s + y) * s + mask.x1].fill(0.0);
        }
    }
}

/// The fill step of [`make_context`]: hides the region unless the
/// `no_hand_hiding` ablation is set.
pub fn apply_hiding(input: &mut Tensor, mask: &MaskRegion, cfg: &AcpConfig) {
    if !cfg.no_hand_hiding {
        hide_region(input, mask);
    }
}

/// Rasterizes the union of `boxes` over `footprint` at `size²` cells; a
/// cell is set when at least half of it is covered.
pub fn seg_target(footprint: [f32; 4], boxes: &[BBox], size: usize) -> Vec<f32> {
    const SUB: usize = 4;
    let [fx0, fy0, fx1, fy1] = footprint;
    let (cw, ch) = ((fx1 - fx0) / size as f32, (fy1 - fy0) / size as f32);
    let relevant: Vec<&BBox> = boxes
        .iter()
        .filter(|b| b.x2 > fx0 && b.x1 < fx1 && b.y2 > fy0 && b.y1 < fy1)
        .collect();
    let mut out = vec![0.0; size * size];
    if relevant.is_empty() {
        return out;
    }
    for v in 0..size {
        for u in 0..size {
            let mut hits = 0;
            for sy in 0..SUB {
                let y = fy0 + (v as f32 + (sy as f32 + 0.5) / SUB as f32) * ch;
                for sx in 0..SUB {
                    let x = fx0 + (u as f32 + (sx as f32 + 0.5) / SUB as f32) * cw;
                    if relevant.iter().any(|b| x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2) {
                        hits += 1;
                    }
                }
            }
            if 2 * hits >= SUB * SUB {
                out[v * size + u] = 1.0;
            }
        }
    }
    out
}

/// Builds one training or inference sample for `patch`.
pub fn make_context(
    image: &Image,
    patch: &PatchSpec,
    boxes: &[BBox],
    input_size: usize,
    norm: &Normalization,
    cfg: &AcpConfig,
) -> Result<ContextSample> {
    let layout = context_layout(patch, (image.width, image.height), input_size, cfg.symmetric_context)?;
    let mut input = extract_context(image, &layout, input_size, norm)?;
    apply_hiding(&mut input, &layout.mask, cfg);
    let grasp_target = match (&patch.grasp_scores, patch.role) {
        (Some(s), PatchRole::HandPos) if !cfg.no_hand_prediction => Some(grasp_targets(s, cfg.grasp_neg_count)?),
        _ => None,
    };
    Ok(ContextSample {
        input,
        seg_target: seg_target(layout.footprint, boxes, AcpModelSpec::SEG_SIZE),
        grasp_target,
        layout,
    })
}

#[derive(Clone, Debug)]
pub struct AcpLoss {
    pub total: f64,
    pub seg: f64,
    pub grasp: f64,
    pub d_seg: Tensor,
    /// `None` when no sample carries grasp supervision.
    pub d_grasp: Option<Tensor>,
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `L_seg + w · L_grasp`: pixel-mean BCE with weighted positives, plus
/// mean BCE over non-ignored grasp classes of supervised samples.
pub fn acp_loss(
    seg_logits: &Tensor,
    seg_targets: &[Vec<f32>],
    grasp_logits: &Tensor,
    grasp_targets: &[Option<Vec<GraspLabel>>],
    cfg: &AcpConfig,
) -> Result<AcpLoss> {
    let n = seg_logits.batch();
    if seg_targets.len() != n || grasp_targets.len() != n {
        return Err(Error::invalid("one target per sample required"));
    }
    let px = seg_logits.item_len();
    let pw = cfg.pos_weight as f64;
    let mut seg = 0.0;
    let mut d_seg = vec![0.0f32; n * px];
    let norm = (n * px) as f64;
    for i in 0..n {
        let z = seg_logits.item(i);
        let y = &seg_targets[i];
        if y.len() != px {
            return Err(Error::Shape {
                expected: vec![px],
                got: vec![y.len()],
            });
        }
        for j in 0..px {
            let zj = z[j] as f64;
            let yj = y[j] as f64;
            // -[pw y log σ + (1-y) log(1-σ)]
            seg += pw * yj * softplus(-zj) + (1.0 - yj) * softplus(zj);
            let s = sigmoid(zj);
            d_seg[i * px + j] = ((pw * yj * (s - 1.0) + (1.0 - yj) * s) / norm) as f32;
        }
    }
    seg /= norm;

    let supervised: Vec<usize> = (0..n).filter(|&i| grasp_targets[i].is_some()).collect();
    let g = grasp_logits.item_len();
    let mut grasp = 0.0;
    let mut d_grasp = None;
    if !supervised.is_empty() {
        let mut d = vec![0.0f32; n * g];
        let w = cfg.grasp_loss_weight as f64 / supervised.len() as f64;
        for &i in &supervised {
            let labels = grasp_targets[i].as_ref().expect("supervised");
            if labels.len() != g {
                return Err(Error::Shape {
                    expected: vec![g],
                    got: vec![labels.len()],
                });
            }
            let z = grasp_logits.item(i);
            let used = labels.iter().filter(|&&l| l != GraspLabel::Ignore).count() as f64;
            let mut li = 0.0;
            for k in 0..g {
                let y = match labels[k] {
                    GraspLabel::Pos => 1.0,
                    GraspLabel::Neg => 0.0,
                    GraspLabel::Ignore => continue,
                };
                let zk = z[k] as f64;
                li += y * softplus(-zk) + (1.0 - y) * softplus(zk);
                d[i * g + k] = (w * (sigmoid(zk) - y) / used) as f32;
            }
            grasp += li / used;
        }
        grasp /= supervised.len() as f64;
        d_grasp = Some(Tensor::from_vec(grasp_logits.shape(), d)?);
    }
    Ok(AcpLoss {
        total: seg + cfg.grasp_loss_weight as f64 * grasp,
        seg,
        grasp,
        d_seg: Tensor::from_vec(seg_logits.shape(), d_seg)?,
        d_grasp,
    })
}

/// Anything that maps masked contexts to segmentation and grasp logits.
pub trait ContextPredictor {
    fn input_size(&self) -> usize;
    fn grasp_classes(&self) -> usize;
    fn predict(&mut self, batch: &Tensor) -> Result<AcpOutput>;
}

impl ContextPredictor for AcpModel {
    fn input_size(&self) -> usize {
        self.spec.input_size
    }

    fn grasp_classes(&self) -> usize {
        self.spec.grasp_classes
    }

    fn predict(&mut self, batch: &Tensor) -> Result<AcpOutput> {
        self.forward(batch, false)
    }
}

/// Dense score map with coverage flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
    /// `false` for pixels no patch reached; their value is 0.
    pub covered: Vec<bool>,
}

impl Heatmap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Heatmap {
            width,
            height,
            data: vec![0.0; width * height],
            covered: vec![false; width * height],
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.height, self.width], self.data.clone()).expect("heatmap shape")
    }

    pub fn to_gray8(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.data[y as usize * self.width + x as usize];
            image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
        })
    }

    /// Writes `<stem>.hpa` and `<stem>.png`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        write_array(stem.with_extension("hpa"), &self.to_tensor())?;
        self.to_gray8().save(stem.with_extension("png"))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapSet {
    pub roi: Heatmap,
    pub grasps: Vec<Heatmap>,
}

/// Patch centers on a uniform grid, about `count` of them, keeping each
/// patch inside the image where possible.
pub fn patch_grid(width: usize, height: usize, side: f32, count: usize) -> Vec<(f32, f32)> {
    let (w, h) = (width as f32, height as f32);
    let ax = (w - side).max(0.0);
    let ay = (h - side).max(0.0);
    let count = count.max(1) as f32;
    let (nx, ny) = if ax == 0.0 && ay == 0.0 {
        (1, 1)
    } else if ay == 0.0 {
        (count as usize, 1)
    } else if ax == 0.0 {
        (1, count as usize)
    } else {
        let nx = (count * ax / ay).sqrt().round().max(1.0);
        (nx as usize, (count / nx).round().max(1.0) as usize)
    };
    let pos = |i: usize, n: usize, extent: f32, a: f32| {
        if n == 1 || a == 0.0 {
            extent / 2.0
        } else {
            side / 2.0 + a * i as f32 / (n - 1) as f32
        }
    };
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            out.push((pos(i, nx, w, ax), pos(j, ny, h, ay)));
        }
    }
    out
}

/// The inference patch set for an image.
pub fn inference_patches(width: usize, height: usize, cfg: &AcpConfig) -> Vec<PatchSpec> {
    let scale = cfg.scale(width as f32);
    let mut out = Vec::new();
    for &s in &cfg.infer_patch_sides {
        let side = (s * scale).max(2.0);
        for c in patch_grid(width, height, side, cfg.infer_patches_per_side) {
            out.push(PatchSpec::new(c, side, PatchRole::Negative));
        }
    }
    out
}

fn canonical_order(patches: &[PatchSpec]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..patches.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&patches[a], &patches[b]);
        pa.side
            .total_cmp(&pb.side)
            .then(pa.center.1.total_cmp(&pb.center.1))
            .then(pa.center.0.total_cmp(&pb.center.0))
    });
    order
}

/// Runs `model` over `patches` and pastes sigmoid outputs back onto the
/// image grid. Patches are processed in a canonical order, so the result
/// does not depend on their enumeration order.
pub fn infer_patches(
    image: &Image,
    patches: &[PatchSpec],
    model: &mut dyn ContextPredictor,
    norm: &Normalization,
    cfg: &AcpConfig,
    batch_size: usize,
) -> Result<HeatmapSet> {
    if patches.is_empty() {
        return Err(Error::Degenerate("no inference patches".into()));
    }
    let (w, h) = (image.width, image.height);
    let s_in = model.input_size();
    let g = model.grasp_classes();
    let order = canonical_order(patches);
    let mut roi = Accumulator::new(w, h, cfg.aggregation);
    let mut grasps: Vec<Accumulator> = (0..g).map(|_| Accumulator::new(w, h, cfg.aggregation)).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let mut inputs = Vec::with_capacity(chunk.len());
        let mut layouts = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let sample = make_context(image, &patches[i], &[], s_in, norm, cfg)?;
            inputs.push(sample.input);
            layouts.push(sample.layout);
        }
        let batch = Tensor::stack(&inputs)?;
        let out = model.predict(&batch)?;
        let seg_size = AcpModelSpec::SEG_SIZE;
        for (b, layout) in layouts.iter().enumerate() {
            let probs: Vec<f32> = out.seg_logits.item(b).iter().map(|&z| sigmoid(z as f64) as f32).collect();
            let gp: Vec<f32> = out.grasp_logits.item(b).iter().map(|&z| sigmoid(z as f64) as f32).collect();
            let [fx0, fy0, fx1, fy1] = layout.footprint;
            let x_lo = (fx0 - 0.5).ceil().max(0.0) as usize;
            let y_lo = (fy0 - 0.5).ceil().max(0.0) as usize;
            let x_hi = ((fx1 - 0.5).ceil().max(0.0) as usize).min(w);
            let y_hi = ((fy1 - 0.5).ceil().max(0.0) as usize).min(h);
            let sx = seg_size as f32 / (fx1 - fx0);
            let sy = seg_size as f32 / (fy1 - fy0);
            for y in y_lo..y_hi {
                let v = (y as f32 + 0.5 - fy0) * sy;
                for x in x_lo..x_hi {
                    let u = (x as f32 + 0.5 - fx0) * sx;
                    let p = bilinear(&probs, seg_size, u, v);
                    roi.add(y * w + x, p);
                    for (k, acc) in grasps.iter_mut().enumerate() {
                        acc.add(y * w + x, gp[k]);
                    }
                }
            }
        }
    }
    let sigma = if cfg.smooth { cfg.smooth_sigma * cfg.scale(w as f32) } else { 0.0 };
    Ok(HeatmapSet {
        roi: roi.finish(sigma),
        grasps: grasps.into_iter().map(|a| a.finish(sigma)).collect(),
    })
}

/// Multi-scale grid inference over the whole image.
pub fn infer_heatmaps(image: &Image, model: &mut dyn ContextPredictor, norm: &Normalization, cfg: &AcpConfig) -> Result<HeatmapSet> {
    let patches = inference_patches(image.width, image.height, cfg);
    infer_patches(image, &patches, model, norm, cfg, 32)
}

fn bilinear(plane: &[f32], size: usize, u: f32, v: f32) -> f32 {
    let fx = (u - 0.5).clamp(0.0, (size - 1) as f32);
    let fy = (v - 0.5).clamp(0.0, (size - 1) as f32);
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(size - 1);
    let y1 = (y0 + 1).min(size - 1);
    let ax = fx - x0 as f32;
    let ay = fy - y0 as f32;
    let top = plane[y0 * size + x0] * (1.0 - ax) + plane[y0 * size + x1] * ax;
    let bottom = plane[y1 * size + x0] * (1.0 - ax) + plane[y1 * size + x1] * ax;
    top * (1.0 - ay) + bottom * ay
}

struct Accumulator {
    width: usize,
    height: usize,
    mode: Aggregation,
    value: Vec<f64>,
    count: Vec<u32>,
}

impl Accumulator {
    fn new(width: usize, height: usize, mode: Aggregation) -> Self {
        Accumulator {
            width,
            height,
            mode,
            value: vec![0.0; width * height],
            count: vec![0; width * height],
        }
    }

    fn add(&mut self, i: usize, v: f32) {
        match self.mode {
            Aggregation::Mean => self.value[i] += v as f64,
            Aggregation::Max => {
                if self.count[i] == 0 || v as f64 > self.value[i] {
                    self.value[i] = v as f64;
                }
            }
        }
        self.count[i] += 1;
    }

    fn finish(self, sigma: f32) -> Heatmap {
        let covered: Vec<bool> = self.count.iter().map(|&c| c > 0).collect();
        let mut data: Vec<f32> = self
            .value
            .iter()
            .zip(&self.count)
            .map(|(&v, &c)| match (c, self.mode) {
                (0, _) => 0.0,
                (c, Aggregation::Mean) => (v / c as f64) as f32,
                (_, Aggregation::Max) => v as f32,
            })
            .collect();
        blur_plane(&mut data, self.width, self.height, sigma);
        Heatmap {
            width: self.width,
            height: self.height,
            data,
            covered,
        }
    }
}

/// `w · external + (1 − w) · acp`, pixel-wise.
pub fn combine_heatmaps(external: &Heatmap, acp: &Heatmap, w: f32) -> Result<Heatmap> {
    if (external.width, external.height) != (acp.width, acp.height) {
        return Err(Error::Shape {
            expected: vec![external.height, external.width],
            got: vec![acp.height, acp.width],
        });
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::invalid(format!("combination weight {w} outside [0, 1]")));
    }
    let data = if w == 1.0 {
        external.data.clone()
    } else if w == 0.0 {
        acp.data.clone()
    } else {
        external.data.iter().zip(&acp.data).map(|(&e, &a)| w * e + (1.0 - w) * a).collect()
    };
    Ok(Heatmap {
        width: acp.width,
        height: acp.height,
        data,
        covered: external.covered.iter().zip(&acp.covered).map(|(&a, &b)| a || b).collect(),
    })
}
