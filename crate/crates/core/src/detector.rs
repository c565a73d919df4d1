//! Toy one-stage anchor-based detector.
//!
//! The backbone is six 3×3 conv blocks (stride 2 at blocks 2/4/5/6, widths
//! 16→32→64→64→64→64) over 64×64×3 input, with named tap activations:
//! `low` after block 2 (32ch, 32×32) for pixel-level alignment, `g1` after
//! block 3 (feeds the multi-label classifier), `g2` after block 5 (feeds
//! the image discriminator), and the detection layer set L = {`lA` = block
//! 5 output at 8×8, `lB` = block 6 output at 4×4}, each with its own 3×3
//! class/box head. One square anchor per cell, side 3 cell-widths.

use std::collections::BTreeMap;

use crate::data::Annotation;
use crate::graph::{Graph, NodeId};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::Error;

/// Confidence floor used when decoding detections for evaluation.
pub const EVAL_CONF_THRESH: f64 = 0.05;
/// Greedy NMS overlap threshold used for evaluation.
pub const EVAL_NMS_IOU: f64 = 0.45;

// ── parameter store ──────────────────────────────────────────────────────

/// Named model parameters. BTreeMap keeps iteration (and therefore
/// checkpoint and SGD update) order deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.entries.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, Error> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, Error> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Create one graph leaf per parameter. Names matched by `frozen` (or
    /// listed in `always_frozen`) become constants and receive no gradient.
    pub fn bind(&self, g: &mut Graph, frozen: &dyn Fn(&str) -> bool) -> BoundParams {
        let mut ids = BTreeMap::new();
        for (name, t) in &self.entries {
            let id = g.leaf(t.clone(), !frozen(name));
            ids.insert(name.clone(), id);
        }
        BoundParams { ids }
    }
}

/// Graph node ids of one binding of a [`ParamStore`].
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> Result<NodeId, Error> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("unbound parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, NodeId)> {
        self.ids.iter().map(|(n, &i)| (n, i))
    }
}

// ── model ────────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    pub image_size: usize,
    pub class_count: usize,
    /// Fused dimension of the randomized projections used by the
    /// pattern-matching objective.
    pub fused_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { image_size: 64, class_count: 3, fused_dim: 64 }
    }
}

/// Backbone block widths and strides (3×3 kernels, padding 1).
const BLOCK_WIDTHS: [usize; 6] = [16, 32, 64, 64, 64, 64];
const BLOCK_STRIDES: [usize; 6] = [1, 2, 1, 2, 2, 2];
/// Channel width of the `low` tap (block 2 output).
pub const LOW_CHANNELS: usize = 32;
/// Channel width of taps g1/g2 and the detection layers.
pub const FEAT_CHANNELS: usize = 64;
/// Detection layer grids: `lA` at 8×8, `lB` at 4×4.
pub const LAYER_GRIDS: [usize; 2] = [8, 4];
pub const LAYER_NAMES: [&str; 2] = ["lA", "lB"];

pub struct DetectionModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

fn he_conv(rng: &mut Rng, out_c: usize, in_c: usize, k: usize) -> Tensor {
    let fan_in = (in_c * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    let n = out_c * in_c * k * k;
    Tensor::new(vec![out_c, in_c, k, k], (0..n).map(|_| rng.normal() * std).collect())
        .expect("shape product")
}

fn he_affine(rng: &mut Rng, in_d: usize, out_d: usize) -> Tensor {
    let std = (2.0 / in_d as f64).sqrt();
    Tensor::new(vec![in_d, out_d], (0..in_d * out_d).map(|_| rng.normal() * std).collect())
        .expect("shape product")
}

impl DetectionModel {
    /// Reassemble a model from checkpointed parts.
    pub fn from_parts(cfg: ModelConfig, params: ParamStore) -> Self {
        DetectionModel { cfg, params }
    }

    /// Fresh model. All parameters (including discriminators, the
    /// multi-label classifier, and the frozen random projections) are
    /// created here in a fixed order from named RNG streams, so the same
    /// seed yields the same model regardless of which components a run
    /// later enables.
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut p = ParamStore::new();
        let k1 = cfg.class_count + 1;
        let mut rng = Rng::stream(seed, "model");
        let mut in_c = 3;
        for (i, (&w, &_s)) in BLOCK_WIDTHS.iter().zip(&BLOCK_STRIDES).enumerate() {
            p.insert(&format!("backbone.b{}.w", i + 1), he_conv(&mut rng, w, in_c, 3));
            p.insert(&format!("backbone.b{}.b", i + 1), Tensor::zeros(vec![w]));
            in_c = w;
        }
        for name in LAYER_NAMES {
            p.insert(&format!("head.{name}.cls.w"), he_conv(&mut rng, k1, FEAT_CHANNELS, 3));
            p.insert(&format!("head.{name}.cls.b"), Tensor::zeros(vec![k1]));
            p.insert(&format!("head.{name}.box.w"), he_conv(&mut rng, 4, FEAT_CHANNELS, 3));
            p.insert(&format!("head.{name}.box.b"), Tensor::zeros(vec![4]));
        }
        // multi-label classifier on g1
        p.insert("mlc.w", he_affine(&mut rng, FEAT_CHANNELS, cfg.class_count));
        p.insert("mlc.b", Tensor::zeros(vec![cfg.class_count]));
        // image-level discriminator on g2
        p.insert("dg.w1", he_affine(&mut rng, FEAT_CHANNELS, 64));
        p.insert("dg.b1", Tensor::zeros(vec![64]));
        p.insert("dg.w2", he_affine(&mut rng, 64, 1));
        p.insert("dg.b2", Tensor::zeros(vec![1]));
        // pixel-level discriminator on `low` (1x1 convs)
        p.insert("dl.w1", he_conv(&mut rng, 64, LOW_CHANNELS, 1));
        p.insert("dl.b1", Tensor::zeros(vec![64]));
        p.insert("dl.w2", he_conv(&mut rng, 1, 64, 1));
        p.insert("dl.b2", Tensor::zeros(vec![1]));
        // frozen random projections; entries snapped to f32 so checkpoint
        // round trips preserve them bit-exactly
        let mut crng = Rng::stream(seed, "copm");
        let root3 = 3.0f64.sqrt();
        let mut uniform = |n: usize| -> Vec<f64> {
            (0..n).map(|_| crng.range_f64(-root3, root3) as f32 as f64).collect()
        };
        p.insert(
            "copm.r1",
            Tensor::new(vec![LOW_CHANNELS, cfg.fused_dim], uniform(LOW_CHANNELS * cfg.fused_dim))
                .expect("shape product"),
        );
        p.insert(
            "copm.r2",
            Tensor::new(vec![k1, cfg.fused_dim], uniform(k1 * cfg.fused_dim)).expect("shape product"),
        );
        DetectionModel { cfg, params: p }
    }

    /// Names that never receive gradients in any phase.
    pub fn always_frozen(name: &str) -> bool {
        name.starts_with("copm.r")
    }

    /// One full forward pass producing every tap and head output.
    pub fn forward(&self, g: &mut Graph, b: &BoundParams, x: NodeId) -> Result<Taps, Error> {
        let xs = g.value(x).shape();
        if xs.len() != 4 || xs[1] != 3 || xs[2] != self.cfg.image_size || xs[3] != self.cfg.image_size {
            return Err(Error::Shape(format!(
                "input {:?}, want [N,3,{s},{s}]",
                xs,
                s = self.cfg.image_size
            )));
        }
        let mut cur = x;
        let mut block_out = [0usize; 6];
        for i in 0..6 {
            let w = b.id(&format!("backbone.b{}.w", i + 1))?;
            let bias = b.id(&format!("backbone.b{}.b", i + 1))?;
            let c = g.conv2d(cur, w, Some(bias), BLOCK_STRIDES[i], 1)?;
            cur = g.relu(c);
            block_out[i] = cur;
        }
        let layer_feats = [block_out[4], block_out[5]];
        let mut heads = Vec::with_capacity(2);
        for (li, name) in LAYER_NAMES.iter().enumerate() {
            let feat = layer_feats[li];
            let cls_w = b.id(&format!("head.{name}.cls.w"))?;
            let cls_b = b.id(&format!("head.{name}.cls.b"))?;
            let box_w = b.id(&format!("head.{name}.box.w"))?;
            let box_b = b.id(&format!("head.{name}.box.b"))?;
            let cls_map = g.conv2d(feat, cls_w, Some(cls_b), 1, 1)?;
            let box_map = g.conv2d(feat, box_w, Some(box_b), 1, 1)?;
            let grid = LAYER_GRIDS[li];
            let n = g.value(x).shape()[0];
            let k1 = self.cfg.class_count + 1;
            let flat = |g: &mut Graph, m: NodeId, ch: usize| -> Result<NodeId, Error> {
                let p = g.permute(m, &[0, 2, 3, 1])?;
                g.reshape(p, vec![n * grid * grid, ch])
            };
            let cls_flat = flat(g, cls_map, k1)?;
            let box_flat = flat(g, box_map, 4)?;
            heads.push(HeadOut { name, grid, cls_map, cls_flat, box_flat });
        }
        Ok(Taps {
            low: block_out[1],
            g1: block_out[2],
            g2: block_out[4],
            layer_feats,
            heads,
        })
    }
}

/// Named activations and head outputs of one forward pass.
pub struct Taps {
    pub low: NodeId,
    pub g1: NodeId,
    pub g2: NodeId,
    /// Features of the detection layer set, `[lA, lB]` (lA aliases g2).
    pub layer_feats: [NodeId; 2],
    pub heads: Vec<HeadOut>,
}

pub struct HeadOut {
    pub name: &'static str,
    pub grid: usize,
    /// `[N, K+1, G, G]` raw class logit map.
    pub cls_map: NodeId,
    /// `[N·G·G, K+1]` logits, anchor-major within each image.
    pub cls_flat: NodeId,
    /// `[N·G·G, 4]` offsets.
    pub box_flat: NodeId,
}

impl Taps {
    /// Class logits of every head, concatenated per image in layer order:
    /// `[N·A, K+1]` with A = Σ G². Box offsets likewise.
    pub fn flat_outputs(&self, g: &mut Graph, batch: usize) -> Result<(NodeId, NodeId), Error> {
        let k1 = {
            let s = g.value(self.heads[0].cls_flat).shape();
            s[1]
        };
        let mut cls_per_layer = Vec::new();
        let mut box_per_layer = Vec::new();
        for h in &self.heads {
            let a = h.grid * h.grid;
            cls_per_layer.push(g.reshape(h.cls_flat, vec![batch, a, k1])?);
            box_per_layer.push(g.reshape(h.box_flat, vec![batch, a, 4])?);
        }
        let cls = g.concat(&cls_per_layer, 1)?;
        let boxes = g.concat(&box_per_layer, 1)?;
        let total: usize = LAYER_GRIDS.iter().map(|&gd| gd * gd).sum();
        let cls = g.reshape(cls, vec![batch * total, k1])?;
        let boxes = g.reshape(boxes, vec![batch * total, 4])?;
        Ok((cls, boxes))
    }
}

/// Stack `[3,S,S]` images into an `[N,3,S,S]` batch tensor.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor, Error> {
    if images.is_empty() {
        return Err(Error::Invalid("empty image batch".into()));
    }
    let shape = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        if img.shape() != shape {
            return Err(Error::Shape(format!("mixed image shapes {:?} vs {:?}", img.shape(), shape)));
        }
        data.extend_from_slice(img.data());
    }
    let mut out_shape = vec![images.len()];
    out_shape.extend_from_slice(&shape);
    Tensor::new(out_shape, data)
}

// ── anchors and matching ─────────────────────────────────────────────────

/// Square anchor side per layer, in cell-widths of that layer's grid.
/// The fine 8×8 layer covers small objects (3/8 of the image), the coarse
/// 4×4 layer large ones (2/4 = 1/2); the scales are close enough that
/// mid-sized objects pass the matching threshold on both layers.
pub const ANCHOR_CELLS: [f64; 2] = [3.0, 2.0];

/// Anchor lattice over the detection layers: one square anchor per cell,
/// side a per-layer multiple of the cell width, centers at cell centers,
/// normalized coordinates.
pub struct AnchorGrid {
    pub grids: Vec<usize>,
    pub anchors: Vec<Annotation>,
}

impl AnchorGrid {
    pub fn new() -> Self {
        let mut anchors = Vec::new();
        for (li, &gsize) in LAYER_GRIDS.iter().enumerate() {
            let cell = 1.0 / gsize as f64;
            let side = ANCHOR_CELLS[li] * cell;
            for y in 0..gsize {
                for x in 0..gsize {
                    anchors.push(Annotation {
                        class_id: 0, // anchors carry no class
                        cx: (x as f64 + 0.5) * cell,
                        cy: (y as f64 + 0.5) * cell,
                        w: side,
                        h: side,
                    });
                }
            }
        }
        AnchorGrid { grids: LAYER_GRIDS.to_vec(), anchors }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

impl Default for AnchorGrid {
    fn default() -> Self {
        Self::new()
    }
}

/// Intersection-over-union of two center-size boxes (class ids ignored).
pub fn iou(a: &Annotation, b: &Annotation) -> Result<f64, Error> {
    if a.w <= 0.0 || a.h <= 0.0 || b.w <= 0.0 || b.h <= 0.0 {
        return Err(Error::Invalid(format!("nonpositive box size: {a:?} vs {b:?}")));
    }
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    // areas from the same corner values so identical boxes give exactly 1
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    Ok(inter / union)
}

/// Per-anchor regression target in the SSD offset encoding.
pub fn encode_offsets(anchor: &Annotation, gt: &Annotation) -> [f64; 4] {
    [
        (gt.cx - anchor.cx) / anchor.w,
        (gt.cy - anchor.cy) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
    ]
}

/// Inverse of [`encode_offsets`].
pub fn decode_offsets(anchor: &Annotation, t: &[f64; 4]) -> Annotation {
    Annotation {
        class_id: 0,
        cx: anchor.cx + t[0] * anchor.w,
        cy: anchor.cy + t[1] * anchor.h,
        w: anchor.w * t[2].exp(),
        h: anchor.h * t[3].exp(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MatchTarget {
    Background,
    /// `class_id` is the foreground class (0-based); head targets add 1.
    Positive { class_id: usize, offsets: [f64; 4] },
}

/// Assign each anchor a target: best-IoU ground truth if IoU ≥ 0.5, else
/// background; additionally every ground truth claims its single best
/// anchor. Ties break toward the lowest index (anchor or ground truth).
pub fn match_anchors(anchors: &[Annotation], gts: &[Annotation]) -> Vec<MatchTarget> {
    let mut out = vec![MatchTarget::Background; anchors.len()];
    if gts.is_empty() {
        return out;
    }
    let mut assigned_gt: Vec<Option<usize>> = vec![None; anchors.len()];
    for (ai, anchor) in anchors.iter().enumerate() {
        let mut best = 0.0;
        let mut best_gt = None;
        for (gi, gt) in gts.iter().enumerate() {
            let ov = iou(anchor, gt).expect("anchors and annotations are valid boxes");
            if ov > best {
                best = ov;
                best_gt = Some(gi);
            }
        }
        if best >= 0.5 {
            assigned_gt[ai] = best_gt;
        }
    }
    // force-match: each gt claims its best anchor (processed in gt order,
    // later ground truths override on the rare shared-best-anchor case)
    for (gi, gt) in gts.iter().enumerate() {
        let mut best = -1.0;
        let mut best_anchor = 0;
        for (ai, anchor) in anchors.iter().enumerate() {
            let ov = iou(anchor, gt).expect("valid boxes");
            if ov > best {
                best = ov;
                best_anchor = ai;
            }
        }
        assigned_gt[best_anchor] = Some(gi);
    }
    for (ai, gi) in assigned_gt.iter().enumerate() {
        if let Some(gi) = gi {
            let gt = &gts[*gi];
            out[ai] = MatchTarget::Positive {
                class_id: gt.class_id,
                offsets: encode_offsets(&anchors[ai], gt),
            };
        }
    }
    out
}

// ── detection loss ───────────────────────────────────────────────────────

pub struct DetectionLoss {
    pub loss: NodeId,
    pub positives: usize,
}

/// Softmax cross-entropy over anchors with 3:1 per-image hard-negative
/// mining plus smooth-L1 on positive offsets, normalized by the batch
/// positive count. A batch with no positive anchors contributes zero loss
/// (mining selects 3·0 negatives).
pub fn detection_loss(
    g: &mut Graph,
    cls_flat: NodeId,
    box_flat: NodeId,
    anchors: &[Annotation],
    gts: &[Vec<Annotation>],
) -> Result<DetectionLoss, Error> {
    let a = anchors.len();
    let n = gts.len();
    let shape = g.value(cls_flat).shape().to_vec();
    if shape.len() != 2 || shape[0] != n * a {
        return Err(Error::Shape(format!(
            "cls rows {:?} vs {n} images x {a} anchors",
            shape
        )));
    }
    let k1 = shape[1];

    let log_probs = g.log_softmax(cls_flat, 1, 1.0)?;
    let lp = g.value(log_probs).data();

    let mut sel_rows: Vec<usize> = Vec::new();
    let mut sel_classes: Vec<usize> = Vec::new();
    let mut pos_rows: Vec<usize> = Vec::new();
    let mut pos_offsets: Vec<f64> = Vec::new();
    for (img, img_gts) in gts.iter().enumerate() {
        let targets = match_anchors(anchors, img_gts);
        let mut negatives: Vec<(usize, f64)> = Vec::new();
        let mut img_pos = 0usize;
        for (ai, t) in targets.iter().enumerate() {
            let row = img * a + ai;
            match t {
                MatchTarget::Positive { class_id, offsets } => {
                    sel_rows.push(row);
                    sel_classes.push(class_id + 1);
                    pos_rows.push(row);
                    pos_offsets.extend_from_slice(offsets);
                    img_pos += 1;
                }
                MatchTarget::Background => {
                    negatives.push((row, -lp[row * k1])); // CE against class 0
                }
            }
        }
        negatives.sort_by(|x, y| {
            y.1.partial_cmp(&x.1).expect("finite CE values").then(x.0.cmp(&y.0))
        });
        for &(row, _) in negatives.iter().take(3 * img_pos) {
            sel_rows.push(row);
            sel_classes.push(0);
        }
    }

    let positives = pos_rows.len();
    if positives == 0 {
        return Ok(DetectionLoss { loss: g.constant_scalar(0.0), positives });
    }

    let sel = g.gather_rows(log_probs, &sel_rows)?;
    let picked = g.gather_row_col(sel, &sel_classes)?;
    let picked_sum = g.sum_all(picked);
    let cls_loss = g.neg(picked_sum);

    let pos_pred = g.gather_rows(box_flat, &pos_rows)?;
    let target = g.constant(Tensor::new(vec![positives, 4], pos_offsets)?);
    let resid = g.sub(pos_pred, target)?;
    let sl1 = g.smooth_l1(resid);
    let box_loss = g.sum_all(sl1);

    let total = g.add(cls_loss, box_loss)?;
    let loss = g.scale(total, 1.0 / positives as f64);
    Ok(DetectionLoss { loss, positives })
}

// ── decoding, NMS, evaluation ────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Detection {
    /// Foreground class, 0-based.
    pub class_id: usize,
    pub score: f64,
    pub bbox: Annotation,
}

/// Decode per-anchor class probabilities and offsets into detections with
/// per-class greedy NMS (suppress at IoU strictly above `nms_iou`).
pub fn decode_and_nms(
    probs: &[f64],
    offsets: &[f64],
    anchors: &[Annotation],
    class_count: usize,
    conf_thresh: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>, Error> {
    if !(0.0..1.0).contains(&conf_thresh) || conf_thresh == 0.0 || !(0.0..1.0).contains(&nms_iou) || nms_iou == 0.0 {
        return Err(Error::Invalid(format!(
            "thresholds must lie in (0,1): conf {conf_thresh}, nms {nms_iou}"
        )));
    }
    let a = anchors.len();
    let k1 = class_count + 1;
    if probs.len() != a * k1 || offsets.len() != a * 4 {
        return Err(Error::Shape(format!(
            "probs {} / offsets {} for {a} anchors, {k1} classes",
            probs.len(),
            offsets.len()
        )));
    }
    let mut kept = Vec::new();
    for k in 0..class_count {
        let mut cands: Vec<(usize, f64)> = (0..a)
            .filter_map(|ai| {
                let s = probs[ai * k1 + k + 1];
                (s > conf_thresh).then_some((ai, s))
            })
            .collect();
        cands.sort_by(|x, y| y.1.partial_cmp(&x.1).expect("finite scores").then(x.0.cmp(&y.0)));
        let mut class_kept: Vec<Annotation> = Vec::new();
        for (ai, score) in cands {
            let t = [
                offsets[ai * 4],
                offsets[ai * 4 + 1],
                offsets[ai * 4 + 2],
                offsets[ai * 4 + 3],
            ];
            let mut bbox = decode_offsets(&anchors[ai], &t);
            bbox.class_id = k;
            // clamp to the unit square, keeping a sliver of positive size
            let (x0, y0, x1, y1) = bbox.corners();
            let (x0, y0) = (x0.clamp(0.0, 1.0), y0.clamp(0.0, 1.0));
            let (x1, y1) = (x1.clamp(0.0, 1.0), y1.clamp(0.0, 1.0));
            if x1 - x0 < 1e-6 || y1 - y0 < 1e-6 {
                continue;
            }
            bbox.cx = (x0 + x1) / 2.0;
            bbox.cy = (y0 + y1) / 2.0;
            bbox.w = x1 - x0;
            bbox.h = y1 - y0;
            let suppressed = class_kept
                .iter()
                .any(|kb| iou(kb, &bbox).expect("valid boxes") > nms_iou);
            if !suppressed {
                class_kept.push(bbox);
                kept.push(Detection { class_id: k, score, bbox });
            }
        }
    }
    Ok(kept)
}

/// All-point interpolated average precision from raw cumulative
/// precision/recall points (one per detection, in descending-score order).
/// This is the single integral definition shared by the evaluator and the
/// brute-force oracle.
pub fn interpolated_ap(recalls: &[f64], precisions: &[f64]) -> f64 {
    let n = recalls.len();
    let mut mrec = Vec::with_capacity(n + 2);
    let mut mpre = Vec::with_capacity(n + 2);
    mrec.push(0.0);
    mrec.extend_from_slice(recalls);
    mrec.push(1.0);
    mpre.push(0.0);
    mpre.extend_from_slice(precisions);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        if mpre[i + 1] > mpre[i] {
            mpre[i] = mpre[i + 1];
        }
    }
    let mut ap = 0.0;
    for i in 0..mrec.len() - 1 {
        if mrec[i + 1] != mrec[i] {
            ap += (mrec[i + 1] - mrec[i]) * mpre[i + 1];
        }
    }
    ap
}

/// Per-class AP (None when a class has no ground truth) and mAP over the
/// classes that do, at the given IoU threshold. Greedy one-to-one matching
/// in descending confidence order.
pub fn evaluate_map(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Annotation>],
    iou_thresh: f64,
    class_count: usize,
) -> (Vec<Option<f64>>, f64) {
    assert_eq!(detections.len(), ground_truth.len(), "image count mismatch");
    let mut aps: Vec<Option<f64>> = Vec::with_capacity(class_count);
    for k in 0..class_count {
        let gt_count: usize = ground_truth
            .iter()
            .map(|g| g.iter().filter(|a| a.class_id == k).count())
            .sum();
        if gt_count == 0 {
            aps.push(None);
            continue;
        }
        // (image, score, bbox), globally sorted by descending score;
        // ties break by image then insertion order
        let mut dets: Vec<(usize, f64, Annotation)> = Vec::new();
        for (img, dlist) in detections.iter().enumerate() {
            for d in dlist.iter().filter(|d| d.class_id == k) {
                dets.push((img, d.score, d.bbox));
            }
        }
        dets.sort_by(|x, y| {
            y.1.partial_cmp(&x.1).expect("finite scores").then(x.0.cmp(&y.0))
        });
        let mut taken: Vec<Vec<bool>> = ground_truth
            .iter()
            .map(|g| vec![false; g.len()])
            .collect();
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut recalls = Vec::with_capacity(dets.len());
        let mut precisions = Vec::with_capacity(dets.len());
        for (img, _, bbox) in &dets {
            let mut best = 0.0;
            let mut best_gt = None;
            for (gi, gt) in ground_truth[*img].iter().enumerate() {
                if gt.class_id != k || taken[*img][gi] {
                    continue;
                }
                let ov = iou(&bbox.clone(), gt).expect("valid boxes");
                if ov > best {
                    best = ov;
                    best_gt = Some(gi);
                }
            }
            match best_gt {
                Some(gi) if best >= iou_thresh => {
                    taken[*img][gi] = true;
                    tp += 1;
                }
                _ => fp += 1,
            }
            recalls.push(tp as f64 / gt_count as f64);
            precisions.push(tp as f64 / (tp + fp) as f64);
        }
        aps.push(Some(interpolated_ap(&recalls, &precisions)));
    }
    let present: Vec<f64> = aps.iter().filter_map(|a| *a).collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (aps, map)
}

/// Run the detector over images (in fixed-size chunks) and decode
/// detections for evaluation. No gradients are recorded.
pub fn predict(
    model: &DetectionModel,
    images: &[Tensor],
    conf_thresh: f64,
    nms_iou: f64,
) -> Result<Vec<Vec<Detection>>, Error> {
    let anchors = AnchorGrid::new();
    let k1 = model.cfg.class_count + 1;
    let a = anchors.len();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(8) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let batch = stack_images(&refs)?;
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g, &|_| true);
        let x = g.constant(batch);
        let taps = model.forward(&mut g, &bound, x)?;
        let (cls, boxes) = taps.flat_outputs(&mut g, chunk.len())?;
        let probs = g.softmax(cls, 1, 1.0)?;
        let pv = g.value(probs).data();
        let bv = g.value(boxes).data();
        for i in 0..chunk.len() {
            let dets = decode_and_nms(
                &pv[i * a * k1..(i + 1) * a * k1],
                &bv[i * a * 4..(i + 1) * a * 4],
                &anchors.anchors,
                model.cfg.class_count,
                conf_thresh,
                nms_iou,
            )?;
            out.push(dets);
        }
    }
    Ok(out)
}
