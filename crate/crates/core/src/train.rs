//! Training orchestration: multi-label pretraining, the adaptation loop
//! combining every loss term, SGD with momentum and weight decay, JSONL
//! metrics, per-epoch checkpoints, and deterministic evaluation reports.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::Config;
use crate::copm::copm_loss;
use crate::data::{read_dataset, Annotation, Dataset};
use crate::dcbr::{
    dcbr_adv_loss, image_discriminator, mlc_forward, mlc_loss, multilabel_target,
    refresh_target_split, sample_weight, TargetSplit,
};
use crate::detector::{
    detection_loss, evaluate_map, predict, stack_images, AnchorGrid, BoundParams, DetectionModel,
    ModelConfig, ParamStore, EVAL_CONF_THRESH, EVAL_NMS_IOU, FEAT_CHANNELS, LAYER_NAMES,
};
use crate::graph::{Graph, NodeId};
use crate::rjca::{
    apply_ema, compose_globals, jca_loss, local_prototypes, pr_loss, source_global_prototypes,
    source_pixel_labels, target_pixel_labels, PrototypeBank,
};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::Error;

// ── Loss bookkeeping ─────────────────────────────────────────────────────

/// Per-step component values; `total` is always recomputable from the
/// components (λ₁·dcbr + λ₂·(la+adv+jca+γ·pr) added to det).
#[derive(Clone, Debug, Serialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub l_det: f64,
    pub l_mlc: f64,
    pub l_dcbr: f64,
    pub l_la: f64,
    pub l_adv: f64,
    pub l_jca: f64,
    pub l_pr: f64,
    pub total: f64,
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    #[serde(flatten)]
    breakdown: &'a LossBreakdown,
    wall_secs: f64,
}

/// Combine component scalars into the overall objective:
/// `L_det + λ₁·L_dcbr + λ₂·(L_copm + L_rjca)`. A NaN component aborts
/// with its name.
pub fn total_loss(
    l_det: f64,
    l_dcbr: f64,
    l_copm: f64,
    l_rjca: f64,
    lambda1: f64,
    lambda2: f64,
) -> Result<f64, Error> {
    for (name, v) in [
        ("l_det", l_det),
        ("l_dcbr", l_dcbr),
        ("l_copm", l_copm),
        ("l_rjca", l_rjca),
    ] {
        if v.is_nan() {
            return Err(Error::Invalid(format!("loss component {name} is NaN")));
        }
    }
    Ok(l_det + lambda1 * l_dcbr + lambda2 * (l_copm + l_rjca))
}

// ── Optimizer ────────────────────────────────────────────────────────────

/// SGD with momentum and decoupled-from-nothing classic weight decay:
/// `v ← μ·v + g + wd·p`, `p ← p − lr·v`.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd { lr, momentum, weight_decay, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) -> Result<(), Error> {
        for (name, grad) in grads {
            let p = params.get_mut(name)?;
            let data = p.data_mut();
            if data.len() != grad.len() {
                return Err(Error::Shape(format!(
                    "gradient length {} vs parameter {name:?} length {}",
                    grad.len(),
                    data.len()
                )));
            }
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            for i in 0..grad.len() {
                v[i] = self.momentum * v[i] + grad[i] + self.weight_decay * data[i];
                data[i] -= self.lr * v[i];
            }
        }
        Ok(())
    }
}

/// Pull gradients for every trainable bound parameter out of the graph.
fn collect_grads(g: &Graph, bound: &BoundParams) -> BTreeMap<String, Vec<f64>> {
    let mut grads = BTreeMap::new();
    for (name, id) in bound.iter() {
        if let Some(grad) = g.grad(id) {
            grads.insert(name.clone(), grad.to_vec());
        }
    }
    grads
}

// ── Multi-label pretraining ──────────────────────────────────────────────

pub struct PretrainReport {
    pub checkpoint: PathBuf,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Mean per-image multi-label BCE over a whole set, value-only.
pub fn mlc_mean_loss(model: &DetectionModel, data: &Dataset) -> Result<f64, Error> {
    let k = model.cfg.class_count;
    let mut sum = 0.0;
    for (chunk_idx, chunk) in data.images.chunks(8).enumerate() {
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g, &|_| true);
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let x = g.constant(stack_images(&refs)?);
        let taps = model.forward(&mut g, &bound, x)?;
        let y_hat = mlc_forward(&mut g, &bound, taps.g1)?;
        let targets = stack_targets(&data.annotations[chunk_idx * 8..chunk_idx * 8 + chunk.len()], k)?;
        let loss = mlc_loss(&mut g, y_hat, &targets)?;
        sum += g.value(loss).item();
    }
    Ok(sum / data.len() as f64)
}

fn stack_targets(anns: &[Vec<Annotation>], class_count: usize) -> Result<Tensor, Error> {
    let mut data = Vec::with_capacity(anns.len() * class_count);
    for a in anns {
        data.extend_from_slice(multilabel_target(a, class_count).data());
    }
    Tensor::new(vec![anns.len(), class_count], data)
}

/// Train the image-level multi-label classifier (and the backbone blocks
/// feeding it) on the labeled source set, then checkpoint the full model.
/// Adaptation warm-starts from this checkpoint with the classifier frozen.
pub fn pretrain_mlc(cfg: &Config) -> Result<PretrainReport, Error> {
    let data = read_dataset(&cfg.source_dir)?;
    if data.is_empty() {
        return Err(Error::Invalid(format!("empty source set in {}", cfg.source_dir.display())));
    }
    if data.len() < cfg.batch_source {
        return Err(Error::Invalid(format!(
            "batch_source {} exceeds source set size {}",
            cfg.batch_source,
            data.len()
        )));
    }
    let model_cfg = ModelConfig { fused_dim: cfg.fused_dim, ..Default::default() };
    let mut model = DetectionModel::new(model_cfg, cfg.seed);
    let initial_loss = mlc_mean_loss(&model, &data)?;
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let mut rng = Rng::stream(cfg.seed, "mlc_shuffle");
    let steps_per_epoch = data.len() / cfg.batch_source;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _epoch in 0..cfg.mlc_epochs {
        rng.shuffle(&mut order);
        for step in 0..steps_per_epoch {
            let idx = &order[step * cfg.batch_source..(step + 1) * cfg.batch_source];
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g, &DetectionModel::always_frozen);
            let refs: Vec<&Tensor> = idx.iter().map(|&i| &data.images[i]).collect();
            let x = g.constant(stack_images(&refs)?);
            let taps = model.forward(&mut g, &bound, x)?;
            let y_hat = mlc_forward(&mut g, &bound, taps.g1)?;
            let anns: Vec<Vec<Annotation>> = idx.iter().map(|&i| data.annotations[i].clone()).collect();
            let targets = stack_targets(&anns, model.cfg.class_count)?;
            let sum = mlc_loss(&mut g, y_hat, &targets)?;
            let loss = g.scale(sum, 1.0 / cfg.batch_source as f64);
            g.backward(loss)?;
            let grads = collect_grads(&g, &bound);
            sgd.step(&mut model.params, &grads)?;
        }
    }
    let final_loss = mlc_mean_loss(&model, &data)?;
    let bank = PrototypeBank::new(LAYER_NAMES.len(), model.cfg.class_count, FEAT_CHANNELS, cfg.rho)?;
    save_checkpoint(&cfg.mlc_checkpoint, &model.cfg, &model.params, &bank)?;
    log::info!(
        "multi-label pretraining: mean loss {initial_loss:.6} -> {final_loss:.6} over {} epochs",
        cfg.mlc_epochs
    );
    Ok(PretrainReport { checkpoint: cfg.mlc_checkpoint.clone(), initial_loss, final_loss })
}

// ── Adaptation training ──────────────────────────────────────────────────

#[derive(Debug)]
pub struct TrainReport {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub steps: usize,
}

/// Parameters never updated during adaptation: the pretrained multi-label
/// classifier and the always-frozen random projections.
fn adaptation_frozen(name: &str) -> bool {
    DetectionModel::always_frozen(name) || name.starts_with("mlc.")
}

/// One source-detection forward/loss shared by adaptation and the
/// source-only baseline so both build byte-identical graphs.
fn source_det_loss(
    g: &mut Graph,
    model: &DetectionModel,
    bound: &BoundParams,
    anchors: &AnchorGrid,
    images: &[&Tensor],
    gts: &[Vec<Annotation>],
) -> Result<(crate::detector::Taps, NodeId), Error> {
    let x = g.constant(stack_images(images)?);
    let taps = model.forward(g, bound, x)?;
    let (cls_flat, box_flat) = taps.flat_outputs(g, images.len())?;
    let det = detection_loss(g, cls_flat, box_flat, &anchors.anchors, gts)?;
    Ok((taps, det.loss))
}

fn write_metrics_line(
    w: &mut impl Write,
    breakdown: &LossBreakdown,
    wall_secs: f64,
) -> Result<String, Error> {
    let line = serde_json::to_string(&MetricsLine { breakdown, wall_secs })
        .map_err(|e| Error::Invalid(format!("metrics serialization: {e}")))?;
    writeln!(w, "{line}")?;
    Ok(line)
}

fn finite_or_abort(breakdown: &LossBreakdown, last: &Option<String>) -> Result<(), Error> {
    let fields = [
        ("l_det", breakdown.l_det),
        ("l_mlc", breakdown.l_mlc),
        ("l_dcbr", breakdown.l_dcbr),
        ("l_la", breakdown.l_la),
        ("l_adv", breakdown.l_adv),
        ("l_jca", breakdown.l_jca),
        ("l_pr", breakdown.l_pr),
        ("total", breakdown.total),
    ];
    for (name, v) in fields {
        if !v.is_finite() {
            let context = last.as_deref().unwrap_or("none");
            return Err(Error::Invalid(format!(
                "aborting at step {}: {name} is {v}; last healthy breakdown: {context}",
                breakdown.step
            )));
        }
    }
    Ok(())
}

/// Full adaptation run. Requires a pretrained multi-label checkpoint (see
/// [`pretrain_mlc`]); writes `metrics.jsonl`, one checkpoint per epoch,
/// and `final.i3nt` into `out_dir`.
/// One detection-only SGD step on a source mini-batch, shared verbatim by
/// the warm-up phase of `train` and by `train_source_only` so the two loops
/// stay bit-identical.
fn det_only_step(
    model: &mut DetectionModel,
    anchors: &AnchorGrid,
    sgd: &mut Sgd,
    source: &Dataset,
    src_idx: &[usize],
    global_step: usize,
) -> Result<LossBreakdown, Error> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, &adaptation_frozen);
    let src_images: Vec<&Tensor> = src_idx.iter().map(|&i| &source.images[i]).collect();
    let src_gts: Vec<Vec<Annotation>> =
        src_idx.iter().map(|&i| source.annotations[i].clone()).collect();
    let (_, det) = source_det_loss(&mut g, model, &bound, anchors, &src_images, &src_gts)?;
    g.backward(det)?;
    let grads = collect_grads(&g, &bound);
    sgd.step(&mut model.params, &grads)?;
    let v = g.value(det).item();
    Ok(LossBreakdown {
        step: global_step,
        l_det: v,
        l_mlc: 0.0,
        l_dcbr: 0.0,
        l_la: 0.0,
        l_adv: 0.0,
        l_jca: 0.0,
        l_pr: 0.0,
        total: v,
    })
}

pub fn train(cfg: &Config, out_dir: &Path) -> Result<TrainReport, Error> {
    cfg.validate()?;
    let source = read_dataset(&cfg.source_dir)?;
    if source.is_empty() {
        return Err(Error::Invalid(format!("empty source set in {}", cfg.source_dir.display())));
    }
    let need_target = cfg.enable_dcbr || cfg.enable_copm || cfg.enable_rjca;
    let target = if need_target {
        let t = read_dataset(&cfg.target_dir)?;
        if t.len() < cfg.batch_target {
            return Err(Error::Invalid(format!(
                "batch_target {} exceeds target set size {}",
                cfg.batch_target,
                t.len()
            )));
        }
        Some(t)
    } else {
        None
    };
    let steps_per_epoch = source.len() / cfg.batch_source;
    if steps_per_epoch == 0 {
        return Err(Error::Invalid(format!(
            "batch_source {} exceeds source set size {}",
            cfg.batch_source,
            source.len()
        )));
    }

    let (model_cfg, params, _) = load_checkpoint(&cfg.mlc_checkpoint).map_err(|e| {
        Error::Checkpoint(format!(
            "cannot load pretraining checkpoint {} (run pretrain-mlc first): {e}",
            cfg.mlc_checkpoint.display()
        ))
    })?;
    let mut model = DetectionModel::from_parts(model_cfg, params);
    let anchors = AnchorGrid::new();
    let mut bank =
        PrototypeBank::new(LAYER_NAMES.len(), model.cfg.class_count, FEAT_CHANNELS, cfg.rho)?;

    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let mut rng_src = Rng::stream(cfg.seed, "shuffle_src");
    let mut rng_tgt = Rng::stream(cfg.seed, "shuffle_tgt");
    let mut src_order: Vec<usize> = (0..source.len()).collect();
    let mut tgt_order: Vec<usize> = target.as_ref().map_or_else(Vec::new, |t| (0..t.len()).collect());
    let mut tgt_pos = usize::MAX; // forces an initial shuffle
    let start = Instant::now();
    let mut global_step = 0usize;
    let mut last_line: Option<String> = None;

    // Warm-up: detection-only epochs on source so adaptation starts from a
    // detector whose features and predictions mean something; prototypes and
    // pseudo-labels computed from an untrained net would only align noise.
    for epoch in 0..cfg.det_warmup_epochs {
        if epoch == cfg.lr_decay_epoch && epoch > 0 {
            sgd.lr *= 0.1;
            log::info!("epoch {epoch}: learning rate decayed to {}", sgd.lr);
        }
        rng_src.shuffle(&mut src_order);
        for step in 0..steps_per_epoch {
            let src_idx = &src_order[step * cfg.batch_source..(step + 1) * cfg.batch_source];
            let breakdown = det_only_step(&mut model, &anchors, &mut sgd, &source, src_idx, global_step)?;
            finite_or_abort(&breakdown, &last_line)?;
            last_line = Some(write_metrics_line(&mut metrics, &breakdown, start.elapsed().as_secs_f64())?);
            global_step += 1;
        }
        save_checkpoint(
            &out_dir.join(format!("checkpoint_epoch_{epoch}.i3nt")),
            &model.cfg,
            &model.params,
            &bank,
        )?;
    }

    // Source global prototypes are seeded once, at the start of adaptation.
    if cfg.enable_rjca {
        source_global_prototypes(&model, &anchors, &source.images, &source.annotations, &mut bank)?;
    }

    for epoch in 0..cfg.epochs {
        let epoch = cfg.det_warmup_epochs + epoch;
        if epoch == cfg.lr_decay_epoch && epoch > 0 {
            sgd.lr *= 0.1;
            log::info!("epoch {epoch}: learning rate decayed to {}", sgd.lr);
        }
        let split = match (&target, cfg.enable_dcbr) {
            (Some(t), true) => Some(refresh_target_split(&model, &t.images)?),
            _ => None,
        };
        rng_src.shuffle(&mut src_order);
        for step in 0..steps_per_epoch {
            let src_idx = &src_order[step * cfg.batch_source..(step + 1) * cfg.batch_source];
            let tgt_idx: Vec<usize> = if let Some(t) = &target {
                if tgt_pos == usize::MAX || tgt_pos + cfg.batch_target > t.len() {
                    rng_tgt.shuffle(&mut tgt_order);
                    tgt_pos = 0;
                }
                let out = tgt_order[tgt_pos..tgt_pos + cfg.batch_target].to_vec();
                tgt_pos += cfg.batch_target;
                out
            } else {
                Vec::new()
            };
            let breakdown = adapt_step(
                cfg,
                &mut model,
                &anchors,
                &mut bank,
                &mut sgd,
                split.as_ref(),
                &source,
                target.as_ref(),
                src_idx,
                &tgt_idx,
                global_step,
            )?;
            finite_or_abort(&breakdown, &last_line)?;
            last_line = Some(write_metrics_line(&mut metrics, &breakdown, start.elapsed().as_secs_f64())?);
            global_step += 1;
        }
        save_checkpoint(
            &out_dir.join(format!("checkpoint_epoch_{epoch}.i3nt")),
            &model.cfg,
            &model.params,
            &bank,
        )?;
    }
    metrics.flush()?;
    let final_path = out_dir.join("final.i3nt");
    save_checkpoint(&final_path, &model.cfg, &model.params, &bank)?;
    Ok(TrainReport { final_checkpoint: final_path, metrics_path, steps: global_step })
}

/// One adaptation step: build the composite graph, descend, update EMA
/// state, and report the loss breakdown.
#[allow(clippy::too_many_arguments)]
fn adapt_step(
    cfg: &Config,
    model: &mut DetectionModel,
    anchors: &AnchorGrid,
    bank: &mut PrototypeBank,
    sgd: &mut Sgd,
    split: Option<&TargetSplit>,
    source: &Dataset,
    target: Option<&Dataset>,
    src_idx: &[usize],
    tgt_idx: &[usize],
    global_step: usize,
) -> Result<LossBreakdown, Error> {
    let k = model.cfg.class_count;
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, &adaptation_frozen);
    let src_images: Vec<&Tensor> = src_idx.iter().map(|&i| &source.images[i]).collect();
    let src_gts: Vec<Vec<Annotation>> = src_idx.iter().map(|&i| source.annotations[i].clone()).collect();
    let (taps_s, det) = source_det_loss(&mut g, model, &bound, anchors, &src_images, &src_gts)?;

    let taps_t = if let Some(t) = target {
        let refs: Vec<&Tensor> = tgt_idx.iter().map(|&i| &t.images[i]).collect();
        let xt = g.constant(stack_images(&refs)?);
        Some(model.forward(&mut g, &bound, xt)?)
    } else {
        None
    };

    let mut total = det;
    let mut l_dcbr_node: Option<NodeId> = None;
    if let (Some(taps_t), Some(split)) = (&taps_t, split) {
        let d_s = image_discriminator(&mut g, &bound, taps_s.g2, Some(cfg.grl_beta))?;
        let d_t = image_discriminator(&mut g, &bound, taps_t.g2, Some(cfg.grl_beta))?;
        let weights: Vec<f64> = tgt_idx
            .iter()
            .map(|&i| sample_weight(split, i, cfg.tau, cfg.theta))
            .collect::<Result<_, _>>()?;
        let adv = dcbr_adv_loss(&mut g, d_s, d_t, Some(&weights))?;
        let scaled = g.scale(adv, cfg.lambda1);
        total = g.add(total, scaled)?;
        l_dcbr_node = Some(adv);
    }

    let mut copm_nodes: Option<(NodeId, NodeId)> = None;
    let mut rjca_nodes: Option<(NodeId, NodeId)> = None;
    let mut globals = None;
    if let Some(taps_t) = &taps_t {
        let mut lambda2_sum: Option<NodeId> = None;
        if cfg.enable_copm {
            let c = copm_loss(&mut g, &bound, &taps_s, taps_t, src_idx.len(), tgt_idx.len(), cfg.grl_beta)?;
            lambda2_sum = Some(g.add(c.la, c.adv)?);
            copm_nodes = Some((c.la, c.adv));
        }
        if cfg.enable_rjca {
            let src_ann_refs: Vec<&[Annotation]> = src_gts.iter().map(Vec::as_slice).collect();
            let src_labels = source_pixel_labels(anchors, &src_ann_refs);
            let mut probs = Vec::with_capacity(taps_t.heads.len());
            for head in &taps_t.heads {
                let p = g.softmax(head.cls_map, 1, 1.0)?;
                probs.push(g.value(p).clone());
            }
            let tgt_labels = target_pixel_labels(&probs)?;
            let mut locals_s = Vec::new();
            let mut locals_t = Vec::new();
            for l in 0..LAYER_NAMES.len() {
                locals_s.push(local_prototypes(&mut g, taps_s.layer_feats[l], &src_labels.per_layer[l], k)?);
                locals_t.push(local_prototypes(&mut g, taps_t.layer_feats[l], &tgt_labels.per_layer[l], k)?);
            }
            let step_globals = compose_globals(&mut g, bank, &locals_s, &locals_t)?;
            let jca = jca_loss(&mut g, &step_globals, cfg.margin)?;
            let pr = pr_loss(&mut g, &bound, &step_globals, k, cfg.temperature)?;
            let pr_scaled = g.scale(pr, cfg.gamma);
            let rjca = g.add(jca, pr_scaled)?;
            lambda2_sum = Some(match lambda2_sum {
                Some(s) => g.add(s, rjca)?,
                None => rjca,
            });
            rjca_nodes = Some((jca, pr));
            globals = Some(step_globals);
        }
        if let Some(s) = lambda2_sum {
            let scaled = g.scale(s, cfg.lambda2);
            total = g.add(total, scaled)?;
        }
    }

    g.backward(total)?;
    let grads = collect_grads(&g, &bound);
    sgd.step(&mut model.params, &grads)?;
    if let Some(globals) = &globals {
        apply_ema(bank, &g, globals)?;
    }

    let l_det = g.value(det).item();
    let l_dcbr = l_dcbr_node.map_or(0.0, |n| g.value(n).item());
    let (l_la, l_adv) = copm_nodes.map_or((0.0, 0.0), |(a, b)| (g.value(a).item(), g.value(b).item()));
    let (l_jca, l_pr) = rjca_nodes.map_or((0.0, 0.0), |(a, b)| (g.value(a).item(), g.value(b).item()));
    let breakdown = LossBreakdown {
        step: global_step,
        l_det,
        l_mlc: 0.0,
        l_dcbr,
        l_la,
        l_adv,
        l_jca,
        l_pr,
        total: g.value(total).item(),
    };
    // bookkeeping identity: the graph total must recombine from components
    let expect = total_loss(
        l_det,
        l_dcbr,
        l_la + l_adv,
        l_jca + cfg.gamma * l_pr,
        cfg.lambda1,
        cfg.lambda2,
    );
    if let Ok(e) = expect {
        if (e - breakdown.total).abs() > 1e-9 {
            return Err(Error::Invalid(format!(
                "loss bookkeeping drifted: graph total {} vs recombination {e}",
                breakdown.total
            )));
        }
    }
    Ok(breakdown)
}

/// Reference source-only baseline: an independent minimal loop (no
/// adaptation machinery at all) that must reproduce `train` with every
/// component disabled, byte for byte.
pub fn train_source_only(cfg: &Config, out_dir: &Path) -> Result<TrainReport, Error> {
    cfg.validate()?;
    let source = read_dataset(&cfg.source_dir)?;
    if source.is_empty() {
        return Err(Error::Invalid(format!("empty source set in {}", cfg.source_dir.display())));
    }
    let steps_per_epoch = source.len() / cfg.batch_source;
    if steps_per_epoch == 0 {
        return Err(Error::Invalid(format!(
            "batch_source {} exceeds source set size {}",
            cfg.batch_source,
            source.len()
        )));
    }
    let (model_cfg, params, _) = load_checkpoint(&cfg.mlc_checkpoint)?;
    let mut model = DetectionModel::from_parts(model_cfg, params);
    let anchors = AnchorGrid::new();
    let bank = PrototypeBank::new(LAYER_NAMES.len(), model.cfg.class_count, FEAT_CHANNELS, cfg.rho)?;

    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let mut rng_src = Rng::stream(cfg.seed, "shuffle_src");
    let mut src_order: Vec<usize> = (0..source.len()).collect();
    let start = Instant::now();
    let mut global_step = 0usize;
    let mut last_line: Option<String> = None;

    // Same total budget as `train`: warm-up epochs plus adaptation epochs,
    // all detection-only here.
    for epoch in 0..cfg.det_warmup_epochs + cfg.epochs {
        if epoch == cfg.lr_decay_epoch && epoch > 0 {
            sgd.lr *= 0.1;
        }
        rng_src.shuffle(&mut src_order);
        for step in 0..steps_per_epoch {
            let src_idx = &src_order[step * cfg.batch_source..(step + 1) * cfg.batch_source];
            let breakdown = det_only_step(&mut model, &anchors, &mut sgd, &source, src_idx, global_step)?;
            finite_or_abort(&breakdown, &last_line)?;
            last_line = Some(write_metrics_line(&mut metrics, &breakdown, start.elapsed().as_secs_f64())?);
            global_step += 1;
        }
        save_checkpoint(
            &out_dir.join(format!("checkpoint_epoch_{epoch}.i3nt")),
            &model.cfg,
            &model.params,
            &bank,
        )?;
    }
    metrics.flush()?;
    let final_path = out_dir.join("final.i3nt");
    save_checkpoint(&final_path, &model.cfg, &model.params, &bank)?;
    Ok(TrainReport { final_checkpoint: final_path, metrics_path, steps: global_step })
}

// ── Evaluation ───────────────────────────────────────────────────────────

/// Evaluate a checkpoint on a labeled set: per-class AP@0.5 plus mAP as a
/// deterministic text report.
pub fn evaluate_checkpoint(checkpoint: &Path, data_dir: &Path) -> Result<String, Error> {
    let (model_cfg, params, _) = load_checkpoint(checkpoint)?;
    let model = DetectionModel::from_parts(model_cfg, params);
    let data = read_dataset(data_dir)?;
    if data.is_empty() {
        return Err(Error::Invalid(format!("empty evaluation set in {}", data_dir.display())));
    }
    let detections = predict(&model, &data.images, EVAL_CONF_THRESH, EVAL_NMS_IOU)?;
    let (per_class, map) = evaluate_map(&detections, &data.annotations, 0.5, model.cfg.class_count);
    let mut report = String::new();
    report.push_str(&format!(
        "evaluation: {} images, {} classes, IoU 0.5\n",
        data.len(),
        model.cfg.class_count
    ));
    for (kk, ap) in per_class.iter().enumerate() {
        let name = crate::data::class_name(kk);
        match ap {
            Some(v) => report.push_str(&format!("  class {kk} ({name}): AP {v:.6}\n")),
            None => report.push_str(&format!("  class {kk} ({name}): AP n/a (no ground truth)\n")),
        }
    }
    report.push_str(&format!("mAP@0.5: {map:.6}\n"));
    Ok(report)
}

/// Convenience for experiments: mAP@0.5 of a checkpoint on a dataset.
pub fn checkpoint_map(checkpoint: &Path, data_dir: &Path) -> Result<f64, Error> {
    let (model_cfg, params, _) = load_checkpoint(checkpoint)?;
    let model = DetectionModel::from_parts(model_cfg, params);
    let data = read_dataset(data_dir)?;
    let detections = predict(&model, &data.images, EVAL_CONF_THRESH, EVAL_NMS_IOU)?;
    Ok(evaluate_map(&detections, &data.annotations, 0.5, model.cfg.class_count).1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{write_dataset, SceneSpec};

    fn tiny_config(dir: &Path) -> Config {
        let mut spec_s = SceneSpec::source(70);
        spec_s.objects_max = 2;
        let mut spec_t = SceneSpec::target(71);
        spec_t.objects_max = 2;
        write_dataset(&dir.join("src"), &spec_s, 8).unwrap();
        write_dataset(&dir.join("tgt"), &spec_t, 8).unwrap();
        Config {
            epochs: 1,
            det_warmup_epochs: 0,
            mlc_epochs: 1,
            batch_source: 4,
            batch_target: 4,
            lr_decay_epoch: 10,
            seed: 3,
            source_dir: dir.join("src"),
            target_dir: dir.join("tgt"),
            mlc_checkpoint: dir.join("mlc.i3nt"),
            ..Default::default()
        }
    }

    #[test]
    fn total_loss_worked_examples() {
        assert!((total_loss(1.0, 2.0, 3.0, 4.0, 0.05, 1.0).unwrap() - 8.1).abs() < 1e-12);
        assert_eq!(total_loss(1.5, 9.0, 9.0, 9.0, 0.0, 0.0).unwrap(), 1.5);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, 0.05, 1.0).unwrap(), 0.0);
        let err = total_loss(1.0, f64::NAN, 0.0, 0.0, 0.05, 1.0).unwrap_err().to_string();
        assert!(err.contains("l_dcbr"), "NaN abort must name the component: {err}");
    }

    #[test]
    fn sgd_matches_hand_rule() {
        let mut params = ParamStore::new();
        params.insert("p", Tensor::from_slice(&[2], &[1.0, -2.0]).unwrap());
        let mut sgd = Sgd::new(0.1, 0.9, 0.5);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), vec![0.2, 0.4]);
        // step 1: v = g + wd*p = (0.7, -0.6); p = p - 0.1*v
        sgd.step(&mut params, &grads).unwrap();
        let p = params.get("p").unwrap().data().to_vec();
        assert!((p[0] - 0.93).abs() < 1e-15 && (p[1] - (-1.94)).abs() < 1e-15, "{p:?}");
        // step 2: v = 0.9*v + g + wd*p
        sgd.step(&mut params, &grads).unwrap();
        let v0 = 0.9 * 0.7 + 0.2 + 0.5 * 0.93;
        let want0 = 0.93 - 0.1 * v0;
        let p = params.get("p").unwrap().data().to_vec();
        assert!((p[0] - want0).abs() < 1e-15, "{} vs {want0}", p[0]);
    }

    #[test]
    fn pretrain_reduces_loss_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.mlc_epochs = 3;
        let report = pretrain_mlc(&cfg).unwrap();
        assert!(
            report.final_loss < report.initial_loss,
            "pretraining must reduce the multi-label loss: {} -> {}",
            report.initial_loss,
            report.final_loss
        );
        let first = std::fs::read(&report.checkpoint).unwrap();
        pretrain_mlc(&cfg).unwrap();
        let second = std::fs::read(&report.checkpoint).unwrap();
        assert_eq!(first, second, "same seed must give identical pretrained parameters");
    }

    #[test]
    fn adaptation_step_zeroes_disabled_columns_and_keeps_identity() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        pretrain_mlc(&cfg).unwrap();
        cfg.enable_copm = false;
        let report = train(&cfg, &dir.path().join("out")).unwrap();
        let lines = std::fs::read_to_string(&report.metrics_path).unwrap();
        assert_eq!(lines.lines().count(), 2, "8 images / batch 4 = 2 steps");
        for line in lines.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["l_la"].as_f64().unwrap(), 0.0, "disabled column must be exactly 0");
            assert_eq!(v["l_adv"].as_f64().unwrap(), 0.0);
            assert_eq!(v["l_mlc"].as_f64().unwrap(), 0.0);
            let recombined = total_loss(
                v["l_det"].as_f64().unwrap(),
                v["l_dcbr"].as_f64().unwrap(),
                v["l_la"].as_f64().unwrap() + v["l_adv"].as_f64().unwrap(),
                v["l_jca"].as_f64().unwrap() + cfg.gamma * v["l_pr"].as_f64().unwrap(),
                cfg.lambda1,
                cfg.lambda2,
            )
            .unwrap();
            assert!(
                (recombined - v["total"].as_f64().unwrap()).abs() < 1e-9,
                "total must recombine from components"
            );
            assert!(v["wall_secs"].as_f64().unwrap() >= 0.0);
        }
    }

    #[test]
    fn adaptation_keeps_frozen_parameters_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        pretrain_mlc(&cfg).unwrap();
        let (_, before, _) = load_checkpoint(&cfg.mlc_checkpoint).unwrap();
        let report = train(&cfg, &dir.path().join("out")).unwrap();
        let (_, after, _) = load_checkpoint(&report.final_checkpoint).unwrap();
        for name in ["mlc.w", "mlc.b", "copm.r1", "copm.r2"] {
            let b = before.get(name).unwrap().data();
            let a = after.get(name).unwrap().data();
            assert_eq!(b, a, "{name} must stay bit-identical through adaptation");
        }
        // and something must actually have trained
        let b = before.get("backbone.b1.w").unwrap().data();
        let a = after.get("backbone.b1.w").unwrap().data();
        assert_ne!(b, a, "backbone must move during adaptation");
    }

    #[test]
    fn disabling_everything_matches_source_only_loop() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.epochs = 2;
        cfg.det_warmup_epochs = 1;
        pretrain_mlc(&cfg).unwrap();
        cfg.enable_dcbr = false;
        cfg.enable_copm = false;
        cfg.enable_rjca = false;
        let a = train(&cfg, &dir.path().join("a")).unwrap();
        let b = train_source_only(&cfg, &dir.path().join("b")).unwrap();
        let strip = |p: &Path| -> String {
            std::fs::read_to_string(p)
                .unwrap()
                .lines()
                .map(|l| {
                    let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                    v.as_object_mut().unwrap().remove("wall_secs");
                    serde_json::to_string(&v).unwrap()
                })
                .collect::<Vec<_>>()
                .join("\n")
        };
        assert_eq!(
            strip(&a.metrics_path),
            strip(&b.metrics_path),
            "metrics streams must agree apart from wall-clock"
        );
        assert_eq!(
            std::fs::read(&a.final_checkpoint).unwrap(),
            std::fs::read(&b.final_checkpoint).unwrap(),
            "checkpoints must be byte-identical"
        );
    }

    #[test]
    fn evaluation_report_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        pretrain_mlc(&cfg).unwrap();
        let r1 = evaluate_checkpoint(&cfg.mlc_checkpoint, &cfg.source_dir).unwrap();
        let r2 = evaluate_checkpoint(&cfg.mlc_checkpoint, &cfg.source_dir).unwrap();
        assert_eq!(r1, r2, "same checkpoint must evaluate to identical bytes");
        assert!(r1.contains("mAP@0.5:"), "report format: {r1}");
        assert!(r1.contains("circle"), "report names classes: {r1}");
    }

    #[test]
    fn train_requires_pretraining_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let err = train(&cfg, &dir.path().join("out")).unwrap_err().to_string();
        assert!(err.contains("pretrain-mlc"), "error must point at pretraining: {err}");
    }
}
