//! Joint category alignment over per-layer class prototypes.
//!
//! Every detection layer keeps one prototype per class and domain: the
//! mean feature vector of the spatial positions labeled with that class
//! (ground-truth anchor matches on source, confident head pseudo-labels
//! on target). Globals evolve as an exponential moving average of batch
//! locals; the alignment loss pulls same-class source/target prototypes
//! together and pushes cross-class pairs at least a margin apart, and a
//! tempered symmetric-KL term makes the layer heads agree on each target
//! prototype. Gradients reach the backbone only through the current
//! step's `(1−ρ)` local contribution — EMA state itself is plain data.

use crate::data::{Annotation, Domain};
use crate::detector::{
    match_anchors, stack_images, AnchorGrid, BoundParams, DetectionModel, MatchTarget,
};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use crate::Error;

/// EMA momentum ρ for global prototype updates.
pub const DEFAULT_RHO: f64 = 0.7;
/// Contrastive separation margin.
pub const DEFAULT_MARGIN: f64 = 1.0;
/// Weight of the prediction-consistency term inside the composite loss.
pub const DEFAULT_GAMMA: f64 = 0.1;
/// Softmax temperature of the prediction-consistency term.
pub const DEFAULT_KL_TEMP: f64 = 2.0;
/// Pseudo-label confidence gate: a target position is labeled only when
/// the head's foreground argmax probability exceeds this.
pub const PSEUDO_LABEL_CONF: f64 = 0.5;

// ── Prototype state ──────────────────────────────────────────────────────

/// Per-(layer, class, domain) global prototype vectors plus the EMA
/// momentum. `None` marks an entry no labeled position has fed yet.
#[derive(Clone, Debug)]
pub struct PrototypeBank {
    pub rho: f64,
    pub channels: usize,
    source: Vec<Vec<Option<Vec<f64>>>>,
    target: Vec<Vec<Option<Vec<f64>>>>,
}

impl PrototypeBank {
    pub fn new(layers: usize, classes: usize, channels: usize, rho: f64) -> Result<Self, Error> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::Invalid(format!("EMA momentum {rho} outside [0, 1)")));
        }
        Ok(PrototypeBank {
            rho,
            channels,
            source: vec![vec![None; classes]; layers],
            target: vec![vec![None; classes]; layers],
        })
    }

    pub fn layers(&self) -> usize {
        self.source.len()
    }

    pub fn classes(&self) -> usize {
        self.source.first().map_or(0, Vec::len)
    }

    fn side(&self, domain: Domain) -> &Vec<Vec<Option<Vec<f64>>>> {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    pub fn get(&self, domain: Domain, layer: usize, class: usize) -> Option<&[f64]> {
        self.side(domain)[layer][class].as_deref()
    }

    pub fn set(&mut self, domain: Domain, layer: usize, class: usize, value: Vec<f64>) -> Result<(), Error> {
        if value.len() != self.channels {
            return Err(Error::Shape(format!(
                "prototype length {} != channel width {}",
                value.len(),
                self.channels
            )));
        }
        let side = match domain {
            Domain::Source => &mut self.source,
            Domain::Target => &mut self.target,
        };
        side[layer][class] = Some(value);
        Ok(())
    }

    /// Number of classes with both domains initialized at `layer`.
    pub fn aligned_classes(&self, layer: usize) -> usize {
        (0..self.classes())
            .filter(|&k| self.source[layer][k].is_some() && self.target[layer][k].is_some())
            .count()
    }

    /// All initialized entries as (name, vector) pairs in deterministic
    /// order, for checkpoint serialization. Names look like
    /// `proto.source.l0.k2`.
    pub fn entries(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (tag, side) in [("source", &self.source), ("target", &self.target)] {
            for (l, classes) in side.iter().enumerate() {
                for (k, entry) in classes.iter().enumerate() {
                    if let Some(v) = entry {
                        out.push((format!("proto.{tag}.l{l}.k{k}"), v.as_slice()));
                    }
                }
            }
        }
        out
    }

    /// Restore one entry from its checkpoint name (`proto.<dom>.l<l>.k<k>`).
    pub fn restore(&mut self, name: &str, value: Vec<f64>) -> Result<(), Error> {
        let bad = || Error::Checkpoint(format!("unrecognized prototype entry name {name:?}"));
        let rest = name.strip_prefix("proto.").ok_or_else(bad)?;
        let (dom, rest) = rest.split_once('.').ok_or_else(bad)?;
        let domain = Domain::parse(dom).map_err(|_| bad())?;
        let (l, k) = rest.split_once('.').ok_or_else(bad)?;
        let layer: usize = l.strip_prefix('l').ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let class: usize = k.strip_prefix('k').ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if layer >= self.layers() || class >= self.classes() {
            return Err(bad());
        }
        self.set(domain, layer, class, value)
    }
}

/// One EMA step on plain values: `ρ·old + (1−ρ)·local`, elementwise, in
/// exactly the arithmetic order the graph composition uses.
pub fn ema_vec(old: &[f64], local: &[f64], rho: f64) -> Vec<f64> {
    old.iter().zip(local).map(|(&z, &l)| z * rho + l * (1.0 - rho)).collect()
}

// ── Pixel labeling ───────────────────────────────────────────────────────

/// Per-layer labeled positions `(image, y, x, class)`; at most one class
/// per position by construction.
pub struct PixelLabels {
    pub per_layer: Vec<Vec<(usize, usize, usize, usize)>>,
}

/// Source labeling: a position carries class `k` iff its anchor matched a
/// ground-truth box of that class.
pub fn source_pixel_labels(anchors: &AnchorGrid, batch_gts: &[&[Annotation]]) -> PixelLabels {
    let mut per_layer: Vec<Vec<(usize, usize, usize, usize)>> = anchors.grids.iter().map(|_| Vec::new()).collect();
    for (img, gts) in batch_gts.iter().enumerate() {
        let matches = match_anchors(&anchors.anchors, gts);
        let mut offset = 0;
        for (li, &gsize) in anchors.grids.iter().enumerate() {
            for idx in 0..gsize * gsize {
                if let MatchTarget::Positive { class_id, .. } = matches[offset + idx] {
                    per_layer[li].push((img, idx / gsize, idx % gsize, class_id));
                }
            }
            offset += gsize * gsize;
        }
    }
    PixelLabels { per_layer }
}

/// Target pseudo-labeling: position labeled `k` iff the head's softmax
/// argmax is foreground class `k` with probability above the confidence
/// gate. `head_probs` holds one `[N, K+1, G, G]` value tensor per layer
/// (background is channel 0).
pub fn target_pixel_labels(head_probs: &[Tensor]) -> Result<PixelLabels, Error> {
    let mut per_layer = Vec::with_capacity(head_probs.len());
    for probs in head_probs {
        let shape = probs.shape();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("head probabilities must be [N,K+1,G,G], got {:?}", shape)));
        }
        let (n, k1, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let data = probs.data();
        let mut labels = Vec::new();
        for img in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let at = |c: usize| data[((img * k1 + c) * h + y) * w + x];
                    let (mut best, mut best_p) = (0, at(0));
                    for c in 1..k1 {
                        if at(c) > best_p {
                            best = c;
                            best_p = at(c);
                        }
                    }
                    if best > 0 && best_p > PSEUDO_LABEL_CONF {
                        labels.push((img, y, x, best - 1));
                    }
                }
            }
        }
        per_layer.push(labels);
    }
    Ok(PixelLabels { per_layer })
}

// ── Local prototypes and EMA composition ────────────────────────────────

/// Per-class mean feature over the labeled positions of one layer,
/// in-graph so gradient reaches the features. Classes with no labeled
/// position yield `None`.
pub fn local_prototypes(
    g: &mut Graph,
    feat: NodeId,
    labels: &[(usize, usize, usize, usize)],
    class_count: usize,
) -> Result<Vec<Option<NodeId>>, Error> {
    let mut out = Vec::with_capacity(class_count);
    for k in 0..class_count {
        let coords: Vec<(usize, usize, usize)> = labels
            .iter()
            .filter(|&&(_, _, _, c)| c == k)
            .map(|&(n, y, x, _)| (n, y, x))
            .collect();
        if coords.is_empty() {
            out.push(None);
            continue;
        }
        let rows = g.gather_pixels(feat, &coords)?;
        out.push(Some(g.mean_axis(rows, 0)?));
    }
    Ok(out)
}

/// Post-update global prototypes as graph nodes, `[layer][class]` per
/// domain. Entries without a current local and without history stay
/// `None`.
pub struct StepGlobals {
    pub source: Vec<Vec<Option<NodeId>>>,
    pub target: Vec<Vec<Option<NodeId>>>,
}

/// Compose this step's post-update globals: `ρ·Z̄ + (1−ρ)·z̄` where a
/// local exists (gradient flows through the local term), the previous
/// global as a constant where it doesn't, and direct initialization for a
/// first-ever local.
pub fn compose_globals(
    g: &mut Graph,
    bank: &PrototypeBank,
    locals_source: &[Vec<Option<NodeId>>],
    locals_target: &[Vec<Option<NodeId>>],
) -> Result<StepGlobals, Error> {
    let compose_side = |g: &mut Graph, domain: Domain, locals: &[Vec<Option<NodeId>>]| -> Result<Vec<Vec<Option<NodeId>>>, Error> {
        let mut side = Vec::with_capacity(bank.layers());
        for l in 0..bank.layers() {
            let mut row = Vec::with_capacity(bank.classes());
            for k in 0..bank.classes() {
                let local = locals.get(l).and_then(|r| r[k]);
                let global = bank.get(domain, l, k);
                row.push(match (global, local) {
                    (Some(z), Some(loc)) => {
                        let old = g.constant(Tensor::new(vec![z.len()], z.to_vec())?);
                        let a = g.scale(old, bank.rho);
                        let b = g.scale(loc, 1.0 - bank.rho);
                        Some(g.add(a, b)?)
                    }
                    (Some(z), None) => Some(g.constant(Tensor::new(vec![z.len()], z.to_vec())?)),
                    (None, Some(loc)) => Some(loc),
                    (None, None) => None,
                });
            }
            side.push(row);
        }
        Ok(side)
    };
    Ok(StepGlobals {
        source: compose_side(g, Domain::Source, locals_source)?,
        target: compose_side(g, Domain::Target, locals_target)?,
    })
}

/// Write the composed post-update global values back into the bank. The
/// node values are exactly `ema_vec` of the previous state, so bank state
/// and graph stay bit-identical.
pub fn apply_ema(bank: &mut PrototypeBank, g: &Graph, globals: &StepGlobals) -> Result<(), Error> {
    for (domain, side) in [(Domain::Source, &globals.source), (Domain::Target, &globals.target)] {
        for (l, row) in side.iter().enumerate() {
            for (k, entry) in row.iter().enumerate() {
                if let Some(node) = entry {
                    bank.set(domain, l, k, g.value(*node).data().to_vec())?;
                }
            }
        }
    }
    Ok(())
}

// ── Losses ───────────────────────────────────────────────────────────────

/// Contrastive alignment over post-update globals: per layer, squared
/// distance pulls same-class source/target prototypes together and a
/// squared hinge pushes every cross-class pair at least `margin` apart.
/// Classes participate only where both domains are initialized; with
/// fewer than two such classes in every layer the loss is 0 with a
/// warning.
pub fn jca_loss(g: &mut Graph, globals: &StepGlobals, margin: f64) -> Result<NodeId, Error> {
    let layers = globals.source.len();
    let classes = globals.source.first().map_or(0, Vec::len);
    let aligned: Vec<Vec<usize>> = (0..layers)
        .map(|l| {
            (0..classes)
                .filter(|&k| globals.source[l][k].is_some() && globals.target[l][k].is_some())
                .collect()
        })
        .collect();
    if aligned.iter().map(Vec::len).max().unwrap_or(0) < 2 {
        log::warn!("fewer than 2 aligned classes in every layer; category-alignment loss is 0");
        return Ok(g.constant_scalar(0.0));
    }
    let mut total: Option<NodeId> = None;
    let push = |g: &mut Graph, term: NodeId, total: &mut Option<NodeId>| -> Result<(), Error> {
        *total = Some(match *total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
        Ok(())
    };
    for l in 0..layers {
        for &m in &aligned[l] {
            for &n in &aligned[l] {
                let s = globals.source[l][m].expect("aligned class has source entry");
                let t = globals.target[l][n].expect("aligned class has target entry");
                let diff = g.sub(s, t)?;
                let term = if m == n {
                    // compactness: squared distance
                    let sq = g.square(diff);
                    g.sum_all(sq)
                } else {
                    // separation: squared hinge on the distance
                    let dist = g.l2_norm(diff);
                    let neg = g.neg(dist);
                    let gap = g.add_scalar(neg, margin);
                    let hinge = g.relu(gap);
                    let sq = g.square(hinge);
                    g.sum_all(sq)
                };
                push(g, term, &mut total)?;
            }
        }
    }
    Ok(total.expect("at least one aligned pair"))
}

/// Tempered symmetric KL between two logit rows `[1, K+1]`:
/// `½[KL(p_a‖p_b) + KL(p_b‖p_a)]` with both distributions softmaxed at
/// temperature `temp`.
pub fn symmetric_kl(g: &mut Graph, logits_a: NodeId, logits_b: NodeId, temp: f64) -> Result<NodeId, Error> {
    let pa = g.softmax(logits_a, 1, temp)?;
    let la = g.log_softmax(logits_a, 1, temp)?;
    let pb = g.softmax(logits_b, 1, temp)?;
    let lb = g.log_softmax(logits_b, 1, temp)?;
    let d_ab = g.sub(la, lb)?;
    let kl_ab_terms = g.mul(pa, d_ab)?;
    let kl_ab = g.sum_all(kl_ab_terms);
    let d_ba = g.sub(lb, la)?;
    let kl_ba_terms = g.mul(pb, d_ba)?;
    let kl_ba = g.sum_all(kl_ba_terms);
    let sum = g.add(kl_ab, kl_ba)?;
    Ok(g.scale(sum, 0.5))
}

/// Prediction consistency: for each class whose target prototype exists in
/// both layers, run each layer's classification head on its own prototype
/// (as a 1×1 spatial input), softmax at temperature `temp`, and accumulate
/// the symmetric KL of the pair; divide by the class count.
pub fn pr_loss(
    g: &mut Graph,
    b: &BoundParams,
    globals: &StepGlobals,
    class_count: usize,
    temp: f64,
) -> Result<NodeId, Error> {
    let layers = globals.target.len();
    if layers < 2 {
        return Err(Error::Invalid(format!(
            "prediction consistency needs at least 2 layers, got {layers}"
        )));
    }
    let mut total: Option<NodeId> = None;
    for la in 0..layers {
        for lb in la + 1..layers {
            for k in 0..class_count {
                let (Some(za), Some(zb)) = (globals.target[la][k], globals.target[lb][k]) else {
                    continue;
                };
                let logits_a = head_on_prototype(g, b, za, la)?;
                let logits_b = head_on_prototype(g, b, zb, lb)?;
                let term = symmetric_kl(g, logits_a, logits_b, temp)?;
                total = Some(match total {
                    Some(t) => g.add(t, term)?,
                    None => term,
                });
            }
        }
    }
    Ok(match total {
        Some(t) => g.scale(t, 1.0 / class_count as f64),
        None => g.constant_scalar(0.0),
    })
}

/// Apply layer `l`'s classification head to a prototype vector treated as
/// a 1×1 spatial input; returns logits `[1, K+1]`.
fn head_on_prototype(g: &mut Graph, b: &BoundParams, proto: NodeId, layer: usize) -> Result<NodeId, Error> {
    let c = g.value(proto).numel();
    let name = crate::detector::LAYER_NAMES[layer];
    let x = g.reshape(proto, vec![1, c, 1, 1])?;
    let w = b.id(&format!("head.{name}.cls.w"))?;
    let bias = b.id(&format!("head.{name}.cls.b"))?;
    let out = g.conv2d(x, w, Some(bias), 1, 1)?;
    let k1 = g.value(out).shape()[1];
    g.reshape(out, vec![1, k1])
}

/// Composite: alignment plus `gamma` times prediction consistency.
pub fn rjca_total(g: &mut Graph, jca: NodeId, pr: NodeId, gamma: f64) -> Result<NodeId, Error> {
    let scaled = g.scale(pr, gamma);
    g.add(jca, scaled)
}

// ── Source initialization pass ───────────────────────────────────────────

/// Full-set source prototype initialization: mean layer feature over every
/// ground-truth-matched position, per class; classes never matched stay
/// uninitialized. Runs value-only forwards in small chunks.
pub fn source_global_prototypes(
    model: &DetectionModel,
    anchors: &AnchorGrid,
    images: &[Tensor],
    annotations: &[Vec<Annotation>],
    bank: &mut PrototypeBank,
) -> Result<(), Error> {
    let layers = bank.layers();
    let classes = bank.classes();
    let mut sums = vec![vec![vec![0.0; bank.channels]; classes]; layers];
    let mut counts = vec![vec![0usize; classes]; layers];
    for (chunk_idx, chunk) in images.chunks(8).enumerate() {
        let base = chunk_idx * 8;
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g, &|_| true);
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let x = g.constant(stack_images(&refs)?);
        let taps = model.forward(&mut g, &bound, x)?;
        let gts: Vec<&[Annotation]> = (0..chunk.len()).map(|i| annotations[base + i].as_slice()).collect();
        let labels = source_pixel_labels(anchors, &gts);
        for l in 0..layers {
            let feat = g.value(taps.layer_feats[l]);
            let shape = feat.shape();
            let (c, h, w) = (shape[1], shape[2], shape[3]);
            let data = feat.data();
            for &(img, y, x, k) in &labels.per_layer[l] {
                for ci in 0..c {
                    sums[l][k][ci] += data[((img * c + ci) * h + y) * w + x];
                }
                counts[l][k] += 1;
            }
        }
    }
    for l in 0..layers {
        for k in 0..classes {
            if counts[l][k] > 0 {
                let v: Vec<f64> = sums[l][k].iter().map(|s| s / counts[l][k] as f64).collect();
                bank.set(Domain::Source, l, k, v)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SceneSpec;
    use crate::detector::{DetectionModel, ModelConfig, FEAT_CHANNELS};
    use crate::graph::grad_check;
    use crate::rng::Rng;

    fn globals_from(source: Vec<Vec<Option<Vec<f64>>>>, target: Vec<Vec<Option<Vec<f64>>>>, g: &mut Graph) -> StepGlobals {
        let lift = |side: Vec<Vec<Option<Vec<f64>>>>, g: &mut Graph| {
            side.into_iter()
                .map(|row| {
                    row.into_iter()
                        .map(|e| e.map(|v| {
                            let n = v.len();
                            g.constant(Tensor::new(vec![n], v).unwrap())
                        }))
                        .collect()
                })
                .collect()
        };
        StepGlobals { source: lift(source, g), target: lift(target, g) }
    }

    #[test]
    fn ema_worked_examples() {
        assert_eq!(ema_vec(&[1.0, 1.0], &[0.0, 0.0], 0.7), vec![0.7, 0.7]);
        let z = vec![0.3, -0.4];
        assert_eq!(ema_vec(&z, &z, 0.7), z, "EMA fixed point must hold exactly");
    }

    #[test]
    fn ema_geometric_convergence_exact() {
        // constant local: the gap to it shrinks by exactly ρ each step
        let rho = 0.7;
        let local = [0.25, -1.5, 3.0];
        let z0 = [2.0, 0.5, -1.0];
        let mut z = z0.to_vec();
        for n in 1..=20 {
            z = ema_vec(&z, &local, rho);
            let expect = rho.powi(n);
            for (i, (&zi, &li)) in z.iter().zip(&local).enumerate() {
                let ratio = (zi - li) / (z0[i] - li);
                assert!(
                    (ratio - expect).abs() < 1e-12,
                    "step {n} dim {i}: gap ratio {ratio} vs rho^n {expect}"
                );
            }
        }
    }

    #[test]
    fn bank_roundtrip_and_bounds() {
        let mut bank = PrototypeBank::new(2, 3, 4, 0.7).unwrap();
        assert!(PrototypeBank::new(2, 3, 4, 1.0).is_err(), "rho must stay below 1");
        assert!(bank.get(Domain::Source, 0, 0).is_none());
        bank.set(Domain::Source, 0, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        bank.set(Domain::Target, 1, 2, vec![5.0; 4]).unwrap();
        assert!(bank.set(Domain::Source, 0, 0, vec![1.0]).is_err(), "length checked");
        assert_eq!(bank.get(Domain::Source, 0, 1).unwrap(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(bank.aligned_classes(0), 0);

        let names: Vec<String> = bank.entries().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names, vec!["proto.source.l0.k1", "proto.target.l1.k2"]);
        let mut restored = PrototypeBank::new(2, 3, 4, 0.7).unwrap();
        for (name, data) in bank.entries() {
            restored.restore(&name, data.to_vec()).unwrap();
        }
        assert_eq!(restored.get(Domain::Target, 1, 2).unwrap(), &[5.0; 4]);
        assert!(restored.restore("proto.source.l9.k0", vec![0.0; 4]).is_err());
        assert!(restored.restore("nonsense", vec![0.0; 4]).is_err());
    }

    #[test]
    fn local_prototypes_match_brute_force_oracle() {
        let mut rng = Rng::seeded(77);
        for trial in 0..1000 {
            let (n, c) = (1 + rng.below(2), 1 + rng.below(5));
            let (h, w) = (1 + rng.below(4), 1 + rng.below(4));
            let classes = 1 + rng.below(3);
            let feat = Tensor::new(
                vec![n, c, h, w],
                (0..n * c * h * w).map(|_| rng.range_f64(-2.0, 2.0)).collect(),
            )
            .unwrap();
            // label a random subset of positions (≤16 total positions)
            let mut labels = Vec::new();
            for img in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        if rng.next_f64() < 0.5 {
                            labels.push((img, y, x, rng.below(classes)));
                        }
                    }
                }
            }
            let mut g = Graph::new();
            let fx = g.constant(feat.clone());
            let locals = local_prototypes(&mut g, fx, &labels, classes).unwrap();
            for k in 0..classes {
                let members: Vec<&(usize, usize, usize, usize)> =
                    labels.iter().filter(|&&(_, _, _, cl)| cl == k).collect();
                match &locals[k] {
                    None => assert!(members.is_empty(), "trial {trial}: class {k} empty"),
                    Some(node) => {
                        let got = g.value(*node).data().to_vec();
                        let mut want = vec![0.0; c];
                        for &&(img, y, x, _) in &members {
                            for ci in 0..c {
                                want[ci] += feat.data()[((img * c + ci) * h + y) * w + x];
                            }
                        }
                        // same arithmetic as the graph mean: sum times reciprocal
                        let recip = 1.0 / members.len() as f64;
                        for v in want.iter_mut() {
                            *v *= recip;
                        }
                        assert_eq!(got, want, "trial {trial}: class {k} mean differs from oracle");
                    }
                }
            }
        }
    }

    #[test]
    fn jca_worked_example() {
        // 1 layer, K=2, 1-dim: Z̄s=(0, 0.5), Z̄t=(1, 1.5), margin 1 → 2.25
        let mut g = Graph::new();
        let globals = globals_from(
            vec![vec![Some(vec![0.0]), Some(vec![0.5])]],
            vec![vec![Some(vec![1.0]), Some(vec![1.5])]],
            &mut g,
        );
        let loss = jca_loss(&mut g, &globals, 1.0).unwrap();
        assert!((g.value(loss).item() - 2.25).abs() < 1e-12, "got {}", g.value(loss).item());
    }

    #[test]
    fn jca_zero_when_compact_and_separated() {
        // same-class prototypes coincide; cross-class distances ≥ margin
        let mut g = Graph::new();
        let globals = globals_from(
            vec![vec![Some(vec![0.0, 0.0]), Some(vec![5.0, 0.0])]],
            vec![vec![Some(vec![0.0, 0.0]), Some(vec![5.0, 0.0])]],
            &mut g,
        );
        let loss = jca_loss(&mut g, &globals, 1.0).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn jca_needs_two_aligned_classes() {
        let mut g = Graph::new();
        let globals = globals_from(
            vec![vec![Some(vec![0.0]), Some(vec![2.0])]],
            vec![vec![Some(vec![1.0]), None]],
            &mut g,
        );
        let loss = jca_loss(&mut g, &globals, 1.0).unwrap();
        assert_eq!(g.value(loss).item(), 0.0, "one aligned class returns 0");
    }

    #[test]
    fn jca_monotone_in_margin() {
        let mut rng = Rng::seeded(5);
        for _ in 0..50 {
            let mk = |rng: &mut Rng| vec![rng.range_f64(-1.0, 1.0), rng.range_f64(-1.0, 1.0)];
            let s = vec![vec![Some(mk(&mut rng)), Some(mk(&mut rng))]];
            let t = vec![vec![Some(mk(&mut rng)), Some(mk(&mut rng))]];
            let eval = |margin: f64| {
                let mut g = Graph::new();
                let globals = globals_from(s.clone(), t.clone(), &mut g);
                let l = jca_loss(&mut g, &globals, margin).unwrap();
                g.value(l).item()
            };
            assert!(eval(2.0) >= eval(1.0), "doubling the margin must not decrease the loss");
        }
    }

    #[test]
    fn symmetric_kl_worked_example() {
        // p_a=(0.5,0.5), p_b=(0.9,0.1) at T=1: ½(0.51083 + 0.36806) = 0.43945
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_slice(&[1, 2], &[0.0, 0.0]).unwrap());
        let b = g.constant(Tensor::from_slice(&[1, 2], &[0.9f64.ln(), 0.1f64.ln()]).unwrap());
        let kl = symmetric_kl(&mut g, a, b, 1.0).unwrap();
        assert!((g.value(kl).item() - 0.43945).abs() < 1e-5, "got {}", g.value(kl).item());

        // identical distributions → 0; symmetric in its arguments
        let same = symmetric_kl(&mut g, a, a, 2.0).unwrap();
        assert!(g.value(same).item().abs() < 1e-15);
        let swapped = symmetric_kl(&mut g, b, a, 1.0).unwrap();
        assert!((g.value(kl).item() - g.value(swapped).item()).abs() < 1e-15);
    }

    #[test]
    fn symmetric_kl_nonnegative_random() {
        let mut rng = Rng::seeded(21);
        for _ in 0..200 {
            let mut g = Graph::new();
            let a = g.constant(Tensor::new(vec![1, 4], (0..4).map(|_| rng.range_f64(-3.0, 3.0)).collect()).unwrap());
            let b = g.constant(Tensor::new(vec![1, 4], (0..4).map(|_| rng.range_f64(-3.0, 3.0)).collect()).unwrap());
            let t = rng.range_f64(0.5, 4.0);
            let kl = symmetric_kl(&mut g, a, b, t).unwrap();
            assert!(g.value(kl).item() >= 0.0, "symmetric KL must be nonnegative");
        }
    }

    #[test]
    fn pr_loss_on_model_heads() {
        let model = DetectionModel::new(ModelConfig::default(), 3);
        let mut rng = Rng::seeded(9);
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g, &|_| true);
        let proto = |g: &mut Graph, rng: &mut Rng| {
            let v: Vec<f64> = (0..FEAT_CHANNELS).map(|_| rng.range_f64(-0.5, 0.5)).collect();
            Some(g.constant(Tensor::new(vec![FEAT_CHANNELS], v).unwrap()))
        };
        let target = vec![
            vec![proto(&mut g, &mut rng), None, proto(&mut g, &mut rng)],
            vec![proto(&mut g, &mut rng), proto(&mut g, &mut rng), proto(&mut g, &mut rng)],
        ];
        let globals = StepGlobals { source: vec![vec![None; 3]; 2], target };
        let loss = pr_loss(&mut g, &bound, &globals, 3, DEFAULT_KL_TEMP).unwrap();
        let v = g.value(loss).item();
        assert!(v >= 0.0 && v.is_finite(), "consistency loss {v} out of range");

        // identical prototypes fed to identical heads → 0 requires equal heads;
        // instead check the no-overlap case returns exactly 0
        let empty = StepGlobals {
            source: vec![vec![None; 3]; 2],
            target: vec![vec![proto(&mut g, &mut rng), None, None], vec![None; 3]],
        };
        let zero = pr_loss(&mut g, &bound, &empty, 3, 2.0).unwrap();
        assert_eq!(g.value(zero).item(), 0.0);
    }

    #[test]
    fn rjca_total_worked_example() {
        let mut g = Graph::new();
        let jca = g.constant_scalar(2.25);
        let pr = g.constant_scalar(0.43945);
        let total = rjca_total(&mut g, jca, pr, 0.1).unwrap();
        assert!((g.value(total).item() - 2.293945).abs() < 1e-12);
        let zero_pr = g.constant_scalar(0.0);
        let same = rjca_total(&mut g, jca, zero_pr, 0.1).unwrap();
        assert_eq!(g.value(same).item(), 2.25);
        let gamma0 = rjca_total(&mut g, jca, pr, 0.0).unwrap();
        assert_eq!(g.value(gamma0).item(), 2.25);
    }

    #[test]
    fn jca_gradients_pass_fd() {
        // prototypes packed in one [4, C] tensor: rows = s0, s1, t0, t1
        let mut rng = Rng::seeded(31);
        for trial in 0..8 {
            let c = 3;
            let packed = Tensor::new(vec![4, c], (0..4 * c).map(|_| rng.range_f64(-1.5, 1.5)).collect()).unwrap();
            // skip draws near the hinge kink ‖s_m − t_n‖ ≈ margin
            let d = packed.data();
            let dist = |a: usize, b: usize| {
                (0..c).map(|i| (d[a * c + i] - d[b * c + i]).powi(2)).sum::<f64>().sqrt()
            };
            if (dist(0, 3) - 1.0).abs() < 0.05 || (dist(1, 2) - 1.0).abs() < 0.05 {
                continue;
            }
            let err = grad_check(
                |g, id| {
                    let rows: Vec<Option<NodeId>> = (0..4)
                        .map(|r| {
                            let sl = g.slice(id, 0, r, 1)?;
                            Ok(Some(g.reshape(sl, vec![c])?))
                        })
                        .collect::<Result<_, Error>>()?;
                    let globals = StepGlobals {
                        source: vec![vec![rows[0], rows[1]]],
                        target: vec![vec![rows[2], rows[3]]],
                    };
                    jca_loss(g, &globals, 1.0)
                },
                &packed,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "trial {trial}: alignment grad err {err}");
        }
    }

    #[test]
    fn pr_gradients_pass_fd() {
        let model = DetectionModel::new(ModelConfig::default(), 6);
        let mut rng = Rng::seeded(40);
        let packed = Tensor::new(
            vec![2, FEAT_CHANNELS],
            (0..2 * FEAT_CHANNELS).map(|_| rng.range_f64(-0.5, 0.5)).collect(),
        )
        .unwrap();
        let params = model.params.clone();
        let err = grad_check(
            move |g, id| {
                let bound = params.bind(g, &|_| true);
                let za = g.slice(id, 0, 0, 1)?;
                let za = g.reshape(za, vec![FEAT_CHANNELS])?;
                let zb = g.slice(id, 0, 1, 1)?;
                let zb = g.reshape(zb, vec![FEAT_CHANNELS])?;
                let globals = StepGlobals {
                    source: vec![vec![None; 3]; 2],
                    target: vec![vec![Some(za), None, None], vec![Some(zb), None, None]],
                };
                pr_loss(g, &bound, &globals, 3, DEFAULT_KL_TEMP)
            },
            &packed,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "consistency grad err {err}");
    }

    #[test]
    fn ema_composition_matches_value_update_and_initializes() {
        let mut bank = PrototypeBank::new(1, 2, 2, 0.7).unwrap();
        bank.set(Domain::Target, 0, 0, vec![1.0, -1.0]).unwrap();
        let mut g = Graph::new();
        let local0 = g.constant(Tensor::from_slice(&[2], &[0.5, 0.5]).unwrap());
        let local1 = g.constant(Tensor::from_slice(&[2], &[2.0, 3.0]).unwrap());
        let locals_t = vec![vec![Some(local0), Some(local1)]];
        let globals = compose_globals(&mut g, &bank, &[vec![None, None]], &locals_t).unwrap();
        apply_ema(&mut bank, &g, &globals).unwrap();
        // existing entry: ρ·old + (1−ρ)·local, bit-identical to ema_vec
        assert_eq!(
            bank.get(Domain::Target, 0, 0).unwrap(),
            ema_vec(&[1.0, -1.0], &[0.5, 0.5], 0.7).as_slice()
        );
        // first-ever local initializes directly
        assert_eq!(bank.get(Domain::Target, 0, 1).unwrap(), &[2.0, 3.0]);
        // source side untouched
        assert!(bank.get(Domain::Source, 0, 0).is_none());
    }

    #[test]
    fn source_labels_follow_anchor_matching() {
        let anchors = AnchorGrid::new();
        // one gt square matching the lA anchor at cell (2,3): center (0.4375, 0.3125)
        let gt = vec![Annotation { class_id: 2, cx: 0.4375, cy: 0.3125, w: 0.375, h: 0.375 }];
        let labels = source_pixel_labels(&anchors, &[&gt]);
        assert!(
            labels.per_layer[0].contains(&(0, 2, 3, 2)),
            "exact-overlap cell must be labeled: {:?}",
            labels.per_layer[0]
        );
        for &(_, _, _, k) in labels.per_layer.iter().flatten() {
            assert_eq!(k, 2, "only the gt class may appear");
        }
    }

    #[test]
    fn target_labels_respect_confidence_gate() {
        // probs [1, 3, 1, 2]: position 0 background-dominant; position 1 class-1 at 0.6
        let probs = Tensor::new(
            vec![1, 3, 1, 2],
            vec![
                0.8, 0.2, // channel 0 (background) at x=0,1
                0.1, 0.2, // channel 1 (class 0)
                0.1, 0.6, // channel 2 (class 1)
            ],
        )
        .unwrap();
        let labels = target_pixel_labels(&[probs]).unwrap();
        assert_eq!(labels.per_layer[0], vec![(0, 0, 1, 1)]);

        // exactly at the gate (0.5) is rejected
        let border = Tensor::new(vec![1, 3, 1, 1], vec![0.3, 0.2, 0.5]).unwrap();
        let labels = target_pixel_labels(&[border]).unwrap();
        assert!(labels.per_layer[0].is_empty(), "gate is strict");
    }

    #[test]
    fn source_init_pass_fills_bank_deterministically() {
        let model = DetectionModel::new(ModelConfig::default(), 11);
        let anchors = AnchorGrid::new();
        let mut images = Vec::new();
        let mut anns = Vec::new();
        for i in 0..6 {
            let spec = SceneSpec::source(400 + i);
            let (img, a) = crate::data::generate_scene(&spec, i).unwrap();
            images.push(img);
            anns.push(a);
        }
        let mut bank = PrototypeBank::new(2, 3, FEAT_CHANNELS, DEFAULT_RHO).unwrap();
        source_global_prototypes(&model, &anchors, &images, &anns, &mut bank).unwrap();
        let mut bank2 = PrototypeBank::new(2, 3, FEAT_CHANNELS, DEFAULT_RHO).unwrap();
        source_global_prototypes(&model, &anchors, &images, &anns, &mut bank2).unwrap();
        let mut initialized = 0;
        for l in 0..2 {
            for k in 0..3 {
                match (bank.get(Domain::Source, l, k), bank2.get(Domain::Source, l, k)) {
                    (Some(a), Some(b)) => {
                        assert_eq!(a, b, "init pass must be deterministic");
                        assert!(a.iter().all(|v| v.is_finite()));
                        initialized += 1;
                    }
                    (None, None) => {}
                    _ => panic!("banks disagree on initialization"),
                }
            }
        }
        assert!(initialized > 0, "six scenes should initialize at least one prototype");
    }
}
