//! Category-aware object pattern matching on low-level features.
//!
//! Per spatial position, the low-level feature vector A and the resampled
//! detection-head class distribution p̂ are fused by a randomized
//! multilinear map Â = (R₁A) ⊙ (R₂p̂) — an unbiased low-dimensional
//! estimate of their tensor product. Channel-wise squared magnitude turns
//! the fused tensor into an attention map; per-domain mean maps are
//! L2-normalized and matched by scaled Euclidean distance. A 1×1-conv
//! pixel discriminator behind gradient reversal supplies the accompanying
//! adversarial term.

use crate::detector::{BoundParams, Taps};
use crate::graph::{Graph, NodeId};
use crate::Error;

use crate::dcbr::PROB_EPS;

/// Value-level fusion of one position: `(R₁a) ⊙ (R₂p)`. `r1` is `[C, D]`
/// row-major, `r2` `[K1, D]`; output length D. Shared by the unbiasedness
/// diagnostics and the graph pipeline tests.
pub fn fuse_vectors(r1: &[f64], r2: &[f64], a: &[f64], p: &[f64], d: usize) -> Result<Vec<f64>, Error> {
    if r1.len() != a.len() * d || r2.len() != p.len() * d {
        return Err(Error::Shape(format!(
            "projection sizes {}/{} vs {}x{d} and {}x{d}",
            r1.len(),
            r2.len(),
            a.len(),
            p.len()
        )));
    }
    let mut out = vec![0.0; d];
    for j in 0..d {
        let mut u = 0.0;
        for (i, &ai) in a.iter().enumerate() {
            u += r1[i * d + j] * ai;
        }
        let mut v = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            v += r2[i * d + j] * pi;
        }
        out[j] = u * v;
    }
    Ok(out)
}

/// Graph-level fusion of a whole feature map with a spatially aligned
/// class-probability map: `feat [N,C,H,W]` and `probs [N,K1,H,W]` become
/// the fused `[N·H·W, D]` matrix.
pub fn fused_map(
    g: &mut Graph,
    b: &BoundParams,
    feat: NodeId,
    probs: NodeId,
) -> Result<NodeId, Error> {
    let fs = g.value(feat).shape().to_vec();
    let ps = g.value(probs).shape().to_vec();
    if fs.len() != 4 || ps.len() != 4 || fs[0] != ps[0] || fs[2] != ps[2] || fs[3] != ps[3] {
        return Err(Error::Shape(format!("fused_map inputs {:?} vs {:?}", fs, ps)));
    }
    let (n, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
    let k1 = ps[1];
    let r1 = b.id("copm.r1")?;
    let r2 = b.id("copm.r2")?;
    let r1s = g.value(r1).shape().to_vec();
    let r2s = g.value(r2).shape().to_vec();
    if r1s[0] != c || r2s[0] != k1 {
        return Err(Error::Shape(format!(
            "projections {:?}/{:?} vs {c} channels and {k1} classes",
            r1s, r2s
        )));
    }
    let fp = g.permute(feat, &[0, 2, 3, 1])?;
    let fm = g.reshape(fp, vec![n * h * w, c])?;
    let u = g.matmul(fm, r1)?;
    let pp = g.permute(probs, &[0, 2, 3, 1])?;
    let pm = g.reshape(pp, vec![n * h * w, k1])?;
    let v = g.matmul(pm, r2)?;
    g.mul(u, v)
}

/// Channel-wise squared magnitude per position: fused `[P, D]` →
/// attention `[P]` with entries `Σ_d Â_d²`.
pub fn attention_map(g: &mut Graph, fused: NodeId) -> Result<NodeId, Error> {
    let sq = g.square(fused);
    g.sum_axis(sq, 1)
}

/// Scaled distance between L2-normalized maps:
/// `√(H·W) · ‖f_s/‖f_s‖ − f_t/‖f_t‖‖`. A zero-norm map (possible with
/// zero-initialized heads) contributes 0 with a logged warning.
pub fn pattern_match_loss(g: &mut Graph, f_s: NodeId, f_t: NodeId) -> Result<NodeId, Error> {
    let hw = g.value(f_s).numel();
    if g.value(f_t).numel() != hw {
        return Err(Error::Shape(format!(
            "map lengths differ: {} vs {}",
            hw,
            g.value(f_t).numel()
        )));
    }
    let ns = g.l2_norm(f_s);
    let nt = g.l2_norm(f_t);
    if g.value(ns).item() == 0.0 || g.value(nt).item() == 0.0 {
        log::warn!("zero-norm attention map; pattern-match term contributes 0");
        return Ok(g.constant_scalar(0.0));
    }
    let us = g.div(f_s, ns)?;
    let ut = g.div(f_t, nt)?;
    let diff = g.sub(us, ut)?;
    let dist = g.l2_norm(diff);
    Ok(g.scale(dist, (hw as f64).sqrt()))
}

/// Pixel discriminator (1×1 convs C→64→1, sigmoid) behind gradient
/// reversal; output `[N,1,H,W]` in (0,1).
pub fn pixel_discriminator(
    g: &mut Graph,
    b: &BoundParams,
    low: NodeId,
    grl_beta: Option<f64>,
) -> Result<NodeId, Error> {
    let feat = match grl_beta {
        Some(beta) => g.gradient_reversal(low, beta)?,
        None => low,
    };
    let h = g.conv2d(feat, b.id("dl.w1")?, Some(b.id("dl.b1")?), 1, 0)?;
    let h = g.relu(h);
    let out = g.conv2d(h, b.id("dl.w2")?, Some(b.id("dl.b2")?), 1, 0)?;
    Ok(g.sigmoid(out))
}

/// Pixel-level adversarial BCE averaged over all pixels of both domains
/// (source label 1, target label 0).
pub fn pixel_adv_loss(g: &mut Graph, d_src: NodeId, d_tgt: NodeId) -> Result<NodeId, Error> {
    let ns = g.value(d_src).numel();
    let nt = g.value(d_tgt).numel();
    if ns == 0 || nt == 0 {
        return Err(Error::Invalid("empty pixel batch".into()));
    }
    let ds = g.clamp(d_src, PROB_EPS, 1.0 - PROB_EPS);
    let log_s = g.log(ds);
    let sum_s = g.sum_all(log_s);
    let dt = g.clamp(d_tgt, PROB_EPS, 1.0 - PROB_EPS);
    let neg_dt = g.neg(dt);
    let one_minus = g.add_scalar(neg_dt, 1.0);
    let log_t = g.log(one_minus);
    let sum_t = g.sum_all(log_t);
    let total = g.add(sum_s, sum_t)?;
    Ok(g.scale(total, -1.0 / (ns + nt) as f64))
}

/// Per-domain attention map from one forward pass: fuse the `low` tap with
/// the nearest-resolution head's softmax (bilinearly resampled to the low
/// grid), square-sum channels, average over the batch. Returns the `[H·W]`
/// mean map node.
pub fn domain_attention(g: &mut Graph, b: &BoundParams, taps: &Taps, batch: usize) -> Result<NodeId, Error> {
    let low_shape = g.value(taps.low).shape().to_vec();
    let (h, w) = (low_shape[2], low_shape[3]);
    // head lA (8×8) is the nearest resolution to the 32×32 low tap
    let head = &taps.heads[0];
    let probs_map = g.softmax(head.cls_map, 1, 1.0)?;
    let probs_up = g.resize_bilinear(probs_map, h, w)?;
    let fused = fused_map(g, b, taps.low, probs_up)?;
    let att = attention_map(g, fused)?; // [N·H·W]
    let per_image = g.reshape(att, vec![batch, h * w])?;
    g.mean_axis(per_image, 0)
}

/// The two pattern-matching terms for one source/target batch pair.
pub struct CopmLoss {
    pub la: NodeId,
    pub adv: NodeId,
}

/// Assemble both terms: attention-map matching plus pixel-level
/// adversarial BCE. The composite objective is their sum.
pub fn copm_loss(
    g: &mut Graph,
    b: &BoundParams,
    taps_s: &Taps,
    taps_t: &Taps,
    batch_s: usize,
    batch_t: usize,
    grl_beta: f64,
) -> Result<CopmLoss, Error> {
    let f_s = domain_attention(g, b, taps_s, batch_s)?;
    let f_t = domain_attention(g, b, taps_t, batch_t)?;
    let la = pattern_match_loss(g, f_s, f_t)?;
    let d_s = pixel_discriminator(g, b, taps_s.low, Some(grl_beta))?;
    let d_t = pixel_discriminator(g, b, taps_t.low, Some(grl_beta))?;
    let adv = pixel_adv_loss(g, d_s, d_t)?;
    Ok(CopmLoss { la, adv })
}
