//! Dynamic class-balanced reweighting of the image-level adversarial loss.
//!
//! A frozen multi-label classifier over the `g1` tap scores each target
//! image per class. Two per-sample weights are derived from it — `w1`, one
//! plus the mean of the confident class scores (confidence estimate), and
//! `w2 = exp(1 − N_t^k / N_t)`, which upweights samples assigned to
//! sample-scarce classes — blended as `w = θ·w1 + (1−θ)·w2`. The weight
//! scales the target term of a two-term image-level adversarial loss whose
//! features pass a gradient-reversal transform before the discriminator.
//!
//! Weights are difficulty estimates, not optimization variables: they are
//! computed from classifier values and enter the graph as constants.

use crate::detector::{BoundParams, DetectionModel};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use crate::Error;

/// Probability clamp applied before every logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Multi-label classifier head: global-average-pool of `g1`, one affine
/// layer, sigmoid per class. Output `[N, K]` in (0,1).
pub fn mlc_forward(g: &mut Graph, b: &BoundParams, g1: NodeId) -> Result<NodeId, Error> {
    let pooled = g.global_avg_pool(g1)?;
    let w = b.id("mlc.w")?;
    let bias = b.id("mlc.b")?;
    let logits = g.affine(pooled, w, bias)?;
    Ok(g.sigmoid(logits))
}

/// Negated multi-label binary cross-entropy, summed over every entry of
/// `y_hat` (one scalar per call; callers average over the batch if they
/// pass `[N, K]`). `y` entries must be 0 or 1.
pub fn mlc_loss(g: &mut Graph, y_hat: NodeId, y: &Tensor) -> Result<NodeId, Error> {
    if g.value(y_hat).shape() != y.shape() {
        return Err(Error::Shape(format!(
            "labels {:?} vs predictions {:?}",
            y.shape(),
            g.value(y_hat).shape()
        )));
    }
    if y.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Invalid("multi-label targets must be binary".into()));
    }
    let yh = g.clamp(y_hat, PROB_EPS, 1.0 - PROB_EPS);
    let ln_p = g.log(yh);
    let neg_yh = g.neg(yh);
    let one_minus = g.add_scalar(neg_yh, 1.0);
    let ln_q = g.log(one_minus);
    let y_pos = g.constant(y.clone());
    let y_neg_data: Vec<f64> = y.data().iter().map(|&v| 1.0 - v).collect();
    let y_neg = g.constant(Tensor::new(y.shape().to_vec(), y_neg_data)?);
    let t1 = g.mul(y_pos, ln_p)?;
    let t2 = g.mul(y_neg, ln_q)?;
    let both = g.add(t1, t2)?;
    let s = g.sum_all(both);
    Ok(g.neg(s))
}

/// Image-level multi-label target: `y_k = 1` iff the image contains at
/// least one class-`k` object.
pub fn multilabel_target(anns: &[crate::data::Annotation], class_count: usize) -> Tensor {
    let mut y = vec![0.0; class_count];
    for a in anns {
        y[a.class_id] = 1.0;
    }
    Tensor::new(vec![class_count], y).expect("shape product")
}

/// Confidence weight `w1`: one plus the mean of the scores above `tau`;
/// falls back to 1 when no score clears the threshold (the additive
/// constant alone — continuous with the confident case's lower bound).
pub fn compute_w1(y_hat: &[f64], tau: f64) -> Result<f64, Error> {
    if !(0.0..1.0).contains(&tau) || tau == 0.0 {
        return Err(Error::Invalid(format!("tau must lie in (0,1), got {tau}")));
    }
    let confident: Vec<f64> = y_hat.iter().copied().filter(|&v| v > tau).collect();
    if confident.is_empty() {
        Ok(1.0)
    } else {
        Ok(confident.iter().sum::<f64>() / confident.len() as f64 + 1.0)
    }
}

/// Pseudo class split of the target set: per-sample assigned class (argmax
/// of the classifier scores, ties toward the lowest index), per-class
/// counts, and the cached scores.
#[derive(Clone, Debug, Default)]
pub struct TargetSplit {
    pub assigned: Vec<usize>,
    pub counts: Vec<usize>,
    pub total: usize,
    pub scores: Vec<Vec<f64>>,
}

/// Argmax with ties broken toward the lowest class index.
pub fn assign_class(scores: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = k;
        }
    }
    best
}

impl TargetSplit {
    pub fn from_scores(scores: Vec<Vec<f64>>, class_count: usize) -> Self {
        let assigned: Vec<usize> = scores.iter().map(|s| assign_class(s)).collect();
        let mut counts = vec![0usize; class_count];
        for &k in &assigned {
            counts[k] += 1;
        }
        TargetSplit { total: assigned.len(), assigned, counts, scores }
    }
}

/// Class-balance weight `w2 = exp(1 − N_t^k / N_t)` for a sample assigned
/// to class `k`.
pub fn compute_w2(split: &TargetSplit, k: usize) -> Result<f64, Error> {
    if split.total == 0 {
        return Err(Error::Invalid("empty target split".into()));
    }
    if k >= split.counts.len() {
        return Err(Error::Invalid(format!("class {k} out of {}", split.counts.len())));
    }
    Ok((1.0 - split.counts[k] as f64 / split.total as f64).exp())
}

/// Blend `w = θ·w1 + (1−θ)·w2`.
pub fn combine_weights(w1: f64, w2: f64, theta: f64) -> Result<f64, Error> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Invalid(format!("theta must lie in [0,1], got {theta}")));
    }
    Ok(theta * w1 + (1.0 - theta) * w2)
}

/// Per-sample adversarial weight for one entry of the split.
pub fn sample_weight(split: &TargetSplit, index: usize, tau: f64, theta: f64) -> Result<f64, Error> {
    let w1 = compute_w1(&split.scores[index], tau)?;
    let w2 = compute_w2(split, split.assigned[index])?;
    combine_weights(w1, w2, theta)
}

/// Full pass of the frozen classifier over the target set; executed once
/// per epoch.
pub fn refresh_target_split(model: &DetectionModel, images: &[Tensor]) -> Result<TargetSplit, Error> {
    let mut scores = Vec::with_capacity(images.len());
    for chunk in images.chunks(8) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let batch = crate::detector::stack_images(&refs)?;
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g, &|_| true);
        let x = g.constant(batch);
        let taps = model.forward(&mut g, &bound, x)?;
        let y_hat = mlc_forward(&mut g, &bound, taps.g1)?;
        let k = model.cfg.class_count;
        let data = g.value(y_hat).data();
        for i in 0..chunk.len() {
            scores.push(data[i * k..(i + 1) * k].to_vec());
        }
    }
    Ok(TargetSplit::from_scores(scores, model.cfg.class_count))
}

/// Image-level discriminator on the `g2` tap: global-average-pool, two
/// affine layers with a ReLU between, sigmoid domain probability `[N, 1]`.
/// `grl_beta = Some(β)` inserts the gradient reversal in front.
pub fn image_discriminator(
    g: &mut Graph,
    b: &BoundParams,
    g2: NodeId,
    grl_beta: Option<f64>,
) -> Result<NodeId, Error> {
    let pooled = g.global_avg_pool(g2)?;
    let feat = match grl_beta {
        Some(beta) => g.gradient_reversal(pooled, beta)?,
        None => pooled,
    };
    let h = g.affine(feat, b.id("dg.w1")?, b.id("dg.b1")?)?;
    let h = g.relu(h);
    let out = g.affine(h, b.id("dg.w2")?, b.id("dg.b2")?)?;
    Ok(g.sigmoid(out))
}

/// Two-term image-level adversarial loss:
/// `−mean_s log D(s) − mean_t [w·log(1 − D(t))]`, each mean over its own
/// mini-batch. `weights = None` is the unweighted form; passing all-ones
/// weights reproduces it bit-exactly (multiplication by 1.0 is exact).
pub fn dcbr_adv_loss(
    g: &mut Graph,
    d_src: NodeId,
    d_tgt: NodeId,
    weights: Option<&[f64]>,
) -> Result<NodeId, Error> {
    let ns = g.value(d_src).shape()[0];
    let nt = g.value(d_tgt).shape()[0];
    if ns == 0 || nt == 0 {
        return Err(Error::Invalid("empty batch in adversarial loss".into()));
    }
    if let Some(w) = weights {
        if w.len() != nt {
            return Err(Error::Shape(format!("{} weights for {nt} target samples", w.len())));
        }
    }
    let ds = g.clamp(d_src, PROB_EPS, 1.0 - PROB_EPS);
    let log_ds = g.log(ds);
    let src_sum = g.sum_all(log_ds);
    let src_term = g.scale(src_sum, -1.0 / ns as f64);

    let dt = g.clamp(d_tgt, PROB_EPS, 1.0 - PROB_EPS);
    let neg_dt = g.neg(dt);
    let one_minus = g.add_scalar(neg_dt, 1.0);
    let log_dt = g.log(one_minus);
    let weighted = match weights {
        Some(w) => {
            let wt = g.constant(Tensor::new(vec![nt, 1], w.to_vec())?);
            g.mul(wt, log_dt)?
        }
        None => log_dt,
    };
    let tgt_sum = g.sum_all(weighted);
    let tgt_term = g.scale(tgt_sum, -1.0 / nt as f64);
    g.add(src_term, tgt_term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{stack_images, DetectionModel, ModelConfig};
    use crate::rng::Rng;

    #[test]
    fn w1_worked_examples_and_bounds() {
        assert_eq!(compute_w1(&[0.9, 0.6, 0.2], 0.5).unwrap(), 1.75);
        assert_eq!(compute_w1(&[0.1, 0.2, 0.3], 0.5).unwrap(), 1.0);
        assert!((compute_w1(&[0.55], 0.5).unwrap() - 1.55).abs() < 1e-12);
        assert!(compute_w1(&[0.5], 0.0).is_err());
        let mut rng = Rng::seeded(5);
        for _ in 0..1000 {
            let k = 1 + rng.below(5);
            let scores: Vec<f64> = (0..k).map(|_| rng.next_f64()).collect();
            let tau = rng.range_f64(0.05, 0.95);
            let w1 = compute_w1(&scores, tau).unwrap();
            assert!((1.0..=2.0).contains(&w1), "w1 = {w1}");
        }
    }

    #[test]
    fn w2_worked_examples_bounds_and_monotonicity() {
        let split = |counts: Vec<usize>| {
            let total = counts.iter().sum();
            TargetSplit { assigned: vec![], counts, total, scores: vec![] }
        };
        // every sample in one class: exponent 0
        assert_eq!(compute_w2(&split(vec![10, 0, 0]), 0).unwrap(), 1.0);
        // half the samples: e^{1/2}
        let s = split(vec![50, 50]);
        assert!((compute_w2(&s, 0).unwrap() - 0.5f64.exp()).abs() < 1e-12);
        assert!((compute_w2(&s, 0).unwrap() - 1.648721).abs() < 1e-6);
        // 10 of 100: e^{0.9}
        let s = split(vec![10, 90]);
        assert!((compute_w2(&s, 0).unwrap() - 0.9f64.exp()).abs() < 1e-12);
        assert!((compute_w2(&s, 0).unwrap() - 2.459603).abs() < 1e-6);
        // rejected on empty split
        assert!(compute_w2(&split(vec![0, 0]), 0).is_err());
        // bounds and strict decrease in the class count
        let mut last = f64::INFINITY;
        for n_k in 1..=20 {
            let s = split(vec![n_k, 20 - n_k]);
            let w2 = compute_w2(&s, 0).unwrap();
            assert!((1.0..std::f64::consts::E).contains(&w2), "w2 = {w2}");
            assert!(w2 < last, "w2 not strictly decreasing");
            last = w2;
        }
    }

    #[test]
    fn combine_worked_examples() {
        assert_eq!(combine_weights(1.3, 2.7, 1.0).unwrap(), 1.3);
        assert_eq!(combine_weights(1.3, 2.7, 0.0).unwrap(), 2.7);
        let w = combine_weights(1.75, 0.9f64.exp(), 0.5).unwrap();
        assert!((w - 2.104802).abs() < 1e-6);
        assert!((w - (1.75 + 0.9f64.exp()) / 2.0).abs() < 1e-12);
        assert!(combine_weights(1.0, 1.0, 1.5).is_err());
        assert!(combine_weights(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn mlc_loss_worked_examples() {
        let mut g = Graph::new();
        let yh = g.constant(Tensor::from_slice(&[1], &[0.5]).unwrap());
        let y = Tensor::from_slice(&[1], &[1.0]).unwrap();
        let l = mlc_loss(&mut g, yh, &y).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g.value(l).item() - 0.693147).abs() < 1e-6);

        let mut g = Graph::new();
        let yh = g.constant(Tensor::from_slice(&[2], &[0.5, 0.5]).unwrap());
        let y = Tensor::from_slice(&[2], &[1.0, 0.0]).unwrap();
        let l = mlc_loss(&mut g, yh, &y).unwrap();
        assert!((g.value(l).item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g.value(l).item() - 1.386294).abs() < 1e-6);

        // one-hot agreement: loss vanishes in the clamp limit
        let mut g = Graph::new();
        let yh = g.constant(Tensor::from_slice(&[3], &[1.0, 0.0, 0.0]).unwrap());
        let y = Tensor::from_slice(&[3], &[1.0, 0.0, 0.0]).unwrap();
        let l = mlc_loss(&mut g, yh, &y).unwrap();
        assert!(g.value(l).item() < 1e-5);

        // shape mismatch and non-binary targets rejected
        let mut g = Graph::new();
        let yh = g.constant(Tensor::from_slice(&[2], &[0.5, 0.5]).unwrap());
        assert!(mlc_loss(&mut g, yh, &Tensor::from_slice(&[3], &[1.0, 0.0, 0.0]).unwrap()).is_err());
        assert!(mlc_loss(&mut g, yh, &Tensor::from_slice(&[2], &[0.5, 0.0]).unwrap()).is_err());
    }

    #[test]
    fn mlc_loss_grad_check() {
        let mut rng = Rng::seeded(31);
        for _ in 0..20 {
            let k = 2 + rng.below(4);
            let y_data: Vec<f64> = (0..k).map(|_| if rng.next_f64() < 0.5 { 1.0 } else { 0.0 }).collect();
            let y = Tensor::new(vec![k], y_data).unwrap();
            let x = Tensor::new(vec![k], (0..k).map(|_| rng.range_f64(-1.0, 1.0)).collect()).unwrap();
            let y2 = y.clone();
            let err = crate::graph::grad_check(
                move |g, id| {
                    let p = g.sigmoid(id);
                    mlc_loss(g, p, &y2)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "mlc grad err {err}");
        }
    }

    #[test]
    fn split_assignment_rules() {
        assert_eq!(assign_class(&[0.9, 0.1, 0.1]), 0);
        assert_eq!(assign_class(&[0.5, 0.5, 0.1]), 0, "tie goes to the lowest index");
        assert_eq!(assign_class(&[0.1, 0.5, 0.9]), 2);
        let scores = vec![vec![0.1, 0.2, 0.9]; 100];
        let split = TargetSplit::from_scores(scores, 3);
        assert_eq!(split.counts, vec![0, 0, 100]);
        assert_eq!(split.total, 100);
    }

    /// Adversarial loss at D ≡ 0.5 (zero image through zero-bias model).
    #[test]
    fn adv_loss_worked_example_and_weight_semantics() {
        let model = DetectionModel::new(ModelConfig::default(), 1);
        let zero = Tensor::zeros(vec![3, 64, 64]);
        let build = |weights: Option<Vec<f64>>| -> f64 {
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g, &|_| true);
            let xs = g.constant(stack_images(&[&zero]).unwrap());
            let xt = g.constant(stack_images(&[&zero]).unwrap());
            let ts = model.forward(&mut g, &bound, xs).unwrap();
            let tt = model.forward(&mut g, &bound, xt).unwrap();
            let ds = image_discriminator(&mut g, &bound, ts.g2, Some(1.0)).unwrap();
            let dt = image_discriminator(&mut g, &bound, tt.g2, Some(1.0)).unwrap();
            let l = dcbr_adv_loss(&mut g, ds, dt, weights.as_deref()).unwrap();
            g.value(l).item()
        };
        let base = build(None);
        assert!((base - 2.0 * std::f64::consts::LN_2).abs() < 1e-12, "D≡0.5 loss {base}");
        assert!((base - 1.386294).abs() < 1e-6);

        // weights all 1: bit-equal to the unweighted loss
        assert_eq!(build(Some(vec![1.0])).to_bits(), base.to_bits());

        // weights all 0: only the source term remains (= ln 2 here)
        let src_only = build(Some(vec![0.0]));
        assert!((src_only - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn adv_loss_rejects_empty_and_mismatched() {
        let mut g = Graph::new();
        let ds = g.constant(Tensor::full(vec![2, 1], 0.5));
        let dt = g.constant(Tensor::full(vec![2, 1], 0.5));
        assert!(dcbr_adv_loss(&mut g, ds, dt, Some(&[1.0])).is_err());
    }

    /// Gradient reversal flips the feature gradient sign exactly.
    #[test]
    fn grl_flips_feature_gradient() {
        let model = DetectionModel::new(ModelConfig::default(), 2);
        let mut rng = Rng::seeded(8);
        let feat = Tensor::new(vec![2, 64, 8, 8], (0..2 * 64 * 64).map(|_| rng.range_f64(-1.0, 1.0)).collect()).unwrap();
        let grad_with = |beta: Option<f64>| -> Vec<f64> {
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g, &|_| true);
            let f = g.param(feat.clone());
            let d = image_discriminator(&mut g, &bound, f, beta).unwrap();
            let l = dcbr_adv_loss(&mut g, d, d, None).unwrap();
            g.backward(l).unwrap();
            g.grad(f).unwrap().to_vec()
        };
        let plain = grad_with(None);
        let reversed = grad_with(Some(1.0));
        assert_eq!(plain.len(), reversed.len());
        for (a, b) in plain.iter().zip(&reversed) {
            assert_eq!(a.to_bits(), (-b).to_bits(), "gradient not an exact negation");
        }
    }

    #[test]
    fn adv_loss_grad_check() {
        let mut rng = Rng::seeded(77);
        for _ in 0..10 {
            let feats = Tensor::new(vec![4, 2], (0..8).map(|_| rng.range_f64(-1.0, 1.0)).collect()).unwrap();
            let w = vec![rng.range_f64(1.0, 2.5), rng.range_f64(1.0, 2.5)];
            let err = crate::graph::grad_check(
                move |g, id| {
                    // rows 0-1 source, rows 2-3 target; a tiny fixed "discriminator"
                    let wt = g.constant(Tensor::from_slice(&[2, 1], &[0.7, -0.4]).unwrap());
                    let logits = g.matmul(id, wt)?;
                    let d = g.sigmoid(logits);
                    let ds = g.slice(d, 0, 0, 2)?;
                    let dt = g.slice(d, 0, 2, 2)?;
                    dcbr_adv_loss(g, ds, dt, Some(&w))
                },
                &feats,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "adv grad err {err}");
        }
    }

    #[test]
    fn refresh_split_runs_and_counts() {
        let model = DetectionModel::new(ModelConfig::default(), 4);
        let spec = crate::data::SceneSpec::target(4);
        let images: Vec<Tensor> = (0..10)
            .map(|i| crate::data::generate_scene(&spec, i).unwrap().0)
            .collect();
        let split = refresh_target_split(&model, &images).unwrap();
        assert_eq!(split.total, 10);
        assert_eq!(split.assigned.len(), 10);
        assert_eq!(split.counts.iter().sum::<usize>(), 10);
        assert_eq!(split.scores.len(), 10);
        // deterministic
        let split2 = refresh_target_split(&model, &images).unwrap();
        assert_eq!(split.assigned, split2.assigned);
        assert_eq!(split.scores, split2.scores);
    }
}
