//! Objective terms for joint translation + segmentation training.
//!
//! Everything here is a pure graph construction: dice segmentation losses,
//! the minimax adversarial pair, the L1 reconstruction family over the
//! translation network (self, content, style, cross-cycle), the end-to-end
//! synthetic-segmentation term, and the weighted total with its bookkeeping
//! report. Expectations are batch means and L1 norms are per-element means,
//! so the default weights behave the same at any grid size. Source-side and
//! target-side terms come from one direction-parameterized implementation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{Binding, ParamStore};
use crate::phantom::Domain;
use crate::segmentation::{AdapterDomain, SegNet};
use crate::tensor::{Scalar, Tensor};
use crate::translation::TranslationNet;

/// Additive guard in the dice denominator; keeps empty-mask batches finite.
pub const DICE_SMOOTH: f64 = 1e-7;

/// Term weights of the composite objective. All must be finite and ≥ 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_gan: f64,
    pub lambda_x: f64,
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub lambda_cyc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_gan: 1.0,
            lambda_x: 10.0,
            lambda_c: 1.0,
            lambda_s: 1.0,
            lambda_cyc: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_gan", self.lambda_gan),
            ("lambda_x", self.lambda_x),
            ("lambda_c", self.lambda_c),
            ("lambda_s", self.lambda_s),
            ("lambda_cyc", self.lambda_cyc),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid_config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// How the dice double sum treats the batch axis. `BatchGlobal` pools every
/// voxel of the batch into one quotient (the literal reading of the
/// objective); `PerImage` averages one quotient per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiceMode {
    BatchGlobal,
    PerImage,
}

impl Default for DiceMode {
    fn default() -> Self {
        DiceMode::BatchGlobal
    }
}

/// Soft dice loss in `[-1, 0]`: `-2·Σpt / (Σp² + Σt² + ε)`.
pub fn dice_loss<T: Scalar + std::ops::AddAssign>(
    g: &mut Graph<T>,
    pred: NodeId,
    target: &Tensor<T>,
) -> Result<NodeId> {
    dice_loss_mode(g, pred, target, DiceMode::BatchGlobal)
}

/// `dice_loss` with an explicit batch treatment.
pub fn dice_loss_mode<T: Scalar + std::ops::AddAssign>(
    g: &mut Graph<T>,
    pred: NodeId,
    target: &Tensor<T>,
    mode: DiceMode,
) -> Result<NodeId> {
    if g.value(pred).shape() != target.shape() {
        return Err(Error::invalid_argument(format!(
            "dice: prediction shape {:?} != target shape {:?}",
            g.value(pred).shape(),
            target.shape()
        )));
    }
    match mode {
        DiceMode::BatchGlobal => Ok(g.dice_loss(pred, target, DICE_SMOOTH)),
        DiceMode::PerImage => {
            let shape = target.shape().to_vec();
            if shape.len() != 4 {
                return Err(Error::invalid_argument(
                    "per-image dice requires a rank-4 batch",
                ));
            }
            let (b, per) = (shape[0], shape[1] * shape[2] * shape[3]);
            if b == 0 {
                return Err(Error::invalid_argument("per-image dice on empty batch"));
            }
            let sample_shape = [1, shape[1], shape[2], shape[3]];
            let mut terms = Vec::with_capacity(b);
            for i in 0..b {
                let p = g.slice_batch(pred, i, 1);
                let t = Tensor::from_vec(
                    &sample_shape,
                    target.data()[i * per..(i + 1) * per].to_vec(),
                );
                terms.push((g.dice_loss(p, &t, DICE_SMOOTH), 1.0 / b as f64));
            }
            Ok(g.weighted_sum(&terms))
        }
    }
}

/// Supervised segmentation objective: dice on the labeled real-target batch
/// (adapter domain 2) plus dice on the synthesized-target batch (adapter
/// domain 1). Either batch may be absent; both absent is an error.
pub fn seg_objective<T: Scalar + std::ops::AddAssign>(
    g: &mut Graph<T>,
    seg: &SegNet,
    store: &ParamStore,
    bind: &mut Binding,
    real: Option<(NodeId, &Tensor<T>)>,
    synth: Option<(NodeId, &Tensor<T>)>,
    mode: DiceMode,
) -> Result<NodeId> {
    if real.is_none() && synth.is_none() {
        return Err(Error::invalid_argument(
            "seg_objective: need at least one of the real or synthetic batches",
        ));
    }
    let mut terms = Vec::with_capacity(2);
    if let Some((x, y)) = real {
        let p = seg.segment_for(g, store, bind, x, AdapterDomain::Real)?;
        terms.push((dice_loss_mode(g, p, y, mode)?, 1.0));
    }
    if let Some((x, y)) = synth {
        let p = seg.segment_for(g, store, bind, x, AdapterDomain::Synth)?;
        terms.push((dice_loss_mode(g, p, y, mode)?, 1.0));
    }
    Ok(g.weighted_sum(&terms))
}

/// The adversarial value function `E[log D(real)] + E[log(1 − D(fake))]`,
/// with expectations taken over batch and score-map cells.
pub fn gan_value<T: Scalar + std::ops::AddAssign>(
    g: &mut Graph<T>,
    real_scores: NodeId,
    fake_scores: NodeId,
) -> NodeId {
    let r = g.mean_log(real_scores);
    let f = g.mean_log_one_minus(fake_scores);
    g.add(r, f)
}

/// Discriminator loss: the negated value function, so descending it makes
/// the discriminator ascend the minimax value.
pub fn gan_loss_discriminator<T: Scalar + std::ops::AddAssign>(
    g: &mut Graph<T>,
    real_scores: NodeId,
    fake_scores: NodeId,
) -> NodeId {
    let v = gan_value(g, real_scores, fake_scores);
    g.scale(v, -1.0)
}

/// Generator loss. The default minimizes `E[log(1 − D(fake))]` (the literal
/// minimax form); `non_saturating` switches to `−E[log D(fake)]`.
pub fn gan_loss_generator<T: Scalar + std::ops::AddAssign>(
    g: &mut Graph<T>,
    fake_scores: NodeId,
    non_saturating: bool,
) -> NodeId {
    if non_saturating {
        let l = g.mean_log(fake_scores);
        g.scale(l, -1.0)
    } else {
        g.mean_log_one_minus(fake_scores)
    }
}

/// Within-domain autoencoding: `‖G_d(E^c_d(x), E^s_d(x)) − x‖₁`.
pub fn self_recon_loss<T: Scalar + std::ops::AddAssign>(
    g: &mut Graph<T>,
    net: &TranslationNet,
    store: &ParamStore,
    bind: &mut Binding,
    x: NodeId,
    domain: Domain,
) -> Result<NodeId> {
    let c = net.encode_content(g, store, bind, x, domain)?;
    let s = net.encode_style(g, store, bind, x, domain)?;
    let xh = net.decode(g, store, bind, c, s, domain)?;
    Ok(g.l1_mean(xh, x))
}

/// Content round trip through a cross-domain translation:
/// `‖E^c_to(G_to(E^c_from(x), s)) − E^c_from(x)‖₁`.
pub fn content_recon_loss<T: Scalar + std::ops::AddAssign>(
    g: &mut Graph<T>,
    net: &TranslationNet,
    store: &ParamStore,
    bind: &mut Binding,
    x: NodeId,
    style: NodeId,
    from: Domain,
    to: Domain,
) -> Result<NodeId> {
    let c = net.encode_content(g, store, bind, x, from)?;
    let fake = net.decode(g, store, bind, c, style, to)?;
    let c2 = net.encode_content(g, store, bind, fake, to)?;
    Ok(g.l1_mean(c2, c))
}

/// Style round trip: `‖E^s_to(G_to(E^c_from(x), s)) − s‖₁` against the
/// sampled style the generator was driven with.
pub fn style_recon_loss<T: Scalar + std::ops::AddAssign>(
    g: &mut Graph<T>,
    net: &TranslationNet,
    store: &ParamStore,
    bind: &mut Binding,
    x: NodeId,
    style: NodeId,
    from: Domain,
    to: Domain,
) -> Result<NodeId> {
    let fake = net.translate(g, store, bind, x, from, to, style)?;
    let s2 = net.encode_style(g, store, bind, fake, to)?;
    Ok(g.l1_mean(s2, style))
}

/// Cross-cycle consistency: translate, re-encode content, decode back with
/// the image's own style code, and compare to the original:
/// `‖G_from(E^c_to(G_to(E^c_from(x), s)), E^s_from(x)) − x‖₁`.
pub fn cycle_loss<T: Scalar + std::ops::AddAssign>(
    g: &mut Graph<T>,
    net: &TranslationNet,
    store: &ParamStore,
    bind: &mut Binding,
    x: NodeId,
    style: NodeId,
    from: Domain,
    to: Domain,
) -> Result<NodeId> {
    let s_own = net.encode_style(g, store, bind, x, from)?;
    let fake = net.translate(g, store, bind, x, from, to, style)?;
    let c2 = net.encode_content(g, store, bind, fake, to)?;
    let back = net.decode(g, store, bind, c2, s_own, from)?;
    Ok(g.l1_mean(back, x))
}

/// Dice of the domain-1 segmenter on source images translated to the target
/// domain, against the source masks. With `end_to_end` the gradient reaches
/// the generator and content encoder as well as the segmenter; otherwise the
/// translation is detached (ablation/control).
pub fn seg_synth_loss<T: Scalar + std::ops::AddAssign>(
    g: &mut Graph<T>,
    net: &TranslationNet,
    seg: &SegNet,
    store: &ParamStore,
    bind: &mut Binding,
    x_src: NodeId,
    y_src: &Tensor<T>,
    style: NodeId,
    end_to_end: bool,
    mode: DiceMode,
) -> Result<NodeId> {
    let (b, _, _, _) = g.value(x_src).dims4();
    if b == 0 {
        return Err(Error::invalid_argument("seg_synth_loss: empty batch"));
    }
    let fake = net.translate(g, store, bind, x_src, Domain::Source, Domain::Target, style)?;
    let fake = if end_to_end { fake } else { g.detach(fake) };
    let p = seg.segment_for(g, store, bind, fake, AdapterDomain::Synth)?;
    dice_loss_mode(g, p, y_src, mode)
}

/// Graph handles for every term of the composite objective.
#[derive(Clone, Copy, Debug)]
pub struct TermNodes {
    pub gan_src: NodeId,
    pub gan_tgt: NodeId,
    pub recon_src: NodeId,
    pub recon_tgt: NodeId,
    pub content_src: NodeId,
    pub content_tgt: NodeId,
    pub style_src: NodeId,
    pub style_tgt: NodeId,
    pub cycle_src: NodeId,
    pub cycle_tgt: NodeId,
    pub seg_synth: NodeId,
}

/// Scalar values of every term, in the same order as [`TERM_NAMES`].
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub gan_src: f64,
    pub gan_tgt: f64,
    pub recon_src: f64,
    pub recon_tgt: f64,
    pub content_src: f64,
    pub content_tgt: f64,
    pub style_src: f64,
    pub style_tgt: f64,
    pub cycle_src: f64,
    pub cycle_tgt: f64,
    pub seg_synth: f64,
}

pub const TERM_NAMES: [&str; 11] = [
    "gan_src",
    "gan_tgt",
    "recon_src",
    "recon_tgt",
    "content_src",
    "content_tgt",
    "style_src",
    "style_tgt",
    "cycle_src",
    "cycle_tgt",
    "seg_synth",
];

impl LossTerms {
    pub fn as_array(&self) -> [f64; 11] {
        [
            self.gan_src,
            self.gan_tgt,
            self.recon_src,
            self.recon_tgt,
            self.content_src,
            self.content_tgt,
            self.style_src,
            self.style_tgt,
            self.cycle_src,
            self.cycle_tgt,
            self.seg_synth,
        ]
    }

    /// Read the current scalar values of the term nodes out of a graph.
    pub fn from_nodes<T: Scalar + std::ops::AddAssign>(g: &Graph<T>, n: &TermNodes) -> Self {
        LossTerms {
            gan_src: g.value(n.gan_src).item().to_f64(),
            gan_tgt: g.value(n.gan_tgt).item().to_f64(),
            recon_src: g.value(n.recon_src).item().to_f64(),
            recon_tgt: g.value(n.recon_tgt).item().to_f64(),
            content_src: g.value(n.content_src).item().to_f64(),
            content_tgt: g.value(n.content_tgt).item().to_f64(),
            style_src: g.value(n.style_src).item().to_f64(),
            style_tgt: g.value(n.style_tgt).item().to_f64(),
            cycle_src: g.value(n.cycle_src).item().to_f64(),
            cycle_tgt: g.value(n.cycle_tgt).item().to_f64(),
            seg_synth: g.value(n.seg_synth).item().to_f64(),
        }
    }
}

/// One logged row: every term plus the weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: LossTerms,
    pub total: f64,
}

impl LossReport {
    /// Header for the training CSV log.
    pub fn csv_header() -> String {
        format!("step,{},total,wall_secs", TERM_NAMES.join(","))
    }

    pub fn csv_row(&self, step: u64, wall_secs: f64) -> String {
        let terms: Vec<String> = self
            .terms
            .as_array()
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect();
        format!(
            "{step},{},{:.6},{wall_secs:.3}",
            terms.join(","),
            self.total
        )
    }
}

fn weight_pairs(w: &LossWeights, synth_weight: f64) -> [f64; 11] {
    [
        w.lambda_gan,
        w.lambda_gan,
        w.lambda_x,
        w.lambda_x,
        w.lambda_c,
        w.lambda_c,
        w.lambda_s,
        w.lambda_s,
        w.lambda_cyc,
        w.lambda_cyc,
        synth_weight,
    ]
}

/// The weighted total as a graph node (for the backward pass). The
/// discriminators are trained separately on [`gan_loss_discriminator`] —
/// only the generator-side adversarial terms belong in here.
pub fn total_node<T: Scalar + std::ops::AddAssign>(
    g: &mut Graph<T>,
    nodes: &TermNodes,
    weights: &LossWeights,
    synth_weight: f64,
) -> NodeId {
    let ids = [
        nodes.gan_src,
        nodes.gan_tgt,
        nodes.recon_src,
        nodes.recon_tgt,
        nodes.content_src,
        nodes.content_tgt,
        nodes.style_src,
        nodes.style_tgt,
        nodes.cycle_src,
        nodes.cycle_tgt,
        nodes.seg_synth,
    ];
    let ws = weight_pairs(weights, synth_weight);
    let terms: Vec<(NodeId, f64)> = ids.into_iter().zip(ws).collect();
    g.weighted_sum(&terms)
}

/// Bookkeeping form of [`total_node`]: validates weights, rejects any
/// non-finite term by name, and returns the report for logging.
pub fn total_objective(
    terms: &LossTerms,
    weights: &LossWeights,
    synth_weight: f64,
) -> Result<LossReport> {
    weights.validate()?;
    if !synth_weight.is_finite() || synth_weight < 0.0 {
        return Err(Error::invalid_config(format!(
            "synth_weight must be finite and >= 0, got {synth_weight}"
        )));
    }
    let values = terms.as_array();
    for (name, v) in TERM_NAMES.iter().zip(values.iter()) {
        if !v.is_finite() {
            return Err(Error::PoisonedLoss {
                term: (*name).to_string(),
                last_checkpoint: None,
            });
        }
    }
    let total: f64 = values
        .iter()
        .zip(weight_pairs(weights, synth_weight).iter())
        .map(|(v, w)| v * w)
        .sum();
    Ok(LossReport {
        terms: *terms,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{max_rel_err, numeric_grad};
    use crate::segmentation::SegConfig;
    use crate::translation::TranslationConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} !~ {b} (tol {tol})");
    }

    fn tiny_trans() -> TranslationConfig {
        TranslationConfig {
            source_channels: 3,
            target_channels: 5,
            content_channels: 8,
            style_dim: 2,
            disc_width: 4,
        }
    }

    fn tiny_seg() -> SegConfig {
        SegConfig {
            width: 4,
            kernel: 3,
            ..Default::default()
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::from_vec(shape, data)
    }

    fn rand_mask(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
            .collect();
        Tensor::from_vec(shape, data)
    }

    #[test]
    fn dice_matches_hand_arithmetic() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::from_vec(&[4], vec![1.0, 0.0, 1.0, 0.0]);
        let p = g.constant(t.clone());
        let perfect = dice_loss(&mut g, p, &t).unwrap();
        approx(g.value(perfect).item(), -1.0, 1e-6);

        let p = g.constant(Tensor::from_vec(&[4], vec![1.0, 1.0, 0.0, 0.0]));
        let t = Tensor::from_vec(&[4], vec![0.0, 0.0, 1.0, 1.0]);
        let disjoint = dice_loss(&mut g, p, &t).unwrap();
        assert_eq!(g.value(disjoint).item(), 0.0);

        let p = g.constant(Tensor::from_vec(&[2], vec![0.5, 0.5]));
        let t = Tensor::from_vec(&[2], vec![1.0, 0.0]);
        let half = dice_loss(&mut g, p, &t).unwrap();
        // -2·0.5 / (0.25 + 0.25 + 1)
        approx(g.value(half).item(), -2.0 / 3.0, 1e-6);

        let t3 = Tensor::from_vec(&[3], vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            dice_loss(&mut g, p, &t3).unwrap_err(),
            Error::InvalidArgument(_)
        ));
    }

    #[test]
    fn per_image_dice_differs_from_batch_global() {
        // sample 1 is a perfect match (dice -1), sample 2 is fully disjoint
        // (dice 0): per-image average is -1/2, batch-global pooling is -1/3.
        let pred = Tensor::from_vec(
            &[2, 1, 2, 2],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0],
        );
        let targ = Tensor::from_vec(
            &[2, 1, 2, 2],
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0],
        );
        let mut g = Graph::<f64>::new();
        let p = g.constant(pred);
        let per = dice_loss_mode(&mut g, p, &targ, DiceMode::PerImage).unwrap();
        let global = dice_loss_mode(&mut g, p, &targ, DiceMode::BatchGlobal).unwrap();
        approx(g.value(per).item(), -0.5, 1e-6);
        approx(g.value(global).item(), -1.0 / 3.0, 1e-6);

        // gradient of the per-image form agrees with finite differences
        let targ2 = targ.clone();
        let build = |g: &mut Graph<f64>, ids: &[NodeId]| {
            let p = g.sigmoid(ids[0]);
            dice_loss_mode(g, p, &targ2, DiceMode::PerImage).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let x = Tensor::from_vec(
            &[2, 1, 2, 2],
            (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
        );
        let mut g = Graph::<f64>::new();
        let xi = g.leaf(x.clone());
        let out = build(&mut g, &[xi]);
        let grads = g.backward(out);
        let analytic = grads.get(xi).unwrap();
        let numeric = numeric_grad(build, &[x], 0, 1e-3);
        assert!(max_rel_err(analytic, &numeric) < 1e-4);
    }

    #[test]
    fn gan_terms_match_hand_arithmetic() {
        let mut g = Graph::<f64>::new();
        let half = g.constant(Tensor::filled(&[2, 1, 4, 4], 0.5));
        let v = gan_value(&mut g, half, half);
        approx(g.value(v).item(), 2.0 * 0.5f64.ln(), 1e-9); // -1.3863
        let d = gan_loss_discriminator(&mut g, half, half);
        approx(g.value(d).item(), -2.0 * 0.5f64.ln(), 1e-9);
        let gen = gan_loss_generator(&mut g, half, false);
        approx(g.value(gen).item(), 0.5f64.ln(), 1e-9);
        let gen_ns = gan_loss_generator(&mut g, half, true);
        approx(g.value(gen_ns).item(), -(0.5f64.ln()), 1e-9);

        // D(real) = 0.75, D(fake) = 0.25 → log 0.75 + log 0.75
        let real = g.constant(Tensor::filled(&[1, 1, 2, 2], 0.75));
        let fake = g.constant(Tensor::filled(&[1, 1, 2, 2], 0.25));
        let v = gan_value(&mut g, real, fake);
        approx(g.value(v).item(), 2.0 * 0.75f64.ln(), 1e-9); // -0.5754

        // perfect discriminator at the clamp: value just below zero
        let real = g.constant(Tensor::filled(&[1, 1, 2, 2], 1.0 - 1e-7));
        let fake = g.constant(Tensor::filled(&[1, 1, 2, 2], 1e-7));
        let v = gan_value(&mut g, real, fake);
        let val = g.value(v).item();
        assert!(val < 0.0 && val > -1e-5, "{val}");
    }

    #[test]
    fn seg_objective_composes_dice_terms() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let seg = SegNet::new(&mut store, &mut rng, tiny_seg()).unwrap();
        let xr = rand_tensor(&mut rng, &[2, 5, 16, 16], -1.0, 1.0);
        let yr = rand_mask(&mut rng, &[2, 1, 16, 16]);
        let xs = rand_tensor(&mut rng, &[2, 5, 16, 16], -1.0, 1.0);
        let ys = rand_mask(&mut rng, &[2, 1, 16, 16]);

        let eval = |real: bool, synth: bool| -> f64 {
            let mut g = Graph::<f32>::new();
            let mut bind = Binding::new(&store);
            let xr = g.constant(xr.clone());
            let xs = g.constant(xs.clone());
            let node = seg_objective(
                &mut g,
                &seg,
                &store,
                &mut bind,
                real.then_some((xr, &yr)),
                synth.then_some((xs, &ys)),
                DiceMode::BatchGlobal,
            )
            .unwrap();
            g.value(node).item() as f64
        };
        let real_only = eval(true, false);
        let synth_only = eval(false, true);
        let both = eval(true, true);

        // each single-batch form equals plain dice on that batch
        let manual = |x: &Tensor<f32>, y: &Tensor<f32>, d: AdapterDomain| -> f64 {
            let mut g = Graph::<f32>::new();
            let mut bind = Binding::new(&store);
            let xi = g.constant(x.clone());
            let p = seg.segment_for(&mut g, &store, &mut bind, xi, d).unwrap();
            let l = dice_loss(&mut g, p, y).unwrap();
            g.value(l).item() as f64
        };
        approx(real_only, manual(&xr, &yr, AdapterDomain::Real), 1e-12);
        approx(synth_only, manual(&xs, &ys, AdapterDomain::Synth), 1e-12);
        approx(both, real_only + synth_only, 1e-9);

        let mut g = Graph::<f32>::new();
        let mut bind = Binding::new(&store);
        assert!(matches!(
            seg_objective(
                &mut g,
                &seg,
                &store,
                &mut bind,
                None,
                None,
                DiceMode::BatchGlobal
            )
            .unwrap_err(),
            Error::InvalidArgument(_)
        ));
    }

    #[test]
    fn reconstruction_family_matches_direct_arithmetic() {
        // constant-offset and fixed-point behavior of the L1 core
        let mut g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a_t = Tensor::from_vec(
            &[2, 3],
            (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
        );
        let b_t = a_t.map(|v| v + 0.5);
        let a = g.constant(a_t.clone());
        let b = g.constant(b_t);
        let same = g.l1_mean(a, a);
        assert_eq!(g.value(same).item(), 0.0);
        let off = g.l1_mean(b, a);
        approx(g.value(off).item(), 0.5, 1e-12);

        // full compositions, both directions, against externally recomputed
        // intermediates
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let net = TranslationNet::new(&mut store, &mut rng, tiny_trans()).unwrap();

        for (from, to, ch) in [
            (Domain::Source, Domain::Target, 3usize),
            (Domain::Target, Domain::Source, 5usize),
        ] {
            let x_t = rand_tensor(&mut rng, &[1, ch, 16, 16], -1.0, 1.0);
            let s_t = rand_tensor(&mut rng, &[1, 2], -1.0, 1.0);

            // intermediates recomputed in a separate graph
            let mut g = Graph::<f32>::new();
            let mut bind = Binding::new(&store);
            let x = g.constant(x_t.clone());
            let s = g.constant(s_t.clone());
            let c = net.encode_content(&mut g, &store, &mut bind, x, from).unwrap();
            let s_own = net.encode_style(&mut g, &store, &mut bind, x, from).unwrap();
            let x_self = net.decode(&mut g, &store, &mut bind, c, s_own, from).unwrap();
            let fake = net.decode(&mut g, &store, &mut bind, c, s, to).unwrap();
            let c2 = net.encode_content(&mut g, &store, &mut bind, fake, to).unwrap();
            let s2 = net.encode_style(&mut g, &store, &mut bind, fake, to).unwrap();
            let back = net.decode(&mut g, &store, &mut bind, c2, s_own, from).unwrap();
            let mad = |a: &Tensor<f32>, b: &Tensor<f32>| -> f64 {
                let s: f64 = a
                    .data()
                    .iter()
                    .zip(b.data().iter())
                    .map(|(&x, &y)| (x as f64 - y as f64).abs())
                    .sum();
                s / a.len() as f64
            };
            let want_self = mad(g.value(x_self), &x_t);
            let want_content = mad(g.value(c2), g.value(c));
            let want_style = mad(g.value(s2), &s_t);
            let want_cycle = mad(g.value(back), &x_t);

            let mut g = Graph::<f32>::new();
            let mut bind = Binding::new(&store);
            let x = g.constant(x_t.clone());
            let s = g.constant(s_t.clone());
            let l_self = self_recon_loss(&mut g, &net, &store, &mut bind, x, from).unwrap();
            let l_content =
                content_recon_loss(&mut g, &net, &store, &mut bind, x, s, from, to).unwrap();
            let l_style =
                style_recon_loss(&mut g, &net, &store, &mut bind, x, s, from, to).unwrap();
            let l_cycle = cycle_loss(&mut g, &net, &store, &mut bind, x, s, from, to).unwrap();

            approx(g.value(l_self).item() as f64, want_self, 1e-6);
            approx(g.value(l_content).item() as f64, want_content, 1e-6);
            approx(g.value(l_style).item() as f64, want_style, 1e-6);
            approx(g.value(l_cycle).item() as f64, want_cycle, 1e-6);
            for l in [l_self, l_content, l_style, l_cycle] {
                assert!(g.value(l).item() >= 0.0);
            }
        }
    }

    #[test]
    fn seg_synth_value_and_gradient_routing() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let net = TranslationNet::new(&mut store, &mut rng, tiny_trans()).unwrap();
        let seg = SegNet::new(&mut store, &mut rng, tiny_seg()).unwrap();
        let x_t = rand_tensor(&mut rng, &[1, 3, 16, 16], -1.0, 1.0);
        let y_t = rand_mask(&mut rng, &[1, 1, 16, 16]);
        let s_t = rand_tensor(&mut rng, &[1, 2], -1.0, 1.0);

        // value equals the externally composed translate→segment→dice chain
        let manual = {
            let mut g = Graph::<f32>::new();
            let mut bind = Binding::new(&store);
            let x = g.constant(x_t.clone());
            let s = g.constant(s_t.clone());
            let fake = net
                .translate(&mut g, &store, &mut bind, x, Domain::Source, Domain::Target, s)
                .unwrap();
            let p = seg
                .segment_for(&mut g, &store, &mut bind, fake, AdapterDomain::Synth)
                .unwrap();
            let l = dice_loss(&mut g, p, &y_t).unwrap();
            g.value(l).item()
        };

        let grads_with = |end_to_end: bool| {
            let mut g = Graph::<f32>::new();
            let mut bind = Binding::new(&store);
            let x = g.constant(x_t.clone());
            let s = g.constant(s_t.clone());
            let l = seg_synth_loss(
                &mut g,
                &net,
                &seg,
                &store,
                &mut bind,
                x,
                &y_t,
                s,
                end_to_end,
                DiceMode::BatchGlobal,
            )
            .unwrap();
            assert_eq!(g.value(l).item(), manual);
            let grads = g.backward(l);
            let mut trans = 0usize;
            let mut segc = 0usize;
            for (pid, node) in bind.bound() {
                if grads.get(node).is_some() {
                    let name = store.name(pid);
                    if name.starts_with("trans.") {
                        trans += 1;
                    } else if name.starts_with("seg.") {
                        segc += 1;
                    }
                }
            }
            (trans, segc)
        };
        let (trans_e2e, seg_e2e) = grads_with(true);
        assert!(trans_e2e > 0, "end-to-end must reach the translator");
        assert!(seg_e2e > 0);
        let (trans_det, seg_det) = grads_with(false);
        assert_eq!(trans_det, 0, "detached form must not reach the translator");
        assert!(seg_det > 0);

        // empty batch is rejected
        let mut g = Graph::<f32>::new();
        let mut bind = Binding::new(&store);
        let x = g.constant(Tensor::zeros(&[0, 3, 16, 16]));
        let s = g.constant(Tensor::zeros(&[0, 2]));
        let empty_y = Tensor::zeros(&[0, 1, 16, 16]);
        assert!(matches!(
            seg_synth_loss(
                &mut g,
                &net,
                &seg,
                &store,
                &mut bind,
                x,
                &empty_y,
                s,
                true,
                DiceMode::BatchGlobal
            )
            .unwrap_err(),
            Error::InvalidArgument(_)
        ));
    }

    #[test]
    fn seg_synth_gradient_matches_finite_differences() {
        // f64 end-to-end finite-difference check on a toy pipeline. The
        // perturbations live in the f32 parameter store, so the secant uses
        // the exactly-representable deltas actually applied.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let net = TranslationNet::new(&mut store, &mut rng, tiny_trans()).unwrap();
        let seg = SegNet::new(&mut store, &mut rng, tiny_seg()).unwrap();
        let x_t = rand_tensor(&mut rng, &[1, 3, 8, 8], -1.0, 1.0).cast::<f64>();
        let y_t = rand_mask(&mut rng, &[1, 1, 8, 8]).cast::<f64>();
        let s_t = rand_tensor(&mut rng, &[1, 2], -1.0, 1.0).cast::<f64>();

        let eval = |store: &ParamStore| -> f64 {
            let mut g = Graph::<f64>::new();
            let mut bind = Binding::new(store);
            let x = g.constant(x_t.clone());
            let s = g.constant(s_t.clone());
            let l = seg_synth_loss(
                &mut g,
                &net,
                &seg,
                &store,
                &mut bind,
                x,
                &y_t,
                s,
                true,
                DiceMode::BatchGlobal,
            )
            .unwrap();
            g.value(l).item()
        };

        // analytic gradients at the base point
        let mut g = Graph::<f64>::new();
        let mut bind = Binding::new(&store);
        let x = g.constant(x_t.clone());
        let s = g.constant(s_t.clone());
        let l = seg_synth_loss(
            &mut g,
            &net,
            &seg,
            &store,
            &mut bind,
            x,
            &y_t,
            s,
            true,
            DiceMode::BatchGlobal,
        )
        .unwrap();
        let grads = g.backward(l);
        let grad_of = |pid| {
            bind.bound()
                .find(|(id, _)| *id == pid)
                .and_then(|(_, n)| grads.get(n))
                .map(|t| t.data().to_vec())
                .unwrap()
        };

        // h small enough that the secant does not straddle a ReLU kink
        let h = 1e-4f32;
        for pname in [
            "trans.t.gen.mlp0.b",  // style MLP inside the generator
            "trans.s.cenc.stem.b", // content encoder
            "seg.backbone.head.b", // segmenter
        ] {
            let pid = store.id(pname).unwrap();
            let analytic = grad_of(pid);
            for idx in 0..analytic.len().min(3) {
                let v0 = store.get(pid).data()[idx];
                let (vp, vm) = (v0 + h, v0 - h);
                store.get_mut(pid).data_mut()[idx] = vp;
                let lp = eval(&store);
                store.get_mut(pid).data_mut()[idx] = vm;
                let lm = eval(&store);
                store.get_mut(pid).data_mut()[idx] = v0;
                let delta = vp as f64 - vm as f64;
                let fd = (lp - lm) / delta;
                let rel = (analytic[idx] - fd).abs() / fd.abs().max(1e-8);
                assert!(
                    rel < 1e-4,
                    "{pname}[{idx}]: analytic {} vs fd {fd} (rel {rel:.2e})",
                    analytic[idx]
                );
            }
        }
    }

    #[test]
    fn total_objective_arithmetic_and_poisoning() {
        let unit = LossTerms {
            gan_src: 1.0,
            gan_tgt: 1.0,
            recon_src: 1.0,
            recon_tgt: 1.0,
            content_src: 1.0,
            content_tgt: 1.0,
            style_src: 1.0,
            style_tgt: 1.0,
            cycle_src: 1.0,
            cycle_tgt: 1.0,
            seg_synth: 1.0,
        };
        let ones = LossWeights {
            lambda_gan: 1.0,
            lambda_x: 1.0,
            lambda_c: 1.0,
            lambda_s: 1.0,
            lambda_cyc: 1.0,
        };
        let r = total_objective(&unit, &ones, 1.0).unwrap();
        approx(r.total, 11.0, 1e-12);

        // zero weights leave only the synthetic segmentation term
        let zero = LossWeights {
            lambda_gan: 0.0,
            lambda_x: 0.0,
            lambda_c: 0.0,
            lambda_s: 0.0,
            lambda_cyc: 0.0,
        };
        let mut t = unit;
        t.seg_synth = -0.7;
        let r = total_objective(&t, &zero, 1.0).unwrap();
        approx(r.total, -0.7, 1e-12);

        // default weights on a synthetic spread of term values
        let spread = LossTerms {
            gan_src: 0.1,
            gan_tgt: 0.2,
            recon_src: 0.3,
            recon_tgt: 0.4,
            content_src: 0.5,
            content_tgt: 0.6,
            style_src: 0.7,
            style_tgt: 0.8,
            cycle_src: 0.9,
            cycle_tgt: 1.0,
            seg_synth: 1.1,
        };
        let r = total_objective(&spread, &LossWeights::default(), 1.0).unwrap();
        // 1·0.3 + 10·0.7 + 1·1.1 + 1·1.5 + 10·1.9 + 1.1
        approx(r.total, 30.0, 1e-9);

        // graph form reproduces the report total
        let mut g = Graph::<f64>::new();
        let vals = spread.as_array();
        let mk = |g: &mut Graph<f64>, i: usize| g.constant(Tensor::scalar(vals[i]));
        let nodes = TermNodes {
            gan_src: mk(&mut g, 0),
            gan_tgt: mk(&mut g, 1),
            recon_src: mk(&mut g, 2),
            recon_tgt: mk(&mut g, 3),
            content_src: mk(&mut g, 4),
            content_tgt: mk(&mut g, 5),
            style_src: mk(&mut g, 6),
            style_tgt: mk(&mut g, 7),
            cycle_src: mk(&mut g, 8),
            cycle_tgt: mk(&mut g, 9),
            seg_synth: mk(&mut g, 10),
        };
        let tn = total_node(&mut g, &nodes, &LossWeights::default(), 1.0);
        let rel = (g.value(tn).item() - r.total).abs() / r.total.abs();
        assert!(rel < 1e-6);
        assert_eq!(LossTerms::from_nodes(&g, &nodes), spread);

        // NaN poisoning names the offending term
        let mut bad = spread;
        bad.cycle_tgt = f64::NAN;
        match total_objective(&bad, &LossWeights::default(), 1.0).unwrap_err() {
            Error::PoisonedLoss { term, .. } => assert_eq!(term, "cycle_tgt"),
            other => panic!("expected poisoned loss, got {other}"),
        }

        // invalid weights are rejected up front
        let mut neg = ones;
        neg.lambda_cyc = -1.0;
        assert!(matches!(
            total_objective(&spread, &neg, 1.0).unwrap_err(),
            Error::InvalidConfig(_)
        ));
        assert_eq!(
            LossWeights::default(),
            LossWeights {
                lambda_gan: 1.0,
                lambda_x: 10.0,
                lambda_c: 1.0,
                lambda_s: 1.0,
                lambda_cyc: 10.0
            }
        );
    }

    #[test]
    fn csv_round_trip_layout() {
        let header = LossReport::csv_header();
        assert!(header.starts_with("step,gan_src,"));
        assert!(header.ends_with(",total,wall_secs"));
        let r = LossReport {
            terms: LossTerms::default(),
            total: 0.0,
        };
        let row = r.csv_row(7, 1.25);
        assert_eq!(row.split(',').count(), header.split(',').count());
        assert!(row.starts_with("7,"));
    }
}
