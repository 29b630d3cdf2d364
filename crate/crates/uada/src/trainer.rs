//! End-to-end optimization: the joint translation + segmentation objective
//! with alternating discriminator/generator updates, plus the baseline
//! training regimes the evaluation tables compare against.
//!
//! One iteration builds a single computation graph, runs two backward
//! passes from it — the discriminator loss on detached translations and the
//! composite objective — and applies the discriminator update followed by
//! the joint generator/encoder/segmenter update, both computed at the
//! iteration-start parameters. Everything is driven by one seeded RNG, so a
//! `(config, seed)` pair fully determines the produced checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::losses::{
    self, DiceMode, LossReport, LossTerms, LossWeights, TermNodes, TERM_NAMES,
};
use crate::nn::{
    apply_gradients, derive_seed, save_checkpoint, Adam, AdamConfig, Binding, Checkpoint,
    ParamStore,
};
use crate::phantom::{load_slices, DatasetManifest, Domain, PhantomSlice, SliceSelector};
use crate::segmentation::{AdapterDomain, SegConfig, SegNet};
use crate::tensor::Tensor;
use crate::translation::{sample_style, TranslationConfig, TranslationNet};

/// The training regimes compared in the evaluation (one per table row).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BaselineMode {
    /// Segmenter trained on labeled target slices only.
    TargetOnly,
    /// Segmenter pretrained on source, then all weights tuned on target.
    Finetune,
    /// Pretrained on source; only adapters and stems tuned on target.
    RaOnly,
    /// Joint training with deterministic translation (style fixed at zero,
    /// style losses off) — the one-to-one mapping baseline.
    DetTranslationSeg,
    /// Joint training with Gaussian style sampling, no adapters.
    StochTranslationSeg,
    /// Full method: stochastic translation plus residual adapters.
    StochTranslationSegRa,
}

impl BaselineMode {
    pub fn uses_translation(self) -> bool {
        matches!(
            self,
            BaselineMode::DetTranslationSeg
                | BaselineMode::StochTranslationSeg
                | BaselineMode::StochTranslationSegRa
        )
    }

    pub fn stochastic_style(self) -> bool {
        matches!(
            self,
            BaselineMode::StochTranslationSeg | BaselineMode::StochTranslationSegRa
        )
    }

    pub fn adapters_trainable(self) -> bool {
        matches!(self, BaselineMode::StochTranslationSegRa)
    }

    pub fn needs_pretrain(self) -> bool {
        matches!(self, BaselineMode::Finetune | BaselineMode::RaOnly)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    /// Fraction of each segmentation mini-batch drawn from synthesized
    /// (translated source) slices; the rest are labeled real-target slices.
    pub synth_to_real: f64,
    /// Fraction of source patients made available for training (data-budget
    /// sweeps); patients are chosen deterministically from the seed.
    pub source_fraction: f64,
    /// Fraction of labeled target patients made available for supervision.
    pub real_fraction: f64,
    pub seed: u64,
    pub baseline_mode: BaselineMode,
    /// Save a checkpoint every N iterations (0 = final checkpoint only).
    pub checkpoint_every: usize,
    /// Write a CSV log row every N iterations.
    pub log_every: usize,
    /// Source-only segmenter pretraining length for the regimes that use it.
    pub pretrain_iterations: usize,
    /// Iterations during which the synthetic segmentation term does not
    /// propagate into the translator (0 = end-to-end from the start).
    pub warmup_iterations: usize,
    /// Coefficient of the synthetic segmentation term in the total.
    pub synth_weight: f64,
    /// Use the non-saturating generator loss instead of the minimax form.
    pub non_saturating: bool,
    pub dice_mode: DiceMode,
    /// Hold out this fold of target patients from training (for
    /// cross-validation); also enables periodic validation logging.
    pub eval_fold: Option<usize>,
    pub translation: TranslationConfig,
    pub segmentation: SegConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            iterations: 10_000,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            synth_to_real: 0.5,
            source_fraction: 1.0,
            real_fraction: 1.0,
            seed: 0,
            baseline_mode: BaselineMode::StochTranslationSegRa,
            checkpoint_every: 1000,
            log_every: 1,
            pretrain_iterations: 500,
            warmup_iterations: 0,
            synth_weight: 1.0,
            non_saturating: false,
            dice_mode: DiceMode::BatchGlobal,
            eval_fold: None,
            translation: TranslationConfig::default(),
            segmentation: SegConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid_config(format!(
                "learning_rate must be non-negative and finite, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid_config(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.synth_to_real) {
            return Err(Error::invalid_config(format!(
                "synth_to_real must be in [0, 1], got {}",
                self.synth_to_real
            )));
        }
        for (name, f) in [
            ("source_fraction", self.source_fraction),
            ("real_fraction", self.real_fraction),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::invalid_config(format!(
                    "{name} must be in (0, 1], got {f}"
                )));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid_config(format!(
                    "{name} must be in [0, 1), got {b}"
                )));
            }
        }
        if !self.synth_weight.is_finite() || self.synth_weight < 0.0 {
            return Err(Error::invalid_config("synth_weight must be finite and >= 0"));
        }
        if let Some(f) = self.eval_fold {
            let n = DatasetManifest::N_FOLDS;
            if f >= n {
                return Err(Error::invalid_config(format!(
                    "eval_fold {f} out of range (folds: 0..{n})"
                )));
            }
        }
        self.weights.validate()?;
        self.translation.validate()?;
        self.segmentation.validate()
    }

    /// Effective loss weights for the active regime: deterministic
    /// translation turns the style losses off.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.baseline_mode.stochastic_style() {
            w.lambda_s = 0.0;
        }
        w
    }
}

/// One logged training iteration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: u64,
    pub report: LossReport,
    /// Supervised dice term on labeled real slices (0 when none were drawn).
    pub seg_sup: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValRow {
    pub step: u64,
    /// Mean batch-global dice loss over the held-out fold.
    pub dice_loss: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
    pub val: Vec<ValRow>,
}

pub fn history_csv_header() -> String {
    format!("step,{},total,seg_sup,wall_secs", TERM_NAMES.join(","))
}

pub fn history_csv_row(row: &HistoryRow) -> String {
    let terms: Vec<String> = row
        .report
        .terms
        .as_array()
        .iter()
        .map(|v| format!("{v:.6}"))
        .collect();
    format!(
        "{},{},{:.6},{:.6},{:.3}",
        row.step,
        terms.join(","),
        row.report.total,
        row.seg_sup,
        row.wall_secs
    )
}

/// In-memory training data, split by role.
pub struct SlicePools {
    pub src: Vec<PhantomSlice>,
    /// All target slices available for training (labeled or not).
    pub tgt_all: Vec<PhantomSlice>,
    /// Labeled target slices available for training.
    pub tgt_labeled: Vec<PhantomSlice>,
}

/// Load the training pools, holding out `eval_fold` of target patients.
pub fn load_pools(
    dir: &Path,
    manifest: &DatasetManifest,
    eval_fold: Option<usize>,
) -> Result<SlicePools> {
    load_pools_selective(dir, manifest, eval_fold, true)
}

/// Like [`load_pools`], but regimes that never touch source data can skip
/// reading (and verifying) the source slice files entirely.
pub fn load_pools_selective(
    dir: &Path,
    manifest: &DatasetManifest,
    eval_fold: Option<usize>,
    with_source: bool,
) -> Result<SlicePools> {
    let src = if with_source {
        load_slices(dir, manifest, &SliceSelector::domain(Domain::Source))?
    } else {
        Vec::new()
    };
    let tgt_all = load_slices(
        dir,
        manifest,
        &SliceSelector {
            domain: Some(Domain::Target),
            exclude_fold: eval_fold,
            ..Default::default()
        },
    )?;
    let tgt_labeled = load_slices(
        dir,
        manifest,
        &SliceSelector {
            domain: Some(Domain::Target),
            labeled: Some(true),
            exclude_fold: eval_fold,
            ..Default::default()
        },
    )?;
    Ok(SlicePools {
        src,
        tgt_all,
        tgt_labeled,
    })
}

/// Keep a deterministic, patient-level fraction of a slice pool (at least
/// one patient). Patients are shuffled by a seed-derived RNG and the first
/// `round(fraction · n)` kept; slice order within the pool is preserved.
pub fn subsample_by_patient(
    slices: Vec<PhantomSlice>,
    fraction: f64,
    seed: u64,
    stream: &str,
) -> Vec<PhantomSlice> {
    if fraction >= 1.0 || slices.is_empty() {
        return slices;
    }
    let mut patients: Vec<String> = Vec::new();
    for s in &slices {
        if !patients.contains(&s.patient_id) {
            patients.push(s.patient_id.clone());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream));
    // Fisher–Yates
    for i in (1..patients.len()).rev() {
        patients.swap(i, rng.gen_range(0..=i));
    }
    let keep = ((fraction * patients.len() as f64).round() as usize)
        .clamp(1, patients.len());
    patients.truncate(keep);
    slices
        .into_iter()
        .filter(|s| patients.contains(&s.patient_id))
        .collect()
}

/// Stack slice images into a `[B, C, H, W]` batch tensor.
pub fn stack_images(slices: &[&PhantomSlice]) -> Tensor<f32> {
    assert!(!slices.is_empty(), "stack_images: empty batch");
    let shape = slices[0].image.shape().to_vec();
    let mut data = Vec::with_capacity(slices.len() * slices[0].image.len());
    for s in slices {
        assert_eq!(s.image.shape(), &shape[..], "inconsistent slice shapes");
        data.extend_from_slice(s.image.data());
    }
    Tensor::from_vec(&[slices.len(), shape[0], shape[1], shape[2]], data)
}

/// Stack slice masks into a `[B, 1, H, W]` batch tensor.
pub fn stack_masks(slices: &[&PhantomSlice]) -> Tensor<f32> {
    assert!(!slices.is_empty(), "stack_masks: empty batch");
    let shape = slices[0].mask.shape().to_vec();
    let mut data = Vec::with_capacity(slices.len() * slices[0].mask.len());
    for s in slices {
        data.extend_from_slice(s.mask.data());
    }
    Tensor::from_vec(&[slices.len(), 1, shape[0], shape[1]], data)
}

/// Outcome of one optimization step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub report: LossReport,
    pub seg_sup: f64,
    pub discriminator_params_updated: usize,
    pub joint_params_updated: usize,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub trans: Option<TranslationNet>,
    pub seg: SegNet,
    pub adam: Adam,
    pub step: u64,
    pub last_checkpoint: Option<PathBuf>,
    rng: ChaCha8Rng,
}

/// Handles into one joint iteration graph.
struct JointGraph {
    g: Graph<f32>,
    bind: Binding,
    d_loss: NodeId,
    total: NodeId,
    terms: TermNodes,
    seg_sup: Option<NodeId>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init"));
        let trans = if cfg.baseline_mode.uses_translation() {
            Some(TranslationNet::new(
                &mut store,
                &mut init_rng,
                cfg.translation.clone(),
            )?)
        } else {
            None
        };
        let seg = SegNet::new(&mut store, &mut init_rng, cfg.segmentation.clone())?;
        if !cfg.baseline_mode.adapters_trainable() {
            // frozen at zero: both banks act as the identity correction
            store.set_trainable_prefix("seg.adapt", false);
        }
        let adam = Adam::new(AdamConfig {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
        });
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "train"));
        Ok(Trainer {
            cfg,
            store,
            trans,
            seg,
            adam,
            step: 0,
            last_checkpoint: None,
            rng,
        })
    }

    /// Rebuild a trainer for evaluation from a saved checkpoint: the config
    /// echo selects the architecture, then every stored tensor is loaded.
    /// The RNG restarts from the seed, so this is for inference/evaluation,
    /// not for resuming an interrupted run mid-stream.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::corrupt(format!("checkpoint config does not parse: {e}")))?;
        let mut t = Trainer::new(cfg)?;
        t.store.load_strict(ckpt)?;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let cfg_json = serde_json::to_value(&self.cfg)
            .map_err(|e| Error::invalid_config(format!("config not serializable: {e}")))?;
        save_checkpoint(&self.store, path, self.step, &cfg_json)?;
        self.last_checkpoint = Some(path.to_path_buf());
        Ok(())
    }

    fn poisoned(&self, term: &str) -> Error {
        Error::PoisonedLoss {
            term: term.to_string(),
            last_checkpoint: self.last_checkpoint.clone(),
        }
    }

    fn draw<'a>(&mut self, pool: &'a [PhantomSlice], n: usize) -> Vec<&'a PhantomSlice> {
        (0..n)
            .map(|_| &pool[self.rng.gen_range(0..pool.len())])
            .collect()
    }

    /// Number of synthesized slices in a segmentation batch of size `b`:
    /// floor(ratio·b) plus a Bernoulli on the fractional part, so the ratio
    /// holds exactly in expectation and within ±1 per batch.
    fn synth_count(&mut self, b: usize) -> usize {
        let exact = self.cfg.synth_to_real * b as f64;
        let floor = exact.floor();
        let frac = exact - floor;
        let mut n = floor as usize;
        if frac > 0.0 && self.rng.gen_bool(frac) {
            n += 1;
        }
        n.min(b)
    }

    /// Style codes for one translation direction: standard normal draws for
    /// the stochastic regimes, the zero vector for deterministic ones.
    fn styles(&mut self, b: usize) -> Tensor<f32> {
        let ds = self.cfg.translation.style_dim;
        if self.cfg.baseline_mode.stochastic_style() {
            sample_style(&mut self.rng, b, ds)
        } else {
            Tensor::zeros(&[b, ds])
        }
    }

    /// Supervised segmentation step on one labeled batch (used by the
    /// segmentation-only regimes and source pretraining).
    pub fn seg_step(
        &mut self,
        slices: &[&PhantomSlice],
        domain: AdapterDomain,
    ) -> Result<StepReport> {
        let images = stack_images(slices);
        let masks = stack_masks(slices);
        let mut g = Graph::<f32>::new();
        let mut bind = Binding::new(&self.store);
        let x = g.constant(images);
        let p = self.seg.segment_for(&mut g, &self.store, &mut bind, x, domain)?;
        let l = losses::dice_loss_mode(&mut g, p, &masks, self.cfg.dice_mode)?;
        let dice = g.value(l).item() as f64;
        if !dice.is_finite() {
            return Err(self.poisoned("seg_sup"));
        }
        let grads = g.backward(l);
        if !grads.all_finite() {
            return Err(self.poisoned("gradient"));
        }
        let updated = apply_gradients(&mut self.store, &bind, &grads, &mut self.adam, |n| {
            n.starts_with("seg.")
        });
        self.step += 1;
        Ok(StepReport {
            report: LossReport {
                terms: LossTerms::default(),
                total: 0.0,
            },
            seg_sup: dice,
            discriminator_params_updated: 0,
            joint_params_updated: updated,
        })
    }

    fn build_joint(
        &self,
        src: &[&PhantomSlice],
        tgt: &[&PhantomSlice],
        lab: &[&PhantomSlice],
        style_t: Tensor<f32>,
        style_s: Tensor<f32>,
        n_synth: usize,
        warmup: bool,
    ) -> Result<JointGraph> {
        let trans = self
            .trans
            .as_ref()
            .expect("build_joint requires a translation regime");
        let seg = &self.seg;
        let store = &self.store;
        let cfg = &self.cfg;
        let eff_w = cfg.effective_weights();

        let mut g = Graph::<f32>::new();
        let mut bind = Binding::new(store);
        let x_s = g.constant(stack_images(src));
        let x_t = g.constant(stack_images(tgt));
        let st = g.constant(style_t);
        let ss = g.constant(style_s);

        let c_s = trans.encode_content(&mut g, store, &mut bind, x_s, Domain::Source)?;
        let c_t = trans.encode_content(&mut g, store, &mut bind, x_t, Domain::Target)?;
        let s_s_own = trans.encode_style(&mut g, store, &mut bind, x_s, Domain::Source)?;
        let s_t_own = trans.encode_style(&mut g, store, &mut bind, x_t, Domain::Target)?;
        let fake_t = trans.decode(&mut g, store, &mut bind, c_s, st, Domain::Target)?;
        let fake_s = trans.decode(&mut g, store, &mut bind, c_t, ss, Domain::Source)?;

        // discriminators score real inputs against detached translations
        let fake_t_d = g.detach(fake_t);
        let fake_s_d = g.detach(fake_s);
        let dt_real = trans.discriminate(&mut g, store, &mut bind, x_t, Domain::Target)?;
        let dt_fake = trans.discriminate(&mut g, store, &mut bind, fake_t_d, Domain::Target)?;
        let ds_real = trans.discriminate(&mut g, store, &mut bind, x_s, Domain::Source)?;
        let ds_fake = trans.discriminate(&mut g, store, &mut bind, fake_s_d, Domain::Source)?;
        let d_t = losses::gan_loss_discriminator(&mut g, dt_real, dt_fake);
        let d_s = losses::gan_loss_discriminator(&mut g, ds_real, ds_fake);
        let d_loss = g.add(d_t, d_s);

        // generator-side adversarial terms on the attached translations
        let gt = trans.discriminate(&mut g, store, &mut bind, fake_t, Domain::Target)?;
        let gs = trans.discriminate(&mut g, store, &mut bind, fake_s, Domain::Source)?;
        let gan_tgt = losses::gan_loss_generator(&mut g, gt, cfg.non_saturating);
        let gan_src = losses::gan_loss_generator(&mut g, gs, cfg.non_saturating);

        // within-domain reconstruction
        let rec_s = trans.decode(&mut g, store, &mut bind, c_s, s_s_own, Domain::Source)?;
        let recon_src = g.l1_mean(rec_s, x_s);
        let rec_t = trans.decode(&mut g, store, &mut bind, c_t, s_t_own, Domain::Target)?;
        let recon_tgt = g.l1_mean(rec_t, x_t);

        // latent round trips; term names follow the recovered quantity's origin
        let c_t2 = trans.encode_content(&mut g, store, &mut bind, fake_t, Domain::Target)?;
        let content_src = g.l1_mean(c_t2, c_s);
        let c_s2 = trans.encode_content(&mut g, store, &mut bind, fake_s, Domain::Source)?;
        let content_tgt = g.l1_mean(c_s2, c_t);
        let (style_tgt, style_src) = if eff_w.lambda_s > 0.0 {
            let s_t2 = trans.encode_style(&mut g, store, &mut bind, fake_t, Domain::Target)?;
            let s_s2 = trans.encode_style(&mut g, store, &mut bind, fake_s, Domain::Source)?;
            (g.l1_mean(s_t2, st), g.l1_mean(s_s2, ss))
        } else {
            let zt = g.constant(Tensor::scalar(0.0f32));
            let zs = g.constant(Tensor::scalar(0.0f32));
            (zt, zs)
        };

        // cross-cycle back to each original with its own style code
        let back_s = trans.decode(&mut g, store, &mut bind, c_t2, s_s_own, Domain::Source)?;
        let cycle_src = g.l1_mean(back_s, x_s);
        let back_t = trans.decode(&mut g, store, &mut bind, c_s2, s_t_own, Domain::Target)?;
        let cycle_tgt = g.l1_mean(back_t, x_t);

        // synthetic segmentation supervision (end-to-end unless warming up)
        let seg_synth = if n_synth > 0 {
            let synth_in = if n_synth == src.len() {
                fake_t
            } else {
                g.slice_batch(fake_t, 0, n_synth)
            };
            let synth_in = if warmup { g.detach(synth_in) } else { synth_in };
            let p = seg.segment_for(&mut g, store, &mut bind, synth_in, AdapterDomain::Synth)?;
            let masks = stack_masks(&src[..n_synth]);
            losses::dice_loss_mode(&mut g, p, &masks, cfg.dice_mode)?
        } else {
            g.constant(Tensor::scalar(0.0f32))
        };

        // supervised dice on labeled real-target slices
        let seg_sup = if lab.is_empty() {
            None
        } else {
            let xl = g.constant(stack_images(lab));
            let yl = stack_masks(lab);
            let p = seg.segment_for(&mut g, store, &mut bind, xl, AdapterDomain::Real)?;
            Some(losses::dice_loss_mode(&mut g, p, &yl, cfg.dice_mode)?)
        };

        let terms = TermNodes {
            gan_src,
            gan_tgt,
            recon_src,
            recon_tgt,
            content_src,
            content_tgt,
            style_src,
            style_tgt,
            cycle_src,
            cycle_tgt,
            seg_synth,
        };
        let mut total = losses::total_node(&mut g, &terms, &eff_w, cfg.synth_weight);
        if let Some(sup) = seg_sup {
            total = g.add(total, sup);
        }
        Ok(JointGraph {
            g,
            bind,
            d_loss,
            total,
            terms,
            seg_sup,
        })
    }

    /// One optimization step. Translation regimes: draw source, target, and
    /// labeled-target batches, sample fresh style codes, update the
    /// discriminators and then the generators/encoders/segmenter.
    /// Segmentation-only regimes: one supervised step on labeled target.
    pub fn train_step(&mut self, pools: &SlicePools) -> Result<StepReport> {
        if !self.cfg.baseline_mode.uses_translation() {
            let batch = self.draw(&pools.tgt_labeled, self.cfg.batch_size);
            return self.seg_step(&batch, AdapterDomain::Real);
        }
        let b = self.cfg.batch_size;
        let n_synth = self.synth_count(b);
        let n_real = b - n_synth;
        let src = self.draw(&pools.src, b);
        let tgt = self.draw(&pools.tgt_all, b);
        let lab = self.draw(&pools.tgt_labeled, n_real);
        let style_t = self.styles(b);
        let style_s = self.styles(b);
        let warmup = self.step < self.cfg.warmup_iterations as u64;

        let jg = self.build_joint(&src, &tgt, &lab, style_t, style_s, n_synth, warmup)?;

        let term_values = LossTerms::from_nodes(&jg.g, &jg.terms);
        let report = losses::total_objective(
            &term_values,
            &self.cfg.effective_weights(),
            self.cfg.synth_weight,
        )
        .map_err(|e| match e {
            Error::PoisonedLoss { term, .. } => self.poisoned(&term),
            other => other,
        })?;
        let seg_sup = jg
            .seg_sup
            .map(|n| jg.g.value(n).item() as f64)
            .unwrap_or(0.0);
        if !seg_sup.is_finite() {
            return Err(self.poisoned("seg_sup"));
        }
        let d_val = jg.g.value(jg.d_loss).item() as f64;
        if !d_val.is_finite() {
            return Err(self.poisoned("discriminator"));
        }

        // both gradients are taken at the iteration-start parameters
        let d_grads = jg.g.backward(jg.d_loss);
        let g_grads = jg.g.backward(jg.total);
        if !d_grads.all_finite() || !g_grads.all_finite() {
            return Err(self.poisoned("gradient"));
        }
        let d_up = apply_gradients(&mut self.store, &jg.bind, &d_grads, &mut self.adam, |n| {
            n.starts_with("disc.")
        });
        let g_up = apply_gradients(&mut self.store, &jg.bind, &g_grads, &mut self.adam, |n| {
            !n.starts_with("disc.")
        });
        self.step += 1;
        Ok(StepReport {
            report,
            seg_sup,
            discriminator_params_updated: d_up,
            joint_params_updated: g_up,
        })
    }

    /// Mean dice loss of the domain-2 segmenter over held-out slices
    /// (forward only).
    pub fn validate_dice(&self, slices: &[PhantomSlice]) -> Result<f64> {
        if slices.is_empty() {
            return Err(Error::invalid_argument("validate_dice: no slices"));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in slices.chunks(self.cfg.batch_size.max(1)) {
            let refs: Vec<&PhantomSlice> = chunk.iter().collect();
            let mut g = Graph::<f32>::new();
            let mut bind = Binding::new(&self.store);
            let x = g.constant(stack_images(&refs));
            let masks = stack_masks(&refs);
            let p = self
                .seg
                .segment_for(&mut g, &self.store, &mut bind, x, AdapterDomain::Real)?;
            let l = losses::dice_loss_mode(&mut g, p, &masks, DiceMode::BatchGlobal)?;
            total += jg_item(&g, l) * refs.len() as f64;
            count += refs.len();
        }
        Ok(total / count as f64)
    }
}

fn jg_item(g: &Graph<f32>, n: NodeId) -> f64 {
    g.value(n).item() as f64
}

/// Training products: the final checkpoint and the in-memory history (both
/// are also written under the run directory).
#[derive(Debug)]
pub struct TrainOutcome {
    pub last_checkpoint: PathBuf,
    pub history: TrainHistory,
}

fn write_config_echo(cfg: &TrainConfig, dir: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::invalid_config(format!("config not serializable: {e}")))?;
    let path = dir.join("config.json");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

struct CsvLog {
    file: fs::File,
    path: PathBuf,
}

impl CsvLog {
    fn create(path: PathBuf, header: &str) -> Result<Self> {
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(file, "{header}").map_err(|e| Error::io(&path, e))?;
        Ok(CsvLog { file, path })
    }

    fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

/// Source-only segmenter pretraining: dice on source slices, adapters left
/// frozen at zero. Writes `pretrain.ckpt` in `out_dir` and returns its path.
/// The produced checkpoint is namespace-compatible with every regime.
pub fn pretrain_source(cfg: &TrainConfig, data_dir: &Path, out_dir: &Path) -> Result<PathBuf> {
    let manifest = DatasetManifest::read(data_dir)?;
    check_manifest(cfg, &manifest, false)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let src = load_slices(data_dir, &manifest, &SliceSelector::domain(Domain::Source))?;
    if src.is_empty() {
        return Err(Error::invalid_config("pretrain: no source slices"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "pretrain"));
    // adapters stay zero during pretraining regardless of regime
    let re_enable = trainer.cfg.baseline_mode.adapters_trainable();
    trainer.store.set_trainable_prefix("seg.adapt", false);
    for _ in 0..cfg.pretrain_iterations {
        let batch: Vec<&PhantomSlice> = (0..cfg.batch_size)
            .map(|_| &src[rng.gen_range(0..src.len())])
            .collect();
        trainer.seg_step(&batch, AdapterDomain::Synth)?;
    }
    if re_enable {
        trainer.store.set_trainable_prefix("seg.adapt", true);
    }
    let path = out_dir.join("pretrain.ckpt");
    trainer.save(&path)?;
    Ok(path)
}

fn check_manifest(cfg: &TrainConfig, manifest: &DatasetManifest, joint: bool) -> Result<()> {
    if manifest.source_channels != cfg.segmentation.source_channels
        || manifest.target_channels != cfg.segmentation.target_channels
    {
        return Err(Error::invalid_config(format!(
            "dataset channels ({}, {}) do not match segmentation config ({}, {})",
            manifest.source_channels,
            manifest.target_channels,
            cfg.segmentation.source_channels,
            cfg.segmentation.target_channels
        )));
    }
    if manifest.grid_size % 4 != 0 {
        return Err(Error::invalid_config("grid size must be divisible by 4"));
    }
    if joint {
        if manifest.source_channels != cfg.translation.source_channels
            || manifest.target_channels != cfg.translation.target_channels
        {
            return Err(Error::invalid_config(
                "dataset channels do not match translation config",
            ));
        }
        if manifest.grid_size % 16 != 0 {
            return Err(Error::invalid_config(
                "joint training needs a grid divisible by 16 (discriminator downsampling)",
            ));
        }
    }
    Ok(())
}

/// Run the regime named by the config end to end: optional source
/// pretraining, the main loop with CSV logging and periodic checkpoints,
/// and a final checkpoint. Returns the final checkpoint path and history.
pub fn train(cfg: &TrainConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = DatasetManifest::read(data_dir)?;
    let joint = cfg.baseline_mode.uses_translation();
    check_manifest(cfg, &manifest, joint)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_config_echo(cfg, out_dir)?;

    let needs_source = joint || (cfg.baseline_mode.needs_pretrain() && cfg.pretrain_iterations > 0);
    let mut pools = load_pools_selective(data_dir, &manifest, cfg.eval_fold, needs_source)?;
    pools.src = subsample_by_patient(pools.src, cfg.source_fraction, cfg.seed, "subset-src");
    pools.tgt_labeled =
        subsample_by_patient(pools.tgt_labeled, cfg.real_fraction, cfg.seed, "subset-real");
    if pools.tgt_labeled.is_empty() {
        return Err(Error::invalid_config(
            "no labeled target slices available for training",
        ));
    }
    if joint && pools.src.is_empty() {
        return Err(Error::invalid_config("no source slices available"));
    }

    let val_slices: Vec<PhantomSlice> = match cfg.eval_fold {
        Some(f) => load_slices(
            data_dir,
            &manifest,
            &SliceSelector {
                domain: Some(Domain::Target),
                labeled: Some(true),
                fold: Some(f),
                ..Default::default()
            },
        )?,
        None => Vec::new(),
    };

    let mut trainer = Trainer::new(cfg.clone())?;

    // source pretraining phase for the fine-tuning regimes
    if cfg.baseline_mode.needs_pretrain() && cfg.pretrain_iterations > 0 {
        if pools.src.is_empty() {
            return Err(Error::invalid_config("pretraining needs source slices"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "pretrain"));
        for _ in 0..cfg.pretrain_iterations {
            let batch: Vec<&PhantomSlice> = (0..cfg.batch_size)
                .map(|_| &pools.src[rng.gen_range(0..pools.src.len())])
                .collect();
            trainer.seg_step(&batch, AdapterDomain::Synth)?;
        }
        trainer.save(&out_dir.join("pretrain.ckpt"))?;
        // phase switch: what the fine-tuning stage may touch
        match cfg.baseline_mode {
            BaselineMode::Finetune => {
                trainer.store.set_trainable_prefix("seg.", true);
            }
            BaselineMode::RaOnly => {
                trainer.store.set_trainable_prefix("seg.", true);
                trainer.store.set_trainable_prefix("seg.backbone.", false);
            }
            _ => unreachable!(),
        }
    }

    let mut log = CsvLog::create(out_dir.join("train_log.csv"), &history_csv_header())?;
    let mut val_log = if val_slices.is_empty() {
        None
    } else {
        Some(CsvLog::create(
            out_dir.join("val_log.csv"),
            "step,dice_loss",
        )?)
    };

    let started = Instant::now();
    let mut history = TrainHistory::default();
    let log_every = cfg.log_every.max(1);
    for it in 0..cfg.iterations {
        let step = trainer.train_step(&pools)?;
        let row = HistoryRow {
            step: trainer.step,
            report: step.report,
            seg_sup: step.seg_sup,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        if it % log_every == 0 || it + 1 == cfg.iterations {
            log.row(&history_csv_row(&row))?;
        }
        history.rows.push(row);
        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
            let path = out_dir.join(format!("step_{:07}.ckpt", trainer.step));
            trainer.save(&path)?;
            if !val_slices.is_empty() {
                let dice = trainer.validate_dice(&val_slices)?;
                history.val.push(ValRow {
                    step: trainer.step,
                    dice_loss: dice,
                });
                if let Some(vl) = val_log.as_mut() {
                    vl.row(&format!("{},{dice:.6}", trainer.step))?;
                }
            }
        }
    }

    let last = out_dir.join("last.ckpt");
    trainer.save(&last)?;
    if !val_slices.is_empty() && cfg.iterations > 0 {
        let dice = trainer.validate_dice(&val_slices)?;
        history.val.push(ValRow {
            step: trainer.step,
            dice_loss: dice,
        });
        if let Some(vl) = val_log.as_mut() {
            vl.row(&format!("{},{dice:.6}", trainer.step))?;
        }
    }
    Ok(TrainOutcome {
        last_checkpoint: last,
        history,
    })
}
