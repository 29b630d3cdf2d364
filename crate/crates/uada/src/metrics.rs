//! Evaluation metrics (recall, precision, DSC, average precision), 5-fold
//! cross-validation with formatted summary tables, translation-diversity
//! diagnostics, and the data-budget sweep experiments.
//!
//! Conventions (all documented in the emitted table headers):
//! predictions binarize at threshold 0.5; average precision is computed at
//! the voxel level, pooled per patient and then averaged per fold;
//! aggregation across folds/seeds reports the sample (n−1) standard
//! deviation; patients whose ground-truth mask is empty are excluded from
//! average precision with a logged count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{derive_seed, load_checkpoint, Binding, Checkpoint};
use crate::phantom::{load_slices, DatasetManifest, Domain, PhantomSlice, SliceSelector};
use crate::plot::{write_line_chart, Series};
use crate::segmentation::AdapterDomain;
use crate::tensor::Tensor;
use crate::trainer::{self, stack_images, stack_masks, TrainConfig, Trainer};
use crate::translation::sample_style;

/// Voxel counts at a fixed binarization threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn voxels(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Count voxel agreement between a probability map and a binary mask.
/// Masks are positive where > 0.5; predictions where ≥ `threshold`.
pub fn confusion(pred: &Tensor<f32>, mask: &Tensor<f32>, threshold: f64) -> Result<ConfusionCounts> {
    if pred.shape() != mask.shape() {
        return Err(Error::invalid_argument(format!(
            "confusion: prediction shape {:?} != mask shape {:?}",
            pred.shape(),
            mask.shape()
        )));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid_argument(format!(
            "confusion: threshold must lie in (0, 1), got {threshold}"
        )));
    }
    Ok(confusion_flat(pred.data(), mask.data(), threshold))
}

fn confusion_flat(pred: &[f32], mask: &[f32], threshold: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&p, &m) in pred.iter().zip(mask) {
        let p = p as f64 >= threshold;
        let m = m > 0.5;
        match (p, m) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    c
}

/// tp/(tp+fn). If the mask is empty: 1 when the prediction is empty too,
/// else 0.
pub fn recall(c: &ConfusionCounts) -> f64 {
    if c.true_pos + c.false_neg == 0 {
        return if c.false_pos == 0 { 1.0 } else { 0.0 };
    }
    c.true_pos as f64 / (c.true_pos + c.false_neg) as f64
}

/// tp/(tp+fp). If the prediction is empty: 1 when the mask is empty too,
/// else 0.
pub fn precision(c: &ConfusionCounts) -> f64 {
    if c.true_pos + c.false_pos == 0 {
        return if c.false_neg == 0 { 1.0 } else { 0.0 };
    }
    c.true_pos as f64 / (c.true_pos + c.false_pos) as f64
}

/// 2tp/(2tp+fp+fn); 1 when both prediction and mask are empty.
pub fn dsc_metric(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.true_pos + c.false_pos + c.false_neg;
    if denom == 0 {
        return 1.0;
    }
    2.0 * c.true_pos as f64 / denom as f64
}

/// Step-wise average precision over `(score, is_positive)` pairs. Scores are
/// sorted descending; tied scores form one threshold group, so the result
/// matches an exhaustive sweep over all distinct thresholds. Returns NaN
/// when there are no positives (callers exclude and log such cases).
pub fn ap_pairs(scores: &[f64], positives: &[bool]) -> f64 {
    assert_eq!(scores.len(), positives.len());
    let n_pos = positives.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return f64::NAN;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_unstable_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut ap = 0.0;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let mut d_tp = 0u64;
        let mut d_fp = 0u64;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if positives[idx[j]] {
                d_tp += 1;
            } else {
                d_fp += 1;
            }
            j += 1;
        }
        tp += d_tp;
        fp += d_fp;
        ap += d_tp as f64 * (tp as f64 / (tp + fp) as f64);
        i = j;
    }
    ap / n_pos as f64
}

/// Voxel-level average precision of a probability map against a binary
/// mask. NaN when the mask has no positive voxels.
pub fn average_precision(pred: &Tensor<f32>, mask: &Tensor<f32>) -> Result<f64> {
    if pred.shape() != mask.shape() {
        return Err(Error::invalid_argument(format!(
            "average_precision: prediction shape {:?} != mask shape {:?}",
            pred.shape(),
            mask.shape()
        )));
    }
    let scores: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    let pos: Vec<bool> = mask.data().iter().map(|&v| v > 0.5).collect();
    Ok(ap_pairs(&scores, &pos))
}

/// Mean and sample (n−1) standard deviation; std is 0 for fewer than two
/// values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    assert!(!values.is_empty(), "mean_std: empty input");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Render a fraction pair as percentages: `0.699, 0.09` → `"69.9 (± 9.0)"`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{:.1} (± {:.1})", mean * 100.0, std * 100.0)
}

/// Per-patient metrics pooled over one evaluation set.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FoldEval {
    pub recall: f64,
    pub precision: f64,
    pub dsc: f64,
    /// NaN when every patient's mask was empty.
    pub ap: f64,
    pub n_patients: usize,
    /// Patients excluded from AP because their mask was empty.
    pub ap_excluded: usize,
}

/// Segment held-out slices with the domain-2 (real-data) path, pool voxels
/// per patient, compute each metric per patient, and average.
pub fn evaluate_slices(
    trainer: &Trainer,
    slices: &[PhantomSlice],
    threshold: f64,
) -> Result<FoldEval> {
    if slices.is_empty() {
        return Err(Error::invalid_argument("evaluate_slices: no slices"));
    }
    // deterministic patient order
    let mut by_patient: BTreeMap<&str, Vec<&PhantomSlice>> = BTreeMap::new();
    for s in slices {
        by_patient.entry(&s.patient_id).or_default().push(s);
    }
    let mut recalls = Vec::new();
    let mut precisions = Vec::new();
    let mut dscs = Vec::new();
    let mut aps = Vec::new();
    let mut ap_excluded = 0usize;
    for patient in by_patient.values() {
        let mut scores: Vec<f64> = Vec::new();
        let mut pos: Vec<bool> = Vec::new();
        let mut counts = ConfusionCounts::default();
        for chunk in patient.chunks(trainer.cfg.batch_size.max(1)) {
            let mut g = Graph::<f32>::new();
            let mut bind = Binding::new(&trainer.store);
            let x = g.constant(stack_images(chunk));
            let masks = stack_masks(chunk);
            let p = trainer
                .seg
                .segment_for(&mut g, &trainer.store, &mut bind, x, AdapterDomain::Real)?;
            let probs = g.value(p);
            let c = confusion(probs, &masks, threshold)?;
            counts.true_pos += c.true_pos;
            counts.false_pos += c.false_pos;
            counts.false_neg += c.false_neg;
            counts.true_neg += c.true_neg;
            scores.extend(probs.data().iter().map(|&v| v as f64));
            pos.extend(masks.data().iter().map(|&v| v > 0.5));
        }
        recalls.push(recall(&counts));
        precisions.push(precision(&counts));
        dscs.push(dsc_metric(&counts));
        let ap = ap_pairs(&scores, &pos);
        if ap.is_nan() {
            ap_excluded += 1;
        } else {
            aps.push(ap);
        }
    }
    if ap_excluded > 0 {
        eprintln!(
            "[uada] warning: {ap_excluded} patient(s) with empty masks excluded from AP"
        );
    }
    let ap = if aps.is_empty() {
        f64::NAN
    } else {
        mean_std(&aps).0
    };
    Ok(FoldEval {
        recall: mean_std(&recalls).0,
        precision: mean_std(&precisions).0,
        dsc: mean_std(&dscs).0,
        ap,
        n_patients: by_patient.len(),
        ap_excluded,
    })
}

/// One named training configuration to cross-validate.
#[derive(Clone, Debug)]
pub struct MethodSpec {
    pub name: String,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: usize,
    pub eval: FoldEval,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodRow {
    pub name: String,
    pub folds: Vec<FoldScore>,
}

pub const METRIC_NAMES: [&str; 4] = ["recall", "precision", "dsc", "ap"];

fn pick(eval: &FoldEval, metric: &str) -> f64 {
    match metric {
        "recall" => eval.recall,
        "precision" => eval.precision,
        "dsc" => eval.dsc,
        "ap" => eval.ap,
        other => panic!("unknown metric {other}"),
    }
}

impl MethodRow {
    /// Mean and sample std of one metric across folds (NaN folds skipped).
    pub fn mean_std_of(&self, metric: &str) -> (f64, f64) {
        let vals: Vec<f64> = self
            .folds
            .iter()
            .map(|f| pick(&f.eval, metric))
            .filter(|v| !v.is_nan())
            .collect();
        if vals.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        mean_std(&vals)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MethodRow>,
}

impl MetricTable {
    pub fn csv(&self) -> String {
        let mut s = String::from("method,fold,recall,precision,dsc,ap\n");
        for row in &self.rows {
            for f in &row.folds {
                let _ = writeln!(
                    s,
                    "{},{},{:.6},{:.6},{:.6},{:.6}",
                    row.name, f.fold, f.eval.recall, f.eval.precision, f.eval.dsc, f.eval.ap
                );
            }
            let stats: Vec<(f64, f64)> =
                METRIC_NAMES.iter().map(|m| row.mean_std_of(m)).collect();
            let _ = writeln!(
                s,
                "{},mean,{:.6},{:.6},{:.6},{:.6}",
                row.name, stats[0].0, stats[1].0, stats[2].0, stats[3].0
            );
            let _ = writeln!(
                s,
                "{},std,{:.6},{:.6},{:.6},{:.6}",
                row.name, stats[0].1, stats[1].1, stats[2].1, stats[3].1
            );
        }
        s
    }

    /// Aligned text table of `mean (± std)` percentages per method.
    pub fn text(&self) -> String {
        let headers = ["Method", "Recall", "Precision", "DSC", "AP"];
        let mut cells: Vec<Vec<String>> = vec![headers.iter().map(|h| h.to_string()).collect()];
        for row in &self.rows {
            let mut line = vec![row.name.clone()];
            for m in METRIC_NAMES {
                let (mean, std) = row.mean_std_of(m);
                line.push(if mean.is_nan() {
                    "n/a".to_string()
                } else {
                    format_mean_std(mean, std)
                });
            }
            cells.push(line);
        }
        let widths: Vec<usize> = (0..headers.len())
            .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap())
            .collect();
        let mut s = String::from(
            "# threshold 0.5; voxel AP pooled per patient; mean (± sample std) over folds, in %\n",
        );
        for (i, row) in cells.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            s.push_str(line.join("  ").trim_end());
            s.push('\n');
            if i == 0 {
                let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                s.push_str(&"-".repeat(total));
                s.push('\n');
            }
        }
        s
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect()
}

/// All five cross-validation folds, in order.
pub const ALL_FOLDS: [usize; 5] = [0, 1, 2, 3, 4];

/// Verify the requested folds exist and have labeled target slices to
/// evaluate on (cheap, from the manifest alone).
fn check_folds_evaluable(manifest: &DatasetManifest, folds: &[usize]) -> Result<()> {
    for &f in folds {
        if f >= DatasetManifest::N_FOLDS {
            return Err(Error::invalid_config(format!(
                "fold {f} out of range (folds: 0..{})",
                DatasetManifest::N_FOLDS
            )));
        }
        let n = manifest
            .records
            .iter()
            .filter(|r| {
                r.domain == Domain::Target
                    && r.labeled
                    && manifest.fold_of(&r.patient_id) == Some(f)
            })
            .count();
        if n == 0 {
            return Err(Error::invalid_config(format!(
                "fold {f} has no labeled evaluation slices"
            )));
        }
    }
    Ok(())
}

/// Train each method once per fold (holding that fold out) and evaluate on
/// the held-out labeled slices. Writes `metrics.csv` and `metrics.txt`
/// under `out_dir` and returns the aggregated table.
pub fn cross_validate(
    data_dir: &Path,
    out_dir: &Path,
    methods: &[MethodSpec],
    folds: &[usize],
) -> Result<MetricTable> {
    if methods.is_empty() {
        return Err(Error::invalid_argument("cross_validate: no methods"));
    }
    if folds.is_empty() {
        return Err(Error::invalid_argument("cross_validate: no folds"));
    }
    let manifest = DatasetManifest::read(data_dir)?;
    check_folds_evaluable(&manifest, folds)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::new();
    for method in methods {
        let mut scores = Vec::new();
        for &f in folds {
            let mut cfg = method.config.clone();
            cfg.eval_fold = Some(f);
            let run_dir = out_dir.join(sanitize(&method.name)).join(format!("fold{f}"));
            let outcome = trainer::train(&cfg, data_dir, &run_dir)?;
            let eval = evaluate_run(data_dir, &outcome.last_checkpoint, f)?;
            scores.push(FoldScore { fold: f, eval });
        }
        rows.push(MethodRow {
            name: method.name.clone(),
            folds: scores,
        });
    }
    let table = MetricTable { rows };
    fs::write(out_dir.join("metrics.csv"), table.csv())
        .map_err(|e| Error::io(out_dir.join("metrics.csv"), e))?;
    fs::write(out_dir.join("metrics.txt"), table.text())
        .map_err(|e| Error::io(out_dir.join("metrics.txt"), e))?;
    Ok(table)
}

/// Evaluate a finished run's checkpoint on one fold's labeled slices.
pub fn evaluate_run(data_dir: &Path, checkpoint: &Path, fold: usize) -> Result<FoldEval> {
    let manifest = DatasetManifest::read(data_dir)?;
    let slices = load_slices(
        data_dir,
        &manifest,
        &SliceSelector {
            domain: Some(Domain::Target),
            labeled: Some(true),
            fold: Some(fold),
            ..Default::default()
        },
    )?;
    if slices.is_empty() {
        return Err(Error::invalid_config(format!(
            "fold {fold} has no labeled evaluation slices"
        )));
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let trainer = Trainer::from_checkpoint(&ckpt)?;
    evaluate_slices(&trainer, &slices, DEFAULT_THRESHOLD)
}

/// Per-slice diversity diagnostics of a translation checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiversityRow {
    pub patient_id: String,
    /// Mean over pixels/channels of the per-pixel sample std across styles.
    pub pixel_std: f64,
    /// Mean DSC between the segmentations of the translations and the
    /// source ground-truth mask.
    pub dice_vs_mask: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiversityReport {
    pub n_styles: usize,
    pub rows: Vec<DiversityRow>,
    pub mean_pixel_std: f64,
    pub mean_dice: f64,
}

/// Translate each source slice with `n_styles` style draws (the zero style
/// for deterministic-regime checkpoints), then measure appearance spread
/// and structure preservation.
pub fn diversity_report(
    ckpt: &Checkpoint,
    slices: &[PhantomSlice],
    n_styles: usize,
    seed: u64,
) -> Result<DiversityReport> {
    if n_styles < 2 {
        return Err(Error::invalid_argument(format!(
            "diversity_report: n_styles must be >= 2, got {n_styles}"
        )));
    }
    if slices.is_empty() {
        return Err(Error::invalid_argument("diversity_report: no slices"));
    }
    let trainer = Trainer::from_checkpoint(ckpt)?;
    let trans = trainer.trans.as_ref().ok_or_else(|| {
        Error::invalid_argument("diversity_report: checkpoint has no translation networks")
    })?;
    let stochastic = trainer.cfg.baseline_mode.stochastic_style();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "diversity"));
    let mut rows = Vec::new();
    for slice in slices {
        if slice.domain != Domain::Source {
            return Err(Error::invalid_argument(
                "diversity_report: slices must come from the source domain",
            ));
        }
        let batch: Vec<&PhantomSlice> = std::iter::repeat(slice).take(n_styles).collect();
        let style = if stochastic {
            sample_style(&mut rng, n_styles, trainer.cfg.translation.style_dim)
        } else {
            Tensor::zeros(&[n_styles, trainer.cfg.translation.style_dim])
        };
        let mut g = Graph::<f32>::new();
        let mut bind = Binding::new(&trainer.store);
        let x = g.constant(stack_images(&batch));
        let st = g.constant(style);
        let fake = trans.translate(
            &mut g,
            &trainer.store,
            &mut bind,
            x,
            Domain::Source,
            Domain::Target,
            st,
        )?;
        let probs = trainer.seg.segment_for(
            &mut g,
            &trainer.store,
            &mut bind,
            fake,
            AdapterDomain::Synth,
        )?;

        // per-pixel sample std across the style axis
        let fk = g.value(fake);
        let dims = fk.shape();
        let per = dims[1] * dims[2] * dims[3];
        let data = fk.data();
        let mut std_sum = 0.0f64;
        for i in 0..per {
            let mut mean = 0.0f64;
            for s in 0..n_styles {
                mean += data[s * per + i] as f64;
            }
            mean /= n_styles as f64;
            let mut var = 0.0f64;
            for s in 0..n_styles {
                var += (data[s * per + i] as f64 - mean).powi(2);
            }
            var /= (n_styles - 1) as f64;
            std_sum += var.sqrt();
        }
        let pixel_std = std_sum / per as f64;

        // DSC of each translation's segmentation against the source mask
        let pr = g.value(probs);
        let hw = slice.mask.len();
        let mut dice_sum = 0.0f64;
        for s in 0..n_styles {
            let row = &pr.data()[s * hw..(s + 1) * hw];
            let c = confusion_flat(row, slice.mask.data(), DEFAULT_THRESHOLD);
            dice_sum += dsc_metric(&c);
        }
        rows.push(DiversityRow {
            patient_id: slice.patient_id.clone(),
            pixel_std,
            dice_vs_mask: dice_sum / n_styles as f64,
        });
    }
    let mean_pixel_std = mean_std(&rows.iter().map(|r| r.pixel_std).collect::<Vec<_>>()).0;
    let mean_dice = mean_std(&rows.iter().map(|r| r.dice_vs_mask).collect::<Vec<_>>()).0;
    Ok(DiversityReport {
        n_styles,
        rows,
        mean_pixel_std,
        mean_dice,
    })
}

/// Which data budget a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SweepAxis {
    /// Vary the labeled real-target budget; full synthesized budget.
    RealGivenSynth,
    /// Vary the source (synthesizable) budget; full real budget.
    SynthGivenReal,
    /// Vary the real budget and tie the mini-batch composition to it:
    /// with p% real data, batches are (1 − p/100) synthesized.
    RealWithBatchRatio,
}

impl SweepAxis {
    pub fn apply(self, cfg: &mut TrainConfig, percent: u32) {
        let f = percent as f64 / 100.0;
        match self {
            SweepAxis::RealGivenSynth => cfg.real_fraction = f,
            SweepAxis::SynthGivenReal => cfg.source_fraction = f,
            SweepAxis::RealWithBatchRatio => {
                cfg.real_fraction = f;
                cfg.synth_to_real = 1.0 - f;
            }
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SweepAxis::RealGivenSynth => "real_given_synth",
            SweepAxis::SynthGivenReal => "synth_given_real",
            SweepAxis::RealWithBatchRatio => "real_with_batch_ratio",
        }
    }
}

pub const DEFAULT_SWEEP_GRID: [u32; 5] = [10, 25, 50, 75, 100];

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub percent: u32,
    pub seed: u64,
    /// AP averaged over the evaluated folds.
    pub ap: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SweepSummary {
    pub percent: u32,
    pub mean_ap: f64,
    pub std_ap: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
    pub summary: Vec<SweepSummary>,
}

impl SweepTable {
    pub fn csv(&self) -> String {
        let mut s = String::from("axis,percent,seed,ap\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{},{:.6}", self.axis.label(), p.percent, p.seed, p.ap);
        }
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{},{},mean,{:.6}",
                self.axis.label(),
                r.percent,
                r.mean_ap
            );
            let _ = writeln!(s, "{},{},std,{:.6}", self.axis.label(), r.percent, r.std_ap);
        }
        s
    }
}

/// Map one `(grid point, seed)` task to its fold-averaged AP.
fn sweep_point(
    data_dir: &Path,
    out_dir: &Path,
    base: &TrainConfig,
    axis: SweepAxis,
    percent: u32,
    seed: u64,
    folds: &[usize],
) -> Result<SweepPoint> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    axis.apply(&mut cfg, percent);
    let mut fold_aps = Vec::new();
    for &f in folds {
        let mut cfg_f = cfg.clone();
        cfg_f.eval_fold = Some(f);
        let run_dir = out_dir
            .join(axis.label())
            .join(format!("p{percent:03}_s{seed}"))
            .join(format!("fold{f}"));
        let outcome = trainer::train(&cfg_f, data_dir, &run_dir)?;
        let eval = evaluate_run(data_dir, &outcome.last_checkpoint, f)?;
        if !eval.ap.is_nan() {
            fold_aps.push(eval.ap);
        }
    }
    let ap = if fold_aps.is_empty() {
        f64::NAN
    } else {
        mean_std(&fold_aps).0
    };
    Ok(SweepPoint { percent, seed, ap })
}

/// Train one model per `(grid point, seed)`, evaluate AP on the given
/// folds, and aggregate per grid point. Writes `sweep.csv` and `sweep.svg`
/// under `out_dir`. `jobs > 1` runs that many points concurrently; every
/// point trains with its own seed and run directory, so the results are
/// identical to a sequential sweep.
pub fn ratio_sweep(
    data_dir: &Path,
    out_dir: &Path,
    base: &TrainConfig,
    axis: SweepAxis,
    grid: &[u32],
    seeds: &[u64],
    folds: &[usize],
    jobs: usize,
) -> Result<SweepTable> {
    if grid.is_empty() {
        return Err(Error::invalid_argument("ratio_sweep: empty grid"));
    }
    if seeds.is_empty() || folds.is_empty() {
        return Err(Error::invalid_argument(
            "ratio_sweep: need at least one seed and one fold",
        ));
    }
    for &p in grid {
        if p == 0 || p > 100 {
            return Err(Error::invalid_argument(format!(
                "ratio_sweep: grid percentages must lie in 1..=100, got {p}"
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let tasks: Vec<(u32, u64)> = grid
        .iter()
        .flat_map(|&p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    let points: Vec<SweepPoint> = if jobs <= 1 {
        let mut out = Vec::new();
        for &(p, s) in &tasks {
            out.push(sweep_point(data_dir, out_dir, base, axis, p, s, folds)?);
        }
        out
    } else {
        use std::sync::Mutex;
        let queue = Mutex::new(tasks.clone().into_iter());
        let results: Mutex<Vec<Result<SweepPoint>>> = Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(tasks.len()) {
                scope.spawn(|| loop {
                    let next = queue.lock().unwrap().next();
                    let Some((p, s)) = next else { break };
                    let r = sweep_point(data_dir, out_dir, base, axis, p, s, folds);
                    results.lock().unwrap().push(r);
                });
            }
        });
        let collected = results.into_inner().unwrap();
        let mut ok = Vec::new();
        for r in collected {
            ok.push(r?);
        }
        // restore the deterministic grid × seed order
        let mut ordered = Vec::with_capacity(ok.len());
        for &(p, s) in &tasks {
            let i = ok
                .iter()
                .position(|pt| pt.percent == p && pt.seed == s)
                .expect("every task produces one point");
            ordered.push(ok.swap_remove(i));
        }
        ordered
    };
    let mut summary = Vec::new();
    for &percent in grid {
        let vals: Vec<f64> = points
            .iter()
            .filter(|p| p.percent == percent && !p.ap.is_nan())
            .map(|p| p.ap)
            .collect();
        let (mean_ap, std_ap) = if vals.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            mean_std(&vals)
        };
        summary.push(SweepSummary {
            percent,
            mean_ap,
            std_ap,
        });
    }
    let table = SweepTable {
        axis,
        points,
        summary,
    };
    fs::write(out_dir.join("sweep.csv"), table.csv())
        .map_err(|e| Error::io(out_dir.join("sweep.csv"), e))?;
    let mut series: Vec<Series> = seeds
        .iter()
        .map(|&seed| Series {
            label: format!("seed {seed}"),
            points: table
                .points
                .iter()
                .filter(|p| p.seed == seed)
                .map(|p| (p.percent as f64, p.ap * 100.0))
                .collect(),
        })
        .collect();
    series.push(Series {
        label: "mean".to_string(),
        points: table
            .summary
            .iter()
            .map(|r| (r.percent as f64, r.mean_ap * 100.0))
            .collect(),
    });
    write_line_chart(
        &out_dir.join("sweep.svg"),
        &format!("AP vs data budget ({})", axis.label()),
        "available data (%)",
        "AP (%)",
        &series,
    )?;
    Ok(table)
}

/// Save a sweep or diversity run directory listing for quick inspection.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::invalid_argument(format!("serialize: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn sweep_output_paths(out_dir: &Path) -> (PathBuf, PathBuf) {
    (out_dir.join("sweep.csv"), out_dir.join("sweep.svg"))
}
