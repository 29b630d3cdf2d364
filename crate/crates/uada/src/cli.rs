//! Command-line interface: a thin shell over the library. Every subcommand
//! reads JSON configs, calls the corresponding library function, and writes
//! results under a run directory. Exit codes: 0 success, 1 usage error,
//! 2 runtime error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::graph::Graph;
use crate::metrics::{
    self, cross_validate, diversity_report, ratio_sweep, MethodSpec, SweepAxis, ALL_FOLDS,
    DEFAULT_SWEEP_GRID,
};
use crate::nn::{derive_seed, load_checkpoint, Binding};
use crate::phantom::{
    build_dataset, load_slices, DatasetConfig, DatasetManifest, Domain, PhantomSlice,
    SliceSelector,
};
use crate::plot::{write_line_chart, Series};
use crate::tensor::Tensor;
use crate::trainer::{self, stack_images, TrainConfig, Trainer};
use crate::translation::sample_style;

/// Environment variable used as the default `--data` directory.
pub const DATA_DIR_ENV: &str = "UADA_DATA_DIR";

#[derive(Parser)]
#[command(
    name = "uada",
    version,
    about = "Uncertainty-aware domain adaptation on synthetic two-modality phantoms",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a phantom dataset and its manifest.
    GenData(GenDataArgs),
    /// Train one model under the configured regime.
    Train(TrainArgs),
    /// Emit style-varied translations of source slices as PNG files.
    Translate(TranslateArgs),
    /// Cross-validate the configuration of a finished run.
    Eval(EvalArgs),
    /// Train and evaluate across a data-budget grid.
    SweepRatio(SweepArgs),
    /// Render SVG curves from a run directory's CSV logs.
    Plot(PlotArgs),
    /// Print every built-in default as JSON.
    Config(ConfigArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Dataset config JSON (defaults used when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output dataset directory (default: $UADA_DATA_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON (defaults used when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (default: $UADA_DATA_DIR).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace an existing non-empty run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TranslateArgs {
    /// Checkpoint file, or a run directory containing last.ckpt.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory (default: $UADA_DATA_DIR).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for the image files.
    #[arg(long)]
    out: PathBuf,
    /// Number of style samples per slice.
    #[arg(long, short = 'n', default_value_t = 5)]
    n: usize,
    /// Comma-separated indices into the source slice pool (default: 0-3).
    #[arg(long)]
    slices: Option<String>,
    /// Override the checkpoint config's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory (uses its config.json) or checkpoint file (uses its
    /// embedded config echo).
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory (default: $UADA_DATA_DIR).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for metric tables.
    #[arg(long)]
    out: PathBuf,
    /// Fold count 1..=5 ("5" = all folds), or comma-separated fold indices.
    #[arg(long, default_value = "5")]
    folds: String,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Base training config JSON (defaults used when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (default: $UADA_DATA_DIR).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for runs, tables, and plots.
    #[arg(long)]
    out: PathBuf,
    /// REAL_GIVEN_SYNTH, SYNTH_GIVEN_REAL, or REAL_WITH_BATCH_RATIO.
    #[arg(long)]
    axis: String,
    /// Comma-separated grid percentages (default 10,25,50,75,100).
    #[arg(long)]
    grid: Option<String>,
    /// Number of training seeds, derived from --seed.
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// Fold count 1..=5 ("5" = all folds), or comma-separated fold indices.
    #[arg(long, default_value = "5")]
    folds: String,
    /// Concurrent sweep workers.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Base RNG seed (overrides the config's seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// Run directory containing train_log.csv (and optionally val_log.csv).
    #[arg(long)]
    run: PathBuf,
    /// Where to write the SVG files (default: the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Print all built-in defaults as a JSON document.
    #[arg(long, default_value_t = true)]
    dump_defaults: bool,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Parse `argv` and execute one subcommand; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            }
        }
    };
    let result = match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train(a),
        Cmd::Translate(a) => translate(a),
        Cmd::Eval(a) => eval(a),
        Cmd::SweepRatio(a) => sweep_ratio(a),
        Cmd::Plot(a) => plot(a),
        Cmd::Config(a) => config(a),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn data_dir(flag: &Option<PathBuf>) -> CliResult<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.clone());
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(CliError::Usage(format!(
            "no dataset directory: pass --data or set {DATA_DIR_ENV}"
        ))),
    }
}

/// Enforce the run-directory contract: never write into an existing
/// non-empty directory unless forced (then it is replaced wholesale).
fn prepare_out(path: &Path, force: bool) -> CliResult {
    if path.exists() {
        let occupied = path
            .read_dir()
            .map(|mut d| d.next().is_some())
            .unwrap_or(true);
        if occupied {
            if !force {
                return Err(CliError::Runtime(format!(
                    "output directory {} already exists and is not empty (use --force to replace it)",
                    path.display()
                )));
            }
            fs::remove_dir_all(path)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        }
    }
    fs::create_dir_all(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn read_json_config<T: serde::de::DeserializeOwned + Default>(
    path: &Option<PathBuf>,
) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))
        }
    }
}

/// "N" (1..=5) selects the first N folds; "a,b,c" selects explicit indices.
fn parse_folds(spec: &str) -> CliResult<Vec<usize>> {
    let parse_one = |s: &str| -> CliResult<usize> {
        s.trim()
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("invalid fold value {s:?}")))
    };
    if spec.contains(',') {
        let folds: Vec<usize> = spec.split(',').map(parse_one).collect::<CliResult<_>>()?;
        for &f in &folds {
            if f >= ALL_FOLDS.len() {
                return Err(CliError::Usage(format!("fold index {f} out of range 0..5")));
            }
        }
        Ok(folds)
    } else {
        let n = parse_one(spec)?;
        if !(1..=ALL_FOLDS.len()).contains(&n) {
            return Err(CliError::Usage(format!(
                "fold count must lie in 1..=5, got {n}"
            )));
        }
        Ok(ALL_FOLDS[..n].to_vec())
    }
}

fn parse_list<T: std::str::FromStr>(spec: &str, what: &str) -> CliResult<Vec<T>> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| CliError::Usage(format!("invalid {what} value {s:?}")))
        })
        .collect()
}

fn gen_data(a: GenDataArgs) -> CliResult {
    let mut cfg: DatasetConfig = read_json_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let out = data_dir(&a.out)?;
    prepare_out(&out, a.force)?;
    let manifest = build_dataset(&cfg, &out)?;
    println!(
        "dataset: {} source + {} target patients ({} slices) at {}x{} -> {}",
        manifest.n_source,
        manifest.n_target,
        manifest.records.len(),
        manifest.grid_size,
        manifest.grid_size,
        out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let mut cfg: TrainConfig = read_json_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let data = data_dir(&a.data)?;
    prepare_out(&a.out, a.force)?;
    let outcome = trainer::train(&cfg, &data, &a.out)?;
    if let Some(last) = outcome.history.rows.last() {
        println!(
            "trained {} iterations; final total {:.4}, supervised dice {:.4}",
            outcome.history.rows.len(),
            last.report.total,
            last.seg_sup
        );
    }
    println!("checkpoint: {}", outcome.last_checkpoint.display());
    Ok(())
}

/// Normalize one channel to 0..=255 gray.
fn to_gray(data: &[f32]) -> Vec<u8> {
    let lo = data.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    data.iter()
        .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Tile `[C, H, W]` channels horizontally (2px gutters) into one image.
fn channels_to_image(data: &[f32], c: usize, h: usize, w: usize) -> image::GrayImage {
    let gap = 2usize;
    let width = c * w + (c - 1) * gap;
    let mut img = image::GrayImage::from_pixel(width as u32, h as u32, image::Luma([255]));
    for ch in 0..c {
        let gray = to_gray(&data[ch * h * w..(ch + 1) * h * w]);
        for y in 0..h {
            for x in 0..w {
                let px = (ch * (w + gap) + x) as u32;
                img.put_pixel(px, y as u32, image::Luma([gray[y * w + x]]));
            }
        }
    }
    img
}

fn save_png(img: &image::GrayImage, path: &Path) -> CliResult {
    img.save(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn resolve_ckpt(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("last.ckpt")
    } else {
        path.to_path_buf()
    }
}

fn translate(a: TranslateArgs) -> CliResult {
    if a.n == 0 {
        return Err(CliError::Usage("-n must be at least 1".to_string()));
    }
    let data = data_dir(&a.data)?;
    let ckpt = load_checkpoint(&resolve_ckpt(&a.ckpt))?;
    let trainer = Trainer::from_checkpoint(&ckpt)?;
    let trans = trainer
        .trans
        .as_ref()
        .ok_or_else(|| CliError::Runtime("checkpoint has no translation networks".to_string()))?;
    let manifest = DatasetManifest::read(&data)?;
    let pool = load_slices(&data, &manifest, &SliceSelector::domain(Domain::Source))?;
    if pool.is_empty() {
        return Err(CliError::Runtime("dataset has no source slices".to_string()));
    }
    let indices: Vec<usize> = match &a.slices {
        Some(s) => parse_list(s, "slice index")?,
        None => (0..pool.len().min(4)).collect(),
    };
    for &i in &indices {
        if i >= pool.len() {
            return Err(CliError::Usage(format!(
                "slice index {i} out of range (source pool has {} slices)",
                pool.len()
            )));
        }
    }
    prepare_out(&a.out, a.force)?;

    let seed = a.seed.unwrap_or(trainer.cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "translate"));
    let stochastic = trainer.cfg.baseline_mode.stochastic_style();
    let selected: Vec<&PhantomSlice> = indices.iter().map(|&i| &pool[i]).collect();
    for (k, slice) in indices.iter().zip(&selected) {
        let batch: Vec<&PhantomSlice> = std::iter::repeat(*slice).take(a.n).collect();
        let style = if stochastic {
            sample_style(&mut rng, a.n, trainer.cfg.translation.style_dim)
        } else {
            Tensor::zeros(&[a.n, trainer.cfg.translation.style_dim])
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
        let fk = g.value(fake);
        let dims = fk.shape().to_vec();
        let (c, h, w) = (dims[1], dims[2], dims[3]);
        let per = c * h * w;
        let stem = format!("slice{k:04}_{}", slice.patient_id);
        let src_dims = slice.image.shape().to_vec();
        save_png(
            &channels_to_image(slice.image.data(), src_dims[0], src_dims[1], src_dims[2]),
            &a.out.join(format!("{stem}_source.png")),
        )?;
        save_png(
            &channels_to_image(slice.mask.data(), 1, src_dims[1], src_dims[2]),
            &a.out.join(format!("{stem}_mask.png")),
        )?;
        for s in 0..a.n {
            let row = &fk.data()[s * per..(s + 1) * per];
            save_png(
                &channels_to_image(row, c, h, w),
                &a.out.join(format!("{stem}_style{s:02}.png")),
            )?;
        }
    }
    // appearance-spread / structure-preservation numbers for the same slices
    if a.n >= 2 {
        let owned: Vec<PhantomSlice> = selected.iter().map(|s| (*s).clone()).collect();
        let report = diversity_report(&ckpt, &owned, a.n, seed)?;
        metrics::write_json(&a.out.join("diversity.json"), &report)?;
        println!(
            "mean per-pixel std {:.6}, mean structure dice {:.4}",
            report.mean_pixel_std, report.mean_dice
        );
    }
    println!(
        "wrote {} slices x {} styles to {}",
        indices.len(),
        a.n,
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let data = data_dir(&a.data)?;
    let folds = parse_folds(&a.folds)?;
    // a run directory carries config.json; a checkpoint carries its echo
    let cfg: TrainConfig = if a.ckpt.is_dir() {
        let p = a.ckpt.join("config.json");
        let text =
            fs::read_to_string(&p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?
    } else {
        let ckpt = load_checkpoint(&a.ckpt)?;
        serde_json::from_value(ckpt.config.clone())
            .map_err(|e| CliError::Runtime(format!("checkpoint config: {e}")))?
    };
    let name = serde_json::to_value(cfg.baseline_mode)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_else(|| "method".to_string());
    prepare_out(&a.out, a.force)?;
    let table = cross_validate(&data, &a.out, &[MethodSpec { name, config: cfg }], &folds)?;
    print!("{}", table.text());
    Ok(())
}

fn parse_axis(s: &str) -> CliResult<SweepAxis> {
    serde_json::from_value(serde_json::Value::String(s.to_uppercase())).map_err(|_| {
        CliError::Usage(format!(
            "unknown axis {s:?} (expected REAL_GIVEN_SYNTH, SYNTH_GIVEN_REAL, or REAL_WITH_BATCH_RATIO)"
        ))
    })
}

fn sweep_ratio(a: SweepArgs) -> CliResult {
    let cfg: TrainConfig = read_json_config(&a.config)?;
    let data = data_dir(&a.data)?;
    let axis = parse_axis(&a.axis)?;
    let grid: Vec<u32> = match &a.grid {
        Some(g) => parse_list(g, "grid percentage")?,
        None => DEFAULT_SWEEP_GRID.to_vec(),
    };
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".to_string()));
    }
    let folds = parse_folds(&a.folds)?;
    let base_seed = a.seed.unwrap_or(cfg.seed);
    let seeds: Vec<u64> = (0..a.seeds)
        .map(|k| derive_seed(base_seed, &format!("sweep-seed-{k}")))
        .collect();
    prepare_out(&a.out, a.force)?;
    let table = ratio_sweep(&data, &a.out, &cfg, axis, &grid, &seeds, &folds, a.jobs.max(1))?;
    for s in &table.summary {
        println!(
            "{} {:>3}%: AP {:.2} (± {:.2})",
            axis.label(),
            s.percent,
            s.mean_ap * 100.0,
            s.std_ap * 100.0
        );
    }
    println!("tables and plots in {}", a.out.display());
    Ok(())
}

/// One column of our CSV logs, as (step, value) points.
fn csv_series(path: &Path, column: &str) -> CliResult<Vec<(f64, f64)>> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Runtime(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    let idx = cols
        .iter()
        .position(|c| *c == column)
        .ok_or_else(|| CliError::Runtime(format!("{}: no column {column:?}", path.display())))?;
    let mut out = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            continue;
        }
        if let (Ok(step), Ok(v)) = (f[0].parse::<f64>(), f[idx].parse::<f64>()) {
            out.push((step, v));
        }
    }
    Ok(out)
}

fn plot(a: PlotArgs) -> CliResult {
    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    fs::create_dir_all(&out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    let train_log = a.run.join("train_log.csv");
    if !train_log.is_file() {
        return Err(CliError::Runtime(format!(
            "{} has no train_log.csv",
            a.run.display()
        )));
    }
    let mut series = vec![
        Series {
            label: "total".to_string(),
            points: csv_series(&train_log, "total")?,
        },
        Series {
            label: "seg_sup".to_string(),
            points: csv_series(&train_log, "seg_sup")?,
        },
    ];
    series.retain(|s| !s.points.is_empty());
    write_line_chart(
        &out.join("loss_total.svg"),
        "training objective",
        "iteration",
        "loss",
        &series,
    )?;
    let term_series: Vec<Series> = crate::losses::TERM_NAMES
        .iter()
        .map(|name| {
            Ok(Series {
                label: name.to_string(),
                points: csv_series(&train_log, name)?,
            })
        })
        .collect::<CliResult<_>>()?;
    write_line_chart(
        &out.join("loss_terms.svg"),
        "objective terms",
        "iteration",
        "loss",
        &term_series,
    )?;
    let mut written = vec!["loss_total.svg", "loss_terms.svg"];
    let val_log = a.run.join("val_log.csv");
    if val_log.is_file() {
        write_line_chart(
            &out.join("val.svg"),
            "held-out dice loss",
            "iteration",
            "dice loss",
            &[Series {
                label: "val".to_string(),
                points: csv_series(&val_log, "dice_loss")?,
            }],
        )?;
        written.push("val.svg");
    }
    println!("wrote {} in {}", written.join(", "), out.display());
    Ok(())
}

fn config(_a: ConfigArgs) -> CliResult {
    let doc = serde_json::json!({
        "dataset": DatasetConfig::default(),
        "train": TrainConfig::default(),
        "eval": {
            "binarization_threshold": metrics::DEFAULT_THRESHOLD,
            "folds": ALL_FOLDS,
        },
        "sweep": {
            "grid": DEFAULT_SWEEP_GRID,
            "seeds": 3,
            "jobs": 1,
        },
        "data_dir_env": DATA_DIR_ENV,
    });
    println!("{}", serde_json::to_string_pretty(&doc).expect("static JSON"));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_spec_parsing() {
        assert_eq!(parse_folds("5").unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(parse_folds("2").unwrap(), vec![0, 1]);
        assert_eq!(parse_folds("0,3").unwrap(), vec![0, 3]);
        assert!(parse_folds("0").is_err()); // count 0 invalid
        assert!(parse_folds("6").is_err());
        assert!(parse_folds("1,9").is_err());
        assert!(parse_folds("x").is_err());
    }

    #[test]
    fn axis_parsing() {
        assert_eq!(
            parse_axis("SYNTH_GIVEN_REAL").unwrap(),
            SweepAxis::SynthGivenReal
        );
        assert_eq!(
            parse_axis("real_given_synth").unwrap(),
            SweepAxis::RealGivenSynth
        );
        assert!(parse_axis("bogus").is_err());
    }

    #[test]
    fn gray_mapping_spans_range() {
        let g = to_gray(&[0.0, 0.5, 1.0]);
        assert_eq!(g, vec![0, 128, 255]);
        let flat = to_gray(&[3.0, 3.0]);
        assert_eq!(flat, vec![0, 0]);
    }
}
