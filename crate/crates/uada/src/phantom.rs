//! Synthetic two-modality phantom dataset with ground-truth lesion masks.
//!
//! Shared anatomy (a smooth background field, an organ ellipse, 0–3 lesion
//! ellipses) renders into two modalities: a deterministic 3-channel "source"
//! and a stochastic 5-channel "target" whose gains, bias field and texture
//! are drawn from a style seed — so the source→target mapping is
//! one-to-many by construction, while masks depend on anatomy alone.
//! Slices of one patient are independent sections; the patient id only
//! groups slices for labeling and fold assignment.

use std::collections::BTreeMap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::derive_seed;
use crate::tensor::Tensor;

pub const MANIFEST_FORMAT: &str = "uada-dataset/1";
const SLICE_MAGIC: &[u8; 4] = b"UADA";
const SLICE_VERSION: u32 = 1;
const HEADER_LEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// Axis-aligned-then-rotated ellipse, all lengths as fractions of the grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub ax: f64,
    pub ay: f64,
    pub rot: f64,
}

impl Ellipse {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - self.cx, v - self.cy);
        let (s, c) = self.rot.sin_cos();
        let x = du * c + dv * s;
        let y = -du * s + dv * c;
        (x / self.ax).powi(2) + (y / self.ay).powi(2) <= 1.0
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.ax * self.ay
    }
}

/// The modality-independent scene for one slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnatomyParams {
    pub seed: u64,
    pub grid_size: usize,
    /// Coefficients of the low-frequency cosine background, index (i, j) in
    /// 0..3 × 0..3 skipping (0,0); the field is 0.5 + Σ c·cos(πiu)·cos(πjv).
    pub background: Vec<f64>,
    pub organ: Ellipse,
    pub lesions: Vec<Ellipse>,
}

/// One rendered slice of one modality, normalized per channel.
#[derive(Clone, Debug)]
pub struct PhantomSlice {
    /// `[C, H, W]`, each channel zero mean / unit variance over the slice.
    pub image: Tensor<f32>,
    /// `[H, W]` with values exactly 0.0 or 1.0 (1 = lesion).
    pub mask: Tensor<f32>,
    pub domain: Domain,
    pub patient_id: String,
    pub labeled: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SliceRecord {
    pub patient_id: String,
    pub domain: Domain,
    pub labeled: bool,
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub n_source: usize,
    pub n_target: usize,
    pub n_target_labeled: usize,
    pub grid_size: usize,
    pub source_channels: usize,
    pub target_channels: usize,
    pub slices_per_patient: usize,
    pub seed: u64,
    /// fold index ("0".."4") → target patient ids.
    pub folds: BTreeMap<String, Vec<String>>,
    pub records: Vec<SliceRecord>,
}

impl DatasetManifest {
    pub const N_FOLDS: usize = 5;

    pub fn fold_of(&self, patient_id: &str) -> Option<usize> {
        for (k, pats) in &self.folds {
            if pats.iter().any(|p| p == patient_id) {
                return k.parse().ok();
            }
        }
        None
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::corrupt(format!("{}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::corrupt(format!(
                "{}: unsupported dataset format {:?}",
                path.display(),
                m.format
            )));
        }
        Ok(m)
    }
}

/// Generation/config knobs for `build_dataset`. Counts are in patients.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_source: usize,
    pub n_target: usize,
    pub labeled_fraction: f64,
    pub slices_per_patient: usize,
    pub grid_size: usize,
    pub source_channels: usize,
    pub target_channels: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_source: 40,
            n_target: 20,
            labeled_fraction: 0.5,
            slices_per_patient: 4,
            grid_size: 64,
            source_channels: 3,
            target_channels: 5,
            seed: 0,
        }
    }
}

// ---- anatomy ----

pub fn generate_anatomy(seed: u64, grid_size: usize) -> Result<AnatomyParams> {
    if grid_size < 32 {
        return Err(Error::invalid_argument(format!(
            "grid_size must be >= 32, got {grid_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "anatomy"));

    // Background: 8 cosine terms with total amplitude in [0.1, 0.3], so the
    // field stays within [0.2, 0.8] and the organ bump keeps it in [0, 1].
    let raw: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let total: f64 = raw.iter().map(|c| c.abs()).sum();
    let amp = rng.gen_range(0.1..0.3);
    let background: Vec<f64> = raw.iter().map(|c| c * amp / total.max(1e-9)).collect();

    let organ = Ellipse {
        cx: rng.gen_range(0.42..0.58),
        cy: rng.gen_range(0.42..0.58),
        ax: rng.gen_range(0.22..0.32),
        ay: rng.gen_range(0.18..0.28),
        rot: rng.gen_range(0.0..std::f64::consts::PI),
    };

    let n_lesions = rng.gen_range(0..4u32) as usize;
    let mut lesions = Vec::with_capacity(n_lesions);
    for _ in 0..n_lesions {
        let la: f64 = rng.gen_range(0.03..0.07);
        let lb: f64 = rng.gen_range(0.03..0.07);
        // Place the lesion's bounding circle strictly inside the organ by
        // shrinking the organ by that radius plus a margin; the lesion then
        // lies fully inside the organ, comfortably over the 95% requirement.
        let r = la.max(lb) + 0.015;
        let (sa, sb) = (organ.ax - r, organ.ay - r);
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let rho: f64 = rng.gen_range(0.0..1.0f64).sqrt();
        let (ox, oy) = (rho * sa * theta.cos(), rho * sb * theta.sin());
        let (s, c) = organ.rot.sin_cos();
        lesions.push(Ellipse {
            cx: organ.cx + ox * c - oy * s,
            cy: organ.cy + ox * s + oy * c,
            ax: la,
            ay: lb,
            rot: rng.gen_range(0.0..std::f64::consts::PI),
        });
    }

    Ok(AnatomyParams {
        seed,
        grid_size,
        background,
        organ,
        lesions,
    })
}

/// Scene raster shared by both modality renderers.
struct Raster {
    /// Anatomy intensity in [0, 1], row-major H×W.
    intensity: Vec<f64>,
    organ: Vec<bool>,
    lesion: Vec<u8>,
}

fn background_at(coeffs: &[f64], u: f64, v: f64) -> f64 {
    let mut val = 0.5;
    let mut idx = 0;
    for i in 0..3 {
        for j in 0..3 {
            if i == 0 && j == 0 {
                continue;
            }
            val += coeffs[idx]
                * (std::f64::consts::PI * i as f64 * u).cos()
                * (std::f64::consts::PI * j as f64 * v).cos();
            idx += 1;
        }
    }
    val
}

fn rasterize(a: &AnatomyParams) -> Raster {
    let n = a.grid_size;
    let mut intensity = vec![0.0; n * n];
    let mut organ = vec![false; n * n];
    let mut lesion = vec![0u8; n * n];
    for row in 0..n {
        let v = (row as f64 + 0.5) / n as f64;
        for col in 0..n {
            let u = (col as f64 + 0.5) / n as f64;
            let idx = row * n + col;
            let mut val = background_at(&a.background, u, v);
            if a.organ.contains(u, v) {
                organ[idx] = true;
                val += 0.2;
            }
            if a.lesions.iter().any(|l| l.contains(u, v)) {
                lesion[idx] = 1;
            }
            intensity[idx] = val.clamp(0.0, 1.0);
        }
    }
    Raster {
        intensity,
        organ,
        lesion,
    }
}

/// Organ interior as a 0/1 `[H, W]` tensor (diagnostics).
pub fn organ_mask(a: &AnatomyParams) -> Tensor<f32> {
    let raster = rasterize(a);
    let n = a.grid_size;
    Tensor::from_vec(
        &[n, n],
        raster.organ.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )
}

/// Fixed monotone contrast curve per channel (gamma table).
fn source_gamma(k: usize) -> f64 {
    const GAMMAS: [f64; 8] = [0.6, 1.0, 1.6, 2.2, 0.45, 1.3, 0.8, 1.9];
    GAMMAS[k % GAMMAS.len()]
}

fn normalize_channels(raw: Vec<f64>, channels: usize, side: usize) -> Tensor<f32> {
    let hw = side * side;
    let mut out = vec![0f32; channels * hw];
    for c in 0..channels {
        let sl = &raw[c * hw..(c + 1) * hw];
        let mean: f64 = sl.iter().sum::<f64>() / hw as f64;
        let var: f64 = sl.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hw as f64;
        let inv = if var > 1e-24 { 1.0 / var.sqrt() } else { 0.0 };
        for (o, &v) in out[c * hw..(c + 1) * hw].iter_mut().zip(sl.iter()) {
            *o = ((v - mean) * inv) as f32;
        }
    }
    Tensor::from_vec(&[channels, side, side], out)
}

fn mask_tensor(raster: &Raster, n: usize) -> Tensor<f32> {
    Tensor::from_vec(
        &[n, n],
        raster.lesion.iter().map(|&b| b as f32).collect(),
    )
}

/// Deterministic source-modality rendering: per-channel monotone contrast
/// curves of the anatomy intensity plus a fixed +0.3 lesion offset, then
/// per-channel normalization.
pub fn render_source(a: &AnatomyParams, channels: usize) -> PhantomSlice {
    let n = a.grid_size;
    let hw = n * n;
    let raster = rasterize(a);
    let mut raw = vec![0.0f64; channels * hw];
    for c in 0..channels {
        let g = source_gamma(c);
        for i in 0..hw {
            let mut v = raster.intensity[i].powf(g);
            if raster.lesion[i] == 1 {
                v += 0.3;
            }
            raw[c * hw + i] = v;
        }
    }
    PhantomSlice {
        image: normalize_channels(raw, channels, n),
        mask: mask_tensor(&raster, n),
        domain: Domain::Source,
        patient_id: format!("a{}", a.seed),
        labeled: true,
    }
}

/// Stochastic target-modality rendering: per-channel gain, smooth bias
/// field and band-limited texture all drawn from the style seed, plus a
/// style-dependent lesion contrast, then per-channel normalization. The
/// mask is identical to `render_source` on the same anatomy.
pub fn render_target(a: &AnatomyParams, style_seed: u64, channels: usize) -> PhantomSlice {
    let n = a.grid_size;
    let hw = n * n;
    let raster = rasterize(a);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(style_seed, "style-render"));
    let lesion_gain = rng.gen_range(0.5..1.5);

    let mut raw = vec![0.0f64; channels * hw];
    for c in 0..channels {
        let gain = rng.gen_range(0.6..1.6);
        // Smooth bias field: 4 low-frequency cosine products.
        let bias: Vec<(f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.gen_range(-0.10..0.10),
                    rng.gen_range(0.5..2.5),
                    rng.gen_range(0.5..2.5),
                )
            })
            .collect();
        // Band-limited texture: 6 oriented cosines, 3–8 cycles across.
        // Strong enough to matter for segmentation — this is the part of
        // the target's appearance that a smooth decoder cannot reproduce,
        // so it is what keeps real and synthesized target images apart.
        let texture: Vec<(f64, f64, f64, f64)> = (0..6)
            .map(|_| {
                let freq = rng.gen_range(3.0..8.0);
                let dir = rng.gen_range(0.0..std::f64::consts::TAU);
                (
                    rng.gen_range(-0.06..0.06),
                    freq * dir.cos(),
                    freq * dir.sin(),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        for row in 0..n {
            let v = (row as f64 + 0.5) / n as f64;
            for col in 0..n {
                let u = (col as f64 + 0.5) / n as f64;
                let i = row * n + col;
                let mut val = gain * raster.intensity[i];
                for &(amp, fu, fv) in &bias {
                    val += amp
                        * (std::f64::consts::PI * fu * u).cos()
                        * (std::f64::consts::PI * fv * v).cos();
                }
                for &(amp, fu, fv, ph) in &texture {
                    val += amp * (std::f64::consts::TAU * (fu * u + fv * v) + ph).cos();
                }
                if raster.lesion[i] == 1 {
                    val += 0.4 * lesion_gain;
                }
                raw[c * hw + i] = val;
            }
        }
    }
    PhantomSlice {
        image: normalize_channels(raw, channels, n),
        mask: mask_tensor(&raster, n),
        domain: Domain::Target,
        patient_id: format!("a{}", a.seed),
        labeled: false,
    }
}

// ---- persistence ----

fn encode_slice(slice: &PhantomSlice) -> Vec<u8> {
    let shape = slice.image.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut buf = Vec::with_capacity(HEADER_LEN + c * h * w * 4 + h * w);
    buf.extend_from_slice(SLICE_MAGIC);
    buf.extend_from_slice(&SLICE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(c as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.push(match slice.domain {
        Domain::Source => 0,
        Domain::Target => 1,
    });
    buf.push(slice.labeled as u8);
    buf.resize(HEADER_LEN, 0);
    for &v in slice.image.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &m in slice.mask.data() {
        buf.push(if m > 0.5 { 1 } else { 0 });
    }
    buf
}

fn decode_slice(bytes: &[u8], path: &Path) -> Result<PhantomSlice> {
    let corrupt = |msg: &str| Error::corrupt(format!("{}: {msg}", path.display()));
    if bytes.len() < HEADER_LEN || &bytes[0..4] != SLICE_MAGIC {
        return Err(corrupt("not a slice file (bad magic)"));
    }
    let rd32 = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    if rd32(4) != SLICE_VERSION {
        return Err(corrupt("unsupported slice version"));
    }
    let (c, h, w) = (rd32(8) as usize, rd32(12) as usize, rd32(16) as usize);
    let domain = match bytes[20] {
        0 => Domain::Source,
        1 => Domain::Target,
        _ => return Err(corrupt("bad domain byte")),
    };
    let labeled = match bytes[21] {
        0 => false,
        1 => true,
        _ => return Err(corrupt("bad labeled byte")),
    };
    let img_bytes = c * h * w * 4;
    if bytes.len() != HEADER_LEN + img_bytes + h * w {
        return Err(corrupt("truncated slice payload"));
    }
    let mut img = Vec::with_capacity(c * h * w);
    for i in 0..c * h * w {
        let o = HEADER_LEN + i * 4;
        img.push(f32::from_le_bytes([
            bytes[o],
            bytes[o + 1],
            bytes[o + 2],
            bytes[o + 3],
        ]));
    }
    let mask: Vec<f32> = bytes[HEADER_LEN + img_bytes..]
        .iter()
        .map(|&b| b as f32)
        .collect();
    Ok(PhantomSlice {
        image: Tensor::from_vec(&[c, h, w], img),
        mask: Tensor::from_vec(&[h, w], mask),
        domain,
        patient_id: String::new(), // assigned from the manifest record
        labeled,
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write;
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Generate every slice of both domains, write them plus `manifest.json`
/// under `out_dir`, and return the manifest.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if cfg.labeled_fraction <= 0.0 || cfg.labeled_fraction > 1.0 {
        return Err(Error::invalid_argument(format!(
            "labeled_fraction must be in (0, 1], got {}",
            cfg.labeled_fraction
        )));
    }
    if cfg.grid_size < 32 {
        return Err(Error::invalid_argument(format!(
            "grid_size must be >= 32, got {}",
            cfg.grid_size
        )));
    }
    if cfg.n_source == 0 || cfg.n_target == 0 || cfg.slices_per_patient == 0 {
        return Err(Error::invalid_argument(
            "n_source, n_target and slices_per_patient must be positive",
        ));
    }
    let slice_dir = out_dir.join("slices");
    std::fs::create_dir_all(&slice_dir).map_err(|e| Error::io(&slice_dir, e))?;

    let n_labeled = (cfg.labeled_fraction * cfg.n_target as f64).ceil() as usize;
    let mut records = Vec::new();

    let write_slice = |slice: &PhantomSlice, name: &str| -> Result<SliceRecord> {
        let bytes = encode_slice(slice);
        let rel = format!("slices/{name}.bin");
        let path = out_dir.join(&rel);
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
        Ok(SliceRecord {
            patient_id: slice.patient_id.clone(),
            domain: slice.domain,
            labeled: slice.labeled,
            path: rel,
            sha256: sha256_hex(&bytes),
        })
    };

    for p in 0..cfg.n_source {
        let pid = format!("s{p:03}");
        for s in 0..cfg.slices_per_patient {
            let aseed = derive_seed(cfg.seed, &format!("anat/src/{pid}/{s}"));
            let anatomy = generate_anatomy(aseed, cfg.grid_size)?;
            let mut slice = render_source(&anatomy, cfg.source_channels);
            slice.patient_id = pid.clone();
            records.push(write_slice(&slice, &format!("{pid}_{s:02}"))?);
        }
    }

    let mut folds: BTreeMap<String, Vec<String>> = (0..DatasetManifest::N_FOLDS)
        .map(|k| (k.to_string(), Vec::new()))
        .collect();
    for p in 0..cfg.n_target {
        let pid = format!("t{p:03}");
        folds
            .get_mut(&(p % DatasetManifest::N_FOLDS).to_string())
            .expect("fold key")
            .push(pid.clone());
        let labeled = p < n_labeled;
        for s in 0..cfg.slices_per_patient {
            let aseed = derive_seed(cfg.seed, &format!("anat/tgt/{pid}/{s}"));
            let style = derive_seed(cfg.seed, &format!("style/tgt/{pid}/{s}"));
            let anatomy = generate_anatomy(aseed, cfg.grid_size)?;
            let mut slice = render_target(&anatomy, style, cfg.target_channels);
            slice.patient_id = pid.clone();
            slice.labeled = labeled;
            records.push(write_slice(&slice, &format!("{pid}_{s:02}"))?);
        }
    }

    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.to_string(),
        n_source: cfg.n_source,
        n_target: cfg.n_target,
        n_target_labeled: n_labeled,
        grid_size: cfg.grid_size,
        source_channels: cfg.source_channels,
        target_channels: cfg.target_channels,
        slices_per_patient: cfg.slices_per_patient,
        seed: cfg.seed,
        folds,
        records,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::corrupt(format!("encode manifest: {e}")))?;
    let mpath = out_dir.join("manifest.json");
    std::fs::write(&mpath, json.as_bytes()).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Which slices `load_slices` should return. `None` means "no constraint";
/// fold filters apply to target patients only (source has no folds).
#[derive(Clone, Copy, Debug, Default)]
pub struct SliceSelector {
    pub domain: Option<Domain>,
    pub labeled: Option<bool>,
    pub fold: Option<usize>,
    pub exclude_fold: Option<usize>,
}

impl SliceSelector {
    pub fn domain(domain: Domain) -> Self {
        SliceSelector {
            domain: Some(domain),
            ..Default::default()
        }
    }
}

/// Read slices matching the selector, in manifest order, verifying each
/// file's SHA-256 against the manifest.
pub fn load_slices(
    dir: &Path,
    manifest: &DatasetManifest,
    selector: &SliceSelector,
) -> Result<Vec<PhantomSlice>> {
    let mut out = Vec::new();
    for rec in &manifest.records {
        if let Some(d) = selector.domain {
            if rec.domain != d {
                continue;
            }
        }
        if let Some(l) = selector.labeled {
            if rec.labeled != l {
                continue;
            }
        }
        if selector.fold.is_some() || selector.exclude_fold.is_some() {
            let fold = manifest.fold_of(&rec.patient_id);
            if let Some(want) = selector.fold {
                if fold != Some(want) {
                    continue;
                }
            }
            if let Some(skip) = selector.exclude_fold {
                if rec.domain == Domain::Target && fold == Some(skip) {
                    continue;
                }
            }
        }
        let path = dir.join(&rec.path);
        let mut bytes = Vec::new();
        std::fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != rec.sha256 {
            return Err(Error::corrupt(format!(
                "{}: checksum mismatch (file does not match manifest)",
                path.display()
            )));
        }
        let mut slice = decode_slice(&bytes, &path)?;
        slice.patient_id = rec.patient_id.clone();
        out.push(slice);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anatomy_is_deterministic_and_seed_sensitive() {
        let a = generate_anatomy(7, 64).unwrap();
        let b = generate_anatomy(7, 64).unwrap();
        assert_eq!(a, b);

        let mut any_differ = false;
        let mut prev = generate_anatomy(0, 64).unwrap();
        for seed in 1..100 {
            let cur = generate_anatomy(seed, 64).unwrap();
            if cur != prev {
                any_differ = true;
            }
            prev = cur;
        }
        assert!(any_differ, "generator must not be constant across seeds");
    }

    #[test]
    fn anatomy_rejects_small_grid() {
        let err = generate_anatomy(0, 31).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
    }

    #[test]
    fn lesion_count_histogram_is_uniform() {
        let mut counts = [0usize; 4];
        for seed in 0..1000u64 {
            let a = generate_anatomy(seed, 64).unwrap();
            counts[a.lesions.len()] += 1;
        }
        for (k, &c) in counts.iter().enumerate() {
            let frac = c as f64 / 1000.0;
            assert!(
                (frac - 0.25).abs() <= 0.05,
                "lesion count {k} appeared with frequency {frac}"
            );
        }
    }

    #[test]
    fn lesions_stay_inside_the_organ() {
        // Monte-Carlo area oracle: sample each lesion and require > 95%
        // of samples inside the organ (the construction gives 100%).
        for seed in 0..200u64 {
            let a = generate_anatomy(seed, 64).unwrap();
            for l in &a.lesions {
                let mut inside = 0;
                let mut total = 0;
                let (s, c) = l.rot.sin_cos();
                for i in 0..40 {
                    for j in 0..40 {
                        let x = (i as f64 / 39.0 * 2.0 - 1.0) * l.ax;
                        let y = (j as f64 / 39.0 * 2.0 - 1.0) * l.ay;
                        if (x / l.ax).powi(2) + (y / l.ay).powi(2) > 1.0 {
                            continue;
                        }
                        total += 1;
                        let u = l.cx + x * c - y * s;
                        let v = l.cy + x * s + y * c;
                        if a.organ.contains(u, v) {
                            inside += 1;
                        }
                    }
                }
                assert!(
                    inside as f64 >= 0.95 * total as f64,
                    "seed {seed}: lesion spills out of the organ ({inside}/{total})"
                );
            }
        }
    }

    #[test]
    fn source_rendering_is_deterministic_with_exact_mask() {
        let a = generate_anatomy(7, 64).unwrap();
        let s1 = render_source(&a, 3);
        let s2 = render_source(&a, 3);
        assert_eq!(s1.image.data(), s2.image.data());
        assert_eq!(s1.mask.data(), s2.mask.data());
        assert_eq!(s1.image.shape(), &[3, 64, 64]);
        assert!(s1.labeled);
        assert_eq!(s1.domain, Domain::Source);

        // zero lesions → all-zero mask
        let none = (0..500u64)
            .map(|s| generate_anatomy(s, 64).unwrap())
            .find(|a| a.lesions.is_empty())
            .expect("some anatomy has zero lesions");
        let slice = render_source(&none, 3);
        assert!(slice.mask.data().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn mask_area_matches_rasterization_oracle() {
        // Oracle: count pixel centers inside any lesion ellipse, written
        // independently of the renderer; also bound against the analytic
        // area within a one-pixel boundary ring.
        let a = (0..500u64)
            .map(|s| generate_anatomy(s, 64).unwrap())
            .find(|a| a.lesions.len() == 1)
            .expect("some anatomy has exactly one lesion");
        let slice = render_source(&a, 3);
        let got: f64 = slice.mask.data().iter().map(|&m| m as f64).sum();

        let n = 64usize;
        let mut oracle = 0usize;
        for row in 0..n {
            for col in 0..n {
                let u = (col as f64 + 0.5) / n as f64;
                let v = (row as f64 + 0.5) / n as f64;
                if a.lesions[0].contains(u, v) {
                    oracle += 1;
                }
            }
        }
        assert_eq!(got as usize, oracle);

        let l = &a.lesions[0];
        let analytic = l.area() * (n * n) as f64;
        // perimeter (Ramanujan) in pixels bounds the rasterization ring
        let (pa, pb) = (l.ax * n as f64, l.ay * n as f64);
        let perimeter = std::f64::consts::PI
            * (3.0 * (pa + pb) - ((3.0 * pa + pb) * (pa + 3.0 * pb)).sqrt());
        assert!(
            (got - analytic).abs() <= perimeter + 4.0,
            "mask area {got} vs analytic {analytic} (ring {perimeter})"
        );
    }

    #[test]
    fn target_rendering_is_stochastic_in_style_only() {
        let a = generate_anatomy(3, 64).unwrap();
        let t1 = render_target(&a, 1, 5);
        let t1b = render_target(&a, 1, 5);
        let t2 = render_target(&a, 2, 5);
        assert_eq!(t1.image.data(), t1b.image.data());
        assert_eq!(t1.mask.data(), t2.mask.data(), "mask depends on anatomy only");
        assert_eq!(
            t1.mask.data(),
            render_source(&a, 3).mask.data(),
            "mask consistent across modalities"
        );
        let mad: f64 = t1
            .image
            .data()
            .iter()
            .zip(t2.image.data().iter())
            .map(|(&x, &y)| (x as f64 - y as f64).abs())
            .sum::<f64>()
            / t1.image.len() as f64;
        assert!(mad > 0.0, "style seeds must change the image");
        assert_eq!(t1.image.shape(), &[5, 64, 64]);
        assert_eq!(t1.domain, Domain::Target);
    }

    #[test]
    fn style_variance_is_positive_across_organ() {
        // 20-sample Monte-Carlo oracle: per-pixel std across style seeds.
        let a = generate_anatomy(11, 64).unwrap();
        let n_styles = 20;
        let slices: Vec<PhantomSlice> =
            (0..n_styles).map(|s| render_target(&a, s, 5)).collect();
        let hw = 64 * 64;
        let organ = organ_mask(&a);

        let mut mean_std = 0.0f64;
        let mut organ_positive = 0usize;
        let mut organ_total = 0usize;
        for c in 0..5 {
            for i in 0..hw {
                let vals: Vec<f64> = slices
                    .iter()
                    .map(|s| s.image.data()[c * hw + i] as f64)
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
                mean_std += var.sqrt();
                if organ.data()[i] > 0.5 {
                    organ_total += 1;
                    if var > 0.0 {
                        organ_positive += 1;
                    }
                }
            }
        }
        mean_std /= (5 * hw) as f64;
        assert!(mean_std > 0.0, "mean per-pixel std must be positive");
        assert!(
            organ_positive as f64 >= 0.99 * organ_total as f64,
            "variance positive on only {organ_positive}/{organ_total} organ pixels"
        );
    }

    #[test]
    fn stored_channels_are_normalized() {
        let a = generate_anatomy(5, 64).unwrap();
        for slice in [render_source(&a, 3), render_target(&a, 9, 5)] {
            let c = slice.image.shape()[0];
            let hw = 64 * 64;
            for ch in 0..c {
                let sl = &slice.image.data()[ch * hw..(ch + 1) * hw];
                let mean: f64 = sl.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
                let std = (sl
                    .iter()
                    .map(|&v| (v as f64 - mean).powi(2))
                    .sum::<f64>()
                    / hw as f64)
                    .sqrt();
                assert!(mean.abs() < 1e-5, "channel {ch} mean {mean}");
                assert!((std - 1.0).abs() < 1e-4, "channel {ch} std {std}");
            }
        }
    }

    #[test]
    fn dataset_build_matches_config_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            n_source: 40,
            n_target: 20,
            labeled_fraction: 0.5,
            slices_per_patient: 1,
            grid_size: 32,
            ..Default::default()
        };
        let m = build_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(m.n_source, 40);
        assert_eq!(m.n_target, 20);
        assert_eq!(m.n_target_labeled, 10);
        for k in 0..5 {
            assert_eq!(m.folds[&k.to_string()].len(), 4);
        }

        // partition: union = all target patients, pairwise disjoint
        let mut seen = std::collections::HashSet::new();
        for pats in m.folds.values() {
            for p in pats {
                assert!(seen.insert(p.clone()), "{p} appears in two folds");
            }
        }
        assert_eq!(seen.len(), 20);

        // every fold receives labeled patients under this fraction
        for k in 0..5 {
            let labeled_in_fold = m
                .records
                .iter()
                .filter(|r| {
                    r.domain == Domain::Target
                        && r.labeled
                        && m.fold_of(&r.patient_id) == Some(k)
                })
                .count();
            assert!(labeled_in_fold > 0, "fold {k} has no labeled patients");
        }
    }

    #[test]
    fn dataset_build_is_byte_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            n_source: 3,
            n_target: 5,
            slices_per_patient: 2,
            grid_size: 32,
            ..Default::default()
        };
        build_dataset(&cfg, d1.path()).unwrap();
        build_dataset(&cfg, d2.path()).unwrap();
        let m1 = std::fs::read(d1.path().join("manifest.json")).unwrap();
        let m2 = std::fs::read(d2.path().join("manifest.json")).unwrap();
        assert_eq!(m1, m2, "manifests must be byte-identical");
        let s1 = std::fs::read(d1.path().join("slices/t000_00.bin")).unwrap();
        let s2 = std::fs::read(d2.path().join("slices/t000_00.bin")).unwrap();
        assert_eq!(s1, s2, "slice files must be byte-identical");
    }

    #[test]
    fn zero_labeled_fraction_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            labeled_fraction: 0.0,
            ..Default::default()
        };
        let err = build_dataset(&cfg, dir.path()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
    }

    #[test]
    fn loader_selects_and_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            n_source: 4,
            n_target: 5,
            labeled_fraction: 0.4,
            slices_per_patient: 2,
            grid_size: 32,
            ..Default::default()
        };
        let m = build_dataset(&cfg, dir.path()).unwrap();

        let src = load_slices(dir.path(), &m, &SliceSelector::domain(Domain::Source)).unwrap();
        assert_eq!(src.len(), 4 * 2);
        assert!(src.iter().all(|s| s.labeled && s.domain == Domain::Source));

        let fold0 = load_slices(
            dir.path(),
            &m,
            &SliceSelector {
                domain: Some(Domain::Target),
                fold: Some(0),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!fold0.is_empty());
        for s in &fold0 {
            assert_eq!(m.fold_of(&s.patient_id), Some(0));
        }

        let rest = load_slices(
            dir.path(),
            &m,
            &SliceSelector {
                domain: Some(Domain::Target),
                exclude_fold: Some(0),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(rest.len() + fold0.len(), 5 * 2);

        // round-trip: regenerate one slice in memory and compare bitwise
        let aseed = derive_seed(cfg.seed, "anat/tgt/t000/0");
        let style = derive_seed(cfg.seed, "style/tgt/t000/0");
        let anatomy = generate_anatomy(aseed, 32).unwrap();
        let fresh = render_target(&anatomy, style, cfg.target_channels);
        let loaded = load_slices(
            dir.path(),
            &m,
            &SliceSelector {
                domain: Some(Domain::Target),
                ..Default::default()
            },
        )
        .unwrap();
        let t000 = loaded
            .iter()
            .find(|s| s.patient_id == "t000")
            .expect("t000 present");
        assert_eq!(t000.image.data(), fresh.image.data());
        assert_eq!(t000.mask.data(), fresh.mask.data());
    }

    #[test]
    fn corrupted_slice_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            n_source: 1,
            n_target: 1,
            slices_per_patient: 1,
            grid_size: 32,
            ..Default::default()
        };
        let m = build_dataset(&cfg, dir.path()).unwrap();
        let victim = dir.path().join(&m.records[0].path);
        let mut bytes = std::fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&victim, &bytes).unwrap();
        let err = load_slices(dir.path(), &m, &SliceSelector::default()).unwrap_err();
        assert!(matches!(err, Error::CorruptData(_)), "{err}");
    }
}
