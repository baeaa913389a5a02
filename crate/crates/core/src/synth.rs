//! Synthetic three-channel lesion volumes, z-score normalization, and the
//! on-disk case/dataset format.
//!
//! Each case has a smoothed correlated-noise background with a soft central
//! "gland" ellipsoid. Lesions are anisotropic Gaussian bumps; the mask is the
//! half-maximum level set. Lesions appear bright in channel 1 and dark in
//! channels 0 and 2. Lesions never touch (not even diagonally), so every
//! lesion is exactly one 26-connected component of the mask.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::components::{components, Connectivity};
use crate::seeds;
use crate::segnet::{take, Sample};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
/// 0.5 × 0.5 × 3.0 mm voxels.
pub const DEFAULT_VOXEL_VOLUME_MM3: f64 = 0.75;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 100;
const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [Self::Small, Self::Medium, Self::Large];

    /// Radius range as a fraction of the smallest grid dimension.
    fn radius_fraction(self) -> (f64, f64) {
        match self {
            Self::Small => (0.06, 0.09),
            Self::Medium => (0.10, 0.14),
            Self::Large => (0.15, 0.20),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_cases: usize,
    /// Fraction of cases that contain lesions.
    pub prevalence: f64,
    /// Weights of small, medium and large lesions; must sum to 1.
    pub size_mix: [f64; 3],
    pub shape: [usize; 3],
    /// Lesion-bearing cases get between 1 and this many lesions.
    pub max_lesions: usize,
    pub voxel_volume_mm3: f64,
    pub seed: u64,
    /// Lesion peak contrast in units of background noise.
    pub contrast: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cases: 64,
            prevalence: 0.75,
            size_mix: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            shape: [16, 16, 16],
            max_lesions: 2,
            voxel_volume_mm3: DEFAULT_VOXEL_VOLUME_MM3,
            seed: 0,
            contrast: 2.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size_mix.iter().any(|w| !(*w >= 0.0))
            || (self.size_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "size mix weights {:?} must be non-negative and sum to 1",
                self.size_mix
            )));
        }
        if !(0.0..=1.0).contains(&self.prevalence) {
            return Err(Error::Config(format!(
                "prevalence {} outside [0, 1]",
                self.prevalence
            )));
        }
        if self.shape.iter().any(|&s| s < 4) {
            return Err(Error::Config(format!("grid {:?} too small", self.shape)));
        }
        if self.max_lesions == 0 {
            return Err(Error::Config("max_lesions must be at least 1".into()));
        }
        if !(self.voxel_volume_mm3 > 0.0) {
            return Err(Error::Config("voxel volume must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionRecord {
    pub centroid: [f64; 3],
    /// Half-maximum radii along each axis, in voxels.
    pub radii: [f64; 3],
    pub voxels: usize,
    pub size_class: SizeClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCase {
    pub index: usize,
    pub seed: u64,
    /// `[3, H, W, D]`, z-scored per channel.
    pub volume: Tensor,
    /// `[H, W, D]` with entries 0 or 1.
    pub mask: Tensor,
    pub lesions: Vec<LesionRecord>,
    pub label: bool,
    pub voxel_volume_mm3: f64,
}

impl SynthCase {
    pub fn shape(&self) -> [usize; 3] {
        let s = self.mask.shape();
        [s[0], s[1], s[2]]
    }

    pub fn to_sample(&self) -> Sample {
        Sample {
            volume: self.volume.clone(),
            mask: self.mask.clone(),
        }
    }
}

/// Per-channel (x − mean) / std over a `[C, ...]` tensor. Channels with
/// std below 1e-12 become zero.
pub fn zscore_normalize(volume: &Tensor) -> Tensor {
    let mut out = volume.clone();
    if volume.ndim() == 0 || volume.is_empty() {
        return out;
    }
    let c = volume.shape()[0];
    let n = volume.len() / c;
    for ch in out.data_mut().chunks_mut(n) {
        let mean = ch.iter().sum::<f64>() / n as f64;
        let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if std < STD_FLOOR {
            ch.fill(0.0);
        } else {
            ch.iter_mut().for_each(|v| *v = (*v - mean) / std);
        }
    }
    out
}

struct Grid {
    h: usize,
    w: usize,
    d: usize,
}

impl Grid {
    fn len(&self) -> usize {
        self.h * self.w * self.d
    }

    fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.w + j) * self.d + k
    }
}

fn box_blur(data: &mut [f64], g: &Grid, radius: usize) {
    let dims = [g.h, g.w, g.d];
    let strides = [g.w * g.d, g.d, 1];
    let mut buf = vec![0.0; data.len()];
    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        for start in 0..data.len() {
            let pos = (start / stride) % len;
            let lo = pos.saturating_sub(radius);
            let hi = (pos + radius).min(len - 1);
            let base = start - pos * stride;
            let mut acc = 0.0;
            for p in lo..=hi {
                acc += data[base + p * stride];
            }
            buf[start] = acc / (hi - lo + 1) as f64;
        }
        data.copy_from_slice(&buf);
    }
}

fn smooth_noise(g: &Grid, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..g.len()).map(|_| rng.sample(StandardNormal)).collect();
    box_blur(&mut v, g, 1);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64)
        .sqrt()
        .max(STD_FLOOR);
    v.iter_mut().for_each(|x| *x = (*x - mean) / std);
    v
}

fn sample_class(mix: &[f64; 3], rng: &mut ChaCha8Rng) -> SizeClass {
    let u: f64 = rng.gen();
    if u < mix[0] {
        SizeClass::Small
    } else if u < mix[0] + mix[1] {
        SizeClass::Medium
    } else {
        SizeClass::Large
    }
}

/// Attempts to place one lesion of `class` that keeps a one-voxel gap to
/// `occupied`. Returns the record and its voxel indices.
fn place_lesion(
    g: &Grid,
    class: SizeClass,
    occupied: &[bool],
    rng: &mut ChaCha8Rng,
) -> Option<(LesionRecord, Vec<usize>)> {
    let m = g.h.min(g.w).min(g.d) as f64;
    let (flo, fhi) = class.radius_fraction();
    let dims = [g.h, g.w, g.d];
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let radii: [f64; 3] = std::array::from_fn(|_| rng.gen_range(flo * m..=fhi * m).max(0.75));
        let centroid: [f64; 3] = std::array::from_fn(|a| {
            let margin = radii[a] + 1.0;
            let span = dims[a] as f64 - 1.0 - 2.0 * margin;
            if span <= 0.0 {
                (dims[a] as f64 - 1.0) / 2.0
            } else {
                margin + rng.gen::<f64>() * span
            }
        });
        let lo: [usize; 3] =
            std::array::from_fn(|a| (centroid[a] - radii[a]).floor().max(0.0) as usize);
        let hi: [usize; 3] =
            std::array::from_fn(|a| ((centroid[a] + radii[a]).ceil() as usize).min(dims[a] - 1));
        let mut voxels = Vec::new();
        for i in lo[0]..=hi[0] {
            for j in lo[1]..=hi[1] {
                for k in lo[2]..=hi[2] {
                    let p = [i as f64, j as f64, k as f64];
                    let q: f64 = (0..3)
                        .map(|a| ((p[a] - centroid[a]) / radii[a]).powi(2))
                        .sum();
                    if q <= 1.0 {
                        voxels.push(g.idx(i, j, k));
                    }
                }
            }
        }
        if voxels.is_empty() || touches(g, &voxels, occupied) || !single_component(g, &voxels) {
            continue;
        }
        let record = LesionRecord {
            centroid,
            radii,
            voxels: voxels.len(),
            size_class: class,
        };
        return Some((record, voxels));
    }
    None
}

fn touches(g: &Grid, voxels: &[usize], occupied: &[bool]) -> bool {
    voxels.iter().any(|&v| {
        let (i, j, k) = (v / (g.w * g.d), (v / g.d) % g.w, v % g.d);
        neighborhood(g, i, j, k).any(|n| occupied[n])
    })
}

fn neighborhood(g: &Grid, i: usize, j: usize, k: usize) -> impl Iterator<Item = usize> + '_ {
    let r = |c: usize, n: usize| c.saturating_sub(1)..=(c + 1).min(n - 1);
    r(i, g.h).flat_map(move |a| r(j, g.w).flat_map(move |b| r(k, g.d).map(move |c| g.idx(a, b, c))))
}

fn single_component(g: &Grid, voxels: &[usize]) -> bool {
    let mut mask = vec![false; g.len()];
    voxels.iter().for_each(|&v| mask[v] = true);
    components(&mask, [g.h, g.w, g.d], Connectivity::TwentySix).len() == 1
}

/// Generates case `index` of a dataset. Depends only on the config and index.
pub fn generate_case(cfg: &SynthConfig, index: usize) -> Result<SynthCase> {
    cfg.validate()?;
    let seed = seeds::derive(cfg.seed, seeds::STREAM_CASE, index as u64);
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
    let [h, w, d] = cfg.shape;
    let g = Grid { h, w, d };
    let n = g.len();

    let label = rng.gen::<f64>() < cfg.prevalence;
    let count = if label {
        rng.gen_range(1..=cfg.max_lesions)
    } else {
        0
    };
    let mut occupied = vec![false; n];
    let mut lesions = Vec::with_capacity(count);
    for li in 0..count {
        let class = sample_class(&cfg.size_mix, &mut rng);
        let (rec, voxels) = place_lesion(&g, class, &occupied, &mut rng).ok_or_else(|| {
            Error::Placement(format!(
                "case {index}: could not place {class:?} lesion {} of {count} in a {h}x{w}x{d} grid after {MAX_PLACEMENT_ATTEMPTS} attempts",
                li + 1
            ))
        })?;
        voxels.iter().for_each(|&v| occupied[v] = true);
        lesions.push(rec);
    }

    // Background: one shared and one private smooth field per channel.
    let shared = smooth_noise(&g, &mut rng);
    let private: Vec<Vec<f64>> = (0..CHANNELS).map(|_| smooth_noise(&g, &mut rng)).collect();
    let gland_r: [f64; 3] = std::array::from_fn(|a| 0.35 * cfg.shape[a] as f64);
    let gland_c: [f64; 3] = std::array::from_fn(|a| (cfg.shape[a] as f64 - 1.0) / 2.0);
    let gland_gain = [0.6, 0.3, 0.4];
    let lesion_gain = [-0.4, 1.0, -0.8];
    let mut volume = vec![0.0; CHANNELS * n];
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let p = [i as f64, j as f64, k as f64];
                let v = g.idx(i, j, k);
                let q: f64 = (0..3)
                    .map(|a| ((p[a] - gland_c[a]) / gland_r[a]).powi(2))
                    .sum();
                let gland = 1.0 / (1.0 + ((q.sqrt() - 1.0) * 6.0).exp());
                let mut bump = 0.0f64;
                for l in &lesions {
                    // Gaussian with half maximum on the recorded radii.
                    let e: f64 = (0..3)
                        .map(|a| ((p[a] - l.centroid[a]) / l.radii[a]).powi(2))
                        .sum();
                    bump = bump.max((-(std::f64::consts::LN_2) * e).exp());
                }
                for c in 0..CHANNELS {
                    volume[c * n + v] = 0.5 * shared[v]
                        + 0.5 * private[c][v]
                        + gland_gain[c] * gland
                        + cfg.contrast * lesion_gain[c] * bump;
                }
            }
        }
    }
    let volume = zscore_normalize(&Tensor::new(vec![CHANNELS, h, w, d], volume)?);
    let mask = Tensor::new(
        vec![h, w, d],
        occupied.iter().map(|&o| o as u8 as f64).collect(),
    )?;
    Ok(SynthCase {
        index,
        seed,
        volume,
        mask,
        lesions,
        label,
        voxel_volume_mm3: cfg.voxel_volume_mm3,
    })
}

/// All cases of a dataset, generated in parallel (results do not depend on
/// the thread count).
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<SynthCase>> {
    cfg.validate()?;
    (0..cfg.n_cases)
        .into_par_iter()
        .map(|i| generate_case(cfg, i))
        .collect()
}

// ---- case files ------------------------------------------------------------

pub const CASE_MAGIC: &[u8; 4] = b"SPDA";
pub const CASE_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CaseHeader {
    index: usize,
    seed: u64,
    shape: [usize; 4],
    label: bool,
    voxel_volume_mm3: f64,
    lesions: Vec<LesionRecord>,
}

pub fn encode_case(case: &SynthCase) -> Result<Vec<u8>> {
    let s = case.volume.shape();
    let header = CaseHeader {
        index: case.index,
        seed: case.seed,
        shape: [s[0], s[1], s[2], s[3]],
        label: case.label,
        voxel_volume_mm3: case.voxel_volume_mm3,
        lesions: case.lesions.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out =
        Vec::with_capacity(10 + json.len() + 8 * case.volume.len() + case.mask.len() / 8 + 5);
    out.extend_from_slice(CASE_MAGIC);
    out.extend_from_slice(&CASE_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in case.volume.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut bits = vec![0u8; case.mask.len().div_ceil(8)];
    for (i, &m) in case.mask.data().iter().enumerate() {
        if m != 0.0 {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&bits);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_case(bytes: &[u8]) -> Result<SynthCase> {
    let mut buf = bytes;
    if take(&mut buf, 4, "magic")? != CASE_MAGIC {
        return Err(Error::Corrupt("not a case file".into()));
    }
    let version = u16::from_le_bytes(take(&mut buf, 2, "version")?.try_into().unwrap());
    if version != CASE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CASE_VERSION,
        });
    }
    let hlen = u32::from_le_bytes(take(&mut buf, 4, "header length")?.try_into().unwrap()) as usize;
    let header: CaseHeader = serde_json::from_slice(take(&mut buf, hlen, "header")?)
        .map_err(|e| Error::Corrupt(format!("unreadable case header: {e}")))?;
    let n: usize = header.shape.iter().product();
    let spatial = n / header.shape[0].max(1);
    let raw = take(&mut buf, 8 * n, "volume")?;
    let bits = take(&mut buf, spatial.div_ceil(8), "mask")?;
    let crc = take(&mut buf, 4, "checksum")?;
    if !buf.is_empty() {
        return Err(Error::Corrupt(format!("{} trailing bytes", buf.len())));
    }
    let body = &bytes[..bytes.len() - 4];
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(Error::Corrupt("case checksum mismatch".into()));
    }
    let volume = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mask = (0..spatial)
        .map(|i| ((bits[i / 8] >> (i % 8)) & 1) as f64)
        .collect();
    let [c, h, w, d] = header.shape;
    Ok(SynthCase {
        index: header.index,
        seed: header.seed,
        volume: Tensor::new(vec![c, h, w, d], volume)?,
        mask: Tensor::new(vec![h, w, d], mask)?,
        lesions: header.lesions,
        label: header.label,
        voxel_volume_mm3: header.voxel_volume_mm3,
    })
}

pub fn save_case(path: &Path, case: &SynthCase) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_case(case)?)?;
    Ok(())
}

pub fn load_case(path: &Path) -> Result<SynthCase> {
    decode_case(&fs::read(path)?).map_err(|e| match e {
        Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
        other => other,
    })
}

// ---- dataset directories -----------------------------------------------------

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CASES_DIR: &str = "cases";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub label: bool,
    pub lesions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub master_seed: u64,
    pub generator: SynthConfig,
    /// Caller configuration echoed for provenance.
    pub run_config: serde_json::Value,
    pub cases: Vec<ManifestEntry>,
}

pub fn case_file_name(index: usize) -> String {
    format!("case_{index:05}.spda")
}

/// Writes `cases/case_%05d.spda` files and `manifest.json` under `dir`.
/// A non-empty `dir` is an error unless `force` is set, in which case its
/// previous dataset files are replaced.
pub fn write_dataset(
    dir: &Path,
    cfg: &SynthConfig,
    run_config: serde_json::Value,
    force: bool,
) -> Result<Manifest> {
    cfg.validate()?;
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        if !force {
            return Err(Error::Config(format!(
                "{} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
        let cases = dir.join(CASES_DIR);
        if cases.exists() {
            fs::remove_dir_all(&cases)?;
        }
    }
    let cases_dir = dir.join(CASES_DIR);
    fs::create_dir_all(&cases_dir)?;
    let cases = generate_dataset(cfg)?;
    let mut entries = Vec::with_capacity(cases.len());
    for c in &cases {
        let file = case_file_name(c.index);
        save_case(&cases_dir.join(&file), c)?;
        entries.push(ManifestEntry {
            file: format!("{CASES_DIR}/{file}"),
            label: c.label,
            lesions: c.lesions.len(),
        });
    }
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        master_seed: cfg.seed,
        generator: cfg.clone(),
        run_config,
        cases: entries,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?)
}

/// Case files under `dir/cases`, in lexicographic order.
pub fn list_cases(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir.join(CASES_DIR))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "spda"));
    files.sort();
    Ok(files)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SynthCase>> {
    list_cases(dir)?.iter().map(|p| load_case(p)).collect()
}
