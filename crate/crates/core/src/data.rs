//! Synthetic mixture generation and the on-disk dataset layout.
//!
//! A split directory holds `manifest.jsonl` plus one directory per example:
//! `<id>/mix.wav` and `<id>/sources/src_<k>.wav` for the active sources only.
//! Readers append silent targets up to the requested source count.
//!
//! Samples are kept on a 24-bit fixed-point grid, so the mix is the exact sum
//! of its sources both in memory and after a 32-bit float WAV round trip.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const GRID: f64 = (1u64 << 24) as f64;
const FADE_SECONDS: f64 = 0.01;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing file {0}")]
    Missing(PathBuf),
    #[error("corrupt wav {path}: {detail}")]
    CorruptWav { path: PathBuf, detail: String },
    #[error("{path}: sample rate {found} Hz, expected {expected} Hz")]
    SampleRate { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: {found} samples, expected {expected}")]
    Length { path: PathBuf, found: usize, expected: usize },
    #[error("manifest {path} line {line}: {detail}")]
    Manifest { path: PathBuf, line: usize, detail: String },
    #[error("example {id} has {found} active sources but only {k} slots")]
    TooManySources { id: String, found: usize, k: usize },
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationExample {
    pub id: String,
    pub mix: Vec<f64>,
    /// `K` targets; entries at and beyond `k_active` are all-zero.
    pub sources: Vec<Vec<f64>>,
    pub k_active: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceWeights {
    pub tone: f64,
    pub chirp: f64,
    pub band_noise: f64,
    pub am_tone: f64,
    pub click_train: f64,
}

impl Default for SourceWeights {
    fn default() -> Self {
        Self {
            tone: 1.0,
            chirp: 1.0,
            band_noise: 1.0,
            am_tone: 1.0,
            click_train: 1.0,
        }
    }
}

impl SourceWeights {
    fn as_array(&self) -> [f64; 5] {
        [self.tone, self.chirp, self.band_noise, self.am_tone, self.click_train]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Reverb {
    Off,
    /// White noise under an exponential envelope reaching −60 dB at `rt60`.
    Exponential { rt60_min: f64, rt60_max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub sample_rate: u32,
    pub duration: f64,
    /// Maximum active sources, also the number of stored targets.
    pub k_max: usize,
    pub weights: SourceWeights,
    pub reverb: Reverb,
    /// Per-source RMS level range in dB.
    pub level_db: [f64; 2],
    /// Give each active source its own non-overlapping frequency slot.
    pub disjoint_bands: bool,
    pub seed: u64,
}

impl GenConfig {
    /// One-second mixes at 8 kHz with up to four reverberant sources.
    pub fn desk() -> Self {
        Self {
            sample_rate: 8_000,
            duration: 1.0,
            k_max: 4,
            weights: SourceWeights::default(),
            reverb: Reverb::Exponential {
                rt60_min: 0.1,
                rt60_max: 0.4,
            },
            level_db: [-25.0, -5.0],
            disjoint_bands: false,
            seed: 0,
        }
    }

    /// Dry sources confined to disjoint frequency slots.
    pub fn disjoint_bands(k_max: usize) -> Self {
        Self {
            k_max,
            reverb: Reverb::Off,
            disjoint_bands: true,
            ..Self::desk()
        }
    }

    pub fn len(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self, min_len: usize) -> Result<()> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if self.sample_rate < 1000 {
            return bad(format!("sample_rate {} too low", self.sample_rate));
        }
        if !(self.duration > 0.0) || self.len() < min_len.max(1) {
            return bad(format!("{} samples is below the minimum {}", self.len(), min_len));
        }
        if self.k_max == 0 {
            return bad("k_max must be at least 1".into());
        }
        let w = self.weights.as_array();
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || !w.iter().any(|v| *v > 0.0) {
            return bad("source weights must be nonnegative with one positive".into());
        }
        if !(self.level_db[0] <= self.level_db[1]) || !self.level_db.iter().all(|v| v.is_finite()) {
            return bad("level_db must be an ordered finite range".into());
        }
        if let Reverb::Exponential { rt60_min, rt60_max } = self.reverb {
            if !(rt60_min > 0.0 && rt60_min <= rt60_max && rt60_max.is_finite()) {
                return bad("rt60 range must be positive and ordered".into());
            }
        }
        Ok(())
    }

    fn band_limits(&self) -> (f64, f64) {
        (100.0, 0.45 * self.sample_rate as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SourceType {
    Tone,
    Chirp,
    BandNoise,
    AmTone,
    ClickTrain,
}

const TYPES: [SourceType; 5] = [
    SourceType::Tone,
    SourceType::Chirp,
    SourceType::BandNoise,
    SourceType::AmTone,
    SourceType::ClickTrain,
];

fn pick_type(w: &SourceWeights, rng: &mut impl Rng) -> SourceType {
    let w = w.as_array();
    let total: f64 = w.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (t, &wt) in TYPES.iter().zip(&w) {
        if u < wt {
            return *t;
        }
        u -= wt;
    }
    TYPES[w.iter().rposition(|v| *v > 0.0).unwrap_or(0)]
}

/// Zeroes every FFT bin outside `[lo, hi]` Hz (circular filtering).
fn band_limit(x: &mut [f64], sr: f64, lo: f64, hi: f64) {
    let n = x.len();
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (i, c) in buf.iter_mut().enumerate() {
        let f = i.min(n - i) as f64 * sr / n as f64;
        if f < lo || f > hi {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    for (v, c) in x.iter_mut().zip(&buf) {
        *v = c.re / n as f64;
    }
}

/// Linear convolution truncated to the length of `x`.
fn convolve_truncated(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let pad = |v: &[f64]| {
        let mut b: Vec<Complex64> = v.iter().map(|&s| Complex64::new(s, 0.0)).collect();
        b.resize(n, Complex64::new(0.0, 0.0));
        b
    };
    let mut a = pad(x);
    let mut b = pad(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    planner.plan_fft_inverse(n).process(&mut a);
    a[..x.len()].iter().map(|c| c.re / n as f64).collect()
}

fn exponential_ir(sr: f64, rt60: f64, rng: &mut impl Rng) -> Vec<f64> {
    let len = (rt60 * sr).ceil() as usize;
    let decay = 6.9077552789821 / (rt60 * sr); // ln(1000): −60 dB at rt60
    let mut ir: Vec<f64> = (0..len)
        .map(|i| rng.random_range(-1.0..1.0) * (-decay * i as f64).exp() * 0.3)
        .collect();
    ir[0] = 1.0;
    ir
}

fn raw_source(kind: SourceType, n: usize, sr: f64, lo: f64, hi: f64, rng: &mut impl Rng) -> Vec<f64> {
    use std::f64::consts::TAU;
    let phase0 = rng.random_range(0.0..TAU);
    match kind {
        SourceType::Tone => {
            let f = rng.random_range(lo..=hi);
            (0..n).map(|i| (TAU * f * i as f64 / sr + phase0).sin()).collect()
        }
        SourceType::Chirp => {
            let f0 = rng.random_range(lo..=hi);
            let f1 = rng.random_range(lo..=hi);
            let dur = n as f64 / sr;
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    (TAU * (f0 * t + 0.5 * (f1 - f0) * t * t / dur) + phase0).sin()
                })
                .collect()
        }
        SourceType::BandNoise => (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        SourceType::AmTone => {
            let f = rng.random_range(lo..=hi);
            let rate = rng.random_range(1.0..6.0);
            let depth = rng.random_range(0.3..0.9);
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    (1.0 - depth * (0.5 + 0.5 * (TAU * rate * t).cos())) * (TAU * f * t + phase0).sin()
                })
                .collect()
        }
        SourceType::ClickTrain => {
            let rate = rng.random_range(2.0..12.0);
            let period = (sr / rate).max(1.0) as usize;
            let offset = rng.random_range(0..period.min(n / 4).max(1));
            let tau = 0.002 * sr;
            let mut x = vec![0.0; n];
            let mut start = offset;
            while start < n {
                for (j, v) in x[start..].iter_mut().take((8.0 * tau) as usize + 1).enumerate() {
                    *v += (-(j as f64) / tau).exp() * if j % 2 == 0 { 1.0 } else { -1.0 };
                }
                start += period;
            }
            x
        }
    }
}

/// Active segment covering at least half the signal, with raised-cosine fades.
fn apply_envelope(x: &mut [f64], sr: f64, rng: &mut impl Rng) {
    let n = x.len();
    let seg = rng.random_range(n / 2..=n);
    let start = rng.random_range(0..=n - seg);
    let fade = ((FADE_SECONDS * sr) as usize).min(seg / 2).max(1);
    for (i, v) in x.iter_mut().enumerate() {
        let g = if i < start || i >= start + seg {
            0.0
        } else {
            let d = (i - start).min(start + seg - 1 - i);
            if d >= fade {
                1.0
            } else {
                0.5 - 0.5 * (std::f64::consts::PI * d as f64 / fade as f64).cos()
            }
        };
        *v *= g;
    }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn quantize(x: f64) -> f64 {
    (x * GRID).round() / GRID
}

/// Draws one example. `rng` should be a fresh per-example stream.
pub fn synth_example(cfg: &GenConfig, id: impl Into<String>, rng: &mut impl Rng) -> SeparationExample {
    let n = cfg.len();
    let sr = cfg.sample_rate as f64;
    let k_active = rng.random_range(1..=cfg.k_max);
    let (f_lo, f_hi) = cfg.band_limits();
    let slots = if cfg.disjoint_bands {
        let mut s = rand::seq::index::sample(rng, 2 * cfg.k_max, k_active).into_vec();
        s.sort_unstable();
        s
    } else {
        vec![]
    };
    let mut active = Vec::with_capacity(k_active);
    for k in 0..k_active {
        let (lo, hi) = if cfg.disjoint_bands {
            let width = (f_hi - f_lo) / (2 * cfg.k_max) as f64;
            let edge = f_lo + slots[k] as f64 * width;
            (edge + 0.15 * width, edge + 0.85 * width)
        } else {
            let centre = (f_lo.ln() + rng.random_range(0.0..1.0) * (f_hi / f_lo).ln()).exp();
            let half = centre * rng.random_range(0.1..0.5);
            ((centre - half).max(f_lo), (centre + half).min(f_hi))
        };
        // A narrow band or a short clip can leave a draw with no energy.
        let mut x = vec![];
        for _ in 0..16 {
            let kind = pick_type(&cfg.weights, rng);
            x = raw_source(kind, n, sr, lo, hi, rng);
            apply_envelope(&mut x, sr, rng);
            band_limit(&mut x, sr, lo, hi);
            if rms(&x) > 1e-6 {
                break;
            }
        }
        if let Reverb::Exponential { rt60_min, rt60_max } = cfg.reverb {
            let ir = exponential_ir(sr, rng.random_range(rt60_min..=rt60_max), rng);
            x = convolve_truncated(&x, &ir);
        }
        let level = 10f64.powf(rng.random_range(cfg.level_db[0]..=cfg.level_db[1]) / 20.0);
        let r = rms(&x).max(1e-12);
        x.iter_mut().for_each(|v| *v *= level / r);
        active.push(x);
    }
    let mix: Vec<f64> = (0..n).map(|i| active.iter().map(|s| s[i]).sum()).collect();
    let peak = active
        .iter()
        .chain(std::iter::once(&mix))
        .flat_map(|s| s.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { 0.9 / peak } else { 1.0 };
    let mut sources: Vec<Vec<f64>> = active
        .into_iter()
        .map(|s| s.into_iter().map(|v| quantize(v * gain)).collect())
        .collect();
    sources.resize(cfg.k_max, vec![0.0; n]);
    let mix = (0..n).map(|i| sources.iter().map(|s| s[i]).sum()).collect();
    SeparationExample {
        id: id.into(),
        mix,
        sources,
        k_active,
    }
}

/// Per-example generator stream for `(seed, index)`.
pub fn example_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn seed_offset(self) -> u64 {
        self as u64
    }
}

/// Generates `count` examples of one split in memory.
pub fn generate_split(cfg: &GenConfig, split: Split, count: usize) -> Vec<SeparationExample> {
    let seed = cfg.seed.wrapping_add(split.seed_offset());
    (0..count)
        .map(|i| synth_example(cfg, format!("{}-{i:06}", split.name()), &mut example_rng(seed, i as u64)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub mix: String,
    pub sources: Vec<String>,
    pub sample_rate: u32,
    pub k_active: usize,
}

pub fn write_wav(path: &Path, x: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let wav_err = |e: hound::Error| match e {
        hound::Error::IoError(source) => DataError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => DataError::CorruptWav {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &v in x {
        w.write_sample(v as f32).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

/// Reads a mono 32-bit float WAV, returning samples and sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    if !path.exists() {
        return Err(DataError::Missing(path.to_path_buf()));
    }
    let corrupt = |detail: String| DataError::CorruptWav {
        path: path.to_path_buf(),
        detail,
    };
    let mut r = hound::WavReader::open(path).map_err(|e| corrupt(e.to_string()))?;
    let spec = r.spec();
    if spec.channels != 1 {
        return Err(corrupt(format!("{} channels, expected mono", spec.channels)));
    }
    let data: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => r
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| corrupt(e.to_string()))?,
        (hound::SampleFormat::Int, bits) if bits <= 32 => {
            let scale = (1u64 << (bits - 1)) as f64;
            r.samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| corrupt(e.to_string()))?
        }
        (fmt, bits) => return Err(corrupt(format!("unsupported sample format {fmt:?}/{bits}"))),
    };
    Ok((data, spec.sample_rate))
}

/// Writes `<dir>/<id>/mix.wav` and the active sources; returns the manifest line.
pub fn write_example(dir: &Path, ex: &SeparationExample, sample_rate: u32) -> Result<ManifestEntry> {
    let root = dir.join(&ex.id);
    let src_dir = root.join("sources");
    fs::create_dir_all(&src_dir).map_err(io_err(&src_dir))?;
    write_wav(&root.join("mix.wav"), &ex.mix, sample_rate)?;
    let mut sources = vec![];
    for (k, s) in ex.sources.iter().take(ex.k_active).enumerate() {
        let rel = format!("{}/sources/src_{k}.wav", ex.id);
        write_wav(&dir.join(&rel), s, sample_rate)?;
        sources.push(rel);
    }
    Ok(ManifestEntry {
        id: ex.id.clone(),
        mix: format!("{}/mix.wav", ex.id),
        sources,
        sample_rate,
        k_active: ex.k_active,
    })
}

/// Loads one manifest entry, padding with silent targets up to `k`.
pub fn read_example(dir: &Path, entry: &ManifestEntry, k: usize) -> Result<SeparationExample> {
    let load = |rel: &str| -> Result<Vec<f64>> {
        let path = dir.join(rel);
        let (x, sr) = read_wav(&path)?;
        if sr != entry.sample_rate {
            return Err(DataError::SampleRate {
                path,
                found: sr,
                expected: entry.sample_rate,
            });
        }
        Ok(x)
    };
    let mix = load(&entry.mix)?;
    if entry.sources.len() > k {
        return Err(DataError::TooManySources {
            id: entry.id.clone(),
            found: entry.sources.len(),
            k,
        });
    }
    let mut sources = vec![];
    for rel in &entry.sources {
        let s = load(rel)?;
        if s.len() != mix.len() {
            return Err(DataError::Length {
                path: dir.join(rel),
                found: s.len(),
                expected: mix.len(),
            });
        }
        sources.push(s);
    }
    let k_active = sources.len();
    sources.resize(k, vec![0.0; mix.len()]);
    Ok(SeparationExample {
        id: entry.id.clone(),
        mix,
        sources,
        k_active,
    })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for e in entries {
        let line = serde_json::to_string(e).expect("manifest entries serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    if !path.exists() {
        return Err(DataError::Missing(path.to_path_buf()));
    }
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = vec![];
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Loads every example listed in `<dir>/manifest.jsonl`.
pub fn load_split(dir: &Path, k: usize) -> Result<Vec<SeparationExample>> {
    read_manifest(&dir.join("manifest.jsonl"))?
        .iter()
        .map(|e| read_example(dir, e, k))
        .collect()
}

/// Writes train/val/test under `out`, one directory and manifest per split.
pub fn make_splits(cfg: &GenConfig, out: &Path, counts: [usize; 3]) -> Result<[Vec<ManifestEntry>; 3]> {
    cfg.validate(1)?;
    let mut manifests: [Vec<ManifestEntry>; 3] = Default::default();
    for (split, (&count, manifest)) in Split::ALL.iter().zip(counts.iter().zip(manifests.iter_mut())) {
        let dir = out.join(split.name());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let seed = cfg.seed.wrapping_add(split.seed_offset());
        for i in 0..count {
            let ex = synth_example(cfg, format!("{}-{i:06}", split.name()), &mut example_rng(seed, i as u64));
            manifest.push(write_example(&dir, &ex, cfg.sample_rate)?);
        }
        write_manifest(&dir.join("manifest.jsonl"), manifest)?;
    }
    Ok(manifests)
}
