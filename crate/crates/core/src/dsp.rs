//! STFT analysis/synthesis, ratio masks and the mixture-consistency projection.
//!
//! Spectra are one-sided (`fft_len / 2 + 1` bins) and stored frames-major.
//! Signals are reflect-padded by half a window on each edge, so a length-`L`
//! signal yields `⌈L / hop⌉` frames. Synthesis is weighted overlap-add
//! normalised by the summed squared window, which makes `istft ∘ stft` the
//! identity for any hop that keeps every sample covered.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bins whose summed magnitude falls below this receive a uniform mask.
pub const MASK_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DspError {
    #[error("invalid STFT config: {0}")]
    InvalidConfig(String),
    #[error("signal of {len} samples is shorter than the {min}-sample window")]
    TooShort { len: usize, min: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite input")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, DspError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop: usize,
    pub fft_len: usize,
}

impl StftConfig {
    /// 32 ms Hann windows at 16 kHz with a quarter-window hop.
    pub fn paper() -> Self {
        Self {
            sample_rate: 16_000,
            window_len: 512,
            hop: 128,
            fft_len: 512,
        }
    }

    /// 32 ms windows at 8 kHz.
    pub fn desk() -> Self {
        Self {
            sample_rate: 8_000,
            window_len: 256,
            hop: 64,
            fft_len: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DspError::InvalidConfig(m.to_string()));
        if self.window_len < 2 || self.window_len % 2 != 0 {
            return bad("window_len must be even and >= 2");
        }
        if self.hop == 0 || self.window_len % self.hop != 0 {
            return bad("hop must divide window_len");
        }
        if self.hop > self.window_len / 2 {
            return bad("hop larger than half a window leaves samples uncovered");
        }
        if self.fft_len < self.window_len || self.fft_len % 2 != 0 {
            return bad("fft_len must be even and >= window_len");
        }
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    pub fn frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    /// Periodic Hann window.
    pub fn window(&self) -> Vec<f64> {
        let n = self.window_len as f64;
        (0..self.window_len)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos())
            .collect()
    }
}

/// One-sided complex spectrogram, frames-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpec {
    pub frames: usize,
    pub bins: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexSpec {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            frames,
            bins,
            re: vec![0.0; frames * bins],
            im: vec![0.0; frames * bins],
        }
    }

    pub fn magnitude(&self) -> MagSpec {
        MagSpec {
            frames: self.frames,
            bins: self.bins,
            data: self.re.iter().zip(&self.im).map(|(r, i)| r.hypot(*i)).collect(),
        }
    }

    /// `a·self + b·other`.
    pub fn axpby(&self, a: f64, other: &ComplexSpec, b: f64) -> Result<ComplexSpec> {
        if self.frames != other.frames || self.bins != other.bins {
            return Err(DspError::ShapeMismatch("spectrogram extents differ".into()));
        }
        let comb = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| a * p + b * q).collect();
        Ok(ComplexSpec {
            frames: self.frames,
            bins: self.bins,
            re: comb(&self.re, &other.re),
            im: comb(&self.im, &other.im),
        })
    }
}

/// Real frames × bins matrix (magnitudes).
#[derive(Debug, Clone, PartialEq)]
pub struct MagSpec {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

/// `K` stacked frames × bins masks, source axis leading.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub sources: usize,
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

impl Mask {
    pub fn plane(&self, k: usize) -> &[f64] {
        let p = self.frames * self.bins;
        &self.data[k * p..(k + 1) * p]
    }
}

fn reflect_index(j: isize, len: usize) -> usize {
    let last = len as isize - 1;
    let mut j = j;
    loop {
        if j < 0 {
            j = -j;
        } else if j > last {
            j = 2 * last - j;
        } else {
            return j as usize;
        }
    }
}

/// Forward transform.
pub fn stft(x: &[f64], cfg: &StftConfig) -> Result<ComplexSpec> {
    cfg.validate()?;
    if x.len() < cfg.window_len {
        return Err(DspError::TooShort {
            len: x.len(),
            min: cfg.window_len,
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(DspError::NonFinite);
    }
    let win = cfg.window();
    let fft = FftPlanner::new().plan_fft_forward(cfg.fft_len);
    let frames = cfg.frames(x.len());
    let bins = cfg.bins();
    let half = (cfg.window_len / 2) as isize;
    let mut spec = ComplexSpec::zeros(frames, bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_len];
    for t in 0..frames {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (n, w) in win.iter().enumerate() {
            let j = (t * cfg.hop + n) as isize - half;
            buf[n].re = w * x[reflect_index(j, x.len())];
        }
        fft.process(&mut buf);
        for f in 0..bins {
            spec.re[t * bins + f] = buf[f].re;
            spec.im[t * bins + f] = buf[f].im;
        }
    }
    Ok(spec)
}

/// Precomputed synthesis operator for a fixed output length.
///
/// `inverse` is the overlap-add inverse; `adjoint` is its exact transpose,
/// used as the vector-Jacobian product of the differentiable iSTFT.
pub struct Synthesis {
    cfg: StftConfig,
    out_len: usize,
    window: Vec<f64>,
    inv_norm: Vec<f64>,
    ifft: Arc<dyn Fft<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl Synthesis {
    pub fn new(cfg: &StftConfig, out_len: usize) -> Self {
        let window = cfg.window();
        let frames = cfg.frames(out_len);
        let half = cfg.window_len / 2;
        let mut wsum = vec![0.0; out_len];
        for t in 0..frames {
            for (n, w) in window.iter().enumerate() {
                let j = (t * cfg.hop + n) as isize - half as isize;
                if j >= 0 && (j as usize) < out_len {
                    wsum[j as usize] += w * w;
                }
            }
        }
        let inv_norm = wsum.iter().map(|&s| if s > 1e-10 { 1.0 / s } else { 0.0 }).collect();
        let mut planner = FftPlanner::new();
        Self {
            cfg: cfg.clone(),
            out_len,
            window,
            inv_norm,
            ifft: planner.plan_fft_inverse(cfg.fft_len),
            fft: planner.plan_fft_forward(cfg.fft_len),
        }
    }

    pub fn frames(&self) -> usize {
        self.cfg.frames(self.out_len)
    }

    /// Overlap-add inverse of frames-major real/imaginary planes.
    pub fn inverse(&self, re: &[f64], im: &[f64]) -> Vec<f64> {
        let n = self.cfg.fft_len;
        let bins = self.cfg.bins();
        let half = self.cfg.window_len / 2;
        let mut out = vec![0.0; self.out_len];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..self.frames() {
            let r = &re[t * bins..(t + 1) * bins];
            let i = &im[t * bins..(t + 1) * bins];
            buf[0] = Complex64::new(r[0], 0.0);
            buf[n / 2] = Complex64::new(r[n / 2], 0.0);
            for f in 1..n / 2 {
                buf[f] = Complex64::new(r[f], i[f]);
                buf[n - f] = Complex64::new(r[f], -i[f]);
            }
            self.ifft.process(&mut buf);
            for (k, w) in self.window.iter().enumerate() {
                let j = (t * self.cfg.hop + k) as isize - half as isize;
                if j >= 0 && (j as usize) < self.out_len {
                    let j = j as usize;
                    out[j] += w * buf[k].re / n as f64 * self.inv_norm[j];
                }
            }
        }
        out
    }

    /// Transpose of [`Synthesis::inverse`], accumulated into `dre`/`dim`.
    pub fn adjoint(&self, g: &[f64], dre: &mut [f64], dim: &mut [f64]) {
        let n = self.cfg.fft_len;
        let bins = self.cfg.bins();
        let half = self.cfg.window_len / 2;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..self.frames() {
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (k, w) in self.window.iter().enumerate() {
                let j = (t * self.cfg.hop + k) as isize - half as isize;
                if j >= 0 && (j as usize) < self.out_len {
                    let j = j as usize;
                    buf[k].re = w * g[j] * self.inv_norm[j];
                }
            }
            self.fft.process(&mut buf);
            let r = &mut dre[t * bins..(t + 1) * bins];
            let i = &mut dim[t * bins..(t + 1) * bins];
            for f in 0..bins {
                let edge = f == 0 || f == n / 2;
                let c = if edge { 1.0 } else { 2.0 } / n as f64;
                r[f] += c * buf[f].re;
                if !edge {
                    i[f] += c * buf[f].im;
                }
            }
        }
    }
}

/// Inverse transform, truncated to `out_len` samples.
pub fn istft(spec: &ComplexSpec, cfg: &StftConfig, out_len: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    if spec.bins != cfg.bins() {
        return Err(DspError::ShapeMismatch(format!(
            "{} bins, config expects {}",
            spec.bins,
            cfg.bins()
        )));
    }
    if spec.frames != cfg.frames(out_len) {
        return Err(DspError::ShapeMismatch(format!(
            "{} frames cannot synthesise {out_len} samples ({} expected)",
            spec.frames,
            cfg.frames(out_len)
        )));
    }
    if spec.re.len() != spec.frames * spec.bins || spec.im.len() != spec.re.len() {
        return Err(DspError::ShapeMismatch("plane length disagrees with extents".into()));
    }
    Ok(Synthesis::new(cfg, out_len).inverse(&spec.re, &spec.im))
}

/// `R_k = |S_k| / Σ_j |S_j|`, uniform `1/K` where the denominator vanishes.
pub fn ratio_masks(mags: &[MagSpec]) -> Result<Mask> {
    let first = mags
        .first()
        .ok_or_else(|| DspError::ShapeMismatch("need at least one source".into()))?;
    let (frames, bins) = (first.frames, first.bins);
    if mags.iter().any(|m| m.frames != frames || m.bins != bins || m.data.len() != frames * bins) {
        return Err(DspError::ShapeMismatch("magnitude spectrograms differ in shape".into()));
    }
    let k = mags.len();
    let plane = frames * bins;
    let mut data = vec![0.0; k * plane];
    for p in 0..plane {
        let total: f64 = mags.iter().map(|m| m.data[p]).sum();
        for (s, m) in mags.iter().enumerate() {
            data[s * plane + p] = if total < MASK_EPS {
                1.0 / k as f64
            } else {
                m.data[p] / total
            };
        }
    }
    Ok(Mask {
        sources: k,
        frames,
        bins,
        data,
    })
}

/// `Ŝ_k = M ⊙ R_k` for every source plane.
pub fn apply_mask(mix: &ComplexSpec, masks: &Mask) -> Result<Vec<ComplexSpec>> {
    if mix.frames != masks.frames || mix.bins != masks.bins {
        return Err(DspError::ShapeMismatch(format!(
            "mix {}x{} vs mask {}x{}",
            mix.frames, mix.bins, masks.frames, masks.bins
        )));
    }
    Ok((0..masks.sources)
        .map(|k| {
            let r = masks.plane(k);
            ComplexSpec {
                frames: mix.frames,
                bins: mix.bins,
                re: mix.re.iter().zip(r).map(|(a, w)| a * w).collect(),
                im: mix.im.iter().zip(r).map(|(a, w)| a * w).collect(),
            }
        })
        .collect())
}

/// Distribute the residual `m − Σ ŝ_j` equally over the estimates.
pub fn mixture_consistency(estimates: &[Vec<f64>], mix: &[f64]) -> Result<Vec<Vec<f64>>> {
    let k = estimates.len();
    if k == 0 {
        return Err(DspError::ShapeMismatch("no estimates".into()));
    }
    if estimates.iter().any(|e| e.len() != mix.len()) {
        return Err(DspError::ShapeMismatch("estimate and mix lengths differ".into()));
    }
    let residual: Vec<f64> = (0..mix.len())
        .map(|i| (mix[i] - estimates.iter().map(|e| e[i]).sum::<f64>()) / k as f64)
        .collect();
    Ok(estimates
        .iter()
        .map(|e| e.iter().zip(&residual).map(|(a, r)| a + r).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Direct O(N²) DFT of one frame, independent of the FFT path.
    fn dft_mag(frame: &[f64], bins: usize) -> Vec<f64> {
        let n = frame.len() as f64;
        (0..bins)
            .map(|f| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, x) in frame.iter().enumerate() {
                    let th = -2.0 * PI * f as f64 * i as f64 / n;
                    re += x * th.cos();
                    im += x * th.sin();
                }
                re.hypot(im)
            })
            .collect()
    }

    #[test]
    fn paper_geometry() {
        let cfg = StftConfig::paper();
        let x = noise(160_000, 1);
        let s = stft(&x, &cfg).unwrap();
        assert_eq!(s.frames, 1250);
        assert_eq!(s.bins, 257);
    }

    #[test]
    fn zeros_in_zeros_out() {
        let cfg = StftConfig::desk();
        let s = stft(&vec![0.0; 1000], &cfg).unwrap();
        assert!(s.re.iter().chain(&s.im).all(|&v| v == 0.0));
        let y = istft(&ComplexSpec::zeros(s.frames, s.bins), &cfg, 1000).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sinusoid_peaks_at_expected_bin() {
        let cfg = StftConfig {
            sample_rate: 16_000,
            window_len: 512,
            hop: 128,
            fft_len: 512,
        };
        let x: Vec<f64> = (0..8000)
            .map(|i| (2.0 * PI * 1000.0 * i as f64 / 16_000.0).sin())
            .collect();
        let s = stft(&x, &cfg).unwrap();
        let mag = s.magnitude();
        let win = cfg.window();
        for t in 4..s.frames - 4 {
            let row = &mag.data[t * s.bins..(t + 1) * s.bins];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, 32);
            // cross-check against a direct DFT of the same windowed frame
            let start = t * cfg.hop - cfg.window_len / 2;
            let frame: Vec<f64> = (0..512).map(|n| win[n] * x[start + n]).collect();
            let direct = dft_mag(&frame, s.bins);
            for f in 0..s.bins {
                assert!((direct[f] - row[f]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn short_signal_rejected() {
        let cfg = StftConfig::desk();
        assert!(matches!(
            stft(&vec![0.0; 255], &cfg),
            Err(DspError::TooShort { len: 255, min: 256 })
        ));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = StftConfig::desk();
        let spec = ComplexSpec::zeros(10, cfg.bins());
        assert!(istft(&spec, &cfg, 1000).is_err());
        let spec = ComplexSpec::zeros(16, 100);
        assert!(istft(&spec, &cfg, 1000).is_err());
    }

    #[test]
    fn round_trip_and_linearity() {
        let cfg = StftConfig::desk();
        for (len, seed) in [(256, 3), (1000, 4), (8000, 5), (777, 6)] {
            let x = noise(len, seed);
            let y = istft(&stft(&x, &cfg).unwrap(), &cfg, len).unwrap();
            let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-8, "len {len}: {err}");
        }
        let (x, z) = (noise(2000, 7), noise(2000, 8));
        let (a, b) = (0.7, -1.9);
        let lhs = stft(&x.iter().zip(&z).map(|(p, q)| a * p + b * q).collect::<Vec<_>>(), &cfg).unwrap();
        let rhs = stft(&x, &cfg).unwrap().axpby(a, &stft(&z, &cfg).unwrap(), b).unwrap();
        for (p, q) in lhs.re.iter().chain(&lhs.im).zip(rhs.re.iter().chain(&rhs.im)) {
            assert!((p - q).abs() < 1e-9);
        }
        let s1 = stft(&x, &cfg).unwrap();
        let s2 = stft(&z, &cfg).unwrap();
        let comb = istft(&s1.axpby(a, &s2, b).unwrap(), &cfg, 2000).unwrap();
        let y1 = istft(&s1, &cfg, 2000).unwrap();
        let y2 = istft(&s2, &cfg, 2000).unwrap();
        for i in 0..2000 {
            assert!((comb[i] - (a * y1[i] + b * y2[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn adjoint_matches_inner_product() {
        // <A x, y> == <x, Aᵀ y> for the synthesis operator
        let cfg = StftConfig {
            sample_rate: 8000,
            window_len: 32,
            hop: 8,
            fft_len: 64,
        };
        let len = 200;
        let syn = Synthesis::new(&cfg, len);
        let plane = syn.frames() * cfg.bins();
        let re = noise(plane, 10);
        let mut im = noise(plane, 11);
        let y = noise(len, 12);
        // imaginary parts at DC and Nyquist are ignored by the inverse
        for t in 0..syn.frames() {
            im[t * cfg.bins()] = 0.0;
            im[t * cfg.bins() + cfg.bins() - 1] = 0.0;
        }
        let ax = syn.inverse(&re, &im);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut dre = vec![0.0; plane];
        let mut dim = vec![0.0; plane];
        syn.adjoint(&y, &mut dre, &mut dim);
        let rhs: f64 = re.iter().zip(&dre).chain(im.iter().zip(&dim)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn mask_rules() {
        let m = MagSpec {
            frames: 2,
            bins: 2,
            data: vec![1.0, 0.0, 3.0, 2.0],
        };
        let r = ratio_masks(&[m.clone(), m.clone()]).unwrap();
        assert!(r.data.iter().all(|&v| v == 0.5));
        let zero = MagSpec {
            frames: 1,
            bins: 1,
            data: vec![0.0],
        };
        let r = ratio_masks(&[zero.clone(), zero.clone(), zero.clone(), zero]).unwrap();
        assert!(r.data.iter().all(|&v| v == 0.25));
        let bad = MagSpec {
            frames: 1,
            bins: 3,
            data: vec![0.0; 3],
        };
        assert!(ratio_masks(&[m, bad]).is_err());
    }

    #[test]
    fn identity_and_zero_masks() {
        let cfg = StftConfig::desk();
        let mix = stft(&noise(1000, 20), &cfg).unwrap();
        let plane = mix.frames * mix.bins;
        let mask = Mask {
            sources: 2,
            frames: mix.frames,
            bins: mix.bins,
            data: [vec![1.0; plane], vec![0.0; plane]].concat(),
        };
        let out = apply_mask(&mix, &mask).unwrap();
        assert_eq!(out[0], mix);
        assert!(out[1].re.iter().chain(&out[1].im).all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_masks_preserve_mixture_magnitude() {
        let cfg = StftConfig::desk();
        let mix = stft(&noise(1000, 21), &cfg).unwrap();
        let plane = mix.frames * mix.bins;
        let logits = noise(4 * plane, 22);
        let mut data = vec![0.0; 4 * plane];
        for p in 0..plane {
            let z: f64 = (0..4).map(|k| logits[k * plane + p].exp()).sum();
            for k in 0..4 {
                data[k * plane + p] = logits[k * plane + p].exp() / z;
            }
        }
        let mask = Mask {
            sources: 4,
            frames: mix.frames,
            bins: mix.bins,
            data,
        };
        let est = apply_mask(&mix, &mask).unwrap();
        let mags: Vec<MagSpec> = est.iter().map(ComplexSpec::magnitude).collect();
        let m = mix.magnitude();
        for p in 0..plane {
            let s: f64 = mags.iter().map(|x| x.data[p]).sum();
            assert!((s - m.data[p]).abs() < 1e-6);
        }
    }

    #[test]
    fn mixture_consistency_cases() {
        let mix = noise(64, 30);
        let zeros = vec![vec![0.0; 64]; 4];
        let proj = mixture_consistency(&zeros, &mix).unwrap();
        for e in &proj {
            for (a, b) in e.iter().zip(&mix) {
                assert!((a - b / 4.0).abs() < 1e-15);
            }
        }
        let fixed = vec![mix.iter().map(|v| v * 0.25).collect::<Vec<_>>(), mix.iter().map(|v| v * 0.75).collect()];
        let again = mixture_consistency(&fixed, &mix).unwrap();
        for (a, b) in again.iter().flatten().zip(fixed.iter().flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn ratio_masks_are_stochastic(vals in proptest::collection::vec(0.0f64..10.0, 4 * 6)) {
            let mags: Vec<MagSpec> = vals
                .chunks(6)
                .map(|c| MagSpec { frames: 2, bins: 3, data: c.to_vec() })
                .collect();
            let r = ratio_masks(&mags).unwrap();
            for p in 0..6 {
                let s: f64 = (0..4).map(|k| r.plane(k)[p]).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!((0..4).all(|k| (0.0..=1.0).contains(&r.plane(k)[p])));
            }
        }

        #[test]
        fn projection_is_exact_and_idempotent(seed in 0u64..1000, k in 1usize..5) {
            let mix = noise(50, seed);
            let est: Vec<Vec<f64>> = (0..k).map(|j| noise(50, seed * 7 + j as u64 + 1)).collect();
            let once = mixture_consistency(&est, &mix).unwrap();
            let twice = mixture_consistency(&once, &mix).unwrap();
            for i in 0..50 {
                let s: f64 = once.iter().map(|e| e[i]).sum();
                prop_assert!((s - mix[i]).abs() < 1e-9);
            }
            for (a, b) in once.iter().flatten().zip(twice.iter().flatten()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
