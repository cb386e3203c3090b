//! Scale-invariant SNR and the separation evaluation protocol.
//!
//! Estimates are aligned to targets by the permutation maximising the summed
//! SI-SNR. Pairs whose target is silent are then dropped. One-source mixes
//! report SI-SNR_S; mixes with two or more active sources report the
//! per-source improvement over the unprocessed mix, SI-SNR_I.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SeparationExample;
use crate::dsp::{self, StftConfig};
use crate::perm::{self, Direction, PairwiseLossKind};

/// Regulariser in both the projection coefficient and the ratio.
pub const SI_SNR_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("every target is silent; the example is malformed")]
    AllSilent,
    #[error("{0}")]
    Perm(#[from] perm::PermError),
    #[error("{0}")]
    Dsp(#[from] dsp::DspError),
    #[error("no records to aggregate")]
    Empty,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `10·log10((‖αs‖² + ε) / (‖αs − ŝ‖² + ε))` with `α = (sᵀŝ + ε)/(‖s‖² + ε)`.
pub fn si_snr(target: &[f64], estimate: &[f64]) -> f64 {
    let alpha = (dot(target, estimate) + SI_SNR_EPS) / (dot(target, target) + SI_SNR_EPS);
    let mut sig = 0.0;
    let mut err = 0.0;
    for (s, e) in target.iter().zip(estimate) {
        let p = alpha * s;
        sig += p * p;
        err += (p - e) * (p - e);
    }
    10.0 * ((sig + SI_SNR_EPS) / (err + SI_SNR_EPS)).log10()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceScore {
    pub target: usize,
    pub estimate: usize,
    pub si_snr: f64,
    /// SI-SNR of the unprocessed mix against this target.
    pub si_snr_mix: f64,
}

impl SourceScore {
    pub fn improvement(&self) -> f64 {
        self.si_snr - self.si_snr_mix
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub k_active: usize,
    pub permutation: Vec<usize>,
    /// Retained (non-silent target) pairs.
    pub sources: Vec<SourceScore>,
    pub discarded: usize,
}

pub fn eval_mixture<T: AsRef<[f64]>>(targets: &[T], estimates: &[T], mix: &[f64]) -> Result<MixtureRecord> {
    let p = perm::optimal_permutation(targets, estimates, PairwiseLossKind::NegSiSnr, None, Direction::Min)?;
    let mut sources = vec![];
    let mut discarded = 0;
    for (k, &j) in p.mapping.iter().enumerate() {
        let s = targets[k].as_ref();
        if perm::is_silent(s) {
            discarded += 1;
            continue;
        }
        sources.push(SourceScore {
            target: k,
            estimate: j,
            si_snr: si_snr(s, estimates[j].as_ref()),
            si_snr_mix: si_snr(s, mix),
        });
    }
    if sources.is_empty() {
        return Err(MetricsError::AllSilent);
    }
    Ok(MixtureRecord {
        id: None,
        k_active: sources.len(),
        permutation: p.mapping,
        sources,
        discarded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean SI-SNR over one-source mixes, dB.
    pub si_snr_s: Option<f64>,
    /// Mean SI-SNR improvement over retained pairs of multi-source mixes, dB.
    pub si_snr_i: Option<f64>,
    pub n_mixtures: usize,
    pub n_single_source: usize,
    pub n_multi_source: usize,
    pub n_multi_pairs: usize,
    pub n_discarded: usize,
    pub per_mixture: Vec<MixtureRecord>,
}

pub fn aggregate(records: &[MixtureRecord]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut single = vec![];
    let mut improvements = vec![];
    let mut n_multi = 0;
    for r in records {
        if r.k_active == 1 {
            single.push(r.sources[0].si_snr);
        } else {
            n_multi += 1;
            improvements.extend(r.sources.iter().map(SourceScore::improvement));
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(EvalReport {
        si_snr_s: mean(&single),
        si_snr_i: mean(&improvements),
        n_mixtures: records.len(),
        n_single_source: single.len(),
        n_multi_source: n_multi,
        n_multi_pairs: improvements.len(),
        n_discarded: records.iter().map(|r| r.discarded).sum(),
        per_mixture: records.to_vec(),
    })
}

/// Estimates from ground-truth ratio masks applied to the mix spectrogram.
pub fn ideal_mask_estimates(example: &SeparationExample, cfg: &StftConfig) -> Result<Vec<Vec<f64>>> {
    let mix = dsp::stft(&example.mix, cfg)?;
    let mags = example
        .sources
        .iter()
        .map(|s| Ok(dsp::stft(s, cfg)?.magnitude()))
        .collect::<Result<Vec<_>>>()?;
    let masks = dsp::ratio_masks(&mags)?;
    dsp::apply_mask(&mix, &masks)?
        .iter()
        .map(|spec| Ok(dsp::istft(spec, cfg, example.mix.len())?))
        .collect()
}

/// Oracle upper bound: evaluation of ideal ratio-mask separations.
pub fn ideal_mask_bound(examples: &[SeparationExample], cfg: &StftConfig) -> Result<EvalReport> {
    let records = examples
        .iter()
        .map(|ex| {
            let est = ideal_mask_estimates(ex, cfg)?;
            let mut r = eval_mixture(&ex.sources, &est, &ex.mix)?;
            r.id = Some(ex.id.clone());
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(&records)
}

/// Evaluation of the bypass estimator that returns the mix in every slot.
pub fn bypass_report(examples: &[SeparationExample]) -> Result<EvalReport> {
    let records = examples
        .iter()
        .map(|ex| {
            let est = vec![ex.mix.clone(); ex.sources.len()];
            let mut r = eval_mixture(&ex.sources, &est, &ex.mix)?;
            r.id = Some(ex.id.clone());
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(&records)
}
