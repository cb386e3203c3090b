//! Alternating adversarial training, Adam, checkpoints and model selection.
//!
//! Each step first updates every discriminator on its negated hinge loss
//! with the separator held fixed, then updates the separator against the
//! freshly updated discriminators (plus the weighted PIT term if enabled).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::SeparationExample;
use crate::dsp::{self, StftConfig};
use crate::losses::{self, Contribution, Kind, LambdaState};
use crate::metrics::{self, EvalReport};
use crate::models::{Discriminator, DiscriminatorSpec, Domain, ParamStore, Separator, SeparatorConfig};
use crate::perm::{self, FakeEntry, PairwiseLossKind};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {term} at step {step}")]
    NonFinite { term: String, step: u64 },
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Perm(#[from] perm::PermError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Dsp(#[from] dsp::DspError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {0}")]
    Checkpoint(String),
    #[error("dataset mismatch: {0}")]
    Dataset(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub discriminators: Vec<DiscriminatorSpec>,
    pub pit_enabled: bool,
    pub tau: f64,
    pub lambda: LambdaState,
}

impl Recipe {
    pub fn pit_only() -> Self {
        Self {
            discriminators: vec![],
            pit_enabled: true,
            tau: perm::DEFAULT_TAU,
            lambda: LambdaState::default(),
        }
    }

    pub fn adversarial(discriminators: Vec<DiscriminatorSpec>, pit_enabled: bool) -> Self {
        Self {
            discriminators,
            pit_enabled,
            ..Self::pit_only()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub separator: SeparatorConfig,
    pub recipe: Recipe,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub val_every: u64,
    pub seed: u64,
    pub precision: Precision,
    pub adam: AdamConfig,
    /// Apply the mixture-consistency projection before validation scoring.
    pub val_mixture_consistency: bool,
}

impl TrainConfig {
    pub fn desk(k: usize) -> Self {
        Self {
            separator: SeparatorConfig::desk(k),
            recipe: Recipe::pit_only(),
            lr: 1e-4,
            batch_size: 8,
            max_steps: 5000,
            val_every: 500,
            seed: 0,
            precision: Precision::F64,
            adam: AdamConfig::default(),
            val_mixture_consistency: true,
        }
    }

    pub fn paper(k: usize) -> Self {
        Self {
            separator: SeparatorConfig::paper(k),
            lr: 1e-4,
            batch_size: 128,
            ..Self::desk(k)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        self.separator.validate()?;
        self.recipe.lambda.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be finite and nonnegative", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.val_every == 0 {
            return bad("val_every must be at least 1".into());
        }
        if !self.recipe.pit_enabled && self.recipe.discriminators.is_empty() {
            return bad("recipe needs PIT or at least one discriminator".into());
        }
        if !(self.recipe.tau > 0.0) {
            return bad(format!("tau {} must be positive", self.recipe.tau));
        }
        for d in &self.recipe.discriminators {
            d.validate()?;
            if d.k != self.separator.k {
                return bad(format!("discriminator {} has K = {}, separator K = {}", d.name(), d.k, self.separator.k));
            }
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("adam betas must be in [0, 1) and eps positive".into());
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of `p` in place (`t ≥ 1`).
pub fn adam_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, cfg: &AdamConfig, t: u64) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        p[i] -= lr * mh / (vh.sqrt() + cfg.eps);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64, cfg: &AdamConfig) {
        self.t += 1;
        for (i, t) in params.tensors.iter_mut().enumerate() {
            adam_update(t.data_mut(), &grads[i], &mut self.m[i], &mut self.v[i], lr, cfg, self.t);
        }
    }
}

fn round_f32(p: &mut ParamStore) {
    for t in &mut p.tensors {
        t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

/// Models, optimizer moments and the λ state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub separator: Separator,
    pub discriminators: Vec<Discriminator>,
    pub sep_opt: Adam,
    pub d_opts: Vec<Adam>,
    pub lambda: LambdaState,
    pub step: u64,
    pub signal_len: usize,
}

/// Input dims a discriminator of `domain` sees for signals of `len` samples.
pub fn domain_dims(domain: Domain, stft: &StftConfig, len: usize) -> Vec<usize> {
    match domain {
        Domain::Wave => vec![len],
        Domain::Stft | Domain::Mask => vec![stft.frames(len), stft.bins()],
    }
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, signal_len: usize) -> Result<Self> {
        cfg.validate()?;
        let mut separator = Separator::new(cfg.separator.clone(), cfg.seed)?;
        let mut discriminators = cfg
            .recipe
            .discriminators
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let dims = domain_dims(s.domain, &cfg.separator.stft, signal_len);
                Discriminator::new(s.clone(), dims, cfg.seed.wrapping_add(1 + i as u64))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if cfg.precision == Precision::F32 {
            round_f32(&mut separator.params);
            discriminators.iter_mut().for_each(|d| round_f32(&mut d.params));
        }
        Ok(Self {
            sep_opt: Adam::new(&separator.params),
            d_opts: discriminators.iter().map(|d| Adam::new(&d.params)).collect(),
            separator,
            discriminators,
            lambda: cfg.recipe.lambda.clone(),
            step: 0,
            signal_len,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub mixes: Vec<Vec<f64>>,
    pub targets: Vec<Vec<Vec<f64>>>,
}

impl Batch {
    pub fn from_examples(examples: &[&SeparationExample]) -> Self {
        Self {
            mixes: examples.iter().map(|e| e.mix.clone()).collect(),
            targets: examples.iter().map(|e| e.sources.clone()).collect(),
        }
    }

    fn len(&self) -> usize {
        self.mixes.len()
    }
}

/// Ground-truth features of one domain for a batch.
#[derive(Debug, Clone)]
struct Features {
    dims: Vec<usize>,
    /// `[B, K, n]`
    targets: Vec<f64>,
    /// `[B, n]`: the waveform or `|M|`.
    mix: Vec<f64>,
}

impl Features {
    fn item_len(&self) -> usize {
        self.dims.iter().product()
    }

    fn target(&self, b: usize, k: usize, kk: usize) -> &[f64] {
        let n = self.item_len();
        &self.targets[(b * kk + k) * n..(b * kk + k + 1) * n]
    }

    fn mix(&self, b: usize) -> &[f64] {
        let n = self.item_len();
        &self.mix[b * n..(b + 1) * n]
    }
}

fn features(domain: Domain, batch: &Batch, stft: &StftConfig) -> Result<Features> {
    let len = batch.mixes[0].len();
    let dims = domain_dims(domain, stft, len);
    let mut targets = vec![];
    let mut mix = vec![];
    for (m, ts) in batch.mixes.iter().zip(&batch.targets) {
        match domain {
            Domain::Wave => {
                mix.extend_from_slice(m);
                ts.iter().for_each(|t| targets.extend_from_slice(t));
            }
            Domain::Stft | Domain::Mask => {
                mix.extend(dsp::stft(m, stft)?.magnitude().data);
                let mags = ts
                    .iter()
                    .map(|t| Ok(dsp::stft(t, stft)?.magnitude()))
                    .collect::<Result<Vec<_>>>()?;
                if domain == Domain::Stft {
                    mags.into_iter().for_each(|s| targets.extend(s.data));
                } else {
                    let r = dsp::ratio_masks(&mags)?;
                    targets.extend(r.data);
                }
            }
        }
    }
    Ok(Features { dims, targets, mix })
}

fn pairwise_kind(domain: Domain, tau: f64) -> PairwiseLossKind {
    match domain {
        Domain::Wave => PairwiseLossKind::Eq2Waveform { tau },
        Domain::Stft => PairwiseLossKind::L1MagStft,
        Domain::Mask => PairwiseLossKind::L1Mask,
    }
}

fn with_dims(lead: &[usize], dims: &[usize]) -> Vec<usize> {
    lead.iter().chain(dims).copied().collect()
}

fn real_input(g: &mut Graph, spec: &DiscriminatorSpec, f: &Features, b: usize) -> Result<Var> {
    let k = spec.k;
    let t = match spec.kind {
        Kind::Instance => Tensor::new(with_dims(&[b * k, 1], &f.dims), f.targets.clone())?,
        Kind::Context => {
            let mut data = Vec::with_capacity(b * spec.in_channels() * f.item_len());
            for i in 0..b {
                if spec.m_conditioned {
                    data.extend_from_slice(f.mix(i));
                }
                (0..k).for_each(|j| data.extend_from_slice(f.target(i, j, k)));
            }
            Tensor::new(with_dims(&[b, spec.in_channels()], &f.dims), data)?
        }
    };
    Ok(g.constant(t))
}

/// Fake input built from `est` (`[B, K, dims..]`); replaced entries are
/// constants and so carry no gradient.
fn fake_input(
    g: &mut Graph,
    spec: &DiscriminatorSpec,
    est: Var,
    f: &Features,
    b: usize,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let k = spec.k;
    if spec.kind == Kind::Instance {
        return Ok(g.reshape(est, &with_dims(&[b * k, 1], &f.dims))?);
    }
    let n = f.item_len();
    let values = g.value(est).data().to_vec();
    let kind = pairwise_kind(spec.domain, tau);
    let stride = 2 * k + 1;
    let mut index = Vec::with_capacity(b * spec.in_channels());
    for i in 0..b {
        let est_rows: Vec<&[f64]> = (0..k).map(|j| &values[(i * k + j) * n..(i * k + j + 1) * n]).collect();
        let tgt_rows: Vec<&[f64]> = (0..k).map(|j| f.target(i, j, k)).collect();
        let mix = (spec.domain == Domain::Wave).then(|| f.mix(i));
        let plan = perm::plan_replacement(&tgt_rows, &est_rows, spec.i, kind, mix, rng)?;
        if spec.m_conditioned {
            index.push(i * stride + 2 * k);
        }
        for e in plan.entries {
            index.push(match e {
                FakeEntry::Estimate(j) => i * stride + j,
                FakeEntry::Target(j) => i * stride + k + j,
            });
        }
    }
    let tg = g.constant(Tensor::new(with_dims(&[b, k], &f.dims), f.targets.clone())?);
    let mx = g.constant(Tensor::new(with_dims(&[b, 1], &f.dims), f.mix.clone())?);
    let pool = g.concat(&[est, tg, mx], 1)?;
    let pool = g.reshape(pool, &with_dims(&[b * stride], &f.dims))?;
    let picked = g.index_select(pool, 0, &index)?;
    Ok(g.reshape(picked, &with_dims(&[b, spec.in_channels()], &f.dims))?)
}

/// Separator outputs for each domain: waveforms, masked magnitudes, masks.
#[derive(Debug, Clone, Copy)]
pub struct Estimates {
    pub wave: Var,
    pub stft: Var,
    pub mask: Var,
}

impl Estimates {
    fn get(&self, d: Domain) -> Var {
        match d {
            Domain::Wave => self.wave,
            Domain::Stft => self.stft,
            Domain::Mask => self.mask,
        }
    }
}

struct FeatureCache<'a> {
    batch: &'a Batch,
    stft: &'a StftConfig,
    cache: [Option<Features>; 3],
}

impl<'a> FeatureCache<'a> {
    fn new(batch: &'a Batch, stft: &'a StftConfig) -> Self {
        Self {
            batch,
            stft,
            cache: [None, None, None],
        }
    }

    fn get(&mut self, d: Domain) -> Result<&Features> {
        let slot = d as usize;
        if self.cache[slot].is_none() {
            self.cache[slot] = Some(features(d, self.batch, self.stft)?);
        }
        Ok(self.cache[slot].as_ref().expect("filled above"))
    }
}

/// Adversarial separator loss against fixed discriminators.
pub fn separator_adversarial_loss(
    g: &mut Graph,
    discriminators: &[Discriminator],
    est: Estimates,
    batch: &Batch,
    stft: &StftConfig,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    adversarial_loss_cached(g, discriminators, est, &mut FeatureCache::new(batch, stft), tau, rng)
}

fn adversarial_loss_cached(
    g: &mut Graph,
    discriminators: &[Discriminator],
    est: Estimates,
    cache: &mut FeatureCache,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let b = cache.batch.len();
    let mut contributions = vec![];
    for d in discriminators {
        let f = cache.get(d.spec.domain)?;
        let dv = d.params.bind(g, false);
        let fake = fake_input(g, &d.spec, est.get(d.spec.domain), f, b, tau, rng)?;
        let scores = d.forward_bound(g, &dv, fake)?;
        contributions.push(Contribution {
            kind: d.spec.kind,
            scores,
        });
    }
    Ok(losses::g_adversarial_loss(g, &contributions)?)
}

/// Separator outputs as plain values, one per discriminator domain.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateValues {
    /// `[B, K, L]`
    pub wave: Tensor,
    /// `[B, K, T, F]` masked magnitudes.
    pub stft: Tensor,
    /// `[B, K, T, F]`
    pub mask: Tensor,
}

impl EstimateValues {
    pub fn compute(separator: &Separator, batch: &Batch) -> Result<Self> {
        let mut g = Graph::new();
        let sv = separator.params.bind(&mut g, false);
        let mixes: Vec<&[f64]> = batch.mixes.iter().map(|m| m.as_slice()).collect();
        let out = separator.forward_bound(&mut g, &sv, &mixes)?;
        Ok(Self {
            wave: g.value(out.waves).clone(),
            stft: g.value(out.est_mag).clone(),
            mask: g.value(out.masks).clone(),
        })
    }

    fn get(&self, d: Domain) -> &Tensor {
        match d {
            Domain::Wave => &self.wave,
            Domain::Stft => &self.stft,
            Domain::Mask => &self.mask,
        }
    }
}

/// One Adam step per discriminator on its negated hinge loss. Separator
/// outputs enter only as values.
pub fn discriminator_phase(
    discriminators: &mut [Discriminator],
    opts: &mut [Adam],
    est: &EstimateValues,
    batch: &Batch,
    cfg: &TrainConfig,
    step: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DStats>> {
    let mut cache = FeatureCache::new(batch, &cfg.separator.stft);
    discriminator_phase_cached(discriminators, opts, est, &mut cache, cfg, step, rng)
}

fn discriminator_phase_cached(
    discriminators: &mut [Discriminator],
    opts: &mut [Adam],
    est: &EstimateValues,
    cache: &mut FeatureCache,
    cfg: &TrainConfig,
    step: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DStats>> {
    let b = cache.batch.len();
    let mut g = Graph::new();
    let mut objective = None;
    let mut bound = vec![];
    let mut terms = vec![];
    for d in discriminators.iter() {
        let f = cache.get(d.spec.domain)?;
        let e = g.constant(est.get(d.spec.domain).clone());
        let dv = d.params.bind(&mut g, true);
        let real = real_input(&mut g, &d.spec, f, b)?;
        let fake = fake_input(&mut g, &d.spec, e, f, b, cfg.recipe.tau, rng)?;
        let rs = d.forward_bound(&mut g, &dv, real)?;
        let fs = d.forward_bound(&mut g, &dv, fake)?;
        let dl = match d.spec.kind {
            Kind::Instance => losses::d_loss_instance(&mut g, rs, fs)?,
            Kind::Context => losses::d_loss_context(&mut g, rs, fs)?,
        };
        let neg = g.neg(dl.total);
        objective = Some(match objective {
            None => neg,
            Some(o) => g.add(o, neg)?,
        });
        bound.push(dv);
        terms.push((d.spec.name(), dl));
    }
    let Some(objective) = objective else {
        return Ok(vec![]);
    };
    let mut stats = vec![];
    for (name, dl) in &terms {
        let total = finite(g.value(dl.total).item(), &format!("discriminator loss {name}"), step)?;
        stats.push(DStats {
            name: name.clone(),
            total,
            real: g.value(dl.real).item(),
            fake: g.value(dl.fake).item(),
        });
    }
    g.backward(objective)?;
    for ((d, opt), dv) in discriminators.iter_mut().zip(opts.iter_mut()).zip(&bound) {
        let grads: Vec<Vec<f64>> = dv.iter().map(|&v| g.grad_or_zeros(v)).collect();
        opt.step(&mut d.params, &grads, cfg.lr, &cfg.adam);
        if cfg.precision == Precision::F32 {
            round_f32(&mut d.params);
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DStats {
    pub name: String,
    pub total: f64,
    pub real: f64,
    pub fake: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub discriminators: Vec<DStats>,
    pub g_loss: Option<f64>,
    pub pit: Option<f64>,
    pub lambda: Option<f64>,
    pub total_sep: f64,
}

fn finite(v: f64, term: &str, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::NonFinite {
            term: term.to_string(),
            step,
        })
    }
}

/// One alternating update. `rng` drives the replacement draws.
pub fn train_step(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<StepStats> {
    let step = state.step + 1;
    let tau = cfg.recipe.tau;
    let stft = cfg.separator.stft.clone();
    let mixes: Vec<&[f64]> = batch.mixes.iter().map(|m| m.as_slice()).collect();
    if batch.targets.iter().any(|t| t.len() != cfg.separator.k) {
        return Err(TrainError::Dataset(format!("examples must carry K = {} targets", cfg.separator.k)));
    }
    if mixes.iter().any(|m| m.len() != state.signal_len) {
        return Err(TrainError::Dataset(format!("batch signals must have {} samples", state.signal_len)));
    }

    // Separator graph with gradients; its values stand in for the phase-1
    // forward since θ does not change before phase 2.
    let mut g = Graph::new();
    let sv = state.separator.params.bind(&mut g, true);
    let out = state.separator.forward_bound(&mut g, &sv, &mixes)?;
    let est = Estimates {
        wave: out.waves,
        stft: out.est_mag,
        mask: out.masks,
    };
    let mut cache = FeatureCache::new(batch, &stft);

    let dstats = if state.discriminators.is_empty() {
        vec![]
    } else {
        let values = EstimateValues {
            wave: g.value(est.wave).clone(),
            stft: g.value(est.stft).clone(),
            mask: g.value(est.mask).clone(),
        };
        discriminator_phase_cached(
            &mut state.discriminators,
            &mut state.d_opts,
            &values,
            &mut cache,
            cfg,
            step,
            rng,
        )?
    };

    let g_loss = if state.discriminators.is_empty() {
        None
    } else {
        Some(adversarial_loss_cached(&mut g, &state.discriminators, est, &mut cache, tau, rng)?)
    };
    let pit = if cfg.recipe.pit_enabled {
        Some(losses::pit_loss(&mut g, out.waves, &batch.targets, &batch.mixes, tau)?.0)
    } else {
        None
    };
    if let Some(v) = g_loss {
        finite(g.value(v).item(), "adversarial separator loss", step)?;
    }
    if let Some(v) = pit {
        finite(g.value(v).item(), "PIT loss", step)?;
    }
    let (total, lambda) = match (g_loss, pit) {
        (Some(gl), Some(p)) => {
            let (t, l) = losses::combine_with_pit(&mut g, gl, p, &mut state.lambda)?;
            (t, Some(l))
        }
        (Some(gl), None) => (gl, None),
        (None, Some(p)) => (p, None),
        (None, None) => return Err(TrainError::Config("recipe has no loss terms".into())),
    };
    let total_sep = finite(g.value(total).item(), "total separator loss", step)?;
    g.backward(total)?;
    let grads: Vec<Vec<f64>> = sv.iter().map(|&v| g.grad_or_zeros(v)).collect();
    state.sep_opt.step(&mut state.separator.params, &grads, cfg.lr, &cfg.adam);
    if cfg.precision == Precision::F32 {
        round_f32(&mut state.separator.params);
    }
    state.step = step;
    Ok(StepStats {
        step,
        discriminators: dstats,
        g_loss: g_loss.map(|v| g.value(v).item()),
        pit: pit.map(|v| g.value(v).item()),
        lambda,
        total_sep,
    })
}

/// Separates and scores every example, `chunk` mixes per forward pass.
pub fn evaluate(
    separator: &Separator,
    examples: &[SeparationExample],
    mixture_consistency: bool,
    chunk: usize,
) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(examples.len());
    for group in examples.chunks(chunk.max(1)) {
        let mixes: Vec<&[f64]> = group.iter().map(|e| e.mix.as_slice()).collect();
        let estimates = separator.separate(&mixes)?;
        for (ex, est) in group.iter().zip(estimates) {
            let est = if mixture_consistency {
                dsp::mixture_consistency(&est, &ex.mix)?
            } else {
                est
            };
            let mut r = metrics::eval_mixture(&ex.sources, &est, &ex.mix)?;
            r.id = Some(ex.id.clone());
            records.push(r);
        }
    }
    Ok(metrics::aggregate(&records)?)
}

/// Selection score: SI-SNR_I when multi-source mixes exist, else SI-SNR_S.
pub fn selection_score(r: &EvalReport) -> f64 {
    r.si_snr_i.or(r.si_snr_s).unwrap_or(f64::NEG_INFINITY)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub best: TrainState,
    pub best_score: f64,
    pub last: TrainState,
    /// JSON lines, one per step and per validation.
    pub log: Vec<String>,
}

fn step_line(s: &StepStats) -> String {
    let d: serde_json::Map<String, serde_json::Value> = s
        .discriminators
        .iter()
        .map(|d| (d.name.clone(), json!({"total": d.total, "real": d.real, "fake": d.fake})))
        .collect();
    json!({
        "event": "step",
        "step": s.step,
        "d": d,
        "g_loss": s.g_loss,
        "pit": s.pit,
        "lambda": s.lambda,
        "total_sep": s.total_sep,
    })
    .to_string()
}

fn val_line(step: u64, r: &EvalReport) -> String {
    json!({"event": "val", "step": step, "si_snr_i": r.si_snr_i, "si_snr_s": r.si_snr_s}).to_string()
}

/// Trains on `train`, validates every `val_every` steps (and at step 0) and
/// keeps the best-scoring state. With `out`, writes `train_log.jsonl`,
/// `best.ckpt` and `last.ckpt` there.
pub fn fit(cfg: &TrainConfig, train: &[SeparationExample], val: &[SeparationExample], out: Option<&Path>) -> Result<FitOutcome> {
    fit_with(cfg, train, val, out, &mut |_| {})
}

/// [`fit`] that also hands every log line to `on_line` as it is produced.
pub fn fit_with(
    cfg: &TrainConfig,
    train: &[SeparationExample],
    val: &[SeparationExample],
    out: Option<&Path>,
    on_line: &mut dyn FnMut(&str),
) -> Result<FitOutcome> {
    cfg.validate()?;
    let len = train
        .first()
        .map(|e| e.mix.len())
        .ok_or_else(|| TrainError::Dataset("empty training split".into()))?;
    if val.is_empty() {
        return Err(TrainError::Dataset("empty validation split".into()));
    }
    for e in train.iter().chain(val) {
        if e.mix.len() != len || e.sources.len() != cfg.separator.k {
            return Err(TrainError::Dataset(format!(
                "example {} has {} samples and {} targets; expected {len} and {}",
                e.id,
                e.mix.len(),
                e.sources.len(),
                cfg.separator.k
            )));
        }
    }
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let p = dir.join("train_log.jsonl");
            Some((BufWriter::new(File::create(&p).map_err(io_err(&p))?), p))
        }
        None => None,
    };
    let mut log = vec![];
    let mut emit = |line: String, log: &mut Vec<String>| -> Result<()> {
        if let Some((w, p)) = log_file.as_mut() {
            writeln!(w, "{line}").map_err(io_err(p))?;
            w.flush().map_err(io_err(p))?;
        }
        on_line(&line);
        log.push(line);
        Ok(())
    };

    let mut state = TrainState::new(cfg, len)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut draw_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    draw_rng.set_stream(2);

    let chunk = cfg.batch_size.max(8);
    let report = evaluate(&state.separator, val, cfg.val_mixture_consistency, chunk)?;
    emit(val_line(0, &report), &mut log)?;
    let mut best = state.clone();
    let mut best_score = selection_score(&report);
    if let Some(dir) = out {
        save_checkpoint(&dir.join("best.ckpt"), &best, cfg)?;
    }

    let mut order: Vec<usize> = vec![];
    let mut cursor = 0;
    let bsz = cfg.batch_size.min(train.len());
    for _ in 0..cfg.max_steps {
        if cursor + bsz > order.len() {
            order = (0..train.len()).collect();
            order.shuffle(&mut order_rng);
            cursor = 0;
        }
        let picked: Vec<&SeparationExample> = order[cursor..cursor + bsz].iter().map(|&i| &train[i]).collect();
        cursor += bsz;
        let stats = train_step(&mut state, &Batch::from_examples(&picked), cfg, &mut draw_rng)?;
        emit(step_line(&stats), &mut log)?;
        if state.step % cfg.val_every == 0 {
            let report = evaluate(&state.separator, val, cfg.val_mixture_consistency, chunk)?;
            emit(val_line(state.step, &report), &mut log)?;
            let score = selection_score(&report);
            if score > best_score {
                best_score = score;
                best = state.clone();
                if let Some(dir) = out {
                    save_checkpoint(&dir.join("best.ckpt"), &best, cfg)?;
                }
            }
        }
    }
    if let Some(dir) = out {
        save_checkpoint(&dir.join("last.ckpt"), &state, cfg)?;
    }
    Ok(FitOutcome {
        best,
        best_score,
        last: state,
        log,
    })
}

const MAGIC: &[u8; 8] = b"ADVPITCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    step: u64,
    dtype: Precision,
    signal_len: usize,
    config: TrainConfig,
    lambda: LambdaState,
    sep_adam_t: u64,
    d_adam_t: Vec<u64>,
    tensors: Vec<TensorEntry>,
}

/// Every stored array in declaration order: separator parameters, its Adam
/// moments, then each discriminator's parameters and moments.
fn tensor_table(state: &TrainState) -> Vec<(String, Vec<usize>, &[f64])> {
    let mut out = vec![];
    push_tensors(&mut out, "sep", &state.separator.params, &state.sep_opt);
    for (d, o) in state.discriminators.iter().zip(&state.d_opts) {
        push_tensors(&mut out, "disc", &d.params, o);
    }
    out
}

fn push_tensors<'a>(out: &mut Vec<(String, Vec<usize>, &'a [f64])>, prefix: &str, params: &'a ParamStore, opt: &'a Adam) {
    for (n, t) in params.names.iter().zip(&params.tensors) {
        out.push((n.clone(), t.shape().to_vec(), t.data()));
    }
    for (which, moments) in [("m", &opt.m), ("v", &opt.v)] {
        for ((n, t), data) in params.names.iter().zip(&params.tensors).zip(moments) {
            out.push((format!("{prefix}.adam.{which}.{n}"), t.shape().to_vec(), data.as_slice()));
        }
    }
}

pub fn checkpoint_bytes(state: &TrainState, cfg: &TrainConfig) -> Vec<u8> {
    let table = tensor_table(state);
    let header = Header {
        version: FORMAT_VERSION,
        step: state.step,
        dtype: cfg.precision,
        signal_len: state.signal_len,
        config: cfg.clone(),
        lambda: state.lambda.clone(),
        sep_adam_t: state.sep_opt.t,
        d_adam_t: state.d_opts.iter().map(|o| o.t).collect(),
        tensors: table
            .iter()
            .map(|(n, s, _)| TensorEntry {
                name: n.clone(),
                shape: s.clone(),
            })
            .collect(),
    };
    let hjson = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
    buf.extend_from_slice(&hjson);
    for (_, _, data) in &table {
        for &v in *data {
            match cfg.precision {
                Precision::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                Precision::F64 => buf.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub fn save_checkpoint(path: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    fs::write(path, checkpoint_bytes(state, cfg)).map_err(io_err(path))
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(TrainState, TrainConfig)> {
    let bad = |m: &str| TrainError::Checkpoint(m.to_string());
    if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("is not an advpit checkpoint"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let hend = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&body[20..hend]).map_err(|e| TrainError::Checkpoint(format!("bad header: {e}")))?;
    let mut state = TrainState::new(&header.config, header.signal_len)?;
    let expected: Vec<(String, Vec<usize>)> = tensor_table(&state).into_iter().map(|(n, s, _)| (n, s)).collect();
    let stored: Vec<(String, Vec<usize>)> = header.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
    if expected != stored {
        return Err(bad("tensor table does not match the stored config"));
    }
    let width = match header.dtype {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let total: usize = stored.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let payload = &body[hend..];
    if payload.len() != total * width {
        return Err(bad("payload length does not match the tensor table"));
    }
    let mut values = payload.chunks_exact(width).map(|c| match header.dtype {
        Precision::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
        Precision::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
    });
    let mut fill = |dst: &mut [f64]| dst.iter_mut().for_each(|v| *v = values.next().expect("length checked"));
    let mut restore = |params: &mut ParamStore, opt: &mut Adam| {
        params.tensors.iter_mut().for_each(|t| fill(t.data_mut()));
        opt.m.iter_mut().for_each(|m| fill(m));
        opt.v.iter_mut().for_each(|v| fill(v));
    };
    restore(&mut state.separator.params, &mut state.sep_opt);
    for (d, o) in state.discriminators.iter_mut().zip(&mut state.d_opts) {
        restore(&mut d.params, o);
    }
    state.sep_opt.t = header.sep_adam_t;
    for (o, t) in state.d_opts.iter_mut().zip(&header.d_adam_t) {
        o.t = *t;
    }
    state.lambda = header.lambda;
    state.step = header.step;
    Ok((state, header.config))
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_split, GenConfig, Split};

    fn tiny_cfg(recipe: Recipe) -> TrainConfig {
        TrainConfig {
            separator: SeparatorConfig {
                encoder_channels: vec![4, 4, 4, 4],
                bottleneck_channels: 4,
                ..SeparatorConfig::desk(2)
            },
            recipe,
            lr: 1e-3,
            batch_size: 2,
            max_steps: 3,
            val_every: 2,
            ..TrainConfig::desk(2)
        }
    }

    fn examples(n: usize, split: Split) -> Vec<SeparationExample> {
        examples_of(n, split, 0.1)
    }

    fn examples_of(n: usize, split: Split, duration: f64) -> Vec<SeparationExample> {
        let cfg = GenConfig {
            duration,
            ..GenConfig::disjoint_bands(2)
        };
        generate_split(&cfg, split, n)
    }

    fn ctx_wave(i: usize) -> DiscriminatorSpec {
        DiscriminatorSpec {
            domain: Domain::Wave,
            kind: Kind::Context,
            m_conditioned: true,
            i,
            k: 2,
            channels: vec![2, 2, 2, 2],
        }
    }

    fn all_domains() -> Vec<DiscriminatorSpec> {
        let mut v = vec![ctx_wave(1)];
        for domain in [Domain::Stft, Domain::Mask] {
            v.push(DiscriminatorSpec {
                domain,
                kind: Kind::Context,
                m_conditioned: true,
                i: 1,
                k: 2,
                channels: vec![2, 2, 2, 2],
            });
            v.push(DiscriminatorSpec {
                domain,
                kind: Kind::Instance,
                m_conditioned: false,
                i: 0,
                k: 2,
                channels: vec![2, 2, 2, 2],
            });
        }
        v
    }

    fn batch(exs: &[SeparationExample]) -> Batch {
        Batch::from_examples(&exs.iter().collect::<Vec<_>>())
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![0.3, -7.0, 1e-3];
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        adam_update(&mut p, &g, &mut m, &mut v, 0.01, &AdamConfig::default(), 1);
        for (after, before) in p.iter().zip([1.0, -2.0, 0.5]) {
            assert!(((before - after).abs() - 0.01).abs() / 0.01 < 1e-5);
        }
    }

    #[test]
    fn adam_zero_gradient() {
        let cfg = AdamConfig::default();
        let mut p = vec![1.0, 2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 0.1, &cfg, 1);
        assert_eq!(p, vec![1.0, 2.0]);
        let (mut m, mut v) = (vec![0.5, -0.5], vec![0.25, 0.25]);
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 0.0, &cfg, 3);
        assert_eq!(m, vec![0.45, -0.45]);
        assert_eq!(v, vec![0.25 * 0.999, 0.25 * 0.999]);
    }

    #[test]
    fn adam_matches_scripted_recurrence_on_quadratic() {
        // f(x) = Σ a_i x_i², gradient 2 a_i x_i
        let a = [1.0, 0.1, 5.0];
        let cfg = AdamConfig::default();
        let mut p = vec![1.0, -1.0, 0.3];
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        let mut rp = p.clone();
        let (mut rm, mut rv) = ([0.0f64; 3], [0.0f64; 3]);
        for t in 1..=10u64 {
            let g: Vec<f64> = (0..3).map(|i| 2.0 * a[i] * p[i]).collect();
            adam_update(&mut p, &g, &mut m, &mut v, 0.05, &cfg, t);
            for i in 0..3 {
                let gi = 2.0 * a[i] * rp[i];
                rm[i] = 0.9 * rm[i] + 0.1 * gi;
                rv[i] = 0.999 * rv[i] + 0.001 * gi * gi;
                let mh = rm[i] / (1.0 - 0.9f64.powi(t as i32));
                let vh = rv[i] / (1.0 - 0.999f64.powi(t as i32));
                rp[i] -= 0.05 * mh / (vh.sqrt() + 1e-8);
            }
        }
        for i in 0..3 {
            assert!((p[i] - rp[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lr_leaves_every_parameter_unchanged() {
        let mut cfg = tiny_cfg(Recipe::adversarial(all_domains(), true));
        cfg.lr = 0.0;
        let exs = examples_of(2, Split::Train, 0.34);
        let mut state = TrainState::new(&cfg, exs[0].mix.len()).unwrap();
        let before = state.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stats = train_step(&mut state, &batch(&exs), &cfg, &mut rng).unwrap();
        assert_eq!(stats.discriminators.len(), 5);
        assert_eq!(state.separator.params, before.separator.params);
        for (a, b) in state.discriminators.iter().zip(&before.discriminators) {
            assert_eq!(a.params, b.params);
        }
    }

    #[test]
    fn separator_step_sees_updated_discriminators() {
        let cfg = tiny_cfg(Recipe::adversarial(vec![ctx_wave(1)], false));
        let exs = examples(2, Split::Train);
        let b = batch(&exs);
        let mut state = TrainState::new(&cfg, exs[0].mix.len()).unwrap();
        let before = state.clone();
        train_step(&mut state, &b, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_ne!(state.separator.params, before.separator.params);

        // Replay the two phases by hand with the same draw stream.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut manual = before.clone();
        let values = EstimateValues::compute(&manual.separator, &b).unwrap();
        discriminator_phase(&mut manual.discriminators, &mut manual.d_opts, &values, &b, &cfg, 1, &mut rng).unwrap();
        assert_eq!(manual.discriminators, state.discriminators);
        assert_ne!(manual.discriminators[0].params, before.discriminators[0].params);
        assert_eq!(manual.separator, before.separator);

        let mut g = Graph::new();
        let sv = manual.separator.params.bind(&mut g, true);
        let mixes: Vec<&[f64]> = b.mixes.iter().map(|m| m.as_slice()).collect();
        let out = manual.separator.forward_bound(&mut g, &sv, &mixes).unwrap();
        let est = Estimates {
            wave: out.waves,
            stft: out.est_mag,
            mask: out.masks,
        };
        let l = separator_adversarial_loss(&mut g, &manual.discriminators, est, &b, &cfg.separator.stft, cfg.recipe.tau, &mut rng)
            .unwrap();
        g.backward(l).unwrap();
        let grads: Vec<Vec<f64>> = sv.iter().map(|&v| g.grad_or_zeros(v)).collect();
        manual.sep_opt.step(&mut manual.separator.params, &grads, cfg.lr, &cfg.adam);
        assert_eq!(manual.separator.params, state.separator.params);
        assert_eq!(manual.discriminators, state.discriminators);
    }

    #[test]
    fn replacements_are_gradient_opaque() {
        let k = 3;
        let spec = DiscriminatorSpec {
            k,
            ..ctx_wave(k - 1)
        };
        let len = 400;
        let d = Discriminator::new(spec, vec![len], 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mk = |s: u64| -> Vec<f64> { (0..len).map(|i| ((i as f64) * 0.01 * (s as f64 + 1.0)).sin() * 0.3).collect() };
        let targets = vec![vec![mk(1), mk(2), mk(3)], vec![mk(4), mk(5), vec![0.0; len]]];
        let mixes: Vec<Vec<f64>> = targets.iter().map(|t| (0..len).map(|i| t.iter().map(|s| s[i]).sum()).collect()).collect();
        let batch = Batch { mixes, targets };
        for trial in 0..5 {
            let mut g = Graph::new();
            let est_data: Vec<f64> = (0..2 * k * len).map(|i| ((i * 7 + trial) as f64 * 0.37).sin() * 0.2).collect();
            let wave = g.leaf(Tensor::new(vec![2, k, len], est_data).unwrap(), true);
            let dummy = g.constant(Tensor::zeros(&[1]));
            let est = Estimates {
                wave,
                stft: dummy,
                mask: dummy,
            };
            let l = separator_adversarial_loss(&mut g, &[d.clone()], est, &batch, &StftConfig::desk(), 1e-3, &mut rng).unwrap();
            g.backward(l).unwrap();
            let grad = g.grad(wave).unwrap();
            for b in 0..2 {
                let live = (0..k)
                    .filter(|j| grad[(b * k + j) * len..(b * k + j + 1) * len].iter().any(|v| *v != 0.0))
                    .count();
                assert_eq!(live, 1, "example {b}");
            }
        }
    }

    #[test]
    fn pit_only_overfits_one_batch() {
        let mut cfg = tiny_cfg(Recipe::pit_only());
        cfg.lr = 3e-3;
        let exs = examples(4, Split::Train);
        let b = batch(&exs);
        let mut state = TrainState::new(&cfg, exs[0].mix.len()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let losses: Vec<f64> = (0..200)
            .map(|_| train_step(&mut state, &b, &cfg, &mut rng).unwrap().pit.unwrap())
            .collect();
        let down = losses.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(down as f64 >= 0.9 * 199.0, "{down}/199 decreasing; first {} last {}", losses[0], losses[199]);
    }

    #[test]
    fn lambda_reported_for_combined_recipe() {
        let cfg = tiny_cfg(Recipe::adversarial(vec![ctx_wave(1)], true));
        let exs = examples(2, Split::Train);
        let mut state = TrainState::new(&cfg, exs[0].mix.len()).unwrap();
        let s = train_step(&mut state, &batch(&exs), &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (gl, p, l) = (s.g_loss.unwrap(), s.pit.unwrap(), s.lambda.unwrap());
        assert!((s.total_sep - (gl + l * p)).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip() {
        for precision in [Precision::F64, Precision::F32] {
            let mut cfg = tiny_cfg(Recipe::adversarial(vec![ctx_wave(1)], true));
            cfg.precision = precision;
            let exs = examples(2, Split::Train);
            let mut state = TrainState::new(&cfg, exs[0].mix.len()).unwrap();
            train_step(&mut state, &batch(&exs), &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let bytes = checkpoint_bytes(&state, &cfg);
            let (loaded, lcfg) = checkpoint_from_bytes(&bytes).unwrap();
            assert_eq!(lcfg, cfg);
            assert_eq!(loaded.separator.params, state.separator.params);
            assert_eq!(loaded.discriminators[0].params, state.discriminators[0].params);
            let m: Vec<&[f64]> = vec![&exs[0].mix];
            assert_eq!(loaded.separator.separate(&m).unwrap(), state.separator.separate(&m).unwrap());
            if precision == Precision::F64 {
                assert_eq!(loaded, state);
            }
            let mut corrupt = bytes.clone();
            let mid = corrupt.len() / 2;
            corrupt[mid] ^= 1;
            assert!(matches!(checkpoint_from_bytes(&corrupt), Err(TrainError::Checkpoint(_))));
            assert!(checkpoint_from_bytes(&bytes[..100]).is_err());
        }
    }

    #[test]
    fn fit_zero_steps_returns_initialisation() {
        let mut cfg = tiny_cfg(Recipe::pit_only());
        cfg.max_steps = 0;
        let tr = examples(4, Split::Train);
        let va = examples(4, Split::Val);
        let out = fit(&cfg, &tr, &va, None).unwrap();
        assert_eq!(out.log.len(), 1);
        assert!(out.log[0].contains("\"event\":\"val\""));
        assert_eq!(out.best, TrainState::new(&cfg, tr[0].mix.len()).unwrap());
    }

    #[test]
    fn fit_is_deterministic_and_selects_best() {
        let cfg = TrainConfig {
            max_steps: 4,
            val_every: 2,
            ..tiny_cfg(Recipe::adversarial(vec![ctx_wave(1)], true))
        };
        let tr = examples(6, Split::Train);
        let va = examples(4, Split::Val);
        let dir = tempfile::tempdir().unwrap();
        let a = fit(&cfg, &tr, &va, Some(dir.path())).unwrap();
        let b = fit(&cfg, &tr, &va, None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.best, b.best);
        let vals: Vec<f64> = a
            .log
            .iter()
            .filter(|l| l.contains("\"event\":\"val\""))
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                v["si_snr_i"].as_f64().or(v["si_snr_s"].as_f64()).unwrap()
            })
            .collect();
        assert_eq!(vals.len(), 3);
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.best_score, max);
        let text = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        assert_eq!(text.lines().count(), a.log.len());
        let (loaded, _) = load_checkpoint(&dir.path().join("best.ckpt")).unwrap();
        assert_eq!(loaded, a.best);
        let r1 = evaluate(&loaded.separator, &va, true, 8).unwrap();
        let r2 = evaluate(&a.best.separator, &va, true, 8).unwrap();
        assert_eq!(r1.si_snr_i, r2.si_snr_i);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = tiny_cfg(Recipe::pit_only());
        cfg.recipe.pit_enabled = false;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg(Recipe::adversarial(vec![ctx_wave(2)], true));
        assert!(cfg.validate().is_err());
        cfg.recipe.discriminators[0].i = 1;
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }
}
