//! Mask-predicting separator and the convolutional discriminator family.
//!
//! Parameters live in a [`ParamStore`] and are bound into a [`Graph`] per
//! forward pass, either as trainable leaves or as constants. Layers refer to
//! parameters by index into the store.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{self, StftConfig};
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const LEAKY_SLOPE: f64 = 0.2;
/// Time frames are padded to a multiple of this before the encoder.
const NORM_EPS: f64 = 1e-5;
pub const TIME_MULTIPLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input of {len} is too short; need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("input mismatch: {0}")]
    InputMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dsp(#[from] dsp::DspError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Named parameter tensors in declaration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    /// Adds a tensor drawn uniformly from `±1/√fan_in`.
    fn add(&mut self, name: String, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> usize {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.names.push(name);
        self.tensors.push(Tensor::new(shape.to_vec(), data).expect("shape matches data"));
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every tensor in `g`; trainable leaves receive gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    padding: usize,
}

impl Conv {
    fn new(p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let fan = cin * k;
        let w = p.add(format!("{name}.w"), &[cout, cin, k], fan, rng);
        let b = p.add(format!("{name}.b"), &[cout], fan, rng);
        Self {
            w,
            b,
            stride,
            padding: (k - 1) / 2,
        }
    }

    fn forward(&self, g: &mut Graph, v: &[Var], x: Var) -> Result<Var> {
        Ok(g.conv1d(x, v[self.w], Some(v[self.b]), self.stride, self.padding)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ResBlock {
    c1: Conv,
    c2: Conv,
    skip: Option<Conv>,
    norm: BlockNorm,
}

impl ResBlock {
    fn new(p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, norm: BlockNorm) -> Self {
        Self {
            c1: Conv::new(p, rng, &format!("{name}.conv1"), cin, cout, 3, 1),
            c2: Conv::new(p, rng, &format!("{name}.conv2"), cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv::new(p, rng, &format!("{name}.skip"), cin, cout, 1, 1)),
            norm,
        }
    }

    fn forward(&self, g: &mut Graph, v: &[Var], x: Var) -> Result<Var> {
        let h = self.c1.forward(g, v, x)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE)?;
        let h = self.c2.forward(g, v, h)?;
        let s = match &self.skip {
            Some(c) => c.forward(g, v, x)?,
            None => x,
        };
        let out = g.add(h, s)?;
        match self.norm {
            BlockNorm::None => Ok(out),
            BlockNorm::Global => {
                let shape = g.shape(out).to_vec();
                let flat = g.reshape(out, &[shape[0], shape[1] * shape[2]])?;
                let n = g.normalize(flat, 1, NORM_EPS)?;
                Ok(g.reshape(n, &shape)?)
            }
        }
    }
}

/// Single-head dot-product self-attention over time with a residual path.
#[derive(Debug, Clone, PartialEq)]
struct Attention {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
    channels: usize,
}

impl Attention {
    fn new(p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize) -> Self {
        let mut m = |s: &str| p.add(format!("{name}.{s}"), &[c, c], c, rng);
        Self {
            q: m("wq"),
            k: m("wk"),
            v: m("wv"),
            o: m("wo"),
            channels: c,
        }
    }

    fn forward(&self, g: &mut Graph, v: &[Var], x: Var) -> Result<Var> {
        // x: [B, C, T]
        let xt = g.transpose(x, 1, 2)?;
        let q = g.linear(xt, v[self.q], None)?;
        let k = g.linear(xt, v[self.k], None)?;
        let val = g.linear(xt, v[self.v], None)?;
        let kt = g.transpose(k, 1, 2)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (self.channels as f64).sqrt());
        let attn = g.softmax(scores, 2)?;
        let ctx = g.matmul(attn, val)?;
        let out = g.linear(ctx, v[self.o], None)?;
        let out = g.transpose(out, 1, 2)?;
        Ok(g.add(x, out)?)
    }
}

/// Normalization applied to every residual block output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockNorm {
    /// Plain `conv → LeakyReLU → conv` plus skip.
    None,
    /// Zero mean, unit variance over channels and time of each example.
    #[default]
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputTransform {
    /// Magnitudes enter the network unchanged.
    Identity,
    /// `ln(1 + |M|)`.
    Log1p,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparatorConfig {
    pub k: usize,
    pub stft: StftConfig,
    pub encoder_channels: Vec<usize>,
    pub bottleneck_channels: usize,
    pub attention_heads: usize,
    pub input_transform: InputTransform,
    #[serde(default)]
    pub block_norm: BlockNorm,
}

impl SeparatorConfig {
    pub fn paper(k: usize) -> Self {
        Self {
            k,
            stft: StftConfig::paper(),
            encoder_channels: vec![256, 512, 512, 512],
            bottleneck_channels: 512,
            attention_heads: 1,
            input_transform: InputTransform::Log1p,
            block_norm: BlockNorm::Global,
        }
    }

    pub fn desk(k: usize) -> Self {
        Self {
            k,
            stft: StftConfig::desk(),
            encoder_channels: vec![16, 32, 32, 32],
            bottleneck_channels: 32,
            attention_heads: 1,
            input_transform: InputTransform::Log1p,
            block_norm: BlockNorm::Global,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.k == 0 {
            return bad("k must be positive");
        }
        if self.encoder_channels.len() != 4 {
            return bad("encoder must have exactly 4 blocks");
        }
        if self.encoder_channels.iter().any(|&c| c == 0) || self.bottleneck_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.attention_heads != 1 {
            return bad("only single-head attention is supported");
        }
        Ok(())
    }

    /// Shortest waveform the separator accepts.
    pub fn min_len(&self) -> usize {
        self.stft.window_len
    }
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderStage {
    up: Conv,
    fuse: Conv,
    block: ResBlock,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Separator {
    pub cfg: SeparatorConfig,
    pub params: ParamStore,
    input: Conv,
    encoder: Vec<(ResBlock, Conv)>,
    bottleneck: (ResBlock, Attention, ResBlock),
    decoder: Vec<DecoderStage>,
    output: Conv,
}

/// Mixture spectra for a batch, stored `[B, T, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixSpectra {
    pub batch: usize,
    pub frames: usize,
    pub bins: usize,
    pub len: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub mag: Vec<f64>,
}

impl MixSpectra {
    pub fn compute(mixes: &[&[f64]], cfg: &StftConfig) -> Result<Self> {
        let len = mixes.first().map(|m| m.len()).ok_or_else(|| ModelError::InputMismatch("empty batch".into()))?;
        if let Some(m) = mixes.iter().find(|m| m.len() != len) {
            return Err(ModelError::InputMismatch(format!("mix lengths {len} and {}", m.len())));
        }
        let (frames, bins) = (cfg.frames(len), cfg.bins());
        let mut out = Self {
            batch: mixes.len(),
            frames,
            bins,
            len,
            re: Vec::with_capacity(mixes.len() * frames * bins),
            im: Vec::with_capacity(mixes.len() * frames * bins),
            mag: Vec::with_capacity(mixes.len() * frames * bins),
        };
        for m in mixes {
            let s = dsp::stft(m, cfg)?;
            out.mag.extend(s.magnitude().data);
            out.re.extend(s.re);
            out.im.extend(s.im);
        }
        Ok(out)
    }

    /// `[B, T, F]` tensor of one plane repeated over `k` sources: `[B, K, T, F]`.
    fn repeated(&self, plane: &[f64], k: usize) -> Tensor {
        let n = self.frames * self.bins;
        let mut data = Vec::with_capacity(self.batch * k * n);
        for b in 0..self.batch {
            for _ in 0..k {
                data.extend_from_slice(&plane[b * n..(b + 1) * n]);
            }
        }
        Tensor::new(vec![self.batch, k, self.frames, self.bins], data).expect("consistent dims")
    }
}

/// Graph handles produced by one separator pass.
#[derive(Debug, Clone)]
pub struct SeparatorOutput {
    /// Softmax masks `[B, K, T, F]`.
    pub masks: Var,
    /// Masked magnitudes `|M| ⊙ R̂_k`, `[B, K, T, F]`.
    pub est_mag: Var,
    /// Estimated waveforms `[B, K, L]`.
    pub waves: Var,
    pub spectra: MixSpectra,
}

impl Separator {
    pub fn new(cfg: SeparatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::default();
        let f = cfg.stft.bins();
        let e = cfg.encoder_channels.clone();
        let bn = cfg.bottleneck_channels;
        let input = Conv::new(&mut p, &mut rng, "sep.input", f, e[0], 1, 1);
        let mut encoder = vec![];
        let mut cin = e[0];
        for (i, &c) in e.iter().enumerate() {
            let block = ResBlock::new(&mut p, &mut rng, &format!("sep.enc{i}"), cin, c, cfg.block_norm);
            let down = Conv::new(&mut p, &mut rng, &format!("sep.down{i}"), c, c, 3, 2);
            encoder.push((block, down));
            cin = c;
        }
        let bottleneck = (
            ResBlock::new(&mut p, &mut rng, "sep.mid0", cin, bn, cfg.block_norm),
            Attention::new(&mut p, &mut rng, "sep.attn", bn),
            ResBlock::new(&mut p, &mut rng, "sep.mid1", bn, bn, cfg.block_norm),
        );
        let mut decoder = vec![];
        let mut cin = bn;
        for i in (0..e.len()).rev() {
            let c = e[i];
            decoder.push(DecoderStage {
                up: Conv::new(&mut p, &mut rng, &format!("sep.up{i}"), cin, c, 3, 1),
                fuse: Conv::new(&mut p, &mut rng, &format!("sep.fuse{i}"), 2 * c, c, 1, 1),
                block: ResBlock::new(&mut p, &mut rng, &format!("sep.dec{i}"), c, c, cfg.block_norm),
            });
            cin = c;
        }
        let output = Conv::new(&mut p, &mut rng, "sep.output", e[0], cfg.k * f, 1, 1);
        Ok(Self {
            cfg,
            params: p,
            input,
            encoder,
            bottleneck,
            decoder,
            output,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Logits `[B, K, F, T]` for network input `[B, F, T]`.
    fn logits(&self, g: &mut Graph, v: &[Var], x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (b, f, t) = (shape[0], shape[1], shape[2]);
        let tp = t.div_ceil(TIME_MULTIPLE) * TIME_MULTIPLE;
        let x = if tp > t {
            let z = g.constant(Tensor::zeros(&[b, f, tp - t]));
            g.concat(&[x, z], 2)?
        } else {
            x
        };
        let mut h = self.input.forward(g, v, x)?;
        let mut skips = vec![];
        for (block, down) in &self.encoder {
            h = block.forward(g, v, h)?;
            skips.push(h);
            h = down.forward(g, v, h)?;
        }
        h = self.bottleneck.0.forward(g, v, h)?;
        h = self.bottleneck.1.forward(g, v, h)?;
        h = self.bottleneck.2.forward(g, v, h)?;
        for stage in &self.decoder {
            h = g.upsample2x(h)?;
            h = stage.up.forward(g, v, h)?;
            let skip = skips.pop().expect("one skip per stage");
            h = g.concat(&[h, skip], 1)?;
            h = stage.fuse.forward(g, v, h)?;
            h = stage.block.forward(g, v, h)?;
        }
        let out = self.output.forward(g, v, h)?;
        let out = if tp > t { g.slice(out, 2, 0, t)? } else { out };
        Ok(g.reshape(out, &[b, self.cfg.k, f, t])?)
    }

    /// Forward pass for a batch of equal-length mixes, with parameters
    /// already bound as `v`.
    pub fn forward_bound(&self, g: &mut Graph, v: &[Var], mixes: &[&[f64]]) -> Result<SeparatorOutput> {
        let len = mixes.first().map(|m| m.len()).unwrap_or(0);
        if len < self.cfg.min_len() {
            return Err(ModelError::TooShort {
                len,
                min: self.cfg.min_len(),
            });
        }
        let spectra = MixSpectra::compute(mixes, &self.cfg.stft)?;
        let (b, t, f, k) = (spectra.batch, spectra.frames, spectra.bins, self.cfg.k);
        let feat: Vec<f64> = match self.cfg.input_transform {
            InputTransform::Identity => spectra.mag.clone(),
            InputTransform::Log1p => spectra.mag.iter().map(|m| m.ln_1p()).collect(),
        };
        let x = g.constant(Tensor::new(vec![b, t, f], feat)?);
        let x = g.transpose(x, 1, 2)?;
        let logits = self.logits(g, v, x)?;
        let masks = g.softmax(logits, 1)?;
        let masks = g.transpose(masks, 2, 3)?;
        let re = g.constant(spectra.repeated(&spectra.re, k));
        let im = g.constant(spectra.repeated(&spectra.im, k));
        let mag = g.constant(spectra.repeated(&spectra.mag, k));
        let est_re = g.mul(masks, re)?;
        let est_im = g.mul(masks, im)?;
        let est_mag = g.mul(masks, mag)?;
        let est_re = g.reshape(est_re, &[b * k, t, f])?;
        let est_im = g.reshape(est_im, &[b * k, t, f])?;
        let waves = g.istft(est_re, est_im, &self.cfg.stft, len)?;
        let waves = g.reshape(waves, &[b, k, len])?;
        Ok(SeparatorOutput {
            masks,
            est_mag,
            waves,
            spectra,
        })
    }

    /// Inference: `K` estimates per mix.
    pub fn separate(&self, mixes: &[&[f64]]) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut g = Graph::new();
        let v = self.params.bind(&mut g, false);
        let out = self.forward_bound(&mut g, &v, mixes)?;
        let (k, len) = (self.cfg.k, out.spectra.len);
        let data = g.value(out.waves).data();
        Ok((0..mixes.len())
            .map(|b| (0..k).map(|j| data[(b * k + j) * len..(b * k + j + 1) * len].to_vec()).collect())
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Wave,
    Stft,
    Mask,
}

pub use crate::losses::Kind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSpec {
    pub domain: Domain,
    pub kind: Kind,
    pub m_conditioned: bool,
    /// Replaced entries per fake (context kind only).
    pub i: usize,
    pub k: usize,
    /// Hidden widths of the four strided layers.
    pub channels: Vec<usize>,
}

impl DiscriminatorSpec {
    /// Input channel count `C`.
    pub fn in_channels(&self) -> usize {
        match self.kind {
            Kind::Instance => 1,
            Kind::Context => self.k + usize::from(self.m_conditioned),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if self.channels.len() != 4 || self.channels.contains(&0) {
            return bad(format!("discriminator needs 4 positive widths, got {:?}", self.channels));
        }
        match self.kind {
            Kind::Context if self.i >= self.k => bad(format!("I = {} must be below K = {}", self.i, self.k)),
            Kind::Instance if self.i != 0 || self.m_conditioned => {
                bad("instance discriminators take no replacement count or mix".into())
            }
            _ => Ok(()),
        }
    }

    pub fn paper_channels(domain: Domain) -> Vec<usize> {
        match domain {
            Domain::Wave => vec![128, 256, 256, 512],
            Domain::Stft | Domain::Mask => vec![64, 128, 128, 256],
        }
    }

    /// Paper widths divided by 8.
    pub fn desk_channels(domain: Domain) -> Vec<usize> {
        Self::paper_channels(domain).into_iter().map(|c| c / 8).collect()
    }

    pub fn name(&self) -> String {
        let d = match self.domain {
            Domain::Wave => "wave",
            Domain::Stft => "stft",
            Domain::Mask => "mask",
        };
        match self.kind {
            Kind::Instance => format!("inst_{d}"),
            Kind::Context => format!("ctx_{d}_i{}{}", self.i, if self.m_conditioned { "_m" } else { "" }),
        }
    }
}

const D_KERNEL: usize = 4;
const D_STRIDE: usize = 3;
/// Padding of the strided 2D layers and of the 2D projection.
const D2_PAD: usize = 1;
const D2_PROJ_PAD: usize = 2;

fn strided_len(n: usize, pad: usize) -> Option<usize> {
    crate::tensor::conv_out_len(n, D_KERNEL, D_STRIDE, pad)
}

/// Spatial extent entering the final linear layer, or `None` if an input of
/// this size collapses.
pub fn discriminator_extent(domain: Domain, dims: &[usize]) -> Option<Vec<usize>> {
    dims.iter()
        .map(|&n| {
            let (pad, proj_pad) = match domain {
                Domain::Wave => (0, 0),
                _ => (D2_PAD, D2_PROJ_PAD),
            };
            let mut n = n;
            for _ in 0..4 {
                n = strided_len(n, pad)?;
            }
            crate::tensor::conv_out_len(n, D_KERNEL, 1, proj_pad)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
struct DLayer {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    pub params: ParamStore,
    /// Input spatial dims: `[L]` for waveforms, `[T, F]` otherwise.
    pub dims: Vec<usize>,
    layers: Vec<DLayer>,
    proj: DLayer,
    head_w: usize,
    head_b: usize,
    extent: usize,
}

impl Discriminator {
    pub fn new(spec: DiscriminatorSpec, dims: Vec<usize>, seed: u64) -> Result<Self> {
        spec.validate()?;
        let expected_rank = if spec.domain == Domain::Wave { 1 } else { 2 };
        if dims.len() != expected_rank {
            return Err(ModelError::InvalidConfig(format!("{:?} input needs {expected_rank} dims", spec.domain)));
        }
        let ext = discriminator_extent(spec.domain, &dims).ok_or_else(|| ModelError::TooShort {
            len: dims.iter().copied().min().unwrap_or(0),
            min: min_extent(spec.domain),
        })?;
        let extent: usize = ext.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::default();
        let name = spec.name();
        let kshape = |cout: usize, cin: usize| -> (Vec<usize>, usize) {
            if spec.domain == Domain::Wave {
                (vec![cout, cin, D_KERNEL], cin * D_KERNEL)
            } else {
                (vec![cout, cin, D_KERNEL, D_KERNEL], cin * D_KERNEL * D_KERNEL)
            }
        };
        let mut layers = vec![];
        let mut cin = spec.in_channels();
        for (i, &c) in spec.channels.iter().enumerate() {
            let (shape, fan) = kshape(c, cin);
            layers.push(DLayer {
                w: p.add(format!("{name}.conv{i}.w"), &shape, fan, &mut rng),
                b: p.add(format!("{name}.conv{i}.b"), &[c], fan, &mut rng),
            });
            cin = c;
        }
        let (shape, fan) = kshape(1, cin);
        let proj = DLayer {
            w: p.add(format!("{name}.proj.w"), &shape, fan, &mut rng),
            b: p.add(format!("{name}.proj.b"), &[1], fan, &mut rng),
        };
        let head_w = p.add(format!("{name}.head.w"), &[1, extent], extent, &mut rng);
        let head_b = p.add(format!("{name}.head.b"), &[1], extent, &mut rng);
        Ok(Self {
            spec,
            params: p,
            dims,
            layers,
            proj,
            head_w,
            head_b,
            extent,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Scores `[N, 1]` for input `[N, C, dims..]`.
    pub fn forward_bound(&self, g: &mut Graph, v: &[Var], x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let c = self.spec.in_channels();
        if shape.len() != 2 + self.dims.len() || shape[1] != c || shape[2..] != self.dims[..] {
            return Err(ModelError::InputMismatch(format!(
                "{} expects [N, {c}, {:?}], got {shape:?}",
                self.spec.name(),
                self.dims
            )));
        }
        let n = shape[0];
        let conv = |g: &mut Graph, h: Var, l: &DLayer, stride: usize, pad: usize| -> Result<Var> {
            Ok(if self.spec.domain == Domain::Wave {
                g.conv1d(h, v[l.w], Some(v[l.b]), stride, pad)?
            } else {
                g.conv2d(h, v[l.w], Some(v[l.b]), (stride, stride), (pad, pad))?
            })
        };
        let (pad, proj_pad) = if self.spec.domain == Domain::Wave { (0, 0) } else { (D2_PAD, D2_PROJ_PAD) };
        let mut h = x;
        for l in &self.layers {
            h = conv(g, h, l, D_STRIDE, pad)?;
            h = g.leaky_relu(h, LEAKY_SLOPE)?;
        }
        h = conv(g, h, &self.proj, 1, proj_pad)?;
        let h = g.reshape(h, &[n, self.extent])?;
        Ok(g.linear(h, v[self.head_w], Some(v[self.head_b]))?)
    }

    pub fn score(&self, input: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = self.params.bind(&mut g, false);
        let x = g.constant(input.clone());
        let s = self.forward_bound(&mut g, &v, x)?;
        Ok(g.value(s).data().to_vec())
    }
}

/// Smallest input extent that survives the strided stack and projection.
pub fn min_extent(domain: Domain) -> usize {
    (1..100_000).find(|&n| discriminator_extent(domain, &[n]).is_some()).unwrap_or(usize::MAX)
}

/// Channel-stacks one example's items into a `[C, dims..]` tensor, mix first
/// when conditioned.
pub fn assemble_d_input(spec: &DiscriminatorSpec, items: &[&[f64]], mix: Option<&[f64]>, dims: &[usize]) -> Result<Tensor> {
    let want = match spec.kind {
        Kind::Instance => 1,
        Kind::Context => spec.k,
    };
    if items.len() != want {
        return Err(ModelError::InputMismatch(format!("{} needs {want} items, got {}", spec.name(), items.len())));
    }
    if mix.is_some() != (spec.m_conditioned && spec.kind == Kind::Context) {
        return Err(ModelError::InputMismatch("mix must be given exactly when conditioned".into()));
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(spec.in_channels() * n);
    for item in mix.into_iter().chain(items.iter().copied()) {
        if item.len() != n {
            return Err(ModelError::InputMismatch(format!("item of {} values, expected {n}", item.len())));
        }
        data.extend_from_slice(item);
    }
    let mut shape = vec![spec.in_channels()];
    shape.extend_from_slice(dims);
    Ok(Tensor::new(shape, data)?)
}
