//! Oracle suites run by `advpit check`: gradients, permutation search,
//! signal processing and metrics, each against an independent reference.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dsp::{self, StftConfig};
use crate::losses;
use crate::metrics::{self, SI_SNR_EPS};
use crate::models::{Discriminator, DiscriminatorSpec, Domain, Kind, Separator, SeparatorConfig};
use crate::perm::{self, PairwiseLossKind};
use crate::tensor::{grad_check, Attrs, Graph, Primitive, Tensor, Var};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-6;
pub const CASES_PER_PRIMITIVE: usize = 10;
pub const ORACLE_CASES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Perm,
    Dsp,
    Metrics,
    All,
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "grad" => Self::Grad,
            "perm" => Self::Perm,
            "dsp" => Self::Dsp,
            "metrics" => Self::Metrics,
            "all" => Self::All,
            _ => return Err(format!("unknown suite {s:?}; expected grad, perm, dsp, metrics or all")),
        })
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Grad => "grad",
            Self::Perm => "perm",
            Self::Dsp => "dsp",
            Self::Metrics => "metrics",
            Self::All => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: String,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(suite: Suite, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            suite: suite.to_string(),
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

pub fn run(suite: Suite, seed: u64) -> Vec<CheckResult> {
    match suite {
        Suite::Grad => grad_suite(seed),
        Suite::Perm => perm_suite(seed),
        Suite::Dsp => dsp_suite(seed),
        Suite::Metrics => metrics_suite(seed),
        Suite::All => [Suite::Grad, Suite::Perm, Suite::Dsp, Suite::Metrics]
            .into_iter()
            .flat_map(|s| run(s, seed))
            .collect(),
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Values bounded away from zero so kinks are not straddled.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random(rng, shape, 0.1, 1.0);
    t.data_mut().iter_mut().for_each(|v| {
        if rng.random_bool(0.5) {
            *v = -*v
        }
    });
    t
}

fn dims(rng: &mut ChaCha8Rng, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=max)).collect()
}

/// One primitive application with concrete inputs.
struct Case {
    prim: Primitive,
    inputs: Vec<Tensor>,
    attrs: Attrs,
}

fn primitive_case(prim: Primitive, rng: &mut ChaCha8Rng) -> Case {
    let mut attrs = Attrs::default();
    let rank = rng.random_range(1..=3);
    let s4 = dims(rng, rank, 4);
    let inputs = match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let s = dims(rng, rank, 4);
            vec![random(rng, &s, -1.0, 1.0), random(rng, &s, -1.0, 1.0)]
        }
        Primitive::Scale | Primitive::AddScalar => {
            attrs.scalar = Some(rng.random_range(-2.0..2.0));
            vec![random(rng, &s4, -1.0, 1.0)]
        }
        Primitive::MatMul => {
            let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
            let a_shape = if rng.random_bool(0.5) {
                vec![rng.random_range(1..4), m, k]
            } else {
                vec![m, k]
            };
            vec![random(rng, &a_shape, -1.0, 1.0), random(rng, &[k, n], -1.0, 1.0)]
        }
        Primitive::Linear => {
            let (i, o) = (rng.random_range(1..6), rng.random_range(1..6));
            let mut s = dims(rng, rank - 1, 3);
            s.push(i);
            vec![
                random(rng, &s, -1.0, 1.0),
                random(rng, &[o, i], -1.0, 1.0),
                random(rng, &[o], -1.0, 1.0),
            ]
        }
        Primitive::Conv1d => {
            let (b, c, o, k) = (
                rng.random_range(1..3),
                rng.random_range(1..4),
                rng.random_range(1..4),
                rng.random_range(1..5),
            );
            let (s, p) = (rng.random_range(1..4), rng.random_range(0..3));
            let l = rng.random_range(k.max(2)..12);
            attrs.stride = vec![s];
            attrs.padding = vec![p];
            vec![
                random(rng, &[b, c, l], -1.0, 1.0),
                random(rng, &[o, c, k], -1.0, 1.0),
                random(rng, &[o], -1.0, 1.0),
            ]
        }
        Primitive::Conv2d => {
            let (b, c, o, k) = (
                rng.random_range(1..3),
                rng.random_range(1..3),
                rng.random_range(1..3),
                rng.random_range(1..4),
            );
            let (s, p) = (rng.random_range(1..3), rng.random_range(0..2));
            let (h, w) = (rng.random_range(k.max(2)..7), rng.random_range(k.max(2)..7));
            attrs.stride = vec![s];
            attrs.padding = vec![p];
            vec![
                random(rng, &[b, c, h, w], -1.0, 1.0),
                random(rng, &[o, c, k, k], -1.0, 1.0),
                random(rng, &[o], -1.0, 1.0),
            ]
        }
        Primitive::LeakyRelu => {
            attrs.scalar = Some(0.2);
            vec![off_zero(rng, &s4)]
        }
        Primitive::Min0 | Primitive::Abs => vec![off_zero(rng, &s4)],
        Primitive::Softmax => {
            let s = dims(rng, rank, 4);
            attrs.axis = Some(rng.random_range(0..rank));
            vec![random(rng, &s, -2.0, 2.0)]
        }
        Primitive::Normalize => {
            let s = dims(rng, rank, 5);
            attrs.axis = Some(rng.random_range(0..rank));
            attrs.scalar = Some(1e-3);
            vec![random(rng, &s, -1.0, 1.0)]
        }
        Primitive::Ln | Primitive::Log10 => vec![random(rng, &s4, 0.5, 2.0)],
        Primitive::Square => vec![random(rng, &s4, -1.0, 1.0)],
        Primitive::Sum | Primitive::Mean => {
            let s = dims(rng, rank, 4);
            let mut axes: Vec<usize> = (0..rank).filter(|_| rng.random_bool(0.5)).collect();
            if axes.is_empty() {
                axes.push(rng.random_range(0..rank));
            }
            attrs.axes = axes;
            vec![random(rng, &s, -1.0, 1.0)]
        }
        Primitive::Concat => {
            let s = dims(rng, rank, 3);
            let axis = rng.random_range(0..rank);
            attrs.axis = Some(axis);
            (0..rng.random_range(2..4))
                .map(|_| {
                    let mut si = s.clone();
                    si[axis] = rng.random_range(1..4);
                    random(rng, &si, -1.0, 1.0)
                })
                .collect()
        }
        Primitive::Slice => {
            let s = dims(rng, rank, 5);
            let axis = rng.random_range(0..rank);
            let start = rng.random_range(0..s[axis]);
            let end = rng.random_range(start + 1..=s[axis]);
            attrs.axis = Some(axis);
            attrs.range = Some((start, end));
            vec![random(rng, &s, -1.0, 1.0)]
        }
        Primitive::Reshape => {
            let s = dims(rng, rank, 4);
            let n: usize = s.iter().product();
            attrs.shape = vec![1, n];
            vec![random(rng, &s, -1.0, 1.0)]
        }
        Primitive::Transpose => {
            let r = rank.max(2);
            let s = dims(rng, r, 4);
            let a = rng.random_range(0..r);
            let b = (a + rng.random_range(1..r)) % r;
            attrs.axes = vec![a, b];
            vec![random(rng, &s, -1.0, 1.0)]
        }
        Primitive::Upsample2x => vec![random(rng, &s4, -1.0, 1.0)],
        Primitive::IndexSelect => {
            let s = dims(rng, rank, 4);
            let axis = rng.random_range(0..rank);
            attrs.axis = Some(axis);
            attrs.indices = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..s[axis])).collect();
            vec![random(rng, &s, -1.0, 1.0)]
        }
    };
    Case { prim, inputs, attrs }
}

const PRIMITIVES: [Primitive; 25] = [
    Primitive::Add,
    Primitive::Sub,
    Primitive::Mul,
    Primitive::Scale,
    Primitive::AddScalar,
    Primitive::MatMul,
    Primitive::Linear,
    Primitive::Conv1d,
    Primitive::Conv2d,
    Primitive::LeakyRelu,
    Primitive::Min0,
    Primitive::Softmax,
    Primitive::Normalize,
    Primitive::Ln,
    Primitive::Log10,
    Primitive::Abs,
    Primitive::Square,
    Primitive::Sum,
    Primitive::Mean,
    Primitive::Concat,
    Primitive::Slice,
    Primitive::Reshape,
    Primitive::Transpose,
    Primitive::Upsample2x,
    Primitive::IndexSelect,
];

/// `Σ w ⊙ y` for a fixed random `w`, so every output coordinate matters.
fn weighted_sum(g: &mut Graph, y: Var, w: &Tensor) -> crate::tensor::Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv)?;
    g.sum_all(p)
}

/// Grad-checks the case with respect to each input in turn; returns the
/// worst relative error or a failure description.
fn check_case(case: &Case, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = case.inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = g.apply(case.prim, &vars, &case.attrs).map_err(|e| e.to_string())?;
        g.shape(y).to_vec()
    };
    let w = random(rng, &out_shape, -1.0, 1.0);
    let mut worst: f64 = 0.0;
    for i in 0..case.inputs.len() {
        let r = grad_check(
            |g, x| {
                let vars: Vec<Var> = case
                    .inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == i { x } else { g.constant(t.clone()) })
                    .collect();
                let y = g.apply(case.prim, &vars, &case.attrs)?;
                weighted_sum(g, y, &w)
            },
            &case.inputs[i],
            GRAD_STEP,
            GRAD_TOL,
        );
        if !r.pass {
            return Err(format!(
                "input {i}: rel err {:.3e}{}",
                r.max_rel_error,
                r.error.map(|e| format!(" ({e})")).unwrap_or_default()
            ));
        }
        worst = worst.max(r.max_rel_error);
    }
    Ok(worst)
}

fn summarize(suite: Suite, name: &str, outcomes: Vec<Result<f64, String>>, unit: &str, tol: f64) -> CheckResult {
    let n = outcomes.len();
    let failures: Vec<String> = outcomes
        .iter()
        .enumerate()
        .filter_map(|(i, o)| o.as_ref().err().map(|e| format!("case {i}: {e}")))
        .collect();
    let worst = outcomes.iter().filter_map(|o| o.as_ref().ok()).cloned().fold(0.0f64, f64::max);
    if failures.is_empty() {
        CheckResult::new(suite, name, true, format!("{n} cases, max {unit} {worst:.3e} (< {tol:.0e})"))
    } else {
        CheckResult::new(suite, name, false, format!("{}/{n} failed; first: {}", failures.len(), failures[0]))
    }
}

fn grad_suite(seed: u64) -> Vec<CheckResult> {
    let mut out = vec![];
    for (pi, prim) in PRIMITIVES.iter().enumerate() {
        let mut rng = rng_for(seed, 100 + pi as u64);
        let outcomes = (0..CASES_PER_PRIMITIVE)
            .map(|_| {
                let case = primitive_case(*prim, &mut rng);
                check_case(&case, &mut rng)
            })
            .collect();
        out.push(summarize(Suite::Grad, &format!("{prim:?}"), outcomes, "rel err", GRAD_TOL));
    }
    let mut rng = rng_for(seed, 200);
    let outcomes = (0..CASES_PER_PRIMITIVE).map(|_| istft_case(&mut rng)).collect();
    out.push(summarize(Suite::Grad, "Istft", outcomes, "rel err", GRAD_TOL));
    out.push(separator_loss_check(seed));
    out.push(discriminator_loss_check(seed));
    out
}

fn istft_case(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let cfg = StftConfig {
        sample_rate: 8_000,
        window_len: 16,
        hop: [4, 8][rng.random_range(0..2)],
        fft_len: 16,
    };
    let len = rng.random_range(16..40);
    let n = rng.random_range(1..3);
    let shape = [n, cfg.frames(len), cfg.bins()];
    let re = random(rng, &shape, -1.0, 1.0);
    let im = random(rng, &shape, -1.0, 1.0);
    let w = random(rng, &[n, len], -1.0, 1.0);
    let mut worst: f64 = 0.0;
    for which in 0..2 {
        let r = grad_check(
            |g, x| {
                let other = g.constant(if which == 0 { im.clone() } else { re.clone() });
                let (a, b) = if which == 0 { (x, other) } else { (other, x) };
                let y = g.istft(a, b, &cfg, len)?;
                weighted_sum(g, y, &w)
            },
            if which == 0 { &re } else { &im },
            GRAD_STEP,
            GRAD_TOL,
        );
        if !r.pass {
            return Err(format!("rel err {:.3e} {:?}", r.max_rel_error, r.error));
        }
        worst = worst.max(r.max_rel_error);
    }
    Ok(worst)
}

fn tiny_separator() -> SeparatorConfig {
    SeparatorConfig {
        encoder_channels: vec![2, 2, 2, 2],
        bottleneck_channels: 2,
        attention_heads: 1,
        ..SeparatorConfig::desk(2)
    }
}

fn tone_mix(rng: &mut ChaCha8Rng, len: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let targets: Vec<Vec<f64>> = (0..2)
        .map(|_| {
            let f = rng.random_range(200.0..3000.0);
            let a = rng.random_range(0.2..0.5);
            (0..len).map(|i| a * (std::f64::consts::TAU * f * i as f64 / 8000.0).sin()).collect()
        })
        .collect();
    let mix = (0..len).map(|i| targets[0][i] + targets[1][i]).collect();
    (mix, targets)
}

/// Splits a flat leaf into one variable per parameter tensor.
fn unflatten(g: &mut Graph, flat: Var, shapes: &[Vec<usize>]) -> crate::tensor::Result<Vec<Var>> {
    let mut at = 0;
    let mut out = vec![];
    for s in shapes {
        let n: usize = s.iter().product();
        let piece = g.slice(flat, 0, at, at + n)?;
        out.push(g.reshape(piece, s)?);
        at += n;
    }
    Ok(out)
}

fn flatten(tensors: &[Tensor]) -> Tensor {
    Tensor::from_vec(tensors.iter().flat_map(|t| t.data().iter().copied()).collect())
}

/// Full separator objective (PIT + adversarial through a context
/// discriminator with one replacement) against every separator parameter.
fn separator_loss_check(seed: u64) -> CheckResult {
    let name = "separator full loss";
    let mut rng = rng_for(seed, 300);
    let len = 512;
    let (mix, targets) = tone_mix(&mut rng, len);
    let sep = match Separator::new(tiny_separator(), seed) {
        Ok(s) => s,
        Err(e) => return CheckResult::new(Suite::Grad, name, false, e.to_string()),
    };
    let spec = DiscriminatorSpec {
        domain: Domain::Wave,
        kind: Kind::Context,
        m_conditioned: true,
        i: 1,
        k: 2,
        channels: vec![2, 2, 2, 2],
    };
    let disc = match Discriminator::new(spec.clone(), vec![len], seed + 1) {
        Ok(d) => d,
        Err(e) => return CheckResult::new(Suite::Grad, name, false, e.to_string()),
    };
    let shapes: Vec<Vec<usize>> = sep.params.tensors.iter().map(|t| t.shape().to_vec()).collect();
    let x = flatten(&sep.params.tensors);
    let draw_seed = rng.random::<u64>();
    let r = grad_check(
        |g, flat| {
            let sv = unflatten(g, flat, &shapes)?;
            let out = sep.forward_bound(g, &sv, &[&mix]).map_err(to_tensor_err)?;
            let (pit, perms) = losses::pit_loss(g, out.waves, &[targets.clone()], &[mix.clone()], perm::DEFAULT_TAU)
                .map_err(to_tensor_err)?;
            // Replacement slot fixed by a fresh stream so every evaluation agrees.
            let mut draw = ChaCha8Rng::seed_from_u64(draw_seed);
            let slot = perm::draw_replacements(2, 1, &mut draw)[0];
            let keep = 1 - slot;
            let est = g.reshape(out.waves, &[2, len])?;
            let kept = g.index_select(est, 0, &[perms[0].mapping[keep]])?;
            let tgt = g.constant(Tensor::new(vec![1, len], targets[slot].clone())?);
            let m = g.constant(Tensor::new(vec![1, len], mix.clone())?);
            let parts = if slot == 0 { [m, tgt, kept] } else { [m, kept, tgt] };
            let fake = g.concat(&parts, 0)?;
            let fake = g.reshape(fake, &[1, 3, len])?;
            let dv = disc.params.bind(g, false);
            let scores = disc.forward_bound(g, &dv, fake).map_err(to_tensor_err)?;
            let adv = losses::g_adversarial_loss(
                g,
                &[losses::Contribution {
                    kind: Kind::Context,
                    scores,
                }],
            )
            .map_err(to_tensor_err)?;
            g.add(adv, pit)
        },
        &x,
        GRAD_STEP,
        GRAD_TOL,
    );
    CheckResult::new(
        Suite::Grad,
        name,
        r.pass,
        format!(
            "{} parameters, max rel err {:.3e}, {} kink coordinates skipped{}",
            x.numel(),
            r.max_rel_error,
            r.skipped.len(),
            r.error.map(|e| format!(" ({e})")).unwrap_or_default()
        ),
    )
}

/// Hinge loss of a spectrogram context discriminator against its parameters.
fn discriminator_loss_check(seed: u64) -> CheckResult {
    let name = "discriminator hinge loss";
    let mut rng = rng_for(seed, 301);
    let spec = DiscriminatorSpec {
        domain: Domain::Stft,
        kind: Kind::Context,
        m_conditioned: true,
        i: 1,
        k: 2,
        channels: vec![2, 2, 2, 2],
    };
    let dims = vec![42, 43];
    let disc = match Discriminator::new(spec, dims.clone(), seed + 2) {
        Ok(d) => d,
        Err(e) => return CheckResult::new(Suite::Grad, name, false, e.to_string()),
    };
    let real = random(&mut rng, &[2, 3, 42, 43], 0.0, 1.0);
    let fake = random(&mut rng, &[2, 3, 42, 43], 0.0, 1.0);
    let shapes: Vec<Vec<usize>> = disc.params.tensors.iter().map(|t| t.shape().to_vec()).collect();
    let x = flatten(&disc.params.tensors);
    let r = grad_check(
        |g, flat| {
            let dv = unflatten(g, flat, &shapes)?;
            let rv = g.constant(real.clone());
            let fv = g.constant(fake.clone());
            let rs = disc.forward_bound(g, &dv, rv).map_err(to_tensor_err)?;
            let fs = disc.forward_bound(g, &dv, fv).map_err(to_tensor_err)?;
            let l = losses::d_loss_context(g, rs, fs).map_err(to_tensor_err)?;
            Ok(l.total)
        },
        &x,
        GRAD_STEP,
        GRAD_TOL,
    );
    CheckResult::new(
        Suite::Grad,
        name,
        r.pass,
        format!(
            "{} parameters, max rel err {:.3e}, {} kink coordinates skipped{}",
            x.numel(),
            r.max_rel_error,
            r.skipped.len(),
            r.error.map(|e| format!(" ({e})")).unwrap_or_default()
        ),
    )
}

fn to_tensor_err(e: impl fmt::Display) -> crate::tensor::TensorError {
    crate::tensor::TensorError::InvalidAttr {
        op: "check",
        detail: e.to_string(),
    }
}

fn signal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Targets with some silent rows, and matching noisy estimates.
fn separation_case(rng: &mut ChaCha8Rng, k: usize, n: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    let active = rng.random_range(1..=k);
    let targets: Vec<Vec<f64>> = (0..k)
        .map(|j| if j < active { signal(rng, n) } else { vec![0.0; n] })
        .collect();
    let mix: Vec<f64> = (0..n).map(|i| targets.iter().map(|t| t[i]).sum()).collect();
    let estimates = (0..k).map(|_| signal(rng, n)).collect();
    (targets, estimates, mix)
}

/// Brute-force minimum over every assignment, by recursion rather than the
/// lexicographic successor used in the library.
fn brute_min(cost: &dyn Fn(usize, usize) -> f64, k: usize) -> f64 {
    fn rec(cost: &dyn Fn(usize, usize) -> f64, row: usize, k: usize, used: &mut [bool]) -> f64 {
        if row == k {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..k {
            if !used[c] {
                used[c] = true;
                best = best.min(cost(row, c) + rec(cost, row + 1, k, used));
                used[c] = false;
            }
        }
        best
    }
    rec(cost, 0, k, &mut vec![false; k])
}

fn eq2_reference(s: &[f64], e: &[f64], m: &[f64], tau: f64) -> f64 {
    let en = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
    let floor = if en(s) <= 1e-12 * s.len() as f64 { tau * en(m) } else { tau * en(s) };
    let err: f64 = s.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
    10.0 * (err + floor).log10()
}

fn l1_reference(s: &[f64], e: &[f64]) -> f64 {
    s.iter().zip(e).map(|(a, b)| (a - b).abs()).sum()
}

fn perm_suite(seed: u64) -> Vec<CheckResult> {
    let mut out = vec![];
    let tau = perm::DEFAULT_TAU;

    let mut rng = rng_for(seed, 400);
    let outcomes = (0..ORACLE_CASES)
        .map(|_| {
            let (t, e, m) = separation_case(&mut rng, 4, 64);
            let (base, _) = perm::pit_loss(&t, &e, &m, tau).map_err(|x| x.to_string())?;
            let mut order: Vec<usize> = (0..4).collect();
            order.shuffle(&mut rng);
            let shuffled: Vec<Vec<f64>> = order.iter().map(|&j| e[j].clone()).collect();
            let (after, _) = perm::pit_loss(&t, &shuffled, &m, tau).map_err(|x| x.to_string())?;
            let oracle = brute_min(&|r, c| eq2_reference(&t[r], &e[c], &m, tau), 4);
            if (after - base).abs() >= 1e-9 {
                return Err(format!("shuffled cost {after} vs {base}"));
            }
            if (base - oracle).abs() >= 1e-9 {
                return Err(format!("cost {base} vs brute force {oracle}"));
            }
            Ok((after - base).abs())
        })
        .collect();
    out.push(summarize(Suite::Perm, "PIT invariance, K=4", outcomes, "deviation", 1e-9));

    for (di, domain) in [Domain::Wave, Domain::Stft, Domain::Mask].into_iter().enumerate() {
        let mut rng = rng_for(seed, 410 + di as u64);
        let outcomes = (0..ORACLE_CASES).map(|_| replacement_case(domain, &mut rng)).collect();
        out.push(summarize(
            Suite::Perm,
            &format!("I-replacement vs exhaustive oracle, {domain:?}"),
            outcomes,
            "cost gap",
            1e-9,
        ));
    }
    out
}

fn replacement_case(domain: Domain, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let k = rng.random_range(2..=4);
    let i = rng.random_range(0..k);
    let n = 48;
    let (mut t, mut e, m) = separation_case(rng, k, n);
    let kind = match domain {
        Domain::Wave => PairwiseLossKind::Eq2Waveform { tau: perm::DEFAULT_TAU },
        Domain::Stft => PairwiseLossKind::L1MagStft,
        Domain::Mask => PairwiseLossKind::L1Mask,
    };
    if domain != Domain::Wave {
        t.iter_mut().chain(e.iter_mut()).flatten().for_each(|v| *v = v.abs());
    }
    let cost = |r: usize, c: usize| match domain {
        Domain::Wave => eq2_reference(&t[r], &e[c], &m, perm::DEFAULT_TAU),
        _ => l1_reference(&t[r], &e[c]),
    };
    let oracle = brute_min(&cost, k);
    let mix = (domain == Domain::Wave).then_some(m.as_slice());
    let (fakes, replaced, p) = perm::i_replacement(&t, &e, i, kind, mix, rng).map_err(|x| x.to_string())?;
    if replaced.len() != i || replaced.windows(2).any(|w| w[0] >= w[1]) {
        return Err(format!("replaced slots {replaced:?} for I = {i}"));
    }
    let realized: f64 = (0..k).map(|r| cost(r, p.mapping[r])).sum();
    if (realized - oracle).abs() >= 1e-9 {
        return Err(format!("permutation cost {realized} vs oracle {oracle}"));
    }
    for slot in 0..k {
        let want = if replaced.contains(&slot) { &t[slot] } else { &e[p.mapping[slot]] };
        if &fakes[slot] != want {
            return Err(format!("slot {slot} holds the wrong signal"));
        }
    }
    Ok((realized - oracle).abs())
}

fn dsp_suite(seed: u64) -> Vec<CheckResult> {
    let mut out = vec![];
    let mut rng = rng_for(seed, 500);
    let outcomes = (0..ORACLE_CASES)
        .map(|c| {
            let cfg = if c % 2 == 0 { StftConfig::desk() } else { StftConfig::paper() };
            let n = rng.random_range(cfg.window_len..4 * cfg.window_len + 500);
            let x = signal(&mut rng, n);
            let spec = dsp::stft(&x, &cfg).map_err(|e| e.to_string())?;
            let y = dsp::istft(&spec, &cfg, n).map_err(|e| e.to_string())?;
            let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
            if err < 1e-8 {
                Ok(err)
            } else {
                Err(format!("max error {err:.3e} at length {n}"))
            }
        })
        .collect();
    out.push(summarize(Suite::Dsp, "STFT round trip", outcomes, "abs err", 1e-8));

    let outcomes = (0..ORACLE_CASES)
        .map(|_| {
            let k = rng.random_range(1..=4);
            let n = rng.random_range(1..300);
            let m = signal(&mut rng, n);
            let est: Vec<Vec<f64>> = (0..k).map(|_| signal(&mut rng, n)).collect();
            let p = dsp::mixture_consistency(&est, &m).map_err(|e| e.to_string())?;
            let residual = (0..n)
                .map(|i| (m[i] - p.iter().map(|e| e[i]).sum::<f64>()).abs())
                .fold(0.0f64, f64::max);
            let again = dsp::mixture_consistency(&p, &m).map_err(|e| e.to_string())?;
            let drift = p
                .iter()
                .flatten()
                .zip(again.iter().flatten())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            if residual < 1e-9 && drift < 1e-9 {
                Ok(residual.max(drift))
            } else {
                Err(format!("residual {residual:.3e}, idempotence drift {drift:.3e}"))
            }
        })
        .collect();
    out.push(summarize(Suite::Dsp, "mixture consistency", outcomes, "residual", 1e-9));

    let outcomes = (0..20)
        .map(|_| {
            let sep = Separator::new(tiny_separator(), rng.random()).map_err(|e| e.to_string())?;
            let n = rng.random_range(256..1200);
            let m = signal(&mut rng, n);
            let mut g = Graph::new();
            let v = sep.params.bind(&mut g, false);
            let o = sep.forward_bound(&mut g, &v, &[&m]).map_err(|e| e.to_string())?;
            let est = g.value(o.est_mag).data();
            let mag = &o.spectra.mag;
            let plane = mag.len();
            let err = (0..plane)
                .map(|i| (est[i] + est[plane + i] - mag[i]).abs())
                .fold(0.0f64, f64::max);
            if err < 1e-6 {
                Ok(err)
            } else {
                Err(format!("mask sum deviates by {err:.3e}"))
            }
        })
        .collect();
    out.push(summarize(Suite::Dsp, "masked magnitudes sum to |M|", outcomes, "abs err", 1e-6));
    out
}

fn metrics_suite(seed: u64) -> Vec<CheckResult> {
    let mut out = vec![];
    let mut rng = rng_for(seed, 600);
    let outcomes = (0..ORACLE_CASES)
        .map(|_| {
            let n = rng.random_range(16..256);
            let mut s = signal(&mut rng, n);
            let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            s.iter_mut().for_each(|v| *v /= norm);
            let got = metrics::si_snr(&s, &s);
            let want = 10.0 * ((1.0 + SI_SNR_EPS) / SI_SNR_EPS).log10();
            let dev = (got - want).abs();
            if dev < 0.01 {
                Ok(dev)
            } else {
                Err(format!("identity gives {got} dB, closed form {want} dB"))
            }
        })
        .collect();
    out.push(summarize(Suite::Metrics, "SI-SNR identity closed form", outcomes, "dB", 0.01));

    let outcomes = (0..ORACLE_CASES)
        .map(|_| {
            let n = rng.random_range(4..256);
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n - 1));
            let b = if b >= a { b + 1 } else { b };
            let mut s = vec![0.0; n];
            let mut e = vec![0.0; n];
            s[a] = 1.0;
            e[b] = 1.0;
            let alpha = SI_SNR_EPS / (1.0 + SI_SNR_EPS);
            let want = 10.0 * ((alpha * alpha + SI_SNR_EPS) / (alpha * alpha + 1.0 + SI_SNR_EPS)).log10();
            let got = metrics::si_snr(&s, &e);
            let dev = (got - want).abs();
            if dev < 0.01 {
                Ok(dev)
            } else {
                Err(format!("orthogonal gives {got} dB, closed form {want} dB"))
            }
        })
        .collect();
    out.push(summarize(Suite::Metrics, "SI-SNR orthogonal closed form", outcomes, "dB", 0.01));

    let outcomes = (0..ORACLE_CASES)
        .map(|_| {
            let k = rng.random_range(2..=4);
            let (t, _, m) = separation_case(&mut rng, k, 64);
            let bypass = vec![m.clone(); k];
            let r = metrics::eval_mixture(&t, &bypass, &m).map_err(|e| e.to_string())?;
            let dev = r.sources.iter().map(|s| s.improvement().abs()).fold(0.0f64, f64::max);
            if dev < 1e-9 {
                Ok(dev)
            } else {
                Err(format!("bypass improvement {dev:.3e} dB"))
            }
        })
        .collect();
    out.push(summarize(Suite::Metrics, "bypass improvement is zero", outcomes, "dB", 1e-9));
    out
}
