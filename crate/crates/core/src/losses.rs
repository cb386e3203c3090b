//! Hinge adversarial objectives, the differentiable PIT loss and the
//! adaptive weight that balances them.
//!
//! Discriminator losses are the quantities the discriminators maximise; the
//! trainer minimises their negation. Scores are averaged over the batch.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perm::{self, Direction, PairwiseLossKind, Permutation};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("no adversarial contributions")]
    NoContributions,
    #[error("real and fake score counts differ: {real} vs {fake}")]
    ScoreCount { real: usize, fake: usize },
    #[error("invalid lambda state: {0}")]
    InvalidLambda(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Perm(#[from] perm::PermError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Discriminator objective split into its hinge terms.
#[derive(Debug, Clone, Copy)]
pub struct DLoss {
    pub total: Var,
    pub real: Var,
    pub fake: Var,
}

fn hinge_pair(g: &mut Graph, real: Var, fake: Var) -> Result<DLoss> {
    let (nr, nf) = (g.value(real).numel(), g.value(fake).numel());
    if nr != nf || nr == 0 {
        return Err(LossError::ScoreCount { real: nr, fake: nf });
    }
    // min(0, −1 + D(real)) and min(0, −1 − D(fake))
    let r = g.add_scalar(real, -1.0);
    let r = g.min0(r);
    let real_term = g.mean_all(r)?;
    let f = g.neg(fake);
    let f = g.add_scalar(f, -1.0);
    let f = g.min0(f);
    let fake_term = g.mean_all(f)?;
    let total = g.add(real_term, fake_term)?;
    Ok(DLoss {
        total,
        real: real_term,
        fake: fake_term,
    })
}

/// `(1/K) Σ_k [min(0, −1 + real_k) + min(0, −1 − fake_k)]`, also averaged
/// over any batch folded into the score tensors.
pub fn d_loss_instance(g: &mut Graph, real: Var, fake: Var) -> Result<DLoss> {
    hinge_pair(g, real, fake)
}

/// `min(0, −1 + real) + min(0, −1 − fake)`, batch-averaged.
pub fn d_loss_context(g: &mut Graph, real: Var, fake: Var) -> Result<DLoss> {
    hinge_pair(g, real, fake)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Instance,
    Context,
}

/// Fake-input scores from one discriminator, as seen by the separator.
#[derive(Debug, Clone, Copy)]
pub struct Contribution {
    pub kind: Kind,
    pub scores: Var,
}

/// Σ over contributions of `−mean(scores)`. Instance scores hold `K` entries
/// per example and context scores one, so the mean realises the `1/K`
/// weighting and the batch average together.
pub fn g_adversarial_loss(g: &mut Graph, contributions: &[Contribution]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for c in contributions {
        let m = g.mean_all(c.scores)?;
        let term = g.neg(m);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    total.ok_or(LossError::NoContributions)
}

/// Running estimate of the weight that scales `L_PIT` to the magnitude of
/// the adversarial loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaState {
    pub beta: f64,
    pub delta: f64,
    pub min: f64,
    pub max: f64,
    /// Unclamped EMA of the raw ratio; `None` before the first update.
    pub ema: Option<f64>,
}

impl Default for LambdaState {
    fn default() -> Self {
        Self {
            beta: 0.99,
            delta: 1e-8,
            min: 1e-3,
            max: 1e3,
            ema: None,
        }
    }
}

impl LambdaState {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(LossError::InvalidLambda(format!("beta {} outside [0, 1)", self.beta)));
        }
        if !(self.delta > 0.0) || !(self.min > 0.0 && self.min <= self.max) {
            return Err(LossError::InvalidLambda("delta must be positive and min <= max".into()));
        }
        Ok(())
    }

    /// Folds in one observation and returns the clamped weight.
    pub fn update(&mut self, g_loss: f64, pit: f64) -> f64 {
        let raw = g_loss.abs() / (pit.abs() + self.delta);
        let ema = match self.ema {
            None => raw,
            Some(prev) => self.beta * prev + (1.0 - self.beta) * raw,
        };
        self.ema = Some(ema);
        ema.clamp(self.min, self.max)
    }
}

/// `g_loss + λ·pit` with λ from detached magnitudes.
pub fn combine_with_pit(g: &mut Graph, g_loss: Var, pit: Var, state: &mut LambdaState) -> Result<(Var, f64)> {
    let lambda = state.update(g.value(g_loss).item(), g.value(pit).item());
    let scaled = g.scale(pit, lambda);
    Ok((g.add(g_loss, scaled)?, lambda))
}

/// Batch PIT loss: per example, the optimal permutation under the
/// thresholded log-MSE is found on values, then the aligned loss
/// `Σ_k 10·log10(‖s_k − ŝ*_k‖² + floor_k)` is built on the graph and
/// averaged over the batch.
///
/// `estimates` is `[B, K, L]`; `targets[b][k]` and `mixes[b]` are plain data.
pub fn pit_loss(
    g: &mut Graph,
    estimates: Var,
    targets: &[Vec<Vec<f64>>],
    mixes: &[Vec<f64>],
    tau: f64,
) -> Result<(Var, Vec<Permutation>)> {
    let shape = g.shape(estimates).to_vec();
    if shape.len() != 3 || shape[0] != targets.len() || shape[0] != mixes.len() {
        return Err(TensorError::ShapeMismatch {
            op: "pit_loss",
            axis: 0,
            detail: format!("estimates {shape:?} for {} target sets", targets.len()),
        }
        .into());
    }
    let (b, k, l) = (shape[0], shape[1], shape[2]);
    let est = g.value(estimates).data().to_vec();
    let mut perms = Vec::with_capacity(b);
    let mut index = Vec::with_capacity(b * k);
    let mut flat_targets = Vec::with_capacity(b * k * l);
    let mut floors = Vec::with_capacity(b * k);
    for i in 0..b {
        let rows: Vec<&[f64]> = (0..k).map(|j| &est[(i * k + j) * l..(i * k + j + 1) * l]).collect();
        let tg: Vec<&[f64]> = targets[i].iter().map(|t| t.as_slice()).collect();
        let p = perm::optimal_permutation(
            &tg,
            &rows,
            PairwiseLossKind::Eq2Waveform { tau },
            Some(&mixes[i]),
            Direction::Min,
        )?;
        let mix_energy = perm::energy(&mixes[i]);
        for (slot, &j) in p.mapping.iter().enumerate() {
            index.push(i * k + j);
            let t = &targets[i][slot];
            flat_targets.extend_from_slice(t);
            floors.push(if perm::is_silent(t) { tau * mix_energy } else { tau * perm::energy(t) });
        }
        perms.push(p);
    }
    let flat = g.reshape(estimates, &[b * k, l])?;
    let aligned = g.index_select(flat, 0, &index)?;
    let tgt = g.constant(Tensor::new(vec![b * k, l], flat_targets)?);
    let diff = g.sub(aligned, tgt)?;
    let sq = g.square(diff);
    let err = g.sum(sq, &[1])?;
    let floor = g.constant(Tensor::new(vec![b * k, 1], floors)?);
    let arg = g.add(err, floor)?;
    let lg = g.log10(arg);
    let total = g.sum_all(lg)?;
    Ok((g.scale(total, 10.0 / b as f64), perms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalars(g: &mut Graph, v: &[f64]) -> Var {
        g.constant(Tensor::from_vec(v.to_vec()))
    }

    fn d_inst(real: &[f64], fake: &[f64]) -> f64 {
        let mut g = Graph::new();
        let (r, f) = (scalars(&mut g, real), scalars(&mut g, fake));
        let l = d_loss_instance(&mut g, r, f).unwrap();
        g.value(l.total).item()
    }

    fn d_ctx(real: f64, fake: f64) -> f64 {
        let mut g = Graph::new();
        let (r, f) = (scalars(&mut g, &[real]), scalars(&mut g, &[fake]));
        let l = d_loss_context(&mut g, r, f).unwrap();
        g.value(l.total).item()
    }

    #[test]
    fn instance_examples() {
        assert_eq!(d_inst(&[1.0; 4], &[-1.0; 4]), 0.0);
        assert_eq!(d_inst(&[0.0; 4], &[0.0; 4]), -2.0);
        let real = [0.3, 1.7, -0.4, 0.9];
        let fake = [-2.0, 0.1, -0.5, 0.6];
        let mut expected = 0.0;
        for (r, f) in real.iter().zip(&fake) {
            expected += (r - 1.0f64).min(0.0) + (-1.0f64 - f).min(0.0);
        }
        assert!((d_inst(&real, &fake) - expected / 4.0).abs() < 1e-15);
    }

    #[test]
    fn context_examples() {
        assert_eq!(d_ctx(1.0, -1.0), 0.0);
        assert_eq!(d_ctx(-1.0, 1.0), -4.0);
        assert!((d_ctx(0.3, -0.2) + 1.5).abs() < 1e-15);
    }

    #[test]
    fn score_count_mismatch_rejected() {
        let mut g = Graph::new();
        let (r, f) = (scalars(&mut g, &[0.0; 3]), scalars(&mut g, &[0.0; 2]));
        assert!(matches!(d_loss_instance(&mut g, r, f), Err(LossError::ScoreCount { .. })));
    }

    #[test]
    fn generator_loss_examples() {
        let mut g = Graph::new();
        let zeros = scalars(&mut g, &[0.0; 4]);
        let l = g_adversarial_loss(&mut g, &[Contribution { kind: Kind::Instance, scores: zeros }]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let ones = scalars(&mut g, &[1.0; 4]);
        let l = g_adversarial_loss(&mut g, &[Contribution { kind: Kind::Instance, scores: ones }]).unwrap();
        assert_eq!(g.value(l).item(), -1.0);
        let inst = scalars(&mut g, &[0.4, -1.2, 2.0, 0.3]);
        let ctx = scalars(&mut g, &[0.75]);
        let l = g_adversarial_loss(
            &mut g,
            &[
                Contribution { kind: Kind::Instance, scores: inst },
                Contribution { kind: Kind::Context, scores: ctx },
            ],
        )
        .unwrap();
        let expected = -(0.4 - 1.2 + 2.0 + 0.3) / 4.0 - 0.75;
        assert!((g.value(l).item() - expected).abs() < 1e-15);
        assert!(matches!(g_adversarial_loss(&mut g, &[]), Err(LossError::NoContributions)));
    }

    #[test]
    fn generator_loss_is_linear_in_scores() {
        let mut g = Graph::new();
        let inst = g.leaf(Tensor::from_vec(vec![0.1, 0.2, 0.3, 0.4]), true);
        let ctx = g.leaf(Tensor::from_vec(vec![0.5]), true);
        let l = g_adversarial_loss(
            &mut g,
            &[
                Contribution { kind: Kind::Instance, scores: inst },
                Contribution { kind: Kind::Context, scores: ctx },
            ],
        )
        .unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(inst).unwrap(), &[-0.25; 4]);
        assert_eq!(g.grad(ctx).unwrap(), &[-1.0]);
    }

    #[test]
    fn lambda_examples() {
        let mut g = Graph::new();
        let gl = g.leaf(Tensor::scalar(-2.5), true);
        let pit = g.leaf(Tensor::scalar(2.5), true);
        let mut st = LambdaState::default();
        let (total, lambda) = combine_with_pit(&mut g, gl, pit, &mut st).unwrap();
        assert!((lambda - 1.0).abs() < 1e-8);
        assert!((g.value(total).item() - (-2.5 + 2.5 * lambda)).abs() < 1e-15);
        g.backward(total).unwrap();
        assert_eq!(g.grad(gl).unwrap(), &[1.0]);
        assert_eq!(g.grad(pit).unwrap(), &[lambda]);

        let mut st = LambdaState::default();
        assert_eq!(st.update(3.0, 0.0), 1e3);
    }

    #[test]
    fn lambda_matches_scripted_recurrence() {
        let pairs = [(1.0, 2.0), (3.0, 1.0), (0.5, 0.5), (10.0, 0.1), (2.0, 8.0), (0.0, 1.0)];
        let mut st = LambdaState::default();
        let mut ema = 0.5f64; // first observation 1/2
        for (i, &(gl, p)) in pairs.iter().enumerate() {
            let raw = gl / (p + 1e-8);
            if i > 0 {
                ema = 0.99 * ema + 0.01 * raw;
            } else {
                ema = raw;
            }
            let lambda = st.update(gl, p);
            assert!((lambda - ema.clamp(1e-3, 1e3)).abs() < 1e-12);
        }
    }

    #[test]
    fn pit_loss_matches_value_level_oracle() {
        let targets = vec![
            vec![vec![0.5, -0.2, 0.1, 0.0], vec![0.0; 4]],
            vec![vec![0.1, 0.2, 0.3, 0.4], vec![-0.3, 0.0, 0.2, 0.1]],
        ];
        let mixes: Vec<Vec<f64>> = targets
            .iter()
            .map(|t| (0..4).map(|i| t[0][i] + t[1][i]).collect())
            .collect();
        let est = vec![0.0, 0.1, 0.0, 0.1, 0.4, -0.1, 0.2, 0.0, -0.2, 0.1, 0.1, 0.0, 0.2, 0.1, 0.2, 0.5];
        let mut g = Graph::new();
        let e = g.leaf(Tensor::new(vec![2, 2, 4], est.clone()).unwrap(), true);
        let (l, perms) = pit_loss(&mut g, e, &targets, &mixes, 1e-3).unwrap();
        let mut expected = 0.0;
        for b in 0..2 {
            let rows: Vec<Vec<f64>> = (0..2).map(|j| est[(b * 2 + j) * 4..(b * 2 + j + 1) * 4].to_vec()).collect();
            let (v, p) = perm::pit_loss(&targets[b], &rows, &mixes[b], 1e-3).unwrap();
            assert_eq!(p, perms[b]);
            expected += v;
        }
        assert!((g.value(l).item() - expected / 2.0).abs() < 1e-12);
        assert_eq!(perms[0].mapping, vec![1, 0]);
    }

    #[test]
    fn pit_loss_gradient_matches_finite_differences() {
        let targets = vec![vec![vec![0.5, -0.2, 0.1], vec![0.0; 3]]];
        let mixes = vec![vec![0.5, -0.2, 0.1]];
        let x = Tensor::new(vec![1, 2, 3], vec![0.05, 0.1, -0.1, 0.4, -0.1, 0.2]).unwrap();
        let r = crate::tensor::grad_check(
            |g, v| Ok(pit_loss(g, v, &targets, &mixes, 1e-3).map_err(|e| match e {
                LossError::Tensor(t) => t,
                other => TensorError::InvalidAttr { op: "pit", detail: other.to_string() },
            })?.0),
            &x,
            1e-6,
            1e-5,
        );
        assert!(r.pass, "{r:?}");
    }

    proptest! {
        #[test]
        fn hinge_losses_are_nonpositive(real in proptest::collection::vec(-3.0f64..3.0, 1..6), shift in -3.0f64..3.0) {
            let fake: Vec<f64> = real.iter().map(|v| v + shift).collect();
            let v = d_inst(&real, &fake);
            prop_assert!(v <= 0.0);
            let optimal = real.iter().all(|r| *r >= 1.0) && fake.iter().all(|f| *f <= -1.0);
            prop_assert_eq!(v == 0.0, optimal);
        }

        #[test]
        fn lambda_stays_clamped(obs in proptest::collection::vec((0.0f64..1e6, 0.0f64..1e6), 1..30)) {
            let mut st = LambdaState::default();
            for (a, b) in obs {
                let l = st.update(a, b);
                prop_assert!((1e-3..=1e3).contains(&l));
            }
        }
    }
}
