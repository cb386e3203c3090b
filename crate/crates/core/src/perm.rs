//! Permutation matching, the permutation invariant loss and I-replacement.
//!
//! All matching is done by exhaustive enumeration of the `K!` assignments in
//! lexicographic order, keeping the first strict improvement, so ties resolve
//! to the lexicographically smallest mapping.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics;

/// Exhaustive search is refused above this many sources.
pub const MAX_EXHAUSTIVE_SOURCES: usize = 8;

/// Default mixture-relative threshold of the log-MSE loss (30 dB).
pub const DEFAULT_TAU: f64 = 1e-3;

/// Per-sample energy below which a target counts as silent.
pub const SILENCE_PER_SAMPLE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PermError {
    #[error("{k} sources exceed the exhaustive-search guard of {max}; raise MAX_EXHAUSTIVE_SOURCES deliberately (or add an assignment solver checked against enumeration)")]
    TooManySources { k: usize, max: usize },
    #[error("{targets} targets vs {estimates} estimates")]
    CountMismatch { targets: usize, estimates: usize },
    #[error("no sources given")]
    Empty,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("the mixture is all zeros; the silent-target branch needs a non-zero mix")]
    SilentMix,
    #[error("the mixture-thresholded loss needs the mixture")]
    MissingMix,
    #[error("threshold tau must be positive, got {0}")]
    InvalidTau(f64),
    #[error("replacement count {i} must be below the source count {k}")]
    InvalidReplacement { i: usize, k: usize },
}

pub type Result<T> = std::result::Result<T, PermError>;

/// Bijection from target index to estimate index with its matching cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Permutation {
    pub mapping: Vec<usize>,
    pub cost: f64,
}

impl Permutation {
    pub fn identity(k: usize) -> Self {
        Self {
            mapping: (0..k).collect(),
            cost: 0.0,
        }
    }

    /// Estimates reordered so that entry `k` pairs with target `k`.
    pub fn apply<T: Clone>(&self, estimates: &[T]) -> Vec<T> {
        self.mapping.iter().map(|&j| estimates[j].clone()).collect()
    }

    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.mapping.len()];
        for (k, &j) in self.mapping.iter().enumerate() {
            inv[j] = k;
        }
        inv
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairwiseLossKind {
    /// Mixture-thresholded log-MSE in dB.
    Eq2Waveform { tau: f64 },
    L1MagStft,
    L1Mask,
    NegSiSnr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Min,
    Max,
}

pub fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn is_silent(x: &[f64]) -> bool {
    energy(x) <= SILENCE_PER_SAMPLE * x.len() as f64
}

/// Log-MSE between a target and an estimate, thresholded by the target
/// energy, or by the mixture energy when the target is silent.
pub fn pairwise_loss_eq2(target: &[f64], estimate: &[f64], mix: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(PermError::InvalidTau(tau));
    }
    if target.len() != estimate.len() || target.len() != mix.len() {
        return Err(PermError::LengthMismatch(format!(
            "target {}, estimate {}, mix {}",
            target.len(),
            estimate.len(),
            mix.len()
        )));
    }
    let mix_energy = energy(mix);
    if mix_energy == 0.0 {
        return Err(PermError::SilentMix);
    }
    let err: f64 = target.iter().zip(estimate).map(|(s, e)| (s - e) * (s - e)).sum();
    let floor = if is_silent(target) {
        tau * mix_energy
    } else {
        tau * energy(target)
    };
    Ok(10.0 * (err + floor).log10())
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn check_items<T: AsRef<[f64]>>(targets: &[T], estimates: &[T]) -> Result<usize> {
    let k = targets.len();
    if k == 0 {
        return Err(PermError::Empty);
    }
    if estimates.len() != k {
        return Err(PermError::CountMismatch {
            targets: k,
            estimates: estimates.len(),
        });
    }
    if k > MAX_EXHAUSTIVE_SOURCES {
        return Err(PermError::TooManySources {
            k,
            max: MAX_EXHAUSTIVE_SOURCES,
        });
    }
    let len = targets[0].as_ref().len();
    if targets.iter().chain(estimates).any(|x| x.as_ref().len() != len) {
        return Err(PermError::LengthMismatch("items differ in length".into()));
    }
    Ok(k)
}

/// `matrix[k][j]` = loss between target `k` and estimate `j`.
pub fn loss_matrix<T: AsRef<[f64]>>(
    targets: &[T],
    estimates: &[T],
    kind: PairwiseLossKind,
    mix: Option<&[f64]>,
) -> Result<Vec<Vec<f64>>> {
    check_items(targets, estimates)?;
    targets
        .iter()
        .map(|s| {
            estimates
                .iter()
                .map(|e| {
                    let (s, e) = (s.as_ref(), e.as_ref());
                    match kind {
                        PairwiseLossKind::Eq2Waveform { tau } => {
                            pairwise_loss_eq2(s, e, mix.ok_or(PermError::MissingMix)?, tau)
                        }
                        PairwiseLossKind::L1MagStft | PairwiseLossKind::L1Mask => Ok(l1(s, e)),
                        PairwiseLossKind::NegSiSnr => Ok(-metrics::si_snr(s, e)),
                    }
                })
                .collect()
        })
        .collect()
}

/// Advance `p` to the next permutation in lexicographic order.
fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Exhaustive assignment over a square cost matrix.
pub fn optimal_permutation_from_matrix(matrix: &[Vec<f64>], direction: Direction) -> Result<Permutation> {
    let k = matrix.len();
    if k == 0 {
        return Err(PermError::Empty);
    }
    if k > MAX_EXHAUSTIVE_SOURCES {
        return Err(PermError::TooManySources {
            k,
            max: MAX_EXHAUSTIVE_SOURCES,
        });
    }
    if matrix.iter().any(|row| row.len() != k) {
        return Err(PermError::CountMismatch {
            targets: k,
            estimates: matrix.iter().map(Vec::len).max().unwrap_or(0),
        });
    }
    let score = |p: &[usize]| p.iter().enumerate().map(|(t, &e)| matrix[t][e]).sum::<f64>();
    let mut p: Vec<usize> = (0..k).collect();
    let mut best = Permutation {
        cost: score(&p),
        mapping: p.clone(),
    };
    while next_permutation(&mut p) {
        let c = score(&p);
        let better = match direction {
            Direction::Min => c < best.cost,
            Direction::Max => c > best.cost,
        };
        if better {
            best = Permutation {
                mapping: p.clone(),
                cost: c,
            };
        }
    }
    Ok(best)
}

pub fn optimal_permutation<T: AsRef<[f64]>>(
    targets: &[T],
    estimates: &[T],
    kind: PairwiseLossKind,
    mix: Option<&[f64]>,
    direction: Direction,
) -> Result<Permutation> {
    let m = loss_matrix(targets, estimates, kind, mix)?;
    optimal_permutation_from_matrix(&m, direction)
}

/// Permutation invariant loss: the minimum over assignments of the summed
/// mixture-thresholded log-MSE, with the minimising permutation.
pub fn pit_loss<T: AsRef<[f64]>>(targets: &[T], estimates: &[T], mix: &[f64], tau: f64) -> Result<(f64, Permutation)> {
    let p = optimal_permutation(
        targets,
        estimates,
        PairwiseLossKind::Eq2Waveform { tau },
        Some(mix),
        Direction::Min,
    )?;
    Ok((p.cost, p))
}

/// Where an entry of a fake context tuple comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FakeEntry {
    /// Ground truth for this slot; carries no gradient.
    Target(usize),
    /// Estimate with this (unpermuted) index.
    Estimate(usize),
}

/// Recipe for one I-replaced fake: slot `k` holds `entries[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplacementPlan {
    pub permutation: Permutation,
    pub replaced: Vec<usize>,
    pub entries: Vec<FakeEntry>,
}

impl ReplacementPlan {
    pub fn materialize<T: Clone>(&self, targets: &[T], estimates: &[T]) -> Vec<T> {
        self.entries
            .iter()
            .map(|e| match *e {
                FakeEntry::Target(k) => targets[k].clone(),
                FakeEntry::Estimate(j) => estimates[j].clone(),
            })
            .collect()
    }
}

/// Sorts estimates by the optimal permutation, draws `i` slots uniformly
/// without replacement, and substitutes their ground truth.
pub fn plan_replacement<T: AsRef<[f64]>, R: Rng + ?Sized>(
    targets: &[T],
    estimates: &[T],
    i: usize,
    kind: PairwiseLossKind,
    mix: Option<&[f64]>,
    rng: &mut R,
) -> Result<ReplacementPlan> {
    let k = targets.len();
    if i >= k.max(1) {
        return Err(PermError::InvalidReplacement { i, k });
    }
    let permutation = optimal_permutation(targets, estimates, kind, mix, Direction::Min)?;
    let replaced = draw_replacements(k, i, rng);
    let entries = (0..k)
        .map(|slot| {
            if replaced.contains(&slot) {
                FakeEntry::Target(slot)
            } else {
                FakeEntry::Estimate(permutation.mapping[slot])
            }
        })
        .collect();
    Ok(ReplacementPlan {
        permutation,
        replaced,
        entries,
    })
}

/// `i` distinct slots out of `k`, sorted.
pub fn draw_replacements<R: Rng + ?Sized>(k: usize, i: usize, rng: &mut R) -> Vec<usize> {
    let mut slots = rand::seq::index::sample(rng, k, i).into_vec();
    slots.sort_unstable();
    slots
}

/// Value-level I-replacement: returns the fake tuple, the replaced slots and
/// the matching permutation.
pub fn i_replacement<R: Rng + ?Sized>(
    targets: &[Vec<f64>],
    estimates: &[Vec<f64>],
    i: usize,
    kind: PairwiseLossKind,
    mix: Option<&[f64]>,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, Vec<usize>, Permutation)> {
    let plan = plan_replacement(targets, estimates, i, kind, mix, rng)?;
    let fakes = plan.materialize(targets, estimates);
    Ok((fakes, plan.replaced, plan.permutation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_sig(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn unit(mut x: Vec<f64>) -> Vec<f64> {
        let e = energy(&x).sqrt();
        x.iter_mut().for_each(|v| *v /= e);
        x
    }

    /// Independent evaluation of the thresholded loss, written from the formula.
    fn eq2_oracle(s: &[f64], est: &[f64], m: &[f64], tau: f64) -> f64 {
        let mut se = 0.0;
        let mut ee = 0.0;
        let mut me = 0.0;
        let mut de = 0.0;
        for i in 0..s.len() {
            se += s[i].powi(2);
            ee += est[i].powi(2);
            me += m[i].powi(2);
            de += (s[i] - est[i]).powi(2);
        }
        if se <= 1e-12 * s.len() as f64 {
            10.0 * (ee + tau * me).log10()
        } else {
            10.0 * (de + tau * se).log10()
        }
    }

    /// Brute force via recursive enumeration of every assignment.
    fn brute_min(matrix: &[Vec<f64>]) -> (f64, Vec<Vec<usize>>) {
        fn rec(m: &[Vec<f64>], row: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, all: &mut Vec<(f64, Vec<usize>)>) {
            if row == m.len() {
                let c = cur.iter().enumerate().map(|(r, &c)| m[r][c]).sum();
                all.push((c, cur.clone()));
                return;
            }
            for c in 0..m.len() {
                if !used[c] {
                    used[c] = true;
                    cur.push(c);
                    rec(m, row + 1, used, cur, all);
                    cur.pop();
                    used[c] = false;
                }
            }
        }
        let mut all = vec![];
        rec(matrix, 0, &mut vec![false; matrix.len()], &mut vec![], &mut all);
        let best = all.iter().map(|a| a.0).fold(f64::INFINITY, f64::min);
        let argmins = all.into_iter().filter(|a| a.0 == best).map(|a| a.1).collect();
        (best, argmins)
    }

    #[test]
    fn eq2_floors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = unit(rand_sig(&mut rng, 64));
        let m = unit(rand_sig(&mut rng, 64));
        let v = pairwise_loss_eq2(&s, &s, &m, 1e-3).unwrap();
        assert!((v + 30.0).abs() < 1e-9);
        let z = vec![0.0; 64];
        let v = pairwise_loss_eq2(&z, &z, &m, 1e-3).unwrap();
        assert!((v + 30.0).abs() < 1e-9);
    }

    #[test]
    fn eq2_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let s = rand_sig(&mut rng, 64);
            let e = rand_sig(&mut rng, 64);
            let m = rand_sig(&mut rng, 64);
            let a = pairwise_loss_eq2(&s, &e, &m, 1e-3).unwrap();
            assert!((a - eq2_oracle(&s, &e, &m, 1e-3)).abs() < 1e-12);
            let z = vec![0.0; 64];
            let a = pairwise_loss_eq2(&z, &e, &m, 1e-2).unwrap();
            assert!((a - eq2_oracle(&z, &e, &m, 1e-2)).abs() < 1e-12);
        }
    }

    #[test]
    fn eq2_rejects_silent_mix_and_bad_tau() {
        let z = vec![0.0; 8];
        assert_eq!(pairwise_loss_eq2(&z, &z, &z, 1e-3), Err(PermError::SilentMix));
        assert!(matches!(pairwise_loss_eq2(&z, &z, &[1.0; 8], 0.0), Err(PermError::InvalidTau(_))));
    }

    #[test]
    fn identity_and_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Vec<Vec<f64>> = (0..3).map(|_| rand_sig(&mut rng, 32)).collect();
        let p = optimal_permutation(&t, &t, PairwiseLossKind::L1MagStft, None, Direction::Min).unwrap();
        assert_eq!(p.mapping, vec![0, 1, 2]);
        let t2 = vec![t[0].clone(), t[1].clone()];
        let swapped = vec![t[1].clone(), t[0].clone()];
        let p = optimal_permutation(&t2, &swapped, PairwiseLossKind::L1MagStft, None, Direction::Min).unwrap();
        assert_eq!(p.mapping, vec![1, 0]);
    }

    #[test]
    fn guard_rejects_large_k() {
        let t = vec![vec![0.0; 2]; 9];
        assert!(matches!(
            optimal_permutation(&t, &t, PairwiseLossKind::L1Mask, None, Direction::Min),
            Err(PermError::TooManySources { k: 9, max: 8 })
        ));
    }

    #[test]
    fn ties_break_lexicographically() {
        let m = vec![vec![1.0; 3]; 3];
        let p = optimal_permutation_from_matrix(&m, Direction::Min).unwrap();
        assert_eq!(p.mapping, vec![0, 1, 2]);
    }

    #[test]
    fn matches_brute_force_l1() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let t: Vec<Vec<f64>> = (0..4).map(|_| rand_sig(&mut rng, 16)).collect();
            let e: Vec<Vec<f64>> = (0..4).map(|_| rand_sig(&mut rng, 16)).collect();
            let m = loss_matrix(&t, &e, PairwiseLossKind::L1MagStft, None).unwrap();
            let p = optimal_permutation_from_matrix(&m, Direction::Min).unwrap();
            let (best, argmins) = brute_min(&m);
            assert!((p.cost - best).abs() < 1e-12);
            assert!(argmins.contains(&p.mapping));
        }
    }

    #[test]
    fn pit_on_shuffled_perfect_estimates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t: Vec<Vec<f64>> = (0..3).map(|_| unit(rand_sig(&mut rng, 64))).collect();
        let mix: Vec<f64> = (0..64).map(|i| t.iter().map(|s| s[i]).sum()).collect();
        let shuffle = [2, 0, 1];
        let est: Vec<Vec<f64>> = shuffle.iter().map(|&i| t[i].clone()).collect();
        let (loss, p) = pit_loss(&t, &est, &mix, 1e-3).unwrap();
        assert!((loss + 90.0).abs() < 1e-9);
        // target k sits at the estimate index holding it
        for (k, &j) in p.mapping.iter().enumerate() {
            assert_eq!(shuffle[j], k);
        }
    }

    #[test]
    fn pit_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let t: Vec<Vec<f64>> = (0..3).map(|_| rand_sig(&mut rng, 40)).collect();
            let e: Vec<Vec<f64>> = (0..3).map(|_| rand_sig(&mut rng, 40)).collect();
            let mix = rand_sig(&mut rng, 40);
            let (loss, p) = pit_loss(&t, &e, &mix, 1e-3).unwrap();
            let mut best = f64::INFINITY;
            for a in 0..3 {
                for b in 0..3 {
                    for c in 0..3 {
                        if a != b && b != c && a != c {
                            let v = eq2_oracle(&t[0], &e[a], &mix, 1e-3)
                                + eq2_oracle(&t[1], &e[b], &mix, 1e-3)
                                + eq2_oracle(&t[2], &e[c], &mix, 1e-3);
                            best = best.min(v);
                        }
                    }
                }
            }
            assert!((loss - best).abs() < 1e-9);
            let recomputed: f64 = p
                .mapping
                .iter()
                .enumerate()
                .map(|(k, &j)| pairwise_loss_eq2(&t[k], &e[j], &mix, 1e-3).unwrap())
                .sum();
            assert!((recomputed - p.cost).abs() < 1e-9);
        }
    }

    #[test]
    fn replacement_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t: Vec<Vec<f64>> = (0..2).map(|_| rand_sig(&mut rng, 16)).collect();
        let est = vec![t[1].iter().map(|v| v * 0.9).collect::<Vec<_>>(), t[0].iter().map(|v| v * 0.9).collect()];
        let (fakes, lambda, p) = i_replacement(&t, &est, 0, PairwiseLossKind::L1Mask, None, &mut rng).unwrap();
        assert!(lambda.is_empty());
        assert_eq!(p.mapping, vec![1, 0]);
        assert_eq!(fakes, vec![est[1].clone(), est[0].clone()]);

        // I = 1 with the draw landing on slot 0
        let plan = loop {
            let plan = plan_replacement(&t, &est, 1, PairwiseLossKind::L1Mask, None, &mut rng).unwrap();
            if plan.replaced == vec![0] {
                break plan;
            }
        };
        assert_eq!(plan.materialize(&t, &est), vec![t[0].clone(), est[0].clone()]);
        assert_eq!(plan.entries, vec![FakeEntry::Target(0), FakeEntry::Estimate(0)]);

        assert!(matches!(
            i_replacement(&t, &est, 2, PairwiseLossKind::L1Mask, None, &mut rng),
            Err(PermError::InvalidReplacement { i: 2, k: 2 })
        ));
    }

    #[test]
    fn replacement_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t: Vec<Vec<f64>> = (0..4).map(|_| rand_sig(&mut rng, 8)).collect();
        let e: Vec<Vec<f64>> = (0..4).map(|_| rand_sig(&mut rng, 8)).collect();
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..10)
                .map(|_| plan_replacement(&t, &e, 2, PairwiseLossKind::L1Mask, None, &mut r).unwrap().replaced)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(99), draw(99));
    }

    proptest! {
        #[test]
        fn pit_is_permutation_invariant(seed in 0u64..10_000, sigma in 0usize..24, pi in 0usize..24) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t: Vec<Vec<f64>> = (0..4).map(|_| rand_sig(&mut rng, 24)).collect();
            let e: Vec<Vec<f64>> = (0..4).map(|_| rand_sig(&mut rng, 24)).collect();
            let mix = rand_sig(&mut rng, 24);
            let nth = |n: usize| {
                let mut p: Vec<usize> = (0..4).collect();
                for _ in 0..n { next_permutation(&mut p); }
                p
            };
            let (base, _) = pit_loss(&t, &e, &mix, 1e-3).unwrap();
            let tp: Vec<Vec<f64>> = nth(sigma).iter().map(|&i| t[i].clone()).collect();
            let ep: Vec<Vec<f64>> = nth(pi).iter().map(|&i| e[i].clone()).collect();
            prop_assert!((pit_loss(&tp, &e, &mix, 1e-3).unwrap().0 - base).abs() < 1e-9);
            prop_assert!((pit_loss(&t, &ep, &mix, 1e-3).unwrap().0 - base).abs() < 1e-9);
            let identity: f64 = (0..4).map(|k| pairwise_loss_eq2(&t[k], &e[k], &mix, 1e-3).unwrap()).sum();
            prop_assert!(base <= identity + 1e-12);
        }

        #[test]
        fn max_equals_min_of_negation(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m: Vec<Vec<f64>> = (0..4).map(|_| rand_sig(&mut rng, 4)).collect();
            let neg: Vec<Vec<f64>> = m.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
            let a = optimal_permutation_from_matrix(&m, Direction::Max).unwrap();
            let b = optimal_permutation_from_matrix(&neg, Direction::Min).unwrap();
            prop_assert_eq!(a.mapping, b.mapping);
        }

        #[test]
        fn full_replacement_leaves_one_estimate(seed in 0u64..10_000, k in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t: Vec<Vec<f64>> = (0..k).map(|_| rand_sig(&mut rng, 8)).collect();
            let e: Vec<Vec<f64>> = (0..k).map(|_| rand_sig(&mut rng, 8)).collect();
            let plan = plan_replacement(&t, &e, k - 1, PairwiseLossKind::L1Mask, None, &mut rng).unwrap();
            let n_est = plan.entries.iter().filter(|e| matches!(e, FakeEntry::Estimate(_))).count();
            prop_assert_eq!(n_est, 1);
        }
    }
}
