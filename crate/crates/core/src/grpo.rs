//! Group advantages and the clipped token-level surrogate objective.
//!
//! The objective for one group of `G' = G + M` trajectories (fresh rollouts
//! plus replayed successes) is
//!
//! ```text
//! J = sum_i sum_t w_i * min(r_it * A_i, clip(r_it, 1 - eps_low, 1 + eps_high) * A_i)
//! ```
//!
//! with `r_it = exp(log pi(o_it) - log pi_old(o_it))`, `A_i` the group-standardized
//! reward broadcast over the tokens of trajectory `i`, and `w_i = 1 / sum_j |o_j|`
//! (token-mean) or `w_i = 1 / (G' * |o_i|)` (sequence-mean). No KL term.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, SparseGrad, TokenId};
use crate::scalar::Scalar;

/// Reward spread below which a group counts as degenerate.
pub const DEFAULT_DEGENERACY_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Divide by the total token count of the group.
    #[default]
    TokenMean,
    /// Average each trajectory over its tokens, then over trajectories.
    SequenceMean,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::TokenMean => "token_mean",
            Aggregation::SequenceMean => "sequence_mean",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token_mean" => Ok(Aggregation::TokenMean),
            "sequence_mean" => Ok(Aggregation::SequenceMean),
            _ => Err(Error::Config(format!("unknown aggregation {s:?}"))),
        }
    }
}

/// Asymmetric ratio clipping: `[1 - eps_low, 1 + eps_high]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipConfig<T> {
    pub eps_low: T,
    pub eps_high: T,
    pub aggregation: Aggregation,
}

impl<T: Scalar> Default for ClipConfig<T> {
    fn default() -> Self {
        Self { eps_low: T::lit(0.2), eps_high: T::lit(0.28), aggregation: Aggregation::TokenMean }
    }
}

impl<T: Scalar> ClipConfig<T> {
    pub fn validate(&self) -> Result<()> {
        for (name, eps) in [("eps_low", self.eps_low), ("eps_high", self.eps_high)] {
            if !(eps > T::zero() && eps < T::one()) {
                return Err(Error::Config(format!("{name} must be in (0, 1), got {eps}")));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ClipConfig<U> {
        ClipConfig { eps_low: U::lit(self.eps_low.as_f64()), eps_high: U::lit(self.eps_high.as_f64()), aggregation: self.aggregation }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectorySource {
    Fresh,
    Replayed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    pub source: TrajectorySource,
    pub tokens: Vec<TokenId>,
    /// Behavior-policy log-prob per token, nats.
    pub old_logprob: Vec<T>,
    pub reward: T,
}

/// One question's trajectories with their standardized advantages.
#[derive(Clone, Debug, PartialEq)]
pub struct Group<T> {
    pub question_id: String,
    pub prompt: Vec<TokenId>,
    pub trajectories: Vec<Trajectory<T>>,
    pub advantages: Vec<T>,
}

impl<T: Scalar> Group<T> {
    /// Validates the trajectories and standardizes rewards over all of them.
    pub fn new(
        question_id: impl Into<String>,
        prompt: Vec<TokenId>,
        trajectories: Vec<Trajectory<T>>,
        degeneracy_eps: T,
    ) -> Result<Self> {
        let question_id = question_id.into();
        for (i, t) in trajectories.iter().enumerate() {
            if t.tokens.is_empty() {
                return Err(Error::InvalidGroup(format!("{question_id}: trajectory {i} is empty")));
            }
            if t.tokens.len() != t.old_logprob.len() {
                return Err(Error::InvalidGroup(format!(
                    "{question_id}: trajectory {i} has {} tokens but {} old log-probs",
                    t.tokens.len(),
                    t.old_logprob.len()
                )));
            }
            if t.source == TrajectorySource::Replayed && t.reward != T::one() {
                return Err(Error::InvalidGroup(format!("{question_id}: replayed trajectory {i} has reward {}", t.reward)));
            }
        }
        let rewards: Vec<T> = trajectories.iter().map(|t| t.reward).collect();
        let advantages = group_advantage(&rewards, degeneracy_eps)?;
        Ok(Self { question_id, prompt, trajectories, advantages })
    }

    /// G' in the mixed group.
    pub fn size(&self) -> usize {
        self.trajectories.len()
    }

    pub fn fresh_count(&self) -> usize {
        self.trajectories.iter().filter(|t| t.source == TrajectorySource::Fresh).count()
    }

    pub fn replayed_count(&self) -> usize {
        self.size() - self.fresh_count()
    }

    pub fn token_count(&self) -> usize {
        self.trajectories.iter().map(|t| t.tokens.len()).sum()
    }
}

/// `A_i = (r_i - mean) / std` with population std. Groups whose std is below
/// `degeneracy_eps` get all-zero advantages.
pub fn group_advantage<T: Scalar>(rewards: &[T], degeneracy_eps: T) -> Result<Vec<T>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidGroup(format!("need at least 2 rewards, got {}", rewards.len())));
    }
    let n = T::from_usize(rewards.len()).unwrap();
    let mean = rewards.iter().copied().sum::<T>() / n;
    let var = rewards.iter().map(|&r| (r - mean) * (r - mean)).sum::<T>() / n;
    let std = var.sqrt();
    if !(std >= degeneracy_eps) {
        return Ok(vec![T::zero(); rewards.len()]);
    }
    Ok(rewards.iter().map(|&r| (r - mean) / std).collect())
}

pub fn token_ratio<T: Scalar>(new_logprob: T, old_logprob: T) -> T {
    (new_logprob - old_logprob).exp()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClippedTerm<T> {
    pub value: T,
    /// d value / d ratio.
    pub grad_coeff: T,
    /// The constant clipped branch was the minimum.
    pub clipped: bool,
}

/// `min(ratio * A, clip(ratio, 1 - eps_low, 1 + eps_high) * A)`.
/// Ties go to the unclipped branch.
pub fn clipped_token_term<T: Scalar>(ratio: T, advantage: T, clip: &ClipConfig<T>) -> ClippedTerm<T> {
    let unclipped = ratio * advantage;
    let bounded = ratio.max(T::one() - clip.eps_low).min(T::one() + clip.eps_high);
    let clipped_value = bounded * advantage;
    if unclipped <= clipped_value {
        ClippedTerm { value: unclipped, grad_coeff: advantage, clipped: false }
    } else {
        ClippedTerm { value: clipped_value, grad_coeff: T::zero(), clipped: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateResult<T> {
    pub objective: T,
    /// d objective / d logits.
    pub grad: SparseGrad<T>,
    pub clip_fraction: T,
    pub clipped_tokens: usize,
    pub total_tokens: usize,
}

/// Objective and exact gradient for one group under the current params.
pub fn surrogate_objective<T: Scalar>(
    params: &PolicyParams<T>,
    group: &Group<T>,
    clip: &ClipConfig<T>,
) -> Result<SurrogateResult<T>> {
    if group.trajectories.is_empty() {
        return Err(Error::InvalidGroup(format!("{}: empty group", group.question_id)));
    }
    if group.advantages.len() != group.trajectories.len() {
        return Err(Error::InvalidGroup(format!("{}: advantages not computed", group.question_id)));
    }
    let total_tokens = group.token_count();
    if total_tokens == 0 {
        return Err(Error::InvalidGroup(format!("{}: no tokens", group.question_id)));
    }
    let n_traj = T::from_usize(group.size()).unwrap();
    let mut objective = T::zero();
    let mut grad = SparseGrad::new(params.vocab().size() as usize);
    let mut clipped_tokens = 0;

    for (traj, &adv) in group.trajectories.iter().zip(&group.advantages) {
        let weight = match clip.aggregation {
            Aggregation::TokenMean => T::one() / T::from_usize(total_tokens).unwrap(),
            Aggregation::SequenceMean => T::one() / (n_traj * T::from_usize(traj.tokens.len()).unwrap()),
        };
        let rows = params.context_rows(&group.prompt, &traj.tokens)?;
        for ((&row, &tok), &old) in rows.iter().zip(&traj.tokens).zip(&traj.old_logprob) {
            let log_probs = params.log_softmax_row(row);
            let ratio = token_ratio(log_probs[tok as usize], old);
            let term = clipped_token_term(ratio, adv, clip);
            objective = objective + weight * term.value;
            if term.clipped {
                clipped_tokens += 1;
            }
            if term.grad_coeff != T::zero() {
                let probs: Vec<T> = log_probs.iter().map(|l| l.exp()).collect();
                grad.add_logprob_grad(row, tok as usize, &probs, weight * term.grad_coeff * ratio);
            }
        }
    }
    Ok(SurrogateResult {
        objective,
        grad,
        clip_fraction: T::from_usize(clipped_tokens).unwrap() / T::from_usize(total_tokens).unwrap(),
        clipped_tokens,
        total_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Vocab;
    use proptest::prelude::*;

    fn clip() -> ClipConfig<f64> {
        ClipConfig::default()
    }

    #[test]
    fn advantages_of_small_groups() {
        assert_eq!(group_advantage(&[1.0, 0.0, 0.0, 1.0], 1e-8).unwrap(), vec![1.0, -1.0, -1.0, 1.0]);
        assert_eq!(group_advantage(&[1.0, 0.0], 1e-8).unwrap(), vec![1.0, -1.0]);
        assert_eq!(group_advantage(&[0.3; 5], 1e-8).unwrap(), vec![0.0; 5]);
        assert!(matches!(group_advantage(&[1.0], 1e-8), Err(Error::InvalidGroup(_))));
    }

    #[test]
    fn ratio_cases() {
        assert_eq!(token_ratio(-1.3, -1.3), 1.0);
        assert!((token_ratio((2f64).ln() - 0.5, -0.5) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn clipped_term_cases() {
        let t = clipped_token_term(1.5, 1.0, &clip());
        assert!((t.value - 1.28).abs() < 1e-15);
        assert_eq!(t.grad_coeff, 0.0);
        assert!(t.clipped);

        // min(-0.5, -0.8) picks the constant clipped term, so no gradient
        let t = clipped_token_term(0.5, -1.0, &clip());
        assert!((t.value + 0.8).abs() < 1e-15);
        assert_eq!(t.grad_coeff, 0.0);
        assert!(t.clipped);

        let t = clipped_token_term(0.5, 1.0, &clip());
        assert_eq!((t.value, t.grad_coeff), (0.5, 1.0));

        let t = clipped_token_term(1.5, -1.0, &clip());
        assert!((t.value + 1.5).abs() < 1e-15);
        assert_eq!(t.grad_coeff, -1.0);

        let t = clipped_token_term(0.9, -1.0, &clip());
        assert_eq!(t.grad_coeff, -1.0);
        let t = clipped_token_term(0.7, -1.0, &clip());
        assert!(t.clipped);
        assert_eq!(t.grad_coeff, 0.0);

        for ratio in [0.1, 1.0, 3.0] {
            let t = clipped_token_term(ratio, 0.0, &clip());
            assert_eq!((t.value, t.grad_coeff), (0.0, 0.0));
        }
    }

    fn fresh(tokens: Vec<TokenId>, old: Vec<f64>, reward: f64) -> Trajectory<f64> {
        Trajectory { source: TrajectorySource::Fresh, tokens, old_logprob: old, reward }
    }

    #[test]
    fn on_policy_objective_is_token_weighted_advantage() {
        let params = PolicyParams::<f64>::zeros(Vocab::new(4).unwrap(), 1).unwrap();
        let prompt = vec![0];
        let trajs: Vec<_> = [(vec![1, 3], 1.0), (vec![2, 2, 2, 3], 0.0), (vec![3], 0.0)]
            .into_iter()
            .map(|(toks, r)| {
                let old = params.logprob(&prompt, &toks).unwrap();
                fresh(toks, old, r)
            })
            .collect();
        let group = Group::new("q", prompt, trajs, 1e-8).unwrap();
        let res = surrogate_objective(&params, &group, &clip()).unwrap();
        let expected = (2.0 * group.advantages[0] + 4.0 * group.advantages[1] + group.advantages[2]) / 7.0;
        assert!((res.objective - expected).abs() < 1e-12);
        assert_eq!(res.clip_fraction, 0.0);
    }

    #[test]
    fn zero_advantages_give_zero_gradient() {
        let params = PolicyParams::<f64>::zeros(Vocab::new(4).unwrap(), 1).unwrap();
        let trajs = vec![fresh(vec![1, 3], vec![-0.1, -2.0], 1.0), fresh(vec![3], vec![-1.0], 1.0)];
        let group = Group::new("q", vec![2], trajs, 1e-8).unwrap();
        let res = surrogate_objective(&params, &group, &clip()).unwrap();
        assert_eq!(res.objective, 0.0);
        assert_eq!(res.grad.max_abs(), 0.0);
    }

    #[test]
    fn group_invariants_are_enforced() {
        let bad_len = vec![fresh(vec![1, 3], vec![-0.1], 1.0), fresh(vec![3], vec![-1.0], 0.0)];
        assert!(Group::new("q", vec![], bad_len, 1e-8).is_err());
        let bad_replay = vec![
            fresh(vec![3], vec![-1.0], 0.0),
            Trajectory { source: TrajectorySource::Replayed, tokens: vec![3], old_logprob: vec![-1.0], reward: 0.0 },
        ];
        assert!(Group::new("q", vec![], bad_replay, 1e-8).is_err());
        let params = PolicyParams::<f64>::zeros(Vocab::new(4).unwrap(), 1).unwrap();
        let empty = Group { question_id: "q".into(), prompt: vec![], trajectories: vec![], advantages: vec![] };
        assert!(matches!(surrogate_objective(&params, &empty, &clip()), Err(Error::InvalidGroup(_))));
    }

    #[test]
    fn f32_core_agrees_with_f64() {
        let a32 = group_advantage(&[1.0f32, 0.0, 0.0, 0.0], 1e-8).unwrap();
        let a64 = group_advantage(&[1.0f64, 0.0, 0.0, 0.0], 1e-8).unwrap();
        for (x, y) in a32.iter().zip(&a64) {
            assert!((*x as f64 - y).abs() < 1e-6);
        }
        let t = clipped_token_term(1.5f32, 1.0, &ClipConfig::default());
        assert!((t.value - 1.28).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn advantages_are_standardized(rewards in prop::collection::vec(-5.0f64..5.0, 2..32)) {
            let a = group_advantage(&rewards, 1e-8).unwrap();
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((std - 1.0).abs() < 1e-9);
        }

        #[test]
        fn ratio_matches_exp_difference(a in -20.0f64..0.0, b in -20.0f64..0.0) {
            let r = token_ratio(a, b);
            prop_assert!(r > 0.0);
            prop_assert!((r - (a - b).exp()).abs() <= 1e-12 * r.max(1.0));
        }

        #[test]
        fn clipped_term_never_exceeds_unclipped(ratio in 0.01f64..3.0, adv in -3.0f64..3.0) {
            let t = clipped_token_term(ratio, adv, &clip());
            prop_assert!(t.value <= ratio * adv);
            prop_assert_eq!(t.clipped, t.grad_coeff == 0.0 && adv != 0.0);
        }
    }
}
