//! Brute-force ground truth over enumerated response and feedback sets:
//! the offline joint `pi_ref(o|x) p_env(c|x,o)`, its feedback-conditional
//! posterior, and the KL diagnostics around it.

use rand::Rng;
use serde::{Serialize, Serializer};

use crate::dataset::Style;
use crate::env::{Env, TaskInstance};
use crate::error::{FcpError, Result};
use crate::policy::TabularPolicy;
use crate::sequence::{Role, TokenSequence};
use crate::vocab::Token;

pub const MAX_RESPONSES: usize = 10_000;
pub const MAX_FEEDBACKS: usize = 1_000;

/// KL divergence with an explicit sentinel for support violations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kl {
    Finite(f64),
    Infinite,
}

impl Kl {
    pub fn value(self) -> f64 {
        match self {
            Kl::Finite(v) => v,
            Kl::Infinite => f64::INFINITY,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Kl::Finite(_))
    }
}

impl Serialize for Kl {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Kl::Finite(v) => s.serialize_f64(*v),
            Kl::Infinite => s.serialize_str("infinite"),
        }
    }
}

/// `sum p log(p/q)` with `0 log 0 = 0`; tiny negative rounding is clamped to zero.
pub fn kl(p: &[f64], q: &[f64]) -> Kl {
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return Kl::Infinite;
            }
            acc += a * (a.ln() - b.ln());
        }
    }
    Kl::Finite(acc.max(0.0))
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn ln(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

#[derive(Clone, Debug)]
pub struct JointTable {
    pub instruction: TokenSequence,
    pub responses: Vec<TokenSequence>,
    pub feedbacks: Vec<TokenSequence>,
    pub prior: Vec<f64>,
    /// `likelihood[o][c]`
    pub likelihood: Vec<Vec<f64>>,
    /// `joint[o][c] = prior[o] * likelihood[o][c]`
    pub joint: Vec<Vec<f64>>,
}

impl JointTable {
    pub fn from_parts(
        instruction: TokenSequence,
        responses: Vec<TokenSequence>,
        feedbacks: Vec<TokenSequence>,
        prior: Vec<f64>,
        likelihood: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if responses.len() > MAX_RESPONSES || feedbacks.len() > MAX_FEEDBACKS {
            return Err(FcpError::TooLarge {
                responses: responses.len(),
                feedbacks: feedbacks.len(),
                max_responses: MAX_RESPONSES,
                max_feedbacks: MAX_FEEDBACKS,
            });
        }
        if prior.len() != responses.len() || likelihood.len() != responses.len() {
            return Err(FcpError::Contract("prior and likelihood must have one entry per response".into()));
        }
        if (prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 || prior.iter().any(|p| !(*p >= 0.0)) {
            return Err(FcpError::Contract("prior is not a probability vector".into()));
        }
        for (i, row) in likelihood.iter().enumerate() {
            if row.len() != feedbacks.len() || row.iter().any(|p| !(*p >= 0.0)) {
                return Err(FcpError::Contract(format!("likelihood row {i} is malformed")));
            }
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(FcpError::Contract(format!("likelihood row {i} does not sum to 1")));
            }
        }
        let joint = prior
            .iter()
            .zip(&likelihood)
            .map(|(p, row)| row.iter().map(|l| p * l).collect())
            .collect();
        Ok(JointTable {
            instruction,
            responses,
            feedbacks,
            prior,
            likelihood,
            joint,
        })
    }

    pub fn total_mass(&self) -> f64 {
        self.joint.iter().flatten().sum()
    }

    pub fn feedback_index(&self, c: &TokenSequence) -> Option<usize> {
        self.feedbacks.iter().position(|f| f == c)
    }

    /// `log P(c | x)` by log-sum-exp over responses.
    pub fn log_marginal(&self, c: usize) -> f64 {
        log_sum_exp((0..self.responses.len()).map(move |o| ln(self.prior[o]) + ln(self.likelihood[o][c])))
    }

    pub fn marginal(&self, c: usize) -> f64 {
        self.log_marginal(c).exp()
    }

    /// Feedback-conditional posterior over responses. A feedback with exactly
    /// zero marginal is out of support; small marginals are handled in log space.
    pub fn posterior(&self, c: usize) -> Result<Vec<f64>> {
        let lz = self.log_marginal(c);
        if lz == f64::NEG_INFINITY {
            return Err(FcpError::OutOfSupport);
        }
        Ok((0..self.responses.len())
            .map(|o| (ln(self.prior[o]) + ln(self.likelihood[o][c]) - lz).exp())
            .collect())
    }

    /// Feedbacks with positive marginal.
    pub fn support(&self) -> Vec<usize> {
        (0..self.feedbacks.len()).filter(|&c| self.marginal(c) > 0.0).collect()
    }

    /// Union of `supp p_env(. | x, o)` over responses in the prior's support.
    pub fn union_of_likelihood_supports(&self) -> Vec<usize> {
        (0..self.feedbacks.len())
            .filter(|&c| (0..self.responses.len()).any(|o| self.prior[o] > 0.0 && self.likelihood[o][c] > 0.0))
            .collect()
    }

    /// Largest `|posterior(c)[o] * marginal(c) - joint[o][c]|` over the support.
    pub fn bayes_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for c in self.support() {
            let post = self.posterior(c).expect("in support");
            let m = self.marginal(c);
            for o in 0..self.responses.len() {
                worst = worst.max((post[o] * m - self.joint[o][c]).abs());
            }
        }
        worst
    }
}

/// Joint over the reference table's response space for `x` and every feedback
/// string the environment can produce in `style`.
pub fn enumerate_joint(reference: &TabularPolicy, env: &Env, x: &TaskInstance, style: Style) -> Result<JointTable> {
    let responses = reference.outcomes(x.instruction())?.to_vec();
    let feedbacks = env.feedback_support(style);
    if responses.len() > MAX_RESPONSES || feedbacks.len() > MAX_FEEDBACKS {
        return Err(FcpError::TooLarge {
            responses: responses.len(),
            feedbacks: feedbacks.len(),
            max_responses: MAX_RESPONSES,
            max_feedbacks: MAX_FEEDBACKS,
        });
    }
    let prior = reference.probabilities(x.instruction())?;
    let likelihood = responses
        .iter()
        .map(|o| {
            let mut row = vec![0.0; feedbacks.len()];
            for f in env.feedback_distribution(x, o, style) {
                let j = feedbacks.iter().position(|c| *c == f.feedback).expect("feedback in support");
                row[j] = f.probability;
            }
            row
        })
        .collect();
    JointTable::from_parts(x.instruction().clone(), responses, feedbacks, prior, likelihood)
}

#[derive(Clone, Debug, Serialize)]
pub struct DiagnosticsReport {
    /// `KL(posterior || pi)`
    pub kl_forward: Kl,
    /// `KL(pi || posterior)`
    pub kl_reverse: Kl,
    /// `sum pi log p_env(c+|o) - KL(pi || prior)`
    pub objective_value: f64,
    /// `|objective - (log P(c+) - KL(pi || posterior))|`
    pub identity_residual: f64,
    pub posterior_tv_distance: f64,
    pub log_marginal: f64,
}

/// KL-regularized reward objective of `pi` for the positive feedback `c_plus`,
/// checked against its reverse-KL form.
pub fn kl_objective(pi: &[f64], joint: &JointTable, c_plus: usize) -> Result<DiagnosticsReport> {
    if pi.len() != joint.responses.len() {
        return Err(FcpError::Domain(format!(
            "policy has {} entries for {} responses",
            pi.len(),
            joint.responses.len()
        )));
    }
    if let Some(o) = (0..pi.len()).find(|&o| pi[o] > 0.0 && joint.prior[o] <= 0.0) {
        return Err(FcpError::Domain(format!("policy puts mass on response {o} outside the prior's support")));
    }
    let post = joint.posterior(c_plus)?;
    let lz = joint.log_marginal(c_plus);
    let mut objective = 0.0;
    for o in 0..pi.len() {
        if pi[o] > 0.0 {
            objective += pi[o] * (ln(joint.likelihood[o][c_plus]) - pi[o].ln() + joint.prior[o].ln());
        }
    }
    let kl_reverse = kl(pi, &post);
    let rhs = lz - kl_reverse.value();
    let identity_residual = if objective == f64::NEG_INFINITY && rhs == f64::NEG_INFINITY {
        0.0
    } else {
        (objective - rhs).abs()
    };
    Ok(DiagnosticsReport {
        kl_forward: kl(&post, pi),
        kl_reverse,
        objective_value: objective,
        identity_residual,
        posterior_tv_distance: total_variation(pi, &post),
        log_marginal: lz,
    })
}

/// `E_{c ~ P(c|x)} KL(posterior(c) || q(.|c))`, the quantity conditional
/// maximum likelihood minimizes. `q` has one row per feedback.
pub fn expected_forward_kl(joint: &JointTable, q: &[Vec<f64>]) -> Kl {
    let mut acc = 0.0;
    for c in joint.support() {
        match kl(&joint.posterior(c).expect("in support"), &q[c]) {
            Kl::Finite(v) => acc += joint.marginal(c) * v,
            Kl::Infinite => return Kl::Infinite,
        }
    }
    Kl::Finite(acc)
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifiableReport {
    pub posterior: Vec<f64>,
    pub incorrect_mass: f64,
    pub expected_reward: f64,
}

/// With `p_env(c+|o) = 1[o correct]`, the posterior must vanish on incorrect
/// responses and attain expected 0-1 reward 1.
pub fn verifiable_case_check(joint: &JointTable, correct: &[bool], c_plus: usize) -> Result<VerifiableReport> {
    for (o, &ok) in correct.iter().enumerate() {
        let l = joint.likelihood[o][c_plus];
        if l != if ok { 1.0 } else { 0.0 } {
            return Err(FcpError::Verification(format!(
                "response {o}: likelihood {l} does not match verdict {ok}"
            )));
        }
    }
    let posterior = joint.posterior(c_plus)?;
    if let Some(o) = (0..posterior.len()).find(|&o| !correct[o] && posterior[o] != 0.0) {
        return Err(FcpError::Verification(format!(
            "incorrect response {o} has posterior mass {}",
            posterior[o]
        )));
    }
    let expected_reward: f64 = posterior.iter().zip(correct).filter(|(_, c)| **c).map(|(p, _)| p).sum();
    if (expected_reward - 1.0).abs() > 1e-12 {
        return Err(FcpError::Verification(format!("expected reward {expected_reward} is not 1")));
    }
    Ok(VerifiableReport {
        incorrect_mass: 0.0,
        posterior,
        expected_reward,
    })
}

/// Joint for a noiseless verifier that emits `c_plus` on correct responses and
/// `c_minus` otherwise.
pub fn verifier_joint(
    reference: &TabularPolicy,
    env: &Env,
    x: &TaskInstance,
    c_plus: TokenSequence,
    c_minus: TokenSequence,
) -> Result<(JointTable, Vec<bool>)> {
    let responses = reference.outcomes(x.instruction())?.to_vec();
    let correct: Vec<bool> = responses.iter().map(|o| env.verify(x, o).is_correct()).collect();
    let likelihood = correct.iter().map(|&c| if c { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).collect();
    let prior = reference.probabilities(x.instruction())?;
    let joint = JointTable::from_parts(x.instruction().clone(), responses, vec![c_plus, c_minus], prior, likelihood)?;
    Ok((joint, correct))
}

/// Synthetic joint with a positive random prior and sparse random likelihood
/// rows. Responses use token ids `5..5+n`, feedbacks `5+n..5+n+m`.
pub fn random_joint<R: Rng + ?Sized>(rng: &mut R, n_responses: usize, n_feedbacks: usize) -> JointTable {
    let tok = |i: usize| Token::new(5 + i as u32);
    let instruction = TokenSequence::new(Role::Instruction, vec![tok(n_responses + n_feedbacks)]).expect("plain token");
    let responses = (0..n_responses)
        .map(|i| TokenSequence::new(Role::Response, vec![tok(i), Token::EOS]).expect("valid response"))
        .collect();
    let feedbacks = (0..n_feedbacks)
        .map(|j| TokenSequence::new(Role::Feedback, vec![tok(n_responses + j)]).expect("valid feedback"))
        .collect();
    let normalize = |v: Vec<f64>| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    let prior = normalize((0..n_responses).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect());
    let likelihood = (0..n_responses)
        .map(|_| {
            let keep = rng.random_range(0..n_feedbacks);
            normalize(
                (0..n_feedbacks)
                    .map(|j| if j == keep || rng.random_bool(0.7) { -(1.0 - rng.random::<f64>()).ln() } else { 0.0 })
                    .collect(),
            )
        })
        .collect();
    JointTable::from_parts(instruction, responses, feedbacks, prior, likelihood).expect("well-formed random joint")
}

/// Random distribution of length `n` (flat Dirichlet).
pub fn random_distribution<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn two_by_two() -> JointTable {
        let mut rng = stream(0, "o", 0);
        let mut j = random_joint(&mut rng, 2, 2);
        j = JointTable::from_parts(
            j.instruction,
            j.responses,
            j.feedbacks,
            vec![0.5, 0.5],
            vec![vec![0.9, 0.1], vec![0.1, 0.9]],
        )
        .unwrap();
        j
    }

    #[test]
    fn hand_example_joint_and_posterior() {
        let j = two_by_two();
        let expect = [[0.45, 0.05], [0.05, 0.45]];
        for o in 0..2 {
            for c in 0..2 {
                assert!((j.joint[o][c] - expect[o][c]).abs() < 1e-15);
            }
        }
        let post = j.posterior(0).unwrap();
        assert!((post[0] - 0.9).abs() < 1e-12 && (post[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn uninformative_feedback_returns_the_prior() {
        let mut rng = stream(1, "o", 0);
        let j = random_joint(&mut rng, 5, 3);
        let j = JointTable::from_parts(
            j.instruction,
            j.responses,
            j.feedbacks,
            j.prior.clone(),
            vec![vec![0.2, 0.3, 0.5]; 5],
        )
        .unwrap();
        for c in 0..3 {
            assert!(total_variation(&j.posterior(c).unwrap(), &j.prior) < 1e-15);
        }
    }

    #[test]
    fn one_hot_likelihood_rows() {
        let mut rng = stream(2, "o", 0);
        let j = random_joint(&mut rng, 4, 3);
        let lik = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]];
        let j = JointTable::from_parts(j.instruction, j.responses, j.feedbacks, j.prior, lik).unwrap();
        for row in &j.joint {
            assert_eq!(row.iter().filter(|x| **x > 0.0).count(), 1);
        }
    }

    #[test]
    fn random_joints_are_normalized_and_bayes_consistent() {
        let mut rng = stream(3, "o", 0);
        for _ in 0..100 {
            let j = random_joint(&mut rng, 12, 6);
            assert!((j.total_mass() - 1.0).abs() < 1e-9);
            assert!(j.bayes_residual() < 1e-12);
            assert_eq!(j.support(), j.union_of_likelihood_supports());
        }
    }

    #[test]
    fn objective_identity_and_optimality() {
        let mut rng = stream(4, "o", 0);
        for _ in 0..20 {
            let j = random_joint(&mut rng, 8, 4);
            for c in j.support() {
                let post = j.posterior(c).unwrap();
                let at_post = kl_objective(&post, &j, c).unwrap();
                assert!((at_post.objective_value - j.log_marginal(c)).abs() < 1e-12);
                for _ in 0..50 {
                    let pi = random_distribution(&mut rng, 8);
                    let r = kl_objective(&pi, &j, c).unwrap();
                    assert!(r.identity_residual < 1e-9);
                    assert!(r.objective_value < at_post.objective_value);
                }
            }
        }
    }

    #[test]
    fn support_violations() {
        let j = two_by_two();
        let mut p = j.prior.clone();
        p.push(0.0);
        assert!(matches!(kl_objective(&p, &j, 0), Err(FcpError::Domain(_))));
        assert_eq!(kl(&[0.5, 0.5], &[1.0, 0.0]), Kl::Infinite);
        assert_eq!(kl(&[1.0, 0.0], &[0.5, 0.5]), Kl::Finite(2f64.ln()));
        assert_eq!(serde_json::to_string(&Kl::Infinite).unwrap(), "\"infinite\"");
    }

    #[test]
    fn verifiable_case_hand_values() {
        let mut rng = stream(5, "o", 0);
        let base = random_joint(&mut rng, 3, 2);
        let lik = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let j = JointTable::from_parts(base.instruction.clone(), base.responses.clone(), base.feedbacks.clone(), vec![1.0 / 3.0; 3], lik)
            .unwrap();
        let r = verifiable_case_check(&j, &[true, true, false], 0).unwrap();
        assert!((r.posterior[0] - 0.5).abs() < 1e-15 && (r.posterior[1] - 0.5).abs() < 1e-15);
        assert_eq!(r.posterior[2], 0.0);

        let all = JointTable::from_parts(base.instruction.clone(), base.responses.clone(), base.feedbacks.clone(), base.prior.clone(), vec![vec![1.0, 0.0]; 3])
            .unwrap();
        let r = verifiable_case_check(&all, &[true; 3], 0).unwrap();
        assert!(total_variation(&r.posterior, &base.prior) < 1e-15);

        let none = JointTable::from_parts(base.instruction, base.responses, base.feedbacks, base.prior, vec![vec![0.0, 1.0]; 3]).unwrap();
        assert!(matches!(verifiable_case_check(&none, &[false; 3], 0), Err(FcpError::OutOfSupport)));
    }

    #[test]
    fn forward_kl_is_minimized_by_the_posterior() {
        let mut rng = stream(6, "o", 0);
        let j = random_joint(&mut rng, 6, 4);
        let q: Vec<Vec<f64>> = (0..4).map(|c| j.posterior(c).unwrap_or_else(|_| vec![1.0 / 6.0; 6])).collect();
        let best = expected_forward_kl(&j, &q).value();
        assert!(best.abs() < 1e-12);
        for _ in 0..100 {
            let mut p = q.clone();
            let c = rng.random_range(0..4);
            let mix = random_distribution(&mut rng, 6);
            p[c] = p[c].iter().zip(&mix).map(|(a, b)| 0.9 * a + 0.1 * b).collect();
            assert!(expected_forward_kl(&j, &p).value() > best);
        }
    }

    #[test]
    fn env_joint_is_normalized_and_supports_match() {
        let env = Env::standard(0.05).unwrap();
        let mut rng = stream(7, "o", 0);
        for _ in 0..10 {
            let x = env.generate_instruction(crate::env::TaskKind::ModularArithmetic, 9, &mut rng).unwrap();
            let space = env.reference_space(&x).unwrap();
            let mut t = TabularPolicy::new(crate::policy::TableRole::Response, env.vocab().len());
            let (o, p): (Vec<_>, Vec<_>) = space.into_iter().unzip();
            t.add_response_space(x.instruction(), o, &p).unwrap();
            let j = enumerate_joint(&t, &env, &x, Style::Reviewer).unwrap();
            assert!((j.total_mass() - 1.0).abs() < 1e-9);
            assert_eq!(j.support(), j.union_of_likelihood_supports());
        }
    }
}
