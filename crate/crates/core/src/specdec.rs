//! Speculative decoding: draft proposal, target verification and the
//! acceptance-rate metric.
//!
//! Random draws within a round happen in a fixed order: the draft's proposal
//! draws, then one acceptance uniform per verified position, then the
//! residual (or extension) draw. A decode call owns a single generator, so a
//! seed fully determines its output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{Distribution, SoftmaxTableLM, Token, EOS};
use crate::seed::{content_seed, rng_from_seed};

/// Proposal length used for all headline measurements.
pub const DEFAULT_PROPOSAL_LEN: usize = 9;

/// Residual mass below which `norm(max(0, p - q))` is treated as undefined.
pub const RESIDUAL_EPSILON: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerificationMode {
    /// Accept with probability `min(1, p/q)`, resample from the residual on rejection.
    #[default]
    Stochastic,
    /// Accept iff the proposed token is the target's argmax.
    Greedy,
}

/// How per-round counts are pooled into one acceptance rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Total accepted over total proposed across every prompt.
    #[default]
    Micro,
    /// Mean of the per-prompt rates.
    Macro,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub tokens: Vec<Token>,
    /// Draft distribution at each proposed position.
    pub dists: Vec<Distribution>,
}

/// A target distribution observed where the draft went wrong.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionRecord {
    /// Full history preceding the rejected position.
    pub context: Vec<Token>,
    pub target: Distribution,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeculationRound {
    pub proposed: Vec<Token>,
    pub accepted_count: usize,
    /// Target-produced token after the accepted prefix. `None` only when the
    /// accepted prefix already ends in EOS.
    pub bonus_token: Option<Token>,
    /// The first rejected position, if any.
    pub rejection_records: Vec<RejectionRecord>,
}

impl SpeculationRound {
    /// Tokens this round appends to the output.
    pub fn emitted(&self) -> Vec<Token> {
        let mut out = self.proposed[..self.accepted_count].to_vec();
        out.extend(self.bonus_token);
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeStats {
    pub proposed_tokens: usize,
    pub accepted_tokens: usize,
    pub rounds: usize,
}

impl DecodeStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed_tokens == 0 {
            0.0
        } else {
            self.accepted_tokens as f64 / self.proposed_tokens as f64
        }
    }

    pub fn mean_accepted_per_round(&self) -> f64 {
        if self.rounds == 0 {
            0.0
        } else {
            self.accepted_tokens as f64 / self.rounds as f64
        }
    }

    pub fn record(&mut self, round: &SpeculationRound) {
        self.proposed_tokens += round.proposed.len();
        self.accepted_tokens += round.accepted_count;
        self.rounds += 1;
    }

    pub fn merge(&mut self, other: &DecodeStats) {
        self.proposed_tokens += other.proposed_tokens;
        self.accepted_tokens += other.accepted_tokens;
        self.rounds += other.rounds;
    }
}

#[derive(Clone, Debug)]
pub struct DecodeOutput {
    /// Generated tokens, prompt excluded.
    pub tokens: Vec<Token>,
    pub stats: DecodeStats,
    pub rounds: Vec<SpeculationRound>,
}

/// Draws up to `k` tokens from the draft, one position at a time.
///
/// The proposal stops early once the draft emits EOS, so a round never
/// speculates past the end of a completion.
pub fn propose<R: Rng + ?Sized>(
    draft: &SoftmaxTableLM,
    context: &[Token],
    k: usize,
    mode: VerificationMode,
    rng: &mut R,
) -> Result<Proposal> {
    if k == 0 {
        return Err(Error::InvalidArgument("proposal length k must be at least 1".into()));
    }
    draft.vocab().check(context)?;
    let mut history = context.to_vec();
    let mut tokens = Vec::with_capacity(k);
    let mut dists = Vec::with_capacity(k);
    for _ in 0..k {
        let q = draft.distribution_at(draft.context_key(&history));
        let t = match mode {
            VerificationMode::Stochastic => q.sample(rng),
            VerificationMode::Greedy => q.argmax(),
        };
        history.push(t);
        tokens.push(t);
        dists.push(q);
        if t == EOS {
            break;
        }
    }
    Ok(Proposal { tokens, dists })
}

/// `norm(max(0, p - q))`.
pub fn residual_distribution(p: &Distribution, q: &Distribution) -> Result<Distribution> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch { expected: p.len(), found: q.len() });
    }
    let mut r: Vec<f64> = p.probs().iter().zip(q.probs()).map(|(a, b)| (a - b).max(0.0)).collect();
    let mass: f64 = r.iter().sum();
    if mass < RESIDUAL_EPSILON {
        return Err(Error::DegenerateResidual(mass));
    }
    r.iter_mut().for_each(|x| *x /= mass);
    Ok(Distribution::with_tolerance(r, 1e-9).expect("normalized residual"))
}

/// Probability that one draft token drawn from `q` is accepted against `p`:
/// `sum_x min(p(x), q(x)) = 1 - TV(p, q)`.
pub fn expected_step_acceptance(p: &Distribution, q: &Distribution) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions over different vocabularies");
    p.probs().iter().zip(q.probs()).map(|(a, b)| a.min(*b)).sum()
}

/// Verifies a proposal against the target.
pub fn verify<R: Rng + ?Sized>(
    target: &SoftmaxTableLM,
    context: &[Token],
    proposed: &[Token],
    draft_dists: &[Distribution],
    mode: VerificationMode,
    rng: &mut R,
) -> Result<SpeculationRound> {
    if proposed.is_empty() || proposed.len() != draft_dists.len() {
        return Err(Error::InvalidArgument(format!(
            "proposal of {} tokens with {} draft distributions",
            proposed.len(),
            draft_dists.len()
        )));
    }
    target.vocab().check(context)?;
    target.vocab().check(proposed)?;

    let mut history = context.to_vec();
    for (i, (&t, q)) in proposed.iter().zip(draft_dists).enumerate() {
        let p = target.distribution_at(target.context_key(&history));
        let accepted = match mode {
            VerificationMode::Stochastic => {
                let (pt, qt) = (p.prob(t), q.prob(t));
                assert!(qt > 0.0, "draft proposed token {t} it assigns zero probability");
                let u: f64 = rng.gen();
                // u < min(1, p/q) without dividing
                u * qt < pt
            }
            VerificationMode::Greedy => t == p.argmax(),
        };
        if !accepted {
            let bonus = match mode {
                VerificationMode::Stochastic => match residual_distribution(&p, q) {
                    Ok(r) => r.sample(rng),
                    // p and q agree to rounding; rejection had ~zero probability.
                    Err(Error::DegenerateResidual(_)) => p.sample(rng),
                    Err(e) => return Err(e),
                },
                VerificationMode::Greedy => p.argmax(),
            };
            return Ok(SpeculationRound {
                proposed: proposed.to_vec(),
                accepted_count: i,
                bonus_token: Some(bonus),
                rejection_records: vec![RejectionRecord { context: history, target: p }],
            });
        }
        history.push(t);
    }

    let bonus = if proposed.last() == Some(&EOS) {
        None
    } else {
        let p = target.distribution_at(target.context_key(&history));
        Some(match mode {
            VerificationMode::Stochastic => p.sample(rng),
            VerificationMode::Greedy => p.argmax(),
        })
    };
    Ok(SpeculationRound {
        proposed: proposed.to_vec(),
        accepted_count: proposed.len(),
        bonus_token: bonus,
        rejection_records: Vec::new(),
    })
}

/// One propose/verify round. `k` is capped by the caller.
pub fn speculation_round<R: Rng + ?Sized>(
    draft: &SoftmaxTableLM,
    target: &SoftmaxTableLM,
    context: &[Token],
    k: usize,
    mode: VerificationMode,
    rng: &mut R,
) -> Result<SpeculationRound> {
    let proposal = propose(draft, context, k, mode, rng)?;
    verify(target, context, &proposal.tokens, &proposal.dists, mode, rng)
}

fn check_compatible(draft: &SoftmaxTableLM, target: &SoftmaxTableLM) -> Result<()> {
    if draft.vocab() != target.vocab() {
        return Err(Error::InvalidArgument(format!(
            "draft vocabulary {} differs from target vocabulary {}",
            draft.vocab_size(),
            target.vocab_size()
        )));
    }
    Ok(())
}

pub fn speculative_decode(
    draft: &SoftmaxTableLM,
    target: &SoftmaxTableLM,
    prompt: &[Token],
    k: usize,
    max_new_tokens: usize,
    mode: VerificationMode,
    seed: u64,
) -> Result<DecodeOutput> {
    let mut rng = rng_from_seed(seed);
    speculative_decode_with(draft, target, prompt, k, max_new_tokens, mode, &mut rng)
}

/// Propose/verify until EOS or `max_new_tokens`.
///
/// When fewer than `k` tokens remain the round proposes only the remainder
/// and is counted with that length; its bonus token is dropped if it would
/// overrun the budget.
pub fn speculative_decode_with<R: Rng + ?Sized>(
    draft: &SoftmaxTableLM,
    target: &SoftmaxTableLM,
    prompt: &[Token],
    k: usize,
    max_new_tokens: usize,
    mode: VerificationMode,
    rng: &mut R,
) -> Result<DecodeOutput> {
    if k == 0 || max_new_tokens == 0 {
        return Err(Error::InvalidArgument("k and max_new_tokens must be at least 1".into()));
    }
    check_compatible(draft, target)?;
    let mut history = prompt.to_vec();
    let mut stats = DecodeStats::default();
    let mut rounds = Vec::new();
    let mut generated = 0;
    loop {
        let remaining = max_new_tokens - generated;
        let round = speculation_round(draft, target, &history, k.min(remaining), mode, rng)?;
        stats.record(&round);
        let mut emitted = round.emitted();
        emitted.truncate(remaining);
        generated += emitted.len();
        let done = emitted.contains(&EOS) || generated >= max_new_tokens;
        history.extend(emitted);
        rounds.push(round);
        if done {
            break;
        }
    }
    Ok(DecodeOutput { tokens: history.split_off(prompt.len()), stats, rounds })
}

/// Per-prompt statistics of an acceptance evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AcceptanceReport {
    pub per_prompt: Vec<DecodeStats>,
}

impl AcceptanceReport {
    pub fn total(&self) -> DecodeStats {
        let mut total = DecodeStats::default();
        self.per_prompt.iter().for_each(|s| total.merge(s));
        total
    }

    pub fn rate(&self, averaging: Averaging) -> f64 {
        match averaging {
            Averaging::Micro => self.total().acceptance_rate(),
            Averaging::Macro => {
                if self.per_prompt.is_empty() {
                    return 0.0;
                }
                self.per_prompt.iter().map(DecodeStats::acceptance_rate).sum::<f64>()
                    / self.per_prompt.len() as f64
            }
        }
    }
}

/// Runs speculative decoding on every prompt.
///
/// Each prompt decodes with its own generator, seeded from the master seed
/// and the prompt's tokens. Results therefore do not depend on prompt order
/// or on which thread evaluates which prompt.
pub fn evaluate_acceptance(
    draft: &SoftmaxTableLM,
    target: &SoftmaxTableLM,
    prompts: &[Vec<Token>],
    k: usize,
    mode: VerificationMode,
    max_new_tokens: usize,
    seed: u64,
) -> Result<AcceptanceReport> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("acceptance evaluation needs at least one prompt".into()));
    }
    let per_prompt = prompts
        .iter()
        .map(|prompt| {
            let prompt_seed = content_seed(seed, "decode", prompt);
            speculative_decode(draft, target, prompt, k, max_new_tokens, mode, prompt_seed).map(|o| o.stats)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AcceptanceReport { per_prompt })
}

/// Micro-averaged token acceptance rate over a prompt set.
pub fn acceptance_rate(
    draft: &SoftmaxTableLM,
    target: &SoftmaxTableLM,
    prompts: &[Vec<Token>],
    k: usize,
    mode: VerificationMode,
    max_new_tokens: usize,
    seed: u64,
) -> Result<f64> {
    Ok(evaluate_acceptance(draft, target, prompts, k, mode, max_new_tokens, seed)?.rate(Averaging::Micro))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::Vocabulary;
    use crate::seed::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn dist(p: &[f64]) -> Distribution {
        Distribution::new(p.to_vec()).unwrap()
    }

    fn vocab(n: usize) -> Vocabulary {
        Vocabulary::new(n).unwrap()
    }

    /// Order-1 model whose every row is `ln(probs)`.
    fn constant_model(probs: &[f64]) -> SoftmaxTableLM {
        let v = probs.len();
        let row: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let logits = row.iter().copied().cycle().take(v * v).collect();
        SoftmaxTableLM::from_logits(1, vocab(v), logits).unwrap()
    }

    fn random_model(order: usize, size: usize, scale: f64, seed: u64) -> SoftmaxTableLM {
        let mut rng = rng_from_seed(seed);
        let n = size.pow(order as u32 + 1);
        let logits = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        SoftmaxTableLM::from_logits(order, vocab(size), logits).unwrap()
    }

    #[test]
    fn residual_examples() {
        let r = residual_distribution(&dist(&[0.5, 0.5]), &dist(&[0.9, 0.1])).unwrap();
        assert_eq!(r.probs(), &[0.0, 1.0]);
        let r = residual_distribution(&dist(&[0.6, 0.3, 0.1]), &dist(&[0.2, 0.3, 0.5])).unwrap();
        assert!((r.prob(0) - 1.0).abs() < 1e-15 && r.prob(1) == 0.0 && r.prob(2) == 0.0);
        let p = dist(&[0.25; 4]);
        assert!(matches!(residual_distribution(&p, &p), Err(Error::DegenerateResidual(_))));
    }

    #[test]
    fn expected_acceptance_examples() {
        let p = dist(&[0.5, 0.5]);
        assert_eq!(expected_step_acceptance(&p, &p), 1.0);
        assert!((expected_step_acceptance(&p, &dist(&[0.9, 0.1])) - 0.6).abs() < 1e-15);
        assert_eq!(expected_step_acceptance(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0])), 0.0);
    }

    #[test]
    fn deterministic_draft_proposes_its_chain() {
        let mut m = SoftmaxTableLM::zeros(1, vocab(8)).unwrap();
        for (a, b) in [(4, 5), (5, 6), (6, 7), (7, 4)] {
            let key = m.context_key(&[a]);
            m.row_mut(key)[b] = 60.0;
        }
        let mut rng = rng_from_seed(1);
        let p = propose(&m, &[4], 5, VerificationMode::Stochastic, &mut rng).unwrap();
        assert_eq!(p.tokens, vec![5, 6, 7, 4, 5]);
        for (t, q) in p.tokens.iter().zip(&p.dists) {
            assert!((q.prob(*t) - 1.0).abs() < 1e-12);
        }
        let g = propose(&m, &[4], 5, VerificationMode::Greedy, &mut rng).unwrap();
        assert_eq!(g.tokens, p.tokens);
    }

    #[test]
    fn single_uniform_proposal() {
        let m = SoftmaxTableLM::zeros(2, vocab(8)).unwrap();
        let mut rng = rng_from_seed(9);
        let p = propose(&m, &[4, 5], 1, VerificationMode::Stochastic, &mut rng).unwrap();
        assert_eq!(p.tokens.len(), 1);
        assert_eq!(p.dists[0], Distribution::uniform(8));
        assert!(propose(&m, &[4], 0, VerificationMode::Stochastic, &mut rng).is_err());
    }

    #[test]
    fn proposal_is_reproducible_and_stops_at_eos() {
        let m = random_model(2, 8, 2.0, 4);
        let a = propose(&m, &[4], 9, VerificationMode::Stochastic, &mut rng_from_seed(3)).unwrap();
        let b = propose(&m, &[4], 9, VerificationMode::Stochastic, &mut rng_from_seed(3)).unwrap();
        assert_eq!(a, b);
        if let Some(i) = a.tokens.iter().position(|&t| t == EOS) {
            assert_eq!(i + 1, a.tokens.len());
        }
    }

    #[test]
    fn identical_models_accept_everything() {
        let m = random_model(2, 10, 3.0, 8);
        for seed in 0..20 {
            let mut rng = rng_from_seed(seed);
            let round = speculation_round(&m, &m, &[4, 5], 9, VerificationMode::Stochastic, &mut rng).unwrap();
            assert_eq!(round.accepted_count, round.proposed.len());
            assert!(round.rejection_records.is_empty());
        }
    }

    #[test]
    fn disjoint_one_hot_rejects_immediately() {
        let mut target = SoftmaxTableLM::zeros(1, vocab(8)).unwrap();
        let mut draft = SoftmaxTableLM::zeros(1, vocab(8)).unwrap();
        for key in 0..8 {
            target.row_mut(key)[5] = 800.0;
            draft.row_mut(key)[6] = 800.0;
        }
        for mode in [VerificationMode::Stochastic, VerificationMode::Greedy] {
            let mut rng = rng_from_seed(2);
            let round = speculation_round(&draft, &target, &[4], 3, mode, &mut rng).unwrap();
            assert_eq!(round.accepted_count, 0);
            assert_eq!(round.bonus_token, Some(5));
            assert_eq!(round.rejection_records.len(), 1);
            assert_eq!(round.rejection_records[0].context, vec![4]);
        }
    }

    #[test]
    fn verify_checks_lengths() {
        let m = SoftmaxTableLM::zeros(1, vocab(8)).unwrap();
        let mut rng = rng_from_seed(0);
        assert!(verify(&m, &[4], &[5, 6], &[Distribution::uniform(8)], VerificationMode::Greedy, &mut rng).is_err());
        assert!(verify(&m, &[4], &[], &[], VerificationMode::Greedy, &mut rng).is_err());
    }

    #[test]
    fn self_decoding_has_unit_acceptance() {
        let m = random_model(2, 12, 2.0, 21);
        for mode in [VerificationMode::Stochastic, VerificationMode::Greedy] {
            let out = speculative_decode(&m, &m, &[4, 5], 9, 40, mode, 5).unwrap();
            assert_eq!(out.stats.acceptance_rate(), 1.0);
        }
    }

    #[test]
    fn greedy_matching_argmax_chain_has_unit_acceptance() {
        // Same argmax everywhere, different distributions.
        let target = random_model(1, 8, 1.0, 3);
        let mut draft = target.clone();
        for key in 0..draft.num_contexts() {
            let best = target.distribution_at(key).argmax() as usize;
            draft.row_mut(key).iter_mut().for_each(|z| *z *= 0.3);
            draft.row_mut(key)[best] += 0.5;
        }
        let out = speculative_decode(&draft, &target, &[4], 9, 30, VerificationMode::Greedy, 1).unwrap();
        assert_eq!(out.stats.acceptance_rate(), 1.0);
    }

    #[test]
    fn decode_respects_budget_and_round_shape() {
        let target = random_model(2, 10, 2.0, 31);
        let draft = random_model(1, 10, 2.0, 32);
        for seed in 0..30 {
            let out = speculative_decode(&draft, &target, &[4], 4, 17, VerificationMode::Stochastic, seed).unwrap();
            assert!(out.tokens.len() <= 17);
            assert!(out.tokens.len() == 17 || out.tokens.last() == Some(&EOS));
            let proposed: usize = out.rounds.iter().map(|r| r.proposed.len()).sum();
            assert_eq!(out.stats.proposed_tokens, proposed);
            assert_eq!(out.stats.rounds, out.rounds.len());
            let mut len = 0;
            for (i, r) in out.rounds.iter().enumerate() {
                assert!(r.accepted_count <= r.proposed.len() && r.proposed.len() <= 4);
                assert_eq!(r.rejection_records.is_empty(), r.accepted_count == r.proposed.len());
                let emitted = r.emitted().len();
                if i + 1 < out.rounds.len() {
                    assert_eq!(emitted, r.accepted_count + 1);
                }
                len += emitted;
            }
            assert!(len >= out.tokens.len());
        }
    }

    #[test]
    fn final_partial_round_counts_actual_length() {
        // Greedy on a uniform model always proposes and accepts token 0. A
        // budget of 5 with k = 3 gives a full round (3 + bonus) and then a
        // one-token round whose bonus is cut off.
        let m = SoftmaxTableLM::zeros(1, vocab(8)).unwrap();
        let out = speculative_decode(&m, &m, &[4], 3, 5, VerificationMode::Greedy, 0).unwrap();
        assert_eq!(out.tokens, vec![0; 5]);
        assert_eq!(out.rounds.iter().map(|r| r.proposed.len()).collect::<Vec<_>>(), vec![3, 1]);
        assert_eq!(out.stats.proposed_tokens, 4);
        assert_eq!(out.stats.accepted_tokens, 4);
    }

    #[test]
    fn two_token_toy_acceptance_matches_oracle() {
        // A 2-token alphabet embedded in the smallest vocabulary: every other
        // token has (effectively) zero mass.
        let mut p = vec![0.0; 8];
        let mut q = vec![0.0; 8];
        p[4] = 0.5;
        p[5] = 0.5;
        q[4] = 0.9;
        q[5] = 0.1;
        let floor = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = x.max(1e-300));
        floor(&mut p);
        floor(&mut q);
        let target = constant_model(&p);
        let draft = constant_model(&q);
        let trials = 100_000;
        let mut accepted = 0usize;
        let mut rng = rng_from_seed(77);
        for _ in 0..trials {
            let round = speculation_round(&draft, &target, &[4], 1, VerificationMode::Stochastic, &mut rng).unwrap();
            accepted += round.accepted_count;
        }
        let expected = 0.6;
        let sigma = (trials as f64 * expected * (1.0 - expected)).sqrt();
        assert!((accepted as f64 - expected * trials as f64).abs() <= 3.0 * sigma, "accepted {accepted}");
    }

    #[test]
    fn acceptance_rate_examples() {
        let target = random_model(2, 10, 2.0, 41);
        let draft = random_model(2, 10, 2.0, 42);
        let prompts = vec![vec![4], vec![5, 6], vec![7, 7, 8]];
        let same = acceptance_rate(&target, &target, &prompts, 9, VerificationMode::Stochastic, 30, 1).unwrap();
        assert_eq!(same, 1.0);

        let single = vec![vec![4, 5]];
        let report = evaluate_acceptance(&draft, &target, &single, 9, VerificationMode::Stochastic, 9, 3).unwrap();
        let out = speculative_decode(
            &draft,
            &target,
            &single[0],
            9,
            9,
            VerificationMode::Stochastic,
            content_seed(3, "decode", &single[0]),
        )
        .unwrap();
        assert_eq!(report.total(), out.stats);
        if out.rounds.len() == 1 {
            let r = &out.rounds[0];
            assert_eq!(report.rate(Averaging::Micro), r.accepted_count as f64 / r.proposed.len() as f64);
        }
        assert!(acceptance_rate(&draft, &target, &[], 9, VerificationMode::Stochastic, 9, 3).is_err());
    }

    #[test]
    fn macro_average_is_mean_of_prompt_rates() {
        let report = AcceptanceReport {
            per_prompt: vec![
                DecodeStats { proposed_tokens: 10, accepted_tokens: 10, rounds: 1 },
                DecodeStats { proposed_tokens: 30, accepted_tokens: 0, rounds: 3 },
            ],
        };
        assert_eq!(report.rate(Averaging::Micro), 0.25);
        assert_eq!(report.rate(Averaging::Macro), 0.5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn residual_is_normalized_and_zero_where_q_dominates(
            a in prop::collection::vec(0.01f64..1.0, 2..10),
            b_seed in any::<u64>(),
        ) {
            let mut rng = rng_from_seed(b_seed);
            let b: Vec<f64> = a.iter().map(|_| rng.gen_range(0.01..1.0)).collect();
            let p = Distribution::from_logits(&a.iter().map(|x| x.ln()).collect::<Vec<_>>());
            let q = Distribution::from_logits(&b.iter().map(|x| x.ln()).collect::<Vec<_>>());
            if let Ok(r) = residual_distribution(&p, &q) {
                prop_assert!((r.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for i in 0..p.len() {
                    if q.probs()[i] >= p.probs()[i] {
                        prop_assert_eq!(r.probs()[i], 0.0);
                    }
                }
            }
        }

        #[test]
        fn acceptance_rate_is_permutation_invariant(seed in 0u64..1000, rot in 0usize..5) {
            let target = random_model(2, 9, 2.0, seed);
            let draft = random_model(1, 9, 2.0, seed + 1);
            let prompts: Vec<Vec<Token>> = (0..5).map(|i| vec![4 + i as Token, 5]).collect();
            let mut rotated = prompts.clone();
            rotated.rotate_left(rot);
            rotated.reverse();
            let a = acceptance_rate(&draft, &target, &prompts, 3, VerificationMode::Stochastic, 12, seed).unwrap();
            let b = acceptance_rate(&draft, &target, &rotated, 3, VerificationMode::Stochastic, 12, seed).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
