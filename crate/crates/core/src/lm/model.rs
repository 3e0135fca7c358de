use rand::Rng;

use crate::error::{Error, Result};
use crate::lm::{Distribution, Token, Vocabulary, EOS, PAD};
use crate::seed::rng_from_seed;

pub const MAX_ORDER: usize = 3;
/// Largest dense table: 64^3 contexts by 64 tokens.
pub const MAX_TABLE_ENTRIES: usize = 64 * 64 * 64 * 64;
/// Smoothing used by [`SoftmaxTableLM::mle_fit`] when asked for zero, so that
/// every logit stays finite.
pub const SMOOTHING_FLOOR: f64 = 1e-9;

/// Order-n conditional next-token model with one logit row per context.
///
/// The context key of a history is the base-`vocab.size` number formed by its
/// last `order` tokens (oldest first), left-padded with [`PAD`].
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxTableLM {
    order: usize,
    vocab: Vocabulary,
    logits: Vec<f64>,
}

impl SoftmaxTableLM {
    pub fn zeros(order: usize, vocab: Vocabulary) -> Result<Self> {
        let entries = Self::table_entries(order, vocab)?;
        Ok(Self { order, vocab, logits: vec![0.0; entries] })
    }

    pub fn from_logits(order: usize, vocab: Vocabulary, logits: Vec<f64>) -> Result<Self> {
        let entries = Self::table_entries(order, vocab)?;
        if logits.len() != entries {
            return Err(Error::ShapeMismatch { expected: entries, found: logits.len() });
        }
        if let Some(i) = logits.iter().position(|z| !z.is_finite()) {
            return Err(Error::InvalidArgument(format!("logit {i} is not finite")));
        }
        Ok(Self { order, vocab, logits })
    }

    fn table_entries(order: usize, vocab: Vocabulary) -> Result<usize> {
        if !(1..=MAX_ORDER).contains(&order) {
            return Err(Error::InvalidOrder(order));
        }
        let entries = vocab
            .size()
            .checked_pow(order as u32 + 1)
            .filter(|&n| n <= MAX_TABLE_ENTRIES)
            .ok_or(Error::TableTooLarge(vocab.size().saturating_pow(order as u32 + 1)))?;
        Ok(entries)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn num_contexts(&self) -> usize {
        self.logits.len() / self.vocab.size()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn row(&self, key: usize) -> &[f64] {
        let v = self.vocab.size();
        &self.logits[key * v..(key + 1) * v]
    }

    pub fn row_mut(&mut self, key: usize) -> &mut [f64] {
        let v = self.vocab.size();
        &mut self.logits[key * v..(key + 1) * v]
    }

    /// Context key of `history`. Token ids are assumed valid.
    pub fn context_key(&self, history: &[Token]) -> usize {
        let v = self.vocab.size();
        let pad = self.order.saturating_sub(history.len());
        let tail = &history[history.len().saturating_sub(self.order)..];
        std::iter::repeat_n(PAD, pad)
            .chain(tail.iter().copied())
            .fold(0, |key, t| key * v + t as usize)
    }

    pub fn distribution_at(&self, key: usize) -> Distribution {
        Distribution::from_logits(self.row(key))
    }

    /// Log-probabilities of a row via log-sum-exp.
    pub fn log_probs_at(&self, key: usize) -> Vec<f64> {
        let row = self.row(key);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        row.iter().map(|z| z - lse).collect()
    }

    pub fn next_distribution(&self, history: &[Token]) -> Result<Distribution> {
        self.vocab.check(history)?;
        Ok(self.distribution_at(self.context_key(history)))
    }

    /// Appends argmax tokens (lowest id on ties) until EOS or `max_len` new
    /// tokens. The result excludes the prompt and includes EOS if produced.
    pub fn greedy_generate(&self, prompt: &[Token], max_len: usize) -> Result<Vec<Token>> {
        self.generate_with(prompt, max_len, |d| d.argmax())
    }

    /// Ancestral sampling with a seeded generator; one uniform per token.
    pub fn sample_generate(&self, prompt: &[Token], max_len: usize, seed: u64) -> Result<Vec<Token>> {
        let mut rng = rng_from_seed(seed);
        self.sample_generate_with(prompt, max_len, &mut rng)
    }

    pub fn sample_generate_with<R: Rng + ?Sized>(
        &self,
        prompt: &[Token],
        max_len: usize,
        rng: &mut R,
    ) -> Result<Vec<Token>> {
        self.generate_with(prompt, max_len, |d| d.sample(rng))
    }

    fn generate_with(
        &self,
        prompt: &[Token],
        max_len: usize,
        mut pick: impl FnMut(&Distribution) -> Token,
    ) -> Result<Vec<Token>> {
        if max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be at least 1".into()));
        }
        self.vocab.check(prompt)?;
        let mut history = prompt.to_vec();
        for _ in 0..max_len {
            let next = pick(&self.distribution_at(self.context_key(&history)));
            history.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(history.split_off(prompt.len()))
    }

    /// Add-λ smoothed maximum-likelihood fit.
    ///
    /// Every position of every sequence is a training event whose context is
    /// the preceding `order` tokens (PAD-padded). Each logit is set to
    /// `ln((count + λ) / (total + λV))`, so the softmax of a row is exactly the
    /// smoothed conditional estimate and unseen contexts are uniform.
    pub fn mle_fit(
        corpus: &[Vec<Token>],
        order: usize,
        vocab: Vocabulary,
        smoothing: f64,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if !smoothing.is_finite() || smoothing < 0.0 {
            return Err(Error::InvalidSmoothing(smoothing));
        }
        let lambda = smoothing.max(SMOOTHING_FLOOR);
        let mut model = Self::zeros(order, vocab)?;
        let v = vocab.size();
        let mut counts = vec![0.0f64; model.logits.len()];
        for seq in corpus {
            vocab.check(seq)?;
            for t in 0..seq.len() {
                let key = model.context_key(&seq[..t]);
                counts[key * v + seq[t] as usize] += 1.0;
            }
        }
        for (row_counts, row_logits) in counts.chunks(v).zip(model.logits.chunks_mut(v)) {
            let total: f64 = row_counts.iter().sum();
            let log_norm = (total + lambda * v as f64).ln();
            for (z, c) in row_logits.iter_mut().zip(row_counts) {
                *z = (c + lambda).ln() - log_norm;
            }
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{ASSISTANT, USER};
    use crate::seed::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::HashMap;

    fn vocab(n: usize) -> Vocabulary {
        Vocabulary::new(n).unwrap()
    }

    /// Model that deterministically emits `chain[i+1]` after `chain[i]`.
    fn chain_model(chain: &[Token]) -> SoftmaxTableLM {
        let mut m = SoftmaxTableLM::zeros(1, vocab(8)).unwrap();
        for w in chain.windows(2) {
            let key = m.context_key(&[w[0]]);
            m.row_mut(key)[w[1] as usize] = 50.0;
        }
        m
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = SoftmaxTableLM::zeros(2, vocab(8)).unwrap();
        let d = m.next_distribution(&[4, 5, 6]).unwrap();
        assert!(d.probs().iter().all(|&p| (p - 0.125).abs() < 1e-15));
    }

    #[test]
    fn rejects_invalid_history() {
        let m = SoftmaxTableLM::zeros(2, vocab(8)).unwrap();
        assert!(matches!(m.next_distribution(&[4, 9]), Err(Error::InvalidToken { token: 9, .. })));
    }

    #[test]
    fn table_shape_checks() {
        assert!(matches!(SoftmaxTableLM::zeros(0, vocab(8)), Err(Error::InvalidOrder(0))));
        assert!(matches!(SoftmaxTableLM::zeros(4, vocab(8)), Err(Error::InvalidOrder(4))));
        assert!(SoftmaxTableLM::zeros(3, vocab(64)).is_ok());
        assert!(matches!(SoftmaxTableLM::zeros(3, vocab(65)), Err(Error::TableTooLarge(_))));
        assert!(matches!(
            SoftmaxTableLM::from_logits(1, vocab(8), vec![0.0; 63]),
            Err(Error::ShapeMismatch { expected: 64, found: 63 })
        ));
    }

    #[test]
    fn context_key_pads_left() {
        let m = SoftmaxTableLM::zeros(3, vocab(10)).unwrap();
        assert_eq!(m.context_key(&[]), 333);
        assert_eq!(m.context_key(&[7]), 337);
        assert_eq!(m.context_key(&[1, 2, 4, 5]), 245);
    }

    #[test]
    fn short_history_matches_padded_history() {
        let mut rng = rng_from_seed(3);
        let logits = (0..8usize.pow(3)).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let m = SoftmaxTableLM::from_logits(2, vocab(8), logits).unwrap();
        assert_eq!(m.next_distribution(&[5]).unwrap(), m.next_distribution(&[PAD, 5]).unwrap());
        assert_eq!(m.next_distribution(&[]).unwrap(), m.next_distribution(&[PAD, PAD]).unwrap());
    }

    #[test]
    fn greedy_all_eos() {
        let mut m = SoftmaxTableLM::zeros(1, vocab(8)).unwrap();
        for key in 0..8 {
            m.row_mut(key)[EOS as usize] = 100.0;
        }
        assert_eq!(m.greedy_generate(&[USER, 4], 10).unwrap(), vec![EOS]);
    }

    #[test]
    fn greedy_follows_forced_chain() {
        let m = chain_model(&[USER, 4, 5, ASSISTANT, 6, 7, EOS]);
        assert_eq!(m.greedy_generate(&[USER], 20).unwrap(), vec![4, 5, ASSISTANT, 6, 7, EOS]);
    }

    #[test]
    fn greedy_uniform_picks_lowest_id() {
        let m = SoftmaxTableLM::zeros(2, vocab(8)).unwrap();
        assert_eq!(m.greedy_generate(&[5], 4).unwrap(), vec![USER; 4]);
        assert!(m.greedy_generate(&[5], 0).is_err());
    }

    #[test]
    fn sampling_deterministic_model_equals_greedy() {
        let m = chain_model(&[USER, 4, 5, ASSISTANT, 6, 7, EOS]);
        assert_eq!(m.sample_generate(&[USER], 20, 99).unwrap(), m.greedy_generate(&[USER], 20).unwrap());
    }

    #[test]
    fn sampling_is_reproducible() {
        let m = SoftmaxTableLM::zeros(2, vocab(16)).unwrap();
        let a = m.sample_generate(&[4], 50, 11).unwrap();
        assert_eq!(a, m.sample_generate(&[4], 50, 11).unwrap());
        assert_ne!(a, m.sample_generate(&[4], 50, 12).unwrap());
    }

    #[test]
    fn uniform_sampling_frequencies_within_three_sigma() {
        let size = 8;
        let m = SoftmaxTableLM::zeros(1, vocab(size)).unwrap();
        let n = 100_000;
        let mut rng = rng_from_seed(2024);
        let mut counts = vec![0usize; size];
        for _ in 0..n {
            counts[m.sample_generate_with(&[4], 1, &mut rng).unwrap()[0] as usize] += 1;
        }
        let p = 1.0 / size as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "count {c}");
        }
    }

    fn brute_force_conditional(
        corpus: &[Vec<Token>],
        order: usize,
        size: usize,
        lambda: f64,
    ) -> HashMap<Vec<Token>, Vec<f64>> {
        let mut counts: HashMap<Vec<Token>, Vec<f64>> = HashMap::new();
        for seq in corpus {
            let padded: Vec<Token> = std::iter::repeat_n(PAD, order).chain(seq.iter().copied()).collect();
            for t in 0..seq.len() {
                let ctx = padded[t..t + order].to_vec();
                counts.entry(ctx).or_insert_with(|| vec![0.0; size])[seq[t] as usize] += 1.0;
            }
        }
        counts
            .into_iter()
            .map(|(ctx, c)| {
                let total: f64 = c.iter().sum();
                let probs = c.iter().map(|x| (x + lambda) / (total + lambda * size as f64)).collect();
                (ctx, probs)
            })
            .collect()
    }

    #[test]
    fn mle_repeated_bigram_with_floored_smoothing() {
        let corpus = vec![vec![4, 5]; 50];
        let m = SoftmaxTableLM::mle_fit(&corpus, 1, vocab(8), 0.0).unwrap();
        assert!(m.next_distribution(&[4]).unwrap().prob(5) >= 0.999);
    }

    #[test]
    fn mle_unseen_context_is_uniform() {
        let m = SoftmaxTableLM::mle_fit(&[vec![4, 5, 6]], 2, vocab(8), 0.1).unwrap();
        let d = m.next_distribution(&[7, 7]).unwrap();
        assert!(d.probs().iter().all(|&p| (p - 0.125).abs() < 1e-15));
    }

    #[test]
    fn mle_smoothing_approaches_uniform_monotonically() {
        let corpus = vec![vec![4, 5, 5, 4, 5, 6]; 3];
        let size = 8;
        let mut last = f64::INFINITY;
        for lambda in [0.1, 1.0, 10.0] {
            let m = SoftmaxTableLM::mle_fit(&corpus, 1, vocab(size), lambda).unwrap();
            let d = m.next_distribution(&[4]).unwrap();
            // closed form: counts after 4 are {5: 6}, total 6
            let expected5 = (6.0 + lambda) / (6.0 + lambda * size as f64);
            assert!((d.prob(5) - expected5).abs() < 1e-12);
            let tv = d.tv_distance(&Distribution::uniform(size));
            assert!(tv < last);
            last = tv;
        }
    }

    #[test]
    fn mle_rejects_bad_input() {
        assert!(matches!(SoftmaxTableLM::mle_fit(&[], 1, vocab(8), 0.1), Err(Error::EmptyCorpus)));
        assert!(matches!(
            SoftmaxTableLM::mle_fit(&[vec![4, 8]], 1, vocab(8), 0.1),
            Err(Error::InvalidToken { .. })
        ));
        assert!(matches!(SoftmaxTableLM::mle_fit(&[vec![4]], 5, vocab(8), 0.1), Err(Error::InvalidOrder(5))));
        assert!(SoftmaxTableLM::mle_fit(&[vec![4]], 1, vocab(8), -1.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn mle_matches_count_oracle(
            corpus in prop::collection::vec(prop::collection::vec(0u32..8, 1..40), 1..30),
            order in 1usize..=3,
            lambda in prop::sample::select(vec![0.1, 0.5, 2.0]),
        ) {
            let m = SoftmaxTableLM::mle_fit(&corpus, order, vocab(8), lambda).unwrap();
            for (ctx, expected) in brute_force_conditional(&corpus, order, 8, lambda) {
                let d = m.next_distribution(&ctx).unwrap();
                for (p, e) in d.probs().iter().zip(&expected) {
                    prop_assert!((p - e).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn next_distribution_is_normalized(
            seed in any::<u64>(),
            history in prop::collection::vec(0u32..12, 0..6),
        ) {
            let mut rng = rng_from_seed(seed);
            let logits = (0..12usize.pow(3)).map(|_| rng.gen_range(-20.0..20.0)).collect();
            let m = SoftmaxTableLM::from_logits(2, vocab(12), logits).unwrap();
            let d = m.next_distribution(&history).unwrap();
            let total: f64 = d.probs().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(d.probs().iter().all(|&p| p >= 0.0));
            let mut padded = vec![PAD; 3];
            padded.extend_from_slice(&history);
            prop_assert_eq!(d, m.next_distribution(&padded).unwrap());
        }
    }
}
