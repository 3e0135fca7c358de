//! Synthetic chat-formatted domain corpora.
//!
//! A record is `[USER] q1..qm [ASSISTANT] c1..cn [EOS]`. Queries and
//! completions are drawn from per-domain first-order grammars over segments
//! of the content vocabulary; the first completion token is conditioned on
//! the last query token through a bridge table. Three built-in domains have
//! distinct signatures:
//!
//! * `STRUCT`: a rigid call-like skeleton `name F0 value F1 value F2` with
//!   concentrated slot values (low-entropy completions).
//! * `TOPIC`: free text over the latin segment with its own token statistics.
//! * `SCRIPT`: free text over a disjoint script segment.
//!
//! A small set of function tokens is shared by all domains.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{greedy_completion, read_records, write_records, DistillExample, ExampleRecord};
use crate::error::{Error, Result};
use crate::lm::{Distribution, SoftmaxTableLM, Token, Vocabulary, ASSISTANT, EOS, USER};
use crate::seed::{derive_rng, derive_seed, LabRng};

/// Smoothing used when fitting domain targets.
pub const TARGET_SMOOTHING: f64 = 0.01;
pub const DEFAULT_TARGET_ORDER: usize = 3;
pub const DEFAULT_TEST_COUNT: usize = 200;
/// Resampling attempts per synthesized record after the first.
pub const MAGPIE_RETRIES: usize = 10;
/// Minimum fraction of requested synthetic records that must survive.
pub const MAGPIE_MIN_YIELD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTemplate {
    pub query_min: usize,
    pub query_max: usize,
    pub completion_min: usize,
    pub completion_max: usize,
}

impl Default for ChatTemplate {
    fn default() -> Self {
        Self { query_min: 1, query_max: 20, completion_min: 1, completion_max: 24 }
    }
}

/// Borrowed view of a record that parsed under a template.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParsedRecord<'a> {
    pub query: &'a [Token],
    pub completion: &'a [Token],
}

fn has_reserved(tokens: &[Token]) -> bool {
    tokens.iter().any(|&t| Vocabulary::is_reserved(t))
}

impl ChatTemplate {
    pub fn prompt(&self, query: &[Token]) -> Vec<Token> {
        let mut p = Vec::with_capacity(query.len() + 2);
        p.push(USER);
        p.extend_from_slice(query);
        p.push(ASSISTANT);
        p
    }

    pub fn record(&self, query: &[Token], completion: &[Token]) -> Vec<Token> {
        let mut r = self.prompt(query);
        r.extend_from_slice(completion);
        r.push(EOS);
        r
    }

    fn check_query<'a>(&self, query: &'a [Token]) -> Result<&'a [Token]> {
        if has_reserved(query) {
            return Err(Error::Template("reserved token inside the query".into()));
        }
        if !(self.query_min..=self.query_max).contains(&query.len()) {
            return Err(Error::Template(format!(
                "query length {} outside {}..={}",
                query.len(),
                self.query_min,
                self.query_max
            )));
        }
        Ok(query)
    }

    /// Parses `[USER] q [ASSISTANT]` and returns the query.
    pub fn parse_prompt<'a>(&self, prompt: &'a [Token]) -> Result<&'a [Token]> {
        match prompt {
            [USER, query @ .., ASSISTANT] => self.check_query(query),
            _ => Err(Error::Template("prompt must be [USER] query [ASSISTANT]".into())),
        }
    }

    pub fn parse<'a>(&self, record: &'a [Token]) -> Result<ParsedRecord<'a>> {
        let [USER, body @ .., EOS] = record else {
            return Err(Error::Template("record must start with USER and end with EOS".into()));
        };
        let split = body
            .iter()
            .position(|&t| t == ASSISTANT)
            .ok_or_else(|| Error::Template("missing ASSISTANT marker".into()))?;
        let query = self.check_query(&body[..split])?;
        let completion = &body[split + 1..];
        if has_reserved(completion) {
            return Err(Error::Template("reserved token inside the completion".into()));
        }
        if !(self.completion_min..=self.completion_max).contains(&completion.len()) {
            return Err(Error::Template(format!(
                "completion length {} outside {}..={}",
                completion.len(),
                self.completion_min,
                self.completion_max
            )));
        }
        Ok(ParsedRecord { query, completion })
    }

    pub fn parses(&self, record: &[Token]) -> bool {
        self.parse(record).is_ok()
    }
}

/// First-order generator over a token list: a weighted transition table and
/// a per-token probability of ending after that token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    pub tokens: Vec<Token>,
    pub transition: Vec<Vec<f64>>,
    pub stop: Vec<f64>,
}

impl Grammar {
    fn validate(&self, what: &str) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 || self.transition.len() != n || self.stop.len() != n {
            return Err(Error::InvalidArgument(format!("{what} grammar tables have inconsistent sizes")));
        }
        if self.transition.iter().any(|row| row.len() != n) {
            return Err(Error::InvalidArgument(format!("{what} transition table is not square")));
        }
        check_weights(&self.transition, what)?;
        if self.stop.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::InvalidArgument(format!("{what} stop probabilities must lie in [0, 1]")));
        }
        Ok(())
    }

    fn index_of(&self, token: Token) -> Option<usize> {
        self.tokens.iter().position(|&t| t == token)
    }

    /// Emits a chain starting at index `first`, honoring the length bounds.
    fn walk(&self, first: usize, min_len: usize, max_len: usize, rng: &mut LabRng) -> Vec<Token> {
        let mut out = vec![self.tokens[first]];
        let mut cur = first;
        while out.len() < max_len {
            if out.len() >= min_len && rng.gen::<f64>() < self.stop[cur] {
                break;
            }
            cur = sample_weights(&self.transition[cur], rng);
            out.push(self.tokens[cur]);
        }
        out
    }

    fn interpolate(&self, other: &Grammar, shift: f64) -> Grammar {
        Grammar {
            tokens: self.tokens.clone(),
            transition: mix_rows(&self.transition, &other.transition, shift),
            stop: mix(&self.stop, &other.stop, shift),
        }
    }
}

fn check_weights(rows: &[Vec<f64>], what: &str) -> Result<()> {
    for row in rows {
        if row.iter().any(|w| !w.is_finite() || *w < 0.0) || row.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidArgument(format!("{what} weights must be non-negative with positive sum")));
        }
    }
    Ok(())
}

fn sample_weights(weights: &[f64], rng: &mut LabRng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if u < w {
                return i;
            }
            u -= w;
            last = i;
        }
    }
    last
}

fn mix(a: &[f64], b: &[f64], s: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (1.0 - s) * x + s * y).collect()
}

fn mix_rows(a: &[Vec<f64>], b: &[Vec<f64>], s: f64) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| mix(x, y, s)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DomainKind {
    Struct,
    Topic,
    Script,
}

impl DomainKind {
    pub const ALL: [DomainKind; 3] = [DomainKind::Struct, DomainKind::Topic, DomainKind::Script];

    pub fn name(self) -> &'static str {
        match self {
            DomainKind::Struct => "STRUCT",
            DomainKind::Topic => "TOPIC",
            DomainKind::Script => "SCRIPT",
        }
    }
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DomainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "STRUCT" => Ok(DomainKind::Struct),
            "TOPIC" => Ok(DomainKind::Topic),
            "SCRIPT" => Ok(DomainKind::Script),
            other => Err(Error::Config(format!("unknown domain {other:?}"))),
        }
    }
}

/// Content-vocabulary segments shared by the built-in domains.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    pub function: Vec<Token>,
    pub latin: Vec<Token>,
    pub script: Vec<Token>,
}

impl Segments {
    pub fn new(vocab: Vocabulary) -> Result<Self> {
        if vocab.size() < 16 {
            return Err(Error::InvalidArgument("built-in domains need a vocabulary of at least 16".into()));
        }
        let content: Vec<Token> = vocab.content().collect();
        let n = content.len();
        let f = (n / 6).max(3);
        let latin = (n - f) / 2;
        Ok(Self {
            function: content[..f].to_vec(),
            latin: content[f..f + latin].to_vec(),
            script: content[f + latin..].to_vec(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub kind: DomainKind,
    pub vocab_size: usize,
    /// Seed the base grammar was drawn with.
    pub seed: u64,
    /// Interpolation weight towards an independently drawn grammar.
    pub shift: f64,
    pub template: ChatTemplate,
    /// Weights of the first query token, over `query.tokens`.
    pub query_start: Vec<f64>,
    pub query: Grammar,
    /// Weights of the first completion token (over `completion.tokens`)
    /// given the last query token (row, over `query.tokens`).
    pub bridge: Vec<Vec<f64>>,
    pub completion: Grammar,
}

/// Shape of a randomly drawn first-order chain.
///
/// Tokens are placed on a random line; each token's dominant successor lies
/// one or two places further along, so the most likely path always runs
/// forward into the last `terminals` places, where ending is likely.
struct FlowShape {
    peak: f64,
    fanout: usize,
    secondary: (f64, f64),
    terminals: usize,
    terminal_stop: (f64, f64),
    other_stop: (f64, f64),
}

struct Flow {
    grammar: Grammar,
    /// Place of each token on the line.
    rank: Vec<usize>,
}

fn draw_flow(tokens: &[Token], shape: &FlowShape, rng: &mut LabRng) -> Flow {
    let n = tokens.len();
    let mut by_rank: Vec<usize> = (0..n).collect();
    by_rank.shuffle(rng);
    let mut rank = vec![0; n];
    for (r, &i) in by_rank.iter().enumerate() {
        rank[i] = r;
    }
    let mut transition = vec![vec![0.0; n]; n];
    let mut stop = vec![0.0; n];
    for i in 0..n {
        let r = rank[i];
        let next = (r + 1 + rng.gen_range(0..2)).min(n - 1);
        transition[i][by_rank[next]] += shape.peak;
        for _ in 0..shape.fanout {
            let j = rng.gen_range(0..n);
            transition[i][j] += rng.gen_range(shape.secondary.0..shape.secondary.1);
        }
        let (lo, hi) = if r + shape.terminals >= n { shape.terminal_stop } else { shape.other_stop };
        stop[i] = rng.gen_range(lo..hi);
    }
    Flow { grammar: Grammar { tokens: tokens.to_vec(), transition, stop }, rank }
}

fn draw_start(n: usize, rng: &mut LabRng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.05f64..1.0).powi(2)).collect()
}

/// Bridge rows: one dominant first completion token per query token, drawn
/// among the `eligible` completion indices.
fn draw_bridge(rows: usize, eligible: &[usize], cols: usize, peak: f64, fanout: usize, rng: &mut LabRng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let mut row = vec![0.0; cols];
            row[*eligible.choose(rng).expect("eligible tokens")] += peak;
            for _ in 0..fanout {
                row[*eligible.choose(rng).expect("eligible tokens")] += rng.gen_range(0.1..1.0);
            }
            row
        })
        .collect()
}

fn sorted(mut tokens: Vec<Token>) -> Vec<Token> {
    tokens.sort_unstable();
    tokens
}

impl DomainSpec {
    /// Draws one of the built-in domains.
    pub fn builtin(kind: DomainKind, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let seg = Segments::new(vocab)?;
        let mut rng = derive_rng(seed, kind.name(), 0);
        let query_shape = FlowShape {
            peak: 4.0,
            fanout: 3,
            secondary: (0.2, 1.0),
            terminals: 7,
            terminal_stop: (0.4, 0.7),
            other_stop: (0.02, 0.1),
        };
        let text_shape = FlowShape {
            peak: 3.0,
            fanout: 4,
            secondary: (0.2, 1.0),
            terminals: 7,
            terminal_stop: (0.7, 0.9),
            other_stop: (0.0, 0.05),
        };

        // Queries see only part of the content segment, which keeps query
        // and completion trigrams from colliding in an order-3 target.
        let content = match kind {
            DomainKind::Struct | DomainKind::Topic => &seg.latin,
            DomainKind::Script => &seg.script,
        };
        let query_tokens = sorted([&seg.function[..], &content[..content.len() / 2]].concat());
        let completion_tokens = content.clone();
        let query = draw_flow(&query_tokens, &query_shape, &mut rng).grammar;
        let query_start = draw_start(query.tokens.len(), &mut rng);

        let (completion, bridge) = match kind {
            DomainKind::Struct => {
                let completion = struct_skeleton(&seg, &mut rng);
                let idx = |t: Token| completion.index_of(t).expect("skeleton token");
                let third = seg.latin.len() / 3;
                let names: Vec<usize> = seg.latin[..third].iter().map(|&t| idx(t)).collect();
                let bridge = draw_bridge(query.tokens.len(), &names, completion.tokens.len(), 8.0, 2, &mut rng);
                (completion, bridge)
            }
            DomainKind::Topic | DomainKind::Script => {
                let flow = draw_flow(&completion_tokens, &text_shape, &mut rng);
                let n = completion_tokens.len();
                let early: Vec<usize> = (0..n).filter(|&i| flow.rank[i] < n / 2).collect();
                let bridge = draw_bridge(query.tokens.len(), &early, n, 4.0, 3, &mut rng);
                (flow.grammar, bridge)
            }
        };

        let spec = Self {
            name: kind.name().to_string(),
            kind,
            vocab_size: vocab.size(),
            seed,
            shift: 0.0,
            template: ChatTemplate::default(),
            query_start,
            query,
            bridge,
            completion,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// This domain's parameters interpolated by `shift` towards an
    /// independently drawn grammar of the same kind. `shift = 0` returns
    /// the base grammar unchanged.
    pub fn shifted(&self, shift: f64) -> Result<Self> {
        self.shifted_towards(shift, 0)
    }

    /// Like [`DomainSpec::shifted`], towards re-draw number `variant`.
    /// Different variants give unrelated shift directions.
    pub fn shifted_towards(&self, shift: f64, variant: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&shift) {
            return Err(Error::InvalidArgument(format!("shift {shift} outside [0, 1]")));
        }
        if self.shift != 0.0 {
            return Err(Error::InvalidArgument("only a base (unshifted) domain can be shifted".into()));
        }
        if shift == 0.0 {
            return Ok(self.clone());
        }
        let vocab = Vocabulary::new(self.vocab_size)?;
        let alt = Self::builtin(self.kind, vocab, derive_seed(self.seed, "redraw", variant))?;
        let spec = Self {
            name: format!("{}~{shift}", self.name),
            shift,
            query_start: mix(&self.query_start, &alt.query_start, shift),
            query: self.query.interpolate(&alt.query, shift),
            bridge: mix_rows(&self.bridge, &alt.bridge, shift),
            completion: self.completion.interpolate(&alt.completion, shift),
            ..self.clone()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let vocab = Vocabulary::new(self.vocab_size)?;
        self.query.validate("query")?;
        self.completion.validate("completion")?;
        for g in [&self.query, &self.completion] {
            vocab.check(&g.tokens)?;
            if has_reserved(&g.tokens) {
                return Err(Error::InvalidArgument("grammars may only emit content tokens".into()));
            }
        }
        if self.query_start.len() != self.query.tokens.len() {
            return Err(Error::InvalidArgument("query_start size mismatch".into()));
        }
        check_weights(std::slice::from_ref(&self.query_start), "query_start")?;
        if self.bridge.len() != self.query.tokens.len()
            || self.bridge.iter().any(|r| r.len() != self.completion.tokens.len())
        {
            return Err(Error::InvalidArgument("bridge table size mismatch".into()));
        }
        check_weights(&self.bridge, "bridge")?;
        let t = &self.template;
        if t.query_min == 0 || t.completion_min == 0 || t.query_min > t.query_max || t.completion_min > t.completion_max {
            return Err(Error::InvalidArgument("invalid template length bounds".into()));
        }
        Ok(())
    }

    pub fn sample_query(&self, rng: &mut LabRng) -> Vec<Token> {
        let first = sample_weights(&self.query_start, rng);
        self.query.walk(first, self.template.query_min, self.template.query_max, rng)
    }

    fn sample_completion(&self, query: &[Token], rng: &mut LabRng) -> Vec<Token> {
        let last = *query.last().expect("non-empty query");
        let row = self.query.index_of(last).expect("query token from the query grammar");
        let first = sample_weights(&self.bridge[row], rng);
        self.completion.walk(first, self.template.completion_min, self.template.completion_max, rng)
    }

    pub fn sample_record(&self, rng: &mut LabRng) -> Vec<Token> {
        let query = self.sample_query(rng);
        let completion = self.sample_completion(&query, rng);
        self.template.record(&query, &completion)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// `name F0 value F1 value F2` over fixed slots of the latin and function
/// segments; only the slot weights are random.
fn struct_skeleton(seg: &Segments, rng: &mut LabRng) -> Grammar {
    let third = seg.latin.len() / 3;
    let names = &seg.latin[..third];
    let first_values = &seg.latin[third..2 * third];
    let second_values = &seg.latin[2 * third..];
    let [f0, f1, f2] = [seg.function[0], seg.function[1], seg.function[2]];

    let tokens = sorted([names, first_values, second_values, &[f0, f1, f2]].concat());
    let n = tokens.len();
    let idx = |t: Token| tokens.iter().position(|&x| x == t).expect("skeleton token");
    let mut transition = vec![vec![0.0; n]; n];
    let mut stop = vec![0.0; n];
    let mut slot = |from: Token, values: &[Token], rng: &mut LabRng| {
        let favourite = *values.choose(rng).expect("slot values");
        for &v in values {
            transition[idx(from)][idx(v)] = if v == favourite { 6.0 } else { rng.gen_range(0.05..0.4) };
        }
    };
    slot(f0, first_values, rng);
    slot(f1, second_values, rng);
    for &t in names {
        transition[idx(t)][idx(f0)] = 1.0;
    }
    for &t in first_values {
        transition[idx(t)][idx(f1)] = 1.0;
    }
    for &t in second_values {
        transition[idx(t)][idx(f2)] = 1.0;
    }
    // Never followed: the record always ends after the closing token.
    transition[idx(f2)][idx(f0)] = 1.0;
    stop[idx(f2)] = 1.0;
    Grammar { tokens, transition, stop }
}

/// Seeded, reproducible full chat records.
pub fn gen_domain_corpus(spec: &DomainSpec, count: usize, seed: u64) -> Result<Vec<Vec<Token>>> {
    if count == 0 {
        return Err(Error::InvalidArgument("corpus count must be at least 1".into()));
    }
    let mut rng = derive_rng(seed, "corpus", 0);
    Ok((0..count).map(|_| spec.sample_record(&mut rng)).collect())
}

/// Prompts ending at the ASSISTANT marker.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QuerySet {
    pub prompts: Vec<Vec<Token>>,
}

impl QuerySet {
    /// Prompts of full records (everything up to and including ASSISTANT).
    pub fn from_records(records: &[Vec<Token>]) -> Result<Self> {
        let prompts = records
            .iter()
            .map(|r| {
                let end = r
                    .iter()
                    .position(|&t| t == ASSISTANT)
                    .ok_or_else(|| Error::Template("record without ASSISTANT marker".into()))?;
                Ok(r[..=end].to_vec())
            })
            .collect::<Result<_>>()?;
        Ok(Self { prompts })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn validate(&self, template: &ChatTemplate) -> Result<()> {
        self.prompts.iter().try_for_each(|p| template.parse_prompt(p).map(|_| ()))
    }

    pub fn write_jsonl<W: Write>(&self, w: W) -> Result<()> {
        write_records(
            self.prompts
                .iter()
                .map(|p| ExampleRecord { prompt: p.clone(), completion: Vec::new(), target_probs: None }),
            w,
        )
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        Ok(Self { prompts: read_records(r)?.into_iter().map(|rec| rec.prompt).collect() })
    }
}

/// Training records and held-out prompts.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<Vec<Token>>,
    pub test: QuerySet,
}

impl Split {
    pub fn train_prompts(&self) -> Result<QuerySet> {
        QuerySet::from_records(&self.train)
    }
}

/// Seeded shuffle, then the first `test_count` records become test prompts.
pub fn scenario_i_split(corpus: &[Vec<Token>], test_count: usize, seed: u64) -> Result<Split> {
    if test_count >= corpus.len() {
        return Err(Error::InvalidArgument(format!(
            "test count {test_count} must be smaller than the corpus ({})",
            corpus.len()
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut derive_rng(seed, "split", 0));
    let test_records: Vec<Vec<Token>> = order[..test_count].iter().map(|&i| corpus[i].clone()).collect();
    let train = order[test_count..].iter().map(|&i| corpus[i].clone()).collect();
    Ok(Split { train, test: QuerySet::from_records(&test_records)? })
}

/// Queries from the related domain obtained by shifting `spec`.
///
/// Records are drawn exactly as [`gen_domain_corpus`] draws them, so with
/// the same seed the related queries are coupled to the base domain's and
/// converge to them as the shift goes to zero.
pub fn scenario_ii_related(spec: &DomainSpec, shift: f64, count: usize, seed: u64) -> Result<QuerySet> {
    if !(shift > 0.0 && shift <= 1.0) {
        return Err(Error::InvalidArgument(format!("related-domain shift {shift} must lie in (0, 1]")));
    }
    QuerySet::from_records(&gen_domain_corpus(&spec.shifted(shift)?, count, seed)?)
}

/// Fits an add-λ target of the given order on a fresh domain corpus.
pub fn train_domain_target(spec: &DomainSpec, corpus_size: usize, order: usize, seed: u64) -> Result<SoftmaxTableLM> {
    let corpus = gen_domain_corpus(spec, corpus_size, derive_seed(seed, "target-corpus", 0))?;
    SoftmaxTableLM::mle_fit(&corpus, order, Vocabulary::new(spec.vocab_size)?, TARGET_SMOOTHING)
}

/// Fits a target on an equal mixture of every domain's corpus.
pub fn train_generic_target(
    specs: &[DomainSpec],
    corpus_size_per_domain: usize,
    order: usize,
    seed: u64,
) -> Result<SoftmaxTableLM> {
    let first = specs.first().ok_or(Error::EmptyCorpus)?;
    let mut corpus = Vec::with_capacity(specs.len() * corpus_size_per_domain);
    for (i, spec) in specs.iter().enumerate() {
        if spec.vocab_size != first.vocab_size {
            return Err(Error::InvalidArgument("domains use different vocabularies".into()));
        }
        corpus.extend(gen_domain_corpus(spec, corpus_size_per_domain, derive_seed(seed, "generic-corpus", i as u64))?);
    }
    SoftmaxTableLM::mle_fit(&corpus, order, Vocabulary::new(first.vocab_size)?, TARGET_SMOOTHING)
}

/// Counters from a synthesis run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MagpieStats {
    pub attempts: usize,
    /// Attempts whose raw record parsed under the template.
    pub parsed: usize,
    /// Items abandoned after exhausting retries.
    pub skipped: usize,
}

impl MagpieStats {
    pub fn parse_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.parsed as f64 / self.attempts as f64
        }
    }
}

/// Prompt, completion and the target distributions along the completion.
type Synthesized = (Vec<Token>, Vec<Token>, Vec<Distribution>);

/// One raw synthesis attempt: a sampled query after the USER marker, then
/// the greedy completion with its target distributions. `None` if the
/// target never produced the ASSISTANT marker.
fn magpie_attempt(
    target: &SoftmaxTableLM,
    max_query_len: usize,
    max_completion_len: usize,
    rng: &mut LabRng,
) -> Result<Option<Synthesized>> {
    let mut prompt = vec![USER];
    for _ in 0..max_query_len + 1 {
        let t = target.distribution_at(target.context_key(&prompt)).sample(rng);
        prompt.push(t);
        if t == ASSISTANT {
            let (completion, dists) = greedy_completion(target, &prompt, max_completion_len)?;
            return Ok(Some((prompt, completion, dists)));
        }
    }
    Ok(None)
}

/// Elicits queries and completions from the target alone.
///
/// Each item conditions on `[USER]`, samples at temperature 1 until the
/// target emits `[ASSISTANT]`, then greedily completes until `[EOS]`.
/// Records that do not parse under `template` are resampled up to
/// [`MAGPIE_RETRIES`] times and then skipped.
pub fn magpie_synthesize(
    target: &SoftmaxTableLM,
    template: &ChatTemplate,
    count: usize,
    seed: u64,
    max_query_len: usize,
    max_completion_len: usize,
) -> Result<(Vec<DistillExample>, MagpieStats)> {
    if count == 0 || max_query_len == 0 || max_completion_len == 0 {
        return Err(Error::InvalidArgument("count and length limits must be positive".into()));
    }
    let mut rng = derive_rng(seed, "magpie", 0);
    let mut stats = MagpieStats::default();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut kept = None;
        for _ in 0..=MAGPIE_RETRIES {
            stats.attempts += 1;
            let Some((prompt, completion, dists)) = magpie_attempt(target, max_query_len, max_completion_len, &mut rng)?
            else {
                continue;
            };
            let record = [prompt.as_slice(), completion.as_slice()].concat();
            if template.parses(&record) {
                stats.parsed += 1;
                kept = Some(DistillExample::new(prompt, completion, Some(dists))?);
                break;
            }
        }
        match kept {
            Some(ex) => out.push(ex),
            None => stats.skipped += 1,
        }
    }
    if (out.len() as f64) < MAGPIE_MIN_YIELD * count as f64 {
        return Err(Error::YieldTooLow { survived: out.len(), requested: count });
    }
    Ok((out, stats))
}

/// Empirical unigram distribution of the given tokens over `0..size`.
pub fn token_histogram<'a>(tokens: impl IntoIterator<Item = &'a Token>, size: usize) -> Distribution {
    let mut counts = vec![0.0; size];
    let mut n = 0.0;
    for &t in tokens {
        counts[t as usize] += 1.0;
        n += 1.0;
    }
    if n == 0.0 {
        return Distribution::uniform(size);
    }
    counts.iter_mut().for_each(|c| *c /= n);
    Distribution::with_tolerance(counts, 1e-9).expect("normalized histogram")
}

/// Plug-in estimate of the per-token conditional entropy H(next | previous)
/// within completions, in nats.
pub fn completion_conditional_entropy(records: &[Vec<Token>], template: &ChatTemplate) -> Result<f64> {
    let mut pairs: HashMap<(Token, Token), f64> = HashMap::new();
    let mut prev_counts: HashMap<Token, f64> = HashMap::new();
    let mut total = 0.0;
    for r in records {
        let parsed = template.parse(r)?;
        let mut prev = ASSISTANT;
        for &t in parsed.completion.iter().chain(std::iter::once(&EOS)) {
            *pairs.entry((prev, t)).or_default() += 1.0;
            *prev_counts.entry(prev).or_default() += 1.0;
            total += 1.0;
            prev = t;
        }
    }
    Ok(pairs.iter().map(|(&(a, _), &c)| -(c / total) * (c / prev_counts[&a]).ln()).sum())
}
