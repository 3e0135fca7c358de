//! Seeded simulated world: domain grammars, targets, the generic draft and
//! held-out test prompts, built on demand and shared between runs.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use draftlab_core::datagen::{
    gen_domain_corpus, train_domain_target, train_generic_target, DomainKind, DomainSpec, QuerySet, TARGET_SMOOTHING,
};
use draftlab_core::seed::derive_seed;
use draftlab_core::{SoftmaxTableLM, Vocabulary};

use crate::config::WorldConfig;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum ModelKey {
    DomainTarget(u64, DomainKind),
    GenericTarget(u64),
    GenericDraft(u64),
}

/// Re-draw used for the general versions of the domains; scenario II
/// shifts use variant 0.
const GENERAL_VARIANT: u64 = 1;

type Slot = Arc<Mutex<Option<Arc<SoftmaxTableLM>>>>;

fn domain_index(kind: DomainKind) -> u64 {
    DomainKind::ALL.iter().position(|&k| k == kind).expect("known domain") as u64
}

/// Thread-safe memo of the models of every seed's world.
#[derive(Debug, Default)]
pub struct Lab {
    world: WorldConfig,
    models: Mutex<HashMap<ModelKey, Slot>>,
}

impl Lab {
    pub fn new(world: WorldConfig) -> Self {
        Self { world, models: Mutex::default() }
    }

    pub fn world(&self) -> &WorldConfig {
        &self.world
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        Ok(Vocabulary::new(self.world.vocab_size)?)
    }

    pub fn spec(&self, seed: u64, kind: DomainKind) -> Result<DomainSpec> {
        Ok(DomainSpec::builtin(kind, self.vocab()?, derive_seed(seed, "domain-grammar", 0))?)
    }

    pub fn specs(&self, seed: u64) -> Result<Vec<DomainSpec>> {
        DomainKind::ALL.iter().map(|&k| self.spec(seed, k)).collect()
    }

    /// Broad-coverage versions of the domains that general-purpose models
    /// are trained on; domain targets specialize away from these.
    pub fn general_specs(&self, seed: u64) -> Result<Vec<DomainSpec>> {
        self.specs(seed)?
            .iter()
            .map(|s| Ok(s.shifted_towards(self.world.general_shift, GENERAL_VARIANT)?))
            .collect()
    }

    /// Held-out prompts of a domain, independent of every training draw.
    pub fn test_prompts(&self, seed: u64, kind: DomainKind) -> Result<QuerySet> {
        let records =
            gen_domain_corpus(&self.spec(seed, kind)?, self.world.test_count, derive_seed(seed, "test", domain_index(kind)))?;
        Ok(QuerySet::from_records(&records)?)
    }

    /// Seed of the training draw. Scenario II reuses it so that related
    /// queries are coupled to the in-domain ones.
    pub fn train_seed(&self, seed: u64, kind: DomainKind) -> u64 {
        derive_seed(seed, "train", domain_index(kind))
    }

    /// Fresh in-domain training records.
    pub fn train_records(&self, seed: u64, kind: DomainKind, count: usize) -> Result<Vec<Vec<u32>>> {
        Ok(gen_domain_corpus(&self.spec(seed, kind)?, count, self.train_seed(seed, kind))?)
    }

    fn memo(&self, key: ModelKey, build: impl FnOnce() -> Result<SoftmaxTableLM>) -> Result<Arc<SoftmaxTableLM>> {
        let slot = self.models.lock().expect("model cache poisoned").entry(key).or_default().clone();
        let mut guard = slot.lock().expect("model slot poisoned");
        if let Some(model) = guard.as_ref() {
            return Ok(model.clone());
        }
        let model = Arc::new(build()?);
        *guard = Some(model.clone());
        Ok(model)
    }

    pub fn domain_target(&self, seed: u64, kind: DomainKind) -> Result<Arc<SoftmaxTableLM>> {
        self.memo(ModelKey::DomainTarget(seed, kind), || {
            let spec = self.spec(seed, kind)?;
            Ok(train_domain_target(
                &spec,
                self.world.target_corpus_size,
                self.world.target_order,
                derive_seed(seed, "domain-target", domain_index(kind)),
            )?)
        })
    }

    /// Target fit on an equal mixture of the general versions of all domains.
    pub fn generic_target(&self, seed: u64) -> Result<Arc<SoftmaxTableLM>> {
        self.memo(ModelKey::GenericTarget(seed), || {
            Ok(train_generic_target(
                &self.general_specs(seed)?,
                self.world.target_corpus_size,
                self.world.target_order,
                derive_seed(seed, "generic-target", 0),
            )?)
        })
    }

    /// Smaller-order model fit on its own equal mixture of the general
    /// versions of all domains.
    pub fn generic_draft(&self, seed: u64) -> Result<Arc<SoftmaxTableLM>> {
        self.memo(ModelKey::GenericDraft(seed), || {
            let mut corpus = Vec::new();
            for (i, spec) in self.general_specs(seed)?.iter().enumerate() {
                corpus.extend(gen_domain_corpus(
                    spec,
                    self.world.draft_corpus_size,
                    derive_seed(seed, "generic-draft", i as u64),
                )?);
            }
            Ok(SoftmaxTableLM::mle_fit(&corpus, self.world.draft_order, self.vocab()?, TARGET_SMOOTHING)?)
        })
    }

    /// Drops every cached model of `seed`.
    pub fn evict(&self, seed: u64) {
        self.models.lock().expect("model cache poisoned").retain(|key, _| {
            !matches!(key, ModelKey::DomainTarget(s, _) | ModelKey::GenericTarget(s) | ModelKey::GenericDraft(s) if *s == seed)
        });
    }
}
