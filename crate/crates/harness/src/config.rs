//! Experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use draftlab_core::datagen::{DomainKind, DEFAULT_TARGET_ORDER, DEFAULT_TEST_COUNT};
use draftlab_core::distill::{
    LossKind, TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_OFFLINE_EPOCHS, DEFAULT_ONLINE_THRESHOLD, DESK_OFFLINE_LR,
    DESK_ONLINE_LR,
};
use draftlab_core::specdec::{VerificationMode, DEFAULT_PROPOSAL_LEN};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Where the draft's training queries come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    /// In-domain queries.
    #[default]
    I,
    /// Queries from a shifted, related domain.
    II,
    /// Queries and completions synthesized by the target.
    III,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::I => "I",
            Scenario::II => "II",
            Scenario::III => "III",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "1" => Ok(Scenario::I),
            "II" | "2" => Ok(Scenario::II),
            "III" | "3" => Ok(Scenario::III),
            other => Err(HarnessError::Config(format!("unknown scenario {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[default]
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "SFT")]
    Sft,
    #[serde(rename = "offline-FKL")]
    OfflineFkl,
    #[serde(rename = "offline-RKL")]
    OfflineRkl,
    #[serde(rename = "online-FKL")]
    OnlineFkl,
    #[serde(rename = "online-RKL")]
    OnlineRkl,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Baseline, Method::Sft, Method::OfflineFkl, Method::OfflineRkl, Method::OnlineFkl, Method::OnlineRkl];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Sft => "SFT",
            Method::OfflineFkl => "offline-FKL",
            Method::OfflineRkl => "offline-RKL",
            Method::OnlineFkl => "online-FKL",
            Method::OnlineRkl => "online-RKL",
        }
    }

    pub fn loss(self) -> Option<LossKind> {
        match self {
            Method::Baseline => None,
            Method::Sft => Some(LossKind::Sft),
            Method::OfflineFkl | Method::OnlineFkl => Some(LossKind::Fkl),
            Method::OfflineRkl | Method::OnlineRkl => Some(LossKind::Rkl),
        }
    }

    pub fn is_online(self) -> bool {
        matches!(self, Method::OnlineFkl | Method::OnlineRkl)
    }

    /// Learning rate used when the configuration does not set one.
    pub fn default_learning_rate(self) -> f64 {
        match self {
            Method::Baseline => 0.0,
            Method::OnlineFkl | Method::OnlineRkl => DESK_ONLINE_LR,
            Method::Sft | Method::OfflineFkl | Method::OfflineRkl => DESK_OFFLINE_LR,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| HarnessError::Config(format!("unknown method {s:?}")))
    }
}

/// Shape of the simulated world shared by every run with the same seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub vocab_size: usize,
    pub target_order: usize,
    pub draft_order: usize,
    /// Records per domain used to fit each target.
    pub target_corpus_size: usize,
    /// Records per domain used to fit the generic draft.
    pub draft_corpus_size: usize,
    pub test_count: usize,
    pub max_new_tokens: usize,
    /// How far the general-purpose training data sits from each domain.
    pub general_shift: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            vocab_size: 40,
            target_order: DEFAULT_TARGET_ORDER,
            draft_order: 2,
            target_corpus_size: 4000,
            draft_corpus_size: 2000,
            test_count: DEFAULT_TEST_COUNT,
            max_new_tokens: 64,
            general_shift: 0.5,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_corpus_size == 0 || self.draft_corpus_size == 0 || self.test_count == 0 {
            return Err(HarnessError::Config("world corpus sizes and test count must be positive".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(HarnessError::Config("max_new_tokens must be positive".into()));
        }
        let orders = 1..=draftlab_core::lm::MAX_ORDER;
        if !orders.contains(&self.draft_order) || !orders.contains(&self.target_order) {
            return Err(HarnessError::Config(format!("model orders must lie in {orders:?}")));
        }
        if !(0.0..=1.0).contains(&self.general_shift) {
            return Err(HarnessError::Config("general_shift must lie in [0, 1]".into()));
        }
        draftlab_core::Vocabulary::new(self.vocab_size)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub method: Method,
    pub domain: DomainKind,
    pub data_size: usize,
    /// Overrides the method's default learning rate.
    pub learning_rate: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub online_threshold: usize,
    pub k: usize,
    pub mode: VerificationMode,
    /// Domain shift of scenario II training queries.
    pub shift: f64,
    pub seeds: Vec<u64>,
    pub output: Option<PathBuf>,
    /// Appended to every run id.
    pub tag: Option<String>,
    pub world: WorldConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::I,
            method: Method::Baseline,
            domain: DomainKind::Topic,
            data_size: 2000,
            learning_rate: None,
            epochs: DEFAULT_OFFLINE_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            online_threshold: DEFAULT_ONLINE_THRESHOLD,
            k: DEFAULT_PROPOSAL_LEN,
            mode: VerificationMode::Stochastic,
            shift: 0.3,
            seeds: vec![0, 1, 2, 3, 4],
            output: None,
            tag: None,
            world: WorldConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario, method: Method, domain: DomainKind) -> Self {
        Self { scenario, method, domain, ..Self::default() }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or_else(|| self.method.default_learning_rate())
    }

    /// Rejects inconsistent combinations before any work is done.
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed is required".into()));
        }
        if self.data_size == 0 {
            return Err(HarnessError::Config("data_size must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(HarnessError::Config("proposal length k must be at least 1".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.online_threshold == 0 {
            return Err(HarnessError::Config("epochs, batch_size and online_threshold must be positive".into()));
        }
        let lr = self.learning_rate();
        if !lr.is_finite() || lr < 0.0 {
            return Err(HarnessError::Config(format!("learning rate {lr} must be finite and >= 0")));
        }
        if self.method == Method::Baseline && self.learning_rate.is_some_and(|lr| lr != 0.0) {
            return Err(HarnessError::Config("baseline does not train; drop learning_rate".into()));
        }
        if self.scenario == Scenario::II && !(self.shift > 0.0 && self.shift <= 1.0) {
            return Err(HarnessError::Config(format!("scenario II needs a shift in (0, 1], got {}", self.shift)));
        }
        Ok(())
    }

    /// Training hyperparameters for one seed, if the method trains.
    pub fn train_config(&self, seed: u64) -> Option<TrainConfig> {
        let loss = self.method.loss()?;
        let base = if self.method.is_online() { TrainConfig::online(loss) } else { TrainConfig::offline(loss) };
        // Online methods stream the prompts once whatever `epochs` says.
        let epochs = if self.method.is_online() { 1 } else { self.epochs };
        Some(TrainConfig { learning_rate: self.learning_rate(), epochs, batch_size: self.batch_size, seed, ..base })
    }

    pub fn run_id(&self) -> String {
        let mut id = format!(
            "{}/{}/{}/n{}/lr{}/k{}",
            self.scenario,
            self.domain,
            self.method,
            self.data_size,
            self.learning_rate(),
            self.k
        );
        if self.scenario == Scenario::II {
            id.push_str(&format!("/shift{}", self.shift));
        }
        if let Some(tag) = &self.tag {
            id.push('/');
            id.push_str(tag);
        }
        id
    }
}
