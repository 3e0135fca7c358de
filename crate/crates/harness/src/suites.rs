//! Trend-reproduction suites and their verdicts.

use std::fmt;

use draftlab_core::datagen::DomainKind;
use draftlab_core::distill::{DESK_OFFLINE_LR, DESK_ONLINE_LR};
use draftlab_core::seed::derive_seed;
use draftlab_core::specdec::{evaluate_acceptance, Averaging, VerificationMode, DEFAULT_PROPOSAL_LEN};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method, Scenario, WorldConfig};
use crate::error::Result;
use crate::lab::Lab;
use crate::metrics::{summarize, MetricsRecord, Summary};
use crate::runner::{run_all, RunOptions};

pub const SUITE_SEEDS: u64 = 5;
pub const SCALING_SIZES: [usize; 3] = [500, 2000, 8000];
pub const SUITE_DATA_SIZE: usize = 2000;
/// Two-point learning-rate grid: the online and offline defaults.
pub const LR_GRID: [f64; 2] = [DESK_ONLINE_LR, DESK_OFFLINE_LR];
pub const RELATED_SHIFT: f64 = 0.3;
pub const MIN_RELATIVE_DROP: f64 = 0.05;
pub const MIN_SYNTHETIC_RATIO: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Drop,
    Methods,
    Scaling,
    Lr,
    Synthetic,
    Related,
}

impl Suite {
    pub const ALL: [Suite; 6] = [Suite::Drop, Suite::Methods, Suite::Scaling, Suite::Lr, Suite::Synthetic, Suite::Related];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Drop => "drop",
            Suite::Methods => "methods",
            Suite::Scaling => "scaling",
            Suite::Lr => "lr",
            Suite::Synthetic => "synthetic",
            Suite::Related => "related",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub claim: String,
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    fn new(claim: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { claim: claim.into(), passed, detail: detail.into() }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.claim, self.detail)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub records: Vec<MetricsRecord>,
    pub verdicts: Vec<Verdict>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }
}

/// The seeds every suite averages over.
pub fn suite_seeds(master_seed: u64) -> Vec<u64> {
    (0..SUITE_SEEDS).map(|i| derive_seed(master_seed, "suite", i)).collect()
}

fn fmt_summary(s: Summary) -> String {
    format!("{:.4}±{:.4}", s.mean, s.stderr)
}

/// Standard error of a difference of two independent means.
fn pooled(a: Summary, b: Summary) -> f64 {
    (a.stderr.powi(2) + b.stderr.powi(2)).sqrt()
}

fn base(scenario: Scenario, method: Method, domain: DomainKind, seeds: &[u64], world: WorldConfig) -> ExperimentConfig {
    ExperimentConfig {
        data_size: SUITE_DATA_SIZE,
        seeds: seeds.to_vec(),
        world,
        ..ExperimentConfig::new(scenario, method, domain)
    }
}

/// Runs `suite` on a fresh default world.
pub fn reproduce(suite: Suite, master_seed: u64, options: &RunOptions) -> Result<SuiteReport> {
    reproduce_in(&Lab::new(WorldConfig::default()), suite, master_seed, options)
}

/// Runs `suite` reusing the models cached in `lab`.
pub fn reproduce_in(lab: &Lab, suite: Suite, master_seed: u64, options: &RunOptions) -> Result<SuiteReport> {
    let seeds = suite_seeds(master_seed);
    let (records, verdicts) = match suite {
        Suite::Drop => drop_suite(lab, &seeds)?,
        Suite::Methods => methods_suite(lab, &seeds, options)?,
        Suite::Scaling => scaling_suite(lab, &seeds, options)?,
        Suite::Lr => lr_suite(lab, &seeds, options)?,
        Suite::Synthetic => synthetic_suite(lab, &seeds, options)?,
        Suite::Related => related_suite(lab, &seeds, options)?,
    };
    Ok(SuiteReport { suite, records, verdicts })
}

/// Generic draft against the generic target and against each domain
/// target, on each domain's test prompts.
fn drop_suite(lab: &Lab, seeds: &[u64]) -> Result<(Vec<MetricsRecord>, Vec<Verdict>)> {
    let world = lab.world();
    let mut records = Vec::new();
    for domain in DomainKind::ALL {
        for (target_name, generic) in [("generic-target", true), ("domain-target", false)] {
            for &seed in seeds {
                let draft = lab.generic_draft(seed)?;
                let target = if generic { lab.generic_target(seed)? } else { lab.domain_target(seed, domain)? };
                let test = lab.test_prompts(seed, domain)?;
                let report = evaluate_acceptance(
                    &draft,
                    &target,
                    &test.prompts,
                    DEFAULT_PROPOSAL_LEN,
                    VerificationMode::Stochastic,
                    world.max_new_tokens,
                    derive_seed(seed, "eval", 0),
                )?;
                let total = report.total();
                records.push(MetricsRecord {
                    run_id: format!("drop/{domain}/{target_name}"),
                    scenario: "-".into(),
                    method: Method::Baseline.to_string(),
                    loss: String::new(),
                    learning_rate: 0.0,
                    data_size: 0,
                    seed,
                    acceptance_rate: report.rate(Averaging::Micro),
                    mean_accepted_per_round: total.mean_accepted_per_round(),
                    rounds: total.rounds as u64,
                    train_loss_final: None,
                    wall_time_seconds: 0.0,
                });
            }
        }
    }
    let verdicts = DomainKind::ALL
        .iter()
        .map(|domain| {
            let generic = summarize(&records, |r| r.run_id == format!("drop/{domain}/generic-target"));
            let specific = summarize(&records, |r| r.run_id == format!("drop/{domain}/domain-target"));
            let drop = (generic.mean - specific.mean) / generic.mean;
            Verdict::new(
                format!("drop/{domain}: domain target accepts less than generic target"),
                specific.mean < generic.mean && drop > MIN_RELATIVE_DROP,
                format!(
                    "generic {} domain {} relative drop {:.1}% (need > {:.0}%)",
                    fmt_summary(generic),
                    fmt_summary(specific),
                    100.0 * drop,
                    100.0 * MIN_RELATIVE_DROP
                ),
            )
        })
        .collect();
    Ok((records, verdicts))
}

fn by_method(records: &[MetricsRecord], method: Method) -> Summary {
    summarize(records, |r| r.method == method.name())
}

fn methods_suite(lab: &Lab, seeds: &[u64], options: &RunOptions) -> Result<(Vec<MetricsRecord>, Vec<Verdict>)> {
    let configs: Vec<ExperimentConfig> =
        Method::ALL.iter().map(|&m| base(Scenario::I, m, DomainKind::Topic, seeds, *lab.world())).collect();
    let records = run_all(&configs, lab, options)?;
    let [baseline, sft, off_fkl, on_fkl] =
        [Method::Baseline, Method::Sft, Method::OfflineFkl, Method::OnlineFkl].map(|m| by_method(&records, m));
    let table = Method::ALL
        .iter()
        .map(|&m| format!("{m} {}", fmt_summary(by_method(&records, m))))
        .collect::<Vec<_>>()
        .join(", ");
    let verdicts = vec![
        Verdict::new(
            "methods/TOPIC: offline-FKL >= online-FKL",
            off_fkl.mean >= on_fkl.mean,
            format!("offline-FKL {} online-FKL {}", fmt_summary(off_fkl), fmt_summary(on_fkl)),
        ),
        Verdict::new(
            "methods/TOPIC: offline-FKL >= SFT >= baseline",
            off_fkl.mean >= sft.mean && sft.mean >= baseline.mean,
            table,
        ),
    ];
    Ok((records, verdicts))
}

fn scaling_suite(lab: &Lab, seeds: &[u64], options: &RunOptions) -> Result<(Vec<MetricsRecord>, Vec<Verdict>)> {
    let mut configs = Vec::new();
    for domain in DomainKind::ALL {
        for n in SCALING_SIZES {
            configs.push(ExperimentConfig {
                data_size: n,
                ..base(Scenario::I, Method::OfflineFkl, domain, seeds, *lab.world())
            });
        }
    }
    let records = run_all(&configs, lab, options)?;
    let verdicts = DomainKind::ALL
        .iter()
        .map(|&domain| {
            let curve: Vec<Summary> = SCALING_SIZES
                .iter()
                .map(|&n| summarize(&records, |r| r.domain() == domain.name() && r.data_size == n))
                .collect();
            let monotone = curve.windows(2).all(|w| w[1].mean >= w[0].mean - pooled(w[0], w[1]));
            let detail = SCALING_SIZES
                .iter()
                .zip(&curve)
                .map(|(n, s)| format!("n={n} {}", fmt_summary(*s)))
                .collect::<Vec<_>>()
                .join(", ");
            let claim = if domain == DomainKind::Struct {
                "scaling/STRUCT: offline-FKL does not regress with data (saturation allowed)".to_string()
            } else {
                format!("scaling/{domain}: offline-FKL non-decreasing with data")
            };
            Verdict::new(claim, monotone, detail)
        })
        .collect();
    Ok((records, verdicts))
}

fn lr_suite(lab: &Lab, seeds: &[u64], options: &RunOptions) -> Result<(Vec<MetricsRecord>, Vec<Verdict>)> {
    let methods = [Method::Sft, Method::OfflineFkl, Method::OfflineRkl, Method::OnlineFkl, Method::OnlineRkl];
    let mut configs = vec![base(Scenario::I, Method::Baseline, DomainKind::Topic, seeds, *lab.world())];
    for m in methods {
        for lr in LR_GRID {
            configs.push(ExperimentConfig {
                learning_rate: Some(lr),
                ..base(Scenario::I, m, DomainKind::Topic, seeds, *lab.world())
            });
        }
    }
    let records = run_all(&configs, lab, options)?;
    let cell = |m: Method, lr: f64| summarize(&records, |r| r.method == m.name() && r.learning_rate == lr);
    let high = LR_GRID[1];
    let (fkl, rkl) = (cell(Method::OfflineFkl, high), cell(Method::OfflineRkl, high));
    let baseline = by_method(&records, Method::Baseline);
    let mut table = vec![format!("baseline {}", fmt_summary(baseline))];
    for m in methods {
        for lr in LR_GRID {
            let s = cell(m, lr);
            table.push(format!(
                "{m}@{lr} {} ({:+.1}%)",
                fmt_summary(s),
                100.0 * (s.mean - baseline.mean) / baseline.mean
            ));
        }
    }
    let verdicts = vec![
        Verdict::new(
            format!("lr/TOPIC: offline-FKL >= offline-RKL at lr {high} (1 s.e. allowance)"),
            fkl.mean >= rkl.mean - pooled(fkl, rkl),
            format!("FKL {} RKL {}", fmt_summary(fkl), fmt_summary(rkl)),
        ),
        Verdict::new("lr/TOPIC: grid", true, table.join(", ")),
    ];
    Ok((records, verdicts))
}

fn synthetic_suite(lab: &Lab, seeds: &[u64], options: &RunOptions) -> Result<(Vec<MetricsRecord>, Vec<Verdict>)> {
    let world = *lab.world();
    let configs = vec![
        base(Scenario::I, Method::Baseline, DomainKind::Topic, seeds, world),
        base(Scenario::I, Method::OfflineFkl, DomainKind::Topic, seeds, world),
        base(Scenario::III, Method::OfflineFkl, DomainKind::Topic, seeds, world),
    ];
    let records = run_all(&configs, lab, options)?;
    let baseline = by_method(&records, Method::Baseline);
    let in_domain = summarize(&records, |r| r.scenario == "I" && r.method == Method::OfflineFkl.name());
    let magpie = summarize(&records, |r| r.scenario == "III");
    let ratio = (magpie.mean - baseline.mean) / (in_domain.mean - baseline.mean);
    let verdicts = vec![Verdict::new(
        "synthetic/TOPIC: self-synthesized data recovers most of the in-domain gain",
        in_domain.mean > baseline.mean && ratio >= MIN_SYNTHETIC_RATIO,
        format!(
            "baseline {} in-domain {} synthetic {} ratio {ratio:.3} (need >= {MIN_SYNTHETIC_RATIO})",
            fmt_summary(baseline),
            fmt_summary(in_domain),
            fmt_summary(magpie)
        ),
    )];
    Ok((records, verdicts))
}

fn related_suite(lab: &Lab, seeds: &[u64], options: &RunOptions) -> Result<(Vec<MetricsRecord>, Vec<Verdict>)> {
    let world = *lab.world();
    let configs = vec![
        base(Scenario::I, Method::Baseline, DomainKind::Topic, seeds, world),
        ExperimentConfig { shift: RELATED_SHIFT, ..base(Scenario::II, Method::OfflineFkl, DomainKind::Topic, seeds, world) },
        base(Scenario::I, Method::OfflineFkl, DomainKind::Topic, seeds, world),
    ];
    let records = run_all(&configs, lab, options)?;
    let baseline = by_method(&records, Method::Baseline);
    let related = summarize(&records, |r| r.scenario == "II");
    let in_domain = summarize(&records, |r| r.scenario == "I" && r.method == Method::OfflineFkl.name());
    let detail = format!(
        "baseline {} shift {RELATED_SHIFT} {} shift 0 {}",
        fmt_summary(baseline),
        fmt_summary(related),
        fmt_summary(in_domain)
    );
    let verdicts = vec![Verdict::new(
        "related/TOPIC: baseline < related-domain training < in-domain training",
        baseline.mean < related.mean && related.mean < in_domain.mean,
        detail,
    )];
    Ok((records, verdicts))
}
