//! Executes experiment configurations.

use std::time::Instant;

use draftlab_core::datagen::{magpie_synthesize, scenario_ii_related, QuerySet};
use draftlab_core::distill::{build_offline_dataset, train_offline, train_online, DistillExample, OnlineConfig};
use draftlab_core::seed::derive_seed;
use draftlab_core::specdec::{evaluate_acceptance, Averaging};
use draftlab_core::{SoftmaxTableLM, Token};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Method, Scenario};
use crate::error::{HarnessError, Result};
use crate::lab::Lab;
use crate::metrics::{Axis, MetricsRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads for independent (configuration, seed) runs.
    pub jobs: usize,
    /// Record wall time; off by default so outputs are byte-identical.
    pub timing: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { jobs: 1, timing: false }
    }
}

enum TrainingData {
    Prompts(Vec<Vec<Token>>),
    Examples(Vec<DistillExample>),
}

fn training_data(config: &ExperimentConfig, lab: &Lab, seed: u64, target: &SoftmaxTableLM) -> Result<TrainingData> {
    let spec = lab.spec(seed, config.domain)?;
    Ok(match config.scenario {
        Scenario::I => {
            TrainingData::Prompts(QuerySet::from_records(&lab.train_records(seed, config.domain, config.data_size)?)?.prompts)
        }
        Scenario::II => TrainingData::Prompts(
            scenario_ii_related(&spec, config.shift, config.data_size, lab.train_seed(seed, config.domain))?.prompts,
        ),
        Scenario::III => {
            let t = &spec.template;
            let (examples, _) = magpie_synthesize(
                target,
                t,
                config.data_size,
                derive_seed(seed, "magpie", 0),
                t.query_max,
                t.completion_max,
            )?;
            TrainingData::Examples(examples)
        }
    })
}

/// Trains the draft for one seed. Returns the trained model and the final
/// training loss, or `None` for the baseline.
fn train(
    config: &ExperimentConfig,
    lab: &Lab,
    seed: u64,
    draft: &SoftmaxTableLM,
    target: &SoftmaxTableLM,
) -> Result<Option<(SoftmaxTableLM, Option<f64>)>> {
    let Some(train_config) = config.train_config(derive_seed(seed, "train-order", 0)) else {
        return Ok(None);
    };
    let data = training_data(config, lab, seed, target)?;
    if config.method.is_online() {
        let prompts = match data {
            TrainingData::Prompts(p) => p,
            TrainingData::Examples(e) => e.into_iter().map(|ex| ex.prompt).collect(),
        };
        let online = OnlineConfig {
            threshold: config.online_threshold,
            mode: config.mode,
            ..OnlineConfig::new(train_config, config.k, lab.world().max_new_tokens)
        };
        let (model, report) = train_online(draft, target, &prompts, &online, derive_seed(seed, "online", 0))?;
        return Ok(Some((model, report.update_losses.last().copied())));
    }
    let white_box = train_config.loss.is_white_box();
    let dataset = match data {
        TrainingData::Prompts(p) => build_offline_dataset(target, &p, lab.world().max_new_tokens, white_box)?,
        TrainingData::Examples(e) => e,
    };
    let (model, trace) = train_offline(draft, &dataset, &train_config)?;
    Ok(Some((model, trace.last().copied())))
}

/// The draft a configuration produces for one seed, with its final
/// training loss. The baseline returns the untrained generic draft.
pub fn train_draft(config: &ExperimentConfig, lab: &Lab, seed: u64) -> Result<(SoftmaxTableLM, Option<f64>)> {
    config.validate()?;
    check_world(config, lab)?;
    let target = lab.domain_target(seed, config.domain)?;
    let generic = lab.generic_draft(seed)?;
    Ok(train(config, lab, seed, &generic, &target)?.unwrap_or_else(|| (generic.as_ref().clone(), None)))
}

/// One record for one seed.
pub fn run_seed(config: &ExperimentConfig, lab: &Lab, seed: u64, timing: bool) -> Result<MetricsRecord> {
    let start = Instant::now();
    let target = lab.domain_target(seed, config.domain)?;
    let generic = lab.generic_draft(seed)?;
    let trained = train(config, lab, seed, &generic, &target)?;
    let (draft, train_loss_final) = match &trained {
        Some((model, loss)) => (model, *loss),
        None => (generic.as_ref(), None),
    };
    let test = lab.test_prompts(seed, config.domain)?;
    let report = evaluate_acceptance(
        draft,
        &target,
        &test.prompts,
        config.k,
        config.mode,
        lab.world().max_new_tokens,
        derive_seed(seed, "eval", 0),
    )?;
    let total = report.total();
    Ok(MetricsRecord {
        run_id: config.run_id(),
        scenario: config.scenario.to_string(),
        method: config.method.to_string(),
        loss: config.method.loss().map(|l| l.to_string()).unwrap_or_default(),
        learning_rate: config.learning_rate(),
        data_size: config.data_size,
        seed,
        acceptance_rate: report.rate(Averaging::Micro),
        mean_accepted_per_round: total.mean_accepted_per_round(),
        rounds: total.rounds as u64,
        train_loss_final,
        wall_time_seconds: if timing { start.elapsed().as_secs_f64() } else { 0.0 },
    })
}

fn check_world(config: &ExperimentConfig, lab: &Lab) -> Result<()> {
    if config.world != *lab.world() {
        return Err(HarnessError::Config("configuration world differs from the lab's world".into()));
    }
    Ok(())
}

/// Runs every configuration on each of its seeds. Output order is by
/// configuration, then seed, whatever order the work completes in.
pub fn run_all(configs: &[ExperimentConfig], lab: &Lab, options: &RunOptions) -> Result<Vec<MetricsRecord>> {
    for config in configs {
        config.validate()?;
        check_world(config, lab)?;
    }
    let work: Vec<(&ExperimentConfig, u64)> =
        configs.iter().flat_map(|c| c.seeds.iter().map(move |&s| (c, s))).collect();
    let exec = || work.par_iter().map(|&(c, s)| run_seed(c, lab, s, options.timing)).collect::<Result<Vec<_>>>();
    if options.jobs <= 1 {
        return work.iter().map(|&(c, s)| run_seed(c, lab, s, options.timing)).collect();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs)
        .build()
        .map_err(|e| HarnessError::Config(format!("cannot start {} workers: {e}", options.jobs)))?
        .install(exec)
}

pub fn run(config: &ExperimentConfig, lab: &Lab, options: &RunOptions) -> Result<Vec<MetricsRecord>> {
    run_all(std::slice::from_ref(config), lab, options)
}

/// A value along a sweep axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AxisValue {
    DataSize(usize),
    LearningRate(f64),
    Method(Method),
}

impl AxisValue {
    pub fn parse(axis: Axis, s: &str) -> Result<Self> {
        let bad = || HarnessError::Config(format!("invalid {} value {s:?}", axis.name()));
        Ok(match axis {
            Axis::DataSize => AxisValue::DataSize(s.trim().parse().map_err(|_| bad())?),
            Axis::LearningRate => AxisValue::LearningRate(s.trim().parse().map_err(|_| bad())?),
            Axis::Method => AxisValue::Method(s.trim().parse()?),
        })
    }

    fn axis(self) -> Axis {
        match self {
            AxisValue::DataSize(_) => Axis::DataSize,
            AxisValue::LearningRate(_) => Axis::LearningRate,
            AxisValue::Method(_) => Axis::Method,
        }
    }

    fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        match self {
            AxisValue::DataSize(n) => c.data_size = n,
            AxisValue::LearningRate(lr) => c.learning_rate = Some(lr),
            AxisValue::Method(m) => {
                c.method = m;
                // Each method keeps its own default rate unless one was set.
                if m == Method::Baseline {
                    c.learning_rate = None;
                }
            }
        }
        let tag = format!("sweep-{}", self.axis().name());
        c.tag = Some(match &base.tag {
            Some(t) => format!("{t}/{tag}"),
            None => tag,
        });
        c
    }
}

/// Configurations of a sweep: the cross product of `values` with the base.
pub fn sweep_configs(base: &ExperimentConfig, values: &[AxisValue]) -> Result<Vec<ExperimentConfig>> {
    let Some(first) = values.first() else {
        return Err(HarnessError::Config("sweep needs at least one axis value".into()));
    };
    if values.iter().any(|v| v.axis() != first.axis()) {
        return Err(HarnessError::Config("sweep values must share one axis".into()));
    }
    let configs: Vec<ExperimentConfig> = values.iter().map(|v| v.apply(base)).collect();
    configs.iter().try_for_each(ExperimentConfig::validate)?;
    Ok(configs)
}

pub fn sweep(base: &ExperimentConfig, values: &[AxisValue], lab: &Lab, options: &RunOptions) -> Result<Vec<MetricsRecord>> {
    run_all(&sweep_configs(base, values)?, lab, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::WorldConfig;
    use draftlab_core::datagen::DomainKind;

    fn world() -> WorldConfig {
        WorldConfig { target_corpus_size: 400, draft_corpus_size: 200, test_count: 15, ..WorldConfig::default() }
    }

    fn config(scenario: Scenario, method: Method) -> ExperimentConfig {
        ExperimentConfig {
            data_size: 60,
            seeds: vec![1, 2],
            world: world(),
            ..ExperimentConfig::new(scenario, method, DomainKind::Topic)
        }
    }

    #[test]
    fn every_method_and_scenario_runs() {
        let lab = Lab::new(world());
        for scenario in [Scenario::I, Scenario::II, Scenario::III] {
            for method in Method::ALL {
                let records = run(&config(scenario, method), &lab, &RunOptions::default()).unwrap();
                assert_eq!(records.len(), 2);
                for r in &records {
                    assert!((0.0..=1.0).contains(&r.acceptance_rate), "{r:?}");
                    if method == Method::Baseline {
                        assert!(r.train_loss_final.is_none());
                    } else if !method.is_online() {
                        assert!(r.train_loss_final.is_some());
                    }
                    assert_eq!(r.wall_time_seconds, 0.0);
                }
            }
        }
    }

    #[test]
    fn runs_are_deterministic_and_independent_of_jobs() {
        let lab = Lab::new(world());
        let c = config(Scenario::I, Method::OfflineFkl);
        let a = run(&c, &lab, &RunOptions::default()).unwrap();
        let b = run(&c, &Lab::new(world()), &RunOptions { jobs: 2, timing: false }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].acceptance_rate.to_bits(), b[0].acceptance_rate.to_bits());
    }

    #[test]
    fn baseline_reports_the_untrained_draft() {
        let lab = Lab::new(world());
        let r = &run(&config(Scenario::I, Method::Baseline), &lab, &RunOptions::default()).unwrap()[0];
        let target = lab.domain_target(1, DomainKind::Topic).unwrap();
        let draft = lab.generic_draft(1).unwrap();
        let test = lab.test_prompts(1, DomainKind::Topic).unwrap();
        let expected = evaluate_acceptance(&draft, &target, &test.prompts, 9, Default::default(), 64, derive_seed(1, "eval", 0))
            .unwrap()
            .rate(Averaging::Micro);
        assert_eq!(r.acceptance_rate, expected);
        assert_eq!(r.loss, "");
    }

    #[test]
    fn sweep_counts_and_tags() {
        let lab = Lab::new(world());
        let values = [AxisValue::DataSize(20), AxisValue::DataSize(40), AxisValue::DataSize(80)];
        let records = sweep(&config(Scenario::I, Method::Sft), &values, &lab, &RunOptions::default()).unwrap();
        assert_eq!(records.len(), 3 * 2);
        assert_eq!(records.iter().map(|r| r.data_size).collect::<Vec<_>>(), [20, 20, 40, 40, 80, 80]);
        assert!(records.iter().all(|r| r.run_id.ends_with("sweep-data_size")));
        assert!(sweep_configs(&config(Scenario::I, Method::Sft), &[]).is_err());
        assert!(sweep_configs(&config(Scenario::I, Method::Sft), &[AxisValue::DataSize(1), AxisValue::LearningRate(0.1)]).is_err());
    }

    #[test]
    fn axis_values_parse() {
        assert_eq!(AxisValue::parse(Axis::Method, "online-RKL").unwrap(), AxisValue::Method(Method::OnlineRkl));
        assert_eq!(AxisValue::parse(Axis::LearningRate, "0.5").unwrap(), AxisValue::LearningRate(0.5));
        assert!(AxisValue::parse(Axis::DataSize, "-3").is_err());
    }

    #[test]
    fn mismatched_world_is_rejected() {
        let lab = Lab::new(WorldConfig::default());
        assert!(run(&config(Scenario::I, Method::Baseline), &lab, &RunOptions::default()).unwrap_err().is_config());
    }
}
