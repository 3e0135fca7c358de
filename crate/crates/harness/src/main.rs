use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use draftlab::metrics::{read_csv, write_csv};
use draftlab::suites::reproduce_in;
use draftlab::{emit, sweep, train_draft, Axis, AxisValue, ExperimentConfig, Format, Lab, RunOptions, Suite};
use draftlab_core::datagen::{magpie_synthesize, scenario_ii_related, DomainKind, QuerySet};
use draftlab_core::distill::{write_examples, write_records, ExampleRecord};
use draftlab_core::lm::{load_model, save_model};
use draftlab_core::specdec::{evaluate_acceptance, Averaging, VerificationMode};

/// Draft-model distillation lab.
#[derive(Debug, Parser)]
#[command(name = "draftlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Record wall time per run (outputs are then no longer byte-identical).
    #[arg(long)]
    timing: bool,
}

impl Common {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let config = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if self.jobs == 0 {
            bail!(draftlab::HarnessError::Config("--jobs must be at least 1".into()));
        }
        Ok(config)
    }

    fn options(&self) -> RunOptions {
        RunOptions { jobs: self.jobs, timing: self.timing }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a domain corpus, related-domain queries or synthesized examples.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "TOPIC")]
        domain: DomainKind,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Draw queries from the domain shifted by this amount.
        #[arg(long, conflicts_with = "magpie")]
        shift: Option<f64>,
        /// Synthesize examples from the domain target instead.
        #[arg(long)]
        magpie: bool,
    },
    /// Fit a domain target (or the generic target) and save it.
    TrainTarget {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "TOPIC")]
        domain: DomainKind,
        #[arg(long)]
        generic: bool,
    },
    /// Train a draft as the configuration describes and save it.
    TrainDraft {
        #[command(flatten)]
        common: Common,
    },
    /// Measure the acceptance rate of a draft against a target.
    EvalAccept {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        draft: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Prompt file (JSON lines).
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, default_value_t = 9)]
        k: usize,
        #[arg(long, default_value_t = 64)]
        max_new_tokens: usize,
        #[arg(long, default_value = "stochastic")]
        mode: String,
    },
    /// Run the configuration on each of its seeds.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Run the configuration across values of one axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Run trend-reproduction suites and report verdicts.
    Reproduce {
        #[command(flatten)]
        common: Common,
        /// Suites to run; all when omitted.
        #[arg(long, value_enum, value_delimiter = ',')]
        suite: Vec<Suite>,
    },
    /// Convert a metrics CSV into another format.
    Emit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Axis::DataSize)]
        axis: Axis,
    },
}

enum Outcome {
    Ok,
    VerdictFailed,
}

fn write_jsonl_records(path: &Path, records: Vec<ExampleRecord>) -> anyhow::Result<()> {
    write_records(records, BufWriter::new(File::create(path)?))?;
    Ok(())
}

fn lab_for(config: &ExperimentConfig) -> Lab {
    Lab::new(config.world)
}

fn report_written(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn execute(command: Command) -> anyhow::Result<Outcome> {
    match command {
        Command::GenData { common, domain, count, shift, magpie } => {
            let config = common.config()?;
            let lab = lab_for(&config);
            let spec = lab.spec(common.seed, domain)?;
            fs::create_dir_all(&common.out)?;
            let name = domain.name().to_ascii_lowercase();
            fs::write(common.out.join(format!("{name}_spec.json")), spec.to_json()?)?;
            let path = if magpie {
                let target = lab.domain_target(common.seed, domain)?;
                let t = &spec.template;
                let (examples, stats) =
                    magpie_synthesize(&target, t, count, common.seed, t.query_max, t.completion_max)?;
                println!(
                    "synthesized {} of {count} (raw parse rate {:.3}, skipped {})",
                    examples.len(),
                    stats.parse_rate(),
                    stats.skipped
                );
                let path = common.out.join(format!("{name}_magpie.jsonl"));
                write_examples(&examples, BufWriter::new(File::create(&path)?))?;
                path
            } else if let Some(shift) = shift {
                let queries = scenario_ii_related(&spec, shift, count, common.seed)?;
                let path = common.out.join(format!("{name}_related_{shift}.jsonl"));
                queries.write_jsonl(BufWriter::new(File::create(&path)?))?;
                path
            } else {
                let records = lab.train_records(common.seed, domain, count)?;
                let examples = records
                    .iter()
                    .map(|r| {
                        let split = spec.template.parse(r)?.query.len() + 2;
                        Ok(ExampleRecord { prompt: r[..split].to_vec(), completion: r[split..].to_vec(), target_probs: None })
                    })
                    .collect::<anyhow::Result<Vec<_>>>()?;
                let path = common.out.join(format!("{name}_corpus.jsonl"));
                write_jsonl_records(&path, examples)?;
                path
            };
            report_written(&[path]);
        }
        Command::TrainTarget { common, domain, generic } => {
            let config = common.config()?;
            let lab = lab_for(&config);
            fs::create_dir_all(&common.out)?;
            let (model, name) = if generic {
                (lab.generic_target(common.seed)?, "target_generic.sdlm".to_string())
            } else {
                (lab.domain_target(common.seed, domain)?, format!("target_{}.sdlm", domain.name().to_ascii_lowercase()))
            };
            let path = common.out.join(name);
            save_model(&model, &path)?;
            report_written(&[path]);
        }
        Command::TrainDraft { common } => {
            let config = common.config()?;
            let lab = lab_for(&config);
            let (draft, loss) = train_draft(&config, &lab, common.seed)?;
            fs::create_dir_all(&common.out)?;
            let path = common.out.join(format!("draft_{}_{}.sdlm", config.method, common.seed));
            save_model(&draft, &path)?;
            match loss {
                Some(l) => println!("final training loss {l}"),
                None => println!("no training step taken"),
            }
            report_written(&[path]);
        }
        Command::EvalAccept { common, draft, target, prompts, k, max_new_tokens, mode } => {
            let mode = match mode.to_ascii_lowercase().as_str() {
                "stochastic" => VerificationMode::Stochastic,
                "greedy" => VerificationMode::Greedy,
                other => bail!(draftlab::HarnessError::Config(format!("unknown verification mode {other:?}"))),
            };
            let draft = load_model(&draft).with_context(|| format!("loading {}", draft.display()))?;
            let target = load_model(&target).with_context(|| format!("loading {}", target.display()))?;
            let queries = QuerySet::read_jsonl(BufReader::new(File::open(&prompts)?))?;
            let report = evaluate_acceptance(&draft, &target, &queries.prompts, k, mode, max_new_tokens, common.seed)?;
            let total = report.total();
            let summary = serde_json::json!({
                "prompts": queries.len(),
                "proposed_tokens": total.proposed_tokens,
                "accepted_tokens": total.accepted_tokens,
                "rounds": total.rounds,
                "acceptance_rate": report.rate(Averaging::Micro),
                "acceptance_rate_macro": report.rate(Averaging::Macro),
                "mean_accepted_per_round": total.mean_accepted_per_round(),
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Run { common } => {
            let mut config = common.config()?;
            if common.config.is_none() {
                config.seeds = vec![common.seed];
            }
            let lab = lab_for(&config);
            let records = draftlab::run(&config, &lab, &common.options())?;
            let out = config.output.clone().unwrap_or(common.out.clone());
            report_written(&emit(&records, common.format, &out, Axis::Method)?);
        }
        Command::Sweep { common, axis, values } => {
            let config = common.config()?;
            let values = values.iter().map(|v| AxisValue::parse(axis, v)).collect::<Result<Vec<_>, _>>()?;
            let lab = lab_for(&config);
            let records = sweep(&config, &values, &lab, &common.options())?;
            let out = config.output.clone().unwrap_or(common.out.clone());
            report_written(&emit(&records, common.format, &out, axis)?);
        }
        Command::Reproduce { common, suite } => {
            let config = common.config()?;
            let lab = lab_for(&config);
            let suites = if suite.is_empty() { Suite::ALL.to_vec() } else { suite };
            let mut failed = false;
            for suite in suites {
                let report = reproduce_in(&lab, suite, common.seed, &common.options())?;
                for verdict in &report.verdicts {
                    println!("{verdict}");
                }
                failed |= !report.passed();
                let dir = common.out.join(suite.name());
                let axis = match suite {
                    Suite::Scaling => Axis::DataSize,
                    Suite::Lr => Axis::LearningRate,
                    _ => Axis::Method,
                };
                report_written(&emit(&report.records, common.format, &dir, axis)?);
            }
            if failed {
                return Ok(Outcome::VerdictFailed);
            }
        }
        Command::Emit { common, input, axis } => {
            let records = read_csv(BufReader::new(File::open(&input)?))?;
            let paths = if common.format == Format::Csv {
                fs::create_dir_all(&common.out)?;
                let path = common.out.join("metrics.csv");
                write_csv(&records, BufWriter::new(File::create(&path)?))?;
                vec![path]
            } else {
                emit(&records, common.format, &common.out, axis)?
            };
            report_written(&paths);
        }
    }
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::VerdictFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
