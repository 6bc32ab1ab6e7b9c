use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ledo::dataset::{self, Dataset, ExampleView, Schema};
use ledo::mlp::Model;
use ledo::noisebench::{self, NoiseKind, NoiseSpec, ScenarioConfig};
use ledo::pipeline::{
    self, DataConfig, Overrides, PipelineConfig, ReportFormat, SentinelKind, SentinelSignal,
};
use ledo::policy::{self, ApplyMode, Decision, PolicyKind};
use ledo::sdgmask::{self, MaskProposal, MaskRule};
use ledo::seed;
use ledo::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "ledo", version, about = "Label error detection and overwrite with MC Dropout sentinels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate clean Gaussian blobs from the benchmark scenario.
    MakeData(Opts),
    /// Corrupt labels of a gold-labelled dataset; writes noisy.jsonl and mask.json.
    InjectNoise(Opts),
    /// Train the target model and write a checkpoint.
    Train(Opts),
    /// Run MC Dropout inference with a trained checkpoint.
    McdInfer {
        #[command(flatten)]
        opts: Opts,
        #[arg(long)]
        model: PathBuf,
    },
    /// Build out-of-fold sentinel distributions by cross-validation.
    BuildSentinel(Opts),
    /// Apply the configured policy to a dataset and its sentinel dump.
    Decide(Opts),
    /// Apply a decisions file to a dataset.
    Apply {
        #[command(flatten)]
        opts: Opts,
        #[arg(long)]
        decisions: PathBuf,
        /// filter_only or overwrite; defaults to overwrite for the overwrite policy.
        #[arg(long)]
        mode: Option<ApplyMode>,
    },
    /// Pick thresholds on a gold-labelled dev set.
    Sweep(Opts),
    /// Score a checkpoint on a dataset (gold labels where present).
    Evaluate {
        #[command(flatten)]
        opts: Opts,
        #[arg(long)]
        model: PathBuf,
    },
    /// Propose masked question templates from tagged sentences.
    SdgMask {
        #[command(flatten)]
        opts: Opts,
        /// Mask rule 1..4.
        #[arg(long)]
        rule: u8,
    },
    /// Run the full workflow.
    Run(Opts),
}

#[derive(Args, Debug)]
struct Opts {
    /// Pipeline config (JSON); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// MC Dropout passes T.
    #[arg(long)]
    passes: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    /// filter, overwrite, or quantile.
    #[arg(long)]
    policy: Option<PolicyKind>,
    #[arg(long)]
    t1: Option<f64>,
    #[arg(long)]
    s1: Option<f64>,
    #[arg(long)]
    t2: Option<f64>,
    #[arg(long)]
    s2: Option<f64>,
    #[arg(long)]
    q1: Option<f64>,
    #[arg(long)]
    q2: Option<f64>,
    #[arg(long)]
    noise_rate: Option<f64>,
    /// symmetric or asymmetric.
    #[arg(long)]
    noise_kind: Option<NoiseKind>,
    /// cv or external.
    #[arg(long)]
    sentinel: Option<SentinelKind>,
    /// External distribution file.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// json or text.
    #[arg(long, default_value = "text")]
    format: ReportFormat,
}

impl Opts {
    fn config(&self) -> Result<PipelineConfig> {
        self.config_with(self.dataset.clone())
    }

    fn config_with(&self, dataset: Option<PathBuf>) -> Result<PipelineConfig> {
        let mut config = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::benchmark(ScenarioConfig::default()),
        };
        let overrides = Overrides {
            dataset,
            out: self.out.clone(),
            seed: self.seed,
            passes: self.passes,
            dropout: self.dropout,
            folds: self.folds,
            policy: self.policy,
            t1: self.t1,
            s1: self.s1,
            t2: self.t2,
            s2: self.s2,
            q1: self.q1,
            q2: self.q2,
            noise_rate: self.noise_rate,
            noise_kind: self.noise_kind,
            sentinel: self.sentinel,
            dump: self.dump.clone(),
        };
        overrides.apply(&mut config)?;
        Ok(config)
    }

    fn dataset_path(&self) -> Result<&Path> {
        self.dataset.as_deref().ok_or_else(|| missing("--dataset"))
    }

    fn out_path(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| missing("--out"))
    }

    fn dump_path(&self, config: &PipelineConfig) -> Result<PathBuf> {
        config
            .sentinel
            .external
            .as_ref()
            .map(|e| e.dump.clone())
            .ok_or_else(|| missing("--dump"))
    }
}

fn missing(flag: &str) -> Error {
    Error::InvalidArgument(format!("{flag} is required"))
}

fn scenario(config: &PipelineConfig) -> Result<&ScenarioConfig> {
    match &config.data {
        DataConfig::Benchmark(s) => Ok(s),
        DataConfig::Files(_) => Err(Error::InvalidConfig("this command needs a benchmark scenario".into())),
    }
}

fn features(path: &Path) -> Result<Dataset> {
    dataset::load_dataset(path, Schema::Features)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    writeln!(io::stdout(), "{text}").map_err(|e| Error::Io { path: "<stdout>".into(), source: e })
}

/// Decisions for `data` under the config's policy and external dump.
fn decisions_for(config: &PipelineConfig, data: &Dataset, dump: &Path) -> Result<Vec<Decision>> {
    let policy = config.policy.policy()?;
    let dists = pipeline::load_dump_for(config, data, dump)?;
    let mapping = pipeline::mapping_for(config, &policy)?;
    let signals = pipeline::signals_for(dists, mapping.as_ref())?;
    let views: Vec<ExampleView<'_>> = data.views().collect();
    pipeline::decide_all(&policy, &views, &signals)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeData(opts) => {
            let config = opts.config()?;
            let s = scenario(&config)?;
            let data = noisebench::make_blobs(s.n, s.d, s.class_count, &s.centers, s.spread, config.seed)?;
            dataset::save_dataset(&data, opts.out_path()?)?;
            println!("wrote {} examples to {}", data.len(), opts.out_path()?.display());
        }
        Command::InjectNoise(opts) => {
            let config = opts.config_with(None)?;
            let noise = &scenario(&config)?.noise;
            let spec = NoiseSpec {
                rate: noise.rate,
                kind: noise.kind,
                transition: noise.transition.clone(),
                seed: noise.seed.unwrap_or(config.seed),
            };
            let data = features(opts.dataset_path()?)?;
            let (noisy, mask) = noisebench::inject_noise(&data, &spec)?;
            let dir = opts.out_path()?;
            std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
            dataset::save_dataset(&noisy, dir.join(pipeline::NOISY_FILE))?;
            mask.save(dir.join(pipeline::MASK_FILE))?;
            println!("corrupted {} of {} labels", mask.len(), noisy.len());
        }
        Command::Train(opts) => {
            let config = opts.config()?;
            let data = features(opts.dataset_path()?)?;
            let model = pipeline::train_target(&config, &data)?;
            model.save(opts.out_path()?)?;
            let views: Vec<ExampleView<'_>> = data.views().collect();
            println!("training accuracy {:.4}", model.accuracy(&views)?);
        }
        Command::McdInfer { opts, model } => {
            let config = opts.config()?;
            let model = Model::load(model)?;
            let data = features(opts.dataset_path()?)?;
            let dists = data
                .views()
                .enumerate()
                .map(|(i, v)| {
                    let x = v.features().ok_or_else(|| missing("features"))?;
                    model.mcd_predict(v.id, x, config.passes, seed::mix(config.seed, i as u64))
                })
                .collect::<Result<Vec<_>>>()?;
            dataset::save_distributions(&dists, opts.out_path()?)?;
            println!("wrote {} distributions (T={})", dists.len(), config.passes);
        }
        Command::BuildSentinel(opts) => {
            let config = opts.config()?;
            let data = features(opts.dataset_path()?)?;
            let (dists, folds) = pipeline::build_sentinel(&config, &data)?;
            dataset::save_distributions(&dists, opts.out_path()?)?;
            println!("wrote {} distributions, fold sizes {:?}", dists.len(), folds.fold_sizes());
        }
        Command::Decide(opts) => {
            let config = opts.config()?;
            let dump = opts.dump_path(&config)?;
            let data = features(opts.dataset_path()?)?;
            let decisions = decisions_for(&config, &data, &dump)?;
            dataset::save_jsonl(&decisions, opts.out_path()?)?;
            let flagged = decisions.iter().filter(|d| d.verdict.is_flagged()).count();
            println!("flagged {flagged} of {} examples", decisions.len());
        }
        Command::Apply { opts, decisions, mode } => {
            let config = opts.config()?;
            let mode = mode.unwrap_or(match config.policy.kind {
                PolicyKind::Overwrite => ApplyMode::Overwrite,
                _ => ApplyMode::FilterOnly,
            });
            let data = features(opts.dataset_path()?)?;
            let decisions: Vec<Decision> = dataset::load_jsonl(&decisions)?;
            let (cleaned, report) = policy::apply_decisions(&data, &decisions, mode)?;
            dataset::save_dataset(&cleaned, opts.out_path()?)?;
            print_json(&report)?;
        }
        Command::Sweep(opts) => {
            let config = opts.config()?;
            let dump = opts.dump_path(&config)?;
            let dev = features(opts.dataset_path()?)?;
            let base = config.policy.policy()?;
            let mapping = pipeline::mapping_for(&config, &base)?;
            let signals: Vec<SentinelSignal> =
                pipeline::signals_for(pipeline::load_dump_for(&config, &dev, &dump)?, mapping.as_ref())?;
            let grid = config.sweep.clone().unwrap_or_default();
            let result = pipeline::sweep_thresholds(&grid.points(&base), &dev, &signals)?;
            if let Some(out) = &opts.out {
                dataset::save_jsonl(&result.table, out)?;
            }
            match opts.format {
                ReportFormat::Json => print_json(&result)?,
                ReportFormat::Text => {
                    let best = &result.table[result.best_index];
                    println!("{} grid points", result.table.len());
                    println!(
                        "best: {} (f1 {:.4}, precision {:.4}, recall {:.4}, {} flagged)",
                        serde_json::to_string(&best.policy).expect("policy serializes"),
                        best.f1,
                        best.precision,
                        best.recall,
                        best.flagged
                    );
                }
            }
        }
        Command::Evaluate { opts, model } => {
            let model = Model::load(model)?;
            let data = features(opts.dataset_path()?)?;
            let eval = pipeline::evaluate_model(&model, &data)?;
            match opts.format {
                ReportFormat::Json => print_json(&eval)?,
                ReportFormat::Text => {
                    println!("examples  {}", eval.examples);
                    println!("accuracy  {:.4}", eval.accuracy);
                    if let Some(m) = eval.classification {
                        println!("f1@0.5    {:.4}", m.f1);
                        println!("pr_auc    {:.4}", m.pr_auc);
                        println!("ap        {:.4}", m.average_precision);
                    }
                }
            }
        }
        Command::SdgMask { opts, rule } => {
            let rule = MaskRule::try_from(rule)?;
            let data = dataset::load_dataset(opts.dataset_path()?, Schema::Tokens)?;
            let mut records = Vec::new();
            for e in data.examples() {
                let ledo::dataset::Payload::Tokens(tokens) = &e.payload else {
                    unreachable!("token schema checked on load")
                };
                for p in sdgmask::select_masks(tokens, rule).map_err(|err| Error::InRecord {
                    id: e.id.clone(),
                    source: Box::new(err),
                })? {
                    records.push(ProposalRecord { example_id: e.id.clone(), proposal: p });
                }
            }
            match &opts.out {
                Some(out) => {
                    dataset::save_jsonl(&records, out)?;
                    println!("wrote {} proposals", records.len());
                }
                None => {
                    for r in &records {
                        println!("{}", serde_json::to_string(r).expect("record serializes"));
                    }
                }
            }
        }
        Command::Run(opts) => {
            let config = opts.config()?;
            let report = pipeline::run_pipeline(&config)?;
            pipeline::emit_report(&report, opts.format, io::stdout().lock())?;
        }
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct ProposalRecord {
    example_id: String,
    #[serde(flatten)]
    proposal: MaskProposal,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
