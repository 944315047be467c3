//! `concord`: run the service, or drive the consensus pipeline file by file.
//!
//! Exit codes: 0 on success, 2 on usage, input or output errors, 3 when
//! training does not converge (the partial model is still written).

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use concord_core::adapters::stub::{KeywordChooser, NoneChooser, OracleChooser};
use concord_core::adapters::{ProviderConfig, Providers, TopicChooser};
use concord_core::analytics::{support_report, SurveySubmission, DEFAULT_GROUP_FLOOR};
use concord_core::config::{load_selection_config, load_train_config, ServiceConfig};
use concord_core::consensus::{select_constitution, train, RatingsDataset, SelectionConfig, TrainConfig, TrainError};
use concord_core::io::{read_model, read_ratings_csv, write_model, write_ratings_csv, ModelFile, SelectionFile};
use concord_core::platform::{Platform, SystemClock};
use concord_core::simulator::{generate, CommunitySpec};
use concord_core::taxonomy::{evaluate, load_dataset, EvalOptions, ShotMode};
use concord_core::{fixtures, Guideline, TagRegistry, TaxonomyNode, TopicId};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "concord", version, about = "Bridging-based consensus over guideline ratings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fit the model to a ratings CSV.
    Train {
        #[arg(long)]
        ratings: PathBuf,
        /// Service config or bare training config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Previously fitted model to continue from.
        #[arg(long)]
        warm: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score guidelines under a fitted model and write the approved set.
    Select {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        ratings: PathBuf,
        /// Service config or bare selection config.
        #[arg(long)]
        selection: Option<PathBuf>,
        /// Tag registry JSON; the default registry when omitted.
        #[arg(long)]
        tags: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic community with known ground truth.
    Simulate {
        /// Community spec JSON; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_ratings: PathBuf,
        #[arg(long)]
        out_truth: PathBuf,
        #[arg(long)]
        out_guidelines: Option<PathBuf>,
    },
    /// Measure topic-classification accuracy over a labelled prompt set.
    TaxonomyEval {
        #[arg(long)]
        tree: PathBuf,
        /// JSON lines of `{"text": ..., "label": ...}`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// oracle, keyword, none, or a provider kind from the config (stub, openai).
        #[arg(long, default_value = "keyword")]
        provider: String,
        /// Keyword table for the keyword chooser; the bundled one when omitted.
        #[arg(long)]
        keywords: Option<PathBuf>,
        /// Service config supplying provider settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Load guidelines and ratings into the configured store.
    Import {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ratings: Option<PathBuf>,
        /// JSON array of guidelines.
        #[arg(long)]
        guidelines: Option<PathBuf>,
    },
    /// Write the store's ratings, guidelines and live constitution to a directory.
    Export {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compute survey support, from a submissions file or the configured store.
    Analytics {
        /// JSON array of survey submissions.
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        surveys: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        floor: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Zero,
    Few,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .json()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn read_dataset(path: &Path) -> Result<RatingsDataset> {
    let ratings = read_ratings_csv(open(path)?).with_context(|| format!("reading {}", path.display()))?;
    Ok(RatingsDataset::from_ratings(&ratings)?)
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Serve { config } => {
            let config = ServiceConfig::load(&config)?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(concord_service::serve(config))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            ratings,
            config,
            warm,
            out,
        } => {
            let cfg = match &config {
                Some(path) => load_train_config(path)?,
                None => TrainConfig::default(),
            };
            let data = read_dataset(&ratings)?;
            let warm = match &warm {
                Some(path) => Some(read_model(open(path)?).with_context(|| format!("reading {}", path.display()))?.params),
                None => None,
            };
            let (fit, code) = match train(&data, &cfg, warm.as_ref()) {
                Ok(fit) => (fit, ExitCode::SUCCESS),
                Err(TrainError::NonConvergence(fit)) => {
                    eprintln!("training did not converge after {} epochs", fit.report.epochs);
                    (*fit, ExitCode::from(3))
                }
                Err(e) => return Err(e.into()),
            };
            eprintln!(
                "epochs {} loss {:.6} -> {:.6}",
                fit.report.epochs, fit.report.initial_loss, fit.report.final_loss
            );
            let mut file = create(&out)?;
            write_model(&mut file, &ModelFile::new(fit, cfg))?;
            file.flush()?;
            Ok(code)
        }
        Command::Select {
            model,
            ratings,
            selection,
            tags,
            out,
        } => {
            let cfg = match &selection {
                Some(path) => load_selection_config(path)?,
                None => SelectionConfig::default(),
            };
            let tags: TagRegistry = match &tags {
                Some(path) => read_json(path)?,
                None => TagRegistry::default(),
            };
            let model = read_model(open(&model)?).with_context(|| format!("reading {}", model.display()))?;
            let data = read_dataset(&ratings)?;
            let selection = select_constitution(&model.params, &data, &tags, &cfg)?;
            if selection.tag_filter_skipped {
                eprintln!("tag filter skipped: no usable distance scale");
            }
            let file = SelectionFile::from(&selection);
            eprintln!("approved {} of {}", file.approved.len(), file.scores.len());
            write_json(&out, &file)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate {
            spec,
            seed,
            out_ratings,
            out_truth,
            out_guidelines,
        } => {
            let mut spec: CommunitySpec = match &spec {
                Some(path) => read_json(path)?,
                None => CommunitySpec::default(),
            };
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            let community = generate(&spec)?;
            let mut file = create(&out_ratings)?;
            write_ratings_csv(&mut file, &community.ratings)?;
            file.flush()?;
            write_json(&out_truth, &community.truth)?;
            if let Some(path) = &out_guidelines {
                write_json(path, &community.guidelines)?;
            }
            eprintln!(
                "{} ratings over {} guidelines, {} expected approvals",
                community.ratings.len(),
                community.guidelines.len(),
                community.truth.expected_approved.len()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::TaxonomyEval {
            tree,
            data,
            mode,
            provider,
            keywords,
            config,
            jobs,
            seed,
            out,
        } => {
            let tree = TaxonomyNode::load(&tree)?;
            let dataset = load_dataset(&data)?;
            let chooser: Arc<dyn TopicChooser> = match provider.as_str() {
                "oracle" => Arc::new(OracleChooser::new(&tree, &dataset)),
                "none" => Arc::new(NoneChooser),
                "keyword" => {
                    let table: BTreeMap<TopicId, Vec<String>> = match &keywords {
                        Some(path) => read_json(path)?,
                        None => fixtures::political_keywords(),
                    };
                    Arc::new(KeywordChooser::from_tree(&tree, &table))
                }
                kind => {
                    let base = match &config {
                        Some(path) => ServiceConfig::load(path)?.provider,
                        None => ProviderConfig::default(),
                    };
                    Providers::from_config(&ProviderConfig {
                        kind: kind.to_string(),
                        ..base
                    })?
                    .chooser
                }
            };
            let mode = match mode {
                Mode::Zero => ShotMode::ZeroShot,
                Mode::Few => ShotMode::FewShot,
            };
            let report = evaluate(&tree, &dataset, chooser.as_ref(), mode, EvalOptions { seed, jobs })?;
            eprintln!("accuracy {:.4} ({}/{})", report.accuracy, report.correct, report.evaluated);
            write_json(&out, &report)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Import {
            config,
            ratings,
            guidelines,
        } => {
            let mut platform = open_platform(&config)?;
            let guidelines: Vec<Guideline> = match &guidelines {
                Some(path) => read_json(path)?,
                None => Vec::new(),
            };
            let ratings = match &ratings {
                Some(path) => read_ratings_csv(open(path)?).with_context(|| format!("reading {}", path.display()))?,
                None => Vec::new(),
            };
            let summary = platform.import(&guidelines, &ratings)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Export { config, out_dir } => {
            let platform = open_platform(&config)?;
            fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            let mut file = create(&out_dir.join("ratings.csv"))?;
            write_ratings_csv(&mut file, platform.state().ratings())?;
            file.flush()?;
            let guidelines: Vec<&Guideline> = platform.state().guidelines.values().collect();
            write_json(&out_dir.join("guidelines.json"), &guidelines)?;
            write_json(&out_dir.join("constitution.json"), &platform.live_constitution())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Analytics {
            surveys,
            config,
            floor,
            out,
        } => {
            let (submissions, default_floor): (Vec<SurveySubmission>, usize) = match (&surveys, &config) {
                (Some(path), _) => (read_json(path)?, DEFAULT_GROUP_FLOOR),
                (None, Some(path)) => {
                    let platform = open_platform(path)?;
                    let floor = platform.config().group_floor;
                    (platform.state().surveys.values().cloned().collect(), floor)
                }
                (None, None) => bail!("either --surveys or --config is required"),
            };
            let report = support_report(&submissions, floor.unwrap_or(default_floor))?;
            match &out {
                Some(path) => write_json(path, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn open_platform(config: &Path) -> Result<Platform> {
    let config = ServiceConfig::load(config)?;
    if config.storage_root.is_none() {
        bail!("the config has no storage_root");
    }
    let providers = Providers::from_config(&config.provider)?;
    let (platform, recovery) = Platform::open(config, providers, Arc::new(SystemClock))?;
    if recovery.truncated_bytes > 0 {
        eprintln!("cut {} bytes of torn record from the event log", recovery.truncated_bytes);
    }
    Ok(platform)
}
