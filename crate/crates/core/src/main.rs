use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use blockgc::baseline::{compute_manual_features_many, write_feature_csv};
use blockgc::graph::{build_lw_aig, read_snapshot, write_snapshot, FeatureOptions, FeatureValue, LwAig};
use blockgc::ingest::{open_ledger, parse_records, read_records_bin, write_records_bin, ParseOptions, ValueUnit};
use blockgc::nn::{read_checkpoint, write_checkpoint};
use blockgc::pipeline::{
    balanced_accounts, build_dataset, cross_validate, cross_validate_baseline, evaluate_f1, export_embeddings, train,
    DatasetSummary, FoldResult, MetricsReport, TrainConfig,
};
use blockgc::sampling::{read_dataset, read_labels, write_dataset, AccountClass, RankAttr, SamplingParams};
use blockgc::synth::{generate_ledger, SynthProfile};

#[derive(Parser)]
#[command(
    name = "blockgc",
    version,
    about = "Account identity classification on transaction graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a ledger CSV (optionally .gz) into a binary record file.
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fail on the first malformed row instead of skipping it.
        #[arg(long)]
        strict: bool,
        #[arg(long, default_value = "ether")]
        unit: ValueUnit,
    },
    /// Coarsen records into the account graph snapshot.
    BuildGraph {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        min_contract_calls: u64,
        /// Contract-call cell values: count, binary or log1p.
        #[arg(long, default_value = "count")]
        features: FeatureValue,
        /// Append a 0/1 is-contract column.
        #[arg(long)]
        contract_column: bool,
    },
    /// Sample a balanced labelled subgraph dataset.
    Sample {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        class: AccountClass,
        #[arg(long, default_value = "t")]
        attr: RankAttr,
        #[arg(long = "h", default_value_t = 2)]
        hops: usize,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Draw negatives from unlabelled externally owned accounts as well.
        #[arg(long)]
        widen_negatives: bool,
        /// Optional TSV listing every sampled account and its subgraph size.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train on a whole dataset and write a checkpoint.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Repeated stratified k-fold evaluation.
    Crossval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Manual-feature logistic regression under the same protocol.
    Baseline {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, default_value = "phish")]
        class: AccountClass,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Evaluate on the accounts of an existing dataset instead of drawing new negatives.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        features_out: Option<PathBuf>,
    },
    /// Write pooled embeddings (and optional 2-D PCA) for every dataset instance.
    ExportEmbeddings {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pca: bool,
    },
    /// Generate a synthetic ledger with planted class structure.
    Synth {
        /// Built-in profile name (planted, null) or a profile file.
        #[arg(long, default_value = "planted")]
        profile: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Print the default run configuration with provenance.
    ShowConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::parse(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn load_labels(path: &Path) -> Result<Vec<(String, AccountClass)>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_labels(std::io::BufReader::new(f))?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            input,
            out,
            strict,
            unit,
        } => {
            let source = open_ledger(&input).with_context(|| format!("opening {}", input.display()))?;
            let parsed = parse_records(source, ParseOptions { strict, unit })?;
            for e in parsed.errors.iter().take(20) {
                log::warn!("{e}");
            }
            write_records_bin(&out, &parsed.records)?;
            eprintln!("accepted {} rejected {}", parsed.accepted, parsed.rejected);
        }
        Command::BuildGraph {
            input,
            out,
            min_contract_calls,
            features,
            contract_column,
        } => {
            let records = read_records_bin(&input)?;
            let opts = FeatureOptions {
                value: features,
                is_contract_column: contract_column,
                min_contract_calls,
            };
            let g = LwAig::from_records(&records, opts)?;
            drop(records);
            write_snapshot(&out, &g)?;
            eprintln!(
                "nodes {} edges {} feature columns {}",
                g.node_count(),
                g.edge_count(),
                g.feature_dim()
            );
        }
        Command::Sample {
            graph,
            labels,
            class,
            attr,
            hops,
            k,
            seed,
            out,
            widen_negatives,
            manifest,
        } => {
            let g = read_snapshot(&graph)?;
            let labels = load_labels(&labels)?;
            let params = SamplingParams { hops, k, attr };
            let d = build_dataset(&g, &labels, class, params, seed, widen_negatives)?;
            write_dataset(&out, &d)?;
            if let Some(m) = manifest {
                let mut w = create(&m)?;
                blockgc::sampling::write_manifest(&mut w, &d)?;
                w.flush()?;
            }
            eprintln!("instances {} feature dim {}", d.len(), d.feature_dim);
        }
        Command::Train {
            dataset,
            config,
            out,
            metrics,
        } => {
            let cfg = load_config(config.as_deref())?;
            let d = read_dataset(&dataset)?;
            let outcome = train(&d, &cfg)?;
            write_checkpoint(&out, &outcome.params)?;
            if let Some(m) = metrics {
                let eval = evaluate_f1(&outcome.params, &d)?;
                let fold = FoldResult {
                    repeat: 0,
                    fold: 0,
                    train_size: d.len(),
                    test_size: d.len(),
                    eval,
                    loss_curve: outcome.epoch_losses(),
                };
                MetricsReport::new("blockgc-train", DatasetSummary::of(&d), &cfg, vec![fold]).write(&m)?;
            }
        }
        Command::Crossval {
            dataset,
            config,
            metrics,
            seed,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let d = read_dataset(&dataset)?;
            let report = cross_validate(&d, &cfg)?;
            report.write(&metrics)?;
            let s = &report.summary;
            eprintln!(
                "f1 {:.4} ± {:.4} over {} folds",
                s.mean_f1,
                s.std_f1,
                report.folds.len()
            );
        }
        Command::Baseline {
            records,
            labels,
            metrics,
            class,
            seed,
            config,
            dataset,
            features_out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.seed = seed;
            let records = read_records_bin(&records)?;
            let (accounts, y, summary) = match dataset {
                Some(p) => {
                    let d = read_dataset(&p)?;
                    let accounts = d.instances.iter().map(|i| i.account.clone()).collect();
                    (accounts, d.labels(), DatasetSummary::of(&d))
                }
                None => {
                    let g = build_lw_aig(&records)?;
                    let labels = load_labels(&labels)?;
                    let (accounts, y) = balanced_accounts(&g, &labels, class, seed, false)?;
                    let summary = DatasetSummary::from_labels(class.name(), &y);
                    (accounts, y, summary)
                }
            };
            let features = compute_manual_features_many(&records, &accounts)?;
            if let Some(p) = features_out {
                let mut w = create(&p)?;
                write_feature_csv(&mut w, &accounts, &features)?;
                w.flush()?;
            }
            let report = cross_validate_baseline(&features, &y, &cfg, summary)?;
            report.write(&metrics)?;
            let s = &report.summary;
            eprintln!(
                "f1 {:.4} ± {:.4} over {} folds",
                s.mean_f1,
                s.std_f1,
                report.folds.len()
            );
        }
        Command::ExportEmbeddings {
            model,
            dataset,
            out,
            pca,
        } => {
            let params = read_checkpoint(&model)?;
            let d = read_dataset(&dataset)?;
            if d.feature_dim != params.config.input_dim {
                bail!(
                    "dataset feature dim {} does not match model input dim {}",
                    d.feature_dim,
                    params.config.input_dim
                );
            }
            let mut w = create(&out)?;
            export_embeddings(&params, &d, pca, &mut w)?;
            w.flush()?;
        }
        Command::Synth {
            profile,
            out,
            seed,
            labels,
            manifest,
        } => {
            let p = match SynthProfile::builtin(&profile) {
                Some(p) => p,
                None => {
                    let text = std::fs::read_to_string(&profile)
                        .with_context(|| format!("{profile:?} is neither a built-in profile nor a readable file"))?;
                    SynthProfile::parse(&text)?
                }
            };
            let ledger = generate_ledger(&p, seed)?;
            let mut w = create(&out)?;
            ledger.write_ledger(&mut w)?;
            w.flush()?;
            let labels = labels.unwrap_or_else(|| out.with_extension("labels.csv"));
            let mut w = create(&labels)?;
            ledger.write_labels(&mut w)?;
            w.flush()?;
            if let Some(m) = manifest {
                let mut w = create(&m)?;
                ledger.write_manifest(&mut w)?;
                w.flush()?;
            }
            eprintln!(
                "records {} labelled accounts {}",
                ledger.records.len(),
                ledger.labels.len()
            );
        }
        Command::ShowConfig { config } => {
            let cfg = load_config(config.as_deref())?;
            print!("{}", cfg.to_text());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
