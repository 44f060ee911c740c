//! `idsim`: command-line front end over `idsim-core`.
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 on data errors. Data errors
//! are printed to stderr as `error[Code]: message`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use idsim_core::curation::{self, CurateConfig, Curation, FilterConfig, TripletMix, VoteRecord};
use idsim_core::eval::{self, Protocol, ProtocolInputs, RetrievalTask, Scorer, TripletTask};
use idsim_core::jsonl;
use idsim_core::losses::Objective;
use idsim_core::model::{self, ManifestIndex};
use idsim_core::ot::SinkhornConfig;
use idsim_core::runinfo::RunInfo;
use idsim_core::sensitivity::{self, TrendAxis};
use idsim_core::trainer::{self, CheckpointMeta, TrainConfig, TrainData};
use idsim_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "idsim", version, about = "Identity-aware similarity on precomputed embeddings")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (outputs do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Filter, allocate, sample and split instances.
    Curate(CurateArgs),
    /// Nearest different-instance neighbours by cosine.
    Mine(MineArgs),
    /// Build training triplets from a curation and mined negatives.
    Triplets(TripletArgs),
    /// Train the projection heads.
    Train(TrainArgs),
    /// Project a bundle through a trained head.
    Apply(ApplyArgs),
    /// Similarity and distance of one pair.
    Score(ScoreArgs),
    /// Run an evaluation protocol.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Edit-grid sensitivity analysis.
    #[command(subcommand)]
    Sensitivity(SensitivityCommand),
    /// Turn annotator votes into labels.
    AggregateVotes(VoteArgs),
    /// Print bundle headers and manifest counts.
    Inspect(InspectArgs),
}

#[derive(Args, Debug, Serialize)]
struct CurateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    budget: u64,
    /// JSON dataset filter.
    #[arg(long)]
    filter: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    train_val_ratio: u32,
    /// Curation summary (JSON).
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Manifest with train/val splits assigned (JSONL).
    #[arg(long)]
    #[serde(skip)]
    manifest_out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct MineArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TripletArgs {
    /// Output of `curate --out`.
    #[arg(long)]
    curation: PathBuf,
    #[arg(long)]
    mined: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    count: u64,
    /// Weights for REAL_ONLY,S2A_POSITIVE,S2B_NEGATIVE.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [1.0, 1.0, 1.0])]
    mix: Vec<f64>,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Requested/produced/shortfall counts (JSON).
    #[arg(long)]
    #[serde(skip)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
enum ObjectiveArg {
    Infonce,
    Hinge,
    Bce,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    triplets: PathBuf,
    #[arg(long)]
    cls: PathBuf,
    #[arg(long)]
    patch: Option<PathBuf>,
    /// TrainConfig as JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    grad_accum: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    /// Best-validation checkpoint.
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Last-epoch checkpoint.
    #[arg(long)]
    #[serde(skip)]
    final_out: Option<PathBuf>,
    /// Training history (JSON).
    #[arg(long)]
    #[serde(skip)]
    history: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ApplyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ScoreArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, num_args = 2, value_names = ["X", "Y"])]
    pair: Vec<String>,
    #[command(flatten)]
    sinkhorn: SinkhornArgs,
}

#[derive(Args, Debug, Serialize)]
struct SinkhornArgs {
    /// Entropic regularisation for patch bundles.
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    #[arg(long, default_value_t = 1024)]
    max_tokens: usize,
}

impl SinkhornArgs {
    fn config(&self, seed: u64) -> SinkhornConfig {
        SinkhornConfig {
            epsilon: self.epsilon,
            max_tokens: self.max_tokens,
            seed,
            ..SinkhornConfig::default()
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct EvalCommon {
    #[arg(long)]
    bundle: PathBuf,
    /// Report path; stdout when absent.
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
    #[command(flatten)]
    sinkhorn: SinkhornArgs,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum EvalCommand {
    /// mAP, nDCG and AUC over query galleries.
    Retrieval {
        #[arg(long)]
        task: PathBuf,
        #[command(flatten)]
        common: EvalCommon,
    },
    /// AP and AUC over binary-labelled pairs.
    Verification {
        #[arg(long)]
        pairs: PathBuf,
        #[command(flatten)]
        common: EvalCommon,
    },
    /// Triplet accuracy, overall and per mode.
    Triplet {
        #[arg(long)]
        task: PathBuf,
        #[command(flatten)]
        common: EvalCommon,
    },
    /// Spearman and Kendall against human ratings.
    Correlation {
        #[arg(long)]
        pairs: PathBuf,
        #[command(flatten)]
        common: EvalCommon,
    },
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
enum AxisArg {
    Factor,
    Identity,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SensitivityCommand {
    /// Read edit grids off manifest edit metadata.
    Grids {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "identity_strength")]
        identity_key: String,
        #[arg(long)]
        factor_key: String,
        #[arg(long)]
        #[serde(skip)]
        out: PathBuf,
    },
    /// Per-instance fits and bootstrap aggregate.
    Fit {
        #[arg(long)]
        grids: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value_t = sensitivity::DEFAULT_N_BOOT)]
        n_boot: usize,
        #[arg(long)]
        #[serde(skip)]
        out: PathBuf,
        #[command(flatten)]
        sinkhorn: SinkhornArgs,
    },
    /// Mean similarity per level, as CSV.
    Trend {
        #[arg(long)]
        grids: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        factor_name: String,
        #[arg(long, value_enum, default_value = "factor")]
        axis: AxisArg,
        #[arg(long)]
        #[serde(skip)]
        out: PathBuf,
        #[command(flatten)]
        sinkhorn: SinkhornArgs,
    },
}

#[derive(Args, Debug, Serialize)]
struct VoteArgs {
    #[arg(long)]
    votes: PathBuf,
    #[arg(long, default_value_t = curation::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct InspectArgs {
    #[arg(long)]
    bundle: Vec<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    #[serde(flatten)]
    body: &'a T,
    #[serde(flatten)]
    run: &'a RunInfo,
}

fn write_stamped<T: Serialize>(path: &Path, body: &T, run: &RunInfo) -> Result<()> {
    jsonl::write_json(path, &Stamped { body, run })
}

/// Provenance next to an output that cannot carry it.
fn write_sidecar(out: &Path, run: &RunInfo) -> Result<()> {
    let mut p = out.as_os_str().to_owned();
    p.push(".run.json");
    jsonl::write_json(PathBuf::from(p), run)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_index(path: &Path) -> Result<ManifestIndex> {
    ManifestIndex::new(model::load_manifest(path)?)
}

fn emit_report(out: Option<&Path>, json: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let info = RunInfo::new(&cli.command, seed);
    match cli.command {
        Command::Curate(a) => {
            let filter = match &a.filter {
                Some(p) => FilterConfig::load(p)?,
                None => FilterConfig::default(),
            };
            let cfg = CurateConfig {
                budget: a.budget,
                train_val_ratio: a.train_val_ratio,
                filter,
            };
            let records = model::load_manifest(&a.manifest)?;
            let (cur, manifest) = curation::curate(&records, &cfg, seed)?;
            for (ds, n) in &cur.selection.shortfall {
                eprintln!("warning: dataset {ds} is short by {n} instance(s)");
            }
            write_stamped(&a.out, &cur, &info)?;
            model::save_manifest(&a.manifest_out, &manifest)?;
            write_sidecar(&a.manifest_out, &info)
        }
        Command::Mine(a) => {
            let q = model::read_bundle(&a.queries)?;
            let pool = model::read_bundle(&a.pool)?;
            let idx = load_index(&a.manifest)?;
            let mined = curation::mine_hard_negatives(&q, &pool, &idx, a.k)?;
            curation::save_mined(&a.out, &mined)?;
            write_sidecar(&a.out, &info)
        }
        Command::Triplets(a) => {
            let cur: Curation = jsonl::read_json(&a.curation)?;
            let mined = curation::load_mined(&a.mined)?;
            let idx = load_index(&a.manifest)?;
            let mix = TripletMix {
                real_only: a.mix[0],
                s2a_positive: a.mix[1],
                s2b_negative: a.mix[2],
            };
            let built = curation::build_triplets(&cur.selection.instances, &mined, &idx, &mix, a.count, seed)?;
            for (k, n) in &built.shortfall {
                eprintln!("warning: {n} {k:?} triplet(s) could not be built");
            }
            model::save_triplets(&a.out, &built.triplets)?;
            write_sidecar(&a.out, &info)?;
            if let Some(r) = &a.report {
                #[derive(Serialize)]
                struct Counts<'a> {
                    requested: &'a std::collections::BTreeMap<model::TripletKind, u64>,
                    produced: &'a std::collections::BTreeMap<model::TripletKind, u64>,
                    shortfall: &'a std::collections::BTreeMap<model::TripletKind, u64>,
                }
                let c = Counts {
                    requested: &built.requested,
                    produced: &built.produced,
                    shortfall: &built.shortfall,
                };
                write_stamped(r, &c, &info)?;
            }
            Ok(())
        }
        Command::Train(a) => {
            let mut cfg: TrainConfig = match &a.config {
                Some(p) => jsonl::read_json(p)?,
                None => TrainConfig::default(),
            };
            cfg.seed = seed;
            macro_rules! set {
                ($($flag:ident => $($field:ident).+),*) => {
                    $(if let Some(v) = a.$flag { cfg.$($field).+ = v; })*
                };
            }
            set!(lr => lr, weight_decay => weight_decay, batch_size => batch_size,
                 grad_accum => grad_accum, epochs => epochs, hidden_dim => hidden_dim,
                 tau => loss.tau, lambda => loss.lambda, margin => loss.margin);
            if let Some(o) = a.objective {
                cfg.loss.objective = match o {
                    ObjectiveArg::Infonce => Objective::InfoNce,
                    ObjectiveArg::Hinge => Objective::Hinge,
                    ObjectiveArg::Bce => Objective::Bce,
                };
            }
            let idx = load_index(&a.manifest)?;
            let triplets = model::load_triplets(&a.triplets)?;
            let cls = model::read_bundle(&a.cls)?;
            let patch = a.patch.as_ref().map(model::read_bundle).transpose()?;
            let data = TrainData::new(&idx, &cls, patch.as_ref())?;
            let outcome = trainer::train(&triplets, &data, &cfg)?;
            let run = RunInfo::new(&cfg, seed);
            let meta = CheckpointMeta::for_head(&outcome.best_head, seed, run.config_hash.clone());
            trainer::save_checkpoint(&outcome.best_head, &meta, &a.out)?;
            if let Some(p) = &a.final_out {
                trainer::save_checkpoint(&outcome.final_head, &meta, p)?;
            }
            if let Some(p) = &a.history {
                write_stamped(p, &outcome.history, &run)?;
            }
            eprintln!(
                "best epoch {} (val accuracy {:.4})",
                outcome.history.best_epoch, outcome.history.best_val_accuracy
            );
            Ok(())
        }
        Command::Apply(a) => {
            let (head, _) = trainer::load_checkpoint(&a.checkpoint)?;
            let bundle = model::read_bundle(&a.bundle)?;
            model::write_bundle(&trainer::apply_head(&head, &bundle)?, &a.out)?;
            write_sidecar(&a.out, &info)
        }
        Command::Score(a) => {
            let bundle = model::read_bundle(&a.bundle)?;
            let s = Scorer::with_sinkhorn(&bundle, a.sinkhorn.config(seed)).score(&a.pair[0], &a.pair[1])?;
            println!("similarity\t{}", s.similarity);
            println!("distance\t{}", s.distance);
            Ok(())
        }
        Command::Eval(cmd) => {
            let (protocol, common) = match &cmd {
                EvalCommand::Retrieval { common, .. } => (Protocol::Retrieval, common),
                EvalCommand::Verification { common, .. } => (Protocol::Verification, common),
                EvalCommand::Triplet { common, .. } => (Protocol::Triplet, common),
                EvalCommand::Correlation { common, .. } => (Protocol::Correlation, common),
            };
            let bundle = model::read_bundle(&common.bundle)?;
            let scorer = Scorer::with_sinkhorn(&bundle, common.sinkhorn.config(seed));
            let report = match &cmd {
                EvalCommand::Retrieval { task, .. } => {
                    let t = RetrievalTask::load(task)?;
                    eval::run_protocol(protocol, ProtocolInputs::Retrieval(&t), &scorer, &info)?
                }
                EvalCommand::Triplet { task, .. } => {
                    let t = TripletTask::load(task)?;
                    eval::run_protocol(protocol, ProtocolInputs::Triplets(&t), &scorer, &info)?
                }
                EvalCommand::Verification { pairs, .. } | EvalCommand::Correlation { pairs, .. } => {
                    let p = model::load_pairs(pairs)?;
                    eval::run_protocol(protocol, ProtocolInputs::Pairs(&p), &scorer, &info)?
                }
            };
            emit_report(common.out.as_deref(), &report.to_json())
        }
        Command::Sensitivity(cmd) => match cmd {
            SensitivityCommand::Grids {
                manifest,
                identity_key,
                factor_key,
                out,
            } => {
                let idx = load_index(&manifest)?;
                let grids = sensitivity::grids_from_manifest(&idx, &identity_key, &factor_key);
                sensitivity::save_grids(&out, &grids)?;
                write_sidecar(&out, &info)
            }
            SensitivityCommand::Fit {
                grids,
                bundle,
                n_boot,
                out,
                sinkhorn,
            } => {
                let g = sensitivity::load_grids(&grids)?;
                let b = model::read_bundle(&bundle)?;
                let scorer = Scorer::with_sinkhorn(&b, sinkhorn.config(seed));
                let report = sensitivity::analyze(&g, &scorer, n_boot, seed, &info)?;
                write_text(&out, &report.to_json())
            }
            SensitivityCommand::Trend {
                grids,
                bundle,
                factor_name,
                axis,
                out,
                sinkhorn,
            } => {
                let g = sensitivity::load_grids(&grids)?;
                let b = model::read_bundle(&bundle)?;
                let scorer = Scorer::with_sinkhorn(&b, sinkhorn.config(seed));
                let axis = match axis {
                    AxisArg::Factor => TrendAxis::Factor,
                    AxisArg::Identity => TrendAxis::Identity,
                };
                let pts = sensitivity::similarity_trend(&g, &scorer, &factor_name, axis)?;
                write_text(&out, &sensitivity::trend_csv(&pts))?;
                write_sidecar(&out, &info)
            }
        },
        Command::AggregateVotes(a) => {
            let votes: Vec<VoteRecord> = jsonl::read_jsonl(&a.votes)?;
            let agg = curation::aggregate_votes(&votes, a.threshold)?;
            jsonl::write_jsonl(&a.out, &agg)?;
            write_sidecar(&a.out, &info)
        }
        Command::Inspect(a) => {
            if a.bundle.is_empty() && a.manifest.is_none() {
                return Err(Error::InvalidInput("give --bundle and/or --manifest".into()));
            }
            let mut out = serde_json::Map::new();
            for p in &a.bundle {
                let s = model::read_bundle(p)?.summary();
                out.insert(p.display().to_string(), serde_json::to_value(s).expect("summary"));
            }
            if let Some(p) = &a.manifest {
                let s = load_index(p)?.stats();
                out.insert(p.display().to_string(), serde_json::to_value(s).expect("stats"));
            }
            println!("{}", serde_json::to_string_pretty(&out).expect("json"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error[InvalidInput]: cannot start {n} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(1)
        }
    }
}
