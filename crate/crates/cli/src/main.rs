//! `passage`: corpus generation, training, retrieval and evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use passage_embed::corpus::{build_corpus, load_corpus, CorpusConfig};
use passage_embed::eval::evaluate_ranks_file;
use passage_embed::geometry::{Direction, Modality};
use passage_embed::model::checkpoint::{
    file_fingerprint, load_any, load_passage_model, load_snippet_model, save_passage_model, save_snippet_model,
    AnyModel,
};
use passage_embed::pipeline::{
    build_index, dim_plot, repro, scatter_analysis, scatter_correlation, sweep_dim, sweep_tempo, write_json,
    write_scatter, ExperimentConfig, Retriever,
};
use passage_embed::retrieval::{retrieve_all, EmbeddingIndex, RanksFile};
use passage_embed::training::{pretrain_snippet_model, train_passage_model, write_log, PassageSet, TrainConfig, Variant};
use passage_embed::{parallel, Error};

#[derive(Parser)]
#[command(name = "passage", version, about = "Audio / sheet-music passage retrieval")]
struct Cli {
    /// Master seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite existing outputs
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (0 = all cores)
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// TOML config for the subcommand
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired corpus
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Snippet-level pretraining (the baseline model)
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a passage model
    Train {
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pretraining checkpoint for the ft/fz variants
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Embed one split into retrieval indices
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: SplitArgs,
        /// One modality written to OUT; both modalities go to OUT/{sheet,audio}.eidx
        #[arg(long)]
        modality: Option<ModalityArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank candidates for every query
    Retrieve(RetrieveArgs),
    /// Metrics from a ranks file
    Evaluate {
        #[arg(long)]
        ranks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embedding-dimension or tempo sweep
    Sweep {
        kind: SweepKind,
        #[arg(long)]
        out: PathBuf,
        /// Existing corpus (generated under OUT/corpus otherwise)
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Checkpoints to evaluate (tempo sweep)
        #[arg(long)]
        ckpt: Vec<PathBuf>,
    },
    /// Pair distance against audio duration
    Scatter {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: SplitArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline from one seed
    Repro {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long, requires = "cand_index")]
    query_index: Option<PathBuf>,
    #[arg(long)]
    cand_index: Option<PathBuf>,
    /// Checkpoint: verifies index fingerprints, or retrieves directly from a corpus
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    direction: Option<Direction>,
    /// Votes per query snippet for snippet checkpoints
    #[arg(long, default_value_t = passage_embed::retrieval::DEFAULT_TOP_K)]
    top_k: usize,
    #[arg(long, default_value = "test")]
    dataset: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Sheet,
    Audio,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Sheet => Modality::Sheet,
            ModalityArg::Audio => Modality::Audio,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Dim,
    Tempo,
}

fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Exists(path.to_path_buf()).into());
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn read_config<T>(path: Option<&Path>, parse: impl Fn(&str) -> passage_embed::Result<T>, default: T) -> Result<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(parse(&text).with_context(|| format!("config {}", p.display()))?)
        }
        None => Ok(default),
    }
}

fn corpus_config(path: Option<&Path>) -> Result<CorpusConfig> {
    read_config(
        path,
        |s| toml::from_str(s).map_err(|e| Error::Config(e.to_string())),
        CorpusConfig::default(),
    )
}

fn train_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = read_config(cli.config.as_deref(), TrainConfig::from_toml, TrainConfig::default())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn experiment_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = read_config(cli.config.as_deref(), ExperimentConfig::from_toml, ExperimentConfig::default())?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.corpus.seed = s;
    }
    Ok(cfg)
}

fn load_split(corpus: &Path, split: &str) -> Result<(passage_embed::corpus::CorpusManifest, PassageSet)> {
    let m = load_corpus(corpus, split)?;
    let set = PassageSet::load(&m)?;
    Ok((m, set))
}

fn write_index(index: &EmbeddingIndex, path: &Path, force: bool) -> Result<()> {
    guard(path, force)?;
    index.save(path)?;
    log::info!("wrote {} ({} x {})", path.display(), index.len(), index.dim());
    Ok(())
}

fn retrieve(cli: &Cli, a: &RetrieveArgs) -> Result<()> {
    guard(&a.out, cli.force)?;
    let ranks = if let (Some(qp), Some(cp)) = (&a.query_index, &a.cand_index) {
        let q = EmbeddingIndex::load(qp)?;
        let c = EmbeddingIndex::load(cp)?;
        if let Some(ck) = &a.ckpt {
            let fp = file_fingerprint(ck)?;
            q.check_fingerprint(&fp)?;
            c.check_fingerprint(&fp)?;
        }
        if q.fingerprint != c.fingerprint {
            bail!("query and candidate indices come from different checkpoints");
        }
        let lists = retrieve_all(&q, &c)?;
        let fp = q.fingerprint.clone();
        let variant = variant_of(a.ckpt.as_deref()).unwrap_or_default();
        RanksFile::from_lists(&lists, &a.dataset, &variant, vec![fp])?
    } else {
        let (Some(ck), Some(corpus), Some(direction)) = (&a.ckpt, &a.corpus, a.direction) else {
            bail!("retrieve needs --query-index/--cand-index or --ckpt, --corpus and --direction");
        };
        let (_, set) = load_split(corpus, &a.split)?;
        let model = load_any(ck)?;
        let r = match &model {
            AnyModel::Passage(m) => Retriever::Passage(m),
            AnyModel::Snippet(m) => Retriever::Voting(m, a.top_k),
        };
        let lists = r.rank(&set, &Default::default(), direction)?;
        RanksFile::from_lists(&lists, &a.dataset, &r.variant(), vec![file_fingerprint(ck)?])?
    };
    ranks.save(&a.out)?;
    log::info!("wrote {} ({} queries)", a.out.display(), ranks.queries.len());
    Ok(())
}

fn variant_of(ckpt: Option<&Path>) -> Option<String> {
    match load_any(ckpt?).ok()? {
        AnyModel::Passage(m) => Some(m.meta.variant),
        AnyModel::Snippet(_) => Some(Variant::Bl.name().into()),
    }
}

fn run(cli: &Cli) -> Result<()> {
    parallel::init_threads(cli.threads);
    match &cli.command {
        Command::GenCorpus { out, pairs } => {
            let mut cfg = corpus_config(cli.config.as_deref())?;
            if let Some(n) = pairs {
                cfg.n_pairs = *n;
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let ms = build_corpus(&cfg, out, cli.force)?;
            for m in &ms {
                log::info!("{}: {} renderings", m.split, m.records.len());
            }
        }
        Command::Pretrain { corpus, out } => {
            guard(out, cli.force)?;
            let mut cfg = train_config(cli)?;
            cfg.variant = Variant::Bl;
            let (_, train) = load_split(corpus, "train")?;
            let (_, valid) = load_split(corpus, "valid")?;
            let o = pretrain_snippet_model(&cfg, &train, &valid)?;
            save_snippet_model(&o.model, out)?;
            write_log(&out.with_extension("log.jsonl"), &o.log)?;
            log::info!("wrote {}", out.display());
        }
        Command::Train { variant, corpus, out, pretrained } => {
            guard(out, cli.force)?;
            let mut cfg = train_config(cli)?;
            cfg.variant = *variant;
            let pre = pretrained.as_deref().map(load_snippet_model::<f32>).transpose()?;
            let (_, train) = load_split(corpus, "train")?;
            let (_, valid) = load_split(corpus, "valid")?;
            let o = train_passage_model(&cfg, &train, &valid, pre.as_ref())?;
            save_passage_model(&o.model, out)?;
            write_log(&out.with_extension("log.jsonl"), &o.log)?;
            log::info!("wrote {}", out.display());
        }
        Command::Embed { ckpt, data, modality, out } => {
            let model = match load_any(ckpt)? {
                AnyModel::Passage(m) => m,
                AnyModel::Snippet(_) => bail!("{} is a snippet checkpoint; embed needs a passage model", ckpt.display()),
            };
            let fp = file_fingerprint(ckpt)?;
            let (_, set) = load_split(&data.corpus, &data.split)?;
            let hops = Default::default();
            match modality {
                Some(m) => write_index(&build_index(&model, &set, (*m).into(), &hops, &fp)?, out, cli.force)?,
                None => {
                    for m in [Modality::Sheet, Modality::Audio] {
                        let path = out.join(format!("{}.eidx", m.name()));
                        write_index(&build_index(&model, &set, m, &hops, &fp)?, &path, cli.force)?;
                    }
                }
            }
        }
        Command::Retrieve(a) => retrieve(cli, a)?,
        Command::Evaluate { ranks, out } => {
            guard(out, cli.force)?;
            let report = evaluate_ranks_file(&RanksFile::load(ranks)?)?;
            report.save(out)?;
            log::info!(
                "{} {}: R@1 {:.2} R@10 {:.2} R@25 {:.2} MRR {:.4} MR {}",
                report.variant,
                report.direction,
                report.r1,
                report.r10,
                report.r25,
                report.mrr,
                report.mr
            );
        }
        Command::Sweep { kind, out, corpus, ckpt } => {
            let cfg = experiment_config(cli)?;
            let root = match corpus {
                Some(c) => c.clone(),
                None => {
                    let root = out.join("corpus");
                    build_corpus(&cfg.corpus, &root, cli.force)?;
                    root
                }
            };
            let hops = cfg.train.hops;
            match kind {
                SweepKind::Dim => {
                    let svg = out.join("mrr_vs_dim.svg");
                    guard(&svg, cli.force)?;
                    let (_, train) = load_split(&root, "train")?;
                    let (_, valid) = load_split(&root, "valid")?;
                    let (_, test) = load_split(&root, "test")?;
                    let rows = sweep_dim(&cfg.dims, &cfg.train, &train, &valid, &test)?;
                    write_json(&out.join("dim_table.json"), &rows)?;
                    fs::write(&svg, dim_plot(&rows)).with_context(|| format!("writing {}", svg.display()))?;
                }
                SweepKind::Tempo => {
                    if ckpt.is_empty() {
                        bail!("tempo sweep needs at least one --ckpt");
                    }
                    let table = out.join("tempo_table.json");
                    guard(&table, cli.force)?;
                    let test = load_corpus(&root, "test")?;
                    let models = ckpt.iter().map(|p| load_any(p)).collect::<passage_embed::Result<Vec<_>>>()?;
                    let rs: Vec<Retriever<'_>> = models
                        .iter()
                        .map(|m| match m {
                            AnyModel::Passage(m) => Retriever::Passage(m),
                            AnyModel::Snippet(m) => Retriever::Voting(m, cfg.top_k),
                        })
                        .collect();
                    write_json(&table, &sweep_tempo(&cfg.tempo_ratios, &test, &rs, &hops)?)?;
                }
            }
        }
        Command::Scatter { ckpt, data, out } => {
            guard(&out.join("scatter.csv"), cli.force)?;
            let model = load_passage_model::<f32>(ckpt)?;
            let (_, set) = load_split(&data.corpus, &data.split)?;
            let rows = scatter_analysis(&model, &set, &Default::default())?;
            write_scatter(out, &rows)?;
            if let Ok(rho) = scatter_correlation(&rows) {
                log::info!("Spearman(distance, reciprocal rank) = {rho:.3}");
            }
        }
        Command::Repro { out } => {
            let cfg = experiment_config(cli)?;
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let seed = cli.seed.unwrap_or(cfg.train.seed);
            let r = repro(&cfg, seed, out, cli.force)?;
            log::info!("repro checks: {:?}", r.checks);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
