//! End-to-end experiment harnesses built from the library pieces:
//! indexing, evaluation of passage and voting models, the dimension and
//! tempo sweeps, the distance/duration scatter, and the seeded `repro` run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{build_corpus, rerender_split, CorpusConfig, CorpusManifest, TempoRendering};
use crate::error::{argument, config, Error, Result};
use crate::eval::plot::{line_chart, scatter_chart, Series};
use crate::eval::{evaluate, spearman, EvalReport};
use crate::features::HopConfig;
use crate::geometry::{Direction, Modality};
use crate::model::checkpoint::{fingerprint, passage_to_bytes, snippet_to_bytes};
use crate::model::{SnippetModel, TwoTowerModel};
use crate::parallel;
use crate::retrieval::{baseline_retrieve, retrieve_all, EmbeddingIndex, RanksFile, RankedList, SnippetBank};
use crate::training::{
    pretrain_snippet_model, train_passage_model, write_log, PassageSet, PreparedSet, TrainConfig, Variant,
};

/// Settings for sweeps and the `repro` pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    /// Passage variants trained by `repro` (the voting baseline always runs).
    pub variants: Vec<Variant>,
    pub dims: Vec<usize>,
    pub tempo_ratios: Vec<f64>,
    /// Range of per-passage tempo ratios for the tempo-varied test set.
    pub tempo_variation: [f64; 2],
    pub top_k: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            train: TrainConfig::default(),
            variants: vec![
                Variant::Rnn,
                Variant::RnnFt,
                Variant::RnnFz,
                Variant::RnnFtCca,
                Variant::RnnFzCca,
            ],
            dims: vec![16, 64, 256],
            tempo_ratios: vec![0.5, 1.0, 2.0],
            tempo_variation: [0.8, 1.25],
            top_k: crate::retrieval::DEFAULT_TOP_K,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.generator.validate()?;
        self.train.validate()?;
        if self.variants.contains(&Variant::Bl) {
            return Err(config("variants lists passage models; bl always runs"));
        }
        if self.dims.contains(&0) {
            return Err(config("embedding dimensions must be positive"));
        }
        if self.tempo_ratios.iter().any(|r| !(*r > 0.0)) {
            return Err(config("tempo ratios must be positive"));
        }
        let [lo, hi] = self.tempo_variation;
        if !(lo > 0.0 && lo <= hi) {
            return Err(config("tempo_variation must be a positive range"));
        }
        if self.top_k == 0 {
            return Err(config("top_k must be positive"));
        }
        Ok(())
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config(e.to_string()))
    }
}

/// Something that ranks candidates of one modality for queries of the other.
#[derive(Clone, Copy)]
pub enum Retriever<'a> {
    Passage(&'a TwoTowerModel<f32>),
    Voting(&'a SnippetModel<f32>, usize),
}

impl Retriever<'_> {
    pub fn variant(&self) -> String {
        match self {
            Retriever::Passage(m) => m.meta.variant.clone(),
            Retriever::Voting(..) => Variant::Bl.name().to_string(),
        }
    }

    pub fn fingerprint(&self) -> Result<String> {
        Ok(match self {
            Retriever::Passage(m) => fingerprint(&passage_to_bytes(m)?),
            Retriever::Voting(m, _) => fingerprint(&snippet_to_bytes(m)?),
        })
    }

    /// Ranked lists over the canonical renderings of `set`, one per query.
    pub fn rank(&self, set: &PassageSet, hops: &HopConfig, direction: Direction) -> Result<Vec<RankedList>> {
        let set = set.canonical();
        match self {
            Retriever::Passage(model) => {
                let fp = self.fingerprint()?;
                let q = build_index(model, &set, direction.query(), hops, &fp)?;
                let c = build_index(model, &set, direction.candidates(), hops, &fp)?;
                retrieve_all(&q, &c)
            }
            Retriever::Voting(model, top_k) => {
                let bank = SnippetBank::build(model, &set.refs(direction.candidates()), hops)?;
                let queries = set.refs(direction.query());
                parallel::map_slice(&queries, |q| baseline_retrieve(model, *q, &bank, hops, *top_k))
                    .into_iter()
                    .collect()
            }
        }
    }

    /// Reports for both directions (A2S first).
    pub fn evaluate(&self, set: &PassageSet, hops: &HopConfig, dataset: &str) -> Result<Vec<EvalReport>> {
        let fp = self.fingerprint()?;
        Direction::BOTH
            .iter()
            .map(|d| evaluate(&self.rank(set, hops, *d)?, dataset, &self.variant(), vec![fp.clone()]))
            .collect()
    }
}

/// Embeds the canonical renderings of one modality into an index.
pub fn build_index(
    model: &TwoTowerModel<f32>,
    set: &PassageSet,
    modality: Modality,
    hops: &HopConfig,
    fingerprint: &str,
) -> Result<EmbeddingIndex> {
    if set.is_empty() {
        return Err(argument("cannot build an index from no passages"));
    }
    let set = set.canonical();
    let seqs = parallel::map_slice(&set.refs(modality), |p| model.prepare(*p, hops))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let matrix = model.embed_sequences(modality, &seqs.iter().collect::<Vec<_>>())?;
    EmbeddingIndex::new(modality, set.ids.clone(), matrix, fingerprint.to_string())
}

/// Loads a split and re-renders its audio at the given tempo.
pub fn rerendered(manifest: &CorpusManifest, tempo: TempoRendering) -> Result<PassageSet> {
    Ok(PassageSet::from_pairs(rerender_split(manifest, tempo)?))
}

/// MRR of both directions for one tempo ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TempoRow {
    pub variant: String,
    pub ratio: f64,
    pub mrr_a2s: f64,
    pub mrr_s2a: f64,
}

/// Evaluates every model on the test split re-rendered at each ratio.
pub fn sweep_tempo(
    ratios: &[f64],
    test: &CorpusManifest,
    models: &[Retriever<'_>],
    hops: &HopConfig,
) -> Result<Vec<TempoRow>> {
    if ratios.is_empty() {
        return Err(argument("no tempo ratios"));
    }
    let mut rows = Vec::new();
    for &ratio in ratios {
        let set = rerendered(test, TempoRendering::Fixed(ratio))?;
        for m in models {
            let r = m.evaluate(&set, hops, &format!("test-rho{ratio}"))?;
            log::info!("tempo {ratio}: {} A2S {:.3} S2A {:.3}", m.variant(), r[0].mrr, r[1].mrr);
            rows.push(TempoRow {
                variant: m.variant(),
                ratio,
                mrr_a2s: r[0].mrr,
                mrr_s2a: r[1].mrr,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimRow {
    pub dim: usize,
    pub mrr_a2s: f64,
    pub mrr_s2a: f64,
}

/// Trains one RNN model per embedding dimension (seed of cell `i` is
/// `seed ^ i`) and evaluates each on `test`.
pub fn sweep_dim(
    dims: &[usize],
    base: &TrainConfig,
    train: &PassageSet,
    valid: &PassageSet,
    test: &PassageSet,
) -> Result<Vec<DimRow>> {
    if dims.is_empty() {
        return Err(argument("no embedding dimensions"));
    }
    let mut rows = Vec::new();
    for (i, &dim) in dims.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.variant = Variant::Rnn;
        cfg.model.embed_dim = dim;
        cfg.seed = base.seed ^ i as u64;
        let model = train_passage_model(&cfg, train, valid, None)?.model;
        let r = Retriever::Passage(&model).evaluate(test, &cfg.hops, "test")?;
        log::info!("dim {dim}: A2S {:.3} S2A {:.3}", r[0].mrr, r[1].mrr);
        rows.push(DimRow {
            dim,
            mrr_a2s: r[0].mrr,
            mrr_s2a: r[1].mrr,
        });
    }
    Ok(rows)
}

pub fn dim_plot(rows: &[DimRow]) -> String {
    let a2s: Vec<(f64, f64)> = rows.iter().map(|r| (r.dim as f64, r.mrr_a2s)).collect();
    let s2a: Vec<(f64, f64)> = rows.iter().map(|r| (r.dim as f64, r.mrr_s2a)).collect();
    line_chart(
        "MRR by embedding dimension",
        "embedding dimension",
        "MRR",
        &[
            Series { name: "A2S", points: a2s },
            Series { name: "S2A", points: s2a },
        ],
        true,
    )
}

/// One test pair in the distance/duration analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub passage_id: String,
    pub duration_s: f64,
    pub distance: f64,
    pub reciprocal_rank: f64,
}

/// Pair distance, audio duration and S2A reciprocal rank per test pair.
pub fn scatter_analysis(model: &TwoTowerModel<f32>, set: &PassageSet, hops: &HopConfig) -> Result<Vec<ScatterRow>> {
    let set = set.canonical();
    let prepared = PreparedSet::new(&set, model, hops)?;
    let es = model.embed_sequences(Modality::Sheet, &prepared.sheet.iter().collect::<Vec<_>>())?;
    let ea = model.embed_sequences(Modality::Audio, &prepared.audio.iter().map(|r| &r[0]).collect::<Vec<_>>())?;
    let ranks = crate::retrieval::diagonal_ranks(&es, &ea, &set.ids);
    Ok((0..set.len())
        .map(|i| {
            let x = es.row(i).mapv(f64::from);
            let y = ea.row(i).mapv(f64::from);
            ScatterRow {
                passage_id: set.ids[i].clone(),
                duration_s: set.audio[i][0].duration_seconds(),
                distance: crate::loss::cosine_distance(x.view(), y.view()),
                reciprocal_rank: 1.0 / ranks[i] as f64,
            }
        })
        .collect())
}

/// Spearman correlation of distance with reciprocal rank.
pub fn scatter_correlation(rows: &[ScatterRow]) -> Result<f64> {
    let d: Vec<f64> = rows.iter().map(|r| r.distance).collect();
    let rr: Vec<f64> = rows.iter().map(|r| r.reciprocal_rank).collect();
    spearman(&d, &rr)
}

/// Writes `scatter.csv` and `scatter.svg` into `dir`.
pub fn write_scatter(dir: &Path, rows: &[ScatterRow]) -> Result<()> {
    let mut csv = String::from("duration_s,distance,reciprocal_rank\n");
    for r in rows {
        csv.push_str(&format!("{},{},{}\n", r.duration_s, r.distance, r.reciprocal_rank));
    }
    write_text(&dir.join("scatter.csv"), &csv)?;
    let pts: Vec<(f64, f64, f64)> = rows.iter().map(|r| (r.duration_s, r.distance, r.reciprocal_rank)).collect();
    let svg = scatter_chart("Pair distance by audio duration", "audio duration (s)", "cosine distance", &pts);
    write_text(&dir.join("scatter.svg"), &svg)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Checks of the desk-scale relative claims for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimChecks {
    /// RNN beats the voting baseline on the tempo-varied test set.
    pub rnn_over_bl: [bool; 2],
    /// RNN-FT is within 0.02 of RNN on the test set.
    pub ft_non_inferior: [bool; 2],
    /// RNN at unit tempo is at least as good as at every other ratio.
    pub tempo_peak: [bool; 2],
    /// Reciprocal rank falls as pair distance grows.
    pub scatter_negative: bool,
}

/// Everything `repro` records, written as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproReport {
    pub seed: u64,
    pub config: ExperimentConfig,
    pub split_sizes: [usize; 3],
    pub checkpoints: Vec<(String, String)>,
    pub reports: Vec<EvalReport>,
    pub tempo: Vec<TempoRow>,
    pub dims: Vec<DimRow>,
    pub scatter_spearman: f64,
    pub checks: ClaimChecks,
}

impl ReproReport {
    pub fn mrr(&self, dataset: &str, variant: &str, direction: Direction) -> Option<f64> {
        self.reports
            .iter()
            .find(|r| r.dataset == dataset && r.variant == variant && r.direction == direction)
            .map(|r| r.mrr)
    }
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runs the whole pipeline from one seed: corpus, pretraining, every
/// passage variant, retrieval and evaluation on the test set and its
/// tempo-varied rendering, both sweeps and the scatter analysis.
///
/// Layout under `out`: `corpus/`, `checkpoints/`, `logs/`, `indices/`,
/// `ranks/`, `mrr_vs_dim.svg`, `dim_table.json`, `tempo_table.json`,
/// `scatter.{csv,svg}` and `report.json`.
pub fn repro(cfg: &ExperimentConfig, seed: u64, out: &Path, force: bool) -> Result<ReproReport> {
    cfg.validate()?;
    if !cfg.variants.contains(&Variant::Rnn) {
        return Err(config("repro needs the rnn variant"));
    }
    let report_path = out.join("report.json");
    if report_path.exists() && !force {
        return Err(Error::Exists(report_path));
    }
    let dirs: Vec<PathBuf> = ["checkpoints", "logs", "indices", "ranks"].iter().map(|d| out.join(d)).collect();
    for d in &dirs {
        prepare_dir(d)?;
    }
    let (ckpt_dir, log_dir, index_dir, ranks_dir) = (&dirs[0], &dirs[1], &dirs[2], &dirs[3]);

    let mut corpus = cfg.corpus.clone();
    corpus.seed = seed;
    log::info!("repro: generating {} pairs", corpus.n_pairs);
    let manifests = build_corpus(&corpus, &out.join("corpus"), force)?;
    let train = PassageSet::load(&manifests[0])?;
    let valid = PassageSet::load(&manifests[1])?;
    let test = PassageSet::load(&manifests[2])?;
    let [lo, hi] = cfg.tempo_variation;
    let varied = rerendered(
        &manifests[2],
        TempoRendering::LogUniform {
            lo,
            hi,
            seed: crate::seed::derive(seed, "tempo-variation"),
        },
    )?;
    let mut base = cfg.train.clone();
    base.seed = seed;
    let hops = base.hops;

    let mut checkpoints = Vec::new();
    log::info!("repro: pretraining");
    let mut pre_cfg = base.clone();
    pre_cfg.variant = Variant::Bl;
    let pre = pretrain_snippet_model(&pre_cfg, &train, &valid)?;
    let bytes = snippet_to_bytes(&pre.model)?;
    let p = ckpt_dir.join("bl.ckpt");
    fs::write(&p, &bytes).map_err(|e| Error::io(&p, e))?;
    write_log(&log_dir.join("bl.jsonl"), &pre.log)?;
    checkpoints.push(("bl".to_string(), fingerprint(&bytes)));

    let mut models = Vec::new();
    for &v in &cfg.variants {
        log::info!("repro: training {v}");
        let mut c = base.clone();
        c.variant = v;
        let o = train_passage_model(&c, &train, &valid, Some(&pre.model))?;
        let bytes = passage_to_bytes(&o.model)?;
        let p = ckpt_dir.join(format!("{v}.ckpt"));
        fs::write(&p, &bytes).map_err(|e| Error::io(&p, e))?;
        write_log(&log_dir.join(format!("{v}.jsonl")), &o.log)?;
        let fp = fingerprint(&bytes);
        for m in [Modality::Sheet, Modality::Audio] {
            build_index(&o.model, &test, m, &hops, &fp)?.save(&index_dir.join(format!("{v}.test.{}.eidx", m.name())))?;
        }
        checkpoints.push((v.name().to_string(), fp));
        models.push(o.model);
    }

    let mut retrievers = vec![Retriever::Voting(&pre.model, cfg.top_k)];
    retrievers.extend(models.iter().map(Retriever::Passage));
    let mut reports = Vec::new();
    for (dataset, set) in [("test", &test), ("test-varied", &varied)] {
        for r in &retrievers {
            let fp = r.fingerprint()?;
            for d in Direction::BOTH {
                let lists = r.rank(set, &hops, d)?;
                let name = format!("{}.{dataset}.{}.json", r.variant(), d.name());
                RanksFile::from_lists(&lists, dataset, &r.variant(), vec![fp.clone()])?.save(&ranks_dir.join(name))?;
                let rep = evaluate(&lists, dataset, &r.variant(), vec![fp.clone()])?;
                log::info!("{dataset} {} {d}: MRR {:.3} R@1 {:.1}", r.variant(), rep.mrr, rep.r1);
                reports.push(rep);
            }
        }
    }

    log::info!("repro: tempo sweep");
    let tempo = sweep_tempo(&cfg.tempo_ratios, &manifests[2], &retrievers, &hops)?;
    write_json(&out.join("tempo_table.json"), &tempo)?;

    log::info!("repro: dimension sweep");
    let dims = sweep_dim(&cfg.dims, &base, &train, &valid, &test)?;
    write_json(&out.join("dim_table.json"), &dims)?;
    write_text(&out.join("mrr_vs_dim.svg"), &dim_plot(&dims))?;

    let rnn = &models[cfg.variants.iter().position(|v| *v == Variant::Rnn).unwrap()];
    let scatter = scatter_analysis(rnn, &test, &hops)?;
    write_scatter(out, &scatter)?;
    let scatter_spearman = scatter_correlation(&scatter).unwrap_or(0.0);

    let mut report = ReproReport {
        seed,
        config: cfg.clone(),
        split_sizes: [train.len(), valid.len(), test.len()],
        checkpoints,
        reports,
        tempo,
        dims,
        scatter_spearman,
        checks: ClaimChecks {
            rnn_over_bl: [false; 2],
            ft_non_inferior: [false; 2],
            tempo_peak: [false; 2],
            scatter_negative: scatter_spearman < 0.0,
        },
    };
    report.checks = claim_checks(&report);
    write_json(&report_path, &report)?;
    Ok(report)
}

fn claim_checks(r: &ReproReport) -> ClaimChecks {
    let mut c = r.checks.clone();
    for (i, d) in Direction::BOTH.into_iter().enumerate() {
        let m = |ds: &str, v: &str| r.mrr(ds, v, d);
        c.rnn_over_bl[i] = matches!((m("test-varied", "rnn"), m("test-varied", "bl")), (Some(a), Some(b)) if a >= b);
        c.ft_non_inferior[i] = matches!((m("test", "rnn-ft"), m("test", "rnn")), (Some(a), Some(b)) if a >= b - 0.02);
        let tempo: Vec<&TempoRow> = r.tempo.iter().filter(|t| t.variant == "rnn").collect();
        let pick = |t: &TempoRow| if i == 0 { t.mrr_a2s } else { t.mrr_s2a };
        c.tempo_peak[i] = tempo.iter().find(|t| t.ratio == 1.0).is_some_and(|unit| {
            tempo.iter().all(|t| pick(unit) >= pick(t))
        });
    }
    c
}
