use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{
    generate_passage_events, render_audio, render_sheet, strong_alignment, AlignmentPoint,
    AudioPassage, GeneratorConfig, PassagePair, SheetPassage,
};
use crate::container::{read_matrix, write_matrix};
use crate::error::{config, Error, Result};
use crate::{parallel, seed};

pub const SCHEMA_VERSION: u32 = 1;
pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// Everything needed to regenerate a corpus bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub generator: GeneratorConfig,
    pub seed: u64,
    pub n_pairs: usize,
    /// Fractions of pieces assigned to train / valid / test.
    pub splits: [f64; 3],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            seed: 0,
            n_pairs: 100,
            splits: [0.8, 0.1, 0.1],
        }
    }
}

/// One (sheet, audio) rendering on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub passage_id: String,
    pub piece_id: String,
    /// 0 for the canonical rendering, >= 1 for augmented audio.
    pub augmentation: u32,
    pub sheet_file: String,
    pub spec_file: String,
    pub align_file: Option<String>,
    pub duration_seconds: f64,
    pub tempo_ratio: f64,
    pub timbre_seed: u64,
    pub piece_seed: u64,
    pub passage_index: usize,
    pub style_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub split: String,
    pub generator: CorpusConfig,
    pub records: Vec<PairRecord>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl CorpusManifest {
    fn split_dir(&self) -> PathBuf {
        self.root.join(&self.split)
    }

    /// Reads one record's passages (and alignment, when present).
    pub fn load_pair(&self, record: &PairRecord) -> Result<PassagePair> {
        let dir = self.split_dir();
        let sheet = read_matrix(&dir.join(&record.sheet_file))?;
        let spec = read_matrix(&dir.join(&record.spec_file))?;
        let align = match &record.align_file {
            Some(f) => {
                let p = dir.join(f);
                let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                Some(serde_json::from_str::<Vec<AlignmentPoint>>(&text)?)
            }
            None => None,
        };
        PassagePair::new(
            SheetPassage::new(sheet, record.passage_id.clone(), record.piece_id.clone())?,
            AudioPassage::new(spec, record.passage_id.clone(), record.piece_id.clone())?,
            align,
        )
    }

    /// Loads every record, in manifest order.
    pub fn load_all(&self) -> Result<Vec<PassagePair>> {
        parallel::map_slice(&self.records, |r| self.load_pair(r))
            .into_iter()
            .collect()
    }

    /// Only the canonical (unaugmented) records.
    pub fn canonical(&self) -> Vec<&PairRecord> {
        self.records.iter().filter(|r| r.augmentation == 0).collect()
    }

    pub fn load_canonical(&self) -> Result<Vec<PassagePair>> {
        let recs = self.canonical();
        parallel::map_slice(&recs, |r| self.load_pair(r))
            .into_iter()
            .collect()
    }

    pub fn piece_ids(&self) -> std::collections::BTreeSet<&str> {
        self.records.iter().map(|r| r.piece_id.as_str()).collect()
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert((&r.passage_id, r.augmentation)) {
                return Err(Error::Format(format!(
                    "duplicate record {} / augmentation {}",
                    r.passage_id, r.augmentation
                )));
            }
        }
        Ok(())
    }
}

/// Reads `<root>/<split>/manifest.json`.
pub fn load_corpus(root: &Path, split: &str) -> Result<CorpusManifest> {
    let path = root.join(split).join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut m: CorpusManifest = serde_json::from_str(&text)?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(Error::Incompatible {
            found: m.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    m.root = root.to_path_buf();
    m.validate()?;
    for r in &m.records {
        for f in [Some(&r.sheet_file), Some(&r.spec_file), r.align_file.as_ref()]
            .into_iter()
            .flatten()
        {
            let p = root.join(split).join(f);
            if !p.is_file() {
                return Err(Error::Format(format!("record file {} missing", p.display())));
            }
        }
    }
    Ok(m)
}

/// Number of pieces per split; rounding leftovers go to the test split.
fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(config(format!("split ratios {ratios:?} must be >= 0 and sum to 1")));
    }
    let train = (n as f64 * ratios[0]).round() as usize;
    let valid = ((n as f64 * ratios[1]).round() as usize).min(n.saturating_sub(train));
    Ok([train, valid, n - train - valid])
}

struct Timbres {
    train: Vec<u64>,
    valid: u64,
    test: u64,
}

impl Timbres {
    fn new(master: u64, n_train: usize) -> Self {
        let base = seed::derive(master, "timbre");
        Self {
            train: (0..n_train as u64).map(|i| seed::derive_index(base, i)).collect(),
            valid: seed::derive(master, "timbre-valid"),
            test: seed::derive(master, "timbre-test"),
        }
    }
}

/// Renders and writes all splits under `root`, returning their manifests.
///
/// Each passage is rendered independently (in parallel when enabled) into
/// uniquely named files; each manifest is written once at the end.
pub fn build_corpus(cfg: &CorpusConfig, root: &Path, force: bool) -> Result<Vec<CorpusManifest>> {
    cfg.generator.validate()?;
    if cfg.n_pairs == 0 {
        return Err(config("n_pairs must be >= 1"));
    }
    let g = &cfg.generator;
    let n_pieces = cfg.n_pairs.div_ceil(g.passages_per_piece);
    let counts = split_counts(n_pieces, cfg.splits)?;
    for split in SPLITS {
        let m = root.join(split).join("manifest.json");
        if m.exists() && !force {
            return Err(Error::Exists(m));
        }
    }
    let timbres = Timbres::new(cfg.seed, g.train_timbres);
    let piece_base = seed::derive(cfg.seed, "corpus");

    let mut manifests = Vec::new();
    let mut first_piece = 0;
    for (split_idx, split) in SPLITS.iter().enumerate() {
        let dir = root.join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let pieces = first_piece..first_piece + counts[split_idx];
        first_piece += counts[split_idx];

        // one job per passage
        let mut jobs = Vec::new();
        for piece in pieces {
            for passage in 0..g.passages_per_piece {
                if piece * g.passages_per_piece + passage < cfg.n_pairs {
                    jobs.push((piece, passage));
                }
            }
        }
        let results = parallel::map_slice(&jobs, |&(piece, passage)| {
            let piece_seed = seed::derive_index(piece_base, piece as u64);
            render_records(cfg, &timbres, split, &dir, piece, piece_seed, passage)
        });
        let mut records = Vec::new();
        for r in results {
            records.extend(r?);
        }
        let manifest = CorpusManifest {
            schema_version: SCHEMA_VERSION,
            split: split.to_string(),
            generator: cfg.clone(),
            records,
            root: root.to_path_buf(),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        manifests.push(manifest);
    }
    Ok(manifests)
}

fn render_records(
    cfg: &CorpusConfig,
    timbres: &Timbres,
    split: &str,
    dir: &Path,
    piece: usize,
    piece_seed: u64,
    passage: usize,
) -> Result<Vec<PairRecord>> {
    let g = &cfg.generator;
    let piece_id = format!("p{piece:05}");
    let passage_id = format!("{piece_id}_s{passage:02}");
    let ev = generate_passage_events(g, piece_seed, passage)?;
    let style_seed = seed::derive(piece_seed, "style");
    let sheet = render_sheet(&ev, g.pixels_per_beat, g.staff_lines, style_seed);
    let sheet_file = format!("{passage_id}.sheet.f32");
    write_matrix(&dir.join(&sheet_file), &sheet)?;

    let renders: Vec<(f64, u64)> = match split {
        "train" => {
            let mut rng = seed::stream(seed::derive_index(piece_seed, passage as u64), "tempo-aug");
            (0..g.augment_factor)
                .map(|a| {
                    let timbre = timbres.train[a % timbres.train.len()];
                    if a == 0 {
                        (1.0, timbre)
                    } else {
                        (rng.random_range(g.tempo_aug_min..=g.tempo_aug_max), timbre)
                    }
                })
                .collect()
        }
        "valid" => vec![(1.0, timbres.valid)],
        _ => vec![(1.0, timbres.test)],
    };

    let mut records = Vec::new();
    for (a, (ratio, timbre)) in renders.into_iter().enumerate() {
        let stem = if a == 0 {
            passage_id.clone()
        } else {
            format!("{passage_id}.a{a}")
        };
        let spec = render_audio(&ev, ratio, timbre)?;
        let spec_file = format!("{stem}.spec.f32");
        let align_file = format!("{stem}.align.json");
        write_matrix(&dir.join(&spec_file), &spec)?;
        let align = strong_alignment(&ev, g.pixels_per_beat, ratio);
        let p = dir.join(&align_file);
        fs::write(&p, serde_json::to_string(&align)?).map_err(|e| Error::io(&p, e))?;
        records.push(PairRecord {
            passage_id: passage_id.clone(),
            piece_id: piece_id.clone(),
            augmentation: a as u32,
            sheet_file: sheet_file.clone(),
            spec_file,
            align_file: Some(align_file),
            duration_seconds: spec.ncols() as f64 / crate::geometry::FRAME_RATE,
            tempo_ratio: ratio,
            timbre_seed: timbre,
            piece_seed,
            passage_index: passage,
            style_seed,
        });
    }
    Ok(records)
}

/// How to re-render the audio side of a split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TempoRendering {
    /// Every passage at the same global ratio.
    Fixed(f64),
    /// Each passage at a ratio drawn log-uniformly from `[lo, hi]`.
    LogUniform { lo: f64, hi: f64, seed: u64 },
}

/// Re-renders the canonical records of a split in memory, keeping sheets
/// and timbres and changing only the audio tempo.
pub fn rerender_split(manifest: &CorpusManifest, tempo: TempoRendering) -> Result<Vec<PassagePair>> {
    let g = &manifest.generator.generator;
    let recs = manifest.canonical();
    parallel::map_slice(&recs, |r| {
        let ev = generate_passage_events(g, r.piece_seed, r.passage_index)?;
        let ratio = match tempo {
            TempoRendering::Fixed(x) => x,
            TempoRendering::LogUniform { lo, hi, seed: s } => {
                if !(lo > 0.0 && lo <= hi) {
                    return Err(config("tempo range must be positive and non-empty"));
                }
                let mut rng = seed::stream(seed::derive(s, &r.passage_id), "rerender");
                rng.random_range(lo.ln()..=hi.ln()).exp()
            }
        };
        let sheet = render_sheet(&ev, g.pixels_per_beat, g.staff_lines, r.style_seed);
        let spec = render_audio(&ev, ratio * r.tempo_ratio, r.timbre_seed)?;
        let align = strong_alignment(&ev, g.pixels_per_beat, ratio * r.tempo_ratio);
        PassagePair::new(
            SheetPassage::new(sheet, r.passage_id.clone(), r.piece_id.clone())?,
            AudioPassage::new(spec, r.passage_id.clone(), r.piece_id.clone())?,
            Some(align),
        )
    })
    .into_iter()
    .collect()
}
