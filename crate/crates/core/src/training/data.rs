//! In-memory training data: passages grouped by id with all renderings.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, Axis};

use crate::corpus::{extract_snippet_pairs, AudioPassage, CorpusManifest, PassagePair, SheetPassage};
use crate::error::{argument, Error, Result};
use crate::features::{slice_passage, HopConfig, NormStats, PassageRef, SnippetSequence};
use crate::geometry::Modality;
use crate::model::{PerModality, TwoTowerModel};
use crate::nn::Real;
use crate::parallel;

/// Passages of one split; `audio[p][0]` is the canonical rendering.
#[derive(Debug, Clone)]
pub struct PassageSet {
    pub ids: Vec<String>,
    pub sheets: Vec<SheetPassage>,
    pub audio: Vec<Vec<AudioPassage>>,
    /// Strong alignments per passage and rendering, when available.
    pub alignments: Vec<Vec<Option<Vec<crate::corpus::AlignmentPoint>>>>,
}

impl PassageSet {
    /// Loads every record of a split, grouping renderings by passage id.
    pub fn load(manifest: &CorpusManifest) -> Result<Self> {
        let pairs = manifest.load_all()?;
        let mut order: Vec<(String, u32, usize)> = manifest
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.passage_id.clone(), r.augmentation, i))
            .collect();
        order.sort();
        let mut grouped: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (id, _, i) in order {
            grouped.entry(id).or_default().push(i);
        }
        let mut set = Self::empty();
        for (id, idxs) in grouped {
            if manifest.records[idxs[0]].augmentation != 0 {
                return Err(Error::Format(format!("passage {id} lacks its canonical rendering")));
            }
            set.ids.push(id);
            set.sheets.push(pairs[idxs[0]].sheet.clone());
            set.audio.push(idxs.iter().map(|i| pairs[*i].audio.clone()).collect());
            set.alignments.push(idxs.iter().map(|i| pairs[*i].strong_alignment.clone()).collect());
        }
        Ok(set)
    }

    /// One rendering per pair, in the given order.
    pub fn from_pairs(pairs: Vec<PassagePair>) -> Self {
        let mut set = Self::empty();
        for p in pairs {
            set.ids.push(p.passage_id().to_string());
            set.sheets.push(p.sheet);
            set.audio.push(vec![p.audio]);
            set.alignments.push(vec![p.strong_alignment]);
        }
        set
    }

    fn empty() -> Self {
        Self {
            ids: Vec::new(),
            sheets: Vec::new(),
            audio: Vec::new(),
            alignments: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Only the canonical rendering of each passage.
    pub fn canonical(&self) -> Self {
        Self {
            ids: self.ids.clone(),
            sheets: self.sheets.clone(),
            audio: self.audio.iter().map(|a| vec![a[0].clone()]).collect(),
            alignments: self.alignments.iter().map(|a| vec![a[0].clone()]).collect(),
        }
    }

    pub fn passage_ref(&self, m: Modality, p: usize) -> PassageRef<'_> {
        match m {
            Modality::Sheet => PassageRef::Sheet(&self.sheets[p]),
            Modality::Audio => PassageRef::Audio(&self.audio[p][0]),
        }
    }

    pub fn refs(&self, m: Modality) -> Vec<PassageRef<'_>> {
        (0..self.len()).map(|p| self.passage_ref(m, p)).collect()
    }
}

/// Input statistics fitted on the canonical renderings of a split.
pub fn fit_norm(set: &PassageSet, hops: &HopConfig) -> Result<PerModality<NormStats>> {
    let mut out = PerModality::default();
    for m in [Modality::Sheet, Modality::Audio] {
        let seqs = set
            .refs(m)
            .into_iter()
            .map(|p| slice_passage(p, hops.for_modality(m)))
            .collect::<Result<Vec<_>>>()?;
        *out.get_mut(m) = NormStats::fit(&seqs)?;
    }
    Ok(out)
}

/// Normalised snippet sequences for every passage and rendering.
pub struct PreparedSet {
    pub ids: Vec<String>,
    pub sheet: Vec<SnippetSequence>,
    pub audio: Vec<Vec<SnippetSequence>>,
}

impl PreparedSet {
    pub fn new<F: Real>(set: &PassageSet, model: &TwoTowerModel<F>, hops: &HopConfig) -> Result<Self> {
        let sheet = parallel::map_slice(&set.sheets, |s| model.prepare(PassageRef::Sheet(s), hops))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let audio = parallel::map_slice(&set.audio, |renders| {
            renders
                .iter()
                .map(|a| model.prepare(PassageRef::Audio(a), hops))
                .collect::<Result<Vec<_>>>()
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ids: set.ids.clone(),
            sheet,
            audio,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Snippet pairs at aligned onsets; the sheet side is shared by all
/// renderings of a passage.
pub struct SnippetPairSet {
    /// `[passage]` -> `(n, 160, 180)`, normalised.
    pub sheet: Vec<Array3<f32>>,
    /// `[passage][rendering]` -> `(n, 92, 20)`, normalised.
    pub audio: Vec<Vec<Array3<f32>>>,
}

fn stack(m: &[Array2<f32>], stats: NormStats) -> Array3<f32> {
    let views: Vec<_> = m.iter().map(|a| a.view()).collect();
    let inv = 1.0 / stats.std;
    ndarray::stack(Axis(0), &views)
        .expect("equal snippet shapes")
        .mapv(|v| (v - stats.mean) * inv)
}

impl SnippetPairSet {
    pub fn new(set: &PassageSet, norm: &PerModality<NormStats>) -> Result<Self> {
        let mut sheet = Vec::with_capacity(set.len());
        let mut audio = Vec::with_capacity(set.len());
        for p in 0..set.len() {
            let mut renders = Vec::new();
            let mut sheet_x: Option<Vec<usize>> = None;
            for (r, a) in set.audio[p].iter().enumerate() {
                let pair = PassagePair::new(set.sheets[p].clone(), a.clone(), set.alignments[p][r].clone())?;
                let xs: Vec<usize> = pair.strong_alignment.as_ref().map_or(vec![], |v| v.iter().map(|q| q.sheet_x).collect());
                let snips = extract_snippet_pairs(&pair)?;
                if snips.is_empty() {
                    return Err(argument(format!("passage {} has no aligned onsets", set.ids[p])));
                }
                match &sheet_x {
                    None => {
                        let s: Vec<Array2<f32>> = snips.iter().map(|s| s.0.clone()).collect();
                        sheet.push(stack(&s, norm.sheet));
                        sheet_x = Some(xs);
                    }
                    Some(prev) if *prev != xs => {
                        return Err(Error::Format(format!(
                            "renderings of {} disagree on sheet anchors",
                            set.ids[p]
                        )))
                    }
                    Some(_) => {}
                }
                let a: Vec<Array2<f32>> = snips.into_iter().map(|s| s.1).collect();
                renders.push(stack(&a, norm.audio));
            }
            audio.push(renders);
        }
        Ok(Self { sheet, audio })
    }

    pub fn pair_count(&self) -> usize {
        self.sheet.iter().map(|s| s.len_of(Axis(0))).sum()
    }
}
