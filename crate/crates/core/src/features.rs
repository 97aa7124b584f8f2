//! Snippet sequences: cutting passages into fixed windows, standardising
//! them and batching variable-length sequences.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{AudioPassage, SheetPassage};
use crate::error::{argument, config, Result};
use crate::geometry::Modality;

/// Window hops per modality, in columns (sheet) and frames (audio).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HopConfig {
    pub sheet: usize,
    pub audio: usize,
}

impl Default for HopConfig {
    fn default() -> Self {
        Self { sheet: 90, audio: 10 }
    }
}

impl HopConfig {
    pub fn for_modality(&self, m: Modality) -> usize {
        match m {
            Modality::Sheet => self.sheet,
            Modality::Audio => self.audio,
        }
    }
}

/// Ordered fixed-shape windows cut from one passage.
#[derive(Debug, Clone, PartialEq)]
pub struct SnippetSequence {
    pub modality: Modality,
    /// (length, rows, cols)
    pub snippets: Array3<f32>,
    pub passage_id: String,
}

impl SnippetSequence {
    pub fn new(modality: Modality, snippets: Array3<f32>, passage_id: String) -> Result<Self> {
        let (n, r, c) = snippets.dim();
        if n == 0 {
            return Err(argument("snippet sequence must be non-empty"));
        }
        if (r, c) != modality.snippet_shape() {
            return Err(argument(format!(
                "{modality} snippets must be {:?}, got ({r}, {c})",
                modality.snippet_shape()
            )));
        }
        Ok(Self {
            modality,
            snippets,
            passage_id,
        })
    }

    pub fn len(&self) -> usize {
        self.snippets.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Window start positions for a passage of `len` columns.
///
/// Regular starts at multiples of `hop`; if they do not reach the end, one
/// more window is right-aligned to the passage end.
pub fn window_starts(len: usize, window: usize, hop: usize) -> Result<Vec<usize>> {
    if hop == 0 {
        return Err(argument("hop must be positive"));
    }
    if hop > window {
        return Err(argument(format!("hop {hop} exceeds window {window}")));
    }
    if len < window {
        return Err(argument(format!("passage length {len} shorter than window {window}")));
    }
    let last = len - window;
    let mut starts: Vec<usize> = (0..=last).step_by(hop).collect();
    if *starts.last().unwrap() != last {
        starts.push(last);
    }
    Ok(starts)
}

fn slice_matrix(
    m: ArrayView2<'_, f32>,
    modality: Modality,
    hop: usize,
    passage_id: &str,
) -> Result<SnippetSequence> {
    let (rows, window) = modality.snippet_shape();
    if m.nrows() != rows {
        return Err(argument(format!("{modality} passage must have {rows} rows")));
    }
    let starts = window_starts(m.ncols(), window, hop)?;
    let mut out = Array3::zeros((starts.len(), rows, window));
    for (i, s0) in starts.iter().enumerate() {
        out.index_axis_mut(Axis(0), i)
            .assign(&m.slice(s![.., *s0..*s0 + window]));
    }
    SnippetSequence::new(modality, out, passage_id.to_string())
}

/// A passage of either modality.
#[derive(Debug, Clone, Copy)]
pub enum PassageRef<'a> {
    Sheet(&'a SheetPassage),
    Audio(&'a AudioPassage),
}

impl PassageRef<'_> {
    pub fn modality(&self) -> Modality {
        match self {
            PassageRef::Sheet(_) => Modality::Sheet,
            PassageRef::Audio(_) => Modality::Audio,
        }
    }

    pub fn passage_id(&self) -> &str {
        match self {
            PassageRef::Sheet(p) => &p.passage_id,
            PassageRef::Audio(p) => &p.passage_id,
        }
    }

    pub fn matrix(&self) -> ArrayView2<'_, f32> {
        match self {
            PassageRef::Sheet(p) => p.pixels.view(),
            PassageRef::Audio(p) => p.spectrogram.view(),
        }
    }
}

/// Cuts a passage into its snippet sequence.
pub fn slice_passage(p: PassageRef<'_>, hop: usize) -> Result<SnippetSequence> {
    slice_matrix(p.matrix(), p.modality(), hop, p.passage_id())
}

/// Scalar standardisation statistics for one modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f32,
    pub std: f32,
}

impl Default for NormStats {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl NormStats {
    /// Mean and population standard deviation over all snippet cells.
    pub fn fit<'a>(seqs: impl IntoIterator<Item = &'a SnippetSequence>) -> Result<Self> {
        let mut n = 0f64;
        let mut sum = 0f64;
        let mut sq = 0f64;
        for s in seqs {
            for v in s.snippets.iter() {
                let v = f64::from(*v);
                n += 1.0;
                sum += v;
                sq += v * v;
            }
        }
        if n == 0.0 {
            return Err(argument("cannot fit normalisation on empty data"));
        }
        let mean = sum / n;
        let var = (sq / n - mean * mean).max(0.0);
        let stats = Self {
            mean: mean as f32,
            std: var.sqrt() as f32,
        };
        stats.check()?;
        Ok(stats)
    }

    fn check(&self) -> Result<()> {
        if !(self.std > 0.0) || !self.std.is_finite() || !self.mean.is_finite() {
            return Err(config(format!("normalisation std must be positive, got {}", self.std)));
        }
        Ok(())
    }
}

/// Elementwise `(x - mean) / std`.
pub fn normalize_snippets(s: &SnippetSequence, stats: NormStats) -> Result<SnippetSequence> {
    stats.check()?;
    let inv = 1.0 / stats.std;
    Ok(SnippetSequence {
        modality: s.modality,
        snippets: s.snippets.mapv(|x| (x - stats.mean) * inv),
        passage_id: s.passage_id.clone(),
    })
}

/// Zero-padded batch of snippet sequences of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub modality: Modality,
    /// (batch, max_len, rows, cols)
    pub data: Array4<f32>,
    pub lengths: Vec<usize>,
    pub passage_ids: Vec<String>,
}

impl PaddedBatch {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.data.len_of(Axis(1))
    }
}

pub fn collate(batch: &[SnippetSequence]) -> Result<PaddedBatch> {
    let first = batch.first().ok_or_else(|| argument("cannot collate an empty batch"))?;
    let modality = first.modality;
    if let Some(bad) = batch.iter().find(|s| s.modality != modality) {
        return Err(argument(format!(
            "mixed modalities in batch: {} and {}",
            modality, bad.modality
        )));
    }
    let (rows, cols) = modality.snippet_shape();
    let lengths: Vec<usize> = batch.iter().map(SnippetSequence::len).collect();
    let max_len = *lengths.iter().max().unwrap();
    let mut data = Array4::zeros((batch.len(), max_len, rows, cols));
    for (i, s) in batch.iter().enumerate() {
        data.slice_mut(s![i, ..s.len(), .., ..]).assign(&s.snippets);
    }
    Ok(PaddedBatch {
        modality,
        data,
        lengths,
        passage_ids: batch.iter().map(|s| s.passage_id.clone()).collect(),
    })
}

/// Inverse of [`collate`]: strips the padding using the stored lengths.
pub fn uncollate(batch: &PaddedBatch) -> Vec<SnippetSequence> {
    batch
        .lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| SnippetSequence {
            modality: batch.modality,
            snippets: batch.data.slice(s![i, ..len, .., ..]).to_owned(),
            passage_id: batch.passage_ids[i].clone(),
        })
        .collect()
}

/// Stacks snippet matrices of one modality into a sequence.
pub fn stack_snippets(
    modality: Modality,
    snippets: &[Array2<f32>],
    passage_id: &str,
) -> Result<SnippetSequence> {
    let (r, c) = modality.snippet_shape();
    let mut out = Array3::zeros((snippets.len(), r, c));
    for (i, m) in snippets.iter().enumerate() {
        if m.dim() != (r, c) {
            return Err(argument(format!("snippet {i} has shape {:?}", m.dim())));
        }
        out.index_axis_mut(Axis(0), i).assign(m);
    }
    SnippetSequence::new(modality, out, passage_id.to_string())
}
