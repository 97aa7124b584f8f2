//! Synthetic paired corpora: a latent event sequence rendered once as a
//! sheet-music strip and once as a log-magnitude spectrogram, plus the
//! on-disk layout used to exchange corpora with other tools.

mod events;
mod render;
mod store;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};
use crate::geometry::{AUDIO_BINS, AUDIO_FRAMES, FRAME_RATE, SHEET_HEIGHT, SHEET_WIDTH};

pub use events::{generate_event_sequence, generate_passage_events, Event, EventSequence};
pub use render::{render_audio, render_sheet, strong_alignment, Timbre};
pub use store::{
    build_corpus, load_corpus, rerender_split, CorpusConfig, CorpusManifest, PairRecord,
    TempoRendering, SCHEMA_VERSION,
};

/// Generator parameters. All ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub pitch_min: i32,
    pub pitch_max: i32,
    /// Melodies wander at most this many semitones from the piece register.
    pub register_span: i32,
    pub beats_min: f64,
    pub beats_max: f64,
    /// Forces an exact number of events instead of filling a beat budget.
    pub note_count: Option<usize>,
    pub durations: Vec<f64>,
    pub duration_weights: Vec<f64>,
    pub chord_prob: f64,
    pub tempo_bpm_min: f64,
    pub tempo_bpm_max: f64,
    pub pixels_per_beat: f64,
    pub staff_lines: bool,
    /// Audio renderings per training passage (the first is unaugmented).
    pub augment_factor: usize,
    pub tempo_aug_min: f64,
    pub tempo_aug_max: f64,
    /// Number of distinct timbres ("soundfonts") used for training audio.
    pub train_timbres: usize,
    pub passages_per_piece: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            pitch_min: 36,
            pitch_max: 96,
            register_span: 10,
            beats_min: 8.0,
            beats_max: 28.0,
            note_count: None,
            durations: vec![0.5, 1.0, 1.5, 2.0],
            duration_weights: vec![3.0, 4.0, 1.0, 2.0],
            chord_prob: 0.15,
            tempo_bpm_min: 80.0,
            tempo_bpm_max: 190.0,
            pixels_per_beat: 36.0,
            staff_lines: true,
            augment_factor: 8,
            tempo_aug_min: 0.9,
            tempo_aug_max: 1.1,
            train_timbres: 4,
            passages_per_piece: 1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: &str| Err(Error::Config(m.to_string()));
        if self.pitch_min < 21 || self.pitch_max > 108 || self.pitch_min > self.pitch_max {
            return cfg("pitch range must be a non-empty subrange of [21, 108]");
        }
        if self.register_span < 0 {
            return cfg("register_span must be non-negative");
        }
        if !(self.beats_min > 0.0 && self.beats_min <= self.beats_max) {
            return cfg("beat budget range must be positive and non-empty");
        }
        if self.note_count == Some(0) {
            return cfg("note_count must be at least 1");
        }
        if self.durations.is_empty()
            || self.durations.len() != self.duration_weights.len()
            || self.durations.iter().any(|d| !(*d > 0.0))
            || self.duration_weights.iter().any(|w| !(*w >= 0.0))
            || self.duration_weights.iter().sum::<f64>() <= 0.0
        {
            return cfg("durations must be positive with matching non-negative weights");
        }
        if !(0.0..=1.0).contains(&self.chord_prob) {
            return cfg("chord_prob must lie in [0, 1]");
        }
        if !(self.tempo_bpm_min > 0.0 && self.tempo_bpm_min <= self.tempo_bpm_max) {
            return cfg("tempo range must be positive and non-empty");
        }
        if !(self.pixels_per_beat > 0.0) {
            return cfg("pixels_per_beat must be positive");
        }
        if self.augment_factor == 0 || self.train_timbres == 0 || self.passages_per_piece == 0 {
            return cfg("augment_factor, train_timbres and passages_per_piece must be >= 1");
        }
        if !(self.tempo_aug_min > 0.0 && self.tempo_aug_min <= self.tempo_aug_max) {
            return cfg("tempo augmentation range must be positive and non-empty");
        }
        Ok(())
    }
}

/// One system of sheet music: a 160-row strip, ink = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SheetPassage {
    pub pixels: Array2<f32>,
    pub passage_id: String,
    pub piece_id: String,
}

impl SheetPassage {
    pub fn new(pixels: Array2<f32>, passage_id: String, piece_id: String) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h != SHEET_HEIGHT {
            return Err(argument(format!("sheet height {h}, expected {SHEET_HEIGHT}")));
        }
        if w < SHEET_WIDTH {
            return Err(argument(format!("sheet width {w} < snippet width {SHEET_WIDTH}")));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(argument("sheet pixels must lie in [0, 1]"));
        }
        Ok(Self {
            pixels,
            passage_id,
            piece_id,
        })
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }
}

/// One passage of audio as a 92-bin log-magnitude spectrogram at 20 fps.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioPassage {
    pub spectrogram: Array2<f32>,
    pub passage_id: String,
    pub piece_id: String,
}

impl AudioPassage {
    pub fn new(spectrogram: Array2<f32>, passage_id: String, piece_id: String) -> Result<Self> {
        let (bins, frames) = spectrogram.dim();
        if bins != AUDIO_BINS {
            return Err(argument(format!("spectrogram has {bins} bins, expected {AUDIO_BINS}")));
        }
        if frames < AUDIO_FRAMES {
            return Err(argument(format!("spectrogram has {frames} frames, need >= {AUDIO_FRAMES}")));
        }
        if spectrogram.iter().any(|v| !v.is_finite()) {
            return Err(argument("spectrogram contains non-finite values"));
        }
        Ok(Self {
            spectrogram,
            passage_id,
            piece_id,
        })
    }

    pub fn frames(&self) -> usize {
        self.spectrogram.ncols()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frames() as f64 / FRAME_RATE
    }
}

/// Note-level correspondence between the two renderings of one onset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentPoint {
    pub event: usize,
    pub sheet_x: usize,
    pub frame: usize,
}

/// A weakly aligned pair: only the passage boundaries are known to match.
#[derive(Debug, Clone, PartialEq)]
pub struct PassagePair {
    pub sheet: SheetPassage,
    pub audio: AudioPassage,
    pub strong_alignment: Option<Vec<AlignmentPoint>>,
}

impl PassagePair {
    pub fn new(
        sheet: SheetPassage,
        audio: AudioPassage,
        strong_alignment: Option<Vec<AlignmentPoint>>,
    ) -> Result<Self> {
        if sheet.passage_id != audio.passage_id {
            return Err(argument(format!(
                "passage ids differ: sheet {} vs audio {}",
                sheet.passage_id, audio.passage_id
            )));
        }
        if let Some(points) = &strong_alignment {
            for p in points {
                if p.sheet_x >= sheet.width() || p.frame >= audio.frames() {
                    return Err(argument(format!(
                        "alignment point {p:?} outside passage {}",
                        sheet.passage_id
                    )));
                }
            }
        }
        Ok(Self {
            sheet,
            audio,
            strong_alignment,
        })
    }

    pub fn passage_id(&self) -> &str {
        &self.sheet.passage_id
    }
}

/// Cuts content-corresponding snippet pairs around every aligned onset.
///
/// Windows are centred on the anchor and zero-padded where they extend past
/// the passage.
pub fn extract_snippet_pairs(pair: &PassagePair) -> Result<Vec<(Array2<f32>, Array2<f32>)>> {
    let points = pair.strong_alignment.as_ref().ok_or_else(|| {
        Error::Unsupported(format!(
            "passage {} carries no strong alignment",
            pair.passage_id()
        ))
    })?;
    Ok(points
        .iter()
        .map(|p| {
            (
                centered_window(&pair.sheet.pixels, p.sheet_x, SHEET_WIDTH),
                centered_window(&pair.audio.spectrogram, p.frame, AUDIO_FRAMES),
            )
        })
        .collect())
}

fn centered_window(m: &Array2<f32>, center: usize, width: usize) -> Array2<f32> {
    let mut out = Array2::zeros((m.nrows(), width));
    let start = center as isize - (width / 2) as isize;
    let lo = start.max(0);
    let hi = (start + width as isize).min(m.ncols() as isize);
    if lo < hi {
        let dst_lo = (lo - start) as usize;
        let dst_hi = (hi - start) as usize;
        out.slice_mut(s![.., dst_lo..dst_hi])
            .assign(&m.slice(s![.., lo as usize..hi as usize]));
    }
    out
}
