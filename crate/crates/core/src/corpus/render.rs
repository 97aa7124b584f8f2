use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{AlignmentPoint, EventSequence};
use crate::error::{argument, Result};
use crate::geometry::{AUDIO_BINS, AUDIO_FRAMES, FRAME_RATE, SHEET_HEIGHT, SHEET_WIDTH};
use crate::seed;

const LOWEST_PITCH: f64 = 21.0;
const HIGHEST_PITCH: f64 = 108.0;
const TOP_ROW: f64 = 10.0;
const BOTTOM_ROW: f64 = 150.0;
const HARMONICS: usize = 5;
const LOG_GAIN: f64 = 50.0;

/// Row of a note-head centre; higher pitches sit higher on the page.
pub(crate) fn pitch_row(pitch: i32) -> f64 {
    let t = (f64::from(pitch) - LOWEST_PITCH) / (HIGHEST_PITCH - LOWEST_PITCH);
    BOTTOM_ROW - t * (BOTTOM_ROW - TOP_ROW)
}

fn head_offset(pixels_per_beat: f64) -> f64 {
    (pixels_per_beat / 4.0).min(12.0)
}

/// Column of a note-head centre.
pub(crate) fn onset_column(onset_beats: f64, pixels_per_beat: f64) -> f64 {
    onset_beats * pixels_per_beat + head_offset(pixels_per_beat)
}

pub(crate) fn sheet_width(ev: &EventSequence, pixels_per_beat: f64) -> usize {
    let w = (ev.total_beats() * pixels_per_beat).ceil() as usize;
    w.max(SHEET_WIDTH)
}

/// Engraves the event sequence. The result does not depend on tempo.
pub fn render_sheet(
    ev: &EventSequence,
    pixels_per_beat: f64,
    staff_lines: bool,
    style_seed: u64,
) -> Array2<f32> {
    let width = sheet_width(ev, pixels_per_beat);
    let mut img = Array2::<f32>::zeros((SHEET_HEIGHT, width));
    let mut rng = seed::stream(style_seed, "style");
    let radius: f64 = rng.random_range(3.2..4.2);
    let stem_len: f64 = rng.random_range(16.0..22.0);

    if staff_lines {
        for pitch in [64, 67, 71, 74, 77] {
            let row = pitch_row(pitch).round() as usize;
            img.row_mut(row).fill(0.25);
        }
    }

    let middle = pitch_row(71);
    for e in &ev.events {
        let cx = onset_column(e.onset_beats, pixels_per_beat);
        let cy = pitch_row(e.pitch);
        let hollow = e.duration_beats >= 2.0;
        draw_head(&mut img, cx, cy, radius, hollow);
        // stems point away from the middle line
        if cy > middle {
            draw_stem(&mut img, cx + radius - 0.5, cy - stem_len, cy);
        } else {
            draw_stem(&mut img, cx - radius + 0.5, cy, cy + stem_len);
        }
    }
    img
}

fn draw_head(img: &mut Array2<f32>, cx: f64, cy: f64, r: f64, hollow: bool) {
    let (h, w) = img.dim();
    let r0 = (cy - r - 2.0).floor().max(0.0) as usize;
    let r1 = ((cy + r + 2.0).ceil() as usize).min(h - 1);
    let c0 = (cx - r - 2.0).floor().max(0.0) as usize;
    let c1 = ((cx + r + 2.0).ceil() as usize).min(w - 1);
    for row in r0..=r1 {
        for col in c0..=c1 {
            // slightly elliptical heads
            let dx = (col as f64 - cx) / 1.25;
            let dy = row as f64 - cy;
            let dist = (dx * dx + dy * dy).sqrt();
            let ink = if hollow {
                1.0 - ((dist - (r - 1.0)).abs() - 0.6).max(0.0)
            } else {
                r + 0.5 - dist
            };
            let ink = ink.clamp(0.0, 1.0) as f32;
            let px = &mut img[[row, col]];
            *px = px.max(ink);
        }
    }
}

fn draw_stem(img: &mut Array2<f32>, x: f64, top: f64, bottom: f64) {
    let (h, w) = img.dim();
    let col = x.round();
    if col < 0.0 || col as usize >= w {
        return;
    }
    let col = col as usize;
    let r0 = top.round().max(0.0) as usize;
    let r1 = (bottom.round().max(0.0) as usize).min(h - 1);
    for row in r0..=r1 {
        img[[row, col]] = 1.0;
    }
}

/// Harmonic profile of one synthetic instrument.
#[derive(Debug, Clone, PartialEq)]
pub struct Timbre {
    pub harmonic_gains: [f64; HARMONICS],
    pub decay_seconds: f64,
}

impl Timbre {
    pub fn from_seed(timbre_seed: u64) -> Self {
        let mut rng = seed::stream(timbre_seed, "timbre");
        let mut harmonic_gains = [0.0; HARMONICS];
        for (h, g) in harmonic_gains.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *g = (0.35 * z).exp() / (h + 1) as f64;
        }
        let decay_seconds = rng.random_range(0.3..1.2);
        Self {
            harmonic_gains,
            decay_seconds,
        }
    }
}

fn seconds_per_beat(ev: &EventSequence, tempo_ratio: f64) -> f64 {
    60.0 / (ev.tempo_bpm * tempo_ratio)
}

fn beats_to_frame(beats: f64, spb: f64) -> usize {
    (beats * spb * FRAME_RATE).round() as usize
}

pub(crate) fn frame_count(ev: &EventSequence, tempo_ratio: f64) -> usize {
    let t = (FRAME_RATE * ev.total_beats() * seconds_per_beat(ev, tempo_ratio)).round() as usize;
    t.max(AUDIO_FRAMES)
}

/// Synthesises a log-magnitude spectrogram, normalised so silence is 0 and
/// the loudest cell is 1.
pub fn render_audio(ev: &EventSequence, tempo_ratio: f64, timbre_seed: u64) -> Result<Array2<f32>> {
    if !(tempo_ratio > 0.0) || !tempo_ratio.is_finite() {
        return Err(argument(format!("tempo ratio must be positive, got {tempo_ratio}")));
    }
    let timbre = Timbre::from_seed(timbre_seed);
    let frames = frame_count(ev, tempo_ratio);
    let spb = seconds_per_beat(ev, tempo_ratio);
    let mut mag = Array2::<f64>::zeros((AUDIO_BINS, frames));

    for e in &ev.events {
        let start = beats_to_frame(e.onset_beats, spb).min(frames - 1);
        let len = beats_to_frame(e.duration_beats, spb).max(1);
        let end = (start + len).min(frames);
        for (h, gain) in timbre.harmonic_gains.iter().enumerate() {
            let bin = f64::from(e.pitch) - LOWEST_PITCH + 12.0 * ((h + 1) as f64).log2();
            let lo = bin.floor();
            let frac = bin - lo;
            let spread = [(lo - 1.0, 0.25 * (1.0 - frac)), (lo, 1.0 - frac), (lo + 1.0, frac), (lo + 2.0, 0.25 * frac)];
            for t in start..end {
                let env = (-((t - start) as f64) / (timbre.decay_seconds * FRAME_RATE)).exp();
                for (b, w) in spread {
                    if b >= 0.0 && (b as usize) < AUDIO_BINS && w > 0.0 {
                        mag[[b as usize, t]] += gain * env * w;
                    }
                }
            }
        }
    }

    let logged = mag.mapv(|m| (LOG_GAIN * m).ln_1p());
    let peak = logged.iter().cloned().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    Ok(logged.mapv(|v| (v * scale) as f32))
}

/// One alignment point per distinct onset, pointing at its note head and
/// onset frame.
pub fn strong_alignment(
    ev: &EventSequence,
    pixels_per_beat: f64,
    tempo_ratio: f64,
) -> Vec<AlignmentPoint> {
    let width = sheet_width(ev, pixels_per_beat);
    let frames = frame_count(ev, tempo_ratio);
    let spb = seconds_per_beat(ev, tempo_ratio);
    let mut out: Vec<AlignmentPoint> = Vec::new();
    let mut last_onset = f64::NAN;
    for (i, e) in ev.events.iter().enumerate() {
        if e.onset_beats == last_onset {
            continue;
        }
        last_onset = e.onset_beats;
        let x = onset_column(e.onset_beats, pixels_per_beat).round() as usize;
        out.push(AlignmentPoint {
            event: i,
            sheet_x: x.min(width - 1),
            frame: beats_to_frame(e.onset_beats, spb).min(frames - 1),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_event_sequence, Event, GeneratorConfig};

    fn one_note(onset: f64, pitch: i32) -> EventSequence {
        EventSequence::new(
            vec![Event { onset_beats: onset, pitch, duration_beats: 1.0 }],
            120.0,
            0,
        )
        .unwrap()
    }

    #[test]
    fn sheet_ignores_tempo() {
        let mut ev = generate_event_sequence(&GeneratorConfig::default(), 5).unwrap();
        let a = render_sheet(&ev, 36.0, true, 9);
        ev.tempo_bpm *= 1.7;
        let b = render_sheet(&ev, 36.0, true, 9);
        assert_eq!(a, b);
    }

    #[test]
    fn single_note_has_ink_in_first_window() {
        let img = render_sheet(&one_note(0.0, 64), 36.0, false, 1);
        assert_eq!(img.dim(), (160, 180));
        let ink: f32 = img.iter().sum();
        assert!(ink > 0.0);
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    fn head_center_row(img: &Array2<f32>) -> f64 {
        // mean row of fully inked pixels in the head columns, excluding stems
        let mut sum = 0.0;
        let mut n = 0.0;
        for ((r, c), v) in img.indexed_iter() {
            if *v > 0.99 && (9..=15).contains(&c) {
                sum += r as f64;
                n += 1.0;
            }
        }
        sum / n
    }

    #[test]
    fn higher_pitch_sits_higher() {
        let hi = render_sheet(&one_note(0.0, 80), 36.0, false, 1);
        let lo = render_sheet(&one_note(0.0, 50), 36.0, false, 1);
        assert!(pitch_row(80) < pitch_row(50));
        assert!(head_center_row(&hi) < head_center_row(&lo));
    }

    #[test]
    fn frame_count_scales_with_tempo_ratio() {
        let ev = generate_event_sequence(&GeneratorConfig::default(), 11).unwrap();
        let t1 = render_audio(&ev, 1.0, 3).unwrap().ncols() as i64;
        let t2 = render_audio(&ev, 2.0, 3).unwrap().ncols() as i64;
        assert!((t1 - 2 * t2).abs() <= 1, "{t1} vs {t2}");
    }

    #[test]
    fn silence_before_onset_is_at_floor() {
        let ev = one_note(2.0, 60);
        let spec = render_audio(&ev, 1.0, 4).unwrap();
        // 2 beats at 120 bpm = 1 s = 20 frames
        assert_eq!(spec.ncols(), 30);
        assert!(spec.columns().into_iter().take(20).all(|c| c.iter().all(|v| *v == 0.0)));
        assert!(spec.column(20).iter().any(|v| *v > 0.0));
        assert!(spec.iter().cloned().fold(0.0f32, f32::max) == 1.0);
    }

    #[test]
    fn timbre_changes_magnitudes_not_support() {
        let ev = generate_event_sequence(&GeneratorConfig::default(), 2).unwrap();
        let a = render_audio(&ev, 1.0, 100).unwrap();
        let b = render_audio(&ev, 1.0, 200).unwrap();
        let mask = |m: &Array2<f32>| {
            m.columns().into_iter().map(|c| c.iter().any(|v| *v > 0.0)).collect::<Vec<_>>()
        };
        assert_eq!(mask(&a), mask(&b));
        assert_ne!(a, b);
    }

    #[test]
    fn nonpositive_tempo_ratio_is_rejected() {
        let ev = one_note(0.0, 60);
        assert!(render_audio(&ev, 0.0, 1).is_err());
        assert!(render_audio(&ev, -1.0, 1).is_err());
    }

    #[test]
    fn alignment_points_lie_inside_both_renderings() {
        let cfg = GeneratorConfig::default();
        for s in 0..20 {
            let ev = generate_event_sequence(&cfg, s).unwrap();
            let w = render_sheet(&ev, 36.0, true, s).ncols();
            let t = render_audio(&ev, 1.3, s).unwrap().ncols();
            for p in strong_alignment(&ev, 36.0, 1.3) {
                assert!(p.sheet_x < w && p.frame < t);
            }
        }
    }
}
