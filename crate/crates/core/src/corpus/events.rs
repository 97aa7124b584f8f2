use rand::Rng as _;
use rand::distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};

use super::GeneratorConfig;
use crate::error::{argument, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub onset_beats: f64,
    pub pitch: i32,
    pub duration_beats: f64,
}

/// The latent score both modalities are rendered from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    pub events: Vec<Event>,
    pub tempo_bpm: f64,
    pub seed: u64,
}

impl EventSequence {
    pub fn new(events: Vec<Event>, tempo_bpm: f64, seed: u64) -> Result<Self> {
        if events.is_empty() {
            return Err(argument("event sequence needs at least one event"));
        }
        if !(tempo_bpm > 0.0) {
            return Err(argument("tempo must be positive"));
        }
        for w in events.windows(2) {
            if w[1].onset_beats < w[0].onset_beats {
                return Err(argument("events must be sorted by onset"));
            }
        }
        for e in &events {
            if !(21..=108).contains(&e.pitch) || !(e.duration_beats > 0.0) || !(e.onset_beats >= 0.0) {
                return Err(argument(format!("invalid event {e:?}")));
            }
        }
        Ok(Self {
            events,
            tempo_bpm,
            seed,
        })
    }

    /// Notated length: the latest note release, in beats.
    pub fn total_beats(&self) -> f64 {
        self.events
            .iter()
            .map(|e| e.onset_beats + e.duration_beats)
            .fold(0.0, f64::max)
    }
}

/// Draws one passage. Tempo and register come from `seed`.
pub fn generate_event_sequence(config: &GeneratorConfig, seed: u64) -> Result<EventSequence> {
    generate_passage_events(config, seed, 0)
}

/// Draws passage `index` of the piece identified by `piece_seed`.
///
/// Passages of one piece share tempo and register; their melodies are
/// independent.
pub fn generate_passage_events(
    config: &GeneratorConfig,
    piece_seed: u64,
    index: usize,
) -> Result<EventSequence> {
    config.validate()?;
    let mut piece_rng = seed::stream(piece_seed, "piece");
    let log_tempo = piece_rng.random_range(config.tempo_bpm_min.ln()..=config.tempo_bpm_max.ln());
    let tempo_bpm = log_tempo.exp();
    let lo = config.pitch_min;
    let hi = config.pitch_max;
    let center_lo = (lo + config.register_span).min(hi);
    let center_hi = (hi - config.register_span).max(center_lo);
    let center = piece_rng.random_range(center_lo..=center_hi);
    let reg_lo = (center - config.register_span).max(lo);
    let reg_hi = (center + config.register_span).min(hi);

    let passage_seed = seed::derive_index(piece_seed, index as u64);
    let mut rng = seed::stream(passage_seed, "events");
    let budget = rng.random_range(config.beats_min..=config.beats_max);
    let durations = WeightedIndex::new(&config.duration_weights)
        .map_err(|e| crate::error::config(format!("duration weights: {e}")))?;

    let mut events = Vec::new();
    let mut onset = 0.0;
    let mut pitch = rng.random_range(reg_lo..=reg_hi);
    loop {
        if let Some(n) = config.note_count {
            if events.len() >= n {
                break;
            }
        } else if onset >= budget {
            break;
        }
        let dur = config.durations[durations.sample(&mut rng)];
        events.push(Event {
            onset_beats: onset,
            pitch,
            duration_beats: dur,
        });
        let room = config.note_count.map_or(true, |n| events.len() < n);
        if room && rng.random_bool(config.chord_prob) {
            let upper = (pitch + rng.random_range(3..=7)).min(hi);
            if upper != pitch {
                events.push(Event {
                    onset_beats: onset,
                    pitch: upper,
                    duration_beats: dur,
                });
            }
        }
        onset += dur;
        let step = rng.random_range(-4..=4);
        pitch = (pitch + step).clamp(reg_lo, reg_hi);
    }
    EventSequence::new(events, tempo_bpm, passage_seed)
}
