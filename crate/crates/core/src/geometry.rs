//! Fixed snippet geometry of both modalities.

use serde::{Deserialize, Serialize};

pub const SHEET_HEIGHT: usize = 160;
pub const SHEET_WIDTH: usize = 180;
pub const AUDIO_BINS: usize = 92;
/// One second of audio.
pub const AUDIO_FRAMES: usize = 20;
pub const FRAME_RATE: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Sheet,
    Audio,
}

impl Modality {
    /// Snippet shape as (rows, columns).
    pub const fn snippet_shape(self) -> (usize, usize) {
        match self {
            Modality::Sheet => (SHEET_HEIGHT, SHEET_WIDTH),
            Modality::Audio => (AUDIO_BINS, AUDIO_FRAMES),
        }
    }

    pub const fn other(self) -> Modality {
        match self {
            Modality::Sheet => Modality::Audio,
            Modality::Audio => Modality::Sheet,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            Modality::Sheet => "sheet",
            Modality::Audio => "audio",
        }
    }
}

/// Retrieval direction, named by query and candidate modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Audio query, sheet candidates.
    A2S,
    /// Sheet query, audio candidates.
    S2A,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::A2S, Direction::S2A];

    pub const fn query(self) -> Modality {
        match self {
            Direction::A2S => Modality::Audio,
            Direction::S2A => Modality::Sheet,
        }
    }

    pub const fn candidates(self) -> Modality {
        self.query().other()
    }

    pub const fn from_query(m: Modality) -> Direction {
        match m {
            Modality::Audio => Direction::A2S,
            Modality::Sheet => Direction::S2A,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            Direction::A2S => "A2S",
            Direction::S2A => "S2A",
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Direction {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A2S" => Ok(Direction::A2S),
            "S2A" => Ok(Direction::S2A),
            _ => Err(crate::error::argument(format!("unknown direction {s:?} (A2S or S2A)"))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
