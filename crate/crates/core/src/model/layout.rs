use std::ops::Range;

use serde::{Deserialize, Serialize};

/// What a sequence position holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionKind {
    /// Start or separator marker; excluded from all attribution sums.
    Marker,
    Text,
    Image,
}

/// Position map of one encoded sample:
/// `[start-marker, text..., separator, regions...]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub start_marker: usize,
    pub text: Range<usize>,
    pub separator: usize,
    pub image: Range<usize>,
    pub total: usize,
}

impl SequenceLayout {
    pub fn new(n_tokens: usize, n_regions: usize) -> Self {
        let text = 1..1 + n_tokens;
        let separator = text.end;
        let image = separator + 1..separator + 1 + n_regions;
        let total = image.end;
        SequenceLayout {
            start_marker: 0,
            text,
            separator,
            image,
            total,
        }
    }

    pub fn kind(&self, pos: usize) -> PositionKind {
        if pos == self.start_marker || pos == self.separator {
            PositionKind::Marker
        } else if self.text.contains(&pos) {
            PositionKind::Text
        } else {
            debug_assert!(self.image.contains(&pos));
            PositionKind::Image
        }
    }

    pub fn is_marker(&self, pos: usize) -> bool {
        self.kind(pos) == PositionKind::Marker
    }

    pub fn n_tokens(&self) -> usize {
        self.text.len()
    }

    pub fn n_regions(&self) -> usize {
        self.image.len()
    }
}
