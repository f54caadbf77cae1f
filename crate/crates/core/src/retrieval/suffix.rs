use serde::{Deserialize, Serialize};

use crate::geometry::{select_cell_indices, GridLayout, LayoutKind, Rect, SelectionMode, STATIC5_CELL_IDS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuffixLength {
    Short,
    Long,
}

/// Location phrases appended to the query text, one per five-cell region in
/// layout order (top-left, top-right, bottom-left, bottom-right, center).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuffixPhrases {
    pub short: [String; 5],
    pub long: [String; 5],
}

impl Default for SuffixPhrases {
    fn default() -> Self {
        let short = [
            "in the upper left",
            "in the upper right",
            "in the lower left",
            "in the lower right",
            "in the center",
        ];
        let long = [
            "in the upper left part of the image",
            "in the upper right part of the image",
            "in the lower left part of the image",
            "in the lower right part of the image",
            "in the center of the image",
        ];
        Self {
            short: short.map(String::from),
            long: long.map(String::from),
        }
    }
}

impl SuffixPhrases {
    /// Phrase for the five-cell region with the highest IoU against `bbox`.
    pub fn phrase_for(&self, bbox: &Rect, length: SuffixLength) -> &str {
        let grid = GridLayout::build(LayoutKind::Static5);
        let idx = select_cell_indices(&grid, bbox, SelectionMode::ArgmaxIou)[0];
        debug_assert_eq!(grid.cells[idx].id, STATIC5_CELL_IDS[idx]);
        match length {
            SuffixLength::Short => &self.short[idx],
            SuffixLength::Long => &self.long[idx],
        }
    }
}

/// `text` followed by a space and the location phrase for `bbox`.
pub fn append_suffix(text: &str, bbox: &Rect, length: SuffixLength, phrases: &SuffixPhrases) -> String {
    format!("{} {}", text.trim_end(), phrases.phrase_for(bbox, length))
}
