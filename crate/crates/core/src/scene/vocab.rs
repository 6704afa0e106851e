//! Fixed object classes, colors, and the query token vocabulary.

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 12;
pub const NUM_ATTRIBUTES: usize = 4;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "chair", "table", "sofa", "lamp", "box", "bed", "desk", "shelf", "cabinet", "plant", "monitor",
    "bin",
];

pub const CLASS_PLURALS: [&str; NUM_CLASSES] = [
    "chairs", "tables", "sofas", "lamps", "boxes", "beds", "desks", "shelves", "cabinets",
    "plants", "monitors", "bins",
];

pub const COLOR_NAMES: [&str; NUM_ATTRIBUTES] = ["red", "green", "blue", "yellow"];

pub(crate) const COLOR_RGB: [[f64; 3]; NUM_ATTRIBUTES] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.2],
    [0.1, 0.2, 0.9],
    [0.9, 0.85, 0.1],
];

/// Nominal box extents (m) per class before per-object scaling.
pub(crate) const CLASS_EXTENTS: [[f64; 3]; NUM_CLASSES] = [
    [0.8, 0.8, 1.0],
    [1.4, 0.9, 0.8],
    [2.0, 0.9, 0.9],
    [0.8, 0.8, 1.6],
    [0.8, 0.8, 0.8],
    [2.0, 1.6, 0.8],
    [1.5, 0.8, 0.8],
    [1.2, 0.8, 1.8],
    [1.0, 0.8, 1.2],
    [0.8, 0.8, 1.2],
    [0.9, 0.8, 0.8],
    [0.8, 0.8, 0.9],
];

const FUNCTION_WORDS: [&str; 10] = [
    "the", "left", "right", "of", "in", "front", "behind", "nearest", "to", "near",
];

/// Token vocabulary: function words, singular and plural class names, colors.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let words = FUNCTION_WORDS
            .iter()
            .chain(CLASS_NAMES.iter())
            .chain(CLASS_PLURALS.iter())
            .chain(COLOR_NAMES.iter())
            .map(|s| s.to_string())
            .collect();
        Vocabulary { words }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::Data(format!("word {word:?} not in vocabulary")))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or(Error::UnknownToken {
                id,
                size: self.words.len(),
            })
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = tokens.iter().map(|&t| self.word(t)).collect();
        Ok(words?.join(" "))
    }

    /// Class named by the first class word of a query (the referenced class,
    /// as opposed to a spatial anchor that appears later).
    pub fn referenced_class(&self, tokens: &[usize]) -> Option<usize> {
        tokens.iter().find_map(|&t| {
            let w = self.words.get(t)?;
            CLASS_NAMES
                .iter()
                .position(|c| c == w)
                .or_else(|| CLASS_PLURALS.iter().position(|c| c == w))
        })
    }
}
