//! Closed vocabulary shared by questions and answers.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

/// Every token the templates can emit, specials first. The decoder's output
/// space is exactly this list.
const TOKENS: &[&str] = &[
    "<pad>",
    "<s>",
    "</s>",
    "<unk>",
    // answers
    "yes",
    "no",
    "0",
    "1",
    "2",
    "3",
    "4",
    "5",
    "6",
    "7",
    "8",
    "north-west",
    "north-east",
    "south-west",
    "south-east",
    // question words
    "is",
    "there",
    "a",
    "vehicle",
    "pedestrian",
    "small-vehicle",
    "how",
    "many",
    "vehicles",
    "pedestrians",
    "small-vehicles",
    "which",
    "quadrant",
    "has",
    "the",
    "red",
    "blue",
    "green",
    "white",
    "yellow",
    "orange",
    "are",
    "more",
    "than",
    "it",
    "night",
    "foggy",
    "any",
    "violating",
    "rule",
    "in",
    "crosswalk",
    "going",
    "wrong",
    "way",
    "jaywalking",
    "do",
    "two",
    "images",
    "match",
    "does",
    "scene",
    "need",
    "attention",
];

#[derive(Clone, Debug)]
pub struct Vocab {
    ids: HashMap<&'static str, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocab {
    pub fn standard() -> Self {
        let ids = TOKENS.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        Vocab { ids }
    }

    pub fn len(&self) -> usize {
        TOKENS.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::Encoding(format!("token {token:?} not in vocabulary")))
    }

    pub fn token(&self, id: usize) -> Result<&'static str> {
        TOKENS
            .get(id)
            .copied()
            .ok_or_else(|| Error::Encoding(format!("id {id} out of vocabulary ({})", TOKENS.len())))
    }

    /// Whitespace tokenization into ids; unknown words are an error (the
    /// template language is closed).
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let toks: Result<Vec<&str>> = ids.iter().map(|&i| self.token(i)).collect();
        Ok(toks?.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{generate_scene, DifficultyParams};
    use crate::data::{generate_qa, Condition};
    use crate::tensor::SeededRng;

    #[test]
    fn vocabulary_fits_the_model_width() {
        assert!(TOKENS.len() <= 64, "vocab has {} tokens", TOKENS.len());
        // no duplicates
        let v = Vocab::standard();
        assert_eq!(v.ids.len(), TOKENS.len());
    }

    #[test]
    fn every_template_token_is_known() {
        let v = Vocab::standard();
        let d = DifficultyParams::default();
        for seed in 0..40u64 {
            let mut rng = SeededRng::new(seed);
            let cond = match seed % 3 {
                0 => Condition::Day,
                1 => Condition::Night,
                _ => Condition::Fog,
            };
            let scene = generate_scene(seed * 3, &mut rng, cond, &d).unwrap();
            for qa in generate_qa(&scene, &mut rng) {
                v.encode(&qa.question).unwrap_or_else(|e| panic!("{}: {e}", qa.question));
                v.encode(&qa.answer).unwrap_or_else(|e| panic!("{}: {e}", qa.answer));
            }
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocab::standard();
        let ids = v.encode("is there a vehicle").unwrap();
        assert_eq!(v.decode(&ids).unwrap(), "is there a vehicle");
        assert!(v.encode("unknown-word").is_err());
    }
}
