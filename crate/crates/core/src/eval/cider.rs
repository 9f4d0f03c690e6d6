//! Consensus-based n-gram similarity score for short answers.
//!
//! Definition (fixed so results are re-derivable):
//! - whitespace tokens, n-grams for n = 1..n_max (default 4);
//! - weight(g) = tf(g) · idf(g) with idf(g) = ln(N / max(df(g), 1)) where
//!   df counts the records whose *reference* contains g and N is the number
//!   of scored records;
//! - per record and n: cosine similarity between candidate and reference
//!   weighted vectors; if both norms are zero the similarity is 1, if
//!   exactly one is zero it is 0;
//! - n is skipped for a record when its reference has no n-grams of that
//!   order (shorter than n tokens); the record score is the mean over the
//!   applicable n;
//! - corpus score = 10 × mean over records.
//!
//! A corpus where every candidate equals its (non-empty) reference scores
//! exactly 10 regardless of content. Records with empty references are
//! skipped and counted.

use std::collections::BTreeMap;

use super::metrics::{normalize_answer, PredRecord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct CiderOutcome {
    pub score: f64,
    /// Records skipped for empty references.
    pub skipped: usize,
}

type Gram = Vec<String>;

fn ngrams(tokens: &[String], n: usize) -> BTreeMap<Gram, f64> {
    let mut out: BTreeMap<Gram, f64> = BTreeMap::new();
    if tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w.to_vec()).or_insert(0.0) += 1.0;
    }
    out
}

pub fn cider(preds: &[PredRecord], n_max: usize) -> Result<CiderOutcome> {
    if preds.len() < 2 {
        return Err(Error::Param(format!(
            "cider needs at least 2 records for corpus statistics, got {}",
            preds.len()
        )));
    }
    let mut skipped = 0usize;
    let records: Vec<(Vec<String>, Vec<String>)> = preds
        .iter()
        .filter_map(|p| {
            let ref_toks: Vec<String> = normalize_answer(&p.reference)
                .split_whitespace()
                .map(str::to_string)
                .collect();
            if ref_toks.is_empty() {
                skipped += 1;
                return None;
            }
            let cand_toks: Vec<String> = normalize_answer(&p.predicted)
                .split_whitespace()
                .map(str::to_string)
                .collect();
            Some((cand_toks, ref_toks))
        })
        .collect();
    if records.is_empty() {
        return Err(Error::Param("cider: every record had an empty reference".into()));
    }

    // Document frequency over references.
    let n_docs = records.len() as f64;
    let mut df: BTreeMap<Gram, f64> = BTreeMap::new();
    for (_, ref_toks) in &records {
        let mut seen: BTreeMap<Gram, ()> = BTreeMap::new();
        for n in 1..=n_max {
            for g in ngrams(ref_toks, n).into_keys() {
                seen.insert(g, ());
            }
        }
        for g in seen.into_keys() {
            *df.entry(g).or_insert(0.0) += 1.0;
        }
    }
    let idf = |g: &Gram| (n_docs / df.get(g).copied().unwrap_or(0.0).max(1.0)).ln();

    let mut total = 0.0;
    for (cand, reference) in &records {
        let mut sims = Vec::new();
        for n in 1..=n_max {
            if reference.len() < n {
                continue; // n not applicable for this reference
            }
            let cv: BTreeMap<Gram, f64> = ngrams(cand, n)
                .into_iter()
                .map(|(g, c)| {
                    let w = c * idf(&g);
                    (g, w)
                })
                .collect();
            let rv: BTreeMap<Gram, f64> = ngrams(reference, n)
                .into_iter()
                .map(|(g, c)| {
                    let w = c * idf(&g);
                    (g, w)
                })
                .collect();
            let nc = cv.values().map(|v| v * v).sum::<f64>().sqrt();
            let nr = rv.values().map(|v| v * v).sum::<f64>().sqrt();
            let sim = if nc == 0.0 && nr == 0.0 {
                1.0
            } else if nc == 0.0 || nr == 0.0 {
                0.0
            } else {
                let dot: f64 = cv
                    .iter()
                    .filter_map(|(g, v)| rv.get(g).map(|r| v * r))
                    .sum();
                dot / (nc * nr)
            };
            sims.push(sim);
        }
        total += sims.iter().sum::<f64>() / sims.len() as f64;
    }
    Ok(CiderOutcome {
        score: 10.0 * total / records.len() as f64,
        skipped,
    })
}
