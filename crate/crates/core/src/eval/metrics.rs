//! Exact-match accuracy with per-type and per-condition breakdowns.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Condition, QType};
use crate::error::{Error, Result};

/// One scored prediction. The reference comes from dataset ground truth.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredRecord {
    pub scene_id: u64,
    pub qtype: QType,
    pub condition: Condition,
    pub question: String,
    pub reference: String,
    pub predicted: String,
}

/// Lowercase, trim, collapse internal whitespace.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Overall accuracy in percent (micro, exact correct/total).
    pub oa: f64,
    /// Average accuracy: unweighted mean over question types present.
    pub aa: f64,
    pub per_qtype: BTreeMap<String, f64>,
    pub per_condition: BTreeMap<String, f64>,
    pub cider: f64,
    pub n_records: usize,
    pub n_correct: usize,
    pub cider_skipped: usize,
}

/// Accuracy fields only (no consensus score).
pub fn accuracy(preds: &[PredRecord]) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::Param("accuracy: no prediction records".into()));
    }
    let mut correct = 0usize;
    let mut per_type: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut per_cond: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for p in preds {
        let ok = normalize_answer(&p.reference) == normalize_answer(&p.predicted);
        if ok {
            correct += 1;
        }
        let t = per_type.entry(p.qtype.as_str().to_string()).or_default();
        t.0 += ok as usize;
        t.1 += 1;
        let c = per_cond.entry(p.condition.as_str().to_string()).or_default();
        c.0 += ok as usize;
        c.1 += 1;
    }
    let pct = |(c, n): (usize, usize)| 100.0 * c as f64 / n as f64;
    let per_qtype: BTreeMap<String, f64> = per_type.into_iter().map(|(k, v)| (k, pct(v))).collect();
    let per_condition: BTreeMap<String, f64> = per_cond.into_iter().map(|(k, v)| (k, pct(v))).collect();
    let aa = per_qtype.values().sum::<f64>() / per_qtype.len() as f64;
    Ok(MetricsReport {
        oa: 100.0 * correct as f64 / preds.len() as f64,
        aa,
        per_qtype,
        per_condition,
        cider: 0.0,
        n_records: preds.len(),
        n_correct: correct,
        cider_skipped: 0,
    })
}

/// Accuracy plus the corpus consensus score in one report.
pub fn evaluate_records(preds: &[PredRecord]) -> Result<MetricsReport> {
    let mut report = accuracy(preds)?;
    if preds.len() >= 2 {
        let outcome = super::cider(preds, 4)?;
        report.cider = outcome.score;
        report.cider_skipped = outcome.skipped;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(qtype: QType, c: Condition, r: &str, p: &str) -> PredRecord {
        PredRecord {
            scene_id: 0,
            qtype,
            condition: c,
            question: "q".into(),
            reference: r.into(),
            predicted: p.into(),
        }
    }

    #[test]
    fn all_correct_and_all_wrong() {
        let preds: Vec<PredRecord> = (0..5)
            .map(|_| rec(QType::Presence, Condition::Day, "yes", "Yes "))
            .collect();
        let m = accuracy(&preds).unwrap();
        assert_eq!(m.oa, 100.0);
        assert_eq!(m.aa, 100.0);

        let wrong: Vec<PredRecord> = (0..4)
            .map(|_| rec(QType::Count, Condition::Day, "3", "4"))
            .collect();
        let m = accuracy(&wrong).unwrap();
        assert_eq!(m.oa, 0.0);
    }

    #[test]
    fn micro_macro_difference() {
        // qtype A: 9 correct of 9; qtype B: 0 of 1 → OA 90, AA 50.
        let mut preds = Vec::new();
        for _ in 0..9 {
            preds.push(rec(QType::Presence, Condition::Day, "yes", "yes"));
        }
        preds.push(rec(QType::Count, Condition::Day, "2", "3"));
        let m = accuracy(&preds).unwrap();
        assert!((m.oa - 90.0).abs() < 1e-12);
        assert!((m.aa - 50.0).abs() < 1e-12);
    }

    #[test]
    fn order_invariance_and_bounds() {
        let mut preds = vec![
            rec(QType::Presence, Condition::Day, "yes", "yes"),
            rec(QType::Count, Condition::Night, "2", "3"),
            rec(QType::Deduce, Condition::Fog, "no", "no"),
        ];
        let a = accuracy(&preds).unwrap();
        preds.reverse();
        let b = accuracy(&preds).unwrap();
        assert_eq!(a.oa, b.oa);
        assert!(a.per_qtype.values().all(|&v| (0.0..=100.0).contains(&v)));
        let min = a.per_qtype.values().cloned().fold(f64::INFINITY, f64::min);
        let max = a.per_qtype.values().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(a.aa >= min - 1e-12 && a.aa <= max + 1e-12);
    }

    #[test]
    fn empty_input_is_error() {
        assert!(accuracy(&[]).is_err());
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_answer("  YES  "), "yes");
        assert_eq!(normalize_answer("North-West"), "north-west");
        assert_eq!(normalize_answer("a   b\tc"), "a b c");
    }
}
