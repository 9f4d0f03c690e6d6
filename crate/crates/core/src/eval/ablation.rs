//! Train-from-scratch ablation matrix over module flags, fusion modes and
//! input modalities, with directional ordering checks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::evaluate_records;
use super::report::RunRow;
use crate::data::{SceneSample, Vocab};
use crate::error::{Error, Result};
use crate::memory::{build_memory, MemoryBank};
use crate::model::{
    encode_dataset, evaluate, train, BackboneStub, EncodedDataset, FusionMode, Modality,
    ModelConfig, ModelState, TrainSchedule,
};
use crate::pgke::BankIndex;
use crate::tensor::SeededRng;

pub const CELL_ADD_BASELINE: &str = "exp1-baseline-add";
pub const CELL_PGKE_ONLY: &str = "exp2-pgke";
pub const CELL_QASC_ONLY: &str = "exp3-qasc";
pub const CELL_FULL: &str = "exp4-full";
pub const CELL_OPT_ONLY: &str = "opt-only";
pub const CELL_TIR_ONLY: &str = "tir-only";
pub const CELL_CONCAT: &str = "concat-project";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellSpec {
    pub id: String,
    pub modality: Modality,
    pub fusion: FusionMode,
    pub pgke: bool,
    pub qasc: bool,
}

impl CellSpec {
    pub fn new(id: &str, modality: Modality, fusion: FusionMode, pgke: bool, qasc: bool) -> Self {
        CellSpec {
            id: id.to_string(),
            modality,
            fusion,
            pgke,
            qasc,
        }
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            modality: self.modality,
            fusion: self.fusion,
            pgke: self.pgke,
            qasc: self.qasc,
            ..*base
        }
    }
}

/// The module-isolation table (element-wise baseline, each module alone,
/// both) plus the fusion/modality comparison rows.
pub fn paper_tables_cells() -> Vec<CellSpec> {
    vec![
        CellSpec::new(CELL_ADD_BASELINE, Modality::Mul, FusionMode::Add, false, false),
        CellSpec::new(CELL_PGKE_ONLY, Modality::Mul, FusionMode::Add, true, false),
        CellSpec::new(CELL_QASC_ONLY, Modality::Mul, FusionMode::SeqConcat, false, true),
        CellSpec::new(CELL_FULL, Modality::Mul, FusionMode::SeqConcat, true, true),
        CellSpec::new(CELL_OPT_ONLY, Modality::Opt, FusionMode::SeqConcat, false, false),
        CellSpec::new(CELL_TIR_ONLY, Modality::Tir, FusionMode::SeqConcat, false, false),
        CellSpec::new(CELL_CONCAT, Modality::Mul, FusionMode::ConcatProject, false, false),
    ]
}

/// Shared per-matrix state: one memory bank and one encoded feature cache
/// serve every cell and seed (the frozen backbone is common to all runs).
pub struct PreparedData {
    pub bank: MemoryBank,
    pub index: BankIndex,
    pub train: EncodedDataset,
    pub test: EncodedDataset,
    pub vocab: Vocab,
}

pub fn prepare_data(
    train_split: &[SceneSample],
    test_split: &[SceneSample],
    base: &ModelConfig,
    tau_build: f64,
    jitter: f64,
    bank_seed: u64,
) -> Result<PreparedData> {
    let backbone = BackboneStub::new(
        base.d_model,
        base.patch,
        base.img_h,
        base.img_w,
        base.vocab_size,
        base.backbone_seed,
    )?;
    let vocab = Vocab::standard();
    let rng = SeededRng::new(bank_seed);
    let bank = build_memory(train_split, &backbone, tau_build, &rng, jitter)?;
    let index = BankIndex::build(&bank)?;
    let train = encode_dataset(train_split, &backbone, &vocab, Some(&bank), base.t_max)?;
    let test = encode_dataset(test_split, &backbone, &vocab, Some(&bank), base.t_max)?;
    Ok(PreparedData {
        bank,
        index,
        train,
        test,
        vocab,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell_id: String,
    pub n: usize,
    pub mean_oa: f64,
    pub std_oa: f64,
    pub mean_aa: f64,
    pub mean_cider: f64,
    pub mean_condition: std::collections::BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<RunRow>,
    /// (cell id, seed, error) for runs that aborted; the harness continues.
    pub failures: Vec<(String, u64, String)>,
    pub summaries: Vec<CellSummary>,
}

impl AblationTable {
    pub fn summary(&self, cell_id: &str) -> Option<&CellSummary> {
        self.summaries.iter().find(|s| s.cell_id == cell_id)
    }

    fn mean_condition(&self, cell_id: &str, condition: &str) -> Option<f64> {
        self.summary(cell_id)
            .and_then(|s| s.mean_condition.get(condition).copied())
    }
}

/// One training-plus-evaluation run per (cell, seed): identical data and
/// seed across cells, fresh model per run.
pub fn run_ablation(
    base: &ModelConfig,
    sched: &TrainSchedule,
    cells: &[CellSpec],
    seeds: &[u64],
    data: &PreparedData,
    jobs: usize,
) -> Result<AblationTable> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::Param("run_ablation: empty matrix".into()));
    }
    let jobs = jobs.max(1);
    let matrix: Vec<(usize, u64)> = cells
        .iter()
        .enumerate()
        .flat_map(|(ci, _)| seeds.iter().map(move |&s| (ci, s)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Param(format!("thread pool: {e}")))?;
    let results: Vec<std::result::Result<RunRow, (String, u64, String)>> = pool.install(|| {
        matrix
            .par_iter()
            .map(|&(ci, seed)| {
                let cell = &cells[ci];
                run_cell(base, sched, cell, seed, data)
                    .map_err(|e| (cell.id.clone(), seed, e.to_string()))
            })
            .collect()
    });

    let mut table = AblationTable::default();
    for r in results {
        match r {
            Ok(row) => table.rows.push(row),
            Err(f) => table.failures.push(f),
        }
    }
    table.summaries = summarize(cells, &table.rows);
    Ok(table)
}

fn run_cell(
    base: &ModelConfig,
    sched: &TrainSchedule,
    cell: &CellSpec,
    seed: u64,
    data: &PreparedData,
) -> Result<RunRow> {
    let cfg = cell.apply(base);
    let mut state = ModelState::new(cfg, seed)?;
    let bank = Some((&data.bank, &data.index));
    let run_sched = TrainSchedule {
        seed,
        ..sched.clone()
    };
    train(&mut state, &data.train, bank, &run_sched)?;
    let preds = evaluate(&state, &data.test, bank, &data.vocab)?;
    let report = evaluate_records(&preds)?;
    Ok(RunRow {
        cell_id: cell.id.clone(),
        pgke: cfg.pgke,
        qasc: cfg.qasc,
        fusion: cfg.fusion.as_str().to_string(),
        modality: cfg.modality.as_str().to_string(),
        seed,
        report,
    })
}

fn summarize(cells: &[CellSpec], rows: &[RunRow]) -> Vec<CellSummary> {
    let mut out = Vec::new();
    for cell in cells {
        let cell_rows: Vec<&RunRow> = rows.iter().filter(|r| r.cell_id == cell.id).collect();
        if cell_rows.is_empty() {
            continue;
        }
        let n = cell_rows.len() as f64;
        let mean = |f: &dyn Fn(&RunRow) -> f64| cell_rows.iter().map(|r| f(r)).sum::<f64>() / n;
        let mean_oa = mean(&|r| r.report.oa);
        let var_oa = cell_rows
            .iter()
            .map(|r| (r.report.oa - mean_oa).powi(2))
            .sum::<f64>()
            / n;
        let mut mean_condition = std::collections::BTreeMap::new();
        for key in ["day", "night", "fog"] {
            let vals: Vec<f64> = cell_rows
                .iter()
                .filter_map(|r| r.report.per_condition.get(key).copied())
                .collect();
            if vals.len() == cell_rows.len() {
                mean_condition.insert(key.to_string(), vals.iter().sum::<f64>() / n);
            }
        }
        out.push(CellSummary {
            cell_id: cell.id.clone(),
            n: cell_rows.len(),
            mean_oa,
            std_oa: var_oa.sqrt(),
            mean_aa: mean(&|r| r.report.aa),
            mean_cider: mean(&|r| r.report.cider),
            mean_condition,
        });
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl CheckLine {
    fn cmp(name: &str, lhs: f64, op: &str, rhs: f64, pass: bool) -> Self {
        CheckLine {
            name: name.to_string(),
            pass,
            detail: format!("{lhs:.2} {op} {rhs:.2}"),
        }
    }

    fn missing(name: &str, what: &str) -> Self {
        CheckLine {
            name: name.to_string(),
            pass: false,
            detail: format!("missing {what}"),
        }
    }
}

impl AblationTable {
    /// Module isolation orderings on mean overall accuracy: both modules ≥
    /// each single module ≥ baseline, and a minimum full-vs-baseline gap.
    pub fn check_module_ablation(&self, min_gap: f64) -> Vec<CheckLine> {
        let mut out = Vec::new();
        let cells = [CELL_ADD_BASELINE, CELL_PGKE_ONLY, CELL_QASC_ONLY, CELL_FULL];
        let oa: Vec<Option<f64>> = cells.iter().map(|c| self.summary(c).map(|s| s.mean_oa)).collect();
        match (oa[0], oa[1], oa[2], oa[3]) {
            (Some(base), Some(pgke), Some(qasc), Some(full)) => {
                out.push(CheckLine::cmp("full >= pgke-only", full, ">=", pgke, full >= pgke));
                out.push(CheckLine::cmp("full >= qasc-only", full, ">=", qasc, full >= qasc));
                out.push(CheckLine::cmp("pgke-only >= baseline", pgke, ">=", base, pgke >= base));
                out.push(CheckLine::cmp("qasc-only >= baseline", qasc, ">=", base, qasc >= base));
                out.push(CheckLine::cmp(
                    "full - baseline >= gap",
                    full - base,
                    ">=",
                    min_gap,
                    full - base >= min_gap,
                ));
            }
            _ => out.push(CheckLine::missing("module ablation", "cell summaries")),
        }
        out
    }

    /// Fusion orderings: attention fusion > concat-project > element-wise
    /// mean, with a minimum attention-vs-concat gap.
    pub fn check_fusion_ordering(&self, min_gap: f64) -> Vec<CheckLine> {
        let mut out = Vec::new();
        let qasc = self.summary(CELL_QASC_ONLY).map(|s| s.mean_oa);
        let concat = self.summary(CELL_CONCAT).map(|s| s.mean_oa);
        let add = self.summary(CELL_ADD_BASELINE).map(|s| s.mean_oa);
        match (qasc, concat, add) {
            (Some(q), Some(c), Some(a)) => {
                out.push(CheckLine::cmp("qasc > concat", q, ">", c, q > c));
                out.push(CheckLine::cmp("concat > add", c, ">", a, c > a));
                out.push(CheckLine::cmp("qasc - concat >= gap", q - c, ">=", min_gap, q - c >= min_gap));
            }
            _ => out.push(CheckLine::missing("fusion ordering", "cell summaries")),
        }
        out
    }

    /// Illumination robustness: the optical-only model collapses at night,
    /// the thermal-only model does not, and the fused model's night
    /// accuracy at least matches the better static alternative.
    pub fn check_condition_robustness(&self) -> Vec<CheckLine> {
        let mut out = Vec::new();
        let get = |cell: &str, cond: &str| self.mean_condition(cell, cond);
        match (
            get(CELL_OPT_ONLY, "day"),
            get(CELL_OPT_ONLY, "night"),
            get(CELL_TIR_ONLY, "day"),
            get(CELL_TIR_ONLY, "night"),
            get(CELL_FULL, "night"),
            get(CELL_CONCAT, "night"),
        ) {
            (Some(od), Some(on), Some(td), Some(tn), Some(fl), Some(cn)) => {
                out.push(CheckLine::cmp("opt day - night >= 20", od - on, ">=", 20.0, od - on >= 20.0));
                out.push(CheckLine::cmp(
                    "|tir day - night| <= 5",
                    (td - tn).abs(),
                    "<=",
                    5.0,
                    (td - tn).abs() <= 5.0,
                ));
                let best_alt = on.max(cn);
                out.push(CheckLine::cmp(
                    "fused night >= max(opt, concat) night",
                    fl,
                    ">=",
                    best_alt,
                    fl >= best_alt,
                ));
            }
            _ => out.push(CheckLine::missing("condition robustness", "per-condition means")),
        }
        out
    }

    pub fn all_checks(&self, module_gap: f64, fusion_gap: f64) -> Vec<CheckLine> {
        let mut out = self.check_module_ablation(module_gap);
        out.extend(self.check_fusion_ordering(fusion_gap));
        out.extend(self.check_condition_robustness());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::MetricsReport;

    fn mk_row(cell: &str, seed: u64, oa: f64, night: f64, day: f64) -> RunRow {
        let mut per_condition = std::collections::BTreeMap::new();
        per_condition.insert("day".to_string(), day);
        per_condition.insert("night".to_string(), night);
        per_condition.insert("fog".to_string(), (day + night) / 2.0);
        RunRow {
            cell_id: cell.to_string(),
            pgke: false,
            qasc: false,
            fusion: "add".into(),
            modality: "mul".into(),
            seed,
            report: MetricsReport {
                oa,
                aa: oa,
                cider: 5.0,
                per_condition,
                ..MetricsReport::default()
            },
        }
    }

    #[test]
    fn summaries_average_over_seeds() {
        let cells = paper_tables_cells();
        let rows = vec![
            mk_row(CELL_ADD_BASELINE, 1, 40.0, 30.0, 50.0),
            mk_row(CELL_ADD_BASELINE, 2, 50.0, 40.0, 60.0),
        ];
        let mut table = AblationTable {
            rows,
            failures: vec![],
            summaries: vec![],
        };
        table.summaries = summarize(&cells, &table.rows);
        let s = table.summary(CELL_ADD_BASELINE).unwrap();
        assert_eq!(s.n, 2);
        assert!((s.mean_oa - 45.0).abs() < 1e-12);
        assert!((s.std_oa - 5.0).abs() < 1e-12);
        assert!((s.mean_condition["night"] - 35.0).abs() < 1e-12);
    }

    #[test]
    fn ordering_checks_fire_correctly() {
        let cells = paper_tables_cells();
        let rows = vec![
            mk_row(CELL_ADD_BASELINE, 1, 45.0, 40.0, 50.0),
            mk_row(CELL_PGKE_ONLY, 1, 52.0, 45.0, 55.0),
            mk_row(CELL_QASC_ONLY, 1, 56.0, 52.0, 58.0),
            mk_row(CELL_FULL, 1, 58.0, 55.0, 60.0),
            mk_row(CELL_OPT_ONLY, 1, 50.0, 30.0, 62.0),
            mk_row(CELL_TIR_ONLY, 1, 52.0, 54.0, 53.0),
            mk_row(CELL_CONCAT, 1, 50.0, 44.0, 55.0),
        ];
        let mut table = AblationTable {
            rows,
            failures: vec![],
            summaries: vec![],
        };
        table.summaries = summarize(&cells, &table.rows);
        assert!(table.check_module_ablation(5.0).iter().all(|c| c.pass));
        assert!(table.check_fusion_ordering(2.0).iter().all(|c| c.pass));
        assert!(table.check_condition_robustness().iter().all(|c| c.pass));

        // Break one ordering and observe the failure.
        let mut bad = table.clone();
        for r in &mut bad.rows {
            if r.cell_id == CELL_FULL {
                r.report.oa = 40.0;
            }
        }
        bad.summaries = summarize(&cells, &bad.rows);
        assert!(bad.check_module_ablation(5.0).iter().any(|c| !c.pass));
    }
}
