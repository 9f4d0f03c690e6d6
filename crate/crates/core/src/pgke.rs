//! Prototype-guided knowledge embedding: retrieve the top-K most relevant
//! memory rows for the current question and inject them into visual
//! features through cross-attention, producing a residual increment.

use crate::attention::{mhca_forward, mhca_forward_t, MhcaBlock, MhcaConfig, MhcaVars};
use crate::error::{Error, Result};
use crate::memory::MemoryBank;
use crate::tensor::{tape::Tape, Param, SeededRng, Tensor, Var};

/// Question-to-prototype projection plus the shared injection block. The
/// same weights serve both modalities.
#[derive(Clone, Debug)]
pub struct PgkeModule {
    pub w_q: Param,
    pub mhca: MhcaBlock,
    pub k: usize,
}

impl PgkeModule {
    pub fn init(
        d_model: usize,
        d_proto: usize,
        k: usize,
        heads: usize,
        d_head: usize,
        d_ffn: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Param("retrieval count k must be >= 1".into()));
        }
        let cfg = MhcaConfig::new(d_model, d_proto, heads, d_head, d_ffn)?;
        Ok(PgkeModule {
            w_q: Param::init_weight("pgke.w_q", d_model, d_proto, rng),
            mhca: MhcaBlock::init(cfg, "pgke.mhca", rng)?,
            k,
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut ps = vec![&self.w_q];
        ps.extend(self.mhca.params());
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = vec![&mut self.w_q];
        ps.extend(self.mhca.params_mut());
        ps
    }
}

/// Unit-normalized view of a bank used for cosine retrieval. Zero-norm rows
/// stay zero, which scores them 0 against every query.
#[derive(Clone, Debug)]
pub struct BankIndex {
    pub unit_rows: Tensor,
    pub n: usize,
    pub width: usize,
}

impl BankIndex {
    pub fn build(bank: &MemoryBank) -> Result<Self> {
        if bank.is_empty() {
            return Err(Error::EmptyBank);
        }
        let mut unit = bank.matrix();
        let n = unit.rows2();
        for i in 0..n {
            let row = unit.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
        let width = unit.cols2();
        Ok(BankIndex {
            unit_rows: unit,
            n,
            width,
        })
    }

    /// Raw rows gathered into a `[K × Dp]` tensor.
    pub fn gather(&self, bank: &MemoryBank, indices: &[usize]) -> Result<Tensor> {
        let dp = self.width;
        let mut data = Vec::with_capacity(indices.len() * dp);
        for &i in indices {
            let row = bank
                .rows
                .get(i)
                .ok_or_else(|| Error::Lookup(format!("bank row {i} out of {}", bank.len())))?;
            data.extend_from_slice(row.vector.data());
        }
        Tensor::new(vec![indices.len(), dp], data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    /// Bank row indices, best first (0-based).
    pub indices: Vec<usize>,
    /// Cosine similarities, non-increasing.
    pub scores: Vec<f64>,
}

/// Cosine scores of the projected question against every bank row.
pub fn retrieval_scores(q: &Tensor, index: &BankIndex, module: &PgkeModule) -> Result<Vec<f64>> {
    let q_row = as_row(q, module.w_q.value.shape()[0])?;
    let proj = crate::tensor::matmul(&q_row, &module.w_q.value)?;
    let norm = proj.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut scores = vec![0.0; index.n];
    if norm == 0.0 {
        return Ok(scores);
    }
    for (i, s) in scores.iter_mut().enumerate() {
        let dot: f64 = index
            .unit_rows
            .row(i)
            .iter()
            .zip(proj.data())
            .map(|(a, b)| a * b)
            .sum();
        *s = dot / norm;
    }
    Ok(scores)
}

/// Top-k by cosine similarity; ties break toward the lower row index.
pub fn retrieve_topk(q: &Tensor, index: &BankIndex, module: &PgkeModule) -> Result<RetrievalResult> {
    if index.n == 0 {
        return Err(Error::EmptyBank);
    }
    if module.k > index.n {
        return Err(Error::Param(format!(
            "k={} exceeds bank size {}",
            module.k, index.n
        )));
    }
    let scores = retrieval_scores(q, index, module)?;
    // Bounded insertion keeps the best k in order without a full sort.
    let mut best: Vec<(usize, f64)> = Vec::with_capacity(module.k + 1);
    for (i, &s) in scores.iter().enumerate() {
        let pos = best
            .iter()
            .position(|&(bi, bs)| s > bs || (s == bs && i < bi))
            .unwrap_or(best.len());
        if pos < module.k {
            best.insert(pos, (i, s));
            if best.len() > module.k {
                best.pop();
            }
        }
    }
    Ok(RetrievalResult {
        indices: best.iter().map(|&(i, _)| i).collect(),
        scores: best.iter().map(|&(_, s)| s).collect(),
    })
}

/// Residual increment for one modality's features on the tape; `retrieved`
/// is the gathered `[K × Dp]` prototype tensor.
pub fn pgke_residual_t(
    tape: &mut Tape,
    f_m: Var,
    retrieved: Var,
    vars: &MhcaVars,
) -> Result<(Var, Vec<Var>)> {
    mhca_forward_t(tape, f_m, retrieved, vars)
}

/// Value-only composition: retrieve, gather, attend.
pub fn pgke_residual(
    f_m: &Tensor,
    q: &Tensor,
    bank: &MemoryBank,
    index: &BankIndex,
    module: &PgkeModule,
) -> Result<Tensor> {
    let ret = retrieve_topk(q, index, module)?;
    let rows = index.gather(bank, &ret.indices)?;
    mhca_forward(f_m, &rows, &module.mhca)
}

fn as_row(q: &Tensor, d: usize) -> Result<Tensor> {
    if q.numel() != d {
        return Err(Error::dim("retrieve query", q.shape(), &[d]));
    }
    Tensor::new(vec![1, d], q.data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{EventKind, MemoryBank, Prototype, SemanticPhrase};

    fn bank_from_rows(rows: Vec<Vec<f64>>) -> MemoryBank {
        let d = rows[0].len();
        MemoryBank {
            rows: rows
                .into_iter()
                .enumerate()
                .map(|(i, v)| Prototype {
                    vector: Tensor::new(vec![d], v).unwrap(),
                    phrase: SemanticPhrase {
                        text: format!("p{i}"),
                        event_kind: EventKind::VehiclePresence,
                        entity_id: i as u32,
                    },
                    source_scene: i as u64,
                })
                .collect(),
            d_model: d / 2,
            tau_build: 0.07,
        }
    }

    fn identity_module(d: usize, dp: usize, k: usize) -> PgkeModule {
        let mut rng = SeededRng::new(1);
        let mut m = PgkeModule::init(d, dp, k, 2, 4, 8, &mut rng).unwrap();
        // Make the projection map coordinate i to coordinate i.
        m.w_q.value.fill(0.0);
        for i in 0..d.min(dp) {
            m.w_q.value.set2(i, i, 1.0);
        }
        m
    }

    #[test]
    fn orthonormal_basis_retrieval() {
        let bank = bank_from_rows(vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ]);
        let index = BankIndex::build(&bank).unwrap();
        let module = identity_module(4, 4, 1);
        let q = Tensor::new(vec![4], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let r = retrieve_topk(&q, &index, &module).unwrap();
        assert_eq!(r.indices, vec![1]);
        assert!((r.scores[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let bank = bank_from_rows(vec![
            vec![0.0, 2.0],
            vec![1.0, 1.0],
            vec![2.0, 2.0], // same direction as row 1
        ]);
        let index = BankIndex::build(&bank).unwrap();
        let module = identity_module(2, 2, 2);
        let q = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let r = retrieve_topk(&q, &index, &module).unwrap();
        assert_eq!(r.indices, vec![1, 2]);
        assert!((r.scores[0] - 1.0).abs() < 1e-12);
        assert!((r.scores[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_full_sort_oracle() {
        let mut rng = SeededRng::new(99);
        for trial in 0..20 {
            let n = 200;
            let dp = 16;
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dp).map(|_| rng.uniform(-1.0, 1.0)).collect())
                .collect();
            let bank = bank_from_rows(rows);
            let index = BankIndex::build(&bank).unwrap();
            let mut module = identity_module(8, dp, 8);
            module.w_q.value = rng.uniform_tensor(vec![8, dp], -1.0, 1.0);
            let q = rng.uniform_tensor(vec![8], -1.0, 1.0);

            let got = retrieve_topk(&q, &index, &module).unwrap();

            // Oracle: full stable sort by (-score, index).
            let scores = retrieval_scores(&q, &index, &module).unwrap();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            let want: Vec<usize> = order[..8].to_vec();
            assert_eq!(got.indices, want, "trial {trial}");
            for (i, &idx) in want.iter().enumerate() {
                assert!((got.scores[i] - scores[idx]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invariant_to_positive_query_rescaling() {
        let mut rng = SeededRng::new(5);
        let rows: Vec<Vec<f64>> = (0..50).map(|_| (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
        let bank = bank_from_rows(rows);
        let index = BankIndex::build(&bank).unwrap();
        let mut module = identity_module(8, 8, 4);
        module.w_q.value = rng.uniform_tensor(vec![8, 8], -1.0, 1.0);
        let q = rng.uniform_tensor(vec![8], -1.0, 1.0);
        let r1 = retrieve_topk(&q, &index, &module).unwrap();
        let q2 = q.map(|v| v * 37.5);
        let r2 = retrieve_topk(&q2, &index, &module).unwrap();
        assert_eq!(r1.indices, r2.indices);
    }

    #[test]
    fn k_larger_than_bank_is_param_error() {
        let bank = bank_from_rows(vec![vec![1.0, 0.0]]);
        let index = BankIndex::build(&bank).unwrap();
        let module = identity_module(2, 2, 2);
        let q = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(retrieve_topk(&q, &index, &module), Err(Error::Param(_))));
    }

    #[test]
    fn zero_norm_rows_score_zero() {
        let bank = bank_from_rows(vec![vec![0.0, 0.0], vec![1.0, 0.0]]);
        let index = BankIndex::build(&bank).unwrap();
        let module = identity_module(2, 2, 1);
        let q = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let r = retrieve_topk(&q, &index, &module).unwrap();
        assert_eq!(r.indices, vec![1]);
    }

    #[test]
    fn residual_matches_composition_oracle() {
        let mut rng = SeededRng::new(123);
        let rows: Vec<Vec<f64>> = (0..30).map(|_| (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
        let bank = bank_from_rows(rows);
        let index = BankIndex::build(&bank).unwrap();
        let mut prng = SeededRng::new(7);
        let module = PgkeModule::init(6, 12, 4, 2, 4, 10, &mut prng).unwrap();
        let f = rng.uniform_tensor(vec![8, 6], -1.0, 1.0);
        let q = rng.uniform_tensor(vec![6], -1.0, 1.0);

        let got = pgke_residual(&f, &q, &bank, &index, &module).unwrap();

        let ret = retrieve_topk(&q, &index, &module).unwrap();
        let rows_t = index.gather(&bank, &ret.indices).unwrap();
        let want = mhca_forward(&f, &rows_t, &module.mhca).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
        assert_eq!(got.shape(), f.shape());
    }

    #[test]
    fn k1_rows_all_equal() {
        // Single prototype: value path is query-independent, so every row of
        // the increment is identical.
        let mut rng = SeededRng::new(55);
        let bank = bank_from_rows(vec![(0..12).map(|_| rng.uniform(-1.0, 1.0)).collect()]);
        let index = BankIndex::build(&bank).unwrap();
        let mut prng = SeededRng::new(8);
        let module = PgkeModule::init(6, 12, 1, 2, 4, 10, &mut prng).unwrap();
        let f = rng.uniform_tensor(vec![5, 6], -1.0, 1.0);
        let q = rng.uniform_tensor(vec![6], -1.0, 1.0);
        let delta = pgke_residual(&f, &q, &bank, &index, &module).unwrap();
        for i in 1..5 {
            for j in 0..6 {
                assert!((delta.at2(i, j) - delta.at2(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_prototype_gives_finite_residual() {
        let bank = bank_from_rows(vec![vec![0.0; 12]]);
        let index = BankIndex::build(&bank).unwrap();
        let mut prng = SeededRng::new(9);
        let module = PgkeModule::init(6, 12, 1, 2, 4, 10, &mut prng).unwrap();
        let mut rng = SeededRng::new(10);
        let f = rng.uniform_tensor(vec![4, 6], -1.0, 1.0);
        let q = rng.uniform_tensor(vec![6], -1.0, 1.0);
        let delta = pgke_residual(&f, &q, &bank, &index, &module).unwrap();
        assert!(delta.all_finite());
    }
}
