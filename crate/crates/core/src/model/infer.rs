//! Value-path inference: visual prefix assembly, greedy prediction, and
//! batch evaluation with scene-level caching.

use std::collections::HashMap;

use super::{EncodedDataset, ModelState, Modality, FusionMode};
use crate::attention::{mhca_apply, mhca_precompute_kv, MhcaKvCache};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::eval::PredRecord;
use crate::memory::{concat_cols_val, MemoryBank};
use crate::pgke::{retrieve_topk, BankIndex};
use crate::qasc::{qasc_residuals, StaticFusion};
use crate::tensor::Tensor;

fn concat_rows_val(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols2() != b.cols2() {
        return Err(Error::dim("concat_rows", a.shape(), b.shape()));
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![a.rows2() + b.rows2(), a.cols2()], data)
}

/// Combine per-modality streams into the decoder's visual prefix using the
/// same arithmetic as the tape path.
fn combine_streams(
    state: &ModelState,
    f_opt: Option<&Tensor>,
    f_th: Option<&Tensor>,
    d_pgke_opt: Option<&Tensor>,
    d_pgke_th: Option<&Tensor>,
    d_qasc: Option<&(Tensor, Tensor)>,
) -> Result<Tensor> {
    let stream_opt = match f_opt {
        Some(f) => Some(super::fuse_residual(
            f,
            d_pgke_opt,
            d_qasc.map(|d| &d.0),
            &state.gates,
        )?),
        None => None,
    };
    let stream_th = match f_th {
        Some(f) => Some(super::fuse_residual(
            f,
            d_pgke_th,
            d_qasc.map(|d| &d.1),
            &state.gates,
        )?),
        None => None,
    };
    match (state.cfg.modality, state.cfg.fusion) {
        (Modality::Opt, _) => Ok(stream_opt.unwrap()),
        (Modality::Tir, _) => Ok(stream_th.unwrap()),
        (Modality::Mul, FusionMode::SeqConcat) => {
            concat_rows_val(&stream_opt.unwrap(), &stream_th.unwrap())
        }
        (Modality::Mul, FusionMode::Add) => {
            let mut s = stream_opt.unwrap();
            s.add_in_place(&stream_th.unwrap());
            s.scale_in_place(0.5);
            Ok(s)
        }
        (Modality::Mul, FusionMode::ConcatProject) => {
            let cat = concat_cols_val(&stream_opt.unwrap(), &stream_th.unwrap())?;
            match &state.fusion {
                Some(StaticFusion::ConcatProject(p)) => crate::tensor::matmul(&cat, &p.value),
                _ => Err(Error::Param("concat-project fusion missing projection".into())),
            }
        }
    }
}

/// Assemble the decoder's visual prefix for one sample (value path).
pub fn visual_prefix_values(
    state: &ModelState,
    f_opt: Option<&Tensor>,
    f_th: Option<&Tensor>,
    q_vec: &Tensor,
    bank: Option<(&MemoryBank, &BankIndex)>,
) -> Result<Tensor> {
    let retrieved = state.retrieve_rows(q_vec, bank)?;
    let (mut d_pgke_opt, mut d_pgke_th) = (None, None);
    if let (Some(module), Some(rows)) = (&state.pgke, &retrieved) {
        let cache = mhca_precompute_kv(rows, &module.mhca)?;
        if let Some(f) = f_opt {
            d_pgke_opt = Some(mhca_apply(f, &cache, &module.mhca)?);
        }
        if let Some(f) = f_th {
            d_pgke_th = Some(mhca_apply(f, &cache, &module.mhca)?);
        }
    }
    let d_qasc = match (&state.qasc, f_opt, f_th) {
        (Some(q), Some(fo), Some(ft)) => Some(qasc_residuals(fo, ft, q)?),
        _ => None,
    };
    combine_streams(state, f_opt, f_th, d_pgke_opt.as_ref(), d_pgke_th.as_ref(), d_qasc.as_ref())
}

/// Greedy answer for raw inputs, decoded to a token string.
pub fn predict_answer(
    state: &ModelState,
    opt_img: Option<&Tensor>,
    tir_img: Option<&Tensor>,
    question_tokens: &[usize],
    bank: Option<(&MemoryBank, &BankIndex)>,
    vocab: &Vocab,
) -> Result<String> {
    let need_opt = state.cfg.modality != Modality::Tir;
    let need_th = state.cfg.modality != Modality::Opt;
    let f_opt = match (need_opt, opt_img) {
        (true, Some(img)) => Some(state.backbone.encode_image(img, Modality::Opt)?),
        (true, None) => return Err(Error::Param("optical image required".into())),
        _ => None,
    };
    let f_th = match (need_th, tir_img) {
        (true, Some(img)) => Some(state.backbone.encode_image(img, Modality::Tir)?),
        (true, None) => return Err(Error::Param("thermal image required".into())),
        _ => None,
    };
    let q_vec = state.backbone.encode_question(question_tokens)?;
    let vis = visual_prefix_values(state, f_opt.as_ref(), f_th.as_ref(), &q_vec, bank)?;
    let ids = state.decoder.greedy_decode(&q_vec, &vis)?;
    vocab.decode(&ids)
}

/// Evaluate every sample of an encoded split, reusing per-scene
/// compensation residuals and per-question retrievals.
pub fn evaluate(
    state: &ModelState,
    data: &EncodedDataset,
    bank: Option<(&MemoryBank, &BankIndex)>,
    vocab: &Vocab,
) -> Result<Vec<PredRecord>> {
    if state.cfg.pgke && bank.is_none() {
        return Err(Error::Param("evaluate: pgke enabled but no memory bank supplied".into()));
    }
    let need_opt = state.cfg.modality != Modality::Tir;
    let need_th = state.cfg.modality != Modality::Opt;

    // Retrieval depends only on the question text at fixed weights.
    let mut retrieval_cache: HashMap<String, (Tensor, MhcaKvCache)> = HashMap::new();
    // Compensation depends only on the feature pair.
    let mut qasc_cache: HashMap<(usize, usize), (Tensor, Tensor)> = HashMap::new();

    let mut out = Vec::with_capacity(data.samples.len());
    for s in &data.samples {
        let f_opt = need_opt.then(|| &data.features[s.scene_pos].0);
        let f_th = need_th.then(|| &data.features[s.tir_pos].1);

        let (mut d_pgke_opt, mut d_pgke_th) = (None, None);
        if let (Some(module), Some((bank, index))) = (&state.pgke, bank) {
            if !retrieval_cache.contains_key(&s.question) {
                let ret = retrieve_topk(&s.q_vec, index, module)?;
                let rows = index.gather(bank, &ret.indices)?;
                let cache = mhca_precompute_kv(&rows, &module.mhca)?;
                retrieval_cache.insert(s.question.clone(), (rows, cache));
            }
            let entry = &retrieval_cache[&s.question];
            if let Some(f) = f_opt {
                d_pgke_opt = Some(mhca_apply(f, &entry.1, &module.mhca)?);
            }
            if let Some(f) = f_th {
                d_pgke_th = Some(mhca_apply(f, &entry.1, &module.mhca)?);
            }
        }

        let d_qasc = match (&state.qasc, f_opt, f_th) {
            (Some(module), Some(fo), Some(ft)) => {
                let key = (s.scene_pos, s.tir_pos);
                if !qasc_cache.contains_key(&key) {
                    qasc_cache.insert(key, qasc_residuals(fo, ft, module)?);
                }
                qasc_cache.get(&key).cloned()
            }
            _ => None,
        };

        let vis = combine_streams(state, f_opt, f_th, d_pgke_opt.as_ref(), d_pgke_th.as_ref(), d_qasc.as_ref())?;
        let ids = state.decoder.greedy_decode(&s.q_vec, &vis)?;
        let predicted = vocab.decode(&ids)?;
        out.push(PredRecord {
            scene_id: s.scene_id,
            qtype: s.qtype,
            condition: s.condition,
            question: s.question.clone(),
            reference: s.reference.clone(),
            predicted,
        });
    }
    Ok(out)
}
