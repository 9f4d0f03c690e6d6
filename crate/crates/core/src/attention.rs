//! Multi-head cross-attention block with pre-norm inputs and a feed-forward
//! sub-layer. The block returns a residual *increment*; callers own the
//! residual addition, which keeps a single gated residual path in the model.

use crate::error::{Error, Result};
use crate::tensor::{tape::Tape, Param, SeededRng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MhcaConfig {
    /// Query-side width; also the block output width.
    pub d_model: usize,
    /// Key/value-side input width (may differ from `d_model`).
    pub d_kv_in: usize,
    pub heads: usize,
    pub d_head: usize,
    pub d_ffn: usize,
}

impl MhcaConfig {
    pub fn new(d_model: usize, d_kv_in: usize, heads: usize, d_head: usize, d_ffn: usize) -> Result<Self> {
        let cfg = MhcaConfig {
            d_model,
            d_kv_in,
            heads,
            d_head,
            d_ffn,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Desk-scale defaults: 4 heads × 16, FFN 128.
    pub fn desk(d_model: usize, d_kv_in: usize) -> Self {
        MhcaConfig {
            d_model,
            d_kv_in,
            heads: 4,
            d_head: 16,
            d_ffn: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_kv_in == 0 || self.heads == 0 || self.d_head == 0 || self.d_ffn == 0 {
            return Err(Error::Param(format!("all attention widths must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn d_inner(&self) -> usize {
        self.heads * self.d_head
    }
}

#[derive(Clone, Debug)]
pub struct MhcaBlock {
    pub cfg: MhcaConfig,
    pub w_q: Param,
    pub w_k: Param,
    pub w_v: Param,
    pub w_o: Param,
    pub ln_q_scale: Param,
    pub ln_q_shift: Param,
    pub ln_kv_scale: Param,
    pub ln_kv_shift: Param,
    pub ffn_w1: Param,
    pub ffn_w2: Param,
    pub ln_ffn_scale: Param,
    pub ln_ffn_shift: Param,
}

impl MhcaBlock {
    pub fn init(cfg: MhcaConfig, prefix: &str, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let inner = cfg.d_inner();
        Ok(MhcaBlock {
            cfg,
            w_q: Param::init_weight(format!("{prefix}.w_q"), cfg.d_model, inner, rng),
            w_k: Param::init_weight(format!("{prefix}.w_k"), cfg.d_kv_in, inner, rng),
            w_v: Param::init_weight(format!("{prefix}.w_v"), cfg.d_kv_in, inner, rng),
            w_o: Param::init_weight(format!("{prefix}.w_o"), inner, cfg.d_model, rng),
            ln_q_scale: Param::init_ones(format!("{prefix}.ln_q.scale"), vec![cfg.d_model]),
            ln_q_shift: Param::init_zeros(format!("{prefix}.ln_q.shift"), vec![cfg.d_model], rng),
            ln_kv_scale: Param::init_ones(format!("{prefix}.ln_kv.scale"), vec![cfg.d_kv_in]),
            ln_kv_shift: Param::init_zeros(format!("{prefix}.ln_kv.shift"), vec![cfg.d_kv_in], rng),
            ffn_w1: Param::init_weight(format!("{prefix}.ffn.w1"), cfg.d_model, cfg.d_ffn, rng),
            ffn_w2: Param::init_weight(format!("{prefix}.ffn.w2"), cfg.d_ffn, cfg.d_model, rng),
            ln_ffn_scale: Param::init_ones(format!("{prefix}.ln_ffn.scale"), vec![cfg.d_model]),
            ln_ffn_shift: Param::init_zeros(format!("{prefix}.ln_ffn.shift"), vec![cfg.d_model], rng),
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln_q_scale,
            &self.ln_q_shift,
            &self.ln_kv_scale,
            &self.ln_kv_shift,
            &self.ffn_w1,
            &self.ffn_w2,
            &self.ln_ffn_scale,
            &self.ln_ffn_shift,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln_q_scale,
            &mut self.ln_q_shift,
            &mut self.ln_kv_scale,
            &mut self.ln_kv_shift,
            &mut self.ffn_w1,
            &mut self.ffn_w2,
            &mut self.ln_ffn_scale,
            &mut self.ln_ffn_shift,
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> MhcaVars {
        MhcaVars {
            cfg: self.cfg,
            w_q: tape.param(&self.w_q),
            w_k: tape.param(&self.w_k),
            w_v: tape.param(&self.w_v),
            w_o: tape.param(&self.w_o),
            ln_q_scale: tape.param(&self.ln_q_scale),
            ln_q_shift: tape.param(&self.ln_q_shift),
            ln_kv_scale: tape.param(&self.ln_kv_scale),
            ln_kv_shift: tape.param(&self.ln_kv_shift),
            ffn_w1: tape.param(&self.ffn_w1),
            ffn_w2: tape.param(&self.ffn_w2),
            ln_ffn_scale: tape.param(&self.ln_ffn_scale),
            ln_ffn_shift: tape.param(&self.ln_ffn_shift),
        }
    }
}

/// Tape bindings of a block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct MhcaVars {
    pub cfg: MhcaConfig,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ln_q_scale: Var,
    pub ln_q_shift: Var,
    pub ln_kv_scale: Var,
    pub ln_kv_shift: Var,
    pub ffn_w1: Var,
    pub ffn_w2: Var,
    pub ln_ffn_scale: Var,
    pub ln_ffn_shift: Var,
}

/// Cross-attention increment on the tape. Returns the increment and the
/// per-head attention weight nodes (softmax outputs, rows over keys).
pub fn mhca_forward_t(
    tape: &mut Tape,
    q_seq: Var,
    kv_seq: Var,
    vars: &MhcaVars,
) -> Result<(Var, Vec<Var>)> {
    let cfg = vars.cfg;
    if tape.value(q_seq).cols2() != cfg.d_model {
        return Err(Error::dim("mhca_forward q", tape.value(q_seq).shape(), &[cfg.d_model]));
    }
    if tape.value(kv_seq).cols2() != cfg.d_kv_in {
        return Err(Error::dim("mhca_forward kv", tape.value(kv_seq).shape(), &[cfg.d_kv_in]));
    }
    let lnq = tape.layer_norm(q_seq, vars.ln_q_scale, vars.ln_q_shift)?;
    let lnkv = tape.layer_norm(kv_seq, vars.ln_kv_scale, vars.ln_kv_shift)?;
    let q_all = tape.matmul(lnq, vars.w_q)?;
    let k_all = tape.matmul(lnkv, vars.w_k)?;
    let v_all = tape.matmul(lnkv, vars.w_v)?;

    let scale = 1.0 / (cfg.d_head as f64).sqrt();
    let mut ctx = None;
    let mut weights = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let off = h * cfg.d_head;
        let qh = tape.slice_cols(q_all, off, cfg.d_head)?;
        let kh = tape.slice_cols(k_all, off, cfg.d_head)?;
        let vh = tape.slice_cols(v_all, off, cfg.d_head)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scaled = tape.scale(scores, scale);
        let w = tape.softmax_rows(scaled, 1.0)?;
        let c = tape.matmul(w, vh)?;
        weights.push(w);
        ctx = Some(match ctx {
            None => c,
            Some(acc) => tape.concat_cols(acc, c)?,
        });
    }
    let ctx = ctx.expect("at least one head");
    let y = tape.matmul(ctx, vars.w_o)?;

    // Feed-forward sub-layer folded into the increment; the block never adds
    // its own query input back.
    let yn = tape.layer_norm(y, vars.ln_ffn_scale, vars.ln_ffn_shift)?;
    let h1 = tape.matmul(yn, vars.ffn_w1)?;
    let h1 = tape.gelu(h1);
    let h2 = tape.matmul(h1, vars.ffn_w2)?;
    let delta = tape.add(y, h2)?;
    Ok((delta, weights))
}

/// Convenience value-only forward.
pub fn mhca_forward(q_seq: &Tensor, kv_seq: &Tensor, block: &MhcaBlock) -> Result<Tensor> {
    let mut tape = Tape::new();
    let q = tape.input(q_seq.clone());
    let kv = tape.input(kv_seq.clone());
    let vars = block.bind(&mut tape);
    let (delta, _) = mhca_forward_t(&mut tape, q, kv, &vars)?;
    Ok(tape.value(delta).clone())
}

/// Attention weights as a `[heads × len_q × len_kv]` tensor; exactly the
/// weights `mhca_forward` uses.
pub fn attention_weights(q_seq: &Tensor, kv_seq: &Tensor, block: &MhcaBlock) -> Result<Tensor> {
    let mut tape = Tape::new();
    let q = tape.input(q_seq.clone());
    let kv = tape.input(kv_seq.clone());
    let vars = block.bind(&mut tape);
    let (_, weights) = mhca_forward_t(&mut tape, q, kv, &vars)?;
    let len_q = q_seq.rows2();
    let len_kv = kv_seq.rows2();
    let mut data = Vec::with_capacity(block.cfg.heads * len_q * len_kv);
    for w in &weights {
        data.extend_from_slice(tape.value(*w).data());
    }
    Tensor::new(vec![block.cfg.heads, len_q, len_kv], data)
}

/// Per-vector normalization over the last axis with affine scale/shift.
pub fn layer_norm(x: &Tensor, scale: &Param, shift: &Param) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vx = tape.input(x.clone());
    let vs = tape.param(scale);
    let vb = tape.param(shift);
    let y = tape.layer_norm(vx, vs, vb)?;
    Ok(tape.value(y).clone())
}

/// Key/value projections cached for repeated queries against the same
/// key/value sequence (bit-identical to the tape path).
pub struct MhcaKvCache {
    pub k_all: Tensor,
    pub v_all: Tensor,
}

pub fn mhca_precompute_kv(kv_seq: &Tensor, block: &MhcaBlock) -> Result<MhcaKvCache> {
    let lnkv = layer_norm(kv_seq, &block.ln_kv_scale, &block.ln_kv_shift)?;
    Ok(MhcaKvCache {
        k_all: crate::tensor::matmul(&lnkv, &block.w_k.value)?,
        v_all: crate::tensor::matmul(&lnkv, &block.w_v.value)?,
    })
}

/// Value-only forward against a cached key/value projection.
pub fn mhca_apply(q_seq: &Tensor, cache: &MhcaKvCache, block: &MhcaBlock) -> Result<Tensor> {
    use crate::tensor::{matmul, matmul_nt, softmax_rows};
    let cfg = block.cfg;
    let lnq = layer_norm(q_seq, &block.ln_q_scale, &block.ln_q_shift)?;
    let q_all = matmul(&lnq, &block.w_q.value)?;
    let len_q = q_seq.rows2();
    let mut ctx = Tensor::zeros(vec![len_q, cfg.d_inner()]);
    for h in 0..cfg.heads {
        let off = h * cfg.d_head;
        let qh = slice_cols_val(&q_all, off, cfg.d_head);
        let kh = slice_cols_val(&cache.k_all, off, cfg.d_head);
        let vh = slice_cols_val(&cache.v_all, off, cfg.d_head);
        let scores = matmul_nt(&qh, &kh)?;
        let mut scaled = scores;
        scaled.scale_in_place(1.0 / (cfg.d_head as f64).sqrt());
        let w = softmax_rows(&scaled, 1.0)?;
        let c = matmul(&w, &vh)?;
        for i in 0..len_q {
            ctx.row_mut(i)[off..off + cfg.d_head].copy_from_slice(c.row(i));
        }
    }
    let y = matmul(&ctx, &block.w_o.value)?;
    let yn = layer_norm(&y, &block.ln_ffn_scale, &block.ln_ffn_shift)?;
    let h1 = matmul(&yn, &block.ffn_w1.value)?.map(crate::tensor::gelu);
    let h2 = matmul(&h1, &block.ffn_w2.value)?;
    let mut delta = y;
    delta.add_in_place(&h2);
    Ok(delta)
}

pub(crate) fn slice_cols_val(t: &Tensor, start: usize, len: usize) -> Tensor {
    let m = t.rows2();
    let mut data = Vec::with_capacity(m * len);
    for i in 0..m {
        data.extend_from_slice(&t.row(i)[start..start + len]);
    }
    Tensor::new(vec![m, len], data).expect("slice shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, matmul, softmax_rows};

    fn toy_block(seed: u64) -> MhcaBlock {
        let mut rng = SeededRng::new(seed);
        MhcaBlock::init(MhcaConfig::new(6, 10, 2, 4, 12).unwrap(), "blk", &mut rng).unwrap()
    }

    #[test]
    fn single_key_attention_weight_is_one() {
        let block = toy_block(3);
        let mut rng = SeededRng::new(4);
        let q = rng.uniform_tensor(vec![5, 6], -1.0, 1.0);
        let kv = rng.uniform_tensor(vec![1, 10], -1.0, 1.0);
        let w = attention_weights(&q, &kv, &block).unwrap();
        for &v in w.data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn single_key_output_is_value_projection() {
        // With the FFN weights zeroed the increment reduces to the attention
        // context: LN(kv)·w_v (per head) concatenated, times w_o, same for
        // every query row.
        let mut block = toy_block(5);
        block.ffn_w1.value.fill(0.0);
        block.ffn_w2.value.fill(0.0);
        let mut rng = SeededRng::new(6);
        let q = rng.uniform_tensor(vec![4, 6], -1.0, 1.0);
        let kv = rng.uniform_tensor(vec![1, 10], -1.0, 1.0);
        let delta = mhca_forward(&q, &kv, &block).unwrap();

        let lnkv = layer_norm(&kv, &block.ln_kv_scale, &block.ln_kv_shift).unwrap();
        let v_all = matmul(&lnkv, &block.w_v.value).unwrap();
        let expect = matmul(&v_all, &block.w_o.value).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                assert!((delta.at2(i, j) - expect.at2(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_scores_average_the_values() {
        // Two identical kv rows: weights are exactly 1/2 each, so the output
        // equals the single-row case.
        let block = toy_block(7);
        let mut rng = SeededRng::new(8);
        let q = rng.uniform_tensor(vec![3, 6], -1.0, 1.0);
        let kv_row = rng.uniform_tensor(vec![1, 10], -1.0, 1.0);
        let mut kv2 = Tensor::zeros(vec![2, 10]);
        kv2.row_mut(0).copy_from_slice(kv_row.row(0));
        kv2.row_mut(1).copy_from_slice(kv_row.row(0));
        let w = attention_weights(&q, &kv2, &block).unwrap();
        for &v in w.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        let out1 = mhca_forward(&q, &kv_row, &block).unwrap();
        let out2 = mhca_forward(&q, &kv2, &block).unwrap();
        assert!(out1.max_abs_diff(&out2) < 1e-12);
    }

    #[test]
    fn forward_matches_naive_per_head_oracle() {
        let block = toy_block(11);
        let mut rng = SeededRng::new(12);
        let q = rng.uniform_tensor(vec![8, 6], -1.0, 1.0);
        let kv = rng.uniform_tensor(vec![5, 10], -1.0, 1.0);
        let got = mhca_forward(&q, &kv, &block).unwrap();

        // Naive oracle: explicit loops per head.
        let lnq = layer_norm(&q, &block.ln_q_scale, &block.ln_q_shift).unwrap();
        let lnkv = layer_norm(&kv, &block.ln_kv_scale, &block.ln_kv_shift).unwrap();
        let q_all = matmul(&lnq, &block.w_q.value).unwrap();
        let k_all = matmul(&lnkv, &block.w_k.value).unwrap();
        let v_all = matmul(&lnkv, &block.w_v.value).unwrap();
        let cfg = block.cfg;
        let mut ctx = Tensor::zeros(vec![8, cfg.d_inner()]);
        for h in 0..cfg.heads {
            for i in 0..8 {
                let mut scores = vec![0.0; 5];
                for (j, s) in scores.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for d in 0..cfg.d_head {
                        dot += q_all.at2(i, h * cfg.d_head + d) * k_all.at2(j, h * cfg.d_head + d);
                    }
                    *s = dot / (cfg.d_head as f64).sqrt();
                }
                let w = softmax_rows(&Tensor::row_vector(scores), 1.0).unwrap();
                for d in 0..cfg.d_head {
                    let mut acc = 0.0;
                    for j in 0..5 {
                        acc += w.data()[j] * v_all.at2(j, h * cfg.d_head + d);
                    }
                    ctx.set2(i, h * cfg.d_head + d, acc);
                }
            }
        }
        let y = matmul(&ctx, &block.w_o.value).unwrap();
        let yn = layer_norm(&y, &block.ln_ffn_scale, &block.ln_ffn_shift).unwrap();
        let h1 = matmul(&yn, &block.ffn_w1.value).unwrap().map(crate::tensor::gelu);
        let h2 = matmul(&h1, &block.ffn_w2.value).unwrap();
        let mut expect = y;
        expect.add_in_place(&h2);
        assert!(got.max_abs_diff(&expect) < 1e-10);
    }

    #[test]
    fn kv_permutation_leaves_output_unchanged() {
        let block = toy_block(13);
        let mut rng = SeededRng::new(14);
        let q = rng.uniform_tensor(vec![4, 6], -1.0, 1.0);
        let kv = rng.uniform_tensor(vec![6, 10], -1.0, 1.0);
        let out = mhca_forward(&q, &kv, &block).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut kv_p = Tensor::zeros(vec![6, 10]);
        for (dst, &src) in perm.iter().enumerate() {
            kv_p.row_mut(dst).copy_from_slice(kv.row(src));
        }
        let out_p = mhca_forward(&q, &kv_p, &block).unwrap();
        assert!(out.max_abs_diff(&out_p) < 1e-10);
    }

    #[test]
    fn cached_apply_matches_tape_forward() {
        let block = toy_block(15);
        let mut rng = SeededRng::new(16);
        let q = rng.uniform_tensor(vec![7, 6], -1.0, 1.0);
        let kv = rng.uniform_tensor(vec![9, 10], -1.0, 1.0);
        let tape_out = mhca_forward(&q, &kv, &block).unwrap();
        let cache = mhca_precompute_kv(&kv, &block).unwrap();
        let fast_out = mhca_apply(&q, &cache, &block).unwrap();
        assert!(tape_out.max_abs_diff(&fast_out) < 1e-14);
    }

    #[test]
    fn block_gradients_pass_fd_check() {
        let block = toy_block(17);
        let mut rng = SeededRng::new(18);
        let q = rng.uniform_tensor(vec![3, 6], -1.0, 1.0);
        let kv = rng.uniform_tensor(vec![4, 10], -1.0, 1.0);
        let mut params: Vec<Param> = block.params().into_iter().cloned().collect();
        let cfg = block.cfg;
        let report = grad_check(&mut params, 1e-5, move |t, vars| {
            let mv = MhcaVars {
                cfg,
                w_q: vars[0],
                w_k: vars[1],
                w_v: vars[2],
                w_o: vars[3],
                ln_q_scale: vars[4],
                ln_q_shift: vars[5],
                ln_kv_scale: vars[6],
                ln_kv_shift: vars[7],
                ffn_w1: vars[8],
                ffn_w2: vars[9],
                ln_ffn_scale: vars[10],
                ln_ffn_shift: vars[11],
            };
            let vq = t.input(q.clone());
            let vkv = t.input(kv.clone());
            let (delta, _) = mhca_forward_t(t, vq, vkv, &mv)?;
            let sq = t.square(delta);
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "{:?}", report.worst());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let block = toy_block(19);
        let mut rng = SeededRng::new(20);
        for _ in 0..20 {
            let q = rng.uniform_tensor(vec![4, 6], -3.0, 3.0);
            let kv = rng.uniform_tensor(vec![5, 10], -3.0, 3.0);
            let w = attention_weights(&q, &kv, &block).unwrap();
            for h in 0..2 {
                for i in 0..4 {
                    let mut s = 0.0;
                    for j in 0..5 {
                        s += w.data()[h * 4 * 5 + i * 5 + j];
                    }
                    assert!((s - 1.0).abs() < 1e-10);
                }
            }
        }
    }
}
