//! Tiny trainable answer decoder: one causal self-attention layer, one
//! cross-attention layer over the visual prefix, a feed-forward sub-layer
//! and a vocabulary projection. Position 0 carries the projected question
//! vector; teacher-forced row t predicts target token t.
//!
//! The cross-attention keys/values are computed from the *raw* visual
//! tokens (no per-token normalization on that side): global statistics such
//! as overall brightness or blur live in the token means, and normalizing
//! them away makes those signals unreadable for a single-layer decoder.

use crate::data::EOS;
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, softmax_rows, tape::Tape, Param, SeededRng, Tensor, Var};

#[derive(Clone, Debug)]
pub struct AnswerDecoder {
    pub d_model: usize,
    pub vocab_size: usize,
    pub t_max: usize,
    pub heads: usize,
    pub d_head: usize,
    pub q_in: Param,
    pub tok_embed: Param,
    pub pos: Tensor,
    pub sa_ln_scale: Param,
    pub sa_ln_shift: Param,
    pub sa_wq: Param,
    pub sa_wk: Param,
    pub sa_wv: Param,
    pub sa_wo: Param,
    pub ca_ln_scale: Param,
    pub ca_ln_shift: Param,
    pub ca_wq: Param,
    pub ca_wk: Param,
    pub ca_wv: Param,
    pub ca_wo: Param,
    pub ffn_ln_scale: Param,
    pub ffn_ln_shift: Param,
    pub ffn_w1: Param,
    pub ffn_w2: Param,
    pub ln_f_scale: Param,
    pub ln_f_shift: Param,
    pub w_out: Param,
    pub b_out: Param,
}

impl AnswerDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        d_model: usize,
        vocab_size: usize,
        t_max: usize,
        heads: usize,
        d_head: usize,
        d_ffn: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Param("t_max must be >= 1".into()));
        }
        let inner = heads * d_head;
        Ok(AnswerDecoder {
            d_model,
            vocab_size,
            t_max,
            heads,
            d_head,
            q_in: Param::init_weight("decoder.q_in", d_model, d_model, rng),
            tok_embed: Param::init_weight("decoder.tok_embed", vocab_size, d_model, rng),
            pos: super::backbone_sinusoidal(t_max + 1, d_model),
            sa_ln_scale: Param::init_ones("decoder.sa_ln.scale", vec![d_model]),
            sa_ln_shift: Param::init_zeros("decoder.sa_ln.shift", vec![d_model], rng),
            sa_wq: Param::init_weight("decoder.sa.w_q", d_model, inner, rng),
            sa_wk: Param::init_weight("decoder.sa.w_k", d_model, inner, rng),
            sa_wv: Param::init_weight("decoder.sa.w_v", d_model, inner, rng),
            sa_wo: Param::init_weight("decoder.sa.w_o", inner, d_model, rng),
            ca_ln_scale: Param::init_ones("decoder.ca_ln.scale", vec![d_model]),
            ca_ln_shift: Param::init_zeros("decoder.ca_ln.shift", vec![d_model], rng),
            ca_wq: Param::init_weight("decoder.ca.w_q", d_model, inner, rng),
            ca_wk: Param::init_weight("decoder.ca.w_k", d_model, inner, rng),
            ca_wv: Param::init_weight("decoder.ca.w_v", d_model, inner, rng),
            ca_wo: Param::init_weight("decoder.ca.w_o", inner, d_model, rng),
            ffn_ln_scale: Param::init_ones("decoder.ffn_ln.scale", vec![d_model]),
            ffn_ln_shift: Param::init_zeros("decoder.ffn_ln.shift", vec![d_model], rng),
            ffn_w1: Param::init_weight("decoder.ffn.w1", d_model, d_ffn, rng),
            ffn_w2: Param::init_weight("decoder.ffn.w2", d_ffn, d_model, rng),
            ln_f_scale: Param::init_ones("decoder.ln_f.scale", vec![d_model]),
            ln_f_shift: Param::init_zeros("decoder.ln_f.shift", vec![d_model], rng),
            w_out: Param::init_weight("decoder.w_out", d_model, vocab_size, rng),
            b_out: Param::init_zeros("decoder.b_out", vec![vocab_size], rng),
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.q_in,
            &self.tok_embed,
            &self.sa_ln_scale,
            &self.sa_ln_shift,
            &self.sa_wq,
            &self.sa_wk,
            &self.sa_wv,
            &self.sa_wo,
            &self.ca_ln_scale,
            &self.ca_ln_shift,
            &self.ca_wq,
            &self.ca_wk,
            &self.ca_wv,
            &self.ca_wo,
            &self.ffn_ln_scale,
            &self.ffn_ln_shift,
            &self.ffn_w1,
            &self.ffn_w2,
            &self.ln_f_scale,
            &self.ln_f_shift,
            &self.w_out,
            &self.b_out,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.q_in,
            &mut self.tok_embed,
            &mut self.sa_ln_scale,
            &mut self.sa_ln_shift,
            &mut self.sa_wq,
            &mut self.sa_wk,
            &mut self.sa_wv,
            &mut self.sa_wo,
            &mut self.ca_ln_scale,
            &mut self.ca_ln_shift,
            &mut self.ca_wq,
            &mut self.ca_wk,
            &mut self.ca_wv,
            &mut self.ca_wo,
            &mut self.ffn_ln_scale,
            &mut self.ffn_ln_shift,
            &mut self.ffn_w1,
            &mut self.ffn_w2,
            &mut self.ln_f_scale,
            &mut self.ln_f_shift,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> DecoderVars {
        DecoderVars {
            q_in: tape.param(&self.q_in),
            tok_embed: tape.param(&self.tok_embed),
            sa_ln_scale: tape.param(&self.sa_ln_scale),
            sa_ln_shift: tape.param(&self.sa_ln_shift),
            sa_wq: tape.param(&self.sa_wq),
            sa_wk: tape.param(&self.sa_wk),
            sa_wv: tape.param(&self.sa_wv),
            sa_wo: tape.param(&self.sa_wo),
            ca_ln_scale: tape.param(&self.ca_ln_scale),
            ca_ln_shift: tape.param(&self.ca_ln_shift),
            ca_wq: tape.param(&self.ca_wq),
            ca_wk: tape.param(&self.ca_wk),
            ca_wv: tape.param(&self.ca_wv),
            ca_wo: tape.param(&self.ca_wo),
            ffn_ln_scale: tape.param(&self.ffn_ln_scale),
            ffn_ln_shift: tape.param(&self.ffn_ln_shift),
            ffn_w1: tape.param(&self.ffn_w1),
            ffn_w2: tape.param(&self.ffn_w2),
            ln_f_scale: tape.param(&self.ln_f_scale),
            ln_f_shift: tape.param(&self.ln_f_shift),
            w_out: tape.param(&self.w_out),
            b_out: tape.param(&self.b_out),
        }
    }

    /// Teacher-forced logits `[T × V]` where `T = prefix.len() + 1`; row t
    /// sees the question slot plus prefix tokens `< t` (causal mask).
    /// Also returns the attention nodes (self heads, then cross heads).
    pub fn forward_t(
        &self,
        tape: &mut Tape,
        vars: &DecoderVars,
        q_vec: Var,
        vis: Var,
        prefix: &[usize],
    ) -> Result<(Var, Vec<Var>)> {
        let t_len = prefix.len() + 1;
        if t_len > self.t_max + 1 {
            return Err(Error::Param(format!(
                "prefix length {} exceeds t_max {}",
                prefix.len(),
                self.t_max
            )));
        }
        let x0 = tape.matmul(q_vec, vars.q_in)?;
        let x = if prefix.is_empty() {
            x0
        } else {
            let emb = tape.gather_rows(vars.tok_embed, prefix)?;
            tape.concat_rows(x0, emb)?
        };
        let pos_rows = {
            let mut data = Vec::with_capacity(t_len * self.d_model);
            for t in 0..t_len {
                data.extend_from_slice(self.pos.row(t));
            }
            Tensor::new(vec![t_len, self.d_model], data)?
        };
        let posv = tape.input(pos_rows);
        let x = tape.add(x, posv)?;

        // Causal self-attention.
        let xn = tape.layer_norm(x, vars.sa_ln_scale, vars.sa_ln_shift)?;
        let q_all = tape.matmul(xn, vars.sa_wq)?;
        let k_all = tape.matmul(xn, vars.sa_wk)?;
        let v_all = tape.matmul(xn, vars.sa_wv)?;
        let mask = causal_mask(t_len);
        let scale = 1.0 / (self.d_head as f64).sqrt();
        let mut ctx = None;
        let mut attn_vars = Vec::new();
        for h in 0..self.heads {
            let off = h * self.d_head;
            let qh = tape.slice_cols(q_all, off, self.d_head)?;
            let kh = tape.slice_cols(k_all, off, self.d_head)?;
            let vh = tape.slice_cols(v_all, off, self.d_head)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.scale(scores, scale);
            let w = tape.masked_softmax_rows(scaled, mask.clone())?;
            attn_vars.push(w);
            let c = tape.matmul(w, vh)?;
            ctx = Some(match ctx {
                None => c,
                Some(acc) => tape.concat_cols(acc, c)?,
            });
        }
        let y = tape.matmul(ctx.expect("heads >= 1"), vars.sa_wo)?;
        let x1 = tape.add(x, y)?;

        // Cross-attention over the raw visual prefix.
        let x1n = tape.layer_norm(x1, vars.ca_ln_scale, vars.ca_ln_shift)?;
        let cq_all = tape.matmul(x1n, vars.ca_wq)?;
        let ck_all = tape.matmul(vis, vars.ca_wk)?;
        let cv_all = tape.matmul(vis, vars.ca_wv)?;
        let mut cctx = None;
        for h in 0..self.heads {
            let off = h * self.d_head;
            let qh = tape.slice_cols(cq_all, off, self.d_head)?;
            let kh = tape.slice_cols(ck_all, off, self.d_head)?;
            let vh = tape.slice_cols(cv_all, off, self.d_head)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.scale(scores, scale);
            let w = tape.softmax_rows(scaled, 1.0)?;
            attn_vars.push(w);
            let c = tape.matmul(w, vh)?;
            cctx = Some(match cctx {
                None => c,
                Some(acc) => tape.concat_cols(acc, c)?,
            });
        }
        let cy = tape.matmul(cctx.expect("heads >= 1"), vars.ca_wo)?;
        let x2 = tape.add(x1, cy)?;

        // Feed-forward sub-layer.
        let x2n = tape.layer_norm(x2, vars.ffn_ln_scale, vars.ffn_ln_shift)?;
        let h1 = tape.matmul(x2n, vars.ffn_w1)?;
        let h1 = tape.gelu(h1);
        let h2 = tape.matmul(h1, vars.ffn_w2)?;
        let x3 = tape.add(x2, h2)?;

        let xf = tape.layer_norm(x3, vars.ln_f_scale, vars.ln_f_shift)?;
        let logits = tape.matmul(xf, vars.w_out)?;
        let logits = tape.add_row(logits, vars.b_out)?;
        Ok((logits, attn_vars))
    }

    /// Key/value projections of a visual prefix, reusable across decode
    /// steps of one sample.
    pub fn precompute_cross_kv(&self, vis: &Tensor) -> Result<DecoderKvCache> {
        Ok(DecoderKvCache {
            k_all: matmul(vis, &self.ca_wk.value)?,
            v_all: matmul(vis, &self.ca_wv.value)?,
        })
    }

    /// Greedy decode (value path): argmax per step, first-maximum tie rule,
    /// stops at the end token or after `t_max` tokens. Matches the
    /// teacher-forced tape path on the same prefix.
    pub fn greedy_decode(&self, q_vec: &Tensor, vis: &Tensor) -> Result<Vec<usize>> {
        let cache = self.precompute_cross_kv(vis)?;
        let mut tokens: Vec<usize> = Vec::new();
        for _ in 0..self.t_max {
            let logits = self.step_logits_cached(q_vec, &tokens, &cache)?;
            let tok = argmax_first(&logits);
            if tok == EOS {
                break;
            }
            tokens.push(tok);
        }
        Ok(tokens)
    }

    /// Logits of the last row given a decoded prefix, with cached cross
    /// projections.
    pub fn step_logits_cached(
        &self,
        q_vec: &Tensor,
        prefix: &[usize],
        cache: &DecoderKvCache,
    ) -> Result<Vec<f64>> {
        use crate::attention::{layer_norm, slice_cols_val};
        let t_len = prefix.len() + 1;
        let mut x = Tensor::zeros(vec![t_len, self.d_model]);
        let x0 = matmul(q_vec, &self.q_in.value)?;
        x.row_mut(0).copy_from_slice(x0.row(0));
        for (t, &tok) in prefix.iter().enumerate() {
            x.row_mut(t + 1).copy_from_slice(self.tok_embed.value.row(tok));
        }
        for t in 0..t_len {
            let pos_row: Vec<f64> = self.pos.row(t).to_vec();
            for (a, b) in x.row_mut(t).iter_mut().zip(pos_row) {
                *a += b;
            }
        }

        let xn = layer_norm(&x, &self.sa_ln_scale, &self.sa_ln_shift)?;
        let q_all = matmul(&xn, &self.sa_wq.value)?;
        let k_all = matmul(&xn, &self.sa_wk.value)?;
        let v_all = matmul(&xn, &self.sa_wv.value)?;
        let mask = causal_mask(t_len);
        let scale = 1.0 / (self.d_head as f64).sqrt();
        let mut ctx = Tensor::zeros(vec![t_len, self.heads * self.d_head]);
        for h in 0..self.heads {
            let off = h * self.d_head;
            let qh = slice_cols_val(&q_all, off, self.d_head);
            let kh = slice_cols_val(&k_all, off, self.d_head);
            let vh = slice_cols_val(&v_all, off, self.d_head);
            let mut scores = matmul_nt(&qh, &kh)?;
            scores.scale_in_place(scale);
            scores.add_in_place(&mask);
            let w = softmax_rows(&scores, 1.0)?;
            let c = matmul(&w, &vh)?;
            for i in 0..t_len {
                ctx.row_mut(i)[off..off + self.d_head].copy_from_slice(c.row(i));
            }
        }
        let y = matmul(&ctx, &self.sa_wo.value)?;
        let mut x1 = x;
        x1.add_in_place(&y);

        let x1n = layer_norm(&x1, &self.ca_ln_scale, &self.ca_ln_shift)?;
        let cq_all = matmul(&x1n, &self.ca_wq.value)?;
        let mut cctx = Tensor::zeros(vec![t_len, self.heads * self.d_head]);
        for h in 0..self.heads {
            let off = h * self.d_head;
            let qh = slice_cols_val(&cq_all, off, self.d_head);
            let kh = slice_cols_val(&cache.k_all, off, self.d_head);
            let vh = slice_cols_val(&cache.v_all, off, self.d_head);
            let mut scores = matmul_nt(&qh, &kh)?;
            scores.scale_in_place(scale);
            let w = softmax_rows(&scores, 1.0)?;
            let c = matmul(&w, &vh)?;
            for i in 0..t_len {
                cctx.row_mut(i)[off..off + self.d_head].copy_from_slice(c.row(i));
            }
        }
        let cy = matmul(&cctx, &self.ca_wo.value)?;
        let mut x2 = x1;
        x2.add_in_place(&cy);

        let x2n = layer_norm(&x2, &self.ffn_ln_scale, &self.ffn_ln_shift)?;
        let h1 = matmul(&x2n, &self.ffn_w1.value)?.map(crate::tensor::gelu);
        let h2 = matmul(&h1, &self.ffn_w2.value)?;
        let mut x3 = x2;
        x3.add_in_place(&h2);

        let xf = layer_norm(&x3, &self.ln_f_scale, &self.ln_f_shift)?;
        let logits = matmul(&xf, &self.w_out.value)?;
        let last = logits.row(t_len - 1);
        Ok(last
            .iter()
            .zip(self.b_out.value.data())
            .map(|(a, b)| a + b)
            .collect())
    }
}

pub struct DecoderKvCache {
    pub k_all: Tensor,
    pub v_all: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub q_in: Var,
    pub tok_embed: Var,
    pub sa_ln_scale: Var,
    pub sa_ln_shift: Var,
    pub sa_wq: Var,
    pub sa_wk: Var,
    pub sa_wv: Var,
    pub sa_wo: Var,
    pub ca_ln_scale: Var,
    pub ca_ln_shift: Var,
    pub ca_wq: Var,
    pub ca_wk: Var,
    pub ca_wv: Var,
    pub ca_wo: Var,
    pub ffn_ln_scale: Var,
    pub ffn_ln_shift: Var,
    pub ffn_w1: Var,
    pub ffn_w2: Var,
    pub ln_f_scale: Var,
    pub ln_f_shift: Var,
    pub w_out: Var,
    pub b_out: Var,
}

fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros(vec![t, t]);
    for i in 0..t {
        for j in (i + 1)..t {
            m.set2(i, j, -1e30);
        }
    }
    m
}

/// First maximum wins, which breaks ties toward the lowest token id.
pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    let mut bv = f64::NEG_INFINITY;
    for (i, &v) in xs.iter().enumerate() {
        if v > bv {
            bv = v;
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decoder(seed: u64) -> AnswerDecoder {
        let mut rng = SeededRng::new(seed);
        AnswerDecoder::init(8, 10, 4, 2, 4, 16, &mut rng).unwrap()
    }

    #[test]
    fn teacher_forced_matches_stepwise_walk() {
        let dec = decoder(3);
        let mut rng = SeededRng::new(4);
        let q = rng.uniform_tensor(vec![1, 8], -1.0, 1.0);
        let vis = rng.uniform_tensor(vec![6, 8], -1.0, 1.0);
        let prefix = [4usize, 7, 1];

        let mut tape = Tape::new();
        let vq = tape.input(q.clone());
        let vv = tape.input(vis.clone());
        let vars = dec.bind(&mut tape);
        let (logits, _) = dec.forward_t(&mut tape, &vars, vq, vv, &prefix).unwrap();
        let teacher = tape.value(logits).clone();

        let cache = dec.precompute_cross_kv(&vis).unwrap();
        for t in 0..=prefix.len() {
            let step = dec.step_logits_cached(&q, &prefix[..t], &cache).unwrap();
            for v in 0..10 {
                assert!(
                    (teacher.at2(t, v) - step[v]).abs() < 1e-10,
                    "row {t} vocab {v}: {} vs {}",
                    teacher.at2(t, v),
                    step[v]
                );
            }
        }
    }

    #[test]
    fn rigged_eos_first_gives_empty_answer() {
        let mut dec = decoder(5);
        // Huge bias toward the end token: greedy stops immediately.
        dec.b_out.value.data_mut()[EOS] = 1e6;
        let mut rng = SeededRng::new(6);
        let q = rng.uniform_tensor(vec![1, 8], -1.0, 1.0);
        let vis = rng.uniform_tensor(vec![4, 8], -1.0, 1.0);
        let out = dec.greedy_decode(&q, &vis).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn decode_is_deterministic_and_bounded() {
        let dec = decoder(7);
        let mut rng = SeededRng::new(8);
        let q = rng.uniform_tensor(vec![1, 8], -1.0, 1.0);
        let vis = rng.uniform_tensor(vec![4, 8], -1.0, 1.0);
        let a = dec.greedy_decode(&q, &vis).unwrap();
        let b = dec.greedy_decode(&q, &vis).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 4);
    }

    #[test]
    fn greedy_matches_manual_argmax_walk() {
        let dec = decoder(9);
        let mut rng = SeededRng::new(10);
        let q = rng.uniform_tensor(vec![1, 8], -1.0, 1.0);
        let vis = rng.uniform_tensor(vec![5, 8], -1.0, 1.0);
        let cache = dec.precompute_cross_kv(&vis).unwrap();
        // Manual two-step walk.
        let l0 = dec.step_logits_cached(&q, &[], &cache).unwrap();
        let t0 = argmax_first(&l0);
        let mut manual = Vec::new();
        if t0 != EOS {
            manual.push(t0);
            let l1 = dec.step_logits_cached(&q, &manual, &cache).unwrap();
            let t1 = argmax_first(&l1);
            if t1 != EOS {
                manual.push(t1);
            }
        }
        let greedy = dec.greedy_decode(&q, &vis).unwrap();
        assert_eq!(&greedy[..manual.len().min(greedy.len())], &manual[..]);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_first(&[5.0]), 0);
    }
}
