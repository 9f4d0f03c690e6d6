//! Full network assembly: frozen stub encoders, gated parallel residual
//! fusion, knowledge/compensation modules, answer decoder, loss.

pub mod backbone;
pub mod decoder;
mod infer;
mod train;

pub use backbone::BackboneStub;
pub use decoder::{argmax_first, AnswerDecoder, DecoderVars};
pub use infer::{evaluate, predict_answer, visual_prefix_values};
pub use train::{
    encode_dataset, model_grad_check, train, EncodedDataset, EncodedSample, Optimizer, StepLoss,
    TrainReport, TrainSchedule,
};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::MhcaVars;
use crate::error::{Error, Result};
use crate::memory::MemoryBank;
use crate::pgke::{retrieve_topk, BankIndex, PgkeModule};
use crate::qasc::{FuseMode, QascModule, StaticFusion};
use crate::tensor::{
    load_checkpoint, save_checkpoint, tape::Tape, Param, SeededRng, Tensor, Var,
};

pub(crate) fn backbone_sinusoidal(len: usize, d: usize) -> Tensor {
    backbone::sinusoidal(len, d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Opt,
    Tir,
    Mul,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Opt => "opt",
            Modality::Tir => "tir",
            Modality::Mul => "mul",
        }
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "opt" => Ok(Modality::Opt),
            "tir" => Ok(Modality::Tir),
            "mul" => Ok(Modality::Mul),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Residual streams of both modalities concatenated along the sequence.
    SeqConcat,
    /// Element-wise mean of the two streams.
    Add,
    /// Per-token concatenation followed by a trainable down-projection.
    ConcatProject,
}

impl FusionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::SeqConcat => "seq-concat",
            FusionMode::Add => "add",
            FusionMode::ConcatProject => "concat-project",
        }
    }
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" | "seq-concat" => Ok(FusionMode::SeqConcat),
            "add" => Ok(FusionMode::Add),
            "concat" | "concat-project" => Ok(FusionMode::ConcatProject),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_head: usize,
    pub d_ffn: usize,
    pub patch: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub vocab_size: usize,
    pub t_max: usize,
    pub k: usize,
    pub tau: f64,
    pub aux_weight: f64,
    pub modality: Modality,
    pub fusion: FusionMode,
    pub pgke: bool,
    pub qasc: bool,
    pub backbone_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            d_head: 16,
            d_ffn: 128,
            patch: 8,
            img_h: 64,
            img_w: 64,
            vocab_size: 64,
            t_max: 4,
            k: 8,
            tau: 0.07,
            aux_weight: 0.1,
            modality: Modality::Mul,
            fusion: FusionMode::SeqConcat,
            pgke: true,
            qasc: true,
            backbone_seed: 9901,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.qasc && (self.modality != Modality::Mul || self.fusion != FusionMode::SeqConcat) {
            return Err(Error::Config(
                "qasc requires modality=mul and fusion=seq-concat".into(),
            ));
        }
        if self.modality != Modality::Mul && self.fusion != FusionMode::SeqConcat {
            return Err(Error::Config(
                "static fusion modes require modality=mul".into(),
            ));
        }
        if self.patch == 0 || self.img_h % self.patch != 0 || self.img_w % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch {}",
                self.img_h, self.img_w, self.patch
            )));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.k == 0 && self.pgke {
            return Err(Error::Config("pgke requires k >= 1".into()));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        (self.img_h / self.patch) * (self.img_w / self.patch)
    }
}

/// Scalar residual gates, initialized to exactly zero.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub alpha: Param,
    pub beta: Param,
}

impl GateParams {
    pub fn new() -> Self {
        GateParams {
            alpha: Param::new("gates.alpha", Tensor::scalar(0.0), true),
            beta: Param::new("gates.beta", Tensor::scalar(0.0), true),
        }
    }
}

impl Default for GateParams {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Debug)]
pub struct ModelState {
    pub cfg: ModelConfig,
    pub seed: u64,
    pub backbone: BackboneStub,
    pub pgke: Option<PgkeModule>,
    pub qasc: Option<QascModule>,
    pub fusion: Option<StaticFusion>,
    pub gates: GateParams,
    pub decoder: AnswerDecoder,
}

impl ModelState {
    /// Fresh model: frozen backbone from `cfg.backbone_seed`, trainable
    /// parts from per-component streams forked off `seed` (so a component's
    /// initialization does not depend on which other modules are enabled).
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let backbone = BackboneStub::new(
            cfg.d_model,
            cfg.patch,
            cfg.img_h,
            cfg.img_w,
            cfg.vocab_size,
            cfg.backbone_seed,
        )?;
        let root = SeededRng::new(seed);
        let pgke = if cfg.pgke {
            let mut rng = root.fork(1);
            Some(PgkeModule::init(
                cfg.d_model,
                2 * cfg.d_model,
                cfg.k,
                cfg.heads,
                cfg.d_head,
                cfg.d_ffn,
                &mut rng,
            )?)
        } else {
            None
        };
        let qasc = if cfg.qasc {
            let mut rng = root.fork(2);
            Some(QascModule::init(cfg.d_model, cfg.heads, cfg.d_head, cfg.d_ffn, &mut rng)?)
        } else {
            None
        };
        let fusion = match (cfg.modality, cfg.fusion) {
            (Modality::Mul, FusionMode::Add) => Some(StaticFusion::Add),
            (Modality::Mul, FusionMode::ConcatProject) => {
                let mut rng = root.fork(3);
                Some(StaticFusion::init(FuseMode::ConcatProject, cfg.d_model, &mut rng))
            }
            _ => None,
        };
        let decoder = {
            let mut rng = root.fork(4);
            AnswerDecoder::init(
                cfg.d_model,
                cfg.vocab_size,
                cfg.t_max,
                cfg.heads,
                cfg.d_head,
                cfg.d_ffn,
                &mut rng,
            )?
        };
        Ok(ModelState {
            cfg,
            seed,
            backbone,
            pgke,
            qasc,
            fusion,
            gates: GateParams::new(),
            decoder,
        })
    }

    /// Every parameter, trainable first (canonical order), frozen backbone
    /// last. Checkpoints follow this order.
    pub fn params(&self) -> Vec<&Param> {
        let mut ps: Vec<&Param> = vec![&self.gates.alpha, &self.gates.beta];
        if let Some(p) = &self.pgke {
            ps.extend(p.params());
        }
        if let Some(q) = &self.qasc {
            ps.extend(q.params());
        }
        if let Some(f) = &self.fusion {
            ps.extend(f.params());
        }
        ps.extend(self.decoder.params());
        ps.extend(self.backbone.params());
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps: Vec<&mut Param> = vec![&mut self.gates.alpha, &mut self.gates.beta];
        if let Some(p) = &mut self.pgke {
            ps.extend(p.params_mut());
        }
        if let Some(q) = &mut self.qasc {
            ps.extend(q.params_mut());
        }
        if let Some(f) = &mut self.fusion {
            ps.extend(f.params_mut());
        }
        ps.extend(self.decoder.params_mut());
        ps.extend(self.backbone.params_mut());
        ps
    }

    pub fn trainable_params(&self) -> Vec<&Param> {
        self.params().into_iter().filter(|p| p.trainable).collect()
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param> {
        self.params_mut().into_iter().filter(|p| p.trainable).collect()
    }

    /// Bind all trainable parameters onto a tape. The `trainable` list is
    /// parallel to [`ModelState::trainable_params`].
    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let alpha = tape.param(&self.gates.alpha);
        let beta = tape.param(&self.gates.beta);
        let pgke = self.pgke.as_ref().map(|p| PgkeVars {
            w_q: tape.param(&p.w_q),
            mhca: p.mhca.bind(tape),
        });
        let qasc = self.qasc.as_ref().map(|q| QascVars {
            t2o: q.t2o.bind(tape),
            o2t: q.o2t.bind(tape),
        });
        let fuse_proj = match &self.fusion {
            Some(StaticFusion::ConcatProject(p)) => Some(tape.param(p)),
            _ => None,
        };
        let decoder = self.decoder.bind(tape);
        ModelVars {
            alpha,
            beta,
            pgke,
            qasc,
            fuse_proj,
            decoder,
        }
    }

    /// Retrieval plus row gathering for the current question, when enabled.
    pub fn retrieve_rows(
        &self,
        q_vec: &Tensor,
        bank: Option<(&MemoryBank, &BankIndex)>,
    ) -> Result<Option<Tensor>> {
        match (&self.pgke, bank) {
            (Some(module), Some((bank, index))) => {
                let ret = retrieve_topk(q_vec, index, module)?;
                Ok(Some(index.gather(bank, &ret.indices)?))
            }
            (Some(_), None) => Err(Error::Param("pgke enabled but no memory bank supplied".into())),
            (None, _) => Ok(None),
        }
    }

    /// Teacher-forced logits on the tape plus attention-weight nodes.
    pub fn sample_forward_t(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        f_opt: Option<Var>,
        f_th: Option<Var>,
        q_vec: Var,
        retrieved: Option<Var>,
        prefix: &[usize],
    ) -> Result<(Var, Vec<Var>)> {
        let mut attn = Vec::new();
        let cfg = &self.cfg;

        let need_opt = cfg.modality != Modality::Tir;
        let need_th = cfg.modality != Modality::Opt;
        if need_opt && f_opt.is_none() {
            return Err(Error::Param("optical features required by this config".into()));
        }
        if need_th && f_th.is_none() {
            return Err(Error::Param("thermal features required by this config".into()));
        }

        // Knowledge increments (shared weights across modalities).
        let mut d_pgke_opt = None;
        let mut d_pgke_th = None;
        if let (Some(pv), Some(r)) = (&vars.pgke, retrieved) {
            if need_opt {
                let (d, w) = crate::pgke::pgke_residual_t(tape, f_opt.unwrap(), r, &pv.mhca)?;
                d_pgke_opt = Some(d);
                attn.extend(w);
            }
            if need_th {
                let (d, w) = crate::pgke::pgke_residual_t(tape, f_th.unwrap(), r, &pv.mhca)?;
                d_pgke_th = Some(d);
                attn.extend(w);
            }
        }

        // Compensation increments from the original inputs.
        let mut d_qasc_opt = None;
        let mut d_qasc_th = None;
        if let Some(qv) = &vars.qasc {
            let ((doo, dtt), w) =
                crate::qasc::qasc_residuals_t(tape, f_opt.unwrap(), f_th.unwrap(), &qv.t2o, &qv.o2t)?;
            d_qasc_opt = Some(doo);
            d_qasc_th = Some(dtt);
            attn.extend(w);
        }

        let stream_opt = match f_opt {
            Some(f) => Some(fuse_residual_t(tape, f, d_pgke_opt, d_qasc_opt, vars.alpha, vars.beta)?),
            None => None,
        };
        let stream_th = match f_th {
            Some(f) => Some(fuse_residual_t(tape, f, d_pgke_th, d_qasc_th, vars.alpha, vars.beta)?),
            None => None,
        };

        let vis = match (cfg.modality, cfg.fusion) {
            (Modality::Opt, _) => stream_opt.unwrap(),
            (Modality::Tir, _) => stream_th.unwrap(),
            (Modality::Mul, FusionMode::SeqConcat) => {
                tape.concat_rows(stream_opt.unwrap(), stream_th.unwrap())?
            }
            (Modality::Mul, FusionMode::Add) => {
                let s = tape.add(stream_opt.unwrap(), stream_th.unwrap())?;
                tape.scale(s, 0.5)
            }
            (Modality::Mul, FusionMode::ConcatProject) => {
                let cat = tape.concat_cols(stream_opt.unwrap(), stream_th.unwrap())?;
                let proj = vars
                    .fuse_proj
                    .ok_or_else(|| Error::Param("concat-project fusion missing projection".into()))?;
                tape.matmul(cat, proj)?
            }
        };

        let (logits, dec_attn) = self.decoder.forward_t(tape, &vars.decoder, q_vec, vis, prefix)?;
        attn.extend(dec_attn);
        Ok((logits, attn))
    }

    /// Checkpoint plus JSON config sidecar.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(&self.params(), &dir.join("model.mtcw"))?;
        let sidecar = SavedModel {
            config: self.cfg,
            seed: self.seed,
        };
        let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("model.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<ModelState> {
        let json = std::fs::read_to_string(dir.join("model.json"))
            .map_err(|_| Error::Format(format!("missing model.json in {dir:?}")))?;
        let sidecar: SavedModel =
            serde_json::from_str(&json).map_err(|e| Error::Format(format!("model.json: {e}")))?;
        let mut state = ModelState::new(sidecar.config, sidecar.seed)?;
        let loaded = load_checkpoint(&dir.join("model.mtcw"))?;
        let mut by_name: std::collections::HashMap<String, Tensor> = loaded.into_iter().collect();
        for p in state.params_mut() {
            let t = by_name
                .remove(&p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint missing param {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint param {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Format(format!("checkpoint has unknown param {extra}")));
        }
        Ok(state)
    }
}

#[derive(Serialize, Deserialize)]
struct SavedModel {
    config: ModelConfig,
    seed: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct PgkeVars {
    pub w_q: Var,
    pub mhca: MhcaVars,
}

#[derive(Clone, Copy, Debug)]
pub struct QascVars {
    pub t2o: MhcaVars,
    pub o2t: MhcaVars,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub alpha: Var,
    pub beta: Var,
    pub pgke: Option<PgkeVars>,
    pub qasc: Option<QascVars>,
    pub fuse_proj: Option<Var>,
    pub decoder: DecoderVars,
}

impl ModelVars {
    /// Vars of the trainable parameters, parallel to
    /// [`ModelState::trainable_params`].
    pub fn trainable_vars(&self) -> Vec<Var> {
        let mut vs = vec![self.alpha, self.beta];
        if let Some(p) = &self.pgke {
            vs.push(p.w_q);
            vs.extend(mhca_var_list(&p.mhca));
        }
        if let Some(q) = &self.qasc {
            vs.extend(mhca_var_list(&q.t2o));
            vs.extend(mhca_var_list(&q.o2t));
        }
        if let Some(f) = self.fuse_proj {
            vs.push(f);
        }
        let d = &self.decoder;
        vs.extend([d.q_in, d.tok_embed, d.sa_ln_scale, d.sa_ln_shift, d.sa_wq, d.sa_wk, d.sa_wv, d.sa_wo]);
        vs.extend([d.ca_ln_scale, d.ca_ln_shift, d.ca_wq, d.ca_wk, d.ca_wv, d.ca_wo]);
        vs.extend([d.ffn_ln_scale, d.ffn_ln_shift, d.ffn_w1, d.ffn_w2]);
        vs.extend([d.ln_f_scale, d.ln_f_shift, d.w_out, d.b_out]);
        vs
    }
}

fn mhca_var_list(m: &MhcaVars) -> [Var; 12] {
    [
        m.w_q, m.w_k, m.w_v, m.w_o, m.ln_q_scale, m.ln_q_shift, m.ln_kv_scale, m.ln_kv_shift,
        m.ffn_w1, m.ffn_w2, m.ln_ffn_scale, m.ln_ffn_shift,
    ]
}

/// Gated residual combination on the tape: `f + α·d_pgke + β·d_qasc`, with
/// absent module increments treated as zero.
pub fn fuse_residual_t(
    tape: &mut Tape,
    f: Var,
    d_pgke: Option<Var>,
    d_qasc: Option<Var>,
    alpha: Var,
    beta: Var,
) -> Result<Var> {
    let mut out = f;
    if let Some(d) = d_pgke {
        let s = tape.scale_var(d, alpha)?;
        out = tape.add(out, s)?;
    }
    if let Some(d) = d_qasc {
        let s = tape.scale_var(d, beta)?;
        out = tape.add(out, s)?;
    }
    Ok(out)
}

/// Value-path gated residual combination, same arithmetic as the tape op.
pub fn fuse_residual(
    f: &Tensor,
    d_pgke: Option<&Tensor>,
    d_qasc: Option<&Tensor>,
    gates: &GateParams,
) -> Result<Tensor> {
    let alpha = gates.alpha.value.data()[0];
    let beta = gates.beta.value.data()[0];
    let mut out = f.clone();
    if let Some(d) = d_pgke {
        if d.shape() != f.shape() {
            return Err(Error::dim("fuse_residual", f.shape(), d.shape()));
        }
        for (o, &v) in out.data_mut().iter_mut().zip(d.data()) {
            *o += alpha * v;
        }
    }
    if let Some(d) = d_qasc {
        if d.shape() != f.shape() {
            return Err(Error::dim("fuse_residual", f.shape(), d.shape()));
        }
        for (o, &v) in out.data_mut().iter_mut().zip(d.data()) {
            *o += beta * v;
        }
    }
    Ok(out)
}

/// Negative log-likelihood of the target ids under row-wise softmax,
/// summed over rows (value path; the tape op computes the same sum).
pub fn nll_loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    if targets.len() != logits.rows2() {
        return Err(Error::dim("nll_loss", &[logits.rows2()], &[targets.len()]));
    }
    let mut total = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let row = logits.row(i);
        if y >= row.len() {
            return Err(Error::Param(format!("target {y} out of vocab {}", row.len())));
        }
        total += crate::tensor::tape::log_sum_exp(row) - row[y];
    }
    Ok(total)
}

/// InfoNCE-style alignment of the projected question with its own scene's
/// prototypes: `lse(all sims/τ) − lse(positive sims/τ)`. This is the path
/// that trains the retrieval projection, since hard top-k passes no
/// gradient.
pub fn aux_alignment_t(
    tape: &mut Tape,
    w_q: Var,
    q_vec: Var,
    bank_unit: Var,
    positives: &[usize],
    tau: f64,
) -> Result<Var> {
    let n = tape.value(bank_unit).rows2();
    let proj = tape.matmul(q_vec, w_q)?;
    let sq = tape.square(proj);
    let n2 = tape.sum(sq);
    let inv = tape.rsqrt_scalar(n2, 1e-24)?;
    let unit = tape.scale_var(proj, inv)?;
    let sims = tape.matmul_nt(bank_unit, unit)?;
    let scaled = tape.scale(sims, 1.0 / tau);
    let all: Vec<usize> = (0..n).collect();
    let lse_all = tape.log_sum_exp_masked(scaled, &all)?;
    let lse_pos = tape.log_sum_exp_masked(scaled, positives)?;
    tape.sub(lse_all, lse_pos)
}
