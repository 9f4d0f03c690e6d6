//! Dataset encoding through the frozen backbone, the training loop, and a
//! whole-model finite-difference gradient check.

use std::collections::HashMap;
use std::f64::consts::PI;

use rayon::prelude::*;

use super::{aux_alignment_t, ModelState, ModelVars, Modality};
use crate::data::{modality_swap_partner, Condition, QType, SceneSample, Vocab, EOS};
use crate::error::{Error, Result};
use crate::memory::{distill_phrase, MemoryBank, PhraseOutcome};
use crate::pgke::BankIndex;
use crate::tensor::{tape::Tape, GradCheckEntry, GradCheckReport, SeededRng, Tensor, Var};

/// One training/evaluation sample, pre-encoded through the frozen backbone.
#[derive(Clone, Debug)]
pub struct EncodedSample {
    pub scene_pos: usize,
    /// Feature index for the thermal stream; differs from `scene_pos` for
    /// negative modality-match samples (partner swap).
    pub tir_pos: usize,
    pub scene_id: u64,
    pub condition: Condition,
    pub qtype: QType,
    pub question: String,
    pub reference: String,
    pub q_vec: Tensor,
    pub prefix: Vec<usize>,
    pub targets: Vec<usize>,
    pub aux_positives: Vec<usize>,
}

/// Frozen features per scene plus the flattened QA samples.
#[derive(Clone, Debug)]
pub struct EncodedDataset {
    pub features: Vec<(Tensor, Tensor)>,
    pub samples: Vec<EncodedSample>,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Encode a split: frozen image features per scene, token ids and aux
/// retrieval positives per QA pair.
pub fn encode_dataset(
    data: &[SceneSample],
    backbone: &super::BackboneStub,
    vocab: &Vocab,
    bank: Option<&MemoryBank>,
    t_max: usize,
) -> Result<EncodedDataset> {
    if data.is_empty() {
        return Err(Error::Param("encode_dataset: empty split".into()));
    }
    let features: Result<Vec<(Tensor, Tensor)>> = data
        .par_iter()
        .map(|s| {
            let f_opt = backbone.encode_image(&s.pair.opt, Modality::Opt)?;
            let f_th = backbone.encode_image(&s.pair.tir, Modality::Tir)?;
            Ok((f_opt, f_th))
        })
        .collect();
    let features = features?;

    // (scene, event kind) → bank row indices, for the alignment loss.
    let mut positive_rows: HashMap<(u64, crate::memory::EventKind), Vec<usize>> = HashMap::new();
    if let Some(bank) = bank {
        for (i, row) in bank.rows.iter().enumerate() {
            positive_rows
                .entry((row.source_scene, row.phrase.event_kind))
                .or_default()
                .push(i);
        }
    }

    let n = data.len();
    let mut samples = Vec::new();
    for (pos, s) in data.iter().enumerate() {
        for qa in &s.qas {
            let q_ids = vocab.encode(&qa.question)?;
            let q_vec = backbone.encode_question(&q_ids)?;
            let mut targets = vocab.encode(&qa.answer)?;
            targets.push(EOS);
            targets.truncate(t_max);
            let prefix = targets[..targets.len() - 1].to_vec();
            let tir_pos = if qa.qtype == QType::ModalityMatch && qa.answer == "no" {
                modality_swap_partner(pos as u64, n) as usize
            } else {
                pos
            };
            let aux_positives = match distill_phrase(&s.scene, qa) {
                PhraseOutcome::Grounded(p) => positive_rows
                    .get(&(s.scene.id, p.event_kind))
                    .cloned()
                    .unwrap_or_default(),
                PhraseOutcome::NoReferent => Vec::new(),
            };
            samples.push(EncodedSample {
                scene_pos: pos,
                tir_pos,
                scene_id: s.scene.id,
                condition: s.scene.condition,
                qtype: qa.qtype,
                question: qa.question.clone(),
                reference: qa.answer.clone(),
                q_vec,
                prefix,
                targets,
                aux_positives,
            });
        }
    }
    Ok(EncodedDataset { features, samples })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    Momentum(f64),
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainSchedule {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

#[derive(Clone, Copy, Debug)]
pub struct StepLoss {
    pub main: f64,
    pub aux: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub trace: Vec<StepLoss>,
}

impl TrainReport {
    pub fn initial_main(&self) -> f64 {
        self.trace.first().map(|s| s.main).unwrap_or(f64::NAN)
    }

    pub fn final_main(&self) -> f64 {
        self.trace.last().map(|s| s.main).unwrap_or(f64::NAN)
    }
}

/// Everything one sample contributes to a step's tape.
pub(crate) struct PreparedSample<'a> {
    pub f_opt: Option<&'a Tensor>,
    pub f_th: Option<&'a Tensor>,
    pub q_vec: &'a Tensor,
    pub retrieved: Option<Tensor>,
    pub prefix: &'a [usize],
    pub targets: &'a [usize],
    pub aux_positives: &'a [usize],
}

pub(crate) fn prepare_sample<'a>(
    state: &ModelState,
    data: &'a EncodedDataset,
    sample: &'a EncodedSample,
    bank: Option<(&MemoryBank, &BankIndex)>,
) -> Result<PreparedSample<'a>> {
    let need_opt = state.cfg.modality != Modality::Tir;
    let need_th = state.cfg.modality != Modality::Opt;
    let retrieved = state.retrieve_rows(&sample.q_vec, bank)?;
    Ok(PreparedSample {
        f_opt: need_opt.then(|| &data.features[sample.scene_pos].0),
        f_th: need_th.then(|| &data.features[sample.tir_pos].1),
        q_vec: &sample.q_vec,
        retrieved,
        prefix: &sample.prefix,
        targets: &sample.targets,
        aux_positives: &sample.aux_positives,
    })
}

/// Batch loss on a fresh tape: mean token-NLL plus the weighted alignment
/// term averaged over samples that have positives.
pub(crate) fn build_step_loss(
    state: &ModelState,
    tape: &mut Tape,
    prepared: &[PreparedSample<'_>],
    bank_unit: Option<&Tensor>,
) -> Result<(ModelVars, Var, Var, Option<Var>)> {
    let vars = state.bind(tape);
    let bank_unit_var = bank_unit.map(|t| tape.input(t.clone()));
    let mut mains: Vec<Var> = Vec::with_capacity(prepared.len());
    let mut auxes: Vec<Var> = Vec::new();
    for p in prepared {
        let q_var = tape.input(p.q_vec.clone());
        let f_opt = p.f_opt.map(|t| tape.input(t.clone()));
        let f_th = p.f_th.map(|t| tape.input(t.clone()));
        let retrieved = p.retrieved.as_ref().map(|t| tape.input(t.clone()));
        let (logits, _) = state.sample_forward_t(tape, &vars, f_opt, f_th, q_var, retrieved, p.prefix)?;
        mains.push(tape.nll_rows(logits, p.targets)?);
        if let (Some(pv), Some(bu)) = (&vars.pgke, bank_unit_var) {
            if !p.aux_positives.is_empty() {
                auxes.push(aux_alignment_t(
                    tape,
                    pv.w_q,
                    q_var,
                    bu,
                    p.aux_positives,
                    state.cfg.tau,
                )?);
            }
        }
    }
    let mut main_sum = mains[0];
    for &m in &mains[1..] {
        main_sum = tape.add(main_sum, m)?;
    }
    let main_mean = tape.scale(main_sum, 1.0 / mains.len() as f64);
    let aux_mean = if auxes.is_empty() {
        None
    } else {
        let mut s = auxes[0];
        for &a in &auxes[1..] {
            s = tape.add(s, a)?;
        }
        Some(tape.scale(s, 1.0 / auxes.len() as f64))
    };
    let total = match aux_mean {
        Some(a) => {
            let w = tape.scale(a, state.cfg.aux_weight);
            tape.add(main_mean, w)?
        }
        None => main_mean,
    };
    Ok((vars, total, main_mean, aux_mean))
}

/// Gradient descent on the trainable parameters with a cosine-decayed step
/// size. Frozen backbone parameters are never touched. Deterministic given
/// the schedule seed.
pub fn train(
    state: &mut ModelState,
    data: &EncodedDataset,
    bank: Option<(&MemoryBank, &BankIndex)>,
    sched: &TrainSchedule,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Param("train: empty dataset".into()));
    }
    if sched.batch == 0 {
        return Err(Error::Param("train: batch must be >= 1".into()));
    }
    if state.cfg.pgke && bank.is_none() {
        return Err(Error::Param("train: pgke enabled but no memory bank supplied".into()));
    }
    let bank_unit: Option<Tensor> = match (state.cfg.pgke, bank) {
        (true, Some((_, index))) => Some(index.unit_rows.clone()),
        _ => None,
    };
    let mut rng = SeededRng::new(sched.seed);
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    rng.shuffle(&mut order);
    let mut cursor = 0usize;

    let mut report = TrainReport::default();
    let n_trainable = state.trainable_params().len();
    let mut momentum_buf: Vec<Option<Tensor>> = vec![None; n_trainable];
    let mut adam_m: Vec<Option<Tensor>> = vec![None; n_trainable];
    let mut adam_v: Vec<Option<Tensor>> = vec![None; n_trainable];

    for step in 0..sched.steps {
        let lr_t = sched.lr * 0.5 * (1.0 + (PI * step as f64 / sched.steps as f64).cos());

        let mut batch_idx = Vec::with_capacity(sched.batch);
        for _ in 0..sched.batch {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }

        let prepared: Result<Vec<PreparedSample>> = batch_idx
            .iter()
            .map(|&i| prepare_sample(state, data, &data.samples[i], bank))
            .collect();
        let prepared = prepared?;

        let mut tape = Tape::new();
        let (vars, total, main_mean, aux_mean) =
            build_step_loss(state, &mut tape, &prepared, bank_unit.as_ref())?;
        let main_v = tape.value(main_mean).data()[0];
        let aux_v = aux_mean.map(|a| tape.value(a).data()[0]).unwrap_or(0.0);
        if !main_v.is_finite() || !aux_v.is_finite() {
            return Err(Error::Eval(format!(
                "non-finite loss at step {step}: main={main_v}, aux={aux_v}"
            )));
        }
        let grads = tape.backward(total)?;
        report.trace.push(StepLoss {
            main: main_v,
            aux: aux_v,
            lr: lr_t,
        });

        let tvars = vars.trainable_vars();
        drop(tape);
        let mut params = state.trainable_params_mut();
        debug_assert_eq!(tvars.len(), params.len());
        for (pi, (param, var)) in params.iter_mut().zip(&tvars).enumerate() {
            let g = match &grads[var.0] {
                Some(g) => g,
                None => continue,
            };
            if !g.all_finite() {
                return Err(Error::Eval(format!(
                    "non-finite gradient for {} at step {step}",
                    param.name
                )));
            }
            match sched.optimizer {
                Optimizer::Sgd => {
                    for (v, &gv) in param.value.data_mut().iter_mut().zip(g.data()) {
                        *v -= lr_t * gv;
                    }
                }
                Optimizer::Momentum(m) => {
                    let buf = momentum_buf[pi]
                        .get_or_insert_with(|| Tensor::zeros(param.value.shape().to_vec()));
                    for ((b, v), &gv) in buf
                        .data_mut()
                        .iter_mut()
                        .zip(param.value.data_mut())
                        .zip(g.data())
                    {
                        *b = m * *b + gv;
                        *v -= lr_t * *b;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let m_buf =
                        adam_m[pi].get_or_insert_with(|| Tensor::zeros(param.value.shape().to_vec()));
                    let v_buf =
                        adam_v[pi].get_or_insert_with(|| Tensor::zeros(param.value.shape().to_vec()));
                    let t = (step + 1) as f64;
                    let bc1 = 1.0 - beta1.powf(t);
                    let bc2 = 1.0 - beta2.powf(t);
                    for (((mv, vv), pv), &gv) in m_buf
                        .data_mut()
                        .iter_mut()
                        .zip(v_buf.data_mut())
                        .zip(param.value.data_mut())
                        .zip(g.data())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *pv -= lr_t * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Whole-model gradient check on fixed samples. Retrieval indices are
/// frozen up front (hard top-k passes no gradient), so the loss is smooth
/// in every checked parameter.
pub fn model_grad_check(
    state: &mut ModelState,
    data: &EncodedDataset,
    sample_idx: &[usize],
    bank: Option<(&MemoryBank, &BankIndex)>,
    eps: f64,
) -> Result<GradCheckReport> {
    let bank_unit: Option<Tensor> = match (state.cfg.pgke, bank) {
        (true, Some((_, index))) => Some(index.unit_rows.clone()),
        _ => None,
    };
    // Freeze retrieval now; perturbations must not flip indices.
    let frozen: Result<Vec<PreparedSample>> = sample_idx
        .iter()
        .map(|&i| prepare_sample(state, data, &data.samples[i], bank))
        .collect();
    let frozen = frozen?;

    let mut tape = Tape::new();
    let (vars, total, _, _) = build_step_loss(state, &mut tape, &frozen, bank_unit.as_ref())?;
    let grads = tape.backward(total)?;
    let tvars = vars.trainable_vars();
    let analytic: Vec<Tensor> = {
        let params = state.trainable_params();
        tvars
            .iter()
            .zip(&params)
            .map(|(v, p)| {
                grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()))
            })
            .collect()
    };
    drop(tape);

    let eval_loss = |state: &ModelState| -> Result<f64> {
        let mut t = Tape::new();
        let (_, total, _, _) = build_step_loss(state, &mut t, &frozen, bank_unit.as_ref())?;
        Ok(t.value(total).data()[0])
    };

    let names: Vec<String> = state.trainable_params().iter().map(|p| p.name.clone()).collect();
    let mut entries = Vec::with_capacity(names.len());
    for pi in 0..names.len() {
        let numel = state.trainable_params()[pi].value.numel();
        let mut worst = GradCheckEntry {
            name: names[pi].clone(),
            max_rel_err: 0.0,
            argmax: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for si in 0..numel {
            let orig = state.trainable_params()[pi].value.data()[si];
            state.trainable_params_mut()[pi].value.data_mut()[si] = orig + eps;
            let fp = eval_loss(state)?;
            state.trainable_params_mut()[pi].value.data_mut()[si] = orig - eps;
            let fm = eval_loss(state)?;
            state.trainable_params_mut()[pi].value.data_mut()[si] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[pi].data()[si];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > worst.max_rel_err {
                worst.max_rel_err = rel;
                worst.argmax = si;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        entries.push(worst);
    }
    Ok(GradCheckReport { entries })
}

