//! Bidirectional cross-modal compensation: each modality's residual attends
//! over the other modality, both computed from the original inputs. Also
//! hosts the static fusion baselines (element-wise mean, concat-project).

use crate::attention::{mhca_forward, mhca_forward_t, MhcaBlock, MhcaConfig, MhcaVars};
use crate::error::{Error, Result};
use crate::tensor::{tape::Tape, Param, SeededRng, Tensor, Var};

/// Two independent direction blocks; weights are not tied.
#[derive(Clone, Debug)]
pub struct QascModule {
    /// Thermal-to-optical: query = optical, kv = thermal.
    pub t2o: MhcaBlock,
    /// Optical-to-thermal: query = thermal, kv = optical.
    pub o2t: MhcaBlock,
}

impl QascModule {
    pub fn init(d_model: usize, heads: usize, d_head: usize, d_ffn: usize, rng: &mut SeededRng) -> Result<Self> {
        let cfg = MhcaConfig::new(d_model, d_model, heads, d_head, d_ffn)?;
        Ok(QascModule {
            t2o: MhcaBlock::init(cfg, "qasc.t2o", rng)?,
            o2t: MhcaBlock::init(cfg, "qasc.o2t", rng)?,
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut ps = self.t2o.params();
        ps.extend(self.o2t.params());
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.t2o.params_mut();
        ps.extend(self.o2t.params_mut());
        ps
    }
}

/// Both compensation increments from the original (pre-update) inputs.
pub fn qasc_residuals(f_opt: &Tensor, f_th: &Tensor, module: &QascModule) -> Result<(Tensor, Tensor)> {
    check_same(f_opt, f_th)?;
    let d_opt = mhca_forward(f_opt, f_th, &module.t2o)?;
    let d_th = mhca_forward(f_th, f_opt, &module.o2t)?;
    Ok((d_opt, d_th))
}

/// Tape version; returns increments plus both directions' attention nodes.
pub fn qasc_residuals_t(
    tape: &mut Tape,
    f_opt: Var,
    f_th: Var,
    t2o: &MhcaVars,
    o2t: &MhcaVars,
) -> Result<((Var, Var), Vec<Var>)> {
    if tape.value(f_opt).shape() != tape.value(f_th).shape() {
        return Err(Error::dim(
            "qasc_residuals",
            tape.value(f_opt).shape(),
            tape.value(f_th).shape(),
        ));
    }
    let (d_opt, mut w1) = mhca_forward_t(tape, f_opt, f_th, t2o)?;
    let (d_th, w2) = mhca_forward_t(tape, f_th, f_opt, o2t)?;
    w1.extend(w2);
    Ok(((d_opt, d_th), w1))
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim("qasc_residuals", a.shape(), b.shape()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FuseMode {
    Add,
    ConcatProject,
}

/// Static fusion baseline. `Add` is the element-wise mean of the streams;
/// `ConcatProject` concatenates per token and learns a down-projection.
#[derive(Clone, Debug)]
pub enum StaticFusion {
    Add,
    ConcatProject(Param),
}

impl StaticFusion {
    pub fn init(mode: FuseMode, d_model: usize, rng: &mut SeededRng) -> Self {
        match mode {
            FuseMode::Add => StaticFusion::Add,
            FuseMode::ConcatProject => {
                StaticFusion::ConcatProject(Param::init_weight("fuse.proj", 2 * d_model, d_model, rng))
            }
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            StaticFusion::Add => vec![],
            StaticFusion::ConcatProject(p) => vec![p],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            StaticFusion::Add => vec![],
            StaticFusion::ConcatProject(p) => vec![p],
        }
    }

    pub fn apply(&self, f_opt: &Tensor, f_th: &Tensor) -> Result<Tensor> {
        check_same(f_opt, f_th)?;
        match self {
            StaticFusion::Add => {
                let mut out = f_opt.clone();
                out.add_in_place(f_th);
                out.scale_in_place(0.5);
                Ok(out)
            }
            StaticFusion::ConcatProject(p) => {
                let cat = crate::memory::concat_cols_val(f_opt, f_th)?;
                crate::tensor::matmul(&cat, &p.value)
            }
        }
    }

    pub fn apply_t(&self, tape: &mut Tape, f_opt: Var, f_th: Var, proj: Option<Var>) -> Result<Var> {
        match self {
            StaticFusion::Add => {
                let s = tape.add(f_opt, f_th)?;
                Ok(tape.scale(s, 0.5))
            }
            StaticFusion::ConcatProject(_) => {
                let cat = tape.concat_cols(f_opt, f_th)?;
                let p = proj.ok_or_else(|| Error::Param("concat_project needs its projection bound".into()))?;
                tape.matmul(cat, p)
            }
        }
    }
}
