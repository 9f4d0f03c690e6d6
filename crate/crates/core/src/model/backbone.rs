//! Frozen stub encoders: seeded random patch embedding per modality with a
//! shared sinusoidal positional table, and a bag-of-tokens question encoder.

use crate::error::{Error, Result};
use crate::model::Modality;
use crate::tensor::{Param, SeededRng, Tensor};

#[derive(Clone, Debug)]
pub struct BackboneStub {
    d_model: usize,
    patch: usize,
    img_h: usize,
    img_w: usize,
    vocab_size: usize,
    pub patch_embed_opt: Param,
    pub patch_embed_tir: Param,
    pub pos_enc: Tensor,
    pub question_embed: Param,
}

impl BackboneStub {
    pub fn new(
        d_model: usize,
        patch: usize,
        img_h: usize,
        img_w: usize,
        vocab_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if patch == 0 || img_h % patch != 0 || img_w % patch != 0 {
            return Err(Error::Param(format!(
                "image {img_h}x{img_w} not divisible by patch {patch}"
            )));
        }
        let mut rng = SeededRng::new(seed);
        let l = (img_h / patch) * (img_w / patch);
        // Wider-than-usual embedding scale so patch content is not drowned
        // by the unit-scale positional table after normalization.
        let embed_bound = |d_in: usize| 3.0 / (d_in as f64).sqrt();
        let b_opt = embed_bound(patch * patch * 3);
        let b_tir = embed_bound(patch * patch);
        let patch_embed_opt = Param::new(
            "backbone.patch_embed.opt",
            rng.uniform_tensor(vec![patch * patch * 3, d_model], -b_opt, b_opt),
            false,
        );
        let patch_embed_tir = Param::new(
            "backbone.patch_embed.tir",
            rng.uniform_tensor(vec![patch * patch, d_model], -b_tir, b_tir),
            false,
        );
        // Unit-scale token embeddings keep the pooled question vector
        // comparable to the positional signal in the decoder's start slot.
        let question_embed = Param::new(
            "backbone.question_embed",
            rng.uniform_tensor(vec![vocab_size, d_model], -1.0, 1.0),
            false,
        );
        Ok(BackboneStub {
            d_model,
            patch,
            img_h,
            img_w,
            vocab_size,
            patch_embed_opt,
            patch_embed_tir,
            pos_enc: sinusoidal(l, d_model),
            question_embed,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn grid_rows(&self) -> usize {
        self.img_h / self.patch
    }

    pub fn grid_cols(&self) -> usize {
        self.img_w / self.patch
    }

    pub fn seq_len(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.patch_embed_opt, &self.patch_embed_tir, &self.question_embed]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.patch_embed_opt,
            &mut self.patch_embed_tir,
            &mut self.question_embed,
        ]
    }

    /// Non-overlapping patches → frozen linear embedding (bias-free) → plus
    /// positional encoding. Output is `[L × D]` with tokens row-major over
    /// the patch grid.
    pub fn encode_image(&self, img: &Tensor, modality: Modality) -> Result<Tensor> {
        let channels = match modality {
            Modality::Opt => 3,
            Modality::Tir => 1,
            Modality::Mul => {
                return Err(Error::Param("encode_image takes a single modality".into()));
            }
        };
        let shape = img.shape();
        if shape != [channels, self.img_h, self.img_w] {
            return Err(Error::dim("encode_image", shape, &[channels, self.img_h, self.img_w]));
        }
        let p = self.patch;
        let (rows, cols) = (self.grid_rows(), self.grid_cols());
        let pvec = p * p * channels;
        let mut patches = Tensor::zeros(vec![rows * cols, pvec]);
        let hw = self.img_h * self.img_w;
        for r in 0..rows {
            for c in 0..cols {
                let token = r * cols + c;
                let prow = patches.row_mut(token);
                for ch in 0..channels {
                    for py in 0..p {
                        let y = r * p + py;
                        let src = ch * hw + y * self.img_w + c * p;
                        let dst = ch * p * p + py * p;
                        prow[dst..dst + p].copy_from_slice(&img.data()[src..src + p]);
                    }
                }
            }
        }
        let embed = match modality {
            Modality::Opt => &self.patch_embed_opt.value,
            Modality::Tir => &self.patch_embed_tir.value,
            Modality::Mul => unreachable!(),
        };
        let mut out = crate::tensor::matmul(&patches, embed)?;
        out.add_in_place(&self.pos_enc);
        Ok(out)
    }

    /// Mean of frozen token embeddings, `[1 × D]`.
    pub fn encode_question(&self, tokens: &[usize]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::Encoding("empty question".into()));
        }
        let mut acc = vec![0.0; self.d_model];
        for &t in tokens {
            if t >= self.vocab_size {
                return Err(Error::Encoding(format!(
                    "token id {t} out of vocabulary {}",
                    self.vocab_size
                )));
            }
            for (a, &v) in acc.iter_mut().zip(self.question_embed.value.row(t)) {
                *a += v;
            }
        }
        let n = tokens.len() as f64;
        for a in &mut acc {
            *a /= n;
        }
        Tensor::new(vec![1, self.d_model], acc)
    }
}

pub(crate) fn sinusoidal(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![len, d]);
    for pos in 0..len {
        let row = t.row_mut(pos);
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            row[2 * i] = (pos as f64 * freq).sin();
            if 2 * i + 1 < d {
                row[2 * i + 1] = (pos as f64 * freq).cos();
            }
        }
    }
    t
}
