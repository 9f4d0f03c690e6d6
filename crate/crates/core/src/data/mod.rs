//! Synthetic paired optical/thermal traffic scenes with templated QA.

mod io;
mod qa;
mod render;
mod scene;
mod vocab;

pub use io::{read_dataset, write_dataset, IMAGE_MAGIC};
pub use qa::{generate_qa, QAPair, QType};
pub use render::{render_pair, RenderedPair, FOG_CONTRAST, NIGHT_CONTRAST, NIGHT_NOISE_STD};
pub use scene::{
    color_name, derive_violations, generate_scene, Condition, DifficultyParams, Entity,
    EntityKind, Heading, Lane, SceneSpec, Violation, ViolationKind, COLOR_COUNT,
};
pub use vocab::{Vocab, EOS, PAD, UNK};

use crate::error::Result;
use crate::tensor::SeededRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// One dataset record: scene ground truth, rendered image pair, QA pairs.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub scene: SceneSpec,
    pub pair: RenderedPair,
    pub qas: Vec<QAPair>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_scenes: usize,
    pub seed: u64,
    pub cond_day: f64,
    pub cond_night: f64,
    pub cond_fog: f64,
    pub difficulty: DifficultyParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_scenes: 100,
            seed: 7,
            cond_day: 0.5,
            cond_night: 0.3,
            cond_fog: 0.2,
            difficulty: DifficultyParams::default(),
        }
    }
}

/// Generate a split. Scene `i` derives its own sub-seed, so generation is
/// order-independent and safely parallel.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<SceneSample>> {
    let master = SeededRng::new(cfg.seed);
    let total = cfg.cond_day + cfg.cond_night + cfg.cond_fog;
    if total <= 0.0 {
        return Err(crate::error::Error::Param("condition weights must sum > 0".into()));
    }
    (0..cfg.n_scenes)
        .into_par_iter()
        .map(|i| {
            let mut rng = master.fork(i as u64);
            let r = rng.next_f64() * total;
            let condition = if r < cfg.cond_day {
                Condition::Day
            } else if r < cfg.cond_day + cfg.cond_night {
                Condition::Night
            } else {
                Condition::Fog
            };
            let scene = generate_scene(i as u64, &mut rng, condition, &cfg.difficulty)?;
            let pair = render_pair(&scene)?;
            let qas = generate_qa(&scene, &mut rng);
            Ok(SceneSample { scene, pair, qas })
        })
        .collect()
}

/// Partner scene whose thermal plane replaces this scene's for negative
/// modality-match samples. Fixed convention so loaders can resolve the swap
/// from the manifest alone.
pub fn modality_swap_partner(id: u64, n_scenes: usize) -> u64 {
    if n_scenes <= 1 {
        return id;
    }
    (id + 1) % n_scenes as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_reproducible() {
        let cfg = DatasetConfig {
            n_scenes: 6,
            seed: 42,
            ..DatasetConfig::default()
        };
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.scene, y.scene);
            assert!(x.pair.opt.bits_eq(&y.pair.opt));
            assert!(x.pair.tir.bits_eq(&y.pair.tir));
            assert_eq!(x.qas, y.qas);
        }
    }

    #[test]
    fn qa_counts_in_contract_range() {
        let cfg = DatasetConfig {
            n_scenes: 30,
            seed: 5,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        for s in &data {
            assert!(
                (8..=20).contains(&s.qas.len()),
                "scene {} has {} QAs",
                s.scene.id,
                s.qas.len()
            );
        }
    }

    #[test]
    fn violations_rederivable_from_geometry() {
        let cfg = DatasetConfig {
            n_scenes: 40,
            seed: 11,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        for s in &data {
            let derived = derive_violations(&s.scene);
            assert_eq!(derived, s.scene.violations, "scene {}", s.scene.id);
        }
    }
}
