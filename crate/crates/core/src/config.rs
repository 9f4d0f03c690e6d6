//! Flat `key = value` run configuration with strict key checking.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::{DatasetConfig, DifficultyParams};
use crate::error::{Error, Result};
use crate::model::{FusionMode, Modality, ModelConfig, Optimizer, TrainSchedule};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_seed: u64,
    pub backbone_seed: u64,
    pub d_model: usize,
    pub heads: usize,
    pub d_head: usize,
    pub d_ffn: usize,
    pub patch: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub t_max: usize,
    pub k: usize,
    pub tau: f64,
    pub tau_build: f64,
    pub jitter: f64,
    pub aux_weight: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub optimizer: String,
    pub momentum: f64,
    pub modality: Modality,
    pub fusion: FusionMode,
    pub pgke: bool,
    pub qasc: bool,
    pub n_scenes: usize,
    pub cond_day: f64,
    pub cond_night: f64,
    pub cond_fog: f64,
    pub max_vehicles: usize,
    pub max_pedestrians: usize,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            data_seed: 1234,
            backbone_seed: 9901,
            d_model: 64,
            heads: 4,
            d_head: 16,
            d_ffn: 128,
            patch: 8,
            img_h: 64,
            img_w: 64,
            t_max: 4,
            k: 8,
            tau: 0.07,
            tau_build: 0.07,
            jitter: 0.05,
            aux_weight: 0.1,
            steps: 200,
            lr: 0.003,
            batch: 16,
            optimizer: "adam".into(),
            momentum: 0.9,
            modality: Modality::Mul,
            fusion: FusionMode::SeqConcat,
            pgke: true,
            qasc: true,
            n_scenes: 100,
            cond_day: 0.5,
            cond_night: 0.3,
            cond_fog: 0.2,
            max_vehicles: 8,
            max_pedestrians: 4,
            jobs: 1,
        }
    }
}

impl RunConfig {
    /// Apply one `key = value` setting. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad value for {key}: {value:?}")))
        }
        match key {
            "seed" => self.seed = p(key, value)?,
            "data_seed" => self.data_seed = p(key, value)?,
            "backbone_seed" => self.backbone_seed = p(key, value)?,
            "d_model" => self.d_model = p(key, value)?,
            "heads" => self.heads = p(key, value)?,
            "d_head" => self.d_head = p(key, value)?,
            "d_ffn" => self.d_ffn = p(key, value)?,
            "patch" => self.patch = p(key, value)?,
            "img_h" => self.img_h = p(key, value)?,
            "img_w" => self.img_w = p(key, value)?,
            "t_max" => self.t_max = p(key, value)?,
            "k" => self.k = p(key, value)?,
            "tau" => self.tau = p(key, value)?,
            "tau_build" => self.tau_build = p(key, value)?,
            "jitter" => self.jitter = p(key, value)?,
            "aux_weight" => self.aux_weight = p(key, value)?,
            "steps" => self.steps = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "batch" => self.batch = p(key, value)?,
            "optimizer" => match value {
                "sgd" | "momentum" | "adam" => self.optimizer = value.to_string(),
                other => return Err(Error::Config(format!("unknown optimizer {other:?}"))),
            },
            "momentum" => self.momentum = p(key, value)?,
            "modality" => self.modality = value.parse()?,
            "fusion" => self.fusion = value.parse()?,
            "pgke" => self.pgke = parse_bool(key, value)?,
            "qasc" => self.qasc = parse_bool(key, value)?,
            "n_scenes" => self.n_scenes = p(key, value)?,
            "cond_day" => self.cond_day = p(key, value)?,
            "cond_night" => self.cond_night = p(key, value)?,
            "cond_fog" => self.cond_fog = p(key, value)?,
            "max_vehicles" => self.max_vehicles = p(key, value)?,
            "max_pedestrians" => self.max_pedestrians = p(key, value)?,
            "jobs" => self.jobs = p(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parse a config file: one `key = value` per line, `#` comments.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", ln + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// The effective configuration as sorted `key = value` lines.
    pub fn resolved(&self) -> String {
        let mut pairs = vec![
            ("aux_weight".to_string(), self.aux_weight.to_string()),
            ("backbone_seed".into(), self.backbone_seed.to_string()),
            ("batch".into(), self.batch.to_string()),
            ("cond_day".into(), self.cond_day.to_string()),
            ("cond_fog".into(), self.cond_fog.to_string()),
            ("cond_night".into(), self.cond_night.to_string()),
            ("d_ffn".into(), self.d_ffn.to_string()),
            ("d_head".into(), self.d_head.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("data_seed".into(), self.data_seed.to_string()),
            ("fusion".into(), self.fusion.as_str().to_string()),
            ("heads".into(), self.heads.to_string()),
            ("img_h".into(), self.img_h.to_string()),
            ("img_w".into(), self.img_w.to_string()),
            ("jitter".into(), self.jitter.to_string()),
            ("jobs".into(), self.jobs.to_string()),
            ("k".into(), self.k.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("max_pedestrians".into(), self.max_pedestrians.to_string()),
            ("max_vehicles".into(), self.max_vehicles.to_string()),
            ("modality".into(), self.modality.as_str().to_string()),
            ("momentum".into(), self.momentum.to_string()),
            ("n_scenes".into(), self.n_scenes.to_string()),
            ("optimizer".into(), self.optimizer.clone()),
            ("patch".into(), self.patch.to_string()),
            ("pgke".into(), self.pgke.to_string()),
            ("qasc".into(), self.qasc.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("steps".into(), self.steps.to_string()),
            ("t_max".into(), self.t_max.to_string()),
            ("tau".into(), self.tau.to_string()),
            ("tau_build".into(), self.tau_build.to_string()),
        ];
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.resolved"), self.resolved())?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            heads: self.heads,
            d_head: self.d_head,
            d_ffn: self.d_ffn,
            patch: self.patch,
            img_h: self.img_h,
            img_w: self.img_w,
            vocab_size: crate::data::Vocab::standard().len(),
            t_max: self.t_max,
            k: self.k,
            tau: self.tau,
            aux_weight: self.aux_weight,
            modality: self.modality,
            fusion: self.fusion,
            pgke: self.pgke,
            qasc: self.qasc,
            backbone_seed: self.backbone_seed,
        }
    }

    pub fn schedule(&self) -> Result<TrainSchedule> {
        let optimizer = match self.optimizer.as_str() {
            "sgd" => Optimizer::Sgd,
            "momentum" => Optimizer::Momentum(self.momentum),
            "adam" => Optimizer::adam(),
            other => return Err(Error::Config(format!("unknown optimizer {other:?}"))),
        };
        Ok(TrainSchedule {
            lr: self.lr,
            steps: self.steps,
            batch: self.batch,
            seed: self.seed,
            optimizer,
        })
    }

    pub fn dataset_config(&self, n_scenes: usize, seed: u64) -> DatasetConfig {
        DatasetConfig {
            n_scenes,
            seed,
            cond_day: self.cond_day,
            cond_night: self.cond_night,
            cond_fog: self.cond_fog,
            difficulty: DifficultyParams {
                max_vehicles: self.max_vehicles,
                max_pedestrians: self.max_pedestrians,
                ..DifficultyParams::default()
            },
        }
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("bad boolean for {key}: {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("seed", "7").is_ok());
        assert!(matches!(cfg.set("frobnicate", "1"), Err(Error::Config(_))));
    }

    #[test]
    fn file_parsing_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nseed = 9\nfusion = add # inline\n\nk=3\n").unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.fusion, FusionMode::Add);
        assert_eq!(cfg.k, 3);
    }

    #[test]
    fn resolved_is_sorted_and_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.resolved();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.resolved");
        std::fs::write(&path, &text).unwrap();
        let mut cfg2 = RunConfig::default();
        cfg2.seed = 999; // will be overwritten
        cfg2.apply_file(&path).unwrap();
        assert_eq!(cfg, cfg2);
        let mut lines: Vec<&str> = text.lines().collect();
        let sorted = {
            let mut s = lines.clone();
            s.sort();
            s
        };
        assert_eq!(lines, sorted);
        lines.dedup();
        assert_eq!(lines.len(), text.lines().count());
    }
}
