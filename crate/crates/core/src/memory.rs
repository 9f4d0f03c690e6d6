//! Offline regulation memory: per-training-scene semantic phrases, grounded
//! event boxes, and epicenter-aggregated prototype vectors, persisted to a
//! compact binary bank.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{EntityKind, QAPair, QType, SceneSample, SceneSpec};
use crate::error::{Error, Result};
use crate::model::backbone::BackboneStub;
use crate::tensor::{SeededRng, Tensor};

pub const BANK_MAGIC: &[u8; 4] = b"TRMB";
const BANK_VERSION: u32 = 1;

/// Axis-aligned box in pixel coordinates, `0 ≤ x0 ≤ x1 ≤ W`, `0 ≤ y0 ≤ y1 ≤ H`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BoundingBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn clamp_to(&self, w: f64, h: f64) -> BoundingBox {
        let x0 = self.x0.clamp(0.0, w);
        let x1 = self.x1.clamp(0.0, w);
        let y0 = self.y0.clamp(0.0, h);
        let y1 = self.y1.clamp(0.0, h);
        BoundingBox {
            x0: x0.min(x1),
            x1: x0.max(x1),
            y0: y0.min(y1),
            y1: y0.max(y1),
        }
    }
}

/// Minimal enclosing box of the two inputs.
pub fn union_box(a: &BoundingBox, b: &BoundingBox) -> BoundingBox {
    BoundingBox {
        x0: a.x0.min(b.x0),
        y0: a.y0.min(b.y0),
        x1: a.x1.max(b.x1),
        y1: a.y1.max(b.y1),
    }
}

/// Kind of grounded situation a prototype summarizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    CrosswalkViolation,
    WrongWayViolation,
    PedestrianViolation,
    VehicleLocation,
    VehiclePresence,
    SmallVehiclePresence,
    PedestrianPresence,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::CrosswalkViolation => "crosswalk-violation",
            EventKind::WrongWayViolation => "wrong-way-violation",
            EventKind::PedestrianViolation => "pedestrian-violation",
            EventKind::VehicleLocation => "vehicle-location",
            EventKind::VehiclePresence => "vehicle-presence",
            EventKind::SmallVehiclePresence => "small-vehicle-presence",
            EventKind::PedestrianPresence => "pedestrian-presence",
        }
    }
}

/// Short grounded description of one traffic situation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticPhrase {
    pub text: String,
    pub event_kind: EventKind,
    pub entity_id: u32,
}

/// One memory row: aggregated bi-modal feature vector plus provenance.
#[derive(Clone, Debug)]
pub struct Prototype {
    pub vector: Tensor,
    pub phrase: SemanticPhrase,
    pub source_scene: u64,
}

/// The regulation memory: N prototype vectors of width `2·d_model`.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    pub rows: Vec<Prototype>,
    pub d_model: usize,
    pub tau_build: f64,
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        2 * self.d_model
    }

    /// Prototype matrix `[N × 2D]`.
    pub fn matrix(&self) -> Tensor {
        let dp = self.width();
        let mut data = Vec::with_capacity(self.rows.len() * dp);
        for r in &self.rows {
            data.extend_from_slice(r.vector.data());
        }
        Tensor::new(vec![self.rows.len(), dp], data).expect("bank matrix")
    }
}

/// Distillation outcome: scene-level questions have no grounded referent
/// and are skipped during bank construction.
#[derive(Clone, Debug, PartialEq)]
pub enum PhraseOutcome {
    Grounded(SemanticPhrase),
    NoReferent,
}

/// Deterministic template distillation of a QA pair into a semantic phrase
/// naming the entity class and its grounded behavior.
pub fn distill_phrase(scene: &SceneSpec, qa: &QAPair) -> PhraseOutcome {
    use PhraseOutcome::*;
    let yes = qa.answer == "yes";
    match qa.qtype {
        QType::VehicleViolation if yes => {
            // Lowest-id motorized entity committing the asked violation.
            let want_crosswalk = qa.question.contains("crosswalk");
            let want_wrongway = qa.question.contains("wrong");
            for v in &scene.violations {
                let cw = v.kind == crate::data::ViolationKind::Crosswalk;
                let ww = v.kind == crate::data::ViolationKind::WrongWay;
                if !(cw || ww) {
                    continue;
                }
                if want_crosswalk && !cw {
                    continue;
                }
                if want_wrongway && !ww {
                    continue;
                }
                let (text, kind) = if cw {
                    ("vehicle in crosswalk zone", EventKind::CrosswalkViolation)
                } else {
                    ("vehicle going against lane direction", EventKind::WrongWayViolation)
                };
                return Grounded(SemanticPhrase {
                    text: text.to_string(),
                    event_kind: kind,
                    entity_id: v.entity_id,
                });
            }
            NoReferent
        }
        QType::PedestrianViolation if yes => scene
            .violations
            .iter()
            .find(|v| v.kind == crate::data::ViolationKind::Pedestrian)
            .map(|v| {
                Grounded(SemanticPhrase {
                    text: "pedestrian crossing outside crosswalk".to_string(),
                    event_kind: EventKind::PedestrianViolation,
                    entity_id: v.entity_id,
                })
            })
            .unwrap_or(NoReferent),
        QType::LocationQuadrant => {
            // The question names a color that is unique among vehicles.
            let color = scene.entities.iter().find_map(|e| {
                let c = crate::data::color_name(e.color_index);
                if e.kind == EntityKind::Vehicle && qa.question.contains(c) {
                    Some(e.id)
                } else {
                    None
                }
            });
            match color {
                Some(id) => Grounded(SemanticPhrase {
                    text: "vehicle at its lane position".to_string(),
                    event_kind: EventKind::VehicleLocation,
                    entity_id: id,
                }),
                None => NoReferent,
            }
        }
        QType::Presence if yes => {
            let kind = if qa.question.contains("small-vehicle") {
                EntityKind::SmallVehicle
            } else if qa.question.contains("pedestrian") {
                EntityKind::Pedestrian
            } else {
                EntityKind::Vehicle
            };
            scene
                .entities
                .iter()
                .find(|e| e.kind == kind)
                .map(|e| {
                    let (text, ek) = match kind {
                        EntityKind::Vehicle => ("vehicle present in scene", EventKind::VehiclePresence),
                        EntityKind::SmallVehicle => {
                            ("small vehicle present in scene", EventKind::SmallVehiclePresence)
                        }
                        EntityKind::Pedestrian => {
                            ("pedestrian present in scene", EventKind::PedestrianPresence)
                        }
                    };
                    Grounded(SemanticPhrase {
                        text: text.to_string(),
                        event_kind: ek,
                        entity_id: e.id,
                    })
                })
                .unwrap_or(NoReferent)
        }
        _ => NoReferent,
    }
}

/// Ground a phrase to per-modality boxes: the entity's true box with
/// independent jitter per modality, clamped to image bounds. `jitter` is a
/// fraction of the image side, capped at 0.10.
pub fn ground_event(
    scene: &SceneSpec,
    phrase: &SemanticPhrase,
    rng: &mut SeededRng,
    jitter: f64,
) -> Result<(BoundingBox, BoundingBox)> {
    if !(0.0..=0.10).contains(&jitter) {
        return Err(Error::Param(format!("jitter fraction {jitter} outside [0, 0.10]")));
    }
    let entity = scene
        .entities
        .iter()
        .find(|e| e.id == phrase.entity_id)
        .ok_or_else(|| Error::Lookup(format!("entity {} not in scene {}", phrase.entity_id, scene.id)))?;
    let (w, h) = (scene.width as f64, scene.height as f64);
    let jittered = |rng: &mut SeededRng| {
        let b = &entity.bbox;
        let jx = jitter * w;
        let jy = jitter * h;
        let bb = BoundingBox {
            x0: b.x0 + rng.uniform(-jx, jx),
            y0: b.y0 + rng.uniform(-jy, jy),
            x1: b.x1 + rng.uniform(-jx, jx),
            y1: b.y1 + rng.uniform(-jy, jy),
        };
        bb.clamp_to(w, h)
    };
    let b_opt = jittered(rng);
    let b_th = jittered(rng);
    Ok((b_opt, b_th))
}

/// Token-grid geometry used to map a pixel box onto feature tokens.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub img_w: f64,
    pub img_h: f64,
}

/// Aggregate concatenated bi-modal features into a prototype vector.
///
/// The query is the mean feature over the 3×3 token neighborhood of the box
/// center (clipped at grid edges); the output is the softmax-weighted sum of
/// all `L` token features at temperature `tau`.
pub fn epicenter_aggregate(
    f_concat: &Tensor,
    b_union: &BoundingBox,
    tau: f64,
    grid: &TokenGrid,
) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::Param(format!("tau must be positive, got {tau}")));
    }
    let l = f_concat.rows2();
    if l != grid.rows * grid.cols {
        return Err(Error::dim("epicenter_aggregate", f_concat.shape(), &[grid.rows * grid.cols]));
    }
    let dp = f_concat.cols2();
    let (cx, cy) = b_union.center();
    let tx = ((cx / (grid.img_w / grid.cols as f64)) as usize).min(grid.cols - 1);
    let ty = ((cy / (grid.img_h / grid.rows as f64)) as usize).min(grid.rows - 1);

    // 3x3 neighborhood clipped at the grid edges.
    let mut q = vec![0.0; dp];
    let mut count = 0.0;
    for r in ty.saturating_sub(1)..=(ty + 1).min(grid.rows - 1) {
        for c in tx.saturating_sub(1)..=(tx + 1).min(grid.cols - 1) {
            let row = f_concat.row(r * grid.cols + c);
            for (acc, &v) in q.iter_mut().zip(row) {
                *acc += v;
            }
            count += 1.0;
        }
    }
    for v in &mut q {
        *v /= count;
    }

    // Softmax over all token dot products, then the weighted feature sum.
    let mut scores = Vec::with_capacity(l);
    for i in 0..l {
        let dot: f64 = f_concat.row(i).iter().zip(&q).map(|(a, b)| a * b).sum();
        scores.push(dot);
    }
    let weights = crate::tensor::softmax_rows(&Tensor::row_vector(scores), tau)?;
    let mut out = vec![0.0; dp];
    for i in 0..l {
        let w = weights.data()[i];
        for (acc, &v) in out.iter_mut().zip(f_concat.row(i)) {
            *acc += w * v;
        }
    }
    Tensor::new(vec![dp], out)
}

/// Build the memory from a training split: one prototype per groundable QA,
/// deduplicated per (scene, event kind), rows ordered by ascending
/// (scene id, event kind).
pub fn build_memory(
    dataset: &[SceneSample],
    encoder: &BackboneStub,
    tau: f64,
    rng: &SeededRng,
    jitter: f64,
) -> Result<MemoryBank> {
    if dataset.is_empty() {
        return Err(Error::Param("build_memory: empty dataset".into()));
    }
    if tau <= 0.0 {
        return Err(Error::Param(format!("tau must be positive, got {tau}")));
    }
    let mut rows: BTreeMap<(u64, EventKind), Prototype> = BTreeMap::new();
    for sample in dataset {
        let scene = &sample.scene;
        let grid = TokenGrid {
            rows: encoder.grid_rows(),
            cols: encoder.grid_cols(),
            img_w: scene.width as f64,
            img_h: scene.height as f64,
        };
        let mut f_concat: Option<Tensor> = None;
        for qa in &sample.qas {
            let phrase = match distill_phrase(scene, qa) {
                PhraseOutcome::Grounded(p) => p,
                PhraseOutcome::NoReferent => continue,
            };
            let key = (scene.id, phrase.event_kind);
            if rows.contains_key(&key) {
                continue;
            }
            let f = match &f_concat {
                Some(f) => f,
                None => {
                    let f_opt = encoder.encode_image(&sample.pair.opt, crate::model::Modality::Opt)?;
                    let f_th = encoder.encode_image(&sample.pair.tir, crate::model::Modality::Tir)?;
                    f_concat = Some(concat_cols_val(&f_opt, &f_th)?);
                    f_concat.as_ref().unwrap()
                }
            };
            // Per-(scene, kind) jitter stream keeps construction order-free.
            let mut jrng = rng.fork(scene.id.wrapping_mul(31).wrapping_add(phrase.event_kind as u64));
            let (b_opt, b_th) = ground_event(scene, &phrase, &mut jrng, jitter)?;
            let b_union = union_box(&b_opt, &b_th);
            let vector = epicenter_aggregate(f, &b_union, tau, &grid)?;
            rows.insert(
                key,
                Prototype {
                    vector,
                    phrase,
                    source_scene: scene.id,
                },
            );
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyBank);
    }
    Ok(MemoryBank {
        rows: rows.into_values().collect(),
        d_model: encoder.d_model(),
        tau_build: tau,
    })
}

pub(crate) fn concat_cols_val(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows2() != b.rows2() {
        return Err(Error::dim("concat_cols", a.shape(), b.shape()));
    }
    let (m, n1, n2) = (a.rows2(), a.cols2(), b.cols2());
    let mut data = Vec::with_capacity(m * (n1 + n2));
    for i in 0..m {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    Tensor::new(vec![m, n1 + n2], data)
}

#[derive(Serialize, Deserialize)]
struct RowMeta {
    phrase: String,
    event_kind: EventKind,
    scene_id: u64,
    entity_id: u32,
    tau_build: f64,
}

/// Bank file: magic "TRMB", u32 LE version, u32 N, u32 Dp, N×Dp float32 LE
/// row-major, u64 LE metadata length, UTF-8 JSON metadata array in row
/// order. Vectors pass through float32 on disk; loads promote back to f64.
pub fn save_bank(bank: &MemoryBank, path: &Path) -> Result<()> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    let dp = bank.width();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(BANK_MAGIC)?;
    w.write_all(&BANK_VERSION.to_le_bytes())?;
    w.write_all(&(bank.rows.len() as u32).to_le_bytes())?;
    w.write_all(&(dp as u32).to_le_bytes())?;
    for row in &bank.rows {
        if row.vector.numel() != dp {
            return Err(Error::Consistency(format!(
                "prototype width {} != bank width {dp}",
                row.vector.numel()
            )));
        }
        for &v in row.vector.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    let meta: Vec<RowMeta> = bank
        .rows
        .iter()
        .map(|r| RowMeta {
            phrase: r.phrase.text.clone(),
            event_kind: r.phrase.event_kind,
            scene_id: r.source_scene,
            entity_id: r.phrase.entity_id,
            tau_build: bank.tau_build,
        })
        .collect();
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.flush()?;
    Ok(())
}

pub fn load_bank(path: &Path) -> Result<MemoryBank> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != BANK_MAGIC {
        return Err(Error::Format(format!("bad bank magic {magic:?}, expected {BANK_MAGIC:?}")));
    }
    let version = read_u32(&mut r, "version")?;
    if version != BANK_VERSION {
        return Err(Error::Format(format!("unsupported bank version {version}")));
    }
    let n = read_u32(&mut r, "row count")? as usize;
    let dp = read_u32(&mut r, "row width")? as usize;
    if n == 0 {
        return Err(Error::EmptyBank);
    }
    if dp == 0 || dp % 2 != 0 {
        return Err(Error::Format(format!("bank width {dp} must be positive and even")));
    }
    let mut vectors = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for _ in 0..n {
        let mut data = Vec::with_capacity(dp);
        for _ in 0..dp {
            read_exact(&mut r, &mut buf, "prototype values")?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        vectors.push(Tensor::new(vec![dp], data).map_err(|e| Error::Format(e.to_string()))?);
    }
    let mut len_buf = [0u8; 8];
    read_exact(&mut r, &mut len_buf, "metadata length")?;
    let meta_len = u64::from_le_bytes(len_buf) as usize;
    let mut json = vec![0u8; meta_len];
    read_exact(&mut r, &mut json, "metadata")?;
    let meta: Vec<RowMeta> =
        serde_json::from_slice(&json).map_err(|e| Error::Corrupt(format!("metadata: {e}")))?;
    if meta.len() != n {
        return Err(Error::Corrupt(format!("metadata rows {} != {n}", meta.len())));
    }
    let tau_build = meta.first().map(|m| m.tau_build).unwrap_or(0.07);
    let rows = vectors
        .into_iter()
        .zip(meta)
        .map(|(vector, m)| Prototype {
            vector,
            phrase: SemanticPhrase {
                text: m.phrase,
                event_kind: m.event_kind,
                entity_id: m.entity_id,
            },
            source_scene: m.scene_id,
        })
        .collect();
    Ok(MemoryBank {
        rows,
        d_model: dp / 2,
        tau_build,
    })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Corrupt(format!("truncated while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn union_box_cases() {
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(union_box(&a, &a), a);
        let b = BoundingBox::new(5.0, 5.0, 20.0, 20.0);
        assert_eq!(union_box(&a, &b), BoundingBox::new(0.0, 0.0, 20.0, 20.0));
        let c = BoundingBox::new(0.0, 0.0, 2.0, 2.0);
        let d = BoundingBox::new(8.0, 8.0, 9.0, 9.0);
        assert_eq!(union_box(&c, &d), BoundingBox::new(0.0, 0.0, 9.0, 9.0));
    }

    #[test]
    fn union_box_commutative_and_monotone() {
        let a = BoundingBox::new(1.0, 2.0, 3.0, 4.0);
        let b = BoundingBox::new(0.5, 3.0, 2.0, 7.0);
        let u = union_box(&a, &b);
        assert_eq!(u, union_box(&b, &a));
        assert!(u.contains_box(&a) && u.contains_box(&b));
    }

    #[test]
    fn epicenter_uniform_features_return_common_feature() {
        let dp = 6;
        let l = 16;
        let f = Tensor::new(vec![l, dp], vec![0.37; l * dp]).unwrap();
        let grid = TokenGrid {
            rows: 4,
            cols: 4,
            img_w: 32.0,
            img_h: 32.0,
        };
        let b = BoundingBox::new(4.0, 4.0, 12.0, 12.0);
        for tau in [0.01, 0.07, 1.0, 10.0] {
            let s = epicenter_aggregate(&f, &b, tau, &grid).unwrap();
            for &v in s.data() {
                assert!((v - 0.37).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn epicenter_low_tau_selects_dominant_token() {
        // One token's dot product exceeds all others by ≥ 1 at tau=1e-3.
        let l = 9;
        let dp = 2;
        let mut f = Tensor::zeros(vec![l, dp]);
        for i in 0..l {
            f.set2(i, 0, 0.1);
        }
        f.set2(4, 0, 3.0); // center token dominates
        let grid = TokenGrid {
            rows: 3,
            cols: 3,
            img_w: 24.0,
            img_h: 24.0,
        };
        let b = BoundingBox::new(10.0, 10.0, 14.0, 14.0); // center of the grid
        let s = epicenter_aggregate(&f, &b, 1e-3, &grid).unwrap();
        assert!((s.data()[0] - 3.0).abs() < 1e-4, "{:?}", s.data());
    }

    #[test]
    fn epicenter_two_token_analytic_weights() {
        // Dot products (0, ln 3) at tau=1 → weights (0.25, 0.75).
        let l = 2;
        let dp = 1;
        // q_epi is the mean of both features (grid 1x2, 3x3 window clips to both).
        // Choose features f1, f2 so that f_i · q = (0, ln3): q = (f1+f2)/2.
        // With f1 = 0: q = f2/2, f2·q = f2²/2 = ln3 → f2 = sqrt(2 ln3).
        let f2 = (2.0 * 3.0_f64.ln()).sqrt();
        let f = Tensor::new(vec![l, dp], vec![0.0, f2]).unwrap();
        let grid = TokenGrid {
            rows: 1,
            cols: 2,
            img_w: 16.0,
            img_h: 8.0,
        };
        let b = BoundingBox::new(0.0, 0.0, 16.0, 8.0);
        let s = epicenter_aggregate(&f, &b, 1.0, &grid).unwrap();
        let expect = 0.25 * 0.0 + 0.75 * f2;
        assert!((s.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn epicenter_output_inside_envelope() {
        let mut rng = SeededRng::new(31);
        let grid = TokenGrid {
            rows: 4,
            cols: 4,
            img_w: 32.0,
            img_h: 32.0,
        };
        for _ in 0..20 {
            let f = rng.uniform_tensor(vec![16, 5], -2.0, 2.0);
            let b = BoundingBox::new(rng.uniform(0.0, 16.0), rng.uniform(0.0, 16.0), 20.0, 20.0);
            let s = epicenter_aggregate(&f, &b, 0.3, &grid).unwrap();
            for j in 0..5 {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for i in 0..16 {
                    lo = lo.min(f.at2(i, j));
                    hi = hi.max(f.at2(i, j));
                }
                assert!(s.data()[j] >= lo - 1e-12 && s.data()[j] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn epicenter_rejects_bad_tau() {
        let f = Tensor::zeros(vec![4, 2]);
        let grid = TokenGrid {
            rows: 2,
            cols: 2,
            img_w: 16.0,
            img_h: 16.0,
        };
        let b = BoundingBox::new(0.0, 0.0, 4.0, 4.0);
        assert!(epicenter_aggregate(&f, &b, 0.0, &grid).is_err());
        assert!(epicenter_aggregate(&f, &b, -0.1, &grid).is_err());
    }

    #[test]
    fn bank_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.trmb");
        let mut rng = SeededRng::new(77);
        let rows: Vec<Prototype> = (0..10)
            .map(|i| Prototype {
                vector: rng.uniform_tensor(vec![8], -1.0, 1.0),
                phrase: SemanticPhrase {
                    text: format!("phrase {i}"),
                    event_kind: EventKind::CrosswalkViolation,
                    entity_id: i as u32,
                },
                source_scene: i as u64,
            })
            .collect();
        let bank = MemoryBank {
            rows,
            d_model: 4,
            tau_build: 0.07,
        };
        save_bank(&bank, &path).unwrap();
        let loaded = load_bank(&path).unwrap();
        assert_eq!(loaded.len(), 10);
        assert_eq!(loaded.d_model, 4);
        assert_eq!(loaded.tau_build, 0.07);
        // One float32 round trip is a fixpoint: saving the loaded bank and
        // loading again reproduces it bit-exactly.
        let path2 = dir.path().join("bank2.trmb");
        save_bank(&loaded, &path2).unwrap();
        let loaded2 = load_bank(&path2).unwrap();
        for (a, b) in loaded.rows.iter().zip(&loaded2.rows) {
            assert!(a.vector.bits_eq(&b.vector));
            assert_eq!(a.phrase, b.phrase);
            assert_eq!(a.source_scene, b.source_scene);
        }
        // Values survive the f32 truncation within 1e-7 of the originals.
        for (a, b) in bank.rows.iter().zip(&loaded.rows) {
            assert!(a.vector.max_abs_diff(&b.vector) < 1e-7);
        }

        // Bad magic.
        let bad = dir.path().join("bad.trmb");
        fs::write(&bad, b"XXXX0000").unwrap();
        assert!(matches!(load_bank(&bad), Err(Error::Format(_))));

        // Truncation mid-row.
        let bytes = fs::read(&path).unwrap();
        let cut = dir.path().join("cut.trmb");
        fs::write(&cut, &bytes[..30]).unwrap();
        assert!(matches!(load_bank(&cut), Err(Error::Corrupt(_))));
    }
}
