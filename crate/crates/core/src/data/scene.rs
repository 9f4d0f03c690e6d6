//! Scene ground truth: road layout, entities, derived violation flags.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::BoundingBox;
use crate::tensor::SeededRng;

pub const GRID_SIDE: u32 = 64;
pub const COLOR_COUNT: u8 = 6;

const COLOR_NAMES: [&str; COLOR_COUNT as usize] = ["red", "blue", "green", "white", "yellow", "orange"];

pub fn color_name(index: u8) -> &'static str {
    COLOR_NAMES[index as usize % COLOR_NAMES.len()]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Day,
    Night,
    Fog,
}

impl Condition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Day => "day",
            Condition::Night => "night",
            Condition::Fog => "fog",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    pub fn opposite(&self) -> Heading {
        match self {
            Heading::N => Heading::S,
            Heading::S => Heading::N,
            Heading::E => Heading::W,
            Heading::W => Heading::E,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntityKind {
    Vehicle,
    SmallVehicle,
    Pedestrian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: u32,
    pub kind: EntityKind,
    pub bbox: BoundingBox,
    pub heading: Heading,
    pub heat_level: f64,
    pub color_index: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub rect: BoundingBox,
    pub dir: Heading,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    Crosswalk,
    WrongWay,
    Pedestrian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub entity_id: u32,
    pub kind: ViolationKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub lanes: Vec<Lane>,
    pub crosswalks: Vec<BoundingBox>,
    pub entities: Vec<Entity>,
    pub condition: Condition,
    pub violations: Vec<Violation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyParams {
    /// Cap on full-size vehicles (drawn 0..=cap).
    pub max_vehicles: usize,
    /// Cap on small vehicles (drawn 0..=cap); at least one motorized entity
    /// is always present when either cap is positive.
    pub max_small_vehicles: usize,
    pub max_pedestrians: usize,
    /// Probability a scene has no pedestrians at all (keeps presence
    /// answers near coin-flip priors).
    pub ped_absent_prob: f64,
    /// Probability a vehicle heads against its lane.
    pub wrong_way_prob: f64,
    /// Probability of forcing one vehicle onto a crosswalk.
    pub crosswalk_force_prob: f64,
    /// Probability a pedestrian walks on a lane outside any crosswalk.
    pub jaywalk_prob: f64,
}

impl Default for DifficultyParams {
    fn default() -> Self {
        DifficultyParams {
            max_vehicles: 6,
            max_small_vehicles: 3,
            max_pedestrians: 4,
            ped_absent_prob: 0.5,
            wrong_way_prob: 0.10,
            crosswalk_force_prob: 0.45,
            jaywalk_prob: 0.35,
        }
    }
}

impl DifficultyParams {
    /// Empty-scene configuration (no entities, hence no violations).
    pub fn empty() -> Self {
        DifficultyParams {
            max_vehicles: 0,
            max_small_vehicles: 0,
            max_pedestrians: 0,
            ..DifficultyParams::default()
        }
    }
}

/// Fraction of a vehicle box that must overlap a crosswalk to flag a
/// crosswalk violation.
pub const CROSSWALK_OVERLAP_FRAC: f64 = 0.25;
/// A pedestrian overlapping any crosswalk by at least this fraction is on it.
const PED_ON_CROSSWALK_FRAC: f64 = 0.5;
/// Entity placement rejects overlap beyond this IoU.
const PLACEMENT_IOU_TOL: f64 = 0.05;
const PLACEMENT_RETRIES: usize = 60;

fn road_layout() -> (Vec<Lane>, [BoundingBox; 3]) {
    let s = GRID_SIDE as f64;
    let lanes = vec![
        Lane {
            rect: BoundingBox::new(0.0, 24.0, s, 32.0),
            dir: Heading::E,
        },
        Lane {
            rect: BoundingBox::new(0.0, 32.0, s, 40.0),
            dir: Heading::W,
        },
        Lane {
            rect: BoundingBox::new(24.0, 0.0, 32.0, s),
            dir: Heading::S,
        },
        Lane {
            rect: BoundingBox::new(32.0, 0.0, 40.0, s),
            dir: Heading::N,
        },
    ];
    // Candidate crosswalk slots; each scene activates a subset.
    let slots = [
        BoundingBox::new(8.0, 24.0, 14.0, 40.0),
        BoundingBox::new(48.0, 24.0, 54.0, 40.0),
        BoundingBox::new(24.0, 48.0, 40.0, 54.0),
    ];
    (lanes, slots)
}

fn lane_of(lanes: &[Lane], b: &BoundingBox) -> Option<usize> {
    let (cx, cy) = b.center();
    lanes.iter().position(|l| l.rect.contains_point(cx, cy))
}

fn on_any_road(lanes: &[Lane], x: f64, y: f64) -> bool {
    lanes.iter().any(|l| l.rect.contains_point(x, y))
}

/// Violation flags as a pure function of scene geometry.
pub fn derive_violations(scene: &SceneSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    for e in &scene.entities {
        match e.kind {
            EntityKind::Vehicle | EntityKind::SmallVehicle => {
                let area = e.bbox.area();
                if area > 0.0 {
                    let on_crosswalk = scene
                        .crosswalks
                        .iter()
                        .any(|cw| e.bbox.intersection_area(cw) > CROSSWALK_OVERLAP_FRAC * area);
                    if on_crosswalk {
                        out.push(Violation {
                            entity_id: e.id,
                            kind: ViolationKind::Crosswalk,
                        });
                    }
                }
                if let Some(li) = lane_of(&scene.lanes, &e.bbox) {
                    if e.heading == scene.lanes[li].dir.opposite() {
                        out.push(Violation {
                            entity_id: e.id,
                            kind: ViolationKind::WrongWay,
                        });
                    }
                }
            }
            EntityKind::Pedestrian => {
                let (cx, cy) = e.bbox.center();
                let on_lane = on_any_road(&scene.lanes, cx, cy);
                let area = e.bbox.area();
                let on_crosswalk = area > 0.0
                    && scene
                        .crosswalks
                        .iter()
                        .any(|cw| e.bbox.intersection_area(cw) >= PED_ON_CROSSWALK_FRAC * area);
                if on_lane && !on_crosswalk {
                    out.push(Violation {
                        entity_id: e.id,
                        kind: ViolationKind::Pedestrian,
                    });
                }
            }
        }
    }
    out
}

fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn fits(placed: &[Entity], b: &BoundingBox) -> bool {
    placed.iter().all(|e| iou(&e.bbox, b) <= PLACEMENT_IOU_TOL)
}

fn vehicle_dims(kind: EntityKind, vertical: bool) -> (f64, f64) {
    let (long, short) = match kind {
        EntityKind::Vehicle => (10.0, 6.0),
        EntityKind::SmallVehicle => (6.0, 4.0),
        EntityKind::Pedestrian => (5.0, 5.0),
    };
    if vertical {
        (short, long)
    } else {
        (long, short)
    }
}

/// Generate one scene: road layout, 0–`max_vehicles` motorized entities,
/// 0–`max_pedestrians` pedestrians, derived violation flags.
pub fn generate_scene(
    id: u64,
    rng: &mut SeededRng,
    condition: Condition,
    difficulty: &DifficultyParams,
) -> Result<SceneSpec> {
    let (lanes, slots) = road_layout();
    let s = GRID_SIDE as f64;

    // 1–2 active crosswalk slots, position varies per scene.
    let mut crosswalks = Vec::new();
    let first = rng.below(slots.len());
    crosswalks.push(slots[first]);
    if rng.chance(0.45) {
        let second = (first + 1 + rng.below(slots.len() - 1)) % slots.len();
        crosswalks.push(slots[second]);
    }
    crosswalks.sort_by(|a, b| (a.x0, a.y0).partial_cmp(&(b.x0, b.y0)).unwrap());

    let mut entities: Vec<Entity> = Vec::new();
    let mut next_id = 0u32;

    // Independent draws keep presence/count priors informative; at least
    // one motorized entity and at most eight in total.
    let mut n_full = if difficulty.max_vehicles == 0 {
        0
    } else {
        rng.below(difficulty.max_vehicles + 1)
    };
    let mut n_small = if difficulty.max_small_vehicles == 0 {
        0
    } else {
        rng.below(difficulty.max_small_vehicles + 1)
    };
    if n_full + n_small == 0 && difficulty.max_vehicles + difficulty.max_small_vehicles > 0 {
        if difficulty.max_vehicles > 0 {
            n_full = 1;
        } else {
            n_small = 1;
        }
    }
    while n_full + n_small > 8 {
        if n_small > 0 {
            n_small -= 1;
        } else {
            n_full -= 1;
        }
    }
    let kinds: Vec<EntityKind> = std::iter::repeat(EntityKind::Vehicle)
        .take(n_full)
        .chain(std::iter::repeat(EntityKind::SmallVehicle).take(n_small))
        .collect();
    let force_crosswalk = !kinds.is_empty() && rng.chance(difficulty.crosswalk_force_prob);

    for (vi, &kind) in kinds.iter().enumerate() {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let li = rng.below(lanes.len());
            let lane = &lanes[li];
            let vertical = matches!(lane.dir, Heading::N | Heading::S);
            let (w, h) = vehicle_dims(kind, vertical);
            let (bx, by) = if force_crosswalk && vi == 0 {
                // Drop the first vehicle onto a crosswalk that meets a lane.
                let cw = &crosswalks[rng.below(crosswalks.len())];
                let (cx, cy) = cw.center();
                (cx - w / 2.0 + rng.uniform(-2.0, 2.0), cy - h / 2.0 + rng.uniform(-2.0, 2.0))
            } else {
                let x = rng.uniform(lane.rect.x0, (lane.rect.x1 - w).max(lane.rect.x0));
                let y = rng.uniform(lane.rect.y0, (lane.rect.y1 - h).max(lane.rect.y0));
                (x, y)
            };
            let b = BoundingBox::new(bx, by, bx + w, by + h).clamp_to(s, s);
            if b.width() < w - 0.5 || b.height() < h - 0.5 || !fits(&entities, &b) {
                continue;
            }
            // Heading follows the lane under the box center when there is
            // one, otherwise the lane we sampled from.
            let lane_dir = lane_of(&lanes, &b).map(|i| lanes[i].dir).unwrap_or(lane.dir);
            let heading = if rng.chance(difficulty.wrong_way_prob) {
                lane_dir.opposite()
            } else {
                lane_dir
            };
            entities.push(Entity {
                id: next_id,
                kind,
                bbox: b,
                heading,
                heat_level: rng.uniform(0.70, 0.95),
                color_index: rng.below(COLOR_COUNT as usize) as u8,
            });
            next_id += 1;
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "scene {id}: could not place vehicle {vi} after {PLACEMENT_RETRIES} tries"
            )));
        }
    }

    let n_peds = if difficulty.max_pedestrians == 0 || rng.chance(difficulty.ped_absent_prob) {
        0
    } else {
        1 + rng.below(difficulty.max_pedestrians)
    };
    for pi in 0..n_peds {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let (w, h) = (2.0, 2.0);
            let roll = rng.next_f64();
            let (bx, by) = if roll < 0.55 {
                // On a crosswalk.
                let cw = &crosswalks[rng.below(crosswalks.len())];
                (
                    rng.uniform(cw.x0, (cw.x1 - w).max(cw.x0)),
                    rng.uniform(cw.y0, (cw.y1 - h).max(cw.y0)),
                )
            } else if roll < 0.55 + difficulty.jaywalk_prob {
                // On a lane, outside crosswalks: jaywalking.
                let lane = &lanes[rng.below(lanes.len())];
                (
                    rng.uniform(lane.rect.x0, (lane.rect.x1 - w).max(lane.rect.x0)),
                    rng.uniform(lane.rect.y0, (lane.rect.y1 - h).max(lane.rect.y0)),
                )
            } else {
                // Off-road margins.
                let x = rng.uniform(0.0, s - w);
                let y = if rng.chance(0.5) {
                    rng.uniform(0.0, 20.0)
                } else {
                    rng.uniform(44.0, s - h)
                };
                (x, y)
            };
            let b = BoundingBox::new(bx, by, bx + w, by + h).clamp_to(s, s);
            if b.width() < w - 0.5 || b.height() < h - 0.5 || !fits(&entities, &b) {
                continue;
            }
            let heading = match rng.below(4) {
                0 => Heading::N,
                1 => Heading::E,
                2 => Heading::S,
                _ => Heading::W,
            };
            entities.push(Entity {
                id: next_id,
                kind: EntityKind::Pedestrian,
                bbox: b,
                heading,
                heat_level: rng.uniform(0.85, 0.97),
                color_index: rng.below(COLOR_COUNT as usize) as u8,
            });
            next_id += 1;
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "scene {id}: could not place pedestrian {pi} after {PLACEMENT_RETRIES} tries"
            )));
        }
    }

    let mut scene = SceneSpec {
        id,
        width: GRID_SIDE,
        height: GRID_SIDE,
        lanes,
        crosswalks,
        entities,
        condition,
        violations: Vec::new(),
    };
    scene.violations = derive_violations(&scene);
    Ok(scene)
}
