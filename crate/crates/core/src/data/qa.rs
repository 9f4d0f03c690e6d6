//! Templated question/answer generation from scene ground truth.

use serde::{Deserialize, Serialize};

use super::scene::{color_name, Condition, EntityKind, SceneSpec, ViolationKind, COLOR_COUNT};
use crate::tensor::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QType {
    Presence,
    Count,
    LocationQuadrant,
    CompareCount,
    ConditionNight,
    ConditionFog,
    VehicleViolation,
    PedestrianViolation,
    ModalityMatch,
    Deduce,
}

impl QType {
    pub fn as_str(&self) -> &'static str {
        match self {
            QType::Presence => "presence",
            QType::Count => "count",
            QType::LocationQuadrant => "location-quadrant",
            QType::CompareCount => "compare-count",
            QType::ConditionNight => "condition-night",
            QType::ConditionFog => "condition-fog",
            QType::VehicleViolation => "vehicle-violation",
            QType::PedestrianViolation => "pedestrian-violation",
            QType::ModalityMatch => "modality-match",
            QType::Deduce => "deduce",
        }
    }

    pub fn all() -> [QType; 10] {
        [
            QType::Presence,
            QType::Count,
            QType::LocationQuadrant,
            QType::CompareCount,
            QType::ConditionNight,
            QType::ConditionFog,
            QType::VehicleViolation,
            QType::PedestrianViolation,
            QType::ModalityMatch,
            QType::Deduce,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    #[serde(rename = "q")]
    pub question: String,
    #[serde(rename = "a")]
    pub answer: String,
    pub qtype: QType,
}

fn yn(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}

fn count_of(scene: &SceneSpec, kind: EntityKind) -> usize {
    scene.entities.iter().filter(|e| e.kind == kind).count()
}

fn quadrant(scene: &SceneSpec, cx: f64, cy: f64) -> &'static str {
    let (w2, h2) = (scene.width as f64 / 2.0, scene.height as f64 / 2.0);
    match (cy < h2, cx < w2) {
        (true, true) => "north-west",
        (true, false) => "north-east",
        (false, true) => "south-west",
        (false, false) => "south-east",
    }
}

/// Condition questions are asked on a deterministic third of the scenes to
/// keep answer priors informative and per-type weights balanced.
pub fn asks_condition_questions(scene_id: u64) -> bool {
    scene_id % 3 == 0
}

/// Generate this scene's QA pairs in a fixed template order. Deterministic
/// given (scene, rng state).
pub fn generate_qa(scene: &SceneSpec, rng: &mut SeededRng) -> Vec<QAPair> {
    let mut out = Vec::with_capacity(16);
    let n_veh = count_of(scene, EntityKind::Vehicle);
    let n_small = count_of(scene, EntityKind::SmallVehicle);
    let n_ped = count_of(scene, EntityKind::Pedestrian);

    // Presence.
    out.push(QAPair {
        question: "is there a vehicle".into(),
        answer: yn(n_veh > 0),
        qtype: QType::Presence,
    });
    out.push(QAPair {
        question: "is there a pedestrian".into(),
        answer: yn(n_ped > 0),
        qtype: QType::Presence,
    });
    out.push(QAPair {
        question: "is there a small-vehicle".into(),
        answer: yn(n_small > 0),
        qtype: QType::Presence,
    });

    // Count (full-size vehicles; the small/pedestrian counts are implied by
    // the presence and comparison questions without tripling the type).
    out.push(QAPair {
        question: "how many vehicles".into(),
        answer: n_veh.to_string(),
        qtype: QType::Count,
    });

    // Comparison.
    out.push(QAPair {
        question: "are there more vehicles than pedestrians".into(),
        answer: yn(n_veh > n_ped),
        qtype: QType::CompareCount,
    });

    // Location of a uniquely-colored vehicle, when one exists.
    let mut color_counts = [0usize; COLOR_COUNT as usize];
    for e in &scene.entities {
        if e.kind == EntityKind::Vehicle {
            color_counts[e.color_index as usize] += 1;
        }
    }
    // One location question per uniquely-colored vehicle (up to three).
    let unique: Vec<&super::scene::Entity> = scene
        .entities
        .iter()
        .filter(|e| e.kind == EntityKind::Vehicle && color_counts[e.color_index as usize] == 1)
        .collect();
    for target in unique.iter().take(3) {
        let (cx, cy) = target.bbox.center();
        out.push(QAPair {
            question: format!("which quadrant has the {} vehicle", color_name(target.color_index)),
            answer: quadrant(scene, cx, cy).to_string(),
            qtype: QType::LocationQuadrant,
        });
    }

    // Motorized violations.
    let any_crosswalk = scene.violations.iter().any(|v| v.kind == ViolationKind::Crosswalk);
    let any_wrongway = scene.violations.iter().any(|v| v.kind == ViolationKind::WrongWay);
    let any_jaywalk = scene.violations.iter().any(|v| v.kind == ViolationKind::Pedestrian);
    out.push(QAPair {
        question: "is any vehicle violating a rule".into(),
        answer: yn(any_crosswalk || any_wrongway),
        qtype: QType::VehicleViolation,
    });
    out.push(QAPair {
        question: "is any vehicle in the crosswalk".into(),
        answer: yn(any_crosswalk),
        qtype: QType::VehicleViolation,
    });
    out.push(QAPair {
        question: "is any vehicle going the wrong way".into(),
        answer: yn(any_wrongway),
        qtype: QType::VehicleViolation,
    });
    out.push(QAPair {
        question: "is any pedestrian jaywalking".into(),
        answer: yn(any_jaywalk),
        qtype: QType::PedestrianViolation,
    });

    // Scene conditions, on the deterministic subset.
    if asks_condition_questions(scene.id) {
        out.push(QAPair {
            question: "is it night".into(),
            answer: yn(scene.condition == Condition::Night),
            qtype: QType::ConditionNight,
        });
        out.push(QAPair {
            question: "is it foggy".into(),
            answer: yn(scene.condition == Condition::Fog),
            qtype: QType::ConditionFog,
        });
    }

    // Modality correspondence: half the samples pair this scene's optical
    // plane with another scene's thermal plane (resolved by the loader).
    let matches = rng.chance(0.5);
    out.push(QAPair {
        question: "do the two images match".into(),
        answer: yn(matches),
        qtype: QType::ModalityMatch,
    });

    // Two-hop deduction over violations, conditions and density.
    let needs_attention = !scene.violations.is_empty()
        || (scene.condition != Condition::Day && n_veh + n_small >= 5);
    out.push(QAPair {
        question: "does the scene need attention".into(),
        answer: yn(needs_attention),
        qtype: QType::Deduce,
    });

    out
}
