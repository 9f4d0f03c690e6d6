//! Isolate the vision-learning blocker: type mixture vs condition mixture.

use mtcnet_core::data::{generate_dataset, DatasetConfig, Vocab};
use mtcnet_core::eval::{evaluate_records, prepare_data};
use mtcnet_core::model::{
    evaluate, train, EncodedDataset, FusionMode, Modality, ModelConfig, ModelState, Optimizer,
    TrainSchedule,
};

fn filtered_q(data: &EncodedDataset, question: &str) -> EncodedDataset {
    EncodedDataset {
        features: data.features.clone(),
        samples: data
            .samples
            .iter()
            .filter(|s| s.question == question)
            .cloned()
            .collect(),
    }
}

#[test]
#[ignore = "manual probe"]
fn probe_single_type_mixed_conditions_at_scale() {
    let base = ModelConfig {
        patch: 16,
        ..ModelConfig::default()
    };
    let train_split = generate_dataset(&DatasetConfig {
        n_scenes: 2000,
        seed: 1234,
        ..DatasetConfig::default()
    })
    .unwrap();
    let test_split = generate_dataset(&DatasetConfig {
        n_scenes: 500,
        seed: 4321,
        ..DatasetConfig::default()
    })
    .unwrap();
    let data = prepare_data(&train_split, &test_split, &base, 0.07, 0.05, 99).unwrap();
    let vocab = Vocab::standard();
    let opt_cfg = ModelConfig {
        modality: Modality::Opt,
        fusion: FusionMode::SeqConcat,
        pgke: false,
        qasc: false,
        ..base
    };

    for question in [
        "is any vehicle in the crosswalk",
        "is there a pedestrian",
        "which quadrant has the red vehicle",
    ] {
        let train_f = filtered_q(&data.train, question);
        let test_f = filtered_q(&data.test, question);
        if train_f.samples.is_empty() {
            continue;
        }
        let mut state = ModelState::new(opt_cfg, 7).unwrap();
        for seg in 0..3u64 {
            let sched = TrainSchedule {
                lr: 3e-3,
                steps: 700,
                batch: 16,
                seed: 100 + seg,
                optimizer: Optimizer::adam(),
            };
            let rep = train(&mut state, &train_f, None, &sched).unwrap();
            let preds = evaluate(&state, &test_f, None, &vocab).unwrap();
            let m = evaluate_records(&preds).unwrap();
            println!(
                "[{question}] {:>4} steps: OA {:>6.2} day {:>6.2} night {:>6.2} fog {:>6.2} loss->{:.3}",
                (seg + 1) * 700,
                m.oa,
                m.per_condition.get("day").copied().unwrap_or(f64::NAN),
                m.per_condition.get("night").copied().unwrap_or(f64::NAN),
                m.per_condition.get("fog").copied().unwrap_or(f64::NAN),
                rep.final_main(),
            );
        }
    }
}
