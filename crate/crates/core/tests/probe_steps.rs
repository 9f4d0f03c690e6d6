//! How does held-out accuracy scale with training steps?

use std::time::Instant;

use mtcnet_core::data::{generate_dataset, DatasetConfig, Vocab};
use mtcnet_core::eval::{evaluate_records, prepare_data};
use mtcnet_core::model::{
    evaluate, train, FusionMode, Modality, ModelConfig, ModelState, Optimizer, TrainSchedule,
};

fn run_cell(
    name: &str,
    cfg: ModelConfig,
    data: &mtcnet_core::eval::PreparedData,
    segments: usize,
    steps_per_segment: usize,
    lr: f64,
) {
    let mut state = ModelState::new(cfg, 7).unwrap();
    let vocab = Vocab::standard();
    let bank = Some((&data.bank, &data.index));
    for seg in 0..segments {
        let sched = TrainSchedule {
            lr,
            steps: steps_per_segment,
            batch: 16,
            seed: 100 + seg as u64,
            optimizer: Optimizer::adam(),
        };
        let t = Instant::now();
        let rep = train(&mut state, &data.train, bank, &sched).unwrap();
        let dt = t.elapsed();
        let preds = evaluate(&state, &data.test, bank, &vocab).unwrap();
        let m = evaluate_records(&preds).unwrap();
        println!(
            "{name} after {:>4} steps ({:>5.1}s train): OA {:>6.2} AA {:>6.2} day {:>6.2} night {:>6.2} fog {:>6.2} | loss {:.3}->{:.3} alpha {:.3} beta {:.3}",
            (seg + 1) * steps_per_segment,
            dt.as_secs_f64(),
            m.oa,
            m.aa,
            m.per_condition.get("day").copied().unwrap_or(f64::NAN),
            m.per_condition.get("night").copied().unwrap_or(f64::NAN),
            m.per_condition.get("fog").copied().unwrap_or(f64::NAN),
            rep.initial_main(),
            rep.final_main(),
            state.gates.alpha.value.data()[0],
            state.gates.beta.value.data()[0],
        );
        if seg + 1 == segments {
            println!("    per-qtype {:?}", m.per_qtype);
        }
    }
}

#[test]
#[ignore = "manual probe"]
fn probe_steps_scaling() {
    let base = ModelConfig::default();
    let train_split = generate_dataset(&DatasetConfig {
        n_scenes: 400,
        seed: 1234,
        ..DatasetConfig::default()
    })
    .unwrap();
    let test_split = generate_dataset(&DatasetConfig {
        n_scenes: 200,
        seed: 4321,
        ..DatasetConfig::default()
    })
    .unwrap();
    let data = prepare_data(&train_split, &test_split, &base, 0.07, 0.05, 99).unwrap();

    // Optical-only first: the day/night split is the clearest signal that
    // the model reads pixels at all.
    let opt_cfg = ModelConfig {
        modality: Modality::Opt,
        fusion: FusionMode::SeqConcat,
        pgke: false,
        qasc: false,
        ..base
    };
    run_cell("opt-only", opt_cfg, &data, 5, 300, 3e-3);

    let full_cfg = base;
    run_cell("full    ", full_cfg, &data, 5, 300, 3e-3);
}
