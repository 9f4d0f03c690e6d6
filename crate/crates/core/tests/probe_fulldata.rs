//! Step scaling at benchmark scale (2000 train / 500 test) for the cheap
//! optical-only cell: establishes the day/night differential ceiling.

use std::time::Instant;

use mtcnet_core::data::{generate_dataset, DatasetConfig, Vocab};
use mtcnet_core::eval::{evaluate_records, prepare_data};
use mtcnet_core::model::{
    evaluate, train, FusionMode, Modality, ModelConfig, ModelState, Optimizer, TrainSchedule,
};

#[test]
#[ignore = "manual probe"]
fn probe_opt_only_at_scale() {
    let base = ModelConfig {
        patch: 16,
        ..ModelConfig::default()
    };
    let t0 = Instant::now();
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
    println!(
        "prepare {:?}: bank N={} train={} test={}",
        t0.elapsed(),
        data.bank.len(),
        data.train.samples.len(),
        data.test.samples.len()
    );
    let vocab = Vocab::standard();

    let opt_cfg = ModelConfig {
        modality: Modality::Opt,
        fusion: FusionMode::SeqConcat,
        pgke: false,
        qasc: false,
        ..base
    };
    for lr in [3e-3, 1e-2] {
        let mut state = ModelState::new(opt_cfg, 7).unwrap();
        for seg in 0..8u64 {
            let sched = TrainSchedule {
                lr,
                steps: 1000,
                batch: 16,
                seed: 100 + seg,
                optimizer: Optimizer::adam(),
            };
            let t = Instant::now();
            let rep = train(&mut state, &data.train, None, &sched).unwrap();
            let dt = t.elapsed().as_secs_f64();
            let preds = evaluate(&state, &data.test, None, &vocab).unwrap();
            let m = evaluate_records(&preds).unwrap();
            println!(
                "opt lr={lr} {:>5} steps ({dt:>5.1}s): OA {:>6.2} day {:>6.2} night {:>6.2} fog {:>6.2} loss->{:.3}",
                (seg + 1) * 1000,
                m.oa,
                m.per_condition["day"],
                m.per_condition["night"],
                m.per_condition["fog"],
                rep.final_main(),
            );
            if seg == 7 {
                println!("    per-qtype {:?}", m.per_qtype);
            }
        }
    }
}
