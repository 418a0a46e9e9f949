//! Cross-module flows: schedule -> simulation -> transcript file -> attack,
//! and the training baselines.

use std::fs::File;
use std::io::{BufReader, BufWriter};

use sdfl_core::adversary::{attack, earliest_breach, reconstruct_closed_form};
use sdfl_core::aggregate::{run_aggregation, AdmmConfig};
use sdfl_core::fedtrain::{
    local_update, make_synthetic, train, FlConfig, LocalDataset, Model, ModelKind, TrainMode,
};
use sdfl_core::simnet::{peer_view, run_simulation};
use sdfl_core::{generate_schedule, validate_schedule, ParamVector, SearchBudget, TranscriptF64};

fn vectors(n: usize, dim: usize) -> Vec<ParamVector<f64>> {
    (0..n)
        .map(|k| ParamVector::from_vec((0..dim).map(|j| ((k * 7 + j * 3) % 11) as f64 - 5.0).collect()).unwrap())
        .collect()
}

#[test]
fn transcript_file_round_trip_then_attack() {
    let schedule = generate_schedule(9, 3, 3, SearchBudget::default()).unwrap();
    assert!(validate_schedule(&schedule).is_valid());
    let ws = vectors(9, 4);
    let cfg = AdmmConfig::new(1.5, 8).grouped(schedule).allow_unsafe(true);
    let (z, tr) = run_simulation(&ws, &cfg, 21).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.jsonl");
    tr.write_jsonl(BufWriter::new(File::create(&path).unwrap())).unwrap();
    let back = TranscriptF64::read_jsonl(BufReader::new(File::open(&path).unwrap())).unwrap();
    assert_eq!(back, tr);
    back.verify().unwrap();
    assert_eq!(back.replay().unwrap().last().unwrap(), &z);

    let view = peer_view(&back, 2).unwrap();
    for target in (0..9).filter(|&t| t != 2) {
        let breach = earliest_breach(&cfg.mode, 9, 2, target).unwrap();
        assert!(breach <= 8);
        for horizon in 1..=8 {
            let res = attack(&view, target, horizon).unwrap();
            assert_eq!(res.is_unique(), horizon >= breach, "target {target} T={horizon}");
            if let Some(w_hat) = res.w_hat() {
                assert!(w_hat.l2_distance(&ws[target]).unwrap() <= 1e-6 * ws[target].l2_norm().max(1.0));
            }
        }
    }
}

#[test]
fn closed_form_matches_system_on_all_to_all() {
    let ws = vectors(6, 3);
    let (_, tr) = run_simulation(&ws, &AdmmConfig::new(0.7, 2), 1).unwrap();
    let view = peer_view(&tr, 0).unwrap();
    for target in 1..6 {
        let closed = reconstruct_closed_form(&view, target).unwrap();
        let system = attack(&view, target, 2).unwrap();
        let w_hat = system.w_hat().unwrap();
        assert!(closed.l2_distance(w_hat).unwrap() < 1e-9);
        assert!(closed.l2_distance(&ws[target]).unwrap() < 1e-9);
    }
}

#[test]
fn f32_run_tracks_f64() {
    let ws64 = vectors(9, 5);
    let ws32: Vec<ParamVector<f32>> = ws64
        .iter()
        .map(|w| ParamVector::from_vec(w.as_slice().iter().map(|&v| v as f32).collect()).unwrap())
        .collect();
    let schedule = generate_schedule(9, 3, 0, SearchBudget::default()).unwrap();
    let r64 = run_aggregation(&ws64, &AdmmConfig::new(1.0, 6).grouped(schedule.clone()).lambda_zero(), 0).unwrap();
    let r32 = run_aggregation(&ws32, &AdmmConfig::new(1.0f32, 6).grouped(schedule).lambda_zero(), 0).unwrap();
    for (a, b) in r64.z_final.as_slice().iter().zip(r32.z_final.as_slice()) {
        assert!((a - *b as f64).abs() < 1e-5);
    }
}

#[test]
fn single_peer_fedavg_is_plain_sgd() {
    let data: Vec<LocalDataset<f64>> = make_synthetic(1, 120, 4, 0.0, 8).unwrap();
    let cfg = FlConfig {
        rounds: 4,
        local_epochs: 2,
        batch_size: 10,
        seed: 8,
        ..FlConfig::default()
    };
    let report = train(TrainMode::Fedavg, &cfg, &data).unwrap();

    let model = Model::for_data(ModelKind::LogisticRegression, &data[0].train).unwrap();
    let zero_rounds = FlConfig { rounds: 0, ..cfg.clone() };
    let init = train(TrainMode::Local, &zero_rounds, &data).unwrap().final_params.remove(0);
    let sgd = local_update(&model, &init, &data[0].train, &FlConfig { local_epochs: 8, ..cfg.clone() }, 0, 0).unwrap();
    assert_eq!(report.final_params[0], sgd);

    let local = train(TrainMode::Local, &cfg, &data).unwrap();
    assert_eq!(local.final_params, report.final_params);
}

#[test]
fn training_is_reproducible() {
    let data: Vec<LocalDataset<f64>> = make_synthetic(9, 60, 3, 0.7, 2).unwrap();
    let cfg = FlConfig {
        rounds: 3,
        batch_size: 16,
        seed: 2,
        model: ModelKind::Mlp { hidden: 6 },
        ..FlConfig::default()
    };
    for mode in [TrainMode::Secured, TrainMode::Fedavg, TrainMode::Local] {
        let a = serde_json::to_vec(&train(mode, &cfg, &data).unwrap()).unwrap();
        let b = serde_json::to_vec(&train(mode, &cfg, &data).unwrap()).unwrap();
        assert_eq!(a, b, "{mode}");
    }
}

#[test]
fn secured_rounds_report_gap_and_residuals() {
    let data: Vec<LocalDataset<f64>> = make_synthetic(9, 60, 3, 0.5, 6).unwrap();
    let cfg = FlConfig {
        rounds: 2,
        batch_size: 16,
        seed: 6,
        ..FlConfig::default()
    };
    let report = train(TrainMode::Secured, &cfg, &data).unwrap();
    assert_eq!(report.gap, Some(4));
    assert_eq!(report.admm_iterations, Some(2));
    assert_eq!(report.rounds.len(), 3);
    for r in &report.rounds {
        assert!(r.aggregation_residual.unwrap() > 0.0);
        assert_eq!((r.gap, r.admm_iterations), (Some(4), Some(2)));
        assert_eq!(r.peer_accuracy.len(), 9);
    }
    assert!(report.final_params.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn many_admm_iterations_track_fedavg() {
    let data: Vec<LocalDataset<f64>> = make_synthetic(9, 60, 3, 0.5, 12).unwrap();
    let base = FlConfig {
        rounds: 5,
        batch_size: 16,
        seed: 12,
        ..FlConfig::default()
    };
    let fedavg = train(TrainMode::Fedavg, &base, &data).unwrap();
    let gap_to_fedavg = |iterations: usize| {
        let mut cfg = base.clone();
        cfg.secure.iterations = iterations;
        cfg.secure.allow_unsafe = true;
        let secured = train(TrainMode::Secured, &cfg, &data).unwrap();
        secured.final_params[0].linf_distance(&fedavg.final_params[0]).unwrap()
    };
    assert!(gap_to_fedavg(30) <= 1e-6);
    let (d4, d6, d8) = (gap_to_fedavg(4), gap_to_fedavg(6), gap_to_fedavg(8));
    assert!(d6 < d4 && d8 < d6, "{d4} {d6} {d8}");
    // two more iterations shrink the error by about (1/3)^2
    assert!(d8 / d6 < 0.5 && d6 / d4 < 0.5, "{d4} {d6} {d8}");
}
