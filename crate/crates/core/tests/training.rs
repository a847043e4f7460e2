mod common;

use common::*;
use deep_arguing::autodiff::{AdamW, Tape, Tensor};
use deep_arguing::qbaf::{build_casebase_graph, mine, Case, FullCasebase};
use deep_arguing::semantics::{reference_strengths, NewCaseMode};
use deep_arguing::train::{class_weights, loss_dag, train, TrainConfig, TrainedModel};
use deep_arguing::Error;

fn blobs(seed: u64) -> deep_arguing::data::PreparedData {
    let dir = tempfile::tempdir().unwrap();
    prepared_blobs(dir.path(), seed)
}

/// Every term recomputed from scalar oracles: reference semantics for the
/// task loss, the exceptionality function for `L_delta`, a Taylor series for
/// `L_dag` and explicit sums for sparsity.
fn loss_oracle(trained: &TrainedModel, batch: &[Case], weights: &[f64]) -> [f64; 5] {
    let cfg = &trained.config;
    let fcb = &trained.casebase;
    let x = Tensor::from_rows(&batch.iter().map(|c| c.x.as_slice()).collect::<Vec<_>>()).unwrap();
    let q = mine(&trained.model, fcb, &x, cfg.lse_temperature).unwrap();
    let s = reference_strengths(&q, cfg.iterations, cfg.new_case_mode).unwrap();

    let mut task = 0.0;
    for (b, case) in batch.iter().enumerate() {
        let logits: Vec<f64> = q.target_indices.iter().map(|&t| s.at(b, t)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        task += weights[case.label] * (lse - logits[case.label]);
    }
    task /= batch.len() as f64;

    let forward = trained.model.exceptionality(&fcb.case_features(), &fcb.target_features()).unwrap();
    let backward = trained.model.exceptionality(&fcb.target_features(), &fcb.case_features()).unwrap();
    let mse = |t: &Tensor, goal: f64| t.data().iter().map(|v| (v - goal) * (v - goal)).sum::<f64>() / t.len() as f64;
    let delta = mse(&forward, 1.0) + mse(&backward, 0.0);

    let n = q.num_nodes();
    let sq: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| q.a_cb.at(i, j).powi(2)).collect()).collect();
    let dag = trace_expm_oracle(&sq) - n as f64;
    let sp_cb = q.a_cb.data().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    let sp_new = q.a_n.data().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    [task, delta, dag, sp_cb, sp_new]
}

#[test]
fn objective_matches_term_by_term_oracle() {
    for seed in 0..10 {
        let (trained, batch, weights) = common::gradcheck::pipeline_fixture(seed);
        let got = trained.loss(&batch, &weights).unwrap();
        let [task, delta, dag, sp_cb, sp_new] = loss_oracle(&trained, &batch, &weights);
        let cfg = &trained.config;
        assert!((got.task - task).abs() < 1e-12, "task {} vs {task}", got.task);
        assert!((got.delta - delta).abs() < 1e-12);
        assert!((got.dag - dag).abs() < 1e-9 * dag.abs().max(1.0));
        assert!((got.sparsity_casebase - sp_cb).abs() < 1e-12);
        assert!((got.sparsity_new - sp_new).abs() < 1e-12);
        let summed = got.task
            + cfg.lambda_delta * got.delta
            + cfg.lambda_dag * got.dag
            + cfg.lambda_sp * got.sparsity_casebase
            + cfg.lambda_sp_prime * got.sparsity_new;
        assert!((got.total - summed).abs() < 1e-12);
    }
}

#[test]
fn zero_lambdas_leave_only_the_task_loss() {
    let (mut trained, batch, weights) = common::gradcheck::pipeline_fixture(1);
    trained.config =
        TrainConfig { lambda_delta: 0.0, lambda_dag: 0.0, lambda_sp: 0.0, lambda_sp_prime: 0.0, ..trained.config.clone() };
    let l = trained.loss(&batch, &weights).unwrap();
    assert_eq!(l.total, l.task);
}

#[test]
fn loss_decomposition_holds_through_training() {
    let data = blobs(2);
    let cfg = TrainConfig { epochs: 5, ..small_config(2) };
    let (_, report) = train(&cfg, &data.train, &data.val, 2).unwrap();
    for e in &report.epochs {
        let t = &e.train;
        let summed = t.task
            + cfg.lambda_delta * t.delta
            + cfg.lambda_dag * t.dag
            + cfg.lambda_sp * t.sparsity_casebase
            + cfg.lambda_sp_prime * t.sparsity_new;
        assert!((t.total - summed).abs() < 1e-12);
    }
}

#[test]
fn dag_penalty_alone_removes_cycles() {
    // A random model over enough cases to contain longer cycles.
    let mut chosen = None;
    for seed in 0..50 {
        let mut r = rng(seed);
        let cases = random_cases(&mut r, 10, 3, 2);
        let model = random_model(seed, 3, 4);
        let fcb = FullCasebase::new(cases, 2).unwrap();
        let q = mine(&model, &fcb, &Tensor::zeros(&[1, 3]), 0.025).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(q.a_cb).unwrap();
        let l = loss_dag(&mut tape, a).unwrap();
        if tape.value(l).item() > 1e-6 {
            chosen = Some((model, fcb));
            break;
        }
    }
    let (mut model, fcb) = chosen.expect("some random model has a cyclic graph");
    let frozen = 2 * (model.extractor().weights().len() + model.base_head().weights().len());

    let mut optimizer = AdamW::new(0.01, 0.0);
    let mut history = Vec::new();
    for _ in 0..50 {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).unwrap();
        let graph = build_casebase_graph(&mut tape, &bound, &fcb, 0.025).unwrap();
        let l = loss_dag(&mut tape, graph.a_cb).unwrap();
        history.push(tape.value(l).item());
        let grads = tape.backward(l).unwrap();
        model.store_grads(&bound, &grads);
        let mut params = model.params_mut();
        optimizer.step(&mut params[frozen..]).unwrap();
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape).unwrap();
    let graph = build_casebase_graph(&mut tape, &bound, &fcb, 0.025).unwrap();
    let l = loss_dag(&mut tape, graph.a_cb).unwrap();
    let last = tape.value(l).item();
    assert!(last < history[0], "{} -> {last}", history[0]);
}

#[test]
fn exceptionality_points_from_cases_to_targets_after_training() {
    let data = blobs(5);
    let (trained, _) = train(&small_config(5), &data.train, &data.val, 2).unwrap();
    let fcb = &trained.casebase;
    let forward = trained.model.exceptionality(&fcb.case_features(), &fcb.target_features()).unwrap();
    let backward = trained.model.exceptionality(&fcb.target_features(), &fcb.case_features()).unwrap();
    let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.len() as f64;
    assert!(mean(&forward) > mean(&backward), "{} vs {}", mean(&forward), mean(&backward));
}

#[test]
fn identical_runs_give_identical_reports() {
    let data = blobs(9);
    let cfg = TrainConfig { epochs: 4, ..small_config(9) };
    let (m1, r1) = train(&cfg, &data.train, &data.val, 2).unwrap();
    let (m2, r2) = train(&cfg, &data.train, &data.val, 2).unwrap();
    assert_eq!(r1.to_jsonl(), r2.to_jsonl());
    assert_eq!(m1, m2);
}

#[test]
fn thread_count_does_not_change_results() {
    let data = blobs(10);
    let cfg = TrainConfig { epochs: 3, ..small_config(10) };
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (m1, r1) = single.install(|| train(&cfg, &data.train, &data.val, 2).unwrap());
    let wide = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let (m2, r2) = wide.install(|| train(&cfg, &data.train, &data.val, 2).unwrap());
    assert_eq!(r1, r2);
    assert_eq!(m1, m2);
}

#[test]
fn blobs_are_separated() {
    let data = blobs(1);
    let (trained, report) = train(&small_config(1), &data.train, &data.val, 2).unwrap();
    let metrics = trained.evaluate(&data.test).unwrap();
    assert!(metrics.accuracy >= 0.95, "{metrics:?}");
    assert!(report.final_epoch().unwrap().train.total < report.initial_train_loss);
}

#[test]
fn batch_prediction_matches_one_row_at_a_time() {
    let data = blobs(3);
    let cfg = TrainConfig { epochs: 2, ..small_config(3) };
    let (trained, _) = train(&cfg, &data.train, &data.val, 2).unwrap();
    let x = Tensor::from_rows(&data.test.iter().map(|c| c.x.as_slice()).collect::<Vec<_>>()).unwrap();
    let all = trained.predict(&x).unwrap();
    for (i, c) in data.test.iter().enumerate() {
        let one = trained.predict(&Tensor::matrix(1, 2, c.x.clone()).unwrap()).unwrap();
        assert_eq!(one.labels[0], all.labels[i]);
        assert_eq!(one.target_strengths.row(0), all.target_strengths.row(i));
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let data = blobs(4);
    let bad = TrainConfig { lr: -1.0, ..small_config(0) };
    assert!(matches!(train(&bad, &data.train, &data.val, 2), Err(Error::Config(_))));
    let mut ragged = data.train.clone();
    ragged[0].x.push(0.0);
    assert!(matches!(train(&small_config(0), &ragged, &[], 2), Err(Error::Dimension { .. })));
    let one_class: Vec<Case> = data.train.iter().filter(|c| c.label == 0).cloned().collect();
    assert!(train(&small_config(0), &one_class, &[], 2).is_err());
    assert!(class_weights(&one_class, 2).is_err());
}

#[test]
fn one_shot_mode_trains() {
    let data = blobs(6);
    let cfg = TrainConfig { epochs: 3, new_case_mode: NewCaseMode::OneShot, ..small_config(6) };
    let (trained, report) = train(&cfg, &data.train, &data.val, 2).unwrap();
    let last = report.final_epoch().unwrap().train.total;
    assert!(last.is_finite() && last < report.initial_train_loss);
    assert_eq!(trained.evaluate(&data.test).unwrap().confusion.len(), 2);
}
