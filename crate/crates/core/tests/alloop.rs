use std::collections::BTreeSet;

use paraal::alloop::{
    bootstrap, build_space, draw_pool, oracle_label, run_active_learning, ActiveLearner, AlConfig, AlSchedule, AlSetup,
    RetrainMode,
};
use paraal::embedspace::{SemanticSpace, VsConfig};
use paraal::qamodel::QaConfig;
use paraal::taskgen::{answer_set, generate_dataset, Dataset, TaskConfig};
use paraal::uncertainty::Strategy;
use paraal::Error;

fn tiny() -> (Dataset, AlConfig, VsConfig) {
    let ds = generate_dataset(
        &TaskConfig {
            scenes: 150,
            ..TaskConfig::default()
        },
        4,
    )
    .unwrap();
    let qa = QaConfig {
        embed_dim: 12,
        token_dim: 8,
        question_hidden: 12,
        decoder_hidden: 12,
        epochs: 2,
        ..QaConfig::default()
    };
    let mut al = AlConfig {
        qa,
        ..AlConfig::default()
    };
    al.acquisition.mc_samples = 4;
    al.acquisition.entropy_beam = 3;
    let vs = VsConfig {
        embed_dim: 12,
        token_dim: 8,
        decoder_hidden: 12,
        iterations: 10,
        batch_size: 16,
        ..VsConfig::default()
    };
    (ds, al, vs)
}

fn space(ds: &Dataset, schedule: &AlSchedule, vs: &VsConfig) -> SemanticSpace {
    let st = bootstrap(ds, schedule, 4).unwrap();
    build_space(ds, &st, vs, 4).unwrap()
}

#[test]
fn budget_follows_the_schedule() {
    let (ds, al, vs) = tiny();
    let schedule = AlSchedule {
        iterations: 2,
        ..AlSchedule::default()
    };
    let sp = space(&ds, &schedule, &vs);
    let setup = AlSetup {
        dataset: &ds,
        schedule: &schedule,
        config: &al,
        seed: 4,
        space: Some(&sp),
    };
    let n = ds.train_indices().len();
    let k = (0.05 * n as f64).round() as usize;
    for strategy in Strategy::ALL {
        let st = run_active_learning(setup, strategy).unwrap();
        let sizes: Vec<usize> = st.metric_history.iter().map(|r| r.labeled_count).collect();
        let b = (0.05 * n as f64).round() as usize;
        assert_eq!(sizes, vec![b, b + k, b + 2 * k], "{strategy}");
        // no item is labeled twice, and selections are disjoint
        let set: BTreeSet<usize> = st.labeled.iter().copied().collect();
        assert_eq!(set.len(), st.labeled.len());
        let picked: BTreeSet<usize> = st.selection_log.iter().map(|e| e.item_index).collect();
        assert_eq!(picked.len(), 2 * k);
        assert!(picked.iter().all(|i| !st.unlabeled.contains(i)));
        for rec in &st.metric_history[1..] {
            let total: f64 = rec.type_percentages.values().sum();
            assert!((total - 100.0).abs() < 0.1, "{total}");
        }
        assert!(st.metric_history[0].type_percentages.is_empty());
    }
}

#[test]
fn zero_iterations_only_evaluates_the_bootstrap_model() {
    let (ds, al, _) = tiny();
    let schedule = AlSchedule {
        iterations: 0,
        ..AlSchedule::default()
    };
    let setup = AlSetup {
        dataset: &ds,
        schedule: &schedule,
        config: &al,
        seed: 1,
        space: None,
    };
    let st = run_active_learning(setup, Strategy::Margin).unwrap();
    assert_eq!(st.metric_history.len(), 1);
    assert_eq!(st.metric_history[0].iteration, 0);
    assert!(st.selection_log.is_empty());
}

#[test]
fn replays_are_identical_and_strategies_share_their_start() {
    let (ds, al, _) = tiny();
    let schedule = AlSchedule {
        iterations: 1,
        ..AlSchedule::default()
    };
    let setup = AlSetup {
        dataset: &ds,
        schedule: &schedule,
        config: &al,
        seed: 9,
        space: None,
    };
    let a = run_active_learning(setup, Strategy::Random).unwrap();
    let b = run_active_learning(setup, Strategy::Random).unwrap();
    assert_eq!(a, b);
    let e = run_active_learning(setup, Strategy::Entropy).unwrap();
    // same bootstrap, same f0 evaluation, same first pool
    assert_eq!(
        a.labeled[..a.labeled.len() - e.selection_log.len()],
        e.labeled[..e.labeled.len() - e.selection_log.len()]
    );
    assert_eq!(a.metric_history[0], e.metric_history[0]);
    assert_eq!(a.pool, e.pool);
}

#[test]
fn oracle_refuses_relabeling() {
    let (ds, _, _) = tiny();
    let schedule = AlSchedule::default();
    let mut st = bootstrap(&ds, &schedule, 2).unwrap();
    let pool = draw_pool(&st, &ds, &schedule, 2, 1).unwrap();
    let before = st.labeled.len();
    let items = oracle_label(&ds, &mut st, &pool[..3]).unwrap();
    assert_eq!(st.labeled.len(), before + 3);
    for it in items {
        assert!(answer_set(it, &ds.table).unwrap().contains(&it.answer_tokens));
    }
    assert!(matches!(
        oracle_label(&ds, &mut st, &pool[..1]),
        Err(Error::InvalidArgument(_))
    ));
    assert!(oracle_label(&ds, &mut st, &[pool[5], pool[5]]).is_err());
    assert!(oracle_label(&ds, &mut st, &[ds.test_indices()[0]]).is_err());
}

#[test]
fn pools_are_unlabeled_and_seeded() {
    let (ds, _, _) = tiny();
    let schedule = AlSchedule::default();
    let st = bootstrap(&ds, &schedule, 2).unwrap();
    let p1 = draw_pool(&st, &ds, &schedule, 2, 1).unwrap();
    assert_eq!(p1, draw_pool(&st, &ds, &schedule, 2, 1).unwrap());
    assert_ne!(p1, draw_pool(&st, &ds, &schedule, 2, 2).unwrap());
    assert_eq!(p1.len(), (0.15 * ds.train_indices().len() as f64).round() as usize);
    assert!(p1.iter().all(|i| st.unlabeled.contains(i)));
    let mut starved = st.clone();
    starved.unlabeled = starved.unlabeled.iter().take(5).copied().collect();
    let err = draw_pool(&starved, &ds, &schedule, 2, 1).unwrap_err();
    assert!(err.to_string().contains("short by"), "{err}");
}

#[test]
fn warm_start_and_resume() {
    let (ds, al, _) = tiny();
    let schedule = AlSchedule {
        iterations: 2,
        retrain_mode: RetrainMode::Continue,
        ..AlSchedule::default()
    };
    let setup = AlSetup {
        dataset: &ds,
        schedule: &schedule,
        config: &al,
        seed: 6,
        space: None,
    };
    let full = run_active_learning(setup, Strategy::LeastConfidence).unwrap();
    // stopping after one step and resuming from the saved state and model
    let st = bootstrap(&ds, &schedule, 6).unwrap();
    let (f0, loss) = paraal::alloop::train_model(&setup, &st.labeled, false, 0, None).unwrap();
    let mut l = ActiveLearner::start(setup, Strategy::LeastConfidence, st, f0, loss).unwrap();
    l.step().unwrap();
    let resumed = ActiveLearner::resume(setup, Strategy::LeastConfidence, l.state.clone(), l.model.clone());
    assert_eq!(resumed.run().unwrap(), full);
}

#[test]
fn errors_carry_the_iteration() {
    let (ds, al, _) = tiny();
    let schedule = AlSchedule {
        iterations: 1,
        ..AlSchedule::default()
    };
    let setup = AlSetup {
        dataset: &ds,
        schedule: &schedule,
        config: &al,
        seed: 6,
        space: None,
    };
    // the denoiser needs a space, and scoring happens in iteration 1
    let err = run_active_learning(setup, Strategy::BayeDeno).unwrap_err();
    assert!(matches!(err, Error::AtIteration { iteration: 1, .. }), "{err:?}");
}
