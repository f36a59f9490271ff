use std::sync::atomic::{AtomicU64, Ordering};

use agp_core::dataset::sample_split;
use agp_core::gateway::{ChatBackend, ChatRequest, ChatResponse, GatewayError};
use agp_core::mock::{mock_complete, MockBackend, MockWorldState};
use agp_core::optimizer::{evaluate_run, resume, BatchRecord, RunState, StopReason, TrainConfig, TrainObserver};
use agp_core::profile::seed_prompt;
use agp_core::{expected_calls, generate_synthetic_world, train, DatasetBundle, Gateway, Llm, Purpose, RerankMode, SyntheticWorldSpec, TrainError};

fn world(seed: u64, noise_rate: f64) -> (SyntheticWorldSpec, DatasetBundle) {
    let spec = SyntheticWorldSpec {
        seed,
        noise_rate,
        ..SyntheticWorldSpec::default()
    };
    let bundle = generate_synthetic_world(&spec).unwrap();
    (spec, sample_split(&bundle, 20, 30, seed, false).unwrap())
}

fn cfg(batch_size: usize) -> TrainConfig {
    TrainConfig {
        batch_size,
        history_len: 5,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[derive(Default)]
struct ZeroGradientBatches(u64);

impl TrainObserver for ZeroGradientBatches {
    fn on_batch(&mut self, record: &BatchRecord, _state: &RunState) {
        if (record.summary.batch_wt - 1.0).abs() < 1e-12 {
            self.0 += 1;
        }
    }
}

#[test]
fn one_epoch_uses_the_budget_formula() {
    let (spec, bundle) = world(3, 0.5);
    for b in [5, 10, 20] {
        let llm = Gateway::new(MockBackend::new(MockWorldState::for_world(spec.clone())));
        let config = TrainConfig {
            max_epochs: 1,
            ..cfg(b)
        };
        let mut skipped = ZeroGradientBatches::default();
        let state = train(&bundle, seed_prompt("default").unwrap(), config, &llm, &mut skipped).unwrap();
        // a batch with nothing to correct makes no optimize call
        let expected = expected_calls(b as u64, 20).unwrap().per_epoch - skipped.0;
        assert_eq!(state.training_calls.total(), expected, "batch size {b}");
        assert_eq!(state.training_calls.get(Purpose::Profile), 20);
        assert_eq!(state.training_calls.get(Purpose::Summarize), 20 / b as u64);
        assert_eq!(
            llm.ledger().total(),
            expected + state.validation_calls.total(),
            "validation calls are the only other traffic"
        );
    }
}

#[test]
fn saturated_world_stops_on_patience() {
    let (spec, bundle) = world(2, 0.0);
    let llm = Gateway::new(MockBackend::new(MockWorldState::for_world(spec)));
    let config = TrainConfig {
        patience: 1,
        history_len: 10,
        ..cfg(5)
    };
    let state = train(&bundle, seed_prompt("default").unwrap(), config, &llm, &mut ()).unwrap();
    assert_eq!(state.metrics.len(), 2);
    assert_eq!(state.stopped, Some(StopReason::Patience));
    assert_eq!(state.current_prompt().version, 0);
    assert_eq!(llm.ledger().get(Purpose::Optimize), 0);
}

#[test]
fn training_is_deterministic() {
    let (spec, bundle) = world(4, 0.5);
    let run = || {
        let llm = Gateway::new(MockBackend::new(MockWorldState::for_world(spec.clone())));
        train(&bundle, seed_prompt("default").unwrap(), cfg(5), &llm, &mut ()).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn trained_prompt_beats_direct_rerank() {
    let (spec, bundle) = world(6, 0.5);
    let llm = Gateway::new(MockBackend::new(MockWorldState::for_world(spec)));
    let state = train(&bundle, seed_prompt("default").unwrap(), cfg(5), &llm, &mut ()).unwrap();
    let agp = evaluate_run(&bundle, Some(state.best_prompt()), RerankMode::Agp, 5, &llm).unwrap();
    let dir = evaluate_run(&bundle, None, RerankMode::Dir, 5, &llm).unwrap();
    assert!(agp.report.mean_ndcg_at_k >= dir.report.mean_ndcg_at_k);
    let best = state.best.unwrap();
    assert!(state
        .metrics
        .iter()
        .all(|m| m.validation.unwrap().ndcg_at_10 <= best.score));
}

#[test]
fn base_mode_makes_no_calls_and_scores_ingested_order() {
    let (spec, bundle) = world(1, 0.5);
    let llm = Gateway::new(MockBackend::new(MockWorldState::for_world(spec)));
    let eval = evaluate_run(&bundle, None, RerankMode::Base, 5, &llm).unwrap();
    assert_eq!(llm.ledger().total(), 0);
    for (list, row) in eval.lists.iter().zip(&eval.report.rows) {
        let user = bundle.user(&list.user_id).unwrap();
        let ndcg = agp_core::ndcg_at_k(&bundle.test_candidates(&user.user_id).unwrap().item_ids().collect::<Vec<_>>(), &user.ground_truth, 10).unwrap();
        assert_eq!(row.ndcg_at_10, ndcg);
    }
    let empty = DatasetBundle {
        split: Default::default(),
        ..bundle.clone()
    };
    assert!(evaluate_run(&empty, None, RerankMode::Base, 5, &llm).is_err());
    assert!(evaluate_run(&bundle, None, RerankMode::Agp, 5, &llm).is_err());
}

/// Mock answers until the call budget runs out, then transport failures.
struct FailAfter {
    world: MockWorldState,
    left: AtomicU64,
}

impl ChatBackend for FailAfter {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        if self.left.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1)).is_err() {
            return Err(GatewayError::Transport {
                attempts: 1,
                message: "connection reset".into(),
            });
        }
        mock_complete(request, &self.world)
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (spec, bundle) = world(8, 0.5);
    let world = MockWorldState::for_world(spec);
    let full = {
        let llm = Gateway::new(MockBackend::new(world.clone()));
        train(&bundle, seed_prompt("default").unwrap(), cfg(5), &llm, &mut ()).unwrap()
    };
    let flaky = Gateway::new(FailAfter {
        world: world.clone(),
        left: AtomicU64::new(70),
    });
    let err = train(&bundle, seed_prompt("default").unwrap(), cfg(5), &flaky, &mut ()).unwrap_err();
    let TrainError::Gateway { state, .. } = err else {
        panic!("expected a gateway failure");
    };
    assert!(!state.is_finished());
    let llm = Gateway::new(MockBackend::new(world));
    let resumed = resume(&bundle, *state, &llm, &mut ()).unwrap();
    assert_eq!(resumed.lineage, full.lineage);
    assert_eq!(resumed.metrics.len(), full.metrics.len());
    for (a, b) in resumed.metrics.iter().zip(&full.metrics) {
        assert_eq!(a.train, b.train);
        assert_eq!(a.validation, b.validation);
    }
}
