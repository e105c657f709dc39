use routelab::checkpoint;
use routelab::layer::Activation;
use routelab::oracle::solve_exact;
use routelab::routing::{route, RoutingBudget, RoutingMode, Scope};
use routelab::scoring::{logits, token_choice_scores, unified_scores, CompatibilityMatrix, UnifiedScoreConfig};
use routelab::task::{make_task, TaskConfig};
use routelab::train::{compare_modes, evaluate_batch, train_full, ModelSpec, RunReport, TrainConfig};
use routelab::{Matrix, Rng};

const MODEL: ModelSpec = ModelSpec {
    n_experts: 4,
    d_ff: 8,
    activation: Activation::Tanh,
};

fn short(mode: RoutingMode) -> TrainConfig {
    TrainConfig {
        steps: 40,
        batch: 2,
        eval_batches: 2,
        ..TrainConfig::new(mode, 3)
    }
}

#[test]
fn run_report_json_round_trips_exactly() {
    let task = make_task(TaskConfig::new(1, 4, 8, 0.1, 0.25)).unwrap();
    let init = MODEL.init(8, 1).unwrap();
    let (report, _) = train_full(&task, &init, &short(RoutingMode::Usmoe)).unwrap();
    let back: RunReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(back, report);
}

#[test]
fn checkpoint_reproduces_the_trained_model() {
    let task = make_task(TaskConfig::new(2, 4, 8, 0.1, 0.0)).unwrap();
    let init = MODEL.init(8, 2).unwrap();
    let cfg = short(RoutingMode::TokenChoice);
    let (_, trained) = train_full(&task, &init, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    checkpoint::save(&trained, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    let batch = task.sample(&mut Rng::new(99), 2, 16);
    let a = evaluate_batch(&trained, &batch, &cfg).unwrap().loss;
    let b = evaluate_batch(&loaded, &batch, &cfg).unwrap().loss;
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn router_and_oracle_agree_on_the_worked_matrix() {
    let u = Matrix::from_rows(&[[0.9, 0.1], [0.4, 0.8], [0.7, 0.2]]).unwrap();
    let plan = route(&CompatibilityMatrix::raw(u.clone()), RoutingMode::Usmoe, RoutingBudget::GlobalPairs(3), Scope::Batch)
        .unwrap();
    let oracle = solve_exact(&u, 3).unwrap();
    assert_eq!(plan.mask_bits(), &oracle.optimal_mask[..]);
    assert_eq!(oracle.num_masks_enumerated, 20);
}

// At alpha = 0 the unified score is the row softmax itself, so the gates of a
// matched per-token budget coincide with token choice; on a row-dominant
// matrix the selections coincide as well.
#[test]
fn alpha_zero_usmoe_matches_token_choice_on_row_dominant_scores() {
    let z = Matrix::from_rows(&[[3.0, 0.0, -1.0], [0.0, 2.5, 0.5], [-0.5, 0.0, 4.0], [2.0, 1.0, 0.0]]).unwrap();
    let raw = CompatibilityMatrix::raw(z);
    let u = unified_scores(&raw, UnifiedScoreConfig::new(0.0).unwrap()).unwrap();
    let p = token_choice_scores(&raw).unwrap();
    assert!(u.scores().max_abs_diff(p.scores()) < 1e-15);
    let scope = Scope::Sequence { seq_len: 4 };
    let a = route(&u, RoutingMode::Usmoe, RoutingBudget::PerToken(1), scope).unwrap();
    let b = route(&p, RoutingMode::TokenChoice, RoutingBudget::PerToken(1), scope).unwrap();
    assert_eq!(a.mask_bits(), b.mask_bits());
    assert!(a.gates().max_abs_diff(b.gates()) < 1e-15);
}

#[test]
fn compare_runs_share_initialization_and_data() {
    let task = make_task(TaskConfig::new(4, 4, 8, 0.1, 0.0)).unwrap();
    let cfgs: Vec<_> = RoutingMode::ALL.iter().map(|&m| short(m)).collect();
    let report = compare_modes(&task, &MODEL, 8, &cfgs).unwrap();
    // step 0 of every run starts from the same parameters on the same batch
    let init = MODEL.init(8, 8).unwrap();
    let batch = task.sample(&mut Rng::new(3).child(0).child(0), 2, 16);
    let z = logits(&batch.inputs, &init.router_weights).unwrap();
    for (run, cfg) in report.runs.iter().zip(&cfgs) {
        let first = evaluate_batch(&init, &batch, cfg).unwrap();
        assert_eq!(run.train_loss[0], first.loss);
        assert_eq!(first.plan.tokens(), z.tokens());
    }
}
