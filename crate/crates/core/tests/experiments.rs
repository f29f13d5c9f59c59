//! Loop bookkeeping, reproducibility, checkpoint resume and TGA contracts
//! on small synthetic problems.

use decorr_core::acquisition::{AcquisitionConfig, StrategySpec};
use decorr_core::active_loop::{self, DatasetOracle, LoopSetup, LoopState, TrainBudget};
use decorr_core::data::{self, Provenance, SamplingOptions};
use decorr_core::eval::{self, DatasetBinding, ExperimentGrid};
use decorr_core::{checkpoint, nn, Closer, DenseMatrix, EmbeddingModel, Triplet, TripletPool};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Problem {
    features: DenseMatrix,
    pool: Vec<Triplet>,
    labels: Vec<Closer>,
    test: TripletPool,
}

fn problem(seed: u64) -> Problem {
    let binding = DatasetBinding::Synthetic {
        n: 20,
        d: 4,
        train_count: 400,
        test_count: 300,
    };
    let run = eval::prepare_run(&binding, seed, seed, 0.1).unwrap();
    Problem {
        features: run.objects.features().clone(),
        pool: run.train.triplets().to_vec(),
        labels: run.train.orderings().unwrap().to_vec(),
        test: run.test,
    }
}

fn setup(l: usize) -> LoopSetup {
    LoopSetup {
        layers: vec![8, 4],
        initial_pool: l,
        budget: TrainBudget {
            epochs_per_round: 4,
            minibatch_size: Some(16),
            adam: nn::AdamConfig {
                learning_rate: 1e-2,
                ..Default::default()
            },
        },
        seed: 5,
    }
}

const STRATEGIES: [&str; 9] = [
    "Random",
    "US",
    "US-Gradient",
    "US-Euclidean",
    "EGL-Centroid",
    "MOC-Oriented",
    "FPS-Gradient",
    "FPS-Oriented",
    "BADGE",
];

#[test]
fn every_strategy_keeps_labeled_and_unlabeled_disjoint() {
    let p = problem(1);
    for name in STRATEGIES {
        let spec: StrategySpec = name.parse().unwrap();
        let cfg = AcquisitionConfig::new(spec, 12).unwrap();
        let mut oracle = DatasetOracle::from_labels(p.labels.clone(), 0.0, 0).unwrap();
        let s = setup(10);
        let mut state = active_loop::initialize(&p.features, p.pool.clone(), &s, &mut oracle).unwrap();
        let mut seen: Vec<usize> = state.labeled().iter().map(|e| e.id).collect();
        for _ in 0..4 {
            let size = state.labeled().len() + state.unlabeled().len();
            let out = active_loop::run_round(&mut state, &p.features, &cfg, &mut oracle, &s.budget).unwrap();
            assert_eq!(state.labeled().len() + state.unlabeled().len(), size, "{name}");
            seen.extend(out.selected);
        }
        let total = seen.len();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), total, "{name} annotated a triplet twice");
        assert!(seen.iter().all(|id| !state.is_unlabeled(*id)));
        state.validate(&p.features).unwrap();
    }
}

#[test]
fn experiments_are_bit_reproducible() {
    let p = problem(2);
    let cfg = AcquisitionConfig::new(StrategySpec::US_GRADIENT, 10).unwrap();
    let run = || {
        let mut oracle = DatasetOracle::from_labels(p.labels.clone(), 0.2, 3).unwrap();
        active_loop::run_experiment(&p.features, p.pool.clone(), &setup(10), &cfg, 4, &mut oracle, |m| {
            eval::compute_tga(m, &p.features, &p.test)
        })
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.selected, b.selected);
    assert_eq!(a.labeled_counts, b.labeled_counts);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.tga), bits(&b.tga));
}

#[test]
fn rounds_warm_start_from_previous_parameters() {
    let p = problem(3);
    let cfg = AcquisitionConfig::new(StrategySpec::US, 10).unwrap();
    let s = setup(10);
    let mut oracle = DatasetOracle::from_labels(p.labels.clone(), 0.0, 0).unwrap();
    let mut state = active_loop::initialize(&p.features, p.pool.clone(), &s, &mut oracle).unwrap();

    // The same round done by hand, starting from a copy of the state.
    let mut manual = state.clone();
    let before = manual.model().clone();
    let ids = manual.select_batch(&p.features, &cfg).unwrap();
    assert_eq!(manual.model(), &before);
    let answers: Vec<_> = ids.iter().map(|&id| (id, p.labels[id])).collect();
    manual.absorb(&answers).unwrap();
    assert_eq!(manual.model(), &before);
    manual.train(&p.features, &s.budget).unwrap();
    manual.advance_round();

    active_loop::run_round(&mut state, &p.features, &cfg, &mut oracle, &s.budget).unwrap();
    assert_eq!(state, manual);
}

#[test]
fn training_reduces_training_loss() {
    let p = problem(4);
    let mut oracle = DatasetOracle::from_labels(p.labels.clone(), 0.0, 0).unwrap();
    let mut s = setup(200);
    s.budget.epochs_per_round = 1;
    let mut state = active_loop::initialize(&p.features, p.pool.clone(), &s, &mut oracle).unwrap();
    let start = state.mean_training_loss(&p.features).unwrap();
    s.budget.epochs_per_round = 30;
    state.train(&p.features, &s.budget).unwrap();
    let end = state.mean_training_loss(&p.features).unwrap();
    assert!(end < 0.8 * start, "{start} -> {end}");
}

#[test]
fn checkpoint_resume_continues_identically() {
    let p = problem(5);
    let cfg = AcquisitionConfig::new(StrategySpec::FPS_GRADIENT, 10).unwrap();
    let s = setup(10);
    let mut oracle = DatasetOracle::from_labels(p.labels.clone(), 0.0, 0).unwrap();
    let mut state = active_loop::initialize(&p.features, p.pool.clone(), &s, &mut oracle).unwrap();
    active_loop::run_round(&mut state, &p.features, &cfg, &mut oracle, &s.budget).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    checkpoint::save(&path, "loop_state", &state).unwrap();
    let mut resumed: LoopState = checkpoint::load(&path, "loop_state").unwrap();
    resumed.validate(&p.features).unwrap();
    assert_eq!(resumed, state);

    let mut o1 = oracle.clone();
    let mut o2 = oracle;
    let a = active_loop::run_round(&mut state, &p.features, &cfg, &mut o1, &s.budget).unwrap();
    let b = active_loop::run_round(&mut resumed, &p.features, &cfg, &mut o2, &s.budget).unwrap();
    assert_eq!(a.selected, b.selected);
    assert_eq!(state, resumed);
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let p = problem(6);
    let state = LoopState::new(&p.features, p.pool.clone(), &[4], 0).unwrap();
    let mut value = serde_json::to_value(&state).unwrap();
    value["unlabeled"][0] = serde_json::json!(1);
    let broken: LoopState = serde_json::from_value(value).unwrap();
    assert!(broken.validate(&p.features).is_err());
}

#[test]
fn grid_of_one_cell_matches_direct_experiment() {
    let grid = ExperimentGrid::from_toml(
        r#"
seed = 21
seeds = 1
record_timing = false

[dataset]
kind = "synthetic"
n = 20
d = 4
train_count = 300
test_count = 200

[[cells]]
strategy = "US-Oriented"
batch_size = 10
noise_rate = 0.1
rounds = 3
epochs = 5
minibatch_size = 16
layers = [8, 4]
"#,
    )
    .unwrap();
    let report = eval::run_grid(&grid).unwrap();

    let cell = &grid.cells[0];
    let run = eval::prepare_run(&grid.dataset, grid.seed, grid.run_seed(0), cell.noise_rate).unwrap();
    let features = run.objects.features();
    let mut oracle = DatasetOracle::from_labels(run.train.orderings().unwrap().to_vec(), 0.0, 0).unwrap();
    let setup = LoopSetup {
        layers: cell.layers.clone(),
        initial_pool: cell.initial_pool(),
        budget: cell.budget(),
        seed: run.loop_seed,
    };
    let curve = active_loop::run_experiment(
        features,
        run.train.triplets().to_vec(),
        &setup,
        &cell.acquisition().unwrap(),
        cell.rounds,
        &mut oracle,
        |m| eval::compute_tga(m, features, &run.test),
    )
    .unwrap();
    let tga: Vec<f64> = report.records.iter().map(|r| r.tga).collect();
    assert_eq!(tga, curve.tga);
    let audit: Vec<Vec<usize>> = report.audit.iter().map(|a| a.selected.clone()).collect();
    assert_eq!(audit, curve.selected);
}

fn random_model(seed: u64) -> EmbeddingModel {
    EmbeddingModel::new(nn::init_params(&[10, 20, 10], seed).unwrap())
}

#[test]
fn random_model_on_balanced_random_labels_scores_near_half() {
    let (objects, metric) = data::generate_synthetic(100, 10, 0).unwrap();
    let sampled = data::sample_triplets(&objects, &metric, 20_000, 1, SamplingOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // Orderings independent of everything else: a fair coin per triplet.
    let coins: Vec<Closer> = (0..sampled.len())
        .map(|_| if rng.random() { Closer::J } else { Closer::K })
        .collect();
    let test = TripletPool::new(sampled.triplets().to_vec(), Some(coins), Provenance::Synthetic).unwrap();
    for seed in 0..10 {
        let tga = eval::compute_tga(&random_model(seed), objects.features(), &test).unwrap();
        assert!((0.4..=0.6).contains(&tga), "seed {seed}: {tga}");
    }
}

#[test]
fn tga_invariances() {
    let (objects, metric) = data::generate_synthetic(30, 10, 3).unwrap();
    let test = data::sample_triplets(&objects, &metric, 2_000, 4, SamplingOptions::default()).unwrap();
    let model = random_model(7);
    let x = objects.features();
    let base = eval::compute_tga(&model, x, &test).unwrap();

    // Relabel object ids.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut perm: Vec<usize> = (0..x.rows()).collect();
    perm.shuffle(&mut rng);
    let mut moved = DenseMatrix::zeros(x.rows(), x.cols());
    for (old, &new) in perm.iter().enumerate() {
        moved.row_mut(new).copy_from_slice(x.row(old));
    }
    let relabeled: Vec<Triplet> = test
        .triplets()
        .iter()
        .map(|t| Triplet {
            anchor: perm[t.anchor],
            first: perm[t.first],
            second: perm[t.second],
        })
        .collect();
    let orderings = test.orderings().unwrap().to_vec();
    let relabeled = TripletPool::new(relabeled, Some(orderings.clone()), Provenance::Loaded).unwrap();
    assert_eq!(eval::compute_tga(&model, &moved, &relabeled).unwrap(), base);

    // Shuffle the pool.
    let mut pairs: Vec<(Triplet, Closer)> = test.labeled().unwrap().collect();
    pairs.shuffle(&mut rng);
    let (ts, cs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let shuffled = TripletPool::new(ts, Some(cs), Provenance::Loaded).unwrap();
    assert_eq!(eval::compute_tga(&model, x, &shuffled).unwrap(), base);

    // Invert every ordering.
    let inverted = TripletPool::new(
        test.triplets().to_vec(),
        Some(orderings.iter().map(|c| c.flipped()).collect()),
        Provenance::Loaded,
    )
    .unwrap();
    assert_eq!(eval::compute_tga(&model, x, &inverted).unwrap(), 1.0 - base);
}

#[test]
fn ground_truth_scores_one_through_the_model_interface() {
    // A single linear layer equal to the Mahalanobis factor reproduces d_M.
    let (objects, metric) = data::generate_synthetic(25, 3, 9).unwrap();
    let test = data::sample_triplets(&objects, &metric, 1_000, 1, SamplingOptions::default()).unwrap();
    let factor = metric.factor().clone();
    let layer = nn::LayerParams::new(factor, vec![0.0; 3], nn::Activation::Identity).unwrap();
    let model = EmbeddingModel::new(nn::MlpParams::new(vec![layer]).unwrap());
    assert_eq!(eval::compute_tga(&model, objects.features(), &test).unwrap(), 1.0);
}
