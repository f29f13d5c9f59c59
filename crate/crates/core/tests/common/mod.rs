//! Oracles and property checks shared by the integration and acceptance
//! targets.

#![allow(dead_code)]

use std::fmt::Debug;

use decorr_core::acquisition::{self, AcquisitionConfig, DiversityMeasure, EuclideanMode, StrategySpec};
use decorr_core::metric::{self, binary_entropy, ordering_probability};
use decorr_core::nn::{self, Activation, LayerParams};
use decorr_core::{Closer, DenseMatrix, EmbeddingModel, EmbeddingSnapshot, LabeledTriplet, MlpParams, Mu, Triplet};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DenseMatrix {
    let values = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    DenseMatrix::from_vec(rows, cols, values).unwrap()
}

pub fn random_triplet<R: Rng>(rng: &mut R, n: usize) -> Triplet {
    loop {
        let (a, b, c) = (rng.random_range(0..n), rng.random_range(0..n), rng.random_range(0..n));
        if a != b && b != c && a != c {
            return Triplet {
                anchor: a,
                first: b,
                second: c,
            };
        }
    }
}

pub fn random_closer<R: Rng>(rng: &mut R) -> Closer {
    if rng.random() {
        Closer::J
    } else {
        Closer::K
    }
}

/// A random ReLU network with its objects and labeled triplets.
pub struct GradientCase {
    pub model: EmbeddingModel,
    pub features: DenseMatrix,
    pub labeled: Vec<LabeledTriplet>,
}

/// Largest loss accepted for a gradient-check case. Past this the
/// exponential loss is so large that differencing it measures roundoff.
pub const MAX_CHECK_LOSS: f64 = 1e6;

pub fn gradient_case(seed: u64) -> GradientCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let input = rng.random_range(1..=5);
        let hidden = rng.random_range(0..=2);
        let mut sizes = vec![input];
        sizes.extend((0..hidden).map(|_| rng.random_range(1..=6)));
        sizes.push(rng.random_range(1..=4));
        let model = EmbeddingModel::new(nn::init_params(&sizes, rng.random()).unwrap());
        let n = rng.random_range(3..=8);
        let features = gaussian_matrix(&mut rng, n, input);
        let labeled: Vec<LabeledTriplet> = (0..rng.random_range(1..=6))
            .map(|_| {
                let t = random_triplet(&mut rng, n);
                t.label(random_closer(&mut rng))
            })
            .collect();
        if metric::triplet_loss(&model, &features, &labeled).unwrap() <= MAX_CHECK_LOSS {
            return GradientCase {
                model,
                features,
                labeled,
            };
        }
    }
}

/// Signs of every hidden pre-activation over all objects.
fn relu_pattern(params: &MlpParams, features: &DenseMatrix) -> Vec<bool> {
    let mut pattern = Vec::new();
    for r in 0..features.rows() {
        let (_, cache) = nn::forward(params, features.row(r)).unwrap();
        for (i, layer) in params.layers().iter().enumerate() {
            if layer.activation == Activation::Relu {
                pattern.extend(cache.pre_activation(i).iter().map(|&z| z > 0.0));
            }
        }
    }
    pattern
}

pub struct GradientReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
}

/// Central differences against the analytic gradient. Coordinates whose
/// ±h perturbation changes any ReLU's on/off state sit on a kink and are
/// skipped. The relative error is floored at `1e-5 · max(1, loss)`:
/// differencing a loss of size `L` carries roundoff near `ε·L/h`, which
/// would otherwise dominate exactly-zero components such as the output
/// bias gradient.
pub fn check_gradient(case: &GradientCase, h: f64) -> GradientReport {
    let GradientCase {
        model,
        features,
        labeled,
    } = case;
    let analytic = metric::loss_gradient(model, features, labeled).unwrap().flatten();
    let base = model.params().flatten();
    let base_pattern = relu_pattern(model.params(), features);
    let floor = 1e-5 * metric::triplet_loss(model, features, labeled).unwrap().max(1.0);
    let mut probe = model.clone();
    let mut report = GradientReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
    };
    let mut eval = |flat: &[f64]| {
        probe.params_mut().assign_flat(flat).unwrap();
        let pattern = relu_pattern(probe.params(), features);
        (metric::triplet_loss(&probe, features, labeled).unwrap(), pattern)
    };
    for i in 0..base.len() {
        let mut flat = base.clone();
        flat[i] = base[i] + h;
        let (plus, p_plus) = eval(&flat);
        flat[i] = base[i] - h;
        let (minus, p_minus) = eval(&flat);
        if p_plus != base_pattern || p_minus != base_pattern {
            report.excluded += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    report
}

/// Greedy farthest-point sampling written from its definition: rescan
/// every pair for the seed and every (candidate, selected) pair per step.
pub fn reference_fps(candidates: &[usize], rho: &dyn Fn(usize, usize) -> f64, b: usize) -> Vec<usize> {
    if b == 0 {
        return Vec::new();
    }
    if b == 1 {
        return vec![candidates[0]];
    }
    let mut by_id: Vec<usize> = (0..candidates.len()).collect();
    by_id.sort_by_key(|&p| candidates[p]);
    let mut best: Option<(f64, usize, usize)> = None;
    for x in 0..by_id.len() {
        for y in x + 1..by_id.len() {
            let (p, q) = (by_id[x], by_id[y]);
            let r = rho(p, q);
            if best.is_none_or(|(v, _, _)| r > v) {
                best = Some((r, p, q));
            }
        }
    }
    let (_, s0, s1) = best.unwrap();
    let mut chosen = vec![s0, s1];
    while chosen.len() < b {
        let mut pick: Option<(f64, usize)> = None;
        for &p in &by_id {
            if chosen.contains(&p) {
                continue;
            }
            let nearest = chosen.iter().map(|&s| rho(p, s)).fold(f64::INFINITY, f64::min);
            if pick.is_none_or(|(v, _)| nearest > v) {
                pick = Some((nearest, p));
            }
        }
        chosen.push(pick.unwrap().1);
    }
    chosen.into_iter().map(|p| candidates[p]).collect()
}

/// Random FPS instance: distinct shuffled ids, a symmetric ρ drawn from a
/// small set of values so that ties are frequent, and a batch size.
pub struct FpsInstance {
    pub ids: Vec<usize>,
    pub rho: Vec<Vec<f64>>,
    pub b: usize,
}

pub fn fps_instance(seed: u64, max_len: usize) -> FpsInstance {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(1..=max_len);
    let mut ids: Vec<usize> = rand::seq::index::sample(&mut rng, 1000, m).into_vec();
    ids.shuffle(&mut rng);
    let levels = rng.random_range(1..=6);
    let mut rho = vec![vec![0.0; m]; m];
    for p in 0..m {
        for q in p + 1..m {
            let v = if levels == 6 {
                rng.random::<f64>()
            } else {
                rng.random_range(0..levels) as f64
            };
            rho[p][q] = v;
            rho[q][p] = v;
        }
    }
    let b = rng.random_range(0..=m);
    FpsInstance { ids, rho, b }
}

pub fn fps_matches_reference(inst: &FpsInstance) -> bool {
    let rho = |p: usize, q: usize| inst.rho[p][q];
    let got = acquisition::fps_select(&inst.ids, rho, inst.b).unwrap();
    got == reference_fps(&inst.ids, &rho, inst.b)
}

/// Objects embedded by one random linear layer, so embeddings are distinct
/// and no orientation or gradient degenerates.
pub fn linear_snapshot(seed: u64) -> (EmbeddingSnapshot, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(2..=5);
    let out = rng.random_range(2..=4);
    let n = rng.random_range(4..=10);
    let layer = LayerParams::new(gaussian_matrix(&mut rng, out, d), vec![0.0; out], Activation::Identity).unwrap();
    let model = EmbeddingModel::new(MlpParams::new(vec![layer]).unwrap());
    let x = gaussian_matrix(&mut rng, n, d);
    (EmbeddingSnapshot::new(&model, &x).unwrap(), n)
}

/// Snapshot of a small ReLU network, as used during active learning.
pub fn relu_snapshot(seed: u64, n: usize) -> EmbeddingSnapshot {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = EmbeddingModel::new(nn::init_params(&[3, 6, 3], rng.random()).unwrap());
    let x = gaussian_matrix(&mut rng, n, 3);
    EmbeddingSnapshot::new(&model, &x).unwrap()
}

pub fn run_cases<S>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S: Strategy,
    S::Value: Debug,
{
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn distance_arg() -> impl Strategy<Value = f64> {
    prop_oneof![1 => Just(0.0), 8 => 0.0..1e3f64, 1 => 0.0..1e-6f64]
}

fn mu_arg() -> impl Strategy<Value = f64> {
    prop_oneof![1e-6..1.0f64, 1.0..100.0f64]
}

fn prop_probability_complement(cases: u32) -> Result<(), String> {
    run_cases(cases, (distance_arg(), distance_arg(), mu_arg()), |(d1, d2, mu)| {
        let mu = Mu::new(mu).unwrap();
        let p = ordering_probability(d1, d2, mu);
        let q = ordering_probability(d2, d1, mu);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((p + q - 1.0).abs() <= f64::EPSILON, "p={p} q={q}");
        Ok(())
    })
}

fn prop_snapshot_probability(cases: u32) -> Result<(), String> {
    run_cases(cases, (any::<u64>(), 1e-4..10.0f64), |(seed, mu)| {
        let snap = relu_snapshot(seed, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let t = random_triplet(&mut rng, 6);
        let mu = Mu::new(mu).unwrap();
        let (p, q) = (snap.probability(&t, mu), snap.probability(&t.swapped(), mu));
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((p + q - 1.0).abs() <= f64::EPSILON);
        let h = snap.entropy(&t, mu);
        prop_assert!((0.0..=1.0).contains(&h));
        Ok(())
    })
}

fn prop_entropy_shape(cases: u32) -> Result<(), String> {
    let p_arg = || prop_oneof![1 => Just(0.5), 1 => Just(0.0), 1 => Just(1.0), 10 => 0.0..=1.0f64];
    run_cases(cases, (p_arg(), p_arg()), |(p1, p2)| {
        let (h1, h2) = (binary_entropy(p1), binary_entropy(p2));
        prop_assert!((0.0..=1.0).contains(&h1));
        if p1 == 0.5 {
            prop_assert_eq!(h1, 1.0);
        }
        if (p1 - 0.5).abs() >= 1e-6 {
            prop_assert!(h1 < 1.0);
        }
        let (e1, e2) = ((p1 - 0.5).abs(), (p2 - 0.5).abs());
        if e1 <= e2 {
            prop_assert!(h1 >= h2 - 4.0 * f64::EPSILON, "H({p1})={h1} < H({p2})={h2}");
        }
        Ok(())
    })
}

fn prop_loss_decreasing_in_margin(cases: u32) -> Result<(), String> {
    run_cases(cases, (0.0..3.0f64, 0.0..3.0f64, 1e-3..3.0f64), |(x, y, step)| {
        // Anchor at 0, first at x, second at y or y + step on a line.
        let model = EmbeddingModel::new(
            MlpParams::new(vec![LayerParams::new(
                DenseMatrix::identity(1),
                vec![0.0],
                Activation::Identity,
            )
            .unwrap()])
            .unwrap(),
        );
        let features = DenseMatrix::from_vec(4, 1, vec![0.0, x, y, y + step]).unwrap();
        let lower = metric::triplet_loss(
            &model,
            &features,
            &[Triplet {
                anchor: 0,
                first: 1,
                second: 2,
            }
            .label(Closer::J)],
        )
        .unwrap();
        let higher = metric::triplet_loss(
            &model,
            &features,
            &[Triplet {
                anchor: 0,
                first: 1,
                second: 3,
            }
            .label(Closer::J)],
        )
        .unwrap();
        prop_assert!(higher < lower, "margin up, loss {lower} -> {higher}");
        Ok(())
    })
}

fn prop_loss_gradient(cases: u32) -> Result<(), String> {
    run_cases(cases, any::<u64>(), |seed| {
        let report = check_gradient(&gradient_case(seed), 1e-5);
        prop_assert!(report.max_rel_error < 1e-4, "relative error {}", report.max_rel_error);
        Ok(())
    })
}

fn prop_mu_shrinks_toward_half(cases: u32) -> Result<(), String> {
    run_cases(
        cases,
        (distance_arg(), distance_arg(), mu_arg(), 0.0..10.0f64),
        |(d1, d2, mu1, extra)| {
            let p1 = ordering_probability(d1, d2, Mu::new(mu1).unwrap());
            let p2 = ordering_probability(d1, d2, Mu::new(mu1 + extra).unwrap());
            prop_assert!((p2 - 0.5).abs() <= (p1 - 0.5).abs() + f64::EPSILON);
            Ok(())
        },
    )
}

fn prop_distance_is_metric(cases: u32) -> Result<(), String> {
    run_cases(cases, any::<u64>(), |seed| {
        let snap = relu_snapshot(seed, 5);
        for a in 0..5 {
            prop_assert_eq!(snap.distance(a, a), 0.0);
            for b in 0..5 {
                prop_assert!(snap.distance(a, b) >= 0.0);
                prop_assert_eq!(snap.distance(a, b), snap.distance(b, a));
                for c in 0..5 {
                    prop_assert!(snap.distance(a, c) <= snap.distance(a, b) + snap.distance(b, c) + 1e-12);
                }
            }
        }
        Ok(())
    })
}

const MEASURES: [DiversityMeasure; 4] = [
    DiversityMeasure::Gradient,
    DiversityMeasure::Euclidean,
    DiversityMeasure::Centroid,
    DiversityMeasure::Oriented,
];

fn prop_gamma_nonnegative_and_reflexive(cases: u32) -> Result<(), String> {
    run_cases(cases, any::<u64>(), |seed| {
        let (snap, n) = linear_snapshot(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let (t, u) = (random_triplet(&mut rng, n), random_triplet(&mut rng, n));
        let mu = Mu::DEFAULT;
        for mode in [
            EuclideanMode::OrderMatched,
            EuclideanMode::Symmetrized,
            EuclideanMode::Literal,
        ] {
            prop_assert!(acquisition::gamma_euclidean(&snap, &t, &u, mode) >= 0.0);
        }
        prop_assert!(acquisition::gamma_gradient(&snap, &t, &u, mu) >= 0.0);
        prop_assert!(acquisition::gamma_centroid(&snap, &t, &u) >= 0.0);
        prop_assert!(acquisition::gamma_oriented(&snap, &t, &u) >= 0.0);

        prop_assert!(acquisition::gamma_gradient(&snap, &t, &t, mu).abs() < 1e-12);
        prop_assert_eq!(acquisition::gamma_centroid(&snap, &t, &t), 0.0);
        prop_assert!(acquisition::gamma_oriented(&snap, &t, &t).abs() < 1e-12);
        prop_assert_eq!(
            acquisition::gamma_euclidean(&snap, &t, &t, EuclideanMode::OrderMatched),
            0.0
        );
        prop_assert_eq!(
            acquisition::gamma_euclidean(&snap, &t, &t.swapped(), EuclideanMode::OrderMatched),
            0.0
        );
        Ok(())
    })
}

fn prop_gamma_symmetric(cases: u32) -> Result<(), String> {
    run_cases(cases, any::<u64>(), |seed| {
        let (snap, n) = linear_snapshot(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let (t, u) = (random_triplet(&mut rng, n), random_triplet(&mut rng, n));
        for m in MEASURES {
            let mut cfg = AcquisitionConfig::new(StrategySpec::FPS_GRADIENT.with_diversity(m), 1).unwrap();
            cfg.euclidean_mode = EuclideanMode::OrderMatched;
            let (a, b) = (
                acquisition::rho(&snap, &t, &u, &cfg),
                acquisition::rho(&snap, &u, &t, &cfg),
            );
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{m:?}: {a} vs {b}");
        }
        Ok(())
    })
}

fn permute(t: &Triplet, perm: usize) -> Triplet {
    let [a, b, c] = t.objects();
    let [x, y, z] = match perm % 6 {
        0 => [a, b, c],
        1 => [a, c, b],
        2 => [b, a, c],
        3 => [b, c, a],
        4 => [c, a, b],
        _ => [c, b, a],
    };
    Triplet {
        anchor: x,
        first: y,
        second: z,
    }
}

fn prop_centroid_permutation_invariant(cases: u32) -> Result<(), String> {
    run_cases(cases, (any::<u64>(), 0..6usize, 0..6usize), |(seed, p1, p2)| {
        let (snap, n) = linear_snapshot(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
        let (t, u) = (random_triplet(&mut rng, n), random_triplet(&mut rng, n));
        let base = acquisition::gamma_centroid(&snap, &t, &u);
        let moved = acquisition::gamma_centroid(&snap, &permute(&t, p1), &permute(&u, p2));
        prop_assert!((base - moved).abs() <= 1e-12 * (1.0 + base), "{base} vs {moved}");
        Ok(())
    })
}

fn prop_oriented_swap_invariant(cases: u32) -> Result<(), String> {
    run_cases(cases, (any::<u64>(), any::<bool>(), any::<bool>()), |(seed, s1, s2)| {
        let (snap, n) = linear_snapshot(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
        let (t, u) = (random_triplet(&mut rng, n), random_triplet(&mut rng, n));
        let swap = |x: Triplet, s: bool| if s { x.swapped() } else { x };
        let base = acquisition::gamma_oriented(&snap, &t, &u);
        let moved = acquisition::gamma_oriented(&snap, &swap(t, s1), &swap(u, s2));
        prop_assert!((base - moved).abs() <= 1e-12 * (1.0 + base), "{base} vs {moved}");
        Ok(())
    })
}

fn prop_fps_reference(cases: u32) -> Result<(), String> {
    run_cases(cases, any::<u64>(), |seed| {
        prop_assert!(fps_matches_reference(&fps_instance(seed, 30)));
        Ok(())
    })
}

fn prop_decorrelated_within_topk(cases: u32) -> Result<(), String> {
    run_cases(cases, (any::<u64>(), 0..4usize), |(seed, m)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 8;
        let snap = relu_snapshot(seed, n);
        let pool: Vec<Triplet> = (0..40).map(|_| random_triplet(&mut rng, n)).collect();
        let unlabeled: Vec<usize> = (0..40).filter(|_| rng.random_bool(0.7)).collect();
        prop_assume!(unlabeled.len() >= 2);
        let b = rng.random_range(1..unlabeled.len());
        let k = rng.random_range(b..=unlabeled.len());
        let spec = StrategySpec::US_GRADIENT.with_diversity(MEASURES[m]);
        let cfg = AcquisitionConfig::with_oversample(spec, b, k).unwrap();
        let chosen = acquisition::select_batch(&snap, &pool, &unlabeled, &cfg, &mut rng).unwrap();

        let mut ranked: Vec<(f64, usize)> = unlabeled
            .iter()
            .map(|&id| (snap.entropy(&pool[id], cfg.mu), id))
            .collect();
        ranked.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        let top: Vec<usize> = ranked[..k].iter().map(|r| r.1).collect();
        prop_assert_eq!(chosen.len(), b);
        prop_assert!(
            chosen.iter().all(|id| top.contains(id)),
            "{chosen:?} not within {top:?}"
        );
        Ok(())
    })
}

fn prop_fps_weight_scaling(cases: u32) -> Result<(), String> {
    run_cases(cases, (any::<u64>(), 1e-2..1e2f64), |(seed, c)| {
        let inst = fps_instance(seed, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 6);
        let f: Vec<f64> = inst.ids.iter().map(|_| rng.random_range(0.05..1.0)).collect();
        let plain = acquisition::fps_select(&inst.ids, |p, q| f[p] * f[q] * inst.rho[p][q], inst.b).unwrap();
        let scaled =
            acquisition::fps_select(&inst.ids, |p, q| (c * f[p]) * (c * f[q]) * inst.rho[p][q], inst.b).unwrap();
        prop_assert_eq!(plain, scaled);
        Ok(())
    })
}

pub type Property = (&'static str, fn(u32) -> Result<(), String>);

/// The randomized invariants of the metric model and acquisition modules.
pub const PROPERTIES: [Property; 14] = [
    ("probability in [0,1] and complementary", prop_probability_complement),
    ("snapshot probability and entropy bounds", prop_snapshot_probability),
    ("entropy bounded, maximal at 1/2, monotone", prop_entropy_shape),
    ("loss strictly decreasing in margin", prop_loss_decreasing_in_margin),
    ("loss gradient matches finite differences", prop_loss_gradient),
    ("larger mu moves probability toward 1/2", prop_mu_shrinks_toward_half),
    ("embedding distance is a pseudometric", prop_distance_is_metric),
    (
        "gamma non-negative and zero on itself",
        prop_gamma_nonnegative_and_reflexive,
    ),
    ("gamma symmetric", prop_gamma_symmetric),
    (
        "centroid gamma permutation invariant",
        prop_centroid_permutation_invariant,
    ),
    ("oriented gamma invariant under j/k swap", prop_oriented_swap_invariant),
    ("fps matches brute-force reference", prop_fps_reference),
    ("decorrelated batch lies within top-k", prop_decorrelated_within_topk),
    ("fps invariant to scaling informativeness", prop_fps_weight_scaling),
];
