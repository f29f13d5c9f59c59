//! Batch acquisition: informativeness scores for unlabeled triplets, the
//! triplet-to-triplet distances used for decorrelation, and the selection
//! rules (top-k, farthest-point sampling, k-means++ seeding, random).
//!
//! A decorrelated batch is picked in two greedy steps. First the `k` most
//! informative triplets form an overcomplete candidate set `S`. Then
//! farthest-point sampling over `S` with
//! `ρ(t, t') = f(t) · f(t') · γ(t, t')` keeps `b` of them: it starts from the
//! pair with the largest `ρ` and repeatedly adds the candidate whose smallest
//! `ρ` to the chosen set is largest.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{dist, dot, norm, DenseVector};
use crate::metric::{EmbeddingSnapshot, Mu, Triplet};
use crate::{Error, Result};

/// Norms below this are treated as zero by the cosine-style distances.
const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InformativenessMeasure {
    Uncertainty,
    ExpectedGradientLength,
    ModelOutputChange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityMeasure {
    Gradient,
    Euclidean,
    Centroid,
    Oriented,
}

/// How the concatenated-embedding distance treats the unknown orderings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EuclideanMode {
    /// Average over the orderings of `t` of the distance to the nearer
    /// ordering of `t'`. Symmetric, zero on identical comparisons.
    #[default]
    OrderMatched,
    /// Average of both directions of the one-sided form.
    Symmetrized,
    /// Average over the orderings of `t` of the distance to `t'` as stored.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    TopkInformative,
    Decorrelated,
    FpsOnly,
    Badge,
}

/// Named acquisition variant, e.g. `US-Gradient`, `FPS-Centroid`, `BADGE`.
///
/// Informativeness prefixes are `US` (entropy), `EGL` and `MOC`. A bare
/// prefix is plain top-k, a prefix plus a distance is the decorrelated
/// method, `FPS-<dist>` is diversity only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StrategySpec {
    pub strategy: Strategy,
    pub informativeness: InformativenessMeasure,
    pub diversity: DiversityMeasure,
}

impl StrategySpec {
    pub const RANDOM: Self = Self::new(Strategy::Random);
    pub const US: Self = Self::new(Strategy::TopkInformative);
    pub const US_GRADIENT: Self = Self::new(Strategy::Decorrelated);
    pub const FPS_GRADIENT: Self = Self::new(Strategy::FpsOnly);
    pub const BADGE: Self = Self::new(Strategy::Badge);

    pub const fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            informativeness: InformativenessMeasure::Uncertainty,
            diversity: DiversityMeasure::Gradient,
        }
    }

    pub const fn with_diversity(mut self, d: DiversityMeasure) -> Self {
        self.diversity = d;
        self
    }

    pub const fn with_informativeness(mut self, i: InformativenessMeasure) -> Self {
        self.informativeness = i;
        self
    }
}

fn info_name(m: InformativenessMeasure) -> &'static str {
    match m {
        InformativenessMeasure::Uncertainty => "US",
        InformativenessMeasure::ExpectedGradientLength => "EGL",
        InformativenessMeasure::ModelOutputChange => "MOC",
    }
}

fn diversity_name(d: DiversityMeasure) -> &'static str {
    match d {
        DiversityMeasure::Gradient => "Gradient",
        DiversityMeasure::Euclidean => "Euclidean",
        DiversityMeasure::Centroid => "Centroid",
        DiversityMeasure::Oriented => "Oriented",
    }
}

impl fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.strategy {
            Strategy::Random => f.write_str("Random"),
            Strategy::Badge => f.write_str("BADGE"),
            Strategy::TopkInformative => f.write_str(info_name(self.informativeness)),
            Strategy::Decorrelated => write!(
                f,
                "{}-{}",
                info_name(self.informativeness),
                diversity_name(self.diversity)
            ),
            Strategy::FpsOnly => write!(f, "FPS-{}", diversity_name(self.diversity)),
        }
    }
}

impl FromStr for StrategySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let bad = || Error::Config(format!("unknown strategy {s:?}"));
        let diversity = |d: &str| match d {
            "gradient" => Ok(DiversityMeasure::Gradient),
            "euclidean" => Ok(DiversityMeasure::Euclidean),
            "centroid" => Ok(DiversityMeasure::Centroid),
            "oriented" => Ok(DiversityMeasure::Oriented),
            _ => Err(bad()),
        };
        let info = |i: &str| match i {
            "us" => Ok(InformativenessMeasure::Uncertainty),
            "egl" => Ok(InformativenessMeasure::ExpectedGradientLength),
            "moc" => Ok(InformativenessMeasure::ModelOutputChange),
            _ => Err(bad()),
        };
        match lower.as_str() {
            "random" => return Ok(Self::RANDOM),
            "badge" => return Ok(Self::BADGE),
            _ => {}
        }
        match lower.split_once('-') {
            None => Ok(Self::US.with_informativeness(info(&lower)?)),
            Some(("fps", d)) => Ok(Self::FPS_GRADIENT.with_diversity(diversity(d)?)),
            Some((i, d)) => Ok(Self::US_GRADIENT
                .with_informativeness(info(i)?)
                .with_diversity(diversity(d)?)),
        }
    }
}

impl Serialize for StrategySpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StrategySpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    pub batch_size: usize,
    /// Size of the overcomplete candidate set.
    pub oversample_size: usize,
    pub mu: Mu,
    pub spec: StrategySpec,
    pub euclidean_mode: EuclideanMode,
}

impl AcquisitionConfig {
    /// Oversample size defaults to twice the batch size.
    pub fn new(spec: StrategySpec, batch_size: usize) -> Result<Self> {
        Self::with_oversample(spec, batch_size, 2 * batch_size)
    }

    pub fn with_oversample(spec: StrategySpec, batch_size: usize, oversample_size: usize) -> Result<Self> {
        let cfg = Self {
            batch_size,
            oversample_size,
            mu: Mu::DEFAULT,
            spec,
            euclidean_mode: EuclideanMode::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.oversample_size < self.batch_size {
            return Err(Error::Config(format!(
                "oversample size {} is smaller than batch size {}",
                self.oversample_size, self.batch_size
            )));
        }
        Ok(())
    }
}

pub fn informativeness(snap: &EmbeddingSnapshot, t: &Triplet, measure: InformativenessMeasure, mu: Mu) -> f64 {
    match measure {
        InformativenessMeasure::Uncertainty => snap.entropy(t, mu),
        InformativenessMeasure::ExpectedGradientLength => norm(&snap.expected_last_layer_gradient(t, mu)),
        InformativenessMeasure::ModelOutputChange => snap.expected_output_change(t, mu),
    }
}

/// One score per triplet, in input order.
pub fn score_informativeness(
    snap: &EmbeddingSnapshot,
    triplets: &[Triplet],
    measure: InformativenessMeasure,
    mu: Mu,
) -> Result<Vec<f64>> {
    triplets.iter().try_for_each(|t| snap.check_triplet(t))?;
    Ok(triplets
        .par_iter()
        .map(|t| informativeness(snap, t, measure, mu))
        .collect())
}

/// Positions of the `k` highest scores, best first; ties go to the lower
/// position.
pub fn select_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Config(format!("cannot take top {k} of {} scores", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < order.len() && k > 0 {
        order.select_nth_unstable_by(k - 1, cmp);
    }
    order.truncate(k);
    order.sort_unstable_by(cmp);
    Ok(order)
}

/// Per-triplet quantities needed by one diversity measure.
#[derive(Debug, Clone)]
pub struct TripletDescriptor {
    primary: DenseVector,
    secondary: DenseVector,
    norm: f64,
}

impl TripletDescriptor {
    pub fn new(snap: &EmbeddingSnapshot, t: &Triplet, measure: DiversityMeasure, mu: Mu) -> Self {
        match measure {
            DiversityMeasure::Gradient => {
                let g = snap.expected_last_layer_gradient(t, mu);
                let (unit, n) = unit_vector(&g);
                Self {
                    primary: unit,
                    secondary: Vec::new(),
                    norm: n,
                }
            }
            DiversityMeasure::Euclidean => {
                let [i, j, k] = t.objects().map(|o| snap.embedding(o));
                Self {
                    primary: [i, j, k].concat(),
                    secondary: [i, k, j].concat(),
                    norm: 0.0,
                }
            }
            DiversityMeasure::Centroid => {
                let [i, j, k] = t.objects().map(|o| snap.embedding(o));
                let c = (0..i.len()).map(|d| (i[d] + j[d] + k[d]) / 3.0).collect();
                Self {
                    primary: c,
                    secondary: Vec::new(),
                    norm: 0.0,
                }
            }
            DiversityMeasure::Oriented => {
                let [i, j, k] = t.objects().map(|o| snap.embedding(o));
                let r: DenseVector = (0..i.len()).map(|d| k[d] + j[d] - 2.0 * i[d]).collect();
                let n = norm(&r);
                let unit = if n < DEGENERATE_NORM {
                    vec![0.0; r.len()]
                } else {
                    r.iter().map(|x| x / n).collect()
                };
                Self {
                    primary: i.to_vec(),
                    secondary: unit,
                    norm: n,
                }
            }
        }
    }
}

/// Unit direction and norm; the zero vector when the norm is degenerate or
/// not finite.
fn unit_vector(v: &[f64]) -> (DenseVector, f64) {
    let n = norm(v);
    if n < DEGENERATE_NORM || !n.is_finite() {
        return (vec![0.0; v.len()], n);
    }
    (v.iter().map(|x| x / n).collect(), n)
}

fn cosine_distance(ua: &[f64], na: f64, ub: &[f64], nb: f64) -> f64 {
    let degenerate = |n: f64| n < DEGENERATE_NORM || !n.is_finite();
    if degenerate(na) || degenerate(nb) {
        return 1.0;
    }
    (1.0 - dot(ua, ub)).clamp(0.0, 2.0)
}

/// `1 − cos(a, b)`, or 1 when either vector is (numerically) zero.
pub fn gradient_distance(a: &[f64], b: &[f64]) -> f64 {
    let ((ua, na), (ub, nb)) = (unit_vector(a), unit_vector(b));
    cosine_distance(&ua, na, &ub, nb)
}

/// `γ` between two descriptors built for the same measure.
pub fn gamma_between(
    measure: DiversityMeasure,
    mode: EuclideanMode,
    a: &TripletDescriptor,
    b: &TripletDescriptor,
) -> f64 {
    match measure {
        DiversityMeasure::Gradient => cosine_distance(&a.primary, a.norm, &b.primary, b.norm),
        DiversityMeasure::Euclidean => {
            // primary = stored ordering, secondary = swapped ordering.
            let aligned = dist(&a.primary, &b.primary);
            let crossed_ab = dist(&a.secondary, &b.primary);
            match mode {
                EuclideanMode::Literal => 0.5 * (aligned + crossed_ab),
                EuclideanMode::Symmetrized => {
                    let crossed_ba = dist(&b.secondary, &a.primary);
                    0.5 * aligned + 0.25 * (crossed_ab + crossed_ba)
                }
                EuclideanMode::OrderMatched => {
                    let crossed = dist(&a.primary, &b.secondary);
                    let swapped_both = dist(&a.secondary, &b.secondary);
                    0.5 * (aligned.min(crossed) + crossed_ab.min(swapped_both))
                }
            }
        }
        DiversityMeasure::Centroid => dist(&a.primary, &b.primary),
        DiversityMeasure::Oriented => {
            let anchor = dist(&a.primary, &b.primary);
            anchor + (1.0 - dot(&a.secondary, &b.secondary)).clamp(0.0, 2.0)
        }
    }
}

fn gamma(
    snap: &EmbeddingSnapshot,
    t: &Triplet,
    u: &Triplet,
    measure: DiversityMeasure,
    mode: EuclideanMode,
    mu: Mu,
) -> f64 {
    let a = TripletDescriptor::new(snap, t, measure, mu);
    let b = TripletDescriptor::new(snap, u, measure, mu);
    gamma_between(measure, mode, &a, &b)
}

/// One minus the cosine of the expected last-layer gradients; 1 when either
/// gradient vanishes.
pub fn gamma_gradient(snap: &EmbeddingSnapshot, t: &Triplet, u: &Triplet, mu: Mu) -> f64 {
    gamma(snap, t, u, DiversityMeasure::Gradient, EuclideanMode::default(), mu)
}

/// Expected distance between concatenated `φ(x_i) ⊕ φ(x_j) ⊕ φ(x_k)`
/// vectors over the unknown orderings, see [`EuclideanMode`].
pub fn gamma_euclidean(snap: &EmbeddingSnapshot, t: &Triplet, u: &Triplet, mode: EuclideanMode) -> f64 {
    gamma(snap, t, u, DiversityMeasure::Euclidean, mode, Mu::DEFAULT)
}

pub fn gamma_centroid(snap: &EmbeddingSnapshot, t: &Triplet, u: &Triplet) -> f64 {
    gamma(
        snap,
        t,
        u,
        DiversityMeasure::Centroid,
        EuclideanMode::default(),
        Mu::DEFAULT,
    )
}

/// Anchor distance plus one minus the cosine of the orientation vectors
/// `φ(x_j) + φ(x_k) − 2φ(x_i)`.
pub fn gamma_oriented(snap: &EmbeddingSnapshot, t: &Triplet, u: &Triplet) -> f64 {
    gamma(
        snap,
        t,
        u,
        DiversityMeasure::Oriented,
        EuclideanMode::default(),
        Mu::DEFAULT,
    )
}

/// `f(t) · f(t') · γ(t, t')` under `config`; diversity-only strategies drop
/// the informativeness factors.
pub fn rho(snap: &EmbeddingSnapshot, t: &Triplet, u: &Triplet, config: &AcquisitionConfig) -> f64 {
    let spec = config.spec;
    let g = gamma(snap, t, u, spec.diversity, config.euclidean_mode, config.mu);
    if spec.strategy == Strategy::FpsOnly {
        return g;
    }
    let f = |x: &Triplet| informativeness(snap, x, spec.informativeness, config.mu);
    f(t) * f(u) * g
}

/// Farthest-point sampling of `b` of `candidates` under `rho`.
///
/// `candidates` holds triplet ids; `rho(p, q)` is evaluated on positions
/// into `candidates`, with `p` the lower-id element during the seed-pair
/// search and the candidate under consideration afterwards. Ties break
/// toward ascending id. With `b == 1`, `candidates[0]` is returned, so
/// callers pass candidates best-first.
pub fn fps_select<F>(candidates: &[usize], rho: F, b: usize) -> Result<Vec<usize>>
where
    F: Fn(usize, usize) -> f64,
{
    let m = candidates.len();
    if b > m {
        return Err(Error::Config(format!("cannot select {b} of {m} candidates")));
    }
    match b {
        0 => return Ok(Vec::new()),
        1 => return Ok(vec![candidates[0]]),
        _ => {}
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by_key(|&p| candidates[p]);

    let mut best = (f64::NEG_INFINITY, order[0], order[1]);
    for (x, &p) in order.iter().enumerate() {
        for &q in &order[x + 1..] {
            let r = rho(p, q);
            if r > best.0 {
                best = (r, p, q);
            }
        }
    }
    let (_, s0, s1) = best;

    let mut chosen = vec![false; m];
    chosen[s0] = true;
    chosen[s1] = true;
    let mut selected = vec![candidates[s0], candidates[s1]];
    let mut min_rho: Vec<f64> = (0..m)
        .map(|p| {
            if chosen[p] {
                f64::NEG_INFINITY
            } else {
                rho(p, s0).min(rho(p, s1))
            }
        })
        .collect();

    while selected.len() < b {
        let mut pick = None;
        let mut pick_val = f64::NEG_INFINITY;
        for &p in &order {
            if !chosen[p] && (pick.is_none() || min_rho[p] > pick_val) {
                pick = Some(p);
                pick_val = min_rho[p];
            }
        }
        let p = pick.expect("b <= m leaves an unchosen candidate");
        chosen[p] = true;
        selected.push(candidates[p]);
        for q in 0..m {
            if !chosen[q] {
                min_rho[q] = min_rho[q].min(rho(q, p));
            }
        }
    }
    Ok(selected)
}

/// k-means++ seeding: the first seed uniformly, each next seed with
/// probability proportional to its squared distance to the nearest seed.
/// Falls back to uniform sampling without replacement once every remaining
/// vector coincides with a seed.
pub fn kmeanspp_select<R: Rng + ?Sized>(vectors: &[DenseVector], b: usize, rng: &mut R) -> Result<Vec<usize>> {
    let n = vectors.len();
    if b > n {
        return Err(Error::Config(format!("cannot seed {b} of {n} vectors")));
    }
    if b == 0 {
        return Ok(Vec::new());
    }
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut selected = vec![first];
    let mut nearest: Vec<f64> = vectors
        .par_iter()
        .map(|v| crate::linalg::sq_dist(v, &vectors[first]))
        .collect();
    nearest[first] = 0.0;

    while selected.len() < b {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 && total.is_finite() {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < w {
                    break;
                }
                target -= w;
            }
            pick.expect("positive total implies a positive weight")
        } else {
            let rest: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            rest[rng.random_range(0..rest.len())]
        };
        chosen[pick] = true;
        selected.push(pick);
        let seed = &vectors[pick];
        nearest.par_iter_mut().enumerate().for_each(|(i, w)| {
            if chosen[i] {
                *w = 0.0;
            } else {
                *w = w.min(crate::linalg::sq_dist(&vectors[i], seed));
            }
        });
    }
    Ok(selected)
}

/// `b` positions of `0..pool_len`, uniform without replacement.
pub fn random_select<R: Rng + ?Sized>(pool_len: usize, b: usize, rng: &mut R) -> Result<Vec<usize>> {
    if b > pool_len {
        return Err(Error::Config(format!("cannot sample {b} of {pool_len} triplets")));
    }
    Ok(index::sample(rng, pool_len, b).into_vec())
}

/// Chooses the next batch of triplet ids from `unlabeled` (ids into
/// `pool`) according to `config`.
pub fn select_batch<R: Rng + ?Sized>(
    snap: &EmbeddingSnapshot,
    pool: &[Triplet],
    unlabeled: &[usize],
    config: &AcquisitionConfig,
    rng: &mut R,
) -> Result<Vec<usize>> {
    config.validate()?;
    let b = config.batch_size;
    if b > unlabeled.len() {
        return Err(Error::PoolExhausted {
            needed: b,
            available: unlabeled.len(),
        });
    }
    let spec = config.spec;
    let mu = config.mu;
    let triplets: Vec<Triplet> = unlabeled.iter().map(|&id| pool[id]).collect();
    let ids_at = |positions: &[usize]| positions.iter().map(|&p| unlabeled[p]).collect::<Vec<_>>();

    match spec.strategy {
        Strategy::Random => Ok(ids_at(&random_select(unlabeled.len(), b, rng)?)),
        Strategy::TopkInformative => {
            let scores = score_informativeness(snap, &triplets, spec.informativeness, mu)?;
            Ok(ids_at(&select_topk(&scores, b)?))
        }
        Strategy::Decorrelated => {
            let scores = score_informativeness(snap, &triplets, spec.informativeness, mu)?;
            let k = config.oversample_size.min(unlabeled.len());
            let top = select_topk(&scores, k)?;
            let weights: Vec<f64> = top.iter().map(|&p| scores[p]).collect();
            decorrelate(snap, &triplets, &top, Some(&weights), config)
                .map(|sel| sel.iter().map(|&p| unlabeled[p]).collect())
        }
        Strategy::FpsOnly => {
            triplets.iter().try_for_each(|t| snap.check_triplet(t))?;
            let k = config.oversample_size.min(unlabeled.len());
            let sample = random_select(unlabeled.len(), k, rng)?;
            decorrelate(snap, &triplets, &sample, None, config).map(|sel| sel.iter().map(|&p| unlabeled[p]).collect())
        }
        Strategy::Badge => {
            triplets.iter().try_for_each(|t| snap.check_triplet(t))?;
            let grads: Vec<DenseVector> = triplets
                .par_iter()
                .map(|t| snap.most_probable_gradient(t, mu))
                .collect();
            Ok(ids_at(&kmeanspp_select(&grads, b, rng)?))
        }
    }
}

/// FPS over `positions` (into `triplets`) with `ρ` built from `weights`
/// (informativeness, aligned with `positions`) or unit weights.
fn decorrelate(
    snap: &EmbeddingSnapshot,
    triplets: &[Triplet],
    positions: &[usize],
    weights: Option<&[f64]>,
    config: &AcquisitionConfig,
) -> Result<Vec<usize>> {
    let measure = config.spec.diversity;
    let mode = config.euclidean_mode;
    let descriptors: Vec<TripletDescriptor> = positions
        .par_iter()
        .map(|&p| TripletDescriptor::new(snap, &triplets[p], measure, config.mu))
        .collect();
    let rho = |a: usize, b: usize| {
        let g = gamma_between(measure, mode, &descriptors[a], &descriptors[b]);
        match weights {
            Some(w) => w[a] * w[b] * g,
            None => g,
        }
    };
    fps_select(positions, rho, config.batch_size)
}
