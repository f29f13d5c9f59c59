//! Object sets, triplet pools, synthetic data with a random Mahalanobis
//! ground truth, label noise, splitting, and the CSV interchange formats.
//!
//! Feature files are `id,f0,...,f{d-1}` with an optional trailing `asset`
//! column. Triplet files are `anchor_id,j_id,k_id[,ordering]` where ordering
//! is `j` or `k`. Both are UTF-8 with a mandatory header row.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::{DenseMatrix, DenseVector};
use crate::metric::{Closer, Triplet};
use crate::{Error, Result};

/// Features of `n` objects plus their opaque ids and optional asset
/// references (image paths and the like) for annotation front-ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSet {
    features: DenseMatrix,
    ids: Vec<String>,
    assets: Vec<Option<String>>,
}

impl ObjectSet {
    pub fn new(features: DenseMatrix, ids: Vec<String>) -> Result<Self> {
        let assets = vec![None; ids.len()];
        Self::with_assets(features, ids, assets)
    }

    pub fn with_assets(features: DenseMatrix, ids: Vec<String>, assets: Vec<Option<String>>) -> Result<Self> {
        if ids.len() != features.rows() || assets.len() != features.rows() {
            return Err(Error::Config(format!(
                "{} feature rows but {} ids and {} asset slots",
                features.rows(),
                ids.len(),
                assets.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Config(format!("duplicate object id {dup:?}")));
        }
        Ok(Self { features, ids, assets })
    }

    /// Objects named `0..n`.
    pub fn anonymous(features: DenseMatrix) -> Self {
        let ids = (0..features.rows()).map(|i| i.to_string()).collect();
        let assets = vec![None; features.rows()];
        Self { features, ids, assets }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn asset(&self, i: usize) -> Option<&str> {
        self.assets[i].as_deref()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }
}

/// Mahalanobis ground truth `d²(x, y) = (x − y)ᵀ M (x − y)` with `M = AᵀA`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthMetric {
    matrix: DenseMatrix,
    factor: DenseMatrix,
}

impl GroundTruthMetric {
    pub fn from_factor(factor: DenseMatrix) -> Result<Self> {
        let matrix = factor.transpose().matmul(&factor)?;
        Ok(Self { matrix, factor })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            matrix: DenseMatrix::identity(d),
            factor: DenseMatrix::identity(d),
        }
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    /// `A` in `M = AᵀA`.
    pub fn factor(&self) -> &DenseMatrix {
        &self.factor
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    /// Evaluated as `‖A(x − y)‖²`, which is non-negative by construction.
    pub fn sq_distance(&self, x: &[f64], y: &[f64]) -> f64 {
        let diff: DenseVector = x.iter().zip(y).map(|(a, b)| a - b).collect();
        let proj = self.factor.mul_vec(&diff);
        proj.iter().map(|v| v * v).sum()
    }

    pub fn distance(&self, x: &[f64], y: &[f64]) -> f64 {
        self.sq_distance(x, y).sqrt()
    }

    /// True ordering of `t` over `objects`, or `None` on an exact tie.
    pub fn order(&self, objects: &DenseMatrix, t: &Triplet) -> Option<Closer> {
        let a = objects.row(t.anchor);
        let dj = self.sq_distance(a, objects.row(t.first));
        let dk = self.sq_distance(a, objects.row(t.second));
        if dj < dk {
            Some(Closer::J)
        } else if dk < dj {
            Some(Closer::K)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic,
    Loaded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletPool {
    triplets: Vec<Triplet>,
    orderings: Option<Vec<Closer>>,
    provenance: Provenance,
}

impl TripletPool {
    pub fn new(triplets: Vec<Triplet>, orderings: Option<Vec<Closer>>, provenance: Provenance) -> Result<Self> {
        if let Some(o) = &orderings {
            if o.len() != triplets.len() {
                return Err(Error::Config(format!(
                    "{} triplets but {} orderings",
                    triplets.len(),
                    o.len()
                )));
            }
        }
        Ok(Self {
            triplets,
            orderings,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn orderings(&self) -> Option<&[Closer]> {
        self.orderings.as_deref()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        self.triplets.iter().try_for_each(|t| t.validate(n))
    }

    /// Labeled view, failing when the pool carries no orderings.
    pub fn labeled(&self) -> Result<impl Iterator<Item = (Triplet, Closer)> + '_> {
        let o = self
            .orderings
            .as_ref()
            .ok_or_else(|| Error::Contract("triplet pool has no orderings".into()))?;
        Ok(self.triplets.iter().copied().zip(o.iter().copied()))
    }

    fn subset(&self, positions: &[usize]) -> Self {
        Self {
            triplets: positions.iter().map(|&p| self.triplets[p]).collect(),
            orderings: self
                .orderings
                .as_ref()
                .map(|o| positions.iter().map(|&p| o[p]).collect()),
            provenance: self.provenance,
        }
    }

    /// Drops stored orderings, e.g. for an unlabeled candidate pool.
    pub fn without_orderings(mut self) -> Self {
        self.orderings = None;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub rate: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Config(format!("flip rate {rate} outside [0, 1]")));
        }
        Ok(Self { rate, seed })
    }
}

/// `n` standard-normal objects in `R^d` and a random Mahalanobis metric
/// drawn from the same stream.
pub fn generate_synthetic(n: usize, d: usize, seed: u64) -> Result<(ObjectSet, GroundTruthMetric)> {
    if n < 3 {
        return Err(Error::Config(format!("need at least 3 objects, got {n}")));
    }
    if d == 0 {
        return Err(Error::Config("feature dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |count: usize| -> Vec<f64> { (0..count).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
    let features = DenseMatrix::from_vec(n, d, draw(n * d))?;
    let factor = DenseMatrix::from_vec(d, d, draw(d * d))?;
    Ok((ObjectSet::anonymous(features), GroundTruthMetric::from_factor(factor)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SamplingOptions {
    /// Reject a triplet whose comparison (anchor plus unordered candidate
    /// pair) was already emitted.
    pub reject_duplicates: bool,
}

const MAX_CONSECUTIVE_REJECTIONS: usize = 1000;

/// Uniform triplets of distinct objects with their ground-truth orderings.
pub fn sample_triplets(
    objects: &ObjectSet,
    metric: &GroundTruthMetric,
    count: usize,
    seed: u64,
    options: SamplingOptions,
) -> Result<TripletPool> {
    let n = objects.len();
    if count == 0 {
        return Err(Error::Config("triplet count must be positive".into()));
    }
    if n < 3 {
        return Err(Error::Config(format!("need at least 3 objects, got {n}")));
    }
    if metric.dim() != objects.dim() {
        return Err(Error::Config(format!(
            "metric is {}-dimensional but objects are {}-dimensional",
            metric.dim(),
            objects.dim()
        )));
    }
    if options.reject_duplicates {
        let distinct = n * (n - 1) * (n - 2) / 2;
        if count > distinct {
            return Err(Error::Config(format!(
                "{count} distinct triplets requested but only {distinct} exist"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut triplets = Vec::with_capacity(count);
    let mut orderings = Vec::with_capacity(count);
    let mut rejections = 0usize;
    while triplets.len() < count {
        let t = uniform_triplet(&mut rng, n);
        if options.reject_duplicates && seen.contains(&t.canonical()) {
            continue;
        }
        match metric.order(objects.features(), &t) {
            Some(c) => {
                rejections = 0;
                if options.reject_duplicates {
                    seen.insert(t.canonical());
                }
                triplets.push(t);
                orderings.push(c);
            }
            None => {
                rejections += 1;
                if rejections >= MAX_CONSECUTIVE_REJECTIONS {
                    return Err(Error::DegenerateMetric(format!(
                        "{MAX_CONSECUTIVE_REJECTIONS} consecutive tied triplets"
                    )));
                }
            }
        }
    }
    TripletPool::new(triplets, Some(orderings), Provenance::Synthetic)
}

/// Anchor, first and second drawn uniformly without replacement.
pub fn uniform_triplet<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Triplet {
    let anchor = rng.random_range(0..n);
    let mut first = rng.random_range(0..n - 1);
    if first >= anchor {
        first += 1;
    }
    let (lo, hi) = (anchor.min(first), anchor.max(first));
    let mut second = rng.random_range(0..n - 2);
    if second >= lo {
        second += 1;
    }
    if second >= hi {
        second += 1;
    }
    Triplet { anchor, first, second }
}

/// Inverts exactly `⌊rate · |pool|⌋` orderings chosen uniformly without
/// replacement.
pub fn flip_labels(pool: &TripletPool, spec: NoiseSpec) -> Result<TripletPool> {
    let orderings = pool
        .orderings
        .as_ref()
        .ok_or_else(|| Error::Contract("cannot flip an unlabeled pool".into()))?;
    NoiseSpec::new(spec.rate, spec.seed)?;
    let n = pool.len();
    let flips = ((spec.rate * n as f64).floor() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = orderings.clone();
    for i in index::sample(&mut rng, n, flips) {
        out[i] = out[i].flipped();
    }
    TripletPool::new(pool.triplets.clone(), Some(out), pool.provenance)
}

/// Disjoint train/test pools drawn from a shuffled pool.
pub fn split(
    pool: &TripletPool,
    train_count: usize,
    test_count: usize,
    seed: u64,
) -> Result<(TripletPool, TripletPool)> {
    if train_count + test_count > pool.len() {
        return Err(Error::Config(format!(
            "cannot split {} triplets into {train_count} train and {test_count} test",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions: Vec<usize> = (0..pool.len()).collect();
    positions.shuffle(&mut rng);
    let train = pool.subset(&positions[..train_count]);
    let test = pool.subset(&positions[train_count..train_count + test_count]);
    Ok((train, test))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<ObjectSet> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let has_asset = header.iter().next_back() == Some("asset");
    let feature_cols = header.len() - 1 - usize::from(has_asset);
    if header.get(0) != Some("id") || feature_cols == 0 {
        return Err(parse_err(1, "header must be id,f0,...,f{d-1}[,asset]".into()));
    }
    for (i, name) in header.iter().skip(1).take(feature_cols).enumerate() {
        if name != format!("f{i}") {
            return Err(parse_err(1, format!("expected column f{i}, found {name:?}")));
        }
    }

    let mut ids = Vec::new();
    let mut assets = Vec::new();
    let mut values = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        ids.push(record[0].to_string());
        for field in record.iter().skip(1).take(feature_cols) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite feature {field:?}")));
            }
            values.push(v);
        }
        assets.push(if has_asset {
            Some(record[header.len() - 1].to_string()).filter(|s| !s.is_empty())
        } else {
            None
        });
    }
    let features = DenseMatrix::from_vec(ids.len(), feature_cols, values)?;
    ObjectSet::with_assets(features, ids, assets)
}

pub fn save_features(path: impl AsRef<Path>, objects: &ObjectSet) -> Result<()> {
    let has_asset = objects.assets.iter().any(Option::is_some);
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "id")?;
    for i in 0..objects.dim() {
        write!(w, ",f{i}")?;
    }
    if has_asset {
        write!(w, ",asset")?;
    }
    writeln!(w)?;
    for r in 0..objects.len() {
        write!(w, "{}", objects.ids[r])?;
        for v in objects.features.row(r) {
            // `Display` prints the shortest representation that round-trips.
            write!(w, ",{v}")?;
        }
        if has_asset {
            write!(w, ",{}", objects.assets[r].as_deref().unwrap_or(""))?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_triplets(path: impl AsRef<Path>, objects: &ObjectSet) -> Result<TripletPool> {
    let path = path.as_ref();
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let names: Vec<&str> = header.iter().collect();
    let with_ordering = match names.as_slice() {
        ["anchor_id", "j_id", "k_id"] => false,
        ["anchor_id", "j_id", "k_id", "ordering"] => true,
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "header must be anchor_id,j_id,k_id[,ordering]".into(),
            })
        }
    };
    let lookup: std::collections::HashMap<&str, usize> =
        objects.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut triplets = Vec::new();
    let mut orderings = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let invalid = |message: String| Error::Validation {
            path: path.to_path_buf(),
            line,
            message,
        };
        if record.len() != header.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let mut idx = [0usize; 3];
        for (slot, field) in idx.iter_mut().zip(record.iter()) {
            *slot = *lookup
                .get(field)
                .ok_or_else(|| invalid(format!("unknown object id {field:?}")))?;
        }
        let t = Triplet {
            anchor: idx[0],
            first: idx[1],
            second: idx[2],
        };
        t.validate(objects.len()).map_err(|e| invalid(e.to_string()))?;
        triplets.push(t);
        if with_ordering {
            orderings.push(record[3].parse::<Closer>().map_err(|e| invalid(e.to_string()))?);
        }
    }
    TripletPool::new(triplets, with_ordering.then_some(orderings), Provenance::Loaded)
}

pub fn save_triplets(path: impl AsRef<Path>, pool: &TripletPool, objects: &ObjectSet) -> Result<()> {
    pool.validate(objects.len())?;
    let mut w = BufWriter::new(File::create(path)?);
    match &pool.orderings {
        Some(o) => {
            writeln!(w, "anchor_id,j_id,k_id,ordering")?;
            for (t, c) in pool.triplets.iter().zip(o) {
                writeln!(
                    w,
                    "{},{},{},{}",
                    objects.id(t.anchor),
                    objects.id(t.first),
                    objects.id(t.second),
                    c.token()
                )?;
            }
        }
        None => {
            writeln!(w, "anchor_id,j_id,k_id")?;
            for t in &pool.triplets {
                writeln!(
                    w,
                    "{},{},{}",
                    objects.id(t.anchor),
                    objects.id(t.first),
                    objects.id(t.second)
                )?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
