//! The learned metric `d(x, y) = ‖φ(x) − φ(y)‖` and the triplet quantities
//! built on it: ordering probabilities, entropy, the exponential triplet loss
//! and its gradients.
//!
//! Most callers should build an [`EmbeddingSnapshot`] once per model version
//! and query it; the free functions taking a model and a feature matrix are
//! convenience wrappers over a fresh snapshot.

use serde::{Deserialize, Serialize};

use crate::linalg::{dot, sq_dist, DenseMatrix, DenseVector};
use crate::nn::{self, MlpParams, ParamGrads};
use crate::{Error, Result};

/// Embedding network `φ: R^d → R^d̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingModel {
    params: MlpParams,
}

impl EmbeddingModel {
    pub fn new(params: MlpParams) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut MlpParams {
        &mut self.params
    }

    pub fn into_params(self) -> MlpParams {
        self.params
    }

    pub fn input_dim(&self) -> usize {
        self.params.input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.params.output_dim()
    }

    pub fn embed(&self, x: &[f64]) -> Result<DenseVector> {
        nn::forward(&self.params, x).map(|(e, _)| e)
    }

    /// Checks that the model consumes `features`' columns.
    pub fn check_features(&self, features: &DenseMatrix) -> Result<()> {
        if features.cols() != self.input_dim() {
            return Err(Error::Shape {
                layer: 0,
                expected: self.input_dim(),
                actual: features.cols(),
            });
        }
        Ok(())
    }
}

/// An (anchor, first, second) index triple: "is the anchor closer to the
/// first or to the second object?".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub first: usize,
    pub second: usize,
}

impl Triplet {
    /// Validates distinctness and range against an object set of size `n`.
    pub fn new(anchor: usize, first: usize, second: usize, n: usize) -> Result<Self> {
        let t = Self { anchor, first, second };
        t.validate(n)?;
        Ok(t)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for index in [self.anchor, self.first, self.second] {
            if index >= n {
                return Err(Error::Index { index, len: n });
            }
        }
        if self.anchor == self.first || self.anchor == self.second || self.first == self.second {
            return Err(Error::Contract(format!(
                "triplet ({}, {}, {}) repeats an object",
                self.anchor, self.first, self.second
            )));
        }
        Ok(())
    }

    pub fn objects(&self) -> [usize; 3] {
        [self.anchor, self.first, self.second]
    }

    /// Same comparison with first and second exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            anchor: self.anchor,
            first: self.second,
            second: self.first,
        }
    }

    /// Order-insensitive identity of the comparison.
    pub fn canonical(&self) -> (usize, usize, usize) {
        (self.anchor, self.first.min(self.second), self.first.max(self.second))
    }

    pub fn label(self, closer: Closer) -> LabeledTriplet {
        LabeledTriplet { triplet: self, closer }
    }
}

/// Which candidate the anchor is closer to. Serialized as `"j"` / `"k"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Closer {
    #[serde(rename = "j")]
    J,
    #[serde(rename = "k")]
    K,
}

impl Closer {
    pub fn flipped(self) -> Self {
        match self {
            Closer::J => Closer::K,
            Closer::K => Closer::J,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Closer::J => "j",
            Closer::K => "k",
        }
    }
}

impl std::str::FromStr for Closer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "j" => Ok(Closer::J),
            "k" => Ok(Closer::K),
            other => Err(Error::Contract(format!(
                "ordering must be \"j\" or \"k\", got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledTriplet {
    pub triplet: Triplet,
    pub closer: Closer,
}

impl LabeledTriplet {
    /// (anchor, near, far) following the annotated ordering.
    pub fn oriented(&self) -> (usize, usize, usize) {
        let t = self.triplet;
        match self.closer {
            Closer::J => (t.anchor, t.first, t.second),
            Closer::K => (t.anchor, t.second, t.first),
        }
    }
}

/// Smoothing constant of the ordering probability. Must be non-negative.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Mu(f64);

impl Mu {
    pub const DEFAULT: Mu = Mu(0.05);

    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::Config(format!("mu must be finite and >= 0, got {value}")));
        }
        Ok(Self(value))
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Mu {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl TryFrom<f64> for Mu {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Mu::new(v)
    }
}

impl From<Mu> for f64 {
    fn from(m: Mu) -> f64 {
        m.0
    }
}

/// Probability that the anchor is closer to the first object, given squared
/// distances to the first (`sq_first`) and second (`sq_second`) objects.
#[inline]
pub fn ordering_probability(sq_first: f64, sq_second: f64, mu: Mu) -> f64 {
    let mu = mu.value();
    let denom = 2.0 * mu + (sq_first + sq_second);
    if denom <= 0.0 || sq_first == sq_second {
        return 0.5;
    }
    // The smaller side is computed directly so both orderings sum to one.
    if sq_second < sq_first {
        ((mu + sq_second) / denom).clamp(0.0, 1.0)
    } else {
        1.0 - ((mu + sq_first) / denom).clamp(0.0, 1.0)
    }
}

/// Binary entropy in bits, with `0 · log 0 = 0`.
#[inline]
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.log2() };
    (term(p) + term(1.0 - p)).clamp(0.0, 1.0)
}

/// Gradients of one labeled triplet's loss with respect to the anchor, near
/// and far embeddings, plus the loss value itself.
#[inline]
fn oriented_output_grads(anchor: &[f64], near: &[f64], far: &[f64]) -> (f64, [DenseVector; 3]) {
    let loss = (sq_dist(anchor, near) - sq_dist(anchor, far)).exp();
    let c = 2.0 * loss;
    let ga = far.iter().zip(near).map(|(f, n)| c * (f - n)).collect();
    let gn = near.iter().zip(anchor).map(|(n, a)| c * (n - a)).collect();
    let gf = anchor.iter().zip(far).map(|(a, f)| c * (a - f)).collect();
    (loss, [ga, gn, gf])
}

/// Embeddings of every object under one model version, plus the inputs seen
/// by the final layer (needed for last-layer gradients).
#[derive(Debug, Clone)]
pub struct EmbeddingSnapshot {
    embeddings: DenseMatrix,
    last_inputs: DenseMatrix,
    params: MlpParams,
}

impl EmbeddingSnapshot {
    pub fn new(model: &EmbeddingModel, features: &DenseMatrix) -> Result<Self> {
        model.check_features(features)?;
        let params = model.params().clone();
        let last = params.layers().len() - 1;
        let hidden = params.layers()[last].input_dim();
        let mut embeddings = DenseMatrix::zeros(features.rows(), params.output_dim());
        let mut last_inputs = DenseMatrix::zeros(features.rows(), hidden);
        for r in 0..features.rows() {
            let (e, cache) = nn::forward(&params, features.row(r))?;
            embeddings.row_mut(r).copy_from_slice(&e);
            last_inputs.row_mut(r).copy_from_slice(cache.layer_input(last));
        }
        Ok(Self {
            embeddings,
            last_inputs,
            params,
        })
    }

    pub fn num_objects(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &DenseMatrix {
        &self.embeddings
    }

    #[inline]
    pub fn embedding(&self, i: usize) -> &[f64] {
        self.embeddings.row(i)
    }

    /// Length of the flattened last-layer gradient (weights then biases).
    pub fn last_layer_len(&self) -> usize {
        let l = &self.params.layers()[self.params.layers().len() - 1];
        l.weights.values().len() + l.biases.len()
    }

    pub fn check_index(&self, index: usize) -> Result<()> {
        if index >= self.num_objects() {
            return Err(Error::Index {
                index,
                len: self.num_objects(),
            });
        }
        Ok(())
    }

    pub fn check_triplet(&self, t: &Triplet) -> Result<()> {
        t.validate(self.num_objects())
    }

    #[inline]
    pub fn sq_distance(&self, a: usize, b: usize) -> f64 {
        sq_dist(self.embedding(a), self.embedding(b))
    }

    #[inline]
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        self.sq_distance(a, b).sqrt()
    }

    /// `p_ijk`: probability the anchor is closer to `first`.
    #[inline]
    pub fn probability(&self, t: &Triplet, mu: Mu) -> f64 {
        ordering_probability(
            self.sq_distance(t.anchor, t.first),
            self.sq_distance(t.anchor, t.second),
            mu,
        )
    }

    #[inline]
    pub fn entropy(&self, t: &Triplet, mu: Mu) -> f64 {
        binary_entropy(self.probability(t, mu))
    }

    pub fn loss(&self, labeled: &LabeledTriplet) -> f64 {
        let (a, n, f) = labeled.oriented();
        (self.sq_distance(a, n) - self.sq_distance(a, f)).exp()
    }

    /// Loss gradients with respect to the anchor, first and second
    /// embeddings, for the given ordering.
    pub fn output_grads(&self, t: &Triplet, closer: Closer) -> [DenseVector; 3] {
        let lt = t.label(closer);
        let (a, n, f) = lt.oriented();
        let (_, [ga, gn, gf]) = oriented_output_grads(self.embedding(a), self.embedding(n), self.embedding(f));
        match closer {
            Closer::J => [ga, gn, gf],
            Closer::K => [ga, gf, gn],
        }
    }

    /// Gradient of one labeled triplet's loss w.r.t. the final layer,
    /// flattened weights-first.
    pub fn last_layer_gradient(&self, t: &Triplet, closer: Closer) -> DenseVector {
        let grads = self.output_grads(t, closer);
        self.project_last_layer(t, &grads, 1.0)
    }

    fn project_last_layer(&self, t: &Triplet, grads: &[DenseVector; 3], weight: f64) -> DenseVector {
        let out = self.embed_dim();
        let hidden = self.last_inputs.cols();
        let mut flat = vec![0.0; out * hidden + out];
        self.accumulate_last_layer(t, grads, weight, &mut flat);
        debug_assert_eq!(flat.len(), self.last_layer_len());
        flat
    }

    fn accumulate_last_layer(&self, t: &Triplet, grads: &[DenseVector; 3], weight: f64, flat: &mut [f64]) {
        let out = self.embed_dim();
        let hidden = self.last_inputs.cols();
        for (obj, g) in t.objects().iter().zip(grads) {
            let h = self.last_inputs.row(*obj);
            for (r, &gr) in g.iter().enumerate() {
                let gw = weight * gr;
                if gw == 0.0 {
                    continue;
                }
                let row = &mut flat[r * hidden..(r + 1) * hidden];
                for (w, hi) in row.iter_mut().zip(h) {
                    *w += gw * hi;
                }
                flat[out * hidden + r] += gw;
            }
        }
    }

    /// `p_ijk ∇L(i,j,k) + p_ikj ∇L(i,k,j)` over the final layer.
    pub fn expected_last_layer_gradient(&self, t: &Triplet, mu: Mu) -> DenseVector {
        let p = self.probability(t, mu);
        let mut flat = vec![0.0; self.last_layer_len()];
        self.accumulate_last_layer(t, &self.output_grads(t, Closer::J), p, &mut flat);
        self.accumulate_last_layer(t, &self.output_grads(t, Closer::K), 1.0 - p, &mut flat);
        flat
    }

    /// Ordering with probability ≥ 0.5; ties go to the stored order.
    pub fn most_probable(&self, t: &Triplet, mu: Mu) -> Closer {
        if self.probability(t, mu) >= 0.5 {
            Closer::J
        } else {
            Closer::K
        }
    }

    pub fn most_probable_gradient(&self, t: &Triplet, mu: Mu) -> DenseVector {
        self.last_layer_gradient(t, self.most_probable(t, mu))
    }

    /// Probability-weighted norm of the loss gradient w.r.t. the three output
    /// embeddings.
    pub fn expected_output_change(&self, t: &Triplet, mu: Mu) -> f64 {
        let p = self.probability(t, mu);
        let norm_of = |gs: [DenseVector; 3]| gs.iter().map(|g| dot(g, g)).sum::<f64>().sqrt();
        p * norm_of(self.output_grads(t, Closer::J)) + (1.0 - p) * norm_of(self.output_grads(t, Closer::K))
    }
}

pub fn distance(model: &EmbeddingModel, features: &DenseMatrix, a: usize, b: usize) -> Result<f64> {
    model.check_features(features)?;
    for index in [a, b] {
        if index >= features.rows() {
            return Err(Error::Index {
                index,
                len: features.rows(),
            });
        }
    }
    let ea = model.embed(features.row(a))?;
    let eb = model.embed(features.row(b))?;
    Ok(sq_dist(&ea, &eb).sqrt())
}

pub fn triplet_probability(model: &EmbeddingModel, features: &DenseMatrix, t: &Triplet, mu: Mu) -> Result<f64> {
    let snap = EmbeddingSnapshot::new(model, features)?;
    snap.check_triplet(t)?;
    Ok(snap.probability(t, mu))
}

pub fn triplet_entropy(model: &EmbeddingModel, features: &DenseMatrix, t: &Triplet, mu: Mu) -> Result<f64> {
    triplet_probability(model, features, t, mu).map(binary_entropy)
}

/// Sum over `labeled` of `exp(−(d²(anchor, far) − d²(anchor, near)))`.
pub fn triplet_loss(model: &EmbeddingModel, features: &DenseMatrix, labeled: &[LabeledTriplet]) -> Result<f64> {
    let snap = EmbeddingSnapshot::new(model, features)?;
    let mut total = 0.0;
    for lt in labeled {
        snap.check_triplet(&lt.triplet)?;
        total += snap.loss(lt);
    }
    Ok(total)
}

pub fn loss_gradient(model: &EmbeddingModel, features: &DenseMatrix, labeled: &[LabeledTriplet]) -> Result<ParamGrads> {
    loss_and_gradient(model, features, labeled).map(|(_, g)| g)
}

/// Summed loss and its exact gradient over all parameters.
///
/// The three shared-weight passes per triplet are folded per object: each
/// object referenced by the batch is forwarded once, its embedding gradient
/// is accumulated across triplets, and it is back-propagated once.
pub fn loss_and_gradient(
    model: &EmbeddingModel,
    features: &DenseMatrix,
    labeled: &[LabeledTriplet],
) -> Result<(f64, ParamGrads)> {
    model.check_features(features)?;
    let params = model.params();
    let n = features.rows();
    let mut passes: Vec<Option<(DenseVector, nn::ForwardCache)>> = vec![None; n];
    let mut out_grads: Vec<Option<DenseVector>> = vec![None; n];
    let dim = model.embed_dim();

    for lt in labeled {
        lt.triplet.validate(n)?;
        for obj in lt.triplet.objects() {
            if passes[obj].is_none() {
                passes[obj] = Some(nn::forward(params, features.row(obj))?);
                out_grads[obj] = Some(vec![0.0; dim]);
            }
        }
    }

    let mut loss = 0.0;
    for lt in labeled {
        let (a, near, far) = lt.oriented();
        let emb = |i: usize| passes[i].as_ref().map(|(e, _)| e.as_slice()).unwrap_or(&[]);
        let (l, grads) = oriented_output_grads(emb(a), emb(near), emb(far));
        loss += l;
        for (obj, g) in [a, near, far].into_iter().zip(grads) {
            if let Some(acc) = out_grads[obj].as_mut() {
                acc.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("triplet loss".into()));
    }

    let mut grads = params.zeros_like();
    for (pass, g) in passes.iter().zip(&out_grads) {
        if let (Some((_, cache)), Some(g)) = (pass, g) {
            nn::backward_accumulate(params, cache, g, &mut grads)?;
        }
    }
    Ok((loss, grads))
}

pub fn expected_last_layer_gradient(
    model: &EmbeddingModel,
    features: &DenseMatrix,
    t: &Triplet,
    mu: Mu,
) -> Result<DenseVector> {
    let snap = EmbeddingSnapshot::new(model, features)?;
    snap.check_triplet(t)?;
    Ok(snap.expected_last_layer_gradient(t, mu))
}

pub fn most_probable_gradient(
    model: &EmbeddingModel,
    features: &DenseMatrix,
    t: &Triplet,
    mu: Mu,
) -> Result<DenseVector> {
    let snap = EmbeddingSnapshot::new(model, features)?;
    snap.check_triplet(t)?;
    Ok(snap.most_probable_gradient(t, mu))
}
