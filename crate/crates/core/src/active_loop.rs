//! The batch-mode active learning loop.
//!
//! An experiment trains an initial model on `l` random labeled triplets, then
//! repeats for `M` rounds: pick a batch from the unlabeled pool, have an
//! oracle order it, move it to the labeled set, and retrain from the previous
//! round's parameters on everything labeled so far.
//!
//! The steps are exposed individually ([`LoopState::select_batch`],
//! [`LoopState::absorb`], [`LoopState::train`]) so a human-annotation
//! front-end can suspend between selection and labeling.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{self, AcquisitionConfig, Strategy};
use crate::data::GroundTruthMetric;
use crate::linalg::DenseMatrix;
use crate::metric::{self, Closer, EmbeddingModel, EmbeddingSnapshot, LabeledTriplet, Triplet};
use crate::nn::{self, AdamConfig, AdamState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainBudget {
    pub epochs_per_round: usize,
    /// `None` trains full-batch: one Adam step per epoch.
    pub minibatch_size: Option<usize>,
    pub adam: AdamConfig,
}

impl TrainBudget {
    pub fn full_batch(epochs_per_round: usize) -> Self {
        Self {
            epochs_per_round,
            minibatch_size: None,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_round == 0 {
            return Err(Error::Config("epochs per round must be at least 1".into()));
        }
        if self.minibatch_size == Some(0) {
            return Err(Error::Config("minibatch size must be positive".into()));
        }
        if self.adam.learning_rate.is_nan() || self.adam.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Answers ordering queries for triplets of the unlabeled pool.
pub trait Oracle {
    fn answer(&mut self, id: usize, triplet: &Triplet) -> Result<Closer>;
}

/// Where a dataset oracle reads the true ordering from.
#[derive(Debug, Clone, Copy)]
pub enum Truth<'a> {
    /// Stored ordering of this triplet.
    Stored(Closer),
    Metric {
        metric: &'a GroundTruthMetric,
        features: &'a DenseMatrix,
    },
}

/// The true ordering, inverted with probability `flip_rate`.
pub fn dataset_oracle_answer<R: Rng + ?Sized>(
    truth: Truth<'_>,
    triplet: &Triplet,
    flip_rate: f64,
    rng: &mut R,
) -> Result<Closer> {
    let closer = match truth {
        Truth::Stored(c) => c,
        Truth::Metric { metric, features } => {
            triplet.validate(features.rows())?;
            metric
                .order(features, triplet)
                .ok_or_else(|| Error::Contract(format!("ground truth ties on {triplet:?}")))?
        }
    };
    // Coin drawn unconditionally so the stream does not depend on the rate.
    let coin: f64 = rng.random();
    Ok(if coin < flip_rate { closer.flipped() } else { closer })
}

/// Oracle backed by stored labels or a ground-truth metric, with optional
/// per-query flipping.
#[derive(Debug, Clone)]
pub struct DatasetOracle {
    source: OracleSource,
    flip_rate: f64,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
enum OracleSource {
    Labels(Vec<Closer>),
    Metric {
        metric: GroundTruthMetric,
        features: DenseMatrix,
    },
}

impl DatasetOracle {
    /// `labels[id]` is the ordering reported for triplet `id`.
    pub fn from_labels(labels: Vec<Closer>, flip_rate: f64, seed: u64) -> Result<Self> {
        Self::build(OracleSource::Labels(labels), flip_rate, seed)
    }

    pub fn from_metric(metric: GroundTruthMetric, features: DenseMatrix, flip_rate: f64, seed: u64) -> Result<Self> {
        Self::build(OracleSource::Metric { metric, features }, flip_rate, seed)
    }

    fn build(source: OracleSource, flip_rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&flip_rate) {
            return Err(Error::Config(format!("flip rate {flip_rate} outside [0, 1]")));
        }
        Ok(Self {
            source,
            flip_rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl Oracle for DatasetOracle {
    fn answer(&mut self, id: usize, triplet: &Triplet) -> Result<Closer> {
        let truth = match &self.source {
            OracleSource::Labels(labels) => Truth::Stored(*labels.get(id).ok_or(Error::Index {
                index: id,
                len: labels.len(),
            })?),
            OracleSource::Metric { metric, features } => Truth::Metric { metric, features },
        };
        dataset_oracle_answer(truth, triplet, self.flip_rate, &mut self.rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledEntry {
    pub id: usize,
    pub labeled: LabeledTriplet,
}

/// Checkpoint kind of a serialized [`LoopState`].
pub const LOOP_STATE_KIND: &str = "loop_state";

/// Labeled set `L`, unlabeled ids `U`, the current model and the RNG.
///
/// Triplets are identified by their position in the pool, so a pool sampled
/// with replacement can hold the same comparison under two ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    pool: Vec<Triplet>,
    labeled: Vec<LabeledEntry>,
    /// Sorted ascending.
    unlabeled: Vec<usize>,
    model: EmbeddingModel,
    round: usize,
    rng: ChaCha8Rng,
}

impl LoopState {
    /// Untrained state with every triplet unlabeled. `layers` lists the
    /// output width of each layer; the input width comes from `features`.
    pub fn new(features: &DenseMatrix, pool: Vec<Triplet>, layers: &[usize], seed: u64) -> Result<Self> {
        pool.iter().try_for_each(|t| t.validate(features.rows()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes: Vec<usize> = std::iter::once(features.cols()).chain(layers.iter().copied()).collect();
        let params = nn::init_params(&sizes, rng.next_u64())?;
        let unlabeled = (0..pool.len()).collect();
        Ok(Self {
            pool,
            labeled: Vec::new(),
            unlabeled,
            model: EmbeddingModel::new(params),
            round: 0,
            rng,
        })
    }

    pub fn pool(&self) -> &[Triplet] {
        &self.pool
    }

    pub fn labeled(&self) -> &[LabeledEntry] {
        &self.labeled
    }

    pub fn labeled_triplets(&self) -> Vec<LabeledTriplet> {
        self.labeled.iter().map(|e| e.labeled).collect()
    }

    pub fn unlabeled(&self) -> &[usize] {
        &self.unlabeled
    }

    pub fn model(&self) -> &EmbeddingModel {
        &self.model
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn triplet(&self, id: usize) -> Option<&Triplet> {
        self.pool.get(id)
    }

    pub fn is_unlabeled(&self, id: usize) -> bool {
        self.unlabeled.binary_search(&id).is_ok()
    }

    /// Checks the bookkeeping invariants (used after deserialization).
    pub fn validate(&self, features: &DenseMatrix) -> Result<()> {
        self.model.check_features(features)?;
        self.pool.iter().try_for_each(|t| t.validate(features.rows()))?;
        if !self.unlabeled.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Checkpoint("unlabeled ids not strictly ascending".into()));
        }
        let mut seen = vec![false; self.pool.len()];
        for &id in self.unlabeled.iter().chain(self.labeled.iter().map(|e| &e.id)) {
            match seen.get_mut(id) {
                Some(s) if !*s => *s = true,
                Some(_) => return Err(Error::Checkpoint(format!("triplet {id} listed twice"))),
                None => return Err(Error::Checkpoint(format!("triplet id {id} out of range"))),
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Checkpoint(
                "labeled and unlabeled sets do not cover the pool".into(),
            ));
        }
        for e in &self.labeled {
            if self.pool[e.id] != e.labeled.triplet {
                return Err(Error::Checkpoint(format!("labeled entry {} disagrees with pool", e.id)));
            }
        }
        Ok(())
    }

    /// `l` uniformly random unlabeled ids.
    pub fn select_initial(&mut self, l: usize) -> Result<Vec<usize>> {
        if l > self.unlabeled.len() {
            return Err(Error::Config(format!(
                "initial pool of {l} exceeds {} unlabeled triplets",
                self.unlabeled.len()
            )));
        }
        let picks = acquisition::random_select(self.unlabeled.len(), l, &mut self.rng)?;
        Ok(picks.into_iter().map(|p| self.unlabeled[p]).collect())
    }

    /// Next batch of unlabeled ids under the current model.
    pub fn select_batch(&mut self, features: &DenseMatrix, config: &AcquisitionConfig) -> Result<Vec<usize>> {
        if self.unlabeled.len() < config.batch_size {
            return Err(Error::PoolExhausted {
                needed: config.batch_size,
                available: self.unlabeled.len(),
            });
        }
        let snap = EmbeddingSnapshot::new(&self.model, features)?;
        acquisition::select_batch(&snap, &self.pool, &self.unlabeled, config, &mut self.rng)
    }

    /// Moves answered triplets from `U` to `L`. All-or-nothing.
    pub fn absorb(&mut self, answers: &[(usize, Closer)]) -> Result<()> {
        let mut ids: Vec<usize> = answers.iter().map(|a| a.0).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract("a triplet was answered twice in one batch".into()));
        }
        if let Some(&id) = ids.iter().find(|&&id| !self.is_unlabeled(id)) {
            return Err(Error::Contract(format!("triplet {id} is not in the unlabeled pool")));
        }
        for &(id, closer) in answers {
            self.labeled.push(LabeledEntry {
                id,
                labeled: self.pool[id].label(closer),
            });
        }
        self.unlabeled.retain(|id| ids.binary_search(id).is_err());
        Ok(())
    }

    /// Trains the current parameters on all of `L` for one budget of epochs
    /// with freshly initialized Adam moments. Returns the summed loss of the
    /// last step, or `None` when `L` is empty.
    pub fn train(&mut self, features: &DenseMatrix, budget: &TrainBudget) -> Result<Option<f64>> {
        budget.validate()?;
        if self.labeled.is_empty() {
            return Ok(None);
        }
        let labeled = self.labeled_triplets();
        let mut adam = AdamState::new(self.model.params(), budget.adam);
        let batch = budget.minibatch_size.unwrap_or(labeled.len()).min(labeled.len());
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        let mut scratch = Vec::with_capacity(batch);
        let mut last = 0.0;
        for _ in 0..budget.epochs_per_round {
            if batch == labeled.len() {
                let (loss, grads) = metric::loss_and_gradient(&self.model, features, &labeled)?;
                nn::adam_step(self.model.params_mut(), &grads, &mut adam)?;
                last = loss;
                continue;
            }
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(batch) {
                scratch.clear();
                scratch.extend(chunk.iter().map(|&i| labeled[i]));
                let (loss, grads) = metric::loss_and_gradient(&self.model, features, &scratch)?;
                nn::adam_step(self.model.params_mut(), &grads, &mut adam)?;
                last = loss;
            }
        }
        Ok(Some(last))
    }

    /// Mean loss over `L` under the current model.
    pub fn mean_training_loss(&self, features: &DenseMatrix) -> Result<f64> {
        if self.labeled.is_empty() {
            return Ok(0.0);
        }
        let total = metric::triplet_loss(&self.model, features, &self.labeled_triplets())?;
        Ok(total / self.labeled.len() as f64)
    }

    pub fn advance_round(&mut self) {
        self.round += 1;
    }
}

/// Static description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopSetup {
    /// Output width of each layer, e.g. `[10, 20, 10]`.
    pub layers: Vec<usize>,
    pub initial_pool: usize,
    pub budget: TrainBudget,
    pub seed: u64,
}

fn ask_all(state: &LoopState, ids: &[usize], oracle: &mut dyn Oracle) -> Result<Vec<(usize, Closer)>> {
    ids.iter()
        .map(|&id| Ok((id, oracle.answer(id, &state.pool[id])?)))
        .collect()
}

/// Builds the state, labels `l` random triplets through `oracle`, and trains
/// the initial model from scratch.
pub fn initialize(
    features: &DenseMatrix,
    pool: Vec<Triplet>,
    setup: &LoopSetup,
    oracle: &mut dyn Oracle,
) -> Result<LoopState> {
    setup.budget.validate()?;
    if setup.initial_pool > pool.len() {
        return Err(Error::Config(format!(
            "initial pool of {} exceeds {} triplets",
            setup.initial_pool,
            pool.len()
        )));
    }
    let mut state = LoopState::new(features, pool, &setup.layers, setup.seed)?;
    let ids = state.select_initial(setup.initial_pool)?;
    let answers = ask_all(&state, &ids, oracle)?;
    state.absorb(&answers)?;
    state.train(features, &setup.budget)?;
    Ok(state)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub selected: Vec<usize>,
    pub seconds: f64,
}

/// One round: select, annotate, absorb, warm-start retrain.
pub fn run_round(
    state: &mut LoopState,
    features: &DenseMatrix,
    config: &AcquisitionConfig,
    oracle: &mut dyn Oracle,
    budget: &TrainBudget,
) -> Result<RoundOutcome> {
    let start = Instant::now();
    let selected = state.select_batch(features, config)?;
    let answers = ask_all(state, &selected, oracle)?;
    state.absorb(&answers)?;
    state.train(features, budget)?;
    state.advance_round();
    Ok(RoundOutcome {
        selected,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Per-round results of one experiment. Index 0 is the initial model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentCurve {
    pub tga: Vec<f64>,
    pub labeled_counts: Vec<usize>,
    pub seconds: Vec<f64>,
    pub selected: Vec<Vec<usize>>,
}

pub fn run_experiment<F>(
    features: &DenseMatrix,
    pool: Vec<Triplet>,
    setup: &LoopSetup,
    config: &AcquisitionConfig,
    rounds: usize,
    oracle: &mut dyn Oracle,
    evaluate: F,
) -> Result<ExperimentCurve>
where
    F: FnMut(&EmbeddingModel) -> Result<f64>,
{
    run_experiment_with_state(features, pool, setup, config, rounds, oracle, evaluate).map(|(curve, _)| curve)
}

/// [`run_experiment`] that also returns the final loop state.
pub fn run_experiment_with_state<F>(
    features: &DenseMatrix,
    pool: Vec<Triplet>,
    setup: &LoopSetup,
    config: &AcquisitionConfig,
    rounds: usize,
    oracle: &mut dyn Oracle,
    mut evaluate: F,
) -> Result<(ExperimentCurve, LoopState)>
where
    F: FnMut(&EmbeddingModel) -> Result<f64>,
{
    config.validate()?;
    let needed = rounds * config.batch_size + setup.initial_pool;
    if needed > pool.len() {
        return Err(Error::Config(format!(
            "{rounds} rounds of {} plus {} initial triplets need {needed}, pool has {}",
            config.batch_size,
            setup.initial_pool,
            pool.len()
        )));
    }
    if setup.initial_pool == 0 && rounds > 0 && config.spec.strategy != Strategy::Random {
        return Err(Error::Config(
            "an empty initial pool is only supported with random selection".into(),
        ));
    }

    let start = Instant::now();
    let mut state = initialize(features, pool, setup, oracle)?;
    let mut curve = ExperimentCurve {
        tga: vec![evaluate(state.model())?],
        labeled_counts: vec![state.labeled().len()],
        seconds: vec![start.elapsed().as_secs_f64()],
        selected: vec![state.labeled().iter().map(|e| e.id).collect()],
    };
    for _ in 0..rounds {
        let outcome = run_round(&mut state, features, config, oracle, &setup.budget)?;
        curve.tga.push(evaluate(state.model())?);
        curve.labeled_counts.push(state.labeled().len());
        curve.seconds.push(outcome.seconds);
        curve.selected.push(outcome.selected);
    }
    Ok((curve, state))
}
