//! One annotation session: the loop state, the pending batch, and the
//! append-only label log that makes acked answers durable.
//!
//! On-disk layout of a session directory:
//!
//! ```text
//! config.json        SessionConfig, written once
//! checkpoint.json    loop state and pending batch, rewritten at round boundaries
//! labels.ndjson      one LabelLogEntry per acked answer
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use decorr_core::active_loop::LoopState;
use decorr_core::data::{self, ObjectSet, TripletPool};
use decorr_core::eval::{self, DatasetBinding, GridCell};
use decorr_core::{checkpoint, AcquisitionConfig, Closer, Strategy, TrainBudget, Triplet};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

const CONFIG_FILE: &str = "config.json";
const CHECKPOINT_FILE: &str = "checkpoint.json";
const LOG_FILE: &str = "labels.ndjson";
const CHECKPOINT_KIND: &str = "annotation_session";

fn default_true() -> bool {
    true
}

/// Body of `POST /sessions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub seed: u64,
    pub dataset: DatasetBinding,
    /// Strategy, batch size, initial pool, rounds and training budget. The
    /// noise rate only affects stored orderings, which a human-driven
    /// session never reads.
    pub cell: GridCell,
    /// Report TGA on the held-out pool after every round. Ignored when the
    /// dataset carries no orderings.
    #[serde(default = "default_true")]
    pub evaluate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    AwaitingLabels,
    Training,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelLogEntry {
    pub session_id: String,
    pub query_id: String,
    pub triplet: Triplet,
    pub ordering: Closer,
    /// Milliseconds since the Unix epoch, non-decreasing within one log.
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectView {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asset: Option<String>,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryView {
    pub query_id: String,
    pub anchor: ObjectView,
    pub j: ObjectView,
    pub k: ObjectView,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PendingView {
    pub session_id: String,
    pub round: usize,
    pub status: Status,
    pub remaining: usize,
    pub queries: Vec<QueryView>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatusView {
    pub session_id: String,
    pub round: usize,
    pub rounds: usize,
    pub labeled_count: usize,
    pub pending_count: usize,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tga: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ack {
    pub query_id: String,
    pub remaining: usize,
    pub status: Status,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    state: LoopState,
    /// Current batch in selection order.
    pending: Vec<usize>,
    /// Whether `pending` is the random initial pool.
    initial: bool,
    status: Status,
    tga: Option<f64>,
}

/// Checkpoint kind of a session directory's `checkpoint.json`.
pub const SESSION_KIND: &str = CHECKPOINT_KIND;

/// Loop state stored in a session checkpoint.
pub fn load_loop_state(path: impl AsRef<Path>) -> Result<LoopState, ServiceError> {
    let ck: Checkpoint = checkpoint::load(path, CHECKPOINT_KIND)?;
    Ok(ck.state)
}

pub fn query_id(triplet_id: usize) -> String {
    format!("q{triplet_id}")
}

fn parse_query_id(query: &str) -> Option<usize> {
    query.strip_prefix('q')?.parse().ok()
}

pub fn parse_ordering(token: &str) -> Result<Closer, ServiceError> {
    match token {
        "j" => Ok(Closer::J),
        "k" => Ok(Closer::K),
        other => Err(ServiceError::Validation(format!(
            "ordering must be \"j\" or \"k\", got {other:?}"
        ))),
    }
}

/// Objects, the annotation pool and the optional evaluation pool.
struct Materials {
    objects: ObjectSet,
    pool: Vec<Triplet>,
    test: Option<TripletPool>,
}

fn materialize(config: &SessionConfig) -> Result<Materials, ServiceError> {
    if let DatasetBinding::Files {
        features,
        triplets,
        train_count,
        test_count,
    } = &config.dataset
    {
        let objects = data::load_features(features)?;
        let pool = data::load_triplets(triplets, &objects)?;
        if pool.orderings().is_none() {
            // Unlabeled triplets: annotate the train share, nothing to evaluate on.
            let (train, _) = data::split(&pool, *train_count, *test_count, eval::derive_seed(config.seed, 2))?;
            return Ok(Materials {
                objects,
                pool: train.triplets().to_vec(),
                test: None,
            });
        }
    }
    let run = eval::prepare_run(&config.dataset, config.seed, config.seed, 0.0)?;
    Ok(Materials {
        objects: run.objects,
        pool: run.train.triplets().to_vec(),
        test: config.evaluate.then_some(run.test),
    })
}

fn validate_config(config: &SessionConfig, pool_len: usize) -> Result<(AcquisitionConfig, TrainBudget), ServiceError> {
    let cell = &config.cell;
    let acquisition = cell.acquisition()?;
    let budget = cell.budget();
    budget.validate()?;
    let needed = cell.initial_pool() + cell.rounds * cell.batch_size;
    if needed > pool_len {
        return Err(ServiceError::Validation(format!(
            "{} initial labels plus {} rounds of {} need {needed} triplets, pool has {pool_len}",
            cell.initial_pool(),
            cell.rounds,
            cell.batch_size
        )));
    }
    if cell.initial_pool() == 0 && cell.rounds > 0 && cell.strategy.strategy != Strategy::Random {
        return Err(ServiceError::Validation(
            "an empty initial pool is only supported with random selection".into(),
        ));
    }
    Ok((acquisition, budget))
}

struct Inner {
    /// `None` while the training worker owns the state.
    state: Option<LoopState>,
    pending: Vec<usize>,
    initial: bool,
    answered: BTreeMap<usize, Closer>,
    status: Status,
    tga: Option<f64>,
    round: usize,
    labeled_count: usize,
    error: Option<String>,
    log: File,
    last_timestamp: u64,
}

impl Inner {
    fn remaining(&self) -> usize {
        self.pending.len() - self.answered.len()
    }
}

pub struct Session {
    id: String,
    dir: PathBuf,
    objects: ObjectSet,
    test: Option<TripletPool>,
    acquisition: AcquisitionConfig,
    budget: TrainBudget,
    rounds: usize,
    inner: Mutex<Inner>,
}

/// Answers of a complete batch, handed to the training worker.
pub struct TrainingJob {
    state: LoopState,
    answers: Vec<(usize, Closer)>,
    initial: bool,
}

impl Session {
    /// Builds a new session in `dir` and selects the initial pool.
    pub fn create(
        id: String,
        dir: PathBuf,
        config: SessionConfig,
    ) -> Result<(Self, Option<TrainingJob>), ServiceError> {
        let materials = materialize(&config)?;
        let (acquisition, budget) = validate_config(&config, materials.pool.len())?;
        let cell = &config.cell;
        let mut state = LoopState::new(
            materials.objects.features(),
            materials.pool,
            &cell.layers,
            eval::derive_seed(config.seed, 4),
        )?;
        let mut initial = true;
        let mut pending = state.select_initial(cell.initial_pool())?;
        let mut status = Status::AwaitingLabels;
        if pending.is_empty() {
            initial = false;
            if cell.rounds == 0 {
                status = Status::Finished;
            } else {
                pending = state.select_batch(materials.objects.features(), &acquisition)?;
            }
        }

        fs::create_dir_all(&dir)?;
        write_synced(
            &dir.join(CONFIG_FILE),
            &serde_json::to_vec_pretty(&config).map_err(io_error)?,
        )?;
        let ck = Checkpoint {
            state,
            pending,
            initial,
            status,
            tga: None,
        };
        checkpoint::save(dir.join(CHECKPOINT_FILE), CHECKPOINT_KIND, &ck)?;
        let log = open_log(&dir.join(LOG_FILE))?;
        let session = Self::assemble(
            id,
            dir,
            materials.objects,
            materials.test,
            acquisition,
            budget,
            cell.rounds,
            ck,
            log,
            BTreeMap::new(),
            0,
        );
        let job = session.take_job_if_complete();
        Ok((session, job))
    }

    /// Reopens a session directory, replaying acked answers from the label
    /// log. Returns a training job when the replay completes the batch.
    pub fn recover(id: String, dir: PathBuf) -> Result<(Self, Option<TrainingJob>), ServiceError> {
        let config: SessionConfig = serde_json::from_slice(&fs::read(dir.join(CONFIG_FILE))?).map_err(io_error)?;
        let materials = materialize(&config)?;
        let (acquisition, budget) = validate_config(&config, materials.pool.len())?;
        let ck: Checkpoint = checkpoint::load(dir.join(CHECKPOINT_FILE), CHECKPOINT_KIND)?;
        ck.state.validate(materials.objects.features())?;

        let log_path = dir.join(LOG_FILE);
        let entries = read_log(&log_path)?;
        let mut answered = BTreeMap::new();
        let mut last_timestamp = 0;
        for entry in entries {
            last_timestamp = last_timestamp.max(entry.timestamp_ms);
            let Some(tid) = parse_query_id(&entry.query_id) else {
                return Err(ServiceError::Corrupt(format!(
                    "bad query id {:?} in label log",
                    entry.query_id
                )));
            };
            if ck.state.triplet(tid) != Some(&entry.triplet) {
                return Err(ServiceError::Corrupt(format!(
                    "log entry {} does not match the pool",
                    entry.query_id
                )));
            }
            if ck.pending.contains(&tid) && ck.state.is_unlabeled(tid) {
                answered.entry(tid).or_insert(entry.ordering);
            }
        }
        let log = open_log(&log_path)?;
        let session = Self::assemble(
            id,
            dir,
            materials.objects,
            materials.test,
            acquisition,
            budget,
            config.cell.rounds,
            ck,
            log,
            answered,
            last_timestamp,
        );
        let job = session.take_job_if_complete();
        Ok((session, job))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        id: String,
        dir: PathBuf,
        objects: ObjectSet,
        test: Option<TripletPool>,
        acquisition: AcquisitionConfig,
        budget: TrainBudget,
        rounds: usize,
        ck: Checkpoint,
        log: File,
        answered: BTreeMap<usize, Closer>,
        last_timestamp: u64,
    ) -> Self {
        let inner = Inner {
            round: ck.state.round(),
            labeled_count: ck.state.labeled().len(),
            state: Some(ck.state),
            pending: ck.pending,
            initial: ck.initial,
            answered,
            status: ck.status,
            tga: ck.tga,
            error: None,
            log,
            last_timestamp,
        };
        Self {
            id,
            dir,
            objects,
            test,
            acquisition,
            budget,
            rounds,
            inner: Mutex::new(inner),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    fn object(&self, i: usize) -> ObjectView {
        ObjectView {
            id: self.objects.id(i).to_string(),
            asset: self.objects.asset(i).map(str::to_string),
            features: self.objects.features().row(i).to_vec(),
        }
    }

    pub fn pending(&self) -> PendingView {
        let inner = self.lock();
        let queries = match (&inner.state, inner.status) {
            (Some(state), Status::AwaitingLabels) => inner
                .pending
                .iter()
                .filter(|id| !inner.answered.contains_key(id))
                .map(|&id| {
                    let t = state.pool()[id];
                    QueryView {
                        query_id: query_id(id),
                        anchor: self.object(t.anchor),
                        j: self.object(t.first),
                        k: self.object(t.second),
                    }
                })
                .collect(),
            _ => Vec::new(),
        };
        PendingView {
            session_id: self.id.clone(),
            round: inner.round,
            status: inner.status,
            remaining: inner.remaining(),
            queries,
        }
    }

    pub fn status(&self) -> StatusView {
        let inner = self.lock();
        StatusView {
            session_id: self.id.clone(),
            round: inner.round,
            rounds: self.rounds,
            labeled_count: inner.labeled_count,
            pending_count: inner.remaining(),
            status: inner.status,
            tga: inner.tga,
            error: inner.error.clone(),
        }
    }

    /// Appends the answer to the label log, syncs it, and only then records
    /// it. The returned job, if any, must be handed to [`Session::train`].
    pub fn answer(&self, query: &str, ordering: Closer) -> Result<(Ack, Option<TrainingJob>), ServiceError> {
        let mut inner = self.lock();
        let not_found = || ServiceError::QueryNotFound(query.to_string());
        let tid = parse_query_id(query).ok_or_else(not_found)?;
        if inner.answered.contains_key(&tid) {
            return Err(ServiceError::Conflict(query.to_string()));
        }
        let pending = inner.status == Status::AwaitingLabels && inner.pending.contains(&tid);
        if !pending {
            let already_labeled = inner
                .state
                .as_ref()
                .is_some_and(|s| s.triplet(tid).is_some() && !s.is_unlabeled(tid));
            return Err(if already_labeled {
                ServiceError::Conflict(query.to_string())
            } else {
                not_found()
            });
        }
        let triplet = inner
            .state
            .as_ref()
            .expect("state present while awaiting labels")
            .pool()[tid];
        let timestamp_ms = now_ms().max(inner.last_timestamp);
        let entry = LabelLogEntry {
            session_id: self.id.clone(),
            query_id: query.to_string(),
            triplet,
            ordering,
            timestamp_ms,
        };
        let mut line = serde_json::to_vec(&entry).map_err(io_error)?;
        line.push(b'\n');
        inner.log.write_all(&line)?;
        inner.log.sync_data()?;
        inner.last_timestamp = timestamp_ms;
        inner.answered.insert(tid, ordering);

        drop(inner);
        let job = self.take_job_if_complete();
        let inner = self.lock();
        Ok((
            Ack {
                query_id: query.to_string(),
                remaining: inner.remaining(),
                status: inner.status,
            },
            job,
        ))
    }

    fn take_job_if_complete(&self) -> Option<TrainingJob> {
        let mut inner = self.lock();
        if inner.status != Status::AwaitingLabels || inner.remaining() > 0 {
            return None;
        }
        let state = inner.state.take()?;
        inner.status = Status::Training;
        let answers = inner.pending.iter().map(|id| (*id, inner.answered[id])).collect();
        Some(TrainingJob {
            state,
            answers,
            initial: inner.initial,
        })
    }

    /// Absorbs the batch, retrains, evaluates, selects the next batch and
    /// writes the round-boundary checkpoint. Blocking.
    pub fn train(&self, job: TrainingJob) {
        let TrainingJob {
            mut state,
            answers,
            initial,
        } = job;
        let snapshot = state.clone();
        match self.advance(&mut state, &answers, initial) {
            Ok(ck) => {
                let mut inner = self.lock();
                inner.round = ck.state.round();
                inner.labeled_count = ck.state.labeled().len();
                inner.state = Some(ck.state);
                inner.pending = ck.pending;
                inner.initial = false;
                inner.answered.clear();
                inner.status = ck.status;
                inner.tga = ck.tga;
                inner.error = None;
            }
            Err(e) => {
                tracing::error!(session = %self.id, error = %e, "training failed");
                // Keep the batch answered; a restart retries from the last checkpoint.
                let mut inner = self.lock();
                inner.state = Some(snapshot);
                inner.error = Some(e.to_string());
            }
        }
    }

    fn advance(
        &self,
        state: &mut LoopState,
        answers: &[(usize, Closer)],
        initial: bool,
    ) -> Result<Checkpoint, ServiceError> {
        let features = self.objects.features();
        state.absorb(answers)?;
        state.train(features, &self.budget)?;
        if !initial {
            state.advance_round();
        }
        let tga = match &self.test {
            Some(test) => Some(eval::compute_tga(state.model(), features, test)?),
            None => None,
        };
        let finished = state.round() >= self.rounds;
        let pending = if finished {
            Vec::new()
        } else {
            state.select_batch(features, &self.acquisition)?
        };
        let ck = Checkpoint {
            state: state.clone(),
            pending,
            initial: false,
            status: if finished {
                Status::Finished
            } else {
                Status::AwaitingLabels
            },
            tga,
        };
        checkpoint::save(self.dir.join(CHECKPOINT_FILE), CHECKPOINT_KIND, &ck)?;
        Ok(ck)
    }
}

/// Runs a training job on the blocking pool.
pub fn spawn_training(session: Arc<Session>, job: TrainingJob) {
    tokio::task::spawn_blocking(move || session.train(job));
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn io_error(e: serde_json::Error) -> ServiceError {
    ServiceError::Io(std::io::Error::other(e))
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<(), ServiceError> {
    let mut f = File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(())
}

fn open_log(path: &Path) -> Result<File, ServiceError> {
    Ok(OpenOptions::new().create(true).append(true).open(path)?)
}

/// Reads the label log. A torn final line (a write that was never acked) is
/// cut off so later appends start on a fresh line.
fn read_log(path: &Path) -> Result<Vec<LabelLogEntry>, ServiceError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    if complete < bytes.len() {
        tracing::warn!(path = %path.display(), "discarding torn label log tail");
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(complete as u64)?;
        f.sync_all()?;
    }
    let mut entries = Vec::new();
    for (n, line) in BufReader::new(&bytes[..complete]).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line)
            .map_err(|e| ServiceError::Corrupt(format!("{}:{}: {e}", path.display(), n + 1)))?;
        entries.push(entry);
    }
    Ok(entries)
}
