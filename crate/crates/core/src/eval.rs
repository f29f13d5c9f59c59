//! Triplet generalization accuracy and multi-seed experiment grids.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{AcquisitionConfig, EuclideanMode, StrategySpec};
use crate::active_loop::{run_experiment_with_state, DatasetOracle, LoopSetup, LoopState, TrainBudget};
use crate::data::{self, NoiseSpec, ObjectSet, SamplingOptions, TripletPool};
use crate::metric::{Closer, EmbeddingModel, EmbeddingSnapshot, Mu};
use crate::nn::AdamConfig;
use crate::{Error, Result};

/// Differences of squared distances below this count as a model tie.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Fraction of `test` whose stored ordering the squared distance `sq`
/// preserves. Ties earn half credit.
pub fn tga_with<F>(test: &TripletPool, sq: F) -> Result<f64>
where
    F: Fn(usize, usize) -> f64,
{
    if test.is_empty() {
        return Err(Error::Contract("empty test pool".into()));
    }
    let mut credit = 0.0;
    for (t, closer) in test.labeled()? {
        let diff = sq(t.anchor, t.second) - sq(t.anchor, t.first);
        credit += if diff.abs() < TIE_TOLERANCE {
            0.5
        } else if (diff > 0.0) == (closer == Closer::J) {
            1.0
        } else {
            0.0
        };
    }
    Ok(credit / test.len() as f64)
}

pub fn compute_tga(model: &EmbeddingModel, features: &crate::linalg::DenseMatrix, test: &TripletPool) -> Result<f64> {
    test.validate(features.rows())?;
    let snap = EmbeddingSnapshot::new(model, features)?;
    tga_with(test, |a, b| snap.sq_distance(a, b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TGARecord {
    pub strategy: String,
    pub batch_size: usize,
    pub initial_pool: usize,
    pub noise_rate: f64,
    pub seed: u64,
    pub round: usize,
    pub labeled_count: usize,
    pub tga: f64,
    pub seconds: f64,
}

/// The data an experiment grid runs on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetBinding {
    /// Gaussian objects with a random Mahalanobis ground truth. The objects
    /// and metric depend only on the grid seed; triplet sampling and the
    /// train/test split vary per run.
    Synthetic {
        n: usize,
        d: usize,
        train_count: usize,
        test_count: usize,
    },
    /// Features and labeled triplets from CSV files, split per run.
    Files {
        features: PathBuf,
        triplets: PathBuf,
        train_count: usize,
        test_count: usize,
    },
}

fn default_mu() -> f64 {
    Mu::DEFAULT.value()
}

fn default_lr() -> f64 {
    AdamConfig::default().learning_rate
}

fn default_layers() -> Vec<usize> {
    vec![10, 20, 10]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub strategy: StrategySpec,
    pub batch_size: usize,
    /// Defaults to the batch size.
    #[serde(default)]
    pub initial_pool: Option<usize>,
    /// Defaults to twice the batch size.
    #[serde(default)]
    pub oversample_size: Option<usize>,
    #[serde(default)]
    pub noise_rate: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    pub rounds: usize,
    pub epochs: usize,
    #[serde(default)]
    pub minibatch_size: Option<usize>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_layers")]
    pub layers: Vec<usize>,
    #[serde(default)]
    pub euclidean_mode: EuclideanMode,
}

impl GridCell {
    pub fn initial_pool(&self) -> usize {
        self.initial_pool.unwrap_or(self.batch_size)
    }

    pub fn acquisition(&self) -> Result<AcquisitionConfig> {
        let k = self.oversample_size.unwrap_or(2 * self.batch_size);
        let mut cfg = AcquisitionConfig::with_oversample(self.strategy, self.batch_size, k)?;
        cfg.mu = Mu::new(self.mu)?;
        cfg.euclidean_mode = self.euclidean_mode;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn budget(&self) -> TrainBudget {
        TrainBudget {
            epochs_per_round: self.epochs,
            minibatch_size: self.minibatch_size,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                ..AdamConfig::default()
            },
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentGrid {
    /// Base seed; run `i` of every cell uses `seed + i`.
    pub seed: u64,
    pub seeds: usize,
    /// When false the `seconds` column is written as zero so that repeated
    /// runs produce identical files.
    #[serde(default = "default_true")]
    pub record_timing: bool,
    pub dataset: DatasetBinding,
    pub cells: Vec<GridCell>,
}

impl ExperimentGrid {
    pub fn from_toml(text: &str) -> Result<Self> {
        let grid: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut text = String::new();
        File::open(path)?.read_to_string(&mut text)?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Config("grid has no cells".into()));
        }
        if self.seeds == 0 {
            return Err(Error::Config("grid needs at least one seed".into()));
        }
        for (i, cell) in self.cells.iter().enumerate() {
            cell.acquisition()
                .and_then(|_| cell.budget().validate())
                .and_then(|_| NoiseSpec::new(cell.noise_rate, 0).map(|_| ()))
                .map_err(|e| Error::Config(format!("cell {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn run_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_add(index as u64)
    }
}

/// splitmix64 finalizer, used to derive independent sub-seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SAMPLE: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_FLIP: u64 = 3;
const STREAM_LOOP: u64 = 4;

/// Objects plus the train and test pools of one run.
#[derive(Debug, Clone)]
pub struct RunData {
    pub objects: ObjectSet,
    pub train: TripletPool,
    pub test: TripletPool,
    /// Seed for the active learning loop of this run.
    pub loop_seed: u64,
}

/// Materializes the dataset for run seed `run_seed` with `noise_rate` of the
/// training orderings flipped. The test pool stays clean.
pub fn prepare_run(binding: &DatasetBinding, grid_seed: u64, run_seed: u64, noise_rate: f64) -> Result<RunData> {
    let (objects, pool, train_count, test_count) = match binding {
        DatasetBinding::Synthetic {
            n,
            d,
            train_count,
            test_count,
        } => {
            let (objects, metric) = data::generate_synthetic(*n, *d, grid_seed)?;
            let pool = data::sample_triplets(
                &objects,
                &metric,
                train_count + test_count,
                derive_seed(run_seed, STREAM_SAMPLE),
                SamplingOptions {
                    reject_duplicates: true,
                },
            )?;
            (objects, pool, *train_count, *test_count)
        }
        DatasetBinding::Files {
            features,
            triplets,
            train_count,
            test_count,
        } => {
            let objects = data::load_features(features)?;
            let pool = data::load_triplets(triplets, &objects)?;
            if pool.orderings().is_none() {
                return Err(Error::Config(format!("{} carries no orderings", triplets.display())));
            }
            (objects, pool, *train_count, *test_count)
        }
    };
    let (train, test) = data::split(&pool, train_count, test_count, derive_seed(run_seed, STREAM_SPLIT))?;
    let train = data::flip_labels(&train, NoiseSpec::new(noise_rate, derive_seed(run_seed, STREAM_FLIP))?)?;
    Ok(RunData {
        objects,
        train,
        test,
        loop_seed: derive_seed(run_seed, STREAM_LOOP),
    })
}

/// Runs one (cell, seed) experiment and returns its records in round order.
pub fn run_cell(
    grid: &ExperimentGrid,
    cell: &GridCell,
    seed_index: usize,
) -> Result<(Vec<TGARecord>, Vec<Vec<usize>>)> {
    run_cell_with_state(grid, cell, seed_index).map(|(records, selected, _)| (records, selected))
}

/// [`run_cell`] that also returns the final loop state.
pub fn run_cell_with_state(
    grid: &ExperimentGrid,
    cell: &GridCell,
    seed_index: usize,
) -> Result<(Vec<TGARecord>, Vec<Vec<usize>>, LoopState)> {
    let run_seed = grid.run_seed(seed_index);
    let run = prepare_run(&grid.dataset, grid.seed, run_seed, cell.noise_rate)?;
    let features = run.objects.features();
    let labels = run.train.orderings().expect("prepared pools are labeled").to_vec();
    let mut oracle = DatasetOracle::from_labels(labels, 0.0, 0)?;
    let setup = LoopSetup {
        layers: cell.layers.clone(),
        initial_pool: cell.initial_pool(),
        budget: cell.budget(),
        seed: run.loop_seed,
    };
    let (curve, state) = run_experiment_with_state(
        features,
        run.train.triplets().to_vec(),
        &setup,
        &cell.acquisition()?,
        cell.rounds,
        &mut oracle,
        |model| compute_tga(model, features, &run.test),
    )?;
    let records = (0..curve.tga.len())
        .map(|round| TGARecord {
            strategy: cell.strategy.to_string(),
            batch_size: cell.batch_size,
            initial_pool: cell.initial_pool(),
            noise_rate: cell.noise_rate,
            seed: run_seed,
            round,
            labeled_count: curve.labeled_counts[round],
            tga: curve.tga[round],
            seconds: if grid.record_timing { curve.seconds[round] } else { 0.0 },
        })
        .collect();
    Ok((records, curve.selected, state))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: usize,
    pub seed: u64,
    pub message: String,
}

/// Ids picked in one round of one run. Round 0 is the initial random pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionAudit {
    pub cell: usize,
    pub seed: u64,
    pub round: usize,
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: usize,
    pub strategy: String,
    pub round: usize,
    pub runs: usize,
    pub mean_tga: f64,
    /// Sample standard deviation; zero for a single run.
    pub std_tga: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    /// Ordered by (cell, seed, round).
    pub records: Vec<TGARecord>,
    pub failures: Vec<CellFailure>,
    pub audit: Vec<SelectionAudit>,
    pub summaries: Vec<CellSummary>,
}

/// Every (cell, seed) pair runs independently, in parallel. A failing run is
/// recorded and the rest of the grid continues.
pub fn run_grid(grid: &ExperimentGrid) -> Result<GridReport> {
    run_grid_with(grid, |_, _, _| Ok(()))
}

/// [`run_grid`] that hands each run's final state to `finish(cell, seed,
/// state)`, e.g. to checkpoint it. An error from `finish` fails that run.
pub fn run_grid_with<F>(grid: &ExperimentGrid, finish: F) -> Result<GridReport>
where
    F: Fn(usize, u64, &LoopState) -> Result<()> + Sync,
{
    grid.validate()?;
    let jobs: Vec<(usize, usize)> = (0..grid.cells.len())
        .flat_map(|c| (0..grid.seeds).map(move |s| (c, s)))
        .collect();
    let outcomes: Vec<_> = jobs
        .par_iter()
        .map(|&(c, s)| {
            let (records, selected, state) = run_cell_with_state(grid, &grid.cells[c], s)?;
            finish(c, grid.run_seed(s), &state)?;
            Ok((records, selected))
        })
        .collect::<Vec<Result<_>>>();

    let mut report = GridReport {
        records: Vec::new(),
        failures: Vec::new(),
        audit: Vec::new(),
        summaries: Vec::new(),
    };
    let mut per_cell: Vec<Vec<Vec<f64>>> = vec![Vec::new(); grid.cells.len()];
    for (&(c, s), outcome) in jobs.iter().zip(outcomes) {
        let seed = grid.run_seed(s);
        match outcome {
            Ok((records, selected)) => {
                per_cell[c].push(records.iter().map(|r| r.tga).collect());
                report.records.extend(records);
                report
                    .audit
                    .extend(selected.into_iter().enumerate().map(|(round, ids)| SelectionAudit {
                        cell: c,
                        seed,
                        round,
                        selected: ids,
                    }));
            }
            Err(e) => report.failures.push(CellFailure {
                cell: c,
                seed,
                message: e.to_string(),
            }),
        }
    }
    for (c, curves) in per_cell.iter().enumerate() {
        let rounds = curves.first().map_or(0, Vec::len);
        for round in 0..rounds {
            let (mean, std) = mean_std(curves.iter().map(|curve| curve[round]));
            report.summaries.push(CellSummary {
                cell: c,
                strategy: grid.cells[c].strategy.to_string(),
                round,
                runs: curves.len(),
                mean_tga: mean,
                std_tga: std,
            });
        }
    }
    Ok(report)
}

/// Mean and sample standard deviation (Welford).
pub fn mean_std(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
    for x in values {
        n += 1;
        let delta = x - mean;
        mean += delta / n as f64;
        m2 += delta * (x - mean);
    }
    match n {
        0 => (f64::NAN, f64::NAN),
        1 => (mean, 0.0),
        _ => (mean, (m2 / (n - 1) as f64).sqrt()),
    }
}

pub const CURVE_HEADER: [&str; 9] = [
    "strategy",
    "batch_size",
    "initial_pool",
    "noise_rate",
    "seed",
    "round",
    "labeled_count",
    "tga",
    "seconds",
];

fn real(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_curves<W: Write>(records: &[TGARecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Io(e.into());
    w.write_record(CURVE_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.strategy.clone(),
            r.batch_size.to_string(),
            r.initial_pool.to_string(),
            real(r.noise_rate),
            r.seed.to_string(),
            r.round.to_string(),
            r.labeled_count.to_string(),
            real(r.tga),
            real(r.seconds),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_curves(records: &[TGARecord], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_curves(records, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn read_curves(path: impl AsRef<Path>) -> Result<Vec<TGARecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let header = r.headers().map_err(|e| Error::Io(e.into()))?.clone();
    if header.iter().ne(CURVE_HEADER) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "unexpected curve header".into(),
        });
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 2,
                message: e.to_string(),
            })
        })
        .collect()
}
