//! Command-line overrides of experiment grid fields.
//!
//! The grid file is parsed into a TOML table, the flags are written into it
//! (cell flags into every cell), and only then is it deserialized, so every
//! field has a flag of the same name and validation happens in one place.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use decorr_core::ExperimentGrid;
use toml::{Table, Value};

#[derive(Debug, Default, Args)]
pub struct GridOverrides {
    /// Base seed; controls all randomness of the grid.
    #[arg(long, help_heading = "Grid")]
    pub seed: Option<u64>,
    /// Number of runs per cell.
    #[arg(long, help_heading = "Grid")]
    pub seeds: Option<usize>,
    /// Record wall-clock seconds per round (false writes zeros).
    #[arg(long, help_heading = "Grid")]
    pub record_timing: Option<bool>,

    /// Dataset kind: "synthetic" or "files".
    #[arg(long, help_heading = "Dataset")]
    pub kind: Option<String>,
    #[arg(long, help_heading = "Dataset")]
    pub n: Option<usize>,
    #[arg(long, help_heading = "Dataset")]
    pub d: Option<usize>,
    #[arg(long, help_heading = "Dataset")]
    pub train_count: Option<usize>,
    #[arg(long, help_heading = "Dataset")]
    pub test_count: Option<usize>,
    #[arg(long, help_heading = "Dataset")]
    pub features: Option<PathBuf>,
    #[arg(long, help_heading = "Dataset")]
    pub triplets: Option<PathBuf>,

    /// Strategy name, e.g. Random, US, US-Gradient, FPS-Centroid, BADGE.
    #[arg(long, help_heading = "Cells (applied to every cell)")]
    pub strategy: Option<String>,
    #[arg(long, help_heading = "Cells (applied to every cell)")]
    pub batch_size: Option<usize>,
    #[arg(long, help_heading = "Cells (applied to every cell)")]
    pub initial_pool: Option<usize>,
    #[arg(long, help_heading = "Cells (applied to every cell)")]
    pub oversample_size: Option<usize>,
    #[arg(long, help_heading = "Cells (applied to every cell)")]
    pub noise_rate: Option<f64>,
    #[arg(long, help_heading = "Cells (applied to every cell)")]
    pub mu: Option<f64>,
    #[arg(long, help_heading = "Cells (applied to every cell)")]
    pub rounds: Option<usize>,
    #[arg(long, help_heading = "Cells (applied to every cell)")]
    pub epochs: Option<usize>,
    /// Minibatch size; 0 trains full batch.
    #[arg(long, help_heading = "Cells (applied to every cell)")]
    pub minibatch_size: Option<usize>,
    #[arg(long, help_heading = "Cells (applied to every cell)")]
    pub learning_rate: Option<f64>,
    /// Output width of each layer, e.g. 10,20,10.
    #[arg(long, value_delimiter = ',', help_heading = "Cells (applied to every cell)")]
    pub layers: Option<Vec<usize>>,
    /// literal, symmetrized or order_matched.
    #[arg(long, help_heading = "Cells (applied to every cell)")]
    pub euclidean_mode: Option<String>,
}

fn int(v: impl TryInto<i64>, name: &str) -> Result<Value> {
    match v.try_into() {
        Ok(i) => Ok(Value::Integer(i)),
        Err(_) => bail!("--{name} is too large"),
    }
}

fn path_value(p: &Path) -> Result<Value> {
    p.to_str()
        .map(|s| Value::String(s.to_string()))
        .with_context(|| format!("path {} is not valid UTF-8", p.display()))
}

fn table_entry<'a>(t: &'a mut Table, key: &str) -> Result<&'a mut Table> {
    t.entry(key)
        .or_insert_with(|| Value::Table(Table::new()))
        .as_table_mut()
        .with_context(|| format!("`{key}` must be a table"))
}

impl GridOverrides {
    fn cell_values(&self) -> Result<Vec<(&'static str, Option<Value>)>> {
        let mut v: Vec<(&'static str, Option<Value>)> = Vec::new();
        if let Some(s) = &self.strategy {
            v.push(("strategy", Some(Value::String(s.clone()))));
        }
        for (name, value) in [
            ("batch_size", self.batch_size),
            ("initial_pool", self.initial_pool),
            ("oversample_size", self.oversample_size),
            ("rounds", self.rounds),
            ("epochs", self.epochs),
        ] {
            if let Some(x) = value {
                v.push((name, Some(int(x, name)?)));
            }
        }
        if let Some(m) = self.minibatch_size {
            v.push((
                "minibatch_size",
                if m == 0 { None } else { Some(int(m, "minibatch_size")?) },
            ));
        }
        for (name, value) in [
            ("noise_rate", self.noise_rate),
            ("mu", self.mu),
            ("learning_rate", self.learning_rate),
        ] {
            if let Some(x) = value {
                v.push((name, Some(Value::Float(x))));
            }
        }
        if let Some(layers) = &self.layers {
            let arr = layers.iter().map(|&w| int(w, "layers")).collect::<Result<_>>()?;
            v.push(("layers", Some(Value::Array(arr))));
        }
        if let Some(m) = &self.euclidean_mode {
            v.push(("euclidean_mode", Some(Value::String(m.clone()))));
        }
        Ok(v)
    }

    /// Writes the flags into a parsed grid table.
    pub fn apply(&self, grid: &mut Table) -> Result<()> {
        if let Some(s) = self.seed {
            grid.insert("seed".into(), int(s, "seed")?);
        }
        if let Some(s) = self.seeds {
            grid.insert("seeds".into(), int(s, "seeds")?);
        }
        if let Some(r) = self.record_timing {
            grid.insert("record_timing".into(), Value::Boolean(r));
        }

        let dataset = table_entry(grid, "dataset")?;
        if let Some(k) = &self.kind {
            dataset.insert("kind".into(), Value::String(k.clone()));
        }
        for (name, value) in [
            ("n", self.n),
            ("d", self.d),
            ("train_count", self.train_count),
            ("test_count", self.test_count),
        ] {
            if let Some(x) = value {
                dataset.insert(name.into(), int(x, name)?);
            }
        }
        for (name, value) in [("features", &self.features), ("triplets", &self.triplets)] {
            if let Some(p) = value {
                dataset.insert(name.into(), path_value(p)?);
            }
        }

        let cell_values = self.cell_values()?;
        let cells = grid
            .entry("cells")
            .or_insert_with(|| Value::Array(Vec::new()))
            .as_array_mut()
            .context("`cells` must be an array of tables")?;
        if cells.is_empty() && !cell_values.is_empty() {
            cells.push(Value::Table(Table::new()));
        }
        for cell in cells.iter_mut() {
            let cell = cell.as_table_mut().context("every entry of `cells` must be a table")?;
            for (name, value) in &cell_values {
                match value {
                    Some(v) => cell.insert((*name).into(), v.clone()),
                    None => cell.remove(*name),
                };
            }
        }
        Ok(())
    }
}

/// Resolves relative dataset paths in a grid file against its directory.
fn resolve_paths(grid: &mut Table, base: &Path) -> Result<()> {
    let Some(Value::Table(dataset)) = grid.get_mut("dataset") else {
        return Ok(());
    };
    for key in ["features", "triplets"] {
        if let Some(Value::String(p)) = dataset.get(key) {
            let p = Path::new(p);
            if p.is_relative() {
                let joined = base.join(p);
                dataset.insert(key.into(), path_value(&joined)?);
            }
        }
    }
    Ok(())
}

/// Reads the grid file (if any), applies the flags, and validates.
pub fn load_grid(config: Option<&Path>, overrides: &GridOverrides) -> Result<ExperimentGrid> {
    let mut table = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut table: Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
            resolve_paths(&mut table, path.parent().unwrap_or(Path::new(".")))?;
            table
        }
        None => Table::new(),
    };
    overrides.apply(&mut table)?;
    let grid: ExperimentGrid = Value::Table(table).try_into().context("invalid experiment grid")?;
    grid.validate()?;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GRID: &str = r#"
seed = 3
seeds = 2

[dataset]
kind = "synthetic"
n = 20
d = 4
train_count = 100
test_count = 50

[[cells]]
strategy = "Random"
batch_size = 5
rounds = 2
epochs = 3
minibatch_size = 8

[[cells]]
strategy = "US-Gradient"
batch_size = 5
rounds = 2
epochs = 3
"#;

    fn parsed(overrides: &GridOverrides) -> ExperimentGrid {
        let mut table: Table = GRID.parse().unwrap();
        overrides.apply(&mut table).unwrap();
        Value::Table(table).try_into().unwrap()
    }

    #[test]
    fn no_flags_leave_the_file_unchanged() {
        let plain = ExperimentGrid::from_toml(GRID).unwrap();
        assert_eq!(parsed(&GridOverrides::default()), plain);
    }

    #[test]
    fn flags_override_grid_dataset_and_every_cell() {
        let o = GridOverrides {
            seed: Some(11),
            n: Some(30),
            batch_size: Some(7),
            minibatch_size: Some(0),
            layers: Some(vec![4, 2]),
            learning_rate: Some(0.01),
            ..Default::default()
        };
        let g = parsed(&o);
        assert_eq!(g.seed, 11);
        assert_eq!(g.seeds, 2);
        assert!(matches!(
            g.dataset,
            decorr_core::eval::DatasetBinding::Synthetic { n: 30, .. }
        ));
        for cell in &g.cells {
            assert_eq!(cell.batch_size, 7);
            assert_eq!(cell.minibatch_size, None);
            assert_eq!(cell.layers, vec![4, 2]);
            assert_eq!(cell.learning_rate, 0.01);
        }
        assert_eq!(g.cells[0].strategy.to_string(), "Random");
    }

    #[test]
    fn a_grid_can_come_from_flags_alone() {
        let o = GridOverrides {
            seed: Some(1),
            seeds: Some(1),
            kind: Some("synthetic".into()),
            n: Some(10),
            d: Some(3),
            train_count: Some(50),
            test_count: Some(20),
            strategy: Some("US".into()),
            batch_size: Some(5),
            rounds: Some(1),
            epochs: Some(2),
            ..Default::default()
        };
        let g = load_grid(None, &o).unwrap();
        assert_eq!(g.cells.len(), 1);
        assert_eq!(g.cells[0].strategy.to_string(), "US");
    }

    #[test]
    fn bundled_benchmark_grid_parses() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../grids/synthetic-benchmark.toml");
        let g = load_grid(Some(&path), &GridOverrides::default()).unwrap();
        assert_eq!(g.cells.len(), 4);
        assert!(g
            .cells
            .iter()
            .all(|c| c.batch_size == 200 && c.acquisition().unwrap().oversample_size == 400));
    }

    #[test]
    fn relative_dataset_paths_follow_the_config_file() {
        let mut t: Table = "[dataset]\nkind = \"files\"\nfeatures = \"f.csv\"\ntriplets = \"/abs/t.csv\""
            .parse()
            .unwrap();
        resolve_paths(&mut t, Path::new("/data/exp")).unwrap();
        assert_eq!(t["dataset"]["features"].as_str(), Some("/data/exp/f.csv"));
        assert_eq!(t["dataset"]["triplets"].as_str(), Some("/abs/t.csv"));
    }
}
