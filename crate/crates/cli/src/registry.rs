//! The ten regression benchmarks with reference Tiny-DE results (test RMSE
//! and NLL as mean and standard error over splits) that define the
//! acceptance bands.

use std::path::{Path, PathBuf};

use tinyde_core::data::{default_fold_count, load_csv, CsvOptions};
use tinyde_core::Dataset;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub mean: f64,
    /// `None` where only a single split exists.
    pub stderr: Option<f64>,
}

impl Reference {
    const fn new(mean: f64, stderr: f64) -> Self {
        Reference {
            mean,
            stderr: Some(stderr),
        }
    }

    const fn single(mean: f64) -> Self {
        Reference { mean, stderr: None }
    }

    /// `[mean - 2 se, mean + 2 se]`.
    pub fn band(&self) -> Option<(f64, f64)> {
        self.stderr
            .map(|s| (self.mean - 2.0 * s, self.mean + 2.0 * s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UciDataset {
    /// Identifier used in configs and output files.
    pub id: &'static str,
    pub name: &'static str,
    /// File name under the data directory. Features first, target last.
    pub file: &'static str,
    pub n: usize,
    pub q: usize,
    pub hidden_width: usize,
    pub rmse: Reference,
    pub nll: Reference,
}

impl UciDataset {
    pub fn folds(&self) -> usize {
        default_fold_count(self.id)
    }

    pub fn path(&self, data_dir: &Path) -> PathBuf {
        data_dir.join(self.file)
    }

    /// Loads the CSV and checks its shape against the registry.
    pub fn load(&self, data_dir: &Path) -> CliResult<Dataset> {
        let path = self.path(data_dir);
        if !path.is_file() {
            return Err(CliError::Data(format!(
                "{} not found: expected {} ({} rows, {} feature columns then the target; set --data-dir or TINYDE_DATA_DIR)",
                self.name,
                path.display(),
                self.n,
                self.q
            )));
        }
        let mut ds =
            load_csv(&path, &CsvOptions::default()).map_err(|e| CliError::Data(e.to_string()))?;
        if ds.n_features() != self.q || ds.n_targets() != 1 {
            return Err(CliError::Data(format!(
                "{}: expected {} features and one target, found {} columns",
                path.display(),
                self.q,
                ds.n_features() + ds.n_targets()
            )));
        }
        ds.name = self.id.to_string();
        Ok(ds)
    }
}

pub const UCI: [UciDataset; 10] = [
    UciDataset {
        id: "boston-housing",
        name: "Boston Housing",
        file: "boston-housing.csv",
        n: 506,
        q: 13,
        hidden_width: 50,
        rmse: Reference::new(2.97, 0.46),
        nll: Reference::new(4.92, 1.03),
    },
    UciDataset {
        id: "concrete",
        name: "Concrete Strength",
        file: "concrete.csv",
        n: 1030,
        q: 8,
        hidden_width: 50,
        rmse: Reference::new(5.51, 0.41),
        nll: Reference::new(5.02, 0.62),
    },
    UciDataset {
        id: "energy",
        name: "Energy Efficiency",
        file: "energy.csv",
        n: 768,
        q: 8,
        hidden_width: 50,
        rmse: Reference::new(1.53, 0.38),
        nll: Reference::new(1.41, 0.46),
    },
    UciDataset {
        id: "kin8nm",
        name: "Kin8nm",
        file: "kin8nm.csv",
        n: 8192,
        q: 8,
        hidden_width: 50,
        rmse: Reference::new(0.07, 0.00),
        nll: Reference::new(-0.95, 0.01),
    },
    UciDataset {
        id: "naval",
        name: "Naval Propulsion",
        file: "naval.csv",
        n: 11934,
        q: 16,
        hidden_width: 50,
        rmse: Reference::new(0.00, 0.00),
        nll: Reference::new(-3.81, 0.08),
    },
    UciDataset {
        id: "power-plant",
        name: "Power Plant",
        file: "power-plant.csv",
        n: 9568,
        q: 4,
        hidden_width: 50,
        rmse: Reference::new(4.48, 0.18),
        nll: Reference::new(2.95, 0.05),
    },
    UciDataset {
        id: "protein",
        name: "Protein Structure",
        file: "protein.csv",
        n: 45730,
        q: 9,
        hidden_width: 100,
        rmse: Reference::new(3.92, 0.03),
        nll: Reference::new(5.05, 0.52),
    },
    UciDataset {
        id: "wine-quality-red",
        name: "Wine Quality Red",
        file: "wine-quality-red.csv",
        n: 1599,
        q: 11,
        hidden_width: 50,
        rmse: Reference::new(0.64, 0.05),
        nll: Reference::new(1.28, 0.33),
    },
    UciDataset {
        id: "yacht",
        name: "Yacht Hydrodynamics",
        file: "yacht.csv",
        n: 308,
        q: 6,
        hidden_width: 50,
        rmse: Reference::new(3.22, 1.59),
        nll: Reference::new(1.37, 0.43),
    },
    UciDataset {
        id: "year-prediction-msd",
        name: "Year Prediction MSD",
        file: "year-prediction-msd.csv",
        n: 515_345,
        q: 90,
        hidden_width: 100,
        rmse: Reference::single(8.53),
        nll: Reference::single(7.63),
    },
];

pub fn lookup(id: &str) -> CliResult<&'static UciDataset> {
    UCI.iter().find(|d| d.id == id).ok_or_else(|| {
        let known: Vec<&str> = UCI.iter().map(|d| d.id).collect();
        CliError::Config(format!(
            "unknown dataset `{id}` (known: {})",
            known.join(", ")
        ))
    })
}
