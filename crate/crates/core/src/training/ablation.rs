//! Grid runner over encoder variant × seed distribution × surface count ×
//! master seed. Every cell trains from scratch with the same config and
//! data; a failing cell is recorded and the grid continues.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{evaluate, TrainConfig, Trainer};
use crate::datagen::Dataset;
use crate::decoder::SeedDistribution;
use crate::encoder::{EncoderSpec, EncoderVariant};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{Model, ModelSpec, Profile};

pub const ABLATION_HEADER: &str = "encoder,seed_distribution,surfaces,seed,cd,emd,status";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub encoder: EncoderVariant,
    pub seed_distribution: SeedDistribution,
    pub surfaces: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub encoders: Vec<EncoderVariant>,
    pub seed_distributions: Vec<SeedDistribution>,
    pub surfaces: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl AblationGrid {
    pub fn validate(&self) -> Result<()> {
        if self.encoders.is_empty() || self.seed_distributions.is_empty() || self.surfaces.is_empty() || self.seeds.is_empty()
        {
            return Err(Error::Config("every ablation axis needs at least one value".into()));
        }
        for d in &self.seed_distributions {
            d.validate()?;
        }
        Ok(())
    }

    /// Cells in row order: encoder, then distribution, then K, then seed.
    pub fn cells(&self) -> Vec<AblationCell> {
        let mut out = Vec::new();
        for &encoder in &self.encoders {
            for &seed_distribution in &self.seed_distributions {
                for &surfaces in &self.surfaces {
                    for &seed in &self.seeds {
                        out.push(AblationCell {
                            encoder,
                            seed_distribution,
                            surfaces,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: AblationCell,
    /// Validation report, or the error message of a failed cell.
    pub outcome: std::result::Result<MetricReport, String>,
}

impl AblationRow {
    pub fn csv_line(&self) -> String {
        let c = &self.cell;
        let (cd, emd, status) = match &self.outcome {
            Ok(r) => (r.cd.to_string(), r.emd.to_string(), "ok".to_string()),
            Err(e) => (String::new(), String::new(), format!("failed: {}", e.replace([',', '\n'], ";"))),
        };
        format!(
            "{},{},{},{},{cd},{emd},{status}",
            c.encoder,
            c.seed_distribution.label(),
            c.surfaces,
            c.seed
        )
    }
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut text = String::from(ABLATION_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Applies a cell to the base spec: the encoder takes the profile's
/// defaults for the cell's variant, and the total output size is kept, so K
/// must divide it.
pub fn cell_spec(profile: Profile, base: &ModelSpec, cell: &AblationCell) -> Result<ModelSpec> {
    let mut spec = base.clone();
    let total = spec.decoder.out_points();
    if cell.surfaces == 0 || total % cell.surfaces != 0 {
        return Err(Error::Config(format!(
            "surface count {} does not divide the {total} output points",
            cell.surfaces
        )));
    }
    spec.encoder = EncoderSpec {
        dropout_rate: base.encoder.dropout_rate,
        ..profile.encoder(cell.encoder)
    };
    spec.decoder.surfaces = cell.surfaces;
    spec.decoder.points_per_surface = total / cell.surfaces;
    spec.decoder.seed_distribution = cell.seed_distribution;
    spec.validate()?;
    Ok(spec)
}

/// Trains and evaluates one cell.
pub fn run_cell(profile: Profile, base: &ModelSpec, config: &TrainConfig, data: &Dataset, cell: &AblationCell) -> Result<MetricReport> {
    let spec = cell_spec(profile, base, cell)?;
    let config = TrainConfig {
        seed: cell.seed,
        eval_every: 0,
        ..config.clone()
    };
    let model = Model::init(spec, config.init_sigma, cell.seed)?;
    let mut trainer = Trainer::new(model, config)?;
    while trainer.epoch < trainer.config.epochs {
        trainer.train_epoch(&data.train)?;
    }
    evaluate(&trainer.model, &data.val, trainer.config.eval_seed)
}

pub fn run_ablation(
    profile: Profile,
    base: &ModelSpec, config: &TrainConfig, data: &Dataset, grid: &AblationGrid) -> Result<Vec<AblationRow>> {
    grid.validate()?;
    Ok(grid
        .cells()
        .into_iter()
        .map(|cell| {
            let outcome = run_cell(profile, base, config, data, &cell).map_err(|e| e.to_string());
            match &outcome {
                Ok(r) => log::info!("ablation {cell:?}: val emd {:.6} cd {:.6}", r.emd, r.cd),
                Err(e) => log::warn!("ablation {cell:?} failed: {e}"),
            }
            AblationRow { cell, outcome }
        })
        .collect())
}
