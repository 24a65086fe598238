//! Ablation grids: component toggles, sparsity-rate sets, backbone swap and
//! loss-weight sweeps, each cell scored under LOSO.

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data_model::Dataset;
use crate::error::{MednError, Result};
use crate::evaluation::{run_loso, LosoOptions};
use crate::model::ModelConfig;
use crate::motion_branch::BackboneKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationGrid {
    /// Plain attention, single-scale sparse attention, no fusion module,
    /// no orthogonality loss, full model.
    Components,
    Sparsity,
    Backbone,
    LambdaAu,
    LambdaOrth,
}

impl FromStr for AblationGrid {
    type Err = MednError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "components" | "tableiv" | "table_iv" => Ok(Self::Components),
            "sparsity" | "rates" => Ok(Self::Sparsity),
            "backbone" => Ok(Self::Backbone),
            "lambda_au" => Ok(Self::LambdaAu),
            "lambda_orth" => Ok(Self::LambdaOrth),
            _ => Err(MednError::InvalidConfig(format!(
                "unknown ablation grid {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub name: String,
    pub config: ModelConfig,
}

/// `0.0, 0.2, ..., 2.0`.
pub fn lambda_values() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 5.0).collect()
}

pub fn grid_cells(grid: AblationGrid, base: &ModelConfig) -> Vec<AblationCell> {
    let with = |name: String, f: &dyn Fn(&mut ModelConfig)| {
        let mut config = base.clone();
        f(&mut config);
        AblationCell { name, config }
    };
    match grid {
        AblationGrid::Components => {
            let rate = base
                .sevit
                .rates
                .iter()
                .copied()
                .filter(|&s| s > 1)
                .max()
                .unwrap_or(1);
            vec![
                with("plain_attention".into(), &|c| c.sevit.rates = vec![1]),
                with(format!("single_scale_{rate}"), &|c| {
                    c.sevit.rates = vec![rate]
                }),
                with("no_cofm".into(), &|c| c.components.cofm = false),
                with("no_orth".into(), &|c| c.loss.lambda_orth = 0.0),
                with("full".into(), &|_| {}),
            ]
        }
        AblationGrid::Sparsity => [
            vec![1],
            vec![2],
            vec![4],
            vec![8],
            vec![1, 2, 4],
            vec![1, 2, 4, 8],
            vec![1, 1, 2, 2, 4, 4, 8, 8],
        ]
        .into_iter()
        .map(|rates| {
            let name = format!(
                "rates_{}",
                rates
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join("_")
            );
            with(name, &|c| c.sevit.rates = rates.clone())
        })
        .collect(),
        AblationGrid::Backbone => vec![
            with("small_conv3d".into(), &|c| {
                c.motion.kind = BackboneKind::SmallConv3d
            }),
            with("small_vit".into(), &|c| {
                c.motion.kind = BackboneKind::SmallVit
            }),
        ],
        AblationGrid::LambdaAu => lambda_values()
            .into_iter()
            .map(|l| with(format!("lambda_au_{l:.1}"), &|c| c.loss.lambda_au = l))
            .collect(),
        AblationGrid::LambdaOrth => lambda_values()
            .into_iter()
            .map(|l| with(format!("lambda_orth_{l:.1}"), &|c| c.loss.lambda_orth = l))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub grid: AblationGrid,
    pub cell: String,
    pub rates: String,
    pub backbone: BackboneKind,
    pub cofm: bool,
    pub lambda_au: f64,
    pub lambda_orth: f64,
    pub uf1: Option<f64>,
    pub uar: Option<f64>,
    pub hard_uf1: Option<f64>,
    pub error: Option<String>,
}

/// Scores every cell; a failing cell is recorded and the grid continues.
pub fn ablate(
    dataset: &Dataset,
    base: &ModelConfig,
    grid: AblationGrid,
    seed: u64,
    opts: &LosoOptions,
) -> Vec<AblationRow> {
    grid_cells(grid, base)
        .into_iter()
        .enumerate()
        .map(|(i, cell)| {
            let cell_opts = LosoOptions {
                cell: i as u64 + 1,
                checkpoint_dir: opts.checkpoint_dir.as_ref().map(|d| d.join(&cell.name)),
                ..opts.clone()
            };
            let result = cell
                .config
                .validate(&dataset.manifest.dims)
                .and_then(|_| run_loso(dataset, &cell.config, seed, &cell_opts));
            let c = &cell.config;
            let mut row = AblationRow {
                grid,
                cell: cell.name.clone(),
                rates: c
                    .sevit
                    .rates
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(" "),
                backbone: c.motion.kind,
                cofm: c.components.cofm,
                lambda_au: c.loss.lambda_au,
                lambda_orth: c.loss.lambda_orth,
                uf1: None,
                uar: None,
                hard_uf1: None,
                error: None,
            };
            match result {
                Ok(r) => {
                    row.uf1 = Some(r.uf1);
                    row.uar = Some(r.uar);
                    row.hard_uf1 = Some(r.hard.uf1);
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect()
}

pub fn write_ablation_csv<W: Write>(w: W, rows: &[AblationRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_cardinalities() {
        let base = ModelConfig::default();
        assert_eq!(grid_cells(AblationGrid::Components, &base).len(), 5);
        assert_eq!(grid_cells(AblationGrid::Sparsity, &base).len(), 7);
        assert_eq!(grid_cells(AblationGrid::Backbone, &base).len(), 2);
        let sweep = grid_cells(AblationGrid::LambdaOrth, &base);
        assert_eq!(sweep.len(), 11);
        let lambdas: Vec<f64> = sweep.iter().map(|c| c.config.loss.lambda_orth).collect();
        assert_eq!(lambdas[0], 0.0);
        assert_eq!(lambdas[10], 2.0);
        assert_eq!(lambdas[3], 0.6);
        assert_eq!(sweep[5].name, "lambda_orth_1.0");
    }

    #[test]
    fn grid_names_parse() {
        assert_eq!(
            "tableIV".parse::<AblationGrid>().unwrap(),
            AblationGrid::Components
        );
        assert_eq!(
            "lambda-orth".parse::<AblationGrid>().unwrap(),
            AblationGrid::LambdaOrth
        );
        assert!("nope".parse::<AblationGrid>().is_err());
    }
}
