//! Experiment plans: a list of (method, condition, shots, seed) cells
//! executed against one shared checkpoint, with dataset and few-shot reuse
//! across cells so the method is the only variable.

use std::collections::HashMap;
use std::path::PathBuf;

use ssprompt_core::config::RunConfig;
use ssprompt_core::data::{few_shot_sample, Condition, Dataset, Vocab};
use ssprompt_core::eval::evaluate;
use ssprompt_core::model::FrozenModel;
use ssprompt_core::prompts::{train, Method, TrainConfig, WeightsMode};

use crate::CliError;

#[derive(Debug, Clone)]
pub struct Cell {
    /// Row label in tables, e.g. `spa-embed+weights`.
    pub label: String,
    pub method: Method,
    pub weights: WeightsMode,
    pub condition: Condition,
    pub shots: usize,
    pub seed: u64,
}

#[derive(Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub outcome: ssprompt_core::prompts::TrainOutcome,
}

#[derive(Debug)]
pub struct ExperimentPlan {
    pub cells: Vec<Cell>,
    pub out_dir: PathBuf,
    pub plots: bool,
}

impl ExperimentPlan {
    /// Check every referenced input before any cell runs.
    pub fn validate(&self, model: &FrozenModel, cfg: &RunConfig) -> Result<(), CliError> {
        cfg.validate()?;
        if !model.is_frozen() {
            return Err(CliError::Message("model checkpoint is not frozen".into()));
        }
        for cell in &self.cells {
            if cell.method != Method::Default && cell.shots == 0 {
                return Err(CliError::Message(format!(
                    "cell `{}` trains with zero shots",
                    cell.label
                )));
            }
        }
        std::fs::create_dir_all(&self.out_dir)?;
        Ok(())
    }

    /// Run all cells in order. Datasets and few-shot selections are cached by
    /// (condition, shots, seed) so identical references share bytes.
    pub fn run(
        &self,
        model: &FrozenModel,
        cfg: &RunConfig,
        vocab: &Vocab,
        threads: usize,
    ) -> Result<Vec<CellResult>, CliError> {
        let mut datasets: HashMap<String, (Dataset, Dataset)> = HashMap::new();
        let mut fewshots: HashMap<(String, usize, u64), Dataset> = HashMap::new();
        let mut results = Vec::with_capacity(self.cells.len());

        for cell in &self.cells {
            let key = cell.condition.label();
            if !datasets.contains_key(&key) {
                datasets.insert(key.clone(), cfg.build_downstream(cell.condition)?);
            }
            let (pool, eval_split) = &datasets[&key];

            let fs_key = (key.clone(), cell.shots, cell.seed);
            if !fewshots.contains_key(&fs_key) {
                let shots = if cell.method == Method::Default {
                    // defaults never look at the data; reuse the pool
                    pool.clone()
                } else {
                    few_shot_sample(pool, cell.shots, cell.seed)?
                };
                fewshots.insert(fs_key.clone(), shots);
            }
            let shots = &fewshots[&fs_key];

            let train_cfg = TrainConfig {
                weights_mode: cell.weights,
                ..cfg.train.clone()
            };
            let outcome = train(cell.method, model, shots, vocab, &train_cfg, cell.seed)?;
            let eval = evaluate(model, &outcome.z_spatial, &outcome.z_text, eval_split, threads)?;
            results.push(CellResult {
                cell: cell.clone(),
                miou: eval.miou,
                per_class: eval.per_class_iou,
                outcome,
            });
        }
        Ok(results)
    }
}

/// The six ablation rows over a set of seeds.
pub fn ablation_cells(condition: Condition, shots: usize, seeds: &[u64]) -> Vec<Cell> {
    let rows: [(&str, Method, WeightsMode); 6] = [
        ("default", Method::Default, WeightsMode::Learnable),
        ("spa-embed", Method::SpaPrompt, WeightsMode::FixedHalf),
        (
            "spa-embed+weights",
            Method::SpaPrompt,
            WeightsMode::Learnable,
        ),
        ("sem-embed", Method::SemPrompt, WeightsMode::FixedHalf),
        (
            "sem-embed+weights",
            Method::SemPrompt,
            WeightsMode::Learnable,
        ),
        ("ssprompt", Method::SsPrompt, WeightsMode::Learnable),
    ];
    let mut cells = Vec::new();
    for (label, method, weights) in rows {
        for &seed in seeds {
            cells.push(Cell {
                label: label.to_string(),
                method,
                weights,
                condition,
                shots,
                seed,
            });
        }
    }
    cells
}

/// Coordinate-space comparison rows.
pub fn vspl_cells(condition: Condition, shots: usize, seeds: &[u64]) -> Vec<Cell> {
    let rows: [(&str, Method); 4] = [
        ("default", Method::Default),
        ("vspl", Method::Vspl),
        ("spaprompt", Method::SpaPrompt),
        ("ssprompt", Method::SsPrompt),
    ];
    let mut cells = Vec::new();
    for (label, method) in rows {
        for &seed in seeds {
            cells.push(Cell {
                label: label.to_string(),
                method,
                weights: WeightsMode::Learnable,
                condition,
                shots,
                seed,
            });
        }
    }
    cells
}

/// Shot sweep rows: the joint method over k plus the zero-shot reference.
pub fn shots_cells(condition: Condition, ks: &[usize], seeds: &[u64]) -> Vec<Cell> {
    let mut cells = vec![Cell {
        label: "default".to_string(),
        method: Method::Default,
        weights: WeightsMode::Learnable,
        condition,
        shots: 0,
        seed: seeds[0],
    }];
    for &k in ks {
        for &seed in seeds {
            cells.push(Cell {
                label: format!("ssprompt@{k}"),
                method: Method::SsPrompt,
                weights: WeightsMode::Learnable,
                condition,
                shots: k,
                seed,
            });
        }
    }
    cells
}

/// Condition sweep rows for the adverse-condition table.
pub fn condition_cells(conditions: &[Condition], shots: usize, seeds: &[u64]) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &condition in conditions {
        cells.push(Cell {
            label: format!("default/{}", condition.label()),
            method: Method::Default,
            weights: WeightsMode::Learnable,
            condition,
            shots: 0,
            seed: seeds[0],
        });
        for (label, method) in [("coop", Method::Coop), ("ssprompt", Method::SsPrompt)] {
            for &seed in seeds {
                cells.push(Cell {
                    label: format!("{label}/{}", condition.label()),
                    method,
                    weights: WeightsMode::Learnable,
                    condition,
                    shots,
                    seed,
                });
            }
        }
    }
    cells
}
