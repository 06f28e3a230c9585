//! JSON grid documents.
//!
//! ```json
//! {
//!   "mode": "joint",
//!   "subsets": [[1, 2], [3, 4, 5], [6, 7, 8, 9], [10, 11, 12, 13], [14, 15, 16]],
//!   "subset_names": ["fine-down", "moderate-down", "coarse", "moderate-up", "fine-up"],
//!   "stages": [[800, 1000], [600, 800], [200, 600], [0, 200]],
//!   "stage_names": ["t1", "t2", "t3", "t4"],
//!   "cells": { "coarse.t1": "a photo in <l> layout", "...": "..." }
//! }
//! ```
//!
//! `subset_names`, `stage_names` and `layer_resolution` are optional; names
//! default to 1-based positions. A cell is either a prompt string or an
//! object `{"text": ..., "embedded": {"tokens": [...], "vectors": ...}}`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::grid::{CellPrompt, ConditioningGrid, GridMode};
use super::partition::{LayerPartition, LayerSubset, Stage, StagePartition, CANONICAL_RESOLUTIONS, NUM_LAYERS};
use super::GridError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum CellSpec {
    Text(String),
    Full(CellPrompt),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridDocument {
    pub mode: GridMode,
    pub subsets: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_names: Option<Vec<String>>,
    pub stages: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_resolution: Option<Vec<u32>>,
    cells: BTreeMap<String, CellSpec>,
}

fn names(given: &Option<Vec<String>>, n: usize, what: &str) -> Result<Vec<String>, GridError> {
    match given {
        Some(v) if v.len() != n => Err(GridError::Config(format!(
            "{what} has {} names for {n} entries",
            v.len()
        ))),
        Some(v) => Ok(v.clone()),
        None => Ok((1..=n).map(|k| k.to_string()).collect()),
    }
}

impl GridDocument {
    pub fn into_grid(self) -> Result<ConditioningGrid, GridError> {
        let subset_names = names(&self.subset_names, self.subsets.len(), "subset_names")?;
        let stage_names = names(&self.stage_names, self.stages.len(), "stage_names")?;
        let resolution: [u32; NUM_LAYERS] = match &self.layer_resolution {
            None => CANONICAL_RESOLUTIONS,
            Some(r) => r.as_slice().try_into().map_err(|_| {
                GridError::Config(format!("layer_resolution needs {NUM_LAYERS} entries, got {}", r.len()))
            })?,
        };
        let layers = LayerPartition::new(
            self.subsets
                .iter()
                .zip(&subset_names)
                .map(|(l, id)| LayerSubset::new(id.clone(), l.iter().copied()))
                .collect(),
            resolution,
        )?;
        let stages = StagePartition::new(
            self.stages
                .iter()
                .zip(&stage_names)
                .map(|([lo, hi], id)| Stage::new(id.clone(), *lo, *hi))
                .collect(),
        )?;
        let mut cells = BTreeMap::new();
        for (key, spec) in self.cells {
            let (s, t) = key
                .split_once('.')
                .ok_or_else(|| GridError::Config(format!("cell key `{key}` is not `subset.stage`")))?;
            let prompt = match spec {
                CellSpec::Text(text) => CellPrompt::text(text),
                CellSpec::Full(p) => p,
            };
            cells.insert((s.to_string(), t.to_string()), prompt);
        }
        ConditioningGrid::build(self.mode, layers, stages, cells)
    }

    pub fn from_grid(grid: &ConditioningGrid) -> Self {
        let cells = grid
            .cells()
            .map(|((s, t), cell)| {
                let spec = match (&cell.text, &cell.embedded) {
                    (Some(text), None) => CellSpec::Text(text.clone()),
                    _ => CellSpec::Full(cell.clone()),
                };
                (format!("{s}.{t}"), spec)
            })
            .collect();
        Self {
            mode: grid.mode(),
            subsets: grid
                .layers()
                .subsets()
                .iter()
                .map(|s| s.layers.iter().copied().collect())
                .collect(),
            subset_names: Some(grid.layers().subsets().iter().map(|s| s.id.clone()).collect()),
            stages: grid.stages().stages().iter().map(|s| [s.lo, s.hi]).collect(),
            stage_names: Some(grid.stages().stages().iter().map(|s| s.id.clone()).collect()),
            layer_resolution: Some(grid.layers().resolutions().to_vec()),
            cells,
        }
    }
}

impl ConditioningGrid {
    pub fn from_json(text: &str) -> Result<Self, GridError> {
        let doc: GridDocument = serde_json::from_str(text).map_err(|e| GridError::Config(e.to_string()))?;
        doc.into_grid()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&GridDocument::from_grid(self)).expect("grid document serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::Conditioning;
    use ndarray::array;

    const CANONICAL: &str = r#"{
        "mode": "joint",
        "subsets": [[1, 2], [3, 4, 5], [6, 7, 8, 9], [10, 11, 12, 13], [14, 15, 16]],
        "subset_names": ["fine-down", "moderate-down", "coarse", "moderate-up", "fine-up"],
        "stages": [[800, 1000], [600, 800], [200, 600], [0, 200]],
        "stage_names": ["t1", "t2", "t3", "t4"],
        "cells": {}
    }"#;

    fn canonical_doc() -> GridDocument {
        let mut doc: GridDocument = serde_json::from_str(CANONICAL).unwrap();
        for s in doc.subset_names.clone().unwrap() {
            for t in doc.stage_names.clone().unwrap() {
                doc.cells.insert(format!("{s}.{t}"), CellSpec::Text(format!("a photo {s} {t}")));
            }
        }
        doc
    }

    #[test]
    fn loads_canonical_document() {
        let grid = canonical_doc().into_grid().unwrap();
        assert_eq!(grid.n_cells(), 20);
        assert_eq!(grid.resolve(7, 900).unwrap().text_or_empty(), "a photo coarse t1");
    }

    #[test]
    fn round_trips_through_json() {
        let grid = canonical_doc().into_grid().unwrap();
        let back = ConditioningGrid::from_json(&grid.to_json()).unwrap();
        assert_eq!(back, grid);
    }

    #[test]
    fn round_trips_embedded_cells() {
        let cond = Conditioning::new(vec!["a".into(), "b".into()], array![[0.1, -2.5e-7], [3.0, 1.0 / 3.0]]);
        let mut doc = canonical_doc();
        doc.cells.insert(
            "coarse.t3".into(),
            CellSpec::Full(CellPrompt {
                text: Some("a photo of <o>".into()),
                embedded: Some(cond),
            }),
        );
        let grid = doc.into_grid().unwrap();
        let back = ConditioningGrid::from_json(&grid.to_json()).unwrap();
        assert_eq!(back, grid);
    }

    #[test]
    fn default_names_are_positions() {
        let text = r#"{"mode": "stage_only", "subsets": [[1,2,3,4,5,6,7,8,9,10,11,12,13,14,15,16]],
            "stages": [[500, 1000], [0, 500]], "cells": {"1.1": "early", "1.2": "late"}}"#;
        let grid = ConditioningGrid::from_json(text).unwrap();
        assert_eq!(grid.resolve(3, 700).unwrap().text_or_empty(), "early");
        assert_eq!(grid.resolve(3, 10).unwrap().text_or_empty(), "late");
    }

    #[test]
    fn reports_gap_from_document() {
        let text = r#"{"mode": "stage_only", "subsets": [[1,2,3,4,5,6,7,8,9,10,11,12,13,14,15,16]],
            "stages": [[0,200],[200,600],[600,800],[850,1000]], "cells": {}}"#;
        let err = ConditioningGrid::from_json(text).unwrap_err();
        assert_eq!(err.to_string(), "timestep gap [800,850)");
    }
}
