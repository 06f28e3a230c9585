use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::partition::{LayerPartition, StagePartition};
use super::GridError;
use crate::conditioning::Conditioning;
use crate::prompt;

/// Routing shape of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    /// Cells vary over both layer subsets and stages.
    Joint,
    /// One prompt per layer subset, constant over time.
    LayerOnly,
    /// One prompt per stage, shared by every layer.
    StageOnly,
    /// A single prompt everywhere.
    Uniform,
}

impl fmt::Display for GridMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            GridMode::Joint => "joint",
            GridMode::LayerOnly => "layer_only",
            GridMode::StageOnly => "stage_only",
            GridMode::Uniform => "uniform",
        };
        f.write_str(s)
    }
}

/// The prompt for one grid cell: text (possibly with placeholders), a
/// precomputed conditioning sequence, or both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPrompt {
    pub text: Option<String>,
    pub embedded: Option<Conditioning>,
}

impl CellPrompt {
    pub fn text(text: impl AsRef<str>) -> Self {
        Self {
            text: Some(prompt::normalize_whitespace(&prompt::normalize_brackets(text.as_ref()))),
            embedded: None,
        }
    }

    pub fn embedded(conditioning: Conditioning) -> Self {
        Self {
            text: None,
            embedded: Some(conditioning),
        }
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.text.is_none() && self.embedded.is_none() {
            return Err(GridError::EmptyCell);
        }
        if let Some(text) = &self.text {
            let mut seen = BTreeSet::new();
            for p in prompt::placeholders(text) {
                if !seen.insert(p.clone()) {
                    return Err(GridError::RepeatedPlaceholder(p));
                }
            }
        }
        Ok(())
    }

    /// Text if present, else the empty string.
    pub fn text_or_empty(&self) -> &str {
        self.text.as_deref().unwrap_or("")
    }
}

impl From<&str> for CellPrompt {
    fn from(s: &str) -> Self {
        CellPrompt::text(s)
    }
}

/// Key of a grid cell: (subset id, stage id).
pub type CellKey = (String, String);

/// The routing table from (layer subset, timestep stage) to a prompt.
///
/// A built grid is immutable; `resolve` is a pure lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningGrid {
    mode: GridMode,
    layers: LayerPartition,
    stages: StagePartition,
    /// Row-major: `cells[subset * stages.len() + stage]`.
    cells: Vec<CellPrompt>,
}

impl ConditioningGrid {
    /// Validates and assembles a grid. Every (subset, stage) key must be
    /// present and no other key may appear.
    pub fn build(
        mode: GridMode,
        layers: LayerPartition,
        stages: StagePartition,
        mut cell_prompts: BTreeMap<CellKey, CellPrompt>,
    ) -> Result<Self, GridError> {
        match mode {
            GridMode::LayerOnly if stages.len() != 1 => {
                return Err(GridError::ModeShape {
                    mode,
                    subsets: layers.len(),
                    stages: stages.len(),
                })
            }
            GridMode::StageOnly if layers.len() != 1 => {
                return Err(GridError::ModeShape {
                    mode,
                    subsets: layers.len(),
                    stages: stages.len(),
                })
            }
            _ => {}
        }
        let mut cells = Vec::with_capacity(layers.len() * stages.len());
        for subset in layers.subsets() {
            for stage in stages.stages() {
                let key = (subset.id.clone(), stage.id.clone());
                let cell = cell_prompts
                    .remove(&key)
                    .ok_or_else(|| GridError::MissingCell(format!("{}.{}", key.0, key.1)))?;
                cell.validate()?;
                cells.push(cell);
            }
        }
        if let Some(((s, t), _)) = cell_prompts.into_iter().next() {
            return Err(GridError::ExtraCell(format!("{s}.{t}")));
        }
        if mode == GridMode::Uniform && cells.windows(2).any(|w| w[0] != w[1]) {
            return Err(GridError::NonUniform);
        }
        Ok(Self {
            mode,
            layers,
            stages,
            cells,
        })
    }

    /// Builds a grid by evaluating `cell` for every (subset id, stage id).
    pub fn from_fn(
        mode: GridMode,
        layers: LayerPartition,
        stages: StagePartition,
        mut cell: impl FnMut(&str, &str) -> CellPrompt,
    ) -> Result<Self, GridError> {
        let mut map = BTreeMap::new();
        for subset in layers.subsets() {
            for stage in stages.stages() {
                map.insert(
                    (subset.id.clone(), stage.id.clone()),
                    cell(&subset.id, &stage.id),
                );
            }
        }
        Self::build(mode, layers, stages, map)
    }

    /// Every layer at every timestep receives `prompt`.
    pub fn uniform(prompt: CellPrompt) -> Result<Self, GridError> {
        Self::from_fn(
            GridMode::Uniform,
            LayerPartition::single(),
            StagePartition::single(),
            |_, _| prompt.clone(),
        )
    }

    /// Same prompt in every cell of the given partitions.
    pub fn uniform_over(
        prompt: CellPrompt,
        layers: LayerPartition,
        stages: StagePartition,
    ) -> Result<Self, GridError> {
        Self::from_fn(GridMode::Uniform, layers, stages, |_, _| prompt.clone())
    }

    pub fn mode(&self) -> GridMode {
        self.mode
    }

    pub fn layers(&self) -> &LayerPartition {
        &self.layers
    }

    pub fn stages(&self) -> &StagePartition {
        &self.stages
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    /// Cell by subset and stage index.
    pub fn cell_at(&self, subset: usize, stage: usize) -> &CellPrompt {
        &self.cells[subset * self.stages.len() + stage]
    }

    /// Cell by ids.
    pub fn cell(&self, subset_id: &str, stage_id: &str) -> Option<&CellPrompt> {
        let s = self.layers.index_of(subset_id)?;
        let t = self.stages.index_of(stage_id)?;
        Some(self.cell_at(s, t))
    }

    /// Iterates `((subset id, stage id), cell)` in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = ((&str, &str), &CellPrompt)> {
        self.layers.subsets().iter().enumerate().flat_map(move |(i, subset)| {
            self.stages.stages().iter().enumerate().map(move |(j, stage)| {
                ((subset.id.as_str(), stage.id.as_str()), self.cell_at(i, j))
            })
        })
    }

    /// Subset and stage indices containing `(layer, t)`.
    pub fn locate_index(&self, layer: usize, t: usize) -> Result<(usize, usize), GridError> {
        Ok((self.layers.locate(layer)?, self.stages.locate(t)?))
    }

    /// Subset and stage ids containing `(layer, t)`.
    pub fn locate(&self, layer: usize, t: usize) -> Result<(&str, &str), GridError> {
        let (s, j) = self.locate_index(layer, t)?;
        Ok((
            self.layers.subsets()[s].id.as_str(),
            self.stages.stages()[j].id.as_str(),
        ))
    }

    /// The prompt layer `layer` (1-based) receives at timestep `t`.
    pub fn resolve(&self, layer: usize, t: usize) -> Result<&CellPrompt, GridError> {
        let (s, j) = self.locate_index(layer, t)?;
        Ok(self.cell_at(s, j))
    }

    /// All distinct placeholder tokens referenced by any cell.
    pub fn placeholders(&self) -> BTreeSet<String> {
        self.cells
            .iter()
            .filter_map(|c| c.text.as_deref())
            .flat_map(prompt::placeholders)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::partition::*;

    fn canonical_prompts() -> BTreeMap<CellKey, CellPrompt> {
        let layers = LayerPartition::canonical();
        let stages = StagePartition::canonical();
        let mut map = BTreeMap::new();
        for s in layers.subsets() {
            for t in stages.stages() {
                map.insert(
                    (s.id.clone(), t.id.clone()),
                    CellPrompt::text(format!("{} at {}", s.id, t.id)),
                );
            }
        }
        map
    }

    #[test]
    fn canonical_grid_has_twenty_cells() {
        let grid = ConditioningGrid::build(
            GridMode::Joint,
            LayerPartition::canonical(),
            StagePartition::canonical(),
            canonical_prompts(),
        )
        .unwrap();
        assert_eq!(grid.n_cells(), 20);
        assert_eq!(grid.locate(7, 900).unwrap(), (COARSE, STAGE_T1));
        assert_eq!(grid.locate(1, 100).unwrap(), (FINE_DOWN, STAGE_T4));
        assert_eq!(grid.locate(12, 700).unwrap(), (MODERATE_UP, STAGE_T2));
        assert_eq!(grid.resolve(8, 500).unwrap().text_or_empty(), "coarse at t3");
    }

    #[test]
    fn rejects_missing_and_extra_cells() {
        let mut prompts = canonical_prompts();
        prompts.remove(&(COARSE.to_string(), STAGE_T2.to_string()));
        let err = ConditioningGrid::build(
            GridMode::Joint,
            LayerPartition::canonical(),
            StagePartition::canonical(),
            prompts,
        )
        .unwrap_err();
        assert_eq!(err, GridError::MissingCell("coarse.t2".into()));

        let mut prompts = canonical_prompts();
        prompts.insert(("bogus".into(), STAGE_T1.into()), "x".into());
        let err = ConditioningGrid::build(
            GridMode::Joint,
            LayerPartition::canonical(),
            StagePartition::canonical(),
            prompts,
        )
        .unwrap_err();
        assert_eq!(err, GridError::ExtraCell("bogus.t1".into()));
    }

    #[test]
    fn uniform_grid_is_constant() {
        let grid = ConditioningGrid::uniform("a red standing cat".into()).unwrap();
        let first = grid.resolve(1, 0).unwrap().clone();
        for layer in 1..=NUM_LAYERS {
            for t in (0..NUM_TIMESTEPS).step_by(37) {
                assert_eq!(grid.resolve(layer, t).unwrap(), &first);
            }
        }
        assert!(matches!(grid.resolve(1, 1000), Err(GridError::TimestepOutOfRange(1000))));
    }

    #[test]
    fn uniform_mode_rejects_distinct_cells() {
        let err = ConditioningGrid::build(
            GridMode::Uniform,
            LayerPartition::canonical(),
            StagePartition::canonical(),
            canonical_prompts(),
        )
        .unwrap_err();
        assert_eq!(err, GridError::NonUniform);
    }

    #[test]
    fn layer_only_requires_one_stage() {
        let err = ConditioningGrid::from_fn(
            GridMode::LayerOnly,
            LayerPartition::per_layer(),
            StagePartition::canonical(),
            |_, _| "x".into(),
        )
        .unwrap_err();
        assert!(matches!(err, GridError::ModeShape { .. }));
    }

    #[test]
    fn layer_only_ignores_timestep() {
        let grid = ConditioningGrid::from_fn(
            GridMode::LayerOnly,
            LayerPartition::per_layer(),
            StagePartition::single(),
            |s, _| CellPrompt::text(format!("prompt {}", &s[1..])),
        )
        .unwrap();
        for t in [0, 250, 999] {
            assert_eq!(grid.resolve(5, t).unwrap().text_or_empty(), "prompt 5");
        }
    }

    #[test]
    fn stage_only_uses_deciles() {
        let grid = ConditioningGrid::from_fn(
            GridMode::StageOnly,
            LayerPartition::single(),
            StagePartition::deciles(),
            |_, t| CellPrompt::text(format!("stage {t}")),
        )
        .unwrap();
        for layer in [1, 9, 16] {
            assert_eq!(grid.resolve(layer, 123).unwrap().text_or_empty(), "stage s9");
            assert_eq!(grid.resolve(layer, 999).unwrap().text_or_empty(), "stage s1");
        }
    }

    #[test]
    fn repeated_placeholder_is_rejected() {
        let err = ConditioningGrid::uniform("a <c> and <c>".into()).unwrap_err();
        assert_eq!(err, GridError::RepeatedPlaceholder("<c>".into()));
    }
}
