use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::grid::{CellPrompt, ConditioningGrid, GridMode};
use super::partition::{LayerPartition, StagePartition};
use super::GridError;
use crate::prompt;

/// Where a placeholder token is active: a set of layer subsets crossed with
/// a set of stages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Activity {
    pub subsets: BTreeSet<String>,
    pub stages: BTreeSet<String>,
}

impl Activity {
    pub fn new<'a>(
        subsets: impl IntoIterator<Item = &'a str>,
        stages: impl IntoIterator<Item = &'a str>,
    ) -> Self {
        Self {
            subsets: subsets.into_iter().map(str::to_string).collect(),
            stages: stages.into_iter().map(str::to_string).collect(),
        }
    }
}

/// Activity schedule for a set of placeholder tokens over a pair of
/// partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSchedule {
    layers: LayerPartition,
    stages: StagePartition,
    tokens: BTreeMap<String, Activity>,
}

impl TokenSchedule {
    pub fn new(
        layers: LayerPartition,
        stages: StagePartition,
        tokens: BTreeMap<String, Activity>,
    ) -> Result<Self, GridError> {
        for (token, activity) in &tokens {
            if !prompt::is_placeholder(token) {
                return Err(GridError::NotAPlaceholder(token.clone()));
            }
            for s in &activity.subsets {
                if layers.index_of(s).is_none() {
                    return Err(GridError::UnknownSubset(s.clone()));
                }
            }
            for s in &activity.stages {
                if stages.index_of(s).is_none() {
                    return Err(GridError::UnknownStage(s.clone()));
                }
            }
        }
        Ok(Self {
            layers,
            stages,
            tokens,
        })
    }

    pub fn layers(&self) -> &LayerPartition {
        &self.layers
    }

    pub fn stages(&self) -> &StagePartition {
        &self.stages
    }

    pub fn tokens(&self) -> &BTreeMap<String, Activity> {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.tokens.contains_key(token)
    }

    /// Grid mode implied by the partition shapes.
    pub fn mode(&self) -> GridMode {
        match (self.layers.len(), self.stages.len()) {
            (1, 1) => GridMode::Uniform,
            (_, 1) => GridMode::LayerOnly,
            (1, _) => GridMode::StageOnly,
            _ => GridMode::Joint,
        }
    }

    /// Whether `token` is active in the cell `(subset_id, stage_id)`.
    pub fn is_active_in(&self, token: &str, subset_id: &str, stage_id: &str) -> bool {
        self.tokens
            .get(token)
            .is_some_and(|a| a.subsets.contains(subset_id) && a.stages.contains(stage_id))
    }

    /// `(token, subset_id)` pairs active at timestep `t`.
    pub fn active_at(&self, t: usize) -> Result<BTreeSet<(String, String)>, GridError> {
        let stage = &self.stages.stages()[self.stages.locate(t)?].id;
        Ok(self
            .tokens
            .iter()
            .filter(|(_, a)| a.stages.contains(stage))
            .flat_map(|(tok, a)| a.subsets.iter().map(move |s| (tok.clone(), s.clone())))
            .collect())
    }

    /// Tokens active at timestep `t` in any subset.
    pub fn active_tokens_at(&self, t: usize) -> Result<BTreeSet<String>, GridError> {
        Ok(self.active_at(t)?.into_iter().map(|(tok, _)| tok).collect())
    }
}

/// How a user prompt is spread over the grid at generation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpandPolicy {
    /// Each cell keeps only the placeholders active in it.
    ActiveCellsOnly,
    /// Every cell carries the full prompt.
    Everywhere,
}

/// Spreads `user_prompt` over the schedule's partitions.
pub fn expand_prompt(
    user_prompt: &str,
    schedule: &TokenSchedule,
    policy: ExpandPolicy,
) -> Result<ConditioningGrid, GridError> {
    let text = prompt::normalize_whitespace(&prompt::normalize_brackets(user_prompt));
    for p in prompt::placeholders(&text) {
        if !schedule.contains(&p) {
            return Err(GridError::UnknownPlaceholder(p));
        }
    }
    let mode = schedule.mode();
    ConditioningGrid::from_fn(
        mode,
        schedule.layers.clone(),
        schedule.stages.clone(),
        |subset, stage| match policy {
            ExpandPolicy::Everywhere => CellPrompt::text(&text),
            ExpandPolicy::ActiveCellsOnly => CellPrompt::text(prompt::retain_placeholders(
                &text,
                |tok| schedule.is_active_in(tok, subset, stage),
            )),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::partition::*;

    fn matte_schedule() -> TokenSchedule {
        let mut tokens = BTreeMap::new();
        tokens.insert("<c>".to_string(), Activity::new([MODERATE_DOWN, MODERATE_UP], [STAGE_T1, STAGE_T2]));
        tokens.insert("<s>".to_string(), Activity::new([MODERATE_DOWN, MODERATE_UP], [STAGE_T1, STAGE_T2]));
        tokens.insert("<o>".to_string(), Activity::new([COARSE], [STAGE_T2, STAGE_T3]));
        tokens.insert("<l>".to_string(), Activity::new([COARSE], [STAGE_T1]));
        TokenSchedule::new(LayerPartition::canonical(), StagePartition::canonical(), tokens).unwrap()
    }

    #[test]
    fn color_token_survives_only_in_moderate_early_cells() {
        let grid = expand_prompt("a ⟨c⟩ colored photo of a cat", &matte_schedule(), ExpandPolicy::ActiveCellsOnly)
            .unwrap();
        for ((subset, stage), cell) in grid.cells() {
            let moderate = subset == MODERATE_DOWN || subset == MODERATE_UP;
            let early = stage == STAGE_T1 || stage == STAGE_T2;
            let expected = if moderate && early {
                "a <c> colored photo of a cat"
            } else {
                "a colored photo of a cat"
            };
            assert_eq!(cell.text_or_empty(), expected, "{subset}.{stage}");
        }
    }

    #[test]
    fn object_and_layout_split_by_stage() {
        let grid = expand_prompt(
            "a photo of <o> following layout <l>",
            &matte_schedule(),
            ExpandPolicy::ActiveCellsOnly,
        )
        .unwrap();
        assert_eq!(grid.cell(COARSE, STAGE_T1).unwrap().text_or_empty(), "a photo of following layout <l>");
        assert_eq!(grid.cell(COARSE, STAGE_T2).unwrap().text_or_empty(), "a photo of <o> following layout");
        assert_eq!(grid.cell(COARSE, STAGE_T3).unwrap().text_or_empty(), "a photo of <o> following layout");
        assert_eq!(grid.cell(COARSE, STAGE_T4).unwrap().text_or_empty(), "a photo of following layout");
        assert_eq!(grid.cell(FINE_UP, STAGE_T1).unwrap().text_or_empty(), "a photo of following layout");
    }

    #[test]
    fn plain_prompt_is_identical_everywhere() {
        let grid = expand_prompt("a photo of a teapot", &matte_schedule(), ExpandPolicy::ActiveCellsOnly).unwrap();
        assert_eq!(grid.n_cells(), 20);
        assert!(grid.cells().all(|(_, c)| c.text_or_empty() == "a photo of a teapot"));
    }

    #[test]
    fn everywhere_policy_keeps_tokens() {
        let grid = expand_prompt("a <c> colored photo", &matte_schedule(), ExpandPolicy::Everywhere).unwrap();
        assert!(grid.cells().all(|(_, c)| c.text_or_empty() == "a <c> colored photo"));
    }

    #[test]
    fn unknown_placeholder_is_an_error() {
        let err = expand_prompt("a <z> photo", &matte_schedule(), ExpandPolicy::ActiveCellsOnly).unwrap_err();
        assert_eq!(err, GridError::UnknownPlaceholder("<z>".into()));
    }

    #[test]
    fn active_pairs_follow_stage() {
        let s = matte_schedule();
        let at = |t| s.active_at(t).unwrap();
        assert_eq!(at(500), [("<o>".to_string(), COARSE.to_string())].into_iter().collect());
        assert!(at(100).is_empty());
        assert_eq!(at(900).len(), 5);
    }
}
