use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::GridError;

/// Number of cross-attention layers the router addresses (L1..L16).
pub const NUM_LAYERS: usize = 16;
/// Forward-process length; timesteps live in `[0, NUM_TIMESTEPS)`.
pub const NUM_TIMESTEPS: usize = 1000;

/// Spatial resolution of each layer for a Stable-Diffusion-1.x class U-Net:
/// six encoder layers, the mid block, then nine decoder layers.
pub const CANONICAL_RESOLUTIONS: [u32; NUM_LAYERS] =
    [64, 64, 32, 32, 16, 16, 8, 16, 16, 16, 32, 32, 32, 64, 64, 64];

pub const FINE_DOWN: &str = "fine-down";
pub const MODERATE_DOWN: &str = "moderate-down";
pub const COARSE: &str = "coarse";
pub const MODERATE_UP: &str = "moderate-up";
pub const FINE_UP: &str = "fine-up";

pub const STAGE_T1: &str = "t1";
pub const STAGE_T2: &str = "t2";
pub const STAGE_T3: &str = "t3";
pub const STAGE_T4: &str = "t4";

fn check_id(id: &str) -> Result<(), GridError> {
    if id.is_empty() || id.contains('.') {
        return Err(GridError::InvalidId(id.to_string()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSubset {
    pub id: String,
    pub layers: BTreeSet<usize>,
}

impl LayerSubset {
    pub fn new(id: impl Into<String>, layers: impl IntoIterator<Item = usize>) -> Self {
        Self {
            id: id.into(),
            layers: layers.into_iter().collect(),
        }
    }
}

/// Disjoint cover of the layers 1..=16 by named subsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPartition {
    subsets: Vec<LayerSubset>,
    resolution: [u32; NUM_LAYERS],
    owner: [usize; NUM_LAYERS],
}

impl LayerPartition {
    pub fn new(subsets: Vec<LayerSubset>, resolution: [u32; NUM_LAYERS]) -> Result<Self, GridError> {
        let mut owner = [usize::MAX; NUM_LAYERS];
        let mut ids = BTreeSet::new();
        for (k, subset) in subsets.iter().enumerate() {
            check_id(&subset.id)?;
            if !ids.insert(subset.id.as_str()) {
                return Err(GridError::DuplicateId(subset.id.clone()));
            }
            if subset.layers.is_empty() {
                return Err(GridError::EmptySubset(subset.id.clone()));
            }
            for &layer in &subset.layers {
                if !(1..=NUM_LAYERS).contains(&layer) {
                    return Err(GridError::LayerOutOfRange(layer));
                }
                if owner[layer - 1] != usize::MAX {
                    return Err(GridError::OverlappingSubsets {
                        layer,
                        first: subsets[owner[layer - 1]].id.clone(),
                        second: subset.id.clone(),
                    });
                }
                owner[layer - 1] = k;
            }
        }
        if let Some(missing) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(GridError::UncoveredLayer(missing + 1));
        }
        if let Some(&bad) = resolution.iter().find(|r| ![8, 16, 32, 64].contains(*r)) {
            return Err(GridError::InvalidResolution(bad));
        }
        Ok(Self {
            subsets,
            resolution,
            owner,
        })
    }

    /// The five-subset split: fine-down {1,2}, moderate-down {3,4,5},
    /// coarse {6..9}, moderate-up {10..13}, fine-up {14,15,16}.
    pub fn canonical() -> Self {
        Self::new(
            vec![
                LayerSubset::new(FINE_DOWN, [1, 2]),
                LayerSubset::new(MODERATE_DOWN, [3, 4, 5]),
                LayerSubset::new(COARSE, [6, 7, 8, 9]),
                LayerSubset::new(MODERATE_UP, [10, 11, 12, 13]),
                LayerSubset::new(FINE_UP, [14, 15, 16]),
            ],
            CANONICAL_RESOLUTIONS,
        )
        .expect("canonical layer partition is valid")
    }

    /// The three-way fine / moderate / coarse split used for probing.
    pub fn three_way() -> Self {
        Self::new(
            vec![
                LayerSubset::new("fine", [1, 2, 14, 15, 16]),
                LayerSubset::new("moderate", [3, 4, 5, 10, 11, 12, 13]),
                LayerSubset::new("coarse", [6, 7, 8, 9]),
            ],
            CANONICAL_RESOLUTIONS,
        )
        .expect("three-way layer partition is valid")
    }

    /// One subset per layer, ids `L1`..`L16`.
    pub fn per_layer() -> Self {
        Self::new(
            (1..=NUM_LAYERS)
                .map(|l| LayerSubset::new(format!("L{l}"), [l]))
                .collect(),
            CANONICAL_RESOLUTIONS,
        )
        .expect("per-layer partition is valid")
    }

    /// A single subset covering every layer.
    pub fn single() -> Self {
        Self::new(
            vec![LayerSubset::new("all", 1..=NUM_LAYERS)],
            CANONICAL_RESOLUTIONS,
        )
        .expect("single layer subset is valid")
    }

    pub fn subsets(&self) -> &[LayerSubset] {
        &self.subsets
    }

    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }

    pub fn resolutions(&self) -> &[u32; NUM_LAYERS] {
        &self.resolution
    }

    pub fn resolution(&self, layer: usize) -> Result<u32, GridError> {
        check_layer(layer)?;
        Ok(self.resolution[layer - 1])
    }

    /// Index of the subset that owns `layer` (1-based layer index).
    pub fn locate(&self, layer: usize) -> Result<usize, GridError> {
        check_layer(layer)?;
        Ok(self.owner[layer - 1])
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.subsets.iter().position(|s| s.id == id)
    }
}

pub(crate) fn check_layer(layer: usize) -> Result<(), GridError> {
    if (1..=NUM_LAYERS).contains(&layer) {
        Ok(())
    } else {
        Err(GridError::LayerOutOfRange(layer))
    }
}

pub(crate) fn check_timestep(t: usize) -> Result<(), GridError> {
    if t < NUM_TIMESTEPS {
        Ok(())
    } else {
        Err(GridError::TimestepOutOfRange(t))
    }
}

/// A named half-open timestep interval `[lo, hi)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub id: String,
    pub lo: usize,
    pub hi: usize,
}

impl Stage {
    pub fn new(id: impl Into<String>, lo: usize, hi: usize) -> Self {
        Self { id: id.into(), lo, hi }
    }

    pub fn contains(&self, t: usize) -> bool {
        self.lo <= t && t < self.hi
    }
}

/// Disjoint cover of `[0, 1000)` by half-open stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePartition {
    stages: Vec<Stage>,
    owner: Vec<u16>,
}

impl StagePartition {
    pub fn new(stages: Vec<Stage>) -> Result<Self, GridError> {
        let mut ids = BTreeSet::new();
        for stage in &stages {
            check_id(&stage.id)?;
            if !ids.insert(stage.id.as_str()) {
                return Err(GridError::DuplicateId(stage.id.clone()));
            }
            if stage.lo >= stage.hi || stage.hi > NUM_TIMESTEPS {
                return Err(GridError::InvalidInterval {
                    id: stage.id.clone(),
                    lo: stage.lo,
                    hi: stage.hi,
                });
            }
        }
        let mut order: Vec<usize> = (0..stages.len()).collect();
        order.sort_by_key(|&k| (stages[k].lo, stages[k].hi));
        let mut cursor = 0;
        for &k in &order {
            let s = &stages[k];
            if s.lo > cursor {
                return Err(GridError::TimestepGap { lo: cursor, hi: s.lo });
            }
            if s.lo < cursor {
                return Err(GridError::TimestepOverlap {
                    lo: s.lo,
                    hi: cursor.min(s.hi),
                });
            }
            cursor = s.hi;
        }
        if cursor < NUM_TIMESTEPS {
            return Err(GridError::TimestepGap {
                lo: cursor,
                hi: NUM_TIMESTEPS,
            });
        }
        let mut owner = vec![0u16; NUM_TIMESTEPS];
        for (k, s) in stages.iter().enumerate() {
            owner[s.lo..s.hi].fill(k as u16);
        }
        Ok(Self { stages, owner })
    }

    /// Forward-process stages t1 [800,1000), t2 [600,800), t3 [200,600),
    /// t4 [0,200), listed in denoising order.
    pub fn canonical() -> Self {
        Self::new(vec![
            Stage::new(STAGE_T1, 800, 1000),
            Stage::new(STAGE_T2, 600, 800),
            Stage::new(STAGE_T3, 200, 600),
            Stage::new(STAGE_T4, 0, 200),
        ])
        .expect("canonical stage partition is valid")
    }

    /// Ten equal stages in denoising order: `s1` = [900,1000) ... `s10` = [0,100).
    pub fn deciles() -> Self {
        Self::new(
            (1..=10)
                .map(|k| Stage::new(format!("s{k}"), 1000 - 100 * k, 1100 - 100 * k))
                .collect(),
        )
        .expect("decile stage partition is valid")
    }

    pub fn single() -> Self {
        Self::new(vec![Stage::new("all", 0, NUM_TIMESTEPS)]).expect("single stage is valid")
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Index of the stage containing `t`.
    pub fn locate(&self, t: usize) -> Result<usize, GridError> {
        check_timestep(t)?;
        Ok(self.owner[t] as usize)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.stages.iter().position(|s| s.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_partition_covers_layers() {
        let p = LayerPartition::canonical();
        assert_eq!(p.len(), 5);
        assert_eq!(p.subsets()[p.locate(7).unwrap()].id, COARSE);
        assert_eq!(p.subsets()[p.locate(1).unwrap()].id, FINE_DOWN);
        assert_eq!(p.subsets()[p.locate(12).unwrap()].id, MODERATE_UP);
        assert_eq!(p.resolution(7).unwrap(), 8);
        assert!(matches!(p.locate(0), Err(GridError::LayerOutOfRange(0))));
        assert!(matches!(p.locate(17), Err(GridError::LayerOutOfRange(17))));
    }

    #[test]
    fn rejects_overlap_and_gaps_in_layers() {
        let overlapping = LayerPartition::new(
            vec![LayerSubset::new("a", 1..=9), LayerSubset::new("b", 9..=16)],
            CANONICAL_RESOLUTIONS,
        );
        assert!(matches!(overlapping, Err(GridError::OverlappingSubsets { layer: 9, .. })));
        let missing = LayerPartition::new(
            vec![LayerSubset::new("a", 1..=8), LayerSubset::new("b", 10..=16)],
            CANONICAL_RESOLUTIONS,
        );
        assert!(matches!(missing, Err(GridError::UncoveredLayer(9))));
        let outside = LayerPartition::new(vec![LayerSubset::new("a", 1..=17)], CANONICAL_RESOLUTIONS);
        assert!(matches!(outside, Err(GridError::LayerOutOfRange(17))));
    }

    #[test]
    fn stage_boundaries_go_to_the_higher_stage() {
        let s = StagePartition::canonical();
        let id = |t| s.stages()[s.locate(t).unwrap()].id.clone();
        assert_eq!(id(999), STAGE_T1);
        assert_eq!(id(800), STAGE_T1);
        assert_eq!(id(799), STAGE_T2);
        assert_eq!(id(600), STAGE_T2);
        assert_eq!(id(200), STAGE_T3);
        assert_eq!(id(199), STAGE_T4);
        assert_eq!(id(0), STAGE_T4);
        assert!(matches!(s.locate(1000), Err(GridError::TimestepOutOfRange(1000))));
    }

    #[test]
    fn reports_timestep_gap() {
        let err = StagePartition::new(vec![
            Stage::new("a", 0, 200),
            Stage::new("b", 200, 600),
            Stage::new("c", 600, 800),
            Stage::new("d", 850, 1000),
        ])
        .unwrap_err();
        assert_eq!(err, GridError::TimestepGap { lo: 800, hi: 850 });
        assert_eq!(err.to_string(), "timestep gap [800,850)");
    }

    #[test]
    fn reports_timestep_overlap() {
        let err = StagePartition::new(vec![Stage::new("a", 0, 600), Stage::new("b", 500, 1000)])
            .unwrap_err();
        assert_eq!(err, GridError::TimestepOverlap { lo: 500, hi: 600 });
    }

    #[test]
    fn deciles_are_in_denoising_order() {
        let d = StagePartition::deciles();
        assert_eq!(d.len(), 10);
        assert_eq!(d.stages()[d.locate(950).unwrap()].id, "s1");
        assert_eq!(d.stages()[d.locate(5).unwrap()].id, "s10");
    }
}
