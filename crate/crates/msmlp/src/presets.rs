//! Named model configurations.
//!
//! The tiny/small/base presets follow the published four-stage layouts:
//! `S = 5`, `d = [0,1,2,3,4]` everywhere, per-stage region sizes
//! `[1,1,3,5,7] / [1,3,3,5,7] / [1,5,5,5,7] / [1,7,7,7,7]`, patch ratios
//! `[4,2,2,2]`, and stage depths in a 1:1:3:1 ratio. They ship without
//! learnable operator projections — the configuration whose parameter and
//! MAC counts line up with the published 28M/50M/88M and 4.9G/9.0G/16.1G
//! figures.
//!
//! The `-lite` variants mirror the reduced 2-2-6-2 / 2-2-18-2 stage designs;
//! their published complexity figures correspond to the *projected* operator,
//! so `ms-mlp-t-lite` carries pre+post projections and `ms-mlp-s-lite` a post
//! projection. The `ablation-*` presets vary `(r, d)` on the tiny layout, one
//! configuration for all stages. `tiny-desk` is a two-stage 32x32 fixture
//! small enough for exhaustive gradient checks and overfit tests.

use crate::error::{Error, Result};
use crate::mixshift::{AxisMode, ConvType, MixShiftSpec, ProjectionMode};
use crate::model::{ModelSpec, StageSpec};

/// All preset names, in listing order.
pub const PRESET_NAMES: [&str; 10] = [
    "ms-mlp-t",
    "ms-mlp-s",
    "ms-mlp-b",
    "ms-mlp-t-lite",
    "ms-mlp-s-lite",
    "ablation-local",
    "ablation-global",
    "ablation-isolated",
    "ablation-regional",
    "tiny-desk",
];

fn mix(d: &[i64], r: &[usize], projection: ProjectionMode) -> MixShiftSpec {
    MixShiftSpec {
        shifting_size: d.len(),
        distances: d.to_vec(),
        region_sizes: r.to_vec(),
        axis_mode: AxisMode::DualBranchSum,
        conv_type: ConvType::Dw,
        projection,
    }
}

/// Four-stage pyramid with the standard `[4,2,2,2]` patch ratios.
fn pyramid(
    channels: [usize; 4],
    blocks: [usize; 4],
    region_sizes: [[usize; 5]; 4],
    distances: [i64; 5],
    drop_path_max: f64,
    projection: ProjectionMode,
) -> ModelSpec {
    let patch = [4usize, 2, 2, 2];
    ModelSpec {
        image_size: 224,
        in_channels: 3,
        mlp_ratio: 4,
        num_classes: 1000,
        stages: (0..4)
            .map(|i| StageSpec {
                patch_ratio: patch[i],
                out_channels: channels[i],
                num_blocks: blocks[i],
                mixshift: mix(&distances, &region_sizes[i], projection),
                drop_path_max,
            })
            .collect(),
    }
}

const STAGE_REGIONS: [[usize; 5]; 4] = [[1, 1, 3, 5, 7], [1, 3, 3, 5, 7], [1, 5, 5, 5, 7], [1, 7, 7, 7, 7]];
const STANDARD_DISTANCES: [i64; 5] = [0, 1, 2, 3, 4];

/// Tiny layout with one `(r, d)` configuration repeated at every stage
/// (the ablation setting).
fn ablation(r: [usize; 5], d: [i64; 5]) -> ModelSpec {
    pyramid(
        [96, 192, 384, 768],
        [3, 3, 9, 3],
        [r, r, r, r],
        d,
        0.2,
        ProjectionMode::None,
    )
}

/// Look up a model configuration by name. See [`PRESET_NAMES`].
pub fn preset(name: &str) -> Result<ModelSpec> {
    let spec = match name {
        "ms-mlp-t" => pyramid(
            [96, 192, 384, 768],
            [3, 3, 9, 3],
            STAGE_REGIONS,
            STANDARD_DISTANCES,
            0.2,
            ProjectionMode::None,
        ),
        "ms-mlp-s" => pyramid(
            [96, 192, 384, 768],
            [3, 3, 27, 3],
            STAGE_REGIONS,
            STANDARD_DISTANCES,
            0.3,
            ProjectionMode::None,
        ),
        "ms-mlp-b" => pyramid(
            [128, 256, 512, 1024],
            [3, 3, 27, 3],
            STAGE_REGIONS,
            STANDARD_DISTANCES,
            0.5,
            ProjectionMode::None,
        ),
        "ms-mlp-t-lite" => pyramid(
            [96, 192, 384, 768],
            [2, 2, 6, 2],
            STAGE_REGIONS,
            STANDARD_DISTANCES,
            0.2,
            ProjectionMode::PrePost,
        ),
        "ms-mlp-s-lite" => pyramid(
            [96, 192, 384, 768],
            [2, 2, 18, 2],
            STAGE_REGIONS,
            STANDARD_DISTANCES,
            0.3,
            ProjectionMode::Post,
        ),
        "ablation-local" => ablation([1, 1, 1, 1, 1], STANDARD_DISTANCES),
        "ablation-global" => ablation([7, 7, 7, 7, 7], STANDARD_DISTANCES),
        "ablation-isolated" => ablation([1, 1, 3, 5, 7], [0, 2, 5, 10, 17]),
        "ablation-regional" => ablation([1, 1, 3, 5, 7], STANDARD_DISTANCES),
        "tiny-desk" => ModelSpec {
            image_size: 32,
            in_channels: 3,
            mlp_ratio: 4,
            num_classes: 8,
            stages: vec![
                StageSpec {
                    patch_ratio: 4,
                    out_channels: 16,
                    num_blocks: 2,
                    mixshift: mix(&[0, 1, 2, 3], &[1, 1, 3, 5], ProjectionMode::None),
                    drop_path_max: 0.0,
                },
                StageSpec {
                    patch_ratio: 2,
                    out_channels: 32,
                    num_blocks: 1,
                    mixshift: mix(&[0, 1, 1, 2], &[1, 1, 3, 3], ProjectionMode::None),
                    drop_path_max: 0.0,
                },
            ],
        },
        other => return Err(Error::UnknownName(other.to_string())),
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_presets_validate() {
        for name in PRESET_NAMES {
            let spec = preset(name).unwrap();
            spec.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn unknown_preset_is_lookup_error() {
        assert!(matches!(preset("ms-mlp-xxl"), Err(Error::UnknownName(_))));
    }

    #[test]
    fn tiny_block_counts() {
        let t = preset("ms-mlp-t").unwrap();
        let counts: Vec<usize> = t.stages.iter().map(|s| s.num_blocks).collect();
        assert_eq!(counts, vec![3, 3, 9, 3]);
    }

    #[test]
    fn lite_block_counts() {
        let t = preset("ms-mlp-t-lite").unwrap();
        let counts: Vec<usize> = t.stages.iter().map(|s| s.num_blocks).collect();
        assert_eq!(counts, vec![2, 2, 6, 2]);
        let s = preset("ms-mlp-s-lite").unwrap();
        let counts: Vec<usize> = s.stages.iter().map(|s| s.num_blocks).collect();
        assert_eq!(counts, vec![2, 2, 18, 2]);
    }

    #[test]
    fn base_stage1_channels() {
        let b = preset("ms-mlp-b").unwrap();
        assert_eq!(b.stages[0].out_channels, 128);
        assert_eq!(b.stages[3].out_channels, 1024);
    }

    #[test]
    fn tiny_region_sizes_per_stage() {
        let t = preset("ms-mlp-t").unwrap();
        let r: Vec<Vec<usize>> = t.stages.iter().map(|s| s.mixshift.region_sizes.clone()).collect();
        assert_eq!(
            r,
            vec![
                vec![1, 1, 3, 5, 7],
                vec![1, 3, 3, 5, 7],
                vec![1, 5, 5, 5, 7],
                vec![1, 7, 7, 7, 7],
            ]
        );
        for s in &t.stages {
            assert_eq!(s.mixshift.distances, vec![0, 1, 2, 3, 4]);
            assert_eq!(s.mixshift.shifting_size, 5);
        }
    }

    #[test]
    fn ablation_configs() {
        let local = preset("ablation-local").unwrap();
        assert_eq!(local.stages[0].mixshift.region_sizes, vec![1, 1, 1, 1, 1]);
        assert_eq!(local.stages[3].mixshift.region_sizes, vec![1, 1, 1, 1, 1]);
        let global = preset("ablation-global").unwrap();
        assert_eq!(global.stages[0].mixshift.region_sizes, vec![7, 7, 7, 7, 7]);
        let isolated = preset("ablation-isolated").unwrap();
        assert_eq!(isolated.stages[0].mixshift.distances, vec![0, 2, 5, 10, 17]);
        assert_eq!(isolated.stages[0].mixshift.region_sizes, vec![1, 1, 3, 5, 7]);
        let regional = preset("ablation-regional").unwrap();
        assert_eq!(regional.stages[0].mixshift.distances, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn stage_resolutions_at_224() {
        // every four-stage preset keeps the published resolution pyramid
        for name in PRESET_NAMES {
            let spec = preset(name).unwrap();
            if spec.image_size == 224 {
                assert_eq!(spec.stage_resolutions(224), vec![56, 28, 14, 7], "{name}");
            }
        }
    }

    #[test]
    fn tiny_desk_is_small() {
        let spec = preset("tiny-desk").unwrap();
        assert_eq!(spec.stages.len(), 2);
        assert_eq!(spec.stages[0].out_channels, 16);
        assert_eq!(spec.stages[1].out_channels, 32);
        assert_eq!(spec.image_size, 32);
        assert_eq!(spec.stage_resolutions(32), vec![8, 4]);
    }

    #[test]
    fn drop_path_maxima_track_model_size() {
        for (name, dp) in [("ms-mlp-t", 0.2), ("ms-mlp-s", 0.3), ("ms-mlp-b", 0.5)] {
            let spec = preset(name).unwrap();
            for s in &spec.stages {
                assert_eq!(s.drop_path_max, dp, "{name}");
            }
        }
    }
}
