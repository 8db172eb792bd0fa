#![allow(dead_code)]

use std::path::Path;

use avatar_field::synthetic::{generate_dataset, Dataset, GenerateConfig, SceneSpec};

/// The default body at a quarter of the pixels and a few frames.
pub fn small_config(seed: u64) -> GenerateConfig {
    GenerateConfig {
        seed,
        width: 32,
        height: 32,
        train_poses: 3,
        views_per_pose: 2,
        novel_view_frames: 2,
        novel_pose_frames: 2,
        focal: 36.0,
        gt_samples: 96,
        ..GenerateConfig::default()
    }
}

pub fn small_dataset(dir: &Path) -> Dataset {
    generate_dataset(&SceneSpec::default_body(), &small_config(0), dir).unwrap();
    Dataset::load(dir).unwrap()
}

pub fn default_dataset(dir: &Path) -> Dataset {
    generate_dataset(&SceneSpec::default_body(), &GenerateConfig::default(), dir).unwrap();
    Dataset::load(dir).unwrap()
}
