//! Scores renders of a dataset split against the ground-truth images.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imaging::{write_gray_png, Image};
use crate::metrics::{display_psnr, error_map, frequency_map, score, HISTOGRAM_MAX_STD};
use crate::model::AvatarField;
use crate::renderer::{render_image, PosedModel, RenderConfig};
use crate::synthetic::{Dataset, Frame, OracleField, Split};
use crate::tensor::ParamStore;

/// What produces the predicted image for a frame.
pub enum Predictor<'a> {
    Model {
        model: &'a AvatarField,
        params: &'a ParamStore,
    },
    /// The analytic scene re-rendered through the compositor.
    Oracle,
    /// The stored ground truth itself.
    GroundTruth,
}

impl Predictor<'_> {
    pub fn predict(&self, dataset: &Dataset, frame: &Frame, cfg: &RenderConfig) -> Result<Image> {
        let cfg = RenderConfig {
            background: dataset.background(),
            ..cfg.clone()
        };
        match self {
            Predictor::Model { model, params } => {
                let field = PosedModel {
                    model,
                    params,
                    pose: &frame.pose,
                };
                Ok(render_image(&field, &frame.camera, &cfg)?.0)
            }
            Predictor::Oracle => {
                let field = OracleField::new(&dataset.scene, &frame.pose)?;
                Ok(render_image(&field, &frame.camera, &cfg)?.0)
            }
            Predictor::GroundTruth => Ok(frame.image.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame: usize,
    pub split: Split,
    pub psnr: f64,
    pub ssim: f64,
    pub f_dist: f64,
}

/// Renders and scores every frame of `split`. With `maps_dir`, writes the
/// prediction, its error map and both frequency maps per frame.
pub fn evaluate_split(
    dataset: &Dataset,
    split: Split,
    predictor: &Predictor<'_>,
    cfg: &RenderConfig,
    maps_dir: Option<&Path>,
) -> Result<Vec<FrameScore>> {
    if let Some(dir) = maps_dir {
        std::fs::create_dir_all(dir)?;
    }
    dataset
        .split(split)
        .into_iter()
        .map(|frame| {
            let pred = predictor.predict(dataset, frame, cfg)?;
            let s = score(&pred, &frame.image)?;
            if let Some(dir) = maps_dir {
                write_maps(dir, frame.id, &pred, &frame.image)?;
            }
            Ok(FrameScore {
                frame: frame.id,
                split,
                psnr: display_psnr(s.psnr),
                ssim: s.ssim,
                f_dist: s.f_dist,
            })
        })
        .collect()
}

fn write_maps(dir: &Path, id: usize, pred: &Image, reference: &Image) -> Result<()> {
    pred.write_png(dir.join(format!("{id:04}_pred.png")))?;
    error_map(pred, reference, 0.5)?.write_png(dir.join(format!("{id:04}_error.png")))?;
    for (tag, img) in [("pred", pred), ("ref", reference)] {
        let m = frequency_map(img);
        write_gray_png(
            dir.join(format!("{id:04}_freq_{tag}.png")),
            m.width,
            m.height,
            &m.values,
            HISTOGRAM_MAX_STD,
        )?;
    }
    Ok(())
}

pub fn write_scores(path: impl AsRef<Path>, scores: &[FrameScore]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in scores {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

/// Column means of `scores` as `(psnr, ssim, f_dist)`.
pub fn mean_scores(scores: &[FrameScore]) -> (f64, f64, f64) {
    let n = scores.len().max(1) as f64;
    let sum = scores
        .iter()
        .fold((0.0, 0.0, 0.0), |a, s| (a.0 + s.psnr, a.1 + s.ssim, a.2 + s.f_dist));
    (sum.0 / n, sum.1 / n, sum.2 / n)
}
