//! Two-stage window: spatial attenuation, feature gating, per-part weight
//! aggregation and frequency prediction.
//!
//! All functions are batched over `P` query points that share one pose.
//! Per-part quantities are lists with one `[P, k]` node per bone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{xavier, Init, Linear, ParamBuilder};
use crate::tensor::{Graph, ParamId, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowMode {
    /// `w = w^p · w^f`
    Full,
    /// `w = w^p`
    OnlySpatial,
    /// `w = w^f`
    OnlyFeature,
    /// `w = 1` on valid parts
    NoWindow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub alpha: f64,
    pub beta: f64,
    pub mode: WindowMode,
    /// Width of the Gaussian sine features `ẋ_i`.
    pub sine_features: usize,
    /// Standard deviation of the Gaussian `W_c`.
    pub bandwidth: f64,
    pub sine_weights_trainable: bool,
    /// Width of `f^p_i`.
    pub point_feature_dim: usize,
    pub feature_window_width: usize,
    pub frequency_hidden: usize,
    /// One coefficient per channel (`true`) or per layer (`false`).
    pub theta_per_channel: bool,
    /// Spread of the final frequency-layer weights around `θ = 1`.
    pub theta_init_noise: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 6.0,
            mode: WindowMode::Full,
            sine_features: 16,
            bandwidth: 10.0,
            sine_weights_trainable: false,
            point_feature_dim: 32,
            feature_window_width: 32,
            frequency_hidden: 64,
            theta_per_channel: true,
            theta_init_noise: 1e-3,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(Error::Config("window alpha and beta must be positive".into()));
        }
        if !(self.bandwidth >= 0.0) {
            return Err(Error::Config("window bandwidth must be non-negative".into()));
        }
        Ok(())
    }
}

/// Closed-form `exp(-α ‖x̄‖₂^β)` for one part.
pub fn spatial_window_value(xbar: &[f64; 3], alpha: f64, beta: f64) -> f64 {
    let sq: f64 = xbar.iter().map(|v| v * v).sum();
    (-alpha * sq.powf(beta / 2.0)).exp()
}

/// `w^p` for one part, `[P, 1]`, zeroed where `valid` is 0.
pub fn spatial_window(g: &mut Graph, xbar: Var, valid: Var, alpha: f64, beta: f64) -> Result<Var> {
    let sq = g.mul(xbar, xbar)?;
    let sq = g.sum_cols(sq)?;
    let r = g.powf(sq, beta / 2.0)?;
    let e = g.scale(r, -alpha)?;
    let wp = g.exp(e)?;
    Ok(g.mul(wp, valid)?)
}

/// `x̃_i = x̄_i · w_i`, concatenated to `[P, 3 N_B]`.
pub fn reweight_positions(g: &mut Graph, xbar: &[Var], w: Var) -> Result<Var> {
    let mut cols = Vec::with_capacity(xbar.len());
    for (i, &xb) in xbar.iter().enumerate() {
        let wi = g.slice_cols(w, i, 1)?;
        cols.push(g.mul(xb, wi)?);
    }
    Ok(g.concat_cols(&cols)?)
}

/// Everything the window produces for a batch of points.
pub struct WindowOutput {
    /// `[P, N_B]`
    pub wp: Var,
    /// `[P, N_B]`; absent in modes that do not use it.
    pub wf: Option<Var>,
    /// `[P, N_B]` final part weights.
    pub w: Var,
    /// `[P, D_g]` aggregated part feature.
    pub fm: Var,
    /// One `[P, H]` (or `[P, 1]`) node per backbone layer.
    pub theta: Option<Vec<Var>>,
    /// `[P, 3 N_B]`
    pub xtilde: Var,
}

#[derive(Clone, Debug)]
pub struct Window {
    cfg: WindowConfig,
    bones: usize,
    theta_layers: usize,
    theta_width: usize,
    sine_weights: ParamId,
    point_x: Linear,
    point_g: ParamId,
    fw1: Linear,
    fw2: Linear,
    freq1: Linear,
    freq2: Linear,
}

impl Window {
    pub(crate) fn build(
        cfg: &WindowConfig,
        bones: usize,
        feature_dim: usize,
        layers: usize,
        hidden: usize,
        pb: &mut ParamBuilder<'_>,
    ) -> Result<Self> {
        cfg.validate()?;
        let dc = cfg.sine_features;
        let df = cfg.point_feature_dim;
        let sine_weights = pb.get(
            "window/sine_w",
            3,
            dc,
            Init::Normal(cfg.bandwidth),
            cfg.sine_weights_trainable,
        )?;
        let point_x = pb.linear("window/point", dc, df, xavier(dc + feature_dim, df), Init::Zeros)?;
        let point_g = pb.get(
            "window/point_g_w",
            feature_dim,
            df,
            xavier(dc + feature_dim, df),
            true,
        )?;
        let h = cfg.feature_window_width;
        let fw1 = pb.linear("window/feature1", df, h, xavier(df, h), Init::Zeros)?;
        let fw2 = pb.linear("window/feature2", h, bones, xavier(h, bones), Init::Zeros)?;
        let fh = cfg.frequency_hidden;
        let theta_width = if cfg.theta_per_channel { hidden } else { 1 };
        let freq1 = pb.linear("window/freq1", feature_dim, fh, xavier(feature_dim, fh), Init::Zeros)?;
        let freq2 = pb.linear(
            "window/freq2",
            fh,
            layers * theta_width,
            Init::Uniform(cfg.theta_init_noise),
            Init::Const(1.0),
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            bones,
            theta_layers: layers,
            theta_width,
            sine_weights,
            point_x,
            point_g,
            fw1,
            fw2,
            freq1,
            freq2,
        })
    }

    pub fn config(&self) -> &WindowConfig {
        &self.cfg
    }

    /// Frequency-MLP parameter ids.
    pub fn frequency_params(&self) -> [ParamId; 4] {
        [self.freq1.weight, self.freq1.bias, self.freq2.weight, self.freq2.bias]
    }

    /// `ẋ_i = sin(x̄_i W_c)`, `f^p_i = sin(ẋ_i W_x + G_i W_g + b)`,
    /// `f^w_i = f^p_i · w^p_i`. Returns `(ẋ, f^p, f^w)` per part.
    pub fn part_point_features(
        &self,
        g: &mut Graph,
        xbar: &[Var],
        bone_features: Var,
        wp: &[Var],
    ) -> Result<(Vec<Var>, Vec<Var>, Vec<Var>)> {
        let wc = g.param(self.sine_weights);
        let wg = g.param(self.point_g);
        let gproj = g.matmul(bone_features, wg)?;
        let mut xdot = Vec::with_capacity(self.bones);
        let mut fp = Vec::with_capacity(self.bones);
        let mut fw = Vec::with_capacity(self.bones);
        for i in 0..self.bones {
            let z = g.matmul(xbar[i], wc)?;
            let xd = g.sin(z)?;
            let h = self.point_x.forward(g, xd)?;
            let gi = g.slice_rows(gproj, i, 1)?;
            let h = g.add(h, gi)?;
            let f = g.sin(h)?;
            fw.push(g.mul(f, wp[i])?);
            xdot.push(xd);
            fp.push(f);
        }
        Ok((xdot, fp, fw))
    }

    /// Max-pool over parts, two dense layers, sigmoid: `[P, N_B]` in (0, 1).
    pub fn feature_window(&self, g: &mut Graph, fw: &[Var]) -> Result<Var> {
        let pooled = g.max_stack(fw)?;
        let h = self.fw1.forward(g, pooled)?;
        let h = g.sin(h)?;
        let o = self.fw2.forward(g, h)?;
        Ok(g.sigmoid(o)?)
    }

    /// `f^m = Σ w_i G_i` and, when requested, `θ_1..θ_n = MLP(f^m)`.
    pub fn aggregate_and_predict(
        &self,
        g: &mut Graph,
        w: Var,
        bone_features: Var,
        predict_theta: bool,
    ) -> Result<(Var, Option<Vec<Var>>)> {
        let fm = g.matmul(w, bone_features)?;
        if !predict_theta {
            return Ok((fm, None));
        }
        let h = self.freq1.forward(g, fm)?;
        let h = g.sin(h)?;
        let raw = self.freq2.forward(g, h)?;
        let mut theta = Vec::with_capacity(self.theta_layers);
        for l in 0..self.theta_layers {
            theta.push(g.slice_cols(raw, l * self.theta_width, self.theta_width)?);
        }
        Ok((fm, Some(theta)))
    }

    /// Runs the whole window for points with scaled coordinates `xbar` and
    /// per-part validity masks `valid` (`[P, 1]` each, 0 or 1).
    pub fn forward(
        &self,
        g: &mut Graph,
        xbar: &[Var],
        valid: &[Var],
        bone_features: Var,
        predict_theta: bool,
    ) -> Result<WindowOutput> {
        let (alpha, beta) = (self.cfg.alpha, self.cfg.beta);
        let wp_parts = xbar
            .iter()
            .zip(valid)
            .map(|(&xb, &v)| spatial_window(g, xb, v, alpha, beta))
            .collect::<Result<Vec<_>>>()?;
        let wp = g.concat_cols(&wp_parts)?;
        let valid_mat = g.concat_cols(valid)?;
        let needs_wf = matches!(self.cfg.mode, WindowMode::Full | WindowMode::OnlyFeature);
        let wf = if needs_wf {
            let (_, _, fw) = self.part_point_features(g, xbar, bone_features, &wp_parts)?;
            Some(self.feature_window(g, &fw)?)
        } else {
            None
        };
        let w = match (self.cfg.mode, wf) {
            (WindowMode::Full, Some(wf)) => g.mul(wp, wf)?,
            (WindowMode::OnlyFeature, Some(wf)) => g.mul(wf, valid_mat)?,
            (WindowMode::OnlySpatial, _) => wp,
            (WindowMode::NoWindow, _) => valid_mat,
            _ => unreachable!("feature window computed for its modes"),
        };
        let (fm, theta) = self.aggregate_and_predict(g, w, bone_features, predict_theta)?;
        let xtilde = reweight_positions(g, xbar, w)?;
        Ok(WindowOutput {
            wp,
            wf,
            w,
            fm,
            theta,
            xtilde,
        })
    }
}

/// Per-part validity masks (`[P, 1]` of 0/1) from scaled coordinates.
pub fn validity_masks(g: &Graph, xbar: &[Var]) -> Vec<Tensor> {
    xbar.iter()
        .map(|&xb| {
            let t = g.value(xb);
            let data = (0..t.rows())
                .map(|r| crate::skeleton::is_valid_part(t.row_slice(r)) as u8 as f64)
                .collect();
            Tensor::matrix(t.rows(), 1, data)
        })
        .collect()
}
