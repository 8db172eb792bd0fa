//! Frequency-modulated sine backbone and the radiance head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{xavier, Init, Linear, ParamBuilder};
use crate::tensor::{Graph, ParamId, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Number of modulated layers `n`.
    pub layers: usize,
    /// Hidden width `H`.
    pub hidden: usize,
    /// First-layer frequency scale, folded into the initial weights.
    pub omega0: f64,
    /// Octaves of the direction embedding fed to the color head.
    pub dir_frequencies: usize,
    pub color_hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 64,
            omega0: 30.0,
            dir_frequencies: 4,
            color_hidden: 32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    first: Linear,
    layers: Vec<Linear>,
    /// Extra input weight for the unmodulated, feature-conditioned variant.
    condition: Option<ParamId>,
}

impl Backbone {
    pub(crate) fn build(
        cfg: &BackboneConfig,
        input_dim: usize,
        condition_dim: Option<usize>,
        pb: &mut ParamBuilder<'_>,
    ) -> Result<Self> {
        let h = cfg.hidden;
        let first = pb.linear(
            "backbone/l0",
            input_dim,
            h,
            Init::Uniform(cfg.omega0 / input_dim as f64),
            Init::Uniform(1.0 / (input_dim as f64).sqrt()),
        )?;
        let bound = (6.0 / h as f64).sqrt();
        let layers = (1..=cfg.layers)
            .map(|l| {
                pb.linear(
                    &format!("backbone/l{l}"),
                    h,
                    h,
                    Init::Uniform(bound),
                    Init::Uniform(1.0 / (h as f64).sqrt()),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let condition = condition_dim
            .map(|d| pb.get("backbone/condition_w", d, h, Init::Uniform(bound), true))
            .transpose()?;
        Ok(Self {
            cfg: cfg.clone(),
            first,
            layers,
            condition,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn output_dim(&self) -> usize {
        self.cfg.layers * self.cfg.hidden
    }

    /// Pre-activation `θ_l ⊙ (W_l f_{l-1})` of layer `l` (1-based), without
    /// bias.
    pub fn modulated_preactivation(
        &self,
        g: &mut Graph,
        l: usize,
        prev: Var,
        theta: Option<Var>,
    ) -> Result<Var> {
        let z = self.layers[l - 1].forward_no_bias(g, prev)?;
        Ok(match theta {
            Some(t) => g.mul(z, t)?,
            None => z,
        })
    }

    /// `f_0 = sin(W_0 x̃ + b_0)`, `f_l = sin(θ_l ⊙ W_l f_{l-1} + b_l)`;
    /// returns `S = [f_1, …, f_n]`. `theta = None` means `θ ≡ 1`.
    /// `condition` adds `f^m W_cond` to the first modulated layer.
    pub fn modulated_forward(
        &self,
        g: &mut Graph,
        xtilde: Var,
        theta: Option<&[Var]>,
        condition: Option<Var>,
    ) -> Result<Var> {
        if let Some(t) = theta {
            if t.len() != self.layers.len() {
                return Err(Error::ThetaLayers {
                    expected: self.layers.len(),
                    got: t.len(),
                });
            }
            for &v in t {
                let (_, c) = g.shape(v);
                if c != 1 && c != self.cfg.hidden {
                    return Err(Error::SizeMismatch(format!(
                        "theta width {c} for hidden width {}",
                        self.cfg.hidden
                    )));
                }
            }
        }
        let z = self.first.forward(g, xtilde)?;
        let mut f = g.sin(z)?;
        let mut outs = Vec::with_capacity(self.layers.len());
        for l in 1..=self.layers.len() {
            let mut pre = self.modulated_preactivation(g, l, f, theta.map(|t| t[l - 1]))?;
            if l == 1 {
                if let (Some(c), Some(wc)) = (condition, self.condition) {
                    let wc = g.param(wc);
                    let cz = g.matmul(c, wc)?;
                    pre = g.add(pre, cz)?;
                }
            }
            let b = g.param(self.layers[l - 1].bias);
            let pre = g.add(pre, b)?;
            f = g.sin(pre)?;
            outs.push(f);
        }
        Ok(g.concat_cols(&outs)?)
    }
}

/// Sinusoidal embedding `[sin(2^k d), cos(2^k d)]_{k<octaves}` of unit
/// directions, `[P, 6·octaves]`.
pub fn direction_embedding(dirs: &Tensor, octaves: usize) -> Result<Tensor> {
    let mut out = Vec::with_capacity(dirs.rows() * 6 * octaves);
    for r in 0..dirs.rows() {
        let d = dirs.row_slice(r);
        let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::UnnormalizedDirection(n));
        }
        for k in 0..octaves {
            let f = (1u64 << k) as f64;
            out.extend(d.iter().map(|v| (f * v).sin()));
            out.extend(d.iter().map(|v| (f * v).cos()));
        }
    }
    Ok(Tensor::matrix(dirs.rows(), 6 * octaves, out))
}

#[derive(Clone, Debug)]
pub struct RadianceHead {
    sigma: Linear,
    color_feat: Linear,
    color_dir: ParamId,
    color_out: Linear,
    octaves: usize,
}

impl RadianceHead {
    pub(crate) fn build(cfg: &BackboneConfig, feature_dim: usize, pb: &mut ParamBuilder<'_>) -> Result<Self> {
        let emb = 6 * cfg.dir_frequencies;
        let ch = cfg.color_hidden;
        Ok(Self {
            sigma: pb.linear(
                "radiance/sigma",
                feature_dim,
                1,
                xavier(feature_dim, 1),
                Init::Zeros,
            )?,
            color_feat: pb.linear(
                "radiance/color1",
                feature_dim,
                ch,
                xavier(feature_dim + emb, ch),
                Init::Zeros,
            )?,
            color_dir: pb.get("radiance/color1_dir_w", emb, ch, xavier(feature_dim + emb, ch), true)?,
            color_out: pb.linear("radiance/color2", ch, 3, xavier(ch, 3), Init::Zeros)?,
            octaves: cfg.dir_frequencies,
        })
    }

    /// Returns `(σ [P, 1], c [P, 3])`. Density never sees the direction.
    pub fn forward(&self, g: &mut Graph, features: Var, dirs: &Tensor) -> Result<(Var, Var)> {
        let emb = direction_embedding(dirs, self.octaves)?;
        let s = self.sigma.forward(g, features)?;
        let sigma = g.softplus(s)?;
        let h = self.color_feat.forward(g, features)?;
        let e = g.constant(emb);
        let wd = g.param(self.color_dir);
        let hd = g.matmul(e, wd)?;
        let h = g.add(h, hd)?;
        let h = g.relu(h)?;
        let c = self.color_out.forward(g, h)?;
        let color = g.sigmoid(c)?;
        Ok((sigma, color))
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![
            self.sigma.weight,
            self.sigma.bias,
            self.color_feat.weight,
            self.color_feat.bias,
            self.color_dir,
            self.color_out.weight,
            self.color_out.bias,
        ]
    }
}

/// Sanity bound for the concatenated sine features.
pub fn features_bounded(s: &Tensor) -> bool {
    s.data().iter().all(|v| (-1.0..=1.0).contains(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_check, ParamStore, TensorError};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> BackboneConfig {
        BackboneConfig {
            layers: 3,
            hidden: 6,
            omega0: 30.0,
            dir_frequencies: 2,
            color_hidden: 5,
        }
    }

    fn setup(seed: u64) -> (ParamStore, Backbone, RadianceHead) {
        let cfg = small();
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::init(&mut params, &mut rng);
        let bb = Backbone::build(&cfg, 9, None, &mut pb).unwrap();
        let head = RadianceHead::build(&cfg, 18, &mut pb).unwrap();
        (params, bb, head)
    }

    fn rand_t(rng: &mut impl Rng, r: usize, c: usize, s: f64) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-s..s)).collect())
    }

    fn unit_dirs(rng: &mut impl Rng, n: usize) -> Tensor {
        let mut data = Vec::new();
        for _ in 0..n {
            let v: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(v.map(|x| x / norm));
        }
        Tensor::matrix(n, 3, data)
    }

    fn tensor_err(e: Error) -> TensorError {
        match e {
            Error::Tensor(t) => t,
            o => panic!("{o}"),
        }
    }

    #[test]
    fn unit_theta_equals_unmodulated() {
        let (params, bb, _) = setup(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new(&params);
        let x = g.constant(rand_t(&mut rng, 4, 9, 1.0));
        let ones: Vec<Var> = (0..3).map(|_| g.constant(Tensor::full(4, 6, 1.0))).collect();
        let a = bb.modulated_forward(&mut g, x, Some(&ones), None).unwrap();
        let b = bb.modulated_forward(&mut g, x, None, None).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert!(g.value(a).data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_theta_gives_constant_layer() {
        let (params, bb, _) = setup(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new(&params);
        let x = g.constant(rand_t(&mut rng, 4, 9, 1.0));
        let mut theta: Vec<Var> = (0..3).map(|_| g.constant(Tensor::full(4, 6, 1.0))).collect();
        theta[1] = g.constant(Tensor::zeros(4, 6));
        let s = bb.modulated_forward(&mut g, x, Some(&theta), None).unwrap();
        let b2 = params.by_name("backbone/l2_b").unwrap();
        let t = g.value(s);
        for r in 0..4 {
            for k in 0..6 {
                assert_eq!(t.get(r, 6 + k), b2.data()[k].sin());
            }
        }
    }

    #[test]
    fn doubling_theta_doubles_preactivation() {
        let (params, bb, _) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new(&params);
        let prev = g.constant(rand_t(&mut rng, 3, 6, 1.0));
        let th = rand_t(&mut rng, 3, 6, 2.0);
        let t1 = g.constant(th.clone());
        let t2 = g.constant(th.map(|v| 2.0 * v));
        let a = bb.modulated_preactivation(&mut g, 1, prev, Some(t1)).unwrap();
        let b = bb.modulated_preactivation(&mut g, 1, prev, Some(t2)).unwrap();
        for (x, y) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn theta_layer_count_checked() {
        let (params, bb, _) = setup(6);
        let mut g = Graph::new(&params);
        let x = g.constant(Tensor::zeros(1, 9));
        let t = vec![g.constant(Tensor::full(1, 6, 1.0)); 2];
        assert!(matches!(
            bb.modulated_forward(&mut g, x, Some(&t), None),
            Err(Error::ThetaLayers { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn radiance_ranges_and_view_independent_density() {
        let (params, _, head) = setup(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = rand_t(&mut rng, 20, 18, 1.0);
        let d1 = unit_dirs(&mut rng, 20);
        let d2 = unit_dirs(&mut rng, 20);
        let mut g = Graph::new(&params);
        let sv = g.constant(s);
        let (s1, c1) = head.forward(&mut g, sv, &d1).unwrap();
        let (s2, c2) = head.forward(&mut g, sv, &d2).unwrap();
        assert!(g.value(s1).data().iter().all(|&v| v >= 0.0));
        assert!(g.value(c1).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(g.value(s1), g.value(s2));
        assert_ne!(g.value(c1), g.value(c2));
    }

    #[test]
    fn unnormalized_direction_rejected() {
        let (params, _, head) = setup(9);
        let mut g = Graph::new(&params);
        let s = g.constant(Tensor::zeros(1, 18));
        let d = Tensor::row(&[1.0, 1.0, 0.0]);
        assert!(matches!(
            head.forward(&mut g, s, &d),
            Err(Error::UnnormalizedDirection(_))
        ));
    }

    #[test]
    fn backbone_and_head_gradcheck() {
        let (params, bb, head) = setup(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // keep first-layer pre-activations moderate so FD truncation stays small
        let x = rand_t(&mut rng, 3, 9, 0.05);
        let th = rand_t(&mut rng, 3, 6, 1.5);
        let dirs = unit_dirs(&mut rng, 3);
        let probe = rand_t(&mut rng, 3, 4, 1.0);
        let report = finite_difference_check::<_, TensorError>(
            &params,
            |g| {
                let xv = g.constant(x.clone());
                let theta: Vec<Var> = (0..3).map(|_| g.constant(th.clone())).collect();
                let s = bb.modulated_forward(g, xv, Some(&theta), None).map_err(tensor_err)?;
                let (sigma, color) = head.forward(g, s, &dirs).map_err(tensor_err)?;
                let both = g.concat_cols(&[sigma, color])?;
                let pr = g.constant(probe.clone());
                let m = g.mul(both, pr)?;
                g.sum(m)
            },
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.passed(1e-4), "{report:?}");
    }
}
