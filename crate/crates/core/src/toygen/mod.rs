//! A small fully differentiable 3D-aware generator: latent mapping network,
//! camera-conditioned volumetric rendering at raw resolution, and a learned
//! 2x upsampler. It mirrors the structural contract of the big 3D GAN
//! backbones at desk scale so every optimization in the toolkit can run and
//! be verified without pretrained weights.

mod params;
mod render;

pub use params::{
    CameraPose, FieldWeights, GeneratorConfig, GeneratorParams, LatentCode, LatentOffset,
    MappingWeights, UpsamplerWeights,
};
pub use render::{
    map_latent_graph, render_raw_graph, upsample_graph, FieldVars, MappingVars, RenderPlan,
    UpsamplerVars,
};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::{Image, RawImage};
use ndarray::Array2;
use std::sync::{Arc, OnceLock};

/// Generator instance: parameters plus cached render geometry.
///
/// Evaluation (`map_latent`, `render_raw`, `upsample`, `generate`) is
/// read-only and safe to call from several threads; fine-tuning takes
/// `&mut self` and therefore excludes concurrent evaluation.
pub struct ToyGenerator {
    params: GeneratorParams,
    plan: OnceLock<Arc<RenderPlan>>,
}

impl ToyGenerator {
    pub fn new(config: GeneratorConfig) -> Result<ToyGenerator> {
        Ok(ToyGenerator {
            params: GeneratorParams::init(config)?,
            plan: OnceLock::new(),
        })
    }

    pub fn from_params(params: GeneratorParams) -> Result<ToyGenerator> {
        params.config.validate()?;
        Ok(ToyGenerator {
            params,
            plan: OnceLock::new(),
        })
    }

    pub fn params(&self) -> &GeneratorParams {
        &self.params
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.params.config
    }

    /// Replace trainable weights (fine-tuning). The render geometry depends
    /// only on the config, so the cached plan stays valid.
    pub fn set_weights(&mut self, mapping: MappingWeights, field: FieldWeights) {
        self.params.mapping = mapping;
        self.params.field = field;
    }

    pub fn set_upsampler(&mut self, upsampler: UpsamplerWeights) -> Result<()> {
        if self.params.upsampler_frozen {
            return Err(Error::invalid(
                "upsampler is frozen; refusing to replace its weights",
            ));
        }
        self.params.upsampler = upsampler;
        Ok(())
    }

    pub fn freeze_upsampler(&mut self) {
        self.params.upsampler_frozen = true;
    }

    pub fn plan(&self) -> &Arc<RenderPlan> {
        self.plan
            .get_or_init(|| Arc::new(RenderPlan::new(&self.params.config)))
    }

    pub fn pose(&self, yaw: f64, pitch: f64) -> Result<CameraPose> {
        CameraPose::new(yaw, pitch, &self.params.config)
    }

    /// Map a noise vector into w-space.
    pub fn map_latent(&self, z: &[f64]) -> Result<LatentCode> {
        let cfg = &self.params.config;
        if z.len() != cfg.d_z {
            return Err(Error::DimensionMismatch {
                expected: cfg.d_z,
                got: z.len(),
                context: "map_latent input".into(),
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("map_latent input must be finite"));
        }
        let mut g = Graph::new();
        let zv = g.constant(Array2::from_shape_vec((1, cfg.d_z), z.to_vec()).unwrap());
        let mv = MappingVars::new(&mut g, &self.params.mapping, false);
        let w = map_latent_graph(&mut g, &mv, zv);
        LatentCode::new(g.value(w).iter().copied().collect())
    }

    /// Mean of many mapped latents; the usual optimization start point.
    pub fn mean_latent(&self, n_samples: usize, seed: u64) -> Result<LatentCode> {
        use rand::Rng;
        let cfg = &self.params.config;
        let mut rng = crate::rng::stream(seed, "toygen/mean-latent");
        let mut acc = vec![0.0; cfg.d_latent];
        for _ in 0..n_samples.max(1) {
            let z: Vec<f64> = (0..cfg.d_z).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w = self.map_latent(&z)?;
            for (a, v) in acc.iter_mut().zip(w.values()) {
                *a += v;
            }
        }
        let n = n_samples.max(1) as f64;
        LatentCode::new(acc.into_iter().map(|v| v / n).collect())
    }

    fn check_latent(&self, w: &LatentCode) -> Result<()> {
        if w.dim() != self.params.config.d_latent {
            return Err(Error::DimensionMismatch {
                expected: self.params.config.d_latent,
                got: w.dim(),
                context: "latent dimension".into(),
            });
        }
        if w.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("latent must be finite"));
        }
        Ok(())
    }

    /// Volumetric render at raw resolution.
    pub fn render_raw(&self, w: &LatentCode, cam: &CameraPose) -> Result<RawImage> {
        self.check_latent(w)?;
        let cfg = &self.params.config;
        let mut g = Graph::new();
        let wv = g.constant(Array2::from_shape_vec((1, cfg.d_latent), w.values().to_vec()).unwrap());
        let yaw = g.scalar(cam.yaw);
        let pitch = g.scalar(cam.pitch);
        let fv = FieldVars::new(&mut g, &self.params.field, false);
        let chans = render_raw_graph(&mut g, self.plan(), cfg, &fv, wv, yaw, pitch);
        Ok(Image::from_arrays(chans.map(|c| g.value(c).clone())))
    }

    /// Learned 2x super-resolution of a raw render.
    pub fn upsample(&self, raw: &RawImage) -> Result<Image> {
        let cfg = &self.params.config;
        if raw.height() != cfg.raw_size || raw.width() != cfg.raw_size {
            return Err(Error::DimensionMismatch {
                expected: cfg.raw_size,
                got: raw.height(),
                context: "upsample input".into(),
            });
        }
        let mut g = Graph::new();
        let arrays = raw.to_arrays();
        let chans = arrays.map(|a| g.constant(a));
        let uv = UpsamplerVars::new(&mut g, &self.params.upsampler, false);
        let out = upsample_graph(&mut g, self.plan(), &uv, chans);
        Ok(Image::from_arrays(out.map(|c| g.value(c).clone())))
    }

    /// Raw render plus its upsampled image.
    pub fn generate(&self, w: &LatentCode, cam: &CameraPose) -> Result<(RawImage, Image)> {
        let raw = self.render_raw(w, cam)?;
        let full = self.upsample(&raw)?;
        Ok((raw, full))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Var;
    use rand::Rng;

    fn small_config(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            raw_size: 12,
            samples: 8,
            d_latent: 16,
            d_z: 8,
            map_hidden: 12,
            field_hidden: 12,
            seed,
            ..Default::default()
        }
    }

    fn test_gen(seed: u64) -> ToyGenerator {
        ToyGenerator::new(small_config(seed)).unwrap()
    }

    fn rand_latent(gen: &ToyGenerator, seed: u64) -> LatentCode {
        let mut rng = crate::rng::stream(seed, "test-latent");
        let z: Vec<f64> = (0..gen.config().d_z).map(|_| rng.random_range(-1.0..1.0)).collect();
        gen.map_latent(&z).unwrap()
    }

    #[test]
    fn map_latent_deterministic_and_distinct() {
        let gen = test_gen(3);
        let z0 = vec![0.0; gen.config().d_z];
        let a = gen.map_latent(&z0).unwrap();
        let b = gen.map_latent(&z0).unwrap();
        assert_eq!(a, b);

        let mut rng = crate::rng::stream(5, "pairs");
        for _ in 0..100 {
            let z1: Vec<f64> = (0..gen.config().d_z).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z2: Vec<f64> = (0..gen.config().d_z).map(|_| rng.random_range(-1.0..1.0)).collect();
            if z1 == z2 {
                continue;
            }
            let w1 = gen.map_latent(&z1).unwrap();
            let w2 = gen.map_latent(&z2).unwrap();
            let dist: f64 = w1
                .values()
                .iter()
                .zip(w2.values())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(dist > 0.0, "distinct z must map to distinct w");
        }
    }

    #[test]
    fn map_latent_rejects_bad_input() {
        let gen = test_gen(3);
        assert!(gen.map_latent(&[0.0; 3]).is_err());
        let mut z = vec![0.0; gen.config().d_z];
        z[0] = f64::NAN;
        assert!(gen.map_latent(&z).is_err());
    }

    #[test]
    fn render_is_deterministic_and_in_range() {
        let gen = test_gen(7);
        let w = rand_latent(&gen, 1);
        let cam = gen.pose(0.2, -0.1).unwrap();
        let a = gen.render_raw(&w, &cam).unwrap();
        let b = gen.render_raw(&w, &cam).unwrap();
        assert_eq!(a, b);
        assert!(a.all_in_unit_range());
        assert_eq!(a.height(), gen.config().raw_size);
    }

    #[test]
    fn yaw_sign_changes_the_render() {
        let gen = test_gen(7);
        let w = rand_latent(&gen, 2);
        let a = gen.render_raw(&w, &gen.pose(0.3, 0.0).unwrap()).unwrap();
        let b = gen.render_raw(&w, &gen.pose(-0.3, 0.0).unwrap()).unwrap();
        let l1: f64 = (0..3)
            .map(|c| {
                a.channel(c)
                    .iter()
                    .zip(b.channel(c))
                    .map(|(x, y)| (x - y).abs())
                    .sum::<f64>()
            })
            .sum();
        assert!(l1 > 0.0, "yaw +0.3 and -0.3 must render differently");
    }

    #[test]
    fn view_consistency_l1_shrinks_with_eps() {
        let gen = test_gen(9);
        let w = rand_latent(&gen, 3);
        let base = gen.render_raw(&w, &gen.pose(0.0, 0.0).unwrap()).unwrap();
        let l1_at = |eps: f64| {
            let img = gen.render_raw(&w, &gen.pose(eps, 0.0).unwrap()).unwrap();
            (0..3)
                .map(|c| {
                    base.channel(c)
                        .iter()
                        .zip(img.channel(c))
                        .map(|(x, y)| (x - y).abs())
                        .sum::<f64>()
                })
                .sum::<f64>()
        };
        let (a, b, c) = (l1_at(0.2), l1_at(0.1), l1_at(0.05));
        assert!(a > b && b > c, "L1 must shrink as the view step shrinks: {a} {b} {c}");
    }

    #[test]
    fn upsample_shape_and_constant_behavior() {
        let gen = test_gen(11);
        let size = gen.config().raw_size;
        let gray = Image::filled(size, size, [0.42, 0.42, 0.42]);
        let up = gen.upsample(&gray).unwrap();
        assert_eq!(up.height(), size * 2);
        assert_eq!(up.width(), size * 2);
        for c in 0..3 {
            for &v in up.channel(c) {
                assert!((v - 0.42).abs() < 0.05, "constant input should stay near itself: {v}");
            }
        }
    }

    #[test]
    fn generate_composes_render_and_upsample() {
        let gen = test_gen(13);
        let w = rand_latent(&gen, 4);
        let cam = gen.pose(-0.15, 0.1).unwrap();
        let (raw, full) = gen.generate(&w, &cam).unwrap();
        assert_eq!(raw, gen.render_raw(&w, &cam).unwrap());
        assert_eq!(full, gen.upsample(&raw).unwrap());
        assert_eq!(full.height(), raw.height() * gen.config().up_factor);
        assert!(full.all_in_unit_range());
    }

    /// Finite-difference check of render gradients w.r.t. latent and camera.
    #[test]
    fn render_gradients_match_finite_differences() {
        let gen = test_gen(17);
        let cfg = gen.config().clone();
        let w = rand_latent(&gen, 5);
        let plan = gen.plan().clone();

        // scalar probe: weighted sum of pixels with fixed random weights
        let mut rng = crate::rng::stream(23, "probe");
        let probe: [Array2<f64>; 3] = [(); 3].map(|_| {
            Array2::from_shape_fn((cfg.raw_size, cfg.raw_size), |_| rng.random_range(-1.0..1.0))
        });

        let eval = |wvals: &[f64], yaw: f64, pitch: f64| -> (f64, Vec<f64>, f64, f64) {
            let mut g = Graph::new();
            let wv = g.leaf(Array2::from_shape_vec((1, cfg.d_latent), wvals.to_vec()).unwrap());
            let yv = g.leaf_scalar(yaw);
            let pv = g.leaf_scalar(pitch);
            let fv = FieldVars::new(&mut g, &gen.params().field, false);
            let chans = render_raw_graph(&mut g, &plan, &cfg, &fv, wv, yv, pv);
            let mut loss: Option<Var> = None;
            for c in 0..3 {
                let pc = g.constant(probe[c].clone());
                let m = g.mul(chans[c], pc);
                let s = g.sum(m);
                loss = Some(match loss {
                    None => s,
                    Some(l) => g.add(l, s),
                });
            }
            let loss = loss.unwrap();
            let grads = g.backward(loss);
            let gw = grads.wrt(&g, wv).iter().copied().collect();
            let gy = grads.wrt(&g, yv)[[0, 0]];
            let gp = grads.wrt(&g, pv)[[0, 0]];
            (g.scalar_value(loss), gw, gy, gp)
        };

        let yaw0 = 0.17;
        let pitch0 = -0.11;
        let (_, gw, gy, gp) = eval(w.values(), yaw0, pitch0);

        let h = 1e-4;
        let rel = |a: f64, n: f64| (a - n).abs() / n.abs().max(a.abs()).max(1e-6);

        // camera gradients
        let fy = (eval(w.values(), yaw0 + h, pitch0).0 - eval(w.values(), yaw0 - h, pitch0).0) / (2.0 * h);
        assert!(rel(gy, fy) < 1e-3, "yaw grad: analytic {gy} vs fd {fy}");
        let fp = (eval(w.values(), yaw0, pitch0 + h).0 - eval(w.values(), yaw0, pitch0 - h).0) / (2.0 * h);
        assert!(rel(gp, fp) < 1e-3, "pitch grad: analytic {gp} vs fd {fp}");

        // a few random latent coordinates
        let mut rng = crate::rng::stream(29, "coords");
        for _ in 0..5 {
            let i = rng.random_range(0..cfg.d_latent);
            let mut wp = w.values().to_vec();
            let mut wm = w.values().to_vec();
            wp[i] += h;
            wm[i] -= h;
            let fd = (eval(&wp, yaw0, pitch0).0 - eval(&wm, yaw0, pitch0).0) / (2.0 * h);
            assert!(
                rel(gw[i], fd) < 1e-3,
                "latent grad {i}: analytic {} vs fd {fd}",
                gw[i]
            );
        }
    }

    #[test]
    fn upsample_gradients_match_finite_differences() {
        let gen = test_gen(19);
        let cfg = gen.config().clone();
        let plan = gen.plan().clone();
        let size = cfg.raw_size;
        let mut rng = crate::rng::stream(31, "up-in");
        let raw: [Array2<f64>; 3] =
            [(); 3].map(|_| Array2::from_shape_fn((size, size), |_| rng.random_range(0.2..0.8)));
        let probe: [Array2<f64>; 3] = [(); 3].map(|_| {
            Array2::from_shape_fn((size * 2, size * 2), |_| rng.random_range(-1.0..1.0))
        });

        let eval = |inputs: &[Array2<f64>; 3], wmat: &Array2<f64>| -> (f64, Array2<f64>, Array2<f64>) {
            let mut g = Graph::new();
            let chans = [0, 1, 2].map(|c| g.leaf(inputs[c].clone()));
            let uv = UpsamplerVars {
                w: g.leaf(wmat.clone()),
                b: g.constant(gen.params().upsampler.b.clone()),
            };
            let out = upsample_graph(&mut g, &plan, &uv, chans);
            let mut loss: Option<Var> = None;
            for c in 0..3 {
                let pc = g.constant(probe[c].clone());
                let m = g.mul(out[c], pc);
                let s = g.sum(m);
                loss = Some(match loss {
                    None => s,
                    Some(l) => g.add(l, s),
                });
            }
            let loss = loss.unwrap();
            let grads = g.backward(loss);
            (
                g.scalar_value(loss),
                grads.wrt(&g, chans[0]),
                grads.wrt(&g, uv.w),
            )
        };

        let (_, graw, gup) = eval(&raw, &gen.params().upsampler.w);
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / n.abs().max(a.abs()).max(1e-6);

        let mut rng = crate::rng::stream(37, "probe-idx");
        for _ in 0..4 {
            let y = rng.random_range(0..size);
            let x = rng.random_range(0..size);
            let mut rp = raw.clone();
            let mut rm = raw.clone();
            rp[0][[y, x]] += h;
            rm[0][[y, x]] -= h;
            let fd = (eval(&rp, &gen.params().upsampler.w).0 - eval(&rm, &gen.params().upsampler.w).0) / (2.0 * h);
            assert!(rel(graw[[y, x]], fd) < 1e-3, "raw grad at ({y},{x})");
        }
        for _ in 0..4 {
            let r = rng.random_range(0..27);
            let c = rng.random_range(0..12);
            let mut wp = gen.params().upsampler.w.clone();
            let mut wm = gen.params().upsampler.w.clone();
            wp[[r, c]] += h;
            wm[[r, c]] -= h;
            let fd = (eval(&raw, &wp).0 - eval(&raw, &wm).0) / (2.0 * h);
            assert!(rel(gup[[r, c]], fd) < 1e-3, "upsampler weight grad at ({r},{c})");
        }
    }
}
