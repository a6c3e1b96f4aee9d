//! Differentiable rendering: analytic camera rays from (yaw, pitch) on the
//! viewing sphere, ray marching through a latent-conditioned coordinate MLP,
//! and the learned 2x logit-space upsampler. Everything is expressed on the
//! autodiff [`Graph`] so the same code path serves plain evaluation and
//! every optimization stage.

use super::params::{FieldWeights, GeneratorConfig, MappingWeights, UpsamplerWeights};
use crate::graph::{Graph, Var};
use ndarray::Array2;
use std::rc::Rc;

/// Precomputed constants and index tables for one generator geometry.
pub struct RenderPlan {
    pub n_pix: usize,
    pub samples: usize,
    /// NDC coordinates per raw pixel, `[n_pix, 1]` each.
    pub ndc_x: Array2<f64>,
    pub ndc_y: Array2<f64>,
    /// Ray sample depths, `[n_pix * samples, 1]`.
    pub t_vals: Array2<f64>,
    /// Spacing between consecutive samples.
    pub delta_t: f64,
    /// Replicates per-pixel ray directions to per-sample rows.
    pub dir_rep_idx: Rc<Vec<usize>>,
    /// Extracts color channel c from the `[n_pts, 3]` head output into
    /// `[n_pix, samples]`.
    pub rgb_idx: [Rc<Vec<usize>>; 3],
    /// Low-frequency cosine basis for the latent skip, `[n_pix, basis]`.
    pub skip_basis: Array2<f64>,
    /// 3x3 edge-clamped patch gather for the upsampler, from one `[H, W]`
    /// channel into `[H*W, 9]`.
    pub im2col_idx: Rc<Vec<usize>>,
    /// Pixel-shuffle gather per channel from `[H*W, 12]` into `[2H, 2W]`.
    pub shuffle_idx: [Rc<Vec<usize>>; 3],
    pub posenc_freqs: usize,
}

impl RenderPlan {
    pub fn new(cfg: &GeneratorConfig) -> RenderPlan {
        let h = cfg.raw_size;
        let w = cfg.raw_size;
        let n_pix = h * w;
        let s = cfg.samples;
        let n_pts = n_pix * s;

        let mut ndc_x = Array2::zeros((n_pix, 1));
        let mut ndc_y = Array2::zeros((n_pix, 1));
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                ndc_x[[i, 0]] = (x as f64 + 0.5) / w as f64 * 2.0 - 1.0;
                // image y grows downward; world y grows upward
                ndc_y[[i, 0]] = -((y as f64 + 0.5) / h as f64 * 2.0 - 1.0);
            }
        }

        let delta_t = (cfg.far - cfg.near) / s as f64;
        let mut t_vals = Array2::zeros((n_pts, 1));
        for p in 0..n_pix {
            for k in 0..s {
                t_vals[[p * s + k, 0]] = cfg.near + (k as f64 + 0.5) * delta_t;
            }
        }

        let mut dir_rep = Vec::with_capacity(n_pts * 3);
        for p in 0..n_pix {
            for _ in 0..s {
                for c in 0..3 {
                    dir_rep.push(p * 3 + c);
                }
            }
        }

        let rgb_idx = [0, 1, 2].map(|c| {
            let mut idx = Vec::with_capacity(n_pts);
            for p in 0..n_pix {
                for k in 0..s {
                    idx.push((p * s + k) * 3 + c);
                }
            }
            Rc::new(idx)
        });

        let m = cfg.skip_terms;
        let mut skip_basis = Array2::zeros((n_pix, m * m));
        for u in 0..m {
            for v in 0..m {
                let col = u * m + v;
                for y in 0..h {
                    for x in 0..w {
                        let by = (std::f64::consts::PI * u as f64 * (y as f64 + 0.5) / h as f64).cos();
                        let bx = (std::f64::consts::PI * v as f64 * (x as f64 + 0.5) / w as f64).cos();
                        skip_basis[[y * w + x, col]] = by * bx;
                    }
                }
                let norm = skip_basis.column(col).mapv(|v| v * v).sum().sqrt();
                skip_basis.column_mut(col).mapv_inplace(|v| v / norm);
            }
        }

        let clampi = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
        let mut im2col = Vec::with_capacity(n_pix * 9);
        for y in 0..h {
            for x in 0..w {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = clampi(y as i64 + dy, h);
                        let xx = clampi(x as i64 + dx, w);
                        im2col.push(yy * w + xx);
                    }
                }
            }
        }

        let f = cfg.up_factor;
        debug_assert_eq!(f, 2, "pixel-shuffle plan is built for factor 2");
        let (oh, ow) = (h * 2, w * 2);
        let shuffle_idx = [0, 1, 2].map(|c| {
            let mut idx = Vec::with_capacity(oh * ow);
            for y in 0..oh {
                for x in 0..ow {
                    let pix = (y / 2) * w + x / 2;
                    let col = c * 4 + (y % 2) * 2 + (x % 2);
                    idx.push(pix * 12 + col);
                }
            }
            Rc::new(idx)
        });

        RenderPlan {
            n_pix,
            samples: s,
            ndc_x,
            ndc_y,
            t_vals,
            delta_t,
            dir_rep_idx: Rc::new(dir_rep),
            rgb_idx,
            skip_basis,
            im2col_idx: Rc::new(im2col),
            shuffle_idx,
            posenc_freqs: cfg.posenc_freqs,
        }
    }
}

/// Graph handles for mapping-network weights.
pub struct MappingVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MappingVars {
    pub fn new(g: &mut Graph, w: &MappingWeights, trainable: bool) -> MappingVars {
        let mut mk = |a: &Array2<f64>| {
            if trainable {
                g.leaf(a.clone())
            } else {
                g.constant(a.clone())
            }
        };
        MappingVars {
            w1: mk(&w.w1),
            b1: mk(&w.b1),
            w2: mk(&w.w2),
            b2: mk(&w.b2),
        }
    }
}

pub struct FieldVars {
    pub w_proj: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w_sigma: Var,
    pub b_sigma: Var,
    pub w_color: Var,
    pub b_color: Var,
    pub skip: [Var; 3],
}

impl FieldVars {
    pub fn new(g: &mut Graph, w: &FieldWeights, trainable: bool) -> FieldVars {
        let mut mk = |a: &Array2<f64>| {
            if trainable {
                g.leaf(a.clone())
            } else {
                g.constant(a.clone())
            }
        };
        FieldVars {
            w_proj: mk(&w.w_proj),
            w1: mk(&w.w1),
            b1: mk(&w.b1),
            w2: mk(&w.w2),
            b2: mk(&w.b2),
            w_sigma: mk(&w.w_sigma),
            b_sigma: mk(&w.b_sigma),
            w_color: mk(&w.w_color),
            b_color: mk(&w.b_color),
            skip: [mk(&w.skip[0]), mk(&w.skip[1]), mk(&w.skip[2])],
        }
    }

    pub fn all_vars(&self) -> Vec<Var> {
        vec![
            self.w_proj, self.w1, self.b1, self.w2, self.b2, self.w_sigma, self.b_sigma,
            self.w_color, self.b_color, self.skip[0], self.skip[1], self.skip[2],
        ]
    }
}

pub struct UpsamplerVars {
    pub w: Var,
    pub b: Var,
}

impl UpsamplerVars {
    pub fn new(g: &mut Graph, w: &UpsamplerWeights, trainable: bool) -> UpsamplerVars {
        let mut mk = |a: &Array2<f64>| {
            if trainable {
                g.leaf(a.clone())
            } else {
                g.constant(a.clone())
            }
        };
        UpsamplerVars {
            w: mk(&w.w),
            b: mk(&w.b),
        }
    }
}

/// `z [1, d_z] -> w [1, D]`.
pub fn map_latent_graph(g: &mut Graph, mv: &MappingVars, z: Var) -> Var {
    let h = g.matmul(z, mv.w1);
    let h = g.add(h, mv.b1);
    let h = g.softsign(h);
    let w = g.matmul(h, mv.w2);
    g.add(w, mv.b2)
}

/// Unit camera basis from yaw/pitch; returns (origin `[1,3]`, right, up,
/// forward). The camera sits on a sphere of the configured radius and looks
/// at the world origin.
fn camera_basis(g: &mut Graph, cfg: &GeneratorConfig, yaw: Var, pitch: Var) -> (Var, Var, Var, Var) {
    let sy = g.sin(yaw);
    let cy = g.cos(yaw);
    let sp = g.sin(pitch);
    let cp = g.cos(pitch);

    // origin = radius * (cp*sy, sp, cp*cy)
    let ox = g.mul(cp, sy);
    let oz = g.mul(cp, cy);
    let origin_unit = g.concat_cols(&[ox, sp, oz]);
    let origin = g.scale(origin_unit, cfg.radius);

    // forward = -origin/radius (unit, towards world origin)
    let fx = g.neg(ox);
    let fy = g.neg(sp);
    let fz = g.neg(oz);

    // right = normalize(cross(forward, world_up)) = (-fz, 0, fx)/|.|
    let sq = {
        let a = g.mul(fx, fx);
        let b = g.mul(fz, fz);
        g.add(a, b)
    };
    let norm = g.sqrt(sq);
    let rx = {
        let n = g.neg(fz);
        g.div(n, norm)
    };
    let rz = g.div(fx, norm);
    let zero = g.scalar(0.0);
    let right = g.concat_cols(&[rx, zero, rz]);

    // up = cross(right, forward) = (-fx*fy, fx^2+fz^2, -fy*fz)/|.|
    let ux = {
        let t = g.mul(fx, fy);
        let t = g.neg(t);
        g.div(t, norm)
    };
    let uy = norm; // (fx^2+fz^2)/sqrt(fx^2+fz^2)
    let uz = {
        let t = g.mul(fy, fz);
        let t = g.neg(t);
        g.div(t, norm)
    };
    let up = g.concat_cols(&[ux, uy, uz]);

    let forward = g.concat_cols(&[fx, fy, fz]);
    (origin, right, up, forward)
}

/// Positional encoding `[P, sin(2^k pi P), cos(2^k pi P)]`.
fn posenc(g: &mut Graph, points: Var, freqs: usize) -> Var {
    let mut parts = vec![points];
    for k in 0..freqs {
        let f = std::f64::consts::PI * (1 << k) as f64;
        let scaled = g.scale(points, f);
        parts.push(g.sin(scaled));
        parts.push(g.cos(scaled));
    }
    g.concat_cols(&parts)
}

/// Render raw-resolution pixel channels (each `[H, W]`, values in `[0,1]`).
pub fn render_raw_graph(
    g: &mut Graph,
    plan: &RenderPlan,
    cfg: &GeneratorConfig,
    fv: &FieldVars,
    w: Var,
    yaw: Var,
    pitch: Var,
) -> [Var; 3] {
    let side = (plan.n_pix as f64).sqrt() as usize;
    let (origin, right, up, forward) = camera_basis(g, cfg, yaw, pitch);

    // per-pixel ray directions
    let focal = 1.0 / (cfg.fov_deg.to_radians() / 2.0).tan();
    let xs = g.constant(plan.ndc_x.clone());
    let ys = g.constant(plan.ndc_y.clone());
    let ones = g.constant(Array2::from_elem((plan.n_pix, 1), 1.0));
    let dir = {
        let a = g.matmul(xs, right);
        let b = g.matmul(ys, up);
        let fscaled = g.scale(forward, focal);
        let c = g.matmul(ones, fscaled);
        let ab = g.add(a, b);
        g.add(ab, c)
    };
    let dir = {
        let sq = g.mul(dir, dir);
        let n2 = g.sum_cols(sq);
        let n = g.sqrt(n2);
        g.div(dir, n)
    };

    // sample positions along each ray
    let n_pts = plan.n_pix * plan.samples;
    let dir_rep = g.gather(dir, plan.dir_rep_idx.clone(), n_pts, 3);
    let t = g.constant(plan.t_vals.clone());
    let points = {
        let td = g.mul(dir_rep, t);
        g.add(td, origin)
    };

    // field MLP
    let feats = posenc(g, points, plan.posenc_freqs);
    let style = g.matmul(w, fv.w_proj);
    let h1 = {
        let a = g.matmul(feats, fv.w1);
        let a = g.add(a, style);
        let a = g.add(a, fv.b1);
        g.softsign(a)
    };
    let h2 = {
        let a = g.matmul(h1, fv.w2);
        let a = g.add(a, fv.b2);
        g.softsign(a)
    };
    let density = {
        let a = g.matmul(h2, fv.w_sigma);
        let a = g.add(a, fv.b_sigma);
        let sp = g.softplus(a);
        // compact-support falloff keeps the scene a blob near blob_center
        let center = g.constant(Array2::from_shape_vec((1, 3), cfg.blob_center.to_vec()).unwrap());
        let d = g.sub(points, center);
        let d2 = g.mul(d, d);
        let r2 = g.sum_cols(d2);
        let falloff = {
            let s = g.scale(r2, -1.0 / (cfg.blob_radius * cfg.blob_radius));
            g.exp(s)
        };
        g.mul(sp, falloff)
    };
    let rgb_logits = {
        let a = g.matmul(h2, fv.w_color);
        g.add(a, fv.b_color)
    };

    // volumetric compositing
    let sigma_dt = {
        let d = g.reshape(density, plan.n_pix, plan.samples);
        g.scale(d, plan.delta_t)
    };
    let alpha = {
        let e = g.neg(sigma_dt);
        let e = g.exp(e);
        let e = g.neg(e);
        g.add_scalar(e, 1.0)
    };
    let trans = {
        let c = g.excl_cumsum_cols(sigma_dt);
        let c = g.neg(c);
        g.exp(c)
    };
    let weights = g.mul(trans, alpha);
    let acc_alpha = g.sum_cols(weights);

    let bg_logits = [-0.9, -0.8, -0.6]; // dim bluish background
    let skip_basis = g.constant(plan.skip_basis.clone());
    let d_latent = cfg.d_latent;
    let w_colv = g.reshape(w, d_latent, 1);

    [0, 1, 2].map(|c| {
        let rgb_c = g.gather(rgb_logits, plan.rgb_idx[c].clone(), plan.n_pix, plan.samples);
        let contrib = g.mul(weights, rgb_c);
        let acc = g.sum_cols(contrib);
        let bg = {
            let t = g.scale(acc_alpha, -bg_logits[c]);
            g.add_scalar(t, bg_logits[c]) // bg * (1 - acc_alpha)
        };
        let logit = g.add(acc, bg);
        let logit = {
            let sv = g.matmul(fv.skip[c], w_colv);
            let spix = g.matmul(skip_basis, sv);
            let spix = g.scale(spix, cfg.skip_gain);
            g.add(logit, spix)
        };
        let px = g.sigmoid(logit);
        g.reshape(px, side, side)
    })
}

/// 2x learned upsampling in logit space; input/output channels are `[H, W]`
/// and `[2H, 2W]` in `[0, 1]`.
pub fn upsample_graph(
    g: &mut Graph,
    plan: &RenderPlan,
    uv: &UpsamplerVars,
    raw: [Var; 3],
) -> [Var; 3] {
    let (h, w) = {
        let d = g.value(raw[0]).dim();
        (d.0, d.1)
    };
    let n = h * w;
    let eps = 1e-4;
    let logits: Vec<Var> = raw
        .iter()
        .map(|&ch| {
            let cl = g.clamp(ch, eps, 1.0 - eps);
            let lx = g.ln(cl);
            let om = {
                let neg = g.neg(cl);
                g.add_scalar(neg, 1.0)
            };
            let lom = g.ln(om);
            g.sub(lx, lom)
        })
        .collect();

    let patches: Vec<Var> = logits
        .iter()
        .map(|&lc| g.gather(lc, plan.im2col_idx.clone(), n, 9))
        .collect();
    let stacked = g.concat_cols(&patches);
    let out12 = {
        let m = g.matmul(stacked, uv.w);
        g.add(m, uv.b)
    };
    [0, 1, 2].map(|c| {
        let shuffled = g.gather(out12, plan.shuffle_idx[c].clone(), 2 * h, 2 * w);
        g.sigmoid(shuffled)
    })
}
