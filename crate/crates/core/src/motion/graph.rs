//! Differentiable keypoint and flow operations recorded on the tape.

use microanim_tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{to_normalized, SINGULAR_DET};
use crate::{Error, Result};

fn grid(h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    (
        (0..w).map(|x| to_normalized(x as f64, w)).collect(),
        (0..h).map(|y| to_normalized(y as f64, h)).collect(),
    )
}

fn hw(shape: &[usize]) -> (usize, usize) {
    (shape[shape.len() - 2], shape[shape.len() - 1])
}

/// Expected normalized coordinates of `K×H×W` probability maps, `K×2`.
pub fn expected_coords(t: &mut Tape, probs: Var) -> Result<Var> {
    let p = t.value(probs);
    let k = p.shape()[0];
    let (h, w) = hw(p.shape());
    let (gx, gy) = grid(h, w);
    let mut out = vec![0.0; 2 * k];
    for i in 0..k {
        let pk = p.channel(i);
        for y in 0..h {
            for x in 0..w {
                let v = pk[y * w + x];
                out[2 * i] += v * gx[x];
                out[2 * i + 1] += v * gy[y];
            }
        }
    }
    let value = Tensor::new(&[k, 2], out)?;
    Ok(t.custom("expected_coords", &[probs], value, move |ins: &[&Tensor], _: &Tensor, g: &Tensor| {
        let shape = ins[0].shape();
        let mut d = vec![0.0; ins[0].len()];
        for i in 0..k {
            let (ax, ay) = (g.data()[2 * i], g.data()[2 * i + 1]);
            for y in 0..h {
                for x in 0..w {
                    d[(i * h + y) * w + x] = ax * gx[x] + ay * gy[y];
                }
            }
        }
        vec![Some(Tensor::new(shape, d).expect("shape"))]
    })?)
}

/// Weighted spatial sums: `out[k, m] = Σ probs[k] · feats[k·M + m]`, `K×M`.
pub fn heatmap_pool(t: &mut Tape, probs: Var, feats: Var) -> Result<Var> {
    let (p, f) = (t.value(probs), t.value(feats));
    let k = p.shape()[0];
    let plane = p.len() / k;
    if f.shape()[0] % k != 0 || f.len() / f.shape()[0] != plane {
        return Err(Error::invalid(format!(
            "heatmap_pool: {:?} maps cannot weight {:?} features",
            p.shape(),
            f.shape()
        )));
    }
    let m = f.shape()[0] / k;
    let mut out = vec![0.0; k * m];
    for i in 0..k {
        let pk = p.channel(i);
        for j in 0..m {
            out[i * m + j] = pk.iter().zip(f.channel(i * m + j)).map(|(a, b)| a * b).sum();
        }
    }
    let value = Tensor::new(&[k, m], out)?;
    Ok(t.custom("heatmap_pool", &[probs, feats], value, move |ins: &[&Tensor], _: &Tensor, g: &Tensor| {
        let (p, f) = (ins[0], ins[1]);
        let mut dp = vec![0.0; p.len()];
        let mut df = vec![0.0; f.len()];
        for i in 0..k {
            let pk = p.channel(i);
            for j in 0..m {
                let gij = g.data()[i * m + j];
                let fc = f.channel(i * m + j);
                let c = i * m + j;
                for px in 0..plane {
                    dp[i * plane + px] += gij * fc[px];
                    df[c * plane + px] = gij * pk[px];
                }
            }
        }
        vec![
            Some(Tensor::new(p.shape(), dp).expect("shape")),
            Some(Tensor::new(f.shape(), df).expect("shape")),
        ]
    })?)
}

/// Gaussian blobs `exp(-|z - p_k|² / (2·variance))` at `K×2` normalized
/// positions, `K×H×W`.
pub fn gaussian_heatmaps(t: &mut Tape, positions: Var, (h, w): (usize, usize), variance: f64) -> Result<Var> {
    let pos = t.value(positions);
    let k = pos.shape()[0];
    let (gx, gy) = grid(h, w);
    let mut out = Vec::with_capacity(k * h * w);
    for i in 0..k {
        let (px, py) = (pos.data()[2 * i], pos.data()[2 * i + 1]);
        for &yn in &gy {
            for &xn in &gx {
                out.push((-0.5 * ((xn - px).powi(2) + (yn - py).powi(2)) / variance).exp());
            }
        }
    }
    let value = Tensor::new(&[k, h, w], out)?;
    Ok(t.custom("gaussian_heatmaps", &[positions], value, move |ins: &[&Tensor], out: &Tensor, g: &Tensor| {
        let pos = ins[0];
        let mut d = vec![0.0; 2 * k];
        for i in 0..k {
            let (px, py) = (pos.data()[2 * i], pos.data()[2 * i + 1]);
            let (o, gk) = (out.channel(i), g.channel(i));
            for (y, &yn) in gy.iter().enumerate() {
                for (x, &xn) in gx.iter().enumerate() {
                    let s = gk[y * w + x] * o[y * w + x] / variance;
                    d[2 * i] += s * (xn - px);
                    d[2 * i + 1] += s * (yn - py);
                }
            }
        }
        vec![Some(Tensor::new(&[k, 2], d).expect("shape"))]
    })?)
}

fn inv2(j: &[f64]) -> Option<[f64; 4]> {
    let det = j[0] * j[3] - j[1] * j[2];
    if det.abs() <= SINGULAR_DET {
        return None;
    }
    Some([j[3] / det, -j[1] / det, -j[2] / det, j[0] / det])
}

fn mul2(a: &[f64], b: &[f64]) -> [f64; 4] {
    [
        a[0] * b[0] + a[1] * b[2],
        a[0] * b[1] + a[1] * b[3],
        a[2] * b[0] + a[3] * b[2],
        a[2] * b[1] + a[3] * b[3],
    ]
}

fn transpose2(a: &[f64]) -> [f64; 4] {
    [a[0], a[2], a[1], a[3]]
}

/// Per-keypoint displacement fields `A_k(z) - z` over a normalized grid,
/// `K×2×H×W`, with `A_k(z) = p_t + J_t J_d⁻¹ (z - p_d)`.
///
/// Positions are `K×2`, Jacobians `K×4` row-major.
pub fn sparse_flows(
    t: &mut Tape,
    kp_target: Var,
    jac_target: Var,
    kp_driving: Var,
    jac_driving: Var,
    (h, w): (usize, usize),
) -> Result<Var> {
    let k = t.value(kp_target).shape()[0];
    t.value(kp_driving).expect_shape(&[k, 2])?;
    for v in [jac_target, jac_driving] {
        t.value(v).expect_shape(&[k, 4])?;
    }
    let (gx, gy) = grid(h, w);
    let (pt, jt, pd, jd) = (
        t.value(kp_target).data(),
        t.value(jac_target).data(),
        t.value(kp_driving).data(),
        t.value(jac_driving).data(),
    );
    let mut lin = Vec::with_capacity(k);
    for i in 0..k {
        let n = inv2(&jd[4 * i..4 * i + 4]).ok_or_else(|| {
            Error::Numeric(format!("driving Jacobian of keypoint {i} is singular"))
        })?;
        lin.push(mul2(&jt[4 * i..4 * i + 4], &n));
    }
    let plane = h * w;
    let mut out = vec![0.0; k * 2 * plane];
    for i in 0..k {
        let m = &lin[i];
        let (tx, ty) = (pt[2 * i], pt[2 * i + 1]);
        let (dx, dy) = (pd[2 * i], pd[2 * i + 1]);
        let base = i * 2 * plane;
        for (y, &yn) in gy.iter().enumerate() {
            for (x, &xn) in gx.iter().enumerate() {
                let (ux, uy) = (xn - dx, yn - dy);
                out[base + y * w + x] = tx + m[0] * ux + m[1] * uy - xn;
                out[base + plane + y * w + x] = ty + m[2] * ux + m[3] * uy - yn;
            }
        }
    }
    let value = Tensor::new(&[k, 2, h, w], out)?;
    let inputs = [kp_target, jac_target, kp_driving, jac_driving];
    Ok(t.custom("sparse_flows", &inputs, value, move |ins: &[&Tensor], _: &Tensor, g: &Tensor| {
        let (jt, pd, jd) = (ins[1].data(), ins[2].data(), ins[3].data());
        let mut d_pt = vec![0.0; 2 * k];
        let mut d_jt = vec![0.0; 4 * k];
        let mut d_pd = vec![0.0; 2 * k];
        let mut d_jd = vec![0.0; 4 * k];
        let gd = g.data();
        for i in 0..k {
            let base = i * 2 * plane;
            let (px, py) = (pd[2 * i], pd[2 * i + 1]);
            let (mut sx, mut sy) = (0.0, 0.0);
            let mut dm = [0.0; 4];
            for (y, &yn) in gy.iter().enumerate() {
                for (x, &xn) in gx.iter().enumerate() {
                    let g0 = gd[base + y * w + x];
                    let g1 = gd[base + plane + y * w + x];
                    sx += g0;
                    sy += g1;
                    let (ux, uy) = (xn - px, yn - py);
                    dm[0] += g0 * ux;
                    dm[1] += g0 * uy;
                    dm[2] += g1 * ux;
                    dm[3] += g1 * uy;
                }
            }
            let jti = &jt[4 * i..4 * i + 4];
            let n = inv2(&jd[4 * i..4 * i + 4]).expect("checked in forward");
            let m = mul2(jti, &n);
            d_pt[2 * i] = sx;
            d_pt[2 * i + 1] = sy;
            d_pd[2 * i] = -(m[0] * sx + m[2] * sy);
            d_pd[2 * i + 1] = -(m[1] * sx + m[3] * sy);
            let djt = mul2(&dm, &transpose2(&n));
            let dn = mul2(&transpose2(jti), &dm);
            let nt = transpose2(&n);
            let djd = mul2(&mul2(&nt, &dn), &nt);
            for j in 0..4 {
                d_jt[4 * i + j] = djt[j];
                d_jd[4 * i + j] = -djd[j];
            }
        }
        vec![
            Some(Tensor::new(&[k, 2], d_pt).expect("shape")),
            Some(Tensor::new(&[k, 4], d_jt).expect("shape")),
            Some(Tensor::new(&[k, 2], d_pd).expect("shape")),
            Some(Tensor::new(&[k, 4], d_jd).expect("shape")),
        ]
    })?)
}

/// Attention-weighted sum of `K` flows plus a zero background flow.
///
/// `attention` is `(K+1)×H×W` with the background first; `flows` is
/// `K×2×H×W`. Returns `2×H×W`.
pub fn combine_flows(t: &mut Tape, attention: Var, flows: Var) -> Result<Var> {
    let (a, f) = (t.value(attention), t.value(flows));
    let k = f.shape()[0];
    let (h, w) = hw(f.shape());
    if a.shape() != [k + 1, h, w] || f.shape() != [k, 2, h, w] {
        return Err(Error::invalid(format!(
            "combine_flows: attention {:?} does not match flows {:?}",
            a.shape(),
            f.shape()
        )));
    }
    let plane = h * w;
    let mut out = vec![0.0; 2 * plane];
    for i in 0..k {
        let ai = a.channel(i + 1);
        for c in 0..2 {
            let fc = &f.data()[(i * 2 + c) * plane..(i * 2 + c + 1) * plane];
            for px in 0..plane {
                out[c * plane + px] += ai[px] * fc[px];
            }
        }
    }
    let value = Tensor::new(&[2, h, w], out)?;
    Ok(t.custom("combine_flows", &[attention, flows], value, move |ins: &[&Tensor], _: &Tensor, g: &Tensor| {
        let (a, f) = (ins[0], ins[1]);
        let mut da = vec![0.0; a.len()];
        let mut df = vec![0.0; f.len()];
        let gd = g.data();
        for i in 0..k {
            let ai = a.channel(i + 1);
            for c in 0..2 {
                let off = (i * 2 + c) * plane;
                for px in 0..plane {
                    let gc = gd[c * plane + px];
                    da[(i + 1) * plane + px] += gc * f.data()[off + px];
                    df[off + px] = gc * ai[px];
                }
            }
        }
        vec![
            Some(Tensor::new(a.shape(), da).expect("shape")),
            Some(Tensor::new(f.shape(), df).expect("shape")),
        ]
    })?)
}

/// Random thin-plate-spline deformation of normalized coordinates:
/// `T(z) = A z + b + Σ_i w_i · U(|z - c_i|)` with `U(r) = r² ln(r + ε)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tps {
    pub linear: [f64; 4],
    pub offset: [f64; 2],
    pub centers: Vec<[f64; 2]>,
    pub weights: Vec<[f64; 2]>,
}

const TPS_EPS: f64 = 1e-6;

impl Tps {
    /// Identity affine part perturbed by `N(0, sigma_affine)`, `grid × grid`
    /// control points on `[-1, 1]²` with `N(0, sigma_tps)` weights.
    pub fn random(rng: &mut impl Rng, sigma_affine: f64, sigma_tps: f64, grid: usize) -> Self {
        let na = Normal::new(0.0, sigma_affine).expect("valid sigma");
        let nt = Normal::new(0.0, sigma_tps).expect("valid sigma");
        let linear = [1.0 + na.sample(rng), na.sample(rng), na.sample(rng), 1.0 + na.sample(rng)];
        let offset = [na.sample(rng), na.sample(rng)];
        let mut centers = Vec::new();
        let mut weights = Vec::new();
        for i in 0..grid {
            for j in 0..grid {
                centers.push([to_normalized(j as f64, grid), to_normalized(i as f64, grid)]);
                weights.push([nt.sample(rng), nt.sample(rng)]);
            }
        }
        Self {
            linear,
            offset,
            centers,
            weights,
        }
    }

    pub fn identity() -> Self {
        Self {
            linear: [1.0, 0.0, 0.0, 1.0],
            offset: [0.0, 0.0],
            centers: vec![],
            weights: vec![],
        }
    }

    pub fn apply(&self, z: [f64; 2]) -> [f64; 2] {
        let a = &self.linear;
        let mut out = [
            a[0] * z[0] + a[1] * z[1] + self.offset[0],
            a[2] * z[0] + a[3] * z[1] + self.offset[1],
        ];
        for (c, wgt) in self.centers.iter().zip(&self.weights) {
            let r = (z[0] - c[0]).hypot(z[1] - c[1]);
            let u = r * r * (r + TPS_EPS).ln();
            out[0] += wgt[0] * u;
            out[1] += wgt[1] * u;
        }
        out
    }

    /// Row-major Jacobian `∂T/∂z`.
    pub fn jacobian(&self, z: [f64; 2]) -> [f64; 4] {
        let mut j = self.linear;
        for (c, wgt) in self.centers.iter().zip(&self.weights) {
            let (ux, uy) = (z[0] - c[0], z[1] - c[1]);
            let r = ux.hypot(uy);
            // dU/dz = (2 ln(r + ε) + r / (r + ε)) · (z - c)
            let s = 2.0 * (r + TPS_EPS).ln() + r / (r + TPS_EPS);
            j[0] += wgt[0] * s * ux;
            j[1] += wgt[0] * s * uy;
            j[2] += wgt[1] * s * ux;
            j[3] += wgt[1] * s * uy;
        }
        j
    }

    /// Backward flow in pixels that resamples an image of `size` so that
    /// output pixel `z` reads the input at `T(z)`.
    pub fn pixel_flow(&self, (h, w): (usize, usize)) -> Tensor {
        let [sx, sy] = super::pixel_scale((h, w));
        let (gx, gy) = grid(h, w);
        let mut out = vec![0.0; 2 * h * w];
        for (y, &yn) in gy.iter().enumerate() {
            for (x, &xn) in gx.iter().enumerate() {
                let [tx, ty] = self.apply([xn, yn]);
                out[y * w + x] = (tx - xn) * sx;
                out[h * w + y * w + x] = (ty - yn) * sy;
            }
        }
        Tensor::new(&[2, h, w], out).expect("shape")
    }
}

/// Applies a [`Tps`] to `K×2` normalized points.
pub fn tps_points(t: &mut Tape, points: Var, tps: &Tps) -> Result<Var> {
    let p = t.value(points);
    let k = p.shape()[0];
    p.expect_shape(&[k, 2])?;
    let out: Vec<f64> = (0..k).flat_map(|i| tps.apply([p.data()[2 * i], p.data()[2 * i + 1]])).collect();
    let value = Tensor::new(&[k, 2], out)?;
    let tps = tps.clone();
    Ok(t.custom("tps_points", &[points], value, move |ins: &[&Tensor], _: &Tensor, g: &Tensor| {
        let p = ins[0].data();
        let mut d = vec![0.0; 2 * k];
        for i in 0..k {
            let j = tps.jacobian([p[2 * i], p[2 * i + 1]]);
            let (g0, g1) = (g.data()[2 * i], g.data()[2 * i + 1]);
            d[2 * i] = g0 * j[0] + g1 * j[2];
            d[2 * i + 1] = g0 * j[1] + g1 * j[3];
        }
        vec![Some(Tensor::new(&[k, 2], d).expect("shape"))]
    })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use microanim_tensor::gradcheck::check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    fn project(t: &mut Tape, v: Var, seed: u64) -> microanim_tensor::Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = t.constant(random(t.shape(v), -1.0, 1.0, &mut rng));
        let p = t.mul(v, w)?;
        t.sum(p)
    }

    fn lift(r: Result<Var>) -> microanim_tensor::Result<Var> {
        r.map_err(|e| microanim_tensor::Error::Domain(e.to_string()))
    }

    #[test]
    fn keypoint_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let logits = random(&[3, 5, 6], -1.0, 1.0, &mut rng);
        let feats = random(&[12, 5, 6], -1.0, 1.0, &mut rng);
        let r = check(&[logits.clone(), feats], 1e-5, 1e-6, None, |t, v| {
            let p = t.spatial_softmax(v[0], 0.5)?;
            let c = lift(expected_coords(t, p))?;
            let j = lift(heatmap_pool(t, p, v[1]))?;
            let a = project(t, c, 1)?;
            let b = project(t, j, 2)?;
            t.add(a, b)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");

        let pos = random(&[3, 2], -0.8, 0.8, &mut rng);
        let r = check(&[pos], 1e-5, 1e-6, None, |t, v| {
            let hm = lift(gaussian_heatmaps(t, v[0], (6, 7), 0.05))?;
            project(t, hm, 3)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn sparse_and_combine_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let jac = |rng: &mut ChaCha8Rng| {
            Tensor::from_fn(&[2, 4], |ix| if ix[1] == 0 || ix[1] == 3 { 1.0 } else { 0.0 } + rng.gen_range(-0.3..0.3))
        };
        let inputs = vec![
            random(&[2, 2], -0.8, 0.8, &mut rng),
            jac(&mut rng),
            random(&[2, 2], -0.8, 0.8, &mut rng),
            jac(&mut rng),
            random(&[3, 4, 5], -1.0, 1.0, &mut rng),
        ];
        let r = check(&inputs, 1e-5, 1e-6, None, |t, v| {
            let f = lift(sparse_flows(t, v[0], v[1], v[2], v[3], (4, 5)))?;
            let a = t.softmax_leading(v[4])?;
            let c = lift(combine_flows(t, a, f))?;
            let x = project(t, f, 4)?;
            let y = project(t, c, 5)?;
            t.add(x, y)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn tps_points_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let tps = Tps::random(&mut rng, 0.05, 0.05, 5);
        let pts = random(&[4, 2], -0.9, 0.9, &mut rng);
        let r = check(&[pts], 1e-5, 1e-6, None, |t, v| {
            let o = lift(tps_points(t, v[0], &tps))?;
            project(t, o, 6)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn identity_tps_has_zero_flow() {
        let f = Tps::identity().pixel_flow((5, 7));
        assert!(f.data().iter().all(|v| v.abs() < 1e-12));
    }
}
