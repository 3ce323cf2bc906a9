//! Analytic tape gradients against central finite differences (h = 1e-5).

use microanim_tensor::gradcheck::check;
use microanim_tensor::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Projects an output onto fixed random weights so every element contributes.
fn project(t: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(random(t.shape(v), -1.0, 1.0, &mut rng));
    let p = t.mul(v, w)?;
    t.sum(p)
}

fn assert_grad(name: &str, inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let r = check(inputs, H, 1e-6, None, build).unwrap();
    assert!(
        r.max_rel_error <= TOL,
        "{name}: relative error {} at input {} index {}",
        r.max_rel_error,
        r.worst_input,
        r.worst_index
    );
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // keep values away from the relu kink
    let a = random(&[2, 3, 3], 0.1, 1.0, &mut rng).zip_map(&random(&[2, 3, 3], 0.0, 1.0, &mut rng), |x, s| if s < 0.5 { -x } else { x }).unwrap();
    let b = random(&[2, 3, 3], -1.0, 1.0, &mut rng);
    let m = random(&[1, 3, 3], -1.0, 1.0, &mut rng);
    assert_grad("add/sub/mul", &[a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(s, v[1])?;
        let p = t.mul(d, v[1])?;
        project(t, p, 3)
    });
    assert_grad("mul_broadcast", &[a.clone(), m], |t, v| {
        let p = t.mul_broadcast(v[0], v[1])?;
        project(t, p, 4)
    });
    assert_grad("activations", &[a.clone()], |t, v| {
        let r = t.relu(v[0])?;
        let l = t.leaky_relu(v[0], 0.2)?;
        let s = t.sigmoid(v[0])?;
        let o = t.one_minus(s)?;
        let x = t.add(r, l)?;
        let y = t.add(x, o)?;
        let z = t.scale_channels(y, &[0.5, -2.0])?;
        project(t, z, 5)
    });
    assert_grad("reductions", &[a], |t, v| {
        let s = t.sum(v[0])?;
        let m = t.mean(v[0])?;
        let ab = t.mean_abs(v[0])?;
        let sq = t.mean_square(v[0])?;
        let x = t.add(s, m)?;
        let y = t.add(ab, sq)?;
        t.add(x, y)
    });
}

#[test]
fn conv_pool_upsample_resize() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[2, 6, 6], -1.0, 1.0, &mut rng);
    let w = random(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
    let b = random(&[3], -1.0, 1.0, &mut rng);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        assert_grad("conv2d", &[x.clone(), w.clone(), b.clone()], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(t, y, 6)
        });
    }
    let w1 = random(&[4, 2, 1, 1], -1.0, 1.0, &mut rng);
    assert_grad("conv2d 1x1", &[x.clone(), w1], |t, v| {
        let y = t.conv2d(v[0], v[1], None, 1, 0)?;
        project(t, y, 7)
    });
    assert_grad("pool/upsample", &[x.clone()], |t, v| {
        let p = t.avg_pool2(v[0])?;
        let u = t.upsample2(p)?;
        let s = t.mul(u, v[0])?;
        project(t, s, 8)
    });
    assert_grad("resize", &[x], |t, v| {
        let up = t.resize(v[0], 11, 9)?;
        let down = t.resize(v[0], 4, 3)?;
        let a = project(t, up, 9)?;
        let b = project(t, down, 10)?;
        t.add(a, b)
    });
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[2, 3, 4], -1.0, 1.0, &mut rng);
    let b = random(&[3, 3, 4], -1.0, 1.0, &mut rng);
    assert_grad("concat/narrow/reshape", &[a, b], |t, v| {
        let c = t.concat(&[v[0], v[1]])?;
        let n = t.narrow(c, 1, 3)?;
        let r = t.reshape(n, &[3, 12])?;
        project(t, r, 11)
    });
}

#[test]
fn softmaxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&[4, 3, 5], -2.0, 2.0, &mut rng);
    assert_grad("softmax_leading", &[a.clone()], |t, v| {
        let s = t.softmax_leading(v[0])?;
        project(t, s, 12)
    });
    assert_grad("spatial_softmax", &[a], |t, v| {
        let s = t.spatial_softmax(v[0], 0.3)?;
        project(t, s, 13)
    });
}

#[test]
fn warp_wrt_frame_and_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let frame = random(&[2, 7, 6], 0.0, 1.0, &mut rng);
    // fractional parts kept away from integer crossings and borders
    let flow = Tensor::from_fn(&[2, 7, 6], |_| {
        let whole: f64 = rng.gen_range(-1..=1) as f64;
        whole + rng.gen_range(0.2..0.8)
    });
    let target = random(&[2, 7, 6], 0.0, 1.0, &mut rng);
    let r = check(&[frame, flow], H, 1e-6, None, |t, v| {
        let warped = t.warp(v[0], v[1])?;
        let tgt = t.constant(target.clone());
        t.l1(warped, tgt)
    })
    .unwrap();
    assert!(r.max_rel_error <= TOL, "warp MAE: {r:?}");
}
