//! Finite-difference suites for every differentiable tensor op at 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use yolco_autograd::gradcheck::{check_gradients, DEFAULT_STEP};
use yolco_autograd::{Result, Tape, Tensor, Var};

pub const CASES: usize = 100;
pub const TOL: f64 = 1e-4;

/// Worst relative error per op name.
pub type Report = Vec<(&'static str, f64)>;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values bounded away from zero so kinks are never straddled.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let t = Tensor::uniform(shape, 0.05, 1.0, rng);
    t.map(|v| if rng_sign(v) { v } else { -v })
}

fn rng_sign(v: f64) -> bool {
    ((v * 1e6) as u64) % 2 == 0
}

/// `Σ w ⊙ y` with a fixed random projection, so every output element matters.
fn project(tape: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

fn run<F>(out: &mut Report, name: &'static str, mut make: F)
where
    F: FnMut(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>),
{
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ name.len() as u64);
    let mut worst: f64 = 0.0;
    for _ in 0..CASES {
        let (inputs, f) = make(&mut rng);
        let report = check_gradients(&inputs, |t, v| f(t, v), DEFAULT_STEP, Some(24), &mut rng).unwrap();
        worst = worst.max(report.max_rel_err);
    }
    out.push((name, worst));
}

/// Output shape of `f` evaluated once on `inputs`.
fn out_shape(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Vec<usize> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.constant(v.clone())).collect();
    let y = f(&mut tape, &vars).unwrap();
    tape.shape(y).to_vec()
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Wraps an op so the scalar is a random projection of its output.
fn projected(
    rng: &mut ChaCha8Rng,
    inputs: Vec<Tensor<f64>>,
    op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> (Vec<Tensor<f64>>, OpFn) {
    let shape = out_shape(&inputs, &op);
    let w = rand_t(rng, &shape);
    (inputs, Box::new(move |t, v| {
        let y = op(t, v)?;
        project(t, y, &w)
    }))
}

fn conv2d(out: &mut Report) {
    run(out, "conv2d", |rng| {
        let stride = rng.random_range(1..=2);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let pad = rng.random_range(0..=k / 2);
        let cin = rng.random_range(1..=3);
        let cout = rng.random_range(1..=3);
        let inputs = vec![rand_t(rng, &[cin, 8, 8]), rand_t(rng, &[cout, cin, k, k]), rand_t(rng, &[cout])];
        projected(rng, inputs, move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad))
    });
}

fn depthwise_and_pointwise(out: &mut Report) {
    run(out, "depthwise", |rng| {
        let stride = rng.random_range(1..=2);
        let c = rng.random_range(1..=4);
        let inputs = vec![rand_t(rng, &[c, 6, 7]), rand_t(rng, &[c, 1, 3, 3])];
        projected(rng, inputs, move |t, v| t.depthwise_conv2d(v[0], v[1], stride, 1))
    });
    run(out, "pointwise", |rng| {
        let inputs = vec![rand_t(rng, &[3, 5, 5]), rand_t(rng, &[4, 3, 1, 1]), rand_t(rng, &[4])];
        projected(rng, inputs, |t, v| t.pointwise_conv2d(v[0], v[1], Some(v[2])))
    });
}

fn cross_group_sum(out: &mut Report) {
    run(out, "cross_group_sum", |rng| {
        let groups = [1, 2, 4][rng.random_range(0..3)];
        let connected: Vec<bool> = (0..groups).map(|_| rng.random()).collect();
        let inputs = vec![rand_t(rng, &[8, 3, 3])];
        projected(rng, inputs, move |t, v| t.cross_group_sum(v[0], groups, &connected))
    });
}

fn activations(out: &mut Report) {
    run(out, "leaky_relu", |rng| {
        let inputs = vec![rand_away_from_zero(rng, &[4, 5])];
        projected(rng, inputs, |t, v| Ok(t.leaky_relu(v[0], 0.1)))
    });
    run(out, "sigmoid", |rng| {
        let inputs = vec![rand_t(rng, &[3, 4]).map(|x| 4.0 * x)];
        projected(rng, inputs, |t, v| Ok(t.sigmoid(v[0])))
    });
    run(out, "tanh", |rng| {
        let inputs = vec![rand_t(rng, &[3, 4]).map(|x| 2.0 * x)];
        projected(rng, inputs, |t, v| Ok(t.tanh(v[0])))
    });
    run(out, "gelu", |rng| {
        let inputs = vec![rand_t(rng, &[3, 4]).map(|x| 3.0 * x)];
        projected(rng, inputs, |t, v| Ok(t.gelu(v[0])))
    });
}

fn elementwise_math(out: &mut Report) {
    run(out, "exp", |rng| {
        let inputs = vec![rand_t(rng, &[10])];
        projected(rng, inputs, |t, v| Ok(t.exp(v[0])))
    });
    run(out, "ln", |rng| {
        let inputs = vec![Tensor::uniform(&[10], 0.2, 3.0, rng)];
        projected(rng, inputs, |t, v| Ok(t.ln(v[0])))
    });
    run(out, "square", |rng| {
        let inputs = vec![rand_t(rng, &[10])];
        projected(rng, inputs, |t, v| Ok(t.square(v[0])))
    });
    run(out, "powf", |rng| {
        let p = rng.random_range(0.5..3.0);
        let inputs = vec![Tensor::uniform(&[10], 0.2, 2.0, rng)];
        projected(rng, inputs, move |t, v| Ok(t.powf(v[0], p)))
    });
    run(out, "affine", |rng| {
        let inputs = vec![rand_t(rng, &[10])];
        projected(rng, inputs, |t, v| Ok(t.affine(v[0], -1.5, 0.25)))
    });
    run(out, "add_sub_mul", |rng| {
        let inputs = vec![rand_t(rng, &[2, 5]), rand_t(rng, &[2, 5]), rand_t(rng, &[2, 5])];
        projected(rng, inputs, |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(s, v[2])?;
            t.mul(d, v[0])
        })
    });
}

fn reductions_and_indexing(out: &mut Report) {
    run(out, "sum_mean", |rng| {
        let inputs = vec![rand_t(rng, &[3, 4])];
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        (inputs, Box::new(move |t: &mut Tape<f64>, v: &[Var]| {
            let s = t.sum(v[0]);
            let m = t.mean(v[0]);
            let s = t.scale(s, a);
            let m = t.scale(m, b);
            let sq = t.square(s);
            t.add(sq, m)
        }) as OpFn)
    });
    run(out, "gather", |rng| {
        let idx: Vec<usize> = (0..7).map(|_| rng.random_range(0..12)).collect();
        let inputs = vec![rand_t(rng, &[3, 4])];
        projected(rng, inputs, move |t, v| t.gather(v[0], &idx))
    });
    run(out, "reshape", |rng| {
        let inputs = vec![rand_t(rng, &[3, 4])];
        projected(rng, inputs, |t, v| t.reshape(v[0], &[2, 6]))
    });
    run(out, "concat_slice", |rng| {
        let axis = rng.random_range(0..3);
        let inputs = vec![rand_t(rng, &[2, 3, 4]), rand_t(rng, &[2, 3, 4])];
        projected(rng, inputs, move |t, v| {
            let c = t.concat(&[v[0], v[1]], axis)?;
            let n = t.shape(c)[axis];
            t.slice(c, axis, 1, n - 2)
        })
    });
}

fn pooling_and_upsampling(out: &mut Report) {
    run(out, "maxpool", |rng| {
        // Distinct values spaced well apart so the arg-max is stable under perturbation.
        let mut vals: Vec<f64> = (0..2 * 4 * 6).map(|i| i as f64 * 0.01).collect();
        for i in (1..vals.len()).rev() {
            let j = rng.random_range(0..=i);
            vals.swap(i, j);
        }
        let inputs = vec![Tensor::from_vec(&[2, 4, 6], vals).unwrap()];
        projected(rng, inputs, |t, v| t.maxpool2d(v[0], 2, 2))
    });
    run(out, "upsample", |rng| {
        let inputs = vec![rand_t(rng, &[2, 3, 2])];
        projected(rng, inputs, |t, v| t.upsample_nearest(v[0], 2))
    });
}

fn dense_layers(out: &mut Report) {
    run(out, "linear", |rng| {
        let inputs = vec![rand_t(rng, &[4, 5]), rand_t(rng, &[3, 5]), rand_t(rng, &[3])];
        projected(rng, inputs, |t, v| t.linear(v[0], v[1], Some(v[2])))
    });
    run(out, "matmul_transpose", |rng| {
        let inputs = vec![rand_t(rng, &[3, 4]), rand_t(rng, &[5, 4])];
        projected(rng, inputs, |t, v| {
            let bt = t.transpose(v[1])?;
            t.matmul(v[0], bt)
        })
    });
    run(out, "softmax", |rng| {
        let inputs = vec![rand_t(rng, &[3, 6]).map(|x| 3.0 * x)];
        projected(rng, inputs, |t, v| t.softmax(v[0]))
    });
    run(out, "layer_norm", |rng| {
        let inputs = vec![rand_t(rng, &[3, 6]), rand_t(rng, &[6]), rand_t(rng, &[6])];
        projected(rng, inputs, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))
    });
    run(out, "dropout", |rng| {
        let seed: u64 = rng.random();
        let inputs = vec![rand_t(rng, &[4, 6])];
        projected(rng, inputs, move |t, v| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            t.dropout(v[0], 0.5, true, &mut r)
        })
    });
}

/// Runs every op suite: [`CASES`] random cases each.
pub fn all_ops() -> Report {
    let mut out = Vec::new();
    conv2d(&mut out);
    depthwise_and_pointwise(&mut out);
    cross_group_sum(&mut out);
    activations(&mut out);
    elementwise_math(&mut out);
    reductions_and_indexing(&mut out);
    pooling_and_upsampling(&mut out);
    dense_layers(&mut out);
    out
}
