//! Analytic gradients of every primitive against central finite differences.

mod common;

use colearn_autograd::gradcheck::{max_relative_error, numeric_gradient};
use colearn_autograd::{AutogradError, BatchNormConfig, Element, PoolSpec, Tape, Tensor, Var};
use common::{away_from_zero, distinct, rng, uniform};
use rand::Rng;

const SEEDS: u64 = 20;
const H: f64 = 1e-4;
const TOL_F64: f64 = 1e-5;
const TOL_F32: f64 = 1e-3;
/// Denominator floor of the relative error, so entries whose true gradient is
/// (numerically) zero are compared on an absolute scale.
const FLOOR: f64 = 1e-3;

/// A differentiable graph under test: builds a scalar from leaf inputs.
trait Case {
    fn build<T: Element>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Var;
}

/// Contracts `y` with a fixed non-uniform weight pattern so every output
/// element gets a distinct upstream gradient.
fn probe<T: Element>(tape: &mut Tape<T>, y: Var) -> Var {
    let shape = tape.shape(y).unwrap().to_vec();
    let n: usize = shape.iter().product();
    let weights = (0..n)
        .map(|i| T::from_f64_lossy(((i * 7919 + 13) % 17) as f64 / 8.0 - 1.0 + 0.05))
        .collect();
    let r = tape.constant(Tensor::new(shape, weights).unwrap());
    let m = tape.mul(y, r).unwrap();
    tape.sum(m).unwrap()
}

fn eval<T: Element, C: Case>(case: &C, inputs: &[Tensor<f64>]) -> (f64, Vec<Option<Vec<f64>>>) {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.cast())).collect();
    let loss = case.build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let value = tape.value(loss).unwrap().data()[0].as_f64();
    let grads = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .unwrap()
                .map(|g| g.data().iter().map(|x| x.as_f64()).collect())
        })
        .collect();
    (value, grads)
}

/// Returns the worst relative error in (64-bit, 32-bit) mode over all inputs.
fn check<C: Case>(case: &C, inputs: &[Tensor<f64>]) -> (f64, f64) {
    let (_, g64) = eval::<f64, C>(case, inputs);
    let (_, g32) = eval::<f32, C>(case, inputs);
    let mut worst = (0.0f64, 0.0f64);
    for wrt in 0..inputs.len() {
        let numeric = numeric_gradient(|xs| eval::<f64, C>(case, xs).0, inputs, wrt, H);
        let a64 = g64[wrt].as_ref().expect("input reached by backward");
        let a32 = g32[wrt].as_ref().expect("input reached by backward");
        worst.0 = worst.0.max(max_relative_error(a64, &numeric, FLOOR));
        // The 32-bit gradient is compared against differences of the 64-bit
        // graph: f32 forward values are too coarse for a step of 1e-4.
        worst.1 = worst.1.max(max_relative_error(a32, &numeric, FLOOR));
    }
    worst
}

fn assert_case<C: Case>(name: &str, seed: u64, case: &C, inputs: &[Tensor<f64>]) {
    let (e64, e32) = check(case, inputs);
    assert!(e64 <= TOL_F64, "{name} seed {seed}: f64 rel err {e64:e}");
    assert!(e32 <= TOL_F32, "{name} seed {seed}: f32 rel err {e32:e}");
}

struct Conv {
    stride: usize,
    pad: usize,
}
impl Case for Conv {
    fn build<T: Element>(&self, tape: &mut Tape<T>, v: &[Var]) -> Var {
        let y = tape.conv3d(v[0], v[1], Some(v[2]), self.stride, self.pad).unwrap();
        probe(tape, y)
    }
}

#[test]
fn conv3d_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let k = [1, 3][r.random_range(0..2)];
        let stride = r.random_range(1..=2);
        let pad = r.random_range(0..=k / 2);
        let d = (r.random_range(1..=3) - 1) * stride + k - 2 * pad + stride * usize::from(pad == 0);
        let d = d.max(k.saturating_sub(2 * pad)).max(1);
        let d = (d..).find(|&d| (d + 2 * pad - k) % stride == 0).unwrap();
        let (cin, cout) = (r.random_range(1..=2), r.random_range(1..=3));
        let batch = r.random_range(1..=2);
        let inputs = [
            uniform(&mut r, &[batch, cin, d, d + stride, d], -1.0, 1.0),
            uniform(&mut r, &[cout, cin, k, k, k], -1.0, 1.0),
            uniform(&mut r, &[cout], -1.0, 1.0),
        ];
        assert_case("conv3d", seed, &Conv { stride, pad }, &inputs);
    }
}

struct BatchNorm {
    training: bool,
}
impl Case for BatchNorm {
    fn build<T: Element>(&self, tape: &mut Tape<T>, v: &[Var]) -> Var {
        let c = tape.shape(v[1]).unwrap()[0];
        let mut rm = Tensor::new([c], (0..c).map(|i| T::from_f64_lossy(0.1 * i as f64)).collect()).unwrap();
        let mut rv = Tensor::new([c], (0..c).map(|i| T::from_f64_lossy(0.5 + i as f64)).collect()).unwrap();
        let cfg = BatchNormConfig {
            training: self.training,
            ..Default::default()
        };
        let y = tape.batchnorm3d(v[0], v[1], v[2], &mut rm, &mut rv, cfg).unwrap();
        probe(tape, y)
    }
}

#[test]
fn batchnorm3d_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(100 + seed);
        let c = r.random_range(1..=3);
        let shape = [r.random_range(1..=3), c, 2, r.random_range(1..=3), 2];
        let inputs = [
            uniform(&mut r, &shape, -2.0, 2.0),
            uniform(&mut r, &[c], 0.5, 1.5),
            uniform(&mut r, &[c], -0.5, 0.5),
        ];
        assert_case("batchnorm3d/train", seed, &BatchNorm { training: true }, &inputs);
        assert_case("batchnorm3d/eval", seed, &BatchNorm { training: false }, &inputs);
    }
}

#[derive(Clone, Copy)]
enum Unary {
    Relu,
    Sigmoid,
    Softmax,
    MaxPool(PoolSpec),
    AvgPool(PoolSpec),
    GlobalAvgPool,
    Upsample([usize; 3]),
}
impl Case for Unary {
    fn build<T: Element>(&self, tape: &mut Tape<T>, v: &[Var]) -> Var {
        let x = v[0];
        let y = match *self {
            Unary::Relu => tape.relu(x),
            Unary::Sigmoid => tape.sigmoid(x),
            Unary::Softmax => tape.softmax(x),
            Unary::MaxPool(spec) => tape.maxpool3d(x, spec),
            Unary::AvgPool(spec) => tape.avgpool3d(x, spec),
            Unary::GlobalAvgPool => tape.global_avgpool(x),
            Unary::Upsample(to) => tape.trilinear_upsample(x, to),
        }
        .unwrap();
        probe(tape, y)
    }
}

#[test]
fn elementwise_and_softmax_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(200 + seed);
        let shape = [r.random_range(1..=3), r.random_range(2..=4)];
        assert_case("relu", seed, &Unary::Relu, &[away_from_zero(&mut r, &shape, 1e-3)]);
        assert_case("sigmoid", seed, &Unary::Sigmoid, &[uniform(&mut r, &shape, -4.0, 4.0)]);
        assert_case("softmax", seed, &Unary::Softmax, &[uniform(&mut r, &shape, -3.0, 3.0)]);
    }
}

#[test]
fn pooling_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(300 + seed);
        let shape = [r.random_range(1..=2), r.random_range(1..=2), 4, 2, r.random_range(1..=2) * 2];
        let x = distinct(&mut r, &shape, 1e-2);
        assert_case("maxpool3d", seed, &Unary::MaxPool(PoolSpec::default()), std::slice::from_ref(&x));
        assert_case("avgpool3d", seed, &Unary::AvgPool(PoolSpec::default()), std::slice::from_ref(&x));
        let partial = PoolSpec {
            kernel: 3,
            stride: 2,
            partial_windows: true,
        };
        assert_case("avgpool3d/partial", seed, &Unary::AvgPool(partial), std::slice::from_ref(&x));
        assert_case("global_avgpool", seed, &Unary::GlobalAvgPool, &[x]);
    }
}

#[test]
fn upsample_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(400 + seed);
        let src = [r.random_range(1..=3), r.random_range(1..=3), r.random_range(2..=3)];
        let to = [src[0] + r.random_range(0..=3), src[1] * 2, src[2] + 1];
        let x = uniform(&mut r, &[1, 2, src[0], src[1], src[2]], -1.0, 1.0);
        assert_case("trilinear_upsample", seed, &Unary::Upsample(to), &[x]);
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Mul,
    Gate,
    Concat,
}
impl Case for Binary {
    fn build<T: Element>(&self, tape: &mut Tape<T>, v: &[Var]) -> Var {
        let (a, b) = (v[0], v[1]);
        let y = match self {
            Binary::Add => tape.add(a, b),
            Binary::Mul => tape.mul(a, b),
            Binary::Gate => tape.gate_channels(a, b),
            Binary::Concat => tape.concat(&[a, b], 1),
        }
        .unwrap();
        probe(tape, y)
    }
}

#[test]
fn binary_op_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(500 + seed);
        let n = r.random_range(1..=2);
        let a = uniform(&mut r, &[n, 3, 2, 2, 2], -1.0, 1.0);
        let b = uniform(&mut r, &[n, 3, 2, 2, 2], -1.0, 1.0);
        let gate = uniform(&mut r, &[n, 1, 2, 2, 2], 0.0, 1.0);
        let c = uniform(&mut r, &[n, 1, 2, 2, 2], -1.0, 1.0);
        assert_case("add", seed, &Binary::Add, &[a.clone(), b.clone()]);
        assert_case("mul", seed, &Binary::Mul, &[a.clone(), b.clone()]);
        assert_case("gate_channels", seed, &Binary::Gate, &[gate, a.clone()]);
        assert_case("concat", seed, &Binary::Concat, &[a, c]);
    }
}

struct Dense;
impl Case for Dense {
    fn build<T: Element>(&self, tape: &mut Tape<T>, v: &[Var]) -> Var {
        let y = tape.dense(v[0], v[1], v[2]).unwrap();
        probe(tape, y)
    }
}

#[test]
fn dense_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(600 + seed);
        let (n, f, k) = (r.random_range(1..=4), r.random_range(1..=6), r.random_range(1..=3));
        let inputs = [
            uniform(&mut r, &[n, f], -1.0, 1.0),
            uniform(&mut r, &[f, k], -1.0, 1.0),
            uniform(&mut r, &[k], -1.0, 1.0),
        ];
        assert_case("dense", seed, &Dense, &inputs);
    }
}

struct CrossEntropy {
    labels: Vec<usize>,
    weights: Option<[f64; 2]>,
}
impl Case for CrossEntropy {
    fn build<T: Element>(&self, tape: &mut Tape<T>, v: &[Var]) -> Var {
        let w = self.weights.map(|w| w.map(T::from_f64_lossy));
        tape.cross_entropy(v[0], &self.labels, w.as_ref().map(|w| &w[..])).unwrap()
    }
}

#[test]
fn cross_entropy_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(700 + seed);
        let n = r.random_range(1..=5);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        let logits = uniform(&mut r, &[n, 2], -3.0, 3.0);
        let plain = CrossEntropy {
            labels: labels.clone(),
            weights: None,
        };
        let weighted = CrossEntropy {
            labels,
            weights: Some([0.3, 1.7]),
        };
        assert_case("cross_entropy", seed, &plain, std::slice::from_ref(&logits));
        assert_case("cross_entropy/weighted", seed, &weighted, &[logits]);
    }
}

#[test]
fn hand_derivatives() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new([2], vec![-1.0, 2.0]).unwrap());
    let y = tape.relu(x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().unwrap().data(), &[0.0, 1.0]);

    let z = tape.param(Tensor::scalar(0.0));
    let sz = tape.sigmoid(z).unwrap();
    tape.backward(sz).unwrap();
    assert_eq!(tape.grad(z).unwrap().unwrap().data(), &[0.25]);
}

#[test]
fn fan_out_sums_branch_gradients() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap());
    let twice = tape.add(x, x).unwrap();
    let s = tape.sum(twice).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().unwrap().data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn backward_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
    assert_eq!(tape.backward(x), Err(AutogradError::NotScalar(vec![2])));
    let s = tape.sum(x).unwrap();
    tape.reset();
    assert_eq!(tape.backward(s), Err(AutogradError::StaleVar));
    assert!(matches!(tape.value(x), Err(AutogradError::StaleVar)));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::new([2], vec![1.0, 2.0]).unwrap());
    let p = tape.param(Tensor::new([2], vec![3.0, 4.0]).unwrap());
    let m = tape.mul(c, p).unwrap();
    let s = tape.sum(m).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(c).unwrap().is_none());
    assert_eq!(tape.grad(p).unwrap().unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn batchnorm_forward_properties() {
    let mut tape = Tape::<f64>::new();
    let mut r = rng(7);
    let x = uniform(&mut r, &[2, 2, 3, 3, 3], -5.0, 5.0);
    let xv = tape.constant(x.clone());
    let gamma = tape.constant(Tensor::full([2], 1.0));
    let beta = tape.constant(Tensor::zeros([2]));
    let (mut rm, mut rv) = (Tensor::zeros([2]), Tensor::full([2], 1.0));
    let y = tape
        .batchnorm3d(xv, gamma, beta, &mut rm, &mut rv, BatchNormConfig::default())
        .unwrap();
    let out = tape.value(y).unwrap().data().to_vec();
    for c in 0..2 {
        let vals: Vec<f64> = (0..2)
            .flat_map(|n| out[(n * 2 + c) * 27..(n * 2 + c + 1) * 27].iter().copied())
            .collect();
        let mean = vals.iter().sum::<f64>() / 54.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 54.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-4);
    }
    // Running stats moved 10% of the way toward batch statistics.
    let vals: Vec<f64> = (0..2).flat_map(|n| x.data()[n * 54..n * 54 + 27].iter().copied()).collect();
    let mu = vals.iter().sum::<f64>() / 54.0;
    let unbiased = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 53.0;
    assert!((rm.data()[0] - 0.1 * mu).abs() < 1e-12);
    assert!((rv.data()[0] - (0.9 + 0.1 * unbiased)).abs() < 1e-12);

    // Constant channels normalize to beta.
    let cx = tape.constant(Tensor::full([1, 1, 2, 2, 2], 3.0));
    let g1 = tape.constant(Tensor::full([1], 2.0));
    let b1 = tape.constant(Tensor::full([1], 0.25));
    let (mut m1, mut v1) = (Tensor::zeros([1]), Tensor::full([1], 1.0));
    let y = tape.batchnorm3d(cx, g1, b1, &mut m1, &mut v1, BatchNormConfig::default()).unwrap();
    assert!(tape.value(y).unwrap().data().iter().all(|&v| v == 0.25));

    // Inference uses stored statistics: y = gamma (x - mean) / sqrt(var + eps) + beta.
    let (mut m2, mut v2) = (Tensor::full([1], 1.0), Tensor::full([1], 4.0));
    let eval = BatchNormConfig {
        training: false,
        ..Default::default()
    };
    let y = tape.batchnorm3d(cx, g1, b1, &mut m2, &mut v2, eval).unwrap();
    let want = 2.0 * (3.0 - 1.0) / (4.0f64 + 1e-5).sqrt() + 0.25;
    assert!(tape.value(y).unwrap().data().iter().all(|&v| (v - want).abs() < 1e-12));
    assert_eq!((m2.data()[0], v2.data()[0]), (1.0, 4.0));

    // A single element per channel cannot be batch-normalized.
    let one = tape.constant(Tensor::full([1, 1, 1, 1, 1], 3.0));
    let err = tape
        .batchnorm3d(one, g1, b1, &mut m1, &mut v1, BatchNormConfig::default())
        .unwrap_err();
    assert_eq!(err, AutogradError::BatchTooSmall(1));
}
