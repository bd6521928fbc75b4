//! Shared helpers for integration tests: central-difference gradient checks
//! over every differentiable tape operation.

#![allow(dead_code)]

use memo_core::eval::match_edges;
use memo_core::tensor::{Tape, Tensor, Var};
use memo_core::{BinaryMap, EdgeState, MemoNetwork, ModelConfig, Result, TriStateEdgeMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
}

type Build = Box<dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>>;

/// An operation under test, reduced to a scalar by a fixed random
/// weighted cross-entropy so every output element matters.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    build: Build,
    targets: Vec<f64>,
    weights: Vec<f64>,
}

impl GradCase {
    pub fn new(
        name: &'static str,
        inputs: Vec<Tensor<f64>>,
        seed: u64,
        build: impl Fn(&Tape<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        assert!(inputs.iter().all(|t| t.len() <= 64), "{name}: inputs must stay small");
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let n = tape.value(build(&tape, &vars).expect("case builds")).len();
        let mut r = rng(seed ^ 0x5eed);
        Self {
            name,
            inputs,
            build: Box::new(build),
            targets: (0..n).map(|_| r.gen()).collect(),
            weights: (0..n).map(|_| r.gen_range(0.1..1.0)).collect(),
        }
    }

    fn loss(&self, tape: &Tape<f64>, vars: &[Var]) -> Result<Var> {
        let out = (self.build)(tape, vars)?;
        if tape.value(out).is_scalar() {
            Ok(out)
        } else {
            tape.masked_bce(out, self.targets.clone(), self.weights.clone())
        }
    }

    fn value(&self, inputs: &[Tensor<f64>]) -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        tape.value(self.loss(&tape, &vars).unwrap()).data()[0]
    }

    /// Largest relative discrepancy between tape gradients and central
    /// differences over every input element.
    pub fn max_relative_error(&self) -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = self.loss(&tape, &vars).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut worst = 0f64;
        for (k, var) in vars.iter().enumerate() {
            let analytic = grads.wrt(*var);
            for i in 0..self.inputs[k].len() {
                let mut plus = self.inputs.clone();
                plus[k].data_mut()[i] += STEP;
                let mut minus = self.inputs.clone();
                minus[k].data_mut()[i] -= STEP;
                let numeric = (self.value(&plus) - self.value(&minus)) / (2.0 * STEP);
                worst = worst.max(relative_error(analytic.data()[i], numeric));
            }
        }
        worst
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

/// One case per differentiable operation, plus a small composite.
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    let mut r = rng(seed);
    let mut t = |shape: &[usize]| random_tensor(shape, &mut r);
    vec![
        GradCase::new("conv2d 3x3 pad 1", vec![t(&[1, 2, 4, 4]), t(&[3, 2, 3, 3]), t(&[3])], seed, |tp, v| {
            tp.conv2d(v[0], v[1], Some(v[2]), 1, 1)
        }),
        GradCase::new("conv2d stride 2", vec![t(&[2, 2, 4, 4]), t(&[2, 2, 3, 3])], seed, |tp, v| {
            tp.conv2d(v[0], v[1], None, 2, 1)
        }),
        GradCase::new("conv2d 1x1", vec![t(&[1, 4, 3, 3]), t(&[2, 4, 1, 1]), t(&[2])], seed, |tp, v| {
            tp.conv2d(v[0], v[1], Some(v[2]), 1, 0)
        }),
        GradCase::new("group_norm", vec![t(&[2, 4, 2, 3]), t(&[4]), t(&[4])], seed, |tp, v| {
            tp.group_norm(v[0], 2, v[1], v[2], 1e-5)
        }),
        GradCase::new("silu", vec![t(&[2, 3, 2, 2])], seed, |tp, v| Ok(tp.silu(v[0]))),
        GradCase::new("sigmoid", vec![t(&[1, 2, 3, 3])], seed, |tp, v| Ok(tp.sigmoid(v[0]))),
        GradCase::new("linear", vec![t(&[2, 3, 4]), t(&[4, 5]), t(&[5])], seed, |tp, v| {
            tp.linear(v[0], v[1], Some(v[2]))
        }),
        GradCase::new("add", vec![t(&[1, 2, 3, 3]), t(&[1, 2, 3, 3])], seed, |tp, v| tp.add(v[0], v[1])),
        GradCase::new("add_channel", vec![t(&[2, 3, 2, 2]), t(&[2, 3])], seed, |tp, v| {
            tp.add_channel(v[0], v[1])
        }),
        GradCase::new("concat_channels", vec![t(&[2, 1, 2, 2]), t(&[2, 3, 2, 2])], seed, |tp, v| {
            tp.concat_channels(&[v[0], v[1], v[0]])
        }),
        GradCase::new("upsample2x", vec![t(&[1, 2, 3, 2])], seed, |tp, v| tp.upsample2x(v[0])),
        GradCase::new("scale", vec![t(&[3, 4])], seed, |tp, v| Ok(tp.scale(v[0], -1.7))),
        GradCase::new("sum", vec![t(&[2, 5])], seed, |tp, v| Ok(tp.sum(v[0]))),
        GradCase::new("masked_bce", vec![t(&[1, 1, 4, 4])], seed, |tp, v| {
            let targets = (0..16).map(|i| (i % 3) as f64 / 2.0).collect();
            let weights = (0..16).map(|i| if i % 4 == 0 { 0.0 } else { 0.5 }).collect();
            tp.masked_bce(v[0], targets, weights)
        }),
        GradCase::new(
            "conv → group_norm → silu → upsample",
            vec![t(&[1, 1, 4, 4]), t(&[4, 1, 3, 3]), t(&[4]), t(&[4])],
            seed,
            |tp, v| {
                let y = tp.conv2d(v[0], v[1], None, 2, 1)?;
                let y = tp.group_norm(y, 2, v[2], v[3], 1e-5)?;
                tp.upsample2x(tp.silu(y))
            },
        ),
    ]
}

/// A network small enough to gradient-check parameter by parameter.
pub fn tiny_network(seed: u64) -> MemoNetwork<f64> {
    MemoNetwork::new(
        ModelConfig {
            channels: vec![4, 8],
            embed_dim: 8,
            zero_init_head: false,
        },
        seed,
    )
    .unwrap()
}

/// Relative error of the full network's masked loss, checked at `per_param`
/// random elements of every parameter.
pub fn network_max_relative_error(seed: u64, per_param: usize) -> f64 {
    let mut r = rng(seed);
    let net = tiny_network(seed);
    let (h, w) = (4, 4);
    let image = Tensor::from_fn(&[1, 3, h, w], |_| r.gen::<f64>());
    let mut tri = TriStateEdgeMap::all_masked(h, w);
    for i in 0..h * w {
        if r.gen::<f64>() < 0.4 {
            tri.set_at(i, if r.gen() { EdgeState::Edge } else { EdgeState::Background });
        }
    }
    let edges = memo_core::model::encode_tristate::<f64>(&tri).reshape(&[1, 2, h, w]).unwrap();
    let targets: Vec<f64> = (0..h * w).map(|_| if r.gen::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect();
    let weights: Vec<f64> = (0..h * w).map(|i| if tri.is_masked_at(i) { 1.0 } else { 0.0 }).collect();
    let loss_of = |net: &MemoNetwork<f64>| -> (Tape<f64>, Var, memo_core::params::Bound) {
        let tape = Tape::new();
        let p = net.params().bind(&tape);
        let x = tape.constant(image.clone());
        let e = tape.constant(edges.clone());
        let logits = net.forward_logits(&tape, &p, x, e, &[0.6]).unwrap();
        let loss = tape.masked_bce(logits, targets.clone(), weights.clone()).unwrap();
        (tape, loss, p)
    };
    let (tape, loss, bound) = loss_of(&net);
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0f64;
    let ids: Vec<_> = net.params().iter().map(|(id, _)| id).collect();
    for id in ids {
        let analytic = grads.wrt(bound.var(id));
        let n = analytic.len();
        for _ in 0..per_param.min(n) {
            let i = r.gen_range(0..n);
            let eval = |delta: f64| {
                let mut probe = net.clone();
                probe.params_mut().get_mut(id).value.data_mut()[i] += delta;
                let (tape, loss, _) = loss_of(&probe);
                let v = tape.value(loss).data()[0];
                v
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    worst
}

// ---- bipartite matching oracle ----

pub const SIDE: usize = 4;

fn points(m: &BinaryMap) -> Vec<(usize, usize)> {
    m.points()
}

/// Maximum matching size from the deficiency form of Hall's theorem:
/// `|L| − max_{S⊆L} (|S| − |N(S)|)`, enumerating subsets of the smaller side.
pub fn hall_matching(pred: &BinaryMap, gt: &BinaryMap, tol: f64) -> usize {
    let (mut left, mut right) = (points(pred), points(gt));
    if left.len() > right.len() {
        std::mem::swap(&mut left, &mut right);
    }
    let near = |a: (usize, usize), b: (usize, usize)| {
        let dy = a.0 as f64 - b.0 as f64;
        let dx = a.1 as f64 - b.1 as f64;
        dy * dy + dx * dx <= tol * tol
    };
    let nbr: Vec<u32> = left
        .iter()
        .map(|&a| right.iter().enumerate().filter(|(_, &b)| near(a, b)).fold(0, |m, (j, _)| m | 1 << j))
        .collect();
    let n = left.len();
    let mut union = vec![0u32; 1 << n];
    let mut deficiency = 0i64;
    for s in 1usize..1 << n {
        let low = s.trailing_zeros() as usize;
        union[s] = union[s & (s - 1)] | nbr[low];
        deficiency = deficiency.max(s.count_ones() as i64 - union[s].count_ones() as i64);
    }
    n - deficiency as usize
}

pub fn agrees(pred: &BinaryMap, gt: &BinaryMap, tol: f64) -> bool {
    let c = match_edges(pred, gt, tol);
    let m = hall_matching(pred, gt, tol);
    c.true_positives == m && c.false_positives == pred.count() - m && c.false_negatives == gt.count() - m
}

pub fn map_from_bits(bits: u16) -> BinaryMap {
    BinaryMap::from_fn(SIDE, SIDE, |y, x| bits >> (y * SIDE + x) & 1 == 1)
}

/// Every set of at most three positions among the 32 cells of a pair.
pub fn small_subsets() -> Vec<u32> {
    let mut out = vec![0u32];
    for a in 0..32 {
        out.push(1 << a);
        for b in a + 1..32 {
            out.push(1 << a | 1 << b);
            for c in b + 1..32 {
                out.push(1 << a | 1 << b | 1 << c);
            }
        }
    }
    out
}


/// A random 4×4 pair with independently drawn edge densities.
pub fn random_pair(rng: &mut impl Rng) -> (BinaryMap, BinaryMap) {
    let (dp, dg) = (rng.gen::<f64>(), rng.gen::<f64>());
    let p = BinaryMap::from_fn(SIDE, SIDE, |_, _| rng.gen_bool(dp));
    let g = BinaryMap::from_fn(SIDE, SIDE, |_, _| rng.gen_bool(dg));
    (p, g)
}
