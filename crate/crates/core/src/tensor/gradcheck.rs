//! Central finite-difference verification of backward rules.
//!
//! Every primitive is checked through the scalar functional
//! `L = Σ out ⊙ R` with a fixed random weighting `R`, so all output
//! positions contribute distinct sensitivities. The reported error for an
//! input is `max |analytic − numeric| / max(‖analytic‖∞, ‖numeric‖∞)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// An operation that can be driven by the checker.
pub trait Primitive: Sync {
    fn id(&self) -> &'static str;

    /// Fill in derived shapes (e.g. a conv bias) from the user-supplied ones.
    fn expand_shapes(&self, shapes: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
        Ok(shapes.to_vec())
    }

    /// A random valid set of (user-facing) input shapes.
    fn random_shapes(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>>;

    /// Sample values for input `index`. Defaults to uniform in [-1, 1].
    fn sample(&self, _index: usize, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn apply(&self, g: &mut Graph<f64>, inputs: &[NodeId]) -> Result<NodeId>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub primitive: String,
    pub input_shapes: Vec<Vec<usize>>,
    /// One entry per input, in input order.
    pub max_rel_error: Vec<f64>,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

fn loss_of(prim: &dyn Primitive, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> Result<(Graph<f64>, Vec<NodeId>, NodeId)> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = prim.apply(&mut g, &ids)?;
    let r = g.constant(weights.clone());
    let prod = g.mul(out, r)?;
    let loss = g.sum(prod)?;
    Ok((g, ids, loss))
}

/// Run the check for a registered primitive id.
pub fn finite_difference_check(id: &str, input_shapes: &[Vec<usize>], tolerance: f64, seed: u64) -> Result<CheckReport> {
    let prim = find_primitive(id)
        .ok_or_else(|| Error::invalid("tensor", "finite_difference_check", format!("unknown primitive id '{id}'")))?;
    check_primitive(prim, input_shapes, tolerance, seed)
}

/// Run the check for any primitive, registered or not.
pub fn check_primitive(prim: &dyn Primitive, input_shapes: &[Vec<usize>], tolerance: f64, seed: u64) -> Result<CheckReport> {
    let shapes = prim.expand_shapes(input_shapes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| prim.sample(i, s, &mut rng))
        .collect();

    let out_shape = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = prim.apply(&mut g, &ids)?;
        g.value(out).shape().to_vec()
    };
    let weights = Tensor::from_fn(out_shape, |_| rng.random_range(-1.0..1.0));

    let (mut g, ids, loss) = loss_of(prim, &inputs, &weights)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids.iter().map(|&id| g.grad_or_zeros(id)).collect();

    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let (g, _, loss) = loss_of(prim, ins, &weights)?;
        Ok(g.value(loss).data()[0])
    };

    let mut max_rel_error = Vec::with_capacity(inputs.len());
    let mut probe = inputs.clone();
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(input.numel());
        for e in 0..input.numel() {
            let orig = input.data()[e];
            probe[i].data_mut()[e] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe[i].data_mut()[e] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe[i].data_mut()[e] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        let a = analytic[i].data();
        let scale = a
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = a
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        max_rel_error.push(if scale > 0.0 { diff / scale } else { 0.0 });
    }
    let passed = max_rel_error.iter().all(|&e| e < tolerance);
    Ok(CheckReport {
        primitive: prim.id().to_string(),
        input_shapes: shapes,
        max_rel_error,
        tolerance,
        passed,
    })
}

/// Random shapes for a primitive, deterministic in `seed`.
pub fn random_shapes(prim: &dyn Primitive, seed: u64) -> Vec<Vec<usize>> {
    prim.random_shapes(&mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn primitives() -> &'static [&'static dyn Primitive] {
    REGISTRY
}

pub fn find_primitive(id: &str) -> Option<&'static dyn Primitive> {
    REGISTRY.iter().copied().find(|p| p.id() == id)
}

static REGISTRY: &[&dyn Primitive] = &[
    &Conv { id: "conv2d", stride: 1, padding: 1, transpose: false },
    &Conv { id: "conv2d_strided", stride: 2, padding: 1, transpose: false },
    &Conv { id: "conv_transpose2d", stride: 1, padding: 0, transpose: true },
    &Conv { id: "conv_transpose2d_strided", stride: 2, padding: 1, transpose: true },
    &Unary { id: "relu", kind: UnaryKind::Relu },
    &Unary { id: "leaky_relu", kind: UnaryKind::LeakyRelu },
    &Unary { id: "sigmoid", kind: UnaryKind::Sigmoid },
    &Unary { id: "tanh", kind: UnaryKind::Tanh },
    &Unary { id: "dropout", kind: UnaryKind::Dropout },
    &Unary { id: "scale", kind: UnaryKind::Scale },
    &Unary { id: "add_scalar", kind: UnaryKind::AddScalar },
    &Unary { id: "sum", kind: UnaryKind::Sum },
    &Unary { id: "mean", kind: UnaryKind::Mean },
    &Unary { id: "abs", kind: UnaryKind::Abs },
    &Unary { id: "clamp_log", kind: UnaryKind::ClampLog },
    &Binary { id: "add", kind: BinaryKind::Add },
    &Binary { id: "sub", kind: BinaryKind::Sub },
    &Binary { id: "mul", kind: BinaryKind::Mul },
    &Binary { id: "concat_channels", kind: BinaryKind::Concat },
    &InstanceNorm,
];

/// Keep samples off the kink of piecewise-linear ops.
fn off_kink(rng: &mut ChaCha8Rng) -> f64 {
    let mag = rng.random_range(0.05..1.0);
    if rng.random::<bool>() { mag } else { -mag }
}

struct Conv {
    id: &'static str,
    stride: usize,
    padding: usize,
    transpose: bool,
}

impl Primitive for Conv {
    fn id(&self) -> &'static str {
        self.id
    }

    fn expand_shapes(&self, shapes: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
        match shapes {
            [x, k] if k.len() == 4 => {
                let out_c = if self.transpose { k[1] } else { k[0] };
                Ok(vec![x.clone(), k.clone(), vec![out_c]])
            }
            [_, _, _] => Ok(shapes.to_vec()),
            _ => Err(Error::invalid(
                "tensor",
                "finite_difference_check",
                format!("{} expects [input, kernel] or [input, kernel, bias] shapes", self.id),
            )),
        }
    }

    fn random_shapes(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let n = rng.random_range(1..=2);
        let ci = rng.random_range(1..=3);
        let co = rng.random_range(1..=3);
        let (k, lo) = match (self.transpose, self.stride) {
            (false, 1) => {
                let k = rng.random_range(1..=3);
                (k, k.max(2))
            }
            (false, _) => {
                let k = rng.random_range(3..=4);
                (k, k)
            }
            (true, 1) => (rng.random_range(1..=3), 1),
            (true, _) => (4, 1),
        };
        let h = rng.random_range(lo..=lo + 3);
        let w = rng.random_range(lo..=lo + 3);
        let kernel = if self.transpose { vec![ci, co, k, k] } else { vec![co, ci, k, k] };
        vec![vec![n, ci, h, w], kernel]
    }

    fn apply(&self, g: &mut Graph<f64>, inputs: &[NodeId]) -> Result<NodeId> {
        if self.transpose {
            g.conv_transpose2d(inputs[0], inputs[1], inputs[2], self.stride, self.padding)
        } else {
            g.conv2d(inputs[0], inputs[1], inputs[2], self.stride, self.padding)
        }
    }
}

#[derive(Clone, Copy)]
enum UnaryKind {
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
    Dropout,
    Scale,
    AddScalar,
    Sum,
    Mean,
    Abs,
    ClampLog,
}

struct Unary {
    id: &'static str,
    kind: UnaryKind,
}

impl Primitive for Unary {
    fn id(&self) -> &'static str {
        self.id
    }

    fn random_shapes(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let rank = rng.random_range(1..=4);
        vec![(0..rank).map(|_| rng.random_range(1..=4)).collect()]
    }

    fn sample(&self, _index: usize, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        match self.kind {
            UnaryKind::Relu | UnaryKind::LeakyRelu | UnaryKind::Abs => {
                Tensor::from_fn(shape.to_vec(), |_| off_kink(rng))
            }
            UnaryKind::ClampLog => Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0.05..2.0)),
            _ => Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-2.0..2.0)),
        }
    }

    fn apply(&self, g: &mut Graph<f64>, inputs: &[NodeId]) -> Result<NodeId> {
        let x = inputs[0];
        match self.kind {
            UnaryKind::Relu => g.relu(x),
            UnaryKind::LeakyRelu => g.leaky_relu(x, 0.2),
            UnaryKind::Sigmoid => g.sigmoid(x),
            UnaryKind::Tanh => g.tanh(x),
            UnaryKind::Dropout => g.dropout(x, 0.3, 17, true),
            UnaryKind::Scale => g.scale(x, -1.7),
            UnaryKind::AddScalar => g.add_scalar(x, 0.3),
            UnaryKind::Sum => g.sum(x),
            UnaryKind::Mean => g.mean(x),
            UnaryKind::Abs => g.abs(x),
            UnaryKind::ClampLog => g.clamp_log(x, 1e-7),
        }
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Concat,
}

struct Binary {
    id: &'static str,
    kind: BinaryKind,
}

impl Primitive for Binary {
    fn id(&self) -> &'static str {
        self.id
    }

    fn random_shapes(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        match self.kind {
            BinaryKind::Concat => {
                let (n, h, w) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=4));
                vec![
                    vec![n, rng.random_range(1..=3), h, w],
                    vec![n, rng.random_range(1..=3), h, w],
                ]
            }
            _ => {
                let rank = rng.random_range(1..=4);
                let s: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=4)).collect();
                vec![s.clone(), s]
            }
        }
    }

    fn apply(&self, g: &mut Graph<f64>, inputs: &[NodeId]) -> Result<NodeId> {
        let (a, b) = (inputs[0], inputs[1]);
        match self.kind {
            BinaryKind::Add => g.add(a, b),
            BinaryKind::Sub => g.sub(a, b),
            BinaryKind::Mul => g.mul(a, b),
            BinaryKind::Concat => g.concat_channels(a, b),
        }
    }
}

struct InstanceNorm;

impl Primitive for InstanceNorm {
    fn id(&self) -> &'static str {
        "instance_norm"
    }

    fn expand_shapes(&self, shapes: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
        match shapes {
            [x] if x.len() == 4 => Ok(vec![x.clone(), vec![x[1]], vec![x[1]]]),
            [_, _, _] => Ok(shapes.to_vec()),
            _ => Err(Error::invalid(
                "tensor",
                "finite_difference_check",
                "instance_norm expects [input] or [input, gain, bias] shapes",
            )),
        }
    }

    fn random_shapes(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        vec![vec![
            rng.random_range(1..=2),
            rng.random_range(1..=3),
            rng.random_range(2..=4),
            rng.random_range(2..=4),
        ]]
    }

    fn apply(&self, g: &mut Graph<f64>, inputs: &[NodeId]) -> Result<NodeId> {
        g.instance_norm(inputs[0], inputs[1], inputs[2], 1e-5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Backward;

    #[test]
    fn conv2d_example_passes() {
        let r = finite_difference_check("conv2d", &[vec![1, 2, 5, 5], vec![3, 2, 3, 3]], 1e-4, 1).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.max_rel_error.len(), 3);
    }

    #[test]
    fn sigmoid_example_passes() {
        let r = finite_difference_check("sigmoid", &[vec![4]], 1e-6, 2).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn unknown_id_rejected() {
        let err = finite_difference_check("maxpool", &[vec![4]], 1e-4, 0).unwrap_err();
        assert!(err.to_string().contains("maxpool"));
    }

    #[test]
    fn deterministic_for_seed() {
        let a = finite_difference_check("instance_norm", &[vec![1, 2, 3, 3]], 1e-4, 5).unwrap();
        let b = finite_difference_check("instance_norm", &[vec![1, 2, 3, 3]], 1e-4, 5).unwrap();
        assert_eq!(a, b);
    }

    /// Sigmoid whose backward forgets the `(1 - y)` factor.
    struct BrokenSigmoid;

    struct BrokenRule;

    impl Backward<f64> for BrokenRule {
        fn backward(&self, _inputs: &[&Tensor<f64>], output: &Tensor<f64>, grad: &Tensor<f64>) -> Vec<Tensor<f64>> {
            let d = output.data().iter().zip(grad.data()).map(|(y, g)| y * g).collect();
            vec![Tensor::new(output.shape().to_vec(), d).unwrap()]
        }
    }

    impl Primitive for BrokenSigmoid {
        fn id(&self) -> &'static str {
            "broken_sigmoid"
        }

        fn random_shapes(&self, _rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
            vec![vec![5]]
        }

        fn apply(&self, g: &mut Graph<f64>, inputs: &[NodeId]) -> Result<NodeId> {
            let v = g.value(inputs[0]).map(|x| 1.0 / (1.0 + (-x).exp()));
            g.custom(inputs, v, Box::new(BrokenRule))
        }
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let r = check_primitive(&BrokenSigmoid, &[vec![5]], 1e-4, 3).unwrap();
        assert!(!r.passed);
        assert!(r.worst() > 0.1, "{r:?}");
    }
}
