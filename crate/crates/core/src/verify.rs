//! Gradient verification suite over every differentiable primitive.
//!
//! Each case feeds random inputs through one primitive, reduces a
//! non-scalar output with a fixed random probe (`sum(out * probe)`), and
//! checks the gradient for every differentiable input.

use crate::error::Result;
use crate::gradcheck::{grad_check, ScalarFn};
use crate::ops;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Tolerance for dense linear-algebra primitives.
pub const DENSE_TOLERANCE: f64 = 1e-4;
/// Tolerance for every other primitive.
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
/// Finite-difference step used by the suite.
pub const SUITE_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale,
    Square,
    Silu,
    Sum,
    Mean,
    Reshape,
    Transpose,
    AddChannelBias,
    MeanAxis,
    Concat,
    Matmul,
    MatmulNt,
    Linear,
    Attention,
    Conv2d { stride: usize, padding: usize },
    Upsample2x,
    AvgPool2x,
    GroupNorm,
    Softmax { axis: usize },
    Embed,
    Mse,
    CosineSim,
    CrossEntropy,
    L2NormalizeRows,
}

impl Primitive {
    pub fn all() -> Vec<Primitive> {
        use Primitive::*;
        vec![
            Add,
            Sub,
            Mul,
            Scale,
            Square,
            Silu,
            Sum,
            Mean,
            Reshape,
            Transpose,
            AddChannelBias,
            MeanAxis,
            Concat,
            Matmul,
            MatmulNt,
            Linear,
            Attention,
            Conv2d { stride: 1, padding: 1 },
            Conv2d { stride: 2, padding: 1 },
            Upsample2x,
            AvgPool2x,
            GroupNorm,
            Softmax { axis: 1 },
            Softmax { axis: 0 },
            Embed,
            Mse,
            CosineSim,
            CrossEntropy,
            L2NormalizeRows,
        ]
    }

    pub fn name(&self) -> String {
        match self {
            Primitive::Conv2d { stride, padding } => format!("conv2d(s={stride},p={padding})"),
            Primitive::Softmax { axis } => format!("softmax(axis={axis})"),
            other => format!("{other:?}").to_lowercase(),
        }
    }

    pub fn tolerance(&self) -> f64 {
        match self {
            Primitive::Matmul | Primitive::MatmulNt | Primitive::Linear => DENSE_TOLERANCE,
            _ => DEFAULT_TOLERANCE,
        }
    }

    fn input_shapes(&self) -> Vec<Vec<usize>> {
        use Primitive::*;
        match self {
            Add | Sub | Mul | Mse => vec![vec![2, 3], vec![2, 3]],
            Scale | Square | Silu | Sum | Mean => vec![vec![7]],
            Reshape | Transpose | L2NormalizeRows => vec![vec![3, 4]],
            AddChannelBias => vec![vec![3, 2, 2], vec![3]],
            MeanAxis => vec![vec![2, 3, 4]],
            Concat => vec![vec![2, 3], vec![1, 3]],
            Matmul => vec![vec![3, 4], vec![4, 2]],
            MatmulNt => vec![vec![3, 4], vec![5, 4]],
            Linear => vec![vec![3, 4], vec![5, 4], vec![5]],
            Attention => vec![vec![2, 4], vec![3, 4], vec![3, 5]],
            Conv2d { .. } => vec![vec![2, 5, 5], vec![3, 2, 3, 3]],
            Upsample2x => vec![vec![2, 3, 3]],
            AvgPool2x => vec![vec![2, 4, 4]],
            GroupNorm => vec![vec![4, 3, 3], vec![4], vec![4]],
            Softmax { .. } => vec![vec![3, 4]],
            Embed => vec![vec![5, 3]],
            CosineSim => vec![vec![6], vec![6]],
            CrossEntropy => vec![vec![3, 5]],
        }
    }

    fn apply<T: Real>(&self, x: &[Tensor<T>]) -> Result<Tensor<T>> {
        use Primitive::*;
        match self {
            Add => x[0].add(&x[1]),
            Sub => x[0].sub(&x[1]),
            Mul => x[0].mul(&x[1]),
            Scale => x[0].scale(-1.75),
            Square => x[0].square(),
            Silu => x[0].silu(),
            Sum => x[0].sum(),
            Mean => x[0].mean(),
            Reshape => x[0].reshape(vec![2, 6]),
            Transpose => x[0].transpose(),
            AddChannelBias => x[0].add_channel_bias(&x[1]),
            MeanAxis => x[0].mean_axis(1),
            Concat => ops::concat(&x[..2]),
            Matmul => ops::matmul(&x[0], &x[1]),
            MatmulNt => x[0].matmul_nt(&x[1]),
            Linear => ops::linear(&x[0], &x[1], Some(&x[2])),
            Attention => ops::attention(&x[0], &x[1], &x[2]),
            Conv2d { stride, padding } => ops::conv2d(&x[0], &x[1], *stride, *padding),
            Upsample2x => x[0].upsample2x(),
            AvgPool2x => x[0].avg_pool2x(),
            GroupNorm => ops::group_norm(&x[0], 2, &x[1], &x[2]),
            Softmax { axis } => x[0].softmax(*axis),
            Embed => ops::embed(&[4, 0, 4, 2], &x[0]),
            Mse => ops::mse(&x[0], &x[1]),
            CosineSim => ops::cosine_sim(&x[0], &x[1]),
            CrossEntropy => ops::cross_entropy(&x[0], &[0, 4, 2]),
            L2NormalizeRows => x[0].l2_normalize_rows(),
        }
    }
}

/// One primitive with fixed random inputs, differentiated w.r.t. input `wrt`.
#[derive(Clone, Debug)]
pub struct PrimitiveCase {
    pub primitive: Primitive,
    pub wrt: usize,
    shapes: Vec<Vec<usize>>,
    inputs: Vec<Vec<f64>>,
    probe: Option<Vec<f64>>,
}

impl PrimitiveCase {
    pub fn new(primitive: Primitive, wrt: usize, seed: u64) -> Result<Self> {
        let mut rng = Rng::with_stream(seed, wrt as u64);
        let shapes = primitive.input_shapes();
        let inputs: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| (0..s.iter().product()).map(|_| rng.normal_f64()).collect())
            .collect();
        let tensors = shapes
            .iter()
            .zip(&inputs)
            .map(|(s, v)| Tensor::<f64>::new(s.clone(), v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = primitive.apply(&tensors)?;
        let probe = (out.numel() > 1).then(|| (0..out.numel()).map(|_| rng.normal_f64()).collect());
        Ok(PrimitiveCase {
            primitive,
            wrt,
            shapes,
            inputs,
            probe,
        })
    }

    pub fn input(&self) -> Result<Tensor<f64>> {
        Tensor::new(self.shapes[self.wrt].clone(), self.inputs[self.wrt].clone())
    }
}

impl ScalarFn for PrimitiveCase {
    fn eval<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut args = Vec::with_capacity(self.inputs.len());
        for (i, (s, v)) in self.shapes.iter().zip(&self.inputs).enumerate() {
            if i == self.wrt {
                args.push(x.clone());
            } else {
                args.push(Tensor::<T>::from_f64(s.clone(), v)?);
            }
        }
        let out = self.primitive.apply(&args)?;
        match &self.probe {
            None => Ok(out),
            Some(p) => {
                let probe = Tensor::<T>::from_f64(out.shape().to_vec(), p)?;
                out.mul(&probe)?.sum()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub wrt: usize,
    pub seed: u64,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Runs every primitive against every differentiable input for each seed.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<CheckOutcome>> {
    let mut outcomes = Vec::new();
    for prim in Primitive::all() {
        let n_inputs = prim.input_shapes().len();
        for &seed in seeds {
            for wrt in 0..n_inputs {
                let case = PrimitiveCase::new(prim.clone(), wrt, seed)?;
                let report = grad_check(&case, &case.input()?, SUITE_STEP)?;
                outcomes.push(CheckOutcome {
                    name: prim.name(),
                    wrt,
                    seed,
                    max_rel_err: report.max_rel_err,
                    tolerance: prim.tolerance(),
                });
            }
        }
    }
    Ok(outcomes)
}
