//! Dense-tensor reverse-mode differentiation.
//!
//! The graph is a define-by-run tape: every operation evaluates eagerly and
//! appends a node recording its inputs and whatever the adjoint rule needs
//! (argmax indices, strides). Creation order is a topological order, so
//! [`Graph::backward`] is a single reverse sweep that visits each node
//! exactly once.
//!
//! Values are stored at the graph's element type `R` (`f32` in the training
//! pipeline, `f64` where finite-difference checks need the headroom);
//! full reductions accumulate in f64 regardless.

mod conv;
mod gradcheck;

pub use gradcheck::{grad_check, CoordReport, GradCheckReport};

use num_traits::Float;
use thiserror::Error;

use crate::EPS;

/// Element type of a graph: `f32` for the production pipeline, `f64` for
/// precision-sensitive checks.
pub trait Real: Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static {
    fn of(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).unwrap()
    }
    fn f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap()
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op} expects a {expected}, got shape {got:?}")]
    BadRank { op: &'static str, expected: &'static str, got: Vec<usize> },
    #[error("non-finite value in leaf at flat index {index}")]
    NonFinite { index: usize },
    #[error("backward root must be scalar, got shape {got:?}")]
    NotScalar { got: Vec<usize> },
    #[error("reshape cannot map {from} elements to {to}")]
    BadReshape { from: usize, to: usize },
    #[error("conv3d kernel extents must be odd, got {got:?}")]
    EvenKernel { got: Vec<usize> },
    #[error("conv3d stride must be 1 or 2, got {got}")]
    BadStride { got: usize },
    #[error("stack reduce needs at least one input")]
    EmptyStack,
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(pub(crate) usize);

enum Op<R: Real> {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    /// `num / (den + eps)`, elementwise.
    DivEps { num: Tensor, den: Tensor, eps: R },
    /// `a - s` with scalar `s` broadcast over `a`.
    SubBcast { a: Tensor, s: Tensor },
    /// `k * x + c`.
    Affine { x: Tensor, k: R },
    Exp(Tensor),
    /// `ln(x + eps)`.
    LogEps { x: Tensor, eps: R },
    Abs(Tensor),
    Relu(Tensor),
    Sigmoid(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    Conv3d { x: Tensor, w: Tensor, b: Tensor, stride: usize },
    Upsample2x(Tensor),
    ConcatChannels(Tensor, Tensor),
    ChannelAffine { x: Tensor, scale: Tensor, shift: Tensor },
    /// Per-channel spatial standardization `(x - mean_c) / sqrt(var_c + eps)`
    /// with the per-channel inverse std saved for the backward pass.
    ChannelStandardize { x: Tensor, istd: Vec<R> },
    SpatialGradL1(Tensor),
    /// Windowed max over a structuring-element support, replicate padding.
    /// `argmax` holds the flat source index chosen per output voxel.
    MaskedWindowMax { x: Tensor, argmax: Vec<u32> },
    /// Windowed min over a support (the erosion dual of `MaskedWindowMax`).
    MaskedWindowMin { x: Tensor, argmin: Vec<u32> },
    StackMax { xs: Vec<Tensor>, arg: Vec<u8> },
    StackMin { xs: Vec<Tensor>, arg: Vec<u8> },
    /// Pointwise active-contour penalty:
    /// `exp(gamma*s)` where `gamma <= 0`, `exp(-gamma*(1-s))` where it is
    /// positive.
    AcwePointwise { gamma: Tensor, s: Tensor },
    /// Hard threshold `x >= t`; piecewise constant, zero gradient.
    StepGe { x: Tensor },
    Reshape(Tensor),
}

struct Node<R: Real> {
    shape: Vec<usize>,
    values: Vec<R>,
    grad: Option<Vec<R>>,
    requires_grad: bool,
    op: Op<R>,
}

pub struct Graph<R: Real> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

type Result<T> = std::result::Result<T, AutodiffError>;

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Self { nodes: Vec::with_capacity(n) }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn values(&self, t: Tensor) -> &[R] {
        &self.nodes[t.0].values
    }

    /// Gradient of the last backward root w.r.t. `t`, if `t` participates.
    pub fn grad(&self, t: Tensor) -> Option<&[R]> {
        self.nodes[t.0].grad.as_deref()
    }

    pub fn numel(&self, t: Tensor) -> usize {
        self.nodes[t.0].values.len()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<R>, op: Op<R>) -> Tensor {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::StepGe { .. } => false,
            op => self.op_inputs(op).iter().any(|t| self.nodes[t.0].requires_grad),
        };
        self.nodes.push(Node { shape, values, grad: None, requires_grad, op });
        Tensor(self.nodes.len() - 1)
    }

    fn op_inputs(&self, op: &Op<R>) -> Vec<Tensor> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatChannels(a, b) => {
                vec![*a, *b]
            }
            Op::DivEps { num, den, .. } => vec![*num, *den],
            Op::SubBcast { a, s } => vec![*a, *s],
            Op::Affine { x, .. }
            | Op::Exp(x)
            | Op::LogEps { x, .. }
            | Op::Abs(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Upsample2x(x)
            | Op::SpatialGradL1(x)
            | Op::MaskedWindowMax { x, .. }
            | Op::MaskedWindowMin { x, .. }
            | Op::ChannelStandardize { x, .. }
            | Op::StepGe { x, .. }
            | Op::Reshape(x) => vec![*x],
            Op::Conv3d { x, w, b, .. } => vec![*x, *w, *b],
            Op::ChannelAffine { x, scale, shift } => vec![*x, *scale, *shift],
            Op::StackMax { xs, .. } | Op::StackMin { xs, .. } => xs.clone(),
            Op::AcwePointwise { gamma, s } => vec![*gamma, *s],
        }
    }

    /// Creates a leaf tensor. Leaves are the only place values enter the
    /// graph, so finiteness is enforced here once.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<R>, requires_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if values.len() != numel || shape.iter().any(|&d| d == 0) {
            return Err(AutodiffError::BadRank {
                op: "leaf",
                expected: "shape matching the value count",
                got: shape.to_vec(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { index });
        }
        self.nodes.push(Node {
            shape: shape.to_vec(),
            values,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(Tensor(self.nodes.len() - 1))
    }

    pub fn leaf_f64(
        &mut self,
        shape: &[usize],
        values: &[f64],
        requires_grad: bool,
    ) -> Result<Tensor> {
        self.leaf(shape, values.iter().map(|&v| R::of(v)).collect(), requires_grad)
    }

    pub fn scalar(&mut self, v: f64) -> Result<Tensor> {
        self.leaf(&[1], vec![R::of(v)], false)
    }

    fn check_same_shape(&self, op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Tensor,
        b: Tensor,
        f: impl Fn(R, R) -> R,
        op: Op<R>,
    ) -> Result<Tensor> {
        self.check_same_shape(name, a, b)?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), values, op))
    }

    fn unary(&mut self, x: Tensor, f: impl Fn(R) -> R, op: Op<R>) -> Tensor {
        let values = self.nodes[x.0].values.iter().map(|&v| f(v)).collect();
        self.push(self.nodes[x.0].shape.clone(), values, op)
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `num / (den + eps)` with the crate-wide guard by default.
    pub fn div_eps(&mut self, num: Tensor, den: Tensor) -> Result<Tensor> {
        let eps = R::of(EPS);
        self.binary("div_eps", num, den, |x, y| x / (y + eps), Op::DivEps { num, den, eps })
    }

    /// `a - s` with `s` a scalar tensor broadcast over `a`.
    pub fn sub_bcast(&mut self, a: Tensor, s: Tensor) -> Result<Tensor> {
        if self.numel(s) != 1 {
            return Err(AutodiffError::BadRank {
                op: "sub_bcast",
                expected: "scalar subtrahend",
                got: self.nodes[s.0].shape.clone(),
            });
        }
        let sv = self.nodes[s.0].values[0];
        let values = self.nodes[a.0].values.iter().map(|&v| v - sv).collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), values, Op::SubBcast { a, s }))
    }

    /// `k*x + c` with constant coefficients.
    pub fn affine(&mut self, x: Tensor, k: f64, c: f64) -> Tensor {
        let (rk, rc) = (R::of(k), R::of(c));
        self.unary(x, |v| rk * v + rc, Op::Affine { x, k: rk })
    }

    pub fn neg(&mut self, x: Tensor) -> Tensor {
        self.affine(x, -1.0, 0.0)
    }

    pub fn scale(&mut self, x: Tensor, k: f64) -> Tensor {
        self.affine(x, k, 0.0)
    }

    pub fn exp(&mut self, x: Tensor) -> Tensor {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    /// `ln(x + eps)`; the guard keeps zero inputs finite.
    pub fn log_eps(&mut self, x: Tensor) -> Tensor {
        let eps = R::of(EPS);
        self.unary(x, |v| (v + eps).ln(), Op::LogEps { x, eps })
    }

    pub fn abs(&mut self, x: Tensor) -> Tensor {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    /// `max(x, 0)`, also the `clamp_min(x, 0)` of the operator inventory.
    pub fn relu(&mut self, x: Tensor) -> Tensor {
        self.unary(x, |v| if v > R::zero() { v } else { R::zero() }, Op::Relu(x))
    }

    /// Logistic sigmoid, output clamped to `[1e-6, 1 - 1e-6]`. The clamp
    /// keeps the f32 derivative `out*(1-out)` strictly positive, so a
    /// saturated map is never an absorbing state for the optimizer.
    pub fn sigmoid(&mut self, x: Tensor) -> Tensor {
        let one = R::one();
        let lo = R::of(1e-6);
        let hi = R::of(1.0 - 1e-6);
        self.unary(
            x,
            |v| {
                let s = if v >= R::zero() {
                    one / (one + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (one + e)
                };
                if s < lo {
                    lo
                } else if s > hi {
                    hi
                } else {
                    s
                }
            },
            Op::Sigmoid(x),
        )
    }

    /// Scalar sum, accumulated in f64.
    pub fn sum(&mut self, x: Tensor) -> Tensor {
        let acc: f64 = self.nodes[x.0].values.iter().map(|v| v.f64()).sum();
        self.push(vec![1], vec![R::of(acc)], Op::Sum(x))
    }

    /// Scalar mean, accumulated in f64.
    pub fn mean(&mut self, x: Tensor) -> Tensor {
        let n = self.numel(x) as f64;
        let acc: f64 = self.nodes[x.0].values.iter().map(|v| v.f64()).sum();
        self.push(vec![1], vec![R::of(acc / n)], Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Tensor, shape: &[usize]) -> Result<Tensor> {
        let to: usize = shape.iter().product();
        if to != self.numel(x) {
            return Err(AutodiffError::BadReshape { from: self.numel(x), to });
        }
        let values = self.nodes[x.0].values.clone();
        Ok(self.push(shape.to_vec(), values, Op::Reshape(x)))
    }

    /// 3D convolution over `[C, Z, Y, X]` input with `[Co, Ci, kz, ky, kx]`
    /// weights and `[Co]` bias; odd kernels, replicate padding, stride 1
    /// or 2.
    pub fn conv3d(&mut self, x: Tensor, w: Tensor, b: Tensor, stride: usize) -> Result<Tensor> {
        if stride != 1 && stride != 2 {
            return Err(AutodiffError::BadStride { got: stride });
        }
        let xs: [usize; 4] = self.nodes[x.0]
            .shape
            .clone()
            .try_into()
            .map_err(|_| AutodiffError::BadRank {
                op: "conv3d",
                expected: "[C,Z,Y,X] input",
                got: self.nodes[x.0].shape.clone(),
            })?;
        let ws: [usize; 5] = self.nodes[w.0]
            .shape
            .clone()
            .try_into()
            .map_err(|_| AutodiffError::BadRank {
                op: "conv3d",
                expected: "[Co,Ci,kz,ky,kx] weight",
                got: self.nodes[w.0].shape.clone(),
            })?;
        if ws[2] % 2 == 0 || ws[3] % 2 == 0 || ws[4] % 2 == 0 {
            return Err(AutodiffError::EvenKernel { got: ws[2..].to_vec() });
        }
        if ws[1] != xs[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv3d(channels)",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[w.0].shape.clone(),
            });
        }
        if self.nodes[b.0].shape != [ws[0]] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv3d(bias)",
                lhs: self.nodes[b.0].shape.clone(),
                rhs: vec![ws[0]],
            });
        }
        let (values, os) = conv::forward(
            &self.nodes[x.0].values,
            &xs,
            &self.nodes[w.0].values,
            &ws,
            &self.nodes[b.0].values,
            stride,
        );
        Ok(self.push(os.to_vec(), values, Op::Conv3d { x, w, b, stride }))
    }

    /// Nearest-neighbour doubling of all three spatial axes of `[C,Z,Y,X]`.
    pub fn upsample_nearest2x(&mut self, x: Tensor) -> Result<Tensor> {
        let s: [usize; 4] = self.nodes[x.0]
            .shape
            .clone()
            .try_into()
            .map_err(|_| AutodiffError::BadRank {
                op: "upsample_nearest2x",
                expected: "[C,Z,Y,X] input",
                got: self.nodes[x.0].shape.clone(),
            })?;
        let [c, z, y, xd] = s;
        let (oz, oy, ox) = (2 * z, 2 * y, 2 * xd);
        let xv = &self.nodes[x.0].values;
        let mut values = vec![R::zero(); c * oz * oy * ox];
        for ci in 0..c {
            for zi in 0..oz {
                for yi in 0..oy {
                    let src = ((ci * z + zi / 2) * y + yi / 2) * xd;
                    let dst = ((ci * oz + zi) * oy + yi) * ox;
                    for xi in 0..ox {
                        values[dst + xi] = xv[src + xi / 2];
                    }
                }
            }
        }
        Ok(self.push(vec![c, oz, oy, ox], values, Op::Upsample2x(x)))
    }

    /// Concatenates along the channel axis of `[C,Z,Y,X]`.
    pub fn concat_channels(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 4 || sb.len() != 4 || sa[1..] != sb[1..] {
            return Err(AutodiffError::ShapeMismatch { op: "concat_channels", lhs: sa, rhs: sb });
        }
        let mut values = self.nodes[a.0].values.clone();
        values.extend_from_slice(&self.nodes[b.0].values);
        let shape = vec![sa[0] + sb[0], sa[1], sa[2], sa[3]];
        Ok(self.push(shape, values, Op::ConcatChannels(a, b)))
    }

    /// Per-channel `scale[c] * x + shift[c]` over `[C,Z,Y,X]`.
    pub fn channel_affine(&mut self, x: Tensor, scale: Tensor, shift: Tensor) -> Result<Tensor> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 4 {
            return Err(AutodiffError::BadRank {
                op: "channel_affine",
                expected: "[C,Z,Y,X] input",
                got: s,
            });
        }
        let c = s[0];
        if self.nodes[scale.0].shape != [c] || self.nodes[shift.0].shape != [c] {
            return Err(AutodiffError::ShapeMismatch {
                op: "channel_affine",
                lhs: self.nodes[scale.0].shape.clone(),
                rhs: vec![c],
            });
        }
        let sp: usize = s[1..].iter().product();
        let mut values = Vec::with_capacity(c * sp);
        for ci in 0..c {
            let k = self.nodes[scale.0].values[ci];
            let t = self.nodes[shift.0].values[ci];
            values.extend(self.nodes[x.0].values[ci * sp..(ci + 1) * sp].iter().map(|&v| k * v + t));
        }
        Ok(self.push(s, values, Op::ChannelAffine { x, scale, shift }))
    }

    /// Per-channel spatial standardization of `[C,Z,Y,X]`: zero mean and
    /// unit variance over each channel's voxels. The variance guard is
    /// 1e-5, matching common batch-statistics practice.
    pub fn channel_standardize(&mut self, x: Tensor) -> Result<Tensor> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 4 {
            return Err(AutodiffError::BadRank {
                op: "channel_standardize",
                expected: "[C,Z,Y,X] input",
                got: s,
            });
        }
        let c = s[0];
        let sp: usize = s[1..].iter().product();
        let eps = 1e-5f64;
        let xv = &self.nodes[x.0].values;
        let mut values = vec![R::zero(); xv.len()];
        let mut istds = Vec::with_capacity(c);
        for ci in 0..c {
            let ch = &xv[ci * sp..(ci + 1) * sp];
            let mean: f64 = ch.iter().map(|v| v.f64()).sum::<f64>() / sp as f64;
            let var: f64 =
                ch.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / sp as f64;
            let istd = 1.0 / (var + eps).sqrt();
            let (rm, ri) = (R::of(mean), R::of(istd));
            for (o, &v) in values[ci * sp..(ci + 1) * sp].iter_mut().zip(ch) {
                *o = (v - rm) * ri;
            }
            istds.push(ri);
        }
        Ok(self.push(s, values, Op::ChannelStandardize { x, istd: istds }))
    }

    /// Per-voxel sum of absolute forward differences along z, y, x of a
    /// `[Z,Y,X]` volume, zero at the far boundary.
    pub fn spatial_gradient_l1(&mut self, x: Tensor) -> Result<Tensor> {
        let s: [usize; 3] = self.nodes[x.0]
            .shape
            .clone()
            .try_into()
            .map_err(|_| AutodiffError::BadRank {
                op: "spatial_gradient_l1",
                expected: "[Z,Y,X] input",
                got: self.nodes[x.0].shape.clone(),
            })?;
        let [zd, yd, xd] = s;
        let v = &self.nodes[x.0].values;
        let mut values = vec![R::zero(); v.len()];
        for z in 0..zd {
            for y in 0..yd {
                for x_ in 0..xd {
                    let i = (z * yd + y) * xd + x_;
                    let mut g = R::zero();
                    if z + 1 < zd {
                        g = g + (v[i + yd * xd] - v[i]).abs();
                    }
                    if y + 1 < yd {
                        g = g + (v[i + xd] - v[i]).abs();
                    }
                    if x_ + 1 < xd {
                        g = g + (v[i + 1] - v[i]).abs();
                    }
                    values[i] = g;
                }
            }
        }
        Ok(self.push(s.to_vec(), values, Op::SpatialGradL1(x)))
    }

    /// Max over the 3x3x3 neighbourhood restricted to a structuring
    /// element's support, replicate padding. Ties go to the lowest flat
    /// source index so subgradients are deterministic.
    pub fn masked_window_max(&mut self, x: Tensor, offsets: &[[i32; 3]]) -> Result<Tensor> {
        self.masked_window_extremum(x, offsets, true)
    }

    /// Min over a support; equals `-masked_window_max(-x)` without the
    /// extra negation nodes.
    pub fn masked_window_min(&mut self, x: Tensor, offsets: &[[i32; 3]]) -> Result<Tensor> {
        self.masked_window_extremum(x, offsets, false)
    }

    fn masked_window_extremum(
        &mut self,
        x: Tensor,
        offsets: &[[i32; 3]],
        is_max: bool,
    ) -> Result<Tensor> {
        let s: [usize; 3] = self.nodes[x.0]
            .shape
            .clone()
            .try_into()
            .map_err(|_| AutodiffError::BadRank {
                op: "masked_window_max",
                expected: "[Z,Y,X] input",
                got: self.nodes[x.0].shape.clone(),
            })?;
        if offsets.is_empty() {
            return Err(AutodiffError::EmptyStack);
        }
        let [zd, yd, xd] = s;
        let v = &self.nodes[x.0].values;
        let mut values = vec![R::zero(); v.len()];
        let mut argbest = vec![0u32; v.len()];
        let clamp = |p: i64, n: usize| -> usize { p.clamp(0, n as i64 - 1) as usize };

        // flat deltas sorted ascending: on the clamp-free interior, scan
        // order equals source-index order, so the strict comparison keeps
        // the lowest flat index on ties
        let mut deltas: Vec<isize> = offsets
            .iter()
            .map(|o| (o[0] as isize * yd as isize + o[1] as isize) * xd as isize + o[2] as isize)
            .collect();
        deltas.sort_unstable();

        let slow_voxel = |z: usize, y: usize, x_: usize| -> (R, u32) {
            let mut best = R::nan();
            let mut best_idx = u32::MAX;
            for o in offsets {
                let sz = clamp(z as i64 + o[0] as i64, zd);
                let sy = clamp(y as i64 + o[1] as i64, yd);
                let sx = clamp(x_ as i64 + o[2] as i64, xd);
                let idx = ((sz * yd + sy) * xd + sx) as u32;
                let val = v[idx as usize];
                let better = best_idx == u32::MAX
                    || (is_max && val > best)
                    || (!is_max && val < best)
                    || (val == best && idx < best_idx);
                if better {
                    best = val;
                    best_idx = idx;
                }
            }
            (best, best_idx)
        };

        for z in 0..zd {
            let z_interior = z >= 1 && z + 1 < zd;
            for y in 0..yd {
                let interior = z_interior && y >= 1 && y + 1 < yd && xd >= 3;
                let row = (z * yd + y) * xd;
                if interior {
                    for x_ in 1..xd - 1 {
                        let i = (row + x_) as isize;
                        let mut best = v[(i + deltas[0]) as usize];
                        let mut best_idx = (i + deltas[0]) as u32;
                        for &d in &deltas[1..] {
                            let idx = (i + d) as usize;
                            let val = v[idx];
                            if (is_max && val > best) || (!is_max && val < best) {
                                best = val;
                                best_idx = idx as u32;
                            }
                        }
                        values[row + x_] = best;
                        argbest[row + x_] = best_idx;
                    }
                    for x_ in [0, xd - 1] {
                        let (b, bi) = slow_voxel(z, y, x_);
                        values[row + x_] = b;
                        argbest[row + x_] = bi;
                    }
                } else {
                    for x_ in 0..xd {
                        let (b, bi) = slow_voxel(z, y, x_);
                        values[row + x_] = b;
                        argbest[row + x_] = bi;
                    }
                }
            }
        }
        let op = if is_max {
            Op::MaskedWindowMax { x, argmax: argbest }
        } else {
            Op::MaskedWindowMin { x, argmin: argbest }
        };
        Ok(self.push(s.to_vec(), values, op))
    }

    /// Pointwise max across same-shape tensors; ties go to the lowest stack
    /// index.
    pub fn stack_reduce_max(&mut self, xs: &[Tensor]) -> Result<Tensor> {
        self.stack_reduce(xs, true)
    }

    pub fn stack_reduce_min(&mut self, xs: &[Tensor]) -> Result<Tensor> {
        self.stack_reduce(xs, false)
    }

    fn stack_reduce(&mut self, xs: &[Tensor], is_max: bool) -> Result<Tensor> {
        let first = *xs.first().ok_or(AutodiffError::EmptyStack)?;
        for &t in &xs[1..] {
            self.check_same_shape("stack_reduce", first, t)?;
        }
        let n = self.numel(first);
        let mut values = self.nodes[first.0].values.clone();
        let mut arg = vec![0u8; n];
        for (k, &t) in xs.iter().enumerate().skip(1) {
            let tv = &self.nodes[t.0].values;
            for i in 0..n {
                let better = if is_max { tv[i] > values[i] } else { tv[i] < values[i] };
                if better {
                    values[i] = tv[i];
                    arg[i] = k as u8;
                }
            }
        }
        let op = if is_max {
            Op::StackMax { xs: xs.to_vec(), arg }
        } else {
            Op::StackMin { xs: xs.to_vec(), arg }
        };
        Ok(self.push(self.nodes[first.0].shape.clone(), values, op))
    }

    /// Pointwise active-contour penalty of the compound loss:
    /// `exp(gamma*s)` on the non-positive branch of `gamma`,
    /// `exp(-gamma*(1-s))` on the positive one. Fused so the unselected
    /// branch can never overflow.
    pub fn acwe_pointwise(&mut self, gamma: Tensor, s: Tensor) -> Result<Tensor> {
        self.check_same_shape("acwe_pointwise", gamma, s)?;
        let one = R::one();
        let values = self.nodes[gamma.0]
            .values
            .iter()
            .zip(&self.nodes[s.0].values)
            .map(|(&g, &sv)| {
                if g <= R::zero() {
                    (g * sv).exp()
                } else {
                    (-g * (one - sv)).exp()
                }
            })
            .collect();
        Ok(self.push(self.nodes[gamma.0].shape.clone(), values, Op::AcwePointwise { gamma, s }))
    }

    /// Hard threshold `x >= t` as 0/1 values; gradient is zero everywhere.
    pub fn step_ge(&mut self, x: Tensor, threshold: f64) -> Tensor {
        let t = R::of(threshold);
        self.unary(x, |v| if v >= t { R::one() } else { R::zero() }, Op::StepGe { x })
    }

    /// Reverse sweep from a scalar root; every `requires_grad` leaf ends up
    /// holding `d(root)/d(leaf)`.
    pub fn backward(&mut self, root: Tensor) -> Result<()> {
        if self.numel(root) != 1 {
            return Err(AutodiffError::NotScalar { got: self.nodes[root.0].shape.clone() });
        }
        for node in &mut self.nodes[..=root.0] {
            node.grad = node.requires_grad.then(|| vec![R::zero(); node.values.len()]);
        }
        self.nodes[root.0].grad = Some(vec![R::one()]);
        // a constant graph has nothing upstream of the root
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &rest[0];
            let gout = node.grad.as_ref().expect("grad allocated");
            backward_step(before, node, gout);
        }
        Ok(())
    }
}

/// Two disjoint mutable nodes out of the prefix slice.
fn pair<'a, R: Real>(
    nodes: &'a mut [Node<R>],
    i: usize,
    j: usize,
) -> (&'a mut Node<R>, &'a mut Node<R>) {
    debug_assert_ne!(i, j);
    if i < j {
        let (l, r) = nodes.split_at_mut(j);
        (&mut l[i], &mut r[0])
    } else {
        let (l, r) = nodes.split_at_mut(i);
        (&mut r[0], &mut l[j])
    }
}

fn add_scaled<R: Real>(grad: &mut [R], src: &[R], k: R) {
    for (g, &s) in grad.iter_mut().zip(src) {
        *g = *g + k * s;
    }
}

fn backward_step<R: Real>(before: &mut [Node<R>], node: &Node<R>, gout: &[R]) {
    let needs = |t: &Tensor, before: &[Node<R>]| before[t.0].requires_grad;
    match &node.op {
        Op::Leaf | Op::StepGe { .. } => {}
        Op::Add(a, b) => {
            for t in [a, b] {
                if needs(t, before) {
                    let g = before[t.0].grad.as_mut().unwrap();
                    add_scaled(g, gout, R::one());
                }
            }
        }
        Op::Sub(a, b) => {
            if needs(a, before) {
                add_scaled(before[a.0].grad.as_mut().unwrap(), gout, R::one());
            }
            if needs(b, before) {
                add_scaled(before[b.0].grad.as_mut().unwrap(), gout, -R::one());
            }
        }
        Op::Mul(a, b) => {
            if a == b {
                if needs(a, before) {
                    let n = &mut before[a.0];
                    let (vals, grad) = (&n.values, n.grad.as_mut().unwrap());
                    let two = R::of(2.0);
                    for i in 0..vals.len() {
                        grad[i] = grad[i] + two * vals[i] * gout[i];
                    }
                }
            } else {
                if needs(a, before) {
                    let (na, nb) = pair(before, a.0, b.0);
                    let g = na.grad.as_mut().unwrap();
                    for i in 0..g.len() {
                        g[i] = g[i] + nb.values[i] * gout[i];
                    }
                }
                if needs(b, before) {
                    let (nb, na) = pair(before, b.0, a.0);
                    let g = nb.grad.as_mut().unwrap();
                    for i in 0..g.len() {
                        g[i] = g[i] + na.values[i] * gout[i];
                    }
                }
            }
        }
        Op::DivEps { num, den, eps } => {
            // out = n/(d+eps)
            if needs(num, before) {
                let (nn, nd) = pair(before, num.0, den.0);
                let g = nn.grad.as_mut().unwrap();
                for i in 0..g.len() {
                    g[i] = g[i] + gout[i] / (nd.values[i] + *eps);
                }
            }
            if needs(den, before) {
                let (nd, _) = pair(before, den.0, num.0);
                let g = nd.grad.as_mut().unwrap();
                for i in 0..g.len() {
                    let d = nd.values[i] + *eps;
                    g[i] = g[i] - gout[i] * node.values[i] / d;
                }
            }
        }
        Op::SubBcast { a, s } => {
            if needs(a, before) {
                add_scaled(before[a.0].grad.as_mut().unwrap(), gout, R::one());
            }
            if needs(s, before) {
                let acc: f64 = gout.iter().map(|g| g.f64()).sum();
                let g = before[s.0].grad.as_mut().unwrap();
                g[0] = g[0] - R::of(acc);
            }
        }
        Op::Affine { x, k } => {
            if needs(x, before) {
                add_scaled(before[x.0].grad.as_mut().unwrap(), gout, *k);
            }
        }
        Op::Exp(x) => {
            if needs(x, before) {
                let g = before[x.0].grad.as_mut().unwrap();
                for i in 0..g.len() {
                    g[i] = g[i] + node.values[i] * gout[i];
                }
            }
        }
        Op::LogEps { x, eps } => {
            if needs(x, before) {
                let n = &mut before[x.0];
                let (vals, g) = (&n.values, n.grad.as_mut().unwrap());
                for i in 0..g.len() {
                    g[i] = g[i] + gout[i] / (vals[i] + *eps);
                }
            }
        }
        Op::Abs(x) => {
            if needs(x, before) {
                let n = &mut before[x.0];
                let (vals, g) = (&n.values, n.grad.as_mut().unwrap());
                for i in 0..g.len() {
                    let s = if vals[i] > R::zero() {
                        R::one()
                    } else if vals[i] < R::zero() {
                        -R::one()
                    } else {
                        R::zero()
                    };
                    g[i] = g[i] + s * gout[i];
                }
            }
        }
        Op::Relu(x) => {
            if needs(x, before) {
                let n = &mut before[x.0];
                let (vals, g) = (&n.values, n.grad.as_mut().unwrap());
                for i in 0..g.len() {
                    if vals[i] > R::zero() {
                        g[i] = g[i] + gout[i];
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            if needs(x, before) {
                let g = before[x.0].grad.as_mut().unwrap();
                let one = R::one();
                for i in 0..g.len() {
                    let o = node.values[i];
                    g[i] = g[i] + o * (one - o) * gout[i];
                }
            }
        }
        Op::Sum(x) => {
            if needs(x, before) {
                let k = gout[0];
                let g = before[x.0].grad.as_mut().unwrap();
                for gi in g.iter_mut() {
                    *gi = *gi + k;
                }
            }
        }
        Op::Mean(x) => {
            if needs(x, before) {
                let n = before[x.0].values.len();
                let k = gout[0] / R::of(n as f64);
                let g = before[x.0].grad.as_mut().unwrap();
                for gi in g.iter_mut() {
                    *gi = *gi + k;
                }
            }
        }
        Op::Conv3d { x, w, b, stride } => {
            let xs: [usize; 4] = before[x.0].shape.clone().try_into().unwrap();
            let ws: [usize; 5] = before[w.0].shape.clone().try_into().unwrap();
            let os: [usize; 4] = node.shape.clone().try_into().unwrap();
            if needs(b, before) {
                conv::backward_bias(gout, &os, before[b.0].grad.as_mut().unwrap());
            }
            if needs(w, before) {
                let (nw, nx) = pair(before, w.0, x.0);
                conv::backward_weight(
                    &nx.values,
                    &xs,
                    gout,
                    &os,
                    &ws,
                    *stride,
                    nw.grad.as_mut().unwrap(),
                );
            }
            if needs(x, before) {
                let (nx, nw) = pair(before, x.0, w.0);
                conv::backward_input(
                    &nw.values,
                    &ws,
                    gout,
                    &os,
                    &xs,
                    *stride,
                    nx.grad.as_mut().unwrap(),
                );
            }
        }
        Op::Upsample2x(x) => {
            if needs(x, before) {
                let s: [usize; 4] = before[x.0].shape.clone().try_into().unwrap();
                let [c, z, y, xd] = s;
                let (oy, ox) = (2 * y, 2 * xd);
                let g = before[x.0].grad.as_mut().unwrap();
                for ci in 0..c {
                    for zi in 0..2 * z {
                        for yi in 0..oy {
                            let dst = ((ci * 2 * z + zi) * oy + yi) * ox;
                            let src = ((ci * z + zi / 2) * y + yi / 2) * xd;
                            for xi in 0..ox {
                                g[src + xi / 2] = g[src + xi / 2] + gout[dst + xi];
                            }
                        }
                    }
                }
            }
        }
        Op::ConcatChannels(a, b) => {
            let na = before[a.0].values.len();
            if needs(a, before) {
                add_scaled(before[a.0].grad.as_mut().unwrap(), &gout[..na], R::one());
            }
            if needs(b, before) {
                add_scaled(before[b.0].grad.as_mut().unwrap(), &gout[na..], R::one());
            }
        }
        Op::ChannelAffine { x, scale, shift } => {
            let c = before[scale.0].values.len();
            let sp = before[x.0].values.len() / c;
            if needs(x, before) {
                let (nx, ns) = pair(before, x.0, scale.0);
                let g = nx.grad.as_mut().unwrap();
                for ci in 0..c {
                    let k = ns.values[ci];
                    for i in ci * sp..(ci + 1) * sp {
                        g[i] = g[i] + k * gout[i];
                    }
                }
            }
            if needs(scale, before) {
                let (ns, nx) = pair(before, scale.0, x.0);
                let g = ns.grad.as_mut().unwrap();
                for ci in 0..c {
                    let mut acc = 0.0f64;
                    for i in ci * sp..(ci + 1) * sp {
                        acc += (nx.values[i] * gout[i]).f64();
                    }
                    g[ci] = g[ci] + R::of(acc);
                }
            }
            if needs(shift, before) {
                let g = before[shift.0].grad.as_mut().unwrap();
                for ci in 0..c {
                    let mut acc = 0.0f64;
                    for go in &gout[ci * sp..(ci + 1) * sp] {
                        acc += go.f64();
                    }
                    g[ci] = g[ci] + R::of(acc);
                }
            }
        }
        Op::ChannelStandardize { x, istd } => {
            if needs(x, before) {
                let c = istd.len();
                let sp = node.values.len() / c;
                let g = before[x.0].grad.as_mut().unwrap();
                for ci in 0..c {
                    let y = &node.values[ci * sp..(ci + 1) * sp];
                    let go = &gout[ci * sp..(ci + 1) * sp];
                    let mut gsum = 0.0f64;
                    let mut gysum = 0.0f64;
                    for (gv, yv) in go.iter().zip(y) {
                        gsum += gv.f64();
                        gysum += gv.f64() * yv.f64();
                    }
                    let gmean = R::of(gsum / sp as f64);
                    let gymean = R::of(gysum / sp as f64);
                    let ri = istd[ci];
                    let gch = &mut g[ci * sp..(ci + 1) * sp];
                    for ((gx, &gv), &yv) in gch.iter_mut().zip(go).zip(y) {
                        *gx = *gx + ri * (gv - gmean - yv * gymean);
                    }
                }
            }
        }
        Op::SpatialGradL1(x) => {
            if needs(x, before) {
                let s: [usize; 3] = before[x.0].shape.clone().try_into().unwrap();
                let [zd, yd, xd] = s;
                let n = &mut before[x.0];
                let (vals, g) = (&n.values, n.grad.as_mut().unwrap());
                let sign = |d: R| {
                    if d > R::zero() {
                        R::one()
                    } else if d < R::zero() {
                        -R::one()
                    } else {
                        R::zero()
                    }
                };
                for z in 0..zd {
                    for y in 0..yd {
                        for x_ in 0..xd {
                            let i = (z * yd + y) * xd + x_;
                            let go = gout[i];
                            if z + 1 < zd {
                                let j = i + yd * xd;
                                let s = sign(vals[j] - vals[i]);
                                g[j] = g[j] + s * go;
                                g[i] = g[i] - s * go;
                            }
                            if y + 1 < yd {
                                let j = i + xd;
                                let s = sign(vals[j] - vals[i]);
                                g[j] = g[j] + s * go;
                                g[i] = g[i] - s * go;
                            }
                            if x_ + 1 < xd {
                                let j = i + 1;
                                let s = sign(vals[j] - vals[i]);
                                g[j] = g[j] + s * go;
                                g[i] = g[i] - s * go;
                            }
                        }
                    }
                }
            }
        }
        Op::MaskedWindowMax { x, argmax, .. } => {
            if needs(x, before) {
                let g = before[x.0].grad.as_mut().unwrap();
                for (i, &src) in argmax.iter().enumerate() {
                    g[src as usize] = g[src as usize] + gout[i];
                }
            }
        }
        Op::MaskedWindowMin { x, argmin, .. } => {
            if needs(x, before) {
                let g = before[x.0].grad.as_mut().unwrap();
                for (i, &src) in argmin.iter().enumerate() {
                    g[src as usize] = g[src as usize] + gout[i];
                }
            }
        }
        Op::StackMax { xs, arg } | Op::StackMin { xs, arg } => {
            for (k, t) in xs.iter().enumerate() {
                if !needs(t, before) {
                    continue;
                }
                let g = before[t.0].grad.as_mut().unwrap();
                let k = k as u8;
                for i in 0..arg.len() {
                    if arg[i] == k {
                        g[i] = g[i] + gout[i];
                    }
                }
            }
        }
        Op::AcwePointwise { gamma, s } => {
            // out = exp(g*s) for g<=0, exp(-g*(1-s)) for g>0
            let one = R::one();
            if needs(gamma, before) {
                let (ng, nsv) = pair(before, gamma.0, s.0);
                let (gv, gg) = (&ng.values, ng.grad.as_mut().unwrap());
                for i in 0..gg.len() {
                    let d = if gv[i] <= R::zero() {
                        nsv.values[i] * node.values[i]
                    } else {
                        -(one - nsv.values[i]) * node.values[i]
                    };
                    gg[i] = gg[i] + d * gout[i];
                }
            }
            if needs(s, before) {
                let (ns, ng) = pair(before, s.0, gamma.0);
                let gs = ns.grad.as_mut().unwrap();
                for i in 0..gs.len() {
                    // both branches have d(out)/ds = gamma * out
                    gs[i] = gs[i] + ng.values[i] * node.values[i] * gout[i];
                }
            }
        }
        Op::Reshape(x) => {
            if needs(x, before) {
                add_scaled(before[x.0].grad.as_mut().unwrap(), gout, R::one());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf_f64(&[1], &[0.0], false).unwrap();
        let y = g.sigmoid(x);
        assert_eq!(g.values(y)[0], 0.5);
    }

    #[test]
    fn spatial_gradient_of_constant_is_zero() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf_f64(&[3, 3, 3], &[1.25; 27], false).unwrap();
        let y = g.spatial_gradient_l1(x).unwrap();
        assert!(g.values(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv3d_identity_kernel_is_identity() {
        let mut g: Graph<f64> = Graph::new();
        let vals: Vec<f64> = (0..27).map(|i| i as f64 * 0.3 - 2.0).collect();
        let x = g.leaf_f64(&[1, 3, 3, 3], &vals, false).unwrap();
        let w = g.leaf_f64(&[1, 1, 1, 1, 1], &[1.0], false).unwrap();
        let b = g.leaf_f64(&[1], &[0.0], false).unwrap();
        let y = g.conv3d(x, w, b, 1).unwrap();
        assert_eq!(g.values(y), g.values(x));
    }

    #[test]
    fn conv3d_stride2_shape() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(&[1, 8, 8, 8], vec![0.5; 512], false).unwrap();
        let w = g.leaf(&[4, 1, 3, 3, 3], vec![0.1; 4 * 27], false).unwrap();
        let b = g.leaf(&[4], vec![0.0; 4], false).unwrap();
        let y = g.conv3d(x, w, b, 2).unwrap();
        assert_eq!(g.shape(y), &[4, 4, 4, 4]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf_f64(&[2, 2], &[1.0, -2.0, 3.0, 0.5], true).unwrap();
        let y = g.sum(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let mut g: Graph<f64> = Graph::new();
        let vals = [1.0, -2.0, 3.0, 0.5];
        let x = g.leaf_f64(&[4], &vals, true).unwrap();
        let xx = g.mul(x, x).unwrap();
        let y = g.sum(xx);
        g.backward(y).unwrap();
        for (i, v) in vals.iter().enumerate() {
            assert!((g.grad(x).unwrap()[i] - 2.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_window_max_routes_one_voxel_per_window() {
        let mut g: Graph<f64> = Graph::new();
        let mut vals = vec![0.0; 27];
        vals[13] = 5.0; // centre of a 3x3x3 volume
        let x = g.leaf_f64(&[3, 3, 3], &vals, true).unwrap();
        let offsets: Vec<[i32; 3]> = (-1..=1)
            .flat_map(|a| (-1..=1).flat_map(move |b| (-1..=1).map(move |c| [a, b, c])))
            .collect();
        let y = g.masked_window_max(x, &offsets).unwrap();
        // full-support window max of a single spike = dilation by the cube
        assert!(g.values(y).iter().all(|&v| v == 5.0));
        let s = g.sum(y);
        g.backward(s).unwrap();
        let grad = g.grad(x).unwrap();
        assert_eq!(grad[13], 27.0);
        assert_eq!(grad.iter().sum::<f64>(), 27.0);
    }

    #[test]
    fn non_finite_leaf_is_rejected() {
        let mut g: Graph<f32> = Graph::new();
        let err = g.leaf(&[2], vec![1.0, f32::NAN], false);
        assert!(matches!(err, Err(AutodiffError::NonFinite { index: 1 })));
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || {
            let mut g: Graph<f32> = Graph::new();
            let vals: Vec<f32> = (0..64).map(|i| ((i * 37 % 19) as f32) * 0.1 - 0.9).collect();
            let x = g.leaf(&[4, 4, 4], vals, true).unwrap();
            let e = g.exp(x);
            let sg = g.spatial_gradient_l1(e).unwrap();
            let m = g.mul(sg, e).unwrap();
            let y = g.mean(m);
            g.backward(y).unwrap();
            g.grad(x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<u32>>()
        };
        assert_eq!(run(), run());
    }
}
