use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex64;

use super::fft;
use crate::error::{PtychoError, Result};
use crate::tensor::{ComplexTensor, Shape};

/// A differentiable operator supplied from outside the autodiff module
/// (the spatial-transform sampler is one).
///
/// `adjoint` receives `∂L/∂u + j∂L/∂v` for the output `u + jv` and must
/// return the same quantity for every input, one entry per input. `None`
/// means "no gradient flows to this input".
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&ComplexTensor]) -> Result<ComplexTensor>;

    fn adjoint(
        &self,
        grad_out: &ComplexTensor,
        inputs: &[&ComplexTensor],
        output: &ComplexTensor,
    ) -> Result<Vec<Option<ComplexTensor>>>;

    /// Whether the output is real-valued by construction.
    fn real_output(&self) -> bool {
        false
    }
}

enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    ScaleComplex(Complex64),
    Conj,
    ModulusSquared,
    Sqrt,
    Relu,
    ExpJ,
    Sum,
    L1,
    Pad { top: usize, left: usize },
    Crop { top: usize, left: usize },
    ConcatRows,
    Fft2,
    Ifft2,
    Custom(Box<dyn CustomOp>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::ScaleComplex(_) => "scale_complex",
            Op::Conj => "conj",
            Op::ModulusSquared => "modulus_squared",
            Op::Sqrt => "sqrt",
            Op::Relu => "relu",
            Op::ExpJ => "exp_j",
            Op::Sum => "sum",
            Op::L1 => "l1",
            Op::Pad { .. } => "pad",
            Op::Crop { .. } => "crop",
            Op::ConcatRows => "concat_rows",
            Op::Fft2 => "fft2",
            Op::Ifft2 => "ifft2",
            Op::Custom(op) => op.name(),
        };
        f.write_str(name)
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    parents: Vec<usize>,
    value: Arc<ComplexTensor>,
    requires_grad: bool,
    real: bool,
}

#[derive(Debug, Default)]
struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<ComplexTensor>>,
    consumed: bool,
}

/// Records the forward computation so a single backward pass can
/// propagate Wirtinger gradients `∂L/∂a + j∂L/∂b` to every input.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// valid topological order. A tape supports exactly one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.inner.borrow().consumed
    }

    /// Differentiable input.
    pub fn variable(&self, value: impl Into<Arc<ComplexTensor>>) -> Var<'_> {
        self.push(Op::Leaf, vec![], value.into(), true, false)
    }

    /// Differentiable input whose imaginary part is pinned to zero: its
    /// gradient is projected onto the real axis.
    pub fn real_variable(&self, value: impl Into<Arc<ComplexTensor>>) -> Var<'_> {
        self.push(Op::Leaf, vec![], value.into(), true, true)
    }

    pub fn constant(&self, value: impl Into<Arc<ComplexTensor>>) -> Var<'_> {
        self.push(Op::Leaf, vec![], value.into(), false, false)
    }

    pub fn leaf(&self, value: impl Into<Arc<ComplexTensor>>, requires_grad: bool) -> Var<'_> {
        self.push(Op::Leaf, vec![], value.into(), requires_grad, false)
    }

    pub fn scalar(&self, value: Complex64) -> Var<'_> {
        self.constant(ComplexTensor::scalar(value))
    }

    /// Applies a user-defined operator and records it.
    pub fn custom<'t>(&'t self, op: Box<dyn CustomOp>, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        let values: Vec<Arc<ComplexTensor>> = inputs.iter().map(|v| v.value()).collect();
        let refs: Vec<&ComplexTensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = op.forward(&refs)?;
        let real = op.real_output();
        Ok(self.record(Op::Custom(op), inputs, out, real))
    }

    /// Stacks 2D tensors of equal width on top of each other.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| PtychoError::InvalidArgument("concat_rows of nothing".into()))?;
        let cols = first.shape().1;
        let mut re = Vec::new();
        let mut im = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = p.value();
            v.expect_shape((v.rows(), cols), "concat_rows")?;
            re.extend_from_slice(v.re());
            im.extend_from_slice(v.im());
            rows += v.rows();
        }
        let out = ComplexTensor::new(rows, cols, re, im)?;
        let real = parts.iter().all(|p| p.is_real());
        Ok(self.record(Op::ConcatRows, parts, out, real))
    }

    /// Runs the reverse pass from a real scalar `loss`, storing gradients
    /// for every differentiable leaf. The tape cannot be replayed after.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(PtychoError::TapeConsumed);
        }
        let root = &inner.nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(PtychoError::Shape {
                op: "backward",
                left: root.value.shape(),
                right: (1, 1),
            });
        }
        let loss_value = root.value.item();
        if !loss_value.re.is_finite() {
            return Err(PtychoError::Numeric(format!("non-finite loss {loss_value}")));
        }
        if loss_value.im.abs() > 1e-12 * (1.0 + loss_value.re.abs()) {
            return Err(PtychoError::InvalidArgument(format!(
                "backward needs a real loss, got {loss_value}"
            )));
        }
        inner.consumed = true;

        let n = inner.nodes.len();
        let mut grads: Vec<Option<ComplexTensor>> = vec![None; n];
        grads[loss.id] = Some(ComplexTensor::real_scalar(1.0));

        for id in (0..=loss.id).rev() {
            let node = &inner.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let inputs: Vec<&ComplexTensor> = node
                .parents
                .iter()
                .map(|&p| inner.nodes[p].value.as_ref())
                .collect();
            let parent_grads = adjoint(&node.op, &g, &inputs, &node.value)?;
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let parent = &inner.nodes[p];
                let Some(mut pg) = pg else { continue };
                if !parent.requires_grad {
                    continue;
                }
                if parent.real {
                    pg.im_mut().iter_mut().for_each(|v| *v = 0.0);
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot => *slot = Some(pg),
                }
            }
        }
        inner.grads = grads;
        Ok(())
    }

    fn push(
        &self,
        op: Op,
        parents: Vec<usize>,
        value: Arc<ComplexTensor>,
        requires_grad: bool,
        real: bool,
    ) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            parents,
            value,
            requires_grad,
            real,
        });
        Var { tape: self, id }
    }

    fn record<'t>(&'t self, op: Op, inputs: &[Var<'t>], out: ComplexTensor, real: bool) -> Var<'t> {
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        let parents = inputs.iter().map(|v| v.id).collect();
        self.push(op, parents, Arc::new(out), requires_grad, real)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<ComplexTensor> {
        Arc::clone(&self.tape.inner.borrow().nodes[self.id].value)
    }

    pub fn shape(&self) -> Shape {
        self.tape.inner.borrow().nodes[self.id].value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn is_real(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].real
    }

    /// Gradient stored by the backward pass. `None` for constants and for
    /// variables the loss does not depend on.
    pub fn grad(&self) -> Option<ComplexTensor> {
        self.tape.inner.borrow().grads.get(self.id).cloned().flatten()
    }

    /// Gradient, or zeros of the value's shape when none reached this node.
    pub fn grad_or_zeros(&self) -> ComplexTensor {
        self.grad().unwrap_or_else(|| {
            let (r, c) = self.shape();
            ComplexTensor::zeros(r, c)
        })
    }

    pub fn backward(self) -> Result<()> {
        self.tape.backward(self)
    }

    fn unary(self, op: Op, out: ComplexTensor, real: bool) -> Var<'t> {
        self.tape.record(op, &[self], out, real)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = broadcast(&self.value(), &other.value(), "add", |a, b| a + b)?;
        let real = self.is_real() && other.is_real();
        Ok(self.tape.record(Op::Add, &[self, other], out, real))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = broadcast(&self.value(), &other.value(), "sub", |a, b| a - b)?;
        let real = self.is_real() && other.is_real();
        Ok(self.tape.record(Op::Sub, &[self, other], out, real))
    }

    /// Complex Hadamard product; either operand may be a 1×1 scalar.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = broadcast(&self.value(), &other.value(), "mul", |a, b| a * b)?;
        let real = self.is_real() && other.is_real();
        Ok(self.tape.record(Op::Mul, &[self, other], out, real))
    }

    pub fn add_scalar(self, c: Complex64) -> Result<Var<'t>> {
        let s = self.tape.scalar(c);
        self.add(s)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let out = self.value().scale(s);
        let real = self.is_real();
        self.unary(Op::Scale(s), out, real)
    }

    pub fn scale_complex(self, c: Complex64) -> Var<'t> {
        let out = self.value().scale_complex(c);
        self.unary(Op::ScaleComplex(c), out, false)
    }

    pub fn conj(self) -> Var<'t> {
        let out = self.value().conj();
        let real = self.is_real();
        self.unary(Op::Conj, out, real)
    }

    /// `re² + im²`, real-valued.
    pub fn modulus_squared(self) -> Var<'t> {
        let v = self.value();
        let re: Vec<f64> = v.iter().map(|z| z.norm_sqr()).collect();
        let out = ComplexTensor::from_real(v.rows(), v.cols(), re).expect("shape preserved");
        self.unary(Op::ModulusSquared, out, true)
    }

    /// Square root of the real part, clamped at zero.
    pub fn sqrt(self) -> Var<'t> {
        let v = self.value();
        let re: Vec<f64> = v.re().iter().map(|x| x.max(0.0).sqrt()).collect();
        let out = ComplexTensor::from_real(v.rows(), v.cols(), re).expect("shape preserved");
        self.unary(Op::Sqrt, out, true)
    }

    /// `max(re, 0)`, real-valued.
    pub fn relu(self) -> Var<'t> {
        let v = self.value();
        let re: Vec<f64> = v.re().iter().map(|x| x.max(0.0)).collect();
        let out = ComplexTensor::from_real(v.rows(), v.cols(), re).expect("shape preserved");
        self.unary(Op::Relu, out, true)
    }

    /// `exp(j·re)`: a unit phasor per element from a real phase tensor.
    pub fn exp_j(self) -> Var<'t> {
        let out = self.value().map(|z| Complex64::from_polar(1.0, z.re));
        self.unary(Op::ExpJ, out, false)
    }

    pub fn sum(self) -> Var<'t> {
        let out = ComplexTensor::scalar(self.value().sum());
        let real = self.is_real();
        self.unary(Op::Sum, out, real)
    }

    /// `Σ |re| + |im|`, real scalar.
    pub fn l1_norm(self) -> Var<'t> {
        let v = self.value();
        let s: f64 = v.re().iter().chain(v.im()).map(|x| x.abs()).sum();
        self.unary(Op::L1, ComplexTensor::real_scalar(s), true)
    }

    /// Zero-surround into a `rows × cols` frame with `self` at `(top, left)`.
    pub fn pad(self, top: usize, left: usize, rows: usize, cols: usize) -> Result<Var<'t>> {
        let out = self.value().embed(top, left, rows, cols)?;
        let real = self.is_real();
        Ok(self.unary(Op::Pad { top, left }, out, real))
    }

    pub fn crop(self, top: usize, left: usize, rows: usize, cols: usize) -> Result<Var<'t>> {
        let out = self.value().window(top, left, rows, cols)?;
        let real = self.is_real();
        Ok(self.unary(Op::Crop { top, left }, out, real))
    }

    /// Pads symmetrically; the original sits at offset `((R−r)/2, (C−c)/2)`.
    pub fn pad_center(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let (r, c) = self.shape();
        if rows < r || cols < c {
            return Err(PtychoError::InvalidArgument(format!(
                "pad_center to {rows}x{cols} smaller than {r}x{c}"
            )));
        }
        self.pad((rows - r) / 2, (cols - c) / 2, rows, cols)
    }

    /// Inverse of [`Var::pad_center`].
    pub fn crop_center(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let (r, c) = self.shape();
        if rows > r || cols > c {
            return Err(PtychoError::InvalidArgument(format!(
                "crop_center to {rows}x{cols} larger than {r}x{c}"
            )));
        }
        self.crop((r - rows) / 2, (c - cols) / 2, rows, cols)
    }

    pub fn fft2(self) -> Var<'t> {
        let out = fft::fft2(&self.value());
        self.unary(Op::Fft2, out, false)
    }

    pub fn ifft2(self) -> Var<'t> {
        let out = fft::ifft2(&self.value());
        self.unary(Op::Ifft2, out, false)
    }
}

fn broadcast(
    a: &ComplexTensor,
    b: &ComplexTensor,
    op: &'static str,
    f: impl Fn(Complex64, Complex64) -> Complex64,
) -> Result<ComplexTensor> {
    if a.shape() == b.shape() {
        a.zip_map(b, f)
    } else if b.is_scalar() {
        let s = b.item();
        Ok(a.map(|x| f(x, s)))
    } else if a.is_scalar() {
        let s = a.item();
        Ok(b.map(|x| f(s, x)))
    } else {
        Err(PtychoError::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        })
    }
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: ComplexTensor, shape: Shape) -> ComplexTensor {
    if g.shape() == shape {
        g
    } else {
        ComplexTensor::scalar(g.sum())
    }
}

fn real_tensor(shape: Shape, re: Vec<f64>) -> ComplexTensor {
    ComplexTensor::from_real(shape.0, shape.1, re).expect("shape preserved")
}

fn adjoint(
    op: &Op,
    g: &ComplexTensor,
    inputs: &[&ComplexTensor],
    output: &ComplexTensor,
) -> Result<Vec<Option<ComplexTensor>>> {
    let grads = match op {
        Op::Leaf => vec![],
        Op::Add => vec![
            Some(reduce_to(g.clone(), inputs[0].shape())),
            Some(reduce_to(g.clone(), inputs[1].shape())),
        ],
        Op::Sub => vec![
            Some(reduce_to(g.clone(), inputs[0].shape())),
            Some(reduce_to(g.scale(-1.0), inputs[1].shape())),
        ],
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            // ∂L/∂a* = ∂L/∂out* · conj(b), and symmetrically for b.
            let ga = broadcast(g, b, "mul", |gv, bv| gv * bv.conj())?;
            let gb = broadcast(g, a, "mul", |gv, av| gv * av.conj())?;
            vec![
                Some(reduce_to(ga, a.shape())),
                Some(reduce_to(gb, b.shape())),
            ]
        }
        Op::Scale(s) => vec![Some(g.scale(*s))],
        Op::ScaleComplex(c) => vec![Some(g.scale_complex(c.conj()))],
        Op::Conj => vec![Some(g.conj())],
        Op::ModulusSquared => {
            let x = inputs[0];
            let out = x
                .iter()
                .zip(g.re())
                .map(|(xv, &gr)| xv * (2.0 * gr))
                .collect::<Vec<_>>();
            vec![Some(ComplexTensor::from_complex(x.rows(), x.cols(), &out)?)]
        }
        Op::Sqrt => {
            let re = output
                .re()
                .iter()
                .zip(g.re())
                .map(|(&s, &gr)| if s > 0.0 { gr / (2.0 * s) } else { 0.0 })
                .collect();
            vec![Some(real_tensor(output.shape(), re))]
        }
        Op::Relu => {
            let re = inputs[0]
                .re()
                .iter()
                .zip(g.re())
                .map(|(&x, &gr)| if x > 0.0 { gr } else { 0.0 })
                .collect();
            vec![Some(real_tensor(output.shape(), re))]
        }
        Op::ExpJ => {
            // d out / dx = j·out; ∂L/∂x = Re(conj(g)·j·out).
            let re = g
                .iter()
                .zip(output.iter())
                .map(|(gv, ov)| (gv.conj() * Complex64::i() * ov).re)
                .collect();
            vec![Some(real_tensor(output.shape(), re))]
        }
        Op::Sum => {
            let (r, c) = inputs[0].shape();
            vec![Some(ComplexTensor::filled(r, c, g.item()))]
        }
        Op::L1 => {
            let x = inputs[0];
            let gr = g.item().re;
            let sign = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
            let re = x.re().iter().map(|&v| gr * sign(v)).collect();
            let im = x.im().iter().map(|&v| gr * sign(v)).collect();
            vec![Some(ComplexTensor::new(x.rows(), x.cols(), re, im)?)]
        }
        Op::Pad { top, left } => {
            let (r, c) = inputs[0].shape();
            vec![Some(g.window(*top, *left, r, c)?)]
        }
        Op::Crop { top, left } => {
            let (r, c) = inputs[0].shape();
            vec![Some(g.embed(*top, *left, r, c)?)]
        }
        Op::ConcatRows => {
            let mut offset = 0;
            let mut out = Vec::with_capacity(inputs.len());
            for x in inputs {
                out.push(Some(g.window(offset, 0, x.rows(), x.cols())?));
                offset += x.rows();
            }
            out
        }
        Op::Fft2 => vec![Some(fft::ifft2(g))],
        Op::Ifft2 => vec![Some(fft::fft2(g))],
        Op::Custom(custom) => {
            let grads = custom.adjoint(g, inputs, output)?;
            if grads.len() != inputs.len() {
                return Err(PtychoError::InvalidArgument(format!(
                    "custom op {} returned {} adjoints for {} inputs",
                    custom.name(),
                    grads.len(),
                    inputs.len()
                )));
            }
            grads
        }
    };
    Ok(grads)
}
