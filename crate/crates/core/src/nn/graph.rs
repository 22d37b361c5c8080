//! Tape-based reverse-mode autodiff.

use super::conv::{
    conv3d_backward, conv3d_forward, conv_transpose3d_backward, conv_transpose3d_forward, ConvGeometry, ConvSpec,
};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
        transposed: bool,
    },
    PRelu {
        x: Var,
        slope: Var,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Select {
        x: Var,
        channel: usize,
    },
    Mse {
        pred: Var,
        target: Var,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, .. } => std::iter::once(x).chain(std::iter::once(w)).chain(b).collect(),
            Op::PRelu { x, slope } => vec![x, slope],
            Op::Relu { x } | Op::Select { x, .. } => vec![x],
            Op::Add { a, b } | Op::Concat { a, b } => vec![a, b],
            Op::Mse { pred, target } => vec![pred, target],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op,
}

/// Computation tape. Nodes are appended in evaluation order; `backward`
/// walks them in reverse.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(vec![0]))
    }

    /// Gradient accumulated by the last `backward`, if the node received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vol(&self, v: Var, what: &str) -> Result<(usize, [usize; 3])> {
        self.value(v)
            .volume_dims()
            .map_err(|_| Error::shape(format!("{what} must be [C, X, Y, Z], got {:?}", self.value(v).shape())))
    }

    /// Same-padded or strided 3D cross-correlation.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.conv_like(x, w, b, stride, padding, false)
    }

    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.conv_like(x, w, b, stride, padding, true)
    }

    fn conv_like(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, transposed: bool) -> Result<Var> {
        let (c_in, dims) = self.vol(x, "convolution input")?;
        let ws = self.value(w).shape().to_vec();
        let [w0, w1, k, k1, k2] = ws[..] else {
            return Err(Error::shape(format!("kernel must be 5-D, got {ws:?}")));
        };
        if k != k1 || k != k2 {
            return Err(Error::shape(format!("kernel must be cubic, got {ws:?}")));
        }
        let (kin, c_out) = if transposed { (w0, w1) } else { (w1, w0) };
        if kin != c_in {
            return Err(Error::shape(format!("kernel expects {kin} input channels, input has {c_in}")));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return Err(Error::shape(format!(
                    "bias shape {:?} does not match {c_out} output channels",
                    self.value(b).shape()
                )));
            }
        }
        let geometry = if transposed {
            ConvGeometry::transposed(dims, k, stride, padding)?
        } else {
            ConvGeometry::conv(dims, k, stride, padding)?
        };
        let spec = ConvSpec { c_in, c_out, geometry };
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = b.map(|b| self.value(b).data());
        let (out, od) = if transposed {
            (conv_transpose3d_forward(xd, wd, bd, &spec), geometry.big)
        } else {
            (conv3d_forward(xd, wd, bd, &spec), geometry.small)
        };
        let value = Tensor::new(vec![c_out, od[0], od[1], od[2]], out)?;
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                spec,
                transposed,
            },
        ))
    }

    /// Parametric ReLU with one slope per channel.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (c, d) = self.vol(x, "prelu input")?;
        if self.value(slope).shape() != [c] {
            return Err(Error::shape(format!(
                "prelu slope shape {:?} does not match {c} channels",
                self.value(slope).shape()
            )));
        }
        let n = d.iter().product::<usize>();
        let a = self.value(slope).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(n.max(1))
            .zip(a)
            .flat_map(|(ch, &ac)| ch.iter().map(move |&v| if v > T::zero() { v } else { ac * v }))
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(value, Op::PRelu { x, slope }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = v.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(v.shape().to_vec(), out).expect("same length");
        self.push(value, Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "cannot add shapes {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, da) = self.vol(a, "concat input")?;
        let (cb, db) = self.vol(b, "concat input")?;
        if da != db {
            return Err(Error::shape(format!("cannot concatenate spatial dims {da:?} and {db:?}")));
        }
        let mut out = Vec::with_capacity(self.value(a).len() + self.value(b).len());
        out.extend_from_slice(self.value(a).data());
        out.extend_from_slice(self.value(b).data());
        let value = Tensor::new(vec![ca + cb, da[0], da[1], da[2]], out)?;
        Ok(self.push(value, Op::Concat { a, b }))
    }

    pub fn select_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let (c, d) = self.vol(x, "channel selection input")?;
        if channel >= c {
            return Err(Error::shape(format!("channel {channel} out of range for {c} channels")));
        }
        let n = d.iter().product::<usize>();
        let out = self.value(x).data()[channel * n..(channel + 1) * n].to_vec();
        let value = Tensor::new(vec![1, d[0], d[1], d[2]], out)?;
        Ok(self.push(value, Op::Select { x, channel }))
    }

    /// Mean squared error as a scalar node.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::shape(format!("mse shapes differ: {:?} vs {:?}", p.shape(), t.shape())));
        }
        if p.is_empty() {
            return Err(Error::shape("mse of empty tensors"));
        }
        let sum: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let value = Tensor::scalar(sum / T::of(p.len() as f64));
        Ok(self.push(value, Op::Mse { pred, target }))
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => node.grad = Some(g),
        }
    }

    /// Backpropagate from a scalar node, seeding its gradient with one.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            let contributions = self.local_grads(&op, &g);
            self.nodes[i].grad = Some(g);
            for (v, cg) in contributions {
                self.accumulate(v, cg);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, op: &Op, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let mut out = Vec::new();
        match *op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                ref spec,
                transposed,
            } => {
                let (xd, wd) = (self.value(x).data(), self.value(w).data());
                let grads = if transposed {
                    conv_transpose3d_backward(xd, wd, g, spec, self.wants(x))
                } else {
                    conv3d_backward(xd, wd, g, spec, self.wants(x))
                };
                if let Some(dx) = grads.input {
                    out.push((x, dx));
                }
                if self.wants(w) {
                    out.push((w, grads.kernel));
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    out.push((b, grads.bias));
                }
            }
            Op::PRelu { x, slope } => {
                let xd = self.value(x).data();
                let a = self.value(slope).data();
                let n = xd.len() / a.len().max(1);
                if self.wants(x) {
                    let dx = xd
                        .chunks(n.max(1))
                        .zip(g.chunks(n.max(1)))
                        .zip(a)
                        .flat_map(|((xc, gc), &ac)| {
                            xc.iter().zip(gc).map(move |(&v, &gv)| if v > T::zero() { gv } else { ac * gv })
                        })
                        .collect();
                    out.push((x, dx));
                }
                if self.wants(slope) {
                    let da = xd
                        .chunks(n.max(1))
                        .zip(g.chunks(n.max(1)))
                        .map(|(xc, gc)| {
                            xc.iter()
                                .zip(gc)
                                .filter(|(&v, _)| v <= T::zero())
                                .map(|(&v, &gv)| v * gv)
                                .sum()
                        })
                        .collect();
                    out.push((slope, da));
                }
            }
            Op::Relu { x } => {
                if self.wants(x) {
                    let dx = self
                        .value(x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                        .collect();
                    out.push((x, dx));
                }
            }
            Op::Add { a, b } => {
                if self.wants(a) {
                    out.push((a, g.to_vec()));
                }
                if self.wants(b) {
                    out.push((b, g.to_vec()));
                }
            }
            Op::Concat { a, b } => {
                let na = self.value(a).len();
                if self.wants(a) {
                    out.push((a, g[..na].to_vec()));
                }
                if self.wants(b) {
                    out.push((b, g[na..].to_vec()));
                }
            }
            Op::Select { x, channel } => {
                if self.wants(x) {
                    let n = g.len();
                    let mut dx = vec![T::zero(); self.value(x).len()];
                    dx[channel * n..(channel + 1) * n].copy_from_slice(g);
                    out.push((x, dx));
                }
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(pred).data(), self.value(target).data());
                let scale = g[0] * T::of(2.0) / T::of(p.len() as f64);
                if self.wants(pred) {
                    out.push((pred, p.iter().zip(t).map(|(&a, &b)| scale * (a - b)).collect()));
                }
                if self.wants(target) {
                    out.push((target, p.iter().zip(t).map(|(&a, &b)| scale * (b - a)).collect()));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::new(vec![1, 2, 2, 2], vec![0.3; 8]).unwrap();
        let p = g.leaf(t.clone(), true);
        let q = g.leaf(t.clone(), false);
        let l = g.mse_loss(p, q).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
        g.backward(l).unwrap();
        assert!(g.grad(p).unwrap().iter().all(|&v| v == 0.0));

        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor::new(vec![4], vec![0.6, 0.1, 0.2, 0.35]).unwrap(), true);
        let q = g.leaf(Tensor::new(vec![4], vec![0.5, 0.0, 0.1, 0.25]).unwrap(), false);
        let l = g.mse_loss(p, q).unwrap();
        assert!((g.value(l).data()[0] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn mse_gradient_matches_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p = rand_tensor(vec![2, 3, 3, 3], &mut rng);
        let t = rand_tensor(vec![2, 3, 3, 3], &mut rng);
        let loss = |p: &Tensor<f64>| {
            let mut g = Graph::new();
            let a = g.leaf(p.clone(), false);
            let b = g.leaf(t.clone(), false);
            let l = g.mse_loss(a, b).unwrap();
            g.value(l).data()[0]
        };
        let mut g = Graph::new();
        let a = g.leaf(p.clone(), true);
        let b = g.leaf(t.clone(), false);
        let l = g.mse_loss(a, b).unwrap();
        g.backward(l).unwrap();
        let an = g.grad(a).unwrap().to_vec();
        for i in 0..p.len() {
            let h = 1e-5;
            let mut up = p.clone();
            up.data_mut()[i] += h;
            let mut dn = p.clone();
            dn.data_mut()[i] -= h;
            let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
            assert!((fd - an[i]).abs() <= 1e-8 * fd.abs().max(an[i].abs()).max(1e-6), "{fd} vs {}", an[i]);
        }
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![2, 4, 4, 4]), false);
        let w = g.leaf(Tensor::zeros(vec![3, 1, 3, 3, 3]), false);
        assert!(matches!(g.conv3d(x, w, None, 1, 1), Err(Error::Shape(_))));
        let y = g.leaf(Tensor::zeros(vec![1, 4, 4, 4]), false);
        assert!(g.add(x, y).is_err());
        assert!(g.select_channel(x, 2).is_err());
        assert!(g.mse_loss(x, y).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 1, 2], vec![1.0, -2.0]).unwrap(), true);
        let y = g.add(x, x).unwrap();
        let z = g.leaf(Tensor::zeros(vec![1, 1, 1, 2]), false);
        let l = g.mse_loss(y, z).unwrap();
        g.backward(l).unwrap();
        // l = mean((2x)^2) = 2 x^2 summed / 1 -> dl/dx = 4x
        assert_eq!(g.grad(x).unwrap(), &[4.0, -8.0]);
    }

    #[test]
    fn prelu_and_relu() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2, 1, 1, 2], vec![1.0, -2.0, -4.0, 3.0]).unwrap(), true);
        let a = g.leaf(Tensor::new(vec![2], vec![0.25, 0.5]).unwrap(), true);
        let y = g.prelu(x, a).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -0.5, -2.0, 3.0]);
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[1.0, 0.0, 0.0, 3.0]);
    }
}
