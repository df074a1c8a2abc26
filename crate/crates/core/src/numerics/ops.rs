//! Elementwise arithmetic, broadcasting and reductions.

use super::graph::{Accum, Graph, Op, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// For every element of `out_shape`, the flat index of the element of
/// `small` it reads when `small` is broadcast (extent 1 or equal per axis).
pub(crate) fn broadcast_map(out_shape: &[usize], small: &[usize]) -> Result<Vec<usize>> {
    if out_shape.len() != small.len()
        || out_shape
            .iter()
            .zip(small)
            .any(|(&o, &s)| s != 1 && s != o)
    {
        return Err(Error::dim(
            "broadcast",
            format!("{small:?} does not broadcast to {out_shape:?}"),
        ));
    }
    let rank = out_shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for ax in (0..rank).rev() {
        strides[ax] = if small[ax] == 1 { 0 } else { acc };
        acc *= small[ax];
    }
    let total: usize = out_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut map = Vec::with_capacity(total);
    let mut cur = 0usize;
    for _ in 0..total {
        map.push(cur);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            cur += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            cur -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Ok(map)
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Graph<T> {
    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push(name, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + b` with `b` broadcast to `a`'s shape.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = broadcast_map(self.shape(a), self.shape(b))?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let data = va.data().iter().zip(&map).map(|(&x, &j)| x + vb[j]).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push("add_broadcast", out, Op::AddBcast(a, b))
    }

    /// `a * b` with `b` broadcast to `a`'s shape.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = broadcast_map(self.shape(a), self.shape(b))?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let data = va.data().iter().zip(&map).map(|(&x, &j)| x * vb[j]).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push("mul_broadcast", out, Op::MulBcast(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * s).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push("scale", out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x + s).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push("add_scalar", out, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data: Vec<T> = va
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let signature: Vec<u64> = va
            .data()
            .chunks(64)
            .map(|c| {
                c.iter()
                    .enumerate()
                    .fold(0u64, |m, (i, &x)| m | (u64::from(x > T::zero()) << i))
            })
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        self.mix_kinks(signature);
        self.push("relu", out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| sigmoid(x)).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push("sigmoid", out, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| softplus(x)).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push("softplus", out, Op::Softplus(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a).mean();
        self.push("mean", Tensor::scalar(m), Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a))
    }

    /// `sum(a * w)` for a constant weight tensor; the usual projection used to
    /// turn a tensor-valued op into a scalar for gradient checks.
    pub fn weighted_sum(&mut self, a: Var, w: Tensor<T>) -> Result<Var> {
        let wv = self.constant(w);
        let p = self.mul(a, wv)?;
        self.sum(p)
    }
}

pub(crate) fn backward_elementwise<T: Scalar>(acc: &mut Accum<'_, T>, node: usize, g: &[T]) -> Result<()> {
    let nodes = acc.nodes;
    let out = nodes[node].value.data();
    match &nodes[node].op {
        Op::Add(a, b) => {
            let (a, b) = (*a, *b);
            acc.add(a, g);
            acc.add(b, g);
        }
        Op::Sub(a, b) => {
            let (a, b) = (*a, *b);
            acc.add(a, g);
            if let Some(buf) = acc.buf(b) {
                buf.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d - gi);
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            let ga: Vec<T> = g.iter().zip(acc.value(b).data()).map(|(&gi, &y)| gi * y).collect();
            let gb: Vec<T> = g.iter().zip(acc.value(a).data()).map(|(&gi, &x)| gi * x).collect();
            acc.add(a, &ga);
            acc.add(b, &gb);
        }
        Op::AddBcast(a, b) => {
            let (a, b) = (*a, *b);
            acc.add(a, g);
            if acc.wants(b) {
                let map = broadcast_map(acc.value(a).shape(), acc.value(b).shape())?;
                let buf = acc.buf(b).unwrap();
                for (&gi, &j) in g.iter().zip(&map) {
                    buf[j] = buf[j] + gi;
                }
            }
        }
        Op::MulBcast(a, b) => {
            let (a, b) = (*a, *b);
            let map = broadcast_map(acc.value(a).shape(), acc.value(b).shape())?;
            if acc.wants(a) {
                let vb = acc.value(b).data();
                let ga: Vec<T> = g.iter().zip(&map).map(|(&gi, &j)| gi * vb[j]).collect();
                acc.add(a, &ga);
            }
            if acc.wants(b) {
                let va: Vec<T> = acc.value(a).data().to_vec();
                let buf = acc.buf(b).unwrap();
                for ((&gi, &j), &x) in g.iter().zip(&map).zip(&va) {
                    buf[j] = buf[j] + gi * x;
                }
            }
        }
        Op::Scale(a, s) => {
            let (a, s) = (*a, *s);
            let ga: Vec<T> = g.iter().map(|&gi| gi * s).collect();
            acc.add(a, &ga);
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            let a = *a;
            acc.add(a, g);
        }
        Op::Relu(a) => {
            let a = *a;
            let ga: Vec<T> = g
                .iter()
                .zip(out)
                .map(|(&gi, &y)| if y > T::zero() { gi } else { T::zero() })
                .collect();
            acc.add(a, &ga);
        }
        Op::Sigmoid(a) => {
            let a = *a;
            let ga: Vec<T> = g
                .iter()
                .zip(out)
                .map(|(&gi, &y)| gi * y * (T::one() - y))
                .collect();
            acc.add(a, &ga);
        }
        Op::Softplus(a) => {
            let a = *a;
            let ga: Vec<T> = g
                .iter()
                .zip(acc.value(a).data())
                .map(|(&gi, &x)| gi * sigmoid(x))
                .collect();
            acc.add(a, &ga);
        }
        Op::Sum(a) => {
            let a = *a;
            let n = acc.value(a).len();
            acc.add(a, &vec![g[0]; n]);
        }
        Op::Mean(a) => {
            let a = *a;
            let n = acc.value(a).len();
            let gi = g[0] / T::from_usize(n).unwrap();
            acc.add(a, &vec![gi; n]);
        }
        _ => unreachable!("not an elementwise op"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_map_matches_manual_indexing() {
        let map = broadcast_map(&[2, 3, 2], &[2, 1, 2]).unwrap();
        let mut expected = vec![];
        for i in 0..2 {
            for _j in 0..3 {
                for k in 0..2 {
                    expected.push(i * 2 + k);
                }
            }
        }
        assert_eq!(map, expected);
        assert!(broadcast_map(&[2, 3], &[3, 1]).is_err());
    }

    #[test]
    fn linear_loss_gradient_is_weight() {
        // loss = sum(w * x) with w fixed => dL/dx = w
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let w = Tensor::new(&[3], vec![0.3, 4.0, -1.0]).unwrap();
        let loss = g.weighted_sum(x, w.clone()).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &w);
    }

    #[test]
    fn detached_input_gets_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = g.param(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        let xd = g.detach(x);
        let p = g.mul(xd, y).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_none());
        assert!(g.grad(xd).is_none());
        assert_eq!(g.grad(y).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn second_backward_requires_zero_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0]);
        assert!(matches!(g.backward(y), Err(Error::BackwardTwice)));
        g.zero_grad();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::scalar(f32::MAX));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }
}
