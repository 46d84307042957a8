use std::collections::BTreeMap;

use super::tensor::{Mask, ParamStore, Tensor};
use super::{gelu, gelu_grad, layer_norm_raw, masked_softmax_raw, matmul_raw, sigmoid};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    /// Scalar produced by an external function whose gradient with respect
    /// to `input` was supplied at record time.
    ScalarFn {
        input: Var,
        grad: Vec<f64>,
    },
    Mean(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only tape of primitive operations.
///
/// Nodes are pushed in evaluation order, so the node list is already a
/// topological order and `backward` walks it in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Registers a named parameter leaf. Registering the same name twice
    /// returns the existing node.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Registers every tensor of `store` and returns the handles by name.
    pub fn params_from(&mut self, store: &ParamStore) -> BTreeMap<String, Var> {
        store
            .iter()
            .map(|(name, t)| (name.to_string(), self.param(name, t)))
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_raw(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.len() != y.len() {
            return Err(Error::dim("add", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::from_raw(x.shape().to_vec(), data);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds the vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = xv.cols();
        if bv.len() != c {
            return Err(Error::dim("add_row", xv.shape(), bv.shape()));
        }
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv.data()[i % c])
            .collect();
        let out = Tensor::from_raw(vec![xv.rows(), c], data);
        Ok(self.push(out, Op::AddRow(x, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let x = self.value(a);
        let out = Tensor::from_raw(x.shape().to_vec(), x.data().iter().map(|v| v * k).collect());
        self.push(out, Op::Scale(a, k))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start >= end || end > x.rows() {
            return Err(Error::dim("slice_rows", x.shape(), &[start, end]));
        }
        let c = x.cols();
        let out = Tensor::from_raw(vec![end - start, c], x.data()[start * c..end * c].to_vec());
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start >= end || end > x.cols() {
            return Err(Error::dim("slice_cols", x.shape(), &[start, end]));
        }
        let out = Tensor::from_raw(
            vec![x.rows(), end - start],
            (0..x.rows()).flat_map(|r| x.row(r)[start..end].iter().copied()).collect(),
        );
        Ok(self.push(out, Op::SliceCols(a, start, end)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            if x.cols() != c {
                return Err(Error::dim("concat_rows", self.value(parts[0]).shape(), x.shape()));
            }
            rows += x.rows();
            data.extend_from_slice(x.data());
        }
        let out = Tensor::from_raw(vec![rows, c], data);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let x = self.value(p);
            if x.rows() != r {
                return Err(Error::dim("concat_cols", self.value(parts[0]).shape(), x.shape()));
            }
            cols += x.cols();
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::from_raw(vec![r, cols], data);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn masked_softmax(&mut self, logits: Var, mask: &Mask) -> Result<Var> {
        let out = masked_softmax_raw(self.value(logits), mask)?;
        Ok(self.push(out, Op::MaskedSoftmax(logits)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (y, xhat, inv_std) =
            layer_norm_raw(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::from_raw(x.shape().to_vec(), x.data().iter().map(|&v| gelu(v)).collect());
        self.push(out, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::from_raw(
            x.shape().to_vec(),
            x.data().iter().map(|&v| sigmoid(v)).collect(),
        );
        self.push(out, Op::Sigmoid(a))
    }

    /// Records a scalar `value` computed outside the graph from `input`,
    /// along with its gradient with respect to every element of `input`.
    pub fn scalar_fn(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        let x = self.value(input);
        if grad.len() != x.len() {
            return Err(Error::dim("scalar_fn", x.shape(), &[grad.len()]));
        }
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn { input, grad }))
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, scalars: &[Var]) -> Result<Var> {
        if scalars.is_empty() {
            return Err(Error::Precondition("mean of zero terms".into()));
        }
        let mut total = 0.0;
        for &s in scalars {
            let x = self.value(s);
            if x.len() != 1 {
                return Err(Error::dim("mean", &[1], x.shape()));
            }
            total += x.data()[0];
        }
        let out = Tensor::scalar(total / scalars.len() as f64);
        Ok(self.push(out, Op::Mean(scalars.to_vec())))
    }

    /// Reverse pass from the scalar `output`. Returns one gradient per node;
    /// nodes that do not influence `output` get zeros of their own shape.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Precondition(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::from_raw(self.value(output).shape().to_vec(), vec![1.0]));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let g2 = as_matrix(&g, node.value.rows(), node.value.cols());
                    let da = matmul_raw(&g2, &bv.transpose())?;
                    let db = matmul_raw(&av.transpose(), &g2)?;
                    accumulate(&mut grads, *a, da, av.shape());
                    accumulate(&mut grads, *b, db, bv.shape());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone(), self.value(*a).shape());
                    accumulate(&mut grads, *b, g.clone(), self.value(*b).shape());
                }
                Op::AddRow(x, b) => {
                    let c = node.value.cols();
                    let mut db = vec![0.0; c];
                    for (i, v) in g.data().iter().enumerate() {
                        db[i % c] += v;
                    }
                    accumulate(&mut grads, *x, g.clone(), self.value(*x).shape());
                    let bshape = self.value(*b).shape().to_vec();
                    accumulate(&mut grads, *b, Tensor::from_raw(bshape.clone(), db), &bshape);
                }
                Op::Scale(a, k) => {
                    let d = g.data().iter().map(|v| v * k).collect();
                    let shape = self.value(*a).shape();
                    accumulate(&mut grads, *a, Tensor::from_raw(shape.to_vec(), d), shape);
                }
                Op::Transpose(a) => {
                    let d = as_matrix(&g, node.value.rows(), node.value.cols()).transpose();
                    accumulate(&mut grads, *a, d, self.value(*a).shape());
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let c = src.cols();
                    let mut d = vec![0.0; src.len()];
                    d[start * c..start * c + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, Tensor::from_raw(src.shape().to_vec(), d), src.shape());
                }
                Op::SliceCols(a, start, end) => {
                    let src = self.value(*a);
                    let (c, w) = (src.cols(), end - start);
                    let mut d = vec![0.0; src.len()];
                    for r in 0..src.rows() {
                        d[r * c + start..r * c + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    accumulate(&mut grads, *a, Tensor::from_raw(src.shape().to_vec(), d), src.shape());
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let src = self.value(p);
                        let n = src.len();
                        let d = Tensor::from_raw(src.shape().to_vec(), g.data()[offset..offset + n].to_vec());
                        accumulate(&mut grads, p, d, src.shape());
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let src = self.value(p);
                        let w = src.cols();
                        let d = (0..src.rows())
                            .flat_map(|r| g.data()[r * total + offset..r * total + offset + w].iter().copied())
                            .collect();
                        accumulate(&mut grads, p, Tensor::from_raw(src.shape().to_vec(), d), src.shape());
                        offset += w;
                    }
                }
                Op::MaskedSoftmax(a) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut d = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g.data()[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            d[r * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    let shape = self.value(*a).shape();
                    accumulate(&mut grads, *a, Tensor::from_raw(shape.to_vec(), d), shape);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let d = xhat.cols();
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..xhat.rows() {
                        let h = xhat.row(r);
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let mut dh = vec![0.0; d];
                        for j in 0..d {
                            dgain[j] += gr[j] * h[j];
                            dbias[j] += gr[j];
                            dh[j] = gr[j] * gv.data()[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(h).map(|(p, q)| p * q).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = inv_std[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                    let xs = self.value(*x).shape().to_vec();
                    let gs = gv.shape().to_vec();
                    let bs = self.value(*bias).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::from_raw(xs.clone(), dx), &xs);
                    accumulate(&mut grads, *gain, Tensor::from_raw(gs.clone(), dgain), &gs);
                    accumulate(&mut grads, *bias, Tensor::from_raw(bs.clone(), dbias), &bs);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let d = x.data().iter().zip(g.data()).map(|(&v, gi)| gi * gelu_grad(v)).collect();
                    accumulate(&mut grads, *a, Tensor::from_raw(x.shape().to_vec(), d), x.shape());
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let d = y.data().iter().zip(g.data()).map(|(s, gi)| gi * s * (1.0 - s)).collect();
                    let shape = self.value(*a).shape();
                    accumulate(&mut grads, *a, Tensor::from_raw(shape.to_vec(), d), shape);
                }
                Op::ScalarFn { input, grad } => {
                    let k = g.data()[0];
                    let shape = self.value(*input).shape();
                    let d = grad.iter().map(|v| v * k).collect();
                    accumulate(&mut grads, *input, Tensor::from_raw(shape.to_vec(), d), shape);
                }
                Op::Mean(parts) => {
                    let k = g.data()[0] / parts.len() as f64;
                    for &p in parts {
                        accumulate(&mut grads, p, Tensor::scalar(k), &[1]);
                    }
                }
            }
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.unwrap_or_else(|| Tensor::zeros(n.value.shape())))
            .collect();
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }
}

fn as_matrix(t: &Tensor, rows: usize, cols: usize) -> Tensor {
    Tensor::from_raw(vec![rows, cols], t.data().to_vec())
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, d: Tensor, shape: &[usize]) {
    let d = Tensor::from_raw(shape.to_vec(), d.into_data());
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> &Tensor {
        &self.grads[v.0]
    }

    /// Gradients of every named parameter leaf.
    pub fn params(&self) -> ParamStore {
        self.params
            .iter()
            .map(|(name, v)| (name.clone(), self.grads[v.0].clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error, Mask, LAYER_NORM_EPS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Builds `f(params)` as a weighted sum of the output so that every
    /// output element receives a distinct upstream gradient.
    fn check<F>(store: ParamStore, build: F)
    where
        F: Fn(&mut Graph, &BTreeMap<String, Var>) -> Var,
    {
        let reduce = |g: &mut Graph, out: Var| {
            let n = g.value(out).len();
            let w: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.37).sin() + 0.1).collect();
            let value = g.value(out).data().iter().zip(&w).map(|(a, b)| a * b).sum();
            g.scalar_fn(out, value, w).unwrap()
        };
        let mut g = Graph::new();
        let vars = g.params_from(&store);
        let out = build(&mut g, &vars);
        let loss = reduce(&mut g, out);
        let analytic = g.backward(loss).unwrap().params();
        let numeric = finite_diff_grad(
            |p| {
                let mut g = Graph::new();
                let vars = g.params_from(p);
                let out = build(&mut g, &vars);
                let loss = reduce(&mut g, out);
                Ok(g.value(loss).data()[0])
            },
            &store,
            1e-5,
        )
        .unwrap();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn every_primitive_passes_gradient_check() {
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = ParamStore::new();
            s.insert("a", rand_tensor(&mut rng, &[3, 4]));
            s.insert("b", rand_tensor(&mut rng, &[4, 5]));
            s.insert("c", rand_tensor(&mut rng, &[3, 5]));
            s.insert("bias", rand_tensor(&mut rng, &[5]));
            s.insert("gain", rand_tensor(&mut rng, &[5]));
            let mask = Mask::from_fn(3, 3, |r, c| r != 0 || c == 0);

            check(s.clone(), |g, v| g.matmul(v["a"], v["b"]).unwrap());
            check(s.clone(), |g, v| {
                let m = g.matmul(v["a"], v["b"]).unwrap();
                g.add(m, v["c"]).unwrap()
            });
            check(s.clone(), |g, v| g.add_row(v["c"], v["bias"]).unwrap());
            check(s.clone(), |g, v| {
                let t = g.transpose(v["c"]);
                g.scale(t, -1.7)
            });
            check(s.clone(), |g, v| {
                let a = g.slice_rows(v["c"], 1, 3).unwrap();
                let b = g.slice_cols(v["c"], 2, 5).unwrap();
                let b = g.transpose(b);
                let b = g.slice_rows(b, 0, 2).unwrap();
                g.concat_cols(&[a, b, a]).unwrap()
            });
            check(s.clone(), |g, v| {
                let a = g.slice_rows(v["c"], 1, 3).unwrap();
                g.concat_rows(&[a, v["c"], a]).unwrap()
            });
            check(s.clone(), |g, v| {
                let t = g.transpose(v["c"]);
                let logits = g.matmul(v["c"], t).unwrap();
                g.masked_softmax(logits, &mask).unwrap()
            });
            check(s.clone(), |g, v| {
                g.layer_norm(v["c"], v["gain"], v["bias"], LAYER_NORM_EPS).unwrap()
            });
            check(s.clone(), |g, v| {
                let x = g.gelu(v["c"]);
                g.sigmoid(x)
            });
            check(s.clone(), |g, v| {
                let a = g.slice_rows(v["bias"], 0, 1).unwrap();
                let x = g.slice_cols(a, 0, 1).unwrap();
                let y = g.slice_cols(a, 3, 4).unwrap();
                g.mean(&[x, y, y]).unwrap()
            });
        }
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let a = g.param("a", &Tensor::vector(vec![1.0, 2.0]));
        let b = g.param("b", &Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let _unused = g.param("u", &Tensor::zeros(&[3, 2]));
        let y = g.matmul(a, b).unwrap();
        let grads = g.backward(y).unwrap().params();
        assert_eq!(grads.get("u").unwrap().shape(), &[3, 2]);
        assert!(grads.get("u").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(grads.get("a").unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get("b").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        assert!(g.backward(a).is_err());
    }
}
