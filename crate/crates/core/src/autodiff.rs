//! A small reverse-mode tape over dense row-major matrices.
//!
//! Every op appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse. Parameters are not copied onto the tape: a
//! [`Var::Param`] reads straight from the borrowed parameter slice and its
//! gradient lands in [`Gradients`].

use std::ops::Range;

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis, Zip};

pub type Matrix = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Var {
    Node(usize),
    Param(usize),
}

enum Op {
    /// No inputs; gradients stop here. Also what `detach` produces.
    Constant,
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    /// `x W^T + b`, with `W` stored as out x in and `b` as 1 x out.
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    /// Scaled dot-product attention inside each segment; `probs` is indexed
    /// `segment * heads + head`.
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Range<usize>>,
        heads: usize,
        probs: Vec<Matrix>,
    },
    /// Per-row `-log softmax(logits)[target]`, an n x 1 column.
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    /// Multiplies row `i` by the constant `weights[i]`.
    RowScale {
        x: Var,
        weights: Vec<f64>,
    },
    Sum {
        x: Var,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p [Matrix],
    nodes: Vec<Node>,
}

/// Parameter gradients from one backward pass; `None` where a parameter
/// received no gradient.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: usize) -> Option<&Matrix> {
        self.params[id].as_ref()
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-12;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GeLU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Numerically stable log-sum-exp of one row.
pub fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Matrix]) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match v {
            Var::Node(i) => &self.nodes[i].value,
            Var::Param(i) => &self.params[i],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var::Node(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    /// Same value, no gradient flows back through the result.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat rows must agree");
        self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = self.value(x).dot(&self.value(w).t()) + self.value(b);
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add { a, b })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(gelu);
        self.push(out, Op::Gelu { x })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head attention restricted to each segment of rows; `q`, `k`, `v`
    /// are already projected and split into `heads` equal column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: &[Range<usize>], heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dim = qv.ncols();
        let head_dim = dim / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut out = Matrix::zeros(qv.raw_dim());
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            for h in 0..heads {
                let cols = h * head_dim..(h + 1) * head_dim;
                let qs = qv.slice(s![seg.clone(), cols.clone()]);
                let ks = kv.slice(s![seg.clone(), cols.clone()]);
                let vs = vv.slice(s![seg.clone(), cols.clone()]);
                let p = softmax_rows(&(qs.dot(&ks.t()) * scale));
                out.slice_mut(s![seg.clone(), cols]).assign(&p.dot(&vs));
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
        )
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "one target per row");
        let probs = softmax_rows(lv);
        let mut out = Matrix::zeros((targets.len(), 1));
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            out[[r, 0]] = log_sum_exp(row) - row[t];
        }
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x) * factor;
        self.push(out, Op::Scale { x, factor })
    }

    pub fn row_scale(&mut self, x: Var, weights: &[f64]) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(out.nrows(), weights.len(), "one weight per row");
        for (mut row, &w) in out.rows_mut().into_iter().zip(weights) {
            row *= w;
        }
        self.push(
            out,
            Op::RowScale {
                x,
                weights: weights.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Matrix::from_elem((1, 1), total), Op::Sum { x })
    }

    /// Backpropagates from the 1 x 1 node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let Var::Node(root) = loss else {
            panic!("backward starts from a node");
        };
        assert_eq!(self.nodes[root].value.dim(), (1, 1), "loss must be a scalar");
        let mut node_grads: Vec<Option<Matrix>> = vec![None; root + 1];
        let mut param_grads: Vec<Option<Matrix>> = vec![None; self.params.len()];
        node_grads[root] = Some(Matrix::ones((1, 1)));

        for i in (0..=root).rev() {
            let Some(grad) = node_grads[i].take() else {
                continue;
            };
            let mut acc = |v: Var, g: Matrix| {
                let slot = match v {
                    Var::Node(j) => &mut node_grads[j],
                    Var::Param(j) => &mut param_grads[j],
                };
                match slot {
                    Some(existing) => *existing += &g,
                    None => *slot = Some(g),
                }
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Gather { table, ids } => {
                    let mut g = Matrix::zeros(self.value(*table).raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = g.row_mut(id);
                        dst += &grad.row(r);
                    }
                    acc(*table, g);
                }
                Op::ConcatCols { parts } => {
                    let mut start = 0;
                    for &p in parts {
                        let width = self.value(p).ncols();
                        acc(p, grad.slice(s![.., start..start + width]).to_owned());
                        start += width;
                    }
                }
                Op::Linear { x, w, b } => {
                    acc(*x, grad.dot(self.value(*w)));
                    acc(*w, grad.t().dot(self.value(*x)));
                    acc(*b, grad.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Add { a, b } => {
                    acc(*a, grad.clone());
                    acc(*b, grad);
                }
                Op::Gelu { x } => {
                    let mut g = grad;
                    Zip::from(&mut g)
                        .and(self.value(*x))
                        .for_each(|g, &xv| *g *= gelu_grad(xv));
                    acc(*x, g);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gamma_v = self.value(*gamma);
                    acc(*gamma, (&grad * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*beta, grad.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &grad * gamma_v;
                    let cols = dxhat.ncols() as f64;
                    let mut dx = Matrix::zeros(dxhat.raw_dim());
                    for (r, &is) in inv_std.iter().enumerate() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let mean_dh = dh.sum() / cols;
                        let mean_dh_xh = dh.dot(&xh) / cols;
                        let mut out = dx.row_mut(r);
                        for c in 0..out.len() {
                            out[c] = is * (dh[c] - mean_dh - xh[c] * mean_dh_xh);
                        }
                    }
                    acc(*x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    segments,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let head_dim = qv.ncols() / heads;
                    let scale = 1.0 / (head_dim as f64).sqrt();
                    let mut dq = Matrix::zeros(qv.raw_dim());
                    let mut dk = Matrix::zeros(kv.raw_dim());
                    let mut dv = Matrix::zeros(vv.raw_dim());
                    for (si, seg) in segments.iter().enumerate() {
                        for h in 0..*heads {
                            let cols = h * head_dim..(h + 1) * head_dim;
                            let p = &probs[si * heads + h];
                            let dout = grad.slice(s![seg.clone(), cols.clone()]);
                            let qs = qv.slice(s![seg.clone(), cols.clone()]);
                            let ks = kv.slice(s![seg.clone(), cols.clone()]);
                            let vs = vv.slice(s![seg.clone(), cols.clone()]);
                            dv.slice_mut(s![seg.clone(), cols.clone()]).assign(&p.t().dot(&dout));
                            let dp = dout.dot(&vs.t());
                            let mut ds = &dp * p;
                            for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                                let inner = row.sum();
                                Zip::from(&mut row).and(&prow).for_each(|d, &pv| *d -= pv * inner);
                            }
                            ds *= scale;
                            dq.slice_mut(s![seg.clone(), cols.clone()]).assign(&ds.dot(&ks));
                            dk.slice_mut(s![seg.clone(), cols]).assign(&ds.t().dot(&qs));
                        }
                    }
                    acc(*q, dq);
                    acc(*k, dk);
                    acc(*v, dv);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let mut g = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        g[[r, t]] -= 1.0;
                        let scale = grad[[r, 0]];
                        g.row_mut(r).mapv_inplace(|v| v * scale);
                    }
                    acc(*logits, g);
                }
                Op::Scale { x, factor } => acc(*x, grad * *factor),
                Op::RowScale { x, weights } => {
                    let mut g = grad;
                    for (mut row, &w) in g.rows_mut().into_iter().zip(weights) {
                        row *= w;
                    }
                    acc(*x, g);
                }
                Op::Sum { x } => {
                    let g = Matrix::from_elem(self.value(*x).raw_dim(), grad[[0, 0]]);
                    acc(*x, g);
                }
            }
        }
        Gradients {
            params: param_grads,
        }
    }
}
