use std::rc::Rc;

use crate::error::{NumericsError, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&Tensor, &mut dyn FnMut(Var, Tensor))>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Reverse-mode computation graph (tape).
///
/// Nodes are appended in topological order; `backward` walks the tape in
/// reverse accumulating gradients. A graph is confined to a single worker;
/// it is built, differentiated and dropped within one step.
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, backward: Option<BackwardFn>) -> Var {
        self.push_rc(Rc::new(value), requires_grad, backward)
    }

    fn push_rc(
        &mut self,
        value: Rc<Tensor>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, None)
    }

    /// Leaf that accumulates gradient (a trainable parameter).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, true, None)
    }

    /// Walk the tape backwards from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(NumericsError::Shape(
                "backward root must be a scalar".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(backward) = self.nodes[i].backward.as_ref() else {
                continue; // leaf: keep its accumulated gradient
            };
            let Some(g) = grads[i].take() else {
                continue; // no path from root
            };
            let nodes = &self.nodes;
            let mut sink = |v: Var, contrib: Tensor| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                debug_assert_eq!(
                    nodes[v.0].value.shape(),
                    contrib.shape(),
                    "gradient shape mismatch for node {}",
                    v.0
                );
                match grads[v.0].as_mut() {
                    Some(acc) => acc.add_assign(&contrib),
                    None => grads[v.0] = Some(contrib),
                }
            };
            backward(&g, &mut sink);
        }
        Ok(Gradients { grads })
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x + y);
        let req = self.requires(&[a, b]);
        let backward: Option<BackwardFn> = if req {
            Some(Box::new(move |g, sink| {
                sink(a, g.clone());
                sink(b, g.clone());
            }))
        } else {
            None
        };
        self.push(out, req, backward)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x - y);
        let req = self.requires(&[a, b]);
        let backward: Option<BackwardFn> = if req {
            Some(Box::new(move |g, sink| {
                sink(a, g.clone());
                sink(b, g.map(|v| -v));
            }))
        } else {
            None
        };
        self.push(out, req, backward)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x * y);
        let req = self.requires(&[a, b]);
        let backward: Option<BackwardFn> = if req {
            let av = Rc::clone(&self.nodes[a.0].value);
            let bv = Rc::clone(&self.nodes[b.0].value);
            Some(Box::new(move |g, sink| {
                sink(a, g.zip(&bv, |gi, y| gi * y));
                sink(b, g.zip(&av, |gi, x| gi * x));
            }))
        } else {
            None
        };
        self.push(out, req, backward)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.nodes[a.0].value.map(|x| c * x);
        let req = self.requires(&[a]);
        let backward: Option<BackwardFn> = if req {
            Some(Box::new(move |g, sink| sink(a, g.map(|v| c * v))))
        } else {
            None
        };
        self.push(out, req, backward)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.nodes[a.0].value.map(|x| x + c);
        let req = self.requires(&[a]);
        let backward: Option<BackwardFn> = if req {
            Some(Box::new(move |g, sink| sink(a, g.clone())))
        } else {
            None
        };
        self.push(out, req, backward)
    }

    /// `a [N,d] + bias [d]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[bias.0].value;
        let (n, d) = (av.rows(), av.cols());
        assert_eq!(bv.len(), d, "add_row bias width mismatch");
        let mut out = av.as_ref().clone();
        for i in 0..n {
            for j in 0..d {
                out.data_mut()[i * d + j] += bv.data()[j];
            }
        }
        let req = self.requires(&[a, bias]);
        let backward: Option<BackwardFn> = if req {
            let bias_shape = bv.shape().to_vec();
            Some(Box::new(move |g, sink| {
                sink(a, g.clone());
                let mut db = Tensor::zeros(&bias_shape);
                for i in 0..n {
                    for j in 0..d {
                        db.data_mut()[j] += g.data()[i * d + j];
                    }
                }
                sink(bias, db);
            }))
        } else {
            None
        };
        self.push(out, req, backward)
    }

    /// `a [N,C] + col [N,1]` broadcast over columns.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let cv = &self.nodes[col.0].value;
        let (n, c) = (av.rows(), av.cols());
        assert_eq!(cv.rows(), n, "add_col row mismatch");
        assert_eq!(cv.cols(), 1, "add_col expects [N,1]");
        let mut out = av.as_ref().clone();
        for i in 0..n {
            for j in 0..c {
                out.data_mut()[i * c + j] += cv.data()[i];
            }
        }
        let req = self.requires(&[a, col]);
        let backward: Option<BackwardFn> = if req {
            Some(Box::new(move |g, sink| {
                sink(a, g.clone());
                let mut dc = Tensor::zeros(&[n, 1]);
                for i in 0..n {
                    dc.data_mut()[i] = g.data()[i * c..(i + 1) * c].iter().sum();
                }
                sink(col, dc);
            }))
        } else {
            None
        };
        self.push(out, req, backward)
    }

    /// Elementwise multiply by a constant mask/tensor.
    pub fn mul_const(&mut self, a: Var, m: Tensor) -> Var {
        let out = self.nodes[a.0].value.zip(&m, |x, y| x * y);
        let req = self.requires(&[a]);
        let backward: Option<BackwardFn> = if req {
            Some(Box::new(move |g, sink| sink(a, g.zip(&m, |gi, y| gi * y))))
        } else {
            None
        };
        self.push(out, req, backward)
    }

    /// `a + c * mask` with a constant mask (attention / logit suppression).
    pub fn add_masked_const(&mut self, a: Var, mask: Tensor, c: f64) -> Var {
        let out = self.nodes[a.0].value.zip(&mask, |x, m| x + c * m);
        let req = self.requires(&[a]);
        let backward: Option<BackwardFn> = if req {
            Some(Box::new(move |g, sink| sink(a, g.clone())))
        } else {
            None
        };
        self.push(out, req, backward)
    }

    // ---- activations ----

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = Rc::new(self.nodes[a.0].value.map(sigmoid_scalar));
        let req = self.requires(&[a]);
        let backward: Option<BackwardFn> = if req {
            let yc = Rc::clone(&y);
            Some(Box::new(move |g, sink| {
                sink(a, g.zip(&yc, |gi, s| gi * s * (1.0 - s)));
            }))
        } else {
            None
        };
        self.push_rc(y, req, backward)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = Rc::new(self.nodes[a.0].value.map(f64::tanh));
        let req = self.requires(&[a]);
        let backward: Option<BackwardFn> = if req {
            let yc = Rc::clone(&y);
            Some(Box::new(move |g, sink| {
                sink(a, g.zip(&yc, |gi, t| gi * (1.0 - t * t)));
            }))
        } else {
            None
        };
        self.push_rc(y, req, backward)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = Rc::new(self.nodes[a.0].value.map(|x| x.max(0.0)));
        let req = self.requires(&[a]);
        let backward: Option<BackwardFn> = if req {
            let yc = Rc::clone(&y);
            Some(Box::new(move |g, sink| {
                sink(a, g.zip(&yc, |gi, v| if v > 0.0 { gi } else { 0.0 }));
            }))
        } else {
            None
        };
        self.push_rc(y, req, backward)
    }

    /// GeLU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let y = self.nodes[a.0].value.map(gelu_scalar);
        let req = self.requires(&[a]);
        let backward: Option<BackwardFn> = if req {
            let xv = Rc::clone(&self.nodes[a.0].value);
            Some(Box::new(move |g, sink| {
                sink(a, g.zip(&xv, |gi, x| gi * gelu_grad_scalar(x)));
            }))
        } else {
            None
        };
        self.push(y, req, backward)
    }

    // ---- matmul ----

    /// `op(a) x op(b)` where `op` optionally transposes. `ta && tb` is unsupported.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        assert!(!(ta && tb), "matmul with both sides transposed is not supported");
        let out = self.nodes[a.0].value.matmul(&self.nodes[b.0].value, ta, tb);
        let req = self.requires(&[a, b]);
        let backward: Option<BackwardFn> = if req {
            let av = Rc::clone(&self.nodes[a.0].value);
            let bv = Rc::clone(&self.nodes[b.0].value);
            Some(Box::new(move |g, sink| {
                match (ta, tb) {
                    (false, false) => {
                        sink(a, reshaped(g.matmul(&bv, false, true), av.shape()));
                        sink(b, reshaped(av.matmul(g, true, false), bv.shape()));
                    }
                    (false, true) => {
                        // C = A B^T
                        sink(a, reshaped(g.matmul(&bv, false, false), av.shape()));
                        sink(b, reshaped(g.matmul(&av, true, false), bv.shape()));
                    }
                    (true, false) => {
                        // C = A^T B
                        sink(a, reshaped(bv.matmul(g, false, true), av.shape()));
                        sink(b, reshaped(av.matmul(g, false, false), bv.shape()));
                    }
                    (true, true) => unreachable!(),
                }
            }))
        } else {
            None
        };
        self.push(out, req, backward)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `x [N,in] x w [in,out] + bias [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let mm = self.matmul(x, w);
        self.add_row(mm, bias)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].value.shape().to_vec();
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let req = self.requires(&[a]);
        let backward: Option<BackwardFn> = if req {
            Some(Box::new(move |g, sink| {
                sink(a, Tensor::full(&shape, g.item()));
            }))
        } else {
            None
        };
        self.push(Tensor::scalar(s), req, backward)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Subtract the row mean from every element (dueling-head centering).
    pub fn sub_row_mean(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let (n, c) = (av.rows(), av.cols());
        let mut out = av.as_ref().clone();
        for i in 0..n {
            let m: f64 = out.data()[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64;
            for j in 0..c {
                out.data_mut()[i * c + j] -= m;
            }
        }
        let req = self.requires(&[a]);
        let backward: Option<BackwardFn> = if req {
            Some(Box::new(move |g, sink| {
                let mut dg = g.clone();
                for i in 0..n {
                    let m: f64 = g.data()[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64;
                    for j in 0..c {
                        dg.data_mut()[i * c + j] -= m;
                    }
                }
                sink(a, dg);
            }))
        } else {
            None
        };
        self.push(out, req, backward)
    }

    // ---- row-wise softmax family ----

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let s = softmax_tensor(&self.nodes[a.0].value);
        let req = self.requires(&[a]);
        let s = Rc::new(s);
        let backward: Option<BackwardFn> = if req {
            let sc = Rc::clone(&s);
            Some(Box::new(move |g, sink| {
                let (n, c) = (sc.rows(), sc.cols());
                let mut dx = Tensor::zeros(&[n, c]);
                for i in 0..n {
                    let srow = &sc.data()[i * c..(i + 1) * c];
                    let grow = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = srow.iter().zip(grow).map(|(s, g)| s * g).sum();
                    for j in 0..c {
                        dx.data_mut()[i * c + j] = srow[j] * (grow[j] - dot);
                    }
                }
                sink(a, reshaped(dx, sc.shape()));
            }))
        } else {
            None
        };
        self.push_rc(s, req, backward)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let (n, c) = (av.rows(), av.cols());
        let mut out = av.as_ref().clone();
        for i in 0..n {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let req = self.requires(&[a]);
        let backward: Option<BackwardFn> = if req {
            let soft = out.map(f64::exp);
            Some(Box::new(move |g, sink| {
                let (n, c) = (soft.rows(), soft.cols());
                let mut dx = g.clone();
                for i in 0..n {
                    let gsum: f64 = g.data()[i * c..(i + 1) * c].iter().sum();
                    for j in 0..c {
                        dx.data_mut()[i * c + j] -= soft.data()[i * c + j] * gsum;
                    }
                }
                sink(a, dx);
            }))
        } else {
            None
        };
        self.push(out, req, backward)
    }

    /// Row-wise `KL(softmax(p) || softmax(q))` -> `[N,1]`.
    pub fn kl_rows(&mut self, p: Var, q: Var) -> Var {
        let pv = &self.nodes[p.0].value;
        let qv = &self.nodes[q.0].value;
        assert_eq!(pv.shape(), qv.shape(), "kl_rows shape mismatch");
        let (n, c) = (pv.rows(), pv.cols());
        let lp = log_softmax_tensor(pv);
        let lq = log_softmax_tensor(qv);
        let ps = lp.map(f64::exp);
        let qs = lq.map(f64::exp);
        let mut out = Tensor::zeros(&[n, 1]);
        for i in 0..n {
            let mut kl = 0.0;
            for j in 0..c {
                let idx = i * c + j;
                kl += ps.data()[idx] * (lp.data()[idx] - lq.data()[idx]);
            }
            out.data_mut()[i] = kl;
        }
        let req = self.requires(&[p, q]);
        let shape = pv.shape().to_vec();
        let out = Rc::new(out);
        let backward: Option<BackwardFn> = if req {
            let klv = Rc::clone(&out);
            Some(Box::new(move |g, sink| {
                let mut dp = Tensor::zeros(&shape);
                let mut dq = Tensor::zeros(&shape);
                for i in 0..n {
                    let gi = g.data()[i];
                    let kl = klv.data()[i];
                    for j in 0..c {
                        let idx = i * c + j;
                        let diff = lp.data()[idx] - lq.data()[idx];
                        dp.data_mut()[idx] = gi * ps.data()[idx] * (diff - kl);
                        dq.data_mut()[idx] = gi * (qs.data()[idx] - ps.data()[idx]);
                    }
                }
                sink(p, dp);
                sink(q, dq);
            }))
        } else {
            None
        };
        self.push_rc(out, req, backward)
    }

    // ---- normalization ----

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        self.group_norm(x, gamma, beta, self.nodes[x.0].value.cols(), eps)
    }

    /// Group normalization over contiguous groups of `group_size` channels per row.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, group_size: usize, eps: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let gv = self.nodes[gamma.0].value.clone();
        let bv = &self.nodes[beta.0].value;
        let (n, c) = (xv.rows(), xv.cols());
        assert!(c % group_size == 0, "channels {} not divisible by group size {}", c, group_size);
        assert_eq!(gv.len(), c, "group_norm gamma width mismatch");
        assert_eq!(bv.len(), c, "group_norm beta width mismatch");
        let groups = c / group_size;
        let mut xhat = Tensor::zeros(&[n, c]);
        let mut inv_std = Tensor::zeros(&[n, groups]);
        let mut out = Tensor::zeros(&[n, c]);
        for i in 0..n {
            for gidx in 0..groups {
                let lo = i * c + gidx * group_size;
                let seg = &xv.data()[lo..lo + group_size];
                let mu: f64 = seg.iter().sum::<f64>() / group_size as f64;
                let var: f64 = seg.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / group_size as f64;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std.data_mut()[i * groups + gidx] = istd;
                for k in 0..group_size {
                    let h = (seg[k] - mu) * istd;
                    xhat.data_mut()[lo + k] = h;
                    let ch = gidx * group_size + k;
                    out.data_mut()[lo + k] = gv.data()[ch] * h + bv.data()[ch];
                }
            }
        }
        let req = self.requires(&[x, gamma, beta]);
        let xshape = xv.shape().to_vec();
        let gshape = gv.shape().to_vec();
        let backward: Option<BackwardFn> = if req {
            Some(Box::new(move |g, sink| {
                let mut dx = Tensor::zeros(&xshape);
                let mut dgamma = Tensor::zeros(&gshape);
                let mut dbeta = Tensor::zeros(&gshape);
                let m = group_size as f64;
                for i in 0..n {
                    for gidx in 0..groups {
                        let lo = i * c + gidx * group_size;
                        let istd = inv_std.data()[i * groups + gidx];
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for k in 0..group_size {
                            let ch = gidx * group_size + k;
                            let dy = g.data()[lo + k] * gv.data()[ch];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat.data()[lo + k];
                            dgamma.data_mut()[ch] += g.data()[lo + k] * xhat.data()[lo + k];
                            dbeta.data_mut()[ch] += g.data()[lo + k];
                        }
                        for k in 0..group_size {
                            let ch = gidx * group_size + k;
                            let dy = g.data()[lo + k] * gv.data()[ch];
                            dx.data_mut()[lo + k] =
                                istd * (dy - sum_dy / m - xhat.data()[lo + k] * sum_dy_xhat / m);
                        }
                    }
                }
                sink(x, dx);
                sink(gamma, dgamma);
                sink(beta, dbeta);
            }))
        } else {
            None
        };
        self.push(out, req, backward)
    }

    /// Row-wise L2 normalization `x / max(||x||, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, c) = (xv.rows(), xv.cols());
        let mut out = xv.as_ref().clone();
        let mut denom = vec![0.0; n];
        let mut clipped = vec![false; n];
        for i in 0..n {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let m = if norm > eps { norm } else { eps };
            clipped[i] = norm <= eps;
            denom[i] = m;
            for v in row.iter_mut() {
                *v /= m;
            }
        }
        let req = self.requires(&[x]);
        let out = Rc::new(out);
        let backward: Option<BackwardFn> = if req {
            let yc = Rc::clone(&out);
            Some(Box::new(move |g, sink| {
                let mut dx = Tensor::zeros(yc.shape());
                for i in 0..n {
                    let yrow = &yc.data()[i * c..(i + 1) * c];
                    let grow = &g.data()[i * c..(i + 1) * c];
                    if clipped[i] {
                        for j in 0..c {
                            dx.data_mut()[i * c + j] = grow[j] / denom[i];
                        }
                    } else {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            dx.data_mut()[i * c + j] = (grow[j] - yrow[j] * dot) / denom[i];
                        }
                    }
                }
                sink(x, dx);
            }))
        } else {
            None
        };
        self.push_rc(out, req, backward)
    }

    // ---- structural ops ----

    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = Rc::clone(&self.nodes[a.0].value);
        self.push_rc(v, false, None)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        let mut row_counts = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.cols(), c, "concat_rows column mismatch");
            row_counts.push(v.rows());
            data.extend_from_slice(v.data());
        }
        let total: usize = row_counts.iter().sum();
        let out = Tensor::new(vec![total, c], data).unwrap();
        let req = self.requires(parts);
        let backward: Option<BackwardFn> = if req {
            let parts: Vec<Var> = parts.to_vec();
            Some(Box::new(move |g, sink| {
                let mut row = 0;
                for (idx, &p) in parts.iter().enumerate() {
                    let rows = row_counts[idx];
                    let slice = g.data()[row * c..(row + rows) * c].to_vec();
                    sink(p, Tensor::new(vec![rows, c], slice).unwrap());
                    row += rows;
                }
            }))
        } else {
            None
        };
        self.push(out, req, backward)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let v = &self.nodes[p.0].value;
                assert_eq!(v.rows(), n, "concat_cols row mismatch");
                v.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[n, total]);
        let mut col = 0;
        for (idx, &p) in parts.iter().enumerate() {
            let v = &self.nodes[p.0].value;
            let w = widths[idx];
            for i in 0..n {
                out.data_mut()[i * total + col..i * total + col + w]
                    .copy_from_slice(&v.data()[i * w..(i + 1) * w]);
            }
            col += w;
        }
        let req = self.requires(parts);
        let backward: Option<BackwardFn> = if req {
            let parts: Vec<Var> = parts.to_vec();
            Some(Box::new(move |g, sink| {
                let mut col = 0;
                for (idx, &p) in parts.iter().enumerate() {
                    let w = widths[idx];
                    let mut dp = Tensor::zeros(&[n, w]);
                    for i in 0..n {
                        dp.data_mut()[i * w..(i + 1) * w]
                            .copy_from_slice(&g.data()[i * total + col..i * total + col + w]);
                    }
                    sink(p, dp);
                    col += w;
                }
            }))
        } else {
            None
        };
        self.push(out, req, backward)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let (n, c) = (av.rows(), av.cols());
        assert!(start + len <= n, "slice_rows out of range");
        let out = Tensor::new(
            vec![len, c],
            av.data()[start * c..(start + len) * c].to_vec(),
        )
        .unwrap();
        let req = self.requires(&[a]);
        let backward: Option<BackwardFn> = if req {
            let ashape = av.shape().to_vec();
            Some(Box::new(move |g, sink| {
                let mut da = Tensor::zeros(&ashape);
                da.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                sink(a, da);
            }))
        } else {
            None
        };
        self.push(out, req, backward)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let (n, c) = (av.rows(), av.cols());
        assert!(start + len <= c, "slice_cols out of range");
        let mut out = Tensor::zeros(&[n, len]);
        for i in 0..n {
            out.data_mut()[i * len..(i + 1) * len]
                .copy_from_slice(&av.data()[i * c + start..i * c + start + len]);
        }
        let req = self.requires(&[a]);
        let backward: Option<BackwardFn> = if req {
            let ashape = av.shape().to_vec();
            Some(Box::new(move |g, sink| {
                let mut da = Tensor::zeros(&ashape);
                for i in 0..n {
                    da.data_mut()[i * c + start..i * c + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                sink(a, da);
            }))
        } else {
            None
        };
        self.push(out, req, backward)
    }

    /// Select rows of `a` by index, duplicates allowed.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let av = &self.nodes[a.0].value;
        let (n, c) = (av.rows(), av.cols());
        let mut out = Tensor::zeros(&[indices.len(), c]);
        for (k, &i) in indices.iter().enumerate() {
            assert!(i < n, "gather_rows index out of range");
            out.data_mut()[k * c..(k + 1) * c].copy_from_slice(&av.data()[i * c..(i + 1) * c]);
        }
        let req = self.requires(&[a]);
        let backward: Option<BackwardFn> = if req {
            let ashape = av.shape().to_vec();
            Some(Box::new(move |g, sink| {
                let mut da = Tensor::zeros(&ashape);
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        da.data_mut()[i * c + j] += g.data()[k * c + j];
                    }
                }
                sink(a, da);
            }))
        } else {
            None
        };
        self.push(out, req, backward)
    }

    /// `out[i,j] = a[i, idx[i*k + j]]` — per-row column gather.
    pub fn gather_cols_per_row(&mut self, a: Var, idx: Vec<usize>, k: usize) -> Var {
        let av = &self.nodes[a.0].value;
        let (n, c) = (av.rows(), av.cols());
        assert_eq!(idx.len(), n * k, "gather_cols_per_row index length mismatch");
        let mut out = Tensor::zeros(&[n, k]);
        for i in 0..n {
            for j in 0..k {
                let col = idx[i * k + j];
                assert!(col < c, "gather_cols_per_row index out of range");
                out.data_mut()[i * k + j] = av.data()[i * c + col];
            }
        }
        let req = self.requires(&[a]);
        let backward: Option<BackwardFn> = if req {
            let ashape = av.shape().to_vec();
            Some(Box::new(move |g, sink| {
                let mut da = Tensor::zeros(&ashape);
                for i in 0..n {
                    for j in 0..k {
                        da.data_mut()[i * c + idx[i * k + j]] += g.data()[i * k + j];
                    }
                }
                sink(a, da);
            }))
        } else {
            None
        };
        self.push(out, req, backward)
    }

    /// `out[i] = a[i, idx[i]]` -> `[N,1]`.
    pub fn select_col_per_row(&mut self, a: Var, idx: &[usize]) -> Var {
        self.gather_cols_per_row(a, idx.to_vec(), 1)
    }
}

fn reshaped(t: Tensor, shape: &[usize]) -> Tensor {
    t.reshape(shape.to_vec()).expect("gradient reshape mismatch")
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softmax_tensor(a: &Tensor) -> Tensor {
    let (n, c) = (a.rows(), a.cols());
    let mut out = a.clone();
    for i in 0..n {
        let row = &mut out.data_mut()[i * c..(i + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub(crate) fn log_softmax_tensor(a: &Tensor) -> Tensor {
    let (n, c) = (a.rows(), a.cols());
    let mut out = a.clone();
    for i in 0..n {
        let row = &mut out.data_mut()[i * c..(i + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}
