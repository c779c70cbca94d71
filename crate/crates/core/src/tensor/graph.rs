use std::borrow::Cow;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gemm::{gemm, MatMut, MatRef};
use super::{GradStore, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Value written into attention logits at blocked positions.
pub const BLOCKED_LOGIT: f64 = -1e9;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        a_step: usize,
        b_step: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad_id: usize,
        smoothing: f64,
        scale: f64,
        probs: Vec<f64>,
    },
    HeadScores {
        q: Var,
        k: Var,
        heads: usize,
        scale: f64,
    },
    HeadContext {
        w: Var,
        v: Var,
        heads: usize,
    },
    Mask {
        x: Var,
        allowed: Vec<bool>,
        heads: usize,
    },
}

#[derive(Debug)]
struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

/// Computation record for one forward/backward pass.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order and backward walks it in reverse.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_nodes: HashMap<ParamId, Var>,
    rng: Option<ChaCha8Rng>,
}

impl<'p> Graph<'p> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            rng: None,
        }
    }

    /// Training-mode graph with a seeded dropout stream.
    pub fn training(params: &'p ParamStore, seed: u64) -> Self {
        Graph {
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Graph::new(params)
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(self.params.get(id)),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// Batched matrix product `a[..., i, k] · b[..., k, j]`.
    ///
    /// Batch dimensions must match, or one side must be a plain matrix which
    /// is then broadcast. With `trans_b`, `b` is laid out as `[..., j, k]`.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(mismatch());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let (batch, m_eff, a_step, b_step, out_batch): (usize, usize, usize, usize, Vec<usize>) =
            if batch_b.is_empty() {
                let rows: usize = batch_a.iter().product::<usize>() * m;
                (1, rows, 0, 0, batch_a.to_vec())
            } else if batch_a.is_empty() {
                let nb: usize = batch_b.iter().product();
                (nb, m, 0, k * n, batch_b.to_vec())
            } else if batch_a == batch_b {
                let nb: usize = batch_a.iter().product();
                (nb, m, m * k, k * n, batch_a.to_vec())
            } else {
                return Err(mismatch());
            };
        let mut out = vec![0.0; batch * m_eff * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for i in 0..batch {
                let am = MatRef::row_major(ad, i * a_step, m_eff, k);
                let bm = b_view(bd, i * b_step, k, n, trans_b);
                gemm(1.0, am, bm, 0.0, MatMut::row_major(&mut out, i * m_eff * n, m_eff, n));
            }
        }
        let mut shape = out_batch;
        shape.push(m);
        shape.push(n);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                a_step,
                b_step,
                m: m_eff,
                k,
                n,
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b)))
    }

    /// `x[..., d] + bias[d]` broadcast over all leading positions.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias);
        let out: Vec<f64> = self
            .data(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow { x, bias }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Relu(x))
    }

    /// Inverted dropout. Identity in evaluation mode or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} not in [0, 1)")));
        }
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Dropout { x, mask }))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let max = (0..n).map(|j| src[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= sum;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }))
    }

    /// Layer normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let rows = src.len() / d;
        let mut out = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Gathers rows of `table[vocab, d]`; output is `[ids.len(), d]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "embedding table must be a matrix, got {shape:?}"
            )));
        }
        let (vocab, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::IdOutOfRange { id: bad, vocab });
        }
        if ids.is_empty() {
            return Err(Error::Empty("embedding lookup with no ids".into()));
        }
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape(x)))
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean label-smoothed negative log-likelihood over non-pad targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: usize, smoothing: f64) -> Result<Var> {
        let count = targets.iter().filter(|&&t| t != pad_id).count();
        if count == 0 {
            return Err(Error::Empty("cross-entropy target is all padding".into()));
        }
        self.cross_entropy_scaled(logits, targets, pad_id, smoothing, 1.0 / count as f64)
    }

    /// Summed label-smoothed NLL over non-pad targets, multiplied by `scale`.
    ///
    /// Training uses `scale = 1 / tokens_in_update` so that micro-batch losses
    /// add up to the mean over the whole update.
    pub fn cross_entropy_scaled(
        &mut self,
        logits: Var,
        targets: &[usize],
        pad_id: usize,
        smoothing: f64,
        scale: f64,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::InvalidArgument(format!(
                "label smoothing {smoothing} not in [0, 1)"
            )));
        }
        let shape = self.shape(logits).to_vec();
        let vocab = *shape.last().expect("non-empty shape");
        let rows = self.value(logits).len() / vocab;
        if rows != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: shape,
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab && t != pad_id) {
            return Err(Error::IdOutOfRange { id: bad, vocab });
        }
        if targets.iter().all(|&t| t == pad_id) {
            return Err(Error::Empty("cross-entropy target is all padding".into()));
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; src.len()];
        let mut total = 0.0;
        let uniform = smoothing / vocab as f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            for (pj, v) in p.iter_mut().zip(row) {
                *pj = (v - lse).exp();
            }
            if t == pad_id {
                continue;
            }
            let mut loss = -(1.0 - smoothing) * (row[t] - lse);
            if smoothing > 0.0 {
                let sum_logp: f64 = row.iter().map(|v| v - lse).sum();
                loss -= uniform * sum_logp;
            }
            total += loss;
        }
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad_id,
                smoothing,
                scale,
                probs,
            },
        ))
    }

    /// Per-head scaled dot products.
    ///
    /// `q: [b, lq, d]`, `k: [b, lk, d]` are split into `heads` column blocks of
    /// width `d / heads`; the result is `[b, heads, lq, lk]` scaled by
    /// `1/sqrt(d / heads)`.
    pub fn head_scores(&mut self, q: Var, k: Var, heads: usize) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let sk = self.shape(k).to_vec();
        if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::ShapeMismatch {
                op: "head_scores",
                left: sq,
                right: sk,
            });
        }
        let (b, lq, d, lk) = (sq[0], sq[1], sq[2], sk[1]);
        check_heads(d, heads)?;
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = vec![0.0; b * heads * lq * lk];
        {
            let qd = self.data(q);
            let kd = self.data(k);
            for bi in 0..b {
                for h in 0..heads {
                    let qm = MatRef::strided(qd, bi * lq * d + h * dk, lq, dk, d);
                    let km = MatRef::strided(kd, bi * lk * d + h * dk, lk, dk, d).t();
                    let off = (bi * heads + h) * lq * lk;
                    gemm(scale, qm, km, 0.0, MatMut::row_major(&mut out, off, lq, lk));
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, heads, lq, lk], out),
            Op::HeadScores { q, k, heads, scale },
        ))
    }

    /// Applies per-head attention weights `w: [b, heads, lq, lk]` to
    /// `v: [b, lk, d]`, concatenating heads into `[b, lq, d]`.
    pub fn head_context(&mut self, w: Var, v: Var) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        let sv = self.shape(v).to_vec();
        if sw.len() != 4 || sv.len() != 3 || sw[0] != sv[0] || sw[3] != sv[1] {
            return Err(Error::ShapeMismatch {
                op: "head_context",
                left: sw,
                right: sv,
            });
        }
        let (b, heads, lq, lk, d) = (sw[0], sw[1], sw[2], sw[3], sv[2]);
        check_heads(d, heads)?;
        let dk = d / heads;
        let mut out = vec![0.0; b * lq * d];
        {
            let wd = self.data(w);
            let vd = self.data(v);
            for bi in 0..b {
                for h in 0..heads {
                    let wm = MatRef::row_major(wd, (bi * heads + h) * lq * lk, lq, lk);
                    let vm = MatRef::strided(vd, bi * lk * d + h * dk, lk, dk, d);
                    gemm(1.0, wm, vm, 0.0, MatMut::strided(&mut out, bi * lq * d + h * dk, lq, dk, d));
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, lq, d], out),
            Op::HeadContext { w, v, heads },
        ))
    }

    /// Overwrites blocked logits of `x: [b, heads, lq, lk]` with
    /// [`BLOCKED_LOGIT`]; `allowed` is `[b, lq, lk]` and shared across heads.
    pub fn mask_logits(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || allowed.len() != s[0] * s[2] * s[3] {
            return Err(Error::ShapeMismatch {
                op: "mask_logits",
                left: s,
                right: vec![allowed.len()],
            });
        }
        let (b, heads, plane) = (s[0], s[1], s[2] * s[3]);
        let src = self.data(x);
        let mut out = src.to_vec();
        for bi in 0..b {
            let m = &allowed[bi * plane..(bi + 1) * plane];
            for h in 0..heads {
                let off = (bi * heads + h) * plane;
                for (j, &ok) in m.iter().enumerate() {
                    if !ok {
                        out[off + j] = BLOCKED_LOGIT;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(s, out),
            Op::Mask {
                x,
                allowed: allowed.to_vec(),
                heads,
            },
        ))
    }

    /// Reverse pass from a one-element `loss`, adding parameter gradients into
    /// `grads`. The record is left intact, so calling this twice accumulates
    /// twice.
    pub fn backward(&self, loss: Var, grads: &mut GradStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut node_grads = self.node_grads(loss);
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Param(id) = node.op {
                if let Some(g) = node_grads[i].take() {
                    for (dst, v) in grads.get_mut(id).iter_mut().zip(&g) {
                        *dst += v;
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient of `loss` with respect to any node (constants included).
    /// Returns `None` for nodes the loss does not depend on.
    pub fn grad_of(&self, loss: Var, wrt: Var) -> Option<Vec<f64>> {
        let mut g = self.node_grads(loss);
        g[wrt.0].take()
    }

    fn node_grads(&self, loss: Var) -> Vec<Option<Vec<f64>>> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0; self.value(loss).len()]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant | Op::Param(_) => {
                    grads[idx] = Some(gout);
                }
                Op::MatMul {
                    a,
                    b,
                    trans_b,
                    batch,
                    a_step,
                    b_step,
                    m,
                    k,
                    n,
                } => {
                    let (m, k, n) = (*m, *k, *n);
                    let ad = self.data(*a);
                    let bd = self.data(*b);
                    {
                        let ga = slot(&mut grads, *a, ad.len());
                        for i in 0..*batch {
                            let gc = MatRef::row_major(&gout, i * m * n, m, n);
                            // dA = dC · op(B)ᵀ
                            let bt = b_view(bd, i * b_step, k, n, *trans_b).t();
                            gemm(1.0, gc, bt, 1.0, MatMut::row_major(ga, i * a_step, m, k));
                        }
                    }
                    {
                        let gb = slot(&mut grads, *b, bd.len());
                        for i in 0..*batch {
                            let gc = MatRef::row_major(&gout, i * m * n, m, n);
                            let am = MatRef::row_major(ad, i * a_step, m, k);
                            if *trans_b {
                                // B is [n, k]: dB = dCᵀ · A
                                gemm(1.0, gc.t(), am, 1.0, MatMut::row_major(gb, i * b_step, n, k));
                            } else {
                                gemm(1.0, am.t(), gc, 1.0, MatMut::row_major(gb, i * b_step, k, n));
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &gout);
                    accumulate(&mut grads, *b, &gout);
                }
                Op::AddRow { x, bias } => {
                    let d = self.value(*bias).len();
                    accumulate(&mut grads, *x, &gout);
                    let gb = slot(&mut grads, *bias, d);
                    for row in gout.chunks(d) {
                        for (g, v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let ad = self.data(*a);
                    let bd = self.data(*b);
                    let ga: Vec<f64> = gout.iter().zip(bd).map(|(g, y)| g * y).collect();
                    let gb: Vec<f64> = gout.iter().zip(ad).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Scale(x, c) => {
                    let g: Vec<f64> = gout.iter().map(|v| v * c).collect();
                    accumulate(&mut grads, *x, &g);
                }
                Op::Relu(x) => {
                    let xd = self.data(*x);
                    let g: Vec<f64> = gout
                        .iter()
                        .zip(xd)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, &g);
                }
                Op::Dropout { x, mask } => {
                    let g: Vec<f64> = gout.iter().zip(mask).map(|(g, m)| g * m).collect();
                    accumulate(&mut grads, *x, &g);
                }
                Op::Softmax { x, axis } => {
                    let y = node.value.data();
                    let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                    let mut g = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let dot: f64 = (0..n).map(|j| y[base + j * inner] * gout[base + j * inner]).sum();
                            for j in 0..n {
                                let p = base + j * inner;
                                g[p] = y[p] * (gout[p] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, &g);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gd = self.data(*gain);
                    let d = gd.len();
                    let rows = xhat.len() / d;
                    let mut gx = vec![0.0; xhat.len()];
                    let mut ggain = vec![0.0; d];
                    let mut gbias = vec![0.0; d];
                    for r in 0..rows {
                        let dy = &gout[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            ggain[j] += dy[j] * xh[j];
                            gbias[j] += dy[j];
                            let dxh = dy[j] * gd[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = dy[j] * gd[j];
                            gx[r * d + j] = inv_std[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                    accumulate(&mut grads, *gain, &ggain);
                    accumulate(&mut grads, *bias, &gbias);
                }
                Op::Embed { table, ids } => {
                    let d = node.value.last_dim();
                    let size = self.value(*table).len();
                    let gt = slot(&mut grads, *table, size);
                    for (r, &id) in ids.iter().enumerate() {
                        for (dst, v) in gt[id * d..(id + 1) * d].iter_mut().zip(&gout[r * d..(r + 1) * d]) {
                            *dst += v;
                        }
                    }
                }
                Op::Reshape(x) => accumulate(&mut grads, *x, &gout),
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    let g = vec![gout[0]; n];
                    accumulate(&mut grads, *x, &g);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    pad_id,
                    smoothing,
                    scale,
                    probs,
                } => {
                    let vocab = self.value(*logits).last_dim();
                    let uniform = smoothing / vocab as f64;
                    let coef = gout[0] * scale;
                    let mut g = vec![0.0; probs.len()];
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad_id {
                            continue;
                        }
                        let row = &mut g[r * vocab..(r + 1) * vocab];
                        for (j, gj) in row.iter_mut().enumerate() {
                            let mut q = uniform;
                            if j == t {
                                q += 1.0 - smoothing;
                            }
                            *gj = coef * (probs[r * vocab + j] - q);
                        }
                    }
                    accumulate(&mut grads, *logits, &g);
                }
                Op::HeadScores { q, k, heads, scale } => {
                    let sq = self.shape(*q);
                    let (b, lq, d) = (sq[0], sq[1], sq[2]);
                    let lk = self.shape(*k)[1];
                    let dk = d / heads;
                    let qd = self.data(*q);
                    let kd = self.data(*k);
                    {
                        let gq = slot(&mut grads, *q, qd.len());
                        for bi in 0..b {
                            for h in 0..*heads {
                                let gs = MatRef::row_major(&gout, (bi * heads + h) * lq * lk, lq, lk);
                                let km = MatRef::strided(kd, bi * lk * d + h * dk, lk, dk, d);
                                gemm(*scale, gs, km, 1.0, MatMut::strided(gq, bi * lq * d + h * dk, lq, dk, d));
                            }
                        }
                    }
                    {
                        let gk = slot(&mut grads, *k, kd.len());
                        for bi in 0..b {
                            for h in 0..*heads {
                                let gs = MatRef::row_major(&gout, (bi * heads + h) * lq * lk, lq, lk);
                                let qm = MatRef::strided(qd, bi * lq * d + h * dk, lq, dk, d);
                                gemm(*scale, gs.t(), qm, 1.0, MatMut::strided(gk, bi * lk * d + h * dk, lk, dk, d));
                            }
                        }
                    }
                }
                Op::HeadContext { w, v, heads } => {
                    let sw = self.shape(*w);
                    let (b, lq, lk) = (sw[0], sw[2], sw[3]);
                    let d = self.shape(*v)[2];
                    let dk = d / heads;
                    let wd = self.data(*w);
                    let vd = self.data(*v);
                    {
                        let gw = slot(&mut grads, *w, wd.len());
                        for bi in 0..b {
                            for h in 0..*heads {
                                let go = MatRef::strided(&gout, bi * lq * d + h * dk, lq, dk, d);
                                let vm = MatRef::strided(vd, bi * lk * d + h * dk, lk, dk, d);
                                let off = (bi * heads + h) * lq * lk;
                                gemm(1.0, go, vm.t(), 1.0, MatMut::row_major(gw, off, lq, lk));
                            }
                        }
                    }
                    {
                        let gv = slot(&mut grads, *v, vd.len());
                        for bi in 0..b {
                            for h in 0..*heads {
                                let go = MatRef::strided(&gout, bi * lq * d + h * dk, lq, dk, d);
                                let wm = MatRef::row_major(wd, (bi * heads + h) * lq * lk, lq, lk);
                                gemm(1.0, wm.t(), go, 1.0, MatMut::strided(gv, bi * lk * d + h * dk, lk, dk, d));
                            }
                        }
                    }
                }
                Op::Mask { x, allowed, heads } => {
                    let s = node.value.shape();
                    let plane = s[2] * s[3];
                    let mut g = gout;
                    for (chunk_idx, chunk) in g.chunks_mut(plane).enumerate() {
                        let bi = chunk_idx / heads;
                        let m = &allowed[bi * plane..(bi + 1) * plane];
                        for (v, &ok) in chunk.iter_mut().zip(m) {
                            if !ok {
                                *v = 0.0;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, &g);
                }
            }
        }
        grads
    }
}

fn b_view(data: &[f64], offset: usize, k: usize, n: usize, trans_b: bool) -> MatRef<'_> {
    if trans_b {
        MatRef::row_major(data, offset, n, k).t()
    } else {
        MatRef::row_major(data, offset, k, n)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::InvalidArgument(format!(
            "model dimension {d} not divisible by {heads} heads"
        )));
    }
    Ok(())
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        none => *none = Some(g.to_vec()),
    }
}
