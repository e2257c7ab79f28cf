use std::borrow::Cow;

use super::{gemm, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        b_transposed: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: T,
    },
    Tanh {
        a: usize,
    },
    Gelu {
        a: usize,
    },
    Softmax {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    Select {
        src: usize,
        idx: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        prefix: Option<(usize, usize)>,
        n_heads: usize,
        prefix_len: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: usize,
        rows: Vec<(usize, usize)>,
        probs: Vec<T>,
    },
    Sum {
        a: usize,
    },
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Dynamic record of executed operations, rebuilt for every forward pass.
///
/// Leaves may borrow parameter tensors for the lifetime `'p`, so binding a
/// model's weights costs no copies. Gradients of leaves accumulate across
/// [`Tape::backward`] calls until [`Tape::zero_grads`].
pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        return Some(a.to_vec());
    }
    if a.len() > b.len() && a.ends_with(b) {
        return Some(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Some(b.to_vec());
    }
    None
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// Records an owned leaf.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    /// Records a borrowed leaf (typically a model parameter).
    pub fn param(&mut self, value: &'p Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf. `None` for tensors that do not
    /// require gradients; all-zero for leaves never reached by backward.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad || !matches!(node.op, Op::Leaf) {
            return None;
        }
        let shape = node.value.shape().to_vec();
        let data = self.leaf_grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
        Some(Tensor::new(shape, data).expect("grad shape"))
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(format!("{what} must be 2-D, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (br, bc) = self.matrix_dims(b, "matmul rhs")?;
        let (bk, n) = if b_transposed { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(Error::shape(format!(
                "matmul of {:?} and {:?}{}",
                self.shape(a),
                self.shape(b),
                if b_transposed { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![T::zero(); m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let bref = if b_transposed {
                MatRef::t(bv, k, n)
            } else {
                MatRef::new(bv, k, n)
            };
            gemm(MatRef::new(av, m, k), bref, &mut out, false);
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            Cow::Owned(value),
            Op::MatMul {
                a: a.0,
                b: b.0,
                b_transposed,
            },
            rg,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = broadcast_shape(&sa, &sb).ok_or_else(|| {
            Error::shape(format!(
                "{} of {:?} and {:?} (only leading-dimension broadcasting)",
                if mul { "mul" } else { "add" },
                sa,
                sb
            ))
        })?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let numel: usize = shape.iter().product();
        let out: Vec<T> = (0..numel)
            .map(|i| {
                let x = av[i % av.len()];
                let y = bv[i % bv.len()];
                if mul {
                    x * y
                } else {
                    x + y
                }
            })
            .collect();
        let rg = self.rg(a.0) || self.rg(b.0);
        let op = if mul {
            Op::Mul { a: a.0, b: b.0 }
        } else {
            Op::Add { a: a.0, b: b.0 }
        };
        Ok(self.push(Cow::Owned(Tensor::new(shape, out)?), op, rg))
    }

    /// Elementwise sum; the lower-rank operand may be expanded over
    /// leading dimensions only.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = {
            let t = self.value(a);
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x * c).collect())
                .expect("same shape")
        };
        let rg = self.rg(a.0);
        self.push(Cow::Owned(value), Op::Scale { a: a.0, c }, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = {
            let t = self.value(a);
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
                .expect("same shape")
        };
        let rg = self.rg(a.0);
        self.push(Cow::Owned(value), op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh { a: a.0 })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu_scalar, Op::Gelu { a: a.0 })
    }

    /// Softmax over the last dimension, max-shifted.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = t.last_dim();
        if d == 0 {
            return Err(Error::shape("softmax over an empty last dimension"));
        }
        if !t.is_finite() {
            return Err(Error::Numeric("non-finite softmax input".into()));
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(a.0);
        Ok(self.push(Cow::Owned(value), Op::Softmax { a: a.0 }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xt = self.value(x);
        let d = xt.last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(format!(
                "layer norm over last dim {d} with gain {:?} and bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let rows = xt.rows();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let dn = T::from_usize(d).expect("dim");
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = xt.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        let rg = self.rg(x.0) || self.rg(gain.0) || self.rg(bias.0);
        Ok(self.push(
            Cow::Owned(value),
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of a `[V×d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims(table, "embedding table")?;
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding id",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table.0);
        Ok(self.push(
            Cow::Owned(value),
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `out.flat[i] = src.flat[idx[i]]`, reshaped to `shape`. Covers
    /// reshapes, permutations and slices.
    pub fn select(&mut self, src: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let sv = self.value(src).data();
        let numel: usize = shape.iter().product();
        if numel != idx.len() {
            return Err(Error::shape(format!(
                "select of {} indices into shape {:?}",
                idx.len(),
                shape
            )));
        }
        let mut out = Vec::with_capacity(idx.len());
        for &i in &idx {
            if i >= sv.len() {
                return Err(Error::Index {
                    what: "select index",
                    index: i,
                    size: sv.len(),
                });
            }
            out.push(sv[i]);
        }
        let value = Tensor::new(shape.to_vec(), out)?;
        let rg = self.rg(src.0);
        Ok(self.push(Cow::Owned(value), Op::Select { src: src.0, idx }, rg))
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Result<Var> {
        let n = self.value(src).numel();
        self.select(src, (0..n).collect(), shape)
    }

    /// Concatenates along the first dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape(format!(
                    "concat of {:?} onto trailing shape {:?}",
                    s, tail
                )));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(
            Cow::Owned(Tensor::new(shape, out)?),
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention with optional key/value
    /// prefix slots.
    ///
    /// `q` is `[Tq×D]`, `k`/`v` are `[Tk×D]` with `Tk ≥ Tq`; query `i` sits
    /// at sequence position `Tk − Tq + i` and sees every prefix slot plus
    /// sequence keys at positions `≤` its own. Prefix tensors are
    /// `[H×P×D/H]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        prefix: Option<(Var, Var)>,
        n_heads: usize,
    ) -> Result<Var> {
        let (tq, dq) = self.matrix_dims(q, "attention query")?;
        let (tk, dk) = self.matrix_dims(k, "attention key")?;
        let (tv, dv) = self.matrix_dims(v, "attention value")?;
        if dq != dk || dk != dv || tk != tv || n_heads == 0 || dq % n_heads != 0 {
            return Err(Error::shape(format!(
                "attention q {:?}, k {:?}, v {:?} with {n_heads} heads",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if tk < tq {
            return Err(Error::shape(format!(
                "attention with {tk} keys for {tq} queries"
            )));
        }
        let dh = dq / n_heads;
        let p = match prefix {
            Some((pk, pv)) => {
                let (sk, sv) = (self.shape(pk), self.shape(pv));
                if sk.len() != 3 || sk[0] != n_heads || sk[2] != dh || sk != sv {
                    return Err(Error::shape(format!(
                        "prefix key {:?} / value {:?} for {n_heads} heads of width {dh}",
                        sk, sv
                    )));
                }
                sk[1]
            }
            None => 0,
        };
        let offset = tk - tq;
        let width = p + tk;
        let scale = T::one() / T::from_usize(dh).expect("dim").sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let (pkd, pvd): (&[T], &[T]) = match prefix {
            Some((pk, pv)) => (self.value(pk).data(), self.value(pv).data()),
            None => (&[], &[]),
        };
        let mut probs = vec![T::zero(); n_heads * tq * width];
        let mut out = vec![T::zero(); tq * dq];
        for h in 0..n_heads {
            let col = h * dh;
            for i in 0..tq {
                let qi = &qd[i * dq + col..i * dq + col + dh];
                let row = &mut probs[(h * tq + i) * width..(h * tq + i + 1) * width];
                let visible = p + offset + i + 1;
                for s in 0..p {
                    let key = &pkd[(h * p + s) * dh..(h * p + s + 1) * dh];
                    row[s] = dot(qi, key) * scale;
                }
                for j in 0..=offset + i {
                    row[p + j] = dot(qi, &kd[j * dq + col..j * dq + col + dh]) * scale;
                }
                softmax_in_place(&mut row[..visible]);
                let oi = &mut out[i * dq + col..i * dq + col + dh];
                for s in 0..p {
                    axpy(row[s], &pvd[(h * p + s) * dh..(h * p + s + 1) * dh], oi);
                }
                for j in 0..=offset + i {
                    axpy(row[p + j], &vd[j * dq + col..j * dq + col + dh], oi);
                }
            }
        }
        let value = Tensor::new(vec![tq, dq], out)?;
        let rg = [Some(q), Some(k), Some(v), prefix.map(|x| x.0), prefix.map(|x| x.1)]
            .into_iter()
            .flatten()
            .any(|x| self.rg(x.0));
        Ok(self.push(
            Cow::Owned(value),
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                prefix: prefix.map(|(a, b)| (a.0, b.0)),
                n_heads,
                prefix_len: p,
                probs,
            },
            rg,
        ))
    }

    /// Attention weights recorded by an attention node, `[H×Tq×(P+Tk)]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean negative log-likelihood over positions whose mask is set.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let (t, vocab) = self.matrix_dims(logits, "logits")?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::shape(format!(
                "{t} logit rows with {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let rows: Vec<(usize, usize)> = (0..t)
            .filter(|&i| mask[i])
            .map(|i| (i, targets[i]))
            .collect();
        if rows.is_empty() {
            return Err(Error::EmptyLoss);
        }
        if let Some(&(_, bad)) = rows.iter().find(|&&(_, y)| y >= vocab) {
            return Err(Error::Index {
                what: "target id",
                index: bad,
                size: vocab,
            });
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(rows.len() * vocab);
        let mut total = 0.0f64;
        for &(i, y) in &rows {
            let row = &lv[i * vocab..(i + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for &x in row {
                z += (x - max).exp();
            }
            let lse = max + z.ln();
            total += (lse - row[y]).to_f64_lossy();
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        let mean = total / rows.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        let rg = self.rg(logits.0);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(T::from_f64_lossy(mean))),
            Op::CrossEntropy {
                logits: logits.0,
                rows,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(a.0);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum { a: a.0 }, rg)
    }

    /// Propagates d(loss)/d(·) to every reachable leaf that requires a
    /// gradient, adding into previously accumulated leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &x)| *a += x),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |j: usize| nodes[j].requires_grad;
        let numel = |j: usize| nodes[j].value.numel();
        macro_rules! acc {
            ($j:expr) => {
                slot(grads, $j, numel($j))
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_transposed } => {
                let (a, b) = (*a, *b);
                let at = &nodes[a].value;
                let bt = &nodes[b].value;
                let (m, k) = (at.shape()[0], at.shape()[1]);
                let n = if *b_transposed {
                    bt.shape()[0]
                } else {
                    bt.shape()[1]
                };
                if needs(a) {
                    // dA = dC · Bᵀ
                    let bref = if *b_transposed {
                        MatRef::new(bt.data(), n, k)
                    } else {
                        MatRef::t(bt.data(), n, k)
                    };
                    gemm(MatRef::new(g, m, n), bref, acc!(a), true);
                }
                if needs(b) {
                    if *b_transposed {
                        // dB[n×k] = dCᵀ · A
                        gemm(MatRef::t(g, n, m), MatRef::new(at.data(), m, k), acc!(b), true);
                    } else {
                        // dB[k×n] = Aᵀ · dC
                        gemm(MatRef::t(at.data(), k, m), MatRef::new(g, m, n), acc!(b), true);
                    }
                }
            }
            Op::Add { a, b } => {
                for &j in &[*a, *b] {
                    if needs(j) {
                        let buf = acc!(j);
                        let len = buf.len();
                        for (idx, &x) in g.iter().enumerate() {
                            buf[idx % len] += x;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let av = nodes[a].value.data();
                let bv = nodes[b].value.data();
                if needs(a) {
                    let buf = acc!(a);
                    let len = buf.len();
                    for (idx, &x) in g.iter().enumerate() {
                        buf[idx % len] += x * bv[idx % bv.len()];
                    }
                }
                if needs(b) {
                    let buf = acc!(b);
                    let len = buf.len();
                    for (idx, &x) in g.iter().enumerate() {
                        buf[idx % len] += x * av[idx % av.len()];
                    }
                }
            }
            Op::Scale { a, c } => {
                if needs(*a) {
                    axpy(*c, g, acc!(*a));
                }
            }
            Op::Tanh { a } => {
                if needs(*a) {
                    let y = nodes[i].value.data();
                    let buf = acc!(*a);
                    for ((b, &gy), &yv) in buf.iter_mut().zip(g).zip(y) {
                        *b += gy * (T::one() - yv * yv);
                    }
                }
            }
            Op::Gelu { a } => {
                if needs(*a) {
                    let x = nodes[*a].value.data();
                    let buf = acc!(*a);
                    for ((b, &gy), &xv) in buf.iter_mut().zip(g).zip(x) {
                        *b += gy * gelu_grad(xv);
                    }
                }
            }
            Op::Softmax { a } => {
                if needs(*a) {
                    let y = nodes[i].value.data();
                    let d = nodes[i].value.last_dim();
                    let buf = acc!(*a);
                    for ((brow, grow), yrow) in
                        buf.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d))
                    {
                        let s = dot(grow, yrow);
                        for j in 0..d {
                            brow[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = nodes[*x].value.last_dim();
                let dn = T::from_usize(d).expect("dim");
                if needs(*gain) {
                    let buf = acc!(*gain);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            buf[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if needs(*bias) {
                    let buf = acc!(*bias);
                    for grow in g.chunks(d) {
                        for j in 0..d {
                            buf[j] += grow[j];
                        }
                    }
                }
                if needs(*x) {
                    let gv = nodes[*gain].value.data();
                    let buf = acc!(*x);
                    let mut dh = vec![T::zero(); d];
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = grow[j] * gv[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / dn;
                        let mean_dhh = dot(&dh, hrow) / dn;
                        let brow = &mut buf[r * d..(r + 1) * d];
                        for j in 0..d {
                            brow[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if needs(*table) {
                    let d = nodes[*table].value.shape()[1];
                    let buf = acc!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(T::one(), &g[r * d..(r + 1) * d], &mut buf[id * d..(id + 1) * d]);
                    }
                }
            }
            Op::Select { src, idx } => {
                if needs(*src) {
                    let buf = acc!(*src);
                    for (&j, &x) in idx.iter().zip(g) {
                        buf[j] += x;
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut start = 0;
                for &p in parts {
                    let n = numel(p);
                    if needs(p) {
                        axpy(T::one(), &g[start..start + n], acc!(p));
                    }
                    start += n;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                prefix,
                n_heads,
                prefix_len,
                probs,
            } => self.attention_backward(
                g,
                grads,
                (*q, *k, *v),
                *prefix,
                *n_heads,
                *prefix_len,
                probs,
            ),
            Op::CrossEntropy {
                logits,
                rows,
                probs,
            } => {
                if needs(*logits) {
                    let vocab = nodes[*logits].value.shape()[1];
                    let scale = g[0] / T::from_usize(rows.len()).expect("count");
                    let buf = acc!(*logits);
                    for (r, &(i, y)) in rows.iter().enumerate() {
                        let prow = &probs[r * vocab..(r + 1) * vocab];
                        let brow = &mut buf[i * vocab..(i + 1) * vocab];
                        axpy(scale, prow, brow);
                        brow[y] -= scale;
                    }
                }
            }
            Op::Sum { a } => {
                if needs(*a) {
                    acc!(*a).iter_mut().for_each(|b| *b += g[0]);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        (q, k, v): (usize, usize, usize),
        prefix: Option<(usize, usize)>,
        n_heads: usize,
        p: usize,
        probs: &[T],
    ) {
        let nodes = &self.nodes;
        let (tq, dm) = (nodes[q].value.shape()[0], nodes[q].value.shape()[1]);
        let tk = nodes[k].value.shape()[0];
        let offset = tk - tq;
        let width = p + tk;
        let dh = dm / n_heads;
        let scale = T::one() / T::from_usize(dh).expect("dim").sqrt();
        let (qd, kd, vd) = (
            nodes[q].value.data(),
            nodes[k].value.data(),
            nodes[v].value.data(),
        );
        let (pkd, pvd): (&[T], &[T]) = match prefix {
            Some((pk, pv)) => (nodes[pk].value.data(), nodes[pv].value.data()),
            None => (&[], &[]),
        };
        let mut dq = vec![T::zero(); tq * dm];
        let mut dk = vec![T::zero(); tk * dm];
        let mut dv = vec![T::zero(); tk * dm];
        let mut dpk = vec![T::zero(); pkd.len()];
        let mut dpv = vec![T::zero(); pvd.len()];
        let mut ds = vec![T::zero(); width];
        for h in 0..n_heads {
            let col = h * dh;
            for i in 0..tq {
                let row = &probs[(h * tq + i) * width..(h * tq + i + 1) * width];
                let gi = &g[i * dm + col..i * dm + col + dh];
                let qi = &qd[i * dm + col..i * dm + col + dh];
                let last = offset + i;
                // dP then softmax Jacobian.
                let mut total = T::zero();
                for s in 0..p {
                    let dp = dot(gi, &pvd[(h * p + s) * dh..(h * p + s + 1) * dh]);
                    ds[s] = dp;
                    total += dp * row[s];
                }
                for j in 0..=last {
                    let dp = dot(gi, &vd[j * dm + col..j * dm + col + dh]);
                    ds[p + j] = dp;
                    total += dp * row[p + j];
                }
                for s in 0..p {
                    let w = row[s] * (ds[s] - total) * scale;
                    axpy(row[s], gi, &mut dpv[(h * p + s) * dh..(h * p + s + 1) * dh]);
                    axpy(w, &pkd[(h * p + s) * dh..(h * p + s + 1) * dh], &mut dq[i * dm + col..i * dm + col + dh]);
                    axpy(w, qi, &mut dpk[(h * p + s) * dh..(h * p + s + 1) * dh]);
                }
                for j in 0..=last {
                    let w = row[p + j] * (ds[p + j] - total) * scale;
                    axpy(row[p + j], gi, &mut dv[j * dm + col..j * dm + col + dh]);
                    axpy(w, &kd[j * dm + col..j * dm + col + dh], &mut dq[i * dm + col..i * dm + col + dh]);
                    axpy(w, qi, &mut dk[j * dm + col..j * dm + col + dh]);
                }
            }
        }
        let mut add_into = |j: usize, src: &[T]| {
            if nodes[j].requires_grad {
                let buf = grads[j].get_or_insert_with(|| vec![T::zero(); src.len()]);
                axpy(T::one(), src, buf);
            }
        };
        add_into(q, &dq);
        add_into(k, &dk);
        add_into(v, &dv);
        if let Some((pk, pv)) = prefix {
            add_into(pk, &dpk);
            add_into(pv, &dpv);
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], j: usize, n: usize) -> &mut Vec<T> {
    grads[j].get_or_insert_with(|| vec![T::zero(); n])
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}
