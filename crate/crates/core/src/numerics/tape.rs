//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] records every primitive applied during one forward pass. Values
//! live on the tape; [`Var`] is a handle into it. [`Tape::backward`] walks the
//! record in exact reverse order and can run once per tape.
//!
//! Parameter tensors are borrowed rather than copied, so a tape carries the
//! lifetime of the [`ParamStore`] it was bound to.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::tensor::{numel, split_axis, strides};
use super::{Elem, NumericsError, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        rows: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
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
    Relu {
        a: usize,
    },
    Softmax {
        a: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LogSoftmax {
        a: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        d: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: usize,
        indices: Vec<usize>,
        dim: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    CrossEntropy {
        logits: usize,
        v: usize,
        targets: Vec<usize>,
        excluded: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Sum {
        a: usize,
    },
}

struct Node<'a, T: Elem> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Parameters bound to a tape, by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var, NumericsError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NumericsError::Structure(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Elem> Gradients<T> {
    /// Gradient of `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<Tensor<T>> {
        self.grads
            .get(var.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.shapes[var.0].clone(), g.clone()))
    }

    /// Gradient of `var`, zeros when unreachable.
    pub fn get_or_zero(&self, var: Var) -> Tensor<T> {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    /// Collects gradients into a store congruent with the bound parameters.
    pub fn for_params(&self, bound: &Bound) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, var) in bound.iter() {
            out.insert(name, self.get_or_zero(var));
        }
        out
    }
}

pub struct Tape<'a, T: Elem> {
    nodes: Vec<Node<'a, T>>,
    consumed: bool,
}

impl<'a, T: Elem> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: String) -> NumericsError {
    NumericsError::Shape(msg)
}

impl<'a, T: Elem> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records an owned leaf; it is differentiable iff the tensor says so.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(Cow::Owned(t), Op::Leaf, rg)
    }

    /// Records a non-differentiable owned leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Records a borrowed leaf without copying it.
    pub fn borrowed(&mut self, t: &'a Tensor<T>, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, requires_grad)
    }

    /// Binds every parameter of `store` as a leaf. With `track = false` the
    /// leaves are constants (inference).
    pub fn bind(&mut self, store: &'a ParamStore<T>, track: bool) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, t) in store.iter() {
            let v = self.borrowed(t, track);
            vars.insert(name.to_string(), v);
        }
        Bound { vars }
    }

    // ---- primitives ------------------------------------------------------

    /// `a[..., k] @ b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err(format!(
                "matmul: cannot multiply {sa:?} by {sb:?}"
            )));
        }
        let k = sb[0];
        let n = sb[1];
        let rows = numel(&sa) / k;
        let mut out = vec![T::zero(); rows * n];
        T::gemm(
            rows,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::zero(),
            &mut out,
        );
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.grad_of(&[a.0, b.0]);
        Ok(self.push(
            Cow::Owned(Tensor::from_parts(shape, out)),
            Op::MatMul {
                a: a.0,
                b: b.0,
                rows,
                k,
                n,
            },
            rg,
        ))
    }

    fn bmm_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0];
        let (bk, bn) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if !ok || sa[2] != bk {
            return Err(shape_err(format!(
                "batch_matmul{}: cannot multiply {sa:?} by {sb:?}",
                if trans_b { "_t" } else { "" }
            )));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], bn);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    trans_b,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let rg = self.grad_of(&[a.0, b.0]);
        Ok(self.push(
            Cow::Owned(Tensor::from_parts(vec![batch, m, n], out)),
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    /// `a[b, m, k] @ b[b, k, n]` per batch entry.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.bmm_impl(a, b, false)
    }

    /// `a[b, m, k] @ b[b, n, k]ᵀ` per batch entry.
    pub fn batch_matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.bmm_impl(a, b, true)
    }

    /// Elementwise sum. `b` may have a shape equal to a suffix of `a`'s shape,
    /// in which case it is broadcast over the leading extents.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(format!("add: cannot broadcast {sb:?} onto {sa:?}")));
        }
        let shape = sa.to_vec();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let nb = bd.len();
        let out: Vec<T> = ad
            .chunks(nb)
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| x + y))
            .collect();
        let rg = self.grad_of(&[a.0, b.0]);
        Ok(self.push(
            Cow::Owned(Tensor::from_parts(shape, out)),
            Op::Add { a: a.0, b: b.0 },
            rg,
        ))
    }

    /// `a - b`, with the broadcasting rules of [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let nb = self.scale(b, T::lit(-1.0));
        self.add(a, nb)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "mul: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let shape = self.shape(a).to_vec();
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.grad_of(&[a.0, b.0]);
        Ok(self.push(
            Cow::Owned(Tensor::from_parts(shape, out)),
            Op::Mul { a: a.0, b: b.0 },
            rg,
        ))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a);
        let out: Vec<T> = t.data().iter().map(|&x| x * c).collect();
        let shape = t.shape().to_vec();
        let rg = self.grad_of(&[a.0]);
        self.push(
            Cow::Owned(Tensor::from_parts(shape, out)),
            Op::Scale { a: a.0, c },
            rg,
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out: Vec<T> = t.data().iter().map(|&x| x.max(T::zero())).collect();
        let shape = t.shape().to_vec();
        let rg = self.grad_of(&[a.0]);
        self.push(
            Cow::Owned(Tensor::from_parts(shape, out)),
            Op::Relu { a: a.0 },
            rg,
        )
    }

    fn check_axis(&self, a: Var, axis: usize, what: &str) -> Result<(), NumericsError> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(shape_err(format!(
                "{what}: axis {axis} out of range for {:?}",
                t.shape()
            )));
        }
        if !t.all_finite() {
            return Err(NumericsError::NonFinite(format!("{what} input")));
        }
        Ok(())
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        self.check_axis(a, axis, "softmax")?;
        let t = self.value(a);
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = t.data().to_vec();
        softmax_in_place(&mut out, outer, n, inner, false);
        let shape = t.shape().to_vec();
        let rg = self.grad_of(&[a.0]);
        Ok(self.push(
            Cow::Owned(Tensor::from_parts(shape, out)),
            Op::Softmax {
                a: a.0,
                outer,
                n,
                inner,
            },
            rg,
        ))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        self.check_axis(a, axis, "log_softmax")?;
        let t = self.value(a);
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = t.data().to_vec();
        softmax_in_place(&mut out, outer, n, inner, true);
        let shape = t.shape().to_vec();
        let rg = self.grad_of(&[a.0]);
        Ok(self.push(
            Cow::Owned(Tensor::from_parts(shape, out)),
            Op::LogSoftmax {
                a: a.0,
                outer,
                n,
                inner,
            },
            rg,
        ))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericsError> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err(format!(
                "layer_norm: gain {:?} / bias {:?} do not match feature extent {d}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let rows = numel(&sx) / d;
        let eps = T::lit(eps);
        let dt = T::lit(d as f64);
        let xs = self.value(x).data();
        let (g, bb) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bb[j];
            }
        }
        let rg = self.grad_of(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            Cow::Owned(Tensor::from_parts(sx, out)),
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                d,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of `table[V, D]`; output is `[indices.len(), D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(shape_err(format!("embedding: table must be 2-D, got {st:?}")));
        }
        if indices.is_empty() {
            return Err(shape_err("embedding: no indices".into()));
        }
        let (v, dim) = (st[0], st[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(NumericsError::Index(format!(
                "embedding index {bad} outside vocabulary of {v}"
            )));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            out.extend_from_slice(&td[i * dim..(i + 1) * dim]);
        }
        let rg = self.grad_of(&[table.0]);
        Ok(self.push(
            Cow::Owned(Tensor::from_parts(vec![indices.len(), dim], out)),
            Op::Embedding {
                table: table.0,
                indices: indices.to_vec(),
                dim,
            },
            rg,
        ))
    }

    /// 2-D convolution: `x[B, Cin, H, W]`, `w[Cout, Cin, KH, KW]`, `b[Cout]`.
    pub fn conv2d_strided(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var, NumericsError> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(shape_err(format!(
                "conv2d: input {sx:?}, kernel {sw:?}, bias {sb:?} are inconsistent"
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(shape_err("conv2d: stride must be positive".into()));
        }
        let (hp, wp) = (sx[2] + 2 * padding.0, sx[3] + 2 * padding.1);
        if hp < sw[2] || wp < sw[3] {
            return Err(shape_err(format!(
                "conv2d: kernel {sw:?} larger than padded input {sx:?}"
            )));
        }
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sw[0],
            kh: sw[2],
            kw: sw[3],
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            ho: (hp - sw[2]) / stride.0 + 1,
            wo: (wp - sw[3]) / stride.1 + 1,
        };
        let (patch, pos) = (geom.patch(), geom.positions());
        let img = geom.c_in * geom.h * geom.w;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut cols = vec![T::zero(); geom.batch * patch * pos];
        let mut out = vec![T::zero(); geom.batch * geom.c_out * pos];
        for bi in 0..geom.batch {
            let col = &mut cols[bi * patch * pos..(bi + 1) * patch * pos];
            im2col(&xd[bi * img..(bi + 1) * img], &geom, col);
            let o = &mut out[bi * geom.c_out * pos..(bi + 1) * geom.c_out * pos];
            for (co, chunk) in o.chunks_mut(pos).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bd[co]);
            }
            T::gemm(geom.c_out, patch, pos, wd, false, col, false, T::one(), o);
        }
        let rg = self.grad_of(&[x.0, w.0, b.0]);
        Ok(self.push(
            Cow::Owned(Tensor::from_parts(
                vec![geom.batch, geom.c_out, geom.ho, geom.wo],
                out,
            )),
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Max pooling over `[B, C, H, W]` with a square window equal to the
    /// stride. Partial windows at the far edges are kept (ceil mode), so the
    /// output extents are `ceil(H / k)` and `ceil(W / k)`.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var, NumericsError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || k == 0 {
            return Err(shape_err(format!("max_pool2d: bad input {sx:?} or window {k}")));
        }
        let (bc, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
        let (ho, wo) = (h.div_ceil(k), w.div_ceil(k));
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(bc * ho * wo);
        let mut argmax = Vec::with_capacity(bc * ho * wo);
        for p in 0..bc {
            let base = p * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = base + oh * k * w + ow * k;
                    for ih in oh * k..((oh + 1) * k).min(h) {
                        for iw in ow * k..((ow + 1) * k).min(w) {
                            let idx = base + ih * w + iw;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.grad_of(&[x.0]);
        Ok(self.push(
            Cow::Owned(Tensor::from_parts(vec![sx[0], sx[1], ho, wo], out)),
            Op::MaxPool2d { x: x.0, argmax },
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err("concat: no inputs".into()))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(shape_err(format!("concat: axis {axis} out of range for {s0:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == s0.len()
                && s.iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err(format!("concat: {s:?} incompatible with {s0:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let chunks: Vec<usize> = inputs.iter().map(|v| self.shape(*v)[axis] * inner).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &c) in inputs.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(*v).data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let rg = self.grad_of(&ids);
        Ok(self.push(
            Cow::Owned(Tensor::from_parts(shape, out)),
            Op::Concat {
                inputs: ids,
                outer,
                chunks,
            },
            rg,
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, NumericsError> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        let valid = perm.len() == s.len()
            && perm.iter().all(|&p| p < s.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(shape_err(format!("permute: {perm:?} is not a permutation of {s:?}")));
        }
        let (shape, out) = permute_data(self.value(a).data(), &s, perm);
        let rg = self.grad_of(&[a.0]);
        Ok(self.push(
            Cow::Owned(Tensor::from_parts(shape, out)),
            Op::Permute {
                a: a.0,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(shape_err(format!("transpose: rank {r} < 2")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(a);
        if numel(shape) != t.len() || shape.contains(&0) {
            return Err(shape_err(format!("cannot reshape {:?} into {shape:?}", t.shape())));
        }
        let out = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        let rg = self.grad_of(&[a.0]);
        Ok(self.push(Cow::Owned(out), Op::Reshape { a: a.0 }, rg))
    }

    /// Mean of `-log softmax(logits)[target]` over rows not excluded by
    /// `pad_mask` (`true` = excluded). Excluded rows receive zero gradient.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[usize],
        pad_mask: &[bool],
    ) -> Result<Var, NumericsError> {
        let s = self.shape(logits).to_vec();
        let v = *s.last().unwrap();
        let rows = numel(&s) / v;
        if targets.len() != rows || pad_mask.len() != rows {
            return Err(shape_err(format!(
                "cross_entropy: {rows} logit rows but {} targets / {} mask entries",
                targets.len(),
                pad_mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(NumericsError::Index(format!(
                "target index {bad} outside vocabulary of {v}"
            )));
        }
        let count = pad_mask.iter().filter(|&&m| !m).count();
        if count == 0 {
            return Err(NumericsError::Usage(
                "cross_entropy: every position is masked".into(),
            ));
        }
        if !self.value(logits).all_finite() {
            return Err(NumericsError::NonFinite("cross_entropy logits".into()));
        }
        let mut probs = self.value(logits).data().to_vec();
        softmax_in_place(&mut probs, rows, v, 1, false);
        let ld = self.value(logits).data();
        let mut total = T::zero();
        for r in 0..rows {
            if pad_mask[r] {
                continue;
            }
            // log-sum-exp form keeps the loss finite when a probability underflows
            let row = &ld[r * v..(r + 1) * v];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            total = total + (lse - row[targets[r]]);
        }
        let loss = total / T::lit(count as f64);
        let rg = self.grad_of(&[logits.0]);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::CrossEntropy {
                logits: logits.0,
                v,
                targets: targets.to_vec(),
                excluded: pad_mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.grad_of(&[a.0]);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum { a: a.0 }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    // ---- backward ---------------------------------------------------------

    /// Propagates d`loss` to every differentiable leaf. Consumes the tape's
    /// record; a second call is a usage error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        if self.consumed {
            return Err(NumericsError::Usage("backward on a consumed tape".into()));
        }
        if loss.0 >= self.nodes.len() || self.value(loss).len() != 1 {
            return Err(NumericsError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes.get(loss.0).map(|n| n.value.shape().to_vec())
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |j: usize| nodes[j].value.data();
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[j].requires_grad {
                return;
            }
            let buf = grads[j].get_or_insert_with(|| vec![T::zero(); nodes[j].value.len()]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, rows, k, n } => {
                acc(a, &mut |ga| T::gemm(rows, n, k, g, false, val(b), true, T::one(), ga));
                acc(b, &mut |gb| T::gemm(k, rows, n, val(a), true, g, false, T::one(), gb));
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (ad, bd) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let bs = &bd[s * k * n..(s + 1) * k * n];
                        let out = &mut ga[s * m * k..(s + 1) * m * k];
                        // trans_b: dA = dC @ B (B stored [n, k]); else dA = dC @ Bᵀ
                        T::gemm(m, n, k, gs, false, bs, !trans_b, T::one(), out);
                    }
                });
                acc(b, &mut |gb| {
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let as_ = &ad[s * m * k..(s + 1) * m * k];
                        let out = &mut gb[s * k * n..(s + 1) * k * n];
                        if trans_b {
                            T::gemm(n, m, k, gs, true, as_, false, T::one(), out);
                        } else {
                            T::gemm(k, m, n, as_, true, gs, false, T::one(), out);
                        }
                    }
                });
            }
            &Op::Add { a, b } => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y));
                acc(b, &mut |gb| {
                    let nb = gb.len();
                    for row in g.chunks(nb) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x = *x + y);
                    }
                });
            }
            &Op::Mul { a, b } => {
                let (ad, bd) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for ((x, &gy), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *x = *x + gy * bv;
                    }
                });
                acc(b, &mut |gb| {
                    for ((x, &gy), &av) in gb.iter_mut().zip(g).zip(ad) {
                        *x = *x + gy * av;
                    }
                });
            }
            &Op::Scale { a, c } => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * c));
            }
            &Op::Relu { a } => {
                let ad = val(a);
                acc(a, &mut |ga| {
                    for ((x, &gy), &av) in ga.iter_mut().zip(g).zip(ad) {
                        if av > T::zero() {
                            *x = *x + gy;
                        }
                    }
                });
            }
            &Op::Softmax { a, outer, n, inner } => {
                let y = nodes[i].value.data();
                acc(a, &mut |ga| {
                    for o in 0..outer {
                        for q in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + q;
                            let dot: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                let p = at(j);
                                ga[p] = ga[p] + y[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            &Op::LogSoftmax { a, outer, n, inner } => {
                let y = nodes[i].value.data();
                acc(a, &mut |ga| {
                    for o in 0..outer {
                        for q in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + q;
                            let gs: T = (0..n).map(|j| g[at(j)]).sum();
                            for j in 0..n {
                                let p = at(j);
                                ga[p] = ga[p] + g[p] - y[p].exp() * gs;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                d,
                xhat,
                rstd,
            } => {
                let d = *d;
                let gd = val(*gain);
                acc(*gain, &mut |gg| {
                    for (row, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + row[j] * hrow[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x = *x + y);
                    }
                });
                acc(*x, &mut |gx| {
                    let dt = T::lit(d as f64);
                    for (r, (row, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = row[j] * gd[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * hrow[j];
                        }
                        let scale = rstd[r] / dt;
                        for j in 0..d {
                            let dh = row[j] * gd[j];
                            let p = r * d + j;
                            gx[p] = gx[p] + scale * (dt * dh - s1 - hrow[j] * s2);
                        }
                    }
                });
            }
            Op::Embedding {
                table,
                indices,
                dim,
            } => {
                let dim = *dim;
                acc(*table, &mut |gt| {
                    for (r, &ix) in indices.iter().enumerate() {
                        for j in 0..dim {
                            gt[ix * dim + j] = gt[ix * dim + j] + g[r * dim + j];
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (patch, pos) = (geom.patch(), geom.positions());
                let go = geom.c_out * pos;
                acc(*b, &mut |gb| {
                    for bi in 0..geom.batch {
                        for co in 0..geom.c_out {
                            let s: T = g[bi * go + co * pos..bi * go + (co + 1) * pos]
                                .iter()
                                .copied()
                                .sum();
                            gb[co] = gb[co] + s;
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for bi in 0..geom.batch {
                        let gs = &g[bi * go..(bi + 1) * go];
                        let col = &cols[bi * patch * pos..(bi + 1) * patch * pos];
                        T::gemm(geom.c_out, pos, patch, gs, false, col, true, T::one(), gw);
                    }
                });
                let wd = val(*w);
                acc(*x, &mut |gx| {
                    let img = geom.c_in * geom.h * geom.w;
                    let mut dcol = vec![T::zero(); patch * pos];
                    for bi in 0..geom.batch {
                        let gs = &g[bi * go..(bi + 1) * go];
                        T::gemm(patch, geom.c_out, pos, wd, true, gs, false, T::zero(), &mut dcol);
                        col2im(&dcol, geom, &mut gx[bi * img..(bi + 1) * img]);
                    }
                });
            }
            Op::MaxPool2d { x, argmax } => {
                acc(*x, &mut |gx| {
                    for (&src, &gy) in argmax.iter().zip(g) {
                        gx[src] = gx[src] + gy;
                    }
                });
            }
            Op::Concat {
                inputs,
                outer,
                chunks,
            } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&inp, &c) in inputs.iter().zip(chunks) {
                    acc(inp, &mut |gi| {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + c];
                            gi[o * c..(o + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, &y)| *x = *x + y);
                        }
                    });
                    offset += c;
                }
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let out_shape = nodes[i].value.shape();
                let (_, back) = permute_data(g, out_shape, &inv);
                acc(*a, &mut |ga| ga.iter_mut().zip(&back).for_each(|(x, &y)| *x = *x + y));
            }
            &Op::Reshape { a } => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y));
            }
            Op::CrossEntropy {
                logits,
                v,
                targets,
                excluded,
                probs,
                count,
            } => {
                let v = *v;
                let scale = g[0] / T::lit(*count as f64);
                acc(*logits, &mut |gl| {
                    for (r, &skip) in excluded.iter().enumerate() {
                        if skip {
                            continue;
                        }
                        for j in 0..v {
                            let p = r * v + j;
                            let y = if j == targets[r] { T::one() } else { T::zero() };
                            gl[p] = gl[p] + (probs[p] - y) * scale;
                        }
                    }
                });
            }
            &Op::Sum { a } => {
                acc(a, &mut |ga| ga.iter_mut().for_each(|x| *x = *x + g[0]));
            }
        }
    }
}

fn softmax_in_place<T: Elem>(buf: &mut [T], outer: usize, n: usize, inner: usize, log: bool) {
    for o in 0..outer {
        for q in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + q;
            let m = (0..n).map(|j| buf[at(j)]).fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for j in 0..n {
                let e = (buf[at(j)] - m).exp();
                s = s + e;
                if !log {
                    buf[at(j)] = e;
                }
            }
            if log {
                let lse = m + s.ln();
                for j in 0..n {
                    buf[at(j)] = buf[at(j)] - lse;
                }
            } else {
                for j in 0..n {
                    buf[at(j)] = buf[at(j)] / s;
                }
            }
        }
    }
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn im2col<T: Elem>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let pos = g.positions();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * pos..(row + 1) * pos];
                for oh in 0..g.ho {
                    let ih = (oh * g.sh + ki) as isize - g.ph as isize;
                    for ow in 0..g.wo {
                        let iw = (ow * g.sw + kj) as isize - g.pw as isize;
                        dst[oh * g.wo + ow] = if ih >= 0
                            && (ih as usize) < g.h
                            && iw >= 0
                            && (iw as usize) < g.w
                        {
                            x[(c * g.h + ih as usize) * g.w + iw as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Elem>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let pos = g.positions();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * pos..(row + 1) * pos];
                for oh in 0..g.ho {
                    let ih = (oh * g.sh + ki) as isize - g.ph as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    for ow in 0..g.wo {
                        let iw = (ow * g.sw + kj) as isize - g.pw as isize;
                        if iw < 0 || iw as usize >= g.w {
                            continue;
                        }
                        let p = (c * g.h + ih as usize) * g.w + iw as usize;
                        x[p] = x[p] + src[oh * g.wo + ow];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-300);

        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.softmax(x, 0).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (p, v) in tape.value(y).data().iter().zip([1.0f64, 2.0, 3.0]) {
            assert!((p - v.exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(tape.softmax(x, 0), Err(NumericsError::NonFinite(_))));
    }

    #[test]
    fn softmax_along_middle_axis_sums_to_one() {
        let mut tape = Tape::<f32>::new();
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 37.0) % 11.0 * 90.0).collect();
        let x = tape.constant(Tensor::from_f64(&[2, 3, 4], &data).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        let d = tape.value(y).data();
        for o in 0..2 {
            for q in 0..4 {
                let s: f32 = (0..3).map(|j| d[o * 12 + j * 4 + q]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cross_entropy_edge_values() {
        let mut tape = Tape::<f64>::new();
        // P(target) = 1 (up to exp(-1e4) underflow)
        let l = tape.constant(t(&[2, 3], &[0.0, 1e4, 0.0, 1e4, 0.0, 0.0]));
        let ce = tape.cross_entropy_masked(l, &[1, 0], &[false, false]).unwrap();
        assert_eq!(tape.value(ce).item(), 0.0);

        let l = tape.constant(Tensor::zeros(&[4, 7]));
        let ce = tape.cross_entropy_masked(l, &[0, 1, 2, 3], &[false; 4]).unwrap();
        assert!((tape.value(ce).item() - 7f64.ln()).abs() < 1e-12);

        let l = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            tape.cross_entropy_masked(l, &[3], &[false]),
            Err(NumericsError::Index(_))
        ));
    }

    #[test]
    fn masked_rows_get_exactly_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let l = tape.input(t(&[3, 2], &[0.3, -1.0, 2.0, 0.5, 0.1, 0.1]).with_grad(true));
        let ce = tape.cross_entropy_masked(l, &[0, 1, 0], &[false, true, false]).unwrap();
        let g = tape.backward(ce).unwrap().get(l).unwrap();
        assert_eq!(&g.data()[2..4], &[0.0, 0.0]);
        assert!(g.data()[0] != 0.0);
    }

    #[test]
    fn second_backward_is_a_usage_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t(&[2], &[1.0, 2.0]).with_grad(true));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(NumericsError::Usage(_))));
    }

    #[test]
    fn unreachable_leaves_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t(&[2], &[1.0, 2.0]).with_grad(true));
        let y = tape.input(t(&[2], &[1.0, 2.0]).with_grad(true));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.get(y).is_none());
        assert_eq!(g.get_or_zero(y).data(), &[0.0, 0.0]);
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn max_pool_ceil_mode_extents() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..15).map(|i| i as f64).collect();
        let x = tape.constant(t(&[1, 1, 5, 3], &data));
        let y = tape.max_pool2d(x, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 2]);
        assert_eq!(tape.value(y).data(), &[4.0, 5.0, 10.0, 11.0, 13.0, 14.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 3]);
        // y[k, i, j] = x[i, j, k]
        assert_eq!(tape.value(y).data()[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let z = tape.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(z).data(), &data[..]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut tape = Tape::<f64>::new();
        let xd: Vec<f64> = (0..2 * 2 * 4 * 5).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
        let wd: Vec<f64> = (0..3 * 2 * 3 * 3).map(|i| ((i * 5) % 11) as f64 * 0.1).collect();
        let x = tape.constant(t(&[2, 2, 4, 5], &xd));
        let w = tape.constant(t(&[3, 2, 3, 3], &wd));
        let b = tape.constant(t(&[3], &[0.5, -0.5, 1.0]));
        let y = tape.conv2d_strided(x, w, b, (2, 1), (1, 1)).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 2, 5]);
        let out = tape.value(y).data();
        for bi in 0..2 {
            for co in 0..3 {
                for oh in 0..2 {
                    for ow in 0..5 {
                        let mut s = [0.5, -0.5, 1.0][co];
                        for ci in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let ih = (oh * 2 + ki) as isize - 1;
                                    let iw = (ow + kj) as isize - 1;
                                    if (0..4).contains(&ih) && (0..5).contains(&iw) {
                                        s += xd[((bi * 2 + ci) * 4 + ih as usize) * 5 + iw as usize]
                                            * wd[((co * 2 + ci) * 3 + ki) * 3 + kj];
                                    }
                                }
                            }
                        }
                        let got = out[((bi * 3 + co) * 2 + oh) * 5 + ow];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
