//! Reverse-mode automatic differentiation on a recording tape.
//!
//! A [`Tape`] records every primitive applied to its variables during the
//! forward pass. [`Tape::backward`] then walks the records in reverse,
//! accumulating adjoints. One tape owns one graph; build a fresh tape per
//! training step. Tapes are single-threaded by design, while the underlying
//! [`Tensor`] values are immutable once recorded and safe to share
//! read-only.
//!
//! The primitive set is exactly what a small transformer trained with a
//! preference loss needs: matmul (with transpose flags), elementwise
//! add/mul/scale, bias broadcast, gather of embedding rows, layer norm,
//! GELU, softmax and log-softmax over the last axis, log, exp, sigmoid,
//! softplus, picking scalars out of a row, segment sums, and a fused
//! causal multi-head attention.

use crate::tensor::{matmul, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Record {
    Leaf,
    /// Backward closure: given (tape values, adjoint of this node, adjoint
    /// slots of all nodes), scatter gradient contributions to the parents.
    Op {
        backward: Box<dyn Fn(&BackCtx, &Tensor, &mut [Option<Tensor>])>,
    },
}

pub struct BackCtx<'a> {
    values: &'a [Tensor],
}

impl BackCtx<'_> {
    fn val(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    records: Vec<Record>,
}

/// Adjoints produced by [`Tape::backward`], indexed by variable.
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots[v.0].as_ref()
    }

    /// Gradient of a leaf, zeros if the leaf never influenced the loss.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Tensor {
        match self.slots[v.0] {
            Some(ref t) => t.clone(),
            None => Tensor::zeros(rows, cols),
        }
    }
}

fn accum(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(t) => t.axpy(1.0, &delta),
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.values.push(t);
        self.records.push(Record::Leaf);
        Var(self.values.len() - 1)
    }

    fn push(
        &mut self,
        value: Tensor,
        backward: Box<dyn Fn(&BackCtx, &Tensor, &mut [Option<Tensor>])>,
    ) -> Var {
        self.values.push(value);
        self.records.push(Record::Op { backward });
        Var(self.values.len() - 1)
    }

    /// Reverse pass from `root`, which must be scalar-shaped `(1, 1)`.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.values[root.0].shape(),
            (1, 1),
            "backward root must be a scalar"
        );
        let mut slots: Vec<Option<Tensor>> = vec![None; self.values.len()];
        slots[root.0] = Some(Tensor::scalar(1.0));
        let ctx = BackCtx { values: &self.values };
        for i in (0..=root.0).rev() {
            let Some(grad) = slots[i].take() else { continue };
            if let Record::Op { backward, .. } = &self.records[i] {
                backward(&ctx, &grad, &mut slots);
            }
            // leaves keep their adjoint; interior adjoints are restored so
            // callers can inspect them too
            slots[i] = Some(grad);
        }
        Grads { slots }
    }

    pub fn matmul(&mut self, a: Var, trans_a: bool, b: Var, trans_b: bool) -> Var {
        let value = matmul(&self.values[a.0], trans_a, &self.values[b.0], trans_b);
        self.push(
            value,
            Box::new(move |ctx, g, slots| {
                // Four transpose cases, each mapping dC back onto A and B.
                let av = ctx.val(a);
                let bv = ctx.val(b);
                let (da, db) = match (trans_a, trans_b) {
                    (false, false) => (matmul(g, false, bv, true), matmul(av, true, g, false)),
                    (true, false) => (matmul(bv, false, g, true), matmul(av, false, g, false)),
                    (false, true) => (matmul(g, false, bv, false), matmul(g, true, av, false)),
                    (true, true) => (matmul(bv, true, g, true), matmul(g, true, av, true)),
                };
                accum(&mut slots[a.0], da);
                accum(&mut slots[b.0], db);
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let av = &self.values[a.0];
        let bv = &self.values[b.0];
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let mut value = av.clone();
        value.axpy(1.0, bv);
        self.push(
            value,
            Box::new(move |_ctx, g, slots| {
                accum(&mut slots[a.0], g.clone());
                accum(&mut slots[b.0], g.clone());
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let neg_b = self.scale(b, -1.0);
        self.add(a, neg_b)
    }

    /// Adds a `(1, n)` bias row to every row of an `(m, n)` input.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let av = &self.values[a.0];
        let bv = &self.values[bias.0];
        assert_eq!(bv.shape(), (1, av.cols()), "bias must be one row");
        let mut value = av.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        self.push(
            value,
            Box::new(move |_ctx, g, slots| {
                let mut db = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (acc, gv) in db.data_mut().iter_mut().zip(g.row(r)) {
                        *acc += gv;
                    }
                }
                accum(&mut slots[a.0], g.clone());
                accum(&mut slots[bias.0], db);
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = &self.values[a.0];
        let bv = &self.values[b.0];
        assert_eq!(av.shape(), bv.shape(), "mul shapes");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(av.rows(), av.cols(), data).unwrap();
        self.push(
            value,
            Box::new(move |ctx, g, slots| {
                let av = ctx.val(a);
                let bv = ctx.val(b);
                let da = g
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(gv, y)| gv * y)
                    .collect();
                let db = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(gv, x)| gv * x)
                    .collect();
                accum(
                    &mut slots[a.0],
                    Tensor::from_vec(g.rows(), g.cols(), da).unwrap(),
                );
                accum(
                    &mut slots[b.0],
                    Tensor::from_vec(g.rows(), g.cols(), db).unwrap(),
                );
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.values[a.0].map(|x| c * x);
        self.push(
            value,
            Box::new(move |_ctx, g, slots| {
                accum(&mut slots[a.0], g.map(|x| c * x));
            }),
        )
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(f64::ln);
        self.push(
            value,
            Box::new(move |ctx, g, slots| {
                let av = ctx.val(a);
                let data = g.data().iter().zip(av.data()).map(|(gv, x)| gv / x).collect();
                accum(
                    &mut slots[a.0],
                    Tensor::from_vec(g.rows(), g.cols(), data).unwrap(),
                );
            }),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(f64::exp);
        let out_shape = value.shape();
        self.push(
            value,
            Box::new(move |ctx, g, slots| {
                // d/dx exp(x) = exp(x), reuse the stored output by recomputing
                // from the input value kept on the tape
                let av = ctx.val(a);
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(gv, x)| gv * x.exp())
                    .collect();
                accum(
                    &mut slots[a.0],
                    Tensor::from_vec(out_shape.0, out_shape.1, data).unwrap(),
                );
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(
            value,
            Box::new(move |ctx, g, slots| {
                let av = ctx.val(a);
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(gv, x)| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        gv * s * (1.0 - s)
                    })
                    .collect();
                accum(
                    &mut slots[a.0],
                    Tensor::from_vec(g.rows(), g.cols(), data).unwrap(),
                );
            }),
        )
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(softplus_scalar);
        self.push(
            value,
            Box::new(move |ctx, g, slots| {
                let av = ctx.val(a);
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(gv, x)| gv / (1.0 + (-x).exp()))
                    .collect();
                accum(
                    &mut slots[a.0],
                    Tensor::from_vec(g.rows(), g.cols(), data).unwrap(),
                );
            }),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(gelu_scalar);
        self.push(
            value,
            Box::new(move |ctx, g, slots| {
                let av = ctx.val(a);
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(gv, x)| gv * gelu_grad_scalar(*x))
                    .collect();
                accum(
                    &mut slots[a.0],
                    Tensor::from_vec(g.rows(), g.cols(), data).unwrap(),
                );
            }),
        )
    }

    /// Softmax over each row (the last axis).
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(&self.values[a.0]);
        let cached = value.clone();
        self.push(
            value,
            Box::new(move |_ctx, g, slots| {
                let mut da = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let p = cached.row(r);
                    let gr = g.row(r);
                    let dot: f64 = p.iter().zip(gr).map(|(pv, gv)| pv * gv).sum();
                    for (out, (pv, gv)) in da.row_mut(r).iter_mut().zip(p.iter().zip(gr)) {
                        *out = pv * (gv - dot);
                    }
                }
                accum(&mut slots[a.0], da);
            }),
        )
    }

    /// Log-softmax over each row.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(&self.values[a.0]);
        let cached = value.clone();
        self.push(
            value,
            Box::new(move |_ctx, g, slots| {
                let mut da = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let lp = cached.row(r);
                    let gr = g.row(r);
                    let gsum: f64 = gr.iter().sum();
                    for (out, (lpv, gv)) in da.row_mut(r).iter_mut().zip(lp.iter().zip(gr)) {
                        *out = gv - lpv.exp() * gsum;
                    }
                }
                accum(&mut slots[a.0], da);
            }),
        )
    }

    /// Layer norm over each row with learned gain and bias (both `(1, n)`).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let av = &self.values[a.0];
        let gv = &self.values[gain.0];
        let bv = &self.values[bias.0];
        assert_eq!(gv.shape(), (1, av.cols()));
        assert_eq!(bv.shape(), (1, av.cols()));
        let n = av.cols();
        let mut value = Tensor::zeros(av.rows(), n);
        let mut xhat = Tensor::zeros(av.rows(), n);
        let mut inv_std = vec![0.0; av.rows()];
        for r in 0..av.rows() {
            let row = av.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for c in 0..n {
                let xh = (row[c] - mean) * istd;
                xhat.set(r, c, xh);
                value.set(r, c, xh * gv.at(0, c) + bv.at(0, c));
            }
        }
        self.push(
            value,
            Box::new(move |ctx, g, slots| {
                let gainv = ctx.val(gain);
                let n = g.cols();
                let nf = n as f64;
                let mut da = Tensor::zeros(g.rows(), n);
                let mut dgain = Tensor::zeros(1, n);
                let mut dbias = Tensor::zeros(1, n);
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    let xh = xhat.row(r);
                    for c in 0..n {
                        dgain.data_mut()[c] += gr[c] * xh[c];
                        dbias.data_mut()[c] += gr[c];
                    }
                    // dxhat = g * gain; dx = istd * (dxhat - mean(dxhat)
                    //          - xhat * mean(dxhat * xhat))
                    let dxhat: Vec<f64> =
                        (0..n).map(|c| gr[c] * gainv.at(0, c)).collect();
                    let m1 = dxhat.iter().sum::<f64>() / nf;
                    let m2 = dxhat.iter().zip(xh).map(|(d, x)| d * x).sum::<f64>() / nf;
                    let istd = inv_std[r];
                    for c in 0..n {
                        da.set(r, c, istd * (dxhat[c] - m1 - xh[c] * m2));
                    }
                }
                accum(&mut slots[a.0], da);
                accum(&mut slots[gain.0], dgain);
                accum(&mut slots[bias.0], dbias);
            }),
        )
    }

    /// Looks up `indices` in an embedding-style table: row `i` of the output
    /// is row `indices[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let tv = &self.values[table.0];
        let (t_rows, n) = tv.shape();
        let mut value = Tensor::zeros(indices.len(), n);
        for (i, &ix) in indices.iter().enumerate() {
            assert!(ix < t_rows, "gather index {ix} out of {t_rows}");
            value.row_mut(i).copy_from_slice(tv.row(ix));
        }
        let idx: Vec<usize> = indices.to_vec();
        self.push(
            value,
            Box::new(move |ctx, g, slots| {
                let tv = ctx.val(table);
                let mut dt = Tensor::zeros(tv.rows(), tv.cols());
                for (i, &ix) in idx.iter().enumerate() {
                    let dst = dt.row_mut(ix);
                    for (d, gv) in dst.iter_mut().zip(g.row(i)) {
                        *d += gv;
                    }
                }
                accum(&mut slots[table.0], dt);
            }),
        )
    }

    /// Picks one scalar per selected row: output `(picks.len(), 1)` with
    /// entry `i` equal to `a[picks[i].0, picks[i].1]`.
    pub fn pick(&mut self, a: Var, picks: &[(usize, usize)]) -> Var {
        let av = &self.values[a.0];
        let data: Vec<f64> = picks.iter().map(|&(r, c)| av.at(r, c)).collect();
        let value = Tensor::from_vec(picks.len(), 1, data).unwrap();
        let picks: Vec<(usize, usize)> = picks.to_vec();
        self.push(
            value,
            Box::new(move |ctx, g, slots| {
                let av = ctx.val(a);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for (i, &(r, c)) in picks.iter().enumerate() {
                    da.data_mut()[r * av.cols() + c] += g.at(i, 0);
                }
                accum(&mut slots[a.0], da);
            }),
        )
    }

    /// Sums contiguous segments of a column vector: segment `s` covers rows
    /// `bounds[s]..bounds[s+1]`. Output is `(bounds.len() - 1, 1)`.
    pub fn segment_sum(&mut self, a: Var, bounds: &[usize]) -> Var {
        let av = &self.values[a.0];
        assert_eq!(av.cols(), 1, "segment_sum expects a column");
        assert_eq!(*bounds.last().unwrap(), av.rows());
        let mut data = Vec::with_capacity(bounds.len() - 1);
        for w in bounds.windows(2) {
            data.push(av.data()[w[0]..w[1]].iter().sum());
        }
        let value = Tensor::from_vec(bounds.len() - 1, 1, data).unwrap();
        let bounds: Vec<usize> = bounds.to_vec();
        self.push(
            value,
            Box::new(move |ctx, g, slots| {
                let av = ctx.val(a);
                let mut da = Tensor::zeros(av.rows(), 1);
                for (s, w) in bounds.windows(2).enumerate() {
                    let gv = g.at(s, 0);
                    for r in w[0]..w[1] {
                        da.data_mut()[r] = gv;
                    }
                }
                accum(&mut slots[a.0], da);
            }),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.values[a.0].data().iter().sum();
        self.push(
            Tensor::scalar(total),
            Box::new(move |ctx, g, slots| {
                let av = ctx.val(a);
                let gv = g.item();
                accum(&mut slots[a.0], Tensor::zeros(av.rows(), av.cols()).map(|_| gv));
            }),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Weighted dot product of a column vector with fixed weights.
    pub fn weighted_sum(&mut self, a: Var, weights: &[f64]) -> Var {
        let av = &self.values[a.0];
        assert_eq!(av.cols(), 1);
        assert_eq!(av.rows(), weights.len());
        let total: f64 = av.data().iter().zip(weights).map(|(x, w)| x * w).sum();
        let weights: Vec<f64> = weights.to_vec();
        self.push(
            Tensor::scalar(total),
            Box::new(move |_ctx, g, slots| {
                let gv = g.item();
                let data: Vec<f64> = weights.iter().map(|w| w * gv).collect();
                let n = data.len();
                accum(&mut slots[a.0], Tensor::from_vec(n, 1, data).unwrap());
            }),
        )
    }

    /// Fused causal multi-head self-attention over a padded batch.
    ///
    /// `q`, `k`, `v` are `(batch * max_len, heads * head_dim)`; sequence `b`
    /// occupies rows `b*max_len .. b*max_len + lens[b]`. Position `i` attends
    /// to positions `0..=i` of its own sequence only, which is what makes
    /// prefix logits independent of any suffix.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        lens: &[usize],
        max_len: usize,
        heads: usize,
    ) -> Var {
        let qv = &self.values[q.0];
        let kv = &self.values[k.0];
        let vv = &self.values[v.0];
        assert_eq!(qv.shape(), kv.shape());
        assert_eq!(qv.shape(), vv.shape());
        let width = qv.cols();
        assert_eq!(width % heads, 0);
        let hd = width / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        assert_eq!(qv.rows(), lens.len() * max_len);

        // probs[b][h] is a lower-triangular len x len matrix stored row-major
        let mut out = Tensor::zeros(qv.rows(), width);
        let mut probs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(lens.len());
        for (b, &len) in lens.iter().enumerate() {
            let base = b * max_len;
            let mut seq_probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let col0 = h * hd;
                let mut p = vec![0.0; len * len];
                for i in 0..len {
                    let qi = &qv.row(base + i)[col0..col0 + hd];
                    let row = &mut p[i * len..i * len + len];
                    let mut max = f64::NEG_INFINITY;
                    for (j, slot) in row.iter_mut().enumerate().take(i + 1) {
                        let kj = &kv.row(base + j)[col0..col0 + hd];
                        let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        *slot = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut z = 0.0;
                    for slot in row.iter_mut().take(i + 1) {
                        *slot = (*slot - max).exp();
                        z += *slot;
                    }
                    for slot in row.iter_mut().take(i + 1) {
                        *slot /= z;
                    }
                    let out_row = &mut out.row_mut(base + i)[col0..col0 + hd];
                    for (j, &pij) in p[i * len..i * len + i + 1].iter().enumerate() {
                        let vj = &vv.row(base + j)[col0..col0 + hd];
                        for (o, value) in out_row.iter_mut().zip(vj) {
                            *o += pij * value;
                        }
                    }
                }
                seq_probs.push(p);
            }
            probs.push(seq_probs);
        }

        let lens: Vec<usize> = lens.to_vec();
        self.push(
            out,
            Box::new(move |ctx, g, slots| {
                let qv = ctx.val(q);
                let kv = ctx.val(k);
                let vv = ctx.val(v);
                let mut dq = Tensor::zeros(qv.rows(), qv.cols());
                let mut dk = Tensor::zeros(qv.rows(), qv.cols());
                let mut dv = Tensor::zeros(qv.rows(), qv.cols());
                for (b, &len) in lens.iter().enumerate() {
                    let base = b * max_len;
                    for h in 0..heads {
                        let col0 = h * hd;
                        let p = &probs[b][h];
                        for i in 0..len {
                            let gi = &g.row(base + i)[col0..col0 + hd];
                            let pi = &p[i * len..i * len + i + 1];
                            // dV[j] += P[i,j] * dO[i]; dP[i,j] = dO[i] . V[j]
                            let mut dp = vec![0.0; i + 1];
                            for (j, &pij) in pi.iter().enumerate() {
                                let vj = &vv.row(base + j)[col0..col0 + hd];
                                let dvj = &mut dv.row_mut(base + j)[col0..col0 + hd];
                                let mut dot = 0.0;
                                for ((dvx, gx), vx) in dvj.iter_mut().zip(gi).zip(vj) {
                                    *dvx += pij * gx;
                                    dot += gx * vx;
                                }
                                dp[j] = dot;
                            }
                            // softmax backward: dS = P .* (dP - sum_j dP P)
                            let dot: f64 = dp.iter().zip(pi).map(|(d, pv)| d * pv).sum();
                            for (j, &pij) in pi.iter().enumerate() {
                                let ds = pij * (dp[j] - dot) * scale;
                                let kj = &kv.row(base + j)[col0..col0 + hd];
                                let qi = &qv.row(base + i)[col0..col0 + hd];
                                let dqi = &mut dq.row_mut(base + i)[col0..col0 + hd];
                                for (d, kx) in dqi.iter_mut().zip(kj) {
                                    *d += ds * kx;
                                }
                                let dkj = &mut dk.row_mut(base + j)[col0..col0 + hd];
                                for (d, qx) in dkj.iter_mut().zip(qi) {
                                    *d += ds * qx;
                                }
                            }
                        }
                    }
                }
                accum(&mut slots[q.0], dq);
                accum(&mut slots[k.0], dk);
                accum(&mut slots[v.0], dv);
            }),
        )
    }
}

pub fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn softmax_rows(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            z += *x;
        }
        for x in row.iter_mut() {
            *x /= z;
        }
    }
    out
}

pub fn log_softmax_rows(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let lz = max + z.ln();
        for x in row.iter_mut() {
            *x -= lz;
        }
    }
    out
}
