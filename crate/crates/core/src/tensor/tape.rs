//! Reverse-mode autodiff over a Wengert list.
//!
//! The tape is define-by-run: every op computes its forward value
//! immediately, verifies the result is finite (a hard error otherwise) and
//! records what it needs for backward. Buffers live in a flat arena indexed
//! by [`BufId`]; parameters enter through [`Tape::param`] with an external
//! slot number, and their gradients are read back with
//! [`Tape::param_grads`] after [`Tape::backward`].

use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::{sum_f64, Real};
use std::sync::Arc;

/// Handle to a tape buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufId(usize);

pub const SCALAR_SHAPE: [usize; 4] = [1, 1, 1, 1];

struct Buf<T> {
    data: Vec<T>,
    shape: [usize; 4],
    needs_grad: bool,
}

enum Op<T> {
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        out: usize,
        dilation: usize,
        relu: bool,
    },
    MaxPool2 {
        x: usize,
        out: usize,
        argmax: Vec<u32>,
    },
    Upsample2 {
        x: usize,
        out: usize,
    },
    Relu {
        x: usize,
        out: usize,
    },
    Add {
        a: usize,
        b: usize,
        out: usize,
    },
    ConcatC {
        a: usize,
        b: usize,
        out: usize,
    },
    Fc {
        x: usize,
        w: usize,
        b: usize,
        out: usize,
    },
    MatmulConst {
        x: usize,
        mat: Arc<Vec<T>>,
        n: usize,
        out: usize,
    },
    Reshape {
        x: usize,
        out: usize,
    },
    FirstDiff {
        x: usize,
        out: usize,
    },
    /// `out = scale * sum((a-b)^2)`, accumulated in f64.
    SqLoss {
        a: usize,
        b: usize,
        scale: T,
        out: usize,
    },
    /// `out = scale * sum(|a-b|)`, accumulated in f64.
    AbsLoss {
        a: usize,
        b: usize,
        scale: T,
        out: usize,
    },
    WeightedSum {
        terms: Vec<(usize, T)>,
        out: usize,
    },
}

pub struct Tape<T> {
    bufs: Vec<Buf<T>>,
    ops: Vec<Op<T>>,
    params: Vec<(usize, usize)>, // (external slot, buf index)
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            bufs: Vec::new(),
            ops: Vec::new(),
            params: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Constant input (no gradient flows into it).
    pub fn leaf(&mut self, data: Vec<T>, shape: [usize; 4]) -> Result<BufId> {
        self.push_buf(data, shape, false, "leaf")
    }

    /// Trainable parameter buffer tagged with an external slot number.
    pub fn param(&mut self, slot: usize, data: &[T], shape: [usize; 4]) -> Result<BufId> {
        let id = self.push_buf(data.to_vec(), shape, true, "param")?;
        self.params.push((slot, id.0));
        Ok(id)
    }

    pub fn shape(&self, id: BufId) -> [usize; 4] {
        self.bufs[id.0].shape
    }

    pub fn value(&self, id: BufId) -> &[T] {
        &self.bufs[id.0].data
    }

    /// Value of a scalar (shape `[1,1,1,1]`) buffer.
    pub fn scalar(&self, id: BufId) -> T {
        debug_assert_eq!(self.bufs[id.0].shape, SCALAR_SHAPE);
        self.bufs[id.0].data[0]
    }

    /// Gradient of a buffer after [`Tape::backward`], if one was produced.
    pub fn grad(&self, id: BufId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// `(slot, grad)` pairs for every parameter buffer. Parameters the loss
    /// does not reach yield all-zero gradients.
    pub fn param_grads(&self) -> Vec<(usize, Vec<T>)> {
        self.params
            .iter()
            .map(|&(slot, buf)| {
                let g = match self.grads.get(buf).and_then(|g| g.clone()) {
                    Some(g) => g,
                    None => vec![T::zero(); self.bufs[buf].data.len()],
                };
                (slot, g)
            })
            .collect()
    }

    fn push_buf(
        &mut self,
        data: Vec<T>,
        shape: [usize; 4],
        needs_grad: bool,
        what: &str,
    ) -> Result<BufId> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(Error::invalid(format!(
                "{what}: buffer length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        check_finite(&data, what)?;
        self.bufs.push(Buf {
            data,
            shape,
            needs_grad,
        });
        Ok(BufId(self.bufs.len() - 1))
    }

    fn out_buf(&mut self, data: Vec<T>, shape: [usize; 4], inputs: &[usize], what: &str) -> Result<usize> {
        check_finite(&data, what)?;
        let needs_grad = inputs.iter().any(|&i| self.bufs[i].needs_grad);
        self.bufs.push(Buf {
            data,
            shape,
            needs_grad,
        });
        Ok(self.bufs.len() - 1)
    }

    /// Dilated same-padding convolution with optional fused ReLU.
    /// `w` is `(Co,Ci,Kh,Kw)`, `b` has length `Co`.
    pub fn conv2d(
        &mut self,
        x: BufId,
        w: BufId,
        b: BufId,
        dilation: usize,
        relu: bool,
    ) -> Result<BufId> {
        let xs = self.bufs[x.0].shape;
        let ws = self.bufs[w.0].shape;
        let out_shape = [xs[0], ws[0], xs[2], xs[3]];
        let mut out = vec![T::zero(); out_shape.iter().product()];
        ops::conv2d_fwd(
            &self.bufs[x.0].data,
            xs,
            &self.bufs[w.0].data,
            ws,
            &self.bufs[b.0].data,
            dilation,
            relu,
            &mut out,
        )?;
        let o = self.out_buf(out, out_shape, &[x.0, w.0, b.0], "conv2d")?;
        self.ops.push(Op::Conv2d {
            x: x.0,
            w: w.0,
            b: b.0,
            out: o,
            dilation,
            relu,
        });
        Ok(BufId(o))
    }

    /// Strict 2x2/stride-2 max pooling; errors on odd spatial extents.
    pub fn maxpool2(&mut self, x: BufId) -> Result<BufId> {
        self.pool_impl(x, false)
    }

    /// Ceil-mode 2x2/stride-2 max pooling; odd trailing rows/columns form
    /// partial windows (used where a 15x15 map must reduce to 8x8).
    pub fn maxpool2_ceil(&mut self, x: BufId) -> Result<BufId> {
        self.pool_impl(x, true)
    }

    fn pool_impl(&mut self, x: BufId, ceil: bool) -> Result<BufId> {
        let xs = self.bufs[x.0].shape;
        let mut out = Vec::new();
        let mut argmax = Vec::new();
        let os = ops::maxpool2_fwd(&self.bufs[x.0].data, xs, ceil, &mut out, &mut argmax)?;
        let o = self.out_buf(out, os, &[x.0], "pool2")?;
        self.ops.push(Op::MaxPool2 {
            x: x.0,
            out: o,
            argmax,
        });
        Ok(BufId(o))
    }

    pub fn upsample2(&mut self, x: BufId) -> Result<BufId> {
        let xs = self.bufs[x.0].shape;
        let os = [xs[0], xs[1], xs[2] * 2, xs[3] * 2];
        let mut out = vec![T::zero(); os.iter().product()];
        ops::upsample2_fwd(&self.bufs[x.0].data, xs, &mut out);
        let o = self.out_buf(out, os, &[x.0], "upsample2")?;
        self.ops.push(Op::Upsample2 { x: x.0, out: o });
        Ok(BufId(o))
    }

    pub fn relu(&mut self, x: BufId) -> Result<BufId> {
        let xs = self.bufs[x.0].shape;
        let out: Vec<T> = self.bufs[x.0]
            .data
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let o = self.out_buf(out, xs, &[x.0], "relu")?;
        self.ops.push(Op::Relu { x: x.0, out: o });
        Ok(BufId(o))
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let sa = self.bufs[a.0].shape;
        if sa != self.bufs[b.0].shape {
            return Err(Error::invalid(format!(
                "add: shape mismatch {:?} vs {:?}",
                sa, self.bufs[b.0].shape
            )));
        }
        let out: Vec<T> = self.bufs[a.0]
            .data
            .iter()
            .zip(self.bufs[b.0].data.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let o = self.out_buf(out, sa, &[a.0, b.0], "add")?;
        self.ops.push(Op::Add { a: a.0, b: b.0, out: o });
        Ok(BufId(o))
    }

    /// Concatenation along the channel axis.
    pub fn concat_c(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let sa = self.bufs[a.0].shape;
        let sb = self.bufs[b.0].shape;
        if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(Error::invalid(format!(
                "concat_c: incompatible shapes {sa:?} vs {sb:?}"
            )));
        }
        let os = [sa[0], sa[1] + sb[1], sa[2], sa[3]];
        let ch = sa[2] * sa[3];
        let mut out = vec![T::zero(); os.iter().product()];
        for bi in 0..sa[0] {
            let oa = bi * os[1] * ch;
            out[oa..oa + sa[1] * ch]
                .copy_from_slice(&self.bufs[a.0].data[bi * sa[1] * ch..(bi + 1) * sa[1] * ch]);
            out[oa + sa[1] * ch..oa + os[1] * ch]
                .copy_from_slice(&self.bufs[b.0].data[bi * sb[1] * ch..(bi + 1) * sb[1] * ch]);
        }
        let o = self.out_buf(out, os, &[a.0, b.0], "concat_c")?;
        self.ops.push(Op::ConcatC { a: a.0, b: b.0, out: o });
        Ok(BufId(o))
    }

    /// Fully-connected layer on `(B,N)` buffers; `w` is `(M,N)`.
    pub fn fc(&mut self, x: BufId, w: BufId, b: BufId) -> Result<BufId> {
        let xs = self.bufs[x.0].shape;
        let ws = self.bufs[w.0].shape;
        let (bn, n) = (xs[0], xs[1] * xs[2] * xs[3]);
        let (m, wn) = (ws[0], ws[1]);
        if wn != n {
            return Err(Error::invalid(format!(
                "fc: input width {n} does not match weight columns {wn}"
            )));
        }
        let mut out = vec![T::zero(); bn * m];
        ops::fc_fwd(
            &self.bufs[x.0].data,
            bn,
            n,
            &self.bufs[w.0].data,
            m,
            &self.bufs[b.0].data,
            &mut out,
        );
        let o = self.out_buf(out, [bn, m, 1, 1], &[x.0, w.0, b.0], "fc")?;
        self.ops.push(Op::Fc {
            x: x.0,
            w: w.0,
            b: b.0,
            out: o,
        });
        Ok(BufId(o))
    }

    /// `(B,K) x (K,N)` against a constant matrix (no gradient to the matrix).
    pub fn matmul_const(&mut self, x: BufId, mat: Arc<Vec<T>>, n: usize) -> Result<BufId> {
        let xs = self.bufs[x.0].shape;
        let (bn, k) = (xs[0], xs[1] * xs[2] * xs[3]);
        if mat.len() != k * n {
            return Err(Error::invalid(format!(
                "matmul_const: matrix length {} is not {k}x{n}",
                mat.len()
            )));
        }
        let mut out = vec![T::zero(); bn * n];
        ops::matmul_const_fwd(&self.bufs[x.0].data, bn, k, &mat, n, &mut out);
        let o = self.out_buf(out, [bn, n, 1, 1], &[x.0], "matmul_const")?;
        self.ops.push(Op::MatmulConst {
            x: x.0,
            mat,
            n,
            out: o,
        });
        Ok(BufId(o))
    }

    /// Copies a buffer under a new shape with the same element count.
    pub fn reshape(&mut self, x: BufId, shape: [usize; 4]) -> Result<BufId> {
        let want: usize = shape.iter().product();
        if want != self.bufs[x.0].data.len() {
            return Err(Error::invalid(format!(
                "reshape: {} elements cannot view as {shape:?}",
                self.bufs[x.0].data.len()
            )));
        }
        let out = self.bufs[x.0].data.clone();
        let o = self.out_buf(out, shape, &[x.0], "reshape")?;
        self.ops.push(Op::Reshape { x: x.0, out: o });
        Ok(BufId(o))
    }

    /// First difference along the second axis of a `(B,N)` buffer:
    /// `out[b,i] = x[b,i+1] - x[b,i]`.
    pub fn first_diff(&mut self, x: BufId) -> Result<BufId> {
        let xs = self.bufs[x.0].shape;
        let (bn, n) = (xs[0], xs[1]);
        if xs[2] != 1 || xs[3] != 1 || n < 2 {
            return Err(Error::invalid(format!(
                "first_diff: need a (B,N>=2) buffer, got {xs:?}"
            )));
        }
        let xd = &self.bufs[x.0].data;
        let mut out = vec![T::zero(); bn * (n - 1)];
        for b in 0..bn {
            for i in 0..n - 1 {
                out[b * (n - 1) + i] = xd[b * n + i + 1] - xd[b * n + i];
            }
        }
        let o = self.out_buf(out, [bn, n - 1, 1, 1], &[x.0], "first_diff")?;
        self.ops.push(Op::FirstDiff { x: x.0, out: o });
        Ok(BufId(o))
    }

    /// Scalar `scale * sum((a-b)^2)`; pass `scale = 1/len` for a mean.
    pub fn sq_loss(&mut self, a: BufId, b: BufId, scale: f64) -> Result<BufId> {
        self.loss_impl(a, b, scale, true)
    }

    /// Scalar `scale * sum(|a-b|)`.
    pub fn abs_loss(&mut self, a: BufId, b: BufId, scale: f64) -> Result<BufId> {
        self.loss_impl(a, b, scale, false)
    }

    fn loss_impl(&mut self, a: BufId, b: BufId, scale: f64, sq: bool) -> Result<BufId> {
        if self.bufs[a.0].data.len() != self.bufs[b.0].data.len() {
            return Err(Error::invalid(format!(
                "loss: length mismatch {} vs {}",
                self.bufs[a.0].data.len(),
                self.bufs[b.0].data.len()
            )));
        }
        let mut acc = 0.0f64;
        for (&x, &y) in self.bufs[a.0].data.iter().zip(self.bufs[b.0].data.iter()) {
            let d = x.as_f64() - y.as_f64();
            acc += if sq { d * d } else { d.abs() };
        }
        let out = vec![T::from_f64(scale * acc)];
        let scale_t = T::from_f64(scale);
        let o = self.out_buf(out, SCALAR_SHAPE, &[a.0, b.0], if sq { "sq_loss" } else { "abs_loss" })?;
        let op = if sq {
            Op::SqLoss {
                a: a.0,
                b: b.0,
                scale: scale_t,
                out: o,
            }
        } else {
            Op::AbsLoss {
                a: a.0,
                b: b.0,
                scale: scale_t,
                out: o,
            }
        };
        self.ops.push(op);
        Ok(BufId(o))
    }

    /// Scalar linear combination of scalar buffers.
    pub fn weighted_sum(&mut self, terms: &[(BufId, f64)]) -> Result<BufId> {
        let mut acc = 0.0f64;
        for &(id, wv) in terms {
            if self.bufs[id.0].shape != SCALAR_SHAPE {
                return Err(Error::invalid("weighted_sum: all terms must be scalars"));
            }
            acc += wv * self.bufs[id.0].data[0].as_f64();
        }
        let inputs: Vec<usize> = terms.iter().map(|&(id, _)| id.0).collect();
        let o = self.out_buf(vec![T::from_f64(acc)], SCALAR_SHAPE, &inputs, "weighted_sum")?;
        self.ops.push(Op::WeightedSum {
            terms: terms.iter().map(|&(id, wv)| (id.0, T::from_f64(wv))).collect(),
            out: o,
        });
        Ok(BufId(o))
    }

    /// Reverse sweep from a scalar root. Gradients accumulate across fan-out
    /// and can be read with [`Tape::grad`] / [`Tape::param_grads`].
    pub fn backward(&mut self, root: BufId) -> Result<()> {
        if self.bufs[root.0].shape != SCALAR_SHAPE {
            return Err(Error::invalid("backward: root must be a scalar buffer"));
        }
        self.grads = (0..self.bufs.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![T::one()]);

        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            self.step_backward(op);
        }
        self.ops = ops;
        Ok(())
    }

    fn step_backward(&mut self, op: &Op<T>) {
        // Take the output grad: by reverse order every consumer of `out` has
        // already run, so nothing reads it after the producing op.
        macro_rules! dy {
            ($out:expr) => {
                match self.grads[$out].take() {
                    Some(g) => g,
                    None => return,
                }
            };
        }
        fn grab<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, len: usize) -> Vec<T> {
            grads[id].take().unwrap_or_else(|| vec![T::zero(); len])
        }

        match op {
            Op::Conv2d {
                x,
                w,
                b,
                out,
                dilation,
                relu,
            } => {
                let dy = dy!(*out);
                let xs = self.bufs[*x].shape;
                let ws = self.bufs[*w].shape;
                let mut dxv = if self.bufs[*x].needs_grad {
                    Some(grab(&mut self.grads, *x, self.bufs[*x].data.len()))
                } else {
                    None
                };
                let mut dwv = grab(&mut self.grads, *w, self.bufs[*w].data.len());
                let mut dbv = grab(&mut self.grads, *b, self.bufs[*b].data.len());
                ops::conv2d_bwd(
                    &self.bufs[*x].data,
                    xs,
                    &self.bufs[*w].data,
                    ws,
                    *dilation,
                    *relu,
                    &self.bufs[*out].data,
                    &dy,
                    dxv.as_deref_mut(),
                    &mut dwv,
                    &mut dbv,
                );
                if let Some(dxv) = dxv {
                    self.grads[*x] = Some(dxv);
                }
                self.grads[*w] = Some(dwv);
                self.grads[*b] = Some(dbv);
            }
            Op::MaxPool2 { x, out, argmax } => {
                let dy = dy!(*out);
                let mut dx = grab(&mut self.grads, *x, self.bufs[*x].data.len());
                ops::maxpool2_bwd(argmax, &dy, &mut dx);
                self.grads[*x] = Some(dx);
            }
            Op::Upsample2 { x, out } => {
                let dy = dy!(*out);
                let mut dx = grab(&mut self.grads, *x, self.bufs[*x].data.len());
                ops::upsample2_bwd(self.bufs[*x].shape, &dy, &mut dx);
                self.grads[*x] = Some(dx);
            }
            Op::Relu { x, out } => {
                let dy = dy!(*out);
                let mut dx = grab(&mut self.grads, *x, self.bufs[*x].data.len());
                for i in 0..dx.len() {
                    if self.bufs[*out].data[i] > T::zero() {
                        dx[i] += dy[i];
                    }
                }
                self.grads[*x] = Some(dx);
            }
            Op::Add { a, b, out } => {
                let dy = dy!(*out);
                for &id in [a, b].iter() {
                    let mut d = grab(&mut self.grads, *id, self.bufs[*id].data.len());
                    for (g, &v) in d.iter_mut().zip(dy.iter()) {
                        *g += v;
                    }
                    self.grads[*id] = Some(d);
                }
            }
            Op::ConcatC { a, b, out } => {
                let dy = dy!(*out);
                let sa = self.bufs[*a].shape;
                let sb = self.bufs[*b].shape;
                let ch = sa[2] * sa[3];
                let oc = sa[1] + sb[1];
                let mut da = grab(&mut self.grads, *a, self.bufs[*a].data.len());
                let mut db = grab(&mut self.grads, *b, self.bufs[*b].data.len());
                for bi in 0..sa[0] {
                    let base = bi * oc * ch;
                    for (g, &v) in da[bi * sa[1] * ch..(bi + 1) * sa[1] * ch]
                        .iter_mut()
                        .zip(&dy[base..base + sa[1] * ch])
                    {
                        *g += v;
                    }
                    for (g, &v) in db[bi * sb[1] * ch..(bi + 1) * sb[1] * ch]
                        .iter_mut()
                        .zip(&dy[base + sa[1] * ch..base + oc * ch])
                    {
                        *g += v;
                    }
                }
                self.grads[*a] = Some(da);
                self.grads[*b] = Some(db);
            }
            Op::Fc { x, w, b, out } => {
                let dy = dy!(*out);
                let xs = self.bufs[*x].shape;
                let (bn, n) = (xs[0], xs[1] * xs[2] * xs[3]);
                let m = self.bufs[*w].shape[0];
                let mut dxv = if self.bufs[*x].needs_grad {
                    Some(grab(&mut self.grads, *x, self.bufs[*x].data.len()))
                } else {
                    None
                };
                let mut dwv = grab(&mut self.grads, *w, self.bufs[*w].data.len());
                let mut dbv = grab(&mut self.grads, *b, self.bufs[*b].data.len());
                ops::fc_bwd(
                    &self.bufs[*x].data,
                    bn,
                    n,
                    &self.bufs[*w].data,
                    m,
                    &dy,
                    dxv.as_deref_mut(),
                    &mut dwv,
                    &mut dbv,
                );
                if let Some(dxv) = dxv {
                    self.grads[*x] = Some(dxv);
                }
                self.grads[*w] = Some(dwv);
                self.grads[*b] = Some(dbv);
            }
            Op::MatmulConst { x, mat, n, out } => {
                let dy = dy!(*out);
                let xs = self.bufs[*x].shape;
                let (bn, k) = (xs[0], xs[1] * xs[2] * xs[3]);
                let mut dx = grab(&mut self.grads, *x, self.bufs[*x].data.len());
                ops::matmul_const_bwd(&dy, bn, k, mat, *n, &mut dx);
                self.grads[*x] = Some(dx);
            }
            Op::Reshape { x, out } => {
                let dy = dy!(*out);
                let mut dx = grab(&mut self.grads, *x, self.bufs[*x].data.len());
                for (g, &v) in dx.iter_mut().zip(dy.iter()) {
                    *g += v;
                }
                self.grads[*x] = Some(dx);
            }
            Op::FirstDiff { x, out } => {
                let dy = dy!(*out);
                let xs = self.bufs[*x].shape;
                let (bn, n) = (xs[0], xs[1]);
                let mut dx = grab(&mut self.grads, *x, self.bufs[*x].data.len());
                for b in 0..bn {
                    for i in 0..n - 1 {
                        let g = dy[b * (n - 1) + i];
                        dx[b * n + i + 1] += g;
                        dx[b * n + i] -= g;
                    }
                }
                self.grads[*x] = Some(dx);
            }
            Op::SqLoss { a, b, scale, out } => {
                let dy = dy!(*out)[0];
                let coef = dy * *scale * T::from_f64(2.0);
                self.loss_backdrop(*a, *b, |d| coef * d);
            }
            Op::AbsLoss { a, b, scale, out } => {
                let dy = dy!(*out)[0];
                let coef = dy * *scale;
                self.loss_backdrop(*a, *b, move |d| {
                    if d > T::zero() {
                        coef
                    } else if d < T::zero() {
                        -coef
                    } else {
                        T::zero()
                    }
                });
            }
            Op::WeightedSum { terms, out } => {
                let dy = dy!(*out)[0];
                for &(id, wv) in terms {
                    let mut d = grab(&mut self.grads, id, 1);
                    d[0] += dy * wv;
                    self.grads[id] = Some(d);
                }
            }
        }
    }

    /// Shared backward for the two elementwise losses: `da[i] += f(a-b)`,
    /// `db[i] -= f(a-b)`.
    fn loss_backdrop(&mut self, a: usize, b: usize, f: impl Fn(T) -> T) {
        let len = self.bufs[a].data.len();
        if self.bufs[a].needs_grad {
            let mut da = self.grads[a].take().unwrap_or_else(|| vec![T::zero(); len]);
            for i in 0..len {
                da[i] += f(self.bufs[a].data[i] - self.bufs[b].data[i]);
            }
            self.grads[a] = Some(da);
        }
        if self.bufs[b].needs_grad {
            let mut db = self.grads[b].take().unwrap_or_else(|| vec![T::zero(); len]);
            for i in 0..len {
                db[i] -= f(self.bufs[a].data[i] - self.bufs[b].data[i]);
            }
            self.grads[b] = Some(db);
        }
    }

    /// Total scalar sum over a buffer as an f64 (diagnostics).
    pub fn value_sum(&self, id: BufId) -> f64 {
        sum_f64(&self.bufs[id.0].data)
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Real>(data: &[T], what: &str) -> Result<()> {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::numeric(format!(
                "{what}: non-finite value {v} at flat index {i}"
            )));
        }
    }
    Ok(())
}
