//! Reverse-mode autodiff tape over [`Tensor`].
//!
//! Each training iteration builds a fresh graph: leaves hold copies of the
//! parameter tensors, interior nodes hold forward values, and `backward`
//! walks the tape in reverse producing a gradient per node. One generic
//! implementation serves f32 (training) and f64 (finite-difference checks).

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

type BackFn<T> = Box<dyn Fn(&Graph<T>, NodeId, &Tensor<T>, &mut [Option<Tensor<T>>])>;

struct Node<T> {
    value: Tensor<T>,
    backward: Option<BackFn<T>>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one `backward` call, indexed by `NodeId`.
/// Interior-node gradients are dropped as the walk passes them; leaf
/// gradients stay available.
pub struct GradMap<T>(Vec<Option<Tensor<T>>>);

impl<T: Scalar> GradMap<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.0.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn all_finite(&self) -> bool {
        self.0
            .iter()
            .flatten()
            .all(|g| g.all_finite())
    }
}

fn accum<T: Scalar + std::ops::AddAssign>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(t) => t.accumulate(&g),
        None => *slot = Some(g),
    }
}

impl<T: Scalar + std::ops::AddAssign> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, backward: Option<BackFn<T>>) -> NodeId {
        self.nodes.push(Node {
            value,
            backward,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, true, None)
    }

    /// Non-differentiable leaf (an input or a detached value).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, false, None)
    }

    /// Copy of an existing node's value with the gradient path cut.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    /// Reverse sweep from a scalar node. Returns one gradient tensor per
    /// reachable differentiable node; interior gradients are freed as the
    /// sweep passes so only leaf gradients remain.
    pub fn backward(&self, loss: NodeId) -> GradMap<T> {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward() needs a scalar loss node"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.nodes[loss.0].value.shape(), T::ONE));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            if grads[i].is_none() {
                continue;
            }
            if let Some(back) = &self.nodes[i].backward {
                let g_out = grads[i].take().expect("grad present");
                back(self, NodeId(i), &g_out, &mut grads);
            }
            // leaves keep their gradient
        }
        GradMap(grads)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut out = va.clone();
        for (o, x) in out.data_mut().iter_mut().zip(vb.data().iter()) {
            *o += *x;
        }
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push(
            out,
            na || nb,
            Some(Box::new(move |_g, _id, go, grads| {
                if na {
                    accum(&mut grads[a.0], go.clone());
                }
                if nb {
                    accum(&mut grads[b.0], go.clone());
                }
            })),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(&x, &y)| T::from_f64(x.to_f64() - y.to_f64()))
            .collect();
        let out = Tensor::from_vec(va.shape(), data);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push(
            out,
            na || nb,
            Some(Box::new(move |_g, _id, go, grads| {
                if na {
                    accum(&mut grads[a.0], go.clone());
                }
                if nb {
                    accum(&mut grads[b.0], go.map(|v| T::from_f64(-v.to_f64())));
                }
            })),
        )
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.nodes[x.0].value.map(|v| T::from_f64(v.to_f64() * c));
        let nx = self.needs_grad(x);
        self.push(
            out,
            nx,
            Some(Box::new(move |_g, _id, go, grads| {
                if nx {
                    accum(&mut grads[x.0], go.map(|v| T::from_f64(v.to_f64() * c)));
                }
            })),
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.leaky_relu(x, 0.0)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let out = self.nodes[x.0].value.map(|v| {
            if v.to_f64() > 0.0 {
                v
            } else {
                T::from_f64(v.to_f64() * slope)
            }
        });
        let nx = self.needs_grad(x);
        self.push(
            out,
            nx,
            Some(Box::new(move |g, _id, go, grads| {
                if !nx {
                    return;
                }
                let xv = g.value(x);
                let data = go
                    .data()
                    .iter()
                    .zip(xv.data().iter())
                    .map(|(&gv, &v)| {
                        if v.to_f64() > 0.0 {
                            gv
                        } else {
                            T::from_f64(gv.to_f64() * slope)
                        }
                    })
                    .collect();
                accum(&mut grads[x.0], Tensor::from_vec(xv.shape(), data));
            })),
        )
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self
            .nodes[x.0]
            .value
            .map(|v| T::from_f64(1.0 / (1.0 + (-v.to_f64()).exp())));
        let nx = self.needs_grad(x);
        self.push(
            out,
            nx,
            Some(Box::new(move |g, id, go, grads| {
                if !nx {
                    return;
                }
                let y = g.value(id);
                let data = go
                    .data()
                    .iter()
                    .zip(y.data().iter())
                    .map(|(&gv, &yv)| {
                        let s = yv.to_f64();
                        T::from_f64(gv.to_f64() * s * (1.0 - s))
                    })
                    .collect();
                accum(&mut grads[x.0], Tensor::from_vec(y.shape(), data));
            })),
        )
    }

    /// Logistic sigmoid clamped to `[lo, 1 - lo]` so downstream logs stay
    /// finite. Gradient is zero in the clamped region.
    pub fn sigmoid_clamped(&mut self, x: NodeId, lo: f64) -> NodeId {
        let hi = 1.0 - lo;
        let out = self.nodes[x.0].value.map(|v| {
            let s = 1.0 / (1.0 + (-v.to_f64()).exp());
            T::from_f64(s.clamp(lo, hi))
        });
        let nx = self.needs_grad(x);
        self.push(
            out,
            nx,
            Some(Box::new(move |g, _id, go, grads| {
                if !nx {
                    return;
                }
                let xv = g.value(x);
                let data = go
                    .data()
                    .iter()
                    .zip(xv.data().iter())
                    .map(|(&gv, &v)| {
                        let s = 1.0 / (1.0 + (-v.to_f64()).exp());
                        if s <= lo || s >= hi {
                            T::ZERO
                        } else {
                            T::from_f64(gv.to_f64() * s * (1.0 - s))
                        }
                    })
                    .collect();
                accum(&mut grads[x.0], Tensor::from_vec(xv.shape(), data));
            })),
        )
    }

    // ---- shape ops ----

    /// Keep the first `count` samples of a rank-4 batch.
    pub fn narrow_batch(&mut self, x: NodeId, count: usize) -> NodeId {
        let v = &self.nodes[x.0].value;
        let (b, c, h, w) = v.dims4();
        assert!(count <= b, "narrow_batch: count {count} > batch {b}");
        let per = c * h * w;
        let out = Tensor::from_vec(&[count, c, h, w], v.data()[..count * per].to_vec());
        let nx = self.needs_grad(x);
        self.push(
            out,
            nx,
            Some(Box::new(move |_g, _id, go, grads| {
                if !nx {
                    return;
                }
                let mut dx = Tensor::zeros(&[b, c, h, w]);
                dx.data_mut()[..count * per].copy_from_slice(go.data());
                accum(&mut grads[x.0], dx);
            })),
        )
    }

    /// Samples `[start, start+len)` of a rank-4 batch.
    pub fn slice_batch(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = &self.nodes[x.0].value;
        let (b, c, h, w) = v.dims4();
        assert!(start + len <= b, "slice_batch: [{start}, {}) > batch {b}", start + len);
        let per = c * h * w;
        let out = Tensor::from_vec(
            &[len, c, h, w],
            v.data()[start * per..(start + len) * per].to_vec(),
        );
        let nx = self.needs_grad(x);
        self.push(
            out,
            nx,
            Some(Box::new(move |_g, _id, go, grads| {
                if !nx {
                    return;
                }
                let mut dx = Tensor::zeros(&[b, c, h, w]);
                dx.data_mut()[start * per..(start + len) * per].copy_from_slice(go.data());
                accum(&mut grads[x.0], dx);
            })),
        )
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = &self.nodes[x.0].value;
        let (b, n) = v.dims2();
        assert!(start + len <= n, "slice_cols out of range");
        let mut data = Vec::with_capacity(b * len);
        for i in 0..b {
            data.extend_from_slice(&v.data()[i * n + start..i * n + start + len]);
        }
        let out = Tensor::from_vec(&[b, len], data);
        let nx = self.needs_grad(x);
        self.push(
            out,
            nx,
            Some(Box::new(move |_g, _id, go, grads| {
                if !nx {
                    return;
                }
                let mut dx = Tensor::zeros(&[b, n]);
                for i in 0..b {
                    dx.data_mut()[i * n + start..i * n + start + len]
                        .copy_from_slice(&go.data()[i * len..(i + 1) * len]);
                }
                accum(&mut grads[x.0], dx);
            })),
        )
    }

    pub fn upsample_nearest2x(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let (b, c, h, w) = v.dims4();
        let (ho, wo) = (h * 2, w * 2);
        let mut out = Tensor::zeros(&[b, c, ho, wo]);
        {
            let src = v.data();
            let dst = out.data_mut();
            for bc in 0..b * c {
                let sbase = bc * h * w;
                let dbase = bc * ho * wo;
                for i in 0..h {
                    for j in 0..w {
                        let s = src[sbase + i * w + j];
                        let d0 = dbase + (2 * i) * wo + 2 * j;
                        dst[d0] = s;
                        dst[d0 + 1] = s;
                        dst[d0 + wo] = s;
                        dst[d0 + wo + 1] = s;
                    }
                }
            }
        }
        let nx = self.needs_grad(x);
        self.push(
            out,
            nx,
            Some(Box::new(move |_g, _id, go, grads| {
                if !nx {
                    return;
                }
                let mut dx = Tensor::zeros(&[b, c, h, w]);
                let src = go.data();
                let dst = dx.data_mut();
                for bc in 0..b * c {
                    let dbase = bc * h * w;
                    let sbase = bc * ho * wo;
                    for i in 0..h {
                        for j in 0..w {
                            let s0 = sbase + (2 * i) * wo + 2 * j;
                            let sum = src[s0].to_f64()
                                + src[s0 + 1].to_f64()
                                + src[s0 + wo].to_f64()
                                + src[s0 + wo + 1].to_f64();
                            dst[dbase + i * w + j] = T::from_f64(sum);
                        }
                    }
                }
                accum(&mut grads[x.0], dx);
            })),
        )
    }

    pub fn avg_pool2x2(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let (b, c, h, w) = v.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2x2 needs even dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[b, c, ho, wo]);
        {
            let src = v.data();
            let dst = out.data_mut();
            for bc in 0..b * c {
                let sbase = bc * h * w;
                let dbase = bc * ho * wo;
                for i in 0..ho {
                    for j in 0..wo {
                        let s0 = sbase + (2 * i) * w + 2 * j;
                        let sum = src[s0].to_f64()
                            + src[s0 + 1].to_f64()
                            + src[s0 + w].to_f64()
                            + src[s0 + w + 1].to_f64();
                        dst[dbase + i * wo + j] = T::from_f64(sum * 0.25);
                    }
                }
            }
        }
        let nx = self.needs_grad(x);
        self.push(
            out,
            nx,
            Some(Box::new(move |_g, _id, go, grads| {
                if !nx {
                    return;
                }
                let mut dx = Tensor::zeros(&[b, c, h, w]);
                let src = go.data();
                let dst = dx.data_mut();
                for bc in 0..b * c {
                    let dbase = bc * h * w;
                    let sbase = bc * ho * wo;
                    for i in 0..ho {
                        for j in 0..wo {
                            let gv = T::from_f64(src[sbase + i * wo + j].to_f64() * 0.25);
                            let d0 = dbase + (2 * i) * w + 2 * j;
                            dst[d0] = gv;
                            dst[d0 + 1] = gv;
                            dst[d0 + w] = gv;
                            dst[d0 + w + 1] = gv;
                        }
                    }
                }
                accum(&mut grads[x.0], dx);
            })),
        )
    }

    /// `[B, C, H, W] -> [B, C]` exact mean over the spatial grid.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let (b, c, h, w) = v.dims4();
        let hw = (h * w) as f64;
        let mut out = Tensor::zeros(&[b, c]);
        {
            let src = v.data();
            let dst = out.data_mut();
            for bc in 0..b * c {
                let sum: f64 = src[bc * h * w..(bc + 1) * h * w]
                    .iter()
                    .map(|v| v.to_f64())
                    .sum();
                dst[bc] = T::from_f64(sum / hw);
            }
        }
        let nx = self.needs_grad(x);
        self.push(
            out,
            nx,
            Some(Box::new(move |_g, _id, go, grads| {
                if !nx {
                    return;
                }
                let mut dx = Tensor::zeros(&[b, c, h, w]);
                let dst = dx.data_mut();
                for bc in 0..b * c {
                    let gv = T::from_f64(go.data()[bc].to_f64() / hw);
                    for d in dst[bc * h * w..(bc + 1) * h * w].iter_mut() {
                        *d = gv;
                    }
                }
                accum(&mut grads[x.0], dx);
            })),
        )
    }

    // ---- normalization ----

    /// Per-sample, per-channel normalization to zero mean / unit variance.
    pub fn instance_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let v = &self.nodes[x.0].value;
        let (b, c, h, w) = v.dims4();
        let n = (h * w) as f64;
        let mut out = Tensor::zeros(&[b, c, h, w]);
        let mut stats = Vec::with_capacity(b * c); // (mean, inv_std)
        {
            let src = v.data();
            let dst = out.data_mut();
            for bc in 0..b * c {
                let sl = &src[bc * h * w..(bc + 1) * h * w];
                let mean: f64 = sl.iter().map(|v| v.to_f64()).sum::<f64>() / n;
                let var: f64 = sl
                    .iter()
                    .map(|v| {
                        let d = v.to_f64() - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / n;
                let inv = 1.0 / (var + eps).sqrt();
                stats.push((mean, inv));
                for (d, s) in dst[bc * h * w..(bc + 1) * h * w].iter_mut().zip(sl.iter()) {
                    *d = T::from_f64((s.to_f64() - mean) * inv);
                }
            }
        }
        let nx = self.needs_grad(x);
        self.push(
            out,
            nx,
            Some(Box::new(move |g, id, go, grads| {
                if !nx {
                    return;
                }
                let y = g.value(id);
                let mut dx = Tensor::zeros(&[b, c, h, w]);
                let gd = go.data();
                let yd = y.data();
                let dst = dx.data_mut();
                for bc in 0..b * c {
                    let (_, inv) = stats[bc];
                    let lo = bc * h * w;
                    let hi_ = lo + h * w;
                    let gmean: f64 = gd[lo..hi_].iter().map(|v| v.to_f64()).sum::<f64>() / n;
                    let gymean: f64 = gd[lo..hi_]
                        .iter()
                        .zip(yd[lo..hi_].iter())
                        .map(|(a, b)| a.to_f64() * b.to_f64())
                        .sum::<f64>()
                        / n;
                    for k in lo..hi_ {
                        let gv = gd[k].to_f64();
                        let yv = yd[k].to_f64();
                        dst[k] = T::from_f64(inv * (gv - gmean - yv * gymean));
                    }
                }
                accum(&mut grads[x.0], dx);
            })),
        )
    }

    /// Adaptive instance normalization. `gamma`/`beta` are `[B, C]` nodes.
    pub fn adain(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let normed = self.instance_norm(x, eps);
        // y = gamma[b,c] * normed + beta[b,c]
        let v = &self.nodes[normed.0].value;
        let (b, c, h, w) = v.dims4();
        let gshape = self.nodes[gamma.0].value.dims2();
        assert_eq!(gshape, (b, c), "adain gamma shape");
        assert_eq!(self.nodes[beta.0].value.dims2(), (b, c), "adain beta shape");
        let mut out = Tensor::zeros(&[b, c, h, w]);
        {
            let nv = v.data();
            let gv = self.nodes[gamma.0].value.data();
            let bv = self.nodes[beta.0].value.data();
            let dst = out.data_mut();
            for bc in 0..b * c {
                let (ga, be) = (gv[bc].to_f64(), bv[bc].to_f64());
                for k in bc * h * w..(bc + 1) * h * w {
                    dst[k] = T::from_f64(ga * nv[k].to_f64() + be);
                }
            }
        }
        let (nn, ng, nb) = (
            self.needs_grad(normed),
            self.needs_grad(gamma),
            self.needs_grad(beta),
        );
        self.push(
            out,
            nn || ng || nb,
            Some(Box::new(move |g, _id, go, grads| {
                let nv = g.value(normed);
                let gvals = g.value(gamma);
                let gd = go.data();
                if ng {
                    let mut dg = Tensor::zeros(&[b, c]);
                    for bc in 0..b * c {
                        let s: f64 = gd[bc * h * w..(bc + 1) * h * w]
                            .iter()
                            .zip(nv.data()[bc * h * w..(bc + 1) * h * w].iter())
                            .map(|(a, b)| a.to_f64() * b.to_f64())
                            .sum();
                        dg.data_mut()[bc] = T::from_f64(s);
                    }
                    accum(&mut grads[gamma.0], dg);
                }
                if nb {
                    let mut db = Tensor::zeros(&[b, c]);
                    for bc in 0..b * c {
                        let s: f64 = gd[bc * h * w..(bc + 1) * h * w]
                            .iter()
                            .map(|a| a.to_f64())
                            .sum();
                        db.data_mut()[bc] = T::from_f64(s);
                    }
                    accum(&mut grads[beta.0], db);
                }
                if nn {
                    let mut dn = Tensor::zeros(&[b, c, h, w]);
                    for bc in 0..b * c {
                        let ga = gvals.data()[bc].to_f64();
                        for k in bc * h * w..(bc + 1) * h * w {
                            dn.data_mut()[k] = T::from_f64(gd[k].to_f64() * ga);
                        }
                    }
                    accum(&mut grads[normed.0], dn);
                }
            })),
        )
    }

    // ---- dense / conv ----

    /// `x [B, n] · wᵀ [n, m] + b [m] -> [B, m]`
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (bs, n) = xv.dims2();
        let (m, n2) = wv.dims2();
        assert_eq!(n, n2, "linear in-features mismatch");
        assert_eq!(self.nodes[b.0].value.len(), m, "linear bias mismatch");
        let mut out = Tensor::zeros(&[bs, m]);
        T::gemm_strided(
            bs,
            n,
            m,
            T::ONE,
            xv.data(),
            n as isize,
            1,
            wv.data(),
            1,
            n as isize,
            T::ZERO,
            out.data_mut(),
            m as isize,
            1,
        );
        {
            let bv = self.nodes[b.0].value.data().to_vec();
            let dst = out.data_mut();
            for i in 0..bs {
                for j in 0..m {
                    dst[i * m + j] += bv[j];
                }
            }
        }
        let (nx, nw, nb) = (self.needs_grad(x), self.needs_grad(w), self.needs_grad(b));
        self.push(
            out,
            nx || nw || nb,
            Some(Box::new(move |g, _id, go, grads| {
                let xv = g.value(x);
                let wv = g.value(w);
                if nx {
                    // dX = dY · W : [B,m]·[m,n]
                    let mut dx = Tensor::zeros(&[bs, n]);
                    T::gemm_strided(
                        bs,
                        m,
                        n,
                        T::ONE,
                        go.data(),
                        m as isize,
                        1,
                        wv.data(),
                        n as isize,
                        1,
                        T::ZERO,
                        dx.data_mut(),
                        n as isize,
                        1,
                    );
                    accum(&mut grads[x.0], dx);
                }
                if nw {
                    // dW = dYᵀ · X : [m,B]·[B,n]
                    let mut dw = Tensor::zeros(&[m, n]);
                    T::gemm_strided(
                        m,
                        bs,
                        n,
                        T::ONE,
                        go.data(),
                        1,
                        m as isize,
                        xv.data(),
                        n as isize,
                        1,
                        T::ZERO,
                        dw.data_mut(),
                        n as isize,
                        1,
                    );
                    accum(&mut grads[w.0], dw);
                }
                if nb {
                    let mut db = Tensor::zeros(&[m]);
                    for i in 0..bs {
                        for j in 0..m {
                            db.data_mut()[j] += go.data()[i * m + j];
                        }
                    }
                    accum(&mut grads[b.0], db);
                }
            })),
        )
    }

    /// 2-D convolution with zero padding.
    /// `x [B, Ci, H, W]`, `w [Co, Ci, k, k]`, `b [Co]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (bs, ci, h, wdt) = xv.dims4();
        let ws = wv.shape();
        assert_eq!(ws.len(), 4, "conv weight must be rank 4");
        let (co, ci2, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(ci, ci2, "conv in-channel mismatch");
        assert_eq!(kh, kw, "conv expects square kernels");
        assert_eq!(self.nodes[b.0].value.len(), co, "conv bias mismatch");
        let k = kh;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wdt + 2 * pad - k) / stride + 1;
        let kk = ci * k * k;
        let npix = ho * wo;

        let mut out = Tensor::zeros(&[bs, co, ho, wo]);
        let mut cols = vec![T::ZERO; kk * npix];
        for n in 0..bs {
            im2col(
                &xv.data()[n * ci * h * wdt..(n + 1) * ci * h * wdt],
                ci,
                h,
                wdt,
                k,
                stride,
                pad,
                ho,
                wo,
                &mut cols,
            );
            T::gemm_strided(
                co,
                kk,
                npix,
                T::ONE,
                wv.data(),
                kk as isize,
                1,
                &cols,
                npix as isize,
                1,
                T::ZERO,
                &mut out.data_mut()[n * co * npix..(n + 1) * co * npix],
                npix as isize,
                1,
            );
        }
        {
            let bv = self.nodes[b.0].value.data().to_vec();
            let dst = out.data_mut();
            for n in 0..bs {
                for c in 0..co {
                    let base = (n * co + c) * npix;
                    let add = bv[c];
                    for d in dst[base..base + npix].iter_mut() {
                        *d += add;
                    }
                }
            }
        }
        let (nx, nw, nb) = (self.needs_grad(x), self.needs_grad(w), self.needs_grad(b));
        self.push(
            out,
            nx || nw || nb,
            Some(Box::new(move |g, _id, go, grads| {
                let xv = g.value(x);
                let wv = g.value(w);
                let mut cols = vec![T::ZERO; kk * npix];
                let mut dw = if nw {
                    Some(Tensor::zeros(&[co, ci, k, k]))
                } else {
                    None
                };
                let mut dx = if nx {
                    Some(Tensor::zeros(&[bs, ci, h, wdt]))
                } else {
                    None
                };
                let mut dcols = if nx {
                    vec![T::ZERO; kk * npix]
                } else {
                    Vec::new()
                };
                for n in 0..bs {
                    let goff = n * co * npix;
                    if nw {
                        im2col(
                            &xv.data()[n * ci * h * wdt..(n + 1) * ci * h * wdt],
                            ci,
                            h,
                            wdt,
                            k,
                            stride,
                            pad,
                            ho,
                            wo,
                            &mut cols,
                        );
                        // dW += dY_n · colsᵀ : [co,npix]·[npix,kk]
                        T::gemm_strided(
                            co,
                            npix,
                            kk,
                            T::ONE,
                            &go.data()[goff..goff + co * npix],
                            npix as isize,
                            1,
                            &cols,
                            1,
                            npix as isize,
                            T::ONE,
                            dw.as_mut().unwrap().data_mut(),
                            kk as isize,
                            1,
                        );
                    }
                    if nx {
                        // dcols = Wᵀ · dY_n : [kk,co]·[co,npix]
                        T::gemm_strided(
                            kk,
                            co,
                            npix,
                            T::ONE,
                            wv.data(),
                            1,
                            kk as isize,
                            &go.data()[goff..goff + co * npix],
                            npix as isize,
                            1,
                            T::ZERO,
                            &mut dcols,
                            npix as isize,
                            1,
                        );
                        col2im_add(
                            &dcols,
                            ci,
                            h,
                            wdt,
                            k,
                            stride,
                            pad,
                            ho,
                            wo,
                            &mut dx.as_mut().unwrap().data_mut()
                                [n * ci * h * wdt..(n + 1) * ci * h * wdt],
                        );
                    }
                }
                if let Some(dw) = dw {
                    accum(&mut grads[w.0], dw);
                }
                if let Some(dx) = dx {
                    accum(&mut grads[x.0], dx);
                }
                if nb {
                    let mut db: Tensor<T> = Tensor::zeros(&[co]);
                    for n in 0..bs {
                        for c in 0..co {
                            let base = (n * co + c) * npix;
                            let s: f64 = go.data()[base..base + npix]
                                .iter()
                                .map(|v| v.to_f64())
                                .sum();
                            let cur = db.data()[c].to_f64();
                            db.data_mut()[c] = T::from_f64(cur + s);
                        }
                    }
                    accum(&mut grads[b.0], db);
                }
            })),
        )
    }

    // ---- scalar reductions ----

    /// Mean absolute difference over all elements.
    pub fn l1_mean(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "l1_mean shape mismatch");
        let n = va.len() as f64;
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(&x, &y)| (x.to_f64() - y.to_f64()).abs())
            .sum();
        let out = Tensor::scalar(T::from_f64(s / n));
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push(
            out,
            na || nb,
            Some(Box::new(move |g, _id, go, grads| {
                let gv = go.item().to_f64();
                let (va, vb) = (g.value(a), g.value(b));
                let mk = |flip: f64| {
                    let data: Vec<T> = va
                        .data()
                        .iter()
                        .zip(vb.data().iter())
                        .map(|(&x, &y)| {
                            let d = x.to_f64() - y.to_f64();
                            let s = if d > 0.0 {
                                1.0
                            } else if d < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            T::from_f64(flip * gv * s / n)
                        })
                        .collect();
                    Tensor::from_vec(va.shape(), data)
                };
                if na {
                    accum(&mut grads[a.0], mk(1.0));
                }
                if nb {
                    accum(&mut grads[b.0], mk(-1.0));
                }
            })),
        )
    }

    /// Mean of `ln(x)` over all elements. Caller guarantees positivity.
    pub fn mean_log(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let n = v.len() as f64;
        let s: f64 = v.data().iter().map(|&a| a.to_f64().ln()).sum();
        let out = Tensor::scalar(T::from_f64(s / n));
        let nx = self.needs_grad(x);
        self.push(
            out,
            nx,
            Some(Box::new(move |g, _id, go, grads| {
                if !nx {
                    return;
                }
                let gv = go.item().to_f64();
                let v = g.value(x);
                let data: Vec<T> = v
                    .data()
                    .iter()
                    .map(|&a| T::from_f64(gv / (n * a.to_f64())))
                    .collect();
                accum(&mut grads[x.0], Tensor::from_vec(v.shape(), data));
            })),
        )
    }

    /// Mean of `ln(1 - x)` over all elements.
    pub fn mean_log_one_minus(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let n = v.len() as f64;
        let s: f64 = v.data().iter().map(|&a| (1.0 - a.to_f64()).ln()).sum();
        let out = Tensor::scalar(T::from_f64(s / n));
        let nx = self.needs_grad(x);
        self.push(
            out,
            nx,
            Some(Box::new(move |g, _id, go, grads| {
                if !nx {
                    return;
                }
                let gv = go.item().to_f64();
                let v = g.value(x);
                let data: Vec<T> = v
                    .data()
                    .iter()
                    .map(|&a| T::from_f64(-gv / (n * (1.0 - a.to_f64()))))
                    .collect();
                accum(&mut grads[x.0], Tensor::from_vec(v.shape(), data));
            })),
        )
    }

    /// Batch-global soft dice loss against a constant target, Σ over every
    /// element of the batch. Returns a value in `[-1, 0]`.
    pub fn dice_loss(&mut self, pred: NodeId, target: &Tensor<T>, smooth: f64) -> NodeId {
        let p = &self.nodes[pred.0].value;
        assert_eq!(p.shape(), target.shape(), "dice shape mismatch");
        let mut inter = 0.0f64;
        let mut denom = smooth;
        for (&pv, &tv) in p.data().iter().zip(target.data().iter()) {
            let (pf, tf) = (pv.to_f64(), tv.to_f64());
            inter += pf * tf;
            denom += pf * pf + tf * tf;
        }
        let out = Tensor::scalar(T::from_f64(-2.0 * inter / denom));
        let np = self.needs_grad(pred);
        let tgt = target.clone();
        self.push(
            out,
            np,
            Some(Box::new(move |g, _id, go, grads| {
                if !np {
                    return;
                }
                let gv = go.item().to_f64();
                let p = g.value(pred);
                let data: Vec<T> = p
                    .data()
                    .iter()
                    .zip(tgt.data().iter())
                    .map(|(&pv, &tv)| {
                        let (pf, tf) = (pv.to_f64(), tv.to_f64());
                        T::from_f64(gv * (-2.0 * tf * denom + 4.0 * inter * pf) / (denom * denom))
                    })
                    .collect();
                accum(&mut grads[pred.0], Tensor::from_vec(p.shape(), data));
            })),
        )
    }

    /// Weighted sum of scalar nodes: Σ wᵢ·xᵢ.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        assert!(!terms.is_empty(), "weighted_sum needs at least one term");
        let mut s = 0.0f64;
        for (id, w) in terms {
            let v = self.nodes[id.0].value.item().to_f64();
            s += w * v;
        }
        let needs = terms.iter().any(|(id, _)| self.needs_grad(*id));
        let terms = terms.to_vec();
        self.push(
            Tensor::scalar(T::from_f64(s)),
            needs,
            Some(Box::new(move |g, _id, go, grads| {
                let gv = go.item().to_f64();
                for (id, w) in &terms {
                    if g.needs_grad(*id) {
                        accum(&mut grads[id.0], Tensor::scalar(T::from_f64(gv * w)));
                    }
                }
            })),
        )
    }
}

impl<T: Scalar + std::ops::AddAssign> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    debug_assert_eq!(cols.len(), ci * k * k * ho * wo);
    let npix = ho * wo;
    for c in 0..ci {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * npix;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    let dst = &mut cols[row + oi * wo..row + (oi + 1) * wo];
                    if ii < 0 || ii >= h as isize {
                        for d in dst.iter_mut() {
                            *d = T::ZERO;
                        }
                        continue;
                    }
                    let srow = (c * h + ii as usize) * w;
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        *d = if jj < 0 || jj >= w as isize {
                            T::ZERO
                        } else {
                            x[srow + jj as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar + std::ops::AddAssign>(
    cols: &[T],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let npix = ho * wo;
    for c in 0..ci {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * npix;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let srow = (c * h + ii as usize) * w;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        x[srow + jj as usize] += cols[row + oi * wo + oj];
                    }
                }
            }
        }
    }
}

/// Central finite differences of a scalar-valued graph with respect to one
/// leaf input, rebuilt per evaluation. Test oracle; f64 recommended.
pub fn numeric_grad<F>(build: F, inputs: &[Tensor<f64>], which: usize, h: f64) -> Tensor<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &ids);
        g.value(out).item()
    };
    let mut grad = Tensor::zeros(inputs[which].shape());
    for i in 0..inputs[which].len() {
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[i] += h;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[i] -= h;
        grad.data_mut()[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
    }
    grad
}

/// Largest relative error between an analytic and a numeric gradient,
/// max(|a-b|) / max(1e-8, max|b|).
pub fn max_rel_err(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let scale = numeric
        .data()
        .iter()
        .map(|v| v.abs())
        .fold(0.0f64, f64::max)
        .max(1e-8);
    analytic
        .data()
        .iter()
        .zip(numeric.data().iter())
        .map(|(&a, &b)| (a - b).abs())
        .fold(0.0f64, f64::max)
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randt(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product::<usize>().max(1);
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data)
    }

    fn check_op<F>(build: F, inputs: Vec<Tensor<f64>>, tol: f64)
    where
        F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
    {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &ids);
        let grads = g.backward(out);
        for which in 0..inputs.len() {
            let numeric = numeric_grad(&build, &inputs, which, 1e-5);
            let analytic = grads
                .get(ids[which])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[which].shape()));
            let err = max_rel_err(&analytic, &numeric);
            assert!(
                err < tol,
                "input {which}: rel err {err} exceeds {tol}\nanalytic {analytic:?}\nnumeric {numeric:?}"
            );
        }
    }

    #[test]
    fn conv2d_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 1, 4), (1, 0, 1), (1, 2, 5)] {
            let x = randt(&mut rng, &[2, 3, 6, 6]);
            let w = randt(&mut rng, &[2, 3, k, k]);
            let b = randt(&mut rng, &[2]);
            check_op(
                move |g, ids| {
                    let y = g.conv2d(ids[0], ids[1], ids[2], stride, pad);
                    let t = g.constant(Tensor::zeros(g.value(y).shape()));
                    g.l1_mean(y, t)
                },
                vec![x, w, b],
                1e-6,
            );
        }
    }

    #[test]
    fn linear_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randt(&mut rng, &[3, 5]);
        let w = randt(&mut rng, &[4, 5]);
        let b = randt(&mut rng, &[4]);
        check_op(
            |g, ids| {
                let y = g.linear(ids[0], ids[1], ids[2]);
                let s = g.sigmoid(y);
                let t = g.constant(Tensor::zeros(&[3, 4]));
                g.l1_mean(s, t)
            },
            vec![x, w, b],
            1e-6,
        );
    }

    #[test]
    fn instance_norm_and_adain_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randt(&mut rng, &[2, 2, 3, 3]);
        let ga = randt(&mut rng, &[2, 2]);
        let be = randt(&mut rng, &[2, 2]);
        check_op(
            |g, ids| {
                let y = g.adain(ids[0], ids[1], ids[2], 1e-5);
                let t = g.constant(Tensor::filled(&[2, 2, 3, 3], 0.3));
                g.l1_mean(y, t)
            },
            vec![x, ga, be],
            1e-5,
        );
    }

    #[test]
    fn pooling_and_upsample_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randt(&mut rng, &[1, 2, 4, 4]);
        check_op(
            |g, ids| {
                let u = g.upsample_nearest2x(ids[0]);
                let p = g.avg_pool2x2(u);
                let gp = g.global_avg_pool(p);
                let t = g.constant(Tensor::filled(&[1, 2], 0.1));
                g.l1_mean(gp, t)
            },
            vec![x],
            1e-6,
        );
    }

    #[test]
    fn dice_and_log_means_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randt(&mut rng, &[1, 1, 4, 4]);
        let target = Tensor::from_vec(
            &[1, 1, 4, 4],
            (0..16).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect(),
        );
        let t2 = target.clone();
        check_op(
            move |g, ids| {
                let p = g.sigmoid(ids[0]);
                let d = g.dice_loss(p, &t2, 1e-7);
                let lg = g.mean_log(p);
                let lg1m = g.mean_log_one_minus(p);
                g.weighted_sum(&[(d, 1.0), (lg, 0.5), (lg1m, 0.25)])
            },
            vec![x],
            1e-6,
        );
    }

    #[test]
    fn slice_and_narrow_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randt(&mut rng, &[3, 6]);
        let y = randt(&mut rng, &[3, 2, 2, 2]);
        check_op(
            |g, ids| {
                let s = g.slice_cols(ids[0], 1, 3);
                let t = g.constant(Tensor::zeros(&[3, 3]));
                let a = g.l1_mean(s, t);
                let nb = g.narrow_batch(ids[1], 2);
                let t2 = g.constant(Tensor::zeros(&[2, 2, 2, 2]));
                let b = g.l1_mean(nb, t2);
                g.weighted_sum(&[(a, 1.0), (b, 1.0)])
            },
            vec![x, y],
            1e-6,
        );
    }

    #[test]
    fn detach_cuts_gradient() {
        let x = Tensor::from_vec(&[2], vec![0.3f64, -0.4]);
        let mut g = Graph::new();
        let xid = g.leaf(x);
        let d = g.detach(xid);
        let t = Tensor::zeros(&[2]);
        let tc = g.constant(t);
        let loss = g.l1_mean(d, tc);
        let grads = g.backward(loss);
        assert!(grads.get(xid).is_none(), "detach must stop gradients");
    }

    #[test]
    fn weighted_sum_composes_scalars() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::scalar(2.0));
        let b = g.leaf(Tensor::scalar(-1.0));
        let s = g.weighted_sum(&[(a, 3.0), (b, 10.0)]);
        assert!((g.value(s).item() - (-4.0)).abs() < 1e-12);
        let grads = g.backward(s);
        assert!((grads.get(a).unwrap().item() - 3.0).abs() < 1e-12);
        assert!((grads.get(b).unwrap().item() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn shared_node_accumulates_gradient_from_both_consumers() {
        // f = mean|x| + mean|x| has gradient 2·sign(x)/n
        let x = Tensor::from_vec(&[2], vec![0.5f64, -0.25]);
        let mut g = Graph::new();
        let xid = g.leaf(x);
        let z = g.constant(Tensor::zeros(&[2]));
        let a = g.l1_mean(xid, z);
        let b = g.l1_mean(xid, z);
        let s = g.weighted_sum(&[(a, 1.0), (b, 1.0)]);
        let grads = g.backward(s);
        let gx = grads.get(xid).unwrap();
        assert!((gx.data()[0] - 1.0).abs() < 1e-12);
        assert!((gx.data()[1] + 1.0).abs() < 1e-12);
    }
}
