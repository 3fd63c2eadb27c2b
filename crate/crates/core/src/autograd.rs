//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every value produced during a forward pass together
//! with a closure that maps the gradient of that value to gradients of its
//! parents. [`Graph::backward`] walks the tape once in reverse order.
//!
//! Ops that need domain knowledge (warping, losses, edge maps) are added from
//! their own modules through [`Graph::custom`].

use std::rc::Rc;

use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs handed to a backward closure.
pub struct BackwardCtx<'a, T> {
    pub grad: &'a Tensor<T>,
    pub out: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    /// Which parents actually need a gradient; closures may skip the rest.
    pub needs: Vec<bool>,
}

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar root with respect to every node that needed one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad: false,
        })
    }

    /// A leaf whose gradient is tracked (parameters, differentiable inputs).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad: true,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records an op with an explicit backward rule.
    ///
    /// The closure receives the output gradient and must return one entry per
    /// parent, `None` where the parent needs no gradient.
    pub fn custom<F>(&mut self, parents: &[Var], value: Tensor<T>, backward: F) -> Var
    where
        F: Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(Node {
            value,
            parents: parents.to_vec(),
            backward: if needs_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            needs_grad,
        })
    }

    /// Reverse sweep from a single-element root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            // Interior nodes keep no gradient once it has been propagated.
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                out: &node.value,
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                needs: node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].needs_grad)
                    .collect(),
            };
            let parent_grads = bw(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.custom(&[a, b], value, |ctx| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.custom(&[a, b], value, |ctx| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.custom(&[a, b], value, |ctx| {
            vec![
                ctx.needs[0].then(|| ctx.grad.zip_map(ctx.inputs[1], |g, y| g * y)),
                ctx.needs[1].then(|| ctx.grad.zip_map(ctx.inputs[0], |g, x| g * x)),
            ]
        })
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.custom(&[a], value, move |ctx| vec![Some(ctx.grad.map(|g| g * s))])
    }

    /// `a + b` where `b` has the trailing shape of `a` and repeats over the
    /// leading axes.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let n = bv.len();
        assert!(
            av.shape().ends_with(bv.shape()),
            "cannot broadcast {:?} onto {:?}",
            bv.shape(),
            av.shape()
        );
        let mut value = av.clone();
        for chunk in value.data_mut().chunks_mut(n) {
            for (x, &y) in chunk.iter_mut().zip(bv.data()) {
                *x += y;
            }
        }
        self.custom(&[a, b], value, move |ctx| {
            let gb = ctx.needs[1].then(|| {
                let mut acc = Tensor::zeros(ctx.inputs[1].shape());
                for chunk in ctx.grad.data().chunks(n) {
                    for (s, &g) in acc.data_mut().iter_mut().zip(chunk) {
                        *s += g;
                    }
                }
                acc
            });
            vec![Some(ctx.grad.clone()), gb]
        })
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1);
        let sv = self.value(s).data()[0];
        let value = self.value(a).map(|x| x * sv);
        self.custom(&[a, s], value, |ctx| {
            let sv = ctx.inputs[1].data()[0];
            let ga = ctx.needs[0].then(|| ctx.grad.map(|g| g * sv));
            let gs = ctx.needs[1].then(|| {
                let dot: T = ctx
                    .grad
                    .data()
                    .iter()
                    .zip(ctx.inputs[0].data())
                    .map(|(&g, &x)| g * x)
                    .sum();
                Tensor::scalar(dot)
            });
            vec![ga, gs]
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        self.custom(&[a], value, |ctx| {
            vec![Some(
                ctx.grad
                    .zip_map(ctx.out, |g, y| if y > T::zero() { g } else { T::zero() }),
            )]
        })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let value = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        self.custom(&[a], value, move |ctx| {
            vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| {
                if x > T::zero() {
                    g
                } else {
                    g * slope
                }
            }))]
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        fn parts<T: Real>(x: T) -> (T, T) {
            let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
            let k = T::lit(0.044715);
            let half = T::lit(0.5);
            let inner = c * (x + k * x * x * x);
            let t = inner.tanh();
            let y = half * x * (T::one() + t);
            let dinner = c * (T::one() + T::lit(3.0) * k * x * x);
            let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
            (y, dy)
        }
        let value = self.value(a).map(|x| parts(x).0);
        self.custom(&[a], value, |ctx| {
            vec![Some(
                ctx.grad.zip_map(ctx.inputs[0], |g, x| g * parts(x).1),
            )]
        })
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.custom(&[a], value, |ctx| {
            vec![Some(
                ctx.grad
                    .zip_map(ctx.inputs[0], |g, x| g * T::lit(2.0) * x),
            )]
        })
    }

    /// `sqrt(a + eps)`, finite derivative at zero.
    pub fn sqrt_eps(&mut self, a: Var, eps: T) -> Var {
        let value = self.value(a).map(|x| (x + eps).sqrt());
        self.custom(&[a], value, |ctx| {
            vec![Some(
                ctx.grad.zip_map(ctx.out, |g, y| g / (T::lit(2.0) * y)),
            )]
        })
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.custom(&[a], value, |ctx| {
            vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.data()[0]))]
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::lit(self.value(a).len() as f64);
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Global maximum; the gradient flows to the first maximal element.
    pub fn max_all(&mut self, a: Var) -> Var {
        let data = self.value(a).data();
        let mut best = 0;
        for (i, &v) in data.iter().enumerate() {
            if v > data[best] {
                best = i;
            }
        }
        let value = Tensor::scalar(data[best]);
        self.custom(&[a], value, move |ctx| {
            let mut g = Tensor::zeros(ctx.inputs[0].shape());
            g.data_mut()[best] = ctx.grad.data()[0];
            vec![Some(g)]
        })
    }

    // ---- layout ----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshaped(shape);
        self.custom(&[a], value, |ctx| {
            vec![Some(ctx.grad.clone().reshaped(ctx.inputs[0].shape()))]
        })
    }

    /// `out[i] = a[index[i]]`; the backward pass scatter-adds.
    ///
    /// Permutations, window partitions, cyclic shifts and table lookups are
    /// all expressed through this op.
    pub fn gather(&mut self, a: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Var {
        assert_eq!(index.len(), shape.iter().product::<usize>());
        let src = self.value(a).data();
        let value = Tensor::new(shape, index.iter().map(|&i| src[i]).collect());
        self.custom(&[a], value, move |ctx| {
            let mut g = Tensor::zeros(ctx.inputs[0].shape());
            let gd = g.data_mut();
            for (&i, &v) in index.iter().zip(ctx.grad.data()) {
                gd[i] += v;
            }
            vec![Some(g)]
        })
    }

    /// Concatenates along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let first = self.shape(parts[0]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            assert_eq!(
                &v.shape()[1..],
                &first[1..],
                "concat: trailing shapes differ"
            );
            lead += v.shape()[0];
            sizes.push(v.len());
            data.extend_from_slice(v.data());
        }
        let mut shape = first;
        shape[0] = lead;
        let value = Tensor::new(&shape, data);
        self.custom(parts, value, move |ctx| {
            let mut off = 0;
            sizes
                .iter()
                .zip(&ctx.inputs)
                .zip(&ctx.needs)
                .map(|((&n, inp), &need)| {
                    let g = need.then(|| {
                        Tensor::new(inp.shape(), ctx.grad.data()[off..off + n].to_vec())
                    });
                    off += n;
                    g
                })
                .collect()
        })
    }

    /// Slice `[start, end)` along axis 0.
    pub fn narrow(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a);
        let stride = v.len() / v.shape()[0];
        let mut shape = v.shape().to_vec();
        shape[0] = end - start;
        let value = Tensor::new(&shape, v.data()[start * stride..end * stride].to_vec());
        self.custom(&[a], value, move |ctx| {
            let mut g = Tensor::zeros(ctx.inputs[0].shape());
            g.data_mut()[start * stride..end * stride].copy_from_slice(ctx.grad.data());
            vec![Some(g)]
        })
    }

    // ---- dense algebra ---------------------------------------------------

    /// Rows of `x` (`[N, Cin]`) through `w` (`[Cout, Cin]`) plus optional bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, cin) = (xv.shape()[0], xv.shape()[1]);
        let cout = wv.shape()[0];
        assert_eq!(wv.shape()[1], cin, "linear: weight/input width mismatch");
        let mut out = vec![T::zero(); n * cout];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for (row, orow) in xv.data().chunks(cin).zip(out.chunks_mut(cout)) {
            for (o, (wrow, slot)) in wv.data().chunks(cin).zip(orow.iter_mut()).enumerate() {
                let mut acc = bias.as_ref().map_or(T::zero(), |b| b[o]);
                for (&a, &c) in row.iter().zip(wrow) {
                    acc += a * c;
                }
                *slot = acc;
            }
        }
        let value = Tensor::new(&[n, cout], out);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.custom(&parents, value, move |ctx| {
            let (xv, wv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let gx = ctx.needs[0].then(|| {
                let mut gx = vec![T::zero(); n * cin];
                for (grow, gxrow) in g.data().chunks(cout).zip(gx.chunks_mut(cin)) {
                    for (&go, wrow) in grow.iter().zip(wv.data().chunks(cin)) {
                        for (s, &c) in gxrow.iter_mut().zip(wrow) {
                            *s += go * c;
                        }
                    }
                }
                Tensor::new(&[n, cin], gx)
            });
            let gw = ctx.needs[1].then(|| {
                let mut gw = vec![T::zero(); cout * cin];
                for (grow, xrow) in g.data().chunks(cout).zip(xv.data().chunks(cin)) {
                    for (&go, gwrow) in grow.iter().zip(gw.chunks_mut(cin)) {
                        for (s, &a) in gwrow.iter_mut().zip(xrow) {
                            *s += go * a;
                        }
                    }
                }
                Tensor::new(&[cout, cin], gw)
            });
            let mut out = vec![gx, gw];
            if ctx.inputs.len() == 3 {
                out.push(ctx.needs[2].then(|| {
                    let mut gb = vec![T::zero(); cout];
                    for grow in g.data().chunks(cout) {
                        for (s, &v) in gb.iter_mut().zip(grow) {
                            *s += v;
                        }
                    }
                    Tensor::new(&[cout], gb)
                }));
            }
            out
        })
    }

    /// Batched `a · bᵀ`: `[B, M, K] × [B, N, K] → [B, M, N]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let n = bv.shape()[1];
        assert_eq!(bv.shape(), &[bs, n, k], "bmm_nt: shape mismatch");
        let value = Tensor::new(&[bs, m, n], bmm_nt_raw(av.data(), bv.data(), bs, m, n, k));
        self.custom(&[a, b], value, move |ctx| {
            let (av, bv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            // dA = G · B, dB = Gᵀ · A
            let ga = ctx.needs[0]
                .then(|| Tensor::new(&[bs, m, k], bmm_nn_raw(g, bv, bs, m, n, k)));
            let gb = ctx.needs[1]
                .then(|| Tensor::new(&[bs, n, k], bmm_tn_raw(g, av, bs, m, n, k)));
            vec![ga, gb]
        })
    }

    /// Batched `a · b`: `[B, M, N] × [B, N, K] → [B, M, K]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (bs, m, n) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let k = bv.shape()[2];
        assert_eq!(bv.shape(), &[bs, n, k], "bmm: shape mismatch");
        let value = Tensor::new(&[bs, m, k], bmm_nn_raw(av.data(), bv.data(), bs, m, n, k));
        self.custom(&[a, b], value, move |ctx| {
            let (av, bv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            // dA = G · Bᵀ  ([B,M,K] × [B,N,K]ᵀ), dB = Aᵀ · G
            let ga = ctx.needs[0]
                .then(|| Tensor::new(&[bs, m, n], bmm_nt_raw(g, bv, bs, m, n, k)));
            let gb = ctx.needs[1]
                .then(|| Tensor::new(&[bs, n, k], bmm_tn_raw(av, g, bs, m, n, k)));
            vec![ga, gb]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = *v.shape().last().expect("non-empty shape");
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x = *x / s;
            }
        }
        self.custom(&[a], out, move |ctx| {
            let mut g = ctx.grad.clone();
            for (grow, yrow) in g.data_mut().chunks_mut(n).zip(ctx.out.data().chunks(n)) {
                let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                for (gv, &y) in grow.iter_mut().zip(yrow) {
                    *gv = y * (*gv - dot);
                }
            }
            vec![Some(g)]
        })
    }

    /// Layer normalization over the last axis of `[N, C]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.shape()[1];
        let eps = T::lit(eps);
        let cf = T::lit(c as f64);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.shape()[0]);
        for row in xhat.data_mut().chunks_mut(c) {
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let is = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(c) {
            for ((v, &g), &b) in row.iter_mut().zip(gv).zip(bv) {
                *v = *v * g + b;
            }
        }
        self.custom(&[x, gamma, beta], out, move |ctx| {
            let gamma = ctx.inputs[1].data();
            let g = ctx.grad;
            let gx = ctx.needs[0].then(|| {
                let mut gx = Tensor::zeros(g.shape());
                for (((gxrow, grow), xrow), &is) in gx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(g.data().chunks(c))
                    .zip(xhat.data().chunks(c))
                    .zip(&inv_std)
                {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for ((&gv, &gm), &xh) in grow.iter().zip(gamma).zip(xrow) {
                        let d = gv * gm;
                        s1 += d;
                        s2 += d * xh;
                    }
                    for (((o, &gv), &gm), &xh) in gxrow.iter_mut().zip(grow).zip(gamma).zip(xrow) {
                        *o = is * (gv * gm - s1 / cf - xh * s2 / cf);
                    }
                }
                gx
            });
            let (mut gg, mut gb) = (vec![T::zero(); c], vec![T::zero(); c]);
            for (grow, xrow) in g.data().chunks(c).zip(xhat.data().chunks(c)) {
                for i in 0..c {
                    gg[i] += grow[i] * xrow[i];
                    gb[i] += grow[i];
                }
            }
            vec![
                gx,
                ctx.needs[1].then(|| Tensor::new(&[c], gg)),
                ctx.needs[2].then(|| Tensor::new(&[c], gb)),
            ]
        })
    }
}

fn bmm_nt_raw<T: Real>(a: &[T], b: &[T], bs: usize, m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); bs * m * n];
    for batch in 0..bs {
        let ab = &a[batch * m * k..(batch + 1) * m * k];
        let bb = &b[batch * n * k..(batch + 1) * n * k];
        let ob = &mut out[batch * m * n..(batch + 1) * m * n];
        for (arow, orow) in ab.chunks(k).zip(ob.chunks_mut(n)) {
            for (brow, o) in bb.chunks(k).zip(orow.iter_mut()) {
                *o = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            }
        }
    }
    out
}

/// `[B, M, N] × [B, N, K] → [B, M, K]`
fn bmm_nn_raw<T: Real>(a: &[T], b: &[T], bs: usize, m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); bs * m * k];
    for batch in 0..bs {
        let ab = &a[batch * m * n..(batch + 1) * m * n];
        let bb = &b[batch * n * k..(batch + 1) * n * k];
        let ob = &mut out[batch * m * k..(batch + 1) * m * k];
        for (arow, orow) in ab.chunks(n).zip(ob.chunks_mut(k)) {
            for (&av, brow) in arow.iter().zip(bb.chunks(k)) {
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// `[B, M, N]ᵀ × [B, M, K] → [B, N, K]`
fn bmm_tn_raw<T: Real>(a: &[T], b: &[T], bs: usize, m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); bs * n * k];
    for batch in 0..bs {
        let ab = &a[batch * m * n..(batch + 1) * m * n];
        let bb = &b[batch * m * k..(batch + 1) * m * k];
        let ob = &mut out[batch * n * k..(batch + 1) * n * k];
        for (arow, brow) in ab.chunks(n).zip(bb.chunks(k)) {
            for (&av, orow) in arow.iter().zip(ob.chunks_mut(k)) {
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}
