//! Differentiable operations recorded on a [`Tape`].
//!
//! Convolution-family ops live in `conv.rs`; everything else is here.
//! Loss ops take their targets and weights as plain arrays because those are
//! always constants in this training scheme.

use ndarray::{Array2, ArrayD, Axis, Ix2, Ix3, IxDyn, Slice};

use super::scalar::{s, Scalar};
use super::tape::{Tape, Var};

impl<S: Scalar> Tape<S> {
    /// Cut the gradient flow: the value continues as a constant.
    pub fn detach(&self, a: Var) -> Var {
        self.constant(self.value(a))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        self.op(
            &va + &vb,
            vec![a, b],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        self.op(
            &va - &vb,
            vec![a, b],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(-g.clone())]),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        self.op(
            &va * &vb,
            vec![a, b],
            Box::new(|g, p, _| vec![Some(g * p[1]), Some(g * p[0])]),
        )
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let cs: S = s(c);
        self.op(
            self.value(a) * cs,
            vec![a],
            Box::new(move |g, _, _| vec![Some(g * cs)]),
        )
    }

    pub fn add_many(&self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for v in &vars[1..] {
            acc = self.add(acc, *v);
        }
        acc
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.value(a);
        self.op(
            v.mapv(|x| x.max(S::zero())),
            vec![a],
            Box::new(|g, p, _| {
                let mut dx = g.clone();
                dx.zip_mut_with(p[0], |d, &x| {
                    if x <= S::zero() {
                        *d = S::zero();
                    }
                });
                vec![Some(dx)]
            }),
        )
    }

    pub fn leaky_relu(&self, a: Var, alpha: f64) -> Var {
        let al: S = s(alpha);
        let v = self.value(a);
        self.op(
            v.mapv(|x| if x > S::zero() { x } else { x * al }),
            vec![a],
            Box::new(move |g, p, _| {
                let mut dx = g.clone();
                dx.zip_mut_with(p[0], |d, &x| {
                    if x <= S::zero() {
                        *d *= al;
                    }
                });
                vec![Some(dx)]
            }),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.value(a);
        self.op(
            v.mapv(|x| S::one() / (S::one() + (-x).exp())),
            vec![a],
            Box::new(|g, _, y| {
                let mut dx = g.clone();
                dx.zip_mut_with(y, |d, &yv| *d *= yv * (S::one() - yv));
                vec![Some(dx)]
            }),
        )
    }

    /// Elementwise maximum; ties route the gradient to the first argument.
    pub fn max_elem(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "max shape mismatch");
        let mut out = va.clone();
        out.zip_mut_with(&vb, |o, &y| {
            if y > *o {
                *o = y;
            }
        });
        self.op(
            out,
            vec![a, b],
            Box::new(|g, p, _| {
                let mut ga = g.clone();
                let mut gb = g.clone();
                ndarray::Zip::from(&mut ga)
                    .and(&mut gb)
                    .and(p[0])
                    .and(p[1])
                    .for_each(|ga, gb, &x, &y| {
                        if x >= y {
                            *gb = S::zero();
                        } else {
                            *ga = S::zero();
                        }
                    });
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a);
        let old = v.shape().to_vec();
        let out = v
            .into_shape_clone(IxDyn(shape))
            .expect("reshape size mismatch");
        self.op(
            out,
            vec![a],
            Box::new(move |g, _, _| {
                vec![Some(
                    g.clone().into_shape_clone(IxDyn(&old)).expect("reshape back"),
                )]
            }),
        )
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Var {
        let v = self.value(a);
        let mut inv = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let out = v.permuted_axes(IxDyn(perm)).as_standard_layout().to_owned();
        self.op(
            out,
            vec![a],
            Box::new(move |g, _, _| {
                vec![Some(
                    g.view()
                        .permuted_axes(IxDyn(&inv))
                        .as_standard_layout()
                        .to_owned(),
                )]
            }),
        )
    }

    /// Contiguous slice along one axis.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.value(a);
        let full = v.shape().to_vec();
        let out = v
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.op(
            out,
            vec![a],
            Box::new(move |g, _, _| {
                let mut dx = ArrayD::zeros(IxDyn(&full));
                dx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                vec![Some(dx)]
            }),
        )
    }

    pub fn concat(&self, vars: &[Var], axis: usize) -> Var {
        let vals: Vec<ArrayD<S>> = vars.iter().map(|v| self.value(*v)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let lens: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        self.op(
            out,
            vars.to_vec(),
            Box::new(move |g, _, _| {
                let mut res = Vec::with_capacity(lens.len());
                let mut start = 0;
                for &l in &lens {
                    res.push(Some(
                        g.slice_axis(Axis(axis), Slice::from(start..start + l))
                            .to_owned(),
                    ));
                    start += l;
                }
                res
            }),
        )
    }

    /// Stack N same-shape tensors along a fresh axis 1 (token assembly:
    /// N tensors of `[B, d]` become `[B, N, d]`).
    pub fn stack_tokens(&self, vars: &[Var]) -> Var {
        let vals: Vec<ArrayD<S>> = vars.iter().map(|v| self.value(*v)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let stacked = ndarray::stack(Axis(1), &views).expect("stack shapes");
        self.op(
            stacked,
            vars.to_vec(),
            Box::new(|g, p, _| {
                (0..p.len())
                    .map(|i| Some(g.index_axis(Axis(1), i).to_owned()))
                    .collect()
            }),
        )
    }

    /// Broadcast a tensor to a new leading axis of length `n`.
    pub fn broadcast0(&self, a: Var, n: usize) -> Var {
        let v = self.value(a);
        let mut shape = vec![n];
        shape.extend_from_slice(v.shape());
        let out = v.broadcast(IxDyn(&shape)).expect("broadcast0").to_owned();
        self.op(
            out,
            vec![a],
            Box::new(|g, _, _| vec![Some(g.sum_axis(Axis(0)))]),
        )
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let va = self.value(a).into_dimensionality::<Ix2>().expect("matmul lhs 2-d");
        let vb = self.value(b).into_dimensionality::<Ix2>().expect("matmul rhs 2-d");
        assert_eq!(va.shape()[1], vb.shape()[0], "matmul inner dims");
        let out = S::gemm(va.view(), vb.view());
        self.op(
            out.into_dyn(),
            vec![a, b],
            Box::new(|g, p, _| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("grad 2-d");
                let a2 = p[0].view().into_dimensionality::<Ix2>().expect("lhs 2-d");
                let b2 = p[1].view().into_dimensionality::<Ix2>().expect("rhs 2-d");
                let da = S::gemm(g2.view(), b2.t());
                let db = S::gemm(a2.t(), g2.view());
                vec![Some(da.into_dyn()), Some(db.into_dyn())]
            }),
        )
    }

    /// Batched matmul over a leading group axis: `[G,m,k] x [G,k,n] -> [G,m,n]`.
    pub fn bmm(&self, a: Var, b: Var) -> Var {
        let va = self.value(a).into_dimensionality::<Ix3>().expect("bmm lhs 3-d");
        let vb = self.value(b).into_dimensionality::<Ix3>().expect("bmm rhs 3-d");
        let (ga, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let (gb, k2, n) = (vb.shape()[0], vb.shape()[1], vb.shape()[2]);
        assert_eq!(ga, gb, "bmm group dims");
        assert_eq!(k, k2, "bmm inner dims");
        let mut out = ndarray::Array3::<S>::zeros((ga, m, n));
        for gi in 0..ga {
            out.index_axis_mut(Axis(0), gi)
                .assign(&S::gemm(va.index_axis(Axis(0), gi), vb.index_axis(Axis(0), gi)));
        }
        self.op(
            out.into_dyn(),
            vec![a, b],
            Box::new(move |g, p, _| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("grad 3-d");
                let a3 = p[0].view().into_dimensionality::<Ix3>().expect("lhs 3-d");
                let b3 = p[1].view().into_dimensionality::<Ix3>().expect("rhs 3-d");
                let mut da = ndarray::Array3::<S>::zeros((ga, m, k));
                let mut db = ndarray::Array3::<S>::zeros((ga, k, n));
                for gi in 0..ga {
                    let gg = g3.index_axis(Axis(0), gi);
                    da.index_axis_mut(Axis(0), gi)
                        .assign(&S::gemm(gg, b3.index_axis(Axis(0), gi).reversed_axes()));
                    db.index_axis_mut(Axis(0), gi)
                        .assign(&S::gemm(a3.index_axis(Axis(0), gi).reversed_axes(), gg));
                }
                vec![Some(da.into_dyn()), Some(db.into_dyn())]
            }),
        )
    }

    /// Add a bias vector over the last axis.
    pub fn bias_add(&self, x: Var, b: Var) -> Var {
        let vx = self.value(x);
        let vb = self.value(b);
        let d = *vx.shape().last().expect("bias_add rank");
        assert_eq!(vb.shape(), [d], "bias length");
        let rows = vx.len() / d;
        let x2 = vx.into_shape_clone((rows, d)).expect("bias rows");
        let b1 = vb.into_shape_clone(d).expect("bias 1-d");
        let mut out = x2;
        out += &b1;
        let shape = self.shape(x);
        self.op(
            out.into_shape_clone(IxDyn(&shape)).expect("bias back"),
            vec![x, b],
            Box::new(move |g, _, _| {
                let g2 = g.clone().into_shape_clone((rows, d)).expect("grad rows");
                let db = g2.sum_axis(Axis(0)).into_dyn();
                vec![Some(g.clone()), Some(db)]
            }),
        )
    }

    /// Dense layer over the last axis: `[..., din] -> [..., dout]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xshape = self.shape(x);
        let din = *xshape.last().expect("linear rank");
        let wshape = self.shape(w);
        assert_eq!(wshape[0], din, "linear weight rows");
        let dout = wshape[1];
        let rows: usize = xshape[..xshape.len() - 1].iter().product();
        let x2 = self.reshape(x, &[rows, din]);
        let y2 = self.matmul(x2, w);
        let y2 = match b {
            Some(b) => self.bias_add(y2, b),
            None => y2,
        };
        let mut out_shape = xshape[..xshape.len() - 1].to_vec();
        out_shape.push(dout);
        self.reshape(y2, &out_shape)
    }

    /// Per-token scoring head: `[B,N,d] x [N,d] (+[N]) -> [B,N]` where token
    /// `n` gets its own weight row.
    pub fn per_token_linear(&self, x: Var, w: Var, b: Var) -> Var {
        let vx = self.value(x).into_dimensionality::<Ix3>().expect("ptl input 3-d");
        let vw = self.value(w).into_dimensionality::<Ix2>().expect("ptl weight 2-d");
        let vb = self.value(b);
        let (bs, n, d) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert_eq!(vw.shape(), [n, d], "ptl weight shape");
        assert_eq!(vb.shape(), [n], "ptl bias shape");
        let mut out = Array2::<S>::zeros((bs, n));
        for bi in 0..bs {
            for ni in 0..n {
                let mut acc = vb[[ni]];
                for di in 0..d {
                    acc += vx[[bi, ni, di]] * vw[[ni, di]];
                }
                out[[bi, ni]] = acc;
            }
        }
        self.op(
            out.into_dyn(),
            vec![x, w, b],
            Box::new(move |g, p, _| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("grad 2-d");
                let x3 = p[0].view().into_dimensionality::<Ix3>().expect("x 3-d");
                let w2 = p[1].view().into_dimensionality::<Ix2>().expect("w 2-d");
                let mut dx = ndarray::Array3::<S>::zeros((bs, n, d));
                let mut dw = Array2::<S>::zeros((n, d));
                let mut db = ndarray::Array1::<S>::zeros(n);
                for bi in 0..bs {
                    for ni in 0..n {
                        let gv = g2[[bi, ni]];
                        db[ni] += gv;
                        for di in 0..d {
                            dx[[bi, ni, di]] = gv * w2[[ni, di]];
                            dw[[ni, di]] += gv * x3[[bi, ni, di]];
                        }
                    }
                }
                vec![Some(dx.into_dyn()), Some(dw.into_dyn()), Some(db.into_dyn())]
            }),
        )
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let d = *shape.last().expect("ln rank");
        let rows = vx.len() / d;
        let vg = self.value(gamma).into_shape_clone(d).expect("gamma 1-d");
        let vb = self.value(beta).into_shape_clone(d).expect("beta 1-d");
        assert_eq!(vg.len(), d, "gamma length");
        let epss: S = s(eps);
        let x2 = vx.into_shape_clone((rows, d)).expect("ln rows");
        let mut xhat = Array2::<S>::zeros((rows, d));
        let mut inv_std = Vec::with_capacity(rows);
        let nd: S = s(d as f64);
        for r in 0..rows {
            let row = x2.row(r);
            let mu = row.sum() / nd;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / nd;
            let istd = S::one() / (var + epss).sqrt();
            inv_std.push(istd);
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row.iter()) {
                *o = (v - mu) * istd;
            }
        }
        let mut y = xhat.clone();
        for r in 0..rows {
            for c in 0..d {
                y[[r, c]] = y[[r, c]] * vg[c] + vb[c];
            }
        }
        let out = y.into_shape_clone(IxDyn(&shape)).expect("ln out");
        self.op(
            out,
            vec![x, gamma, beta],
            Box::new(move |g, _, _| {
                let g2 = g.clone().into_shape_clone((rows, d)).expect("grad rows");
                let mut dx = Array2::<S>::zeros((rows, d));
                let mut dgamma = ndarray::Array1::<S>::zeros(d);
                let mut dbeta = ndarray::Array1::<S>::zeros(d);
                for r in 0..rows {
                    let istd = inv_std[r];
                    let xh = xhat.row(r);
                    let gr = g2.row(r);
                    let mut mean_dxhat = S::zero();
                    let mut mean_dxhat_xhat = S::zero();
                    for c in 0..d {
                        let dxh = gr[c] * vg[c];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[c];
                        dgamma[c] += gr[c] * xh[c];
                        dbeta[c] += gr[c];
                    }
                    mean_dxhat /= nd;
                    mean_dxhat_xhat /= nd;
                    for c in 0..d {
                        let dxh = gr[c] * vg[c];
                        dx[[r, c]] = (dxh - mean_dxhat - xh[c] * mean_dxhat_xhat) * istd;
                    }
                }
                vec![
                    Some(dx.into_shape_clone(IxDyn(&shape)).expect("dx shape")),
                    Some(dgamma.into_dyn()),
                    Some(dbeta.into_dyn()),
                ]
            }),
        )
    }

    /// Group normalization over `[B,C,H,W]`, statistics per (sample, group),
    /// affine per channel. Used everywhere a batch-coupled norm would break
    /// per-sample determinism.
    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        assert_eq!(shape.len(), 4, "group_norm expects [B,C,H,W]");
        let (bs, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(c % groups, 0, "channels divisible by groups");
        let cg = c / groups;
        let block = cg * h * w;
        let nd: S = s(block as f64);
        let epss: S = s(eps);
        let vg = self.value(gamma).into_shape_clone(c).expect("gamma 1-d");
        let vb = self.value(beta).into_shape_clone(c).expect("beta 1-d");

        let x4 = vx.into_shape_clone((bs, c, h, w)).expect("gn in");
        let mut xhat = ndarray::Array4::<S>::zeros((bs, c, h, w));
        let mut inv_std = Array2::<S>::zeros((bs, groups));
        for b in 0..bs {
            for g in 0..groups {
                let c0 = g * cg;
                let mut mu = S::zero();
                for ci in c0..c0 + cg {
                    for y in 0..h {
                        for xi in 0..w {
                            mu += x4[[b, ci, y, xi]];
                        }
                    }
                }
                mu /= nd;
                let mut var = S::zero();
                for ci in c0..c0 + cg {
                    for y in 0..h {
                        for xi in 0..w {
                            let d = x4[[b, ci, y, xi]] - mu;
                            var += d * d;
                        }
                    }
                }
                var /= nd;
                let istd = S::one() / (var + epss).sqrt();
                inv_std[[b, g]] = istd;
                for ci in c0..c0 + cg {
                    for y in 0..h {
                        for xi in 0..w {
                            xhat[[b, ci, y, xi]] = (x4[[b, ci, y, xi]] - mu) * istd;
                        }
                    }
                }
            }
        }
        let mut out = xhat.clone();
        for b in 0..bs {
            for ci in 0..c {
                let (gm, bt) = (vg[ci], vb[ci]);
                for y in 0..h {
                    for xi in 0..w {
                        out[[b, ci, y, xi]] = out[[b, ci, y, xi]] * gm + bt;
                    }
                }
            }
        }
        self.op(
            out.into_dyn(),
            vec![x, gamma, beta],
            Box::new(move |gout, _, _| {
                let g4 = gout
                    .clone()
                    .into_shape_clone((bs, c, h, w))
                    .expect("grad shape");
                let mut dx = ndarray::Array4::<S>::zeros((bs, c, h, w));
                let mut dgamma = ndarray::Array1::<S>::zeros(c);
                let mut dbeta = ndarray::Array1::<S>::zeros(c);
                for b in 0..bs {
                    for gi in 0..groups {
                        let c0 = gi * cg;
                        let istd = inv_std[[b, gi]];
                        let mut mean_dxhat = S::zero();
                        let mut mean_dxhat_xhat = S::zero();
                        for ci in c0..c0 + cg {
                            for y in 0..h {
                                for xi in 0..w {
                                    let dxh = g4[[b, ci, y, xi]] * vg[ci];
                                    mean_dxhat += dxh;
                                    mean_dxhat_xhat += dxh * xhat[[b, ci, y, xi]];
                                }
                            }
                        }
                        mean_dxhat /= nd;
                        mean_dxhat_xhat /= nd;
                        for ci in c0..c0 + cg {
                            for y in 0..h {
                                for xi in 0..w {
                                    let dxh = g4[[b, ci, y, xi]] * vg[ci];
                                    dx[[b, ci, y, xi]] = (dxh
                                        - mean_dxhat
                                        - xhat[[b, ci, y, xi]] * mean_dxhat_xhat)
                                        * istd;
                                }
                            }
                        }
                    }
                }
                for b in 0..bs {
                    for ci in 0..c {
                        for y in 0..h {
                            for xi in 0..w {
                                dgamma[ci] += g4[[b, ci, y, xi]] * xhat[[b, ci, y, xi]];
                                dbeta[ci] += g4[[b, ci, y, xi]];
                            }
                        }
                    }
                }
                vec![
                    Some(dx.into_dyn()),
                    Some(dgamma.into_dyn()),
                    Some(dbeta.into_dyn()),
                ]
            }),
        )
    }

    pub fn softmax_last(&self, x: Var) -> Var {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let d = *shape.last().expect("softmax rank");
        let rows = vx.len() / d;
        let mut y = vx.into_shape_clone((rows, d)).expect("softmax rows");
        for mut row in y.rows_mut() {
            let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
            row.mapv_inplace(|v| (v - m).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let out = y.into_shape_clone(IxDyn(&shape)).expect("softmax out");
        self.op(
            out,
            vec![x],
            Box::new(move |g, _, yv| {
                let g2 = g.clone().into_shape_clone((rows, d)).expect("grad rows");
                let y2 = yv.clone().into_shape_clone((rows, d)).expect("y rows");
                let mut dx = Array2::<S>::zeros((rows, d));
                for r in 0..rows {
                    let dot: S = g2
                        .row(r)
                        .iter()
                        .zip(y2.row(r).iter())
                        .map(|(&a, &b)| a * b)
                        .sum();
                    for c in 0..d {
                        dx[[r, c]] = y2[[r, c]] * (g2[[r, c]] - dot);
                    }
                }
                vec![Some(dx.into_shape_clone(IxDyn(&shape)).expect("dx shape"))]
            }),
        )
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.len();
        let inv: S = s(1.0 / n as f64);
        let mean = v.iter().cloned().sum::<S>() * inv;
        self.op(
            ArrayD::from_elem(IxDyn(&[]), mean),
            vec![x],
            Box::new(move |g, p, _| {
                let gv = *g.iter().next().expect("scalar grad") * inv;
                vec![Some(ArrayD::from_elem(p[0].raw_dim(), gv))]
            }),
        )
    }

    /// Mean over spatial axes: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        assert_eq!(shape.len(), 4, "gap expects [B,C,H,W]");
        let (bs, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let inv: S = s(1.0 / (h * w) as f64);
        let v4 = v.into_shape_clone((bs, c, h, w)).expect("gap in");
        let mut out = Array2::<S>::zeros((bs, c));
        for b in 0..bs {
            for ci in 0..c {
                let mut acc = S::zero();
                for y in 0..h {
                    for xi in 0..w {
                        acc += v4[[b, ci, y, xi]];
                    }
                }
                out[[b, ci]] = acc * inv;
            }
        }
        self.op(
            out.into_dyn(),
            vec![x],
            Box::new(move |g, _, _| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("grad 2-d");
                let mut dx = ndarray::Array4::<S>::zeros((bs, c, h, w));
                for b in 0..bs {
                    for ci in 0..c {
                        let gv = g2[[b, ci]] * inv;
                        for y in 0..h {
                            for xi in 0..w {
                                dx[[b, ci, y, xi]] = gv;
                            }
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }
}

/// Numerically clipped probability used by the probability-space losses.
#[inline]
fn clip<S: Scalar>(p: S, eps: S) -> S {
    p.max(eps).min(S::one() - eps)
}

impl<S: Scalar> Tape<S> {
    /// Weighted mean binary cross entropy against constant targets.
    /// `weights` defaults to all ones; the caller must guarantee a positive
    /// total weight. Probabilities are clipped to `[eps, 1-eps]`.
    pub fn bce_mean(
        &self,
        probs: Var,
        targets: &ArrayD<S>,
        weights: Option<&ArrayD<S>>,
        eps: f64,
    ) -> Var {
        let p = self.value(probs);
        assert_eq!(p.shape(), targets.shape(), "bce target shape");
        let w = match weights {
            Some(w) => {
                assert_eq!(w.shape(), p.shape(), "bce weight shape");
                w.clone()
            }
            None => ArrayD::ones(p.raw_dim()),
        };
        let total_w: S = w.iter().cloned().sum();
        assert!(total_w > S::zero(), "bce needs positive total weight");
        let epss: S = s(eps);
        let t = targets.clone();
        let mut acc = S::zero();
        ndarray::Zip::from(&p).and(&t).and(&w).for_each(|&pv, &tv, &wv| {
            let pc = clip(pv, epss);
            acc += wv * (-(tv * pc.ln()) - (S::one() - tv) * (S::one() - pc).ln());
        });
        let loss = acc / total_w;
        self.op(
            ArrayD::from_elem(IxDyn(&[]), loss),
            vec![probs],
            Box::new(move |g, p, _| {
                let gv = *g.iter().next().expect("scalar grad") / total_w;
                let mut dx = ArrayD::zeros(p[0].raw_dim());
                ndarray::Zip::from(&mut dx)
                    .and(p[0])
                    .and(&t)
                    .and(&w)
                    .for_each(|d, &pv, &tv, &wv| {
                        if pv > epss && pv < S::one() - epss {
                            *d = gv * wv * (pv - tv) / (pv * (S::one() - pv));
                        }
                    });
                vec![Some(dx)]
            }),
        )
    }

    /// Weighted mean squared error against constant targets.
    pub fn mse_mean(&self, pred: Var, targets: &ArrayD<S>, weights: Option<&ArrayD<S>>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), targets.shape(), "mse target shape");
        let w = match weights {
            Some(w) => w.clone(),
            None => ArrayD::ones(p.raw_dim()),
        };
        let total_w: S = w.iter().cloned().sum();
        assert!(total_w > S::zero(), "mse needs positive total weight");
        let t = targets.clone();
        let mut acc = S::zero();
        ndarray::Zip::from(&p).and(&t).and(&w).for_each(|&pv, &tv, &wv| {
            let d = pv - tv;
            acc += wv * d * d;
        });
        let loss = acc / total_w;
        self.op(
            ArrayD::from_elem(IxDyn(&[]), loss),
            vec![pred],
            Box::new(move |g, p, _| {
                let gv = *g.iter().next().expect("scalar grad") / total_w;
                let two: S = s(2.0);
                let mut dx = ArrayD::zeros(p[0].raw_dim());
                ndarray::Zip::from(&mut dx).and(p[0]).and(&t).and(&w).for_each(
                    |d, &pv, &tv, &wv| {
                        *d = gv * wv * two * (pv - tv);
                    },
                );
                vec![Some(dx)]
            }),
        )
    }

    /// Weighted mean absolute error against constant targets.
    pub fn l1_mean(&self, pred: Var, targets: &ArrayD<S>, weights: Option<&ArrayD<S>>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), targets.shape(), "l1 target shape");
        let w = match weights {
            Some(w) => w.clone(),
            None => ArrayD::ones(p.raw_dim()),
        };
        let total_w: S = w.iter().cloned().sum();
        assert!(total_w > S::zero(), "l1 needs positive total weight");
        let t = targets.clone();
        let mut acc = S::zero();
        ndarray::Zip::from(&p).and(&t).and(&w).for_each(|&pv, &tv, &wv| {
            acc += wv * (pv - tv).abs();
        });
        let loss = acc / total_w;
        self.op(
            ArrayD::from_elem(IxDyn(&[]), loss),
            vec![pred],
            Box::new(move |g, p, _| {
                let gv = *g.iter().next().expect("scalar grad") / total_w;
                let mut dx = ArrayD::zeros(p[0].raw_dim());
                ndarray::Zip::from(&mut dx).and(p[0]).and(&t).and(&w).for_each(
                    |d, &pv, &tv, &wv| {
                        *d = if pv > tv {
                            gv * wv
                        } else if pv < tv {
                            -(gv * wv)
                        } else {
                            S::zero()
                        };
                    },
                );
                vec![Some(dx)]
            }),
        )
    }

    /// `mean(ln(clip(x, eps, 1)))`, the building block of the adversarial
    /// objective terms.
    pub fn log_mean(&self, x: Var, eps: f64) -> Var {
        let v = self.value(x);
        let n = v.len();
        let inv: S = s(1.0 / n as f64);
        let epss: S = s(eps);
        let loss = v.iter().map(|&p| clip(p, epss).ln()).sum::<S>() * inv;
        self.op(
            ArrayD::from_elem(IxDyn(&[]), loss),
            vec![x],
            Box::new(move |g, p, _| {
                let gv = *g.iter().next().expect("scalar grad") * inv;
                let mut dx = ArrayD::zeros(p[0].raw_dim());
                ndarray::Zip::from(&mut dx).and(p[0]).for_each(|d, &pv| {
                    if pv > epss && pv < S::one() - epss {
                        *d = gv / pv;
                    }
                });
                vec![Some(dx)]
            }),
        )
    }

    /// `mean(ln(clip(1 - x, eps, 1)))`.
    pub fn log1m_mean(&self, x: Var, eps: f64) -> Var {
        let v = self.value(x);
        let n = v.len();
        let inv: S = s(1.0 / n as f64);
        let epss: S = s(eps);
        let loss = v
            .iter()
            .map(|&p| clip(S::one() - p, epss).ln())
            .sum::<S>()
            * inv;
        self.op(
            ArrayD::from_elem(IxDyn(&[]), loss),
            vec![x],
            Box::new(move |g, p, _| {
                let gv = *g.iter().next().expect("scalar grad") * inv;
                let mut dx = ArrayD::zeros(p[0].raw_dim());
                ndarray::Zip::from(&mut dx).and(p[0]).for_each(|d, &pv| {
                    if pv > epss && pv < S::one() - epss {
                        *d = -gv / (S::one() - pv);
                    }
                });
                vec![Some(dx)]
            }),
        )
    }
}
