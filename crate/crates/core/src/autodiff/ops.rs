//! Differentiable operations on [`Var`].

use std::sync::Arc;

use ndarray::{ArrayD, ArrayView2, Axis, IxDyn, Slice};

use super::Var;

pub(crate) fn as_mat(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality()
        .expect("expected a rank-2 array")
}

pub(crate) fn reshaped(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    a.as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape: element count mismatch")
}

impl Var {
    pub fn add(&self, rhs: &Var) -> Var {
        assert_eq!(self.shape(), rhs.shape(), "add: shape mismatch");
        let value = self.value().clone() + rhs.value();
        self.graph().op(&[self, rhs], value, |g| {
            vec![Some(g.clone()), Some(g.clone())]
        })
    }

    pub fn sub(&self, rhs: &Var) -> Var {
        assert_eq!(self.shape(), rhs.shape(), "sub: shape mismatch");
        let value = self.value().clone() - rhs.value();
        self.graph().op(&[self, rhs], value, |g| {
            vec![Some(g.clone()), Some(-g.clone())]
        })
    }

    pub fn mul(&self, rhs: &Var) -> Var {
        assert_eq!(self.shape(), rhs.shape(), "mul: shape mismatch");
        let a = self.value.clone();
        let b = rhs.value.clone();
        let value = &*a * &*b;
        self.graph().op(&[self, rhs], value, move |g| {
            vec![Some(g * &*b), Some(g * &*a)]
        })
    }

    pub fn scale(&self, c: f64) -> Var {
        let value = self.value().mapv(|v| v * c);
        self.graph()
            .op(&[self], value, move |g| vec![Some(g.mapv(|v| v * c))])
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let value = self.value().mapv(|v| v + c);
        self.graph().op(&[self], value, |g| vec![Some(g.clone())])
    }

    /// Elementwise product with a fixed array (no gradient into the mask).
    pub fn mul_mask(&self, mask: ArrayD<f64>) -> Var {
        assert_eq!(self.shape(), mask.shape(), "mul_mask: shape mismatch");
        let value = self.value() * &mask;
        self.graph()
            .op(&[self], value, move |g| vec![Some(g * &mask)])
    }

    /// Add a fixed array (no gradient into the addend).
    pub fn add_const(&self, addend: &ArrayD<f64>) -> Var {
        assert_eq!(self.shape(), addend.shape(), "add_const: shape mismatch");
        let value = self.value() + addend;
        self.graph().op(&[self], value, |g| vec![Some(g.clone())])
    }

    /// Broadcast-add a length-C vector over the rows of an (R, C) matrix.
    pub fn add_rowvec(&self, v: &Var) -> Var {
        let &[_, c] = self.shape() else {
            panic!("add_rowvec: lhs must be rank 2")
        };
        assert_eq!(v.shape(), [c], "add_rowvec: vector length mismatch");
        let mut value = self.value().clone();
        {
            let vv = v.value();
            for mut row in as_mat_mut(&mut value).rows_mut() {
                for (x, w) in row.iter_mut().zip(vv.iter()) {
                    *x += w;
                }
            }
        }
        self.graph().op(&[self, v], value, move |g| {
            let gv = as_mat(g).sum_axis(Axis(0)).into_dyn();
            vec![Some(g.clone()), Some(gv)]
        })
    }

    pub fn relu(&self) -> Var {
        let x = self.value.clone();
        let value = x.mapv(|v| v.max(0.0));
        self.graph().op(&[self], value, move |g| {
            let mut dx = g.clone();
            dx.zip_mut_with(x.as_ref(), |d, &v| {
                if v <= 0.0 {
                    *d = 0.0;
                }
            });
            vec![Some(dx)]
        })
    }

    pub fn sum_all(&self) -> Var {
        let shape: Vec<usize> = self.shape().to_vec();
        let value = ArrayD::from_elem(IxDyn(&[]), self.value().sum());
        self.graph().op(&[self], value, move |g| {
            let gs = *g.iter().next().expect("scalar grad");
            vec![Some(ArrayD::from_elem(IxDyn(&shape), gs))]
        })
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// (M, K) x (K, N) matrix product.
    pub fn matmul(&self, rhs: &Var) -> Var {
        let a = self.value.clone();
        let b = rhs.value.clone();
        let value = as_mat(&a).dot(&as_mat(&b)).into_dyn();
        self.graph().op(&[self, rhs], value, move |g| {
            let gm = as_mat(g);
            let da = gm.dot(&as_mat(&b).t()).into_dyn();
            let db = as_mat(&a).t().dot(&gm).into_dyn();
            vec![Some(da), Some(db)]
        })
    }

    /// x (T, Din) -> x W^T + b, with W (Dout, Din) and optional bias (Dout).
    pub fn linear(&self, w: &Var, b: Option<&Var>) -> Var {
        let x = self.value.clone();
        let wv = w.value.clone();
        let mut value = as_mat(&x).dot(&as_mat(&wv).t()).into_dyn();
        if let Some(bias) = b {
            let bv = bias.value();
            for mut row in as_mat_mut(&mut value).rows_mut() {
                for (o, w) in row.iter_mut().zip(bv.iter()) {
                    *o += w;
                }
            }
        }
        let back = move |g: &ArrayD<f64>| {
            let gm = as_mat(g);
            let dx = gm.dot(&as_mat(&wv)).into_dyn();
            let dw = gm.t().dot(&as_mat(&x)).into_dyn();
            let db = gm.sum_axis(Axis(0)).into_dyn();
            vec![Some(dx), Some(dw), Some(db)]
        };
        match b {
            Some(bias) => self.graph().op(&[self, w, bias], value, back),
            None => self.graph().op(&[self, w], value, move |g| {
                let mut out = back(g);
                out.truncate(2);
                out
            }),
        }
    }

    /// Batched matrix product: (B, M, K) x (B, K, N) -> (B, M, N).
    pub fn bmm(&self, rhs: &Var) -> Var {
        let a = self.value.clone();
        let b = rhs.value.clone();
        let (ba, m, ka) = dims3(&a);
        let (bb, kb, n) = dims3(&b);
        assert_eq!(ba, bb, "bmm: batch mismatch");
        assert_eq!(ka, kb, "bmm: inner dim mismatch");
        let mut value = ArrayD::zeros(IxDyn(&[ba, m, n]));
        for i in 0..ba {
            let av = mat3(&a, i);
            let bv = mat3(&b, i);
            let out = av.dot(&bv);
            value
                .index_axis_mut(Axis(0), i)
                .assign(&out);
        }
        self.graph().op(&[self, rhs], value, move |g| {
            let mut da = ArrayD::zeros(a.raw_dim());
            let mut db = ArrayD::zeros(b.raw_dim());
            for i in 0..ba {
                let gv = mat3(g, i);
                da.index_axis_mut(Axis(0), i)
                    .assign(&gv.dot(&mat3(&b, i).t()));
                db.index_axis_mut(Axis(0), i)
                    .assign(&mat3(&a, i).t().dot(&gv));
            }
            vec![Some(da), Some(db)]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let old: Vec<usize> = self.shape().to_vec();
        let value = reshaped(self.value(), shape);
        self.graph()
            .op(&[self], value, move |g| vec![Some(reshaped(g, &old))])
    }

    /// Transpose a rank-2 array.
    pub fn t2(&self) -> Var {
        let value = as_mat(self.value()).t().as_standard_layout().into_owned().into_dyn();
        self.graph().op(&[self], value, |g| {
            vec![Some(as_mat(g).t().as_standard_layout().into_owned().into_dyn())]
        })
    }

    pub fn permute(&self, perm: &[usize]) -> Var {
        assert_eq!(perm.len(), self.shape().len(), "permute: rank mismatch");
        let perm_v = perm.to_vec();
        let mut inv = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let value = permuted(self.value(), &perm_v);
        self.graph()
            .op(&[self], value, move |g| vec![Some(permuted(g, &inv))])
    }

    /// Slice `len` indices starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let shape: Vec<usize> = self.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow: out of bounds");
        let value = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .as_standard_layout()
            .into_owned();
        self.graph().op(&[self], value, move |g| {
            let mut dx = ArrayD::zeros(IxDyn(&shape));
            dx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                .assign(g);
            vec![Some(dx)]
        })
    }

    /// Softmax over the last axis, any rank.
    pub fn softmax_lastdim(&self) -> Var {
        let mut value = self.value().clone();
        for mut lane in value.rows_mut() {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in lane.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in lane.iter_mut() {
                *v /= sum;
            }
        }
        let p = Arc::new(value.clone());
        self.graph().op(&[self], value, move |g| {
            let mut dx = g.clone();
            for (mut dlane, plane) in dx.rows_mut().into_iter().zip(p.rows()) {
                let dot: f64 = dlane.iter().zip(plane.iter()).map(|(d, p)| d * p).sum();
                for (d, p) in dlane.iter_mut().zip(plane.iter()) {
                    *d = p * (*d - dot);
                }
            }
            vec![Some(dx)]
        })
    }

    /// Layer normalization over the last axis with per-feature scale and shift.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Var {
        let d = *self.shape().last().expect("layer_norm: empty shape");
        assert_eq!(gamma.shape(), [d]);
        assert_eq!(beta.shape(), [d]);
        let gv = gamma.value.clone();
        let bv = beta.value.clone();
        let mut xhat = self.value().clone();
        let lanes = xhat.len() / d;
        let mut inv_sigma = Vec::with_capacity(lanes);
        for mut lane in xhat.rows_mut() {
            let mean = lane.sum() / d as f64;
            let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_sigma.push(inv);
            for v in lane.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let mut value = xhat.clone();
        for mut lane in value.rows_mut() {
            for (i, v) in lane.iter_mut().enumerate() {
                *v = *v * gv[[i]] + bv[[i]];
            }
        }
        let xhat = Arc::new(xhat);
        self.graph().op(&[self, gamma, beta], value, move |g| {
            let mut dgamma = ArrayD::zeros(IxDyn(&[d]));
            let mut dbeta = ArrayD::zeros(IxDyn(&[d]));
            let mut dx = g.clone();
            for ((mut glane, xlane), inv) in dx
                .rows_mut()
                .into_iter()
                .zip(xhat.rows())
                .zip(inv_sigma.iter())
            {
                // dgamma/dbeta accumulate over lanes; dx uses the standard
                // normalized-input backward.
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for (i, (gi, xi)) in glane.iter().zip(xlane.iter()).enumerate() {
                    dgamma[[i]] += gi * xi;
                    dbeta[[i]] += gi;
                    let di = gi * gv[[i]];
                    mean_d += di;
                    mean_dx += di * xi;
                }
                mean_d /= d as f64;
                mean_dx /= d as f64;
                for (i, (gi, xi)) in glane.iter_mut().zip(xlane.iter()).enumerate() {
                    let di = *gi * gv[[i]];
                    *gi = inv * (di - mean_d - xi * mean_dx);
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        })
    }

    /// Group normalization on a (C, H, W) map with per-channel scale and shift.
    pub fn group_norm(&self, groups: usize, gamma: &Var, beta: &Var, eps: f64) -> Var {
        let &[c, h, w] = self.shape() else {
            panic!("group_norm: expected (C, H, W)")
        };
        assert!(c % groups == 0, "group_norm: C not divisible by groups");
        assert_eq!(gamma.shape(), [c]);
        assert_eq!(beta.shape(), [c]);
        let gv = gamma.value.clone();
        let bv = beta.value.clone();
        let cg = c / groups;
        let m = (cg * h * w) as f64;

        let mut xhat = self.value().clone();
        let mut inv_sigma = Vec::with_capacity(groups);
        {
            let flat = xhat.as_slice_mut().expect("group_norm: non-contiguous");
            let stride = cg * h * w;
            for gix in 0..groups {
                let chunk = &mut flat[gix * stride..(gix + 1) * stride];
                let mean = chunk.iter().sum::<f64>() / m;
                let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                let inv = 1.0 / (var + eps).sqrt();
                inv_sigma.push(inv);
                for v in chunk.iter_mut() {
                    *v = (*v - mean) * inv;
                }
            }
        }
        let mut value = xhat.clone();
        for ci in 0..c {
            let (s, b) = (gv[[ci]], bv[[ci]]);
            value
                .index_axis_mut(Axis(0), ci)
                .mapv_inplace(|v| v * s + b);
        }
        let xhat = Arc::new(xhat);
        self.graph().op(&[self, gamma, beta], value, move |g| {
            let mut dgamma = ArrayD::zeros(IxDyn(&[c]));
            let mut dbeta = ArrayD::zeros(IxDyn(&[c]));
            for ci in 0..c {
                let gs = g.index_axis(Axis(0), ci);
                let xs = xhat.index_axis(Axis(0), ci);
                let mut dg = 0.0;
                let mut db = 0.0;
                for (gi, xi) in gs.iter().zip(xs.iter()) {
                    dg += gi * xi;
                    db += gi;
                }
                dgamma[[ci]] = dg;
                dbeta[[ci]] = db;
            }
            let mut dx = g.clone();
            {
                let dflat = dx.as_slice_mut().expect("grad non-contiguous");
                let xflat = xhat.as_slice().expect("xhat non-contiguous");
                let stride = cg * h * w;
                let hw = h * w;
                for gix in 0..groups {
                    let lo = gix * stride;
                    let inv = inv_sigma[gix];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for k in 0..stride {
                        let ci = gix * cg + k / hw;
                        let di = dflat[lo + k] * gv[[ci]];
                        mean_d += di;
                        mean_dx += di * xflat[lo + k];
                    }
                    mean_d /= m;
                    mean_dx /= m;
                    for k in 0..stride {
                        let ci = gix * cg + k / hw;
                        let di = dflat[lo + k] * gv[[ci]];
                        dflat[lo + k] = inv * (di - mean_d - xflat[lo + k] * mean_dx);
                    }
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        })
    }

    /// Negative log-softmax of the true class. Logits may be (K,) or (1, K).
    pub fn cross_entropy(&self, label: usize) -> Var {
        let logits = self.value.clone();
        let k = logits.len();
        assert!(label < k, "cross_entropy: label out of range");
        let flat: Vec<f64> = logits.iter().cloned().collect();
        let max = flat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + flat.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let value = ArrayD::from_elem(IxDyn(&[]), lse - flat[label]);
        let shape: Vec<usize> = logits.shape().to_vec();
        self.graph().op(&[self], value, move |g| {
            let gs = *g.iter().next().expect("scalar grad");
            let mut dx: Vec<f64> = flat.iter().map(|v| (v - lse).exp() * gs).collect();
            dx[label] -= gs;
            vec![Some(ArrayD::from_shape_vec(IxDyn(&shape), dx).unwrap())]
        })
    }
}

fn as_mat_mut(a: &mut ArrayD<f64>) -> ndarray::ArrayViewMut2<'_, f64> {
    a.view_mut()
        .into_dimensionality()
        .expect("expected a rank-2 array")
}

fn dims3(a: &ArrayD<f64>) -> (usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 3, "expected rank-3 array");
    (s[0], s[1], s[2])
}

fn mat3(a: &ArrayD<f64>, i: usize) -> ArrayView2<'_, f64> {
    a.index_axis(Axis(0), i)
        .into_dimensionality()
        .expect("rank-3 slice")
}

fn permuted(a: &ArrayD<f64>, perm: &[usize]) -> ArrayD<f64> {
    a.view()
        .permuted_axes(perm)
        .as_standard_layout()
        .into_owned()
}
