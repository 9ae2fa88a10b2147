//! Differentiable tensor operations.
//!
//! Each method evaluates its forward pass eagerly and records a backward rule
//! on the tape that owns its inputs.

use std::rc::Rc;

use crate::autodiff::Var;
use crate::error::TensorError;
use crate::tensor::{split_axis, Tensor};

type OpResult<'t> = Result<Var<'t>, TensorError>;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shape preserved")
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = a.data().iter().map(|&x| f(x)).collect();
    Tensor::new(a.shape(), data).expect("shape preserved")
}

/// `out[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`.
fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`.
fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * A * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

fn softmax_forward(x: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[at(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape(), out).expect("shape preserved")
}

impl<'t> Var<'t> {
    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Vec<usize>, TensorError> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::shape(
                op,
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        Ok(shape)
    }

    pub fn add(self, other: Var<'t>) -> OpResult<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let out = zip_map(&a, &b, |x, y| x + y);
        self.tape.push(
            "add",
            out,
            &[self, other],
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(self, other: Var<'t>) -> OpResult<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let out = zip_map(&a, &b, |x, y| x - y);
        self.tape.push(
            "sub",
            out,
            &[self, other],
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(map(g, |v| -v))]),
        )
    }

    pub fn mul(self, other: Var<'t>) -> OpResult<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = zip_map(&a, &b, |x, y| x * y);
        self.tape.push(
            "mul",
            out,
            &[self, other],
            Box::new(|g, xs, _, needs| {
                vec![
                    needs[0].then(|| zip_map(g, xs[1], |g, b| g * b)),
                    needs[1].then(|| zip_map(g, xs[0], |g, a| g * a)),
                ]
            }),
        )
    }

    pub fn div(self, other: Var<'t>) -> OpResult<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape("div", &a, &b)?;
        let out = zip_map(&a, &b, |x, y| x / y);
        self.tape.push(
            "div",
            out,
            &[self, other],
            Box::new(|g, xs, y, needs| {
                vec![
                    needs[0].then(|| zip_map(g, xs[1], |g, b| g / b)),
                    needs[1].then(|| {
                        let gy = zip_map(g, y, |g, y| g * y);
                        zip_map(&gy, xs[1], |gy, b| -gy / b)
                    }),
                ]
            }),
        )
    }

    pub fn scale(self, s: f64) -> OpResult<'t> {
        let out = map(&self.value(), |x| x * s);
        self.tape.push(
            "scale",
            out,
            &[self],
            Box::new(move |g, _, _, _| vec![Some(map(g, |v| v * s))]),
        )
    }

    pub fn add_scalar(self, s: f64) -> OpResult<'t> {
        let out = map(&self.value(), |x| x + s);
        self.tape.push(
            "add_scalar",
            out,
            &[self],
            Box::new(|g, _, _, _| vec![Some(g.clone())]),
        )
    }

    /// Adds a vector along `axis`, broadcasting over every other axis.
    pub fn add_bias(self, bias: Var<'t>, axis: usize) -> OpResult<'t> {
        let shape = self.check_axis("add_bias", axis)?;
        let b = bias.value();
        let (outer, n, inner) = split_axis(&shape, axis);
        if b.len() != n {
            return Err(TensorError::shape(
                "add_bias",
                format!("bias of {} values for axis extent {n}", b.len()),
            ));
        }
        let mut out = self.value().as_ref().clone();
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for v in &mut out.data_mut()[base..base + inner] {
                    *v += b.data()[j];
                }
            }
        }
        let bshape = b.shape().to_vec();
        self.tape.push(
            "add_bias",
            out,
            &[self, bias],
            Box::new(move |g, _, _, needs| {
                let gb = needs[1].then(|| {
                    let mut acc = vec![0.0; n];
                    for o in 0..outer {
                        for (j, a) in acc.iter_mut().enumerate() {
                            let base = (o * n + j) * inner;
                            *a += g.data()[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    Tensor::new(&bshape, acc).expect("bias shape")
                });
                vec![Some(g.clone()), gb]
            }),
        )
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(self, other: Var<'t>) -> OpResult<'t> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(a.data(), b.data(), &mut out, m, k, n);
        let out = Tensor::new(&[m, n], out)?;
        self.tape.push(
            "matmul",
            out,
            &[self, other],
            Box::new(move |g, xs, _, needs| {
                let ga = needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    matmul_nt_acc(g.data(), xs[1].data(), &mut d, m, k, n);
                    Tensor::new(&[m, k], d).expect("matmul grad")
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    matmul_tn_acc(xs[0].data(), g.data(), &mut d, m, k, n);
                    Tensor::new(&[k, n], d).expect("matmul grad")
                });
                vec![ga, gb]
            }),
        )
    }

    /// Batched matrix product of `[B×m×k]` and `[B×k×n]`.
    pub fn bmm(self, other: Var<'t>) -> OpResult<'t> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::shape("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            matmul_acc(
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let out = Tensor::new(&[bs, m, n], out)?;
        self.tape.push(
            "bmm",
            out,
            &[self, other],
            Box::new(move |g, xs, _, needs| {
                let ga = needs[0].then(|| {
                    let mut d = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        matmul_nt_acc(
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &xs[1].data()[i * k * n..(i + 1) * k * n],
                            &mut d[i * m * k..(i + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                    Tensor::new(&[bs, m, k], d).expect("bmm grad")
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        matmul_tn_acc(
                            &xs[0].data()[i * m * k..(i + 1) * m * k],
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &mut d[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    Tensor::new(&[bs, k, n], d).expect("bmm grad")
                });
                vec![ga, gb]
            }),
        )
    }

    /// `out[i] = self[index[i]]` with `out` taking `shape`. Backward scatter-adds.
    pub fn gather(self, shape: &[usize], index: Rc<[usize]>) -> OpResult<'t> {
        let x = self.value();
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(TensorError::shape(
                "gather",
                format!("shape {shape:?} needs {n} indices, got {}", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return Err(TensorError::shape(
                "gather",
                format!("index {bad} out of range for {} values", x.len()),
            ));
        }
        let data = index.iter().map(|&i| x.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        let src_shape = x.shape().to_vec();
        self.tape.push(
            "gather",
            out,
            &[self],
            Box::new(move |g, _, _, _| {
                let mut d = Tensor::zeros(&src_shape);
                for (&i, &gv) in index.iter().zip(g.data()) {
                    d.data_mut()[i] += gv;
                }
                vec![Some(d)]
            }),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> OpResult<'t> {
        let out = self.value().reshape(shape)?;
        let src_shape = self.shape();
        self.tape.push(
            "reshape",
            out,
            &[self],
            Box::new(move |g, _, _, _| vec![Some(g.reshape(&src_shape).expect("reshape grad"))]),
        )
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> OpResult<'t> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::shape(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", shape.len()),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut in_strides = vec![1; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let n: usize = shape.iter().product();
        let mut index = Vec::with_capacity(n);
        let mut counter = vec![0usize; shape.len()];
        for _ in 0..n {
            index.push(counter.iter().zip(perm).map(|(&c, &p)| c * in_strides[p]).sum());
            for ax in (0..counter.len()).rev() {
                counter[ax] += 1;
                if counter[ax] < out_shape[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        self.gather(&out_shape, index.into())
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(self) -> OpResult<'t> {
        self.permute(&[1, 0])
    }

    pub fn softmax(self, axis: usize) -> OpResult<'t> {
        self.check_axis("softmax", axis)?;
        let out = softmax_forward(&self.value(), axis);
        self.tape.push(
            "softmax",
            out,
            &[self],
            Box::new(move |g, _, y, _| {
                let (outer, n, inner) = split_axis(y.shape(), axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot: f64 = (0..n).map(|j| g.data()[at(j)] * y.data()[at(j)]).sum();
                        for j in 0..n {
                            d[at(j)] = y.data()[at(j)] * (g.data()[at(j)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::new(y.shape(), d).expect("softmax grad"))]
            }),
        )
    }

    pub fn log_softmax(self, axis: usize) -> OpResult<'t> {
        self.check_axis("log_softmax", axis)?;
        let x = self.value();
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| x.data()[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|j| (x.data()[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..n {
                    out[at(j)] = x.data()[at(j)] - lse;
                }
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        self.tape.push(
            "log_softmax",
            out,
            &[self],
            Box::new(move |g, _, y, _| {
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let total: f64 = (0..n).map(|j| g.data()[at(j)]).sum();
                        for j in 0..n {
                            d[at(j)] = g.data()[at(j)] - y.data()[at(j)].exp() * total;
                        }
                    }
                }
                vec![Some(Tensor::new(y.shape(), d).expect("log_softmax grad"))]
            }),
        )
    }

    /// Normalizes along `axis` to zero mean and unit (biased) variance, then applies
    /// `gamma`/`beta` indexed by position along that axis.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, axis: usize, eps: f64) -> OpResult<'t> {
        let shape = self.check_axis("layer_norm", axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let (gm, bt) = (gamma.value(), beta.value());
        if gm.len() != n || bt.len() != n {
            return Err(TensorError::shape(
                "layer_norm",
                format!("gamma/beta of {}/{} values for extent {n}", gm.len(), bt.len()),
            ));
        }
        let x = self.value();
        let mut normed = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; outer * inner];
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mean = (0..n).map(|j| x.data()[at(j)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|j| (x.data()[at(j)] - mean).powi(2)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = r;
                for j in 0..n {
                    let h = (x.data()[at(j)] - mean) * r;
                    normed[at(j)] = h;
                    out[at(j)] = gm.data()[j] * h + bt.data()[j];
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        let pshape = gm.shape().to_vec();
        self.tape.push(
            "layer_norm",
            out,
            &[self, gamma, beta],
            Box::new(move |g, xs, _, needs| {
                let gm = xs[1];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dx = vec![0.0; normed.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            let gv = g.data()[at(j)];
                            let h = normed[at(j)];
                            dgamma[j] += gv * h;
                            dbeta[j] += gv;
                            let dh = gv * gm.data()[j];
                            mean_dh += dh;
                            mean_dh_h += dh * h;
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        let r = inv_std[o * inner + i];
                        for j in 0..n {
                            let dh = g.data()[at(j)] * gm.data()[j];
                            dx[at(j)] = r * (dh - mean_dh - normed[at(j)] * mean_dh_h);
                        }
                    }
                }
                vec![
                    needs[0].then(|| Tensor::new(&shape, dx).expect("ln grad")),
                    needs[1].then(|| Tensor::new(&pshape, dgamma).expect("ln grad")),
                    needs[2].then(|| Tensor::new(&pshape, dbeta).expect("ln grad")),
                ]
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> OpResult<'t> {
        let out = map(&self.value(), |x| gelu_parts(x).0);
        self.tape.push(
            "gelu",
            out,
            &[self],
            Box::new(|g, xs, _, _| vec![Some(zip_map(g, xs[0], |g, x| g * gelu_parts(x).1))]),
        )
    }

    /// Same-padded cross-correlation of `[C×H×W]` with `[C'×C×k×k]` plus per-channel bias.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>) -> OpResult<'t> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (sx, sw) = (x.shape().to_vec(), w.shape().to_vec());
        if sx.len() != 3 || sw.len() != 4 {
            return Err(TensorError::shape("conv2d", format!("input {sx:?}, kernel {sw:?}")));
        }
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let (co, ci, k) = (sw[0], sw[1], sw[2]);
        if ci != c || sw[3] != k || k % 2 == 0 || b.len() != co {
            return Err(TensorError::shape(
                "conv2d",
                format!("input {sx:?}, kernel {sw:?}, bias {:?}", b.shape()),
            ));
        }
        let pad = (k / 2) as isize;
        let taps = move |oi: usize, oj: usize| {
            (0..k).flat_map(move |di| (0..k).map(move |dj| (di, dj))).filter_map(move |(di, dj)| {
                let ii = oi as isize + di as isize - pad;
                let jj = oj as isize + dj as isize - pad;
                (ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd)
                    .then_some((di, dj, ii as usize, jj as usize))
            })
        };
        let mut out = vec![0.0; co * h * wd];
        for o in 0..co {
            for oi in 0..h {
                for oj in 0..wd {
                    let mut acc = b.data()[o];
                    for (di, dj, ii, jj) in taps(oi, oj) {
                        for cc in 0..c {
                            acc += w.data()[((o * c + cc) * k + di) * k + dj] * x.data()[(cc * h + ii) * wd + jj];
                        }
                    }
                    out[(o * h + oi) * wd + oj] = acc;
                }
            }
        }
        let out = Tensor::new(&[co, h, wd], out)?;
        self.tape.push(
            "conv2d",
            out,
            &[self, weight, bias],
            Box::new(move |g, xs, _, needs| {
                let (x, w) = (xs[0], xs[1]);
                let mut dx = vec![0.0; c * h * wd];
                let mut dw = vec![0.0; co * c * k * k];
                let mut db = vec![0.0; co];
                for o in 0..co {
                    for oi in 0..h {
                        for oj in 0..wd {
                            let gv = g.data()[(o * h + oi) * wd + oj];
                            db[o] += gv;
                            for (di, dj, ii, jj) in taps(oi, oj) {
                                for cc in 0..c {
                                    let wi = ((o * c + cc) * k + di) * k + dj;
                                    let xi = (cc * h + ii) * wd + jj;
                                    dx[xi] += gv * w.data()[wi];
                                    dw[wi] += gv * x.data()[xi];
                                }
                            }
                        }
                    }
                }
                vec![
                    needs[0].then(|| Tensor::new(&[c, h, wd], dx).expect("conv grad")),
                    needs[1].then(|| Tensor::new(&[co, c, k, k], dw).expect("conv grad")),
                    needs[2].then(|| Tensor::new(&[co], db).expect("conv grad")),
                ]
            }),
        )
    }

    pub fn sum(self) -> OpResult<'t> {
        let x = self.value();
        let out = Tensor::scalar(x.data().iter().sum());
        let shape = x.shape().to_vec();
        self.tape.push(
            "sum",
            out,
            &[self],
            Box::new(move |g, _, _, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(self) -> OpResult<'t> {
        let n = self.value().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sums out `axis`, removing it from the shape (a rank-1 input yields shape `[1]`).
    pub fn sum_axis(self, axis: usize) -> OpResult<'t> {
        let shape = self.check_axis("sum_axis", axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += x.data()[(o * n + j) * inner + i];
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.iter().enumerate().filter(|&(a, _)| a != axis).map(|(_, &d)| d).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::new(&out_shape, out)?;
        self.tape.push(
            "sum_axis",
            out,
            &[self],
            Box::new(move |g, _, _, _| {
                let mut d = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            d[(o * n + j) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                vec![Some(Tensor::new(&shape, d).expect("sum_axis grad"))]
            }),
        )
    }

    /// Mean over the spatial axes of a `[C×H×W]` map, giving `[C×1×1]`.
    pub fn gap_mean(self) -> OpResult<'t> {
        let shape = self.shape();
        if shape.len() != 3 {
            return Err(TensorError::shape("gap_mean", format!("expected C×H×W, got {shape:?}")));
        }
        let hw = shape[1] * shape[2];
        self.reshape(&[shape[0], hw])?
            .sum_axis(1)?
            .scale(1.0 / hw as f64)?
            .reshape(&[shape[0], 1, 1])
    }

    /// Nearest-neighbour upsampling of a `[C×H×W]` map by an integer factor.
    pub fn upsample(self, factor: usize) -> OpResult<'t> {
        let shape = self.shape();
        if shape.len() != 3 || factor == 0 {
            return Err(TensorError::shape(
                "upsample",
                format!("shape {shape:?}, factor {factor}"),
            ));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (oh, ow) = (h * factor, w * factor);
        let mut index = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    index.push((ch * h + i / factor) * w + j / factor);
                }
            }
        }
        self.gather(&[c, oh, ow], index.into())
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> OpResult<'t> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
    let tape = first.tape;
    let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
    let base = &shapes[0];
    if axis >= base.len() {
        return Err(TensorError::shape("concat", format!("axis {axis} for {base:?}")));
    }
    for s in &shapes[1..] {
        let ok = s.len() == base.len() && s.iter().zip(base).enumerate().all(|(a, (x, y))| a == axis || x == y);
        if !ok {
            return Err(TensorError::shape("concat", format!("{base:?} vs {s:?}")));
        }
    }
    let extents: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
    let total: usize = extents.iter().sum();
    let (outer, _, inner) = split_axis(base, axis);
    let mut out_shape = base.clone();
    out_shape[axis] = total;
    let mut out = vec![0.0; outer * total * inner];
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    for o in 0..outer {
        let mut offset = 0;
        for (v, &e) in values.iter().zip(&extents) {
            let src = &v.data()[o * e * inner..(o + 1) * e * inner];
            let dst = (o * total + offset) * inner;
            out[dst..dst + e * inner].copy_from_slice(src);
            offset += e;
        }
    }
    let out = Tensor::new(&out_shape, out)?;
    tape.push(
        "concat",
        out,
        parts,
        Box::new(move |g, _, _, needs| {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(extents.len());
            for (p, &e) in extents.iter().enumerate() {
                if needs[p] {
                    let mut d = Vec::with_capacity(outer * e * inner);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[src..src + e * inner]);
                    }
                    let mut shape = out_shape.clone();
                    shape[axis] = e;
                    grads.push(Some(Tensor::new(&shape, d).expect("concat grad")));
                } else {
                    grads.push(None);
                }
                offset += e;
            }
            grads
        }),
    )
}
