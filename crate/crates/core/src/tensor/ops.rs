use ndarray::{ArrayView2, ArrayViewMut2};

use super::{numel, Tensor};
use crate::error::{Error, Result};

fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Row-major strides of `src` aligned to `out`, zeroed on broadcast axes.
fn broadcast_src_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let native = strides_for(src);
    let rank = out.len();
    let offset = rank - src.len();
    let mut s = vec![0usize; rank];
    for i in 0..src.len() {
        s[offset + i] = if src[i] == 1 { 0 } else { native[i] };
    }
    s
}

/// Calls `f(out_linear, src_linear)` for every element of `out_shape`,
/// where `src_linear` follows the (possibly zero) strides.
fn for_each_broadcast(out_shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(out_shape);
    if total == 0 {
        return;
    }
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src_off = 0usize;
    for out_off in 0..total {
        f(out_off, src_off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src_off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src_off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn binary(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: fn(f64, f64) -> f64,
    dfa: fn(f64, f64) -> f64,
    dfb: fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let ashape = a.shape();
    let bshape = b.shape();
    let out_shape = broadcast_shapes(op, &ashape, &bshape)?;
    let a_str = broadcast_src_strides(&ashape, &out_shape);
    let b_str = broadcast_src_strides(&bshape, &out_shape);
    let total = numel(&out_shape);
    let mut values = vec![0.0; total];
    {
        let av = a.values();
        let bv = b.values();
        if ashape == out_shape && bshape == out_shape {
            for i in 0..total {
                values[i] = f(av[i], bv[i]);
            }
        } else {
            let mut boff = vec![0usize; total];
            for_each_broadcast(&out_shape, &b_str, |o, s| boff[o] = s);
            for_each_broadcast(&out_shape, &a_str, |o, s| {
                values[o] = f(av[s], bv[boff[o]]);
            });
        }
    }
    let (ac, bc) = (a.clone(), b.clone());
    let shape_c = out_shape.clone();
    Ok(Tensor::from_op(
        out_shape,
        values,
        vec![a.clone(), b.clone()],
        move |g| {
            let av = ac.to_vec();
            let bv = bc.to_vec();
            let mut aoff = vec![0usize; g.len()];
            let mut boff = vec![0usize; g.len()];
            for_each_broadcast(&shape_c, &a_str, |o, s| aoff[o] = s);
            for_each_broadcast(&shape_c, &b_str, |o, s| boff[o] = s);
            if ac.requires_grad() {
                let mut ga = vec![0.0; av.len()];
                for o in 0..g.len() {
                    ga[aoff[o]] += g[o] * dfa(av[aoff[o]], bv[boff[o]]);
                }
                ac.accumulate_grad(&ga);
            }
            if bc.requires_grad() {
                let mut gb = vec![0.0; bv.len()];
                for o in 0..g.len() {
                    gb[boff[o]] += g[o] * dfb(av[aoff[o]], bv[boff[o]]);
                }
                bc.accumulate_grad(&gb);
            }
        },
    ))
}

fn unary(x: &Tensor, f: fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Tensor {
    let xv = x.to_vec();
    let values: Vec<f64> = xv.iter().map(|&v| f(v)).collect();
    let out_vals = values.clone();
    let xc = x.clone();
    Tensor::from_op(x.shape(), values, vec![x.clone()], move |g| {
        let xv = xc.to_vec();
        let gx: Vec<f64> = g
            .iter()
            .zip(xv.iter().zip(out_vals.iter()))
            .map(|(&g, (&x, &y))| g * df(x, y))
            .collect();
        xc.accumulate_grad(&gx);
    })
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(
            self,
            other,
            "div",
            |a, b| a / b,
            |_, b| 1.0 / b,
            |a, b| -a / (b * b),
        )
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        unary(self, f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self) -> Tensor {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Tensor {
        unary(self, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn neg(&self) -> Tensor {
        unary(self, |x| -x, |_, _| -1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let xv = self.to_vec();
        let values: Vec<f64> = xv.iter().map(|&v| c * v).collect();
        let xc = self.clone();
        Tensor::from_op(self.shape(), values, vec![self.clone()], move |g| {
            let gx: Vec<f64> = g.iter().map(|&g| c * g).collect();
            xc.accumulate_grad(&gx);
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let values: Vec<f64> = self.to_vec().iter().map(|&v| v + c).collect();
        let xc = self.clone();
        Tensor::from_op(self.shape(), values, vec![self.clone()], move |g| {
            xc.accumulate_grad(g);
        })
    }

    /// Clamps values to `[lo, hi]`; gradient is zero outside the closed band.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let xv = self.to_vec();
        let values: Vec<f64> = xv.iter().map(|&v| v.clamp(lo, hi)).collect();
        let xc = self.clone();
        Tensor::from_op(self.shape(), values, vec![self.clone()], move |g| {
            let xv = xc.to_vec();
            let gx: Vec<f64> = g
                .iter()
                .zip(xv.iter())
                .map(|(&g, &x)| if (lo..=hi).contains(&x) { g } else { 0.0 })
                .collect();
            xc.accumulate_grad(&gx);
        })
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(),
                rhs: shape,
            });
        }
        let xc = self.clone();
        Ok(Tensor::from_op(
            shape,
            self.to_vec(),
            vec![self.clone()],
            move |g| xc.accumulate_grad(g),
        ))
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose2",
                lhs: shape,
                rhs: vec![0, 0],
            });
        }
        let (m, n) = (shape[0], shape[1]);
        let xv = self.to_vec();
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                values[j * m + i] = xv[i * n + j];
            }
        }
        let xc = self.clone();
        Ok(Tensor::from_op(
            vec![n, m],
            values,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] = g[j * m + i];
                    }
                }
                xc.accumulate_grad(&gx);
            },
        ))
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.values().iter().sum();
        let xc = self.clone();
        let n = self.numel();
        Tensor::from_op(vec![], vec![s], vec![self.clone()], move |g| {
            xc.accumulate_grad(&vec![g[0]; n]);
        })
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::EmptyInput("mean of empty tensor"));
        }
        Ok(self.sum_all().scale(1.0 / n as f64))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "sum_axis {} out of range for rank {}",
                axis,
                shape.len()
            )));
        }
        let (pre, mid, post) = split3(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let mut values = vec![0.0; pre * post];
        {
            let xv = self.values();
            for p in 0..pre {
                for a in 0..mid {
                    let base = (p * mid + a) * post;
                    for s in 0..post {
                        values[p * post + s] += xv[base + s];
                    }
                }
            }
        }
        let xc = self.clone();
        Ok(Tensor::from_op(
            out_shape,
            values,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![0.0; pre * mid * post];
                for p in 0..pre {
                    for a in 0..mid {
                        let base = (p * mid + a) * post;
                        for s in 0..post {
                            gx[base + s] = g[p * post + s];
                        }
                    }
                }
                xc.accumulate_grad(&gx);
            },
        ))
    }

    /// Max-reduction removing `axis`; ties keep the lowest index so the
    /// gradient routing is deterministic. Gradient mass is conserved.
    pub fn maxpool(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "maxpool axis {} out of range for rank {}",
                axis,
                shape.len()
            )));
        }
        let (pre, mid, post) = split3(&shape, axis);
        if mid == 0 {
            return Err(Error::EmptyInput("maxpool over empty axis"));
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let mut values = vec![f64::NEG_INFINITY; pre * post];
        let mut argmax = vec![0usize; pre * post];
        {
            let xv = self.values();
            for p in 0..pre {
                for a in 0..mid {
                    let base = (p * mid + a) * post;
                    for s in 0..post {
                        let o = p * post + s;
                        if xv[base + s] > values[o] {
                            values[o] = xv[base + s];
                            argmax[o] = a;
                        }
                    }
                }
            }
        }
        let xc = self.clone();
        Ok(Tensor::from_op(
            out_shape,
            values,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![0.0; pre * mid * post];
                for p in 0..pre {
                    for s in 0..post {
                        let o = p * post + s;
                        gx[(p * mid + argmax[o]) * post + s] = g[o];
                    }
                }
                xc.accumulate_grad(&gx);
            },
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {} out of range for rank {}",
                axis,
                shape.len()
            )));
        }
        let (pre, mid, post) = split3(&shape, axis);
        if mid == 0 {
            return Err(Error::EmptyInput("softmax over empty axis"));
        }
        let mut values = vec![0.0; pre * mid * post];
        {
            let xv = self.values();
            for p in 0..pre {
                for s in 0..post {
                    let at = |a: usize| (p * mid + a) * post + s;
                    let mut m = f64::NEG_INFINITY;
                    for a in 0..mid {
                        m = m.max(xv[at(a)]);
                    }
                    let mut z = 0.0;
                    for a in 0..mid {
                        let e = (xv[at(a)] - m).exp();
                        values[at(a)] = e;
                        z += e;
                    }
                    for a in 0..mid {
                        values[at(a)] /= z;
                    }
                }
            }
        }
        let yv = values.clone();
        let xc = self.clone();
        Ok(Tensor::from_op(
            shape,
            values,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![0.0; yv.len()];
                for p in 0..pre {
                    for s in 0..post {
                        let at = |a: usize| (p * mid + a) * post + s;
                        let mut dot = 0.0;
                        for a in 0..mid {
                            dot += g[at(a)] * yv[at(a)];
                        }
                        for a in 0..mid {
                            gx[at(a)] = yv[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                xc.accumulate_grad(&gx);
            },
        ))
    }

    /// Euclidean norm over `axis` (removed), or over all elements when
    /// `axis` is `None` (scalar output).
    pub fn l2norm(&self, axis: Option<usize>) -> Result<Tensor> {
        let shape = self.shape();
        let (pre, mid, post, out_shape) = match axis {
            None => (1, self.numel(), 1, vec![]),
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::InvalidArgument(format!(
                        "l2norm axis {} out of range for rank {}",
                        ax,
                        shape.len()
                    )));
                }
                let (pre, mid, post) = split3(&shape, ax);
                let mut os = shape.clone();
                os.remove(ax);
                (pre, mid, post, os)
            }
        };
        let mut values = vec![0.0; pre * post];
        {
            let xv = self.values();
            for p in 0..pre {
                for a in 0..mid {
                    let base = (p * mid + a) * post;
                    for s in 0..post {
                        values[p * post + s] += xv[base + s] * xv[base + s];
                    }
                }
            }
        }
        for v in &mut values {
            *v = v.sqrt();
        }
        let yv = values.clone();
        let xc = self.clone();
        Ok(Tensor::from_op(
            out_shape,
            values,
            vec![self.clone()],
            move |g| {
                let xv = xc.to_vec();
                let mut gx = vec![0.0; xv.len()];
                for p in 0..pre {
                    for a in 0..mid {
                        let base = (p * mid + a) * post;
                        for s in 0..post {
                            let o = p * post + s;
                            if yv[o] > 0.0 {
                                gx[base + s] = g[o] * xv[base + s] / yv[o];
                            }
                        }
                    }
                }
                xc.accumulate_grad(&gx);
            },
        ))
    }

    /// Vector scaled to unit Euclidean length (whole tensor treated as one
    /// vector). Degenerate inputs (norm below 1e-300) error.
    pub fn normalize_vec(&self) -> Result<Tensor> {
        let n: f64 = self.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 1e-300) {
            return Err(Error::Degenerate("cannot normalize zero-length vector".into()));
        }
        self.div(&self.l2norm(None)?)
    }

    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        if tensors.is_empty() {
            return Err(Error::EmptyInput("concat of zero tensors"));
        }
        let first = tensors[0].shape();
        if axis >= first.len() {
            return Err(Error::InvalidArgument(format!(
                "concat axis {} out of range for rank {}",
                axis,
                first.len()
            )));
        }
        let mut mids = Vec::with_capacity(tensors.len());
        for t in tensors {
            let s = t.shape();
            let mut a = s.clone();
            let mut b = first.clone();
            a.remove(axis);
            b.remove(axis);
            if s.len() != first.len() || a != b {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s,
                });
            }
            mids.push(s[axis]);
        }
        let (pre, _, post) = split3(&first, axis);
        let total_mid: usize = mids.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total_mid;
        let mut values = vec![0.0; pre * total_mid * post];
        let mut offset = 0usize;
        for (t, &mid) in tensors.iter().zip(&mids) {
            let tv = t.values();
            for p in 0..pre {
                for a in 0..mid {
                    let src = (p * mid + a) * post;
                    let dst = (p * total_mid + offset + a) * post;
                    values[dst..dst + post].copy_from_slice(&tv[src..src + post]);
                }
            }
            offset += mid;
        }
        let parents: Vec<Tensor> = tensors.to_vec();
        let parents_c = parents.clone();
        Ok(Tensor::from_op(out_shape, values, parents, move |g| {
            let mut offset = 0usize;
            for (t, &mid) in parents_c.iter().zip(&mids) {
                if t.requires_grad() {
                    let mut gt = vec![0.0; pre * mid * post];
                    for p in 0..pre {
                        for a in 0..mid {
                            let dst = (p * mid + a) * post;
                            let src = (p * total_mid + offset + a) * post;
                            gt[dst..dst + post].copy_from_slice(&g[src..src + post]);
                        }
                    }
                    t.accumulate_grad(&gt);
                }
                offset += mid;
            }
        }))
    }

    /// Takes slices along `axis`; the axis is replaced by the dimensions of
    /// `idx_shape`. Backward scatter-adds into the source.
    pub fn gather(&self, axis: usize, indices: &[usize], idx_shape: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "gather axis {} out of range for rank {}",
                axis,
                shape.len()
            )));
        }
        if numel(idx_shape) != indices.len() {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: idx_shape.to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let (pre, mid, post) = split3(&shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= mid) {
            return Err(Error::InvalidArgument(format!(
                "gather index {} out of range for axis length {}",
                bad, mid
            )));
        }
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend_from_slice(idx_shape);
        out_shape.extend_from_slice(&shape[axis + 1..]);
        let k = indices.len();
        let mut values = vec![0.0; pre * k * post];
        {
            let xv = self.values();
            for p in 0..pre {
                for (i, &a) in indices.iter().enumerate() {
                    let src = (p * mid + a) * post;
                    let dst = (p * k + i) * post;
                    values[dst..dst + post].copy_from_slice(&xv[src..src + post]);
                }
            }
        }
        let idx: Vec<usize> = indices.to_vec();
        let xc = self.clone();
        Ok(Tensor::from_op(
            out_shape,
            values,
            vec![self.clone()],
            move |g| {
                let mut gx = vec![0.0; pre * mid * post];
                for p in 0..pre {
                    for (i, &a) in idx.iter().enumerate() {
                        let dst = (p * mid + a) * post;
                        let src = (p * k + i) * post;
                        for s in 0..post {
                            gx[dst + s] += g[src + s];
                        }
                    }
                }
                xc.accumulate_grad(&gx);
            },
        ))
    }

    pub fn matmul2(&self, other: &Tensor) -> Result<Tensor> {
        let a = self.shape();
        let b = other.shape();
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul2",
                lhs: a,
                rhs: b,
            });
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut values = vec![0.0; m * n];
        {
            let av = self.values();
            let bv = other.values();
            matmul_into(&av, m, k, &bv, n, &mut values);
        }
        let (ac, bc) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            values,
            vec![self.clone(), other.clone()],
            move |g| {
                let av = ac.to_vec();
                let bv = bc.to_vec();
                if ac.requires_grad() {
                    // ga = g · bᵀ
                    let mut ga = vec![0.0; m * k];
                    matmul_bt_into(g, m, n, &bv, k, &mut ga);
                    ac.accumulate_grad(&ga);
                }
                if bc.requires_grad() {
                    // gb = aᵀ · g
                    let mut gb = vec![0.0; k * n];
                    matmul_at_into(&av, m, k, g, n, &mut gb);
                    bc.accumulate_grad(&gb);
                }
            },
        ))
    }

    /// Batched 3-vector cross product over the last axis (length 3).
    pub fn cross3(&self, other: &Tensor) -> Result<Tensor> {
        let shape = self.shape();
        if shape != other.shape() || shape.last() != Some(&3) {
            return Err(Error::ShapeMismatch {
                op: "cross3",
                lhs: shape,
                rhs: other.shape(),
            });
        }
        let rows = self.numel() / 3;
        let mut values = vec![0.0; self.numel()];
        {
            let av = self.values();
            let bv = other.values();
            for r in 0..rows {
                let o = r * 3;
                cross_into(&av[o..o + 3], &bv[o..o + 3], &mut values[o..o + 3]);
            }
        }
        let (ac, bc) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            shape,
            values,
            vec![self.clone(), other.clone()],
            move |g| {
                let av = ac.to_vec();
                let bv = bc.to_vec();
                if ac.requires_grad() {
                    let mut ga = vec![0.0; av.len()];
                    for r in 0..rows {
                        let o = r * 3;
                        cross_into(&bv[o..o + 3], &g[o..o + 3], &mut ga[o..o + 3]);
                    }
                    ac.accumulate_grad(&ga);
                }
                if bc.requires_grad() {
                    let mut gb = vec![0.0; bv.len()];
                    for r in 0..rows {
                        let o = r * 3;
                        cross_into(&g[o..o + 3], &av[o..o + 3], &mut gb[o..o + 3]);
                    }
                    bc.accumulate_grad(&gb);
                }
            },
        ))
    }

    /// Rotation matrix `[3,3]` (row-major) of a unit quaternion `[w,x,y,z]`.
    /// Acts on column vectors as `R·v`; for row conventions use `v·Rᵀ`.
    pub fn unit_quat_to_rotmat(&self) -> Result<Tensor> {
        if self.shape() != [4] {
            return Err(Error::ShapeMismatch {
                op: "unit_quat_to_rotmat",
                lhs: self.shape(),
                rhs: vec![4],
            });
        }
        let q = self.to_vec();
        let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
        let values = vec![
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ];
        let qc = self.clone();
        Ok(Tensor::from_op(
            vec![3, 3],
            values,
            vec![self.clone()],
            move |g| {
                let q = qc.to_vec();
                let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
                #[rustfmt::skip]
                let d = [
                    // dR/dw
                    [0.0, -2.0 * z, 2.0 * y,
                     2.0 * z, 0.0, -2.0 * x,
                     -2.0 * y, 2.0 * x, 0.0],
                    // dR/dx
                    [0.0, 2.0 * y, 2.0 * z,
                     2.0 * y, -4.0 * x, -2.0 * w,
                     2.0 * z, 2.0 * w, -4.0 * x],
                    // dR/dy
                    [-4.0 * y, 2.0 * x, 2.0 * w,
                     2.0 * x, 0.0, 2.0 * z,
                     -2.0 * w, 2.0 * z, -4.0 * y],
                    // dR/dz
                    [-4.0 * z, -2.0 * w, 2.0 * x,
                     2.0 * w, -4.0 * z, 2.0 * y,
                     2.0 * x, 2.0 * y, 0.0],
                ];
                let mut gq = [0.0; 4];
                for k in 0..4 {
                    for i in 0..9 {
                        gq[k] += g[i] * d[k][i];
                    }
                }
                qc.accumulate_grad(&gq);
            },
        ))
    }
}

/// Affine map over the last axis: `y[..., j] = Σ_i x[..., i]·w[i, j] + b[j]`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: xs,
            rhs: ws,
        });
    }
    let (k, n) = (ws[0], ws[1]);
    let m = x.numel() / k;
    if let Some(b) = bias {
        if b.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                lhs: b.shape(),
                rhs: vec![n],
            });
        }
    }
    let mut values = vec![0.0; m * n];
    {
        let xv = x.values();
        let wv = w.values();
        matmul_into(&xv, m, k, &wv, n, &mut values);
        if let Some(b) = bias {
            let bv = b.values();
            for r in 0..m {
                for j in 0..n {
                    values[r * n + j] += bv[j];
                }
            }
        }
    }
    let mut out_shape = xs.clone();
    *out_shape.last_mut().unwrap() = n;
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let xc = x.clone();
    let wc = w.clone();
    let bc = bias.cloned();
    Ok(Tensor::from_op(out_shape, values, parents, move |g| {
        let xv = xc.to_vec();
        let wv = wc.to_vec();
        if xc.requires_grad() {
            let mut gx = vec![0.0; m * k];
            matmul_bt_into(g, m, n, &wv, k, &mut gx);
            xc.accumulate_grad(&gx);
        }
        if wc.requires_grad() {
            let mut gw = vec![0.0; k * n];
            matmul_at_into(&xv, m, k, g, n, &mut gw);
            wc.accumulate_grad(&gw);
        }
        if let Some(b) = &bc {
            if b.requires_grad() {
                let mut gb = vec![0.0; n];
                for r in 0..m {
                    for j in 0..n {
                        gb[j] += g[r * n + j];
                    }
                }
                b.accumulate_grad(&gb);
            }
        }
    }))
}

fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let pre: usize = shape[..axis].iter().product();
    let post: usize = shape[axis + 1..].iter().product();
    (pre, shape[axis], post)
}

fn cross_into(a: &[f64], b: &[f64], out: &mut [f64]) {
    out[0] = a[1] * b[2] - a[2] * b[1];
    out[1] = a[2] * b[0] - a[0] * b[2];
    out[2] = a[0] * b[1] - a[1] * b[0];
}

/// out[m,n] = a[m,k] · b[k,n]
fn matmul_into(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    let av = ArrayView2::from_shape((m, k), a).expect("matmul lhs layout");
    let bv = ArrayView2::from_shape((k, n), b).expect("matmul rhs layout");
    let mut ov = ArrayViewMut2::from_shape((m, n), out).expect("matmul out layout");
    ndarray::linalg::general_mat_mul(1.0, &av, &bv, 0.0, &mut ov);
}

/// out[m,k] = a[m,n] · b[k,n]ᵀ
fn matmul_bt_into(a: &[f64], m: usize, n: usize, b: &[f64], k: usize, out: &mut [f64]) {
    let av = ArrayView2::from_shape((m, n), a).expect("matmul lhs layout");
    let bv = ArrayView2::from_shape((k, n), b).expect("matmul rhs layout");
    let mut ov = ArrayViewMut2::from_shape((m, k), out).expect("matmul out layout");
    ndarray::linalg::general_mat_mul(1.0, &av, &bv.t(), 0.0, &mut ov);
}

/// out[k,n] = a[m,k]ᵀ · b[m,n]
fn matmul_at_into(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    let av = ArrayView2::from_shape((m, k), a).expect("matmul lhs layout");
    let bv = ArrayView2::from_shape((m, n), b).expect("matmul rhs layout");
    let mut ov = ArrayViewMut2::from_shape((k, n), out).expect("matmul out layout");
    ndarray::linalg::general_mat_mul(1.0, &av.t(), &bv, 0.0, &mut ov);
}
