//! Matrix products and row-wise softmax.

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `C(m,n) = op(A)(m,k) * op(B)(k,n) + beta * C`, all row-major.
///
/// With `a_trans` the slice `a` holds `A^T` as a `(k, m)` matrix; likewise `b_trans`
/// means `b` holds a `(n, k)` matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct BatchedShape {
    batch: usize,
    b_broadcast: bool,
    r: usize,
    s: usize,
    t: usize,
}

fn matmul_shape(a: &Tensor, b: &Tensor, trans_b: bool) -> Result<BatchedShape> {
    let [an, ac, r, s] = a.dims();
    let [bn, bc, b0, b1] = b.dims();
    let (bs, t) = if trans_b { (b1, b0) } else { (b0, b1) };
    if bs != s {
        return Err(Error::shape(
            "matmul",
            format!("inner dims differ: {:?} x {:?}{}", a.dims(), b.dims(), if trans_b { "^T" } else { "" }),
        ));
    }
    let b_broadcast = bn == 1 && bc == 1 && an * ac != 1;
    if !b_broadcast && (bn, bc) != (an, ac) {
        return Err(Error::shape(
            "matmul",
            format!("batch dims differ: {:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    Ok(BatchedShape {
        batch: an * ac,
        b_broadcast,
        r,
        s,
        t,
    })
}

pub(super) fn matmul_backward(a: &Tensor, b: &Tensor, trans_b: bool, g: &[f64], need_a: bool, need_b: bool) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let sh = matmul_shape(a, b, trans_b).expect("validated in forward");
    let (r, s, t) = (sh.r, sh.s, sh.t);
    let mut da = need_a.then(|| vec![0.0; a.numel()]);
    let mut db = need_b.then(|| vec![0.0; b.numel()]);
    for i in 0..sh.batch {
        let bi = if sh.b_broadcast { 0 } else { i };
        let gi = &g[i * r * t..(i + 1) * r * t];
        let bm = &b.data()[bi * s * t..(bi + 1) * s * t];
        let am = &a.data()[i * r * s..(i + 1) * r * s];
        if let Some(da) = da.as_mut() {
            // dA(r,s) = G(r,t) * B^T   (B is (s,t)); with trans_b B is stored (t,s)
            gemm(r, t, s, gi, false, bm, !trans_b, &mut da[i * r * s..(i + 1) * r * s], 0.0);
        }
        if let Some(db) = db.as_mut() {
            let dbm = &mut db[bi * s * t..(bi + 1) * s * t];
            if trans_b {
                // stored (t,s): dB^T = G^T(t,r) * A(r,s)
                gemm(t, r, s, gi, true, am, false, dbm, 1.0);
            } else {
                gemm(s, r, t, am, true, gi, false, dbm, 1.0);
            }
        }
    }
    (da, db)
}

pub(super) fn linear_backward(x: &Tensor, w: &Tensor, g: &[f64], need_x: bool) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let cin = x.dims()[3];
    let cout = w.dims()[2];
    let rows = x.numel() / cin;
    let dx = need_x.then(|| {
        let mut dx = vec![0.0; x.numel()];
        gemm(rows, cout, cin, g, false, w.data(), false, &mut dx, 0.0);
        dx
    });
    let mut dw = vec![0.0; w.numel()];
    gemm(cout, rows, cin, g, true, x.data(), false, &mut dw, 0.0);
    let mut db = vec![0.0; cout];
    for row in g.chunks(cout) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    (dx, dw, db)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(super) fn softmax_rows_backward(y: &Tensor, g: &[f64]) -> Vec<f64> {
    let cols = y.dims()[3];
    let mut dx = vec![0.0; y.numel()];
    for ((yr, gr), dr) in y.data().chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    dx
}

pub(super) fn softmax_channels_backward(y: &Tensor, g: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = y.dims();
    let plane = h * w;
    let yd = y.data();
    let mut dx = vec![0.0; y.numel()];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let dot: f64 = (0..c).map(|k| yd[base + k * plane + p] * g[base + k * plane + p]).sum();
            for k in 0..c {
                let i = base + k * plane + p;
                dx[i] = yd[i] * (g[i] - dot);
            }
        }
    }
    dx
}

impl Tape {
    /// Batched product over the last two axes. `b` may carry batch dims `(1,1)`
    /// to broadcast. With `trans_b`, `b` is read as its transpose.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let sh = matmul_shape(av, bv, trans_b)?;
        let [an, ac, _, _] = av.dims();
        let mut out = vec![0.0; sh.batch * sh.r * sh.t];
        for i in 0..sh.batch {
            let bi = if sh.b_broadcast { 0 } else { i };
            gemm(
                sh.r,
                sh.s,
                sh.t,
                &av.data()[i * sh.r * sh.s..(i + 1) * sh.r * sh.s],
                false,
                &bv.data()[bi * sh.s * sh.t..(bi + 1) * sh.s * sh.t],
                trans_b,
                &mut out[i * sh.r * sh.t..(i + 1) * sh.r * sh.t],
                0.0,
            );
        }
        let value = Tensor::from_parts([an, ac, sh.r, sh.t], out);
        self.count_macs((sh.batch * sh.r * sh.s * sh.t) as u64);
        self.push(value, Op::Matmul { a, b, trans_b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// `a * b^T` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, true)
    }

    /// Token projection: `x (N,C,T,Cin) -> (N,C,T,Cout)` with `weight (1,1,Cout,Cin)`
    /// and optional `bias (1,1,1,Cout)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let [n, c, t, cin] = x.dims();
        let [w0, w1, cout, wcin] = w.dims();
        if (w0, w1) != (1, 1) || wcin != cin {
            return Err(Error::shape(
                "linear",
                format!("input {:?} with weight {:?}", x.dims(), w.dims()),
            ));
        }
        let rows = n * c * t;
        let mut out = vec![0.0; rows * cout];
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.numel() != cout {
                return Err(Error::shape("linear", format!("bias {:?} for {cout} outputs", bv.dims())));
            }
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bv.data());
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(rows, cin, cout, x.data(), false, w.data(), true, &mut out, beta);
        let value = Tensor::from_parts([n, c, t, cout], out);
        self.count_macs((rows * cin * cout) as u64);
        self.push(value, Op::Linear { input, weight, bias })
    }

    /// Softmax along the last axis, with max-subtraction.
    pub fn softmax_rows(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let cols = x.dims()[3];
        let mut data = x.data().to_vec();
        data.chunks_mut(cols).for_each(softmax_in_place);
        let value = Tensor::from_parts(x.dims(), data);
        self.push(value, Op::SoftmaxRows { input })
    }

    /// Softmax along the channel axis at every spatial position.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let value = softmax_channels_value(x);
        self.push(value, Op::SoftmaxChannels { input })
    }
}

pub(crate) fn softmax_channels_value(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.dims();
    let plane = h * w;
    let xd = x.data();
    let mut out = vec![0.0; x.numel()];
    let mut buf = vec![0.0; c];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            for k in 0..c {
                buf[k] = xd[base + k * plane + p];
            }
            softmax_in_place(&mut buf);
            for k in 0..c {
                out[base + k * plane + p] = buf[k];
            }
        }
    }
    Tensor::from_parts(x.dims(), out)
}
