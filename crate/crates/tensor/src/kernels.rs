//! Slice-level numeric kernels shared by the tape's forward and backward passes.

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// With `a_t` set, `a` is stored as `k×m`; with `b_t` set, `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the pointers cover exactly the m×k, k×n and m×n extents asserted
    // above and the strides index within them.
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

/// Strided matrix view: element `(i, j)` lives at `offset + i·rs + j·cs`.
#[derive(Clone, Copy)]
pub(crate) struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn rows(offset: usize, rs: usize) -> Self {
        Self { offset, rs, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self {
            offset: self.offset,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn span(self, m: usize, n: usize) -> usize {
        self.offset + (m - 1) * self.rs + (n - 1) * self.cs + 1
    }
}

/// `c (+)= a · b` over strided views with `a: m×k`, `b: k×n`, `c: m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_view(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    va: View,
    b: &[f64],
    vb: View,
    c: &mut [f64],
    vc: View,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (a.len() >= va.span(m, k) && b.len() >= vb.span(k, n)));
    assert!(c.len() >= vc.span(m, n));
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index reachable through the views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(va.offset),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr().add(vb.offset),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr().add(vc.offset),
            vc.rs as isize,
            vc.cs as isize,
        );
    }
}

/// Numpy-style broadcast of two shapes (right-aligned, extent 1 stretches).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out_shape`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out_shape[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every element of `out_shape` in row-major order together with the
/// matching flat offsets into each broadcast operand.
fn for_each_broadcast(
    out_shape: &[usize],
    shapes: [&[usize]; 2],
    mut f: impl FnMut(usize, usize, usize),
) {
    let sa = broadcast_strides(shapes[0], out_shape);
    let sb = broadcast_strides(shapes[1], out_shape);
    let n: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for flat in 0..n {
        f(flat, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * idx[d];
            ob -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_binary(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let n: usize = out_shape.iter().product();
    let mut out = vec![0.0; n];
    for_each_broadcast(out_shape, [a_shape, b_shape], |o, ia, ib| {
        out[o] = f(a[ia], b[ib]);
    });
    out
}

/// Sums `grad` (shaped `out_shape`) down to `target` by reducing broadcast axes.
pub(crate) fn reduce_to_shape(grad: &[f64], out_shape: &[usize], target: &[usize]) -> Vec<f64> {
    if out_shape == target {
        return grad.to_vec();
    }
    let n: usize = target.iter().product();
    let mut out = vec![0.0; n];
    for_each_broadcast(out_shape, [target, target], |o, it, _| {
        out[it] += grad[o];
    });
    out
}

/// Splits `shape` around `axis` into (outer, axis extent, inner) counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-stabilized softmax of one contiguous row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

/// Softmax along `axis` of a row-major buffer shaped `shape`.
pub(crate) fn softmax(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    if inner == 1 {
        let mut out = x.to_vec();
        out.chunks_exact_mut(len).for_each(softmax_in_place);
        return out;
    }
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..len {
                max = max.max(x[base + a * inner]);
            }
            let mut sum = 0.0;
            for a in 0..len {
                let e = (x[base + a * inner] - max).exp();
                out[base + a * inner] = e;
                sum += e;
            }
            for a in 0..len {
                out[base + a * inner] /= sum;
            }
        }
    }
    out
}

/// Im2col for a `[c, h, w]` input and square `k×k` kernels with stride `s`.
/// Result is `[c·k·k, ho·wo]`.
pub(crate) fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, s: usize) -> Vec<f64> {
    let ho = (h - k) / s + 1;
    let wo = (w - k) / s + 1;
    let cols = ho * wo;
    let mut out = vec![0.0; c * k * k * cols];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oh in 0..ho {
                    let src = ci * h * w + (oh * s + ki) * w + kj;
                    for ow in 0..wo {
                        dst[oh * wo + ow] = x[src + ow * s];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn col2im(
    cols_grad: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
) -> Vec<f64> {
    let ho = (h - k) / s + 1;
    let wo = (w - k) / s + 1;
    let cols = ho * wo;
    let mut dx = vec![0.0; c * h * w];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols_grad[row * cols..(row + 1) * cols];
                for oh in 0..ho {
                    let dst = ci * h * w + (oh * s + ki) * w + kj;
                    for ow in 0..wo {
                        dx[dst + ow * s] += src[oh * wo + ow];
                    }
                }
            }
        }
    }
    dx
}
