//! 3D convolution and max-pooling kernels over channels-last volumes.
//!
//! Convolution lowers a chunk of output positions at a time to a column
//! matrix (`positions x kt*kh*kw*cin`) and multiplies it with the weight
//! matrix (`kt*kh*kw*cin x cout`). Chunk boundaries depend only on the
//! geometry, so results are bitwise reproducible regardless of threading.

use crate::error::Result;
use crate::par;
use crate::tensor::Volume;

use super::config::{spatial_out, ConvSpec, Padding, PoolSpec};

/// Upper bound on the number of column-matrix elements per chunk.
const COL_CHUNK_ELEMS: usize = 1 << 21;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Geometry {
    pub in_dims: [usize; 4],
    pub out_dims: [usize; 4],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Geometry {
    pub fn conv(in_dims: [usize; 4], spec: &ConvSpec) -> Result<Self> {
        Self::new(in_dims, spec.kernel, spec.stride, spec.padding, spec.out_channels)
    }

    pub fn pool(in_dims: [usize; 4], spec: &PoolSpec) -> Result<Self> {
        Self::new(in_dims, spec.kernel, spec.stride, spec.padding, in_dims[3])
    }

    fn new(in_dims: [usize; 4], kernel: [usize; 3], stride: [usize; 3], padding: Padding, out_c: usize) -> Result<Self> {
        let (s, pad) = spatial_out(in_dims, kernel, stride, padding)?;
        Ok(Geometry {
            in_dims,
            out_dims: [s[0], s[1], s[2], out_c],
            kernel,
            stride,
            pad,
        })
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the column matrix (`kvol * cin`).
    pub fn col_width(&self) -> usize {
        self.kernel_volume() * self.in_dims[3]
    }

    fn out_positions(&self) -> usize {
        self.out_dims[0] * self.out_dims[1] * self.out_dims[2]
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    fn rows_per_chunk(&self) -> usize {
        (COL_CHUNK_ELEMS / self.col_width().max(1)).max(1)
    }

    /// Input offset of kernel tap `(kt, kh, kw)` for output position `pos`,
    /// or `None` when the tap falls into padding.
    #[inline]
    fn tap(&self, pos: [usize; 3], k: [usize; 3]) -> Option<usize> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let v = (pos[a] * self.stride[a] + k[a]) as isize - self.pad[a] as isize;
            if v < 0 || v as usize >= self.in_dims[a] {
                return None;
            }
            idx[a] = v as usize;
        }
        Some(((idx[0] * self.in_dims[1] + idx[1]) * self.in_dims[2] + idx[2]) * self.in_dims[3])
    }

    #[inline]
    fn position(&self, flat: usize) -> [usize; 3] {
        let w = flat % self.out_dims[2];
        let h = (flat / self.out_dims[2]) % self.out_dims[1];
        let t = flat / (self.out_dims[2] * self.out_dims[1]);
        [t, h, w]
    }
}

/// `C = alpha * A * B + beta * C` for row-major contiguous operands, with
/// optional transposition of `A` or `B`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index the strides address.
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

fn im2col(x: &Volume, g: &Geometry, row0: usize, rows: usize, col: &mut [f64]) {
    let cin = g.in_dims[3];
    let width = g.col_width();
    for r in 0..rows {
        let pos = g.position(row0 + r);
        let dst = &mut col[r * width..(r + 1) * width];
        let mut off = 0;
        for kt in 0..g.kernel[0] {
            for kh in 0..g.kernel[1] {
                for kw in 0..g.kernel[2] {
                    match g.tap(pos, [kt, kh, kw]) {
                        Some(src) => dst[off..off + cin].copy_from_slice(&x.data[src..src + cin]),
                        None => dst[off..off + cin].fill(0.0),
                    }
                    off += cin;
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], g: &Geometry, row0: usize, rows: usize, dx: &mut [f64]) {
    let cin = g.in_dims[3];
    let width = g.col_width();
    for r in 0..rows {
        let pos = g.position(row0 + r);
        let src = &col[r * width..(r + 1) * width];
        let mut off = 0;
        for kt in 0..g.kernel[0] {
            for kh in 0..g.kernel[1] {
                for kw in 0..g.kernel[2] {
                    if let Some(dst) = g.tap(pos, [kt, kh, kw]) {
                        for (d, s) in dx[dst..dst + cin].iter_mut().zip(&src[off..off + cin]) {
                            *d += s;
                        }
                    }
                    off += cin;
                }
            }
        }
    }
}

/// Convolution with bias; `weights` is `[kt, kh, kw, cin, cout]` row-major.
pub fn conv3d_forward(x: &Volume, weights: &[f64], bias: &[f64], g: &Geometry) -> Volume {
    let cout = g.out_dims[3];
    let mut y = Volume::zeros(g.out_dims);
    if g.is_pointwise() {
        let m = g.out_positions();
        let chunk_rows = (COL_CHUNK_ELEMS / cout.max(1)).max(1);
        par::for_each_chunk_mut(&mut y.data, chunk_rows * cout, |ci, out| {
            let rows = out.len() / cout;
            let r0 = ci * chunk_rows;
            let xs = &x.data[r0 * g.in_dims[3]..(r0 + rows) * g.in_dims[3]];
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(bias);
            }
            gemm(rows, g.in_dims[3], cout, xs, false, weights, false, 1.0, out);
        });
        debug_assert_eq!(m * cout, y.data.len());
        return y;
    }
    let chunk_rows = g.rows_per_chunk();
    let width = g.col_width();
    par::for_each_chunk_mut(&mut y.data, chunk_rows * cout, |ci, out| {
        let rows = out.len() / cout;
        let mut col = vec![0.0; rows * width];
        im2col(x, g, ci * chunk_rows, rows, &mut col);
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(bias);
        }
        gemm(rows, width, cout, &col, false, weights, false, 1.0, out);
    });
    y
}

/// Gradients of a convolution. Accumulates into `dw` and `db`, returns the
/// input gradient.
pub fn conv3d_backward(
    x: &Volume,
    weights: &[f64],
    g: &Geometry,
    dy: &Volume,
    dw: &mut [f64],
    db: &mut [f64],
) -> Volume {
    let cin = g.in_dims[3];
    let cout = g.out_dims[3];
    for row in dy.data.chunks_exact(cout) {
        for (b, d) in db.iter_mut().zip(row) {
            *b += d;
        }
    }
    let mut dx = Volume::zeros(g.in_dims);
    if g.is_pointwise() {
        let m = g.out_positions();
        gemm(cin, m, cout, &x.data, true, &dy.data, false, 1.0, dw);
        gemm(m, cout, cin, &dy.data, false, weights, true, 0.0, &mut dx.data);
        return dx;
    }
    let width = g.col_width();
    let chunk_rows = g.rows_per_chunk();
    let total = g.out_positions();
    let mut col = vec![0.0; chunk_rows.min(total) * width];
    let mut row0 = 0;
    while row0 < total {
        let rows = chunk_rows.min(total - row0);
        let col = &mut col[..rows * width];
        let dys = &dy.data[row0 * cout..(row0 + rows) * cout];
        im2col(x, g, row0, rows, col);
        gemm(width, rows, cout, col, true, dys, false, 1.0, dw);
        gemm(rows, cout, width, dys, false, weights, true, 0.0, col);
        col2im_add(col, g, row0, rows, &mut dx.data);
        row0 += rows;
    }
    dx
}

/// Max-pooling; padded taps never win. Returns the output and, per output
/// element, the flat input index of the selected value.
pub fn maxpool_forward(x: &Volume, g: &Geometry) -> (Volume, Vec<u32>) {
    let c = g.in_dims[3];
    let mut y = Volume::zeros(g.out_dims);
    let mut argmax = vec![0u32; y.len()];
    let positions = g.out_positions();
    for p in 0..positions {
        let pos = g.position(p);
        let best = &mut y.data[p * c..(p + 1) * c];
        let arg = &mut argmax[p * c..(p + 1) * c];
        let mut first = true;
        for kt in 0..g.kernel[0] {
            for kh in 0..g.kernel[1] {
                for kw in 0..g.kernel[2] {
                    let Some(src) = g.tap(pos, [kt, kh, kw]) else {
                        continue;
                    };
                    for ch in 0..c {
                        let v = x.data[src + ch];
                        if first || v > best[ch] {
                            best[ch] = v;
                            arg[ch] = (src + ch) as u32;
                        }
                    }
                    first = false;
                }
            }
        }
    }
    (y, argmax)
}

pub fn maxpool_backward(dy: &Volume, argmax: &[u32], in_dims: [usize; 4]) -> Volume {
    let mut dx = Volume::zeros(in_dims);
    for (g, &i) in dy.data.iter().zip(argmax) {
        dx.data[i as usize] += g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Padding;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Volume {
        let n = dims.iter().product();
        Volume::from_vec(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct seven-loop convolution used as an independent reference.
    fn naive_conv(x: &Volume, w: &[f64], b: &[f64], g: &Geometry) -> Volume {
        let [ot, oh, ow, co] = g.out_dims;
        let [it, ih, iw, ci] = g.in_dims;
        let mut y = Volume::zeros(g.out_dims);
        for t in 0..ot {
            for h in 0..oh {
                for wv in 0..ow {
                    for o in 0..co {
                        let mut acc = b[o];
                        for kt in 0..g.kernel[0] {
                            for kh in 0..g.kernel[1] {
                                for kw in 0..g.kernel[2] {
                                    let st = (t * g.stride[0] + kt) as isize - g.pad[0] as isize;
                                    let sh = (h * g.stride[1] + kh) as isize - g.pad[1] as isize;
                                    let sw = (wv * g.stride[2] + kw) as isize - g.pad[2] as isize;
                                    if st < 0 || sh < 0 || sw < 0 || st >= it as isize || sh >= ih as isize || sw >= iw as isize {
                                        continue;
                                    }
                                    for c in 0..ci {
                                        let xi = x.index(st as usize, sh as usize, sw as usize, c);
                                        let wi = (((kt * g.kernel[1] + kh) * g.kernel[2] + kw) * ci + c) * co + o;
                                        acc += x.data[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        let yi = y.index(t, h, wv, o);
                        y.data[yi] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cases = [
            ([5, 7, 6, 3], [3, 3, 3], [1, 1, 1], 4, Padding::Same),
            ([5, 7, 6, 2], [3, 2, 3], [2, 2, 1], 3, Padding::Same),
            ([6, 6, 6, 2], [2, 3, 1], [1, 2, 2], 5, Padding::Explicit([1, 0, 2])),
            ([4, 5, 5, 3], [1, 1, 1], [1, 1, 1], 2, Padding::Same),
        ];
        for (dims, kernel, stride, cout, padding) in cases {
            let spec = ConvSpec { out_channels: cout, kernel, stride, padding, relu: false };
            let g = Geometry::conv(dims, &spec).unwrap();
            let x = random_volume(dims, &mut rng);
            let w: Vec<f64> = (0..g.col_width() * cout).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = conv3d_forward(&x, &w, &b, &g);
            let slow = naive_conv(&x, &w, &b, &g);
            assert_eq!(fast.dims, slow.dims);
            for (a, e) in fast.data.iter().zip(&slow.data) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dims = [3, 5, 4, 2];
        let spec = ConvSpec { out_channels: 3, kernel: [2, 3, 3], stride: [1, 2, 1], padding: Padding::Same, relu: false };
        let g = Geometry::conv(dims, &spec).unwrap();
        let x = random_volume(dims, &mut rng);
        let w: Vec<f64> = (0..g.col_width() * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = vec![0.1, -0.2, 0.3];
        let r = random_volume(g.out_dims, &mut rng);
        let loss = |x: &Volume, w: &[f64], b: &[f64]| -> f64 {
            conv3d_forward(x, w, b, &g).data.iter().zip(&r.data).map(|(a, c)| a * c).sum()
        };
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 3];
        let dx = conv3d_backward(&x, &w, &g, &r, &mut dw, &mut db);
        let h = 1e-6;
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-6, "dx[{i}] {fd} vs {}", dx.data[i]);
        }
        for i in (0..w.len()).step_by(5) {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-6);
        }
        let total: f64 = r.data.iter().step_by(3).sum();
        assert!((db[0] - total).abs() < 1e-12);
    }

    #[test]
    fn maxpool_picks_window_maximum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = [4, 5, 5, 2];
        let x = random_volume(dims, &mut rng);
        let spec = PoolSpec { kernel: [3, 3, 3], stride: [2, 2, 2], padding: Padding::Same };
        let g = Geometry::pool(dims, &spec).unwrap();
        let (y, arg) = maxpool_forward(&x, &g);
        assert_eq!(y.dims, [2, 3, 3, 2]);
        for (v, &i) in y.data.iter().zip(&arg) {
            assert_eq!(*v, x.data[i as usize]);
        }
        let dx = maxpool_backward(&Volume::from_vec(y.dims, vec![1.0; y.len()]).unwrap(), &arg, dims);
        assert_eq!(dx.data.iter().sum::<f64>(), y.len() as f64);
    }
}
