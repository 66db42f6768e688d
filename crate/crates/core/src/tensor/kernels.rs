//! Plain numeric kernels on row-major slices. Shapes are validated by the
//! graph layer before these are called.

use super::Real;

/// Geometry of a 2-D convolution over NCHW input with an OIHW kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k_w) / self.stride + 1
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.in_ch * self.in_h * self.in_w
    }

    pub fn kernel_len(&self) -> usize {
        self.out_ch * self.in_ch * self.k_h * self.k_w
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_ch * self.out_h() * self.out_w()
    }
}

/// Output positions `o` in `[0, out_len)` for which `o * stride + k - pad`
/// falls inside `[0, in_len)`.
#[inline]
fn valid_range(
    k: usize,
    pad: usize,
    stride: usize,
    in_len: usize,
    out_len: usize,
) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    if in_len + pad <= k {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Visits every (input row, kernel tap, output row) triple of the
/// convolution. The callback receives flat offsets of the input row start,
/// the kernel element, the output row start, plus the valid output-column
/// range and the column offset `kw - pad` (as isize).
#[inline]
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize, usize, isize)) {
    let (oh_n, ow_n) = (g.out_h(), g.out_w());
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            for c in 0..g.in_ch {
                for kh in 0..g.k_h {
                    let (h_lo, h_hi) = valid_range(kh, g.pad, g.stride, g.in_h, oh_n);
                    for kw in 0..g.k_w {
                        let (w_lo, w_hi) = valid_range(kw, g.pad, g.stride, g.in_w, ow_n);
                        if w_lo >= w_hi {
                            continue;
                        }
                        let k_idx = ((o * g.in_ch + c) * g.k_h + kh) * g.k_w + kw;
                        for oh in h_lo..h_hi {
                            let ih = oh * g.stride + kh - g.pad;
                            let x_row = ((n * g.in_ch + c) * g.in_h + ih) * g.in_w;
                            let y_row = ((n * g.out_ch + o) * oh_n + oh) * ow_n;
                            f(
                                x_row,
                                k_idx,
                                y_row,
                                w_lo,
                                w_hi,
                                kw as isize - g.pad as isize,
                            );
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Real>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let mut y = vec![T::zero(); g.output_len()];
    let s = g.stride;
    for_each_tap(g, |x_row, k_idx, y_row, lo, hi, off| {
        let wv = w[k_idx];
        if s == 1 {
            let xs = (x_row as isize + lo as isize + off) as usize;
            let ys = &mut y[y_row + lo..y_row + hi];
            for (yv, &xv) in ys.iter_mut().zip(&x[xs..xs + (hi - lo)]) {
                *yv += wv * xv;
            }
        } else {
            for ow in lo..hi {
                let iw = (ow * s) as isize + off;
                y[y_row + ow] += wv * x[x_row + iw as usize];
            }
        }
    });
    y
}

/// Gradient of the convolution with respect to its input (transposed
/// correlation of the upstream gradient with the kernel).
pub fn conv2d_input_grad<T: Real>(gy: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let mut gx = vec![T::zero(); g.input_len()];
    let s = g.stride;
    for_each_tap(g, |x_row, k_idx, y_row, lo, hi, off| {
        let wv = w[k_idx];
        if s == 1 {
            let xs = (x_row as isize + lo as isize + off) as usize;
            let ys = &gy[y_row + lo..y_row + hi];
            for (xv, &yv) in gx[xs..xs + (hi - lo)].iter_mut().zip(ys) {
                *xv += wv * yv;
            }
        } else {
            for ow in lo..hi {
                let iw = (ow * s) as isize + off;
                gx[x_row + iw as usize] += wv * gy[y_row + ow];
            }
        }
    });
    gx
}

/// Gradient of the convolution with respect to its kernel.
pub fn conv2d_weight_grad<T: Real>(x: &[T], gy: &[T], g: &ConvGeom) -> Vec<T> {
    let mut gw = vec![T::zero(); g.kernel_len()];
    let s = g.stride;
    for_each_tap(g, |x_row, k_idx, y_row, lo, hi, off| {
        let mut acc = T::zero();
        if s == 1 {
            let xs = (x_row as isize + lo as isize + off) as usize;
            for (&xv, &yv) in x[xs..xs + (hi - lo)]
                .iter()
                .zip(&gy[y_row + lo..y_row + hi])
            {
                acc += xv * yv;
            }
        } else {
            for ow in lo..hi {
                let iw = (ow * s) as isize + off;
                acc += x[x_row + iw as usize] * gy[y_row + ow];
            }
        }
        gw[k_idx] += acc;
    });
    gw
}

/// `[m, k] x [k, n] -> [m, n]`
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (cv, &bv) in c_row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Non-overlapping `k x k` average pooling over the trailing two axes.
/// Trailing rows/columns that do not fill a window are dropped.
pub fn avgpool2d<T: Real>(x: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::from_f64((k * k) as f64);
    let mut y = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let yp = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh * k {
            let yrow = &mut yp[(i / k) * ow..(i / k + 1) * ow];
            let xrow = &xp[i * w..i * w + ow * k];
            for (j, &v) in xrow.iter().enumerate() {
                yrow[j / k] += v;
            }
        }
        for v in yp.iter_mut() {
            *v *= inv;
        }
    }
    y
}

/// Adjoint of [`avgpool2d`]: spreads each pooled gradient evenly over its
/// window.
pub fn avgpool2d_adjoint<T: Real>(g: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::from_f64((k * k) as f64);
    let mut x = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        let xp = &mut x[p * h * w..(p + 1) * h * w];
        for i in 0..oh * k {
            let grow = &gp[(i / k) * ow..(i / k + 1) * ow];
            for j in 0..ow * k {
                xp[i * w + j] = grow[j / k] * inv;
            }
        }
    }
    x
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        let row = &a[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut sum = T::zero();
        for (ov, &v) in o.iter_mut().zip(row) {
            *ov = (v - max).exp();
            sum += *ov;
        }
        for ov in o.iter_mut() {
            *ov = *ov / sum;
        }
    }
    out
}

/// Per-row `-log softmax(a)[label]`, computed via log-sum-exp.
pub fn cross_entropy_rows<T: Real>(a: &[T], cols: usize, labels: &[usize]) -> Vec<T> {
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let row = &a[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            lse - row[y]
        })
        .collect()
}

pub const TV_EPS: f64 = 1e-8;

/// Isotropic total variation of each `[C, H, W]` sample, summed over
/// channels and over pixels that have both a lower and a right neighbour.
pub fn total_variation<T: Real>(x: &[T], batch: usize, ch: usize, h: usize, w: usize) -> Vec<T> {
    let eps = T::from_f64(TV_EPS);
    (0..batch)
        .map(|n| {
            let mut acc = T::zero();
            for c in 0..ch {
                let p = &x[(n * ch + c) * h * w..(n * ch + c + 1) * h * w];
                for i in 0..h.saturating_sub(1) {
                    for j in 0..w.saturating_sub(1) {
                        let v = p[i * w + j];
                        let dv = p[(i + 1) * w + j] - v;
                        let dh = p[i * w + j + 1] - v;
                        acc += (dv * dv + dh * dh + eps).sqrt();
                    }
                }
            }
            acc
        })
        .collect()
}

/// Gradient of [`total_variation`] for each sample, scaled by `upstream[n]`.
pub fn total_variation_grad<T: Real>(
    x: &[T],
    upstream: &[T],
    batch: usize,
    ch: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let eps = T::from_f64(TV_EPS);
    let mut g = vec![T::zero(); x.len()];
    for n in 0..batch {
        let u = upstream[n];
        for c in 0..ch {
            let base = (n * ch + c) * h * w;
            for i in 0..h.saturating_sub(1) {
                for j in 0..w.saturating_sub(1) {
                    let at = base + i * w + j;
                    let (down, right) = (at + w, at + 1);
                    let dv = x[down] - x[at];
                    let dh = x[right] - x[at];
                    let norm = (dv * dv + dh * dh + eps).sqrt();
                    let (gv, gh) = (u * dv / norm, u * dh / norm);
                    g[down] += gv;
                    g[right] += gh;
                    g[at] -= gv + gh;
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for k in 0..4 {
            for pad in 0..3 {
                for stride in 1..3 {
                    for in_len in 1..7 {
                        if in_len + 2 * pad < 4 {
                            continue;
                        }
                        let out_len = (in_len + 2 * pad - 4) / stride + 1;
                        let want: Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let i = (o * stride + k) as isize - pad as isize;
                                i >= 0 && (i as usize) < in_len
                            })
                            .collect();
                        let (lo, hi) = valid_range(k, pad, stride, in_len, out_len);
                        assert_eq!(
                            (lo..hi).collect::<Vec<_>>(),
                            want,
                            "k={k} pad={pad} s={stride} L={in_len}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn avgpool_drops_ragged_edge() {
        let x: Vec<f64> = (0..25).map(|v| v as f64).collect();
        let y = avgpool2d(&x, 1, 5, 5, 2);
        assert_eq!(y, vec![3.0, 5.0, 13.0, 15.0]);
        let back = avgpool2d_adjoint(&[4.0, 4.0, 4.0, 4.0], 1, 5, 5, 2);
        assert_eq!(back.iter().sum::<f64>(), 16.0);
        assert_eq!(back[4], 0.0);
        assert_eq!(back[20], 0.0);
    }

    #[test]
    fn tv_of_constant_image_is_the_epsilon_floor() {
        let x = vec![0.3f64; 16];
        let tv = total_variation(&x, 1, 1, 4, 4);
        assert!((tv[0] - 9.0 * TV_EPS.sqrt()).abs() < 1e-12);
    }
}
