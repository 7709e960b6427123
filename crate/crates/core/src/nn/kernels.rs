//! Convolution / pooling / linear primitives with hand-written backward
//! passes. Full convolutions go through im2col + GEMM (ndarray); depthwise
//! and pooling are direct loops. Every backward here is pinned by a central
//! finite-difference test below — those tests are the gradient oracle for
//! everything built on top.

use crate::tensor::Tensor;
use ndarray::{Array2, ArrayView2};

/// Spatial convolution geometry. `d*` is dilation (1 = dense).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvCfg {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub dh: usize,
    pub dw: usize,
}

impl ConvCfg {
    /// k×k kernel, stride `s`, "same"-style padding for odd k, no dilation.
    pub fn square(k: usize, s: usize) -> Self {
        ConvCfg {
            kh: k,
            kw: k,
            sh: s,
            sw: s,
            ph: k / 2,
            pw: k / 2,
            dh: 1,
            dw: 1,
        }
    }

    /// Same as [`square`](Self::square) but with dilation `d`; padding keeps
    /// the stride-1 output size equal to the input size.
    pub fn square_dilated(k: usize, s: usize, d: usize) -> Self {
        let eff = (k - 1) * d + 1;
        ConvCfg {
            kh: k,
            kw: k,
            sh: s,
            sw: s,
            ph: eff / 2,
            pw: eff / 2,
            dh: d,
            dw: d,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let effh = (self.kh - 1) * self.dh + 1;
        let effw = (self.kw - 1) * self.dw + 1;
        assert!(
            h + 2 * self.ph >= effh && w + 2 * self.pw >= effw,
            "conv window larger than padded input"
        );
        (
            (h + 2 * self.ph - effh) / self.sh + 1,
            (w + 2 * self.pw - effw) / self.sw + 1,
        )
    }
}

/// Lay out conv patches as a (cin·kh·kw) × (ho·wo) matrix.
fn im2col(x: &Tensor, cfg: &ConvCfg) -> (Array2<f64>, usize, usize) {
    let (c, h, w) = x.shape();
    let (ho, wo) = cfg.out_hw(h, w);
    let mut col = Array2::<f64>::zeros((c * cfg.kh * cfg.kw, ho * wo));
    for ci in 0..c {
        for ky in 0..cfg.kh {
            for kx in 0..cfg.kw {
                let row = (ci * cfg.kh + ky) * cfg.kw + kx;
                for oy in 0..ho {
                    let iy = (oy * cfg.sh + ky * cfg.dh) as isize - cfg.ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * cfg.sw + kx * cfg.dw) as isize - cfg.pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * wo + ox]] = x.at(ci, iy as usize, ix as usize);
                    }
                }
            }
        }
    }
    (col, ho, wo)
}

/// Scatter the column-matrix gradient back to input layout (adjoint of im2col).
fn col2im(dcol: &Array2<f64>, c: usize, h: usize, w: usize, cfg: &ConvCfg) -> Tensor {
    let (ho, wo) = cfg.out_hw(h, w);
    let mut dx = Tensor::zeros(c, h, w);
    for ci in 0..c {
        for ky in 0..cfg.kh {
            for kx in 0..cfg.kw {
                let row = (ci * cfg.kh + ky) * cfg.kw + kx;
                for oy in 0..ho {
                    let iy = (oy * cfg.sh + ky * cfg.dh) as isize - cfg.ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * cfg.sw + kx * cfg.dw) as isize - cfg.pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        *dx.at_mut(ci, iy as usize, ix as usize) += dcol[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
    dx
}

/// Full convolution. `w` is [cout, cin, kh, kw] flattened; bias optional.
pub fn conv2d(x: &Tensor, w: &[f64], b: Option<&[f64]>, cout: usize, cfg: &ConvCfg) -> Tensor {
    let (cin, h, wd) = x.shape();
    let kdim = cin * cfg.kh * cfg.kw;
    assert_eq!(w.len(), cout * kdim, "conv weight size");
    let (col, ho, wo) = im2col(x, cfg);
    let wmat = ArrayView2::from_shape((cout, kdim), w).expect("conv weight view");
    let y = wmat.dot(&col);
    let mut out = Tensor::zeros(cout, ho, wo);
    for o in 0..cout {
        let bias = b.map_or(0.0, |b| b[o]);
        for i in 0..ho * wo {
            out.data[o * ho * wo + i] = y[[o, i]] + bias;
        }
    }
    let _ = (h, wd);
    out
}

/// Gradients of [`conv2d`]: returns (dx, dw, db).
pub fn conv2d_bwd(
    x: &Tensor,
    w: &[f64],
    dy: &Tensor,
    cout: usize,
    cfg: &ConvCfg,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (cin, h, wd) = x.shape();
    let kdim = cin * cfg.kh * cfg.kw;
    let (col, ho, wo) = im2col(x, cfg);
    assert_eq!(dy.shape(), (cout, ho, wo), "conv dy shape");
    let dy_mat = ArrayView2::from_shape((cout, ho * wo), &dy.data).expect("dy view");
    let wmat = ArrayView2::from_shape((cout, kdim), w).expect("conv weight view");

    let dw = dy_mat.dot(&col.t());
    let dcol = wmat.t().dot(&dy_mat);
    let dx = col2im(&dcol, cin, h, wd, cfg);

    let mut db = vec![0.0; cout];
    for o in 0..cout {
        for i in 0..ho * wo {
            db[o] += dy_mat[[o, i]];
        }
    }
    (dx, dw.into_iter().collect(), db)
}

/// Depthwise convolution (channel multiplier 1). `w` is [c, kh, kw] flattened.
pub fn dwconv2d(x: &Tensor, w: &[f64], cfg: &ConvCfg) -> Tensor {
    let (c, h, wd) = x.shape();
    assert_eq!(w.len(), c * cfg.kh * cfg.kw, "dwconv weight size");
    let (ho, wo) = cfg.out_hw(h, wd);
    let mut out = Tensor::zeros(c, ho, wo);
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ky in 0..cfg.kh {
                    let iy = (oy * cfg.sh + ky * cfg.dh) as isize - cfg.ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..cfg.kw {
                        let ix = (ox * cfg.sw + kx * cfg.dw) as isize - cfg.pw as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        acc += x.at(ci, iy as usize, ix as usize)
                            * w[(ci * cfg.kh + ky) * cfg.kw + kx];
                    }
                }
                *out.at_mut(ci, oy, ox) = acc;
            }
        }
    }
    out
}

/// Gradients of [`dwconv2d`]: returns (dx, dw).
pub fn dwconv2d_bwd(x: &Tensor, w: &[f64], dy: &Tensor, cfg: &ConvCfg) -> (Tensor, Vec<f64>) {
    let (c, h, wd) = x.shape();
    let (ho, wo) = cfg.out_hw(h, wd);
    assert_eq!(dy.shape(), (c, ho, wo), "dwconv dy shape");
    let mut dx = Tensor::zeros(c, h, wd);
    let mut dw = vec![0.0; w.len()];
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dy.at(ci, oy, ox);
                if g == 0.0 {
                    continue;
                }
                for ky in 0..cfg.kh {
                    let iy = (oy * cfg.sh + ky * cfg.dh) as isize - cfg.ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..cfg.kw {
                        let ix = (ox * cfg.sw + kx * cfg.dw) as isize - cfg.pw as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let widx = (ci * cfg.kh + ky) * cfg.kw + kx;
                        *dx.at_mut(ci, iy as usize, ix as usize) += g * w[widx];
                        dw[widx] += g * x.at(ci, iy as usize, ix as usize);
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Max pooling; padding cells never win. Returns the output and, per output
/// cell, the flat input index of the winning cell (for the backward pass).
pub fn maxpool2d(x: &Tensor, k: usize, s: usize, pad: usize) -> (Tensor, Vec<usize>) {
    let (c, h, w) = x.shape();
    let cfg = ConvCfg {
        kh: k,
        kw: k,
        sh: s,
        sw: s,
        ph: pad,
        pw: pad,
        dh: 1,
        dw: 1,
    };
    let (ho, wo) = cfg.out_hw(h, w);
    let mut out = Tensor::zeros(c, ho, wo);
    let mut argmax = vec![usize::MAX; c * ho * wo];
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let v = x.at(ci, iy as usize, ix as usize);
                        if v > best {
                            best = v;
                            best_idx = (ci * h + iy as usize) * w + ix as usize;
                        }
                    }
                }
                let oidx = (ci * ho + oy) * wo + ox;
                out.data[oidx] = if best_idx == usize::MAX { 0.0 } else { best };
                argmax[oidx] = best_idx;
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2d_bwd(argmax: &[usize], dy: &Tensor, in_shape: (usize, usize, usize)) -> Tensor {
    let mut dx = Tensor::zeros(in_shape.0, in_shape.1, in_shape.2);
    for (oidx, &iidx) in argmax.iter().enumerate() {
        if iidx != usize::MAX {
            dx.data[iidx] += dy.data[oidx];
        }
    }
    dx
}

/// Average pooling; padded cells are excluded from the divisor, so border
/// windows average over fewer elements.
pub fn avgpool2d(x: &Tensor, k: usize, s: usize, pad: usize) -> Tensor {
    let (c, h, w) = x.shape();
    let cfg = ConvCfg {
        kh: k,
        kw: k,
        sh: s,
        sw: s,
        ph: pad,
        pw: pad,
        dh: 1,
        dw: 1,
    };
    let (ho, wo) = cfg.out_hw(h, w);
    let mut out = Tensor::zeros(c, ho, wo);
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                let mut n = 0usize;
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc += x.at(ci, iy as usize, ix as usize);
                        n += 1;
                    }
                }
                *out.at_mut(ci, oy, ox) = if n > 0 { acc / n as f64 } else { 0.0 };
            }
        }
    }
    out
}

pub fn avgpool2d_bwd(
    in_shape: (usize, usize, usize),
    k: usize,
    s: usize,
    pad: usize,
    dy: &Tensor,
) -> Tensor {
    let (c, h, w) = in_shape;
    let mut dx = Tensor::zeros(c, h, w);
    let (_, dho, dwo) = dy.shape();
    for ci in 0..c {
        for oy in 0..dho {
            for ox in 0..dwo {
                // Recompute the valid-cell count for this window.
                let mut cells: Vec<(usize, usize)> = Vec::with_capacity(k * k);
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cells.push((iy as usize, ix as usize));
                    }
                }
                if cells.is_empty() {
                    continue;
                }
                let g = dy.at(ci, oy, ox) / cells.len() as f64;
                for (iy, ix) in cells {
                    *dx.at_mut(ci, iy, ix) += g;
                }
            }
        }
    }
    dx
}

/// Fully connected layer over a flattened input.
pub fn linear(x: &[f64], w: &[f64], b: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = x.len();
    assert_eq!(w.len(), out_dim * in_dim, "linear weight size");
    assert_eq!(b.len(), out_dim, "linear bias size");
    let mut y = vec![0.0; out_dim];
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = b[o];
        for i in 0..in_dim {
            acc += row[i] * x[i];
        }
        y[o] = acc;
    }
    y
}

/// Gradients of [`linear`]: returns (dx, dw, db).
pub fn linear_bwd(x: &[f64], w: &[f64], dy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let in_dim = x.len();
    let out_dim = dy.len();
    let mut dx = vec![0.0; in_dim];
    let mut dw = vec![0.0; out_dim * in_dim];
    for o in 0..out_dim {
        let g = dy[o];
        let row = &w[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            dx[i] += g * row[i];
            dw[o * in_dim + i] = g * x[i];
        }
    }
    (dx, dw, dy.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use approx::assert_abs_diff_eq;

    fn rand_tensor(r: &mut Rng, c: usize, h: usize, w: usize) -> Tensor {
        let mut t = Tensor::zeros(c, h, w);
        r.fill_normal(&mut t.data, 1.0);
        t
    }

    fn rand_vec(r: &mut Rng, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        r.fill_normal(&mut v, 0.5);
        v
    }

    /// Scalar objective used by all finite-difference checks: weighted sum of
    /// outputs with fixed pseudo-random coefficients, so every output cell
    /// contributes to the gradient.
    fn seed_coeffs(n: usize) -> Vec<f64> {
        let mut r = Rng::seed_from_u64(0xC0FFEE);
        rand_vec(&mut r, n)
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv2d_gradients_match_finite_difference() {
        for &(cin, cout, k, s, d) in &[(2usize, 3usize, 3usize, 1usize, 1usize), (3, 2, 3, 2, 1), (2, 2, 5, 1, 1), (2, 2, 3, 1, 2)] {
            let cfg = ConvCfg::square_dilated(k, s, d);
            let mut r = Rng::seed_from_u64(42);
            let x = rand_tensor(&mut r, cin, 7, 6);
            let w = rand_vec(&mut r, cout * cin * k * k);
            let b = rand_vec(&mut r, cout);

            let y = conv2d(&x, &w, Some(&b), cout, &cfg);
            let co = seed_coeffs(y.len());
            let mut dy = y.clone();
            dy.data.copy_from_slice(&co);
            let (dx, dw, db) = conv2d_bwd(&x, &w, &dy, cout, &cfg);

            let f = |x: &Tensor, w: &[f64], b: &[f64]| {
                dot(&conv2d(x, w, Some(b), cout, &cfg).data, &co)
            };
            let eps = 1e-5;
            // Spot-check a spread of coordinates in each gradient.
            for idx in [0usize, x.len() / 2, x.len() - 1] {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.data[idx] += eps;
                xm.data[idx] -= eps;
                let fd = (f(&xp, &w, &b) - f(&xm, &w, &b)) / (2.0 * eps);
                assert_abs_diff_eq!(dx.data[idx], fd, epsilon = 1e-6);
            }
            for idx in [0usize, w.len() / 3, w.len() - 1] {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[idx] += eps;
                wm[idx] -= eps;
                let fd = (f(&x, &wp, &b) - f(&x, &wm, &b)) / (2.0 * eps);
                assert_abs_diff_eq!(dw[idx], fd, epsilon = 1e-6);
            }
            for idx in 0..cout {
                let mut bp = b.clone();
                let mut bm = b.clone();
                bp[idx] += eps;
                bm[idx] -= eps;
                let fd = (f(&x, &w, &bp) - f(&x, &w, &bm)) / (2.0 * eps);
                assert_abs_diff_eq!(db[idx], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn dwconv2d_gradients_match_finite_difference() {
        for &(c, k, s, d) in &[(3usize, 3usize, 1usize, 1usize), (2, 3, 2, 1), (2, 5, 1, 1), (2, 3, 1, 2)] {
            let cfg = ConvCfg::square_dilated(k, s, d);
            let mut r = Rng::seed_from_u64(43);
            let x = rand_tensor(&mut r, c, 6, 7);
            let w = rand_vec(&mut r, c * k * k);

            let y = dwconv2d(&x, &w, &cfg);
            let co = seed_coeffs(y.len());
            let mut dy = y.clone();
            dy.data.copy_from_slice(&co);
            let (dx, dw) = dwconv2d_bwd(&x, &w, &dy, &cfg);

            let f = |x: &Tensor, w: &[f64]| dot(&dwconv2d(x, w, &cfg).data, &co);
            let eps = 1e-5;
            for idx in [0usize, x.len() / 2, x.len() - 1] {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.data[idx] += eps;
                xm.data[idx] -= eps;
                let fd = (f(&xp, &w) - f(&xm, &w)) / (2.0 * eps);
                assert_abs_diff_eq!(dx.data[idx], fd, epsilon = 1e-6);
            }
            for idx in 0..w.len() {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[idx] += eps;
                wm[idx] -= eps;
                let fd = (f(&x, &wp) - f(&x, &wm)) / (2.0 * eps);
                assert_abs_diff_eq!(dw[idx], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn maxpool_gradient_matches_finite_difference() {
        let mut r = Rng::seed_from_u64(44);
        let x = rand_tensor(&mut r, 2, 6, 6);
        for &(k, s, p) in &[(3usize, 1usize, 1usize), (3, 2, 1), (2, 2, 0)] {
            let (y, argmax) = maxpool2d(&x, k, s, p);
            let co = seed_coeffs(y.len());
            let mut dy = y.clone();
            dy.data.copy_from_slice(&co);
            let dx = maxpool2d_bwd(&argmax, &dy, x.shape());

            let f = |x: &Tensor| dot(&maxpool2d(x, k, s, p).0.data, &co);
            let eps = 1e-6;
            for idx in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.data[idx] += eps;
                xm.data[idx] -= eps;
                let fd = (f(&xp) - f(&xm)) / (2.0 * eps);
                // Max is piecewise linear; ties would break FD but random
                // inputs are tie-free almost surely.
                assert_abs_diff_eq!(dx.data[idx], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn avgpool_gradient_matches_finite_difference() {
        let mut r = Rng::seed_from_u64(45);
        let x = rand_tensor(&mut r, 2, 5, 6);
        for &(k, s, p) in &[(3usize, 1usize, 1usize), (3, 2, 1), (2, 2, 0)] {
            let y = avgpool2d(&x, k, s, p);
            let co = seed_coeffs(y.len());
            let mut dy = y.clone();
            dy.data.copy_from_slice(&co);
            let dx = avgpool2d_bwd(x.shape(), k, s, p, &dy);

            let f = |x: &Tensor| dot(&avgpool2d(x, k, s, p).data, &co);
            let eps = 1e-6;
            for idx in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.data[idx] += eps;
                xm.data[idx] -= eps;
                let fd = (f(&xp) - f(&xm)) / (2.0 * eps);
                assert_abs_diff_eq!(dx.data[idx], fd, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn avgpool_border_divisor_counts_valid_cells_only() {
        // 1×2×2 input of ones, k=3 s=1 pad=1: every window sums <9 cells but
        // averages exactly 1.0 iff the divisor is the valid-cell count.
        let x = Tensor::from_vec(1, 2, 2, vec![1.0; 4]);
        let y = avgpool2d(&x, 3, 1, 1);
        for &v in &y.data {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn linear_gradients_match_finite_difference() {
        let mut r = Rng::seed_from_u64(46);
        let x = rand_vec(&mut r, 9);
        let w = rand_vec(&mut r, 4 * 9);
        let b = rand_vec(&mut r, 4);
        let y = linear(&x, &w, &b, 4);
        let co = seed_coeffs(y.len());
        let (dx, dw, db) = linear_bwd(&x, &w, &co);

        let f = |x: &[f64], w: &[f64], b: &[f64]| dot(&linear(x, w, b, 4), &co);
        let eps = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[idx] += eps;
            xm[idx] -= eps;
            assert_abs_diff_eq!(
                dx[idx],
                (f(&xp, &w, &b) - f(&xm, &w, &b)) / (2.0 * eps),
                epsilon = 1e-7
            );
        }
        for idx in 0..w.len() {
            let mut wp = w.to_vec();
            let mut wm = w.to_vec();
            wp[idx] += eps;
            wm[idx] -= eps;
            assert_abs_diff_eq!(
                dw[idx],
                (f(&x, &wp, &b) - f(&x, &wm, &b)) / (2.0 * eps),
                epsilon = 1e-7
            );
        }
        for idx in 0..b.len() {
            let mut bp = b.to_vec();
            let mut bm = b.to_vec();
            bp[idx] += eps;
            bm[idx] -= eps;
            assert_abs_diff_eq!(
                db[idx],
                (f(&x, &w, &bp) - f(&x, &w, &bm)) / (2.0 * eps),
                epsilon = 1e-7
            );
        }
    }

    #[test]
    fn conv_output_shapes() {
        let x = Tensor::zeros(3, 8, 8);
        let cfg = ConvCfg::square(3, 1);
        assert_eq!(conv2d(&x, &vec![0.0; 4 * 27], None, 4, &cfg).shape(), (4, 8, 8));
        let cfg2 = ConvCfg::square(3, 2);
        assert_eq!(conv2d(&x, &vec![0.0; 4 * 27], None, 4, &cfg2).shape(), (4, 4, 4));
        let cfgd = ConvCfg::square_dilated(3, 1, 2);
        assert_eq!(conv2d(&x, &vec![0.0; 4 * 27], None, 4, &cfgd).shape(), (4, 8, 8));
    }
}
