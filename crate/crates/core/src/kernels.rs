//! Raw CPU kernels over flat row-major slices. No shape checking here;
//! callers in `autograd` validate geometry first.

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &s) in a_row.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += s * bv;
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` with `a` stored `[k×m]`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        let a_row = &a[p * m..(p + 1) * m];
        for (i, &s) in a_row.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += s * bv;
            }
        }
    }
}

/// `c[m×n] += a · bᵀ` with `b` stored `[n×k]`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with a fixed 8-lane accumulation order.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn in_per_group(&self) -> usize {
        self.in_c / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_c / self.groups
    }

    /// Rows of the im2col matrix for one group.
    fn col_rows(&self) -> usize {
        self.in_per_group() * self.k_h * self.k_w
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.stride == (1, 1) && self.pad == (0, 0)
    }
}

/// Unfold the channels `[c0, c0+cg)` of one image into `[cg·kh·kw, oh·ow]`.
fn im2col(g: &ConvGeom, img: &[f32], c0: usize, col: &mut [f32]) {
    let (oh, ow) = (g.out_h, g.out_w);
    let mut row = 0;
    for c in c0..c0 + g.in_per_group() {
        let plane = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride.0 + ky) as isize - g.pad.0 as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride.1 + kx) as isize - g.pad.1 as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add the transpose of [`im2col`].
fn col2im(g: &ConvGeom, col: &[f32], c0: usize, img: &mut [f32]) {
    let (oh, ow) = (g.out_h, g.out_w);
    let mut row = 0;
    for c in c0..c0 + g.in_per_group() {
        let plane = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride.0 + ky) as isize - g.pad.0 as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride.1 + kx) as isize - g.pad.1 as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let (cpg_out, rows, px) = (g.out_per_group(), g.col_rows(), g.out_pixels());
    let in_img = g.in_c * g.in_h * g.in_w;
    let out_img = g.out_c * px;
    let mut out = vec![0.0f32; g.batch * out_img];
    let mut col = vec![0.0f32; rows * px];
    for n in 0..g.batch {
        let img = &x[n * in_img..(n + 1) * in_img];
        let dst = &mut out[n * out_img..(n + 1) * out_img];
        if let Some(b) = bias {
            for (co, plane) in dst.chunks_mut(px).enumerate() {
                plane.fill(b[co]);
            }
        }
        for grp in 0..g.groups {
            let wg = &w[grp * cpg_out * rows..(grp + 1) * cpg_out * rows];
            let og = &mut dst[grp * cpg_out * px..(grp + 1) * cpg_out * px];
            if g.is_pointwise() {
                let cols = &img[grp * rows * px..(grp + 1) * rows * px];
                gemm_nn(cpg_out, rows, px, wg, cols, og);
            } else {
                im2col(g, img, grp * g.in_per_group(), &mut col);
                gemm_nn(cpg_out, rows, px, wg, &col, og);
            }
        }
    }
    out
}

/// Accumulates gradients for input, weight and bias of a convolution.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f32],
    w: &[f32],
    grad_out: &[f32],
    grad_x: Option<&mut [f32]>,
    grad_w: Option<&mut [f32]>,
    grad_b: Option<&mut [f32]>,
) {
    let (cpg_out, rows, px) = (g.out_per_group(), g.col_rows(), g.out_pixels());
    let in_img = g.in_c * g.in_h * g.in_w;
    let out_img = g.out_c * px;

    if let Some(gb) = grad_b {
        for n in 0..g.batch {
            for (co, plane) in grad_out[n * out_img..(n + 1) * out_img].chunks(px).enumerate() {
                gb[co] += plane.iter().sum::<f32>();
            }
        }
    }

    let mut col = vec![0.0f32; rows * px];
    if let Some(gw) = grad_w {
        for n in 0..g.batch {
            let img = &x[n * in_img..(n + 1) * in_img];
            for grp in 0..g.groups {
                let go = &grad_out[n * out_img + grp * cpg_out * px..][..cpg_out * px];
                let gwg = &mut gw[grp * cpg_out * rows..(grp + 1) * cpg_out * rows];
                if g.is_pointwise() {
                    gemm_nt(cpg_out, px, rows, go, &img[grp * rows * px..][..rows * px], gwg);
                } else {
                    im2col(g, img, grp * g.in_per_group(), &mut col);
                    gemm_nt(cpg_out, px, rows, go, &col, gwg);
                }
            }
        }
    }

    if let Some(gx) = grad_x {
        for n in 0..g.batch {
            let gimg = &mut gx[n * in_img..(n + 1) * in_img];
            for grp in 0..g.groups {
                let go = &grad_out[n * out_img + grp * cpg_out * px..][..cpg_out * px];
                let wg = &w[grp * cpg_out * rows..(grp + 1) * cpg_out * rows];
                if g.is_pointwise() {
                    gemm_tn(rows, cpg_out, px, wg, go, &mut gimg[grp * rows * px..][..rows * px]);
                } else {
                    col.fill(0.0);
                    gemm_tn(rows, cpg_out, px, wg, go, &mut col);
                    col2im(g, &col, grp * g.in_per_group(), gimg);
                }
            }
        }
    }
}

/// Per-output-index source taps for half-pixel bilinear sampling along one axis.
#[derive(Clone, Copy, Debug)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f32,
}

pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            Tap {
                i0,
                i1,
                frac: (src - i0 as f64) as f32,
            }
        })
        .collect()
}

pub fn bilinear_forward(planes: usize, (ih, iw): (usize, usize), (oh, ow): (usize, usize), x: &[f32]) -> Vec<f32> {
    let ty = bilinear_taps(ih, oh);
    let tx = bilinear_taps(iw, ow);
    let mut out = vec![0.0f32; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * ih * iw..(p + 1) * ih * iw];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, ry) in ty.iter().enumerate() {
            let r0 = &src[ry.i0 * iw..(ry.i0 + 1) * iw];
            let r1 = &src[ry.i1 * iw..(ry.i1 + 1) * iw];
            // lerp form keeps constant regions and zero offsets exact
            for (ox, rx) in tx.iter().enumerate() {
                let top = r0[rx.i0] + (r0[rx.i1] - r0[rx.i0]) * rx.frac;
                let bot = r1[rx.i0] + (r1[rx.i1] - r1[rx.i0]) * rx.frac;
                dst[oy * ow + ox] = top + (bot - top) * ry.frac;
            }
        }
    }
    out
}

pub fn bilinear_backward(
    planes: usize,
    (ih, iw): (usize, usize),
    (oh, ow): (usize, usize),
    grad_out: &[f32],
    grad_x: &mut [f32],
) {
    let ty = bilinear_taps(ih, oh);
    let tx = bilinear_taps(iw, ow);
    for p in 0..planes {
        let go = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let gx = &mut grad_x[p * ih * iw..(p + 1) * ih * iw];
        for (oy, ry) in ty.iter().enumerate() {
            let (wy0, wy1) = (1.0 - ry.frac, ry.frac);
            for (ox, rx) in tx.iter().enumerate() {
                let g = go[oy * ow + ox];
                let (wx0, wx1) = (1.0 - rx.frac, rx.frac);
                gx[ry.i0 * iw + rx.i0] += g * wy0 * wx0;
                gx[ry.i0 * iw + rx.i1] += g * wy0 * wx1;
                gx[ry.i1 * iw + rx.i0] += g * wy1 * wx0;
                gx[ry.i1 * iw + rx.i1] += g * wy1 * wx1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f32], w: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; g.batch * g.out_c * g.out_h * g.out_w];
        let cin_g = g.in_c / g.groups;
        let cout_g = g.out_c / g.groups;
        for n in 0..g.batch {
            for co in 0..g.out_c {
                let grp = co / cout_g;
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = 0.0;
                        for ci in 0..cin_g {
                            for ky in 0..g.k_h {
                                for kx in 0..g.k_w {
                                    let iy = (oy * g.stride.0 + ky) as isize - g.pad.0 as isize;
                                    let ix = (ox * g.stride.1 + kx) as isize - g.pad.1 as isize;
                                    if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                        continue;
                                    }
                                    let c = grp * cin_g + ci;
                                    acc += x[((n * g.in_c + c) * g.in_h + iy as usize) * g.in_w + ix as usize]
                                        * w[((co * cin_g + ci) * g.k_h + ky) * g.k_w + kx];
                                }
                            }
                        }
                        out[((n * g.out_c + co) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let g = ConvGeom {
            batch: 2,
            in_c: 4,
            in_h: 5,
            in_w: 6,
            out_c: 6,
            k_h: 3,
            k_w: 3,
            stride: (2, 1),
            pad: (1, 1),
            groups: 2,
            out_h: 3,
            out_w: 6,
        };
        let x: Vec<f32> = (0..2 * 4 * 5 * 6).map(|i| ((i * 37 % 11) as f32) * 0.1 - 0.5).collect();
        let w: Vec<f32> = (0..6 * 2 * 9).map(|i| ((i * 13 % 7) as f32) * 0.2 - 0.6).collect();
        let fast = conv2d_forward(&g, &x, &w, None);
        let slow = naive_conv(&g, &x, &w);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn gemm_variants_agree() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i % 7) as f32 - 3.0).collect();
        let mut c1 = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c1);

        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm_tn(m, k, n, &at, &b, &mut c2);

        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c3 = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, &mut c3);
        assert_eq!(c1, c2);
        assert_eq!(c1, c3);
    }

    #[test]
    fn bilinear_half_pixel_row() {
        let out = bilinear_forward(1, (1, 2), (1, 4), &[0.0, 1.0]);
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
    }
}
