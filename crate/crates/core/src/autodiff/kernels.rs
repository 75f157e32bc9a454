//! Slice-level forward/backward kernels for the spatial ops.
//!
//! All kernels operate on a single sample laid out as `[C, H, W]` row-major.
//! They are single-threaded and iterate in a fixed order, so results are
//! bitwise reproducible.

use crate::tensor::Scalar;

/// Stride/padding/dilation/group settings of a 2-D convolution. Pairs are
/// `(vertical, horizontal)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

impl ConvSpec {
    pub fn padded(padding: usize) -> Self {
        ConvSpec {
            padding: (padding, padding),
            ..Self::default()
        }
    }

    /// 3x3 with `padding == dilation`, which keeps the spatial size.
    pub fn dilated_same(dilation: usize) -> Self {
        ConvSpec {
            padding: (dilation, dilation),
            dilation: (dilation, dilation),
            ..Self::default()
        }
    }

    pub fn depthwise(channels: usize) -> Self {
        ConvSpec {
            padding: (1, 1),
            groups: channels,
            ..Self::default()
        }
    }

    pub fn out_dim(&self, input: usize, kernel: usize, axis: usize) -> Option<usize> {
        let (stride, pad, dil) = match axis {
            0 => (self.stride.0, self.padding.0, self.dilation.0),
            _ => (self.stride.1, self.padding.1, self.dilation.1),
        };
        let span = dil * (kernel - 1) + 1;
        let padded = input + 2 * pad;
        if padded < span || stride == 0 {
            return None;
        }
        Some((padded - span) / stride + 1)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    fn cin_per_group(&self) -> usize {
        self.cin / self.spec.groups
    }

    fn cout_per_group(&self) -> usize {
        self.cout / self.spec.groups
    }

    /// Output-column range `[lo, hi)` whose input column `ox*sw + kx*dw - pw`
    /// lands inside `[0, w)`.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let sw = self.spec.stride.1 as isize;
        let off = (kx * self.spec.dilation.1) as isize - self.spec.padding.1 as isize;
        let w = self.w as isize;
        // ox*sw + off >= 0  and  ox*sw + off <= w - 1
        let lo = if off >= 0 { 0 } else { (-off + sw - 1) / sw };
        let hi = if w - 1 - off < 0 {
            0
        } else {
            ((w - 1 - off) / sw + 1).min(self.ow as isize)
        };
        (lo as usize, hi.max(lo) as usize)
    }

    #[inline]
    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.spec.stride.0 + ky * self.spec.dilation.0) as isize
            - self.spec.padding.0 as isize;
        (iy >= 0 && iy < self.h as isize).then_some(iy as usize)
    }

    #[inline]
    fn input_col(&self, ox: usize, kx: usize) -> usize {
        ox * self.spec.stride.1 + kx * self.spec.dilation.1 - self.spec.padding.1
    }
}

pub(crate) fn conv2d_forward<F: Scalar>(x: &[F], wt: &[F], g: &ConvGeom) -> Vec<F> {
    let mut out = vec![F::zero(); g.cout * g.oh * g.ow];
    let (cin_g, cout_g) = (g.cin_per_group(), g.cout_per_group());
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let sw = g.spec.stride.1;
    for oc in 0..g.cout {
        let group = oc / cout_g;
        let out_plane = &mut out[oc * plane_out..(oc + 1) * plane_out];
        for icg in 0..cin_g {
            let ic = group * cin_g + icg;
            let in_plane = &x[ic * plane_in..(ic + 1) * plane_in];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = wt[((oc * cin_g + icg) * g.kh + ky) * g.kw + kx];
                    let (lo, hi) = g.col_range(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..g.oh {
                        let Some(iy) = g.input_row(oy, ky) else {
                            continue;
                        };
                        let in_row = &in_plane[iy * g.w..(iy + 1) * g.w];
                        let out_row = &mut out_plane[oy * g.ow..(oy + 1) * g.ow];
                        let base = g.input_col(lo, kx);
                        if sw == 1 {
                            let src = &in_row[base..base + (hi - lo)];
                            for (o, &v) in out_row[lo..hi].iter_mut().zip(src) {
                                *o += wv * v;
                            }
                        } else {
                            for (j, o) in out_row[lo..hi].iter_mut().enumerate() {
                                *o += wv * in_row[base + j * sw];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_weight)`.
pub(crate) fn conv2d_backward<F: Scalar>(
    x: &[F],
    wt: &[F],
    grad_out: &[F],
    g: &ConvGeom,
) -> (Vec<F>, Vec<F>) {
    let mut gx = vec![F::zero(); x.len()];
    let mut gw = vec![F::zero(); wt.len()];
    let (cin_g, cout_g) = (g.cin_per_group(), g.cout_per_group());
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let sw = g.spec.stride.1;
    for oc in 0..g.cout {
        let group = oc / cout_g;
        let go_plane = &grad_out[oc * plane_out..(oc + 1) * plane_out];
        for icg in 0..cin_g {
            let ic = group * cin_g + icg;
            let in_plane = &x[ic * plane_in..(ic + 1) * plane_in];
            let gx_plane = &mut gx[ic * plane_in..(ic + 1) * plane_in];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let widx = ((oc * cin_g + icg) * g.kh + ky) * g.kw + kx;
                    let wv = wt[widx];
                    let (lo, hi) = g.col_range(kx);
                    if lo >= hi {
                        continue;
                    }
                    let mut acc = F::zero();
                    for oy in 0..g.oh {
                        let Some(iy) = g.input_row(oy, ky) else {
                            continue;
                        };
                        let go_row = &go_plane[oy * g.ow + lo..oy * g.ow + hi];
                        let base = iy * g.w + g.input_col(lo, kx);
                        if sw == 1 {
                            let in_row = &in_plane[base..base + (hi - lo)];
                            for (&d, &v) in go_row.iter().zip(in_row) {
                                acc += d * v;
                            }
                            let gx_row = &mut gx_plane[base..base + (hi - lo)];
                            for (gxv, &d) in gx_row.iter_mut().zip(go_row) {
                                *gxv += wv * d;
                            }
                        } else {
                            for (j, &d) in go_row.iter().enumerate() {
                                acc += d * in_plane[base + j * sw];
                                gx_plane[base + j * sw] += wv * d;
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (gx, gw)
}

/// 2x2 max pool with stride 2 and floor semantics. Returns the pooled map and
/// the flat input index chosen for each output cell (first maximum wins).
pub(crate) fn max_pool2_forward<F: Scalar>(
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<F>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

/// Half-pixel source coordinate: `(dst + 0.5) * in/out - 0.5`, clamped at 0.
/// Returns the two neighbouring taps and the weight of the upper one.
#[inline]
pub(crate) fn bilinear_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = if i0 + 1 < in_len { i0 + 1 } else { i0 };
    let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
    (i0, i1, frac)
}

pub(crate) struct BilinearPlan {
    pub rows: Vec<(usize, usize, f64)>,
    pub cols: Vec<(usize, usize, f64)>,
}

impl BilinearPlan {
    pub fn new(h: usize, w: usize, oh: usize, ow: usize) -> Self {
        BilinearPlan {
            rows: (0..oh).map(|y| bilinear_taps(y, h, oh)).collect(),
            cols: (0..ow).map(|x| bilinear_taps(x, w, ow)).collect(),
        }
    }
}

pub(crate) fn bilinear_forward<F: Scalar>(
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<F> {
    let plan = BilinearPlan::new(h, w, oh, ow);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let p = &x[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &plan.rows {
            let (fy1, fy0) = (F::from_f64_lossy(fy), F::from_f64_lossy(1.0 - fy));
            for &(x0, x1, fx) in &plan.cols {
                let (fx1, fx0) = (F::from_f64_lossy(fx), F::from_f64_lossy(1.0 - fx));
                let top = p[y0 * w + x0] * fx0 + p[y0 * w + x1] * fx1;
                let bot = p[y1 * w + x0] * fx0 + p[y1 * w + x1] * fx1;
                out.push(top * fy0 + bot * fy1);
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<F: Scalar>(
    grad_out: &[F],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<F> {
    let plan = BilinearPlan::new(h, w, oh, ow);
    let mut gx = vec![F::zero(); c * h * w];
    for ch in 0..c {
        let gp = &mut gx[ch * h * w..(ch + 1) * h * w];
        let go = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in plan.rows.iter().enumerate() {
            let (fy1, fy0) = (F::from_f64_lossy(fy), F::from_f64_lossy(1.0 - fy));
            for (ox, &(x0, x1, fx)) in plan.cols.iter().enumerate() {
                let (fx1, fx0) = (F::from_f64_lossy(fx), F::from_f64_lossy(1.0 - fx));
                let d = go[oy * ow + ox];
                gp[y0 * w + x0] += d * fy0 * fx0;
                gp[y0 * w + x1] += d * fy0 * fx1;
                gp[y1 * w + x0] += d * fy1 * fx0;
                gp[y1 * w + x1] += d * fy1 * fx1;
            }
        }
    }
    gx
}

/// Adaptive pooling bin `[floor(i*n/out), ceil((i+1)*n/out))`.
#[inline]
pub(crate) fn adaptive_bin(i: usize, n: usize, out: usize) -> (usize, usize) {
    let start = (i * n) / out;
    let end = ((i + 1) * n).div_ceil(out);
    (start, end)
}

pub(crate) fn adaptive_avg_forward<F: Scalar>(
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<F> {
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let p = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, w, ow);
                let mut acc = F::zero();
                for yy in y0..y1 {
                    for v in &p[yy * w + x0..yy * w + x1] {
                        acc += *v;
                    }
                }
                out.push(acc / F::from_usize((y1 - y0) * (x1 - x0)).unwrap());
            }
        }
    }
    out
}

pub(crate) fn adaptive_avg_backward<F: Scalar>(
    grad_out: &[F],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<F> {
    let mut gx = vec![F::zero(); c * h * w];
    for ch in 0..c {
        let gp = &mut gx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, w, ow);
                let d = grad_out[(ch * oh + oy) * ow + ox]
                    / F::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                for yy in y0..y1 {
                    for v in &mut gp[yy * w + x0..yy * w + x1] {
                        *v += d;
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_bins_cover_input() {
        for n in 1..20 {
            for out in 1..=n {
                let mut covered = vec![false; n];
                for i in 0..out {
                    let (s, e) = adaptive_bin(i, n, out);
                    assert!(s < e && e <= n);
                    covered[s..e].iter_mut().for_each(|c| *c = true);
                }
                assert!(covered.iter().all(|&c| c));
            }
        }
    }

    #[test]
    fn bilinear_taps_identity_when_sizes_match() {
        for i in 0..7 {
            let (a, _, f) = bilinear_taps(i, 7, 7);
            assert_eq!(a, i);
            assert_eq!(f, 0.0);
        }
    }

    #[test]
    fn col_range_handles_padding_and_dilation() {
        let spec = ConvSpec::dilated_same(7);
        let g = ConvGeom {
            cin: 1,
            h: 15,
            w: 15,
            cout: 1,
            kh: 3,
            kw: 3,
            oh: 15,
            ow: 15,
            spec,
        };
        // kx = 0 reads column ox - 7, valid for ox in 7..15.
        assert_eq!(g.col_range(0), (7, 15));
        assert_eq!(g.col_range(1), (0, 15));
        assert_eq!(g.col_range(2), (0, 8));
    }
}
