//! Dense numeric kernels behind the tape operations.
//!
//! Every kernel walks its loops in a fixed order, so results are
//! bit-reproducible for a given input.

use super::Real;

/// Geometry of a 3D convolution with a cubic kernel.
///
/// Activations are `[n, channels, d, h, w]` with `w` fastest; weights are
/// `[co, ci, k, k, k]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    /// `None` when the kernel does not fit the padded input.
    pub fn new(
        n: usize,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        input: [usize; 3],
    ) -> Option<Self> {
        if k == 0 || stride == 0 {
            return None;
        }
        let mut output = [0; 3];
        for (o, &i) in output.iter_mut().zip(&input) {
            let padded = i + 2 * pad;
            if padded < k {
                return None;
            }
            *o = (padded - k) / stride + 1;
        }
        Some(ConvGeom {
            n,
            ci,
            co,
            k,
            stride,
            pad,
            input,
            output,
        })
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.n, self.ci, self.input[0], self.input[1], self.input[2]]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.co, self.output[0], self.output[1], self.output[2]]
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.co, self.ci, self.k, self.k, self.k]
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    fn taps(&self) -> usize {
        self.k * self.k * self.k
    }
}

/// Output positions `o` along one axis for which `o*stride + tap - pad`
/// lands inside `0..input_len`, as a half-open range.
#[inline]
fn valid_range(out_len: usize, input_len: usize, tap: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > tap {
        (pad - tap).div_ceil(stride)
    } else {
        0
    };
    let top = input_len + pad;
    if top < tap + 1 {
        return (0, 0);
    }
    let hi = ((top - 1 - tap) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Calls `f(out_row_offset, in_row_offset, ox_lo, ox_hi, ix_lo)` for every
/// pair of (output row, input row) touched by kernel tap `(kz, ky, kx)`.
#[inline]
fn for_each_row_pair(
    g: &ConvGeom,
    kz: usize,
    ky: usize,
    kx: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let (s, p) = (g.stride, g.pad);
    let (z0, z1) = valid_range(od, id, kz, s, p);
    let (y0, y1) = valid_range(oh, ih, ky, s, p);
    let (x0, x1) = valid_range(ow, iw, kx, s, p);
    if x0 >= x1 {
        return;
    }
    let ix_lo = x0 * s + kx - p;
    for oz in z0..z1 {
        let iz = oz * s + kz - p;
        for oy in y0..y1 {
            let iy = oy * s + ky - p;
            f((oz * oh + oy) * ow, (iz * ih + iy) * iw, x0, x1, ix_lo);
        }
    }
}

/// `y[b, o] = Σ_i Σ_tap w[o, i, tap] · x[b, i, pos(tap)]` (no bias).
pub fn conv3d<T: Real>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    if g.stride == 1 {
        return Padded::new(g).conv(x, w);
    }
    let (isz, osz, taps) = (g.in_plane(), g.out_plane(), g.taps());
    let mut y = vec![T::zero(); g.n * g.co * osz];
    let s = g.stride;
    for b in 0..g.n {
        for oc in 0..g.co {
            let out = &mut y[(b * g.co + oc) * osz..][..osz];
            for ic in 0..g.ci {
                let inp = &x[(b * g.ci + ic) * isz..][..isz];
                let wk = &w[(oc * g.ci + ic) * taps..][..taps];
                for kz in 0..g.k {
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let wv = wk[(kz * g.k + ky) * g.k + kx];
                            for_each_row_pair(g, kz, ky, kx, |orow, irow, x0, x1, ix0| {
                                let o = &mut out[orow + x0..orow + x1];
                                if s == 1 {
                                    let i = &inp[irow + ix0..irow + ix0 + o.len()];
                                    for (ov, &iv) in o.iter_mut().zip(i) {
                                        *ov += wv * iv;
                                    }
                                } else {
                                    for (j, ov) in o.iter_mut().enumerate() {
                                        *ov += wv * inp[irow + ix0 + j * s];
                                    }
                                }
                            });
                        }
                    }
                }
            }
        }
    }
    y
}

/// Adjoint of [`conv3d`] in `x`: maps an output-shaped tensor back to the
/// input shape.
pub fn conv3d_transpose<T: Real>(g: &ConvGeom, gy: &[T], w: &[T]) -> Vec<T> {
    if g.stride == 1 {
        return Padded::new(g).transpose(gy, w);
    }
    let (isz, osz, taps) = (g.in_plane(), g.out_plane(), g.taps());
    let mut dx = vec![T::zero(); g.n * g.ci * isz];
    let s = g.stride;
    for b in 0..g.n {
        for ic in 0..g.ci {
            let din = &mut dx[(b * g.ci + ic) * isz..][..isz];
            for oc in 0..g.co {
                let gout = &gy[(b * g.co + oc) * osz..][..osz];
                let wk = &w[(oc * g.ci + ic) * taps..][..taps];
                for kz in 0..g.k {
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let wv = wk[(kz * g.k + ky) * g.k + kx];
                            for_each_row_pair(g, kz, ky, kx, |orow, irow, x0, x1, ix0| {
                                let o = &gout[orow + x0..orow + x1];
                                if s == 1 {
                                    let d = &mut din[irow + ix0..irow + ix0 + o.len()];
                                    for (dv, &ov) in d.iter_mut().zip(o) {
                                        *dv += wv * ov;
                                    }
                                } else {
                                    for (j, &ov) in o.iter().enumerate() {
                                        din[irow + ix0 + j * s] += wv * ov;
                                    }
                                }
                            });
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Adjoint of [`conv3d`] in `w`: `dw[o, i, tap] = Σ_b Σ_pos gy[b, o, pos] · x[b, i, pos + tap]`.
pub fn conv3d_weight_grad<T: Real>(g: &ConvGeom, x: &[T], gy: &[T]) -> Vec<T> {
    if g.stride == 1 {
        return Padded::new(g).weight_grad(x, gy);
    }
    let (isz, osz, taps) = (g.in_plane(), g.out_plane(), g.taps());
    let mut dw = vec![T::zero(); g.co * g.ci * taps];
    let s = g.stride;
    for oc in 0..g.co {
        for ic in 0..g.ci {
            let dk = &mut dw[(oc * g.ci + ic) * taps..][..taps];
            for kz in 0..g.k {
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let mut acc = T::zero();
                        for b in 0..g.n {
                            let inp = &x[(b * g.ci + ic) * isz..][..isz];
                            let gout = &gy[(b * g.co + oc) * osz..][..osz];
                            for_each_row_pair(g, kz, ky, kx, |orow, irow, x0, x1, ix0| {
                                let o = &gout[orow + x0..orow + x1];
                                if s == 1 {
                                    let i = &inp[irow + ix0..irow + ix0 + o.len()];
                                    acc += dot(o, i);
                                } else {
                                    for (j, &ov) in o.iter().enumerate() {
                                        acc += ov * inp[irow + ix0 + j * s];
                                    }
                                }
                            });
                        }
                        dk[(kz * g.k + ky) * g.k + kx] = acc;
                    }
                }
            }
        }
    }
    dw
}

/// Dot product with sixteen independent accumulators (fixed order).
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    const L: usize = 16;
    let mut acc = [T::zero(); L];
    let (ac, bc) = (a.chunks_exact(L), b.chunks_exact(L));
    let tail = ac
        .remainder()
        .iter()
        .zip(bc.remainder())
        .fold(T::zero(), |s, (&p, &q)| s + p * q);
    for (pa, pb) in ac.zip(bc) {
        for l in 0..L {
            acc[l] += pa[l] * pb[l];
        }
    }
    let mut width = L;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] += acc[l + width];
        }
    }
    acc[0] + tail
}

#[inline]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Stride-1 convolution on zero-padded planes.
///
/// With the input padded to `dp × hp × wp`, output voxel `(z, y, x)` sits at
/// `z·hp·wp + y·wp + x` of a "wide" buffer and reads input `wide + off(tap)`,
/// so each tap is a single contiguous axpy or dot. Wide positions with
/// `y ≥ oh` or `x ≥ ow` are junk and are dropped (or zero on the way in).
struct Padded {
    g: ConvGeom,
    hp: usize,
    wp: usize,
    padded_len: usize,
    /// Length of the wide range that covers every real output voxel.
    span: usize,
}

impl Padded {
    fn new(g: &ConvGeom) -> Padded {
        let [d, h, w] = g.input;
        let (dp, hp, wp) = (d + 2 * g.pad, h + 2 * g.pad, w + 2 * g.pad);
        let [od, oh, ow] = g.output;
        Padded {
            g: *g,
            hp,
            wp,
            padded_len: dp * hp * wp,
            span: (od - 1) * hp * wp + (oh - 1) * wp + ow,
        }
    }

    fn offset(&self, kz: usize, ky: usize, kx: usize) -> usize {
        (kz * self.hp + ky) * self.wp + kx
    }

    fn pad_into<T: Real>(&self, src: &[T], dst: &mut [T]) {
        let [d, h, w] = self.g.input;
        let p = self.g.pad;
        for z in 0..d {
            for y in 0..h {
                let o = ((z + p) * self.hp + y + p) * self.wp + p;
                dst[o..o + w].copy_from_slice(&src[(z * h + y) * w..][..w]);
            }
        }
    }

    fn unpad_from<T: Real>(&self, src: &[T], dst: &mut [T]) {
        let [d, h, w] = self.g.input;
        let p = self.g.pad;
        for z in 0..d {
            for y in 0..h {
                let o = ((z + p) * self.hp + y + p) * self.wp + p;
                dst[(z * h + y) * w..][..w].copy_from_slice(&src[o..o + w]);
            }
        }
    }

    fn wide_to_out<T: Real>(&self, wide: &[T], out: &mut [T]) {
        let [od, oh, ow] = self.g.output;
        for z in 0..od {
            for y in 0..oh {
                let o = (z * self.hp + y) * self.wp;
                out[(z * oh + y) * ow..][..ow].copy_from_slice(&wide[o..o + ow]);
            }
        }
    }

    fn out_to_wide<T: Real>(&self, out: &[T], wide: &mut [T]) {
        let [od, oh, ow] = self.g.output;
        for z in 0..od {
            for y in 0..oh {
                let o = (z * self.hp + y) * self.wp;
                wide[o..o + ow].copy_from_slice(&out[(z * oh + y) * ow..][..ow]);
            }
        }
    }

    fn padded_inputs<T: Real>(&self, x: &[T]) -> Vec<T> {
        let g = &self.g;
        let isz = g.in_plane();
        let mut xp = vec![T::zero(); g.n * g.ci * self.padded_len];
        for (src, dst) in x.chunks_exact(isz).zip(xp.chunks_exact_mut(self.padded_len)) {
            self.pad_into(src, dst);
        }
        xp
    }

    fn wide_outputs<T: Real>(&self, gy: &[T]) -> Vec<T> {
        let g = &self.g;
        let osz = g.out_plane();
        let mut wide = vec![T::zero(); g.n * g.co * self.span];
        for (src, dst) in gy.chunks_exact(osz).zip(wide.chunks_exact_mut(self.span)) {
            self.out_to_wide(src, dst);
        }
        wide
    }

    fn conv<T: Real>(&self, x: &[T], w: &[T]) -> Vec<T> {
        let g = &self.g;
        let (osz, taps, k) = (g.out_plane(), g.taps(), g.k);
        let xp = self.padded_inputs(x);
        let mut y = vec![T::zero(); g.n * g.co * osz];
        let mut wide = vec![T::zero(); self.span];
        for b in 0..g.n {
            for oc in 0..g.co {
                wide.iter_mut().for_each(|v| *v = T::zero());
                for ic in 0..g.ci {
                    let inp = &xp[(b * g.ci + ic) * self.padded_len..][..self.padded_len];
                    let wk = &w[(oc * g.ci + ic) * taps..][..taps];
                    for kz in 0..k {
                        for ky in 0..k {
                            for kx in 0..k {
                                let off = self.offset(kz, ky, kx);
                                axpy(&mut wide, wk[(kz * k + ky) * k + kx], &inp[off..off + self.span]);
                            }
                        }
                    }
                }
                self.wide_to_out(&wide, &mut y[(b * g.co + oc) * osz..][..osz]);
            }
        }
        y
    }

    fn transpose<T: Real>(&self, gy: &[T], w: &[T]) -> Vec<T> {
        let g = &self.g;
        let (isz, taps, k) = (g.in_plane(), g.taps(), g.k);
        let gw = self.wide_outputs(gy);
        let mut dx = vec![T::zero(); g.n * g.ci * isz];
        let mut dpad = vec![T::zero(); self.padded_len];
        for b in 0..g.n {
            for ic in 0..g.ci {
                dpad.iter_mut().for_each(|v| *v = T::zero());
                for oc in 0..g.co {
                    let go = &gw[(b * g.co + oc) * self.span..][..self.span];
                    let wk = &w[(oc * g.ci + ic) * taps..][..taps];
                    for kz in 0..k {
                        for ky in 0..k {
                            for kx in 0..k {
                                let off = self.offset(kz, ky, kx);
                                axpy(&mut dpad[off..off + self.span], wk[(kz * k + ky) * k + kx], go);
                            }
                        }
                    }
                }
                self.unpad_from(&dpad, &mut dx[(b * g.ci + ic) * isz..][..isz]);
            }
        }
        dx
    }

    fn weight_grad<T: Real>(&self, x: &[T], gy: &[T]) -> Vec<T> {
        let g = &self.g;
        let (taps, k) = (g.taps(), g.k);
        let xp = self.padded_inputs(x);
        let gw = self.wide_outputs(gy);
        let mut dw = vec![T::zero(); g.co * g.ci * taps];
        for oc in 0..g.co {
            for ic in 0..g.ci {
                let dk = &mut dw[(oc * g.ci + ic) * taps..][..taps];
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let off = self.offset(kz, ky, kx);
                            let mut acc = T::zero();
                            for b in 0..g.n {
                                let go = &gw[(b * g.co + oc) * self.span..][..self.span];
                                let inp = &xp[(b * g.ci + ic) * self.padded_len..][..self.padded_len];
                                acc += dot(go, &inp[off..off + self.span]);
                            }
                            dk[(kz * k + ky) * k + kx] = acc;
                        }
                    }
                }
            }
        }
        dw
    }
}

/// Non-overlapping max pooling with a cubic window; returns, for every output
/// element, the flat input index of the (first) maximum.
pub fn maxpool3d_indices<T: Real>(x: &[T], shape: &[usize], window: usize) -> (Vec<usize>, Vec<u32>) {
    let (n, c, d, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let (od, oh, ow) = (d / window, h / window, w / window);
    let out_shape = vec![n, c, od, oh, ow];
    let mut idx = Vec::with_capacity(n * c * od * oh * ow);
    for plane in 0..n * c {
        let base = plane * d * h * w;
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + ((oz * window) * h + oy * window) * w + ox * window;
                    let mut best_v = x[best];
                    for dz in 0..window {
                        for dy in 0..window {
                            for dx in 0..window {
                                let i = base
                                    + ((oz * window + dz) * h + oy * window + dy) * w
                                    + ox * window
                                    + dx;
                                if x[i] > best_v {
                                    best_v = x[i];
                                    best = i;
                                }
                            }
                        }
                    }
                    idx.push(best as u32);
                }
            }
        }
    }
    (out_shape, idx)
}

/// `C = op(A) · op(B)` where `op` optionally transposes; `a` is stored as
/// `a_rows × a_cols` and `b` as `b_rows × b_cols`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(
    a: &[T],
    a_rows: usize,
    a_cols: usize,
    ta: bool,
    b: &[T],
    b_rows: usize,
    b_cols: usize,
    tb: bool,
) -> (usize, usize, Vec<T>) {
    let (m, k) = if ta { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let n = if tb { b_rows } else { b_cols };
    let a_eff: std::borrow::Cow<[T]> = if ta {
        transpose(a, a_rows, a_cols).into()
    } else {
        a.into()
    };
    let b_eff: std::borrow::Cow<[T]> = if tb {
        transpose(b, b_rows, b_cols).into()
    } else {
        b.into()
    };
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a_eff[i * k + p];
            let brow = &b_eff[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    (m, n, c)
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Row-wise log-softmax over the last axis of a `rows × cols` matrix.
pub fn log_softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).fold(T::zero(), |a, b| a + b).ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

pub fn softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - max).exp()));
        let sum = out[start..].iter().fold(T::zero(), |a, &b| a + b);
        for v in &mut out[start..] {
            *v = *v / sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight-line convolution by definition, used as an oracle.
    fn conv_naive(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let [id, ih, iw] = g.input;
        let [od, oh, ow] = g.output;
        let mut y = vec![0.0; g.n * g.co * od * oh * ow];
        for b in 0..g.n {
            for oc in 0..g.co {
                for oz in 0..od {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for ic in 0..g.ci {
                                for kz in 0..g.k {
                                    for ky in 0..g.k {
                                        for kx in 0..g.k {
                                            let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                            if iz < 0 || iy < 0 || ix < 0 {
                                                continue;
                                            }
                                            let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                            if iz >= id || iy >= ih || ix >= iw {
                                                continue;
                                            }
                                            acc += w[(((oc * g.ci + ic) * g.k + kz) * g.k + ky) * g.k + kx]
                                                * x[(((b * g.ci + ic) * id + iz) * ih + iy) * iw + ix];
                                        }
                                    }
                                }
                            }
                            y[(((b * g.co + oc) * od + oz) * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn conv_matches_naive_across_geometries() {
        let mut seed = 7;
        for &(stride, pad, k) in &[(1, 1, 3), (1, 0, 3), (2, 1, 3), (2, 0, 2), (3, 2, 3), (1, 0, 1)] {
            let g = ConvGeom::new(2, 2, 3, k, stride, pad, [5, 4, 6]).unwrap();
            let x: Vec<f64> = (0..g.n * g.ci * 120).map(|_| lcg(&mut seed)).collect();
            let w: Vec<f64> = (0..g.co * g.ci * k * k * k).map(|_| lcg(&mut seed)).collect();
            let fast = conv3d(&g, &x, &w);
            let slow = conv_naive(&g, &x, &w);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        // <conv(x, w), gy> = <x, convT(gy, w)> = <w, dW(x, gy)>
        let mut seed = 99;
        for &(stride, pad) in &[(1, 1), (2, 1), (2, 0), (3, 1)] {
            let g = ConvGeom::new(2, 3, 2, 3, stride, pad, [7, 5, 6]).unwrap();
            let x: Vec<f64> = (0..g.input_shape().iter().product()).map(|_| lcg(&mut seed)).collect();
            let w: Vec<f64> = (0..g.weight_shape().iter().product()).map(|_| lcg(&mut seed)).collect();
            let gy: Vec<f64> = (0..g.output_shape().iter().product()).map(|_| lcg(&mut seed)).collect();
            let y = conv3d(&g, &x, &w);
            let lhs: f64 = y.iter().zip(&gy).map(|(a, b)| a * b).sum();
            let dx = conv3d_transpose(&g, &gy, &w);
            let mid: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
            let dw = conv3d_weight_grad(&g, &x, &gy);
            let rhs: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            assert!((lhs - mid).abs() < 1e-10 * lhs.abs().max(1.0));
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn valid_range_edges() {
        // pad 1, tap 0: output 0 maps to input -1.
        assert_eq!(valid_range(4, 4, 0, 1, 1), (1, 4));
        assert_eq!(valid_range(4, 4, 2, 1, 1), (0, 3));
        assert_eq!(valid_range(2, 4, 1, 2, 0), (0, 2));
    }

    #[test]
    fn matmul_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, 2, 2, false, &b, 2, 2, false).2, vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(matmul(&a, 2, 2, true, &b, 2, 2, false).2, vec![26.0, 30.0, 38.0, 44.0]);
        assert_eq!(matmul(&a, 2, 2, false, &b, 2, 2, true).2, vec![17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn pool_picks_first_max() {
        let x = [1.0f64, 3.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let (shape, idx) = maxpool3d_indices(&x, &[1, 1, 2, 2, 2], 2);
        assert_eq!(shape, vec![1, 1, 1, 1, 1]);
        assert_eq!(idx, vec![1]);
    }
}
