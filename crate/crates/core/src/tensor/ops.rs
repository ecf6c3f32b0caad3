//! Layer kernels: forward and backward passes over flat row-major buffers.
//!
//! Shapes are passed explicitly as `[B, C, H, W]`. Backward kernels
//! *accumulate* into the gradient buffers (callers zero them first). The
//! innermost loops are written as contiguous slice zips so they vectorize;
//! this crate has no BLAS behind it and these loops carry the whole
//! training budget.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// 2-D cross-correlation with odd square-ish kernels, `same` padding and a
/// uniform dilation rate. `x` is `(B,Ci,H,W)`, `w` is `(Co,Ci,Kh,Kw)`,
/// `bias` has length `Co`, `out` is `(B,Co,H,W)`. When `relu` is set the
/// activation is fused into the output.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd<T: Real>(
    x: &[T],
    xs: [usize; 4],
    w: &[T],
    ws: [usize; 4],
    bias: &[T],
    dilation: usize,
    relu: bool,
    out: &mut [T],
) -> Result<()> {
    let [b_n, ci, h, wd] = xs;
    let [co, wci, kh, kw] = ws;
    if dilation < 1 {
        return Err(Error::invalid(format!("conv2d: dilation {dilation} < 1")));
    }
    if wci != ci {
        return Err(Error::invalid(format!(
            "conv2d: input has {ci} channels but kernel expects {wci}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid(format!(
            "conv2d: kernel {kh}x{kw} must have odd extents for same-size padding"
        )));
    }
    if bias.len() != co {
        return Err(Error::invalid("conv2d: bias length != out channels"));
    }
    debug_assert_eq!(x.len(), b_n * ci * h * wd);
    debug_assert_eq!(out.len(), b_n * co * h * wd);

    if kh == kw && kh <= 3 {
        match tile_width(wd) {
            Some(8) => return Ok(fwd_tiled::<T, 8>(x, xs, w, ws, bias, dilation, relu, out)),
            Some(16) => return Ok(fwd_tiled::<T, 16>(x, xs, w, ws, bias, dilation, relu, out)),
            Some(32) => return Ok(fwd_tiled::<T, 32>(x, xs, w, ws, bias, dilation, relu, out)),
            _ => {}
        }
    }
    conv2d_fwd_ref(x, xs, w, ws, bias, dilation, relu, out);
    Ok(())
}

/// Lane count for the register-tiled kernels, or `None` if the plane is too
/// wide for them.
fn tile_width(w: usize) -> Option<usize> {
    match w {
        1..=8 => Some(8),
        9..=16 => Some(16),
        17..=32 => Some(32),
        _ => None,
    }
}

/// Zero-pads every channel plane of one sample by `m` on each side:
/// `dst` is `(C, H+2m, WP)` with the payload at `[m+ih][m..m+w]`. The border
/// is zeroed once by the caller and never written here.
fn pad_sample<T: Real>(
    x: &[T],
    c_n: usize,
    h: usize,
    wd: usize,
    m: usize,
    wp: usize,
    dst: &mut [T],
) {
    let hp = h + 2 * m;
    for c in 0..c_n {
        for ih in 0..h {
            let src = &x[(c * h + ih) * wd..(c * h + ih + 1) * wd];
            dst[c * hp * wp + (ih + m) * wp + m..c * hp * wp + (ih + m) * wp + m + wd]
                .copy_from_slice(src);
        }
    }
}

/// One block of `CB` output channels of a forward-style convolution over one
/// sample's pre-padded planes. Padded-index algebra: with `m = (K/2)*d`, the
/// input row for tap `ky` is simply `oh + ky*d`, the column offset `kx*d`.
///
/// Keeping `CB` whole-row `[T; WT]` accumulators live across the tap loops
/// gives the FMA units enough independent dependency chains to hide their
/// latency, and the fixed-size row views (`&[T; WT]`, `[T; K]`) keep the
/// unrolled inner loops free of bounds checks and index arithmetic.
///
/// Both conv passes route through here: the true forward (`bias` set, writes
/// rows, optional fused ReLU) and the input-gradient pass (`bias` `None`,
/// accumulates into `out`, with `planes` the padded output gradient and `wts`
/// the channel-transposed flipped weights).
#[allow(clippy::too_many_arguments)]
fn conv_block<T: Real, const WT: usize, const K: usize, const CB: usize>(
    planes: &[T],
    wts: &[T],
    bias: Option<&[T]>,
    relu: bool,
    n_in: usize,
    h: usize,
    wd: usize,
    d: usize,
    c0: usize,
    out: &mut [T],
) {
    let m = (K / 2) * d;
    let hp = h + 2 * m;
    let wp = WT + 2 * m;
    for oh in 0..h {
        let mut acc = [[T::zero(); WT]; CB];
        for (ic, plane) in planes.chunks_exact(hp * wp).enumerate() {
            for ky in 0..K {
                let r0 = (oh + ky * d) * wp;
                let prow = &plane[r0..r0 + wp];
                // One length-K weight row per blocked channel for this (ic, ky).
                let mut wrow = [[T::zero(); K]; CB];
                for (j, wr) in wrow.iter_mut().enumerate() {
                    let base = (((c0 + j) * n_in + ic) * K + ky) * K;
                    wr.copy_from_slice(&wts[base..base + K]);
                }
                for kx in 0..K {
                    let xsl: &[T; WT] = prow[kx * d..kx * d + WT].try_into().unwrap();
                    for (a, wr) in acc.iter_mut().zip(wrow.iter()) {
                        let wv = wr[kx];
                        for i in 0..WT {
                            a[i] = wv.mul_add(xsl[i], a[i]);
                        }
                    }
                }
            }
        }
        for (j, a) in acc.iter().enumerate() {
            let o0 = ((c0 + j) * h + oh) * wd;
            let orow = &mut out[o0..o0 + wd];
            match bias {
                Some(bias) => {
                    let bv = bias[c0 + j];
                    if relu {
                        for (o, &v) in orow.iter_mut().zip(a.iter()) {
                            let v = v + bv;
                            *o = if v > T::zero() { v } else { T::zero() };
                        }
                    } else {
                        for (o, &v) in orow.iter_mut().zip(a.iter()) {
                            *o = v + bv;
                        }
                    }
                }
                None => {
                    for (o, &v) in orow.iter_mut().zip(a.iter()) {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// Runs [`conv_block`] over all output channels of one sample: fixed-size
/// channel blocks while they last, then singles for the remainder. The block
/// size is matched to the tile so the accumulators fit the 16 256-bit vector
/// registers this targets: 4 channels at up to 16 lanes, 2 at 32.
#[allow(clippy::too_many_arguments)]
fn conv_channels<T: Real, const WT: usize, const K: usize>(
    planes: &[T],
    wts: &[T],
    bias: Option<&[T]>,
    relu: bool,
    n_in: usize,
    n_out: usize,
    h: usize,
    wd: usize,
    d: usize,
    out: &mut [T],
) {
    let mut c = 0;
    if WT <= 16 {
        while c + 4 <= n_out {
            conv_block::<T, WT, K, 4>(planes, wts, bias, relu, n_in, h, wd, d, c, out);
            c += 4;
        }
    } else {
        while c + 2 <= n_out {
            conv_block::<T, WT, K, 2>(planes, wts, bias, relu, n_in, h, wd, d, c, out);
            c += 2;
        }
    }
    while c < n_out {
        conv_block::<T, WT, K, 1>(planes, wts, bias, relu, n_in, h, wd, d, c, out);
        c += 1;
    }
}

/// Monomorphizes the tap count for [`conv_channels`]: the tiled path is only
/// dispatched for square kernels up to 3x3.
#[allow(clippy::too_many_arguments)]
fn conv_sample<T: Real, const WT: usize>(
    planes: &[T],
    wts: &[T],
    bias: Option<&[T]>,
    relu: bool,
    n_in: usize,
    n_out: usize,
    h: usize,
    wd: usize,
    k: usize,
    d: usize,
    out: &mut [T],
) {
    match k {
        1 => conv_channels::<T, WT, 1>(planes, wts, bias, relu, n_in, n_out, h, wd, d, out),
        2 => conv_channels::<T, WT, 2>(planes, wts, bias, relu, n_in, n_out, h, wd, d, out),
        3 => conv_channels::<T, WT, 3>(planes, wts, bias, relu, n_in, n_out, h, wd, d, out),
        _ => unreachable!("tiled conv dispatched with unsupported kernel size {k}"),
    }
}

/// Register-tiled forward path: pads each sample once, then hands whole
/// output rows to [`conv_block`].
#[allow(clippy::too_many_arguments)]
fn fwd_tiled<T: Real, const WT: usize>(
    x: &[T],
    xs: [usize; 4],
    w: &[T],
    ws: [usize; 4],
    bias: &[T],
    d: usize,
    relu: bool,
    out: &mut [T],
) {
    let [b_n, ci, h, wd] = xs;
    let [co, _, k, _] = ws;
    let m = (k / 2) * d;
    let hp = h + 2 * m;
    let wp = WT + 2 * m;
    let mut xpad = vec![T::zero(); ci * hp * wp];

    for b in 0..b_n {
        pad_sample(&x[b * ci * h * wd..], ci, h, wd, m, wp, &mut xpad);
        let out_s = &mut out[b * co * h * wd..(b + 1) * co * h * wd];
        conv_sample::<T, WT>(&xpad, w, Some(bias), relu, ci, co, h, wd, k, d, out_s);
    }
}

/// Reference forward path (any odd kernel/dilation/width).
#[allow(clippy::too_many_arguments)]
fn conv2d_fwd_ref<T: Real>(
    x: &[T],
    xs: [usize; 4],
    w: &[T],
    ws: [usize; 4],
    bias: &[T],
    dilation: usize,
    relu: bool,
    out: &mut [T],
) {
    let [b_n, ci, h, wd] = xs;
    let [co, _, kh, kw] = ws;
    let kch = (kh / 2) as isize;
    let kcw = (kw / 2) as isize;
    let d = dilation as isize;
    let mut acc = vec![T::zero(); wd];

    for b in 0..b_n {
        for oc in 0..co {
            let bv = bias[oc];
            for oh in 0..h {
                acc.fill(bv);
                for ic in 0..ci {
                    let xch = &x[((b * ci + ic) * h) * wd..((b * ci + ic) * h + h) * wd];
                    let wch = &w[((oc * ci + ic) * kh) * kw..((oc * ci + ic) * kh + kh) * kw];
                    for ky in 0..kh {
                        let ih = oh as isize + (ky as isize - kch) * d;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let xrow = &xch[ih as usize * wd..ih as usize * wd + wd];
                        for kx in 0..kw {
                            let wv = wch[ky * kw + kx];
                            let shift = (kx as isize - kcw) * d;
                            let (a0, a1) = shift_range(wd, shift);
                            let x0 = (a0 as isize + shift) as usize;
                            for (a, &xv) in acc[a0..a1].iter_mut().zip(&xrow[x0..x0 + (a1 - a0)]) {
                                *a = wv.mul_add(xv, *a);
                            }
                        }
                    }
                }
                let orow = &mut out[((b * co + oc) * h + oh) * wd..((b * co + oc) * h + oh + 1) * wd];
                if relu {
                    for (o, &a) in orow.iter_mut().zip(acc.iter()) {
                        *o = if a > T::zero() { a } else { T::zero() };
                    }
                } else {
                    orow.copy_from_slice(&acc);
                }
            }
        }
    }
}

/// Backward pass of [`conv2d_fwd`]. `out` is the forward output (needed to
/// undo a fused ReLU); `dx` may be `None` for leaf inputs. All gradient
/// buffers are accumulated into.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd<T: Real>(
    x: &[T],
    xs: [usize; 4],
    w: &[T],
    ws: [usize; 4],
    dilation: usize,
    relu: bool,
    out: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: &mut [T],
    db: &mut [T],
) {
    let [_, _, _, wd] = xs;
    let [_, _, kh, kw] = ws;
    if kh == kw && kh <= 3 {
        match tile_width(wd) {
            Some(8) => return bwd_tiled::<T, 8>(x, xs, w, ws, dilation, relu, out, dy, dx, dw, db),
            Some(16) => {
                return bwd_tiled::<T, 16>(x, xs, w, ws, dilation, relu, out, dy, dx, dw, db)
            }
            Some(32) => {
                return bwd_tiled::<T, 32>(x, xs, w, ws, dilation, relu, out, dy, dx, dw, db)
            }
            _ => {}
        }
    }
    conv2d_bwd_ref(x, xs, w, ws, dilation, relu, out, dy, dx, dw, db);
}

/// Register-tiled backward. Builds padded copies of the sample input and of
/// the (ReLU-masked) output gradient, then:
///  - `dw[oc,ic,ky,kx] = sum_oh dot(dyeff[oh], xpad[oh+ky*d][kx*d..])`
///    with per-`kx` lane accumulators,
///  - `dx` as a forward-style convolution of the padded output gradient
///    against channel-transposed, spatially-flipped weights,
///  - `db` as plain row sums.
#[allow(clippy::too_many_arguments)]
fn bwd_tiled<T: Real, const WT: usize>(
    x: &[T],
    xs: [usize; 4],
    w: &[T],
    ws: [usize; 4],
    d: usize,
    relu: bool,
    out: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    dw: &mut [T],
    db: &mut [T],
) {
    let [b_n, ci, h, wd] = xs;
    let [co, _, k, _] = ws;
    let m = (k / 2) * d;
    let hp = h + 2 * m;
    let wp = WT + 2 * m;
    let mut xpad = vec![T::zero(); ci * hp * wp];
    let mut dypad = vec![T::zero(); co * hp * wp];

    // w[oc,ic,ky,kx] viewed as wflip[ic,oc,k-1-ky,k-1-kx] for the dx pass.
    let mut wflip = vec![T::zero(); w.len()];
    for oc in 0..co {
        for ic in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    wflip[((ic * co + oc) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                        w[((oc * ci + ic) * k + ky) * k + kx];
                }
            }
        }
    }

    for b in 0..b_n {
        pad_sample(&x[b * ci * h * wd..], ci, h, wd, m, wp, &mut xpad);
        {
            // Mask the output gradient through the fused ReLU while padding.
            let base = b * co * h * wd;
            for c in 0..co {
                for ih in 0..h {
                    let src = base + (c * h + ih) * wd;
                    let dst = c * hp * wp + (ih + m) * wp + m;
                    if relu {
                        for i in 0..wd {
                            dypad[dst + i] = if out[src + i] > T::zero() {
                                dy[src + i]
                            } else {
                                T::zero()
                            };
                        }
                    } else {
                        dypad[dst..dst + wd].copy_from_slice(&dy[src..src + wd]);
                    }
                }
            }
        }

        for oc in 0..co {
            let dplane = &dypad[oc * hp * wp..(oc + 1) * hp * wp];
            let mut bacc = 0.0f64;
            for oh in 0..h {
                for v in &dplane[(oh + m) * wp + m..(oh + m) * wp + m + wd] {
                    bacc += v.as_f64();
                }
            }
            db[oc] += T::from_f64(bacc);

            for ic in 0..ci {
                let plane = &xpad[ic * hp * wp..(ic + 1) * hp * wp];
                for ky in 0..k {
                    // Named accumulators so they stay in registers (a
                    // dynamically indexed array would spill to the stack).
                    let mut a0 = [T::zero(); WT];
                    let mut a1 = [T::zero(); WT];
                    let mut a2 = [T::zero(); WT];
                    for oh in 0..h {
                        let dyrow = &dplane[(oh + m) * wp + m..(oh + m) * wp + m + WT];
                        let xrow = &plane[(oh + ky * d) * wp..(oh + ky * d) * wp + wp];
                        let x0 = &xrow[0..WT];
                        for i in 0..WT {
                            a0[i] = dyrow[i].mul_add(x0[i], a0[i]);
                        }
                        if k == 3 {
                            let x1 = &xrow[d..d + WT];
                            let x2 = &xrow[2 * d..2 * d + WT];
                            for i in 0..WT {
                                a1[i] = dyrow[i].mul_add(x1[i], a1[i]);
                            }
                            for i in 0..WT {
                                a2[i] = dyrow[i].mul_add(x2[i], a2[i]);
                            }
                        }
                    }
                    let base = ((oc * ci + ic) * k + ky) * k;
                    for (kx, acc) in [a0, a1, a2].iter().enumerate().take(k) {
                        let mut s = T::zero();
                        for v in acc.iter() {
                            s += *v;
                        }
                        dw[base + kx] += s;
                    }
                }
            }
        }

        if let Some(dx) = dx.as_deref_mut() {
            let dx_s = &mut dx[b * ci * h * wd..(b + 1) * ci * h * wd];
            conv_sample::<T, WT>(&dypad, &wflip, None, false, co, ci, h, wd, k, d, dx_s);
        }
    }
}

/// Reference backward path (any odd kernel/dilation/width).
#[allow(clippy::too_many_arguments)]
fn conv2d_bwd_ref<T: Real>(
    x: &[T],
    xs: [usize; 4],
    w: &[T],
    ws: [usize; 4],
    dilation: usize,
    relu: bool,
    out: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    dw: &mut [T],
    db: &mut [T],
) {
    let [b_n, ci, h, wd] = xs;
    let [co, _, kh, kw] = ws;
    let kch = (kh / 2) as isize;
    let kcw = (kw / 2) as isize;
    let d = dilation as isize;
    let ch_len = h * wd;
    let mut dyeff = vec![T::zero(); ch_len];

    for b in 0..b_n {
        for oc in 0..co {
            let ybase = (b * co + oc) * ch_len;
            if relu {
                for i in 0..ch_len {
                    dyeff[i] = if out[ybase + i] > T::zero() {
                        dy[ybase + i]
                    } else {
                        T::zero()
                    };
                }
            } else {
                dyeff.copy_from_slice(&dy[ybase..ybase + ch_len]);
            }

            db[oc] += T::from_f64(crate::tensor::sum_f64(&dyeff));

            for ic in 0..ci {
                let xch = &x[(b * ci + ic) * ch_len..(b * ci + ic + 1) * ch_len];
                let wch = &w[((oc * ci + ic) * kh) * kw..((oc * ci + ic) * kh + kh) * kw];
                let dwch = &mut dw[((oc * ci + ic) * kh) * kw..((oc * ci + ic) * kh + kh) * kw];
                for ky in 0..kh {
                    let mut wacc = vec![T::zero(); kw];
                    for oh in 0..h {
                        let ih = oh as isize + (ky as isize - kch) * d;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let xrow = &xch[ih as usize * wd..(ih as usize + 1) * wd];
                        let dyrow = &dyeff[oh * wd..(oh + 1) * wd];
                        for kx in 0..kw {
                            let shift = (kx as isize - kcw) * d;
                            let (a0, a1) = shift_range(wd, shift);
                            let x0 = (a0 as isize + shift) as usize;
                            let mut acc = T::zero();
                            for (&g, &xv) in dyrow[a0..a1].iter().zip(&xrow[x0..x0 + (a1 - a0)]) {
                                acc = g.mul_add(xv, acc);
                            }
                            wacc[kx] += acc;
                        }
                    }
                    for kx in 0..kw {
                        dwch[ky * kw + kx] += wacc[kx];
                    }
                }

                if let Some(dx) = dx.as_deref_mut() {
                    let dxch = &mut dx[(b * ci + ic) * ch_len..(b * ci + ic + 1) * ch_len];
                    for ky in 0..kh {
                        for oh in 0..h {
                            let ih = oh as isize + (ky as isize - kch) * d;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let dyrow = &dyeff[oh * wd..(oh + 1) * wd];
                            let dxrow = &mut dxch[ih as usize * wd..(ih as usize + 1) * wd];
                            for kx in 0..kw {
                                let wv = wch[ky * kw + kx];
                                let shift = (kx as isize - kcw) * d;
                                let (a0, a1) = shift_range(wd, shift);
                                let x0 = (a0 as isize + shift) as usize;
                                for (xg, &g) in
                                    dxrow[x0..x0 + (a1 - a0)].iter_mut().zip(&dyrow[a0..a1])
                                {
                                    *xg = wv.mul_add(g, *xg);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Valid output range `[a0, a1)` such that `0 <= ow + shift < w` holds.
#[inline(always)]
fn shift_range(w: usize, shift: isize) -> (usize, usize) {
    if shift >= 0 {
        (0, w - shift as usize)
    } else {
        ((-shift) as usize, w)
    }
}

/// 2x2 max pooling with stride 2. In strict mode the spatial extents must be
/// even; with `ceil` the trailing odd row/column forms a partial window.
/// Ties resolve to the first element in row-major window order. Returns the
/// output shape and fills `argmax` with flat input indices for backward.
pub fn maxpool2_fwd<T: Real>(
    x: &[T],
    xs: [usize; 4],
    ceil: bool,
    out: &mut Vec<T>,
    argmax: &mut Vec<u32>,
) -> Result<[usize; 4]> {
    let [b_n, c_n, h, wd] = xs;
    if !ceil && (h % 2 != 0 || wd % 2 != 0) {
        return Err(Error::invalid(format!(
            "pool2: spatial extents ({h},{wd}) must be even"
        )));
    }
    if h == 0 || wd == 0 {
        return Err(Error::invalid("pool2: empty spatial extents"));
    }
    assert!(x.len() < u32::MAX as usize, "pool2: tensor too large for u32 argmax");
    let oh = if ceil { h.div_ceil(2) } else { h / 2 };
    let ow = if ceil { wd.div_ceil(2) } else { wd / 2 };
    out.clear();
    out.resize(b_n * c_n * oh * ow, T::zero());
    argmax.clear();
    argmax.resize(b_n * c_n * oh * ow, 0);

    for bc in 0..b_n * c_n {
        let xch = bc * h * wd;
        let och = bc * oh * ow;
        for py in 0..oh {
            for px in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = 0u32;
                for iy in 2 * py..(2 * py + 2).min(h) {
                    for ix in 2 * px..(2 * px + 2).min(wd) {
                        let idx = xch + iy * wd + ix;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx as u32;
                        }
                    }
                }
                out[och + py * ow + px] = best;
                argmax[och + py * ow + px] = best_idx;
            }
        }
    }
    Ok([b_n, c_n, oh, ow])
}

pub fn maxpool2_bwd<T: Real>(argmax: &[u32], dy: &[T], dx: &mut [T]) {
    for (&idx, &g) in argmax.iter().zip(dy.iter()) {
        dx[idx as usize] += g;
    }
}

/// Nearest-neighbour 2x upsampling: `(B,C,H,W) -> (B,C,2H,2W)`.
pub fn upsample2_fwd<T: Real>(x: &[T], xs: [usize; 4], out: &mut [T]) {
    let [b_n, c_n, h, wd] = xs;
    debug_assert_eq!(out.len(), b_n * c_n * 4 * h * wd);
    let ow = 2 * wd;
    for bc in 0..b_n * c_n {
        let xch = bc * h * wd;
        let och = bc * 4 * h * wd;
        for iy in 0..h {
            let xrow = &x[xch + iy * wd..xch + (iy + 1) * wd];
            for sub in 0..2 {
                let orow = &mut out[och + (2 * iy + sub) * ow..och + (2 * iy + sub + 1) * ow];
                for (i, &v) in xrow.iter().enumerate() {
                    orow[2 * i] = v;
                    orow[2 * i + 1] = v;
                }
            }
        }
    }
}

pub fn upsample2_bwd<T: Real>(xs: [usize; 4], dy: &[T], dx: &mut [T]) {
    let [b_n, c_n, h, wd] = xs;
    let ow = 2 * wd;
    for bc in 0..b_n * c_n {
        let xch = bc * h * wd;
        let och = bc * 4 * h * wd;
        for iy in 0..h {
            let dxrow = &mut dx[xch + iy * wd..xch + (iy + 1) * wd];
            for sub in 0..2 {
                let dyrow = &dy[och + (2 * iy + sub) * ow..och + (2 * iy + sub + 1) * ow];
                for (i, g) in dxrow.iter_mut().enumerate() {
                    *g += dyrow[2 * i] + dyrow[2 * i + 1];
                }
            }
        }
    }
}

/// Fully-connected layer: `x` is `(B,N)`, `w` is `(M,N)` (one row per output
/// unit), `bias` has length `M`, `out` is `(B,M)`.
pub fn fc_fwd<T: Real>(x: &[T], b_n: usize, n: usize, w: &[T], m: usize, bias: &[T], out: &mut [T]) {
    debug_assert_eq!(x.len(), b_n * n);
    debug_assert_eq!(w.len(), m * n);
    debug_assert_eq!(out.len(), b_n * m);
    for b in 0..b_n {
        let xrow = &x[b * n..(b + 1) * n];
        for om in 0..m {
            let wrow = &w[om * n..(om + 1) * n];
            let mut acc = T::zero();
            for (&wv, &xv) in wrow.iter().zip(xrow.iter()) {
                acc = wv.mul_add(xv, acc);
            }
            out[b * m + om] = acc + bias[om];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn fc_bwd<T: Real>(
    x: &[T],
    b_n: usize,
    n: usize,
    w: &[T],
    m: usize,
    dy: &[T],
    mut dx: Option<&mut [T]>,
    dw: &mut [T],
    db: &mut [T],
) {
    for b in 0..b_n {
        let xrow = &x[b * n..(b + 1) * n];
        let dyrow = &dy[b * m..(b + 1) * m];
        for om in 0..m {
            let g = dyrow[om];
            if g == T::zero() {
                continue;
            }
            db[om] += g;
            let dwrow = &mut dw[om * n..(om + 1) * n];
            for (dwv, &xv) in dwrow.iter_mut().zip(xrow.iter()) {
                *dwv = g.mul_add(xv, *dwv);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let wrow = &w[om * n..(om + 1) * n];
                let dxrow = &mut dx[b * n..(b + 1) * n];
                for (dxv, &wv) in dxrow.iter_mut().zip(wrow.iter()) {
                    *dxv = g.mul_add(wv, *dxv);
                }
            }
        }
    }
}

/// `out (B,N) = x (B,K) * m (K,N)` against a constant matrix (the frozen
/// dictionary). Only `dx` is produced on backward.
pub fn matmul_const_fwd<T: Real>(x: &[T], b_n: usize, k: usize, m: &[T], n: usize, out: &mut [T]) {
    debug_assert_eq!(m.len(), k * n);
    out.fill(T::zero());
    for b in 0..b_n {
        let xrow = &x[b * k..(b + 1) * k];
        let orow = &mut out[b * n..(b + 1) * n];
        for (ki, &coef) in xrow.iter().enumerate() {
            if coef == T::zero() {
                continue;
            }
            let mrow = &m[ki * n..(ki + 1) * n];
            for (o, &mv) in orow.iter_mut().zip(mrow.iter()) {
                *o = coef.mul_add(mv, *o);
            }
        }
    }
}

pub fn matmul_const_bwd<T: Real>(dy: &[T], b_n: usize, k: usize, m: &[T], n: usize, dx: &mut [T]) {
    for b in 0..b_n {
        let dyrow = &dy[b * n..(b + 1) * n];
        let dxrow = &mut dx[b * k..(b + 1) * k];
        for ki in 0..k {
            let mrow = &m[ki * n..(ki + 1) * n];
            let mut acc = T::zero();
            for (&g, &mv) in dyrow.iter().zip(mrow.iter()) {
                acc = g.mul_add(mv, acc);
            }
            dxrow[ki] += acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // 3x3 all-ones kernel over a 4x4 all-ones image, same padding: interior
    // taps count the overlap area - 9 center, 4 corner, 6 edge.
    #[test]
    fn conv_ones_counts_window_overlap() {
        let x = vec![1.0f64; 16];
        let w = vec![1.0f64; 9];
        let mut out = vec![0.0f64; 16];
        conv2d_fwd(&x, [1, 1, 4, 4], &w, [1, 1, 3, 3], &[0.0], 1, false, &mut out).unwrap();
        assert_eq!(out[0], 4.0);
        assert_eq!(out[1], 6.0);
        assert_eq!(out[5], 9.0);
        assert_eq!(out[15], 4.0);
    }

    // With dilation 2 the 3x3 taps sit 2 apart, so at the center of a 5x5
    // ones image the whole kernel fits: 9 contributions.
    #[test]
    fn conv_dilation_widens_the_stencil() {
        let x = vec![1.0f64; 25];
        let w = vec![1.0f64; 9];
        let mut out = vec![0.0f64; 25];
        conv2d_fwd(&x, [1, 1, 5, 5], &w, [1, 1, 3, 3], &[0.0], 2, false, &mut out).unwrap();
        assert_eq!(out[12], 9.0); // center: all taps inside
        assert_eq!(out[0], 4.0); // corner: only shifts {0,+2} stay inside
    }

    #[test]
    fn conv_rejects_bad_args() {
        let x = vec![0.0f32; 16];
        let w = vec![0.0f32; 9];
        let mut out = vec![0.0f32; 16];
        assert!(
            conv2d_fwd(&x, [1, 1, 4, 4], &w, [1, 1, 3, 3], &[0.0], 0, false, &mut out).is_err()
        );
        assert!(
            conv2d_fwd(&x, [1, 2, 4, 2], &w, [1, 1, 3, 3], &[0.0], 1, false, &mut out).is_err()
        );
    }

    #[test]
    fn pool_takes_first_max_on_ties() {
        let x = vec![3.0f32, 3.0, 1.0, 2.0]; // 2x2 window, tie between idx 0 and 1
        let mut out = Vec::new();
        let mut am = Vec::new();
        let os = maxpool2_fwd(&x, [1, 1, 2, 2], false, &mut out, &mut am).unwrap();
        assert_eq!(os, [1, 1, 1, 1]);
        assert_eq!(out, vec![3.0]);
        assert_eq!(am, vec![0]);
    }

    #[test]
    fn pool_strict_rejects_odd_and_ceil_accepts() {
        let x = vec![1.0f32; 15];
        let mut out = Vec::new();
        let mut am = Vec::new();
        assert!(maxpool2_fwd(&x, [1, 1, 3, 5], false, &mut out, &mut am).is_err());
        let os = maxpool2_fwd(&x, [1, 1, 3, 5], true, &mut out, &mut am).unwrap();
        assert_eq!(os, [1, 1, 2, 3]);
    }

    #[test]
    fn upsample_then_pool_recovers_input() {
        let x: Vec<f32> = (1..=6).map(|v| v as f32).collect();
        let mut up = vec![0.0f32; 24];
        upsample2_fwd(&x, [1, 1, 2, 3], &mut up);
        assert_eq!(up[0], 1.0);
        assert_eq!(up[1], 1.0);
        assert_eq!(up[6], 1.0);
        let mut out = Vec::new();
        let mut am = Vec::new();
        maxpool2_fwd(&up, [1, 1, 4, 6], false, &mut out, &mut am).unwrap();
        assert_eq!(out, x);
    }

    // The register-tiled fast path must agree with the reference kernels on
    // every shape the net uses (f64 so the only difference is summation
    // order, bounded far below the tolerance).
    #[test]
    fn tiled_paths_match_reference() {
        use rand::Rng;
        let mut rng = crate::rng::stream(11, crate::rng::Ns::GradCheck, 1);
        for &(ci, co, h, wd, k, d) in &[
            (1usize, 5usize, 30usize, 30usize, 3usize, 2usize),
            (4, 3, 15, 15, 3, 1),
            (3, 2, 8, 8, 3, 2),
            (2, 6, 30, 30, 1, 1),
            (5, 4, 7, 13, 3, 1),
        ] {
            let b = 2;
            let xs = [b, ci, h, wd];
            let ws = [co, ci, k, k];
            let x: Vec<f64> = (0..b * ci * h * wd).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..co * ci * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bias: Vec<f64> = (0..co).map(|_| rng.random_range(-0.5..0.5)).collect();
            let mut fast = vec![0.0; b * co * h * wd];
            let mut slow = vec![0.0; b * co * h * wd];
            conv2d_fwd(&x, xs, &w, ws, &bias, d, true, &mut fast).unwrap();
            conv2d_fwd_ref(&x, xs, &w, ws, &bias, d, true, &mut slow);
            for (a, e) in fast.iter().zip(slow.iter()) {
                assert!((a - e).abs() < 1e-12, "fwd mismatch: {a} vs {e}");
            }

            let dy: Vec<f64> = (0..fast.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut dxf = vec![0.0; x.len()];
            let mut dwf = vec![0.0; w.len()];
            let mut dbf = vec![0.0; co];
            conv2d_bwd(&x, xs, &w, ws, d, true, &fast, &dy, Some(&mut dxf), &mut dwf, &mut dbf);
            let mut dxs = vec![0.0; x.len()];
            let mut dws = vec![0.0; w.len()];
            let mut dbs = vec![0.0; co];
            conv2d_bwd_ref(&x, xs, &w, ws, d, true, &slow, &dy, Some(&mut dxs), &mut dws, &mut dbs);
            for (a, e) in dxf.iter().zip(dxs.iter()).chain(dwf.iter().zip(dws.iter())) {
                assert!((a - e).abs() < 1e-10, "bwd mismatch: {a} vs {e}");
            }
            for (a, e) in dbf.iter().zip(dbs.iter()) {
                assert!((a - e).abs() < 1e-10, "db mismatch: {a} vs {e}");
            }
        }
    }

    #[test]
    fn fc_matches_hand_computation() {
        // y = W x + b with W = [[1,2],[3,4]], x = [5,6], b = [0.5, -0.5]
        let x = vec![5.0f64, 6.0];
        let w = vec![1.0, 2.0, 3.0, 4.0];
        let mut out = vec![0.0f64; 2];
        fc_fwd(&x, 1, 2, &w, 2, &[0.5, -0.5], &mut out);
        assert_eq!(out, vec![17.5, 38.5]);
    }

    #[test]
    fn matmul_const_applies_rows_by_coefficient() {
        // code [2, -1] against atoms [[1,0,1],[0,1,1]] -> [2, -1, 1]
        let code = vec![2.0f64, -1.0];
        let m = vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut out = vec![0.0f64; 3];
        matmul_const_fwd(&code, 1, 2, &m, 3, &mut out);
        assert_eq!(out, vec![2.0, -1.0, 1.0]);
        let mut dx = vec![0.0f64; 2];
        matmul_const_bwd(&[1.0, 1.0, 1.0], 1, 2, &m, 3, &mut dx);
        assert_eq!(dx, vec![2.0, 2.0]);
    }
}
