"""3D cross-correlation, pooling and the fused global/local layer kernel.

Convolution is lowered to GEMM over a [K, M] column matrix (K = Cin*kt*kh*kw,
M = N*To*Ho*Wo).  Column gather/scatter runs through numba kernels when the
package is importable (pure-numpy fallbacks otherwise; set the module flag
FORCE_NUMPY for testing).  Intermediate maps live in channel-major [C, M]
layout so layout changes are long-run copies, done once per op.

The fused GLCL kernel computes global branch, masked local branch and their
sum in one pass, sharing a single column matrix between the two branch
convolutions via linearity of the bias-free local conv:
conv(x*q) = conv(x) - conv(x*p) for a complementary pair (p, q).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, accumulate, record
from .errors import DimensionError

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

FORCE_NUMPY = False

# Column matrices above this size are rebuilt in backward instead of cached.
COL_CACHE_BYTES = 512 * 2 ** 20


def out_extent(n: int, k: int, s: int, p: int) -> int:
    """Output length of a windowed op: floor((n + 2p - k)/s) + 1."""
    return (n + 2 * p - k) // s + 1


def _check_triple(v, name):
    v = tuple(int(e) for e in v)
    if len(v) != 3:
        raise DimensionError(f"{name} must have 3 entries, got {v}")
    return v


def _pad5(x: np.ndarray, pad) -> np.ndarray:
    pt, ph, pw = pad
    if pt == 0 and ph == 0 and pw == 0:
        return x
    out = np.zeros((x.shape[0], x.shape[1], x.shape[2] + 2 * pt,
                    x.shape[3] + 2 * ph, x.shape[4] + 2 * pw), dtype=x.dtype)
    out[:, :, pt:pt + x.shape[2], ph:ph + x.shape[3], pw:pw + x.shape[4]] = x
    return out


if HAVE_NUMBA:
    @numba.njit(parallel=True, cache=True)
    def _nb_im2col(xp, col, kt, kh, kw, st, sh, sw, to, ho, wo):  # pragma: no cover
        n, c = xp.shape[0], xp.shape[1]
        kk = kt * kh * kw
        for k in numba.prange(c * kk):
            ci = k // kk
            r = k % kk
            it = r // (kh * kw)
            ih = (r % (kh * kw)) // kw
            iw = r % kw
            idx = 0
            for b in range(n):
                for t in range(to):
                    for h in range(ho):
                        base_t = t * st + it
                        base_h = h * sh + ih
                        for w in range(wo):
                            col[k, idx] = xp[b, ci, base_t, base_h, w * sw + iw]
                            idx += 1

    @numba.njit(parallel=True, cache=True)
    def _nb_col2im(gcol, gxp, kt, kh, kw, st, sh, sw, to, ho, wo):  # pragma: no cover
        n, c = gxp.shape[0], gxp.shape[1]
        kk = kt * kh * kw
        for ci in numba.prange(c):
            for r in range(kk):
                k = ci * kk + r
                it = r // (kh * kw)
                ih = (r % (kh * kw)) // kw
                iw = r % kw
                idx = 0
                for b in range(n):
                    for t in range(to):
                        for h in range(ho):
                            base_t = t * st + it
                            base_h = h * sh + ih
                            for w in range(wo):
                                gxp[b, ci, base_t, base_h, w * sw + iw] += gcol[k, idx]
                                idx += 1


def _im2col(xp: np.ndarray, kernel, stride, out_shape) -> np.ndarray:
    """Gather sliding-window columns: [Cin*kt*kh*kw, N*To*Ho*Wo]."""
    n, c = xp.shape[:2]
    kt, kh, kw = kernel
    st, sh, sw = stride
    to, ho, wo = out_shape
    col = np.empty((c * kt * kh * kw, n * to * ho * wo), dtype=xp.dtype)
    if HAVE_NUMBA and not FORCE_NUMPY:
        _nb_im2col(xp, col, kt, kh, kw, st, sh, sw, to, ho, wo)
        return col
    k = 0
    for ci in range(c):
        for it in range(kt):
            for ih in range(kh):
                for iw in range(kw):
                    np.copyto(col[k].reshape(n, to, ho, wo),
                              xp[:, ci, it:it + st * to:st,
                                 ih:ih + sh * ho:sh, iw:iw + sw * wo:sw])
                    k += 1
    return col


def _col2im(gcol: np.ndarray, xp_shape, kernel, stride, out_shape) -> np.ndarray:
    """Scatter-add columns back onto a padded-input-shaped buffer."""
    n, c = xp_shape[:2]
    kt, kh, kw = kernel
    st, sh, sw = stride
    to, ho, wo = out_shape
    gxp = np.zeros(xp_shape, dtype=gcol.dtype)
    if HAVE_NUMBA and not FORCE_NUMPY:
        _nb_col2im(gcol, gxp, kt, kh, kw, st, sh, sw, to, ho, wo)
        return gxp
    k = 0
    for ci in range(c):
        for it in range(kt):
            for ih in range(kh):
                for iw in range(kw):
                    gxp[:, ci, it:it + st * to:st, ih:ih + sh * ho:sh,
                        iw:iw + sw * wo:sw] += gcol[k].reshape(n, to, ho, wo)
                    k += 1
    return gxp


def _to_cm(y: np.ndarray) -> np.ndarray:
    """[N, C, *spatial] -> channel-major [C, N*prod(spatial)]."""
    n, c = y.shape[:2]
    return np.ascontiguousarray(y.reshape(n, c, -1).transpose(1, 0, 2)).reshape(c, -1)


def _from_cm(ycm: np.ndarray, n: int, c: int, spatial) -> np.ndarray:
    """Channel-major [C, N*prod(spatial)] -> [N, C, *spatial]."""
    out = ycm.reshape(c, n, -1).transpose(1, 0, 2)
    return np.ascontiguousarray(out).reshape((n, c) + tuple(spatial))


def _conv_geometry(x: Tensor, w: Tensor, bias, stride, pad):
    stride = _check_triple(stride, "stride")
    pad = _check_triple(pad, "pad")
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise DimensionError(
            f"conv3d expects rank-5 input and weight, got {x.data.shape} and {w.data.shape}")
    if any(s < 1 for s in stride):
        raise DimensionError(f"conv3d: strides must be >= 1, got {stride}")
    n, cin, t, h, wd = x.data.shape
    cout, wcin, kt, kh, kw = w.data.shape
    if wcin != cin:
        raise DimensionError(
            f"conv3d: weight expects {wcin} input channels but input has {cin} "
            f"(input {x.data.shape}, weight {w.data.shape})")
    kernel = (kt, kh, kw)
    out_shape = tuple(out_extent(e, k, s, p)
                      for e, k, s, p in zip((t, h, wd), kernel, stride, pad))
    if any(o < 1 for o in out_shape):
        raise DimensionError(
            f"conv3d: kernel {kernel} with pad {pad} exceeds input extents {(t, h, wd)}")
    if bias is not None and bias.data.shape != (cout,):
        raise DimensionError(
            f"conv3d: bias shape {bias.data.shape} does not match {cout} output channels")
    return stride, pad, kernel, out_shape, cout


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride=(1, 1, 1), pad=(0, 0, 0)) -> Tensor:
    """Cross-correlate x[N,Cin,T,H,W] with w[Cout,Cin,kt,kh,kw].

    Zero padding, no kernel flip; output extents follow
    floor((n + 2p - k)/s) + 1 per axis.
    """
    stride, pad, kernel, out_shape, cout = _conv_geometry(x, w, bias, stride, pad)
    n = x.data.shape[0]
    t, h, wd = x.data.shape[2:]

    xp = _pad5(x.data, pad)
    col = _im2col(xp, kernel, stride, out_shape)
    wmat = w.data.reshape(cout, -1)
    out_cm = wmat @ col
    if bias is not None:
        out_cm += bias.data[:, None]
    y = _from_cm(out_cm, n, cout, out_shape)

    cached_col = col if col.nbytes <= COL_CACHE_BYTES else None
    xp_shape = xp.shape
    del xp, col, out_cm

    def bwd(g):
        gcm = _to_cm(g)
        if bias is not None and bias.requires_grad:
            accumulate(bias, gcm.sum(axis=1), own=True)
        if w.requires_grad:
            c = cached_col
            if c is None:
                c = _im2col(_pad5(x.data, pad), kernel, stride, out_shape)
            accumulate(w, (gcm @ c.T).reshape(w.data.shape), own=True)
        if x.requires_grad:
            gcol = wmat.T @ gcm
            gxp = _col2im(gcol, xp_shape, kernel, stride, out_shape)
            pt, ph, pw = pad
            if pt or ph or pw:
                gxp = gxp[:, :, pt:pt + t, ph:ph + h, pw:pw + wd]
            accumulate(x, gxp, own=True)

    parents = (x, w) if bias is None else (x, w, bias)
    return record(y, parents, bwd)


# ---------------------------------------------------------------------------
# Fused global/local layer (variant A)
# ---------------------------------------------------------------------------

def _leaky_fwd(pre: np.ndarray, slope: float) -> np.ndarray:
    return np.where(pre >= 0, pre, pre * np.asarray(slope, dtype=pre.dtype))


def _leaky_bwd(g: np.ndarray, pre: np.ndarray, slope: float) -> np.ndarray:
    return g * np.where(pre >= 0, pre.dtype.type(1.0), pre.dtype.type(slope))


def fused_glcl_a(x: Tensor, wg: Tensor, bg: Tensor, wl: Tensor,
                 p: np.ndarray, q: np.ndarray, slope: float = 0.01) -> Tensor:
    """act(conv_g(x)) + act(conv_l(x*p)) + act(conv_l(x*q)) in one kernel.

    conv_l is bias-free with weights shared between the two masked passes;
    conv_l(x*q) is obtained as conv_l(x) - conv_l(x*p).  All-zero masks
    short-circuit their branch exactly (bias-free conv of zeros is zeros
    and act(0) = 0).  Equivalent to composing gfr/lfr_masked/add up to
    floating-point rounding in the subtraction.
    """
    if wg.data.shape != wl.data.shape:
        raise DimensionError(
            f"fused layer: branch weights disagree, {wg.data.shape} vs {wl.data.shape}")
    kernel = wg.data.shape[2:]
    pad = tuple(k // 2 for k in kernel)
    stride = (1, 1, 1)
    _, _, kernel, out_shape, cout = _conv_geometry(x, wg, bg, stride, pad)
    n = x.data.shape[0]
    t, h, wd = x.data.shape[2:]
    if p.shape != (h, wd):
        raise DimensionError(f"mask extents {p.shape} do not match features {(h, wd)}")

    dtype = x.data.dtype
    p = p.astype(dtype, copy=False)
    p_any = bool(p.any())
    q_any = bool(q.any())

    xp = _pad5(x.data, pad)
    col = _im2col(xp, kernel, stride, out_shape)
    wg_mat = wg.data.reshape(cout, -1)
    wl_mat = wl.data.reshape(cout, -1)
    fused_w = np.concatenate([wg_mat, wl_mat], axis=0)
    pre = fused_w @ col
    g_pre = pre[:cout] + bg.data[:, None]
    lx = pre[cout:]

    col_p = None
    pp = None
    if p_any and q_any:
        pp = np.zeros(xp.shape[-2:], dtype=dtype)
        pp[pad[1]:pad[1] + h, pad[2]:pad[2] + wd] = p
        col_p = _im2col(xp * pp, kernel, stride, out_shape)
        lp_pre = wl_mat @ col_p
        lq_pre = lx - lp_pre
    elif q_any:      # no-mask pair: p == 0, q == 1
        lp_pre = None
        lq_pre = lx
    else:            # degenerate inverse: p == 1, q == 0
        lp_pre = lx
        lq_pre = None

    y_cm = _leaky_fwd(g_pre, slope)
    if lp_pre is not None:
        y_cm += _leaky_fwd(lp_pre, slope)
    if lq_pre is not None:
        y_cm += _leaky_fwd(lq_pre, slope)
    y = _from_cm(y_cm, n, cout, out_shape)

    keep_col = col if col.nbytes <= COL_CACHE_BYTES else None
    keep_col_p = col_p if col_p is not None and col_p.nbytes <= COL_CACHE_BYTES else None
    xp_shape = xp.shape
    del xp, col, col_p, pre, y_cm

    def bwd(g):
        gcm = _to_cm(g)
        gg_pre = _leaky_bwd(gcm, g_pre, slope)
        glp = _leaky_bwd(gcm, lp_pre, slope) if lp_pre is not None else None
        glq = _leaky_bwd(gcm, lq_pre, slope) if lq_pre is not None else None

        # Chain through lq_pre = lx - lp_pre (or the degenerate aliases).
        if lp_pre is not None and lq_pre is not None:
            g_lx = glq
            g_lp_total = glp - glq
        elif lq_pre is not None:
            g_lx = glq
            g_lp_total = None
        else:
            g_lx = glp
            g_lp_total = None

        if bg.requires_grad:
            accumulate(bg, gg_pre.sum(axis=1), own=True)

        need_cols = wg.requires_grad or wl.requires_grad
        c = c_p = None
        if need_cols or x.requires_grad:
            c = keep_col
            if c is None and need_cols:
                c = _im2col(_pad5(x.data, pad), kernel, stride, out_shape)
            if g_lp_total is not None:
                c_p = keep_col_p
                if c_p is None and need_cols:
                    c_p = _im2col(_pad5(x.data, pad) * pp, kernel, stride, out_shape)

        stacked = np.concatenate([gg_pre, g_lx], axis=0)
        if wg.requires_grad or wl.requires_grad:
            gwgl = stacked @ c.T
            if wg.requires_grad:
                accumulate(wg, gwgl[:cout].reshape(wg.data.shape), own=True)
            if wl.requires_grad:
                gwl = gwgl[cout:]
                if g_lp_total is not None:
                    gwl = gwl + g_lp_total @ c_p.T
                accumulate(wl, gwl.reshape(wl.data.shape), own=True)

        if x.requires_grad:
            gcol = fused_w.T @ stacked
            gxp = _col2im(gcol, xp_shape, kernel, stride, out_shape)
            if g_lp_total is not None:
                gcol_p = wl_mat.T @ g_lp_total
                gxp += _col2im(gcol_p, xp_shape, kernel, stride, out_shape) * pp
            pt, ph, pw = pad
            if pt or ph or pw:
                gxp = gxp[:, :, pt:pt + t, ph:ph + h, pw:pw + wd]
            accumulate(x, gxp, own=True)

    return record(y, (x, wg, bg, wl), bwd)


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------

def pool(x: Tensor, kind: str, kernel, stride=None) -> Tensor:
    """Windowed max or arithmetic-mean pooling, no implicit padding."""
    if kind not in ("max", "avg"):
        raise ValueError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    kernel = _check_triple(kernel, "kernel")
    stride = kernel if stride is None else _check_triple(stride, "stride")
    if x.data.ndim != 5:
        raise DimensionError(f"pool expects rank-5 input, got {x.data.shape}")
    n, c, t, h, wd = x.data.shape
    if any(k > e for k, e in zip(kernel, (t, h, wd))):
        raise DimensionError(f"pool: kernel {kernel} larger than input extents {(t, h, wd)}")
    out_shape = tuple(out_extent(e, k, s, 0)
                      for e, k, s in zip((t, h, wd), kernel, stride))
    to, ho, wo = out_shape
    kt, kh, kw = kernel
    st, sh, sw = stride
    kk = kt * kh * kw

    from numpy.lib.stride_tricks import as_strided
    sn, sc, stt, shh, sww = x.data.strides
    view = as_strided(x.data, (n, c, to, ho, wo, kt, kh, kw),
                      (sn, sc, stt * st, shh * sh, sww * sw, stt, shh, sww),
                      writeable=False)

    if kind == "avg":
        out = np.ascontiguousarray(view.mean(axis=(5, 6, 7)))

        def bwd(g):
            if not x.requires_grad:
                return
            gcol = np.empty((c * kk, n * to * ho * wo), dtype=g.dtype)
            gcm = _to_cm(g) / kk
            gcol.reshape(c, kk, -1)[:, :, :] = gcm[:, None, :]
            accumulate(x, _col2im(gcol, x.data.shape, kernel, stride, out_shape),
                       own=True)

        return record(out, (x,), bwd)

    flat = np.ascontiguousarray(view).reshape(-1, kk)
    arg = flat.argmax(axis=1)
    out = flat[np.arange(flat.shape[0]), arg].reshape(n, c, to, ho, wo)
    nonoverlap = all(s >= k for s, k in zip(stride, kernel))

    def bwd(g):
        if not x.requires_grad:
            return
        dt, rem = np.divmod(arg, kh * kw)
        dh, dw = np.divmod(rem, kw)
        win = np.arange(arg.size)
        wi = win % wo
        pos = win // wo
        hi = pos % ho
        pos //= ho
        ti = pos % to
        pos //= to
        ci = pos % c
        ni = pos // c
        src = ((ni * c + ci) * t + ti * st + dt) * h * wd + (hi * sh + dh) * wd \
            + (wi * sw + dw)
        gx = np.zeros(x.data.size, dtype=g.dtype)
        if nonoverlap:
            gx[src] = g.reshape(-1)
        else:
            np.add.at(gx, src, g.reshape(-1))
        accumulate(x, gx.reshape(x.data.shape), own=True)

    return record(out, (x,), bwd)
