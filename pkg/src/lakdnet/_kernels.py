# Compiled loops for grouped, dilated 2D cross-correlation.
#
# Operands are channel-major and flattened over (batch, padded row, padded
# column): ``xw[c, b*Hp*Wp + y*Wp + x]``. An output pixel (b, h, x) lives at
# the same flat index as its top-left input tap, so every kernel tap is one
# contiguous slice shifted by ``i*d*Wp + j*d``. Positions with h >= H or
# x >= W are scratch: dropped from forward results and held at zero in output
# gradients. Accumulation is float64; callers cast to float32.
import numba
import numpy as np


@numba.njit(cache=True)
def conv_forward(xw, w, bias, Wp, L, dilation):
    """Wide output ``[Cout, L]``."""
    Cout, cin_g, k = w.shape[0], w.shape[1], w.shape[2]
    groups = xw.shape[0] // cin_g
    cout_g = Cout // groups
    out = np.empty((Cout, L), np.float64)
    for co in range(Cout):
        g = co // cout_g
        acc = out[co]
        acc[:] = bias[co]
        for cl in range(cin_g):
            plane = xw[g * cin_g + cl]
            for i in range(k):
                for j in range(k):
                    off = i * dilation * Wp + j * dilation
                    wv = np.float64(w[co, cl, i, j])
                    src = plane[off:off + L]
                    for n in range(L):
                        acc[n] += wv * src[n]
    return out


@numba.njit(cache=True)
def conv_input_grad(gw, w, Cin, total, Wp, dilation):
    """Gradient ``[Cin, total]`` with respect to the padded wide input."""
    Cout, L = gw.shape
    cin_g, k = w.shape[1], w.shape[2]
    cout_g = Cout // (Cin // cin_g)
    gx = np.zeros((Cin, total), np.float64)
    for co in range(Cout):
        g = co // cout_g
        grad = gw[co]
        for cl in range(cin_g):
            plane = gx[g * cin_g + cl]
            for i in range(k):
                for j in range(k):
                    off = i * dilation * Wp + j * dilation
                    wv = np.float64(w[co, cl, i, j])
                    dst = plane[off:off + L]
                    for n in range(L):
                        dst[n] += wv * grad[n]
    return gx


# Reassociation lets the dot product vectorise; the compiled order is fixed,
# so results stay bit-reproducible run to run.
@numba.njit(cache=True, fastmath={"reassoc", "nsz"})
def conv_weight_grad(gw, xw, cin_g, k, Wp, dilation):
    Cout, L = gw.shape
    groups = xw.shape[0] // cin_g
    cout_g = Cout // groups
    gwt = np.zeros((Cout, cin_g, k, k), np.float64)
    for co in range(Cout):
        g = co // cout_g
        grad = gw[co]
        for cl in range(cin_g):
            plane = xw[g * cin_g + cl]
            for i in range(k):
                for j in range(k):
                    off = i * dilation * Wp + j * dilation
                    src = plane[off:off + L]
                    s = 0.0
                    for n in range(L):
                        s += grad[n] * src[n]
                    gwt[co, cl, i, j] = s
    return gwt
