"""Hot numeric kernels with two interchangeable backends.

The numba backend is used when numba imports cleanly, unless the environment
variable ``SEGDETECT_BACKEND`` is set to ``numpy``. Both backends expose the
same functions and agree to rounding error; each is deterministic on its own.
"""
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional accelerator
    numba = None


# ---------------------------------------------------------------------------
# pure numpy implementations
# ---------------------------------------------------------------------------

def _im2col(xp, k, stride, ho, wo):
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, k, k, c))
    for a in range(k):
        for b in range(k):
            cols[:, :, :, a, b, :] = xp[:, a:a + stride * (ho - 1) + 1:stride,
                                        b:b + stride * (wo - 1) + 1:stride, :]
    return cols


def conv_forward_np(xp, w, b, stride):
    k, _, cin, cout = w.shape
    n, hp, wp, _ = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    cols = _im2col(xp, k, stride, ho, wo).reshape(-1, k * k * cin)
    out = cols @ w.reshape(k * k * cin, cout) + b
    return out.reshape(n, ho, wo, cout)


def conv_backward_input_np(g, w, stride, hp, wp):
    k, _, cin, cout = w.shape
    n, ho, wo, _ = g.shape
    dcols = (g.reshape(-1, cout) @ w.reshape(k * k * cin, cout).T).reshape(n, ho, wo, k, k, cin)
    gx = np.zeros((n, hp, wp, cin))
    for a in range(k):
        for b in range(k):
            gx[:, a:a + stride * (ho - 1) + 1:stride,
               b:b + stride * (wo - 1) + 1:stride, :] += dcols[:, :, :, a, b, :]
    return gx


def conv_backward_weight_np(xp, g, stride, k):
    n, ho, wo, cout = g.shape
    cin = xp.shape[3]
    cols = _im2col(xp, k, stride, ho, wo).reshape(-1, k * k * cin)
    return (cols.T @ g.reshape(-1, cout)).reshape(k, k, cin, cout)


def smo_one_class(K, upper_sum, tol, max_iter):
    """SMO for min 0.5 a'Ka  s.t. 0 <= a_i <= 1, sum(a) = upper_sum.

    Returns (alpha, gradient, iterations, final violation).
    """
    n = K.shape[0]
    alpha = np.zeros(n)
    whole = int(np.floor(upper_sum))
    for i in range(min(whole, n)):
        alpha[i] = 1.0
    if whole < n:
        alpha[whole] = upper_sum - whole
    grad = K @ alpha
    violation = np.inf
    it = 0
    while it < max_iter:
        # i: smallest gradient among coordinates that may grow
        # j: largest gradient among coordinates that may shrink
        i = -1
        j = -1
        gmin = np.inf
        gmax = -np.inf
        for t in range(n):
            if alpha[t] < 1.0 and grad[t] < gmin:
                gmin = grad[t]
                i = t
            if alpha[t] > 0.0 and grad[t] > gmax:
                gmax = grad[t]
                j = t
        if i < 0 or j < 0:
            violation = 0.0
            break
        violation = gmax - gmin
        if violation <= tol:
            break
        curv = K[i, i] + K[j, j] - 2.0 * K[i, j]
        if curv <= 1e-12:
            curv = 1e-12
        delta = violation / curv
        delta = min(delta, 1.0 - alpha[i], alpha[j])
        alpha[i] += delta
        alpha[j] -= delta
        grad += delta * (K[:, i] - K[:, j])
        it += 1
    return alpha, grad, it, violation


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if numba is not None:
    njit = numba.njit(cache=True, nogil=True)

    # patch extraction and scatter run as compiled loops, one sample at a time
    # so the patch matrix stays cache-sized; the channel contractions go
    # through np.dot, which numba lowers to BLAS
    @njit
    def _im2col_nb(xp, s, k, stride, ho, wo, cols):
        cin = xp.shape[3]
        r = 0
        for i in range(ho):
            for j in range(wo):
                q = 0
                for a in range(k):
                    for bb in range(k):
                        for c in range(cin):
                            cols[r, q] = xp[s, i * stride + a, j * stride + bb, c]
                            q += 1
                r += 1

    @njit
    def conv_forward_nb(xp, w, b, stride):
        n, hp, wp, cin = xp.shape
        k = w.shape[0]
        cout = w.shape[3]
        ho = (hp - k) // stride + 1
        wo = (wp - k) // stride + 1
        wmat = np.ascontiguousarray(w).reshape(k * k * cin, cout)
        cols = np.empty((ho * wo, k * k * cin))
        out = np.empty((n, ho * wo, cout))
        for s in range(n):
            _im2col_nb(xp, s, k, stride, ho, wo, cols)
            out[s] = np.dot(cols, wmat)
            for r in range(ho * wo):
                for o in range(cout):
                    out[s, r, o] += b[o]
        return out.reshape(n, ho, wo, cout)

    @njit
    def conv_backward_input_nb(g, w, stride, hp, wp):
        n, ho, wo, cout = g.shape
        k = w.shape[0]
        cin = w.shape[2]
        wmat_t = np.ascontiguousarray(np.ascontiguousarray(w).reshape(k * k * cin, cout).T)
        g2 = np.ascontiguousarray(g).reshape(n, ho * wo, cout)
        gx = np.zeros((n, hp, wp, cin))
        for s in range(n):
            dcols = np.dot(g2[s], wmat_t)
            r = 0
            for i in range(ho):
                for j in range(wo):
                    q = 0
                    for a in range(k):
                        for bb in range(k):
                            for c in range(cin):
                                gx[s, i * stride + a, j * stride + bb, c] += dcols[r, q]
                                q += 1
                    r += 1
        return gx

    @njit
    def conv_backward_weight_nb(xp, g, stride, k):
        n, ho, wo, cout = g.shape
        cin = xp.shape[3]
        g2 = np.ascontiguousarray(g).reshape(n, ho * wo, cout)
        cols = np.empty((ho * wo, k * k * cin))
        gw = np.zeros((k * k * cin, cout))
        for s in range(n):
            _im2col_nb(xp, s, k, stride, ho, wo, cols)
            gw += np.dot(cols.T, g2[s])
        return gw.reshape(k, k, cin, cout)

    smo_one_class_nb = njit(smo_one_class)


class _Backend:
    def __init__(self, name, conv_forward, conv_backward_input, conv_backward_weight, smo):
        self.name = name
        self.conv_forward = conv_forward
        self.conv_backward_input = conv_backward_input
        self.conv_backward_weight = conv_backward_weight
        self.smo_one_class = smo

    def __repr__(self):
        return f"<kernel backend {self.name}>"


NUMPY = _Backend("numpy", conv_forward_np, conv_backward_input_np,
                 conv_backward_weight_np, smo_one_class)
NUMBA = None
if numba is not None:
    NUMBA = _Backend("numba", conv_forward_nb, conv_backward_input_nb,
                     conv_backward_weight_nb, smo_one_class_nb)


def _select():
    wanted = os.environ.get("SEGDETECT_BACKEND", "numba").strip().lower()
    if wanted not in ("numba", "numpy"):
        raise ValueError(f"SEGDETECT_BACKEND must be 'numba' or 'numpy', got {wanted!r}")
    if wanted == "numba" and NUMBA is not None:
        return NUMBA
    return NUMPY


active = _select()
