"""Pure numpy GRU recurrence; the reference the compiled kernel must match."""

import numpy as np


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gru_forward(xw, U, h0, mask):
    """Recurrence over precomputed input projections ``xw = x W + b`` of shape (B, T, 3H).

    Returns ``(hs, cache)`` where ``hs`` is (B, T, H) and ``cache`` is
    ``(z, r, c)``, each (B, T, H).
    """
    b, t, h3 = xw.shape
    hd = h3 // 3
    uzr = U[:, : 2 * hd]
    uh = U[:, 2 * hd :]
    hs = np.empty((b, t, hd))
    z_all = np.empty((b, t, hd))
    r_all = np.empty((b, t, hd))
    c_all = np.empty((b, t, hd))
    h = h0
    for i in range(t):
        a = xw[:, i]
        zr = sigmoid(a[:, : 2 * hd] + h @ uzr)
        z = zr[:, :hd]
        r = zr[:, hd:]
        c = np.tanh(a[:, 2 * hd :] + (r * h) @ uh)
        hn = h + z * (c - h)
        m = mask[:, i : i + 1]
        h = m * hn + (1.0 - m) * h
        hs[:, i] = h
        z_all[:, i] = z
        r_all[:, i] = r
        c_all[:, i] = c
    return hs, (z_all, r_all, c_all)


def gru_backward(dhs, U, h0, mask, hs, cache):
    """Backpropagate through :func:`gru_forward`.

    Returns ``(dxw, dU, dh0)``.
    """
    z_all, r_all, c_all = cache
    b, t, hd = hs.shape
    uzr = U[:, : 2 * hd]
    uh = U[:, 2 * hd :]
    dxw = np.empty((b, t, 3 * hd))
    du = np.zeros_like(U)
    dh = np.zeros((b, hd))
    for i in range(t - 1, -1, -1):
        hprev = hs[:, i - 1] if i > 0 else h0
        z, r, c = z_all[:, i], r_all[:, i], c_all[:, i]
        m = mask[:, i : i + 1]
        dh = dh + dhs[:, i]
        dhn = m * dh
        dprev = (1.0 - m) * dh + dhn * (1.0 - z)
        dac = dhn * z * (1.0 - c * c)
        daz = dhn * (c - hprev) * z * (1.0 - z)
        rh = r * hprev
        du[:, 2 * hd :] += rh.T @ dac
        drh = dac @ uh.T
        dar = drh * hprev * r * (1.0 - r)
        dprev += drh * r
        dzr = np.concatenate([daz, dar], axis=1)
        du[:, : 2 * hd] += hprev.T @ dzr
        dprev += dzr @ uzr.T
        dxw[:, i, : 2 * hd] = dzr
        dxw[:, i, 2 * hd :] = dac
        dh = dprev
    return dxw, du, dh
