"""Pure-numpy GRU + sigmoid-classifier unroll with activity feedback.

Reference backend for :mod:`sedlm._recurrence_ext`; both expose the same
``forward``/``backward`` pair over plain arrays.

Layout: gate blocks are ordered (update z, reset r, candidate n) along the
last axis of ``xproj``, ``wc`` and ``u``, each ``H`` wide.
"""
import numpy as np


def _sig(x):
    return np.exp(-np.logaddexp(0, -x))


def forward(xproj, wc, u, wo, bo, y_true, truth, binarize):
    """Run the recurrence over all T steps.

    ``wc`` has shape ``[Ccond, 3H]``; ``Ccond == 0`` disables conditioning.
    ``truth[b, t]`` selects the ground truth (else the prediction) as the
    activity fed into step ``t + 1``.

    Returns ``(yhat, hs, z, r, n, ycond)`` where ``hs[:, t]`` is the state
    entering step ``t`` and ``ycond[:, t]`` the activity vector it saw.
    """
    B, T, G = xproj.shape
    H = G // 3
    C = wo.shape[1]
    cond = wc.shape[0] > 0
    dt = xproj.dtype
    hs = np.zeros((B, T + 1, H), dtype=dt)
    zs = np.empty((B, T, H), dtype=dt)
    rs = np.empty((B, T, H), dtype=dt)
    ns = np.empty((B, T, H), dtype=dt)
    yhat = np.empty((B, T, C), dtype=dt)
    ycond = np.zeros((B, T, wc.shape[0]), dtype=dt)
    u_zr, u_n = u[:, :2 * H], u[:, 2 * H:]
    for t in range(T):
        h = hs[:, t]
        a = xproj[:, t]
        if cond:
            a = a + ycond[:, t] @ wc
        hu = h @ u_zr
        z = _sig(a[:, :H] + hu[:, :H])
        r = _sig(a[:, H:2 * H] + hu[:, H:])
        n = np.tanh(a[:, 2 * H:] + (r * h) @ u_n)
        hn = (1 - z) * h + z * n
        hs[:, t + 1] = hn
        zs[:, t], rs[:, t], ns[:, t] = z, r, n
        y = _sig(hn @ wo + bo)
        yhat[:, t] = y
        if cond and t + 1 < T:
            fed = (y >= 0.5).astype(dt) if binarize else y
            ycond[:, t + 1] = np.where(truth[:, t, None] != 0, y_true[:, t], fed)
    return yhat, hs, zs, rs, ns, ycond


def backward(gy, yhat, hs, zs, rs, ns, ycond, wc, u, wo):
    """Gradients w.r.t. ``(xproj, wc, u, wo, bo)``; fed-back activities are constants."""
    B, T, H = zs.shape
    dt = gy.dtype
    cond = wc.shape[0] > 0
    dx = np.empty((B, T, 3 * H), dtype=dt)
    dwc = np.zeros_like(wc)
    du = np.zeros_like(u)
    dwo = np.zeros_like(wo)
    dbo = np.zeros(wo.shape[1], dtype=dt)
    u_zr, u_n = u[:, :2 * H], u[:, 2 * H:]
    dh = np.zeros((B, H), dtype=dt)
    for t in range(T - 1, -1, -1):
        y = yhat[:, t]
        hn = hs[:, t + 1]
        dlog = gy[:, t] * y * (1 - y)
        dwo += hn.T @ dlog
        dbo += dlog.sum(axis=0)
        dh = dh + dlog @ wo.T
        h, z, r, n = hs[:, t], zs[:, t], rs[:, t], ns[:, t]
        dz = dh * (n - h)
        dn = dh * z
        dhp = dh * (1 - z)
        dan = dn * (1 - n * n)
        rh = r * h
        drh = dan @ u_n.T
        du[:, 2 * H:] += rh.T @ dan
        dhp += drh * r
        daz = dz * z * (1 - z)
        dar = drh * h * r * (1 - r)
        dzr = np.concatenate([daz, dar], axis=1)
        du[:, :2 * H] += h.T @ dzr
        dhp += dzr @ u_zr.T
        dx[:, t, :2 * H] = dzr
        dx[:, t, 2 * H:] = dan
        if cond:
            dwc += ycond[:, t].T @ dx[:, t]
        dh = dhp
    return dx, dwc, du, dwo, dbo
