"""Pure numpy implementation of the fused potential kernel.

The potential is a stack of concatsquash layers with tanh activations
applied to ``tanh(z)``.  For a batch of inputs ``z`` (B, n) and a set of
directions ``zd`` (B, d, n) the kernel returns

    v  (B,)       potential values
    g  (B, n)     gradient dv/dz
    Q  (B, d, d)  Hessian quadratic forms  zd_i^T H zd_j

using one forward pass, one reverse pass and one forward-mode sweep of the
reverse pass.  ``bundle_vjp`` differentiates all three outputs with respect
to the inputs and the layer parameters.

Layers are tuples ``(W, b, gate_w, gate_b, bias_w)`` with W of shape
(out, in).  ``t`` is (B,).
"""

from __future__ import annotations

import numpy as np


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def bundle_forward(layers, z, zd, t, want_cache=True):
    B, n = z.shape
    d = zd.shape[1]
    tc = t[:, None]

    h = np.tanh(z)
    s = 1.0 - h * h
    hd = s[:, None, :] * zd
    fw = [(h, s, hd)]  # per level: activation, tanh', tangent of activation
    aux = []  # per layer: gate, pre-gate affine, tangent before gate
    for W, b, gw, gb, c in layers:
        sg = _sigmoid(tc * gw + gb)
        pre = h @ W.T + b
        a = pre * sg + c * tc
        m = hd @ W.T
        h = np.tanh(a)
        s = 1.0 - h * h
        hd = s[:, None, :] * (m * sg[:, None, :])
        fw.append((h, s, hd))
        aux.append((sg, pre, m))

    v = fw[-1][0][:, 0].copy()

    # reverse sweep for g = dv/dz, with its tangent along every direction
    rho = np.ones((B, 1))
    rhod = np.zeros((B, d, 1))
    back = [None] * len(layers)
    for li in range(len(layers) - 1, -1, -1):
        W = layers[li][0]
        h_l, s_l, hd_l = fw[li + 1]
        sg = aux[li][0]
        delta = rho * s_l
        deltad = rhod * s_l[:, None, :] - 2.0 * rho[:, None, :] * h_l[:, None, :] * hd_l
        r = delta * sg
        rd = deltad * sg[:, None, :]
        back[li] = (rho, rhod, delta, deltad, r, rd)
        rho = r @ W
        rhod = rd @ W
    h0, s0, hd0 = fw[0]
    g = rho * s0
    gd = rhod * s0[:, None, :] - 2.0 * rho[:, None, :] * h0[:, None, :] * hd0
    Q = zd @ np.swapaxes(gd, 1, 2)

    cache = None
    if want_cache:
        cache = (layers, z, zd, t, fw, aux, back, rho, rhod, gd)
    return v, g, Q, cache


def bundle_vjp(cache, vbar, gbar, Qbar):
    """Adjoints of (z, zd, t) and of every layer parameter."""
    layers, z, zd, t, fw, aux, back, rho0, rhod0, gd = cache
    B, n = z.shape
    tc = t[:, None]
    L = len(layers)
    gW = [np.zeros_like(l[0]) for l in layers]
    gb_ = [np.zeros_like(l[1]) for l in layers]
    ggw = [np.zeros_like(l[2]) for l in layers]
    ggb = [np.zeros_like(l[3]) for l in layers]
    gc = [np.zeros_like(l[4]) for l in layers]
    tbar = np.zeros(B)

    # adjoints of forward quantities, filled as we go
    hbar = [np.zeros_like(f[0]) for f in fw]
    sbar = [np.zeros_like(f[1]) for f in fw]
    hdbar = [np.zeros_like(f[2]) for f in fw]
    sgbar = [np.zeros_like(a[0]) for a in aux]

    h0, s0, hd0 = fw[0]
    # Q = zd gd^T
    zdbar = Qbar @ gd
    gdbar = np.swapaxes(Qbar, 1, 2) @ zd
    # gd = rhod s0 - 2 rho h0 hd0
    rhodbar = gdbar * s0[:, None, :]
    sbar[0] += np.einsum("bdn,bdn->bn", gdbar, rhod0)
    tmp = np.einsum("bdn,bdn->bn", gdbar, hd0)
    rhobar = -2.0 * tmp * h0
    hbar[0] += -2.0 * tmp * rho0
    hdbar[0] += -2.0 * gdbar * (rho0 * h0)[:, None, :]
    # g = rho s0
    rhobar = rhobar + gbar * s0
    sbar[0] += gbar * rho0

    # undo the reverse sweep, first layer first
    for li in range(L):
        W = layers[li][0]
        h_l, s_l, hd_l = fw[li + 1]
        sg = aux[li][0]
        rho, rhod, delta, deltad, r, rd = back[li]
        # rho_prev = r W ; rhod_prev = rd W
        rbar = rhobar @ W.T
        rdbar = rhodbar @ W.T
        gW[li] += r.T @ rhobar + np.einsum("bdo,bdi->oi", rd, rhodbar)
        # r = delta sg ; rd = deltad sg
        deltabar = rbar * sg
        deltadbar = rdbar * sg[:, None, :]
        sgbar[li] += rbar * delta + np.einsum("bdo,bdo->bo", rdbar, deltad)
        # deltad = rhod s - 2 rho h hd
        nrhodbar = deltadbar * s_l[:, None, :]
        sbar[li + 1] += np.einsum("bdo,bdo->bo", deltadbar, rhod)
        tmp = np.einsum("bdo,bdo->bo", deltadbar, hd_l)
        nrhobar = -2.0 * tmp * h_l
        hbar[li + 1] += -2.0 * tmp * rho
        hdbar[li + 1] += -2.0 * deltadbar * (rho * h_l)[:, None, :]
        # delta = rho s
        nrhobar = nrhobar + deltabar * s_l
        sbar[li + 1] += deltabar * rho
        rhobar, rhodbar = nrhobar, nrhodbar
    # rho at the top is the constant 1, rhod the constant 0: nothing to do

    hbar[L][:, 0] += vbar

    # undo the forward pass, last layer first
    for li in range(L - 1, -1, -1):
        W, b, gw, gb, c = layers[li]
        h_l, s_l, hd_l = fw[li + 1]
        h_p, s_p, hd_p = fw[li]
        sg, pre, m = aux[li]
        # hd = s * (m sg)
        msg = m * sg[:, None, :]
        adbar = hdbar[li + 1] * s_l[:, None, :]
        sbar[li + 1] += np.einsum("bdo,bdo->bo", hdbar[li + 1], msg)
        # s = 1 - h^2 ; h = tanh(a)
        hbar[li + 1] += -2.0 * h_l * sbar[li + 1]
        abar = hbar[li + 1] * s_l
        # m sg
        mbar = adbar * sg[:, None, :]
        sgbar[li] += np.einsum("bdo,bdo->bo", adbar, m)
        hdbar[li] += mbar @ W
        gW[li] += np.einsum("bdo,bdi->oi", mbar, hd_p)
        # a = pre sg + c t
        prebar = abar * sg
        sgbar[li] += abar * pre
        gc[li] += abar.T @ t
        tbar += abar @ c
        gb_[li] += prebar.sum(axis=0)
        gW[li] += prebar.T @ h_p
        hbar[li] += prebar @ W
        # sg = sigmoid(t gw + gb)
        ubar = sgbar[li] * sg * (1.0 - sg)
        ggw[li] += ubar.T @ t
        ggb[li] += ubar.sum(axis=0)
        tbar += ubar @ gw

    # hd0 = s0 zd ; s0 = 1 - h0^2 ; h0 = tanh z
    zdbar = zdbar + hdbar[0] * s0[:, None, :]
    sbar[0] += np.einsum("bdn,bdn->bn", hdbar[0], zd)
    hbar[0] += -2.0 * h0 * sbar[0]
    zbar = hbar[0] * s0

    params = [(gW[i], gb_[i], ggw[i], ggb[i], gc[i]) for i in range(L)]
    return zbar, zdbar, tbar, params
