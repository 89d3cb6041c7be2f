# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled version of the fused potential kernel (see ``_bundle_py``).

Primal rows and tangent rows are stacked into one (B + B*d, width) array
per level so that each product with a weight matrix is a single dgemm.
Row ``b`` is the primal value of sample b; row ``B + b*d + q`` is its
tangent along direction q.
"""

import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef void mm(bint ta, bint tb, int m, int n, int k, double alpha,
             const double* A, int lda, const double* B, int ldb, double beta,
             double* C, int ldc) noexcept nogil:
    """Row-major C = alpha op(A) op(B) + beta C."""
    cdef int i, j
    cdef char ca = b'T' if tb else b'N'
    cdef char cb = b'T' if ta else b'N'
    if m == 0 or n == 0:
        return
    if k == 0:
        if beta == 0.0:
            for i in range(m):
                for j in range(n):
                    C[i * ldc + j] = 0.0
        return
    dgemm(&ca, &cb, &n, &m, &k, &alpha, <double*>B, &ldb, <double*>A, &lda, &beta, C, &ldc)


cdef class BundleCache:
    cdef public list layers
    cdef public object z, zd, t
    cdef public list H, S, SG, PRE
    cdef public list RHO, DELTA
    cdef public object gd
    cdef public int B, d, n


def bundle_forward(layers, z, zd, t, want_cache=True):
    zc = np.ascontiguousarray(z, dtype=np.float64)
    zdc = np.ascontiguousarray(zd, dtype=np.float64)
    tarr = np.ascontiguousarray(t, dtype=np.float64)
    cdef const double[::1] tc = tarr
    cdef int B = zc.shape[0], n = zc.shape[1], d = zdc.shape[1]
    cdef int R = B + B * d
    cdef int L = len(layers)
    cdef int li, b, q, j, o, i_w, row
    cdef double[:, ::1] Hp, Hn, PREv, SGv, Sv
    cdef const double[:, ::1] W
    cdef const double[::1] bv, gw, gb, cv
    cdef double sgv, hv, sv

    # level 0: h = tanh(z), hd = (1 - h^2) zd
    H0 = np.empty((R, n))
    S0 = np.empty((B, n))
    Hp = H0
    Sv = S0
    cdef const double[:, ::1] zv = zc
    cdef const double[:, :, ::1] zdv = zdc
    # bulk numpy tanh is far cheaper than a scalar libm call per element
    np.tanh(zc, out=H0[:B])
    with nogil:
        for b in range(B):
            for j in range(n):
                hv = Hp[b, j]
                Sv[b, j] = 1.0 - hv * hv
            for q in range(d):
                row = B + b * d + q
                for j in range(n):
                    Hp[row, j] = Sv[b, j] * zdv[b, q, j]
    Hs = [H0]
    Ss = [S0]
    SGs = []
    PREs = []
    for li in range(L):
        Wl, bl, gwl, gbl, cl = layers[li]
        W = np.ascontiguousarray(Wl, dtype=np.float64)
        bv = np.ascontiguousarray(bl, dtype=np.float64)
        gw = np.ascontiguousarray(gwl, dtype=np.float64)
        gb = np.ascontiguousarray(gbl, dtype=np.float64)
        cv = np.ascontiguousarray(cl, dtype=np.float64)
        o = W.shape[0]
        i_w = W.shape[1]
        Hn_arr = np.empty((R, o))
        PRE_arr = np.empty((R, o))
        SG_arr = np.empty((B, o))
        S_arr = np.empty((B, o))
        Hn = Hn_arr
        PREv = PRE_arr
        SGv = SG_arr
        Sv = S_arr
        Hp = Hs[li]
        with nogil:
            # [pre; m] = [h; hd] W^T
            mm(False, True, R, o, i_w, 1.0, &Hp[0, 0], i_w, &W[0, 0], i_w, 0.0, &PREv[0, 0], o)
            for b in range(B):
                for j in range(o):
                    SGv[b, j] = 0.5 * (tc[b] * gw[j] + gb[j])
                    PREv[b, j] = PREv[b, j] + bv[j]
        np.tanh(SG_arr, out=SG_arr)
        with nogil:
            for b in range(B):
                for j in range(o):
                    sgv = 0.5 * (1.0 + SGv[b, j])
                    SGv[b, j] = sgv
                    Hn[b, j] = PREv[b, j] * sgv + cv[j] * tc[b]
        np.tanh(Hn_arr[:B], out=Hn_arr[:B])
        with nogil:
            for b in range(B):
                for j in range(o):
                    hv = Hn[b, j]
                    Sv[b, j] = 1.0 - hv * hv
                for q in range(d):
                    row = B + b * d + q
                    for j in range(o):
                        Hn[row, j] = Sv[b, j] * PREv[row, j] * SGv[b, j]
        Hs.append(Hn_arr)
        Ss.append(S_arr)
        SGs.append(SG_arr)
        PREs.append(PRE_arr)

    v = np.array(Hs[L][:B, 0])

    # reverse sweep: RHO[li] = [rho; rhod] at level li+1, DELTA[li] = [r; rd]
    cdef double[:, ::1] RH, DL, RHprev, Hl
    RHOs = [None] * L
    DELTAs = [None] * L
    rho_top = np.zeros((R, 1))
    rho_top[:B, 0] = 1.0
    cur = rho_top
    cdef double rh
    for li in range(L - 1, -1, -1):
        W = np.ascontiguousarray(layers[li][0], dtype=np.float64)
        o = W.shape[0]
        i_w = W.shape[1]
        RH = cur
        Hl = Hs[li + 1]
        Sv = Ss[li + 1]
        SGv = SGs[li]
        D_arr = np.empty((R, o))
        DL = D_arr
        prev = np.empty((R, i_w))
        RHprev = prev
        with nogil:
            for b in range(B):
                for j in range(o):
                    DL[b, j] = RH[b, j] * Sv[b, j] * SGv[b, j]
                for q in range(d):
                    row = B + b * d + q
                    for j in range(o):
                        DL[row, j] = (RH[row, j] * Sv[b, j]
                                      - 2.0 * RH[b, j] * Hl[b, j] * Hl[row, j]) * SGv[b, j]
            mm(False, False, R, i_w, o, 1.0, &DL[0, 0], o, &W[0, 0], i_w, 0.0, &RHprev[0, 0], i_w)
        RHOs[li] = cur
        DELTAs[li] = D_arr
        cur = prev

    g = np.empty((B, n))
    gd = np.empty((B, d, n))
    Q = np.zeros((B, d, d))
    cdef double[:, ::1] gv = g
    cdef double[:, :, ::1] gdv = gd
    cdef double[:, :, ::1] Qv = Q
    cdef double acc
    cdef int p
    RH = cur
    Hp = Hs[0]
    Sv = Ss[0]
    with nogil:
        for b in range(B):
            for j in range(n):
                gv[b, j] = RH[b, j] * Sv[b, j]
            for q in range(d):
                row = B + b * d + q
                for j in range(n):
                    gdv[b, q, j] = RH[row, j] * Sv[b, j] - 2.0 * RH[b, j] * Hp[b, j] * Hp[row, j]
            for q in range(d):
                for p in range(d):
                    acc = 0.0
                    for j in range(n):
                        acc = acc + zdv[b, q, j] * gdv[b, p, j]
                    Qv[b, q, p] = acc

    cache = None
    if want_cache:
        cache = BundleCache()
        cache.layers = [tuple(np.ascontiguousarray(a, dtype=np.float64) for a in l) for l in layers]
        cache.z = zc
        cache.zd = zdc
        cache.t = tarr
        cache.H = Hs
        cache.S = Ss
        cache.SG = SGs
        cache.PRE = PREs
        cache.RHO = RHOs + [cur]
        cache.DELTA = DELTAs
        cache.gd = gd
        cache.B = B
        cache.d = d
        cache.n = n
    return v, g, Q, cache


def bundle_vjp(BundleCache cache, vbar, gbar, Qbar):
    cdef int B = cache.B, d = cache.d, n = cache.n
    cdef int R = B + B * d
    cdef int L = len(cache.layers)
    cdef int li, b, q, p, j, o, i_w, row
    cdef const double[::1] vbv = np.ascontiguousarray(vbar, dtype=np.float64)
    cdef const double[:, ::1] gbv = np.ascontiguousarray(gbar, dtype=np.float64)
    cdef const double[:, :, ::1] Qbv = np.ascontiguousarray(Qbar, dtype=np.float64)
    cdef const double[:, :, ::1] zdv = cache.zd
    cdef const double[:, :, ::1] gdv = cache.gd
    cdef const double[::1] tc = cache.t

    cdef double[:, ::1] Hp, Hl, Sv, Sp, SGv, PREv, RH, DL, RHB, nRHB, HB, HBp, SB, SBp, SGB, DB
    cdef const double[:, ::1] W
    cdef double[:, ::1] gW
    cdef const double[::1] gwv, cvv
    cdef double[::1] gbias, ggw, ggb, gc
    cdef double tmp, x, y, a_bar, sg, hv, sv, ub
    tbar = np.zeros(B)
    cdef double[::1] tb = tbar

    # adjoint containers per level
    HBAR = [np.zeros((R, cache.H[l].shape[1])) for l in range(L + 1)]
    SBAR = [np.zeros((B, cache.H[l].shape[1])) for l in range(L + 1)]
    SGBAR = [np.zeros((B, cache.SG[l].shape[1])) for l in range(L)]

    zdbar = np.zeros((B, d, n))
    cdef double[:, :, ::1] zdb = zdbar
    # rhobar for level 0: [rhobar; rhodbar]
    rb0 = np.zeros((R, n))
    RHB = rb0
    RH = cache.RHO[L]
    Hp = cache.H[0]
    Sp = cache.S[0]
    HBp = HBAR[0]
    SBp = SBAR[0]
    cdef double gdb
    with nogil:
        for b in range(B):
            # Q = zd gd^T
            for q in range(d):
                for j in range(n):
                    x = 0.0
                    y = 0.0
                    for p in range(d):
                        x = x + Qbv[b, q, p] * gdv[b, p, j]
                        y = y + Qbv[b, p, q] * zdv[b, p, j]
                    zdb[b, q, j] = x
                    # y is gdbar[b, q, j]; gd = rhod s0 - 2 rho h0 hd0
                    row = B + b * d + q
                    RHB[row, j] = y * Sp[b, j]
                    SBp[b, j] = SBp[b, j] + y * RH[row, j]
                    tmp = y * Hp[row, j]
                    RHB[b, j] = RHB[b, j] - 2.0 * tmp * Hp[b, j]
                    HBp[b, j] = HBp[b, j] - 2.0 * tmp * RH[b, j]
                    HBp[row, j] = HBp[row, j] - 2.0 * y * RH[b, j] * Hp[b, j]
            # g = rho s0
            for j in range(n):
                RHB[b, j] = RHB[b, j] + gbv[b, j] * Sp[b, j]
                SBp[b, j] = SBp[b, j] + gbv[b, j] * RH[b, j]

    grads = []
    for li in range(L):
        Wl, bl, gwl, gbl, cl = cache.layers[li]
        grads.append([np.zeros_like(Wl), np.zeros_like(bl), np.zeros_like(gwl),
                      np.zeros_like(gbl), np.zeros_like(cl)])

    # undo the reverse sweep, first layer first
    cur_bar = rb0
    for li in range(L):
        W = cache.layers[li][0]
        gW = grads[li][0]
        o = W.shape[0]
        i_w = W.shape[1]
        RHB = cur_bar
        RH = cache.RHO[li]
        DL = cache.DELTA[li]
        Hl = cache.H[li + 1]
        Sv = cache.S[li + 1]
        SGv = cache.SG[li]
        HB = HBAR[li + 1]
        SB = SBAR[li + 1]
        SGB = SGBAR[li]
        db_arr = np.empty((R, o))
        DB = db_arr
        nxt = np.zeros((R, o))
        nRHB = nxt
        with nogil:
            # [rbar; rdbar] = [rhobar; rhodbar] W^T ; gW += [r; rd]^T [rhobar; rhodbar]
            mm(False, True, R, o, i_w, 1.0, &RHB[0, 0], i_w, &W[0, 0], i_w, 0.0, &DB[0, 0], o)
            mm(True, False, o, i_w, R, 1.0, &DL[0, 0], o, &RHB[0, 0], i_w, 1.0, &gW[0, 0], i_w)
            for b in range(B):
                sg = 0.0
                for j in range(o):
                    sg = SGv[b, j]
                    # r = delta sg with delta = rho s
                    SGB[b, j] = SGB[b, j] + DB[b, j] * RH[b, j] * Sv[b, j]
                    a_bar = DB[b, j] * sg  # deltabar
                    nRHB[b, j] = nRHB[b, j] + a_bar * Sv[b, j]
                    SB[b, j] = SB[b, j] + a_bar * RH[b, j]
                for q in range(d):
                    row = B + b * d + q
                    for j in range(o):
                        sg = SGv[b, j]
                        # rd = deltad sg, deltad = rhod s - 2 rho h hd
                        x = RH[row, j] * Sv[b, j] - 2.0 * RH[b, j] * Hl[b, j] * Hl[row, j]
                        SGB[b, j] = SGB[b, j] + DB[row, j] * x
                        y = DB[row, j] * sg  # deltadbar
                        nRHB[row, j] = y * Sv[b, j]
                        SB[b, j] = SB[b, j] + y * RH[row, j]
                        tmp = y * Hl[row, j]
                        nRHB[b, j] = nRHB[b, j] - 2.0 * tmp * Hl[b, j]
                        HB[b, j] = HB[b, j] - 2.0 * tmp * RH[b, j]
                        HB[row, j] = HB[row, j] - 2.0 * y * RH[b, j] * Hl[b, j]
        cur_bar = nxt

    HB = HBAR[L]
    for b in range(B):
        HB[b, 0] = HB[b, 0] + vbv[b]

    # undo the forward pass, last layer first
    for li in range(L - 1, -1, -1):
        W = cache.layers[li][0]
        gwv = cache.layers[li][2]
        cvv = cache.layers[li][4]
        gW = grads[li][0]
        gbias = grads[li][1]
        ggw = grads[li][2]
        ggb = grads[li][3]
        gc = grads[li][4]
        o = W.shape[0]
        i_w = W.shape[1]
        Hl = cache.H[li + 1]
        Sv = cache.S[li + 1]
        Hp = cache.H[li]
        SGv = cache.SG[li]
        PREv = cache.PRE[li]
        HB = HBAR[li + 1]
        SB = SBAR[li + 1]
        HBp = HBAR[li]
        SGB = SGBAR[li]
        pb_arr = np.empty((R, o))
        DB = pb_arr  # [prebar; mbar]
        with nogil:
            for b in range(B):
                for q in range(d):
                    row = B + b * d + q
                    for j in range(o):
                        # hd = s (m sg)
                        x = HB[row, j] * Sv[b, j]  # adbar
                        SB[b, j] = SB[b, j] + HB[row, j] * PREv[row, j] * SGv[b, j]
                        DB[row, j] = x * SGv[b, j]
                        SGB[b, j] = SGB[b, j] + x * PREv[row, j]
                for j in range(o):
                    hv = Hl[b, j]
                    sv = Sv[b, j]
                    sg = SGv[b, j]
                    HB[b, j] = HB[b, j] - 2.0 * hv * SB[b, j]
                    a_bar = HB[b, j] * sv
                    DB[b, j] = a_bar * sg
                    SGB[b, j] = SGB[b, j] + a_bar * PREv[b, j]
                    gc[j] = gc[j] + a_bar * tc[b]
                    tb[b] = tb[b] + a_bar * cvv[j]
                    gbias[j] = gbias[j] + DB[b, j]
                    ub = SGB[b, j] * sg * (1.0 - sg)
                    ggw[j] = ggw[j] + ub * tc[b]
                    ggb[j] = ggb[j] + ub
                    tb[b] = tb[b] + ub * gwv[j]
            # [hbar; hdbar] += [prebar; mbar] W ; gW += [prebar; mbar]^T [h; hd]
            mm(False, False, R, i_w, o, 1.0, &DB[0, 0], o, &W[0, 0], i_w, 1.0, &HBp[0, 0], i_w)
            mm(True, False, o, i_w, R, 1.0, &DB[0, 0], o, &Hp[0, 0], i_w, 1.0, &gW[0, 0], i_w)

    # level 0
    zbar = np.empty((B, n))
    cdef double[:, ::1] zb = zbar
    Hp = cache.H[0]
    Sp = cache.S[0]
    HBp = HBAR[0]
    SBp = SBAR[0]
    with nogil:
        for b in range(B):
            for q in range(d):
                row = B + b * d + q
                for j in range(n):
                    zdb[b, q, j] = zdb[b, q, j] + HBp[row, j] * Sp[b, j]
                    SBp[b, j] = SBp[b, j] + HBp[row, j] * zdv[b, q, j]
            for j in range(n):
                zb[b, j] = (HBp[b, j] - 2.0 * Hp[b, j] * SBp[b, j]) * Sp[b, j]

    params = [tuple(gr) for gr in grads]
    return zbar, zdbar, tbar, params
