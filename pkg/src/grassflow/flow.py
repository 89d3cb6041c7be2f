"""Integration of the flow on Gr(k, D).

Each solver step works in the Cayley chart centred at the current point Y:
the offset eps (horizontal at Y) starts at zero, a Runge-Kutta step
advances (eps, delta_logp), and the new point is R_Y(eps).  The field is
evaluated at gamma = R_Y(eps) and pulled back into the chart, including the
vertical correction that keeps gamma on the chart's section
{gamma : Y^T gamma symmetric}.

The log-density rate is minus the Laplace-Beltrami operator of the
potential, evaluated intrinsically at gamma.  Expressed this way the chart
volume factor never enters, so re-centring the chart after every step
needs no correction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .field import VectorFieldParams
from .field import field_and_laplacian as _network_field

log = logging.getLogger(__name__)

METHODS = ("dopri5", "rk4")


class SolverError(RuntimeError):
    """The integrator gave up (step budget or step-size underflow)."""


@dataclass
class SolverConfig:
    """``t1=None`` means "integrate up to the model's own time T"."""

    method: str = "dopri5"
    atol: float = 1e-5
    rtol: float = 1e-5
    t0: float = 0.0
    t1: float | None = None
    max_steps: int = 10_000
    fixed_dt: float = 0.05

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown solver {self.method!r}; choose from {METHODS}")
        if not (self.atol > 0 and self.rtol > 0):
            raise ValueError("atol and rtol must be positive")
        if self.t1 is not None and self.t1 == self.t0:
            raise ValueError("t1 must differ from t0")
        if self.fixed_dt <= 0:
            raise ValueError("fixed_dt must be positive")

    def end_time(self, params: VectorFieldParams) -> float:
        return float(np.asarray(ad.value(params.T)).reshape(())) if self.t1 is None else self.t1


@dataclass
class FlowState:
    point: np.ndarray
    delta_logp: float | np.ndarray = 0.0
    t: float = 0.0


@dataclass
class SyntheticField:
    """A hand-written field that can stand in for network parameters.

    ``field(t, gamma)`` returns horizontal vectors for a stack (B, D, k) of
    points; ``divergence(t, gamma)`` returns the manifold divergence (B,)
    and defaults to zero.  Both work on plain arrays.
    """

    field: Callable
    dims: tuple
    divergence: Callable | None = None
    T: float = 1.0

    def field_and_laplacian(self, t, gamma, Yperp=None):
        X = self.field(t, ad.value(gamma))
        if Yperp is None:
            return X, None
        lap = np.zeros(X.shape[0]) if self.divergence is None else self.divergence(t, ad.value(gamma))
        return X, lap


def field_and_laplacian(params, t, gamma, Yperp=None):
    if isinstance(params, SyntheticField):
        return params.field_and_laplacian(t, gamma, Yperp)
    return _network_field(params, t, gamma, Yperp)


# --------------------------------------------------------------------------
# chart dynamics (arrays or tape variables)
# --------------------------------------------------------------------------


def _kron_sum(C, k):
    """kron(I, C) + kron(C, I) for a stack of symmetric k x k matrices."""
    B = ad.value(C).shape[0]
    eye = np.eye(k)
    left = ad.mul(ad.reshape(C, (B, 1, k, 1, k)), eye.reshape(1, k, 1, k, 1))
    right = ad.mul(ad.reshape(C, (B, k, 1, k, 1)), eye.reshape(1, 1, k, 1, k))
    return ad.reshape(left + right, (B, k * k, k * k))


def chart_pullback(Y, gamma, X):
    """Chart velocity at Y of a point gamma = R_Y(eps) moving with field X.

    X is horizontal at gamma.  The curve gamma(t) must keep Y^T gamma
    symmetric, so it moves with X + gamma Omega, where the skew Omega
    solves C Omega + Omega C = X^T Y - Y^T X with C = Y^T gamma.
    """
    k = ad.value(Y).shape[-1]
    Yt = ad.transpose(Y)
    if k > 1:
        B = ad.value(Y).shape[0]
        C = ad.matmul(Yt, gamma)
        C = 0.5 * (C + ad.transpose(C))
        R = ad.matmul(ad.transpose(X), Y) - ad.matmul(Yt, X)
        L = _kron_sum(C, k)
        Linv = ad.inv(L) if ad.is_var(L) else np.linalg.inv(L)
        om = ad.matmul(Linv, ad.vec(R))
        Omega = ad.unvec(om, k, k)
        X = X + ad.matmul(gamma, Omega)
    return geo.apply_inverse_retraction_derivative(Y, gamma, X)


def _rhs(params, t, Y, Yperp, eps, scale=1.0):
    """(d eps/dt, d delta/dt, gamma, X, lap) in the chart at Y."""
    gamma = geo.horizontal_retract(Y, eps)
    X, lap = field_and_laplacian(params, t, gamma, Yperp)
    u = chart_pullback(Y, gamma, X)
    lap_scale = ad.reshape(scale, (1,)) if ad.is_var(scale) else scale
    return scale * u, -1.0 * (lap_scale * lap), gamma, X, lap


def _as_batch(Y):
    Y = np.asarray(Y, dtype=np.float64)
    return (Y[None], True) if Y.ndim == 2 else (Y, False)


# --------------------------------------------------------------------------
# fixed-step RK4 (differentiable)
# --------------------------------------------------------------------------


def rk4_path(params, Y, t_start, span, n_steps: int):
    """Integrate from t_start over ``span`` with ``n_steps`` RK4 steps.

    The field is evaluated at t_start + s * span for s in [0, 1], so a
    trainable span (a tape variable) receives gradients.  Works with arrays
    or tape variables for ``params``, ``Y`` and ``span``.  Returns the end
    point and the accumulated change of log-density.
    """
    B = ad.value(Y).shape[0]
    h = 1.0 / n_steps
    delta = np.zeros(B)
    zero = np.zeros(ad.value(Y).shape)
    for i in range(n_steps):
        s = i * h
        Yperp = geo.complement_basis(ad.value(Y))

        def f(si, eps):
            u, dl, *_ = _rhs(params, t_start + si * span, Y, Yperp, eps, span)
            return u, dl

        u1, l1 = f(s, zero)
        u2, l2 = f(s + 0.5 * h, (0.5 * h) * u1)
        u3, l3 = f(s + 0.5 * h, (0.5 * h) * u2)
        u4, l4 = f(s + h, h * u3)
        eps = (h / 6.0) * (u1 + 2.0 * u2 + 2.0 * u3 + u4)
        delta = delta + (h / 6.0) * (l1 + 2.0 * l2 + 2.0 * l3 + l4)
        Y = geo.horizontal_retract(Y, eps)
    return Y, delta


# --------------------------------------------------------------------------
# adaptive Dormand-Prince 5(4)
# --------------------------------------------------------------------------

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


def _error_norm(err_eps, err_delta, Y, Y_new, delta, delta_new, atol, rtol):
    """Worst scaled component over the D rows of eps and the log-density.

    Rows are measured by their Euclidean norm so the norm does not change
    when the representative Y is replaced by YQ.
    """
    r_old = np.linalg.norm(Y, axis=-1)
    r_new = np.linalg.norm(Y_new, axis=-1)
    sc_rows = atol + rtol * np.maximum(r_old, r_new)
    sc_d = atol + rtol * np.maximum(np.abs(delta), np.abs(delta_new))
    rows = np.linalg.norm(err_eps, axis=-1) / sc_rows
    comp = np.concatenate([rows, (np.abs(err_delta) / sc_d)[:, None]], axis=1)
    return np.max(comp, axis=1)


def _state_norm(eps_like, dl, Y, delta, atol, rtol):
    sc_rows = atol + rtol * np.linalg.norm(Y, axis=-1)
    sc_d = atol + rtol * np.abs(delta)
    rows = np.linalg.norm(eps_like, axis=-1) / sc_rows
    comp = np.concatenate([rows, (np.abs(dl) / sc_d)[:, None]], axis=1)
    return np.sqrt(np.mean(comp * comp, axis=1))


def dopri5_path(params, Y, t0: float, t1: float, cfg: SolverConfig, return_steps=False):
    """Adaptive integration of a batch (B, D, k); each sample has its own steps."""
    Y = np.array(Y, dtype=np.float64)
    B = Y.shape[0]
    direction = 1.0 if t1 > t0 else -1.0
    span = abs(t1 - t0)
    t = np.full(B, float(t0))
    delta = np.zeros(B)
    steps = np.zeros(B, dtype=int)
    Yperp = geo.complement_basis(Y)
    X, lap = field_and_laplacian(params, t, Y, Yperp)
    k1u, k1l = X, -lap
    zero = np.zeros_like(Y)

    # initial step (Hairer, Norsett and Wanner, II.4)
    d0 = _state_norm(Y, delta, Y, delta, cfg.atol, cfg.rtol)
    d1 = _state_norm(k1u, k1l, Y, delta, cfg.atol, cfg.rtol)
    h0 = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / np.maximum(d1, 1e-300))
    h0 = np.minimum(h0, abs(t1 - t0))
    u1, l1, *_ = _rhs(params, t + direction * h0, Y, Yperp, direction * h0[:, None, None] * k1u)
    d2 = _state_norm(u1 - k1u, l1 - k1l, Y, delta, cfg.atol, cfg.rtol) / h0
    dm = np.maximum(d1, d2)
    h1 = np.where(dm <= 1e-15, np.maximum(1e-6, h0 * 1e-3), (0.01 / np.maximum(dm, 1e-300)) ** 0.2)
    h = np.minimum(100.0 * h0, h1)

    active = np.ones(B, dtype=bool)
    while np.any(active):
        idx = np.nonzero(active)[0]
        Ya, Ypa, ta, da = Y[idx], Yperp[idx], t[idx], delta[idx]
        remaining = np.abs(t1 - ta)
        ha = np.minimum(h[idx], remaining)
        last = ha >= remaining * (1.0 - 1e-12)
        ha = np.where(last, remaining, ha)
        if np.any(ha < 1e-12):
            raise SolverError(f"step size underflow ({np.min(ha):.3e}) at t={ta[np.argmin(ha)]:.6g}")
        hs = direction * ha
        hm = hs[:, None, None]
        ku = [k1u[idx]]
        kl = [k1l[idx]]
        for i in range(1, 7):
            eps = zero[idx] + hm * sum(a * u for a, u in zip(_A[i], ku) if a != 0.0)
            u, l, gam, Xg, lapg = _rhs(params, ta + _C[i] * hs, Ya, Ypa, eps)
            ku.append(u)
            kl.append(l)
        # stage 7 sits at the 5th-order solution
        eps5 = eps
        d5 = hs * sum(b * l for b, l in zip(_B5, kl))
        err_u = hm * sum(e * u for e, u in zip(_E, ku) if e != 0.0)
        err_l = hs * sum(e * l for e, l in zip(_E, kl) if e != 0.0)
        Y5 = gam
        # error per unit step: each step may spend its share ha/span of the
        # tolerance, so the accumulated error at t1 stays within atol/rtol
        errn = _error_norm(err_u, err_l, Ya, Ya + eps5, da, da + d5, cfg.atol, cfg.rtol) * (span / ha)
        ok = errn <= 1.0
        ok &= np.all(np.isfinite(Y5), axis=(1, 2)) & np.isfinite(d5)
        steps[idx] += 1
        if np.any(steps[idx] > cfg.max_steps):
            raise SolverError(f"exceeded max_steps={cfg.max_steps}")

        acc = idx[ok]
        if acc.size:
            Y[acc] = Y5[ok]
            delta[acc] = da[ok] + d5[ok]
            t[acc] = np.where(last[ok], t1, ta[ok] + hs[ok])
            Yperp[acc] = geo.complement_basis(Y5[ok])
            k1u[acc] = Xg[ok]
            k1l[acc] = -lapg[ok]
            drift = np.max(geo.orthonormality_error(Y[acc]))
            if drift > 1e-8:
                raise SolverError(f"orthonormality drift {drift:.3e}")
            done = acc[last[ok]]
            active[done] = False
        with np.errstate(divide="ignore"):
            fac = np.where(
                errn == 0.0, 10.0, np.clip(0.9 * np.power(np.maximum(errn, 1e-300), -0.25), 0.2, 10.0)
            )
        fac = np.where(np.isfinite(errn), fac, 0.2)
        h[idx] = ha * fac
    log.debug("dopri5: mean %.1f steps per sample", steps.mean())
    if return_steps:
        return Y, delta, steps
    return Y, delta


# --------------------------------------------------------------------------
# public API
# --------------------------------------------------------------------------


def rk4_steps(span: float, dt: float) -> int:
    """Step count for a fixed-step run over ``span``.

    Rounded rather than ceiled: the count stays put while a trainable end
    time wanders around a multiple of dt, so the discrete loss is smooth there.
    """
    return max(1, int(round(abs(span) / dt)))


def _integrate_arrays(params, Y, t0, t1, cfg: SolverConfig):
    if cfg.method == "rk4":
        n = rk4_steps(t1 - t0, cfg.fixed_dt)
        return rk4_path(params, Y, t0, t1 - t0, n)
    return dopri5_path(params, Y, t0, t1, cfg)


def integrate(params: VectorFieldParams, state0: FlowState, cfg: SolverConfig, t1=None) -> FlowState:
    """Carry ``state0`` from ``state0.t`` to ``t1`` (default: ``cfg.end_time``)."""
    t_end = cfg.end_time(params) if t1 is None else float(t1)
    Yb, single = _as_batch(state0.point)
    if t_end == state0.t:
        return FlowState(state0.point.copy(), state0.delta_logp, state0.t)
    Y1, delta = _integrate_arrays(params, Yb, float(state0.t), t_end, cfg)
    dl = np.asarray(state0.delta_logp) + (delta[0] if single else delta)
    return FlowState(Y1[0] if single else Y1, float(dl) if single else dl, t_end)


def inverse(params, Y1, cfg: SolverConfig):
    """Map points at the end time back to the start time.

    Returns (Y0, delta) with delta = log p(Y0) - log p(Y1) along the flow.
    """
    Yb, single = _as_batch(Y1)
    t1 = cfg.end_time(params)
    Y0, delta = _integrate_arrays(params, Yb, t1, cfg.t0, cfg)
    return (Y0[0], float(delta[0])) if single else (Y0, delta)


def log_prob(params: VectorFieldParams, prior, Y1, cfg: SolverConfig):
    """log p(Y1) of the flowed prior, w.r.t. the normalized invariant measure."""
    Yb, single = _as_batch(Y1)
    Y0, delta = inverse(params, Yb, cfg)
    out = prior.log_density(Y0) - delta
    return float(out[0]) if single else out


def sample_flow(params, prior, rng, n: int, cfg: SolverConfig) -> np.ndarray:
    """Draw n prior samples and push them to the end time; shape (n, D, k)."""
    D, k = prior.dims
    if n == 0:
        return np.zeros((0, D, k))
    Y0 = prior.sample(rng, n)
    Y1, _ = _integrate_arrays(params, Y0, cfg.t0, cfg.end_time(params), cfg)
    return Y1


def push_forward(params, Y0, cfg: SolverConfig):
    Yb, single = _as_batch(Y0)
    Y1, delta = _integrate_arrays(params, Yb, cfg.t0, cfg.end_time(params), cfg)
    return (Y1[0], float(delta[0])) if single else (Y1, delta)


def manifold_divergence(params, t, Y):
    """Divergence of the field on Gr(k, D) (Laplace-Beltrami of the potential)."""
    Yb, single = _as_batch(Y)
    _, lap = field_and_laplacian(params, t, Yb, geo.complement_basis(Yb))
    return float(lap[0]) if single else lap


def _coords_velocity(params, t, base, Yperp, c):
    """Chart velocity coordinates as a function of the offset coordinates c."""
    D, k = base.shape
    m = D - k
    eps = ad.matmul(Yperp, ad.unvec(c, m, k))[None]
    gamma = geo.horizontal_retract(base[None], eps)
    X, _ = field_and_laplacian(params, t, gamma, None)
    u = chart_pullback(base[None], gamma, X)
    return ad.vec(ad.matmul(Yperp.T, u[0]))


def chart_velocity(params, t, base, eps) -> np.ndarray:
    """Chart velocity at offset ``eps`` as (D-k)k orthonormal coordinates at ``base``.

    Coordinate ``b*(D-k) + a`` is the component along Y_perp[:, a] e_b^T,
    Y_perp = complement_basis(base).
    """
    base = np.asarray(base, dtype=np.float64)
    Yperp = geo.complement_basis(base)
    c = geo.vec(Yperp.T @ eps)[:, None]
    return _coords_velocity(params, t, base, Yperp, c)[:, 0]


def divergence(params, t, base, eps, velocity=None) -> float:
    """Trace of d(chart velocity)/d(chart coordinates), one tape pass per column.

    ``velocity`` may replace the chart velocity by any callable mapping a
    coordinate column (a tape variable of shape (d, 1)) to one of the same
    shape.
    """
    base = np.asarray(base, dtype=np.float64)
    Yperp = geo.complement_basis(base)
    c0 = geo.vec(Yperp.T @ np.asarray(eps, dtype=np.float64))[:, None]
    tape = ad.Tape()
    c = tape.leaf(c0)
    out = velocity(c) if velocity is not None else _coords_velocity(params, t, base, Yperp, c)
    total = 0.0
    for j in range(c0.shape[0]):
        g = ad.backward(ad.take(out, (slice(j, j + 1), slice(0, 1))), wrt=[c])[c]
        total += g[j, 0]
    return float(total)
