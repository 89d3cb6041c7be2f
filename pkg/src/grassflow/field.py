"""The learnable vector field on Gr(k, D).

Pipeline for one query point Y (D x k, orthonormal):

    Z  = W_in - Y Y^T W_in          horizontal projection of a learned matrix
    x0 = tanh(vec(Z))
    x  = tanh(CS_L(... tanh(CS_1(x0, t)) ..., t))      scalar potential v
    X  = P_Y(dv/dY)                 tangent projection of the gradient

Because Z does not change when Y is replaced by YQ, the potential is
invariant and X transforms as X(YQ) = X(Y) Q.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import kernels

TEXTURE_WIDTHS = (3, 64, 64, 1)
DW4_WIDTHS = (8, 64, 64, 64, 1)
LJ13_WIDTHS = (39, 32, 32, 32, 1)

LAYER_FIELDS = ("W", "b", "gate_w", "gate_b", "bias_w")


class NonFiniteActivation(FloatingPointError):
    def __init__(self, layer: int):
        super().__init__(f"non-finite activation in layer {layer}")
        self.layer = layer


@dataclass
class CSLayer:
    W: np.ndarray
    b: np.ndarray
    gate_w: np.ndarray
    gate_b: np.ndarray
    bias_w: np.ndarray

    def astuple(self):
        return (self.W, self.b, self.gate_w, self.gate_b, self.bias_w)


@dataclass
class VectorFieldParams:
    """Weights of the field.  ``T`` is the (trainable) integration time."""

    W_in: np.ndarray
    layers: list[CSLayer]
    T: float = 1.0
    train_time: bool = True
    dims: tuple[int, int] = dc_field(init=False)

    def __post_init__(self):
        self.dims = tuple(int(s) for s in ad.value(self.W_in).shape)

    @property
    def widths(self):
        return (self.dims[0] * self.dims[1],) + tuple(
            int(ad.value(l.W).shape[0]) for l in self.layers
        )

    def arrays(self) -> dict[str, np.ndarray]:
        """Named parameter arrays in a fixed order (the trainable set)."""
        out = {"W_in": self.W_in}
        for i, layer in enumerate(self.layers):
            for name in LAYER_FIELDS:
                out[f"layer{i}.{name}"] = getattr(layer, name)
        out["T"] = self.T
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, train_time: bool = True) -> "VectorFieldParams":
        n = 0
        while f"layer{n}.W" in arrays:
            n += 1
        layers = [
            CSLayer(*(arrays[f"layer{i}.{name}"] for name in LAYER_FIELDS)) for i in range(n)
        ]
        T = arrays.get("T", 1.0)
        return cls(arrays["W_in"], layers, T, train_time)

    def copy(self) -> "VectorFieldParams":
        arrays = {k: np.array(v, dtype=np.float64) for k, v in self.arrays().items()}
        arrays["T"] = float(np.asarray(self.T).reshape(()))
        return VectorFieldParams.from_arrays(arrays, self.train_time)

    def with_time(self, T) -> "VectorFieldParams":
        return replace(self, T=T)

    def as_vars(self, tape: ad.Tape) -> "VectorFieldParams":
        """Same parameters recorded as leaves of ``tape``."""
        arrays = self.arrays()
        leaves = {
            k: tape.leaf(np.reshape(v, (1, 1)) if k == "T" else v) for k, v in arrays.items()
        }
        if not self.train_time:
            leaves["T"] = float(np.asarray(self.T).reshape(()))
        return VectorFieldParams.from_arrays(leaves, self.train_time)

    def layer_tuples(self):
        return [l.astuple() for l in self.layers]

    def is_zero(self) -> bool:
        return all(
            not np.any(ad.value(v)) for k, v in self.arrays().items() if k != "T"
        )


def init(dims, widths, seed, T=1.0, train_time=True) -> VectorFieldParams:
    """Random initialization.

    Weight matrices and biases are uniform on +-1/sqrt(fan_in); the time
    gate and time bias weights have fan-in 1; gate biases start at zero.
    W_in is uniform on +-1.
    """
    if not widths:
        raise ValueError("widths must not be empty")
    D, k = dims
    widths = tuple(int(w) for w in widths)
    if widths[0] != D * k:
        raise ValueError(f"first width must be D*k = {D * k}, got {widths[0]}")
    if widths[-1] != 1:
        raise ValueError("last width must be 1 (scalar potential)")
    rng = np.random.default_rng(seed)
    W_in = rng.uniform(-1.0, 1.0, size=(D, k))
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        layers.append(
            CSLayer(
                W=rng.uniform(-bound, bound, size=(fan_out, fan_in)),
                b=rng.uniform(-bound, bound, size=fan_out),
                gate_w=rng.uniform(-1.0, 1.0, size=fan_out),
                gate_b=np.zeros(fan_out),
                bias_w=rng.uniform(-1.0, 1.0, size=fan_out),
            )
        )
    return VectorFieldParams(W_in, layers, float(T), train_time)


def zeros(dims, widths, T=1.0) -> VectorFieldParams:
    params = init(dims, widths, 0, T)
    arrays = {k: np.zeros_like(v) for k, v in params.arrays().items() if k != "T"}
    arrays["T"] = float(T)
    return VectorFieldParams.from_arrays(arrays)


def concatsquash(layer: CSLayer, x, t):
    """(W x + b) * sigmoid(gate_w t + gate_b) + bias_w t.

    ``x`` holds one input per row, shape (..., in); ``t`` is a scalar or has
    one entry per row, shape (..., 1).
    """
    W = layer.W
    n_in = ad.value(W).shape[1]
    if ad.value(x).shape[-1] != n_in:
        raise ad.ShapeError(
            f"concatsquash: input width {ad.value(x).shape[-1]} does not match W {ad.value(W).shape}"
        )
    gate = ad.sigmoid(t * layer.gate_w + layer.gate_b)
    return (ad.matmul(x, ad.transpose(W)) + layer.b) * gate + t * layer.bias_w


def horp(W_in, Y):
    """Horizontal projection of W_in at Y (unchanged under Y -> YQ)."""
    return W_in - ad.matmul(Y, ad.matmul(ad.transpose(Y), W_in))


def _rows(Z):
    """vec of each D x k matrix, laid out as rows: (..., D, k) -> (..., Dk)."""
    shape = ad.value(Z).shape
    D, k = shape[-2:]
    return ad.reshape(ad.transpose(Z), shape[:-2] + (D * k,))


def potential(params: VectorFieldParams, t, Y, check_finite=False):
    """Scalar potential v(t, Y), composed from tape primitives.

    Returns shape (..., 1) for Y of shape (..., D, k).
    """
    x = ad.tanh(_rows(horp(params.W_in, Y)))
    if ad.value(x).ndim == 1:
        x = ad.reshape(x, (1, ad.value(x).shape[0]))
    for i, layer in enumerate(params.layers):
        x = ad.tanh(concatsquash(layer, x, t))
        if check_finite and not np.all(np.isfinite(ad.value(x))):
            raise NonFiniteActivation(i)
    return x


@dataclass
class FieldEval:
    value: np.ndarray
    potential: float | np.ndarray


def forward(params: VectorFieldParams, t: float, Y) -> FieldEval:
    """Evaluate the field at Y (D x k) or at a stack of points (B, D, k).

    The gradient of the potential is taken with a fresh tape.
    """
    Y = np.asarray(Y, dtype=np.float64)
    D, k = params.dims
    if Y.shape[-2:] != (D, k):
        raise ad.ShapeError(f"forward: point shape {Y.shape} does not match field dims {(D, k)}")
    tape = ad.Tape()
    Yv = tape.leaf(Y)
    v = potential(params, float(t), Yv, check_finite=True)
    total = ad.sum_(v)
    G = ad.backward(total, wrt=[Yv])[Yv]
    value = geo.tangent_project(Y, G)
    pot = v.value.reshape(Y.shape[:-2]) if Y.ndim > 2 else float(v.value.reshape(()))
    return FieldEval(value=value, potential=pot)


# --------------------------------------------------------------------------
# fused kernel on the tape
# --------------------------------------------------------------------------


def _bundle_fwd(vals, payload):
    z, zd, t = vals[:3]
    rest = vals[3:]
    layers = [tuple(rest[5 * i: 5 * i + 5]) for i in range(len(rest) // 5)]
    B = z.shape[0]
    tb = np.broadcast_to(np.ravel(t), (B,)) if np.size(t) == 1 else np.ravel(t)
    v, g, Q, cache = kernels.bundle_forward(layers, z, zd, np.ascontiguousarray(tb))
    payload["cache"] = cache
    return [v, g, Q]


def _bundle_vjp(vals, outs, grads, payload):
    t = vals[2]
    zbar, zdbar, tbar, pbar = kernels.bundle_vjp(payload["cache"], *grads)
    tbar = np.sum(tbar).reshape(np.shape(t)) if np.size(t) == 1 else tbar.reshape(np.shape(t))
    flat = [g for layer in pbar for g in layer]
    return [zbar, zdbar, tbar] + flat


def _bundle_check(vals, payload):
    z, zd = vals[0], vals[1]
    if z.ndim != 2 or zd.ndim != 3 or zd.shape[0] != z.shape[0] or zd.shape[2] != z.shape[1]:
        raise ad.ShapeError(f"cs_bundle: z {z.shape} and directions {zd.shape} disagree")


ad.register("cs_bundle", _bundle_fwd, _bundle_vjp, _bundle_check)


def potential_bundle(params: VectorFieldParams, t, z, zd):
    """(v, dv/dz, Q) for inputs z (B, n) and directions zd (B, d, n).

    Q[b, i, j] = zd_i^T (d^2 v / dz^2) zd_j.  Dispatches to the tape when
    any argument is a variable.
    """
    flat = [p for layer in params.layer_tuples() for p in layer]
    args = [z, zd, t] + flat
    tape = next((a.tape for a in args if ad.is_var(a)), None)
    if tape is None:
        B = np.shape(z)[0]
        tb = np.broadcast_to(np.ravel(t), (B,)) if np.size(t) == 1 else np.ravel(t)
        v, g, Q, _ = kernels.bundle_forward(
            params.layer_tuples(), z, zd, np.ascontiguousarray(tb, dtype=np.float64), False
        )
        return v, g, Q
    return tape.record("cs_bundle", args, {"cache": None})


def field_and_laplacian(params: VectorFieldParams, t, gamma, Yperp=None):
    """Field X(t, gamma) and the Laplace-Beltrami operator of the potential.

    ``gamma`` is a stack (B, D, k) of orthonormal matrices (array or tape
    variable).  ``Yperp`` (B, D, D-k) is a fixed matrix whose projection
    ``A = (I - gamma gamma^T) Yperp`` spans the horizontal space at gamma;
    the Laplacian is then

        sum_{a,c,b} (A^T A)^{-1}_{ac} Q[(a,b), (c,b)]
          + 2(D-k) <dv/dZ, W> - 2D <dv/dZ, Z>

    where Q holds the Hessian along the directions dZ generated by moving
    gamma along A e_a e_b^T.  This value does not depend on the choice of
    Yperp.  With ``Yperp=None`` only the field is computed.
    """
    W = params.W_in
    D, k = params.dims
    B = ad.value(gamma).shape[0]
    n = D * k
    gT = ad.transpose(gamma)
    GW = ad.matmul(gT, W)  # (B, k, k)
    Z = W - ad.matmul(gamma, GW)
    z = _rows(Z)
    if Yperp is None:
        zd = np.zeros((B, 0, n))
        m = 0
    else:
        m = D - k
        A = Yperp - ad.matmul(gamma, ad.matmul(gT, Yperp))  # (B, D, m)
        AW = ad.matmul(ad.transpose(A), W)  # (B, m, k)
        # dZ for direction (a, b), stored as (B, a, b, j, i) so that the
        # trailing (j, i) pair flattens to the column-major vec index
        At = ad.transpose(A)  # (B, m, D)
        term1 = ad.mul(
            ad.reshape(GW, (B, 1, k, k, 1)), ad.reshape(At, (B, m, 1, 1, D))
        )
        term2 = ad.mul(
            ad.reshape(gT, (B, 1, k, 1, D)), ad.reshape(AW, (B, m, 1, k, 1))
        )
        zd = -1.0 * ad.reshape(term1 + term2, (B, m * k, n))
    v, g, Q = potential_bundle(params, t, z, zd)
    Gz = ad.transpose(ad.reshape(g, (B, k, D)))  # dv/dZ as (B, D, k)
    # dv/dgamma = -Gz W^T gamma - W Gz^T gamma
    dv = -1.0 * (ad.matmul(Gz, ad.matmul(ad.transpose(W), gamma)) + ad.matmul(W, ad.matmul(ad.transpose(Gz), gamma)))
    X = dv - ad.matmul(gamma, 0.5 * (ad.matmul(gT, dv) + ad.matmul(ad.transpose(dv), gamma)))
    if Yperp is None:
        return X, None
    Gram = ad.matmul(ad.transpose(A), A)  # (B, m, m)
    Ginv = ad.inv(Gram)
    Q5 = ad.reshape(Q, (B, m, k, m, k))
    Qsum = ad.sum_(ad.mul(Q5, np.eye(k).reshape(1, 1, k, 1, k)), axis=(2, 4))  # (B, m, m)
    hess = ad.sum_(ad.mul(Ginv, ad.transpose(Qsum)), axis=(1, 2))
    first = ad.sum_(ad.mul(Gz, W), axis=(1, 2))
    second = ad.sum_(ad.mul(Gz, Z), axis=(1, 2))
    lap = hess + (2.0 * (D - k)) * first - (2.0 * D) * second
    return X, lap
