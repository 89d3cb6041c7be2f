"""Matrix-normal prior on Gr(k, D) pushed through the Cayley chart at M.

Sampling: draw Z ~ MN(0, U, V), project it onto the horizontal space at M
and retract.  The density of the resulting subspace is taken with respect
to the normalized invariant measure, so it integrates to one over Gr(k, D).

A subspace [Y] is reached from 2^k horizontal vectors at M (one for each
choice of column signs of a representative), so the density is a sum over
those preimages, each weighted by the inverse chart Jacobian.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, multigammaln

from . import autodiff as ad
from . import geometry as geo


def log_volume_stiefel(k: int, D: int) -> float:
    """log of 2^k pi^{Dk/2} / Gamma_k(D/2)."""
    if not (1 <= k <= D):
        raise ValueError(f"need 1 <= k <= D, got k={k}, D={D}")
    return k * np.log(2.0) + 0.5 * D * k * np.log(np.pi) - multigammaln(0.5 * D, k)


def log_volume_orthogonal(k: int) -> float:
    return log_volume_stiefel(k, k)


def log_volume_grassmann(k: int, D: int) -> float:
    """log of pi^{k(D-k)/2} Gamma_k(k/2) / Gamma_k(D/2)."""
    if not (1 <= k < D):
        raise ValueError(f"need 1 <= k < D, got k={k}, D={D}")
    return 0.5 * k * (D - k) * np.log(np.pi) + multigammaln(0.5 * k, k) - multigammaln(0.5 * D, k)


@dataclass(frozen=True)
class VolumeTable:
    log_stiefel: float
    log_orthogonal: float
    log_grassmann: float


def volume_table(k: int, D: int) -> VolumeTable:
    return VolumeTable(log_volume_stiefel(k, D), log_volume_orthogonal(k), log_volume_grassmann(k, D))


@dataclass
class GrassmannGaussianPrior:
    """Prior with mean subspace M, row covariance U (D x D) and column covariance V (k x k).

    A zero covariance is allowed for sampling (every draw is M) but such a
    prior has no density.
    """

    M: np.ndarray
    U: np.ndarray
    V: np.ndarray
    dims: tuple[int, int] = field(init=False)
    log_volume: float = field(init=False)
    degenerate: bool = field(init=False)
    chol_U: np.ndarray = field(init=False, repr=False)
    chol_V: np.ndarray = field(init=False, repr=False)
    complement: np.ndarray = field(init=False, repr=False)
    horizontal_cov_chol: np.ndarray | None = field(init=False, repr=False)
    horizontal_cov_logdet: float = field(init=False, repr=False)
    isotropic_var: float | None = field(init=False)

    def __post_init__(self):
        M = geo.check_stiefel(self.M)
        D, k = M.shape
        U = np.asarray(self.U, dtype=np.float64)
        V = np.asarray(self.V, dtype=np.float64)
        if U.shape != (D, D) or V.shape != (k, k):
            raise ad.ShapeError(f"covariances must be {D}x{D} and {k}x{k}, got {U.shape}, {V.shape}")
        if not (np.allclose(U, U.T, atol=1e-12) and np.allclose(V, V.T, atol=1e-12)):
            raise ValueError("covariances must be symmetric")
        self.M = M
        self.U = U
        self.V = V
        self.dims = (D, k)
        self.log_volume = log_volume_grassmann(k, D)
        self.degenerate = not (np.any(U) and np.any(V))
        if self.degenerate:
            self.chol_U = np.zeros((D, D))
            self.chol_V = np.zeros((k, k))
        else:
            try:
                self.chol_U = np.linalg.cholesky(U)
                self.chol_V = np.linalg.cholesky(V)
            except np.linalg.LinAlgError:
                raise ValueError("covariances must be positive definite") from None
        self.complement = geo.complement_basis(M)
        self.horizontal_cov_chol = None
        self.horizontal_cov_logdet = np.nan
        self.isotropic_var = None
        if not self.degenerate:
            H = geo.horizontal_basis(M)
            cov = H.T @ np.kron(V, U) @ H
            L = np.linalg.cholesky(cov)
            self.horizontal_cov_chol = L
            self.horizontal_cov_logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
            scale = float(np.mean(np.diag(cov)))
            if np.allclose(cov, scale * np.eye(cov.shape[0]), rtol=1e-12, atol=1e-15):
                self.isotropic_var = scale

    @classmethod
    def isotropic(cls, M, row_var: float, col_var: float = 1.0) -> "GrassmannGaussianPrior":
        """U = row_var * I_D and V = col_var * I_k."""
        M = np.asarray(M, dtype=np.float64)
        D, k = M.shape
        return cls(M, row_var * np.eye(D), col_var * np.eye(k))

    @property
    def horizontal_dim(self) -> int:
        D, k = self.dims
        return (D - k) * k

    def to_dict(self) -> dict:
        return {"M": self.M.tolist(), "U": self.U.tolist(), "V": self.V.tolist(), "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, d: dict) -> "GrassmannGaussianPrior":
        return cls(np.array(d["M"], dtype=np.float64), np.array(d["U"]), np.array(d["V"]))

    # ------------------------------------------------------------------

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        """Draw one point (D, k) or ``n`` points (n, D, k)."""
        D, k = self.dims
        shape = (D, k) if n is None else (n, D, k)
        N = rng.standard_normal(shape)
        Z = self.chol_U @ N @ self.chol_V.T
        xi = geo.horizontal_project(np.broadcast_to(self.M, Z.shape), Z)
        return geo.horizontal_retract(self.M, xi)

    def horizontal_log_pdf(self, xi: np.ndarray) -> np.ndarray:
        """Gaussian log-density of horizontal vectors in (D-k)k coordinates."""
        if self.degenerate:
            raise ValueError("degenerate prior has no density")
        c = geo.vec(np.swapaxes(self.complement, -1, -2) @ xi)
        w = np.linalg.solve(self.horizontal_cov_chol, c[..., None])[..., 0]
        d = c.shape[-1]
        return -0.5 * (d * np.log(2.0 * np.pi) + self.horizontal_cov_logdet) - 0.5 * np.sum(w * w, axis=-1)

    def preimages(self, Y):
        """Horizontal vectors at M retracting onto [Y], with validity masks.

        Returns ``(xi, valid)`` of shapes (2^k, ..., D, k) and (2^k, ...).
        """
        Y = np.asarray(Y, dtype=np.float64)
        D, k = self.dims
        M = self.M
        C = M.T @ Y
        Uc, sig, Vh = np.linalg.svd(C)
        Vc = np.swapaxes(Vh, -1, -2)
        P = Y - M @ (M.T @ Y)
        out, valid = [], []
        for signs in itertools.product((1.0, -1.0), repeat=k):
            s = np.array(signs)
            denom = s + sig
            ok = np.all(np.abs(denom) > 1e-12, axis=-1)
            safe = np.where(np.abs(denom) > 1e-12, denom, 1.0)
            xi = 2.0 * (P @ Vc / safe[..., None, :]) @ np.swapaxes(Uc, -1, -2)
            out.append(xi)
            valid.append(ok)
        return np.stack(out), np.stack(valid)

    def log_density(self, Y) -> np.ndarray | float:
        """log p(Y) with respect to the normalized invariant measure."""
        if self.degenerate:
            raise ValueError("degenerate prior has no density")
        Y = np.asarray(Y, dtype=np.float64)
        if Y.shape[-2:] != self.dims:
            raise ad.ShapeError(f"point shape {Y.shape} does not match prior dims {self.dims}")
        xi, valid = self.preimages(Y)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = self.horizontal_log_pdf(xi) - geo.cayley_logdet(xi)
        terms = np.where(valid, terms, -np.inf)
        out = self.log_volume + logsumexp(terms, axis=0)
        return float(out) if np.ndim(out) == 0 else out

    def log_density_ops(self, Y):
        """Same as :meth:`log_density` for isotropic priors, built from tape
        primitives so it can be differentiated with respect to Y.

        Y has shape (B, D, k); the result has shape (B,).
        """
        if self.isotropic_var is None:
            raise ValueError("log_density_ops needs an isotropic horizontal covariance")
        D, k = self.dims
        var = self.isotropic_var
        d = self.horizontal_dim
        B = ad.value(Y).shape[0]
        C = ad.matmul(self.M.T, Y)  # (B, k, k)
        if k == 1:
            lam = ad.reshape(ad.mul(C, C), (B, 1))
        else:
            lam = ad.eigvalsh(ad.matmul(ad.transpose(C), C))
        # cosines of the principal angles, kept strictly inside (0, 1)
        c = ad.sqrt((1.0 - 2e-12) * lam + 1e-30)
        const = self.log_volume - 0.5 * d * np.log(2.0 * np.pi * var) + k * (D - 1) * np.log(2.0)
        branches = []
        for signs in itertools.product((1.0, -1.0), repeat=k):
            s = np.array(signs)
            sc = ad.mul(c, s)
            a = 1.0 + sc
            b = 1.0 - sc
            log_a = ad.log(a)
            sq = 4.0 * ad.sum_(ad.div(b, a), axis=1)
            term = -0.5 / var * sq - (D - 1) * ad.sum_(log_a, axis=1)
            for i in range(k):
                for j in range(i + 1, k):
                    pair = ad.log(ad.abs_(2.0 * (ad.take(sc, (slice(None), i)) + ad.take(sc, (slice(None), j)))))
                    term = term - pair + ad.take(log_a, (slice(None), i)) + ad.take(log_a, (slice(None), j))
            branches.append(ad.reshape(term, (B, 1)))
        stacked = ad.concat(branches, axis=1) if len(branches) > 1 else branches[0]
        shift = np.max(ad.value(stacked), axis=1, keepdims=True)
        lse = ad.log(ad.sum_(ad.exp(stacked - shift), axis=1)) + shift[:, 0]
        return lse + const
