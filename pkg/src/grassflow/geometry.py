"""Stiefel and Grassmann geometry.

Points are D x k float64 arrays with orthonormal columns.  Most functions
accept a stack of them, shape (..., D, k), and operate on the trailing two
axes.  The retraction helpers also accept tape variables (see
:mod:`grassflow.autodiff`) so the flow can be differentiated end to end.

Vec is column-major throughout: ``vec(A)[j*D + i] = A[i, j]``.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

ORTHO_TOL = 1e-10
HORIZONTAL_TOL = 1e-9
CHART_COND_LIMIT = 1e12


class ChartSingularityError(ArithmeticError):
    """The target point lies (numerically) outside the Cayley chart."""


class RankDeficientError(ValueError):
    """Columns handed to Gram-Schmidt are numerically dependent."""


def _T(a):
    return np.swapaxes(a, -1, -2)


def vec(a):
    """Column-major vectorization of the trailing matrix, returned 1-D."""
    a = np.asarray(a)
    return _T(a).reshape(a.shape[:-2] + (-1,))


def unvec(v, rows, cols):
    v = np.asarray(v)
    return _T(v.reshape(v.shape[:-1] + (cols, rows)))


def _check_pair(name, Y, Z):
    if np.shape(Y) != np.shape(Z):
        raise ad.ShapeError(f"{name}: shapes {np.shape(Y)} and {np.shape(Z)} differ")


def sym(A):
    return 0.5 * (A + _T(A))


def orthonormality_error(Y):
    Y = np.asarray(Y)
    k = Y.shape[-1]
    return np.linalg.norm(_T(Y) @ Y - np.eye(k), axis=(-2, -1))


def check_stiefel(Y, tol=ORTHO_TOL):
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim < 2 or not 1 <= Y.shape[-1] < Y.shape[-2]:
        raise ad.ShapeError(f"expected D x k with 1 <= k < D, got {Y.shape}")
    err = np.max(orthonormality_error(Y))
    if not err <= tol:
        raise ValueError(f"columns are not orthonormal (error {err:.3e})")
    return Y


def tangent_project(Y, Z):
    """Project Z onto the tangent space of the Stiefel manifold at Y."""
    _check_pair("tangent_project", Y, Z)
    return Z - Y @ sym(_T(Y) @ Z)


def horizontal_project(Y, Z):
    """Remove the component of Z inside span(Y); the result satisfies Y^T R = 0."""
    _check_pair("horizontal_project", Y, Z)
    return Z - Y @ (_T(Y) @ Z)


def complement_basis(Y):
    """Orthonormal basis of the orthogonal complement of span(Y).

    Taken from the trailing columns of a complete Householder QR, which is
    deterministic for a given input.
    """
    Y = np.asarray(Y, dtype=np.float64)
    k = Y.shape[-1]
    Q, _ = np.linalg.qr(Y, mode="complete")
    return Q[..., :, k:]


def horizontal_basis(Y):
    """Dk x (D-k)k matrix whose columns are vec(Y_perp[:, a] e_b^T).

    Column ``b*(D-k) + a`` corresponds to the pair (a, b); the whole matrix
    equals ``kron(I_k, Y_perp)``.  Horizontal coordinates of xi are therefore
    ``vec(Y_perp^T xi)``.
    """
    Yp = complement_basis(Y)
    return np.kron(np.eye(np.shape(Y)[-1]), Yp)


def horizontal_retract(Y, xi, t=1.0):
    """Economy Cayley retraction of the horizontal vector ``xi`` at ``Y``.

        R_Y(t xi) = Y + t xi - (t^2/2 Y + t^3/4 xi)(I + t^2/4 xi^T xi)^{-1} xi^T xi

    Works on arrays and on tape variables alike.
    """
    k = ad.value(Y).shape[-1]
    S = ad.matmul(ad.transpose(xi), xi)
    if ad.is_var(S) or ad.is_var(t):
        G = ad.inv(np.eye(k) + (t * t / 4.0) * S)
    else:
        G = np.linalg.inv(np.eye(k) + (t * t / 4.0) * S)
    corr = ad.matmul(ad.matmul((t * t / 2.0) * Y + (t ** 3 / 4.0) * xi, G), S)
    return Y + t * xi - corr


def _cond(A):
    return np.linalg.cond(A)


def inverse_retract(Y, X):
    """Horizontal vector at Y that the Cayley retraction maps onto X.

        R_Y^{-1}(X) = 2 (X - Y Y^T X)(I + Y^T X)^{-1}
    """
    _check_pair("inverse_retract", Y, X)
    k = Y.shape[-1]
    N = np.eye(k) + _T(Y) @ X
    cond = _cond(N)
    if np.any(~np.isfinite(cond)) or np.any(cond > CHART_COND_LIMIT):
        raise ChartSingularityError(
            f"I + Y^T X is numerically singular (condition {np.max(cond):.3e})"
        )
    return 2.0 * np.linalg.solve(_T(N), _T(X - Y @ (_T(Y) @ X))).swapaxes(-1, -2)


def commutation_matrix(D, k):
    """Permutation K with K vec(A) = vec(A^T) for every D x k matrix A."""
    if D < 1 or k < 1:
        raise ValueError("dimensions must be positive")
    K = np.zeros((D * k, D * k))
    i, j = np.meshgrid(np.arange(D), np.arange(k), indexing="ij")
    K[(i * k + j).ravel(), (j * D + i).ravel()] = 1.0
    return K


def retraction_derivative(Y, xi):
    """Ambient Jacobian d vec(R_Y(E)) / d vec(E) at E = xi (Dk x Dk).

    Assembled from Kronecker identities vec(AXB) = (B^T kron A) vec(X).
    """
    Y = np.asarray(Y, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    D, k = Y.shape
    I_D, I_k, I_Dk = np.eye(D), np.eye(k), np.eye(D * k)
    K = commutation_matrix(D, k)
    S = xi.T @ xi
    Ginv = np.linalg.inv(I_k + 0.25 * S)
    F = 0.5 * Y + 0.25 * xi
    # dS = dE^T E + E^T dE
    dS = np.kron(xi.T, I_k) @ K + np.kron(I_k, xi.T)
    dG = -np.kron(Ginv.T, Ginv) @ (0.25 * dS)
    # d(F G S) = dF G S + F dG S + F G dS
    dFGS = (
        np.kron((Ginv @ S).T, I_D) @ (0.25 * I_Dk)
        + np.kron(S.T, F) @ dG
        + np.kron(I_k, F @ Ginv) @ dS
    )
    return I_Dk - dFGS


def retraction_jacobian_logdet(M, xi):
    """log |det(B^T B)|^{1/2} with B = dR_M(xi) restricted to horizontal directions.

    This is the volume change between the horizontal coordinate space at M
    and the Stiefel manifold (with the ambient Frobenius metric).
    """
    B = retraction_derivative(M, xi) @ horizontal_basis(M)
    _, logdet = np.linalg.slogdet(B.T @ B)
    return 0.5 * logdet


def grassmann_jacobian_logdet(M, xi):
    """log |det| of the chart map from horizontal coordinates at M to Gr(k, D).

    The image tangent vector dR is split into its horizontal part at the
    image point, which is what the Grassmann metric sees.
    """
    X = horizontal_retract(M, xi)
    B = retraction_derivative(M, xi) @ horizontal_basis(M)
    _, logdet = np.linalg.slogdet(horizontal_basis(X).T @ B)
    return logdet


def cayley_logdet(xi):
    """Closed form of :func:`grassmann_jacobian_logdet`.

    With s_i the squared singular values of xi,

        log J = -(D-1) sum_i log(1 + s_i/4) + sum_{i<j} log|1 - s_i s_j / 16|.

    Accepts stacks (..., D, k).
    """
    xi = np.asarray(xi, dtype=np.float64)
    D, k = xi.shape[-2:]
    s = np.linalg.svd(xi, compute_uv=False) ** 2
    out = -(D - 1) * np.sum(np.log1p(s / 4.0), axis=-1)
    for i in range(k):
        for j in range(i + 1, k):
            out = out + np.log(np.abs(1.0 - s[..., i] * s[..., j] / 16.0))
    return out


def inverse_retraction_derivative(Y, X):
    """d vec(R_Y^{-1}(X)) / d vec(X) as a Dk x Dk matrix.

    With A = X - Y Y^T X and N = I + Y^T X,

        dR^{-1} = 2 (N^{-T} kron I_D)(I - I_k kron Y Y^T)
                  - 2 (N^{-T} kron A N^{-1})(I_k kron Y^T)
    """
    Y = np.asarray(Y, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    D, k = Y.shape
    N = np.eye(k) + Y.T @ X
    cond = _cond(N)
    if not np.isfinite(cond) or cond > CHART_COND_LIMIT:
        raise ChartSingularityError(f"I + Y^T X is numerically singular (condition {cond:.3e})")
    Ninv = np.linalg.inv(N)
    A = X - Y @ (Y.T @ X)
    P = np.eye(D * k) - np.kron(np.eye(k), Y @ Y.T)
    return 2.0 * np.kron(Ninv.T, np.eye(D)) @ P - 2.0 * np.kron(Ninv.T, A @ Ninv) @ np.kron(
        np.eye(k), Y.T
    )


def apply_inverse_retraction_derivative(Y, X, dX):
    """Directional derivative of R_Y^{-1} at X along dX, in matrix form."""
    k = ad.value(Y).shape[-1]
    Yt = ad.transpose(Y)
    N = np.eye(k) + ad.matmul(Yt, X)
    Ninv = ad.inv(N) if ad.is_var(N) else np.linalg.inv(N)
    YtdX = ad.matmul(Yt, dX)
    A = X - ad.matmul(Y, ad.matmul(Yt, X))
    first = ad.matmul(dX - ad.matmul(Y, YtdX), Ninv)
    second = ad.matmul(ad.matmul(ad.matmul(A, Ninv), YtdX), Ninv)
    return 2.0 * (first - second)


def gram_schmidt(P, tol=1e-12):
    """Orthonormalize the columns of P with classical Gram-Schmidt run twice.

    Column signs are preserved: column j of the result has positive inner
    product with column j of P.
    """
    P = np.array(P, dtype=np.float64)
    if P.ndim != 2:
        raise ad.ShapeError(f"gram_schmidt expects a matrix, got shape {P.shape}")
    D, k = P.shape
    Q = np.zeros((D, k))
    for j in range(k):
        v = P[:, j].copy()
        scale = np.linalg.norm(v)
        for _ in range(2):
            v -= Q[:, :j] @ (Q[:, :j].T @ v)
        nrm = np.linalg.norm(v)
        if not nrm >= tol * max(1.0, scale):
            raise RankDeficientError(f"column {j} is linearly dependent (residual norm {nrm:.3e})")
        Q[:, j] = v / nrm
    return Q


def principal_angles(Y1, Y2):
    """Principal angles between span(Y1) and span(Y2), ascending."""
    c = np.linalg.svd(_T(Y1) @ Y2, compute_uv=False)
    return np.arccos(np.clip(c, -1.0, 1.0))[..., ::-1]


def random_stiefel(rng, D, k, size=None):
    shape = (D, k) if size is None else (size, D, k)
    Q, R = np.linalg.qr(rng.standard_normal(shape))
    return Q * np.sign(np.diagonal(R, axis1=-2, axis2=-1))[..., None, :]


def random_orthogonal(rng, k, size=None):
    """Haar-distributed orthogonal matrices (QR with sign-fixed diagonal)."""
    return random_stiefel(rng, k, k, size) if k > 1 else _random_sign(rng, size)


def _random_sign(rng, size):
    shape = (1, 1) if size is None else (size, 1, 1)
    return np.where(rng.random(shape) < 0.5, -1.0, 1.0)


def random_horizontal(rng, Y, scale=1.0):
    Y = np.asarray(Y)
    return scale * horizontal_project(Y, rng.standard_normal(Y.shape))
