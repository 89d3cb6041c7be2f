import numpy as np
import pytest

from grassflow import autodiff as ad
from grassflow import field as F
from grassflow import flow as fl
from grassflow import geometry as geo
from grassflow.prior import GrassmannGaussianPrior

TIGHT = fl.SolverConfig(atol=1e-9, rtol=1e-9)


def projector(Y):
    return Y @ np.swapaxes(Y, -1, -2)


def projector_distance(A, B):
    return np.linalg.norm(projector(A) - projector(B), axis=(-2, -1))


def scaled(params, s):
    arrays = {k: (np.asarray(v) * s if k.endswith(".W") else v) for k, v in params.arrays().items()}
    return F.VectorFieldParams.from_arrays(arrays)


@pytest.fixture
def net3():
    return scaled(F.init((3, 1), (3, 16, 16, 1), 7), 3.0)


@pytest.fixture
def net42():
    return scaled(F.init((4, 2), (8, 16, 16, 1), 11), 3.0)


def test_zero_params_identity(rng):
    p = F.zeros((4, 2), (8, 8, 1))
    Y = geo.random_stiefel(rng, 4, 2, size=5)
    Y1, dl = fl.push_forward(p, Y, fl.SolverConfig())
    np.testing.assert_array_equal(Y1, Y)
    np.testing.assert_array_equal(dl, 0.0)


REV_CASES = [((3, 1), (3, 64, 64, 1)), ((4, 2), (8, 64, 64, 1)), ((6, 3), (18, 32, 1))]


def _round_trip(dims, widths, seed, n=100):
    p = F.init(dims, widths, seed)
    Y0 = geo.random_stiefel(np.random.default_rng(seed), *dims, size=n)
    cfg = fl.SolverConfig()
    Y1, d1 = fl.push_forward(p, Y0, cfg)
    Yb, d0 = fl.inverse(p, Y1, cfg)
    return p, Y0, Y1, d1, Yb, d0


@pytest.mark.parametrize("dims,widths", REV_CASES)
@pytest.mark.parametrize("seed", [0, 2])
def test_reversibility_point(dims, widths, seed):
    _, Y0, Y1, _, Yb, _ = _round_trip(dims, widths, seed)
    assert np.max(projector_distance(Yb, Y0)) < 1e-5
    assert np.max(projector_distance(Y1, Y0)) > 1e-3  # the flow actually moved


@pytest.mark.parametrize("dims,widths", REV_CASES)
@pytest.mark.parametrize("seed", [0, 2])
def test_reversibility_log_density(dims, widths, seed):
    _, _, _, d1, _, d0 = _round_trip(dims, widths, seed)
    assert np.max(np.abs(d1 + d0)) < 1e-5  # inverse reports the opposite change


@pytest.mark.parametrize("fixture", ["net3", "net42"])
def test_reversibility_strong_field(fixture, request, rng):
    # round-trip error is global, so a fast field needs tighter local tolerances
    p = request.getfixturevalue(fixture)
    Y0 = geo.random_stiefel(rng, *p.dims, size=50)
    errs = []
    for tol in (1e-5, 1e-8):
        cfg = fl.SolverConfig(atol=tol, rtol=tol)
        Y1, d1 = fl.push_forward(p, Y0, cfg)
        Yb, d0 = fl.inverse(p, Y1, cfg)
        errs.append(max(np.max(projector_distance(Yb, Y0)), np.max(np.abs(d1 + d0))))
    assert errs[0] < 1e-3
    assert errs[1] < 1e-5
    assert np.max(projector_distance(Y1, Y0)) > 0.1


def test_constant_rotation_matches_euler_reference():
    omega = 1.3
    J = np.array([[0.0, -1.0], [1.0, 0.0]])
    field = fl.SyntheticField(lambda t, G: omega * (J @ G), (2, 1))
    Y0 = np.array([[[1.0], [0.0]]])
    Y1 = fl.push_forward(field, Y0, fl.SolverConfig(atol=1e-10, rtol=1e-10))[0][0]
    y = Y0[0].copy()
    dt = 1e-5
    for _ in range(100_000):
        y = y + dt * omega * (J @ y)
        y /= np.linalg.norm(y)
    assert np.linalg.norm(y @ y.T - Y1 @ Y1.T) < 1e-6


def test_rk4_constant_rotation():
    omega = 0.7
    J = np.array([[0.0, -1.0], [1.0, 0.0]])
    field = fl.SyntheticField(lambda t, G: omega * (J @ G), (2, 1))
    Y1, dl = fl.push_forward(field, np.array([[1.0], [0.0]]), fl.SolverConfig(method="rk4", fixed_dt=0.01))
    expected = np.array([[np.cos(omega)], [np.sin(omega)]])
    assert np.linalg.norm(Y1 @ Y1.T - expected @ expected.T) < 1e-8
    assert dl == 0.0


@pytest.mark.parametrize("fixture", ["net3", "net42"])
def test_log_density_change_matches_jacobian(fixture, request, rng):
    """The integrated density change equals minus the log-Jacobian of the flow map."""
    p = request.getfixturevalue(fixture)
    D, k = p.dims
    Y0 = geo.random_stiefel(rng, D, k)
    Y1, dl = fl.push_forward(p, Y0, TIGHT)
    E0 = geo.horizontal_basis(Y0)
    E1 = geo.horizontal_basis(Y1)
    h = 1e-4
    cols = []
    for j in range(E0.shape[1]):
        E = geo.unvec(E0[:, j], D, k)
        Yp, _ = fl.push_forward(p, geo.horizontal_retract(Y0, h * E), TIGHT)
        Ym, _ = fl.push_forward(p, geo.horizontal_retract(Y0, -h * E), TIGHT)
        # chart coordinates at Y1 through the inverse retraction
        cp = geo.vec(geo.inverse_retract(Y1, Yp))
        cm = geo.vec(geo.inverse_retract(Y1, Ym))
        cols.append(E1.T @ (cp - cm) / (2 * h))
    Jm = np.stack(cols, axis=1)
    assert abs(dl + np.log(abs(np.linalg.det(Jm)))) < 1e-5


def test_orthonormality_preserved(net42, rng):
    Y = geo.random_stiefel(rng, 4, 2, size=30)
    Y1, _ = fl.push_forward(net42, Y, fl.SolverConfig())
    err = np.swapaxes(Y1, 1, 2) @ Y1 - np.eye(2)
    assert np.max(np.abs(err)) < 1e-10


def test_log_prob_identity_is_prior(rng, sphere_prior):
    p = F.zeros((3, 1), (3, 8, 1))
    Y = geo.random_stiefel(rng, 3, 1, size=10)
    np.testing.assert_allclose(fl.log_prob(p, sphere_prior, Y, fl.SolverConfig()), sphere_prior.log_density(Y))


def test_log_prob_representative_and_antipodal_invariance(net42, rng):
    prior = GrassmannGaussianPrior.isotropic(np.eye(4)[:, :2], 0.2)
    Y = geo.random_stiefel(rng, 4, 2, size=10)
    Q = geo.random_orthogonal(rng, 2, size=10)
    cfg = fl.SolverConfig()
    a = fl.log_prob(net42, prior, Y, cfg)
    np.testing.assert_allclose(fl.log_prob(net42, prior, Y @ Q, cfg), a, atol=1e-5)
    np.testing.assert_allclose(fl.log_prob(net42, prior, -Y, cfg), a, atol=1e-5)


def test_log_prob_single_point(net3, sphere_prior):
    Y = np.array([[0.6], [0.0], [0.8]])
    v = fl.log_prob(net3, sphere_prior, Y, fl.SolverConfig())
    assert isinstance(v, float)
    assert v == pytest.approx(fl.log_prob(net3, sphere_prior, Y[None], fl.SolverConfig())[0])


def test_sample_flow_matches_log_prob(net3, sphere_prior):
    """Latitude-band frequencies of flowed samples vs quadrature of the flowed density."""
    cfg = fl.SolverConfig(atol=1e-7, rtol=1e-7)
    n = 4000
    S = fl.sample_flow(net3, sphere_prior, np.random.default_rng(0), n, cfg)
    assert S.shape == (n, 3, 1)
    z = np.abs(S[:, 0, 0])  # |e1 . y| is well defined on the projective plane
    edges = np.linspace(0, 1, 6)
    freq = np.histogram(z, edges)[0] / n
    # Gauss-Legendre in u = e1 . y on [-1, 1], uniform in azimuth
    u, w = np.polynomial.legendre.leggauss(40)
    phi = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    U, P = np.meshgrid(u, phi, indexing="ij")
    r = np.sqrt(1 - U**2)
    pts = np.stack([U, r * np.cos(P), r * np.sin(P)], axis=-1).reshape(-1, 3, 1)
    dens = np.exp(fl.log_prob(net3, sphere_prior, pts, cfg)).reshape(U.shape).mean(axis=1)
    # area measure normalised to 1: du dphi / 4pi, azimuth already averaged
    prob = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        mask = (np.abs(u) >= lo) & (np.abs(u) < hi)
        prob.append(np.sum(w[mask] * dens[mask]) / 2)
    prob = np.array(prob)
    assert abs(prob.sum() - 1) < 0.02
    assert 0.5 * np.sum(np.abs(prob - freq)) < 0.03


def test_sample_flow_empty(net3, sphere_prior):
    assert fl.sample_flow(net3, sphere_prior, np.random.default_rng(0), 0, fl.SolverConfig()).shape == (0, 3, 1)


# --- chart velocity and divergence --------------------------------------------


def test_chart_velocity_at_base_is_field(net42, rng):
    Y = geo.random_stiefel(rng, 4, 2)
    Yp = geo.complement_basis(Y)
    u = fl.chart_velocity(net42, 0.3, Y, np.zeros((4, 2)))
    X = F.forward(net42, 0.3, Y).value
    np.testing.assert_allclose(u, geo.vec(Yp.T @ X), atol=1e-12)


def test_divergence_zero_field(rng):
    p = F.zeros((4, 2), (8, 8, 1))
    Y = geo.random_stiefel(rng, 4, 2)
    assert fl.divergence(p, 0.0, Y, 0.1 * geo.horizontal_project(Y, rng.standard_normal((4, 2)))) == 0.0


def test_divergence_linear_hook_is_trace(rng):
    A = rng.standard_normal((4, 4))
    Y = geo.random_stiefel(rng, 4, 2)
    val = fl.divergence(None, 0.0, Y, np.zeros((4, 2)), velocity=lambda c: ad.matmul(A, c))
    assert val == pytest.approx(np.trace(A), abs=1e-12)


def test_divergence_matches_finite_differences(net3, rng):
    Y = geo.random_stiefel(rng, 3, 1)
    Yp = geo.complement_basis(Y)
    eps = 0.2 * (Yp @ rng.standard_normal((2, 1)))
    c0 = geo.vec(Yp.T @ eps)
    h = 1e-6
    tr = 0.0
    for j in range(2):
        dc = np.zeros(2)
        dc[j] = h
        up = fl.chart_velocity(net3, 0.4, Y, Yp @ geo.unvec(c0 + dc, 2, 1))
        um = fl.chart_velocity(net3, 0.4, Y, Yp @ geo.unvec(c0 - dc, 2, 1))
        tr += (up[j] - um[j]) / (2 * h)
    assert fl.divergence(net3, 0.4, Y, eps) == pytest.approx(tr, abs=1e-7)


def test_manifold_divergence_single_and_batch(net3, rng):
    Y = geo.random_stiefel(rng, 3, 1, size=3)
    batch = fl.manifold_divergence(net3, 0.1, Y)
    assert batch.shape == (3,)
    assert fl.manifold_divergence(net3, 0.1, Y[1]) == pytest.approx(batch[1])


# --- rk4 on the tape ----------------------------------------------------------


def test_rk4_path_gradients(net3, rng):
    Y0 = geo.random_stiefel(rng, 3, 1, size=2)
    w = rng.standard_normal((2, 3, 1))

    def loss(params, span):
        Y, dl = fl.rk4_path(params, Y0, 0.0, span, 4)
        return ad.sum_(Y * w) + ad.sum_(dl)

    tape = ad.Tape()
    pv = net3.as_vars(tape)
    sv = tape.leaf(np.array(0.8))
    grads = ad.backward(loss(pv, sv))

    h = 1e-6
    fd = (ad.value(loss(net3, 0.8 + h)) - ad.value(loss(net3, 0.8 - h))) / (2 * h)
    assert grads[sv].item() == pytest.approx(np.asarray(fd).item(), rel=1e-6, abs=1e-9)

    arrays = net3.arrays()
    W = arrays["layer1.W"]
    i, j = 2, 5
    Wp, Wm = W.copy(), W.copy()
    Wp[i, j] += h
    Wm[i, j] -= h
    lp = ad.value(loss(F.VectorFieldParams.from_arrays({**arrays, "layer1.W": Wp}), 0.8))
    lm = ad.value(loss(F.VectorFieldParams.from_arrays({**arrays, "layer1.W": Wm}), 0.8))
    assert grads[pv.layers[1].W][i, j] == pytest.approx(np.asarray((lp - lm) / (2 * h)).item(), rel=1e-6, abs=1e-9)


def test_rk4_matches_dopri5(net42, rng):
    Y = geo.random_stiefel(rng, 4, 2, size=5)
    a, da = fl.push_forward(net42, Y, TIGHT)
    b, db = fl.push_forward(net42, Y, fl.SolverConfig(method="rk4", fixed_dt=0.01))
    assert np.max(projector_distance(a, b)) < 1e-7
    np.testing.assert_allclose(da, db, atol=1e-7)


# --- solver configuration -------------------------------------------------------


def test_solver_config_errors():
    with pytest.raises(ValueError):
        fl.SolverConfig(method="euler")
    with pytest.raises(ValueError):
        fl.SolverConfig(atol=0)
    with pytest.raises(ValueError):
        fl.SolverConfig(t0=0.5, t1=0.5)
    with pytest.raises(ValueError):
        fl.SolverConfig(fixed_dt=0)


def test_step_budget_raises(net3, rng):
    with pytest.raises(fl.SolverError):
        fl.push_forward(net3, geo.random_stiefel(rng, 3, 1, size=2), fl.SolverConfig(atol=1e-12, rtol=1e-12, max_steps=3))


def test_integrate_to_explicit_time(net3, rng):
    Y = geo.random_stiefel(rng, 3, 1)
    cfg = fl.SolverConfig()
    mid = fl.integrate(net3, fl.FlowState(Y), cfg, t1=0.4)
    end = fl.integrate(net3, mid, cfg)
    direct = fl.integrate(net3, fl.FlowState(Y), cfg)
    assert end.t == direct.t == pytest.approx(1.0)
    assert np.linalg.norm(projector(end.point) - projector(direct.point)) < 1e-5
    assert end.delta_logp == pytest.approx(direct.delta_logp, abs=1e-5)
    same = fl.integrate(net3, mid, cfg, t1=0.4)
    np.testing.assert_array_equal(same.point, mid.point)
