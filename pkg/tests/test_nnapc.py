import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apcpinn import datasets as D
from apcpinn import nnapc as N
from apcpinn import reduction as R
from apcpinn.errors import ConfigurationError, DivergenceError
from apcpinn.networks import Mlp, MlpSpec, init_mlp
from oracles import fd_gradient, rel_err

PI = np.pi
ZERO3 = lambda x: (0 * x, 0 * x, 0 * x)  # noqa: E731


def closed(fn, n=1):
    return N.ClosedForm(fn, n)


def const(c):
    return closed(lambda x: (c + 0 * x, 0 * x, 0 * x))


@pytest.fixture(scope="module")
def inverse_data():
    ens = D.inverse_ensemble(60, seed=0)
    ts = D.training_set("inverse_elliptic", ens, D.equidistant(5), D.equidistant(9), D.equidistant(4))
    return ens, ts


@pytest.fixture(scope="module")
def forward_data():
    ens = D.forward_ensemble(60, seed=0)
    ts = D.training_set("forward_poisson", ens, np.array([-1.0, 1.0]), D.equidistant(7))
    return ens, ts


def inverse_model(ts, order=1, seed=0, **arch):
    problem = N.ProblemSpec("inverse_elliptic")
    spec = dict(u_mean=(2, 4), u_modes=(2, 8), k_mean=(2, 4), k_modes=(2, 8), l2_lambda=1e-4)
    spec.update(arch)
    return problem, N.build_surrogate(problem, ts, N.Architecture(**spec), order=order, seed=seed)


# -- reconstruction ---------------------------------------------------------------


def test_k_at_zero_xi_is_mean_net(inverse_data):
    _, ts = inverse_data
    _, model = inverse_model(ts)
    xs = np.linspace(-1, 1, 11)
    k = N.reconstruct_k(model, xs, np.zeros(model.m))
    assert np.array_equal(k.value, model.k_mean_net.forward(xs)[0])


def test_k_reproduces_kl_truncation_at_sensors(inverse_data):
    _, ts = inverse_data
    problem, model = inverse_model(ts)
    pca, xs = model.pca, ts.k_sensor_xs
    mean = closed(lambda x: (np.interp(x, xs, pca.k0)[None], 0 * x[None], 0 * x[None]))
    vecs = pca.retained_vectors
    modes = closed(lambda x: (np.array([np.interp(x, xs, vecs[:, i]) for i in range(pca.m)]),
                              np.zeros((pca.m, x.size)), np.zeros((pca.m, x.size))), pca.m)
    frozen = N.SurrogateModel(model.u_nets, model.basis, pca, mean, modes)
    for s in (0, 7, 31):
        k = N.reconstruct_k(frozen, xs, model.xi[s]).value
        assert np.max(np.abs(k - pca.reconstruct(model.xi[s]))) < 1e-6


def test_k_without_modes_is_mean():
    net = init_mlp(MlpSpec(1, 2, 4), 0)
    model = N.SurrogateModel([const(0.0)], N.trivial_basis(), None, net, None)
    xs = np.linspace(-1, 1, 5)
    assert np.array_equal(N.reconstruct_k(model, xs, np.zeros(0)).value, net.forward(xs)[0])


def test_u_with_only_mean_net_ignores_xi(inverse_data):
    _, ts = inverse_data
    _, model = inverse_model(ts)
    zero = Mlp(model.u_nets[1].spec, np.zeros(model.u_nets[1].spec.n_params))
    flat = N.SurrogateModel([model.u_nets[0], zero], model.basis, model.pca, model.k_mean_net,
                            model.k_modes_net)
    xs = np.linspace(-1, 1, 9)
    a = N.reconstruct_u(flat, xs, model.xi[0]).value
    b = N.reconstruct_u(flat, xs, model.xi[5]).value
    assert np.array_equal(a, b)


def test_u_reconstruction_projection_round_trip():
    rng = np.random.default_rng(0)
    xi = rng.normal(size=(400, 2)) + 0.2 * rng.normal(size=(400, 2)) ** 2
    basis = R.build_apc_basis(xi, 2)
    psi = basis.evaluate(xi)

    def true_modes(x):
        return np.array([np.sin((a + 1) * x) / (a + 1) for a in range(len(basis))])

    field = lambda x: psi @ true_modes(x)  # noqa: E731  (samples x points)

    def mode_fn(group):
        cols = [i for i, a in enumerate(basis.indices) if sum(a) == group]

        def fn(x):
            modes = R.project_modes(field(x), basis)[cols]
            return modes, 0 * modes, 0 * modes
        return fn

    nets = [closed(mode_fn(g), n) for g, n in enumerate(basis.group_sizes())]
    model = N.SurrogateModel(nets, basis)
    xs = np.linspace(-1, 1, 13)
    ref = field(xs)
    for s in (0, 10, 200):
        assert np.max(np.abs(N.reconstruct_u(model, xs, xi[s]).value - ref[s])) < 1e-8


@settings(max_examples=15, deadline=None)
@given(st.floats(-3, 3), st.integers(0, 59))
def test_u_linear_in_mode_outputs(c, s):
    ens = D.inverse_ensemble(30, seed=1)
    ts = D.training_set("inverse_elliptic", ens, D.equidistant(3), D.equidistant(5), D.equidistant(3))
    _, model = inverse_model(ts)
    s = s % ts.n_snapshots
    scaled = model.copy()
    for net in scaled.u_nets:
        last = net.n_layers - 1
        net.weights(last)[...] *= c
        net.bias(last)[...] *= c
    xs = np.linspace(-1, 1, 7)
    a = N.reconstruct_u(model, xs, model.xi[s]).value
    b = N.reconstruct_u(scaled, xs, model.xi[s]).value
    assert np.allclose(b, c * a, rtol=1e-12, atol=1e-12)


# -- residuals --------------------------------------------------------------------


def test_poisson_residual_manufactured():
    w = 1.5 * PI
    u = closed(lambda x: (np.sin(w * x)[None], w * np.cos(w * x)[None], -w * w * np.sin(w * x)[None]))
    model = N.SurrogateModel([u], N.trivial_basis())
    problem = N.ProblemSpec("deterministic_poisson", forcing=N.Profile(amplitude=9 * PI ** 2 / 4, frequency=1.5))
    xs = np.random.default_rng(0).uniform(-1, 1, 20)
    assert np.max(np.abs(N.residual(model, problem, xs))) < 1e-6


def test_elliptic_residual_analytic_pair():
    u = closed(lambda x: ((5 * (1 - x ** 2))[None], (-10 * x)[None], (-10 + 0 * x)[None]))
    model = N.SurrogateModel([u], N.trivial_basis(), k_mean_net=const(1.0))
    problem = N.ProblemSpec("deterministic_elliptic")
    assert np.max(np.abs(N.residual(model, problem, np.linspace(-1, 1, 15)))) == 0.0


def test_zero_nets_residual_is_minus_forcing():
    model = N.SurrogateModel([closed(ZERO3)], N.trivial_basis(), k_mean_net=closed(ZERO3))
    r = N.residual(model, N.ProblemSpec("deterministic_elliptic"), np.linspace(-1, 1, 6))
    assert np.array_equal(r, np.full(6, -10.0))


def test_forward_residual_needs_forcing(forward_data):
    _, ts = forward_data
    problem = N.ProblemSpec("forward_poisson", forcing=N.Profile())
    model = N.build_surrogate(problem, ts, N.Architecture(u_modes=(2, 4)))
    with pytest.raises(ConfigurationError):
        N.residual(model, problem, np.zeros(3))


def test_unknown_kind():
    with pytest.raises(ConfigurationError):
        N.ProblemSpec("heat")


# -- composite loss -----------------------------------------------------------------


def manufactured_elliptic():
    u = closed(lambda x: ((5 * (1 - x ** 2))[None], (-10 * x)[None], (-10 + 0 * x)[None]))
    model = N.SurrogateModel([u], N.trivial_basis(), k_mean_net=const(1.0))
    u_xs, col, k_xs = np.array([-1.0, 0.0, 1.0]), np.linspace(-1, 1, 7), np.array([-0.5, 0.5])
    ts = N.TrainingSet(u_xs, [5 * (1 - u_xs ** 2)], col, k_xs, [[1.0, 1.0]])
    return model, N.ProblemSpec("deterministic_elliptic"), ts


def test_perfect_surrogate_zero_loss():
    model, problem, ts = manufactured_elliptic()
    assert N.composite_loss(model, problem, ts).total < 1e-10


def test_terms_are_independent():
    model, problem, ts = manufactured_elliptic()
    ts.u_snapshots = ts.u_snapshots + 0.1
    a = N.composite_loss(model, problem, ts)
    ts.u_snapshots = ts.u_snapshots + 0.1
    b = N.composite_loss(model, problem, ts)
    assert b.mse_u == pytest.approx(4 * a.mse_u)
    assert (a.mse_k, a.mse_f) == (b.mse_k, b.mse_f)


def test_single_sensor_terms_are_pointwise_squares():
    u = closed(lambda x: ((1 + x)[None], (1 + 0 * x)[None], (0 * x)[None]))
    model = N.SurrogateModel([u], N.trivial_basis(), k_mean_net=const(2.0))
    ts = N.TrainingSet([0.5], [[1.0]], [0.25], [0.0], [[1.5]])
    loss = N.composite_loss(model, N.ProblemSpec("deterministic_elliptic"), ts)
    assert loss.mse_u == pytest.approx(0.25)
    assert loss.mse_k == pytest.approx(0.25)
    assert loss.mse_f == pytest.approx(100.0)
    assert loss.total == loss.mse_u + loss.mse_k + loss.mse_f + loss.l2


def test_empty_sensor_group_rejected(inverse_data):
    _, ts = inverse_data
    bad = N.TrainingSet(ts.u_sensor_xs, ts.u_snapshots, ts.collocation_xs)
    with pytest.raises(ConfigurationError):
        N.build_surrogate(N.ProblemSpec("inverse_elliptic"), bad)


def test_loss_gradient_matches_fd():
    ens = D.inverse_ensemble(3, seed=2)
    ts = D.training_set("inverse_elliptic", ens, np.array([-1.0, 1.0]), np.array([-0.3, 0.6]),
                        np.array([-0.5, 0.5]))
    problem = N.ProblemSpec("inverse_elliptic")
    model = N.build_surrogate(problem, ts, N.Architecture(u_modes=(2, 4), k_modes=(2, 4), l2_lambda=1e-3),
                              order=1, energy_threshold=0.5)
    assert model.m == 1
    program = N.LossProgram(model, problem, ts)
    _, grads = program.value_and_grad()
    rng = np.random.default_rng(0)
    for name, net in program.nets:
        picks = rng.choice(net.params.size, size=min(5, net.params.size), replace=False)
        base = net.params.copy()

        def total(theta):
            net.params[:] = base
            net.params[picks] = theta
            return program.breakdown().total

        fd = fd_gradient(total, base[picks], h=1e-6)
        net.params[:] = base
        assert rel_err(grads[name][picks], fd) < 1e-4


def test_forward_ignores_k_data(forward_data):
    _, ts = forward_data
    problem = N.ProblemSpec("forward_poisson", forcing=N.Profile())
    model = N.build_surrogate(problem, ts, N.Architecture(u_modes=(2, 4)))
    spoiled = N.TrainingSet(ts.u_sensor_xs, ts.u_snapshots, ts.collocation_xs, np.array([0.0]),
                            np.random.default_rng(0).normal(size=(ts.n_snapshots, 1)), ts.f_snapshots)
    a = N.composite_loss(model, problem, ts)
    b = N.composite_loss(model, problem, spoiled)
    assert a == b and a.mse_k == 0.0
    assert "k_data" not in N.LossProgram(model, problem, ts).bindings()


def test_snapshot_permutation_invariance(inverse_data):
    _, ts = inverse_data
    problem, model = inverse_model(ts)
    program = N.LossProgram(model, problem, ts)
    perm = np.random.default_rng(3).permutation(ts.n_snapshots)
    a, b = program.breakdown(), program.breakdown(rows=perm)
    assert b.total == pytest.approx(a.total, rel=1e-12)


def test_weight_equals_duplicated_rows(inverse_data):
    ens, ts = inverse_data
    problem = N.ProblemSpec("inverse_elliptic")
    weighted = D.training_set("inverse_elliptic", ens, ts.u_sensor_xs, ts.collocation_xs,
                              ts.k_sensor_xs, [1, 2, 1, 3])
    model = N.build_surrogate(problem, weighted, N.Architecture(u_modes=(2, 4), k_modes=(2, 4)))
    k_xs, k_data = weighted.expanded_k()
    listed = N.TrainingSet(ts.u_sensor_xs, ts.u_snapshots, ts.collocation_xs, k_xs, k_data)
    a_loss, a_grad = N.LossProgram(model, problem, weighted).value_and_grad()
    b_loss, b_grad = N.LossProgram(model, problem, listed).value_and_grad()
    assert a_loss == b_loss
    assert all(a_grad[k].tobytes() == b_grad[k].tobytes() for k in a_grad)


# -- training ----------------------------------------------------------------------


def poisson_toy():
    problem = N.ProblemSpec("deterministic_poisson",
                            forcing=N.Profile(amplitude=9 * PI ** 2 / 4, frequency=1.5))
    truth = D.deterministic_poisson_truth(problem.forcing, N.Profile(amplitude=1.0, frequency=1.5))
    ts = D.training_set("deterministic_poisson", truth, np.array([-1.0, 1.0]), D.equidistant(11))
    model = N.build_surrogate(problem, ts, N.Architecture(u_mean=(2, 16)), seed=0)
    return problem, ts, model


def test_toy_training_converges():
    problem, ts, model = poisson_toy()
    result = N.train(model, problem, ts, N.Schedule(epochs=2000, learning_rate=5e-3, seed=0))
    assert result.final.mse_f < 1e-2
    totals = np.array([b.total for _, b in result.history[:-1]])
    windows = totals[: len(totals) // 5 * 5].reshape(-1, 5).mean(axis=1)
    assert np.all(np.diff(windows) <= 1e-4) and windows[-1] < 1e-3 * windows[0]


def test_zero_epochs_leave_model_unchanged():
    problem, ts, model = poisson_toy()
    before = [net.params.copy() for net in model.u_nets]
    result = N.train(model, problem, ts, N.Schedule(epochs=0))
    assert all(np.array_equal(a, n.params) for a, n in zip(before, model.u_nets))
    assert len(result.history) == 1


def test_history_every_log_interval():
    problem, ts, model = poisson_toy()
    result = N.train(model, problem, ts, N.Schedule(epochs=250, log_every=100))
    assert [e for e, _ in result.history] == [0, 100, 200, 250]


def test_training_deterministic(inverse_data):
    _, ts = inverse_data
    runs = []
    for _ in range(2):
        problem, model = inverse_model(ts, k_modes_dropout=0.1)
        N.train(model, problem, ts, N.Schedule(epochs=30, seed=4, batch_size=20, warmup_epochs=10))
        runs.append(np.concatenate([net.params for _, net in model.named_nets()]))
    assert runs[0].tobytes() == runs[1].tobytes()


def test_divergence_reports_epoch():
    problem, ts, model = poisson_toy()
    ts.u_snapshots = ts.u_snapshots * np.nan
    with pytest.raises(DivergenceError) as info:
        N.train(model, problem, ts, N.Schedule(epochs=5))
    assert info.value.epoch == 0


def test_warmup_ignores_residual(inverse_data):
    _, ts = inverse_data
    problem, model = inverse_model(ts)
    program = N.LossProgram(model, problem, ts)
    _, full = program.value_and_grad()
    _, data = program.value_and_grad(data_only=True)
    assert not np.allclose(full["u0"], data["u0"])
    saved = model.k_mean_net.params.copy()
    N.train(model, problem, ts, N.Schedule(epochs=1, warmup_epochs=1))
    assert not np.array_equal(saved, model.k_mean_net.params)


# -- prediction and statistics -------------------------------------------------------


def test_prediction_from_training_snapshot(inverse_data):
    _, ts = inverse_data
    problem, model = inverse_model(ts)
    p = N.predict_snapshots(model, problem, ts.k_snapshots[[4]], np.linspace(-1, 1, 5))
    assert np.max(np.abs(p.xi[0] - model.xi[4])) < 1e-10


def test_prediction_at_mean_reading(inverse_data):
    _, ts = inverse_data
    problem, model = inverse_model(ts)
    xs = np.linspace(-1, 1, 9)
    k, u = N.predict_snapshot(model, problem, model.pca.k0, xs)
    assert np.allclose(k, model.k_mean_net.forward(xs)[0], rtol=0, atol=1e-14)
    assert u.shape == (9,)


def test_zero_modes_zero_std(inverse_data):
    _, ts = inverse_data
    _, model = inverse_model(ts)
    zero = lambda net: Mlp(net.spec, np.zeros(net.spec.n_params))  # noqa: E731
    flat = N.SurrogateModel([model.u_nets[0], zero(model.u_nets[1])], model.basis, model.pca,
                            model.k_mean_net, zero(model.k_modes_net))
    st_ = N.statistics(flat, np.linspace(-1, 1, 7))
    assert np.all(st_.u_std == 0) and np.all(st_.k_std == 0)


@pytest.mark.parametrize("order", [1, 2])
def test_statistics_match_empirical(inverse_data, order):
    _, ts = inverse_data
    _, model = inverse_model(ts, order=order)
    xs = np.linspace(-1, 1, 21)
    a, b = N.statistics(model, xs), N.empirical_statistics(model, xs)
    for name in ("u_mean", "u_std", "k_mean", "k_std"):
        ref = getattr(b, name)
        assert np.linalg.norm(getattr(a, name) - ref) <= 0.01 * np.linalg.norm(ref) + 1e-12


def test_architecture_groups(inverse_data):
    _, ts = inverse_data
    _, model = inverse_model(ts, order=2)
    assert sum(net.n_outputs for net in model.u_nets) == len(model.basis)
    assert [net.n_outputs for net in model.u_nets] == model.basis.group_sizes()
    assert model.u_nets[0].spec.hidden_layers == 2 and model.u_nets[0].spec.width == 4


def test_bundle_round_trip(tmp_path, inverse_data):
    _, ts = inverse_data
    problem, model = inverse_model(ts, order=2)
    N.save_bundle(model, problem, tmp_path / "b", seed=3)
    back, prob2, manifest = N.load_bundle(tmp_path / "b")
    xs = np.linspace(-1, 1, 7)
    assert prob2 == problem and manifest["seed"] == 3
    assert np.allclose(N.statistics(back, xs).u_std, N.statistics(model, xs).u_std, rtol=1e-12)
    p1 = N.predict_snapshots(model, problem, ts.k_snapshots[:3], xs)
    p2 = N.predict_snapshots(back, problem, ts.k_snapshots[:3], xs)
    assert np.allclose(p1.u, p2.u, rtol=1e-12) and np.allclose(p1.k, p2.k, rtol=1e-12)


def test_deterministic_bundle_round_trip(tmp_path):
    problem, ts, model = poisson_toy()
    N.save_bundle(model, problem, tmp_path / "d")
    back, _, _ = N.load_bundle(tmp_path / "d")
    assert back.m == 0
    assert np.array_equal(N.u_modes(back, [0.1]), N.u_modes(model, [0.1]))


def test_single_candidate_fit_equals_plain_training():
    problem, ts, _ = poisson_toy()
    arch = N.Architecture(u_mean=(2, 16))
    sched = N.Schedule(epochs=50, seed=0)
    model, result = N.fit_surrogate(problem, ts, arch, seed=3, schedule=sched, restarts=1, trial_epochs=10)
    plain = N.build_surrogate(problem, ts, arch, seed=3)
    N.train(plain, problem, ts, sched)
    assert model.u_nets[0].params.tobytes() == plain.u_nets[0].params.tobytes()


def test_restarts_keep_lowest_trial_loss():
    problem, ts, _ = poisson_toy()
    arch = N.Architecture(u_mean=(2, 4))
    sched = N.Schedule(epochs=30, seed=0)
    trial = N.Schedule(epochs=10, seed=0)
    scores = []
    for j in range(3):
        m = N.build_surrogate(problem, ts, arch, seed=N.candidate_seed(5, j))
        scores.append(N.train(m, problem, ts, trial).final.total)
    model, _ = N.fit_surrogate(problem, ts, arch, seed=5, schedule=sched, restarts=3, trial_epochs=10)
    best = N.build_surrogate(problem, ts, arch, seed=N.candidate_seed(5, int(np.argmin(scores))))
    N.train(best, problem, ts, sched)
    assert model.u_nets[0].params.tobytes() == best.u_nets[0].params.tobytes()
    assert len({N.candidate_seed(5, j) for j in range(3)}) == 3
