"""Experiment pipeline: generate -> train -> predict -> evaluate, sweeps, reports."""

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import active, datasets, nnapc
from .config import ExperimentConfig, preset
from .errors import ApcPinnError, ArtifactMismatchError, ConfigurationError
from .evaluation import evaluate_model
from .fields import KernelSpec

REPORT_VERSION = 1
SWEEP_PARAMETERS = ("n_f_sensors", "n_k_sensors", "lambda", "net_shape")


ACTIVE_PRESETS = ("dropout_deterministic", "active_stochastic")


def problem_spec(config):
    return nnapc.ProblemSpec(kind=config.kind, forcing=config.forcing)


@lru_cache(maxsize=16)
def _cached_ensembles(kind, sigma, lc, mean, forcing, solution, n_train, n_test, seed, grid_points):
    kernel = KernelSpec(sigma, lc)
    if kind == "forward_poisson":
        make = lambda n, stream: datasets.forward_ensemble(  # noqa: E731
            n, seed, stream, kernel, mean, grid_points)
    elif kind == "inverse_elliptic":
        make = lambda n, stream: datasets.inverse_ensemble(  # noqa: E731
            n, seed, stream, kernel, mean, forcing, grid_points)
    elif kind == "deterministic_poisson":
        truth = datasets.deterministic_poisson_truth(forcing, solution, grid_points)
        return truth, truth
    else:
        truth = datasets.deterministic_elliptic_truth(lambda x: np.exp(mean(x)), forcing, grid_points)
        return truth, truth
    return make(n_train, datasets.TRAIN_STREAM), make(n_test, datasets.TEST_STREAM)


def generate(config):
    """Training and held-out ground truth (disjoint RNG streams)."""
    return _cached_ensembles(config.kind, config.sigma, config.lc, config.mean, config.forcing,
                             config.solution, config.n_train, config.n_test, config.seed,
                             config.grid_points)


def sensor_layout(config):
    """``(u_xs, collocation_xs, k_xs)`` for a configuration."""
    collocation = datasets.equidistant(config.n_collocation)
    if config.kind in ("forward_poisson", "deterministic_poisson"):
        return np.array([-1.0, 1.0]), collocation, np.zeros(0)
    if config.k_sensor_xs is not None:
        k_xs = np.asarray(config.k_sensor_xs, dtype=np.float64)
    else:
        k_xs = datasets.equidistant(config.n_k_sensors)
    return datasets.equidistant(config.n_u_sensors), collocation, k_xs


def training_data(config, truth, book=None):
    u_xs, col, k_xs = sensor_layout(config)
    weights = None
    if book is not None:
        k_xs, weights = np.asarray(book.locations), book.weights
    return datasets.training_set(config.kind, truth, u_xs, col, k_xs, weights)


def schedule(config):
    return nnapc.Schedule(epochs=config.effective_epochs, learning_rate=config.learning_rate,
                          seed=config.seed, batch_size=config.batch_size,
                          warmup_epochs=config.effective_warmup)


def fit(config, truth, ts=None):
    """Build and train a surrogate; returns ``(model, training set, train result)``."""
    problem = problem_spec(config)
    ts = ts if ts is not None else training_data(config, truth)
    model, result = nnapc.fit_surrogate(problem, ts, config.arch, config.order, config.energy_threshold,
                                        config.seed, schedule(config), config.restarts,
                                        config.effective_trial)
    return model, ts, result


@dataclass
class EvalReport:
    config_hash: str
    preset: str
    errors: dict
    u_mode_errors: list = field(default_factory=list)
    k_mode_errors: list = field(default_factory=list)
    mode_flips: dict = field(default_factory=dict)
    n_test: int = 0
    final_loss: dict = field(default_factory=dict)
    runtime: float = 0.0

    def to_dict(self, include_runtime=True):
        d = {
            "format_version": REPORT_VERSION,
            "config_hash": self.config_hash,
            "preset": self.preset,
            "errors": self.errors,
            "u_mode_errors": self.u_mode_errors,
            "k_mode_errors": self.k_mode_errors,
            "mode_flips": self.mode_flips,
            "mode_sign_alignment": True,
            "n_test": self.n_test,
            "final_loss": self.final_loss,
        }
        if include_runtime:
            d["runtime"] = self.runtime
        return d

    def to_json(self, include_runtime=True):
        return json.dumps(self.to_dict(include_runtime), sort_keys=True, indent=2,
                          default=_finite_or_null)

    def write(self, out):
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "report.json"), "w") as fh:
            fh.write(self.to_json())
        with open(os.path.join(out, "report.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["quantity", "relative_l2"])
            for key in sorted(self.errors):
                value = self.errors[key]
                w.writerow([key, "" if value is None else repr(float(value))])
            for i, e in enumerate(self.u_mode_errors):
                w.writerow([f"u_mode_{i}", repr(float(e))])
            for i, e in enumerate(self.k_mode_errors):
                w.writerow([f"k_mode_{i}", repr(float(e))])

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        if d.get("format_version") != REPORT_VERSION:
            raise ConfigurationError(f"{path}: unsupported report version")
        return cls(config_hash=d["config_hash"], preset=d["preset"], errors=d["errors"],
                   u_mode_errors=d["u_mode_errors"], k_mode_errors=d["k_mode_errors"],
                   mode_flips=d["mode_flips"], n_test=d["n_test"], final_loss=d["final_loss"],
                   runtime=d.get("runtime", 0.0))


def _finite_or_null(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _clean(value):
    value = float(value)
    return value if np.isfinite(value) else None


def make_report(config, model, ts, train_truth, test_truth, final_loss=None, runtime=0.0):
    problem = problem_spec(config)
    test = test_truth if problem.stochastic else None
    raw = evaluate_model(model, problem, ts, train_truth, test)
    errors = {k: _clean(v) for k, v in raw.items() if np.isscalar(v) and k != "n_test"}
    return EvalReport(
        config_hash=config.config_hash(), preset=config.preset, errors=errors,
        u_mode_errors=[float(e) for e in raw.get("u_modes", [])],
        k_mode_errors=[float(e) for e in raw.get("k_modes", [])],
        mode_flips={"u": raw.get("u_mode_flips", []), "k": raw.get("k_mode_flips", [])},
        n_test=int(raw.get("n_test", 0)),
        final_loss={} if final_loss is None else final_loss.to_dict(),
        runtime=runtime,
    )


def write_plot_data(out, config, model, ts, train_truth, test_truth, n_overlays=3):
    """Mean/std curves, mode curves and prediction overlays on the evaluation grid."""
    problem = problem_spec(config)
    xs = datasets.eval_grid()
    st = nnapc.statistics(model, xs)
    u_ref = train_truth.read("u", xs)
    cols = {"x": xs, "u_mean": st.u_mean, "u_mean_ref": u_ref.mean(axis=0),
            "u_std": st.u_std, "u_std_ref": u_ref.std(axis=0)}
    if st.k_mean is not None and train_truth.k is not None:
        k_ref = train_truth.read("k", xs)
        cols.update(k_mean=st.k_mean, k_mean_ref=k_ref.mean(axis=0), k_std=st.k_std,
                    k_std_ref=k_ref.std(axis=0))
    _write_columns(os.path.join(out, "curves.csv"), cols)
    modes = {"x": xs}
    for i, curve in enumerate(nnapc.u_modes(model, xs)):
        modes[f"u_mode_{i}"] = curve
    for i, curve in enumerate(nnapc.k_modes(model, xs)):
        modes[f"k_mode_{i}"] = curve
    _write_columns(os.path.join(out, "modes.csv"), modes)
    if problem.stochastic:
        rows = test_truth.rows(slice(0, n_overlays))
        readings = (rows.read("f", ts.collocation_xs) if problem.kind == "forward_poisson"
                    else rows.read("k", ts.k_sensor_xs))
        pred = nnapc.predict_snapshots(model, problem, readings, xs)
        over = {"x": xs}
        for i in range(len(rows)):
            over[f"u_pred_{i}"], over[f"u_true_{i}"] = pred.u[i], rows.read("u", xs)[i]
            if pred.k is not None:
                over[f"k_pred_{i}"], over[f"k_true_{i}"] = pred.k[i], rows.read("k", xs)[i]
        _write_columns(os.path.join(out, "predictions.csv"), over)


def _write_columns(path, cols):
    names = list(cols)
    data = np.column_stack([np.asarray(cols[n], dtype=np.float64) for n in names])
    np.savetxt(path, data, delimiter=",", header=",".join(names), comments="", fmt="%.17g")


@dataclass
class RunResult:
    config: ExperimentConfig
    report: EvalReport = None
    model: object = None
    training_set: object = None
    log: object = None


def _staged(stage, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ApcPinnError as exc:
        exc.stage = stage
        raise


def run_config(config, out=None):
    """Generate, train and evaluate one configuration (a single training run)."""
    start = time.perf_counter()
    train_truth, test_truth = _staged("generate", generate, config)
    model, ts, result = _staged("train", fit, config, train_truth)
    report = _staged("evaluate", make_report, config, model, ts, train_truth, test_truth,
                     result.final, 0.0)
    report.runtime = time.perf_counter() - start
    if out is not None:
        write_artifacts(out, config, model, ts, train_truth, test_truth, report)
    return RunResult(config=config, report=report, model=model, training_set=ts)


def write_artifacts(out, config, model, ts, train_truth, test_truth, report):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as fh:
        fh.write(config.to_json())
    nnapc.save_bundle(model, problem_spec(config), os.path.join(out, "model"),
                      config_hash=config.config_hash(), schedule=schedule(config).__dict__,
                      seed=config.seed, grid_points=config.grid_points,
                      fd_scheme="second-order central, midpoint flux",
                      n_collocation=config.n_collocation,
                      l2_scope="per network, summed")
    report.write(out)
    write_plot_data(out, config, model, ts, train_truth, test_truth)


def run_preset(name, overrides=None, seed=None, out=None):
    """Run a named preset; the placement presets run the active-learning loop."""
    overrides = dict(overrides or {})
    if seed is not None:
        overrides["seed"] = seed
    config = preset(name, **overrides)
    if name in ACTIVE_PRESETS:
        return run_active(config, out)
    return run_config(config, out)


def active_setup(config):
    train_truth, test_truth = generate(config)
    u_xs, col, k_xs = sensor_layout(config)
    problem = problem_spec(config)
    return active.ActiveSetup(
        problem=problem, truth=train_truth, u_xs=u_xs, collocation_xs=col,
        book=active.SensorBook(list(k_xs)), arch=config.arch, schedule=schedule(config),
        test_truth=test_truth if problem.stochastic else None, order=config.order,
        energy_threshold=config.energy_threshold, seed=config.seed,
        restarts=config.restarts, trial_epochs=config.effective_trial,
    )


def run_active(config, out=None, on_step=None):
    settings = active.ActiveSettings(iterations=config.iterations, rho=config.rho,
                                     mc_passes=config.mc_passes, patience=config.patience)
    setup = _staged("generate", active_setup, config)
    log = _staged("active-learn", active.active_learning_loop, setup, settings, on_step)
    log.config_hash = config.config_hash()
    if out is not None:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "config.json"), "w") as fh:
            fh.write(config.to_json())
        log.to_csv(os.path.join(out, "active_log.csv"))
        log.to_json(os.path.join(out, "active_log.json"))
    return RunResult(config=config, log=log)


# -- sweeps ---------------------------------------------------------------------


def sweep_config(base, parameter, value):
    if parameter == "n_f_sensors":
        return base.with_overrides(n_collocation=int(value))
    if parameter == "n_k_sensors":
        return base.with_overrides(n_k_sensors=int(value))
    if parameter == "lambda":
        return base.with_overrides(arch={"l2_lambda": float(value)})
    if parameter == "net_shape":
        layers, width = (int(v) for v in value)
        return base.with_overrides(arch={"u_modes": [layers, width], "k_modes": [layers, width]})
    raise ConfigurationError(f"unknown sweep parameter {parameter!r}; choose from {SWEEP_PARAMETERS}")


def _sweep_cell(args):
    base, parameter, value, out = args
    try:
        report = run_config(sweep_config(base, parameter, value), out).report
        return {"u_pred": report.errors.get("u_pred"), "k_pred": report.errors.get("k_pred"),
                "status": "ok", "error": ""}
    except Exception as exc:  # a failed cell is recorded, the sweep goes on
        return {"u_pred": None, "k_pred": None, "status": "failed",
                "error": f"{type(exc).__name__}: {exc}"}


def sweep(parameter, values, base, workers=1, out=None):
    """One isolated run per value; returns rows ``{value, u_pred, k_pred, status, error}``."""
    values = list(values)
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigurationError(f"unknown sweep parameter {parameter!r}; choose from {SWEEP_PARAMETERS}")
    outs = [None if out is None else os.path.join(out, f"cell_{i}") for i in range(len(values))]
    jobs = [(base, parameter, v, o) for v, o in zip(values, outs)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_sweep_cell, jobs))
    else:
        cells = [_sweep_cell(j) for j in jobs]
    rows = [{"parameter": parameter, "value": v, **c} for v, c in zip(values, cells)]
    if out is not None:
        os.makedirs(out, exist_ok=True)
        write_sweep_csv(os.path.join(out, "sweep.csv"), rows)
    return rows


def write_sweep_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "value", "u_pred", "k_pred", "status", "error"])
        for r in rows:
            w.writerow([r["parameter"], json.dumps(r["value"]),
                        "" if r["u_pred"] is None else repr(r["u_pred"]),
                        "" if r["k_pred"] is None else repr(r["k_pred"]), r["status"], r["error"]])


# -- dropout versus regular networks --------------------------------------------


def overfit_study(config, seeds, xs=None):
    """k curves of dropout and regular runs over ``seeds`` and their mean pairwise distances.

    The regular runs use the same architecture with dropout and the L2 term
    switched off.
    """
    xs = datasets.eval_grid() if xs is None else xs
    truth, _ = generate(config)
    plain = config.with_overrides(arch={"u_mean_dropout": 0.0, "k_mean_dropout": 0.0,
                                        "k_modes_dropout": 0.0, "l2_lambda": 0.0})
    curves = {"dropout": [], "regular": []}
    for label, cfg in (("dropout", config), ("regular", plain)):
        for s in seeds:
            model, _, _ = fit(cfg.with_overrides(seed=int(s)), truth)
            curves[label].append(nnapc.statistics(model, xs).k_mean)
    return {label: np.array(c) for label, c in curves.items()}, {
        label: mean_pairwise_distance(np.array(c)) for label, c in curves.items()}


def mean_pairwise_distance(curves):
    n = len(curves)
    d = [np.linalg.norm(curves[i] - curves[j]) for i in range(n) for j in range(i + 1, n)]
    return float(np.mean(d)) if d else 0.0


# -- artifact combination --------------------------------------------------------


def check_hash(expected, artifact_hash, what):
    if artifact_hash != expected:
        raise ArtifactMismatchError(
            f"{what} was produced by config {artifact_hash[:12]}, current config is {expected[:12]}")


def combine_reports(reports):
    """Table of reports that all stem from one configuration hash."""
    reports = list(reports)
    if not reports:
        raise ConfigurationError("nothing to combine")
    for r in reports[1:]:
        check_hash(reports[0].config_hash, r.config_hash, "report")
    keys = sorted({k for r in reports for k in r.errors})
    return keys, [[r.errors.get(k) for k in keys] for r in reports]
