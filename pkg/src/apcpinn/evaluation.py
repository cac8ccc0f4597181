"""Relative errors of a trained surrogate against ground-truth ensembles."""

import numpy as np

from . import nnapc
from .datasets import eval_grid
from .metrics import mode_errors, relative_l2, relative_l2_rows
from .reduction import project_modes

ERROR_COLUMNS = ("k_mean", "k_std", "k_pred", "u_mean", "u_std", "u_pred")


def reference_k_modes(model, k_values):
    """KL modes of the training k trajectories: (1/N) sum_s xi_s,l k_s(x) / sqrt(lambda_l)."""
    xi = model.xi
    return (xi / model.sqrt_eigenvalues()).T @ k_values / xi.shape[0]


def _readings(problem, ts, ensemble):
    if problem.kind == "forward_poisson":
        return ensemble.read("f", ts.collocation_xs)
    return ensemble.read("k", ts.k_sensor_xs)


def evaluate_model(model, problem, ts, train_truth, test_truth=None, xs=None):
    """Error dictionary: mean/std vs the training ensemble, predictions vs test snapshots.

    Stochastic kinds also report sign-aligned errors of every learned mode
    against modes projected from the training trajectories.  Deterministic
    kinds report the curve error under both ``*_mean`` and ``*_pred`` and a NaN
    std error.
    """
    xs = eval_grid() if xs is None else xs
    out = {}
    stats = nnapc.statistics(model, xs)
    u_ref = train_truth.read("u", xs)
    has_k = stats.k_mean is not None and train_truth.k is not None
    k_ref = train_truth.read("k", xs) if has_k else None
    if not problem.stochastic:
        out["u_mean"] = out["u_pred"] = relative_l2(stats.u_mean, u_ref[0])
        out["u_std"] = float("nan")
        if has_k:
            out["k_mean"] = out["k_pred"] = relative_l2(stats.k_mean, k_ref[0])
            out["k_std"] = float("nan")
        return out
    out["u_mean"] = relative_l2(stats.u_mean, u_ref.mean(axis=0))
    out["u_std"] = relative_l2(stats.u_std, u_ref.std(axis=0))
    ref_u_modes = project_modes(u_ref, model.basis)
    out["u_modes"], out["u_mode_flips"] = mode_errors(nnapc.u_modes(model, xs), ref_u_modes)
    if has_k:
        out["k_mean"] = relative_l2(stats.k_mean, k_ref.mean(axis=0))
        out["k_std"] = relative_l2(stats.k_std, k_ref.std(axis=0))
        if model.m > 0:
            out["k_modes"], out["k_mode_flips"] = mode_errors(
                nnapc.k_modes(model, xs), reference_k_modes(model, k_ref))
    if test_truth is not None:
        pred = nnapc.predict_snapshots(model, problem, _readings(problem, ts, test_truth), xs)
        out["u_pred"] = float(np.mean(relative_l2_rows(pred.u, test_truth.read("u", xs))))
        if pred.k is not None and test_truth.k is not None:
            out["k_pred"] = float(np.mean(relative_l2_rows(pred.k, test_truth.read("k", xs))))
    out["n_test"] = 0 if test_truth is None else len(test_truth)
    return out
