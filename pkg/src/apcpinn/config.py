"""Experiment configuration, presets and the configuration hash."""

import hashlib
import json
from dataclasses import asdict, dataclass, fields

from .errors import ConfigurationError
from .fields import DEFAULT_GRID_POINTS
from .nnapc import KINDS, Architecture, Profile

CONFIG_VERSION = 1


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment.  ``mean`` is the GP mean of the random input (forcing for
    the forward problem, log k otherwise); deterministic elliptic runs use
    ``k = exp(mean)`` and deterministic Poisson runs take ``solution`` as truth.
    Sensor sites are equidistant unless listed explicitly.
    """

    kind: str = "inverse_elliptic"
    preset: str = ""
    sigma: float = 0.1
    lc: float = 1.0
    mean: Profile = Profile(amplitude=0.2, frequency=1.5)
    forcing: Profile = Profile(constant=10.0)
    solution: Profile = None
    n_k_sensors: int = 4
    n_u_sensors: int = 7
    n_collocation: int = 21
    k_sensor_xs: tuple = None
    n_train: int = 1000
    n_test: int = 500
    order: int = 1
    energy_threshold: float = 0.99
    arch: Architecture = Architecture(l2_lambda=5e-4)
    learning_rate: float = 1e-3
    epochs: int = 50000
    epoch_scale: float = 1.0
    warmup_epochs: int = 0
    restarts: int = 1
    trial_epochs: int = 0
    batch_size: int = 0
    seed: int = 0
    grid_points: int = DEFAULT_GRID_POINTS
    iterations: int = 15
    rho: float = 0.03
    mc_passes: int = 10000
    patience: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown problem kind {self.kind!r}")
        counts = {"n_u_sensors": self.n_u_sensors, "n_collocation": self.n_collocation,
                  "n_train": self.n_train, "n_test": self.n_test, "grid_points": self.grid_points,
                  "mc_passes": self.mc_passes}
        for name, value in counts.items():
            if not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.kind in ("inverse_elliptic", "deterministic_elliptic") and self.n_k_sensors < 1:
            raise ConfigurationError("n_k_sensors must be positive")
        if not (self.sigma > 0 and self.lc > 0):
            raise ConfigurationError("kernel needs sigma > 0 and lc > 0")
        if self.order < 0 or not 0 < self.energy_threshold <= 1:
            raise ConfigurationError("invalid order or energy threshold")
        if (self.epochs < 0 or self.epoch_scale < 0 or self.learning_rate <= 0 or self.warmup_epochs < 0
                or self.restarts < 1 or self.trial_epochs < 0):
            raise ConfigurationError("invalid training schedule")
        if self.iterations < 0 or self.rho < 0 or self.patience < 0:
            raise ConfigurationError("invalid active-learning settings")
        if self.k_sensor_xs is not None and any(abs(x) > 1 for x in self.k_sensor_xs):
            raise ConfigurationError("k-sensor sites must lie in [-1, 1]")

    @property
    def effective_epochs(self):
        return int(round(self.epochs * self.epoch_scale))

    @property
    def effective_warmup(self):
        return min(self.effective_epochs, int(round(self.warmup_epochs * self.epoch_scale)))

    @property
    def effective_trial(self):
        return min(self.effective_epochs, int(round(self.trial_epochs * self.epoch_scale)))

    def to_dict(self):
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Profile):
                v = asdict(v)
            elif isinstance(v, Architecture):
                v = v.to_dict()
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("format_version", None)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown configuration keys {sorted(unknown)}")
        try:
            for key in ("mean", "forcing", "solution"):
                if isinstance(d.get(key), dict):
                    d[key] = Profile(**d[key])
            if isinstance(d.get("arch"), dict):
                d["arch"] = Architecture.from_dict(d["arch"])
            if isinstance(d.get("k_sensor_xs"), list):
                d["k_sensor_xs"] = tuple(float(x) for x in d["k_sensor_xs"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None

    def to_json(self):
        return json.dumps({"format_version": CONFIG_VERSION, **self.to_dict()},
                          sort_keys=True, indent=2)

    def config_hash(self):
        """sha256 of the canonical JSON form (sorted keys, no whitespace)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, **overrides):
        """Copy with fields replaced; ``arch`` may be a partial dict."""
        if not overrides:
            return self
        d = self.to_dict()
        for key, value in overrides.items():
            if key == "arch" and isinstance(value, dict):
                d["arch"] = {**d["arch"], **value}
            else:
                d[key] = value
        return ExperimentConfig.from_dict(d)


def _presets():
    return {
        "forward_poisson": ExperimentConfig(
            kind="forward_poisson", preset="forward_poisson", sigma=1.0, lc=0.5,
            mean=Profile(amplitude=10.0, frequency=1.0), forcing=Profile(),
            n_k_sensors=0, n_u_sensors=2, n_collocation=13,
            arch=Architecture(l2_lambda=1e-3), epochs=20000, restarts=4, trial_epochs=2000,
        ),
        "inverse_elliptic": ExperimentConfig(preset="inverse_elliptic", warmup_epochs=2000),
        "dropout_deterministic": ExperimentConfig(
            kind="deterministic_elliptic", preset="dropout_deterministic",
            n_k_sensors=5, n_u_sensors=7, n_collocation=21, n_train=1, n_test=1,
            arch=Architecture(u_mean=(2, 4), k_mean=(6, 100), k_mean_dropout=0.01, l2_lambda=1e-6),
            epochs=30000, warmup_epochs=2000,
        ),
        "dropout_poisson": ExperimentConfig(
            kind="deterministic_poisson", preset="dropout_poisson",
            forcing=Profile(amplitude=9.0 * 3.141592653589793 ** 2 / 4.0, frequency=1.5),
            solution=Profile(amplitude=1.0, frequency=1.5),
            n_k_sensors=0, n_u_sensors=2, n_collocation=6, n_train=1, n_test=1,
            arch=Architecture(u_mean=(6, 100), u_mean_dropout=0.01, l2_lambda=1e-6), epochs=30000,
        ),
        "active_stochastic": ExperimentConfig(
            preset="active_stochastic", lc=0.5, n_k_sensors=3, n_u_sensors=7, n_collocation=21,
            arch=Architecture(k_modes=(4, 128), k_modes_dropout=0.01, l2_lambda=5e-4),
            learning_rate=5e-4, epochs=50000, warmup_epochs=2000, patience=2,
        ),
    }


PRESETS = tuple(_presets())


def preset(name, **overrides):
    table = _presets()
    if name not in table:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(table)}")
    return table[name].with_overrides(**overrides)


def load_config(path):
    """Read a JSON config: a ``preset`` name plus overrides, or a full field set."""
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigurationError("config file must hold a JSON object")
    d.pop("format_version", None)
    name = d.pop("preset", "")
    if name:
        return preset(name, **d)
    return ExperimentConfig.from_dict(d)
