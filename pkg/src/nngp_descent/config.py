"""Experiment configuration: a flat key-value text format with a JSON twin.

The flat format is one ``key = value`` pair per line (values are JSON
fragments, so lists are written ``N_list = [5, 10, 25]``), with ``#``
comments.  Files ending in ``.json`` hold the same keys as a JSON object.
Both round-trip losslessly through :meth:`ExperimentConfig.to_flat` /
``to_json``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError

KINDS = ("spectrum", "descent", "variance-scaling", "limits")
ACTIVATIONS = ("identity", "relu", "tanh", "erf")
TEACHERS = ("linear", "zero")
OUTPUT_ROOT_ENV = "NNGP_DESCENT_OUT"


@dataclass
class ExperimentConfig:
    kind: str = "spectrum"
    # model
    L: int = 2
    activation: str = "identity"
    teacher: str = "linear"
    n: int = 200
    d: int = 400
    N: int | None = 300
    N_list: list = field(default_factory=list)
    sigma_eps: float = 0.0
    sigma_tau: float = 1.0
    # sampling
    trials: int = 20
    n_test: int = 200
    seed: int = 0
    threads: int = 1
    # solver knobs
    y0: float = 1e-3
    grid_points: int = 2000
    max_iters: int = 10_000
    damping: float = 0.5
    tol: float = 1e-9
    quad_order: int = 64
    g2_ceiling: float = 1e6
    pinv_rcond: float = 1e-10
    cross_kernel: str = "sampled"
    abc_mode: str = "closed-form"
    # endpoints probed by the limits experiment
    gamma_under: float = 100.0
    gamma_over: float = 0.01
    # output
    histogram_bins: str | int = "fd"
    out_dir: str = "."
    output_format: str = "csv"

    def validate(self) -> "ExperimentConfig":
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.teacher not in TEACHERS:
            raise ConfigError(f"teacher must be one of {TEACHERS}")
        if self.L < 2:
            raise ConfigError("depth L must be at least 2")
        if self.n < 1 or self.d < 1:
            raise ConfigError("n and d must be positive")
        if self.sigma_eps < 0 or self.sigma_tau < 0:
            raise ConfigError("noise levels must be non-negative")
        if self.trials < 1:
            raise ConfigError("trials must be positive")
        if self.kind == "variance-scaling" and self.trials < 10:
            raise ConfigError("variance scaling needs trials >= 10 for a "
                              "variance estimate")
        if self.kind == "descent" and not self.N_list:
            raise ConfigError("descent experiments require N_list")
        if self.kind == "spectrum" and not self.N and not self.N_list:
            raise ConfigError("spectrum experiments require N")
        if self.threads < 1:
            raise ConfigError("threads must be positive")
        if not (0 < self.damping <= 1):
            raise ConfigError("damping must lie in (0, 1]")
        if self.y0 <= 0 or self.tol <= 0:
            raise ConfigError("y0 and tol must be positive")
        if self.cross_kernel not in ("sampled", "exact"):
            raise ConfigError("cross_kernel must be 'sampled' or 'exact'")
        if self.abc_mode not in ("closed-form", "monte-carlo"):
            raise ConfigError("abc_mode must be 'closed-form' or 'monte-carlo'")
        if self.output_format not in ("csv", "json"):
            raise ConfigError("output_format must be 'csv' or 'json'")
        return self

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_flat(self) -> str:
        lines = [f"{f.name} = {json.dumps(getattr(self, f.name))}"
                 for f in fields(self)]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    @staticmethod
    def from_dict(data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(ExperimentConfig)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = ExperimentConfig(**data)
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from exc
        return cfg.validate()

    @staticmethod
    def parse_flat(text: str) -> "ExperimentConfig":
        data = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            try:
                data[key.strip()] = json.loads(value.strip())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"line {lineno}: bad value {value.strip()!r}: {exc}")
        return ExperimentConfig.from_dict(data)

    @staticmethod
    def load(path: str) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if str(path).endswith(".json"):
            try:
                data = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"bad JSON config {path}: {exc}") from exc
            if not isinstance(data, dict):
                raise ConfigError("JSON config must be an object")
            return ExperimentConfig.from_dict(data)
        return ExperimentConfig.parse_flat(text)
