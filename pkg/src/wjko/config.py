"""Run configuration: parsing and validation of TOML / JSON problem files.

Paths inside a config are resolved relative to the config file. Every
validation error is a :class:`ConfigError` whose message starts with the
dotted key at fault (``scheme.k``, ``problem.rho0`` ...).
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .control import ControlParametrization, CostFunctional, OptimizerConfig, decode
from .jko import InnerConfig, SchemeConfig
from .kernels import Kernel, kernel_from_spec
from .measures import ControlCurve, DiscreteMeasure, PIECEWISE_CONSTANT
from .testfunctions import SpaceBump, TestFunction, TimeBump

try:  # Python >= 3.11
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as _toml

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config", "bundled_configs", "resolve_config_path"]


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


@dataclass
class VerifySettings:
    evi: bool = True
    stability_shift: float = 0.1
    lambda_pairs: int = 20
    residual_k: tuple = ()
    test_functions: tuple = ()
    seed: int = 0


@dataclass
class OracleSettings:
    k_list: tuple = (8, 16, 32, 64)
    k_ref: int = 512
    min_order: float = 0.8


@dataclass
class RunConfig:
    name: str
    W: Kernel
    V: Kernel
    rho0: DiscreteMeasure
    scheme: SchemeConfig
    M: float
    control: ControlCurve | None = None
    theta0: ControlParametrization | None = None
    optimizer: OptimizerConfig | None = None
    cost: CostFunctional | None = None
    out_dir: Path = Path("out")
    formats: tuple = ("csv", "json")
    emit_verify: bool = True
    verify: VerifySettings = field(default_factory=VerifySettings)
    oracle: OracleSettings = field(default_factory=OracleSettings)
    base_dir: Path = Path(".")

    @property
    def nu(self) -> ControlCurve:
        """The control used for plain simulation (decoded start for parametrized controls)."""
        return self.control if self.control is not None else decode(self.theta0)


BUNDLED_DIR = Path(__file__).resolve().parent / "configs"


def bundled_configs() -> list[str]:
    """Names of the reference configs shipped with the package."""
    return sorted(p.name for p in BUNDLED_DIR.glob("*.toml"))


def resolve_config_path(path) -> tuple[Path, bool]:
    """``(path, bundled)``: a missing path whose file name is a bundled config resolves to it."""
    path = Path(path)
    if not path.exists() and (BUNDLED_DIR / path.name).is_file():
        return BUNDLED_DIR / path.name, True
    return path, False


def load_config(path, seed: int | None = None) -> RunConfig:
    """Read a TOML (or ``.json``) config.

    Relative paths inside the file resolve against its directory, except the
    output directory of a bundled config, which resolves against the working
    directory so runs never write into the installed package.
    """
    path, bundled = resolve_config_path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror or exc}") from None
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(raw.decode())
        else:
            data = _toml.loads(raw.decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"config: cannot parse {path}: {exc}") from None
    cfg = parse_config(data, path.parent, path.stem, seed)
    if bundled:
        out = _section(data, "output", required=False).get("dir", "out")
        cfg.out_dir = Path(out) if Path(out).is_absolute() else Path.cwd() / out
    return cfg


def _section(data: dict, key: str, required: bool = True) -> dict:
    val = data.get(key.split(".")[-1])
    if val is None:
        if required:
            raise ConfigError(f"{key}: missing section")
        return {}
    if not isinstance(val, dict):
        raise ConfigError(f"{key}: must be a table")
    return val


def _num(sec: dict, key: str, prefix: str, default: Any = None, kind=float, positive=False, nonneg=False):
    if key not in sec:
        if default is None:
            raise ConfigError(f"{prefix}.{key}: missing")
        return default
    val = sec[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{prefix}.{key}: expected a number, got {val!r}")
    if kind is int and (not isinstance(val, int)):
        raise ConfigError(f"{prefix}.{key}: expected an integer, got {val!r}")
    val = kind(val)
    if not math.isfinite(val):
        raise ConfigError(f"{prefix}.{key}: must be finite")
    if positive and not val > 0:
        raise ConfigError(f"{prefix}.{key}: must be > 0, got {val!r}")
    if nonneg and val < 0:
        raise ConfigError(f"{prefix}.{key}: must be >= 0, got {val!r}")
    return val


def _kernel(sec: dict, key: str) -> Kernel:
    if not isinstance(sec, dict):
        raise ConfigError(f"{key}: must be a table with a 'kind'")
    try:
        return kernel_from_spec(dict(sec))
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _sample_rho0(spec: dict, dim: int) -> DiscreteMeasure:
    key = "problem.rho0.sampler"
    if "seed" not in spec:
        raise ConfigError(f"{key}.seed: a seed is mandatory when a sampler is used")
    seed = _num(spec, "seed", key, kind=int, nonneg=True)
    n = _num(spec, "n", key, kind=int, positive=True)
    rng = np.random.default_rng(seed)
    kind = spec.get("kind")
    if kind == "gaussian":
        centers = np.asarray(spec.get("centers", [[0.0] * dim]), dtype=float).reshape(-1, dim)
        scale = _num(spec, "scale", key, 1.0, positive=True)
        labels = np.arange(n) % centers.shape[0]
        pts = centers[np.sort(labels)] + scale * rng.normal(size=(n, dim))
    elif kind == "uniform_ball":
        center = np.asarray(spec.get("center", [0.0] * dim), dtype=float).reshape(dim)
        radius = _num(spec, "radius", key, 1.0, positive=True)
        v = rng.normal(size=(n, dim))
        v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300)
        pts = center + radius * v * rng.random((n, 1)) ** (1.0 / dim)
    elif kind == "uniform_box":
        low = np.broadcast_to(np.asarray(spec.get("low", -1.0), dtype=float), (dim,))
        high = np.broadcast_to(np.asarray(spec.get("high", 1.0), dtype=float), (dim,))
        if np.any(high <= low):
            raise ConfigError(f"{key}.high: must exceed {key}.low componentwise")
        pts = rng.uniform(low, high, size=(n, dim))
    else:
        raise ConfigError(f"{key}.kind: expected 'gaussian', 'uniform_ball' or 'uniform_box', got {kind!r}")
    return DiscreteMeasure.uniform(pts)


def _rho0(sec: dict, dim: int, base: Path) -> DiscreteMeasure:
    from .io import read_measure

    key = "problem.rho0"
    sources = [s for s in ("points", "file", "sampler") if s in sec]
    if len(sources) != 1:
        raise ConfigError(f"{key}: exactly one source of 'points', 'file' or 'sampler' is required, got {sources}")
    try:
        if "points" in sec:
            pts = np.asarray(sec["points"], dtype=float).reshape(-1, dim)
            if "weights" in sec:
                mu = DiscreteMeasure(pts, sec["weights"], dim)
            else:
                mu = DiscreteMeasure.uniform(pts)
        elif "file" in sec:
            mu = read_measure(base / sec["file"])
        else:
            mu = _sample_rho0(sec["sampler"], dim)
    except ConfigError:
        raise
    except (ValueError, TypeError, OSError) as exc:
        raise ConfigError(f"{key}: {exc}") from None
    if mu.dim != dim:
        raise ConfigError(f"{key}: dimension {mu.dim} differs from problem.dim={dim}")
    if not mu.is_probability():
        raise ConfigError(f"{key}: weights must sum to 1 (got {mu.total_mass!r})")
    return mu


def _scheme(sec: dict) -> SchemeConfig:
    T = sec.get("T")
    k = sec.get("k")
    if isinstance(k, bool) or not isinstance(k, int) or k < 1:
        raise ConfigError(f"scheme.k: must be an integer >= 1 so that tau = scheme.T / scheme.k > 0, got {k!r}")
    if isinstance(T, bool) or not isinstance(T, (int, float)) or not T > 0 or not math.isfinite(T):
        raise ConfigError(f"scheme.T: must be > 0 so that tau = scheme.T / scheme.k > 0, got {T!r}")
    inner_sec = sec.get("inner", {})
    if not isinstance(inner_sec, dict):
        raise ConfigError("scheme.inner: must be a table")
    allowed = {"max_iters", "grad_tol", "armijo", "shrink", "restarts"}
    extra = set(inner_sec) - allowed
    if extra:
        raise ConfigError(f"scheme.inner: unknown keys {sorted(extra)}")
    try:
        inner = InnerConfig(**inner_sec)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"scheme.inner: {exc}") from None
    seed = _num(sec, "seed", "scheme", 0, kind=int, nonneg=True)
    return SchemeConfig(float(T), k, inner, seed)


def _control(sec: dict, dim: int, T: float, base: Path):
    key = "control"
    mode = sec.get("mode")
    M = _num(sec, "M", key, positive=False, nonneg=True)
    R = _num(sec, "R", key, nonneg=True)
    if mode == "fixed":
        if ("file" in sec) == ("knots" in sec):
            raise ConfigError(f"{key}: a fixed control needs exactly one of 'file' or 'knots'")
        lip = _num(sec, "lip", key, nonneg=True)
        try:
            if "file" in sec:
                from .io import read_json

                obj = read_json(base / sec["file"])
                obj.update({"lip": lip, "mass": M, "radius": R})
                curve = ControlCurve.from_json(obj)
            else:
                knots = [DiscreteMeasure(np.asarray(k["points"], dtype=float).reshape(-1, dim), k["weights"], dim)
                         for k in sec["knots"]]
                times = sec.get("knot_times", [0.0, T] if len(knots) == 2 else None)
                if times is None:
                    raise ConfigError(f"{key}.knot_times: missing")
                curve = ControlCurve(times, knots, sec.get("interpolation", PIECEWISE_CONSTANT), lip, M, R)
        except ConfigError:
            raise
        except (ValueError, TypeError, KeyError, OSError) as exc:
            raise ConfigError(f"{key}: {exc}") from None
        if abs(curve.horizon - T) > 1e-12 * max(1.0, T):
            raise ConfigError(f"{key}.knot_times: last knot {curve.horizon} must equal scheme.T={T}")
        if curve.dim != dim:
            raise ConfigError(f"{key}: dimension {curve.dim} differs from problem.dim={dim}")
        return curve, None, None, M
    if mode == "parametrized":
        try:
            masses = np.asarray(sec["masses"], dtype=float)
            times = np.asarray(sec.get("knot_times", np.linspace(0.0, T, _num(sec, "n_knots", key, 2, kind=int) )), dtype=float)
            v_max = _num(sec, "v_max", key, nonneg=True)
            if "positions" in sec:
                pos = np.asarray(sec["positions"], dtype=float).reshape(masses.size, times.size, dim)
                theta = ControlParametrization(masses, times, pos, v_max, R, M)
            else:
                start = np.asarray(sec["start"], dtype=float).reshape(masses.size, dim)
                theta = ControlParametrization.stationary(masses, start, times, v_max, R, M)
        except ConfigError:
            raise
        except KeyError as exc:
            raise ConfigError(f"{key}.{exc.args[0]}: missing") from None
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{key}: {exc}") from None
        if abs(theta.T - T) > 1e-12 * max(1.0, T):
            raise ConfigError(f"{key}.knot_times: last knot {theta.T} must equal scheme.T={T}")
        opt_sec = sec.get("optimizer", {})
        try:
            opt = OptimizerConfig(**opt_sec)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"control.optimizer: {exc}") from None
        return None, theta, opt, M
    raise ConfigError(f"{key}.mode: expected 'fixed' or 'parametrized', got {mode!r}")


def _cost(sec: dict, dim: int, k: int) -> CostFunctional:
    try:
        cost = CostFunctional(**sec)
    except TypeError as exc:
        raise ConfigError(f"cost: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"cost: {exc}") from None
    if cost.kind != "second_moment" and len(cost.x0) != dim:
        raise ConfigError(f"cost.x0: dimension {len(cost.x0)} differs from problem.dim={dim}")
    if cost.c is not None and len(cost.c) != k + 1:
        raise ConfigError(f"cost.c: need {k + 1} samples (one per grid time), got {len(cost.c)}")
    return cost


def _test_function(obj: dict, i: int) -> TestFunction:
    try:
        return TestFunction.from_json(obj)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"verify.test_functions[{i}]: {exc}") from None


def _apply_seed(data: dict, seed: int) -> dict:
    """Override every seed in the config: the rho0 sampler, the scheme and the verify draws."""
    data = copy.deepcopy(data)
    rho0 = data.get("problem", {}).get("rho0")
    if isinstance(rho0, dict) and isinstance(rho0.get("sampler"), dict):
        rho0["sampler"]["seed"] = seed
    for sec in ("scheme", "verify"):
        if isinstance(data.get(sec), dict):
            data[sec]["seed"] = seed
    return data


def parse_config(data: dict, base_dir: Path = Path("."), name: str = "run", seed: int | None = None) -> RunConfig:
    """Validate a parsed config mapping; ``seed`` (if given) overrides every seed in it."""
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a table")
    if seed is not None:
        if seed < 0:
            raise ConfigError(f"--seed: must be >= 0, got {seed}")
        data = _apply_seed(data, seed)
    problem = _section(data, "problem")
    dim = _num(problem, "dim", "problem", kind=int, positive=True)
    W = _kernel(problem.get("W"), "problem.W")
    V = _kernel(problem.get("V"), "problem.V")
    if not W.satisfies_self:
        raise ConfigError(f"problem.W: {W!r} is not admissible as a self-interaction kernel")
    if "rho0" not in problem:
        raise ConfigError("problem.rho0: missing section")
    rho0 = _rho0(problem["rho0"], dim, base_dir)
    scheme = _scheme(_section(data, "scheme"))
    nu, theta0, opt, M = _control(_section(data, "control"), dim, scheme.T, base_dir)
    cost = _cost(data["cost"], dim, scheme.k) if "cost" in data else None

    out = _section(data, "output", required=False)
    formats = tuple(out.get("formats", ("csv", "json")))
    bad = set(formats) - {"csv", "json"}
    if bad or not formats:
        raise ConfigError(f"output.formats: must be a non-empty subset of ['csv', 'json'], got {list(formats)}")
    out_dir = Path(out.get("dir", "out"))
    if not out_dir.is_absolute():
        out_dir = base_dir / out_dir

    vsec = _section(data, "verify", required=False)
    tfs = tuple(_test_function(obj, i) for i, obj in enumerate(vsec.get("test_functions", [])))
    for i, tf in enumerate(tfs):
        if tf.xi.dim != dim:
            raise ConfigError(f"verify.test_functions[{i}]: dimension {tf.xi.dim} differs from problem.dim={dim}")
        if not tf.vanishes_near_ends(scheme.T):
            raise ConfigError(f"verify.test_functions[{i}]: time bump must sit strictly inside (0, scheme.T)")
    verify = VerifySettings(
        evi=bool(vsec.get("evi", True)),
        stability_shift=_num(vsec, "stability_shift", "verify", 0.1, nonneg=True),
        lambda_pairs=_num(vsec, "lambda_pairs", "verify", 20, kind=int, nonneg=True),
        residual_k=tuple(int(k) for k in vsec.get("residual_k", ())),
        test_functions=tfs,
        seed=_num(vsec, "seed", "verify", 0, kind=int, nonneg=True),
    )

    osec = _section(data, "oracle", required=False)
    k_list = tuple(osec.get("k_list", (8, 16, 32, 64)))
    if len(k_list) < 2 or any(not isinstance(k, int) or k < 1 for k in k_list):
        raise ConfigError(f"oracle.k_list: need at least two positive integers, got {list(k_list)}")
    if any(b != 2 * a for a, b in zip(k_list, k_list[1:])):
        raise ConfigError(f"oracle.k_list: each entry must double the previous one, got {list(k_list)}")
    k_ref = _num(osec, "k_ref", "oracle", 8 * k_list[-1], kind=int, positive=True)
    if k_ref % k_list[-1] or k_ref <= k_list[-1]:
        raise ConfigError(f"oracle.k_ref: must be a proper multiple of {k_list[-1]}, got {k_ref}")
    oracle = OracleSettings(k_list, k_ref, _num(osec, "min_order", "oracle", 0.8))

    return RunConfig(
        name=str(data.get("name", name)), W=W, V=V, rho0=rho0, scheme=scheme, M=M,
        control=nu, theta0=theta0, optimizer=opt, cost=cost, out_dir=out_dir, formats=formats,
        emit_verify=bool(out.get("emit_verify", True)), verify=verify, oracle=oracle, base_dir=base_dir,
    )
