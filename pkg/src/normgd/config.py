"""Experiment configuration: strict TOML parsing, canonical echo, assembly.

The config file is plain TOML with a closed schema: unknown keys anywhere are
hard errors (no silent typos).  ``serialize_config`` writes a canonical echo
that parses back to the identical dictionary, which the harness uses both as a
provenance artifact and as a round-trip test surface.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .data_io import Dataset, gen_synthetic, load_cifar10_subset, load_dataset, load_matrix_bin
from .matrixfns import PolarMethod
from .norms import NormSpec, make_norm
from .objectives import MlpObjective, Objective, QuadraticObjective
from .optimizers import MeasureConfig, OptimizerSpec
from .params import BlockLayout, ParamVector, RngState
from .quadlab import random_pd_matrix
from .spectra import FwConfig


class ConfigError(ValueError):
    """Configuration problem, annotated with the offending dotted key path."""


_BOOL, _INT, _FLOAT, _STR = "bool", "int", "float", "str"
_INT_LIST, _FLOAT_LIST, _STR_LIST = "int_list", "float_list", "str_list"

# section -> key -> type tag
SCHEMA = {
    "run": {"seed": _INT, "threads": _INT, "name": _STR},
    "objective": {
        "kind": _STR,                      # quadratic | mlp
        "dim": _INT, "cond": _FLOAT, "seed": _INT, "scale": _FLOAT,
        "matrix_file": _STR, "blocks": _STR_LIST,
        "hidden": _INT_LIST, "activation": _STR, "init_seed": _INT,
    },
    "objective.dataset": {
        "kind": _STR,                      # two_gaussians | teacher_mlp | random_regression | cifar10 | cache
        "n": _INT, "p": _INT, "q": _INT, "seed": _INT,
        "noise": _FLOAT, "separation": _FLOAT,
        "path": _STR, "n_per_class": _INT,
    },
    "optimizer": {
        "norm": _STR, "mode": _STR, "eta": _FLOAT, "steps": _INT,
        "beta2": _FLOAT, "epsilon": _FLOAT,
        "polar": _STR, "polar_steps": _INT,
        "precond_seed": _INT, "precond_spread": _FLOAT, "precond_diag_file": _STR,
        "eta_rel": _FLOAT,                 # eta = eta_rel / initial sharpness estimate
    },
    "measure": {
        "cadence": _INT, "fw_iters": _INT, "fw_restarts": _INT, "fw_seed": _INT,
        "estimator": _STR, "save_directions": _BOOL,
    },
    "output": {"dir": _STR, "formats": _STR_LIST, "smoothing": _FLOAT},
    "quad": {"etas": _FLOAT_LIST, "eta_rel_grid": _FLOAT_LIST, "T": _INT,
             "n_random": _INT, "seed": _INT},
    "switch": {"t0": _INT_LIST, "horizon": _INT},
    "track": {"t0": _INT, "horizon": _INT},
    "oracle": {"geometry": _STR, "dim": _INT, "instances": _INT, "seed": _INT,
               "restarts_grid": _INT_LIST, "iters_grid": _INT_LIST,
               "band": _FLOAT, "min_pass_fraction": _FLOAT, "blocks": _STR_LIST},
    "sweep": {"etas": _FLOAT_LIST, "eta_rels": _FLOAT_LIST, "seeds": _INT_LIST},
}

_TYPE_CHECKS = {
    _BOOL: lambda v: isinstance(v, bool),
    _INT: lambda v: isinstance(v, int) and not isinstance(v, bool),
    _FLOAT: lambda v: (isinstance(v, float) or (isinstance(v, int) and not isinstance(v, bool))),
    _STR: lambda v: isinstance(v, str),
    _INT_LIST: lambda v: isinstance(v, list) and all(isinstance(x, int) and not isinstance(x, bool) for x in v),
    _FLOAT_LIST: lambda v: isinstance(v, list) and all(
        (isinstance(x, float) or (isinstance(x, int) and not isinstance(x, bool))) for x in v),
    _STR_LIST: lambda v: isinstance(v, list) and all(isinstance(x, str) for x in v),
}


class ExperimentConfig:
    """Validated config: a nested dict with dotted-path access."""

    def __init__(self, data: dict, source: str = "<memory>"):
        self.data = data
        self.source = source
        _validate(data)

    def get(self, dotted: str, default=None):
        node = self.data
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def require(self, dotted: str):
        sentinel = object()
        value = self.get(dotted, sentinel)
        if value is sentinel:
            raise ConfigError(f"{self.source}: missing required key {dotted!r}")
        return value

    def section(self, name: str) -> dict:
        return self.get(name, {}) or {}


def _validate(data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"top level must be a table, got {type(data).__name__}")
    for section, body in data.items():
        if section not in SCHEMA and not any(k.startswith(section + ".") for k in SCHEMA):
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        _validate_section(section, body)


def _validate_section(path: str, body: dict):
    allowed = SCHEMA.get(path, {})
    for key, value in body.items():
        sub = f"{path}.{key}"
        if isinstance(value, dict):
            if sub not in SCHEMA:
                raise ConfigError(f"unknown table [{sub}]")
            _validate_section(sub, value)
            continue
        if key not in allowed:
            raise ConfigError(f"unknown key {sub!r}")
        if not _TYPE_CHECKS[allowed[key]](value):
            raise ConfigError(f"key {sub!r} has wrong type {type(value).__name__}")


def parse_config(path) -> ExperimentConfig:
    try:
        with open(str(path), "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}")
    return ExperimentConfig(data, source=str(path))


def parse_config_text(text: str, source: str = "<inline>") -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}")
    return ExperimentConfig(data, source=source)


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isinf(v) or math.isnan(v):
            raise ConfigError("cannot serialize non-finite float in config")
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_fmt_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize config value of type {type(v).__name__}")


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical TOML echo: sorted sections and keys; parses back identically."""
    lines = []

    def emit(path: str, table: dict):
        scalars = {k: v for k, v in table.items() if not isinstance(v, dict)}
        subs = {k: v for k, v in table.items() if isinstance(v, dict)}
        if scalars or not subs:
            lines.append(f"[{path}]")
            for k in sorted(scalars):
                lines.append(f"{k} = {_fmt_value(scalars[k])}")
            lines.append("")
        for k in sorted(subs):
            emit(f"{path}.{k}", subs[k])

    for section in sorted(cfg.data):
        emit(section, cfg.data[section])
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# experiment assembly
# ---------------------------------------------------------------------------

def _parse_block_spec(specs: list[str]) -> BlockLayout:
    """Blocks like "m1:2x3" (matrix) or "v:4" (vector)."""
    blocks = []
    for s in specs:
        name, _, dims = s.partition(":")
        if not dims:
            raise ConfigError(f"bad block spec {s!r}; expected name:ROWSxCOLS or name:DIM")
        shape = tuple(int(t) for t in dims.lower().split("x"))
        blocks.append((name, shape))
    return BlockLayout.of(*blocks)


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.section("objective").get("dataset") or {}
    kind = d.get("kind")
    if kind is None:
        raise ConfigError("objective.dataset.kind is required for mlp objectives")
    if kind == "cifar10":
        return load_cifar10_subset(d.get("path", "."), d.get("n_per_class", 50), d.get("seed", 0))
    if kind == "cache":
        return load_dataset(d.get("path"))
    return gen_synthetic(kind, d.get("n", 200), d.get("p", 10), d.get("q", 2),
                         d.get("seed", 0), noise=d.get("noise", 0.0),
                         separation=d.get("separation", 4.0))


def build_objective(cfg: ExperimentConfig):
    """Returns (objective, w0)."""
    o = cfg.section("objective")
    kind = o.get("kind")
    if kind == "quadratic":
        if "matrix_file" in o:
            H = load_matrix_bin(o["matrix_file"])
        else:
            dim = o.get("dim", 8)
            H = random_pd_matrix(dim, o.get("cond", 10.0), o.get("seed", 0),
                                 scale=o.get("scale", 1.0))
        layout = _parse_block_spec(o["blocks"]) if "blocks" in o else BlockLayout.flat(H.shape[0])
        if layout.total_dim != H.shape[0]:
            raise ConfigError("objective.blocks do not tile the matrix dimension")
        obj = QuadraticObjective(H, layout=layout)
        rng = RngState(cfg.get("run.seed", 0) + 1)
        w0 = ParamVector(layout, rng.normal(layout.total_dim))
        return obj, w0
    if kind == "mlp":
        ds = build_dataset(cfg)
        dims = [ds.X.shape[1]] + list(o.get("hidden", [32])) + [ds.Y.shape[1]]
        obj = MlpObjective(dims, ds.X, ds.Y, activation=o.get("activation", "tanh"))
        w0 = obj.init_params(o.get("init_seed", 0))
        return obj, w0
    raise ConfigError(f"unknown objective.kind {kind!r}")


def build_norm_spec(cfg: ExperimentConfig, obj: Objective) -> NormSpec:
    opt = cfg.section("optimizer")
    variant = opt.get("norm", "euclidean")
    layout = obj.layout
    kwargs = {}
    if variant == "preconditioned":
        if "precond_diag_file" in opt:
            diag = load_matrix_bin(opt["precond_diag_file"]).reshape(-1)
        else:
            spread = opt.get("precond_spread", 2.0)
            rng = RngState(opt.get("precond_seed", 0))
            diag = np.exp((rng.uniform(layout.total_dim) * 2.0 - 1.0) * math.log(spread))
        kwargs["diag"] = diag
    if variant in ("spectral_max", "spectral_sum"):
        kwargs["polar_method"] = build_polar_method(cfg)
    return make_norm(variant, layout, **kwargs)


def build_polar_method(cfg: ExperimentConfig) -> PolarMethod:
    opt = cfg.section("optimizer")
    kind = opt.get("polar", "exact_svd")
    steps = opt.get("polar_steps", 5)
    if kind == "exact_svd":
        return PolarMethod.exact()
    if kind == "newton_schulz":
        return PolarMethod.newton_schulz(steps)
    if kind == "polar_express":
        return PolarMethod.polar_express(steps)
    raise ConfigError(f"unknown optimizer.polar {kind!r}")


def build_optimizer_spec(cfg: ExperimentConfig, norm: NormSpec, eta: float | None = None) -> OptimizerSpec:
    opt = cfg.section("optimizer")
    if eta is None:
        eta = opt.get("eta")
        if eta is None:
            raise ConfigError("optimizer.eta is required (or pass eta_rel and calibrate)")
    return OptimizerSpec(norm=norm, eta=float(eta), mode=opt.get("mode", "unnormalized"),
                         beta2=opt.get("beta2"), epsilon=opt.get("epsilon"))


def build_measure(cfg: ExperimentConfig) -> MeasureConfig:
    m = cfg.section("measure")
    fw = FwConfig(iters=m.get("fw_iters", 50), restarts=m.get("fw_restarts", 5),
                  seed=m.get("fw_seed", cfg.get("run.seed", 0)))
    return MeasureConfig(fw=fw, cadence=m.get("cadence", 20),
                         estimator=m.get("estimator", "fw"),
                         threads=cfg.get("run.threads", 1))


def resolve_out_dir(cfg: ExperimentConfig, override: str | None = None) -> str:
    out = override or cfg.get("output.dir")
    if out is None:
        raise ConfigError("output.dir is required (or pass --out)")
    root = os.environ.get("NORMGD_OUT_ROOT")
    if root and not os.path.isabs(out):
        out = os.path.join(root, out)
    return out
