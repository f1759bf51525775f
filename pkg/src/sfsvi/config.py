"""Strict JSON run configuration: unknown keys and bad types are rejected with line numbers."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable

from .coreset import ContextConfig, SelectionPolicy
from .errors import ConfigError
from .objective import ObjectiveConfig
from .tasks import SequenceSpec
from .trainer import MethodConfig, TrainConfig, default_epochs

# value checkers ---------------------------------------------------------------


def _int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise TypeError("expected an integer")
    return v


def _num(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeError("expected a number")
    return float(v)


def _str(v):
    if not isinstance(v, str):
        raise TypeError("expected a string")
    return v


def _bool(v):
    if not isinstance(v, bool):
        raise TypeError("expected true or false")
    return v


def _pair(v):
    if not isinstance(v, list) or len(v) != 2:
        raise TypeError("expected a two-element list")
    return (_num(v[0]), _num(v[1]))


def _optional(check: Callable) -> Callable:
    return lambda v: None if v is None else check(v)


SCHEMA: dict[str, dict[str, Callable]] = {
    "sequence": {
        "kind": _str,
        "head_mode": _optional(_str),
        "subsample": _num,
        "n_tasks": _optional(_int),
        "data_dir": _optional(_str),
    },
    "train": {
        "lr": _num,
        "beta1": _num,
        "beta2": _num,
        "adam_eps": _num,
        "batch_size": _int,
        "epochs": _optional(_int),
        "eval_samples": _int,
        "eval_every": _int,
        "init_scale": _num,
    },
    "objective": {
        "mc_samples": _int,
        "kl_mode": _str,
        "context_budget": _optional(_int),
        "stop_gradient_jacobian": _bool,
        "kl_weight": _num,
        "full_kl_constant": _str,
    },
    "context": {
        "mode": _optional(_str),
        "points_per_step": _int,
        "noise_range": _optional(_pair),
        "coreset_per_task": _int,
        "noise_per_task": _int,
    },
    "coreset": {"capacity": _optional(_int), "policy": dict},
    "policy": {"method": _str, "direction": _str, "seed": _optional(_int)},
    "prior": {"v0": _optional(_num)},
}
TOP_LEVEL: dict[str, Callable] = {
    "sequence": dict,
    "method": _str,
    "train": dict,
    "objective": dict,
    "context": dict,
    "coreset": dict,
    "prior": dict,
    "output_dir": _str,
    "seed": _int,
    "independent": _bool,
    "grid_resolution": _int,
}


def _key_line(text: str, path: list[str]) -> int | None:
    """Best-effort line of the last key in ``path``, searching each key after its parent."""
    pos = 0
    for key in path:
        m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if m is None:
            return None
        pos = m.start()
    return text.count("\n", 0, pos) + 1


@dataclass(frozen=True)
class RunConfig:
    sequence: SequenceSpec
    method: MethodConfig
    output_dir: str = "runs/default"
    seed: int = 0
    data_dir: str | None = None
    independent: bool = False
    grid_resolution: int = 81

    def with_overrides(self, seed: int | None = None, subsample: float | None = None) -> "RunConfig":
        raw = self.to_dict()
        if seed is not None:
            raw["seed"] = seed
        if subsample is not None:
            raw["sequence"]["subsample"] = subsample
        return parse_config(json.dumps(raw))

    def to_dict(self) -> dict:
        m = self.method
        seq = {k: v for k, v in asdict(self.sequence).items() if k != "seed"}
        seq["data_dir"] = self.data_dir
        ctx = asdict(m.context)
        ctx["noise_range"] = list(ctx["noise_range"])
        return {
            "sequence": seq,
            "method": m.method,
            "train": asdict(m.train),
            "objective": asdict(m.objective),
            "context": ctx,
            "coreset": {"capacity": m.coreset_capacity, "policy": asdict(m.policy)},
            "prior": {"v0": m.prior_v0},
            "output_dir": self.output_dir,
            "seed": self.seed,
            "independent": self.independent,
            "grid_resolution": self.grid_resolution,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


class _Reader:
    def __init__(self, text: str):
        self.text = text

    def fail(self, path: list[str], message: str) -> ConfigError:
        where = ".".join(path) if path else "<root>"
        return ConfigError(f"{where}: {message}", line=_key_line(self.text, path) if path else 1)

    def section(self, raw: Any, path: list[str], schema: dict[str, Callable]) -> dict:
        if not isinstance(raw, dict):
            raise self.fail(path, "expected an object")
        out = {}
        for key, value in raw.items():
            if key not in schema:
                raise self.fail(path + [key], f"unknown key (allowed: {', '.join(schema)})")
            check = schema[key]
            if check is dict:
                out[key] = value
                continue
            try:
                out[key] = check(value)
            except TypeError as exc:
                raise self.fail(path + [key], str(exc)) from None
        return out

    def build(self, path: list[str], factory: Callable, **kwargs):
        try:
            return factory(**kwargs)
        except ConfigError as exc:
            raise self.fail(path, str(exc)) from None


def _resolve_defaults(seq: SequenceSpec, method: str, capacity, capacity_given: bool, ctx: dict, v0):
    toy = seq.kind == "toy2d"
    if not capacity_given:
        capacity = None if method == "vcl" else (40 if toy or seq.head_mode == "multi" else 200)
    if ctx.get("mode") is None:
        ctx["mode"] = "noise" if toy else ("coreset" if capacity else "current_task")
    if ctx.get("noise_range") is None:
        ctx["noise_range"] = (-4.0, 4.0) if toy else (0.0, 1.0)
    if v0 is None:
        v0 = 0.1 if toy else (1e-3 if capacity else 100.0)
    return capacity, ctx, v0


def parse_config(text: str) -> RunConfig:
    """Parse and validate a run configuration from JSON text."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", line=exc.lineno) from None
    r = _Reader(text)
    top = r.section(raw, [], TOP_LEVEL)
    if "sequence" not in top:
        raise ConfigError("missing required section 'sequence'", line=1)
    seq_raw = r.section(top["sequence"], ["sequence"], SCHEMA["sequence"])
    data_dir = seq_raw.pop("data_dir", None)
    if "kind" not in seq_raw:
        raise r.fail(["sequence"], "missing required key 'kind'")
    seed = top.get("seed", 0)
    seq = r.build(["sequence"], SequenceSpec, seed=seed, **seq_raw)

    method = top.get("method", "sfsvi")
    train = r.section(top.get("train", {}), ["train"], SCHEMA["train"])
    if train.get("epochs") is None:
        train["epochs"] = default_epochs(seq)
    objective = r.section(top.get("objective", {}), ["objective"], SCHEMA["objective"])
    ctx = r.section(top.get("context", {}), ["context"], SCHEMA["context"])
    core = r.section(top.get("coreset", {}), ["coreset"], SCHEMA["coreset"])
    policy = r.section(core.get("policy", {}), ["coreset", "policy"], SCHEMA["policy"])
    prior = r.section(top.get("prior", {}), ["prior"], SCHEMA["prior"])
    capacity, ctx, v0 = _resolve_defaults(seq, method, core.get("capacity"), "capacity" in core, ctx, prior.get("v0"))
    if method == "vcl" and capacity is not None:
        raise r.fail(["coreset", "capacity"], "the weight-space baseline runs without a coreset")

    mc = r.build(
        [],
        MethodConfig,
        method=method,
        train=r.build(["train"], TrainConfig, **train),
        objective=r.build(["objective"], ObjectiveConfig, **objective),
        context=r.build(["context"], ContextConfig, **ctx),
        coreset_capacity=capacity,
        policy=r.build(["coreset", "policy"], SelectionPolicy, **policy),
        prior_v0=v0,
    )
    grid = top.get("grid_resolution", 81)
    if grid < 2:
        raise r.fail(["grid_resolution"], "must be >= 2")
    return RunConfig(
        seq, mc, top.get("output_dir", "runs/default"), seed, data_dir, top.get("independent", False), grid
    )


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
