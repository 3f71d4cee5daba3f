"""Experiment configuration: TOML text, strict keys, canonical serialization.

Grammar (all sections optional except where a preset needs them)::

    experiment = "diffcom_sweep"      # one of EXPERIMENTS
    seeds = [0, 1, 2]                 # at least one
    output = "results/sweep.csv"      # optional

    [source]                          # Gaussian mixture, see distributions
    weights = [0.5, 0.5]
    means = [[-3.0], [3.0]]
    cov_diag = [[1.0], [1.0]]         # or covariances = [[[...]]]
    labels = [0, 1]                   # optional

    [schedule]
    kind = "vp"                       # vp | ve
    steps = 1000
    start = 1e-4                      # beta_min (vp) or sigma_min (ve)
    end = 0.02                        # beta_max (vp) or sigma_max (ve)

    [channel]
    kind = "awgn"                     # awgn | fading
    snr_db = 10.0                     # number, "inf", or a list to sweep
    L = 1
    sigma_h = 1.0                     # optional per-tap scale
    encoder = [[1.0, 0.0]]            # optional m x D matrix (default identity)

    [decoder]
    gamma = 0.5                       # number, "auto" (= 1/(2 sigma_n^2)) or list
    lambda = 0.0                      # number or list
    start_mode = "full"               # full | adaptive
    steps = 1000                      # optional
    sampler = "reverse_sde"           # reverse_sde | euler | rk4 | predictor_corrector
    reference = "conjugate_mean"      # pseudo_inverse | conjugate_mean | trained_linear
    anneal = false
    step_cap = true

    [guidance]
    gamma = 0.5
    lambda = 0.0
    normalize_residual = false

    [run]                             # preset-specific knobs, see experiments.PRESETS

Lists under ``channel.snr_db``, ``decoder.gamma``, ``decoder.lambda`` and the
preset's sweep keys in ``[run]`` expand into a cross product; rows come out
in sweep order with seeds innermost.
"""
from __future__ import annotations

import math
import re
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXPERIMENTS = ("sampler_fidelity", "dsm_training", "dps_conjugate", "diffcom_sweep",
               "blind_gain", "flow_transport", "solver_convergence")
TOP_KEYS = ("experiment", "seeds", "output", "source", "schedule", "channel", "decoder", "guidance", "run")
SECTION_ORDER = ("source", "schedule", "channel", "decoder", "guidance", "run")

NUM = "number"
INT = "integer"
STR = "string"
BOOL = "boolean"

# key -> (type, allowed choices or None, sweepable)
SCHEMA = {
    "source": {
        "weights": ("vector", None, False),
        "means": ("matrix", None, False),
        "cov_diag": ("matrix", None, False),
        "covariances": ("tensor", None, False),
        "labels": ("ivector", None, False),
    },
    "schedule": {
        "kind": (STR, ("vp", "ve"), False),
        "steps": (INT, None, False),
        "start": (NUM, None, False),
        "end": (NUM, None, False),
    },
    "channel": {
        "kind": (STR, ("awgn", "fading"), False),
        "snr_db": (NUM, None, True),
        "L": (INT, None, False),
        "sigma_h": (NUM, None, False),
        "encoder": ("matrix", None, False),
    },
    "decoder": {
        "gamma": (NUM, "auto", True),
        "lambda": (NUM, None, True),
        "start_mode": (STR, ("full", "adaptive"), False),
        "steps": (INT, None, False),
        "sampler": (STR, ("reverse_sde", "euler", "rk4", "predictor_corrector"), False),
        "reference": (STR, ("pseudo_inverse", "conjugate_mean", "trained_linear"), False),
        "anneal": (BOOL, None, False),
        "step_cap": (BOOL, None, False),
    },
    "guidance": {
        "gamma": (NUM, None, False),
        "lambda": (NUM, None, False),
        "normalize_residual": (BOOL, None, False),
    },
}


class ConfigError(ValueError):
    def __init__(self, msg, key=None, line=None):
        where = f"line {line}: " if line else ""
        super().__init__(f"{where}{msg}")
        self.key = key
        self.line = line


@dataclass
class ExperimentConfig:
    experiment: str
    seeds: list
    output: str | None = None
    source: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    channel: dict = field(default_factory=dict)
    decoder: dict = field(default_factory=dict)
    guidance: dict = field(default_factory=dict)
    run: dict = field(default_factory=dict)

    def section(self, name) -> dict:
        return getattr(self, name)


def _line_of(text, key):
    if text is None:
        return None
    pat = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for k, line in enumerate(text.splitlines(), 1):
        if pat.match(line):
            return k
    return None


def _check_value(path, value, kind, choices, sweep, text):
    leaf = path.split(".")[-1]
    line = _line_of(text, leaf)

    def bad(expected):
        raise ConfigError(f"{path}: expected {expected}, got {type(value).__name__} {value!r}", path, line)

    if sweep and isinstance(value, list):
        if not value:
            raise ConfigError(f"{path}: sweep list is empty", path, line)
        return [_check_value(path, v, kind, choices, False, text) for v in value]
    if kind == NUM:
        if isinstance(value, str) and (value == choices or value.lower() in ("inf", "+inf")):
            return value if value == choices else math.inf
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            bad("number" + (f" or {choices!r}" if isinstance(choices, str) else ""))
        if math.isnan(value):
            bad("a non-NaN number")
        return float(value)
    if kind == INT:
        if isinstance(value, bool) or not isinstance(value, int):
            bad("integer")
        if value < 1:
            raise ConfigError(f"{path}: must be >= 1, got {value}", path, line)
        return int(value)
    if kind == STR:
        if not isinstance(value, str):
            bad("string")
        if choices and value not in choices:
            raise ConfigError(f"{path}: must be one of {list(choices)}, got {value!r}", path, line)
        return value
    if kind == BOOL:
        if not isinstance(value, bool):
            bad("boolean")
        return value
    # numeric arrays
    depth = {"vector": 1, "ivector": 1, "matrix": 2, "tensor": 3}[kind]

    def walk(v, d):
        if d == 0:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                bad(f"{depth}-level numeric array")
            return int(v) if kind == "ivector" else float(v)
        if not isinstance(v, list) or not v:
            bad(f"{depth}-level numeric array")
        return [walk(u, d - 1) for u in v]

    return walk(value, depth)


def _kind(v):
    if isinstance(v, bool):
        return "boolean"
    if isinstance(v, (int, float)):
        return "number"
    if isinstance(v, str):
        return "string"
    if isinstance(v, list):
        return "list"
    return type(v).__name__


def _check_run(path, value, default, sweep, text):
    """[run] values must have the kind of the preset default; axes accept lists."""
    line = _line_of(text, path.split(".")[-1])
    if sweep:
        want = _kind(default[0] if isinstance(default, list) else default)
        vals = value if isinstance(value, list) else [value]
        if not vals:
            raise ConfigError(f"{path}: sweep list is empty", path, line)
        for v in vals:
            if _kind(v) != want:
                raise ConfigError(f"{path}: expected {want} (or a list of them), got {v!r}", path, line)
        return value
    want = _kind(default)
    if _kind(value) != want:
        raise ConfigError(f"{path}: expected {want}, got {value!r}", path, line)
    if want == "list" and (len(value) != len(default) or any(_kind(v) != _kind(d) for v, d in zip(value, default))):
        raise ConfigError(f"{path}: expected a list shaped like {default!r}", path, line)
    if want == "number" and isinstance(default, int) and not isinstance(value, int):
        raise ConfigError(f"{path}: expected integer, got {value!r}", path, line)
    return value


def validate(data: dict, text: str | None = None) -> ExperimentConfig:
    from .experiments import PRESETS

    for key in data:
        if key not in TOP_KEYS:
            raise ConfigError(f"unknown key {key!r}", key, _line_of(text, key))
    if "experiment" not in data:
        raise ConfigError("missing required key 'experiment'", "experiment")
    exp = data["experiment"]
    if exp not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {list(EXPERIMENTS)}, got {exp!r}", "experiment",
                          _line_of(text, "experiment"))
    seeds = data.get("seeds")
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool)
                                                            for s in seeds):
        raise ConfigError("seeds: expected a non-empty list of integers", "seeds", _line_of(text, "seeds"))
    out = data.get("output")
    if out is not None and not isinstance(out, str):
        raise ConfigError("output: expected string", "output", _line_of(text, "output"))
    preset = PRESETS[exp]
    cfg = ExperimentConfig(exp, [int(s) for s in seeds], out)
    for sec in SECTION_ORDER:
        given = data.get(sec, {})
        if not isinstance(given, dict):
            raise ConfigError(f"{sec}: expected a table", sec, _line_of(text, sec))
        allowed = preset.run_defaults if sec == "run" else SCHEMA[sec]
        for key, value in given.items():
            if key not in allowed:
                raise ConfigError(f"unknown key {sec}.{key!r}", f"{sec}.{key}", _line_of(text, key))
        merged = {}
        if sec == "source":
            merged = dict(given) if given else dict(preset.defaults.get("source", {}))
            merged = {k: _check_value(f"source.{k}", v, *SCHEMA["source"][k], text) for k, v in merged.items()}
            if merged:
                _check_source(merged, text)
        elif sec == "run":
            merged = dict(preset.run_defaults)
            axes = {a.key for a in preset.axes if a.section == "run"}
            merged.update({k: _check_run(f"run.{k}", v, preset.run_defaults[k], k in axes, text)
                           for k, v in given.items()})
        else:
            merged = dict(preset.defaults.get(sec, {}))
            for k, v in given.items():
                merged[k] = _check_value(f"{sec}.{k}", v, *SCHEMA[sec][k], text)
            axes = {a.key for a in preset.axes if a.section == sec}
            for k, v in merged.items():
                if SCHEMA[sec][k][2] and isinstance(v, list) and k not in axes:
                    raise ConfigError(f"{sec}.{k}: {exp} does not sweep this key; give a single value",
                                      f"{sec}.{k}", _line_of(text, k))
        setattr(cfg, sec, merged)
    _check_ranges(cfg, text)
    return cfg


def _check_source(src, text):
    from ..distributions import GaussianMixture

    try:
        GaussianMixture.from_dict(src)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"source: {exc}", "source", _line_of(text, "weights")) from None


def _check_ranges(cfg, text):
    sch = cfg.schedule
    lo, hi = sch.get("start"), sch.get("end")
    if lo is not None and hi is not None and not (0 < lo <= hi):
        raise ConfigError("schedule: need 0 < start <= end", "schedule.start", _line_of(text, "start"))
    if sch.get("kind") == "vp" and hi is not None and hi >= 1:
        raise ConfigError("schedule.end: VP betas must be < 1", "schedule.end", _line_of(text, "end"))
    for key in ("lambda", "gamma"):
        vals = cfg.decoder.get(key)
        for v in vals if isinstance(vals, list) else [vals]:
            if isinstance(v, float) and not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"decoder.{key}: must be finite and >= 0", f"decoder.{key}", _line_of(text, key))
    sh = cfg.channel.get("sigma_h")
    if sh is not None and not sh > 0:
        raise ConfigError("channel.sigma_h: must be > 0", "channel.sigma_h", _line_of(text, "sigma_h"))


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"syntax error: {exc}", line=int(m.group(1)) if m else None) from None
    return validate(data, text)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


# ---- canonical serialization ----

def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isinf(v):
            return '"inf"' if v > 0 else '"-inf"'
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ", ".join(_fmt(u) for u in v) + "]"
    raise TypeError(f"cannot serialize {v!r}")


def serialize(cfg: ExperimentConfig) -> str:
    lines = [f"experiment = {_fmt(cfg.experiment)}", f"seeds = {_fmt(list(cfg.seeds))}"]
    if cfg.output is not None:
        lines.append(f"output = {_fmt(cfg.output)}")
    for sec in SECTION_ORDER:
        body = cfg.section(sec)
        if not body:
            continue
        lines += ["", f"[{sec}]"]
        for k in sorted(body):
            lines.append(f"{k} = {_fmt(body[k])}")
    return "\n".join(lines) + "\n"
