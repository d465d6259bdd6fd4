"""Experiment configs, replica fan-out, table I/O and comparison reports."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import detsolve, stochsim
from .branching import ArmMeasure

log = logging.getLogger(__name__)

MODELS = ("mono_coalescent", "limited_coalescent", "threshold_coalescent", "configuration",
          "ode_mono", "ode_limited", "closed_forms")
FORMATS = ("csv", "json")
COLUMNS = ("a", "m", "t", "value", "stderr")
REQUIRED = ("model",)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    model: str
    mu: tuple[tuple[int, float], ...] = ((1, 1.0),)
    n: int = 1000
    t_end: float = math.inf
    alpha: int | None = None  # None means ceil(n^(2/3))
    replicas: int = 1
    seed: int = 0
    sample_times: tuple[float, ...] = ()
    truncation: tuple[int, int] = (20, 20)
    output: str = "out.csv"
    format: str = "csv"
    degree_mode: str = "quota"

    @property
    def arm_measure(self) -> ArmMeasure:
        return ArmMeasure.from_dict(dict(self.mu))


@dataclass(frozen=True)
class Row:
    a: int | None
    m: int | None
    t: float | None
    value: float
    stderr: float = 0.0

    @property
    def key(self):
        return (self.a, self.m, self.t)


# ---------------------------------------------------------------- config text


def _fmt_float(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def parse_config(text: str) -> ExperimentConfig:
    """Parse flat ``key=value`` lines; ``#`` starts a comment, ``mu.<a>=<w>`` sets arm weights."""
    values: dict = {}
    mu: dict[int, float] = {}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)

        def fail(msg, key=key):
            raise ConfigError(f"line {lineno}: key {key}: {msg}")

        try:
            if key.startswith("mu."):
                a = int(key[3:])
                w = float(val)
                if a < 1:
                    fail("arm count must be >= 1")
                if not w >= 0 or math.isinf(w):
                    fail("weight must be finite and nonnegative")
                mu[a] = w
            elif key == "model":
                if val not in MODELS:
                    fail(f"unknown model {val!r}")
                values["model"] = val
            elif key in ("n", "replicas"):
                v = int(val)
                if v < 1:
                    fail("must be >= 1")
                values[key] = v
            elif key == "seed":
                v = int(val, 0)
                if not 0 <= v < 2**64:
                    fail("seed must be a 64-bit unsigned integer")
                values["seed"] = v
            elif key == "t_end":
                v = float(val)
                if not v >= 0:
                    fail("must be >= 0")
                values["t_end"] = v
            elif key == "alpha":
                if val == "auto":
                    values["alpha"] = None
                else:
                    v = int(val)
                    if v < 1:
                        fail("must be >= 1 or auto")
                    values["alpha"] = v
            elif key == "sample_times":
                ts = tuple(float(x) for x in val.split(",") if x.strip())
                if any(not x >= 0 for x in ts):
                    fail("sample times must be >= 0")
                values["sample_times"] = tuple(sorted(ts))
            elif key == "truncation":
                parts = [int(x) for x in val.split(",")]
                if len(parts) != 2 or min(parts) < 1:
                    fail("expected A_max,M_max with both >= 1")
                values["truncation"] = tuple(parts)
            elif key == "output":
                path, _, fmt = val.rpartition(",") if "," in val else (val, "", "")
                fmt = fmt.strip() or "csv"
                if fmt not in FORMATS:
                    fail(f"format must be one of {FORMATS}")
                if not path.strip():
                    fail("empty path")
                values["output"] = path.strip()
                values["format"] = fmt
            elif key == "degree_mode":
                if val not in ("quota", "random"):
                    fail("expected quota or random")
                values["degree_mode"] = val
            else:
                fail("unknown key")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            fail(f"malformed value {val!r}")
    for key in REQUIRED:
        if key not in values:
            raise ConfigError(f"missing required key {key!r}")
    if mu:
        if not any(w > 0 for w in mu.values()):
            raise ConfigError("key mu: all weights are zero")
        values["mu"] = tuple(sorted(mu.items()))
    return ExperimentConfig(**values)


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = [f"model={cfg.model}"]
    lines += [f"mu.{a}={_fmt_float(w)}" for a, w in cfg.mu]
    lines += [
        f"n={cfg.n}",
        f"t_end={_fmt_float(cfg.t_end)}",
        f"alpha={'auto' if cfg.alpha is None else cfg.alpha}",
        f"replicas={cfg.replicas}",
        f"seed={cfg.seed}",
        f"sample_times={','.join(_fmt_float(t) for t in cfg.sample_times)}",
        f"truncation={cfg.truncation[0]},{cfg.truncation[1]}",
        f"output={cfg.output},{cfg.format}",
        f"degree_mode={cfg.degree_mode}",
    ]
    return "\n".join(lines) + "\n"


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- tables


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return _fmt_float(x)


def write_rows(rows, path, fmt: str = "csv", meta: dict | None = None):
    """Write rows atomically: the file only appears once fully written."""
    path = Path(path)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow([_cell(r.a), _cell(r.m), _cell(r.t), _cell(r.value), _cell(r.stderr)])
        text = buf.getvalue()
    elif fmt == "json":
        def enc(x):
            if isinstance(x, float) and not math.isfinite(x):
                return _fmt_float(x)
            return x
        doc = {
            "columns": list(COLUMNS),
            "rows": [{c: enc(getattr(r, c)) for c in COLUMNS} for r in rows],
            "meta": {k: enc(v) for k, v in (meta or {}).items()},
        }
        text = json.dumps(doc, indent=1) + "\n"
    else:
        raise ValueError(f"unknown format {fmt!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_opt_int(s):
    return None if s in ("", None) else int(s)


def _parse_opt_float(s):
    if s in ("", None):
        return None
    return float(s)


def read_rows(path) -> list[Row]:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        doc = json.loads(text)
        return [Row(_parse_opt_int(r["a"]), _parse_opt_int(r["m"]), _parse_opt_float(r["t"]),
                    float(r["value"]), float(r["stderr"])) for r in doc["rows"]]
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != COLUMNS:
        raise ValueError(f"{path}: expected columns {COLUMNS}")
    return [Row(_parse_opt_int(r["a"]), _parse_opt_int(r["m"]), _parse_opt_float(r["t"]),
                float(r["value"]), float(r["stderr"])) for r in reader]


# ---------------------------------------------------------------- running


def _workers(replicas: int) -> int:
    cap = os.environ.get("COAGLAB_THREADS")
    n = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(n, replicas))


def fan_out(fn, args_list):
    """Map ``fn`` over replicas; results come back in replica-index order."""
    workers = _workers(len(args_list))
    if workers == 1:
        return [fn(*a) for a in args_list]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*args_list)))


def _aggregate(per_replica: list[dict], n_within: int | None = None) -> dict:
    """Mean and standard error across replicas, keyed like the inputs.

    With a single replica the within-run binomial error is used instead.
    """
    keys = sorted(set().union(*per_replica), key=_sort_key)
    R = len(per_replica)
    out = {}
    for k in keys:
        x = np.array([d.get(k, 0.0) for d in per_replica])
        mean = math.fsum(x) / R
        if R > 1:
            se = float(np.std(x, ddof=1)) / math.sqrt(R)
        elif n_within:
            se = math.sqrt(max(mean * (1 - mean), 0.0) / n_within)
        else:
            se = 0.0
        out[k] = (mean, se)
    return out


def _sort_key(k):
    return tuple((-1 if v is None else v) for v in (k if isinstance(k, tuple) else (k,)))


def _degrees(cfg: ExperimentConfig, rng):
    return stochsim.sample_degrees(cfg.arm_measure, cfg.n, rng, mode=cfg.degree_mode)


def _mono_replica(cfg: ExperimentConfig, seed: int) -> dict:
    ps = stochsim.coalesce_mono(cfg.n, cfg.t_end, stochsim.make_rng(seed))
    ps.check()
    return {(None, m): k / cfg.n for m, k in stochsim.census(ps).size_counts().items()}


def _limited_replica(cfg: ExperimentConfig, seed: int) -> dict:
    rng = stochsim.make_rng(seed)
    ps = stochsim.coalesce_limited(_degrees(cfg, rng), cfg.t_end, rng)
    ps.check()
    return {k: v for k, (v, _) in stochsim.empirical_concentrations(stochsim.census(ps)).items()}


def _configuration_replica(cfg: ExperimentConfig, seed: int) -> dict:
    rng = stochsim.make_rng(seed)
    g = stochsim.random_configuration(_degrees(cfg, rng), rng)
    c = stochsim.census(g)
    c.check()
    return {k: v for k, (v, _) in stochsim.empirical_concentrations(c).items()}


def _threshold_replica(cfg: ExperimentConfig, seed: int) -> dict:
    rng = stochsim.make_rng(seed)
    times = sorted(set(cfg.sample_times) | {cfg.t_end})
    trace, ps = stochsim.coalesce_threshold(_degrees(cfg, rng), cfg.alpha, cfg.t_end, rng, times)
    ps.check()
    out = {}
    for t, frac, law in zip(trace.times, trace.solution_fraction, trace.used_arm_laws):
        out[(None, None, t)] = frac
        for k, p in enumerate(law.probabilities()):
            out[(k, None, t)] = float(p)
    return out


def _run_stochastic(cfg: ExperimentConfig) -> tuple[list[Row], dict]:
    fn = {
        "mono_coalescent": _mono_replica,
        "limited_coalescent": _limited_replica,
        "configuration": _configuration_replica,
        "threshold_coalescent": _threshold_replica,
    }[cfg.model]
    seeds = [stochsim.replica_seed(cfg.seed, r) for r in range(cfg.replicas)]
    results = fan_out(fn, [(cfg, s) for s in seeds])
    agg = _aggregate(results, n_within=cfg.n)
    A_max, M_max = cfg.truncation
    rows = []
    if cfg.model == "threshold_coalescent":
        for (a, m, t), (v, se) in agg.items():
            rows.append(Row(a, m, t, v, se))
    else:
        t = math.inf if cfg.model == "configuration" else cfg.t_end
        for (a, m), (v, se) in agg.items():
            if m <= M_max and (a is None or a <= A_max):
                rows.append(Row(a, m, t, v, se))
    rows.sort(key=lambda r: (_sort_key((r.t,)), _sort_key((r.a, r.m))))
    return rows, {"replicas": cfg.replicas, "seed": cfg.seed, "n": cfg.n}


def _output_times(cfg: ExperimentConfig) -> list[float]:
    times = sorted(set(cfg.sample_times) | {cfg.t_end})
    if any(math.isinf(t) for t in times):
        raise ConfigError("deterministic models need a finite t_end")
    return times


def _run_deterministic(cfg: ExperimentConfig) -> tuple[list[Row], dict]:
    A_max, M_max = cfg.truncation
    times = _output_times(cfg)
    rows = []
    meta = {}
    if cfg.model == "ode_mono":
        c0 = detsolve.mono_field(dict(cfg.mu), M_max)
        traj = detsolve.integrate_mono(c0, cfg.t_end, M_max, times=times)
        for t, state in zip(traj.times, traj.states):
            if t in times:
                rows += [Row(None, m, float(t), float(state[m])) for m in range(1, M_max + 1)]
        meta["truncation_leak"] = float(traj.truncation_leak[-1])
    elif cfg.model == "ode_limited":
        traj = detsolve.integrate_limited(cfg.arm_measure, cfg.t_end, A_max, M_max, times=times)
        for t, state in zip(traj.times, traj.states):
            if t in times:
                rows += [Row(a, m, float(t), float(state[a, m]))
                         for a in range(A_max + 1) for m in range(1, M_max + 1)]
        meta["truncation_leak"] = float(traj.truncation_leak[-1])
    elif cfg.model == "closed_forms":
        for t in times:
            c = detsolve.limited_closed_form_field(cfg.arm_measure, t, A_max, M_max)
            rows += [Row(a, m, float(t), float(c[a, m]))
                     for a in range(A_max + 1) for m in range(1, M_max + 1)]
    else:
        raise ConfigError(f"model {cfg.model} is not deterministic")
    return rows, meta


def limit_rows(cfg: ExperimentConfig) -> list[Row]:
    """Terminal concentrations c_inf(0, m) and, when gelling, the solution-phase limits."""
    mu = cfg.arm_measure
    _, M_max = cfg.truncation
    c = detsolve.limiting_zero_arm_table(mu, max(M_max, 2))
    rows = [Row(0, m, math.inf, float(c[m])) for m in range(2, M_max + 1)]
    if mu.gels:
        m_inf, pi = detsolve.merle_normand_limits(mu)
        rows.append(Row(None, None, math.inf, m_inf))
        rows += [Row(int(k), None, math.inf, float(p)) for k, p in zip(pi.support, pi.probabilities())]
    return rows


def run(cfg: ExperimentConfig, command: str | None = None) -> Path:
    """Execute one experiment and write its table; returns the output path."""
    if command == "limits":
        rows, meta = limit_rows(cfg), {}
    elif cfg.model in ("ode_mono", "ode_limited", "closed_forms"):
        if command not in (None, "solve"):
            raise ConfigError(f"model {cfg.model} belongs to the solve command")
        rows, meta = _run_deterministic(cfg)
    else:
        if command not in (None, "simulate"):
            raise ConfigError(f"model {cfg.model} belongs to the simulate command")
        rows, meta = _run_stochastic(cfg)
    meta = {"model": cfg.model, **meta}
    write_rows(rows, cfg.output, cfg.format, meta)
    log.info("wrote %d rows to %s", len(rows), cfg.output)
    return Path(cfg.output)


# ---------------------------------------------------------------- comparison


@dataclass
class ComparisonRow:
    a: int | None
    m: int | None
    t: float | None
    reference: float
    estimate: float
    stderr: float
    z: float

    @property
    def flagged(self) -> bool:
        return abs(self.z) > 3


@dataclass
class ComparisonReport:
    rows: list[ComparisonRow] = field(default_factory=list)
    max_abs_z: float = 0.0
    sup_gap: float = 0.0
    truncation_leak: float = 0.0

    @property
    def flagged(self) -> list[ComparisonRow]:
        return [r for r in self.rows if r.flagged]


def _as_rows(src) -> list[Row]:
    if isinstance(src, (str, os.PathLike)):
        return read_rows(src)
    return list(src)


def compare(reference, estimate, *, keep=None, truncation_leak: float = 0.0) -> ComparisonReport:
    """Row-wise z-scores of ``estimate`` against ``reference`` on their shared (a, m, t) keys.

    Standard errors of both sides are combined in quadrature. A row with zero
    standard error scores 0 when the values agree and +-inf otherwise.
    ``keep`` optionally filters rows by key.
    """
    ref = {r.key: r for r in _as_rows(reference)}
    est = {r.key: r for r in _as_rows(estimate)}
    keys = sorted(set(ref) & set(est), key=_sort_key)
    if keep is not None:
        keys = [k for k in keys if keep(*k)]
    if not keys:
        raise ValueError("reference and estimate share no class keys")
    rep = ComparisonReport(truncation_leak=truncation_leak)
    for k in keys:
        r, e = ref[k], est[k]
        se = math.hypot(r.stderr, e.stderr)
        diff = e.value - r.value
        if se > 0:
            z = diff / se
        else:
            z = 0.0 if diff == 0 else math.copysign(math.inf, diff)
        rep.rows.append(ComparisonRow(*k, r.value, e.value, se, z))
    rep.max_abs_z = max(abs(r.z) for r in rep.rows)
    rep.sup_gap = max(abs(r.estimate - r.reference) for r in rep.rows)
    return rep


def write_report(rep: ComparisonReport, path, fmt: str = "csv"):
    cols = ("a", "m", "t", "reference", "estimate", "stderr", "z", "flagged")
    path = Path(path)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in rep.rows:
            w.writerow([_cell(r.a), _cell(r.m), _cell(r.t), _cell(r.reference), _cell(r.estimate),
                        _cell(r.stderr), _cell(r.z), int(r.flagged)])
        text = buf.getvalue()
    else:
        def enc(x):
            return _fmt_float(x) if isinstance(x, float) and not math.isfinite(x) else x
        doc = {
            "rows": [{c: enc(getattr(r, c)) for c in cols} for r in rep.rows],
            "summary": {"max_abs_z": enc(rep.max_abs_z), "sup_gap": rep.sup_gap,
                        "truncation_leak": rep.truncation_leak, "flagged": len(rep.flagged)},
        }
        text = json.dumps(doc, indent=1) + "\n"
    path.write_text(text, encoding="utf-8")


def with_overrides(cfg: ExperimentConfig, seed=None, out=None, fmt=None) -> ExperimentConfig:
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if out is not None:
        changes["output"] = str(out)
    if fmt is not None:
        changes["format"] = fmt
    return replace(cfg, **changes)
