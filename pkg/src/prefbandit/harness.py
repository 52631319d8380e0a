"""Experiment orchestration, CSV records, rate fits and summaries."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .bandit import Instance, load_instance
from .distill import DistillLoss, RewardModel, run_onpolicy_rd
from .dpo import DpoConfig, Trajectory, offline_dataset, run_offline_dpo, run_online_dpo
from .design import run_two_step_dpo
from .instances import easy_instance, skewed_base_instance_p1, two_coord_instance

METHODS = ("online-dpo", "offline-dpo", "two-step-design", "rd-fixed", "rd-calibrated", "rebel-legacy")
SWEEP_AXES = ("n", "K", "R")
_RD_MODES = {"rd-fixed": "fixed-regularization", "rd-calibrated": "reward-calibration",
             "rebel-legacy": "rebel-legacy"}

_DPO_KEYS = {f.name for f in fields(DpoConfig)}
_EXTRA_KEYS = {"epochs", "gamma_c", "loss", "beta", "design_weight", "reward_noise", "reward_seed"}
_RECIPE_KEYS = {
    "easy": {"d", "seed", "R", "spread", "p", "gamma"},
    "skewed-p1": {"d", "R", "seed", "n", "count", "gamma"},
    "two-coord-p": {"d", "R", "p", "seed", "n", "M", "gamma"},
}
_SPEC_KEYS = {"method", "instance", "config", "seeds", "output", "sweep", "timings",
              "aggregator", "design", "coverage"}


class SpecError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    method: str
    instance: Dict[str, Any]
    seeds: List[int]
    config: Dict[str, Any] = field(default_factory=dict)
    output: Optional[str] = None
    sweep_axis: Optional[str] = None
    grid: List[Any] = field(default_factory=list)
    timings: bool = False
    aggregator: str = "median"

    def __post_init__(self):
        if self.method not in METHODS:
            raise SpecError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.seeds:
            raise SpecError("seed list is empty")
        self.seeds = [int(s) for s in self.seeds]
        unknown = set(self.config) - _DPO_KEYS - _EXTRA_KEYS
        if unknown:
            raise SpecError(f"unknown config keys {sorted(unknown)}")
        if self.sweep_axis is not None:
            if self.sweep_axis not in SWEEP_AXES:
                raise SpecError(f"sweep axis must be one of {SWEEP_AXES}")
            if not self.grid:
                raise SpecError("sweep grid is empty")
            if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
                raise SpecError("sweep grid must be strictly increasing")
        elif self.grid:
            raise SpecError("grid given without a sweep axis")
        if self.aggregator not in ("median", "mean"):
            raise SpecError("aggregator must be 'median' or 'mean'")
        _check_instance_block(self.instance)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ExperimentSpec":
        unknown = set(d) - _SPEC_KEYS
        if unknown:
            raise SpecError(f"unknown keys {sorted(unknown)}")
        if "method" not in d or "instance" not in d:
            raise SpecError("spec needs 'method' and 'instance'")
        sweep = d.get("sweep") or {}
        bad = set(sweep) - {"axis", "grid"}
        if bad:
            raise SpecError(f"unknown sweep keys {sorted(bad)}")
        return cls(method=d["method"], instance=dict(d["instance"]),
                   seeds=list(d.get("seeds", [0])), config=dict(d.get("config", {})),
                   output=d.get("output"), sweep_axis=sweep.get("axis"),
                   grid=list(sweep.get("grid", [])), timings=bool(d.get("timings", False)),
                   aggregator=d.get("aggregator", "median"))

    def cells(self):
        points = self.grid if self.sweep_axis else [None]
        for v in points:
            for s in self.seeds:
                yield v, s


def load_config(path) -> Dict[str, Any]:
    """Read a JSON experiment file, rejecting unknown top-level keys."""
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SpecError(f"{path}: {exc}") from exc
    if not isinstance(d, dict):
        raise SpecError("config file must hold a JSON object")
    unknown = set(d) - _SPEC_KEYS
    if unknown:
        raise SpecError(f"unknown keys {sorted(unknown)}")
    return d


def _check_instance_block(block):
    if "file" in block:
        if set(block) != {"file"}:
            raise SpecError("an instance file block takes only 'file'")
        return
    kind = block.get("recipe")
    if kind not in _RECIPE_KEYS:
        raise SpecError(f"instance recipe must be one of {sorted(_RECIPE_KEYS)} or a file")
    unknown = set(block) - _RECIPE_KEYS[kind] - {"recipe"}
    if unknown:
        raise SpecError(f"unknown keys {sorted(unknown)} for recipe {kind}")


def build_instance(block: Dict[str, Any], R: Optional[float] = None, budget: Optional[int] = None) -> Instance:
    """Instance from a recipe block or a file. R overrides the radius; a
    recipe n of "budget" is replaced by the run's total sample count."""
    _check_instance_block(block)
    if "file" in block:
        try:
            return load_instance(block["file"])
        except (OSError, ValueError) as exc:
            raise SpecError(f"cannot load instance {block['file']}: {exc}") from exc
    b = dict(block)
    kind = b.pop("recipe")
    rng = np.random.default_rng(int(b.pop("seed", 0)))
    if R is not None:
        b["R"] = R
    if b.get("n") == "budget":
        b["n"] = budget
    if kind == "easy":
        inst = easy_instance(int(b.pop("d")), rng, **b)
    elif kind == "skewed-p1":
        inst, _ = skewed_base_instance_p1(int(b.pop("d")), float(b.pop("R")), rng, **b)
    else:
        inst, _ = two_coord_instance(int(b.pop("d")), float(b.pop("R")), float(b.pop("p")), rng, **b)
    return inst.replace(recipe={**inst.recipe, "seed": block.get("seed", 0)})


@dataclass
class RunRecord:
    method: str
    sweep_axis: str
    sweep: Any
    seed: int
    round: int
    n_k: int
    err_p: Optional[float] = None
    err_2: Optional[float] = None
    kl_fwd: Optional[float] = None
    kl_rev: Optional[float] = None
    coverage: Optional[float] = None
    mad_err: Optional[float] = None
    seconds: Optional[float] = None
    error: str = ""


COLUMNS = [f.name for f in fields(RunRecord)]


def _dpo_config(cfg: Dict[str, Any], axis, value) -> DpoConfig:
    kw = {k: v for k, v in cfg.items() if k in _DPO_KEYS}
    if axis == "n":
        kw["n"] = int(value)
    elif axis == "K":
        kw["K"] = int(value)
    return DpoConfig(**kw)


def _budget(method, cfg: DpoConfig) -> int:
    if method in ("offline-dpo",):
        return cfg.n
    if method == "two-step-design":
        return 2 * cfg.n
    return sum(cfg.batches())


def run_cell(spec: ExperimentSpec, value, seed: int) -> List[RunRecord]:
    """One (sweep value, seed) cell. The generator is default_rng(seed), so
    a cell matches the direct module call with that generator."""
    axis = spec.sweep_axis or ""
    try:
        cfg = _dpo_config(spec.config, spec.sweep_axis, value)
        inst = build_instance(spec.instance, R=float(value) if spec.sweep_axis == "R" else None,
                              budget=_budget(spec.method, cfg))
        traj = run_method(spec.method, inst, cfg, spec.config, seed)
    except SpecError:
        raise
    except Exception as exc:  # recorded, the sweep continues
        return [RunRecord(spec.method, axis, value, seed, -1, 0, error=f"{type(exc).__name__}: {exc}")]
    rows = []
    for r in traj.records:
        rows.append(RunRecord(spec.method, axis, value, seed, r.round, r.n, r.err_p, r.err_2,
                              r.kl_fwd, r.kl_rev, r.coverage, r.mad_err,
                              r.seconds if spec.timings else None))
    return rows


def run_method(method: str, inst: Instance, cfg: DpoConfig, extra: Dict[str, Any], seed: int) -> Trajectory:
    rng = np.random.default_rng(seed)
    if method == "online-dpo":
        return run_online_dpo(inst, cfg, rng, seed=seed)
    if method == "offline-dpo":
        data = offline_dataset(inst, cfg.n, rng, seed=seed)
        return run_offline_dpo(inst, data, int(extra.get("epochs", 1)), cfg, seed=seed)
    if method == "two-step-design":
        res = run_two_step_dpo(inst, cfg.n, cfg, rng, design_weight=float(extra.get("design_weight", 0.5)),
                               seed=seed)
        return res.trajectory
    noise = float(extra.get("reward_noise", 0.0))
    if noise > 0:
        rm = RewardModel.corrupted(inst, noise, np.random.default_rng(int(extra.get("reward_seed", 0))))
    else:
        rm = RewardModel.exact(inst)
    loss = DistillLoss(extra.get("loss", "squared"), float(extra.get("beta", 1.0)))
    gamma_c = extra.get("gamma_c", inst.gamma)
    return run_onpolicy_rd(inst, rm, _RD_MODES[method], cfg, rng, gamma_c=gamma_c, loss=loss, seed=seed)


def _cell_job(args):
    spec, value, seed = args
    return run_cell(spec, value, seed)


def run_experiment(spec: ExperimentSpec, parallelism: int = 1) -> List[RunRecord]:
    """Run every (sweep value, seed) cell; rows come back ordered by sweep
    value, seed and round whatever the parallelism."""
    if spec.sweep_axis != "R":
        build_instance(spec.instance, budget=1)  # fail early on a bad instance
    jobs = [(spec, v, s) for v, s in spec.cells()]
    if parallelism > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as ex:
            parts = list(ex.map(_cell_job, jobs))
    else:
        parts = [_cell_job(j) for j in jobs]
    return [row for part in parts for row in part]


# CSV


def _emit(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _parse(s: str):
    if s == "":
        return None
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def records_to_csv(records: Sequence[RunRecord], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in records:
        w.writerow([_emit(getattr(r, c)) for c in COLUMNS])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def records_from_csv(source) -> List[RunRecord]:
    if isinstance(source, str) and "\n" in source:
        text = source
    else:
        with open(source, newline="") as fh:
            text = fh.read()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != COLUMNS:
        raise ValueError(f"expected header {COLUMNS}")
    out = []
    for row in rows[1:]:
        vals = {c: _parse(v) for c, v in zip(COLUMNS, row)}
        vals["method"] = row[0]
        vals["sweep_axis"] = row[1]
        vals["error"] = row[-1]
        out.append(RunRecord(**vals))
    return out


# analysis


def _get(rec, name):
    return rec[name] if isinstance(rec, dict) else getattr(rec, name)


def loglog_slope(x, y):
    """OLS fit of ln y on ln x: (slope, intercept, rms residual)."""
    lx, ly = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    slope, intercept = np.polyfit(lx, ly, 1)
    res = ly - (slope * lx + intercept)
    return float(slope), float(intercept), float(np.sqrt(np.mean(res ** 2)))


def fit_loglog_slope(records: Iterable, x_column: str, y_column: str, aggregator: str = "median"):
    """Aggregate y per distinct x, then fit a line in log-log coordinates."""
    groups: Dict[float, List[float]] = {}
    for r in records:
        x, y = _get(r, x_column), _get(r, y_column)
        if x is None or y is None:
            continue
        groups.setdefault(float(x), []).append(float(y))
    if len(groups) < 3:
        raise ValueError("need at least three distinct x values")
    agg = np.median if aggregator == "median" else np.mean
    xs = sorted(groups)
    ys = [float(agg(groups[x])) for x in xs]
    if min(xs) <= 0 or not all(y > 0 and math.isfinite(y) for y in ys):
        raise ValueError("log-log fit needs positive x and positive finite aggregated y")
    return loglog_slope(xs, ys)


TEMPLATES = {
    "default": ("err_2", "err_p", "kl_fwd", "kl_rev", "coverage", "mad_err"),
    "rates": ("err_2", "mad_err"),
}


def _final_rows(records):
    last: Dict[tuple, Any] = {}
    for r in records:
        if _get(r, "error"):
            continue
        key = (_get(r, "method"), _get(r, "sweep"), _get(r, "seed"))
        if key not in last or _get(r, "round") > _get(last[key], "round"):
            last[key] = r
    return list(last.values())


def report(records: Sequence, template="default", series_dir=None, aggregator: str = "median") -> str:
    """Per-method summaries of final-round metrics at each sweep point."""
    records = list(records)
    if not records:
        raise ValueError("no records to report")
    metrics = TEMPLATES[template] if isinstance(template, str) else tuple(template)
    agg = np.median if aggregator == "median" else np.mean
    finals = _final_rows(records)
    table: Dict[tuple, Dict[str, List[float]]] = {}
    for r in finals:
        key = (_get(r, "method"), _get(r, "sweep"))
        cell = table.setdefault(key, {m: [] for m in metrics})
        for m in metrics:
            v = _get(r, m)
            if v is not None:
                cell[m].append(float(v))
    head = ["method", "sweep", "seeds"] + [f"{m} {aggregator} [q25, q75]" for m in metrics]
    lines = [" | ".join(head)]
    summary: Dict[tuple, Dict[str, float]] = {}
    for (method, sweep), cell in sorted(table.items(), key=lambda kv: (kv[0][0], _sort_key(kv[0][1]))):
        parts = [method, _emit(sweep) or "-", str(max(len(v) for v in cell.values()) if cell else 0)]
        summary[(method, sweep)] = {}
        for m in metrics:
            vals = cell[m]
            if vals:
                a = float(agg(vals))
                q1, q3 = np.quantile(vals, [0.25, 0.75])
                summary[(method, sweep)][m] = a
                parts.append(f"{a:.4g} [{q1:.4g}, {q3:.4g}]")
            else:
                parts.append("-")
        lines.append(" | ".join(parts))
    errors = sum(1 for r in records if _get(r, "error"))
    if errors:
        lines.append(f"error rows: {errors}")
    lines.extend(_separation_lines(summary))
    if series_dir is not None:
        _write_series(records, metrics, series_dir, agg)
    return "\n".join(lines) + "\n"


def _sort_key(v):
    return (0, v) if isinstance(v, (int, float)) else (1, str(v))


def _separation_lines(summary) -> List[str]:
    on = {s: v for (m, s), v in summary.items() if m == "online-dpo"}
    off = {s: v for (m, s), v in summary.items() if m == "offline-dpo"}
    if not on or not off:
        return []
    common = sorted(set(on) & set(off), key=_sort_key)
    pairs = [(s, s) for s in common]
    if not pairs and len(on) == 1 and len(off) == 1:
        pairs = [(next(iter(on)), next(iter(off)))]
    out = []
    for s_on, s_off in pairs:
        a, b = on[s_on].get("err_2"), off[s_off].get("err_2")
        if a is None or not b:
            continue
        ratio = a / b
        flag = "yes" if ratio <= 0.5 else "no"
        out.append(f"separation online/offline err_2 ratio = {ratio:.4g} "
                   f"(on-policy at most half of offline: {flag})")
    return out


def _write_series(records, metrics, out_dir, agg):
    os.makedirs(out_dir, exist_ok=True)
    rows = [r for r in records if not _get(r, "error")]
    methods = sorted({_get(r, "method") for r in rows})
    for method in methods:
        mine = [r for r in rows if _get(r, "method") == method]
        swept = any(_get(r, "sweep") not in (None, "") for r in mine)
        source = _final_rows(mine) if swept else mine
        xname = "sweep" if swept else "round"
        for m in metrics:
            groups: Dict[Any, List[float]] = {}
            for r in source:
                v = _get(r, m)
                if v is not None:
                    groups.setdefault(_get(r, xname), []).append(float(v))
            if not groups:
                continue
            path = os.path.join(out_dir, f"{method}.{m}.dat")
            with open(path, "w") as fh:
                fh.write(f"# {xname} {m}\n")
                for x in sorted(groups, key=_sort_key):
                    fh.write(f"{_emit(x)} {float(agg(groups[x]))!r}\n")
