"""``gtx`` command line: experiment drivers writing CSV artifacts plus a hash manifest."""
from __future__ import annotations

import argparse
import configparser
import csv
import difflib
import hashlib
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from .attention import ConfigError, ModelConfig
from .datasets import make_dataset
from .gradcheck import run_gradcheck
from .manifold import TASKS, ConvergenceModel, ManifoldSpec, convergence_curve, fit_slope, spectral_convergence
from .numcore import GTXError
from .selftest import run_selftest
from .terrain import load_dem, load_fixture, terrain_model_config, terrain_transfer
from .train import GRID_HEADER, VARIANTS, AblationResult, RunRecord, TrainConfig, accuracy, train_model

log = logging.getLogger("gtx")

COMMANDS = ("convergence", "transfer-grid", "ablation", "terrain", "gradcheck", "selftest")
TIMING_KEYS = ("wallclock_s", "epoch_seconds")
GRADCHECK_TOL = 1e-4


def _ints(s):
    return [int(v) for v in s.replace(",", " ").split()]


def _floats(s):
    return [float(v) for v in s.replace(",", " ").split()]


def _strs(s):
    return [v for v in s.replace(",", " ").split()]


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_float(s):
    return None if s.strip().lower() in ("", "none") else float(s)


_MODEL_TYPES = {f.name: f.type for f in fields(ModelConfig)}
_PARSERS = {"int": int, "float": float, "str": str, "bool": _bool, "float | None": _opt_float}

# section -> key -> (parser, default); a default of None means "use the library default"
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {"seed": (int, 0)},
    "convergence": {
        "manifold": (str, "circle"),
        "tasks": (_strs, ",".join(TASKS)),
        "n_grid": (_ints, "128,256,512,1024,2048"),
        "seeds": (_ints, "0,1,2,3,4,5,6,7"),
        "quad_size": (int, 16384),
        "modes": (int, 7),
        "pe_dim": (int, 4),
        "order": (int, 3),
        "radius": (float, 0.8),
        "bandwidth_scale": (float, 0.25),
        "spectral": (_bool, True),
        "spectral_n_grid": (_ints, "256,512,1024,2048"),
    },
    "data": {
        "dataset": (str, "community"),
        "n": (int, 4000),
        "data_seed": (int, 0),
        "radius": (_opt_float, None),
        "noise": (_opt_float, None),
    },
    "model": {k: (_PARSERS[t], None) for k, t in _MODEL_TYPES.items()
              if k not in ("in_dim", "out_dim", "task", "seed") and t in _PARSERS},
    "train": {
        "lr": (float, 1e-2),
        "max_epochs": (int, 200),
        "patience": (int, 30),
        "weight_decay": (float, 0.0),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "adam_eps": (float, 1e-8),
        "op_norm_budget": (_opt_float, None),
    },
    "grid": {
        "models": (_strs, "sparse_gt"),
        "train_fractions": (_floats, "0.25,0.5,1.0"),
        "test_fractions": (_floats, "1.0"),
        "seeds": (_ints, "0,1,2,3,4"),
    },
    "ablation": {
        "variants": (_strs, ",".join(VARIANTS)),
        "seeds": (_ints, "0,1,2,3,4"),
        "alpha": (float, 0.3),
        "expander_degree": (int, 3),
    },
    "terrain": {
        "dem": (str, "fixture"),
        "strides": (_ints, "1,2,3,4"),
        "n_sources": (int, 100),
        "n_targets": (int, 50),
        "eval_sources": (int, 100),
        "eval_targets": (int, 50),
    },
    "gradcheck": {"step": (float, 1e-6)},
}


class Config:
    """Parsed INI file: typed values plus the set of keys the user wrote."""

    def __init__(self, values: dict, explicit: dict, text: str):
        self.values = values
        self.explicit = explicit
        self.text = text

    def __getitem__(self, section):
        return self.values[section]

    def overrides(self, section) -> dict:
        return {k: self.values[section][k] for k in self.explicit.get(section, ())}


def parse_config(text: str, source: str = "<config>") -> Config:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as err:
        raise ConfigError(f"{source}: {err}") from None
    values, explicit = {}, {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]; known: {', '.join(SCHEMA)}")
        for key in cp[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]; known: "
                                  f"{', '.join(SCHEMA[section])}")
    for section, keys in SCHEMA.items():
        values[section] = {}
        explicit[section] = []
        for key, (parse, default) in keys.items():
            raw = cp.get(section, key, fallback=None) if cp.has_section(section) else None
            if raw is None:
                values[section][key] = parse(default) if isinstance(default, str) else default
                continue
            try:
                values[section][key] = parse(raw)
            except ValueError as err:
                raise ConfigError(f"{source}: [{section}] {key} = {raw!r}: {err}") from None
            explicit[section].append(key)
    return Config(values, explicit, text)


def load_config(path) -> Config:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), str(p))


def _echo(cfg: Config, command: str) -> str:
    """Canonical, fully defaulted rendering of the run configuration."""
    lines = [f"# command = {command}"]
    for section, vals in cfg.values.items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {json.dumps(v)}" for k, v in vals.items()]
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# manifest


def _canonical_bytes(path: Path) -> bytes:
    """File content with wall-clock fields removed so identical runs hash identically."""
    data = path.read_bytes()
    if path.name == "timing.json":
        return b""
    if path.suffix == ".csv":
        rows = list(csv.reader(io.StringIO(data.decode())))
        if rows and any(k in rows[0] for k in TIMING_KEYS):
            keep = [i for i, h in enumerate(rows[0]) if h not in TIMING_KEYS]
            buf = io.StringIO()
            csv.writer(buf, lineterminator="\n").writerows([[r[i] for i in keep] for r in rows])
            return buf.getvalue().encode()
    if path.suffix == ".jsonl":
        out = []
        for line in data.decode().splitlines():
            if line.strip():
                obj = json.loads(line)
                _strip_timing(obj)
                out.append(json.dumps(obj, sort_keys=True))
        return "\n".join(sorted(out)).encode()
    return data


def _strip_timing(obj):
    if isinstance(obj, dict):
        for k in TIMING_KEYS:
            obj.pop(k, None)
        for v in obj.values():
            _strip_timing(v)
    elif isinstance(obj, list):
        for v in obj:
            _strip_timing(v)


def write_manifest(out: Path) -> None:
    entries = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "MANIFEST":
            rel = p.relative_to(out).as_posix()
            entries.append(f"{hashlib.sha256(_canonical_bytes(p)).hexdigest()}  {rel}")
    (out / "MANIFEST").write_text("\n".join(entries) + "\n")


def verify_manifest(out: Path) -> list[str]:
    """Problems found comparing files to the manifest (empty list when consistent)."""
    man = out / "MANIFEST"
    if not man.is_file():
        return ["MANIFEST is missing"]
    problems = []
    for line in man.read_text().splitlines():
        digest, _, rel = line.partition("  ")
        p = out / rel
        if not p.is_file():
            problems.append(f"{rel}: listed in MANIFEST but missing")
        elif hashlib.sha256(_canonical_bytes(p)).hexdigest() != digest:
            problems.append(f"{rel}: content does not match MANIFEST hash")
    return problems


# ---------------------------------------------------------------------------
# report


def _read_csv(path: Path, required: list[str], numeric: tuple = ()) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in required if c not in (reader.fieldnames or [])]
            if missing:
                raise ConfigError(f"{path.name}: missing columns {missing}")
            rows = list(reader)
    except (OSError, csv.Error, UnicodeDecodeError) as err:
        raise ConfigError(f"{path.name}: unreadable ({err})") from None
    for line, r in enumerate(rows, start=2):
        for c in numeric:
            try:
                float(r[c])
            except (TypeError, ValueError):
                raise ConfigError(f"{path.name}:{line}: column {c!r} is not a number: {r[c]!r}") from None
    return rows


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def emit_report(out) -> tuple[str, int]:
    """Turn the CSVs of a finished run into plot-ready series and a text report.

    Returns ``(report_text, exit_code)``; the code is nonzero when the
    manifest does not match or a grid run produced no rows.
    """
    out = Path(out)
    problems = verify_manifest(out)
    if problems:
        return "report aborted:\n" + "\n".join(problems), 2
    try:
        text, code = _report_body(out)
    except ConfigError as err:
        return f"report aborted: {err}\n", 2
    (out / "report.txt").write_text(text)
    return text, code


def _report_body(out: Path) -> tuple[str, int]:
    lines, code = [], 0
    if (out / "curve_summary.csv").is_file():
        rows = _read_csv(out / "curve_summary.csv", ["task", "N", "median", "iqr", "fit_slope"],
                         ("N", "median", "fit_slope"))
        _write_rows(out / "plot_convergence.csv", ["series", "x", "y"],
                    [(r["task"], r["N"], r["median"]) for r in rows])
        for task in dict.fromkeys(r["task"] for r in rows):
            sel = [r for r in rows if r["task"] == task]
            meds = ", ".join(f"{r['N']}: {float(r['median']):.4g}" for r in sel)
            lines.append(f"{task}: median error {meds}; fit slope {float(sel[0]['fit_slope']):.3f}")
    if (out / "spectrum.csv").is_file():
        rows = _read_csv(out / "spectrum.csv", ["N", "seed", "error"], ("N", "error"))
        ns = sorted({int(r["N"]) for r in rows})
        meds = [float(np.median([float(r["error"]) for r in rows if int(r["N"]) == n])) for n in ns]
        lines.append("spectrum: median relative error " + ", ".join(f"{n}: {m:.4g}" for n, m in zip(ns, meds)))
    if (out / "grid.csv").is_file():
        rows = _read_csv(out / "grid.csv", GRID_HEADER, ("alpha_train", "metric"))
        lines.append(f"grid: {len(rows)} rows")
        if not rows:
            code = 1
        cells = {}
        for r in rows:
            cells.setdefault((f"{r['model']} test={r['alpha_test']}", float(r["alpha_train"])), []).append(
                float(r["metric"]))
        plot = [(s, a, repr(float(np.median(v)))) for (s, a), v in sorted(cells.items())]
        _write_rows(out / "plot_transfer.csv", ["series", "x", "y"], plot)
        lines += [f"  {s} alpha_train={a}: median accuracy {float(y):.4f}" for s, a, y in plot]
    if (out / "ablation.csv").is_file():
        rows = _read_csv(out / "ablation.csv", ["variant", "metric", "pct_vs_baseline"], ("metric",))
        width = max([len(VARIANTS.get(r["variant"], (r["variant"],))[0]) for r in rows] + [1])
        table = [f"{VARIANTS.get(r['variant'], (r['variant'],))[0]:<{width}}  {r['metric']:>6}  "
                 f"{r['pct_vs_baseline']:>8}" for r in rows]
        (out / "plot_ablation.txt").write_text("\n".join(table) + "\n")
        lines += ["ablation:"] + [f"  {t}" for t in table]
    if (out / "terrain.csv").is_file():
        rows = _read_csv(out / "terrain.csv", ["stride", "mae", "baseline_mae"], ("mae", "baseline_mae"))
        plot = [("model", r["stride"], r["mae"]) for r in rows]
        plot += [("euclidean", r["stride"], r["baseline_mae"]) for r in rows]
        _write_rows(out / "plot_terrain.csv", ["series", "x", "y"], plot)
        lines += [f"terrain stride {r['stride']}: MAE {float(r['mae']):.4f} "
                  f"(euclidean {float(r['baseline_mae']):.4f})" for r in rows]
    for name in ("gradcheck.csv", "selftest.csv"):
        if (out / name).is_file():
            rows = _read_csv(out / name, ["status"])
            bad = [r for r in rows if r.get("status") != "pass"]
            lines.append(f"{name[:-4]}: {len(rows) - len(bad)}/{len(rows)} pass")
    return "\n".join(lines) + "\n", code


# ---------------------------------------------------------------------------
# commands


def _train_cfg(cfg: Config, seed: int = 0) -> TrainConfig:
    return TrainConfig(seed=seed, **cfg["train"])


def _cell_seed(root: int, seed: int) -> int:
    return (root << 16) + seed


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


class Journal:
    """Append-only JSONL of finished cells, so ``--resume`` can skip them."""

    def __init__(self, path: Path):
        self.path = path
        self.done = {}
        if path.is_file():
            for line in path.read_text().splitlines():
                if line.strip():
                    obj = json.loads(line)
                    self.done[tuple(obj["key"])] = obj

    def add(self, key, payload: dict) -> None:
        obj = {"key": list(key), **payload}
        self.done[tuple(key)] = obj
        with open(self.path, "a") as fh:
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def _dataset(cfg: Config):
    d = cfg["data"]
    kw = {"n": d["n"], "seed": d["data_seed"]}
    kw.update({k: d[k] for k in ("radius", "noise") if d[k] is not None})
    return make_dataset(d["dataset"], **kw)


def _base_model(cfg: Config, ds, **extra) -> ModelConfig:
    over = {"mode": "sparse_gt", **extra, **cfg.overrides("model")}
    return ModelConfig(in_dim=ds.in_dim, out_dim=ds.num_classes, task="classify", **over)


def cmd_convergence(cfg: Config, out: Path, root: int, threads: int, resume: bool) -> dict:
    c = cfg["convergence"]
    spec = ManifoldSpec(c["manifold"])
    bad = [t for t in c["tasks"] if t not in TASKS]
    if bad:
        raise ConfigError(f"unknown convergence tasks {bad}; choose from {list(TASKS)}")
    summary = {}
    if c["spectral"]:
        rows = spectral_convergence(spec, c["spectral_n_grid"], c["seeds"], scale=c["bandwidth_scale"])
        _write_rows(out / "spectrum.csv", ["N", "seed", "error"], [(r["N"], r["seed"], repr(r["error"])) for r in rows])
        summary["spectrum_median"] = {str(n): float(np.median([r["error"] for r in rows if r["N"] == n]))
                                      for n in c["spectral_n_grid"]}
    model = ConvergenceModel.random(spec, root, modes=c["modes"], pe_dim=c["pe_dim"], order=c["order"],
                                    d_head=c["pe_dim"], radius=c["radius"], bandwidth_scale=c["bandwidth_scale"])
    curves = _map(lambda t: convergence_curve(t, model, c["n_grid"], c["seeds"], quad_size=c["quad_size"]),
                  c["tasks"], threads)
    all_rows, all_summary = [], []
    for res in curves:
        all_rows += res.rows
        all_summary += res.summary()
        med = res.medians()
        summary[res.task] = {"median": {str(n): m for n, m in med.items()},
                             "fit_slope": fit_slope(list(med), list(med.values()))}
    _write_rows(out / "curves.csv", ["task", "N", "seed", "error"], [(t, n, s, repr(e)) for t, n, s, e in all_rows])
    _write_rows(out / "curve_summary.csv", ["task", "N", "median", "iqr", "fit_slope"],
                [(t, n, repr(m), repr(q), repr(s)) for t, n, m, q, s in all_summary])
    return summary


def _grid_cell(model_cfg, ds, alpha, seed, test_fractions, train_cfg):
    model, rec = train_model(model_cfg, ds.train_data(alpha, seed), replace(train_cfg, seed=seed))
    tests = []
    for b in test_fractions:
        g, x, y = ds.test_data(b, seed)
        tests.append([b, accuracy(model.forward(g, x), y)])
    return rec, tests


def cmd_transfer_grid(cfg: Config, out: Path, root: int, threads: int, resume: bool) -> dict:
    gcfg = cfg["grid"]
    ds = _dataset(cfg)
    journal = Journal(out / "cells.jsonl")
    base_train = _train_cfg(cfg)
    todo = []
    for m in gcfg["models"]:
        extra = {"use_pe": False} if m == "mlp_baseline" else {}
        mcfg = replace(_base_model(cfg, ds, **extra), mode=m)
        for a in gcfg["train_fractions"]:
            for s in gcfg["seeds"]:
                key = (m, a, s)
                if key not in journal.done:
                    todo.append((key, mcfg))

    def run(item):
        (m, a, s), mcfg = item
        try:
            rec, tests = _grid_cell(mcfg, ds, a, _cell_seed(root, s), gcfg["test_fractions"], base_train)
        except GTXError as err:
            log.warning("cell %s alpha_train=%s seed=%s failed: %s", m, a, s, err)
            return (m, a, s), {"status": "failed", "error": str(err)}
        return (m, a, s), {"status": rec.status, "record": json.loads(rec.to_json()), "tests": tests}

    log.info("transfer-grid: %d cells to run, %d already done", len(todo), len(journal.done))
    for key, payload in _map(run, todo, threads):
        journal.add(key, payload)
    return _finish_grid(out, journal, gcfg)


def _finish_grid(out: Path, journal: Journal, gcfg: dict) -> dict:
    rows, failures, timing = [], [], {}
    order = {m: i for i, m in enumerate(gcfg["models"])}
    cells = sorted(journal.done.values(), key=lambda o: (order.get(o["key"][0], 99), o["key"][1], o["key"][2]))
    with open(out / "records.jsonl", "w") as fh:
        for obj in cells:
            m, a, s = obj["key"]
            if obj["status"] == "failed":
                failures.append(obj["key"] + [obj["error"]])
                continue
            rec = RunRecord(**obj["record"])
            fh.write(rec.to_json() + "\n")
            timing.setdefault(m, {}).setdefault(str(a), []).append(rec.mean_epoch_seconds)
            rows += [(m, repr(a), repr(b), s, repr(v), repr(rec.wallclock_s)) for b, v in obj["tests"]]
    _write_rows(out / "grid.csv", GRID_HEADER, rows)
    epoch = {m: {a: float(np.median(v)) for a, v in d.items()} for m, d in timing.items()}
    (out / "timing.json").write_text(json.dumps({"median_epoch_seconds": epoch}, indent=2, sort_keys=True) + "\n")
    return {"rows": len(rows), "failed_cells": failures}


def cmd_ablation(cfg: Config, out: Path, root: int, threads: int, resume: bool) -> dict:
    acfg = cfg["ablation"]
    unknown = [v for v in acfg["variants"] if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown ablation variants {unknown}; choose from {list(VARIANTS)}")
    ds = _dataset(cfg)
    base = _base_model(cfg, ds)
    journal = Journal(out / "cells.jsonl")
    train_cfg = _train_cfg(cfg)
    todo = [(v, s) for v in acfg["variants"] for s in acfg["seeds"] if (v, s) not in journal.done]

    def run(item):
        v, s = item
        over = dict(VARIANTS[v][1])
        over.setdefault("expander_degree", acfg["expander_degree"])
        seed = _cell_seed(root, s)
        model, rec = train_model(replace(base, **over), ds.train_data(acfg["alpha"], seed),
                                 replace(train_cfg, seed=seed))
        g, x, y = ds.test_data(1.0, seed)
        return (v, s), {"metric": accuracy(model.forward(g, x), y), "record": json.loads(rec.to_json())}

    for key, payload in _map(run, todo, threads):
        journal.add(key, payload)
    res = AblationResult(list(acfg["variants"]))
    seeds_rows = []
    for v in acfg["variants"]:
        res.per_seed[v] = [journal.done[(v, s)]["metric"] for s in acfg["seeds"]]
        seeds_rows += [(v, s, repr(m)) for s, m in zip(acfg["seeds"], res.per_seed[v])]
    res.write(out / "ablation.csv")
    _write_rows(out / "ablation_seeds.csv", ["variant", "seed", "metric"], seeds_rows)
    with open(out / "records.jsonl", "w") as fh:
        for v in acfg["variants"]:
            for s in acfg["seeds"]:
                fh.write(json.dumps(journal.done[(v, s)]["record"], sort_keys=True) + "\n")
    return {"table": res.render().splitlines(), "medians": {v: res.median(v) for v in res.variants}}


def cmd_terrain(cfg: Config, out: Path, root: int, threads: int, resume: bool) -> dict:
    t = cfg["terrain"]
    grid = load_fixture() if t["dem"] == "fixture" else load_dem(t["dem"])
    mcfg = terrain_model_config(**cfg.overrides("model"))
    train_cfg = _train_cfg(cfg, seed=root)
    if "max_epochs" not in cfg.explicit["train"]:
        train_cfg = replace(train_cfg, max_epochs=300)
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    rows = terrain_transfer(grid, t["strides"], mcfg, train_cfg, n_sources=t["n_sources"], n_targets=t["n_targets"],
                            eval_sources=t["eval_sources"], eval_targets=t["eval_targets"], checkpoint_dir=ckpt)
    header = ["stride", "nodes", "mae", "rmse", "relative_error", "baseline_mae"]
    _write_rows(out / "terrain.csv", header, [[getattr(r, h) if h in ("stride", "nodes") else repr(getattr(r, h))
                                               for h in header] for r in rows])
    return {"rows": [asdict(r) for r in rows]}


def cmd_gradcheck(cfg: Config, out: Path, root: int, threads: int, resume: bool) -> dict:
    rows = run_gradcheck(root, cfg["gradcheck"]["step"])
    _write_rows(out / "gradcheck.csv", ["operation", "max_rel_error", "status"],
                [(n, repr(e), "pass" if e < GRADCHECK_TOL else "fail") for n, e in rows])
    worst = max(rows, key=lambda r: r[1])
    return {"checks": len(rows), "worst": list(worst), "failed": [n for n, e in rows if not e < GRADCHECK_TOL]}


def cmd_selftest(cfg: Config, out: Path, root: int, threads: int, resume: bool) -> dict:
    rows = run_selftest(root)
    _write_rows(out / "selftest.csv", ["check", "status", "detail"],
                [(n, "pass" if ok else "fail", d) for n, ok, d in rows])
    return {"checks": len(rows), "failed": [n for n, ok, _ in rows if not ok]}


HANDLERS = {
    "convergence": cmd_convergence,
    "transfer-grid": cmd_transfer_grid,
    "ablation": cmd_ablation,
    "terrain": cmd_terrain,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def _threads(arg: int | None) -> int:
    if arg is not None:
        n = arg
    else:
        env = os.environ.get("GTX_THREADS", "1")
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"GTX_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise ConfigError(f"thread count must be >= 1, got {n}")
    return n


def _prepare_out(out: Path, echo: str, resume: bool) -> None:
    echo_path = out / "config_echo.ini"
    if out.exists() and any(out.iterdir()):
        if not resume:
            raise ConfigError(f"output directory {out} is not empty; pass --resume to continue a run")
        if echo_path.is_file() and echo_path.read_text() != echo:
            diff = "".join(difflib.unified_diff(echo_path.read_text().splitlines(True), echo.splitlines(True),
                                                "previous", "requested"))
            raise ConfigError(f"refusing to resume: configuration differs from the previous run\n{diff}")
    out.mkdir(parents=True, exist_ok=True)
    echo_path.write_text(echo)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gtx", description="Graph transformer experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="INI configuration file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="root seed (overrides [run] seed)")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: GTX_THREADS or 1)")
    p.add_argument("--resume", action="store_true", help="continue a run in a non-empty output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.values["run"]["seed"] = args.seed
        threads = _threads(args.threads)
        _prepare_out(out, _echo(cfg, args.command), args.resume)
        t0 = time.perf_counter()
        summary = HANDLERS[args.command](cfg, out, cfg["run"]["seed"], threads, args.resume)
        elapsed = time.perf_counter() - t0
    except GTXError as err:
        print(f"gtx: error: {err}", file=sys.stderr)
        return 2
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")
    timing = out / "timing.json"
    prev = json.loads(timing.read_text()) if timing.is_file() else {}
    timing.write_text(json.dumps({**prev, "command_seconds": elapsed}, indent=2, sort_keys=True) + "\n")
    write_manifest(out)
    report, code = emit_report(out)
    write_manifest(out)
    print(report, end="")
    if summary.get("failed"):
        print(f"gtx: {args.command} failures: {', '.join(summary['failed'])}", file=sys.stderr)
        return 1
    return code


if __name__ == "__main__":
    sys.exit(main())
