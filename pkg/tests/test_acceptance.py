"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``AC<n> PASS|FAIL`` line (visible without ``-s``)
and then asserts the same condition. The heavy criteria drive the shipped
configs through ``gtx.cli.main`` exactly as a user would.
"""
import csv
import json
import time
from pathlib import Path

import numpy as np
import pytest

from gtx import cli
from gtx.attention import GraphTransformer, ModelConfig
from gtx.graph import diameter
from gtx.pe import random_ids
from gtx.rng import substream
from gtx.selftest import bellman_ford, permute_graph, random_connected_graph
from gtx.terrain import dijkstra_spd

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def verdict(capsys):
    t0 = time.perf_counter()

    def report(tag, ok, detail):
        with capsys.disabled():
            print(f"\n{tag} {'PASS' if ok else 'FAIL'}  {detail}  [{time.perf_counter() - t0:.1f}s]")
        assert ok, f"{tag}: {detail}"

    return report


def gtx_run(command, config, out, *extra):
    t0 = time.perf_counter()
    code = cli.main([command, "--config", str(config), "--out", str(out), *map(str, extra)])
    return code, json.loads((out / "summary.json").read_text()), time.perf_counter() - t0


def derived_config(tmp_path, base, **sections):
    """Copy a shipped config, replacing or adding keys per section."""
    text = (CONFIGS / base).read_text()
    lines, current = [], None
    pending = {s: dict(kv) for s, kv in sections.items()}
    for line in text.splitlines():
        if line.startswith("["):
            if current in pending:
                lines[-1:-1] = [f"{k} = {v}" for k, v in pending.pop(current).items()]
            current = line.strip("[]")
        elif current in pending and "=" in line and line.split("=")[0].strip() in pending[current]:
            key = line.split("=")[0].strip()
            line = f"{key} = {pending[current].pop(key)}"
        lines.append(line)
    if current in pending:
        lines += [f"{k} = {v}" for k, v in pending.pop(current).items()]
    for s, kv in pending.items():
        lines += ["", f"[{s}]"] + [f"{k} = {v}" for k, v in kv.items()]
    path = tmp_path / base
    path.write_text("\n".join(lines) + "\n")
    return path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def model_cfg(mode, hops, seed):
    return ModelConfig(in_dim=3, out_dim=2, mode=mode, hops=hops, d_model=8, heads=2, d_ff=16, pe_hidden=4,
                       pe_dim=4, pe_samples=4, expander_degree=0, seed=seed)


@pytest.fixture(scope="module")
def convergence_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("convergence")
    code, summary, secs = gtx_run("convergence", CONFIGS / "convergence.ini", out)
    return code, summary, secs


def test_ac1_gradient_correctness(tmp_path, verdict):
    code, summary, secs = gtx_run("gradcheck", CONFIGS / "quick.ini", tmp_path / "o")
    names = {r["operation"] for r in rows(tmp_path / "o" / "gradcheck.csv")}
    name, worst = summary["worst"]
    ok = code == 0 and worst < 1e-4 and "sparse_gt_rpearl_forward" in names and secs < 120
    verdict("AC1", ok, f"{summary['checks']} checks, worst {name} {worst:.2e} (< 1e-4), {secs:.1f}s (< 120s)")


def test_ac2_dense_sparse_equivalence(verdict):
    rng = substream(0, "sampling", "acceptance-dense-sparse")
    worst, sizes = 0.0, []
    for t in range(20):
        g = random_connected_graph(int(rng.integers(4, 65)), float(rng.uniform(0.03, 0.2)), rng)
        k = diameter(g)
        x = rng.standard_normal((3, g.n))
        a = GraphTransformer(model_cfg("sparse_gt", k, t)).forward(g, x).data
        b = GraphTransformer(model_cfg("dense_gt", k, t)).forward(g, x).data
        worst = max(worst, float(np.abs(a - b).max()))
        sizes.append(g.n)
    verdict("AC2", worst <= 1e-9, f"20 graphs N in [{min(sizes)}, {max(sizes)}], max |sparse - dense| {worst:.1e}")


def test_ac3_permutation_equivariance(verdict):
    rng = substream(0, "sampling", "acceptance-permutation")
    worst = 0.0
    for t in range(50):
        g = random_connected_graph(int(rng.integers(5, 30)), 0.2, rng)
        model = GraphTransformer(model_cfg("sparse_gt", int(rng.integers(1, 4)), t))
        x = rng.standard_normal((3, g.n))
        ids = random_ids(model.pe, g.n)
        perm = rng.permutation(g.n)
        ref = model.forward(g, x, pe_ids=ids).data
        out = model.forward(permute_graph(g, perm), x[:, perm], pe_ids=ids[:, perm]).data
        worst = max(worst, float(np.abs(out - ref[:, perm]).max()))
    verdict("AC3", worst <= 1e-10, f"50 trials, max equivariance gap {worst:.1e}")


def test_ac4_spectral_convergence(tmp_path, verdict):
    cfg = derived_config(tmp_path, "convergence.ini", convergence={"tasks": "gt_vs_mt", "n_grid": "128"})
    code, summary, secs = gtx_run("convergence", cfg, tmp_path / "o")
    med = [summary["spectrum_median"][str(n)] for n in (256, 512, 1024, 2048)]
    decreasing = all(b < a for a, b in zip(med, med[1:]))
    ok = code == 0 and decreasing and med[-1] < 0.10 and secs < 300
    verdict("AC4", ok, "median rel. error " + " > ".join(f"{m:.3f}" for m in med) + f", final < 0.10, {secs:.0f}s")


def _decay(task, run, tag, verdict):
    code, summary, secs = run
    med = summary[task]["median"]
    first, last, slope = med["128"], med["2048"], summary[task]["fit_slope"]
    ok = code == 0 and last < 0.5 * first and slope < 0
    verdict(tag, ok, f"{task}: error(2048)={last:.4g} vs 0.5*error(128)={0.5 * first:.4g}, slope {slope:.2f}, "
                        f"convergence run {secs:.0f}s")


def test_ac5_gt_to_mt(convergence_run, verdict):
    _decay("gt_vs_mt", convergence_run, "AC5", verdict)


def test_ac6_sparse_gt_to_restricted_mt(convergence_run, verdict):
    _decay("sparse_gt_vs_restricted_mt", convergence_run, "AC6", verdict)


def test_ac7_transferability(tmp_path, verdict):
    code, summary, secs = gtx_run("transfer-grid", CONFIGS / "transfer.ini", tmp_path / "o")
    grid = rows(tmp_path / "o" / "grid.csv")
    acc = {a: np.median([float(r["metric"]) for r in grid if float(r["alpha_train"]) == a]) for a in (0.25, 1.0)}
    ratio = acc[0.25] / acc[1.0]
    ok = code == 0 and len(grid) == 3 * 1 * 5 and ratio >= 0.85 and secs < 1200
    verdict("AC7", ok, f"median acc alpha=0.25 {acc[0.25]:.3f} / alpha=1.0 {acc[1.0]:.3f} = {ratio:.3f} (>= 0.85), "
                       f"{len(grid)} rows, {secs:.0f}s")


def test_ac8_ablation_ordering(tmp_path, verdict):
    code, summary, _ = gtx_run("ablation", CONFIGS / "ablation.ini", tmp_path / "o")
    med = summary["medians"]
    ok = code == 0 and med["mask+rpearl"] >= med["mask"] >= med["no_pe"]
    verdict("AC8", ok, f"median acc mask+rpearl {med['mask+rpearl']:.4f} >= mask {med['mask']:.4f} "
                       f">= no_pe {med['no_pe']:.4f}")


def test_ac9_runtime_ordering(tmp_path, verdict):
    cfg = derived_config(tmp_path, "transfer.ini", grid={"models": "sparse_gt, dense_gt", "train_fractions": "1.0",
                                                         "seeds": "0"},
                         train={"max_epochs": "10", "patience": "10"})
    code, _, _ = gtx_run("transfer-grid", cfg, tmp_path / "o")
    epoch = json.loads((tmp_path / "o" / "timing.json").read_text())["median_epoch_seconds"]
    sparse, dense = epoch["sparse_gt"]["1.0"], epoch["dense_gt"]["1.0"]
    verdict("AC9", code == 0 and sparse < dense, f"alpha=1.0 epoch: sparse {sparse:.3f}s < dense {dense:.3f}s")


def test_ac10_terrain(tmp_path, verdict):
    t0 = time.perf_counter()
    exact = 0
    for seed in range(50):
        rng = substream(seed, "sampling", "acceptance-bellman-ford")
        g = random_connected_graph(int(rng.integers(5, 40)), 0.15, rng)
        src = int(rng.integers(g.n))
        exact += np.array_equal(dijkstra_spd(g, src), bellman_ford(g.n, g.edges(), src))
    cfg = derived_config(tmp_path, "terrain.ini", terrain={"strides": "1, 2"})
    code, summary, _ = gtx_run("terrain", cfg, tmp_path / "o")
    by = {r["stride"]: r for r in summary["rows"]}
    s1, s2 = by[1], by[2]
    secs = time.perf_counter() - t0
    ok = (code == 0 and exact == 50 and s2["mae"] <= 1.5 * s1["mae"] and s1["mae"] < s1["baseline_mae"]
          and s2["mae"] < s2["baseline_mae"] and secs < 900)
    verdict("AC10", ok, f"Dijkstra==Bellman-Ford {exact}/50; MAE stride2 {s2['mae']:.3f} <= 1.5*stride1 "
                        f"{1.5 * s1['mae']:.3f}; baseline {s1['baseline_mae']:.3f}; {secs:.0f}s")
