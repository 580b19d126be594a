"""Watch a frozen transformer on sampled circles approach its continuum limit.

Run:  python demos/circle_convergence.py
"""
from gtx.manifold import ConvergenceModel, ManifoldSpec, convergence_curve

circle = ManifoldSpec("circle")
model = ConvergenceModel.random(circle, 0)
for task in ("gt_vs_mt", "sparse_gt_vs_restricted_mt"):
    res = convergence_curve(task, model, [128, 256, 512, 1024], seeds=range(4), quad_size=8192)
    med = res.medians()
    print(task, "  ".join(f"N={n}: {e:.4f}" for n, e in med.items()))
