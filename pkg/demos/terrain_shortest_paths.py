"""Learn shortest-path distances on a coarse terrain grid, evaluate on the full grid.

Run:  python demos/terrain_shortest_paths.py
"""
from gtx.terrain import load_fixture, terrain_model_config, terrain_transfer
from gtx.train import TrainConfig

grid = load_fixture()
rows = terrain_transfer(grid, [2, 4], terrain_model_config(), TrainConfig(lr=0.01, max_epochs=300, patience=30),
                        n_sources=40, n_targets=30, eval_sources=40, eval_targets=30)
print("stride  nodes    MAE   euclidean MAE")
for r in rows:
    print(f"{r.stride:6d} {r.nodes:6d} {r.mae:6.3f} {r.baseline_mae:15.3f}")
