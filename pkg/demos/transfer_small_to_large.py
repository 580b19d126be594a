"""Train a sparse graph transformer on a subsampled graph and test it on a larger one.

Run:  python demos/transfer_small_to_large.py
Takes a few seconds on one core.
"""
from gtx.attention import ModelConfig
from gtx.datasets import community_task
from gtx.train import TrainConfig, accuracy, train_model

ds = community_task(n=1500, seed=0)
cfg = ModelConfig(in_dim=ds.in_dim, out_dim=ds.num_classes, task="classify", mode="sparse_gt", hops=1,
                  d_model=16, heads=2, d_ff=32, use_pe=False, seed=0)
train_cfg = TrainConfig(lr=0.01, max_epochs=60, patience=20, seed=0)

for alpha in (0.25, 0.5, 1.0):
    data = ds.train_data(alpha, seed=0)
    model, rec = train_model(cfg, data, train_cfg)
    g, x, y = ds.test_data(1.0, seed=0)
    print(f"trained on {data.graph.n:5d} nodes (alpha={alpha:.2f}), "
          f"{len(rec.train_loss):3d} epochs -> test accuracy on {g.n} nodes: {accuracy(model.forward(g, x), y):.3f}")
