"""
A small federation end to end
=============================

Pretrain a frozen backbone, then compare prompt-only federation with and
without the imbalance correction, and full-model averaging.  Takes a
minute or so on one core.
"""

from dataclasses import replace

from fed3d.config import ExperimentConfig
from fed3d.experiment import compare, pretrain_backbone, prepare_data, run_experiment, summary
from fed3d.federation import comm_report

cfg = ExperimentConfig(clients=8, client_fraction=0.5, rounds=10, local_epochs=2, samples_per_class=30,
                       lr_prompt=0.005, lr_head=0.01, imbalance_ratio=9.0, pretrain_epochs=20)

split, checkpoint, heldout = pretrain_backbone(cfg)
print(f"backbone held-out accuracy {heldout:.3f}")

data = prepare_data(cfg)
print("client sizes:", [len(ix) for ix in data.plan.client_indices])

runs = {
    "fed3d": replace(cfg, correction="local_global"),
    "fed3d-off": replace(cfg, correction="off"),
    "fedavg-full": replace(cfg, mode="fedavg-full"),
}
summaries = []
for name, c in runs.items():
    res = run_experiment(c, checkpoint, data)
    rep = comm_report(res)
    print(f"{name:12s} acc {res.metrics[-1].accuracy:.3f}  bytes {rep.up_bytes + rep.down_bytes:>10d}"
          f"  params/round ratio {rep.ratio_vs_full:.3f}")
    summaries.append(summary(c, res, data))

text, _ = compare(summaries, list(runs))
print(text)
