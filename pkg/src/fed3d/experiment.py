"""End-to-end experiment steps: data, backbone pretraining, runs, summaries."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from fed3d.config import ConfigError, ExperimentConfig
from fed3d.data import (
    Dataset,
    DatasetSpec,
    PartitionPlan,
    generate_dataset,
    inject_imbalance,
    partition_noniid,
    pick_minority_classes,
    pretext_spec,
)
from fed3d.detector import ModelSplit, build_model, parameter_census
from fed3d.federation import FederationResult, comm_report, run_federation
from fed3d.training import ClientData, cache_features, evaluate, make_optimizer, train_epochs
from fed3d.wire import Payload, deserialize_checkpoint, serialize_checkpoint, to_wire_precision

log = logging.getLogger(__name__)


class CheckpointMismatch(ConfigError):
    pass


def dataset_spec(cfg: ExperimentConfig) -> DatasetSpec:
    return DatasetSpec(cfg.n_classes, cfg.samples_per_class, cfg.n_points, cfg.noise, cfg.seed, cfg.prototype_seed)


@dataclass
class ExperimentData:
    dataset: Dataset
    plan: PartitionPlan
    minority: list[int]

    def digest(self) -> str:
        h = hashlib.sha256(self.dataset.digest().encode())
        for idx in self.plan.client_indices:
            h.update(np.asarray(idx, dtype="<i8").tobytes())
            h.update(b"|")
        return h.hexdigest()


def prepare_data(cfg: ExperimentConfig) -> ExperimentData:
    ds = generate_dataset(dataset_spec(cfg))
    plan = partition_noniid(ds, cfg.clients, cfg.class_fraction, cfg.sample_fraction, seed=cfg.seed,
                            strict_disjoint=cfg.strict_disjoint)
    minority: list[int] = []
    if cfg.imbalance_ratio > 1:
        count = cfg.minority_classes or cfg.n_classes // 2
        minority = pick_minority_classes(cfg.n_classes, cfg.seed, count)
        plan = inject_imbalance(plan, ds, minority, cfg.imbalance_ratio, seed=cfg.seed)
    return ExperimentData(ds, plan, minority)


# ---------------------------------------------------------------- backbone


def _full_payload(split: ModelSplit) -> Payload:
    d = split.dims
    tensors = [p.data.copy() for p in split.backbone_params() + split.head_params()]
    return Payload(d.n_layers, d.n_heads, 0, d.d_head, d.n_classes,
                   [np.zeros((0, d.d_head))] * (d.n_layers * d.n_heads * 2), tensors, None)


def pretrain_backbone(cfg: ExperimentConfig) -> tuple[ModelSplit, bytes, float]:
    """Train the prompt-free model centrally on a held-out balanced split.

    Returns the model, its checkpoint bytes and the held-out accuracy.
    """
    spec = pretext_spec(dataset_spec(cfg), cfg.pretrain_per_class)
    ds = generate_dataset(spec)
    split = build_model(cfg.dims(), cfg.seed, prompts=False)
    train = ClientData(ds.points[ds.train_idx], ds.labels[ds.train_idx])
    opt = make_optimizer("sgd", split, cfg.pretrain_lr, cfg.pretrain_lr)
    train_epochs(split, train, cfg.pretrain_epochs, cfg.pretrain_batch, opt, np.random.default_rng([cfg.seed, 23]))
    for p in split.all_params():
        p.data[...] = to_wire_precision(p.data)
    acc = evaluate(split, ClientData(ds.points[ds.test_idx], ds.labels[ds.test_idx])).accuracy
    log.info("pretrained backbone: held-out accuracy %.4f", acc)
    return split, serialize_checkpoint(_full_payload(split), 0), acc


def model_for_mode(cfg: ExperimentConfig, checkpoint: bytes) -> ModelSplit:
    """Rebuild the model from a backbone checkpoint and configure it for ``cfg.mode``.

    The classifier is freshly initialised; the backbone, the output projection
    and the positional table come from the checkpoint.
    """
    payload, _ = deserialize_checkpoint(checkpoint)
    dims = cfg.dims()
    split = build_model(dims, cfg.seed + 1, prompts=cfg.mode != "fedavg-full")
    targets = split.backbone_params() + split.head_params()
    if (payload.n_layers, payload.n_heads, payload.d_head, payload.n_classes) != (
            dims.n_layers, dims.n_heads, dims.d_head, dims.n_classes) or payload.head is None \
            or len(payload.head) != len(targets) \
            or any(t.shape != v.shape for t, v in zip(targets, payload.head)):
        raise CheckpointMismatch("backbone checkpoint does not match the configured model dimensions")
    for t, v in zip(targets[:-2], payload.head[:-2]):
        t.data[...] = v
    for p in split.all_params():
        p.data[...] = to_wire_precision(p.data)
    split.freeze_backbone(cfg.mode != "fedavg-full")
    return split


def client_datasets(split: ModelSplit, data: ExperimentData) -> tuple[list[ClientData], ClientData]:
    ds = data.dataset
    feats = cache_features(split, ds.points)

    def part(idx):
        return ClientData(ds.points[idx], ds.labels[idx], None if feats is None else feats[idx])

    return [part(ix) for ix in data.plan.client_indices], part(ds.test_idx)


def run_experiment(cfg: ExperimentConfig, checkpoint: bytes, data: ExperimentData | None = None) -> FederationResult:
    data = prepare_data(cfg) if data is None else data
    split = model_for_mode(cfg, checkpoint)
    clients, test = client_datasets(split, data)
    return run_federation(split, clients, test, alpha=cfg.client_fraction, rounds=cfg.rounds,
                          settings=cfg.train_settings(), mode=cfg.mode, workers=cfg.workers)


# ---------------------------------------------------------------- outputs


def metrics_csv(result: FederationResult, n_classes: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "accuracy", "macro_recall"] + [f"recall_{o}" for o in range(n_classes)]
               + ["up_bytes", "down_bytes", "up_params", "down_params"])
    for m in result.metrics:
        w.writerow([m.round, repr(m.accuracy), repr(m.macro_recall)]
                   + [repr(float(r)) for r in m.per_class_recall]
                   + [m.up_bytes, m.down_bytes, m.up_params, m.down_params])
    return buf.getvalue()


def _clean(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    return x


def summary(cfg: ExperimentConfig, result: FederationResult, data: ExperimentData) -> dict:
    last = result.metrics[-1]
    rep = comm_report(result)
    return {
        "mode": cfg.mode,
        "correction": cfg.correction if cfg.mode != "fedavg-full" else "off",
        "seed": cfg.seed,
        "rounds": result.rounds,
        "config_hash": cfg.digest(),
        "dataset_hash": data.digest(),
        "final": {
            "accuracy": last.accuracy,
            "macro_recall": last.macro_recall,
            "per_class_recall": [_clean(float(r)) for r in last.per_class_recall],
        },
        "comm": asdict(rep),
        "census": asdict(result.census),
        "minority_classes": data.minority,
        "backbone_unchanged": result.backbone_digest_before == result.backbone_digest_after,
    }


def write_run(cfg: ExperimentConfig, result: FederationResult, data: ExperimentData) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.to_text())
    (out / "metrics.csv").write_text(metrics_csv(result, cfg.n_classes))
    (out / "summary.json").write_text(json.dumps(summary(cfg, result, data), indent=2, sort_keys=True) + "\n")
    (out / "final.f3dp").write_bytes(serialize_checkpoint(result.final, result.rounds))
    return out


class CompareError(ValueError):
    pass


def compare(summaries: list[dict], names: list[str] | None = None) -> tuple[str, str]:
    """Side-by-side table (text and CSV) with deltas against the first summary."""
    if len(summaries) < 2:
        raise CompareError("need at least two summaries")
    hashes = {s["dataset_hash"] for s in summaries}
    if len(hashes) != 1:
        raise CompareError(f"summaries were produced on different datasets: {sorted(hashes)}")
    names = names or [f"run{i}" for i in range(len(summaries))]
    base = summaries[0]

    def total(s):
        return s["comm"]["up_bytes"] + s["comm"]["down_bytes"]

    header = ["name", "mode", "correction", "accuracy", "macro_recall", "comm_bytes",
              "d_accuracy", "d_macro_recall", "d_comm_bytes"]
    rows = []
    for n, s in zip(names, summaries):
        rows.append([n, s["mode"], s["correction"], s["final"]["accuracy"], s["final"]["macro_recall"], total(s),
                     s["final"]["accuracy"] - base["final"]["accuracy"],
                     s["final"]["macro_recall"] - base["final"]["macro_recall"], total(s) - total(base)])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    text = [f"{'name':<16}{'mode':<13}{'correction':<14}{'acc':>8}{'recall':>8}{'bytes':>12}"
            f"{'d_acc':>9}{'d_recall':>10}{'d_bytes':>12}"]
    for r in rows:
        text.append(f"{r[0]:<16}{r[1]:<13}{r[2]:<14}{r[3]:>8.4f}{r[4]:>8.4f}{r[5]:>12d}"
                    f"{r[6]:>+9.4f}{r[7]:>+10.4f}{r[8]:>+12d}")
    return "\n".join(text) + "\n", buf.getvalue()


def census_of(cfg: ExperimentConfig, checkpoint: bytes):
    return parameter_census(model_for_mode(cfg, checkpoint))
