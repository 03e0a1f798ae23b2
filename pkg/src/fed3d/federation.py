"""Server/client protocol: selection, local training, aggregation, accounting.

Clients and the server only exchange serialized payloads. The server keeps
its global state at wire precision, so what it evaluates is exactly what the
clients receive.
"""

from __future__ import annotations

import hashlib
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from fed3d.correction import ABSENT, CorrectionState, StatsAccumulator
from fed3d.detector import Census, ModelSplit, parameter_census
from fed3d.training import ClientData, evaluate, make_optimizer, train_epochs
from fed3d.wire import Payload, deserialize_payload, serialize_payload

log = logging.getLogger(__name__)

MODES = ("fed3d", "fedavg-full", "local-only", "centralized")
CORRECTIONS = ("off", "local", "local_global")


class ProtocolError(RuntimeError):
    pass


class RoundAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainSettings:
    local_epochs: int = 4
    batch_size: int = 8
    lr_prompt: float = 3.5e-4
    lr_head: float = 7.0e-4
    optimizer: str = "sgd"
    weight_decay: float = 0.01
    correction: str = "local_global"
    seed: int = 0


# ---------------------------------------------------------------- selection


def n_selected(alpha: float, C: int) -> int:
    if not 0 < alpha <= 1:
        raise ValueError(f"client fraction must lie in (0, 1], got {alpha}")
    return max(1, int(math.floor(alpha * C + 0.5)))


def select_clients(seed: int, round_index: int, alpha: float, C: int) -> list[int]:
    """``round(alpha C)`` distinct clients, uniform without replacement, ascending."""
    S = n_selected(alpha, C)
    rng = np.random.default_rng([seed, round_index, 101])
    return sorted(int(c) for c in rng.choice(C, size=S, replace=False))


# ---------------------------------------------------------------- payloads


def payload_from_split(split: ModelSplit, class_stats=None) -> Payload:
    d = split.dims
    prompts, rest = split.communicated_params()
    L, H, p = (d.n_layers, d.n_heads, d.prompt_len) if prompts else (d.n_layers, d.n_heads, 0)
    if not prompts:
        prompts_arr = [np.zeros((0, d.d_head)) for _ in range(L * H * 2)]
    else:
        prompts_arr = [t.data.copy() for t in prompts]
    return Payload(L, H, p, d.d_head, d.n_classes, prompts_arr, [t.data.copy() for t in rest],
                   None if class_stats is None else np.asarray(class_stats, dtype=np.float64))


def load_payload(split: ModelSplit, payload: Payload) -> None:
    """Overwrite the split's communicated parameters with payload values."""
    prompts, rest = split.communicated_params()
    targets = prompts + rest
    values = (payload.prompts if prompts else []) + list(payload.head or [])
    if len(targets) != len(values):
        raise ProtocolError(f"payload carries {len(values)} tensors, model expects {len(targets)}")
    for t, v in zip(targets, values):
        if t.shape != v.shape:
            raise ProtocolError(f"tensor {t.name}: payload shape {v.shape} != model shape {t.shape}")
        t.data[...] = v


def wire_roundtrip(payload: Payload) -> Payload:
    return deserialize_payload(serialize_payload(payload))


def aggregate(entries) -> Payload:
    """Data-size weighted mean of client payloads.

    ``entries`` holds ``(client_id, payload, n_samples)``. The reduction runs in
    ascending client id order. Class statistics are not averaged.
    """
    entries = sorted(entries, key=lambda e: e[0])
    if not entries:
        raise ProtocolError("nothing to aggregate")
    ref_id, ref, _ = entries[0]
    for cid, pl, n in entries:
        mine, theirs = pl.tensors(), ref.tensors()
        if len(mine) != len(theirs) or any(a.shape != b.shape for a, b in zip(mine, theirs)):
            raise ProtocolError(f"client {cid} sent a payload whose layout differs from client {ref_id}")
        if n <= 0:
            raise ProtocolError(f"client {cid} reported {n} samples")
    total = float(sum(n for _, _, n in entries))
    weights = [n / total for _, _, n in entries]
    acc = [np.zeros_like(t) for t in ref.tensors()]
    for w, (_, pl, _) in zip(weights, entries):
        for a, t in zip(acc, pl.tensors()):
            a += w * t
    k = len(ref.prompts)
    return Payload(ref.n_layers, ref.n_heads, ref.prompt_len, ref.d_head, ref.n_classes,
                   acc[:k], acc[k:] if ref.head is not None else None, None)


# ---------------------------------------------------------------- local side


def client_rng(seed: int, round_index: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, round_index, client_id, 11])


def local_train(split: ModelSplit, data: ClientData, global_payload: Payload, global_coeffs,
                settings: TrainSettings, round_index: int, client_id: int) -> Payload:
    """One client's session: start from the broadcast state, train, report.

    Returns the updated trainables with the per-class gradient statistics of
    the final epoch attached (all absent when ``local_epochs`` is 0).
    """
    load_payload(split, global_payload)
    O = split.dims.n_classes
    if settings.local_epochs <= 0:
        log.info("client %d: zero local epochs, returning the broadcast state", client_id)
        return payload_from_split(split, np.full(O, ABSENT))
    if len(data) == 0:
        raise RoundAborted(f"client {client_id} has no data")
    opt = make_optimizer(settings.optimizer, split, settings.lr_prompt, settings.lr_head, settings.weight_decay)
    acc = StatsAccumulator(O)
    train_epochs(split, data, settings.local_epochs, settings.batch_size, opt,
                 client_rng(settings.seed, round_index, client_id), settings.correction,
                 global_coeffs, acc)
    return payload_from_split(split, acc.result())


# ---------------------------------------------------------------- worker pool

_WORKER: dict = {}


def _worker_init(split, clients, settings):
    _WORKER.update(split=split, clients=clients, settings=settings)


def _worker_task(args):
    client_id, round_index, down, coeffs = args
    w = _WORKER
    payload = local_train(w["split"], w["clients"][client_id], deserialize_payload(down), coeffs,
                          w["settings"], round_index, client_id)
    return client_id, serialize_payload(payload)


# ---------------------------------------------------------------- server loop


@dataclass
class RoundMetrics:
    round: int
    accuracy: float
    macro_recall: float
    per_class_recall: np.ndarray
    up_bytes: int
    down_bytes: int
    up_params: int
    down_params: int
    selected: list[int]
    wall_time: float
    global_coeffs: np.ndarray


@dataclass
class FederationResult:
    mode: str
    final: Payload
    metrics: list[RoundMetrics]
    census: Census
    full_payload_bytes: int
    backbone_digest_before: str
    backbone_digest_after: str
    correction_state: CorrectionState
    final_split: ModelSplit = field(repr=False, default=None)

    @property
    def rounds(self) -> int:
        return len(self.metrics)


def backbone_digest(split: ModelSplit) -> str:
    h = hashlib.sha256()
    for p in split.backbone_params():
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def full_model_payload_bytes(split: ModelSplit) -> int:
    """Size of a payload carrying every parameter of ``split``."""
    d = split.dims
    everything = split.prompt_params() + split.backbone_params() + split.head_params()
    pl = Payload(d.n_layers, d.n_heads, 0, d.d_head, d.n_classes,
                 [np.zeros((0, d.d_head))] * (d.n_layers * d.n_heads * 2),
                 [p.data for p in everything], np.zeros(d.n_classes))
    return len(serialize_payload(pl))


def run_federation(split: ModelSplit, clients: list[ClientData], test: ClientData, *, alpha: float,
                   rounds: int, settings: TrainSettings, mode: str = "fed3d", workers: int = 1,
                   seed: int | None = None) -> FederationResult:
    """Drive ``rounds`` rounds of select / broadcast / local train / aggregate / refresh.

    ``split`` must already be configured for ``mode``: frozen backbone with
    prompts for ``fed3d``, ``local-only`` and ``centralized``; unfrozen and
    prompt-free for ``fedavg-full``. Client and test data must carry cached
    point features exactly when the point map is frozen.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    seed = settings.seed if seed is None else seed
    if mode == "fedavg-full":
        settings = replace(settings, correction="off")
    if mode == "centralized":
        return _run_centralized(split, clients, test, rounds=rounds, settings=settings)
    if mode == "local-only":
        return _run_local_only(split, clients, test, alpha=alpha, rounds=rounds, settings=settings, seed=seed)

    C = len(clients)
    O = split.dims.n_classes
    digest_before = backbone_digest(split)
    census = parameter_census(split)
    state = CorrectionState(O)
    global_pl = wire_roundtrip(payload_from_split(split))
    full_bytes = full_model_payload_bytes(split)
    metrics: list[RoundMetrics] = []

    pool = None
    if workers > 1:
        pool = ProcessPoolExecutor(max_workers=workers, initializer=_worker_init,
                                   initargs=(split, clients, settings))
    try:
        for z in range(1, rounds + 1):
            t0 = time.perf_counter()
            selected = select_clients(seed, z, alpha, C)
            down_pl = Payload(global_pl.n_layers, global_pl.n_heads, global_pl.prompt_len, global_pl.d_head,
                              O, global_pl.prompts, global_pl.head, state.global_coeffs.copy())
            down = serialize_payload(down_pl)
            coeffs = deserialize_payload(down).class_stats
            tasks = [(c, z, down, coeffs) for c in selected]
            try:
                if pool is None:
                    ups = {}
                    for c in selected:
                        pl = local_train(split, clients[c], deserialize_payload(down), coeffs, settings, z, c)
                        ups[c] = serialize_payload(pl)
                else:
                    ups = dict(pool.map(_worker_task, tasks))
            except Exception as exc:
                raise RoundAborted(f"round {z} aborted, no aggregation performed: {exc}") from exc

            received = {c: deserialize_payload(ups[c]) for c in selected}
            merged = aggregate([(c, received[c], len(clients[c])) for c in selected])
            global_pl = wire_roundtrip(merged)
            if settings.correction == "local_global":
                state.refresh({c: received[c].class_stats for c in selected})
            else:
                state.client_stats = {c: received[c].class_stats for c in selected}

            load_payload(split, global_pl)
            ev = evaluate(split, test)
            comm = census.communicated
            metrics.append(RoundMetrics(
                round=z, accuracy=ev.accuracy, macro_recall=ev.macro_recall, per_class_recall=ev.per_class_recall,
                up_bytes=sum(len(ups[c]) for c in selected), down_bytes=len(down) * len(selected),
                up_params=comm * len(selected), down_params=comm * len(selected), selected=selected,
                wall_time=time.perf_counter() - t0, global_coeffs=state.global_coeffs.copy()))
            log.info("round %d/%d acc=%.4f macro_recall=%.4f S=%d", z, rounds, ev.accuracy, ev.macro_recall,
                     len(selected))
    finally:
        if pool is not None:
            pool.shutdown()

    load_payload(split, global_pl)
    return FederationResult(mode, global_pl, metrics, census, full_bytes, digest_before, backbone_digest(split),
                            state, split)


def pooled_client(clients: list[ClientData], client_indices: list[np.ndarray] | None = None) -> ClientData:
    """Union of client datasets, deduplicated in first-appearance order."""
    if client_indices is None:
        pts = np.concatenate([c.points for c in clients])
        labels = np.concatenate([c.labels for c in clients])
        feats = None if clients[0].features is None else np.concatenate([c.features for c in clients])
        return ClientData(pts, labels, feats)
    seen: dict[int, tuple[int, int]] = {}
    for ci, idx in enumerate(client_indices):
        for j, gi in enumerate(idx):
            seen.setdefault(int(gi), (ci, j))
    picks = list(seen.values())
    pts = np.stack([clients[ci].points[j] for ci, j in picks])
    labels = np.array([clients[ci].labels[j] for ci, j in picks])
    feats = None
    if clients[0].features is not None:
        feats = np.stack([clients[ci].features[j] for ci, j in picks])
    return ClientData(pts, labels, feats)


def _run_centralized(split, clients, test, *, rounds, settings) -> FederationResult:
    """One party holding the pooled data trains for the same schedule; nothing is sent."""
    data = clients[0] if len(clients) == 1 else pooled_client(clients)
    O = split.dims.n_classes
    digest_before = backbone_digest(split)
    census = parameter_census(split)
    state = CorrectionState(O)
    metrics = []
    for z in range(1, rounds + 1):
        t0 = time.perf_counter()
        opt = make_optimizer(settings.optimizer, split, settings.lr_prompt, settings.lr_head, settings.weight_decay)
        acc = StatsAccumulator(O)
        train_epochs(split, data, settings.local_epochs, settings.batch_size, opt,
                     client_rng(settings.seed, z, 0), settings.correction, state.global_coeffs, acc)
        if settings.correction == "local_global" and settings.local_epochs > 0:
            state.refresh({0: acc.result()})
        ev = evaluate(split, test)
        metrics.append(RoundMetrics(z, ev.accuracy, ev.macro_recall, ev.per_class_recall, 0, 0, 0, 0, [0],
                                    time.perf_counter() - t0, state.global_coeffs.copy()))
    return FederationResult("centralized", payload_from_split(split), metrics, census,
                            full_model_payload_bytes(split), digest_before, backbone_digest(split), state, split)


def _run_local_only(split, clients, test, *, alpha, rounds, settings, seed) -> FederationResult:
    """Every client keeps its own model; reported accuracy is the mean over clients."""
    C = len(clients)
    O = split.dims.n_classes
    digest_before = backbone_digest(split)
    census = parameter_census(split)
    start = wire_roundtrip(payload_from_split(split))
    own = [start] * C
    ones = np.ones(O)
    metrics = []
    for z in range(1, rounds + 1):
        t0 = time.perf_counter()
        selected = select_clients(seed, z, alpha, C)
        for c in selected:
            own[c] = local_train(split, clients[c], own[c], ones, settings, z, c)
        evs = []
        for c in range(C):
            load_payload(split, own[c])
            evs.append(evaluate(split, test))
        recall = np.nanmean(np.stack([e.per_class_recall for e in evs]), axis=0)
        metrics.append(RoundMetrics(z, float(np.mean([e.accuracy for e in evs])),
                                    float(np.mean([e.macro_recall for e in evs])), recall, 0, 0, 0, 0,
                                    selected, time.perf_counter() - t0, ones.copy()))
    return FederationResult("local-only", own[0], metrics, census, full_model_payload_bytes(split),
                            digest_before, backbone_digest(split), CorrectionState(O), split)


# ---------------------------------------------------------------- accounting


@dataclass(frozen=True)
class CommReport:
    up_bytes: int
    down_bytes: int
    up_params: int
    down_params: int
    full_params: int
    full_bytes: int
    ratio_vs_full: float
    byte_ratio_vs_full: float


def comm_report(result: FederationResult) -> CommReport:
    """Totals over the run, and the ratio against sending every parameter instead.

    The parameter ratio is exact: each transmission of ``communicated``
    parameters is compared with one of ``census.total``.
    """
    up_b = sum(m.up_bytes for m in result.metrics)
    down_b = sum(m.down_bytes for m in result.metrics)
    up_p = sum(m.up_params for m in result.metrics)
    down_p = sum(m.down_params for m in result.metrics)
    sends = sum(2 * len(m.selected) for m in result.metrics) if up_p else 0
    full_p = sends * result.census.total
    full_b = sends * result.full_payload_bytes
    ratio = (up_p + down_p) / full_p if full_p else 0.0
    bratio = (up_b + down_b) / full_b if full_b else 0.0
    return CommReport(up_b, down_b, up_p, down_p, full_p, full_b, ratio, bratio)
