"""End-to-end training, evaluation and checkpoint persistence."""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import diffcore as dc
from .config import TrainConfig
from .convembed import forward_pipeline, init_params
from .datasynth import GraphPair
from .diffcore import ParamStore, Tape, Tensor
from .errors import (
    CheckpointCorruptError,
    CheckpointVersionError,
    ContractError,
    DegenerateRowError,
    DimensionError,
    NonFiniteError,
)
from .matchhead import (
    affinity_scores,
    argmax_discretize,
    hungarian_discretize,
    log_sinkhorn,
    loss_terms,
    truth_pairs,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GLMC"
CHECKPOINT_VERSION = 1


@dataclass
class TrainState:
    config: TrainConfig
    store: ParamStore
    epoch: int = 0
    history: list[dict] = field(default_factory=list)


@dataclass
class SampleResult:
    soft: Tensor
    loss: Tensor
    l_sol: Tensor
    l_con: Tensor


def forward_sample(pair: GraphPair, params: Mapping[str, Tensor], config: TrainConfig) -> SampleResult:
    """Embedding -> affinity -> Sinkhorn -> losses for one problem."""
    emb = forward_pipeline(pair, params, config)
    c = log_sinkhorn(affinity_scores(emb, params["affinity.m"], config.affinity_delta), config.sinkhorn_iters)
    total, sol, con = loss_terms(c, pair.truth, config.effective_lambda, config.ce_clamp)
    return SampleResult(c, total, sol, con)


def adam_update(param: np.ndarray, grad: np.ndarray, state: dict, lr: float,
                betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> np.ndarray:
    """Bias-corrected adaptive-moment step, applied to ``param`` in place."""
    if param.shape != grad.shape:
        raise DimensionError(f"adam_update: param {param.shape} vs grad {grad.shape}")
    b1, b2 = betas
    if "m" not in state:
        state["m"] = np.zeros_like(param)
        state["v"] = np.zeros_like(param)
        state["t"] = 0
    state["t"] += 1
    t = state["t"]
    state["m"] = b1 * state["m"] + (1.0 - b1) * grad
    state["v"] = b2 * state["v"] + (1.0 - b2) * grad * grad
    m_hat = state["m"] / (1.0 - b1 ** t)
    v_hat = state["v"] / (1.0 - b2 ** t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in store.grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in store.grads.values():
            g *= factor
    return norm


def _check_width(data: Sequence[GraphPair], store: ParamStore) -> None:
    width = store.values["layer1.theta_n"].shape[0]
    for pair in data:
        if pair.p != width:
            raise DimensionError(f"sample {pair.sample_id}: feature width {pair.p} != model input width {width}")


def epoch_order(data: Sequence[GraphPair], seed: int, epoch: int) -> list[int]:
    """Seeded visiting order, independent of how ``data`` is stored."""
    canonical = sorted(range(len(data)), key=lambda i: data[i].sample_id)
    perm = np.random.default_rng([seed, epoch]).permutation(len(data))
    return [canonical[k] for k in perm]


def _accuracy_counts(soft: np.ndarray, truth: np.ndarray, method: str) -> tuple[int, int]:
    expected = truth_pairs(truth)
    pairs = hungarian_discretize(soft) if method == "hungarian" else argmax_discretize(soft)
    return sum(1 for p in set(pairs) if p in expected), len(expected)


def _assert_finite(store: ParamStore, epoch: int, sample_id: str) -> None:
    for name, v in store.values.items():
        if not np.isfinite(v).all():
            raise NonFiniteError(f"parameter {name} became non-finite at epoch {epoch}, sample {sample_id}")


def train(data: Sequence[GraphPair], config: TrainConfig, state: Optional[TrainState] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainState:
    """Run ``config.epochs`` epochs, continuing from ``state`` when given."""
    if not data:
        raise ContractError("training data is empty")
    if state is None:
        state = TrainState(config, init_params(data[0].p, config))
    store = state.store
    _check_width(data, store)
    n_batch = config.batch_size
    for _ in range(config.epochs):
        epoch = state.epoch + 1
        sums = {"loss": 0.0, "l_sol": 0.0, "l_con": 0.0}
        hits = total = 0
        store.zero_grad()
        order = epoch_order(data, config.seed, epoch)
        for step, idx in enumerate(order):
            pair = data[idx]
            tape = Tape()
            try:
                res = forward_sample(pair, store.bind(tape), config)
            except (NonFiniteError, DegenerateRowError) as exc:
                raise type(exc)(f"epoch {epoch}, sample {pair.sample_id}: {exc}") from exc
            dc.backward(res.loss, store)
            sums["loss"] += res.loss.item()
            sums["l_sol"] += res.l_sol.item()
            sums["l_con"] += res.l_con.item()
            h, t = _accuracy_counts(res.soft.value, pair.truth, "hungarian")
            hits, total = hits + h, total + t
            if (step + 1) % n_batch == 0 or step + 1 == len(order):
                size = (step % n_batch) + 1
                if size > 1:
                    for g in store.grads.values():
                        g /= size
                clip_grad_norm(store, config.clip_norm)
                for name in store.names:
                    adam_update(store.values[name], store.grads[name], store.state[name],
                                config.learn_rate, config.betas, config.adam_eps)
                store.zero_grad()
                _assert_finite(store, epoch, pair.sample_id)
        record = {k: v / len(data) for k, v in sums.items()}
        record = {"epoch": epoch, **record, "train_accuracy": hits / total if total else float("nan")}
        state.history.append(record)
        state.epoch = epoch
        log.info("epoch %d loss=%.6f l_sol=%.6f l_con=%.6f acc=%.4f", epoch, record["loss"],
                 record["l_sol"], record["l_con"], record["train_accuracy"])
        if on_epoch is not None:
            on_epoch(record)
    return state


def predict(pair: GraphPair, store: ParamStore, config: TrainConfig) -> SampleResult:
    return forward_sample(pair, store.constants(), config)


def evaluate(data: Sequence[GraphPair], store: ParamStore, config: TrainConfig) -> dict:
    """Accuracy under both discretizations and mean losses; parameters untouched."""
    if not data:
        raise ContractError("evaluation data is empty")
    _check_width(data, store)
    params = store.constants()
    counts = {"hungarian": [0, 0], "argmax": [0, 0]}
    l_sol = l_con = 0.0
    for pair in data:
        res = forward_sample(pair, params, config)
        l_sol += res.l_sol.item()
        l_con += res.l_con.item()
        for method, acc in counts.items():
            h, t = _accuracy_counts(res.soft.value, pair.truth, method)
            acc[0] += h
            acc[1] += t
    return {
        "accuracy_hungarian": counts["hungarian"][0] / counts["hungarian"][1],
        "accuracy_argmax": counts["argmax"][0] / counts["argmax"][1],
        "l_sol": l_sol / len(data),
        "l_con": l_con / len(data),
    }


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little endian):
#   b"GLMC" | u16 version | u32 len | config json | u64 epoch | u32 len | history json
#   | u32 count | count * param block | u32 crc32 of every preceding byte
# param block:
#   u16 len | name utf-8 | u32 rows | u32 cols | f64[rows*cols] value
#   | u64 adam step | f64[rows*cols] first moment | f64[rows*cols] second moment


def _blob(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def dumps_checkpoint(state: TrainState) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    parts.append(_blob(json.dumps(state.config.to_dict(), sort_keys=True).encode()))
    parts.append(struct.pack("<Q", state.epoch))
    parts.append(_blob(json.dumps(state.history).encode()))
    store = state.store
    parts.append(struct.pack("<I", len(store)))
    for name in store.names:
        value = store.values[name]
        opt = store.state[name]
        rows, cols = value.shape
        encoded = name.encode()
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<II", rows, cols))
        parts.append(value.astype("<f8").tobytes(order="C"))
        parts.append(struct.pack("<Q", int(opt.get("t", 0))))
        for key in ("m", "v"):
            parts.append(np.asarray(opt.get(key, np.zeros_like(value)), dtype="<f8").tobytes(order="C"))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointCorruptError("checkpoint is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def blob(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)


def loads_checkpoint(data: bytes) -> TrainState:
    if len(data) < 6 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointCorruptError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<H", data[4:6])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if len(data) < 10:
        raise CheckpointCorruptError("checkpoint is truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointCorruptError("checkpoint checksum mismatch (corrupt or truncated file)")
    r = _Reader(body)
    r.take(6)
    config = TrainConfig.from_dict(json.loads(r.blob().decode()))
    (epoch,) = r.unpack("<Q")
    history = json.loads(r.blob().decode())
    store = ParamStore()
    (count,) = r.unpack("<I")
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        rows, cols = r.unpack("<II")
        size = rows * cols

        def array():
            return np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(rows, cols)

        store.add(name, array())
        (t,) = r.unpack("<Q")
        m, v = array(), array()
        if t > 0:
            store.state[name] = {"m": m, "v": v, "t": int(t)}
    if r.pos != len(body):
        raise CheckpointCorruptError("unexpected trailing bytes in checkpoint")
    return TrainState(config, store, int(epoch), history)


def save_checkpoint(state: TrainState, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(state))


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
