"""Residual linear adapter trained with a masked InfoNCE objective.

The frozen base embedding ``e`` is mapped to ``normalize(e + W e)``; ``W``
starts at zero so an untrained adapter reproduces the base model exactly.
For each query ``q_i`` with positive ``d_i`` the partition function sums
the positive term plus masked terms for its hard negatives and, over the
other in-batch instances ``j``, query-query, doc-doc and query-doc pairs.
A term is masked out when its similarity exceeds the positive similarity
by more than ``mask_margin``, or when it involves a document with the
same id as ``d_i``.
"""

from __future__ import annotations

import base64
import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from synthir.embedder import EmbeddingTable, MissingEmbedding
from synthir.jsonl import atomic_write_text
from synthir.profiles import profile

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "synthir-adapter"
CHECKPOINT_VERSION = 1


@dataclass
class AdapterParams:
    W: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.ndim != 2 or self.W.shape[0] != self.W.shape[1]:
            raise ValueError(f"W must be square, got shape {self.W.shape}")

    @property
    def dimension(self) -> int:
        return self.W.shape[0]

    @classmethod
    def zeros(cls, dimension: int) -> "AdapterParams":
        return cls(np.zeros((dimension, dimension)))


@dataclass
class TrainConfig:
    temperature: float = 0.07
    batch_size: int = 16
    negatives_per_sample: int = 8
    base_lr: float = 1e-6
    weight_decay: float = 0.01
    warmup_proportion: float = 0.06
    final_lr_factor: float = 0.02
    epochs: int = 10
    patience: int = 2
    seed: int = 42
    mask_margin: float = 0.1

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.negatives_per_sample < 0:
            raise ValueError("negatives_per_sample must be >= 0")

    @classmethod
    def from_profile(cls, name: str = "small", **overrides) -> "TrainConfig":
        p = profile(name)
        base = {"batch_size": p["batch_size"], "negatives_per_sample": p["negatives_per_sample"], "base_lr": p["base_lr"]}
        unknown = set(overrides) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# Vector helpers ----------------------------------------------------------------

def _normalize_rows(U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(U, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero vector cannot be normalized")
    return U / norms, norms


def _residual(W: np.ndarray | None, E: np.ndarray) -> np.ndarray:
    return E if W is None else E + E @ W.T


def apply_adapter(params: AdapterParams | None, e: np.ndarray) -> np.ndarray:
    """``normalize(e + W e)`` for a vector or for each row of a matrix.

    ``params=None`` means no adapter: plain normalization.
    """
    e = np.asarray(e, dtype=np.float64)
    W = None if params is None else params.W
    if W is not None and e.shape[-1] != W.shape[0]:
        raise ValueError(f"embedding dim {e.shape[-1]} != adapter dim {W.shape[0]}")
    return _normalize_rows(_residual(W, e))[0]


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine of a zero vector is undefined")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


# Batches, similarities, masks ---------------------------------------------------

@dataclass
class TrainBatch:
    """Frozen vectors for one batch; rows of ``negative_vecs`` past ``neg_counts[i]`` are padding."""

    query_vecs: np.ndarray      # (N, d)
    positive_vecs: np.ndarray   # (N, d)
    negative_vecs: np.ndarray   # (N, K_max, d)
    neg_counts: np.ndarray      # (N,)
    positive_doc_ids: tuple[str, ...]

    def __post_init__(self):
        n, d = self.query_vecs.shape
        if self.positive_vecs.shape != (n, d):
            raise ValueError("positive_vecs shape mismatch")
        if self.negative_vecs.ndim != 3 or self.negative_vecs.shape[0] != n or self.negative_vecs.shape[2] != d:
            raise ValueError("negative_vecs must be (N, K_max, d)")
        self.neg_counts = np.asarray(self.neg_counts, dtype=int)
        if self.neg_counts.shape != (n,) or np.any(self.neg_counts > self.negative_vecs.shape[1]) or np.any(self.neg_counts < 0):
            raise ValueError("neg_counts must be (N,) with 0 <= K_i <= K_max")
        if len(self.positive_doc_ids) != n:
            raise ValueError("need one positive_doc_id per row")

    @property
    def size(self) -> int:
        return self.query_vecs.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return np.arange(self.negative_vecs.shape[1])[None, :] < self.neg_counts[:, None]

    @classmethod
    def from_lists(cls, queries, positives, negatives: Sequence[Sequence], positive_doc_ids) -> "TrainBatch":
        """Build from per-row lists; ``negatives[i]`` may have any length."""
        Q = np.asarray(queries, dtype=np.float64)
        P = np.asarray(positives, dtype=np.float64)
        n, d = Q.shape
        k_max = max((len(x) for x in negatives), default=0)
        neg = np.repeat(Q[:, None, :], k_max, axis=1) if k_max else np.zeros((n, 0, d))
        counts = np.zeros(n, dtype=int)
        for i, rows in enumerate(negatives):
            if len(rows):
                neg[i, :len(rows)] = np.asarray(rows, dtype=np.float64)
            counts[i] = len(rows)
        return cls(Q, P, neg, counts, tuple(positive_doc_ids))


@dataclass
class Similarities:
    qd: np.ndarray   # (N, N): [i, j] = s(q_i, d_j); diagonal holds the positives
    qq: np.ndarray   # (N, N)
    dd: np.ndarray   # (N, N)
    hard: np.ndarray  # (N, K_max)

    @property
    def positive(self) -> np.ndarray:
        return np.diag(self.qd)


@dataclass
class MaskMatrix:
    hard: np.ndarray  # (N, K_max), 0 on padding
    qq: np.ndarray    # (N, N), diagonal 0
    dd: np.ndarray
    qd: np.ndarray


@dataclass
class _Adapted:
    q: np.ndarray
    p: np.ndarray
    n: np.ndarray
    q_norm: np.ndarray
    p_norm: np.ndarray
    n_norm: np.ndarray


def _adapt_batch(W: np.ndarray, batch: TrainBatch) -> _Adapted:
    if batch.query_vecs.shape[1] != W.shape[0]:
        raise ValueError(f"batch dim {batch.query_vecs.shape[1]} != adapter dim {W.shape[0]}")
    q, qn = _normalize_rows(_residual(W, batch.query_vecs))
    p, pn = _normalize_rows(_residual(W, batch.positive_vecs))
    if batch.negative_vecs.shape[1]:
        n, nn = _normalize_rows(_residual(W, batch.negative_vecs))
    else:
        n, nn = batch.negative_vecs.copy(), np.ones(batch.negative_vecs.shape[:2] + (1,))
    return _Adapted(q, p, n, qn, pn, nn)


def _similarities(a: _Adapted) -> Similarities:
    return Similarities(
        qd=a.q @ a.p.T,
        qq=a.q @ a.q.T,
        dd=a.p @ a.p.T,
        hard=np.einsum("id,ikd->ik", a.q, a.n),
    )


def similarities(params: AdapterParams, batch: TrainBatch) -> Similarities:
    return _similarities(_adapt_batch(params.W, batch))


def compute_mask(batch: TrainBatch, sims: Similarities, margin: float = 0.1) -> MaskMatrix:
    """0/1 factors for every non-positive partition term."""
    threshold = sims.positive[:, None] + margin
    n = batch.size
    off_diag = ~np.eye(n, dtype=bool)
    ids = np.asarray(batch.positive_doc_ids, dtype=object)
    same_doc = ids[:, None] == ids[None, :]
    hard = batch.valid & ~(sims.hard > threshold)
    qq = off_diag & ~(sims.qq > threshold)
    dd = off_diag & ~(sims.dd > threshold) & ~same_doc
    qd = off_diag & ~(sims.qd > threshold) & ~same_doc
    return MaskMatrix(hard.astype(np.int8), qq.astype(np.int8), dd.astype(np.int8), qd.astype(np.int8))


# Loss and gradient ----------------------------------------------------------------

def _forward_backward(W: np.ndarray, batch: TrainBatch, config: TrainConfig, want_grad: bool,
                      mask: MaskMatrix | None = None):
    tau = config.temperature
    a = _adapt_batch(W, batch)
    s = _similarities(a)
    if mask is None:
        mask = compute_mask(batch, s, config.mask_margin)
    n = batch.size
    pos = s.positive / tau
    eye = np.eye(n, dtype=bool)
    # diagonals of qq/dd/qd are not partition terms; -inf drops them from the max
    fams = {
        "qd": np.where(mask.qd.astype(bool), s.qd / tau, -np.inf),
        "qq": np.where(mask.qq.astype(bool), s.qq / tau, -np.inf),
        "dd": np.where(mask.dd.astype(bool), s.dd / tau, -np.inf),
        "hard": np.where(mask.hard.astype(bool), s.hard / tau, -np.inf),
    }
    shift = pos.copy()
    for v in fams.values():
        if v.shape[1]:
            shift = np.maximum(shift, v.max(axis=1))
    expd = {k: np.exp(v - shift[:, None]) for k, v in fams.items()}
    e_pos = np.exp(pos - shift)
    z = e_pos + sum(v.sum(axis=1) for v in expd.values())
    log_z = shift + np.log(z)
    per_row = log_z - pos
    bad = np.flatnonzero(~np.isfinite(per_row))
    if bad.size:
        raise FloatingPointError(f"non-finite loss term for batch row {int(bad[0])}")
    loss = float(per_row.mean())
    if not want_grad:
        return loss, None, mask

    # d loss / d similarity, scaled by 1/(tau N)
    scale = 1.0 / (tau * n)
    g_qd = expd["qd"] / z[:, None] * scale
    g_qd[eye] = (e_pos / z - 1.0) * scale
    g_qq = expd["qq"] / z[:, None] * scale
    g_dd = expd["dd"] / z[:, None] * scale
    g_hard = expd["hard"] / z[:, None] * scale

    d_q = g_qd @ a.p + (g_qq + g_qq.T) @ a.q + np.einsum("ik,ikd->id", g_hard, a.n)
    d_p = g_qd.T @ a.q + (g_dd + g_dd.T) @ a.p
    d_n = g_hard[:, :, None] * a.q[:, None, :]

    def through_norm(dA, A, norms):
        return (dA - A * np.sum(A * dA, axis=-1, keepdims=True)) / norms

    du_q = through_norm(d_q, a.q, a.q_norm)
    du_p = through_norm(d_p, a.p, a.p_norm)
    grad = du_q.T @ batch.query_vecs + du_p.T @ batch.positive_vecs
    if batch.negative_vecs.shape[1]:
        du_n = through_norm(d_n, a.n, a.n_norm)
        d = W.shape[0]
        grad += du_n.reshape(-1, d).T @ batch.negative_vecs.reshape(-1, d)
    return loss, grad, mask


def batch_loss(params: AdapterParams, batch: TrainBatch, config: TrainConfig) -> float:
    """Mean over the batch of ``-log(exp(s_pos / tau) / Z_i)``."""
    return _forward_backward(params.W, batch, config, want_grad=False)[0]


def loss_gradient(params: AdapterParams, batch: TrainBatch, config: TrainConfig,
                  mask: MaskMatrix | None = None) -> np.ndarray:
    """Exact gradient of :func:`batch_loss` w.r.t. ``W`` with the mask held fixed.

    The mask is computed from the current similarities unless one is passed in.
    """
    return _forward_backward(params.W, batch, config, want_grad=True, mask=mask)[1]


def loss_and_gradient(params: AdapterParams, batch: TrainBatch, config: TrainConfig):
    loss, grad, _ = _forward_backward(params.W, batch, config, want_grad=True)
    return loss, grad


def masked_loss(params: AdapterParams, batch: TrainBatch, config: TrainConfig, mask: MaskMatrix) -> float:
    """:func:`batch_loss` with an externally fixed mask (used for gradient checks)."""
    return _forward_backward(params.W, batch, config, want_grad=False, mask=mask)[0]


# Schedule and optimizer -----------------------------------------------------------

@dataclass(frozen=True)
class LrSchedule:
    total_steps: int
    warmup_steps: int
    base_lr: float
    final_lr_factor: float = 0.02

    @classmethod
    def build(cls, total_steps: int, base_lr: float, warmup_proportion: float = 0.06,
              final_lr_factor: float = 0.02) -> "LrSchedule":
        if total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        return cls(total_steps, int(round(warmup_proportion * total_steps)), base_lr, final_lr_factor)


def lr_at(step: int, schedule: LrSchedule) -> float:
    """Linear warmup 0 -> base_lr, then linear decay to final_lr_factor * base_lr."""
    T, w, base = schedule.total_steps, schedule.warmup_steps, schedule.base_lr
    if not 0 <= step <= T:
        raise ValueError(f"step {step} outside [0, {T}]")
    if step < w:
        return base * step / w
    if T == w:
        return base
    frac = (step - w) / (T - w)
    return base * (1.0 - (1.0 - schedule.final_lr_factor) * frac)


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, W: np.ndarray) -> "OptimizerState":
        return cls(np.zeros_like(W), np.zeros_like(W))


def adamw_step(state: OptimizerState, params: AdapterParams, grads: np.ndarray, lr: float,
               weight_decay: float) -> tuple[AdapterParams, OptimizerState]:
    """One AdamW update; decay ``W -= lr * wd * W`` is applied before the Adam step.

    The moment buffers of ``state`` are updated in place and returned in a
    new state object together with new parameters.
    """
    if grads.shape != params.W.shape:
        raise ValueError(f"gradient shape {grads.shape} != parameter shape {params.W.shape}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m, v = state.m, state.v
    m *= b1
    m += (1.0 - b1) * grads
    v *= b2
    v += (1.0 - b2) * np.square(grads)
    # m_hat / (sqrt(v_hat) + eps) without materializing m_hat and v_hat
    denom = np.sqrt(v)
    denom /= math.sqrt(1.0 - b2 ** t)
    denom += state.eps
    step = np.divide(m, denom, out=denom)
    step *= lr / (1.0 - b1 ** t)
    W = params.W * (1.0 - lr * weight_decay)
    W -= step
    return AdapterParams(W), OptimizerState(m, v, t, b1, b2, state.eps)


# Training ------------------------------------------------------------------------

@dataclass
class TrainHistory:
    steps: list[tuple[int, float, float]] = field(default_factory=list)   # (step, lr, loss)
    epochs: list[tuple[int, float]] = field(default_factory=list)         # (epoch, val_loss); epoch 0 = init
    best_epoch: int = 0
    stopped_epoch: int = 0

    def write_csv(self, steps_path, epochs_path) -> None:
        import io

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "lr", "loss"])
        w.writerows((s, repr(lr), repr(loss)) for s, lr, loss in self.steps)
        atomic_write_text(steps_path, buf.getvalue())
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "val_loss"])
        w.writerows((e, repr(v)) for e, v in self.epochs)
        atomic_write_text(epochs_path, buf.getvalue())


class _Vectors:
    """Pre-stacked frozen vectors for a list of instances."""

    def __init__(self, instances, table: EmbeddingTable, k: int):
        missing = []
        for inst in instances:
            if inst.query_id not in table.queries:
                missing.append(f"query {inst.query_id}")
            for doc_id in (inst.positive_doc_id, *inst.negative_doc_ids[:k]):
                if doc_id not in table.documents:
                    missing.append(f"document {doc_id}")
        if missing:
            raise MissingEmbedding(sorted(set(missing)))
        self.instances = list(instances)
        self.table = table
        self.k = k

    def batch(self, idx: Sequence[int]) -> TrainBatch:
        insts = [self.instances[i] for i in idx]
        t = self.table
        return TrainBatch.from_lists(
            [t.queries[x.query_id] for x in insts],
            [t.documents[x.positive_doc_id] for x in insts],
            [[t.documents[n] for n in x.negative_doc_ids[:self.k]] for x in insts],
            [x.positive_doc_id for x in insts],
        )


def _mean_loss(params: AdapterParams, vecs: _Vectors, config: TrainConfig) -> float:
    n = len(vecs.instances)
    total = 0.0
    for start in range(0, n, config.batch_size):
        idx = range(start, min(n, start + config.batch_size))
        total += batch_loss(params, vecs.batch(idx), config) * len(idx)
    return total / n


def validation_loss(params: AdapterParams, instances, table: EmbeddingTable, config: TrainConfig) -> float:
    """Instance-weighted mean loss over fixed-order batches of ``config.batch_size``."""
    return _mean_loss(params, _Vectors(instances, table, config.negatives_per_sample), config)


def train(train_set, val_set, table: EmbeddingTable, config: TrainConfig,
          init: AdapterParams | None = None) -> tuple[AdapterParams, TrainHistory]:
    """Train the adapter with AdamW and early stopping on validation loss.

    Validation loss is measured before training (epoch 0) and after every
    epoch. Training ends after ``config.epochs`` epochs or once the loss has
    failed to improve on the best value for more than ``config.patience``
    consecutive epochs. The best-validation parameters are returned.
    """
    if not train_set:
        raise ValueError("empty training set")
    if not val_set:
        raise ValueError("empty validation set")
    k = config.negatives_per_sample
    tr = _Vectors(train_set, table, k)
    va = _Vectors(val_set, table, k)
    params = init if init is not None else AdapterParams.zeros(table.dimension)
    state = OptimizerState.zeros_like(params.W)
    n = len(tr.instances)
    per_epoch = math.ceil(n / config.batch_size)
    schedule = LrSchedule.build(config.epochs * per_epoch, config.base_lr,
                                config.warmup_proportion, config.final_lr_factor)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()

    best_val = _mean_loss(params, va, config)
    best_params = AdapterParams(params.W.copy())
    history.epochs.append((0, best_val))
    bad = 0
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            step += 1
            lr = lr_at(step, schedule)
            loss, grad = loss_and_gradient(params, tr.batch(order[start:start + config.batch_size]), config)
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise FloatingPointError(f"non-finite loss or gradient at step {step}")
            params, state = adamw_step(state, params, grad, lr, config.weight_decay)
            history.steps.append((step, lr, loss))
        val = _mean_loss(params, va, config)
        history.epochs.append((epoch, val))
        history.stopped_epoch = epoch
        logger.info("epoch %d: val loss %.6f (best %.6f)", epoch, val, best_val)
        if val < best_val:
            best_val, best_params, bad = val, AdapterParams(params.W.copy()), 0
            history.best_epoch = epoch
        else:
            bad += 1
            if bad > config.patience:
                logger.info("early stop after epoch %d; best epoch %d", epoch, history.best_epoch)
                break
    return best_params, history


# Checkpoints ---------------------------------------------------------------------

def config_fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode("utf-8")).hexdigest()[:16]


def save_adapter(path, params: AdapterParams, config: TrainConfig | None = None, fingerprint: str = "") -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dimension": params.dimension,
        "fingerprint": fingerprint,
        "train_config": asdict(config) if config is not None else None,
        "W": base64.b64encode(params.W.astype("<f8").tobytes()).decode("ascii"),
    }
    atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=1) + "\n")


def load_adapter(path) -> tuple[AdapterParams, dict]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} checkpoint")
    d = payload["dimension"]
    W = np.frombuffer(base64.b64decode(payload["W"]), dtype="<f8").reshape(d, d).copy()
    return AdapterParams(W), payload
