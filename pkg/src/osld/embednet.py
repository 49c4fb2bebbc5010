"""A small MLP embedding network trained with the two-stage Adam recipe.

Stage 1 fits only the final (embedding) layer at a low learning rate; stage 2
trains every layer with a step schedule that halves the rate a fixed number
of times.  Validation Recall@1 is measured every few epochs and the best
network is kept.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import sampler as smp
from .errors import (
    FileFormatError,
    NonFiniteError,
    ShapeMismatchError,
    UndefinedRecallError,
)
from .evaluation import recall_at_k
from .losses import LossParams, batch_loss

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"OSLDNET1"
RECALL_KS = (1, 2, 4, 8)


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int = 32 * 32 * 3
    hidden_dims: tuple[int, ...] = (256,)
    embedding_dim: int = 64
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if min((self.input_dim, self.embedding_dim, *self.hidden_dims)) < 1:
            raise ValueError("all layer widths must be >= 1")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.embedding_dim)


@dataclass
class Network:
    config: NetworkConfig
    layers: list  # [(W of shape (fan_in, fan_out), b of shape (fan_out,)), ...]

    def __post_init__(self):
        widths = self.config.widths
        if len(self.layers) != len(widths) - 1:
            raise ShapeMismatchError("layer count does not match config")
        for (w, b), fan_in, fan_out in zip(self.layers, widths[:-1], widths[1:]):
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ShapeMismatchError(f"layer shapes {w.shape}/{b.shape} break the chain")

    @classmethod
    def init(cls, config: NetworkConfig, rng: np.random.Generator) -> "Network":
        layers = []
        for fan_in, fan_out in zip(config.widths[:-1], config.widths[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            layers.append((rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)))
        return cls(config, layers)

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer]

    def with_params(self, params: Sequence[np.ndarray]) -> "Network":
        it = iter(params)
        return Network(self.config, [(next(it), next(it)) for _ in self.layers])

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def embed(self, inputs) -> np.ndarray:
        return forward(self, inputs)[0]


@dataclass
class ForwardCache:
    inputs: list  # input to each layer
    preacts: list  # pre-activation of each hidden layer
    n_layers: int


def forward(net: Network, inputs) -> tuple[np.ndarray, ForwardCache]:
    """Embeddings (not normalised) plus the record needed by ``backward``."""
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != net.config.input_dim:
        raise ShapeMismatchError(f"input dim {x.shape[1]} != {net.config.input_dim}")
    ins, pre = [], []
    h = x
    last = len(net.layers) - 1
    for i, (w, b) in enumerate(net.layers):
        ins.append(h)
        z = h @ w + b
        if i < last:
            pre.append(z)
            h = np.maximum(z, 0.0)
        else:
            h = z
    return h, ForwardCache(ins, pre, len(net.layers))


def backward(net: Network, cache: ForwardCache, grad_embeddings) -> list[tuple[np.ndarray, np.ndarray]]:
    g = np.asarray(grad_embeddings, dtype=float)
    if cache.n_layers != len(net.layers) or g.shape != (cache.inputs[0].shape[0], net.config.embedding_dim):
        raise ShapeMismatchError("cache / gradient does not match the network")
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        w, _ = net.layers[i]
        grads[i] = (cache.inputs[i].T @ g, g.sum(axis=0))
        if i > 0:
            g = (g @ w.T) * (cache.preacts[i - 1] > 0)
    return grads


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float) -> list[np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays and advances ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatchError("params, grads and optimizer state differ in length")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatchError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        mhat = state.m[i] / (1 - b1 ** t)
        vhat = state.v[i] / (1 - b2 ** t)
        out.append(p - lr * mhat / (np.sqrt(vhat) + state.eps))
    return out


@dataclass(frozen=True)
class TrainConfig:
    n_per_batch: int = 60
    stage1_epochs: int = 10
    stage1_lr: float = 1e-5
    stage2_epochs: int = 50
    stage2_initial_lr: float = 1e-4
    lr_halvings: int = 4
    halving_period_epochs: int = 10
    constant_lr: float | None = None  # overrides the stage-2 schedule (low-lr ablation)
    loss: LossParams = field(default_factory=LossParams)
    sampler: str = "bhnm"  # or "random"
    pool: str = smp.POOL_ALL
    eval_every_epochs: int = 5
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = {"alpha": self.loss.alpha, "margin": self.loss.margin, "kind": self.loss.kind.value}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d and isinstance(d["loss"], dict):
            d["loss"] = LossParams(**d["loss"])
        return cls(**d)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Stage-2 learning rate for a 0-based epoch within stage 2."""
    if cfg.constant_lr is not None:
        return cfg.constant_lr
    halvings = min(cfg.lr_halvings, epoch // cfg.halving_period_epochs)
    return cfg.stage2_initial_lr * 2.0 ** (-halvings)


@dataclass
class ItemSet:
    """Labelled training / evaluation items.

    ``items`` are raw inputs (images, or ready vectors when ``transform`` is
    None); ``transform(item, rng)`` turns one into a network input vector.
    Items whose class is ``sampler.NEGATIVE_ONLY_CLASS`` only serve as
    negatives.
    """

    items: list
    class_ids: np.ndarray
    transform: Callable[[Any, np.random.Generator], np.ndarray] | None = None

    def __post_init__(self):
        self.class_ids = np.asarray(self.class_ids, dtype=int)
        if len(self.items) != len(self.class_ids):
            raise ShapeMismatchError("items and class_ids differ in length")

    def __len__(self):
        return len(self.items)

    def class_index(self) -> dict[int, list[int]]:
        index: dict[int, list[int]] = {}
        for i, c in enumerate(self.class_ids):
            index.setdefault(int(c), []).append(i)
        return index

    def vectors(self, ids: Sequence[int], rng: np.random.Generator | None = None) -> np.ndarray:
        if self.transform is None:
            return np.stack([np.asarray(self.items[i], dtype=float) for i in ids])
        return np.stack([self.transform(self.items[i], rng) for i in ids])


def evaluate_retrieval(net: Network, items: ItemSet | tuple, ks: Sequence[int] = RECALL_KS) -> dict[int, float]:
    """Leave-one-out Recall@K by cosine similarity; relevant = same class."""
    if isinstance(items, ItemSet):
        vectors, labels = items.vectors(range(len(items))), items.class_ids
    else:
        vectors, labels = items
    labels = np.asarray(labels)
    if len(labels) < 2:
        raise UndefinedRecallError("need at least two items")
    _, counts = np.unique(labels, return_counts=True)
    if counts.max() < 2:
        raise UndefinedRecallError("no class has two items")
    emb = net.embed(vectors)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    unit = emb / np.where(norms > 0, norms, 1.0)
    sims = unit @ unit.T
    np.fill_diagonal(sims, -np.inf)
    rankings, relevant = [], []
    kmax = max(ks)
    for q in range(len(labels)):
        order = np.argsort(-sims[q], kind="stable")[:kmax]
        rankings.append([int(i) for i in order if i != q])
        relevant.append({int(i) for i in np.flatnonzero(labels == labels[q]) if i != q})
    return recall_at_k(rankings, relevant, ks).recall


@dataclass
class TrainResult:
    network: Network
    log: dict


def _epoch_batches(n_items: int, n: int) -> int:
    return max(1, math.ceil(n_items / (3 * n)))


def train(
    train_set: ItemSet,
    net_cfg: NetworkConfig,
    train_cfg: TrainConfig,
    val_set: ItemSet | tuple,
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    rng = np.random.default_rng(train_cfg.seed)
    net = Network.init(net_cfg, rng)
    index = train_set.class_index()
    draw = smp.sample_balanced_batch if train_cfg.sampler == "bhnm" else smp.sample_random_batch
    if train_cfg.sampler not in ("bhnm", "random"):
        raise ValueError(f"unknown sampler {train_cfg.sampler!r}")
    steps = _epoch_batches(len(train_set), train_cfg.n_per_batch)
    total = train_cfg.stage1_epochs + train_cfg.stage2_epochs
    last_layer = 2 * (len(net.layers) - 1)

    log_ = {
        "sampler": train_cfg.sampler,
        "loss": train_cfg.loss.kind.value,
        "batches_per_epoch": steps,
        "epochs": [],
        "evaluations": [],
    }
    best_net, best_r1, best_epoch = net.copy(), -1.0, 0
    state = None

    def evaluate(epoch: int):
        nonlocal best_net, best_r1, best_epoch
        recall = evaluate_retrieval(net, val_set)
        log_["evaluations"].append({"epoch": epoch, "recall": {str(k): v for k, v in recall.items()}})
        if recall[1] >= best_r1:
            best_net, best_r1, best_epoch = net.copy(), recall[1], epoch

    for epoch in range(1, total + 1):
        stage = 1 if epoch <= train_cfg.stage1_epochs else 2
        if stage == 1:
            lr = train_cfg.stage1_lr
            trainable = slice(last_layer, last_layer + 2)
        else:
            lr = lr_schedule(epoch - train_cfg.stage1_epochs - 1, train_cfg)
            trainable = slice(0, None)
        if state is None or epoch == train_cfg.stage1_epochs + 1:
            state = AdamState.zeros_like(net.params()[trainable])

        losses, warnings = [], 0
        for _ in range(steps):
            batch = draw(index, train_cfg.n_per_batch, rng)
            ids = [s.item_id for s in batch.samples]
            x = train_set.vectors(ids, rng)
            emb, cache = forward(net, x)
            if train_cfg.sampler == "bhnm":
                batch, w = smp.harden_negatives(batch, emb, train_cfg.loss, train_cfg.pool)
                warnings += w
            loss, grad = batch_loss(emb, batch.triplet_array(), train_cfg.loss)
            if not math.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}")
            grads = [g for layer in backward(net, cache, grad) for g in layer]
            params = net.params()
            params[trainable] = adam_step(params[trainable], grads[trainable], state, lr)
            net = net.with_params(params)
            losses.append(loss)

        entry = {"epoch": epoch, "stage": stage, "lr": lr, "mean_loss": float(np.mean(losses)), "hnm_warnings": warnings}
        log_["epochs"].append(entry)
        log.debug("epoch %d stage %d lr %.2e loss %.5f", epoch, stage, lr, entry["mean_loss"])
        if epoch % train_cfg.eval_every_epochs == 0 or epoch == total:
            evaluate(epoch)
        if progress is not None:
            progress(entry)

    if not log_["evaluations"]:
        evaluate(0)
    log_["best_epoch"] = best_epoch
    log_["best_recall_at_1"] = best_r1
    return TrainResult(best_net, log_)


# --- checkpoint files ---------------------------------------------------------

def save_checkpoint(path, net: Network) -> None:
    """Write magic, JSON config (length-prefixed), then float32 LE parameters."""
    cfg = json.dumps(asdict(net.config), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        for p in net.params():
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(path) -> Network:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FileFormatError(f"{path}: not a network checkpoint")
    try:
        (n,) = struct.unpack_from("<I", raw, 8)
        cfg_raw = json.loads(raw[12:12 + n].decode("utf-8"))
        cfg = NetworkConfig(**cfg_raw)
    except (struct.error, ValueError, TypeError) as exc:
        raise FileFormatError(f"{path}: corrupt checkpoint header") from exc
    pos = 12 + n
    layers = []
    for fan_in, fan_out in zip(cfg.widths[:-1], cfg.widths[1:]):
        arrays = []
        for shape in ((fan_in, fan_out), (fan_out,)):
            count = int(np.prod(shape))
            chunk = raw[pos:pos + 4 * count]
            if len(chunk) != 4 * count:
                raise FileFormatError(f"{path}: truncated parameters")
            arrays.append(np.frombuffer(chunk, dtype="<f4").astype(float).reshape(shape))
            pos += 4 * count
        layers.append(tuple(arrays))
    if pos != len(raw):
        raise FileFormatError(f"{path}: trailing bytes after parameters")
    return Network(cfg, layers)


def round_to_float32(net: Network) -> Network:
    """The network exactly as it will be after a save/load round trip."""
    return net.with_params([p.astype(np.float32).astype(float) for p in net.params()])
