"""Optimisation loop, evaluation, checkpoints and image-level voting."""

from __future__ import annotations

import json
import logging
import os
import struct
import time
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .graph import NormStats, fit_norm_stats
from .model import ModelConfig, forward, forward_batch, init_params

log = logging.getLogger(__name__)

cross_entropy = ag.cross_entropy
EVAL_CHUNK = 64


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 40
    # (first epoch, rate) pairs, ascending
    lr_schedule: tuple = ((0, 1e-3), (10, 1e-4), (20, 1e-5))
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.lr_schedule = tuple((int(e), float(r)) for e, r in self.lr_schedule)
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        starts = [e for e, _ in self.lr_schedule]
        if not starts or starts[0] != 0 or starts != sorted(set(starts)):
            raise ValueError("lr_schedule must start at epoch 0 with ascending boundaries")
        if any(r < 0 for _, r in self.lr_schedule) or self.weight_decay < 0:
            raise ValueError("learning rates and weight decay must be non-negative")


@dataclass
class EpochReport:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float | None
    lr: float
    seconds: float

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    store: ag.ParamStore
    norm_stats: NormStats
    seed: int = 0
    epoch: int = 0
    extra: dict = field(default_factory=dict)


def lr_at(epoch, cfg: TrainConfig):
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    rate = cfg.lr_schedule[0][1]
    for start, r in cfg.lr_schedule:
        if epoch >= start:
            rate = r
    return rate


def _label(graph):
    if graph.label is None:
        raise ValueError("training and evaluation need labelled graphs")
    return int(graph.label)


def graph_loss(graph, store, cfg, training=False, rng=None):
    logits = forward(graph, store, cfg, training=training, rng=rng)
    return cross_entropy(logits, _label(graph)), logits


def accumulate_batch(batch, store, cfg, training=False, rng=None):
    """Back-propagate the mean loss of ``batch``; returns per-graph (loss, prediction)."""
    logits = forward_batch(batch, store, cfg, training=training, rng=rng)
    losses = ag.cross_entropy_rows(logits, [_label(g) for g in batch])
    ag.backward(ag.matmul(np.full((1, len(batch)), 1.0 / len(batch)), losses))
    preds = np.argmax(logits.data, axis=1)
    return [(float(l), int(p)) for l, p in zip(losses.data[:, 0], preds)]


def _logits(graphs, store, cfg):
    """Eval-mode logits for normalised graphs, in chunks."""
    out = [forward_batch(graphs[lo:lo + EVAL_CHUNK], store, cfg).data for lo in range(0, len(graphs), EVAL_CHUNK)]
    return np.vstack(out)


def train(graphs, model_cfg: ModelConfig, train_cfg: TrainConfig, val_graphs=None, log_path=None, on_epoch=None):
    """Fit a model on raw (unnormalised) labelled graphs.

    Normalisation statistics come from ``graphs`` only and are applied to
    ``val_graphs`` unchanged; both are stored in the returned checkpoint.
    """
    if not graphs:
        raise ValueError("empty training set")
    stats = fit_norm_stats(graphs)
    data = [g.with_features(stats.apply(g.features)) for g in graphs]
    val = [g.with_features(stats.apply(g.features)) for g in val_graphs or []]
    init_ss, shuffle_ss, drop_ss = np.random.SeedSequence(train_cfg.seed).spawn(3)
    store = init_params(model_cfg, np.random.default_rng(init_ss))
    shuffle_rng = np.random.default_rng(shuffle_ss)
    drop_rng = np.random.default_rng(drop_ss)
    ckpt = Checkpoint(model_cfg, store, stats, train_cfg.seed, 0)
    reports = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(train_cfg.epochs):
            t0 = time.perf_counter()
            lr = lr_at(epoch, train_cfg)
            order = shuffle_rng.permutation(len(data))
            results = []
            for lo in range(0, len(order), train_cfg.batch_size):
                batch = [data[i] for i in order[lo:lo + train_cfg.batch_size]]
                store.zero_grad()
                try:
                    results += accumulate_batch(batch, store, model_cfg, True, drop_rng)
                except ag.NonFiniteError as exc:
                    raise TrainingError(f"non-finite value at epoch {epoch}, step {lo // train_cfg.batch_size}: {exc}") from exc
                store.adam_step(lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps, train_cfg.weight_decay)
            losses = [l for l, _ in results]
            train_acc = float(np.mean([p == data[i].label for (_, p), i in zip(results, order)]))
            ckpt.epoch = epoch + 1
            val_acc = evaluate_normalized(val, store, model_cfg)[0] if val else None
            rep = EpochReport(epoch, float(np.mean(losses)), train_acc, val_acc, lr, time.perf_counter() - t0)
            reports.append(rep)
            log.info("epoch %d loss %.4f train %.3f val %s", epoch, rep.loss, train_acc, val_acc)
            if log_fh:
                log_fh.write(rep.to_json() + "\n")
                log_fh.flush()
            if on_epoch:
                on_epoch(rep)
    finally:
        if log_fh:
            log_fh.close()
    return ckpt, reports


def predict(graphs, ckpt: Checkpoint):
    """Eval-mode class probabilities for raw graphs (normalised with the checkpoint stats)."""
    if not graphs:
        return []
    normed = [g.with_features(ckpt.norm_stats.apply(g.features)) for g in graphs]
    logits = _logits(normed, ckpt.store, ckpt.model_cfg)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return list(e / e.sum(axis=1, keepdims=True))


def evaluate_normalized(graphs, store, cfg):
    n = cfg.n_classes
    confusion = np.zeros((n, n), dtype=int)
    for g, pred in zip(graphs, np.argmax(_logits(graphs, store, cfg), axis=1)):
        confusion[_label(g), int(pred)] += 1
    return float(np.trace(confusion) / confusion.sum()), confusion


def evaluate(graphs, ckpt: Checkpoint):
    """Accuracy and confusion matrix (rows: true class, columns: prediction)."""
    if not graphs:
        raise ValueError("nothing to evaluate")
    normed = [g.with_features(ckpt.norm_stats.apply(g.features)) for g in graphs]
    return evaluate_normalized(normed, ckpt.store, ckpt.model_cfg)


def majority_vote(predictions):
    if len(predictions) == 0:
        raise ValueError("majority vote over no predictions")
    counts = Counter(int(p) for p in predictions)
    best = max(counts.values())
    return min(c for c, k in counts.items() if k == best)


def vote_by_image(image_ids, predictions):
    groups = {}
    for img, p in zip(image_ids, predictions):
        groups.setdefault(img, []).append(p)
    return {img: majority_vote(ps) for img, ps in groups.items()}


# ---------------------------------------------------------------------------
# checkpoint files: manifest.json plus one blob per parameter


def _write_blob(path, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def _read_blob(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    (ndim,) = struct.unpack_from("<I", buf, 0)
    shape = struct.unpack_from(f"<{ndim}I", buf, 4)
    offset = 4 + 4 * ndim
    count = int(np.prod(shape))
    if len(buf) != offset + 8 * count:
        raise ValueError(f"{path}: blob length does not match shape {shape}")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)


def save_checkpoint(ckpt: Checkpoint, directory):
    os.makedirs(os.path.join(directory, "params"), exist_ok=True)
    manifest = {
        "model_config": asdict(ckpt.model_cfg),
        "norm_stats": ckpt.norm_stats.to_dict(),
        "seed": ckpt.seed,
        "epoch": ckpt.epoch,
        "params": [],
        "extra": ckpt.extra,
    }
    for name, t in ckpt.store.items():
        fname = f"{name}.bin"
        _write_blob(os.path.join(directory, "params", fname), t.data)
        manifest["params"].append({"name": name, "file": f"params/{fname}", "shape": list(t.data.shape)})
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(directory) -> Checkpoint:
    path = os.path.join(directory, "manifest.json")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    with open(path) as fh:
        manifest = json.load(fh)
    cfg = ModelConfig(**manifest["model_config"])
    store = ag.ParamStore()
    for entry in manifest["params"]:
        store.add(entry["name"], _read_blob(os.path.join(directory, entry["file"])))
    expected = init_params(cfg, np.random.default_rng(0))
    if list(expected) != list(store) or any(expected[k].shape != store[k].shape for k in store):
        raise ValueError(f"{directory}: parameters do not match the model configuration")
    return Checkpoint(cfg, store, NormStats.from_dict(manifest["norm_stats"]), manifest["seed"], manifest["epoch"], manifest.get("extra", {}))
