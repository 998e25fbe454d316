"""Downstream evaluation: perplexity, embedding extraction, linear probing
over the SGD hyperparameter grid, and genus-level 1-NN probing.

The linear probe trains only a softmax layer on frozen embeddings (the
backbone is never touched); each grid cell is selected on a held-out 10% of
the probe training set and the chosen cell's test accuracy is reported.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor_io
from .autodiff import log_softmax_nd
from .data import BarcodeRecord
from .model import Backbone
from .tokenizers import TokenizerSpec, encode_batch
from .training import ntp_nll_stats


@dataclass(frozen=True)
class ProbeGrid:
    learning_rates: tuple[float, ...] = (0.01, 0.1, 0.5)
    momenta: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8)
    weight_decays: tuple[float, ...] = (1e-8, 1e-9, 1e-11)
    epochs: int = 50

    def cells(self):
        for lr in self.learning_rates:
            for mom in self.momenta:
                for wd in self.weight_decays:
                    yield lr, mom, wd

    @property
    def size(self) -> int:
        return len(self.learning_rates) * len(self.momenta) * len(self.weight_decays)


@dataclass
class EmbeddingSet:
    vectors: np.ndarray  # (count, d)
    species: list[str | None]
    genus: list[str | None]
    source: str = ""

    def __post_init__(self):
        if len(self.vectors) != len(self.species) or len(self.vectors) != len(self.genus):
            raise ValueError("row count must match label count")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("non-finite embedding vectors")

    def save(self, path_prefix: str) -> None:
        tensor_io.save_tensors(path_prefix + ".bin", {"vectors": self.vectors})
        with open(path_prefix + ".labels.json", "w") as f:
            json.dump({"species": self.species, "genus": self.genus, "source": self.source}, f)

    @staticmethod
    def load(path_prefix: str) -> "EmbeddingSet":
        vectors = tensor_io.load_tensors(path_prefix + ".bin")["vectors"]
        with open(path_prefix + ".labels.json") as f:
            labels = json.load(f)
        return EmbeddingSet(vectors, labels["species"], labels["genus"], labels["source"])


def perplexity(model: Backbone, records: list[BarcodeRecord], tokenizer: TokenizerSpec, batch_size: int = 32) -> float:
    """exp(mean per-token NLL) under the causal next-token factorization."""
    if not records:
        raise ValueError("perplexity over an empty record set")
    ids, mask = encode_batch(tokenizer, [r.sequence for r in records])
    total, count = 0.0, 0
    for lo in range(0, len(ids), batch_size):
        s, c = ntp_nll_stats(model, ids[lo : lo + batch_size], mask[lo : lo + batch_size])
        total += s
        count += c
    return math.exp(total / count)


def extract_embeddings(
    model: Backbone,
    records: list[BarcodeRecord],
    tokenizer: TokenizerSpec,
    pooling: str = "mean",
    batch_size: int = 64,
    source: str = "",
) -> EmbeddingSet:
    from .autodiff import no_grad

    ids, mask = encode_batch(tokenizer, [r.sequence for r in records])
    chunks = []
    with no_grad():
        for lo in range(0, len(ids), batch_size):
            chunks.append(model.embed_batch(ids[lo : lo + batch_size], mask[lo : lo + batch_size], pooling).data)
    return EmbeddingSet(
        vectors=np.concatenate(chunks, axis=0),
        species=[r.species for r in records],
        genus=[r.genus for r in records],
        source=source,
    )


def accuracy(preds, labels) -> float:
    if len(preds) != len(labels):
        raise ValueError(f"length mismatch: {len(preds)} preds vs {len(labels)} labels")
    return float(np.mean([p == t for p, t in zip(preds, labels)]))


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------

def _fit_softmax_sgd(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    lr: float,
    momentum: float,
    weight_decay: float,
    epochs: int,
    seed: int,
    batch_size: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """Single linear layer fit by SGD with momentum and weight decay."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    d = X.shape[1]
    W = np.zeros((d, n_classes), dtype=np.float64)
    b = np.zeros(n_classes, dtype=np.float64)
    vW = np.zeros_like(W)
    vb = np.zeros_like(b)
    n = len(X)
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            logits = X[idx] @ W + b
            p = np.exp(log_softmax_nd(logits))
            p[np.arange(len(idx)), y[idx]] -= 1.0
            p /= len(idx)
            gW = X[idx].T @ p + weight_decay * W
            gb = p.sum(axis=0)
            vW = momentum * vW - lr * gW
            vb = momentum * vb - lr * gb
            W += vW
            b += vb
    return W, b


@dataclass
class ProbeCellResult:
    lr: float
    momentum: float
    weight_decay: float
    val_acc: float
    test_acc: float


@dataclass
class LinearProbeResult:
    best: ProbeCellResult
    cells: list[ProbeCellResult] = field(default_factory=list)


def linear_probe(
    train: EmbeddingSet,
    test: EmbeddingSet,
    grid: ProbeGrid = ProbeGrid(),
    label_kind: str = "species",
    seed: int = 0,
    val_frac: float = 0.1,
) -> LinearProbeResult:
    """Exhaustive grid search; cells selected by held-out validation accuracy,
    ties broken by enumeration order. The backbone is not involved at all:
    only (embedding, label) pairs enter."""
    tr_labels = getattr(train, label_kind)
    te_labels = getattr(test, label_kind)
    classes = sorted(set(tr_labels))
    if len(classes) < 2:
        raise ValueError("degenerate probe: training embeddings have a single class")
    missing = set(te_labels) - set(classes)
    if missing:
        raise ValueError(f"test labels absent from probe training set: {sorted(missing)[:5]}")
    lut = {c: i for i, c in enumerate(classes)}
    y_tr = np.array([lut[c] for c in tr_labels], dtype=np.int64)
    y_te = np.array([lut[c] for c in te_labels], dtype=np.int64)

    rng = np.random.default_rng(np.random.PCG64(seed))
    order = rng.permutation(len(y_tr))
    n_val = max(1, int(val_frac * len(y_tr)))
    val_idx, fit_idx = order[:n_val], order[n_val:]
    X = train.vectors.astype(np.float64)
    Xte = test.vectors.astype(np.float64)

    cells: list[ProbeCellResult] = []
    best: ProbeCellResult | None = None
    for lr, mom, wd in grid.cells():
        W, b = _fit_softmax_sgd(X[fit_idx], y_tr[fit_idx], len(classes), lr, mom, wd, grid.epochs, seed)
        val_acc = float(((X[val_idx] @ W + b).argmax(axis=1) == y_tr[val_idx]).mean())
        test_acc = float(((Xte @ W + b).argmax(axis=1) == y_te).mean())
        cell = ProbeCellResult(lr, mom, wd, val_acc, test_acc)
        cells.append(cell)
        if best is None or cell.val_acc > best.val_acc:
            best = cell
    return LinearProbeResult(best=best, cells=cells)


def write_probe_csv(path: str, result: LinearProbeResult) -> None:
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["lr", "momentum", "weight_decay", "val_acc", "test_acc"])
        for c in result.cells:
            writer.writerow([repr(c.lr), repr(c.momentum), repr(c.weight_decay), repr(c.val_acc), repr(c.test_acc)])


# ---------------------------------------------------------------------------
# 1-NN probe
# ---------------------------------------------------------------------------

def knn_predict(train_vectors: np.ndarray, test_vectors: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Vectorized nearest-neighbor indices; ties resolve to the lowest train
    index (argmax/argmin take the first occurrence)."""
    if len(train_vectors) == 0:
        raise ValueError("empty 1-NN training set")
    if metric == "cosine":
        a = _unit_rows(test_vectors)
        b = _unit_rows(train_vectors)
        return (a @ b.T).argmax(axis=1)
    if metric == "euclidean":
        d2 = ((test_vectors[:, None, :] - train_vectors[None, :, :]) ** 2).sum(axis=2)
        return d2.argmin(axis=1)
    raise ValueError(f"unknown metric {metric!r}")


def knn_predict_bruteforce(train_vectors: np.ndarray, test_vectors: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """O(n^2) per-pair reference used as the oracle for knn_predict."""
    if len(train_vectors) == 0:
        raise ValueError("empty 1-NN training set")
    out = np.empty(len(test_vectors), dtype=np.int64)
    if metric == "cosine":
        a = _unit_rows(test_vectors)
        b = _unit_rows(train_vectors)
        for i in range(len(a)):
            best_j, best_sim = 0, -np.inf
            for j in range(len(b)):
                sim = (a[i] * b[j]).sum()
                if sim > best_sim:
                    best_j, best_sim = j, sim
            out[i] = best_j
    elif metric == "euclidean":
        for i in range(len(test_vectors)):
            best_j, best_d = 0, np.inf
            for j in range(len(train_vectors)):
                d = ((test_vectors[i] - train_vectors[j]) ** 2).sum()
                if d < best_d:
                    best_j, best_d = j, d
            out[i] = best_j
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return out


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    norms[norms == 0.0] = 1.0
    return x / norms


def knn_probe(
    train: EmbeddingSet,
    test: EmbeddingSet,
    k: int = 1,
    metric: str = "cosine",
    label_kind: str = "genus",
) -> float:
    """Genus accuracy of 1-NN classification of test embeddings."""
    if k != 1:
        raise ValueError("only k=1 is supported")
    tr_labels = getattr(train, label_kind)
    te_labels = getattr(test, label_kind)
    missing = set(te_labels) - set(tr_labels)
    if missing:
        raise ValueError(f"test {label_kind} labels absent from the 1-NN training set: {sorted(missing)[:5]}")
    nn = knn_predict(train.vectors, test.vectors, metric)
    preds = [tr_labels[j] for j in nn]
    return accuracy(preds, te_labels)


def save_probe_summary(out_dir: str, result: LinearProbeResult, knn_acc: float | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_probe_csv(os.path.join(out_dir, "probe_grid.csv"), result)
    summary = {
        "best_cell": {
            "lr": result.best.lr,
            "momentum": result.best.momentum,
            "weight_decay": result.best.weight_decay,
            "val_acc": result.best.val_acc,
            "test_acc": result.best.test_acc,
        },
        "n_cells": len(result.cells),
    }
    if knn_acc is not None:
        summary["knn_genus_acc"] = knn_acc
    with open(os.path.join(out_dir, "probe_summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
