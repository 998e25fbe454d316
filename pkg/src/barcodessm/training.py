"""Self-supervised pretraining (NTP / MLM), supervised fine-tuning, AdamW,
and the warmup-cosine schedule.

Every stochastic choice (batch order, reverse-complement flips, MLM masks)
comes from one PCG64 generator keyed by the run seed, so a fixed
(seed, config, data) triple reproduces every logged value.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, getitem, nll_stats, no_grad, softmax_xent
from .data import DatasetBundle, reverse_complement
from .model import Backbone
from .tokenizers import TokenizerSpec, encode_batch

ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    objective: str = "ntp"  # "ntp" | "mlm"
    lr: float = 6e-4
    weight_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    warmup_frac: float = 0.01
    final_lr_frac: float = 0.10
    max_epochs: int = 25
    batch_size: int = 16
    mlm_mask_ratio: float = 0.30
    rc_augment_prob: float = 0.5
    seed: int = 0
    patience: int = 3

    def validate(self) -> None:
        if self.objective not in ("ntp", "mlm"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must be in (0,1)")
        if not 0.0 < self.final_lr_frac <= 1.0:
            raise ValueError("final_lr_frac must be in (0,1]")
        if self.objective == "mlm" and not 0.0 < self.mlm_mask_ratio < 1.0:
            raise ValueError("mlm_mask_ratio must be in (0,1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs, patience must be >= 1")
        if not 0.0 <= self.rc_augment_prob <= 1.0:
            raise ValueError("rc_augment_prob must be in [0,1]")


def lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    """Linear ramp to config.lr over the first warmup_frac of training, then
    cosine decay to final_lr_frac * lr at total_steps. Continuous at the
    junction: the ramp ends at lr and the cosine starts at lr."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = config.warmup_frac * total_steps
    if step <= warmup:
        return config.lr * (step / warmup) if warmup > 0 else config.lr
    lo = config.final_lr_frac * config.lr
    progress = (step - warmup) / (total_steps - warmup)
    return lo + 0.5 * (config.lr - lo) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class AdamMoments:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: dict[str, Tensor],
    moments: AdamMoments,
    config: TrainConfig,
    lr: float,
    decay_names: set[str] | None = None,
) -> None:
    """One decoupled-weight-decay Adam update with bias-corrected moments.

    decay_names restricts weight decay to a subset of parameters; None decays
    everything. Raises on non-finite gradients (step aborted before any
    parameter is touched).
    """
    grads = {}
    for name, t in params.items():
        if t.grad is None:
            continue
        if not np.all(np.isfinite(t.grad)):
            raise FloatingPointError(f"non-finite gradient for {name}; step aborted")
        grads[name] = t.grad
    moments.step += 1
    b1, b2 = config.betas
    c1 = 1.0 - b1 ** moments.step
    c2 = 1.0 - b2 ** moments.step
    for name, g in grads.items():
        p = params[name].data
        if name not in moments.m:
            moments.m[name] = np.zeros_like(p)
            moments.v[name] = np.zeros_like(p)
        m, v = moments.m[name], moments.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        if config.weight_decay and (decay_names is None or name in decay_names):
            update = update + config.weight_decay * p
        p -= lr * update


def default_decay_names(params: dict[str, Tensor]) -> set[str]:
    # decay matrices only; gains, biases, and per-head scalars stay undecayed
    return {name for name, t in params.items() if t.data.ndim >= 2}


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def ntp_loss(model: Backbone, ids: np.ndarray, pad_mask: np.ndarray) -> Tensor:
    """Cross-entropy of logits at positions 0..L-2 against tokens 1..L-1."""
    if ids.shape[1] < 2:
        raise ValueError("NTP needs sequences of at least 2 tokens")
    logits = model.lm_logits_batch(model.forward_hidden_batch(ids))
    L = ids.shape[1]
    pred = getitem(logits, (slice(None), slice(0, L - 1)))
    targets = ids[:, 1:]
    mask = pad_mask[:, :-1] & pad_mask[:, 1:]
    return softmax_xent(pred, targets, mask)


def ntp_nll_stats(model: Backbone, ids: np.ndarray, pad_mask: np.ndarray) -> tuple[float, int]:
    """(sum, count) of per-token NTP negative log-likelihood, no graph."""
    with no_grad():
        logits = model.lm_logits_batch(model.forward_hidden_batch(ids)).data
    mask = pad_mask[:, :-1] & pad_mask[:, 1:]
    return nll_stats(logits[:, :-1], ids[:, 1:], mask)


def sample_mlm_mask(pad_mask: np.ndarray, mask_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Choose ceil(mask_ratio * n_real) non-pad positions per sequence."""
    out = np.zeros(pad_mask.shape, dtype=bool)
    for i in range(pad_mask.shape[0]):
        real = np.flatnonzero(pad_mask[i])
        n = math.ceil(mask_ratio * real.size)
        if n == 0:
            raise ValueError("mlm_mask_ratio selects zero positions")
        picked = rng.choice(real, size=n, replace=False)
        out[i, picked] = True
    return out


def mlm_loss(
    model: Backbone,
    ids: np.ndarray,
    pad_mask: np.ndarray,
    mask_ratio: float,
    rng: np.random.Generator,
    mask_id: int,
) -> Tensor:
    """Replace sampled positions with [MASK]; cross-entropy only there."""
    mask = sample_mlm_mask(pad_mask, mask_ratio, rng)
    corrupted = ids.copy()
    corrupted[mask] = mask_id
    logits = model.lm_logits_batch(model.forward_hidden_batch(corrupted))
    return softmax_xent(logits, ids, mask)


def mlm_nll_stats(
    model: Backbone,
    ids: np.ndarray,
    pad_mask: np.ndarray,
    mask_ratio: float,
    rng: np.random.Generator,
    mask_id: int,
) -> tuple[float, int]:
    mask = sample_mlm_mask(pad_mask, mask_ratio, rng)
    corrupted = ids.copy()
    corrupted[mask] = mask_id
    with no_grad():
        logits = model.lm_logits_batch(model.forward_hidden_batch(corrupted)).data
    return nll_stats(logits, ids, mask)


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

def _batches(n: int, batch_size: int, order: np.ndarray):
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]


def _encode_with_rc(tokenizer: TokenizerSpec, records) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    seqs = [r.sequence for r in records]
    ids_fwd, mask = encode_batch(tokenizer, seqs)
    ids_rc, _ = encode_batch(tokenizer, [reverse_complement(s) for s in seqs])
    return ids_fwd, ids_rc, mask


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    perplexity: float
    lr: float
    wall_time_s: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "perplexity": self.perplexity,
            "lr": self.lr,
            "wall_time_s": self.wall_time_s,
        }


def _objective_val_loss(model, config, tokenizer, ids, mask) -> float:
    total, count = 0.0, 0
    if config.objective == "ntp":
        for lo in range(0, len(ids), config.batch_size):
            s, c = ntp_nll_stats(model, ids[lo : lo + config.batch_size], mask[lo : lo + config.batch_size])
            total += s
            count += c
    else:
        # fixed seed: identical masks every evaluation, so epochs compare
        rng = np.random.default_rng(np.random.PCG64(config.seed + 0x5EED))
        for lo in range(0, len(ids), config.batch_size):
            s, c = mlm_nll_stats(
                model, ids[lo : lo + config.batch_size], mask[lo : lo + config.batch_size],
                config.mlm_mask_ratio, rng, tokenizer.mask_id,
            )
            total += s
            count += c
    return total / count


@dataclass
class PretrainResult:
    history: list[EpochLog]
    moments: AdamMoments  # optimizer state at the best epoch
    best_epoch: int
    best_val_loss: float


def pretrain(
    model: Backbone,
    bundle: DatasetBundle,
    config: TrainConfig,
    tokenizer: TokenizerSpec,
) -> PretrainResult:
    """Epoch loop with reverse-complement augmentation, per-epoch validation,
    and early stopping on validation loss. The model is left holding the
    best-epoch parameters."""
    config.validate()
    rng = np.random.default_rng(np.random.PCG64(config.seed))
    ids_fwd, ids_rc, mask_tr = _encode_with_rc(tokenizer, bundle.pretrain_train)
    ids_val, val_mask = encode_batch(tokenizer, [r.sequence for r in bundle.pretrain_val])

    n = len(ids_fwd)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.max_epochs
    moments = AdamMoments()
    decay = default_decay_names(model.params)

    best_val = math.inf
    best_state = model.state_arrays()
    best_moments = AdamMoments()
    best_epoch = -1
    history: list[EpochLog] = []
    step = 0
    stale = 0
    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        flip = rng.random(n) < config.rc_augment_prob
        train_sum, train_count = 0.0, 0
        for batch_idx in _batches(n, config.batch_size, order):
            ids = np.where(flip[batch_idx][:, None], ids_rc[batch_idx], ids_fwd[batch_idx])
            bmask = mask_tr[batch_idx]
            model.zero_grad()
            if config.objective == "ntp":
                loss = ntp_loss(model, ids, bmask)
            else:
                loss = mlm_loss(model, ids, bmask, config.mlm_mask_ratio, rng, tokenizer.mask_id)
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"training diverged at step {step}: loss={loss.item()}")
            loss.backward()
            step += 1
            adamw_step(model.params, moments, config, lr_at(config, step, total_steps), decay)
            train_sum += loss.item() * len(batch_idx)
            train_count += len(batch_idx)

        val_loss = _objective_val_loss(model, config, tokenizer, ids_val, val_mask)
        log = EpochLog(
            epoch=epoch,
            train_loss=train_sum / train_count,
            val_loss=val_loss,
            perplexity=math.exp(val_loss),
            lr=lr_at(config, step, total_steps),
            wall_time_s=time.perf_counter() - t0,
        )
        history.append(log)
        if val_loss < best_val:
            best_val = val_loss
            best_state = model.state_arrays()
            best_moments = AdamMoments({k: v.copy() for k, v in moments.m.items()}, {k: v.copy() for k, v in moments.v.items()}, moments.step)
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    model.load_state_arrays(best_state)
    return PretrainResult(history=history, moments=best_moments, best_epoch=best_epoch, best_val_loss=best_val)


def species_label_map(records) -> dict[str, int]:
    return {sp: i for i, sp in enumerate(sorted({r.species for r in records if r.species}))}


def finetune(
    model: Backbone,
    bundle: DatasetBundle,
    config: TrainConfig,
    tokenizer: TokenizerSpec,
    head_seed: int = 0,
) -> tuple[dict[str, int], list[dict], float]:
    """Attach a species classification head and train end-to-end (all weights
    unfrozen). Selects the best epoch by ft_val accuracy; returns the label
    map, per-epoch history, and ft_test accuracy of the selected epoch."""
    config.validate()
    label_map = species_label_map(bundle.ft_train)
    if len(label_map) < 2:
        raise ValueError("fine-tuning needs at least two species in ft_train")
    if model.config.num_classes is None:
        model.attach_head(len(label_map), seed=head_seed)
    elif model.config.num_classes != len(label_map):
        raise ValueError("attached head size does not match ft_train label count")

    def encode_part(records):
        for r in records:
            if r.species not in label_map:
                raise ValueError(f"label {r.species!r} absent from the training label map")
        ids, mask = encode_batch(tokenizer, [r.sequence for r in records])
        labels = np.array([label_map[r.species] for r in records], dtype=np.int64)
        return ids, mask, labels

    tr = encode_part(bundle.ft_train)
    va = encode_part(bundle.ft_val)
    te = encode_part(bundle.ft_test)

    rng = np.random.default_rng(np.random.PCG64(config.seed))
    n = len(tr[0])
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.max_epochs
    moments = AdamMoments()
    decay = default_decay_names(model.params)

    def eval_acc(part) -> float:
        ids, mask, labels = part
        correct = 0
        with no_grad():
            for lo in range(0, len(ids), config.batch_size):
                logits = model.classify_batch(ids[lo : lo + config.batch_size], mask[lo : lo + config.batch_size]).data
                correct += int((logits.argmax(axis=1) == labels[lo : lo + config.batch_size]).sum())
        return correct / len(ids)

    best_val, best_state, stale, step = -1.0, model.state_arrays(), 0, 0
    history: list[dict] = []
    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        train_sum, train_count = 0.0, 0
        for batch_idx in _batches(n, config.batch_size, order):
            model.zero_grad()
            logits = model.classify_batch(tr[0][batch_idx], tr[1][batch_idx])
            loss = softmax_xent(logits, tr[2][batch_idx])
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"fine-tuning diverged at step {step}")
            loss.backward()
            step += 1
            adamw_step(model.params, moments, config, lr_at(config, step, total_steps), decay)
            train_sum += loss.item() * len(batch_idx)
            train_count += len(batch_idx)
        val_acc = eval_acc(va)
        history.append(
            {
                "epoch": epoch,
                "train_loss": train_sum / train_count,
                "val_acc": val_acc,
                "lr": lr_at(config, step, total_steps),
                "wall_time_s": time.perf_counter() - t0,
            }
        )
        if val_acc > best_val:
            best_val, best_state, stale = val_acc, model.state_arrays(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    model.load_state_arrays(best_state)
    return label_map, history, eval_acc(te)
