"""Backbone: embedding, pre-norm residual blocks (mixer then MLP), weight-tied
LM head, optional classification head, and checkpoint persistence.

Block wiring: x <- x + Mixer(LN(x)); x <- x + MLP(LN(x)); final LN. The LM
head reuses the embedding matrix (logits = hidden @ E^T), so mutating an
embedding row moves the corresponding logit column.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import mixers, tensor_io
from .autodiff import Tensor, add, bias_add, einsum, embedding, layernorm, matmul, reshape, silu, transpose
from .tokenizers import TokenSeq, TokenizerSpec

CHECKPOINT_MAGIC = b"BSSMCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class BackboneConfig:
    d: int
    n_layers: int
    head_dim: int
    vocab_size: int
    mixer_kind: str = "mamba2"
    mlp_ratio: int = 4
    num_classes: int | None = None
    state_dim: int = 64  # mamba2 per-head state size
    mamba1_state_dim: int = 16
    conv_width: int = 4
    chunk_len: int = 32

    def validate(self) -> None:
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.vocab_size < 5:
            raise ValueError(f"vocab_size must be >= 5, got {self.vocab_size}")
        if self.d % self.head_dim != 0:
            raise ValueError(f"d={self.d} not divisible by head_dim={self.head_dim}")
        if self.mixer_kind not in ("mamba1", "mamba2"):
            raise ValueError(f"unknown mixer_kind {self.mixer_kind!r}")
        if self.mlp_ratio < 1:
            raise ValueError("mlp_ratio must be >= 1")
        if self.num_classes is not None and self.num_classes < 2:
            raise ValueError("num_classes must be >= 2 when set")


def config_param_count(config: BackboneConfig) -> int:
    """Analytic parameter count for a config; must equal the enumerated sum
    over the named tensor map (tested)."""
    d, r = config.d, config.mlp_ratio * config.d
    inner = mixers.EXPAND * d
    if config.mixer_kind == "mamba2":
        H = inner // config.head_dim
        S = config.state_dim
        conv_ch = inner + 2 * H * S
        mixer = d * (2 * inner + 2 * H * S + H) + conv_ch * config.conv_width + conv_ch + 3 * H + inner * d
    else:
        S = config.mamba1_state_dim
        conv_ch = inner + 2 * S
        mixer = d * (3 * inner + 2 * S) + conv_ch * config.conv_width + conv_ch + inner * S + 2 * inner + inner * d
    per_block = 4 * d + mixer + (d * r + r) + (r * d + d)
    total = config.vocab_size * d + config.n_layers * per_block + 2 * d
    if config.num_classes is not None:
        total += d * config.num_classes + config.num_classes
    return total


class Backbone:
    """Stacked-block language model over token ids."""

    def __init__(self, config: BackboneConfig, seed: int = 0, dtype=np.float32, init: bool = True):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.mixer_params: list = []
        self._build(seed if init else 0)

    def _build(self, seed: int) -> None:
        cfg = self.config
        rng = np.random.default_rng(np.random.PCG64(seed))
        d, r = cfg.d, cfg.mlp_ratio * cfg.d

        def p(name, arr):
            t = Tensor(arr, requires_grad=True, dtype=self.dtype)
            self.params[name] = t
            return t

        p("embedding", rng.normal(0.0, 0.02, size=(cfg.vocab_size, d)))
        for i in range(cfg.n_layers):
            p(f"layers.{i}.norm1.gain", np.ones(d))
            p(f"layers.{i}.norm1.bias", np.zeros(d))
            if cfg.mixer_kind == "mamba2":
                mp = mixers.init_mamba2(rng, d, cfg.head_dim, cfg.state_dim, cfg.conv_width, cfg.chunk_len, self.dtype)
            else:
                mp = mixers.init_mamba1(rng, d, cfg.mamba1_state_dim, cfg.conv_width, self.dtype)
            self.mixer_params.append(mp)
            for field, t in mp.named().items():
                self.params[f"layers.{i}.mixer.{field}"] = t
            p(f"layers.{i}.norm2.gain", np.ones(d))
            p(f"layers.{i}.norm2.bias", np.zeros(d))
            p(f"layers.{i}.mlp.fc1", rng.normal(0.0, d ** -0.5, size=(d, r)))
            p(f"layers.{i}.mlp.fc1_bias", np.zeros(r))
            p(f"layers.{i}.mlp.fc2", rng.normal(0.0, r ** -0.5, size=(r, d)))
            p(f"layers.{i}.mlp.fc2_bias", np.zeros(d))
        p("final_norm.gain", np.ones(d))
        p("final_norm.bias", np.zeros(d))
        if cfg.num_classes is not None:
            self._init_head(rng)

    def _init_head(self, rng: np.random.Generator) -> None:
        d, classes = self.config.d, self.config.num_classes
        self.params["head.weight"] = Tensor(rng.normal(0.0, d ** -0.5, size=(d, classes)), requires_grad=True, dtype=self.dtype)
        self.params["head.bias"] = Tensor(np.zeros(classes), requires_grad=True, dtype=self.dtype)

    def attach_head(self, num_classes: int, seed: int = 0) -> None:
        self.config.num_classes = num_classes
        self.config.validate()
        self._init_head(np.random.default_rng(np.random.PCG64(seed)))

    # -- forward ------------------------------------------------------------

    def forward_hidden_batch(self, ids: np.ndarray) -> Tensor:
        """ids (B, L) -> hidden (B, L, d)."""
        cfg = self.config
        if ids.max(initial=0) >= cfg.vocab_size or ids.min(initial=0) < 0:
            raise ValueError("token id out of range for vocabulary")
        x = embedding(self.params["embedding"], ids)
        Bsz, L = ids.shape
        for i in range(cfg.n_layers):
            h = layernorm(x, self.params[f"layers.{i}.norm1.gain"], self.params[f"layers.{i}.norm1.bias"])
            if cfg.mixer_kind == "mamba2":
                h = mixers.mamba2_layer(self.mixer_params[i], h)
            else:
                h = mixers.mamba1_layer(self.mixer_params[i], h)
            x = add(x, h)
            h = layernorm(x, self.params[f"layers.{i}.norm2.gain"], self.params[f"layers.{i}.norm2.bias"])
            h = reshape(h, (Bsz * L, cfg.d))
            h = silu(bias_add(matmul(h, self.params[f"layers.{i}.mlp.fc1"]), self.params[f"layers.{i}.mlp.fc1_bias"]))
            h = bias_add(matmul(h, self.params[f"layers.{i}.mlp.fc2"]), self.params[f"layers.{i}.mlp.fc2_bias"])
            x = add(x, reshape(h, (Bsz, L, cfg.d)))
        return layernorm(x, self.params["final_norm.gain"], self.params["final_norm.bias"])

    def lm_logits_batch(self, hidden: Tensor) -> Tensor:
        """Weight-tied decoder: logits = hidden @ embedding^T."""
        Bsz, L, d = hidden.shape
        flat = reshape(hidden, (Bsz * L, d))
        logits = matmul(flat, transpose(self.params["embedding"]))
        return reshape(logits, (Bsz, L, self.config.vocab_size))

    def embed_batch(self, ids: np.ndarray, pad_mask: np.ndarray, pooling: str = "mean") -> Tensor:
        """Pooled per-sequence embeddings (B, d) over non-pad positions."""
        hidden = self.forward_hidden_batch(ids)
        counts = pad_mask.sum(axis=1)
        if (counts == 0).any():
            raise ValueError("cannot pool an all-pad sequence")
        if pooling == "mean":
            maskf = pad_mask.astype(hidden.dtype)
            pooled = einsum("bld,bl->bd", hidden, Tensor(maskf))
            inv = Tensor(np.repeat((1.0 / counts).astype(hidden.dtype)[:, None], self.config.d, axis=1))
            return einsum("bd,bd->bd", pooled, inv)
        if pooling == "last":
            idx = pad_mask.shape[1] - 1 - np.argmax(pad_mask[:, ::-1], axis=1)
            rows = np.zeros(pad_mask.shape, dtype=hidden.dtype)
            rows[np.arange(len(idx)), idx] = 1.0
            return einsum("bld,bl->bd", hidden, Tensor(rows))
        raise ValueError(f"unknown pooling {pooling!r}")

    def classify_batch(self, ids: np.ndarray, pad_mask: np.ndarray, pooling: str = "mean") -> Tensor:
        if "head.weight" not in self.params:
            raise ValueError("classification head not attached")
        emb = self.embed_batch(ids, pad_mask, pooling)
        return bias_add(matmul(emb, self.params["head.weight"]), self.params["head.bias"])

    # -- bookkeeping ----------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def param_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = set(self.params)
        got = set(arrays)
        if expected != got:
            raise ValueError(f"parameter name mismatch: missing {sorted(expected - got)}, extra {sorted(got - expected)}")
        for name, t in self.params.items():
            arr = arrays[name].astype(self.dtype, copy=False)
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {t.data.shape}")
            t.data = np.ascontiguousarray(arr)


# -- spec-level single-sequence wrappers --------------------------------------

def forward_hidden(model: Backbone, ts: TokenSeq) -> np.ndarray:
    return model.forward_hidden_batch(ts.ids[None]).data[0]


def lm_logits(model: Backbone, hidden: np.ndarray | Tensor) -> np.ndarray:
    t = hidden if isinstance(hidden, Tensor) else Tensor(hidden, dtype=model.dtype)
    return model.lm_logits_batch(reshape(t, (1,) + t.shape)).data[0]


def embed_sequence(model: Backbone, ts: TokenSeq, pooling: str = "mean") -> np.ndarray:
    return model.embed_batch(ts.ids[None], ts.pad_mask[None], pooling).data[0]


def classify(model: Backbone, ts: TokenSeq) -> np.ndarray:
    return model.classify_batch(ts.ids[None], ts.pad_mask[None]).data[0]


# -- checkpointing -------------------------------------------------------------

def save_checkpoint(
    path: str,
    model: Backbone,
    tokenizer: TokenizerSpec,
    metadata: dict | None = None,
    train_state: dict | None = None,
) -> None:
    """Checkpoint = magic + version + JSON header + tensor container.

    train_state: {"step": int, "seed": int, "moments": {name: (m, v)}}.
    """
    tensors = {f"param.{k}": v for k, v in model.state_arrays().items()}
    state_meta: dict = {}
    if train_state:
        state_meta = {"step": train_state.get("step", 0), "seed": train_state.get("seed", 0)}
        for name, (m, v) in train_state.get("moments", {}).items():
            tensors[f"adam.m.{name}"] = m
            tensors[f"adam.v.{name}"] = v
    header = {
        "config": asdict(model.config),
        "dtype": "f4" if model.dtype == np.float32 else "f8",
        "tokenizer": json.loads(tokenizer.to_json()),
        "metadata": metadata or {},
        "train_state": state_meta,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        f.write(tensor_io.pack_tensors(tensors))


def load_checkpoint(path: str):
    """Returns (model, tokenizer_spec, metadata, train_state)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    (version,) = struct.unpack("<I", blob[8:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", blob[12:20])
    header = json.loads(blob[20 : 20 + hlen].decode("utf-8"))
    tensors = tensor_io.unpack_tensors(blob[20 + hlen :])
    config = BackboneConfig(**header["config"])
    dtype = np.float32 if header["dtype"] == "f4" else np.float64
    model = Backbone(config, dtype=dtype)
    model.load_state_arrays({k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")})
    tokenizer = TokenizerSpec.from_json(json.dumps(header["tokenizer"]))
    train_state = dict(header.get("train_state") or {})
    moments = {}
    for key, arr in tensors.items():
        if key.startswith("adam.m."):
            name = key[len("adam.m."):]
            moments[name] = (arr, tensors[f"adam.v.{name}"])
    if moments:
        train_state["moments"] = moments
    return model, tokenizer, header["metadata"], train_state
