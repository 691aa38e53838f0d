"""BERT-style transformer encoder for sequence classification.

Named parameter blocks follow a fixed canonical scheme so that gradient
subsets can be addressed per layer and per linear component:

    embed.word, embed.pos, embed.ln.{gamma,beta}
    layer.<i>.attn.{q,k,v,o}.{weight,bias}, layer.<i>.attn.ln.{gamma,beta}
    layer.<i>.ffn.f.{weight,bias}, layer.<i>.ffn.p.{weight,bias},
    layer.<i>.ffn.ln.{gamma,beta}
    cls.pool.{weight,bias}, cls.out.{weight,bias}

Weights use the x @ W + b convention, biases are row vectors.  The model is
deliberately mask-free: desk-scale batches use fixed-length sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as T
from .errors import ConfigError, InputError
from .autodiff import Tensor

LINEAR_PARTS = ("q", "k", "v", "o", "f", "p")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    vocab_size: int = 256
    max_seq_len: int = 16
    num_classes: int = 2
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        dims = (
            self.num_layers,
            self.hidden_dim,
            self.num_heads,
            self.ffn_dim,
            self.vocab_size,
            self.max_seq_len,
            self.num_classes,
        )
        if any(d < 1 for d in dims):
            raise ConfigError(f"all model dimensions must be >= 1, got {self}")
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by "
                f"num_heads {self.num_heads}"
            )
        if self.layer_norm_eps <= 0:
            raise ConfigError("layer_norm_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden_dim": self.hidden_dim,
            "num_heads": self.num_heads,
            "ffn_dim": self.ffn_dim,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "num_classes": self.num_classes,
            "layer_norm_eps": self.layer_norm_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# reference configurations used across tests and demos
TOY_CONFIG = ModelConfig()
BERT_BASE_CONFIG = ModelConfig(
    num_layers=12,
    hidden_dim=768,
    num_heads=12,
    ffn_dim=3072,
    vocab_size=30522,
    max_seq_len=512,
    num_classes=2,
)


def block_specs(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical block name -> shape, in lexicographic order."""
    d, dff = config.hidden_dim, config.ffn_dim
    specs: dict[str, tuple[int, ...]] = {
        "embed.word": (config.vocab_size, d),
        "embed.pos": (config.max_seq_len, d),
        "embed.ln.gamma": (d,),
        "embed.ln.beta": (d,),
        "cls.pool.weight": (d, d),
        "cls.pool.bias": (d,),
        "cls.out.weight": (d, config.num_classes),
        "cls.out.bias": (config.num_classes,),
    }
    for i in range(config.num_layers):
        p = f"layer.{i}"
        for part in ("q", "k", "v", "o"):
            specs[f"{p}.attn.{part}.weight"] = (d, d)
            specs[f"{p}.attn.{part}.bias"] = (d,)
        specs[f"{p}.attn.ln.gamma"] = (d,)
        specs[f"{p}.attn.ln.beta"] = (d,)
        specs[f"{p}.ffn.f.weight"] = (d, dff)
        specs[f"{p}.ffn.f.bias"] = (dff,)
        specs[f"{p}.ffn.p.weight"] = (dff, d)
        specs[f"{p}.ffn.p.bias"] = (d,)
        specs[f"{p}.ffn.ln.gamma"] = (d,)
        specs[f"{p}.ffn.ln.beta"] = (d,)
    return {name: specs[name] for name in sorted(specs)}


class BlockStore:
    """Named tensor blocks with fixed lexicographic iteration order.

    Used both for parameters (ParamStore) and for their mirror gradients
    (GradStore); a GradStore shares the exact key-set of its ParamStore.
    """

    __slots__ = ("_blocks",)

    def __init__(self, blocks: dict[str, Tensor]):
        self._blocks = {name: blocks[name] for name in sorted(blocks)}

    def __getitem__(self, name: str) -> Tensor:
        return self._blocks[name]

    def __contains__(self, name: str) -> bool:
        return name in self._blocks

    def __len__(self) -> int:
        return len(self._blocks)

    def __iter__(self):
        return iter(self._blocks)

    def names(self) -> list[str]:
        return list(self._blocks)

    def items(self):
        return self._blocks.items()

    def values(self):
        return self._blocks.values()

    def copy(self) -> "BlockStore":
        return BlockStore(
            {n: Tensor(np.array(t.data, copy=True)) for n, t in self.items()}
        )

    def map_data(self, fn) -> "BlockStore":
        return BlockStore({n: Tensor(fn(t.data)) for n, t in self.items()})


ParamStore = BlockStore
GradStore = BlockStore


def init_params(config: ModelConfig, seed: int = 0) -> ParamStore:
    """Fresh parameters: truncated-normal weights, standard LN/bias init.

    Weights ~ Normal(0, 0.02^2) truncated at +/-2 sigma; biases and LN beta
    zero; LN gamma one.  Deterministic given the seed.
    """
    rng = np.random.default_rng(seed)
    blocks: dict[str, Tensor] = {}
    for name, shape in block_specs(config).items():
        if name.endswith(".gamma"):
            data = np.ones(shape)
        elif name.endswith(".bias") or name.endswith(".beta"):
            data = np.zeros(shape)
        else:
            data = _truncated_normal(rng, shape, std=0.02, cut=2.0)
        blocks[name] = Tensor(data)
    return BlockStore(blocks)


def _truncated_normal(rng, shape, std: float, cut: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > cut * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > cut * std
    return out


def forward(params: ParamStore, config: ModelConfig, inputs, check=True) -> Tensor:
    """Logits [B, K] from token ids [B, T] or embeddings [B, T, d].

    The embedding input mode is what lets an attacker optimize continuous
    dummy inputs: such a tensor enters exactly where looked-up word rows
    would, before position embeddings are added.
    """
    if isinstance(inputs, Tensor):
        x = inputs
        t_len = x.shape[1]
        if x.ndim != 3 or x.shape[2] != config.hidden_dim:
            raise InputError(f"embedding input must be [B, T, d], got {x.shape}")
    else:
        ids = np.asarray(inputs)
        if ids.ndim != 2:
            raise InputError(f"token input must be [B, T], got shape {ids.shape}")
        if check and (ids.min() < 0 or ids.max() >= config.vocab_size):
            raise InputError("token id out of range")
        t_len = ids.shape[1]
        x = T.embedding(params["embed.word"], ids)
    if t_len > config.max_seq_len:
        raise InputError(f"sequence length {t_len} exceeds max {config.max_seq_len}")

    pos = T.getitem(params["embed.pos"], (slice(0, t_len),))
    x = x + pos
    eps = config.layer_norm_eps
    x = T.layer_norm(x, params["embed.ln.gamma"], params["embed.ln.beta"], eps)

    for i in range(config.num_layers):
        x = _encoder_layer(params, config, x, i)

    x0 = T.getitem(x, (slice(None), 0))
    pooled = T.tanh(x0 @ params["cls.pool.weight"] + params["cls.pool.bias"])
    return pooled @ params["cls.out.weight"] + params["cls.out.bias"]


def _encoder_layer(params, config, x, i: int) -> Tensor:
    b, t, d = x.shape
    h, dh = config.num_heads, config.head_dim
    eps = config.layer_norm_eps
    p = f"layer.{i}"

    def split_heads(y):
        return T.swapaxes(T.reshape(y, (b, t, h, dh)), 1, 2)

    q = split_heads(x @ params[f"{p}.attn.q.weight"] + params[f"{p}.attn.q.bias"])
    k = split_heads(x @ params[f"{p}.attn.k.weight"] + params[f"{p}.attn.k.bias"])
    v = split_heads(x @ params[f"{p}.attn.v.weight"] + params[f"{p}.attn.v.bias"])

    scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    weights = T.softmax_rowwise(scores)
    ctx = T.reshape(T.swapaxes(weights @ v, 1, 2), (b, t, d))
    attn = ctx @ params[f"{p}.attn.o.weight"] + params[f"{p}.attn.o.bias"]
    x = T.layer_norm(
        x + attn, params[f"{p}.attn.ln.gamma"], params[f"{p}.attn.ln.beta"], eps
    )

    hidden = T.gelu(x @ params[f"{p}.ffn.f.weight"] + params[f"{p}.ffn.f.bias"])
    out = hidden @ params[f"{p}.ffn.p.weight"] + params[f"{p}.ffn.p.bias"]
    return T.layer_norm(
        x + out, params[f"{p}.ffn.ln.gamma"], params[f"{p}.ffn.ln.beta"], eps
    )


def batch_loss(params: ParamStore, config: ModelConfig, inputs, labels) -> Tensor:
    logits = forward(params, config, inputs)
    return T.cross_entropy_with_logits(logits, labels)


def _loss_and_gradients(params, config, batch, labels):
    loss = batch_loss(params, config, batch, labels)
    names = params.names()
    grads = T.grad(loss, [params[n] for n in names])
    store = BlockStore({n: Tensor(g.data) for n, g in zip(names, grads)})
    return float(loss.item()), store


def victim_gradients(
    params: ParamStore, config: ModelConfig, batch, labels
) -> GradStore:
    """Gradient of the mean batch loss w.r.t. every parameter block.

    This is the full update a federated client would share; selections
    restrict what of it the attacker gets to see.
    """
    return _loss_and_gradients(params, config, batch, labels)[1]


def per_example_gradients(
    params: ParamStore, config: ModelConfig, batch, labels
) -> list[GradStore]:
    batch = np.asarray(batch)
    labels = np.asarray(labels)
    return [
        victim_gradients(params, config, batch[i : i + 1], labels[i : i + 1])
        for i in range(batch.shape[0])
    ]


# ---------------------------------------------------------------------------
# parameter accounting (Table-style module taxonomy)
# ---------------------------------------------------------------------------


def _layer_param_count(config: ModelConfig) -> int:
    d, dff = config.hidden_dim, config.ffn_dim
    attn = 4 * (d * d + d) + 2 * d
    ffn = (d * dff + dff) + (dff * d + d) + 2 * d
    return attn + ffn


def _embeddings_param_count(config: ModelConfig) -> int:
    d = config.hidden_dim
    return config.vocab_size * d + config.max_seq_len * d + 2 * d


def _classifier_param_count(config: ModelConfig) -> int:
    d, k = config.hidden_dim, config.num_classes
    return (d * d + d) + (d * k + k)


def count_params(config: ModelConfig, key) -> tuple[int, float]:
    """(parameter count, fraction of the full model) for a module key.

    Linear-granularity keys (q/k/v/o/f/p) count the weight matrix only;
    layer granularity and coarser include biases and LayerNorms too.
    """
    from .selection import ModuleKey  # local import to avoid a cycle

    key = ModuleKey.parse(key) if isinstance(key, str) else key
    key.validate(config)
    d, dff = config.hidden_dim, config.ffn_dim
    total = (
        _embeddings_param_count(config)
        + config.num_layers * _layer_param_count(config)
        + _classifier_param_count(config)
    )
    part = key.part
    if part in ("q", "k", "v", "o"):
        count = d * d
    elif part == "f":
        count = d * dff
    elif part == "p":
        count = dff * d
    elif part == "layer":
        count = _layer_param_count(config)
    elif part == "all_transformer":
        count = config.num_layers * _layer_param_count(config)
    elif part == "embeddings":
        count = _embeddings_param_count(config)
    elif part == "classifier":
        count = _classifier_param_count(config)
    elif part == "all":
        count = total
    else:  # pragma: no cover - ModuleKey.validate guards this
        raise InputError(f"unknown module part {part!r}")
    return count, count / total


# ---------------------------------------------------------------------------
# plain mini-batch training (victim fine-tuning, defense utility runs)
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ParamStore
    accuracy: float
    f1: float
    mcc: float
    history: list[float] = field(default_factory=list)


def train(
    params: ParamStore,
    config: ModelConfig,
    dataset,
    epochs: int = 2,
    lr: float = 0.1,
    batch_size: int = 8,
    dp=None,
    seed: int = 0,
    holdout_fraction: float = 0.2,
) -> TrainResult:
    """Plain mini-batch gradient descent, optionally with DP-sanitized steps.

    ``dataset`` is a sequence of (token_ids, label) with uniform lengths per
    batch (sequences are grouped by length).  Returns held-out accuracy, F1
    and MCC alongside the updated parameters.
    """
    from .defense import dp_transform
    from .metrics import binary_f1, mcc as mcc_score

    if not dataset:
        raise InputError("train needs a non-empty dataset")
    rng = np.random.default_rng(seed)
    n_hold = max(1, int(len(dataset) * holdout_fraction))
    order = rng.permutation(len(dataset))
    hold_idx = set(order[:n_hold].tolist())
    train_items = [dataset[i] for i in range(len(dataset)) if i not in hold_idx]
    hold_items = [dataset[i] for i in sorted(hold_idx)]

    params = params.copy()
    noise_rng = np.random.default_rng(dp.seed) if dp is not None else None
    history: list[float] = []
    for _ in range(max(0, epochs)):
        for batch, labels in _length_batches(train_items, batch_size, rng):
            if dp is None:
                loss, grads = _loss_and_gradients(params, config, batch, labels)
            else:
                loss = float(batch_loss(params, config, batch, labels).item())
                per_ex = per_example_gradients(params, config, batch, labels)
                grads = dp_transform(per_ex, dp, rng=noise_rng)
            if lr != 0.0:
                for name in params.names():
                    params[name].data -= lr * grads[name].data
            history.append(loss)

    preds, labels = [], []
    for batch, batch_labels in _length_batches(hold_items, batch_size, None):
        logits = forward(params, config, batch)
        preds.extend(np.argmax(logits.data, axis=1).tolist())
        labels.extend(batch_labels.tolist())
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    acc = float((preds == labels).mean()) if len(labels) else 0.0
    return TrainResult(
        params=params,
        accuracy=acc,
        f1=binary_f1(preds, labels),
        mcc=mcc_score(preds, labels),
        history=history,
    )


def _length_batches(items, batch_size: int, rng):
    """Group (ids, label) pairs by sequence length into uniform batches."""
    by_len: dict[int, list] = {}
    for ids, label in items:
        by_len.setdefault(len(ids), []).append((ids, label))
    for length in sorted(by_len):
        group = by_len[length]
        if rng is not None:
            perm = rng.permutation(len(group))
            group = [group[int(i)] for i in perm]
        for start in range(0, len(group), batch_size):
            chunk = group[start : start + batch_size]
            batch = np.asarray([ids for ids, _ in chunk], dtype=np.int64)
            labels = np.asarray([lbl for _, lbl in chunk], dtype=np.int64)
            yield batch, labels
