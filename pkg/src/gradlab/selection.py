"""Module keys: which gradient blocks the attacker observes.

String syntax for configs and the CLI: ``part[@index]``, e.g. ``q@1``,
``layer@9``, ``transformer``, ``embeddings``, ``classifier``, ``all``.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import UsageError
from .model import GradStore, ModelConfig, count_params

PARTS = (
    "q",
    "k",
    "v",
    "o",
    "f",
    "p",
    "layer",
    "all_transformer",
    "embeddings",
    "classifier",
    "all",
)
_INDEXED = {"q", "k", "v", "o", "f", "p", "layer"}
_ALIASES = {"transformer": "all_transformer"}


@dataclass(frozen=True)
class ModuleKey:
    part: str
    layer_index: int | None = None

    def __post_init__(self):
        if self.part not in PARTS:
            raise UsageError(f"unknown module part {self.part!r}")
        if self.part in _INDEXED:
            if self.layer_index is None:
                raise UsageError(f"part {self.part!r} requires a layer index")
        elif self.layer_index is not None:
            raise UsageError(f"part {self.part!r} does not take a layer index")

    @classmethod
    def parse(cls, text: str) -> "ModuleKey":
        text = text.strip()
        if "@" in text:
            part, _, idx = text.partition("@")
            part = _ALIASES.get(part, part)
            try:
                return cls(part, int(idx))
            except ValueError as exc:
                raise UsageError(f"bad layer index in key {text!r}") from exc
        return cls(_ALIASES.get(text, text), None)

    def __str__(self) -> str:
        name = "transformer" if self.part == "all_transformer" else self.part
        if self.layer_index is None:
            return name
        return f"{name}@{self.layer_index}"

    def validate(self, config: ModelConfig) -> None:
        if self.layer_index is not None and not (
            0 <= self.layer_index < config.num_layers
        ):
            raise UsageError(
                f"layer index {self.layer_index} out of range for "
                f"{config.num_layers} layers"
            )

    def block_names(self, config: ModelConfig) -> list[str]:
        """Covered block names, lexicographically ordered within the key."""
        self.validate(config)
        if self.part in ("q", "k", "v", "o"):
            return [f"layer.{self.layer_index}.attn.{self.part}.weight"]
        if self.part == "f":
            return [f"layer.{self.layer_index}.ffn.f.weight"]
        if self.part == "p":
            return [f"layer.{self.layer_index}.ffn.p.weight"]
        if self.part == "layer":
            return _layer_blocks(self.layer_index)
        if self.part == "all_transformer":
            out = []
            for i in range(config.num_layers):
                out.extend(_layer_blocks(i))
            return out
        if self.part == "embeddings":
            return sorted(
                ["embed.word", "embed.pos", "embed.ln.gamma", "embed.ln.beta"]
            )
        if self.part == "classifier":
            return sorted(
                ["cls.pool.weight", "cls.pool.bias", "cls.out.weight", "cls.out.bias"]
            )
        # "all": every block in the store
        from .model import block_specs

        return list(block_specs(config))


def _layer_blocks(i: int) -> list[str]:
    p = f"layer.{i}"
    names = []
    for part in ("q", "k", "v", "o"):
        names.extend([f"{p}.attn.{part}.weight", f"{p}.attn.{part}.bias"])
    names.extend([f"{p}.attn.ln.gamma", f"{p}.attn.ln.beta"])
    names.extend([f"{p}.ffn.f.weight", f"{p}.ffn.f.bias"])
    names.extend([f"{p}.ffn.p.weight", f"{p}.ffn.p.bias"])
    names.extend([f"{p}.ffn.ln.gamma", f"{p}.ffn.ln.beta"])
    return sorted(names)


@dataclass(frozen=True)
class Selection:
    """Ordered module keys with positive per-key weights (default 1)."""

    keys: tuple[ModuleKey, ...]
    weights: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.keys:
            raise UsageError("selection must contain at least one key")
        if not self.weights:
            object.__setattr__(self, "weights", (1.0,) * len(self.keys))
        if len(self.weights) != len(self.keys):
            raise UsageError("selection weights must align with keys")
        if any(w <= 0 for w in self.weights):
            raise UsageError("selection weights must be positive")

    @classmethod
    def parse(cls, spec) -> "Selection":
        """Build from a string like ``"q@1"`` or ``"layer@0+layer@1"``."""
        if isinstance(spec, Selection):
            return spec
        if isinstance(spec, ModuleKey):
            return cls((spec,))
        parts = [p for p in str(spec).split("+") if p]
        return cls(tuple(ModuleKey.parse(p) for p in parts))

    def __str__(self) -> str:
        return "+".join(str(k) for k in self.keys)

    def lamp_baseline_weights(self, config: ModelConfig) -> "Selection":
        """Equal 1/l weights over the keys (full-gradient baseline mode)."""
        w = 1.0 / max(1, config.num_layers)
        return Selection(self.keys, (w,) * len(self.keys))


GradientView = list[tuple[str, object]]


def resolve(
    selection: Selection, grads: GradStore, config: ModelConfig
) -> GradientView:
    """Materialize the selected gradient blocks in deterministic order.

    Order is selection order, then lexicographic block order within each
    key.  Duplicate coverage of one block across keys is a usage error.
    """
    selection = Selection.parse(selection)
    seen: dict[str, ModuleKey] = {}
    view: GradientView = []
    for key in selection.keys:
        for name in key.block_names(config):
            if name in seen:
                raise UsageError(
                    f"block {name!r} covered twice (by {seen[name]} and {key})"
                )
            seen[name] = key
            view.append((name, grads[name]))
    return view


def view_weights(selection: Selection, config: ModelConfig) -> list[float]:
    """Per-block weights aligned with resolve() output order."""
    selection = Selection.parse(selection)
    out: list[float] = []
    for key, w in zip(selection.keys, selection.weights):
        out.extend([w] * len(key.block_names(config)))
    return out


def used_ratio(selection, config: ModelConfig) -> float:
    """Fraction of all model parameters covered by the selection."""
    selection = Selection.parse(selection)
    total = count_params(config, ModuleKey("all"))[0]
    used = sum(count_params(config, key)[0] for key in selection.keys)
    return used / total
