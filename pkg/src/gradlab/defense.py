"""DP-SGD-style gradient sanitization (clip to C, add Gaussian noise).

Applied to the shared gradients before the attacker sees them.  Privacy
accounting is intentionally absent: runs record (sigma, C, delta, steps,
batch size) in their manifest so epsilon can be computed externally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .model import BlockStore, GradStore, ModelConfig, ParamStore, per_example_gradients
from .autodiff import Tensor

NO_CLIP = math.inf  # sentinel clip bound for ablations


@dataclass(frozen=True)
class DpConfig:
    clip_bound: float = 1.0
    noise_multiplier: float = 0.0
    delta: float = 2e-5
    seed: int = 0

    def __post_init__(self):
        if not self.clip_bound > 0:
            raise ConfigError("clip_bound must be positive (or math.inf)")
        if self.noise_multiplier < 0:
            raise ConfigError("noise_multiplier must be >= 0")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {
            "clip_bound": None if math.isinf(self.clip_bound) else self.clip_bound,
            "noise_multiplier": self.noise_multiplier,
            "delta": self.delta,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DpConfig":
        d = dict(d)
        if d.get("clip_bound") is None:
            d["clip_bound"] = NO_CLIP
        return cls(**d)


def global_norm(grads: GradStore) -> float:
    """L2 norm of the full concatenated gradient vector."""
    return math.sqrt(sum(float(np.sum(t.data * t.data)) for t in grads.values()))


def dp_transform(
    per_example_grads: list[GradStore],
    dp: DpConfig,
    rng: np.random.Generator | None = None,
) -> GradStore:
    """Clip each example's gradient to global norm <= C, average, add noise.

    Noise is Gaussian with per-coordinate std sigma * C / B, drawn from a
    single seeded stream in lexicographic block order (deterministic given
    the seed).
    """
    if not per_example_grads:
        raise InputError("dp_transform needs at least one per-example gradient")
    names = per_example_grads[0].names()
    for g in per_example_grads[1:]:
        if g.names() != names:
            raise InputError("per-example gradients must share one key-set")

    b = len(per_example_grads)
    acc = {n: np.zeros_like(per_example_grads[0][n].data) for n in names}
    for g in per_example_grads:
        scale = 1.0
        if not math.isinf(dp.clip_bound):
            norm = global_norm(g)
            if norm > dp.clip_bound:
                scale = dp.clip_bound / norm
        for n in names:
            acc[n] += scale * g[n].data
    for n in names:
        acc[n] /= b

    if dp.noise_multiplier > 0:
        if math.isinf(dp.clip_bound):
            raise ConfigError("noise requires a finite clip bound")
        std = dp.noise_multiplier * dp.clip_bound / b
        if rng is None:
            rng = np.random.default_rng(dp.seed)
        for n in names:
            acc[n] += rng.normal(0.0, std, size=acc[n].shape)

    return BlockStore({n: Tensor(acc[n]) for n in names})


def defended_victim_gradients(
    params: ParamStore,
    config: ModelConfig,
    batch,
    labels,
    dp: DpConfig,
    rng: np.random.Generator | None = None,
) -> GradStore:
    """What the client shares under the DP defense; feed this to resolve()."""
    per_ex = per_example_gradients(params, config, batch, labels)
    return dp_transform(per_ex, dp, rng=rng)
