"""View construction for the contrastive objectives.

Transforms take batched (B, L, m) or single (L, m) tensors and an explicit
``torch.Generator`` so that every stream of draws is reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import SegmentTooShort

COMPOSE_ORDER = ("scale", "shift", "jitter", "mask")


@dataclass(frozen=True)
class AugmentPolicy:
    mask_prob: float = 0.1
    jitter_sigma: float = 0.1
    scale_range: tuple[float, float] = (0.8, 1.2)
    shift_range: tuple[float, float] = (-0.1, 0.1)
    rng_seed: int = 0
    order: tuple[str, ...] = COMPOSE_ORDER

    def __post_init__(self):
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("mask_prob must lie in [0, 1]")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < lo <= hi")
        if self.shift_range[0] > self.shift_range[1]:
            raise ValueError("shift_range must satisfy lo <= hi")
        if sorted(self.order) != sorted(COMPOSE_ORDER):
            raise ValueError(f"order must be a permutation of {COMPOSE_ORDER}")

    @classmethod
    def identity(cls, rng_seed: int = 0) -> "AugmentPolicy":
        return cls(0.0, 0.0, (1.0, 1.0), (0.0, 0.0), rng_seed)


def _batched(x):
    return (x.unsqueeze(0), True) if x.dim() == 2 else (x, False)


def _uniform(shape, lo, hi, gen, like):
    return torch.rand(shape, generator=gen, dtype=like.dtype).to(like.device) * (hi - lo) + lo


def mask(x, p, gen=None):
    """Zero whole timestamps independently with probability ``p``."""
    if p <= 0:
        return x
    xb, single = _batched(x)
    drop = torch.rand(xb.shape[:2], generator=gen).to(xb.device) < p
    out = xb.masked_fill(drop.unsqueeze(-1), 0.0)
    return out[0] if single else out


def jitter(x, sigma, gen=None):
    if sigma <= 0:
        return x
    noise = torch.randn(x.shape, generator=gen, dtype=x.dtype).to(x.device)
    return x + sigma * noise


def scale(x, bounds, gen=None):
    """Multiply each window by one Uniform(lo, hi) draw per feature."""
    lo, hi = bounds
    if lo == hi == 1.0:
        return x
    xb, single = _batched(x)
    factors = _uniform((xb.shape[0], 1, xb.shape[2]), lo, hi, gen, xb)
    out = xb * factors
    return out[0] if single else out


def shift(x, bounds, gen=None):
    """Add one Uniform(lo, hi) draw per feature to each window."""
    lo, hi = bounds
    if lo == hi == 0.0:
        return x
    xb, single = _batched(x)
    offsets = _uniform((xb.shape[0], 1, xb.shape[2]), lo, hi, gen, xb)
    out = xb + offsets
    return out[0] if single else out


class Augmenter:
    """Applies a policy; call ``i`` draws from a generator seeded by (seed, i)."""

    def __init__(self, policy: AugmentPolicy):
        self.policy = policy
        self.counter = 0

    def reset(self):
        self.counter = 0

    def generator(self) -> torch.Generator:
        seed = np.random.SeedSequence([self.policy.rng_seed, self.counter]).generate_state(1)[0]
        self.counter += 1
        return torch.Generator().manual_seed(int(seed))

    def __call__(self, x):
        return compose(self.policy, x, self.generator())


def compose(policy: AugmentPolicy, x, gen=None):
    steps = {
        "scale": lambda v: scale(v, policy.scale_range, gen),
        "shift": lambda v: shift(v, policy.shift_range, gen),
        "jitter": lambda v: jitter(v, policy.jitter_sigma, gen),
        "mask": lambda v: mask(v, policy.mask_prob, gen),
    }
    for name in policy.order:
        x = steps[name](x)
    return x


@dataclass(frozen=True)
class CropPair:
    """Two crops of one segment. View a spans [a1, a2), view b spans [b1, b2),
    and they overlap on [b1, a2)."""

    a1: int
    a2: int
    b1: int
    b2: int

    @property
    def overlap(self) -> int:
        return self.a2 - self.b1

    def overlap_a(self) -> slice:
        """Overlap positions in view-a coordinates."""
        return slice(self.b1 - self.a1, self.a2 - self.a1)

    def overlap_b(self) -> slice:
        return slice(0, self.a2 - self.b1)


def _randint(lo, hi, gen):
    """Uniform integer in [lo, hi)."""
    return int(torch.randint(lo, hi, (1,), generator=gen))


def crop_pair(length: int, min_overlap: int, gen=None) -> CropPair:
    """Sample overlapping crops of a ``length``-step segment (TS2Vec-style).

    The overlap length is uniform on [min_overlap, length]; each view then
    extends the overlap by a random amount on one side.
    """
    if min_overlap < 1:
        raise ValueError("min_overlap must be >= 1")
    if length < min_overlap:
        raise SegmentTooShort(f"segment of length {length} cannot hold an overlap of {min_overlap}")
    crop = _randint(min_overlap, length + 1, gen)
    left = _randint(0, length - crop + 1, gen)
    right = left + crop
    a1 = _randint(0, left + 1, gen)
    b2 = _randint(right, length + 1, gen)
    return CropPair(a1=a1, a2=right, b1=left, b2=b2)


def sample_keep_mask(batch: int, length: int, p: float, gen=None, device=None) -> torch.Tensor:
    """(B, L) boolean mask that keeps each timestamp with probability 1 - p."""
    if p <= 0:
        return torch.ones(batch, length, dtype=torch.bool, device=device)
    return (torch.rand(batch, length, generator=gen) >= p).to(device)


def timestamp_mask(r, p, gen=None):
    """Zero whole rows of a latent (L, d) or (B, L, d) tensor with probability ``p``."""
    if p <= 0:
        return r
    rb, single = _batched(r)
    keep = sample_keep_mask(rb.shape[0], rb.shape[1], p, gen, rb.device)
    out = rb * keep.unsqueeze(-1).to(rb.dtype)
    return out[0] if single else out
