"""Training objectives: MSE, InfoNCE, hierarchical contrast and momentum contrast."""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .augment import Augmenter, AugmentPolicy, crop_pair, sample_keep_mask
from .errors import EmptyQueueWithoutWarmup, NonPositiveTemperature, ShapeMismatch, ZeroVector

SSCL_ALGORITHMS = ("HCL", "MoCo1", "MoCo2", "MoCo2+HCL")


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    lam: float = 0.5
    hcl_weight: float = 0.5
    moco_weight: float = 0.5
    queue_size: int = 4096
    momentum: float = 0.999
    proj_dim: int = 64
    warmup_keys: int = 64
    moco1_latent_mask: float = 0.1
    hcl_latent_mask: float = 0.5
    hcl_min_overlap: int = 4

    def __post_init__(self):
        if self.tau <= 0:
            raise NonPositiveTemperature(f"tau must be > 0, got {self.tau}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if abs(self.hcl_weight + self.moco_weight - 1.0) > 1e-9:
            raise ValueError("hcl_weight + moco_weight must equal 1")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")


def mse_loss(pred, gold):
    if pred.shape != gold.shape:
        raise ShapeMismatch(f"pred {tuple(pred.shape)} vs gold {tuple(gold.shape)}")
    return ((pred - gold) ** 2).mean()


def cosine_sim(h_i, h_j):
    n_i, n_j = h_i.norm(dim=-1), h_j.norm(dim=-1)
    if bool((n_i == 0).any()) or bool((n_j == 0).any()):
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    return (h_i * h_j).sum(-1) / (n_i * n_j)


def info_nce(anchor, positive, negatives=None, tau: float = 0.1):
    """-log( e^{s+/tau} / (e^{s+/tau} + sum_n e^{s_n/tau}) ) with cosine s.

    ``negatives`` is an (N, d) tensor or None; evaluated via logsumexp.
    """
    if tau <= 0:
        raise NonPositiveTemperature(f"tau must be > 0, got {tau}")
    pos = cosine_sim(anchor, positive) / tau
    if negatives is None or len(negatives) == 0:
        logits = pos.reshape(1)
    else:
        negatives = torch.as_tensor(negatives, dtype=anchor.dtype)
        neg = cosine_sim(anchor.unsqueeze(0), negatives) / tau
        logits = torch.cat([pos.reshape(1), neg])
    return torch.logsumexp(logits, dim=0) - pos


def _contrast_pairs(z1, z2, tau):
    """Mean InfoNCE over the last-but-one axis of (G, n, d) pairs.

    Within each group, element i of z1 is positive with element i of z2; every
    other element of both views is a negative.
    """
    n = z1.shape[1]
    z = F.normalize(torch.cat([z1, z2], dim=1), dim=-1)
    logits = z @ z.transpose(1, 2) / tau  # (G, 2n, 2n)
    eye = torch.eye(2 * n, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(eye, float("-inf"))
    logprob = F.log_softmax(logits, dim=-1)
    i = torch.arange(n, device=z.device)
    return -(logprob[:, i, n + i].mean() + logprob[:, n + i, i].mean()) / 2


def temporal_contrast(z1, z2, tau):
    """Positives: same timestamp across views; negatives: other timestamps of the instance."""
    if z1.shape[1] < 2:
        return z1.new_zeros(())
    return _contrast_pairs(z1, z2, tau)


def instance_contrast(z1, z2, tau):
    """Positives: same instance across views; negatives: other instances at that timestamp."""
    if z1.shape[0] < 2:
        return z1.new_zeros(())
    return _contrast_pairs(z1.transpose(0, 1), z2.transpose(0, 1), tau)


def max_pool_time(z):
    return F.max_pool1d(z.transpose(1, 2), kernel_size=2, stride=2, ceil_mode=True).transpose(1, 2)


def hcl_levels(length: int) -> int:
    levels = 1
    while length > 1:
        length = (length + 1) // 2
        levels += 1
    return levels


def hcl_loss(r_a, r_b, tau: float = 0.1):
    """Hierarchical contrastive loss on aligned (B, Lo, d) overlap representations.

    Level 0 is the input; each next level max-pools the previous one along time
    (kernel 2, stride 2, partial windows kept) until one step remains. Every
    level contributes temporal + instance contrast (the single-step level only
    instance contrast) and the result is the mean over levels.
    """
    if r_a.shape != r_b.shape or r_a.dim() != 3 or r_a.shape[1] < 1:
        raise ShapeMismatch(f"r_a {tuple(r_a.shape)} and r_b {tuple(r_b.shape)} must match (B, Lo>=1, d)")
    total, levels = r_a.new_zeros(()), 0
    while True:
        total = total + instance_contrast(r_a, r_b, tau)
        if r_a.shape[1] > 1:
            total = total + temporal_contrast(r_a, r_b, tau)
        levels += 1
        if r_a.shape[1] == 1:
            break
        r_a, r_b = max_pool_time(r_a), max_pool_time(r_b)
    return total / levels


# ----------------------------------------------------------- momentum contrast
class MemoryQueue:
    """Fixed-capacity FIFO of unit-norm keys."""

    def __init__(self, capacity: int, dim: int, dtype=torch.float32):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity, self.dim = capacity, dim
        self.keys = torch.zeros(capacity, dim, dtype=dtype)
        self.write_pointer = 0
        self.filled = 0

    def __len__(self):
        return self.filled

    @torch.no_grad()
    def enqueue(self, keys):
        keys = keys.detach().to(self.keys.dtype).cpu()
        if keys.dim() != 2 or keys.shape[1] != self.dim:
            raise ShapeMismatch(f"expected (b, {self.dim}) keys, got {tuple(keys.shape)}")
        norms = keys.norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-6, rtol=0):
            raise ValueError("queue keys must have unit L2 norm")
        if len(keys) > self.capacity:
            # only the newest `capacity` survive; advance the pointer as if all were written
            self.write_pointer = (self.write_pointer + len(keys) - self.capacity) % self.capacity
            keys = keys[-self.capacity:]
        idx = (self.write_pointer + torch.arange(len(keys))) % self.capacity
        self.keys[idx] = keys
        self.write_pointer = (self.write_pointer + len(keys)) % self.capacity
        self.filled = min(self.capacity, self.filled + len(keys))

    def contents(self):
        """Stored keys, oldest first."""
        if self.filled < self.capacity:
            return self.keys[: self.filled]
        return torch.roll(self.keys, -self.write_pointer, dims=0)

    def copy(self) -> "MemoryQueue":
        q = MemoryQueue(self.capacity, self.dim, self.keys.dtype)
        q.keys = self.keys.clone()
        q.write_pointer, q.filled = self.write_pointer, self.filled
        return q


class ProjectionHead(nn.Module):
    """Linear map (``mlp=False``) or two-layer MLP with ReLU, d -> d_proj."""

    def __init__(self, dim: int, proj_dim: int, mlp: bool = True):
        super().__init__()
        self.net = (nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, proj_dim))
                    if mlp else nn.Linear(dim, proj_dim))

    def forward(self, x):
        return self.net(x)


class MomentumPair(nn.Module):
    """Query encoder+projection and a gradient-free momentum copy of both."""

    def __init__(self, encoder: nn.Module, projection: nn.Module, momentum: float = 0.999):
        super().__init__()
        self.query_encoder = encoder
        self.query_projection = projection
        self.key_encoder = copy.deepcopy(encoder)
        self.key_projection = copy.deepcopy(projection)
        for p in self.key_parameters():
            p.requires_grad_(False)
        self.momentum = momentum

    def query_parameters(self):
        return list(self.query_encoder.parameters()) + list(self.query_projection.parameters())

    def key_parameters(self):
        return list(self.key_encoder.parameters()) + list(self.key_projection.parameters())

    @torch.no_grad()
    def momentum_update(self):
        m = self.momentum
        for pq, pk in zip(self.query_parameters(), self.key_parameters()):
            if m == 1.0:
                continue
            if m == 0.0:
                pk.copy_(pq)
            else:
                pk.mul_(m).add_(pq, alpha=1.0 - m)

    def query(self, x, keep=None):
        return self.query_projection(self.query_encoder(x, keep))

    @torch.no_grad()
    def key(self, x, keep=None):
        return self.key_projection(self.key_encoder(x, keep))


def momentum_contrast_loss(x, pair: MomentumPair, queue: MemoryQueue, tau: float,
                           view_q=None, view_k=None, keep_q=None, keep_k=None,
                           gen=None, warmup_keys: int | None = 64, update: bool = True):
    """Shared MoCo1/MoCo2 core.

    Per window one timestamp is drawn uniformly; the query is the projected
    query-encoder output there and the key the (normalized, gradient-free)
    momentum-encoder output at the same step. Negatives come from the queue,
    or from the other in-batch keys until the queue holds ``warmup_keys``.
    With ``update`` the key encoder is momentum-updated before the key pass
    and the batch keys are enqueued afterwards.
    """
    if tau <= 0:
        raise NonPositiveTemperature(f"tau must be > 0, got {tau}")
    B, L = x.shape[:2]
    xq = x if view_q is None else view_q
    xk = x if view_k is None else view_k
    steps = torch.randint(0, L, (B,), generator=gen).to(x.device)
    rows = torch.arange(B, device=x.device)
    q = F.normalize(pair.query(xq, keep_q)[rows, steps], dim=-1)
    if update:
        pair.momentum_update()
    k = F.normalize(pair.key(xk, keep_k)[rows, steps], dim=-1).detach()

    pos = (q * k).sum(-1, keepdim=True)
    if warmup_keys is None or len(queue) >= warmup_keys:
        if len(queue) == 0:
            raise EmptyQueueWithoutWarmup("memory queue is empty and warm-up is disabled")
        negs = queue.contents().to(q.device, q.dtype).clone()
        logits = torch.cat([pos, q @ negs.T], dim=1) / tau
    else:
        inbatch = q @ k.T
        eye = torch.eye(B, dtype=torch.bool, device=q.device)
        logits = torch.cat([pos, inbatch.masked_fill(eye, float("-inf"))], dim=1) / tau
    loss = (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()
    if update:
        queue.enqueue(k)
    return loss


def moco_loss(x, pair, queue, tau=0.1, latent_mask_prob=0.1, gen=None, **kwargs):
    """MoCo1: both sides see the raw window; independent latent timestamp masks
    are the only difference between the two views."""
    B, L = x.shape[:2]
    keep_q = sample_keep_mask(B, L, latent_mask_prob, gen, x.device) if latent_mask_prob > 0 else None
    keep_k = sample_keep_mask(B, L, latent_mask_prob, gen, x.device) if latent_mask_prob > 0 else None
    return momentum_contrast_loss(x, pair, queue, tau, keep_q=keep_q, keep_k=keep_k, gen=gen, **kwargs)


def moco2_loss(x, pair, queue, augmenter: Augmenter, tau=0.1, gen=None, **kwargs):
    """MoCo2: two independently augmented views; ``pair`` should carry MLP projections."""
    return momentum_contrast_loss(x, pair, queue, tau, view_q=augmenter(x), view_k=augmenter(x),
                                  gen=gen, **kwargs)


def combined_loss(mse, sscl, lam: float):
    if lam < 0:
        raise ValueError("lam must be >= 0")
    return mse if lam == 0 else mse + lam * sscl


def combine_sscl(hcl, moco2, hcl_weight: float = 0.5):
    return hcl_weight * hcl + (1.0 - hcl_weight) * moco2


class SSCLObjective(nn.Module):
    """Stateful contrastive objective bound to one encoder.

    Owns the projection heads, momentum copy, memory queue and augmentation
    stream needed by ``algorithm``; calling it on a (B, L, m) batch returns the
    scalar auxiliary loss.
    """

    def __init__(self, algorithm: str, encoder: nn.Module, cfg: LossConfig = LossConfig(),
                 policy: AugmentPolicy = AugmentPolicy(), seed: int = 0):
        super().__init__()
        if algorithm not in SSCL_ALGORITHMS:
            raise ValueError(f"unknown SSCL algorithm {algorithm!r}; expected {SSCL_ALGORITHMS}")
        self.algorithm, self.cfg = algorithm, cfg
        self.encoder = encoder
        self.gen = torch.Generator().manual_seed(seed)
        self.uses_moco = algorithm != "HCL"
        self.uses_hcl = "HCL" in algorithm
        self.pair = None
        if self.uses_moco:
            mlp = algorithm != "MoCo1"
            dim = encoder.spec.hidden_dim
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed + 7919)
                proj = ProjectionHead(dim, cfg.proj_dim, mlp=mlp)
            self.pair = MomentumPair(encoder, proj, cfg.momentum)
            self.queue = MemoryQueue(cfg.queue_size, cfg.proj_dim)
            self.augmenter = Augmenter(dataclasses.replace(policy, rng_seed=policy.rng_seed + seed))

    def extra_parameters(self):
        """Trainable parameters beyond the encoder (the query projection)."""
        return list(self.pair.query_projection.parameters()) if self.pair is not None else []

    def _hcl(self, x):
        B, L = x.shape[:2]
        crop = crop_pair(L, min(self.cfg.hcl_min_overlap, L), self.gen)
        xa, xb = x[:, crop.a1:crop.a2], x[:, crop.b1:crop.b2]
        p = self.cfg.hcl_latent_mask
        ka = sample_keep_mask(B, xa.shape[1], p, self.gen, x.device) if p > 0 else None
        kb = sample_keep_mask(B, xb.shape[1], p, self.gen, x.device) if p > 0 else None
        ra = self.encoder(xa, ka)[:, crop.overlap_a()]
        rb = self.encoder(xb, kb)[:, crop.overlap_b()]
        return hcl_loss(ra, rb, self.cfg.tau)

    def _moco(self, x):
        kw = dict(tau=self.cfg.tau, gen=self.gen, warmup_keys=self.cfg.warmup_keys)
        if self.algorithm == "MoCo1":
            return moco_loss(x, self.pair, self.queue, latent_mask_prob=self.cfg.moco1_latent_mask, **kw)
        return moco2_loss(x, self.pair, self.queue, self.augmenter, **kw)

    def forward(self, x):
        if self.algorithm == "HCL":
            return self._hcl(x)
        if self.algorithm == "MoCo2+HCL":
            return combine_sscl(self._hcl(x), self._moco(x), self.cfg.hcl_weight)
        return self._moco(x)
