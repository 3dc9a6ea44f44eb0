"""Block-structured feature dropout, active in both training and inference.

A mask is sampled in two steps: Bernoulli "seed" draws at rate gamma on the
full feature map, then each seed is expanded to a block_size^2 square of
zeros centered on it, wrapping toroidally at the borders.  Surviving
activations are rescaled by total/retained so the masked map estimates the
unmasked one.

The toroidal expansion is load bearing: it makes every cell's drop
probability identical, exactly 1 - (1-gamma)^(block_size^2).  That yields a
closed-form calibration of the seed rate against the user-facing dropped
fraction ``p`` (the common p/block^2 * area/valid_area approximation ignores
block overlap and border effects and misses by several points at p >= 0.2),
and it makes the total/retained renormalization exactly unbiased per cell:
the cell mean of mask * total/retained is 1 for every draw, and by
translation symmetry each individual cell's expectation is therefore 1.
Planar expansion with border-restricted seeds has neither property (corner
cells end up biased high by 15 percent or more at moderate rates).

``weight_space_equivalence`` is the executable form of the theory behind
test-time masking: convolving a block-masked feature map (stride = block
size) equals convolving the unmasked features with a stack of per-block
kernels in which dropped blocks are all-zero.  Averaging predictions over
sampled masks is therefore model averaging over a distribution on that
block-structured weight stack.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ConstructionError, ContractError, DegenerateMaskError
from .rng import Rng
from .tensor import Tensor, conv2d, masked_scale

_MODES = ("training", "inference", "disabled")


@dataclass(frozen=True)
class DropBlockConfig:
    block_size: int = 7
    p: float = 0.1
    mode: str = "training"
    per_channel: bool = False

    def validate(self, feat_h: int, feat_w: int) -> None:
        if self.mode not in _MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.block_size < 1 or self.block_size % 2 == 0:
            raise ConfigError(f"block_size must be odd and positive, got {self.block_size}")
        if not 0.0 <= self.p < 1.0:
            raise ConfigError(f"drop probability must lie in [0, 1), got {self.p}")
        if self.block_size > min(feat_h, feat_w):
            raise ConfigError(
                f"block_size {self.block_size} exceeds feature map {feat_h}x{feat_w}"
            )


@dataclass
class DropMask:
    mask: np.ndarray  # float32 [H, W], 1 = keep
    gamma: float
    retained: int
    total: int
    block_size: int
    seeds: tuple  # block-center coordinates, for reconstruction checks

    @property
    def scale(self) -> float:
        return self.total / self.retained


@dataclass
class DropoutMask:
    z: np.ndarray  # float32 [C], i.i.d. 0/1 keep indicators
    p: float


def expected_drop_fraction(gamma: float, block_size: int, feat_h: int, feat_w: int) -> float:
    """E[dropped fraction]: each cell is covered by exactly block_size^2 seeds."""
    del feat_h, feat_w  # uniform on the torus; kept for signature symmetry
    return float(-np.expm1(block_size * block_size * np.log1p(-gamma)))


@lru_cache(maxsize=256)
def gamma_from_drop_prob(p: float, block_size: int, feat_h: int, feat_w: int) -> float:
    """Seed rate whose per-cell (and expected overall) dropped fraction is ``p``.

    Closed form from 1 - (1-gamma)^(block_size^2) = p; gamma = 0 iff p = 0,
    and block_size 1 degenerates to plain dropout with gamma = p.
    """
    if block_size < 1 or block_size > min(feat_h, feat_w):
        raise ConfigError(f"block_size {block_size} invalid for map {feat_h}x{feat_w}")
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"drop probability must lie in [0, 1), got {p}")
    if p == 0.0:
        return 0.0
    return float(-np.expm1(np.log1p(-p) / (block_size * block_size)))


def mask_from_seeds(feat_h: int, feat_w: int, block_size: int, seeds) -> np.ndarray:
    """Expand seed centers to zeroed block_size^2 squares, wrapping at borders."""
    r = block_size // 2
    mask = np.ones((feat_h, feat_w), dtype=np.float32)
    for ci, cj in seeds:
        rows = np.arange(ci - r, ci + r + 1) % feat_h
        cols = np.arange(cj - r, cj + r + 1) % feat_w
        mask[np.ix_(rows, cols)] = 0.0
    return mask


def sample_mask(feat_h: int, feat_w: int, cfg: DropBlockConfig, rng: Rng) -> DropMask:
    """Draw one mask; resamples wholesale if a draw would zero everything."""
    cfg.validate(feat_h, feat_w)
    if cfg.mode == "disabled":
        raise ContractError("sample_mask called with mode=disabled")
    gamma = gamma_from_drop_prob(cfg.p, cfg.block_size, feat_h, feat_w)
    total = feat_h * feat_w
    for _ in range(100):
        hits = rng.bernoulli(gamma, size=(feat_h, feat_w))
        seeds = tuple((int(i), int(j)) for i, j in zip(*np.nonzero(hits)))
        mask = mask_from_seeds(feat_h, feat_w, cfg.block_size, seeds)
        retained = int(mask.sum())
        if retained > 0:
            return DropMask(mask, gamma, retained, total, cfg.block_size, seeds)
    raise DegenerateMaskError(
        f"no cells retained after 100 draws (p={cfg.p}, block={cfg.block_size})"
    )


def apply_mask(features: Tensor, m: DropMask) -> Tensor:
    """features * mask * total/retained; one mask shared across batch and channels."""
    if features.shape[-2:] != m.mask.shape:
        raise ContractError(
            f"mask {m.mask.shape} does not match feature map {features.shape[-2:]}"
        )
    mask = m.mask.reshape((1,) * (len(features.shape) - 2) + m.mask.shape)
    return masked_scale(features, mask, m.scale)


def apply_mask_stack(features: Tensor, masks: list[DropMask]) -> Tensor:
    """Per-channel variant: one independently sampled mask per channel."""
    n, c, h, w = features.shape
    if len(masks) != c:
        raise ContractError(f"need {c} masks, got {len(masks)}")
    stacked = np.stack([m.mask * np.float32(m.scale) for m in masks])
    return masked_scale(features, stacked.reshape(1, c, h, w), 1.0)


def sample_dropout_mask(channels: int, p: float, rng: Rng) -> DropoutMask:
    """Whole-channel Bernoulli mask; ``p`` is the probability of dropping."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"drop probability must lie in [0, 1), got {p}")
    z = (~rng.bernoulli(p, size=(channels,))).astype(np.float32)
    return DropoutMask(z, p)


def apply_dropout(features: Tensor, m: DropoutMask) -> Tensor:
    """Zero dropped channels and rescale survivors by 1/(1-p)."""
    n, c, h, w = features.shape
    if m.z.shape != (c,):
        raise ContractError(f"channel mask {m.z.shape} does not match C={c}")
    return masked_scale(features, m.z.reshape(1, c, 1, 1), 1.0 / (1.0 - m.p))


def weight_space_equivalence(features, kernel, dropped_blocks):
    """Two routes to the same stride-L convolution under block dropout.

    Route A masks the dropped L x L feature tiles and convolves with the
    kernel at stride L.  Route B leaves the features untouched and instead
    builds the stack of per-tile kernels with dropped tiles all-zero, taking
    the elementwise product and per-tile sum.  Returns (A, B); the contract
    is elementwise agreement within 1e-6.
    """
    f = features.data if isinstance(features, Tensor) else np.asarray(features, np.float32)
    k = kernel.data if isinstance(kernel, Tensor) else np.asarray(kernel, np.float32)
    if f.ndim != 4 or f.shape[0] != 1 or f.shape[1] != 1 or f.shape[2] != f.shape[3]:
        raise ConstructionError("features must have shape [1,1,K,K]")
    if k.ndim != 4 or k.shape[0] != 1 or k.shape[1] != 1 or k.shape[2] != k.shape[3]:
        raise ConstructionError("kernel must have shape [1,1,L,L]")
    kk, ll = f.shape[2], k.shape[2]
    if kk % ll != 0:
        raise ConstructionError(f"feature size {kk} not divisible by block size {ll}")
    nb = kk // ll
    dropped = {(int(a), int(b)) for a, b in dropped_blocks}
    for bi, bj in dropped:
        if not (0 <= bi < nb and 0 <= bj < nb):
            raise ConstructionError(f"block index {(bi, bj)} outside {nb}x{nb} tiling")

    masked = f.copy()
    for bi, bj in dropped:
        masked[0, 0, bi * ll : (bi + 1) * ll, bj * ll : (bj + 1) * ll] = 0.0
    a = conv2d(Tensor(masked), Tensor(k), stride=ll, padding=0)

    # independent route: per-tile product with the block-masked kernel stack
    b = np.zeros((nb, nb), dtype=np.float64)
    k64 = k[0, 0].astype(np.float64)
    for bi in range(nb):
        for bj in range(nb):
            if (bi, bj) in dropped:
                continue  # all-zero kernel block
            tile = f[0, 0, bi * ll : (bi + 1) * ll, bj * ll : (bj + 1) * ll]
            b[bi, bj] = float((tile.astype(np.float64) * k64).sum())
    return a, Tensor(b.reshape(1, 1, nb, nb))
