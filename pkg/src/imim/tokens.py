"""Patch tokenization and deterministic mask plans.

The mask unit equals the patch: masking one token hides exactly one
mask-size square. Patch flattening order is row-major channel-last and is a
stable contract (checkpoints depend on it).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .imaging import MultimodalImage
from .tensor import Tensor


class TokenizationError(ValueError):
    pass


class MaskPlanError(ValueError):
    pass


@dataclass
class TokenGrid:
    tokens: np.ndarray  # [n_tokens, patch_dim]
    grid_h: int
    grid_w: int
    patch_size: int
    channels: int

    @property
    def n_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


def tokenize(img: MultimodalImage, patch_size: int) -> TokenGrid:
    """Raster-order patches, each flattened row-major channel-last."""
    h, w, c = img.pixels.shape
    if h % patch_size or w % patch_size:
        valid = [p for p in (8, 16, 32, 64, 128) if h % p == 0 and w % p == 0]
        raise TokenizationError(
            f"image {h}x{w} not divisible by patch size {patch_size}; "
            f"valid sizes include {valid}")
    gh, gw = h // patch_size, w // patch_size
    tokens = (img.pixels
              .reshape(gh, patch_size, gw, patch_size, c)
              .transpose(0, 2, 1, 3, 4)
              .reshape(gh * gw, patch_size * patch_size * c))
    return TokenGrid(np.ascontiguousarray(tokens), gh, gw, patch_size, c)


def detokenize_tokens(tokens: np.ndarray, grid_h: int, grid_w: int,
                      patch_size: int, channels: int) -> np.ndarray:
    """Inverse of tokenize() on a raw [n_tokens, patch_dim] array."""
    p = patch_size
    return np.ascontiguousarray(
        tokens.reshape(grid_h, grid_w, p, p, channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(grid_h * p, grid_w * p, channels))


def detokenize(grid: TokenGrid) -> np.ndarray:
    return detokenize_tokens(grid.tokens, grid.grid_h, grid.grid_w,
                             grid.patch_size, grid.channels)


@dataclass
class MaskPlan:
    """Disjoint partition of token indices into masked and unmasked sets."""

    masked_idx: tuple[int, ...]
    unmasked_idx: tuple[int, ...]
    mask_ratio: float
    seed: int

    def __post_init__(self):
        self.masked_idx = tuple(int(i) for i in self.masked_idx)
        self.unmasked_idx = tuple(int(i) for i in self.unmasked_idx)
        n = self.n_tokens
        combined = set(self.masked_idx) | set(self.unmasked_idx)
        if len(self.masked_idx) + len(self.unmasked_idx) != n or combined != set(range(n)):
            raise MaskPlanError("masked and unmasked index sets must partition the grid")
        if list(self.masked_idx) != sorted(self.masked_idx) or \
                list(self.unmasked_idx) != sorted(self.unmasked_idx):
            raise MaskPlanError("index lists must be sorted ascending")

    @property
    def n_tokens(self) -> int:
        return len(self.masked_idx) + len(self.unmasked_idx)

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "ratio": self.mask_ratio,
                           "n_tokens": self.n_tokens,
                           "masked_idx": list(self.masked_idx)})

    @staticmethod
    def from_json(text: str) -> "MaskPlan":
        raw = json.loads(text)
        masked = sorted(int(i) for i in raw["masked_idx"])
        unmasked = sorted(set(range(int(raw["n_tokens"]))) - set(masked))
        return MaskPlan(tuple(masked), tuple(unmasked), float(raw["ratio"]),
                        int(raw["seed"]))


def make_mask_plan(n_tokens: int, mask_ratio: float, seed: int) -> MaskPlan:
    """Uniform random token subset via a seeded Fisher-Yates shuffle."""
    if n_tokens < 2:
        raise MaskPlanError(f"need at least 2 tokens, got {n_tokens}")
    if not 0.0 < mask_ratio < 1.0:
        raise MaskPlanError(f"mask ratio must lie in (0,1), got {mask_ratio}")
    n_masked = int(round(mask_ratio * n_tokens))
    if n_masked == 0 or n_masked == n_tokens:
        raise MaskPlanError(
            f"ratio {mask_ratio} leaves {'no masked' if n_masked == 0 else 'no unmasked'} "
            f"tokens out of {n_tokens}")
    rng = np.random.default_rng(seed)
    order = np.arange(n_tokens)
    for i in range(n_tokens - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        order[i], order[j] = order[j], order[i]
    masked = tuple(sorted(int(i) for i in order[:n_masked]))
    unmasked = tuple(sorted(int(i) for i in order[n_masked:]))
    return MaskPlan(masked, unmasked, mask_ratio, seed)


def split_tokens(grid: TokenGrid, plan: MaskPlan) -> tuple[Tensor, list[int]]:
    """Unmasked token rows (ascending original index) plus masked positions.

    Masked token content is dropped here; only its grid positions survive,
    so nothing downstream can read hidden pixels.
    """
    if plan.n_tokens != grid.n_tokens:
        raise MaskPlanError(
            f"plan covers {plan.n_tokens} tokens but grid has {grid.n_tokens}")
    unmasked = np.ascontiguousarray(grid.tokens[list(plan.unmasked_idx)])
    return Tensor(unmasked.copy()), list(plan.masked_idx)
