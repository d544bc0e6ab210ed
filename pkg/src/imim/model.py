"""Masked-image-modeling model with an interactive cross-attention path.

Unmasked tokens go through a pre-norm transformer encoder. Features for the
masked positions are produced either by a cross-attention module whose
queries are learned mask embeddings plus position embeddings (interactive
mode), by the same module with query/key roles inverted (ablation mode), or
by the embeddings alone (null-token baseline). Both feature sets are merged
onto the full grid and decoded back to pixels by a per-token linear head.

The cross-attention output projection starts at zero, so the interactive
model's step-0 forward is identical to the baseline's.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import (Tensor, concat, gather_rows, gelu, layernorm, matmul,
                     scatter_rows, slice_cols, softmax, tmean, transpose)
from .tokens import MaskPlan, TokenGrid, detokenize_tokens

QUERY_MODES = ("q_masked", "q_unmasked", "null_baseline")
LOSS_SCOPES = ("full_image", "masked_only")


class ContractError(ValueError):
    pass


@dataclass
class MimConfig:
    embed_dim: int = 64
    encoder_depth: int = 4
    n_heads: int = 4
    mlp_ratio: int = 4
    patch_size: int = 32
    channels: int = 4
    image_h: int = 128
    image_w: int = 128
    query_mode: str = "q_masked"
    loss_scope: str = "full_image"

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even for sinusoidal embeddings")
        if self.head_dim <= 0:
            raise ValueError("per-head dimension must be positive")
        if self.query_mode not in QUERY_MODES:
            raise ValueError(f"query_mode must be one of {QUERY_MODES}")
        if self.loss_scope not in LOSS_SCOPES:
            raise ValueError(f"loss_scope must be one of {LOSS_SCOPES}")
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ValueError(
                f"image {self.image_h}x{self.image_w} not divisible by patch "
                f"size {self.patch_size}")
        if self.channels not in (3, 4):
            raise ValueError("channels must be 3 (rgb) or 4 (rgb_ir)")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "embed_dim", "encoder_depth", "n_heads", "mlp_ratio", "patch_size",
            "channels", "image_h", "image_w", "query_mode", "loss_scope")}

    @staticmethod
    def from_dict(d: dict) -> "MimConfig":
        return MimConfig(**d)


def parameter_count(config: MimConfig) -> int:
    """Trainable parameter count as a pure function of the config."""
    d, pd = config.embed_dim, config.patch_dim
    hidden = config.mlp_ratio * d
    block = 2 * d + 4 * (d * d + d) + 2 * d + (d * hidden + hidden) + (hidden * d + d)
    total = (pd * d + d) + d + config.encoder_depth * block + 2 * d \
        + (d * pd + pd)
    if config.query_mode != "null_baseline":
        total += 4 * (d * d + d)
    return total


def sinusoidal_pos_embed(n_tokens: int, dim: int) -> np.ndarray:
    pos = np.arange(n_tokens, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    emb = np.zeros((n_tokens, dim))
    emb[:, 0::2] = np.sin(angles)
    emb[:, 1::2] = np.cos(angles)
    return emb


@dataclass
class ReconstructionOutput:
    reconstructed: np.ndarray  # H x W x C pixel array
    features: Tensor  # merged per-token features [n_tokens, d]
    loss: Tensor  # scalar, differentiable


class MimModel:
    """Parameter container plus the forward paths; single-writer in training.

    Each parameter gets its own seed-derived stream, so two models built with
    the same seed share identical values for every common parameter name even
    when one variant has extra parameters (baseline vs interactive).
    """

    def __init__(self, config: MimConfig, seed: int | None = 0,
                 encoder_only: bool = False):
        self.config = config
        self.encoder_only = encoder_only
        self._seed = seed
        self.pos_embed = Tensor(sinusoidal_pos_embed(config.n_tokens, config.embed_dim))
        self.params: dict[str, Tensor] = {}
        self._build()

    def _param(self, name: str, shape: tuple[int, ...], fan_in: int | None = None,
               zero: bool = False, one: bool = False):
        if one:
            data = np.ones(shape)
        elif zero or self._seed is None:
            data = np.zeros(shape)
        else:
            rng = np.random.default_rng([self._seed, zlib.crc32(name.encode())])
            bound = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        self.params[name] = Tensor(data, requires_grad=True)

    def _build(self):
        cfg = self.config
        d, pd = cfg.embed_dim, cfg.patch_dim
        hidden = cfg.mlp_ratio * d
        self._param("patch_proj.w", (pd, d), pd)
        self._param("patch_proj.b", (d,), zero=True)
        for i in range(cfg.encoder_depth):
            p = f"enc.{i}."
            self._param(p + "ln1.g", (d,), one=True)
            self._param(p + "ln1.b", (d,), zero=True)
            for w in ("wq", "wk", "wv", "wo"):
                self._param(p + "attn." + w, (d, d), d)
            for b in ("bq", "bk", "bv", "bo"):
                self._param(p + "attn." + b, (d,), zero=True)
            self._param(p + "ln2.g", (d,), one=True)
            self._param(p + "ln2.b", (d,), zero=True)
            self._param(p + "mlp.w1", (d, hidden), d)
            self._param(p + "mlp.b1", (hidden,), zero=True)
            self._param(p + "mlp.w2", (hidden, d), hidden)
            self._param(p + "mlp.b2", (d,), zero=True)
        self._param("enc_norm.g", (d,), one=True)
        self._param("enc_norm.b", (d,), zero=True)
        if not self.encoder_only:
            self._param("mask_embed", (1, d), d)
            if cfg.query_mode != "null_baseline":
                for w in ("wq", "wk", "wv"):
                    self._param("xattn." + w, (d, d), d)
                # zero-init output projection: interactive forward starts at
                # the baseline exactly
                self._param("xattn.wo", (d, d), zero=True)
                for b in ("bq", "bk", "bv", "bo"):
                    self._param("xattn." + b, (d,), zero=True)
            self._param("decoder.w", (d, pd), d)
            self._param("decoder.b", (pd,), zero=True)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # ---------------------------------------------------------------- forward

    def forward(self, grid: TokenGrid, plan: MaskPlan) -> ReconstructionOutput:
        from .tokens import split_tokens
        if self.encoder_only:
            raise ContractError("encoder-only model cannot run the MIM forward")
        if self.config.query_mode == "null_baseline":
            return baseline_forward(grid, plan, self)
        unmasked, masked_pos = split_tokens(grid, plan)
        enc = encode(unmasked, list(plan.unmasked_idx), self)
        queries_in = self._mask_queries(masked_pos)
        attn = cross_attention(masked_pos, enc, self, self.config.query_mode)
        masked_feats = queries_in + attn
        return merge_and_decode(enc, masked_feats, plan, self, grid)

    def _mask_queries(self, masked_pos: Sequence[int]) -> Tensor:
        return self.params["mask_embed"] + gather_rows(self.pos_embed, masked_pos)


def _mha(q_in: Tensor, kv_in: Tensor, weights: dict[str, Tensor], n_heads: int,
         transposed_readout: bool = False) -> Tensor:
    """Multi-head scaled dot-product attention, 2-d matmuls per head.

    With transposed_readout the per-head output is scattered back onto the
    key positions through the transposed attention map (ablation wiring).
    """
    q = matmul(q_in, weights["wq"]) + weights["bq"]
    k = matmul(kv_in, weights["wk"]) + weights["bk"]
    v = matmul(kv_in, weights["wv"]) + weights["bv"]
    d = q.shape[1]
    dk = d // n_heads
    scale = 1.0 / math.sqrt(dk)
    heads = []
    for h in range(n_heads):
        qh = slice_cols(q, h * dk, (h + 1) * dk)
        kh = slice_cols(k, h * dk, (h + 1) * dk)
        vh = slice_cols(v, h * dk, (h + 1) * dk)
        attn = softmax(matmul(qh, transpose(kh)) * Tensor(scale))
        out_h = matmul(attn, vh)
        if transposed_readout:
            out_h = matmul(transpose(attn), out_h)
        heads.append(out_h)
    merged = heads[0] if len(heads) == 1 else concat(heads, axis=1)
    return matmul(merged, weights["wo"]) + weights["bo"]


def encode(unmasked: Tensor, positions: Sequence[int], model: MimModel) -> Tensor:
    """Patch projection + position embedding + pre-norm transformer blocks.

    Positions are original grid indices, one per row; they must be distinct
    and in range (canonical callers pass them ascending, but self-attention is
    permutation-equivariant, so any order is accepted).
    """
    positions = list(positions)
    if len(positions) < 1:
        raise ContractError("encoder needs at least one unmasked token")
    if len(set(positions)) != len(positions):
        raise ContractError("positions must be distinct")
    if max(positions) >= model.config.n_tokens or min(positions) < 0:
        raise ContractError(
            f"position out of range for {model.config.n_tokens} tokens: {positions}")
    p = model.params
    x = matmul(unmasked, p["patch_proj.w"]) + p["patch_proj.b"]
    x = x + gather_rows(model.pos_embed, positions)
    for i in range(model.config.encoder_depth):
        pre = f"enc.{i}."
        h = layernorm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        attn_w = {k: p[pre + "attn." + k]
                  for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
        x = x + _mha(h, h, attn_w, model.config.n_heads)
        h = layernorm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        h = gelu(matmul(h, p[pre + "mlp.w1"]) + p[pre + "mlp.b1"])
        x = x + (matmul(h, p[pre + "mlp.w2"]) + p[pre + "mlp.b2"])
    return layernorm(x, p["enc_norm.g"], p["enc_norm.b"])


def cross_attention(masked_positions: Sequence[int], enc_feats: Tensor,
                    model: MimModel, query_mode: str) -> Tensor:
    """Attention between mask-position queries and unmasked-token features.

    Returns the pure attention output (one row per masked position); the
    caller adds the residual query path. In q_unmasked mode the roles invert:
    queries come from unmasked features, keys/values from mask-position
    embeddings, and masked-position rows are read out through the transposed
    attention map.
    """
    masked_positions = list(masked_positions)
    if len(masked_positions) < 1:
        raise ContractError("cross-attention needs at least one masked position")
    if enc_feats.shape[0] < 1:
        raise ContractError("cross-attention needs a non-empty key set")
    p = model.params
    weights = {k: p["xattn." + k]
               for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
    queries_in = model._mask_queries(masked_positions)
    if query_mode == "q_masked":
        return _mha(queries_in, enc_feats, weights, model.config.n_heads)
    if query_mode == "q_unmasked":
        return _mha(enc_feats, queries_in, weights, model.config.n_heads,
                    transposed_readout=True)
    raise ContractError(f"no cross-attention path for query_mode {query_mode!r}")


def merge_and_decode(enc_feats: Tensor, masked_feats: Tensor, plan: MaskPlan,
                     model: MimModel, target: TokenGrid) -> ReconstructionOutput:
    """Scatter both feature streams onto the grid, decode, and score vs target."""
    cfg = model.config
    n = plan.n_tokens
    if enc_feats.shape[0] + masked_feats.shape[0] != n:
        raise ContractError(
            f"{enc_feats.shape[0]} unmasked + {masked_feats.shape[0]} masked "
            f"features do not cover {n} tokens")
    if enc_feats.shape[0] != len(plan.unmasked_idx):
        raise ContractError("feature rows do not match the plan's index sets")
    merged = scatter_rows(enc_feats, plan.unmasked_idx, n) + \
        scatter_rows(masked_feats, plan.masked_idx, n)
    decoded = matmul(merged, model.params["decoder.w"]) + model.params["decoder.b"]
    target_t = Tensor(target.tokens)
    if cfg.loss_scope == "masked_only":
        idx = list(plan.masked_idx)
        diff = gather_rows(decoded, idx) - gather_rows(target_t, idx)
    else:
        diff = decoded - target_t
    loss = tmean(diff * diff)
    recon = detokenize_tokens(decoded.data, target.grid_h, target.grid_w,
                              target.patch_size, target.channels)
    return ReconstructionOutput(recon, merged, loss)


def baseline_forward(grid: TokenGrid, plan: MaskPlan,
                     model: MimModel) -> ReconstructionOutput:
    """Null-token path: masked features are embeddings only, no interaction."""
    from .tokens import split_tokens
    unmasked, masked_pos = split_tokens(grid, plan)
    enc = encode(unmasked, list(plan.unmasked_idx), model)
    masked_feats = model._mask_queries(masked_pos)
    return merge_and_decode(enc, masked_feats, plan, model, grid)


def reconstruction_loss(x: np.ndarray, recon: np.ndarray, scope: str = "full_image",
                        plan: MaskPlan | None = None,
                        patch_size: int | None = None) -> float:
    """Per-pixel mean of the squared reconstruction error.

    scope=masked_only restricts the mean to pixels inside masked patches and
    needs the plan plus patch size to locate them.
    """
    x = np.asarray(x, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    if x.shape != recon.shape:
        raise ContractError(f"shape mismatch {x.shape} vs {recon.shape}")
    if scope == "full_image":
        d = x - recon
        return float(np.mean(d * d))
    if scope != "masked_only":
        raise ContractError(f"unknown loss scope {scope!r}")
    if plan is None or patch_size is None:
        raise ContractError("masked_only scope needs a plan and patch size")
    mask = masked_pixel_mask(x.shape[0], x.shape[1], plan, patch_size)
    d = (x - recon)[mask]
    return float(np.mean(d * d))


def masked_pixel_mask(h: int, w: int, plan: MaskPlan, patch_size: int) -> np.ndarray:
    """Boolean HxW mask of pixels covered by the plan's masked patches."""
    gw = w // patch_size
    mask = np.zeros((h, w), dtype=bool)
    for t in plan.masked_idx:
        r, c = divmod(t, gw)
        mask[r * patch_size:(r + 1) * patch_size,
             c * patch_size:(c + 1) * patch_size] = True
    return mask
