"""What did pretraining buy: reconstruction quality and a linear probe.

Reconstruction is scored on masked pixels only (unmasked patches reach the
decoder almost directly, so the masked region is where the variants differ).
The probe freezes the encoder, pools full-grid token features inside each
annotated box and fits a softmax linear classifier on the object class.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_model
from .imaging import DatasetManifest, write_png
from .model import MimModel, encode, masked_pixel_mask
from .tensor import Tensor
from .tokens import make_mask_plan, tokenize
from .training import RunConfig, TrainState, pretrain, resolve_manifest

SWEEP_AXES = {
    "query_mode": ["q_masked", "q_unmasked", "null_baseline"],
    "mask_size": [16, 32, 64],
    "modality": ["rgb", "rgb_ir"],
    "mask_ratio": [0.5, 0.6, 0.75],
}

EVAL_CSV_HEADER = "variant,mse,psnr_db,probe_acc,seed"


class StratificationError(ValueError):
    pass


@dataclass
class EvalRow:
    variant: str
    mse: float
    psnr_db: float
    probe_acc: float | None
    n_eval: int
    seed: int

    def to_dict(self):
        return {"variant": self.variant, "mse": self.mse, "psnr_db": self.psnr_db,
                "probe_acc": self.probe_acc, "n_eval": self.n_eval,
                "seed": self.seed}


def psnr_db(mse: float) -> float:
    """10*log10(1/MSE) for pixels in [0,1]; +inf sentinel for a perfect zero."""
    if mse < 0:
        raise ValueError(f"MSE cannot be negative, got {mse}")
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def masked_region_mse(original: np.ndarray, recon: np.ndarray, plan,
                      patch_size: int) -> float:
    mask = masked_pixel_mask(original.shape[0], original.shape[1], plan, patch_size)
    d = (original - recon)[mask]
    return float(np.mean(d * d))


def _plan_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, 3, index]).generate_state(1)[0])


def eval_reconstruction(state: TrainState, config: RunConfig, n: int, seed: int,
                        variant: str = "model") -> EvalRow:
    """Masked-region MSE/PSNR over n held-out samples with fixed mask plans."""
    if n < 1:
        raise ValueError("need at least one evaluation sample")
    manifest = resolve_manifest(config)
    records = manifest.split("eval")[:n]
    if not records:
        raise ValueError("evaluation split is empty")
    from .imaging import load_sample
    mses = []
    for i, rec in enumerate(records):
        img, _ = load_sample(manifest, rec, config.image_h, config.image_w)
        grid = tokenize(img, config.mask_size)
        plan = make_mask_plan(grid.n_tokens, config.mask_ratio, _plan_seed(seed, i))
        out = state.model.forward(grid, plan)
        mses.append(masked_region_mse(img.pixels, out.reconstructed, plan,
                                      config.mask_size))
    mse = float(np.mean(mses))
    return EvalRow(variant, mse, psnr_db(mse), None, len(records), seed)


# ---------------------------------------------------------------------------
# linear probe

def encode_full_grid(model: MimModel, img) -> np.ndarray:
    """Frozen-encoder features of every token; no masking at probe time."""
    grid = tokenize(img, model.config.patch_size)
    feats = encode(Tensor(grid.tokens), list(range(grid.n_tokens)), model)
    return feats.data


def box_feature(features: np.ndarray, box, patch_size: int, grid_w: int) -> np.ndarray:
    """Mean feature of the tokens whose patches overlap the box."""
    c0 = box.x // patch_size
    c1 = (box.x + box.w - 1) // patch_size
    r0 = box.y // patch_size
    r1 = (box.y + box.h - 1) // patch_size
    rows = [r * grid_w + c for r in range(r0, r1 + 1) for c in range(c0, c1 + 1)]
    return features[rows].mean(axis=0)


def probe_features(model: MimModel, manifest: DatasetManifest, split: str,
                   h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    from .imaging import load_sample
    grid_w = w // model.config.patch_size
    xs, ys = [], []
    for rec in manifest.split(split):
        img, boxes = load_sample(manifest, rec, h, w)
        feats = encode_full_grid(model, img)
        for b in boxes:
            xs.append(box_feature(feats, b, model.config.patch_size, grid_w))
            ys.append(b.cls)
    if not xs:
        raise ValueError(f"no annotated boxes in split {split!r}")
    return np.array(xs), np.array(ys, dtype=np.int64)


def fit_softmax_regression(x: np.ndarray, y: np.ndarray, n_classes: int,
                           epochs: int, seed: int, lr: float = 0.5) -> np.ndarray:
    """Full-batch gradient descent on softmax cross-entropy; returns [d+1, C]."""
    xb = np.hstack([x, np.ones((x.shape[0], 1))])
    rng = np.random.default_rng([seed, 4])
    weights = rng.normal(scale=1e-3, size=(xb.shape[1], n_classes))
    onehot = np.eye(n_classes)[y]
    for _ in range(epochs):
        logits = xb @ weights
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        weights -= lr * xb.T @ (p - onehot) / xb.shape[0]
    return weights


def classify(weights: np.ndarray, x: np.ndarray) -> np.ndarray:
    xb = np.hstack([x, np.ones((x.shape[0], 1))])
    return np.argmax(xb @ weights, axis=1)


def linear_probe(encoder, manifest: DatasetManifest, epochs: int, seed: int,
                 h: int | None = None, w: int | None = None) -> float:
    """Held-out accuracy of a linear classifier on frozen encoder features."""
    model = encoder
    if not isinstance(encoder, MimModel):
        model, _ = load_model(encoder)
    h = h or model.config.image_h
    w = w or model.config.image_w
    x_train, y_train = probe_features(model, manifest, "train", h, w)
    x_eval, y_eval = probe_features(model, manifest, "eval", h, w)
    classes = sorted(set(y_train) | set(y_eval))
    if len(classes) == 1:
        warnings.warn("only one object class present; probe accuracy is degenerate")
        return 1.0
    missing = sorted(set(y_eval) - set(y_train))
    if missing:
        raise StratificationError(
            f"classes {missing} have zero training samples")
    n_classes = max(classes) + 1
    mu = x_train.mean(axis=0)
    sd = x_train.std(axis=0) + 1e-8
    weights = fit_softmax_regression((x_train - mu) / sd, y_train, n_classes,
                                     epochs, seed)
    pred = classify(weights, (x_eval - mu) / sd)
    return float(np.mean(pred == y_eval))


# ---------------------------------------------------------------------------
# ablation sweep

def config_for_axis_value(base: RunConfig, axis: str, value) -> RunConfig:
    if axis == "query_mode":
        return replace(base, query_mode=str(value))
    if axis == "mask_size":
        return replace(base, mask_size=int(value))
    if axis == "modality":
        return replace(base, channels=4 if value == "rgb_ir" else 3)
    if axis == "mask_ratio":
        return replace(base, mask_ratio=float(value))
    raise ValueError(f"unknown sweep axis {axis!r}; pick one of {sorted(SWEEP_AXES)}")


def ablation_sweep(base: RunConfig, axis: str, values=None, n_eval: int = 8,
                   probe_epochs: int = 200) -> list[EvalRow]:
    """Pretrain + evaluate once per axis value with a shared seed."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; pick one of {sorted(SWEEP_AXES)}")
    values = SWEEP_AXES[axis] if values is None else values
    rows = []
    for value in values:
        cfg = config_for_axis_value(base, axis, value)
        state, _ = pretrain(cfg)
        row = eval_reconstruction(state, cfg, n=min(n_eval, cfg.n_eval),
                                  seed=cfg.seed, variant=f"{axis}={value}")
        manifest = resolve_manifest(cfg)
        row.probe_acc = linear_probe(state.model, manifest, epochs=probe_epochs,
                                     seed=cfg.seed)
        rows.append(row)
    return rows


def write_eval_csv(rows: list[EvalRow], path) -> None:
    lines = [EVAL_CSV_HEADER]
    for r in rows:
        probe = "" if r.probe_acc is None else f"{r.probe_acc:.6f}"
        lines.append(f"{r.variant},{r.mse:.17g},{r.psnr_db:.6f},{probe},{r.seed}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_eval_json(rows: list[EvalRow], path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in rows], indent=2))


# ---------------------------------------------------------------------------
# visual dump

def reconstruction_panel(img, plan, recon: np.ndarray, patch_size: int,
                         path) -> None:
    """Side-by-side PNG: original | masked input | reconstruction (RGB part)."""
    orig = img.pixels[:, :, :3]
    masked = orig.copy()
    mask = masked_pixel_mask(orig.shape[0], orig.shape[1], plan, patch_size)
    masked[mask] = 0.5
    rec = np.clip(recon[:, :, :3], 0.0, 1.0)
    sep = np.ones((orig.shape[0], 2, 3))
    panel = np.concatenate([orig, sep, masked, sep, rec], axis=1)
    write_png(path, panel)
