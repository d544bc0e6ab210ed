"""Deterministic pretraining loop with AdamW and checkpointing.

A RunConfig plus its seed fully determines a run: the data-sampling stream,
per-step mask plans and parameter init all derive from the seed, and the
metrics CSV is byte-reproducible (wall-clock timing is only written when
explicitly enabled, since real timestamps would break reproducibility).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import load_container, model_tensors, save_container
from .imaging import DatasetManifest, load_sample, synthetic_manifest
from .model import MimConfig, MimModel
from .tensor import Tensor
from .tokens import make_mask_plan, tokenize

MASK_SIZES = (16, 32, 64)
METRICS_HEADER = "step,loss,lr,seconds"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RunConfig:
    """Every hyperparameter and ablation switch for one pretraining run."""

    embed_dim: int = 64
    encoder_depth: int = 4
    n_heads: int = 4
    mlp_ratio: int = 4
    mask_size: int = 32  # patch == mask square, px
    channels: int = 4
    image_h: int = 128
    image_w: int = 128
    query_mode: str = "q_masked"
    loss_scope: str = "full_image"
    mask_ratio: float = 0.75
    batch_size: int = 16
    steps: int = 2000
    learning_rate: float = 1e-5
    weight_decay: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    manifest: str = ""  # empty: synthesize n_train/n_eval samples in memory
    n_train: int = 64
    n_eval: int = 16
    checkpoint_every: int = 500
    log_timing: bool = False

    def __post_init__(self):
        if self.mask_size not in MASK_SIZES:
            raise ValueError(f"mask size must be one of {MASK_SIZES}, got {self.mask_size}")

    def mim_config(self) -> MimConfig:
        return MimConfig(
            embed_dim=self.embed_dim, encoder_depth=self.encoder_depth,
            n_heads=self.n_heads, mlp_ratio=self.mlp_ratio,
            patch_size=self.mask_size, channels=self.channels,
            image_h=self.image_h, image_w=self.image_w,
            query_mode=self.query_mode, loss_scope=self.loss_scope)

    @property
    def modality(self) -> str:
        return "rgb_ir" if self.channels == 4 else "rgb"

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        known = {f.name for f in fields(RunConfig)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown RunConfig fields: {sorted(unknown)}")
        return RunConfig(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @staticmethod
    def load(path) -> "RunConfig":
        return RunConfig.from_dict(json.loads(Path(path).read_text()))


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: AdamWState, lr: float, wd: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One decoupled-weight-decay Adam update; decay uses pre-step values."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match {name} {p.data.shape}")
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient in parameter {name}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p.data -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * p.data)


@dataclass
class TrainState:
    model: MimModel
    opt: AdamWState
    data_rng: np.random.Generator
    step: int = 0


def _plan_seed(seed: int, step: int, slot: int) -> int:
    return int(np.random.SeedSequence([seed, 2, step, slot]).generate_state(1)[0])


def resolve_manifest(config: RunConfig) -> DatasetManifest:
    if config.manifest:
        return DatasetManifest.load(config.manifest)
    return synthetic_manifest(config.n_train, config.n_eval, seed=config.seed,
                              modality=config.modality)


def init_state(config: RunConfig) -> TrainState:
    model = MimModel(config.mim_config(), seed=config.seed)
    return TrainState(model, AdamWState(),
                      np.random.default_rng([config.seed, 1]))


def _batch_loss(state: TrainState, config: RunConfig, manifest: DatasetManifest,
                train_records, step: int):
    idx = state.data_rng.integers(0, len(train_records), size=config.batch_size)
    total = None
    for slot, i in enumerate(idx):
        img, _ = load_sample(manifest, train_records[int(i)],
                             config.image_h, config.image_w)
        grid = tokenize(img, config.mask_size)
        plan = make_mask_plan(grid.n_tokens, config.mask_ratio,
                              _plan_seed(config.seed, step, slot))
        out = state.model.forward(grid, plan)
        total = out.loss if total is None else total + out.loss
    return total * Tensor(1.0 / config.batch_size)


def save_train_state(state: TrainState, config: RunConfig, path) -> None:
    tensors = dict(model_tensors(state.model))
    for name, arr in state.opt.m.items():
        tensors["opt.m." + name] = Tensor(arr)
    for name, arr in state.opt.v.items():
        tensors["opt.v." + name] = Tensor(arr)
    meta = {"config": state.model.config.to_dict(), "encoder_only": False,
            "extra": {"step": state.step, "opt_step": state.opt.step,
                      "rng_state": state.data_rng.bit_generator.state,
                      "run_config": config.to_dict()}}
    save_container(path, meta, tensors)


def load_train_state(path) -> tuple[TrainState, RunConfig]:
    meta, tensors = load_container(path)
    extra = meta["extra"]
    config = RunConfig.from_dict(extra["run_config"])
    model = MimModel(MimConfig.from_dict(meta["config"]), seed=None)
    for name, p in model.params.items():
        p.data[...] = tensors[name].data
    model.pos_embed = Tensor(tensors["pos_embed"].data)
    opt = AdamWState(step=int(extra["opt_step"]))
    for name in model.params:
        if "opt.m." + name in tensors:
            opt.m[name] = tensors["opt.m." + name].data.copy()
            opt.v[name] = tensors["opt.v." + name].data.copy()
    rng = np.random.default_rng()
    rng.bit_generator.state = extra["rng_state"]
    return TrainState(model, opt, rng, step=int(extra["step"])), config


def pretrain(config: RunConfig, run_dir=None,
             state: TrainState | None = None) -> tuple[TrainState, list[dict]]:
    """Minimize the reconstruction loss for config.steps AdamW steps.

    Returns the final state plus one metrics row per step. With run_dir set,
    writes metrics.csv and periodic checkpoints under it.
    """
    manifest = resolve_manifest(config)
    train_records = manifest.split("train")
    if not train_records:
        raise ValueError("training split is empty; nothing to pretrain on")
    if state is None:
        state = init_state(config)

    ckpt_dir = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    metrics: list[dict] = []
    t0 = time.perf_counter()
    target_step = state.step + config.steps
    while state.step < target_step:
        step = state.step + 1
        loss_t = _batch_loss(state, config, manifest, train_records, step)
        loss = loss_t.item()
        if not np.isfinite(loss):
            # last periodic checkpoint stays on disk as the rollback point
            raise TrainingDiverged(f"loss became non-finite at step {step}")
        state.model.zero_grad()
        loss_t.backward()
        grads = {n: p.grad for n, p in state.model.params.items()}
        adamw_step(state.model.params, grads, state.opt, config.learning_rate,
                   config.weight_decay, config.beta1, config.beta2, config.eps)
        state.step = step
        seconds = time.perf_counter() - t0 if config.log_timing else 0.0
        metrics.append({"step": step, "loss": loss,
                        "lr": config.learning_rate, "seconds": seconds})
        if ckpt_dir is not None and config.checkpoint_every > 0 \
                and step % config.checkpoint_every == 0:
            save_train_state(state, config, ckpt_dir / f"step_{step:06d}.imim")

    if run_dir is not None:
        write_metrics_csv(run_dir / "metrics.csv", metrics)
        save_train_state(state, config, ckpt_dir / "final.imim")
    return state, metrics


def write_metrics_csv(path, metrics: list[dict]) -> None:
    lines = [METRICS_HEADER]
    for row in metrics:
        lines.append(f"{row['step']},{row['loss']:.17g},"
                     f"{row['lr']:.17g},{row['seconds']:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def export_encoder(state: TrainState, path) -> None:
    """Encoder-only checkpoint: patch projection, position embeddings, blocks."""
    from .checkpoint import is_encoder_tensor
    model = state.model
    if model.encoder_only:
        raise ValueError("state already holds an encoder-only model")
    tensors = {n: t for n, t in model_tensors(model).items() if is_encoder_tensor(n)}
    save_container(path, {"config": model.config.to_dict(), "encoder_only": True,
                          "extra": {}}, tensors)
