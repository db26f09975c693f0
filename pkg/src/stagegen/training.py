"""Adversarial training loops for both stages, loss logs, checkpoints, sampling."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import numpy as np

from . import imageops
from . import ndtensor as nd
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .dataset import DatasetManifest, PairedImages, batch_order, load_split
from .models import (
    ModelSpec,
    Network,
    discriminator,
    init_params,
    sample_latent,
    stage1_generator,
    stage2_discriminator,
    stage2_generator,
)
from .ndtensor import Adam, AdamState, Tensor, no_grad

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "epoch", "d_loss", "d_loss_real", "d_loss_fake", "g_loss_adv", "g_loss_l1", "wall_ms")
STAGE_DEFAULT_BATCH = {1: 64, 2: 1}


class TrainingDivergedError(RuntimeError):
    """A loss went NaN/Inf. ``last_good`` is the state before the failing step."""

    def __init__(self, message: str, last_good: Optional[Checkpoint] = None,
                 last_good_path: Optional[Path] = None):
        super().__init__(message)
        self.last_good = last_good
        self.last_good_path = last_good_path


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 1
    steps: Optional[int] = None
    batch_size: Optional[int] = None
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_l1: float = 100.0
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 1
    edge_source: str = "real"
    log_wall_time: bool = True
    model: ModelSpec = field(default_factory=ModelSpec)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelSpec.from_dict(self.model)
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.batch_size is None:
            self.batch_size = STAGE_DEFAULT_BATCH[self.stage]
        if self.epochs < 0 or (self.steps is not None and self.steps < 0):
            raise ValueError("epochs and steps must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("lr", "beta1", "beta2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_l1 < 0:
            raise ValueError("lambda_l1 must be non-negative")
        if self.checkpoint_every < 0 or self.log_every < 0:
            raise ValueError("checkpoint_every and log_every must be non-negative")
        if self.stage == 1 and self.edge_source != "real":
            raise ValueError("edge_source only applies to stage 2")

    def total_steps(self, n_samples: int) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * math.ceil(n_samples / self.batch_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# loss log
# ---------------------------------------------------------------------------

@dataclass
class LossLog:
    rows: List[dict] = field(default_factory=list)

    def append(self, row: dict) -> None:
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError("loss log steps must be strictly increasing")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def deterministic(self) -> List[tuple]:
        """Rows without the wall-clock column, for bitwise comparisons."""
        return [tuple(r[c] for c in LOSS_COLUMNS if c != "wall_ms") for r in self.rows]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOSS_COLUMNS)
            for r in self.rows:
                writer.writerow([r["step"], r["epoch"]] + [repr(float(r[c])) for c in LOSS_COLUMNS[2:]])

    @classmethod
    def from_csv(cls, path) -> "LossLog":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != LOSS_COLUMNS:
                raise ValueError(f"{path}: expected header {','.join(LOSS_COLUMNS)}")
            log = cls()
            for rec in reader:
                row = {"step": int(rec[0]), "epoch": int(rec[1])}
                row.update({c: float(v) for c, v in zip(LOSS_COLUMNS[2:], rec[2:])})
                log.append(row)
        return log


# ---------------------------------------------------------------------------
# train state
# ---------------------------------------------------------------------------

def _adam_for(net: Network, config: TrainConfig) -> Adam:
    return Adam(net.params, config.lr, config.beta1, config.beta2)


@dataclass
class TrainState:
    config: TrainConfig
    gen: Network
    disc: Network
    opt_g: Adam
    opt_d: Adam
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    batch_in_epoch: int = 0
    d_steps: int = 0
    g_steps: int = 0

    @classmethod
    def fresh(cls, config: TrainConfig) -> "TrainState":
        nets = init_params(config.model, config.seed)
        g, d = (nets["g1"], nets["d1"]) if config.stage == 1 else (nets["g2"], nets["d2"])
        return cls(config, g, d, _adam_for(g, config), _adam_for(d, config),
                   np.random.default_rng([config.seed, 100 + config.stage]))

    def to_checkpoint(self) -> Checkpoint:
        tensors: Dict[str, np.ndarray] = {}
        for prefix, net in (("g", self.gen), ("d", self.disc)):
            tensors.update({f"{prefix}/{k}": v.copy() for k, v in net.arrays().items()})
        for prefix, opt in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            tensors.update({f"{prefix}/m/{k}": v.copy() for k, v in opt.state.first_moment.items()})
            tensors.update({f"{prefix}/v/{k}": v.copy() for k, v in opt.state.second_moment.items()})
        meta = {
            "kind": "train_state",
            "stage": self.config.stage,
            "config": self.config.to_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "batch_in_epoch": self.batch_in_epoch,
            "d_steps": self.d_steps,
            "g_steps": self.g_steps,
            "opt_g_steps": self.opt_g.state.step_count,
            "opt_d_steps": self.opt_d.state.step_count,
            "rng": self.rng.bit_generator.state,
        }
        return Checkpoint(tensors, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, config: Optional[TrainConfig] = None) -> "TrainState":
        meta = ckpt.meta
        if meta.get("kind") != "train_state":
            raise CheckpointError("checkpoint does not hold a training state")
        saved = TrainConfig.from_dict(meta["config"])
        config = config or saved
        if config.stage != saved.stage or config.model != saved.model:
            raise CheckpointError("checkpoint stage/model do not match the requested config")
        gen = Network.from_arrays(ckpt.subset("g/"))
        disc = Network.from_arrays(ckpt.subset("d/"))
        opt_g, opt_d = _adam_for(gen, config), _adam_for(disc, config)
        for prefix, opt, key in (("opt_g", opt_g, "opt_g_steps"), ("opt_d", opt_d, "opt_d_steps")):
            opt.state = AdamState(ckpt.subset(f"{prefix}/m/"), ckpt.subset(f"{prefix}/v/"), int(meta[key]))
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        return cls(config, gen, disc, opt_g, opt_d, rng, int(meta["step"]), int(meta["epoch"]),
                   int(meta["batch_in_epoch"]), int(meta["d_steps"]), int(meta["g_steps"]))


def generator_from_checkpoint(ckpt: Union[Checkpoint, str, Path]):
    """(generator Network, ModelSpec, stage) from a training checkpoint or its path."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    if ckpt.meta.get("kind") != "train_state":
        raise CheckpointError("checkpoint does not hold a training state")
    config = TrainConfig.from_dict(ckpt.meta["config"])
    return Network.from_arrays(ckpt.subset("g/")), config.model, config.stage


# ---------------------------------------------------------------------------
# per-step updates
# ---------------------------------------------------------------------------

def _stage1_step(state: TrainState, batch, ctx) -> dict:
    spec = state.config.model
    g, d = state.gen, state.disc
    real = batch.edges
    z = sample_latent(real.shape[0], spec.latent_dim, state.rng)
    fake = stage1_generator(z, g, spec, training=True)

    d.zero_grad()
    d_real = nd.bce_with_logits(discriminator(real, d, training=True), 1.0)
    d_fake = nd.bce_with_logits(discriminator(fake.detach(), d, training=True), 0.0)
    d_loss = d_real + d_fake
    d_loss.backward()
    state.opt_d.step()
    state.d_steps += 1

    g.zero_grad()
    g_adv = nd.bce_with_logits(discriminator(fake, d, training=True), 1.0)
    g_adv.backward()
    state.opt_g.step()
    state.g_steps += 1
    d.zero_grad()
    return {"d_loss": d_loss.item(), "d_loss_real": d_real.item(), "d_loss_fake": d_fake.item(),
            "g_loss_adv": g_adv.item(), "g_loss_l1": 0.0}


def _stage2_step(state: TrainState, batch, ctx) -> dict:
    config = state.config
    spec = config.model
    g, d = state.gen, state.disc
    edge, gray = batch.edges, batch.grays
    n = edge.shape[0]
    z2 = sample_latent(n, spec.latent_dim, state.rng) if spec.stage2_latent_enabled else None
    stage1 = ctx.get("stage1")
    if stage1 is not None:
        g1, spec1 = stage1
        with no_grad():
            cond = stage1_generator(sample_latent(n, spec1.latent_dim, state.rng), g1, spec1, training=False)
        cond = cond.detach()
    else:
        cond = edge
    fake = stage2_generator(cond, g, spec, z2, training=True, rng=state.rng)

    d.zero_grad()
    d_real = nd.bce_with_logits(stage2_discriminator(edge, gray, d, training=True), 1.0)
    d_fake = nd.bce_with_logits(stage2_discriminator(cond, fake.detach(), d, training=True), 0.0)
    d_loss = (d_real + d_fake) * 0.5
    d_loss.backward()
    state.opt_d.step()
    state.d_steps += 1

    g.zero_grad()
    g_adv = nd.bce_with_logits(stage2_discriminator(cond, fake, d, training=True), 1.0)
    total = g_adv
    l1_value = 0.0
    if config.lambda_l1 > 0:
        # generated conditions have no paired target; the L1 term uses the real edge
        recon = fake if stage1 is None else stage2_generator(edge, g, spec, z2, training=True, rng=state.rng)
        l1 = nd.l1_loss(recon, gray)
        total = g_adv + l1 * config.lambda_l1
        l1_value = l1.item()
    total.backward()
    state.opt_g.step()
    state.g_steps += 1
    d.zero_grad()
    return {"d_loss": d_loss.item(), "d_loss_real": d_real.item(), "d_loss_fake": d_fake.item(),
            "g_loss_adv": g_adv.item(), "g_loss_l1": l1_value}


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

def _write_config(out_dir: Path, config: TrainConfig, echo: Optional[dict]) -> None:
    (out_dir / "resolved-config.json").write_text(
        json.dumps({**(echo or {}), **config.to_dict()}, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _run(config: TrainConfig, data: PairedImages, out_dir, resume, step_fn: Callable, ctx: dict,
         on_step: Optional[Callable] = None, echo: Optional[dict] = None):
    if len(data) == 0:
        raise ValueError("training split is empty")
    if data.edges.shape[-1] != config.model.image_side:
        raise ValueError(f"data side {data.edges.shape[-1]} != model image_side {config.model.image_side}")
    if resume is not None:
        if not isinstance(resume, Checkpoint):
            resume = load_checkpoint(resume)
        state = TrainState.from_checkpoint(resume, config)
    else:
        state = TrainState.fresh(config)

    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_dir = None
    log = LossLog()
    csv_path = None
    if out_dir is not None:
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        _write_config(out_dir, config, echo)
        csv_path = out_dir / f"losses_stage{config.stage}.csv"
        if resume is not None and csv_path.exists():
            kept = LossLog([r for r in LossLog.from_csv(csv_path).rows if r["step"] <= state.step])
            kept.to_csv(csv_path)
            prior = kept.rows
        else:
            prior = []
    total = config.total_steps(len(data))
    order = None
    order_epoch = None
    while state.step < total:
        if order_epoch != state.epoch:
            order = batch_order(len(data), config.batch_size, config.seed, state.epoch)
            order_epoch = state.epoch
        if state.batch_in_epoch >= len(order):
            state.epoch += 1
            state.batch_in_epoch = 0
            continue
        snapshot = state.to_checkpoint()
        t0 = time.perf_counter()
        losses = step_fn(state, data.take(order[state.batch_in_epoch]), ctx)
        wall = (time.perf_counter() - t0) * 1000.0 if config.log_wall_time else 0.0
        if not all(math.isfinite(v) for v in losses.values()):
            path = save_checkpoint(snapshot, ckpt_dir / "last_good.sgck") if ckpt_dir else None
            raise TrainingDivergedError(
                f"non-finite loss at step {state.step + 1}: {losses}", snapshot, path)
        state.batch_in_epoch += 1
        state.step += 1
        if config.log_every and state.step % config.log_every == 0:
            log.append({"step": state.step, "epoch": state.epoch, **losses, "wall_ms": wall})
        if ckpt_dir is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            save_checkpoint(state.to_checkpoint(), ckpt_dir / f"step_{state.step:07d}.sgck")
        if on_step is not None:
            on_step(state)
    final = state.to_checkpoint()
    if out_dir is not None:
        save_checkpoint(final, ckpt_dir / "final.sgck")
        LossLog(prior + log.rows).to_csv(csv_path)
    return final, log


def train_stage1_arrays(config: TrainConfig, data: PairedImages, out_dir=None, resume=None,
                        on_step: Optional[Callable] = None, echo: Optional[dict] = None):
    if config.stage != 1:
        raise ValueError("train_stage1 needs a stage-1 config")
    return _run(config, data, out_dir, resume, _stage1_step, {}, on_step, echo)


def train_stage1(config: TrainConfig, manifest: DatasetManifest, out_dir=None, resume=None,
                 on_step: Optional[Callable] = None, echo: Optional[dict] = None):
    """Train the noise -> edge DCGAN on the manifest's train split.

    Returns the final checkpoint and the loss log of this invocation.
    ``echo`` adds extra keys (such as the manifest path) to resolved-config.json.
    """
    return train_stage1_arrays(config, load_split(manifest, "train"), out_dir, resume, on_step, echo)


def _stage1_context(config: TrainConfig, stage1_ckpt) -> dict:
    source = config.edge_source
    if source == "real":
        return {}
    ckpt = stage1_ckpt if stage1_ckpt is not None else source
    try:
        g1, spec1, stage = generator_from_checkpoint(ckpt)
    except CheckpointError as exc:
        raise ValueError(f"edge_source checkpoint {source!r} cannot be used: {exc}") from exc
    if stage != 1:
        raise ValueError("edge_source checkpoint is not a stage-1 checkpoint")
    if spec1.image_side != config.model.image_side:
        raise ValueError("stage-1 checkpoint image_side differs from the stage-2 model")
    return {"stage1": (g1, spec1)}


def train_stage2_arrays(config: TrainConfig, data: PairedImages, stage1_ckpt=None, out_dir=None,
                        resume=None, on_step: Optional[Callable] = None, echo: Optional[dict] = None):
    if config.stage != 2:
        raise ValueError("train_stage2 needs a stage-2 config")
    ctx = _stage1_context(config, stage1_ckpt)
    return _run(config, data, out_dir, resume, _stage2_step, ctx, on_step, echo)


def train_stage2(config: TrainConfig, manifest: DatasetManifest, stage1_ckpt=None, out_dir=None,
                 resume=None, on_step: Optional[Callable] = None, echo: Optional[dict] = None):
    """Train the edge -> grayscale conditional GAN.

    With ``edge_source == "real"`` the generator is conditioned on manifest
    edges. Otherwise ``edge_source`` (or ``stage1_ckpt``) names a stage-1
    checkpoint whose generator, frozen, supplies the conditioning edges.
    """
    return train_stage2_arrays(config, load_split(manifest, "train"), stage1_ckpt, out_dir, resume, on_step, echo)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample_edges(g1: Network, spec: ModelSpec, n: int, rng: np.random.Generator,
                 chunk: int = 64) -> np.ndarray:
    """n stage-1 samples (eval mode) as float32 N x 1 x H x W."""
    out = []
    with no_grad():
        for start in range(0, n, chunk):
            m = min(chunk, n - start)
            out.append(stage1_generator(sample_latent(m, spec.latent_dim, rng), g1, spec, training=False).data)
    return np.concatenate(out) if out else np.zeros((0, 1, spec.image_side, spec.image_side), np.float32)


def translate(g2: Network, spec: ModelSpec, edges: np.ndarray, rng: Optional[np.random.Generator] = None,
              chunk: int = 16) -> np.ndarray:
    """Stage-2 outputs (eval mode) for a float32 edge batch."""
    out = []
    with no_grad():
        for start in range(0, len(edges), chunk):
            e = edges[start:start + chunk]
            z2 = None
            if spec.stage2_latent_enabled:
                if rng is None:
                    raise ValueError("stage-2 latent input needs an rng")
                z2 = sample_latent(len(e), spec.latent_dim, rng)
            out.append(stage2_generator(Tensor(e), g2, spec, z2, training=False).data)
    return np.concatenate(out) if out else np.zeros_like(edges)


def contact_sheet(edges: np.ndarray, grays: np.ndarray, columns: int = 8, gap: int = 2) -> np.ndarray:
    """Rows of up to ``columns`` samples: an edge strip above the matching gray strip."""
    n, side = len(edges), edges.shape[-1]
    columns = max(1, min(columns, n))
    rows = math.ceil(n / columns)
    step = side + gap
    sheet = np.full((rows * 2 * step - gap, columns * step - gap), 255, dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, columns)
        y, x = r * 2 * step, c * step
        sheet[y:y + side, x:x + side] = imageops.model_range_to_pixels(edges[i, 0])
        sheet[y + step:y + step + side, x:x + side] = imageops.model_range_to_pixels(grays[i, 0])
    return sheet


def generate(stage1_ckpt, stage2_ckpt, n: int, seed: int, out_dir) -> List[Path]:
    """Sample n edge/gray pairs through both stages and write PNGs plus a contact sheet."""
    if n < 1:
        raise ValueError("generate needs n >= 1")
    g1, spec1, s1 = generator_from_checkpoint(stage1_ckpt)
    g2, spec2, s2 = generator_from_checkpoint(stage2_ckpt)
    if (s1, s2) != (1, 2):
        raise ValueError("generate needs a stage-1 and a stage-2 checkpoint, in that order")
    if spec1.image_side != spec2.image_side:
        raise ValueError("stage checkpoints disagree on image_side")
    rng = np.random.default_rng(seed)
    edges = sample_edges(g1, spec1, n, rng)
    grays = translate(g2, spec2, edges, rng)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    width = max(4, len(str(n - 1)))
    for i in range(n):
        for kind, arr in (("edge", edges), ("gray", grays)):
            path = out_dir / f"{kind}_{i:0{width}d}.png"
            imageops.save_png(imageops.from_model_range(arr[i:i + 1]), path)
            written.append(path)
    sheet = out_dir / "sheet.png"
    imageops.save_png(imageops.ImageBuffer.from_array(contact_sheet(edges, grays)), sheet)
    written.append(sheet)
    return written
