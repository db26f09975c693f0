"""End-to-end stacking of the two stages and the dataset-size comparison."""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .dataset import DatasetManifest, load_split
from .metrics import Embedder, fid_score, fit_embedder
from .models import Network, stage1_generator, stage2_generator
from .ndtensor import Tensor, no_grad
from .training import TrainConfig, generator_from_checkpoint, sample_edges, train_stage1_arrays

logger = logging.getLogger(__name__)


def _load_stage(ckpt, stage: int):
    if isinstance(ckpt, tuple):
        return ckpt
    g, spec, found = generator_from_checkpoint(ckpt)
    if found != stage:
        raise ValueError(f"expected a stage-{stage} checkpoint, got stage {found}")
    return g, spec


def run_stack(stage1_ckpt, stage2_ckpt, z: Tensor, z2: Optional[Tensor] = None):
    """Latents -> (edge, gray), both in eval mode.

    Either checkpoint may be given as a loaded ``(Network, ModelSpec)`` pair.
    ``stage2_ckpt`` may also be any callable on edge tensors (used as a test
    double). Parameters are never modified.
    """
    g1, spec1 = _load_stage(stage1_ckpt, 1)
    with no_grad():
        edge = stage1_generator(z, g1, spec1, training=False)
        if callable(stage2_ckpt):
            gray = stage2_ckpt(edge)
            gray = gray if isinstance(gray, Tensor) else Tensor(gray)
        else:
            g2, spec2 = _load_stage(stage2_ckpt, 2)
            if spec2.stage2_latent_enabled and z2 is None:
                raise ValueError("stage-2 model takes a latent input; pass z2")
            gray = stage2_generator(edge, g2, spec2, z2, training=False)
    return edge, gray


def _ids_digest(ids: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(ids).encode()).hexdigest()[:16]


def subset_experiment(src_manifest: DatasetManifest, fractions: Sequence[float], train_budget: int,
                      seed: Union[int, Sequence[int]] = 0, config: Optional[TrainConfig] = None,
                      embedder: Optional[Embedder] = None, n_fake: int = 512,
                      out_dir=None) -> dict:
    """Train stage 1 once per (fraction, seed) under one step budget and score each with FID.

    Each fraction draws a seeded random subset of the train split; every run
    shares the same config, seed, and step budget, so runs differ only in
    their training images. FID is measured against every record of the
    manifest with a single shared edge embedder (fitted here when not given).
    The report states whether the median FID decreases with the fraction,
    but nothing is asserted.
    """
    seeds = [seed] if isinstance(seed, int) else list(seed)
    if not fractions:
        raise ValueError("need at least one fraction")
    if any(not 0 < f <= 1 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    base = config or TrainConfig(stage=1)
    base_dict = base.to_dict()
    base_dict.update(stage=1, steps=int(train_budget))
    base_dict["model"]["image_side"] = src_manifest.image_side
    train = load_split(src_manifest, "train")
    reference = load_split(src_manifest, None).edges
    if embedder is None:
        embedder = fit_embedder(src_manifest, seed=seeds[0], modality="edge")

    rows = []
    for s in seeds:
        cfg = TrainConfig.from_dict({**base_dict, "seed": s, "model": dict(base_dict["model"])})
        for frac in fractions:
            n_sub = max(1, int(round(frac * len(train))))
            pick = np.sort(np.random.default_rng([s, 3]).permutation(len(train))[:n_sub])
            data = train.subset(pick)
            run_dir = None
            if out_dir is not None:
                run_dir = Path(out_dir) / f"seed{s}_frac{frac:g}"
            ckpt, log = train_stage1_arrays(cfg, data, run_dir)
            g1, spec, _ = generator_from_checkpoint(ckpt)
            fake = sample_edges(g1, spec, n_fake, np.random.default_rng([s, 4]))
            report = fid_score(embedder, reference, fake)
            rows.append({
                "fraction": frac,
                "n_train": n_sub,
                "fid": report.fid,
                "seed": s,
                "steps": cfg.steps,
                "train_ids_digest": _ids_digest(data.ids),
                "config": cfg.to_dict(),
            })
            logger.info("subset fraction %g seed %d: fid %.3f", frac, s, report.fid)

    medians = {}
    for frac in fractions:
        medians[frac] = float(np.median([r["fid"] for r in rows if r["fraction"] == frac]))
    ordered = sorted(medians)
    result = {
        "rows": rows,
        "median_fid": {f"{f:g}": medians[f] for f in ordered},
        "smaller_fraction_higher_fid": all(medians[a] > medians[b] for a, b in zip(ordered, ordered[1:])),
        "equal_step_budget": True,
        "n_reference": int(len(reference)),
        "n_fake": n_fake,
        "embedder_fingerprint": embedder.fingerprint,
        "design_note": "runs share seed, config and step budget; only the training subset differs",
    }
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        slim = [{k: r[k] for k in ("fraction", "n_train", "fid", "seed", "steps")} for r in rows]
        (Path(out_dir) / "subset_report.json").write_text(
            json.dumps({**result, "rows": slim}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return result
