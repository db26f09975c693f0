"""Paired grayscale/edge datasets: building, manifests, batching, synthetic faces."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from . import imageops
from .ndtensor import Tensor

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
MANIFEST_FORMAT = "stagegen-manifest"
MANIFEST_VERSION = 1
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
SPLITS = ("train", "eval")
DEFAULT_SPLIT_RATIO = 0.95


class DatasetError(RuntimeError):
    pass


def worker_count() -> int:
    """Worker threads, capped by ``STAGEGEN_THREADS`` (default: logical cores)."""
    env = os.environ.get("STAGEGEN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            logger.warning("ignoring non-integer STAGEGEN_THREADS=%r", env)
    return os.cpu_count() or 1


@dataclass(frozen=True)
class Record:
    id: str
    rgb_path: str
    gray_path: str
    edge_path: str
    split: str


@dataclass
class DatasetManifest:
    """Index of paired samples. Paths are stored relative to ``root``."""

    records: List[Record]
    image_side: int
    source_fingerprint: str
    skipped: int = 0
    split_ratio: float = DEFAULT_SPLIT_RATIO
    subset_fraction: float = 1.0
    seed: int = 0
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DatasetError("manifest ids are not unique")

    def split(self, name: str) -> List[Record]:
        if name not in SPLITS:
            raise DatasetError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [r for r in self.records if r.split == name]

    def resolve(self, rel: str) -> Path:
        return (self.root / rel).resolve()

    # -- persistence ------------------------------------------------------
    def header(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "image_side": self.image_side,
            "source_fingerprint": self.source_fingerprint,
            "skipped": self.skipped,
            "split_ratio": self.split_ratio,
            "subset_fraction": self.subset_fraction,
            "seed": self.seed,
            "n_records": len(self.records),
        }

    def dumps(self) -> str:
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(asdict(r), sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        tmp = path.with_suffix(".tmp")
        tmp.write_text(self.dumps(), encoding="utf-8")
        os.replace(tmp, path)
        return path


def read_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
    if not lines:
        raise DatasetError(f"empty manifest {path}")
    head = json.loads(lines[0])
    if head.get("format") != MANIFEST_FORMAT:
        raise DatasetError(f"{path} is not a {MANIFEST_FORMAT} file")
    if head.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {head.get('version')}")
    records = [Record(**json.loads(line)) for line in lines[1:] if line.strip()]
    manifest = DatasetManifest(
        records=records,
        image_side=int(head["image_side"]),
        source_fingerprint=head["source_fingerprint"],
        skipped=int(head.get("skipped", 0)),
        split_ratio=float(head.get("split_ratio", DEFAULT_SPLIT_RATIO)),
        subset_fraction=float(head.get("subset_fraction", 1.0)),
        seed=int(head.get("seed", 0)),
        root=path.parent,
    )
    if check_files:
        for r in records:
            for rel in (r.gray_path, r.edge_path):
                if not manifest.resolve(rel).is_file():
                    raise DatasetError(f"manifest {path}: missing file {rel} for record {r.id}")
    return manifest


# ---------------------------------------------------------------------------
# building
# ---------------------------------------------------------------------------

def _list_sources(src_dir: Path) -> List[Path]:
    files = [p for p in src_dir.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
    return sorted(files, key=lambda p: p.relative_to(src_dir).as_posix())


def _record_id(rel: str, taken: set) -> str:
    stem = rel.rsplit(".", 1)[0].replace("/", "__")
    rid = stem if stem not in taken else rel.replace("/", "__").replace(".", "_")
    taken.add(rid)
    return rid


def _convert_one(src: Path, gray_out: Path, edge_out: Path, side: int) -> Optional[str]:
    """Write gray/edge PNGs for one source; returns its content digest or None if skipped."""
    try:
        raw = src.read_bytes()
        rgb = imageops.decode_image(raw, source=str(src))
    except (OSError, imageops.ImageDecodeError) as exc:
        logger.warning("skipping %s: %s", src, exc)
        return None
    gray, edge = imageops.preprocess_rgb(rgb, side)
    imageops.save_png(gray, gray_out)
    imageops.save_png(edge, edge_out)
    return hashlib.sha256(raw).hexdigest()


def build_dataset(src_dir, out_dir, image_side: int = 64, split_ratio: float = DEFAULT_SPLIT_RATIO,
                  subset_fraction: float = 1.0, seed: int = 0) -> DatasetManifest:
    """Convert every RGB image under ``src_dir`` into paired gray/edge PNGs.

    ``subset_fraction`` keeps a seeded random subset of the source listing.
    Undecodable files are skipped and counted. The manifest is written to
    ``out_dir/manifest.jsonl`` and returned.
    """
    src_dir, out_dir = Path(src_dir), Path(out_dir)
    if not 0 < subset_fraction <= 1:
        raise DatasetError(f"subset_fraction must be in (0, 1], got {subset_fraction}")
    if not 0 < split_ratio <= 1:
        raise DatasetError(f"split_ratio must be in (0, 1], got {split_ratio}")
    if image_side < 3:
        raise DatasetError(f"image_side must be >= 3, got {image_side}")
    sources = _list_sources(src_dir)
    if not sources:
        raise DatasetError(f"no PNG/JPEG images found under {src_dir}")
    if subset_fraction < 1:
        keep = max(1, int(round(subset_fraction * len(sources))))
        picked = np.random.default_rng([seed, 1]).choice(len(sources), size=keep, replace=False)
        sources = [sources[i] for i in sorted(picked)]

    (out_dir / "gray").mkdir(parents=True, exist_ok=True)
    (out_dir / "edge").mkdir(parents=True, exist_ok=True)
    taken: set = set()
    rels = [s.relative_to(src_dir).as_posix() for s in sources]
    ids = [_record_id(rel, taken) for rel in rels]
    jobs = [(s, out_dir / "gray" / f"{rid}.png", out_dir / "edge" / f"{rid}.png") for s, rid in zip(sources, ids)]

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        digests = list(pool.map(lambda job: _convert_one(*job, image_side), jobs))

    kept = [(rid, src, rel, d) for rid, src, rel, d in zip(ids, sources, rels, digests) if d is not None]
    skipped = len(sources) - len(kept)
    if not kept:
        raise DatasetError(f"no decodable images under {src_dir} ({skipped} skipped)")

    listing = hashlib.sha256()
    for _, _, rel, digest in kept:
        listing.update(f"{rel}\t{digest}\n".encode())

    n = len(kept)
    n_train = int(round(split_ratio * n))
    order = np.random.default_rng([seed, 2]).permutation(n)
    split_of = {}
    for rank, idx in enumerate(order):
        split_of[idx] = "train" if rank < n_train else "eval"

    root = out_dir.resolve()
    records = [
        Record(
            id=rid,
            rgb_path=os.path.relpath(src.resolve(), root).replace(os.sep, "/"),
            gray_path=f"gray/{rid}.png",
            edge_path=f"edge/{rid}.png",
            split=split_of[i],
        )
        for i, (rid, src, _, _) in enumerate(kept)
    ]
    manifest = DatasetManifest(records, image_side, listing.hexdigest(), skipped,
                               split_ratio, subset_fraction, seed, root=root)
    manifest.write(out_dir / MANIFEST_NAME)
    logger.info("built %d records (%d skipped) in %s", n, skipped, out_dir)
    return manifest


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    edges: Tensor
    grays: Tensor
    ids: List[str]


@dataclass
class PairedImages:
    """In-memory split: ``edges``/``grays`` are float32 (N, 1, H, W) in [-1, 1]."""

    ids: List[str]
    edges: np.ndarray
    grays: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, index: Sequence[int]) -> Batch:
        index = np.asarray(index)
        return Batch(Tensor(self.edges[index]), Tensor(self.grays[index]), [self.ids[i] for i in index])

    def subset(self, index: Sequence[int]) -> "PairedImages":
        index = np.asarray(index)
        return PairedImages([self.ids[i] for i in index], self.edges[index], self.grays[index])


def _read_plane(path: Path) -> np.ndarray:
    img = imageops.decode_image(str(path))
    return imageops.to_grayscale(img).plane


def load_split(manifest: DatasetManifest, split: Optional[str] = "train") -> PairedImages:
    """Decode a split (or every record when ``split`` is None) into memory."""
    records = manifest.records if split is None else manifest.split(split)
    if not records:
        raise DatasetError(f"split {split!r} is empty")

    def load(r: Record):
        return _read_plane(manifest.resolve(r.edge_path)), _read_plane(manifest.resolve(r.gray_path))

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        planes = list(pool.map(load, records))
    edges = np.stack([e for e, _ in planes])[:, None]
    grays = np.stack([g for _, g in planes])[:, None]
    return PairedImages([r.id for r in records], imageops.array_to_model_range(edges),
                        imageops.array_to_model_range(grays))


def batch_order(n: int, batch_size: int, shuffle_seed: int, epoch: int) -> List[np.ndarray]:
    """Index batches for one epoch; the final short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def iterate_batches(manifest: DatasetManifest, split: str, batch_size: int,
                    shuffle_seed: int = 0, epoch: int = 0) -> Iterator[Batch]:
    """Deterministic batches for (seed, epoch), decoded lazily from disk."""
    records = manifest.split(split)
    for index in batch_order(len(records), batch_size, shuffle_seed, epoch):
        chosen = [records[i] for i in index]
        edges = np.stack([_read_plane(manifest.resolve(r.edge_path)) for r in chosen])[:, None]
        grays = np.stack([_read_plane(manifest.resolve(r.gray_path)) for r in chosen])[:, None]
        yield Batch(Tensor(imageops.array_to_model_range(edges)),
                    Tensor(imageops.array_to_model_range(grays)),
                    [r.id for r in chosen])


# ---------------------------------------------------------------------------
# synthetic faces
# ---------------------------------------------------------------------------

SUPERSAMPLE = 4


def _face_params(rng: np.random.Generator) -> dict:
    """Random face layout in unit coordinates. All ranges are fixed here."""
    rx = rng.uniform(0.20, 0.31)
    p = {
        "background": rng.integers(15, 240, 3),
        "skin": rng.integers(60, 250, 3),
        "cx": rng.uniform(0.38, 0.62),
        "cy": rng.uniform(0.45, 0.60),
        "rx": rx,
        "ry": rx * rng.uniform(1.10, 1.40),
        "hair": rng.random() < 0.7,
        "hair_color": rng.integers(0, 140, 3),
        "hair_lift": rng.uniform(0.15, 0.35),
        "eye_height": rng.uniform(0.10, 0.32),
        "eye_spread": rng.uniform(0.30, 0.50),
        "eye_radius": rng.uniform(0.10, 0.18),
        "eye_color": rng.integers(0, 90, 3),
        "nose": rng.random() < 0.8,
        "mouth_drop": rng.uniform(0.35, 0.60),
        "mouth_width": rng.uniform(0.25, 0.60),
        "mouth_open": rng.uniform(0.03, 0.15),
        "mouth_color": rng.integers(60, 200, 3) * np.array([1.0, 0.45, 0.45]),
    }
    return p


def draw_face(side: int, rng: np.random.Generator) -> np.ndarray:
    """One procedurally drawn face: (side, side, 3) uint8.

    Head ellipse with optional hair cap, two eyes, optional nose line and a
    mouth ellipse. Drawn at 4x resolution and downsampled.
    """
    p = _face_params(rng)
    big = side * SUPERSAMPLE
    img = Image.new("RGB", (big, big), tuple(int(c) for c in p["background"]))
    d = ImageDraw.Draw(img)
    s = float(big)
    cx, cy, rx, ry = p["cx"] * s, p["cy"] * s, p["rx"] * s, p["ry"] * s

    def color(key):
        return tuple(int(c) for c in p[key])

    if p["hair"]:
        lift = p["hair_lift"] * ry
        d.ellipse([cx - rx * 1.08, cy - ry - lift, cx + rx * 1.08, cy + ry * 0.3], fill=color("hair_color"))
    d.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=color("skin"))
    ey = cy - p["eye_height"] * ry
    er = p["eye_radius"] * rx
    for sign in (-1, 1):
        ex = cx + sign * p["eye_spread"] * rx
        d.ellipse([ex - er, ey - er * 0.7, ex + er, ey + er * 0.7], fill=color("eye_color"))
    if p["nose"]:
        d.line([cx, ey + er, cx, cy + 0.2 * ry], fill=color("eye_color"), width=max(1, SUPERSAMPLE))
    my = cy + p["mouth_drop"] * ry
    mw, mh = p["mouth_width"] * rx, p["mouth_open"] * ry
    d.ellipse([cx - mw, my - mh, cx + mw, my + mh], fill=color("mouth_color"))
    img = img.resize((side, side), Image.Resampling.BOX)
    return np.asarray(img, dtype=np.uint8)


def synth_faces(n: int, image_side: int, seed: int, out_dir,
                split_ratio: float = DEFAULT_SPLIT_RATIO) -> DatasetManifest:
    """Draw ``n`` deterministic RGB faces into ``out_dir/rgb`` and build pairs from them."""
    if n < 1:
        raise DatasetError("synth_faces needs n >= 1")
    out_dir = Path(out_dir)
    rgb_dir = out_dir / "rgb"
    rgb_dir.mkdir(parents=True, exist_ok=True)

    def write(i: int) -> None:
        arr = draw_face(image_side, np.random.default_rng([seed, i]))
        imageops.save_png(imageops.ImageBuffer.from_array(arr), rgb_dir / f"face_{i:06d}.png")

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        list(pool.map(write, range(n)))
    return build_dataset(rgb_dir, out_dir, image_side, split_ratio, 1.0, seed)
