"""Rendering, augmentation and bookkeeping for labeled image-pair datasets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .fileio import load_png, load_tsm, save_png, save_tsm, write_json
from .sim import N_CLASSES, EventLabel

MANIFEST_VERSION = 1
COLORMAPS = ("grayscale3", "lut256")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class RenderSpec:
    out_height: int = 64
    out_width: int = 64
    colormap: str = "grayscale3"

    def validate(self) -> "RenderSpec":
        if self.out_height < 8 or self.out_width < 8:
            raise DatasetError(f"render size {self.out_height}x{self.out_width} below 8x8")
        if self.colormap not in COLORMAPS:
            raise DatasetError(f"unknown colormap {self.colormap!r}; choose from {COLORMAPS}")
        return self


@lru_cache(maxsize=1)
def lut256() -> np.ndarray:
    text = resources.files("das_forge").joinpath("data/lut256.csv").read_text(encoding="utf-8")
    rows = [line.split(",") for line in text.strip().splitlines()[1:]]
    lut = np.array(rows, dtype=np.uint8)
    assert lut.shape == (256, 3)
    return lut


# --------------------------------------------------------------------------
# rendering


def _area_resample(x: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    """Exact area averaging: each output cell is the mean of the input over
    its footprint, fractional pixels weighted by coverage."""
    x = np.moveaxis(x, axis, 0)
    n_in = x.shape[0]
    csum = np.zeros((n_in + 1,) + x.shape[1:])
    np.cumsum(x, axis=0, out=csum[1:])
    edges = np.arange(n_out + 1) * (n_in / n_out)
    k = np.minimum(np.floor(edges).astype(int), n_in - 1)
    frac = (edges - k).reshape((-1,) + (1,) * (x.ndim - 1))
    integral = csum[k] + frac * (csum[k + 1] - csum[k])
    out = (integral[1:] - integral[:-1]) / (n_in / n_out)
    return np.moveaxis(out, 0, axis)


def _bilinear_resample(x: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    x = np.moveaxis(x, axis, 0)
    n_in = x.shape[0]
    src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    w = (src - lo).reshape((-1,) + (1,) * (x.ndim - 1))
    out = (1.0 - w) * x[lo] + w * x[hi]
    return np.moveaxis(out, 0, axis)


def resize(x: np.ndarray, height: int, width: int) -> np.ndarray:
    """Area-average when shrinking, bilinear when enlarging, per axis."""
    out = np.asarray(x, dtype=float)
    for axis, n in ((0, height), (1, width)):
        if n < out.shape[axis]:
            out = _area_resample(out, n, axis)
        elif n > out.shape[axis]:
            out = _bilinear_resample(out, n, axis)
    return out


def normalize(matrix: np.ndarray) -> np.ndarray:
    m = np.asarray(matrix, dtype=float)
    if not np.all(np.isfinite(m)):
        raise DatasetError("cannot render a matrix with non-finite entries")
    lo, hi = m.min(), m.max()
    if hi <= lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def render_scalar(matrix: np.ndarray, spec: RenderSpec) -> np.ndarray:
    """Normalized, resized scalar field in [0, 1] before colour mapping."""
    spec.validate()
    return np.clip(resize(normalize(matrix), spec.out_height, spec.out_width), 0.0, 1.0)


def colorize(scalar: np.ndarray, colormap: str) -> np.ndarray:
    levels = np.rint(scalar * 255.0).astype(np.uint8)
    if colormap == "grayscale3":
        return np.repeat(levels[:, :, None], 3, axis=2)
    if colormap == "lut256":
        return lut256()[levels]
    raise DatasetError(f"unknown colormap {colormap!r}")


def render_image(matrix: np.ndarray, spec: RenderSpec = RenderSpec()) -> np.ndarray:
    return colorize(render_scalar(matrix, spec), spec.colormap)


# --------------------------------------------------------------------------
# augmentation


def relocate_event_columns(
    matrix: np.ndarray, src: tuple[int, int], offsets: Sequence[int]
) -> list[np.ndarray]:
    """Copy the event window ``matrix[:, src[0]:src[1]]`` onto each
    destination block starting at ``offsets[k]``; one output per offset."""
    m = np.asarray(matrix)
    start, stop = src
    width = stop - start
    n_cols = m.shape[1]
    if not 0 <= start < stop <= n_cols:
        raise DatasetError(f"source block [{start}, {stop}) outside {n_cols} columns")
    outputs = []
    for d in offsets:
        d = int(d)
        if d < 0 or d + width > n_cols:
            raise DatasetError(f"destination block [{d}, {d + width}) outside {n_cols} columns")
        if d != start and d < stop and start < d + width:
            raise DatasetError(
                f"destination block [{d}, {d + width}) overlaps source [{start}, {stop})"
            )
        out = m.copy()
        out[:, d : d + width] = m[:, start:stop]
        outputs.append(out)
    return outputs


def relocation_slots(n_cols: int, src: tuple[int, int]) -> list[int]:
    """Block starts tiling the columns on either side of the source window."""
    start, stop = src
    width = stop - start
    left = list(range(start - width, -1, -width))[::-1]
    right = list(range(stop, n_cols - width + 1, width))
    return left + right


def choose_offsets(n_cols: int, src: tuple[int, int], count: int, seed: int) -> list[int]:
    slots = relocation_slots(n_cols, src)
    if count > len(slots):
        raise DatasetError(f"only {len(slots)} non-overlapping destinations available, need {count}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0FF5E7]))
    picked = rng.choice(len(slots), size=count, replace=False)
    return sorted(slots[i] for i in picked)


def vertical_flip(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x)[::-1])


# --------------------------------------------------------------------------
# manifests


@dataclass
class SampleEntry:
    id: str
    class_index: int
    amp_png: str
    phase_png: str
    amp_tsm: str
    phase_tsm: str
    base_id: str
    augmentation: str

    @property
    def label(self) -> EventLabel:
        return EventLabel.from_class(self.class_index)


@dataclass
class DatasetManifest:
    samples: list[SampleEntry]
    seed: int = 0
    root: Optional[Path] = None
    render: dict = field(default_factory=dict)
    augmentation: dict = field(default_factory=dict)
    split: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.class_index for s in self.samples], dtype=int)

    def counts_per_class(self) -> dict[int, int]:
        counts = {c: 0 for c in range(N_CLASSES)}
        for s in self.samples:
            counts[s.class_index] += 1
        return counts

    def subset(self, ids: Sequence[str], split_tag: Optional[str] = None) -> "DatasetManifest":
        by_id = {s.id: s for s in self.samples}
        picked = [by_id[i] for i in ids]
        split = dict(self.split)
        if split_tag is not None:
            split = {i: split_tag for i in ids}
        return DatasetManifest(picked, self.seed, self.root, dict(self.render), dict(self.augmentation), split)

    def resolve(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "seed": self.seed,
            "render": self.render,
            "augmentation": self.augmentation,
            "counts_per_class": {str(k): v for k, v in self.counts_per_class().items()},
            "split": self.split,
            "samples": [asdict(s) for s in self.samples],
        }

    def save(self, path) -> None:
        path = Path(path)
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        if d.get("version") != MANIFEST_VERSION:
            raise DatasetError(f"{path}: unsupported manifest version {d.get('version')!r}")
        samples = [SampleEntry(**s) for s in d["samples"]]
        m = cls(samples, d["seed"], path.parent, d.get("render", {}), d.get("augmentation", {}), d.get("split", {}))
        stored = {int(k): v for k, v in d.get("counts_per_class", {}).items()}
        if stored and stored != m.counts_per_class():
            raise DatasetError(f"{path}: per-class counts disagree with sample list")
        if check_files:
            for s in samples:
                for rel in (s.amp_png, s.phase_png, s.amp_tsm, s.phase_tsm):
                    if not m.resolve(rel).is_file():
                        raise FileNotFoundError(f"{m.resolve(rel)} referenced by {path} is missing")
        return m


@dataclass
class BasePair:
    """One demodulated recording: differential amplitude and wrapped phase."""

    amp: np.ndarray
    phase: np.ndarray
    label: EventLabel
    base_id: str


def load_base_dir(base_dir) -> list[BasePair]:
    """Read the ``index.json`` written by ``demod --in-dir``."""
    base_dir = Path(base_dir)
    index_path = base_dir / "index.json"
    with open(index_path, encoding="utf-8") as fh:
        index = json.load(fh)
    pairs = []
    for rec in index["recordings"]:
        label = EventLabel(rec["amplitude_v"], rec["frequency_hz"])
        pairs.append(
            BasePair(load_tsm(base_dir / rec["amp"]), load_tsm(base_dir / rec["phase"]), label, rec["id"])
        )
    return pairs


def build_dataset(
    bases: Sequence[BasePair],
    out_dir,
    render: RenderSpec = RenderSpec(),
    n_offsets: int = 9,
    flip: bool = True,
    src: tuple[int, int] = (2200, 2500),
    seed: int = 0,
    require_all_classes: bool = True,
) -> DatasetManifest:
    """Relocate, then flip, then render every base pair; write images and a
    manifest under ``out_dir``."""
    render.validate()
    if not bases:
        raise DatasetError("no base recordings")
    if require_all_classes:
        present = {b.label.class_index for b in bases}
        missing = sorted(set(range(N_CLASSES)) - present)
        if missing:
            raise DatasetError(f"missing classes {missing}")
    out_dir = Path(out_dir)
    n_cols = bases[0].amp.shape[1]
    offsets = choose_offsets(n_cols, src, n_offsets, seed) if n_offsets else []

    samples = []
    for base in bases:
        if base.amp.shape != base.phase.shape:
            raise DatasetError(f"{base.base_id}: amplitude/phase shapes differ")
        variants = [("orig", base.amp, base.phase)]
        moved_amp = relocate_event_columns(base.amp, src, offsets)
        moved_phase = relocate_event_columns(base.phase, src, offsets)
        variants += [(f"reloc{d}", a, p) for d, a, p in zip(offsets, moved_amp, moved_phase)]
        if flip:
            variants += [(f"{tag}+flip", vertical_flip(a), vertical_flip(p)) for tag, a, p in variants]
        for tag, amp, phase in variants:
            sid = f"{base.base_id}__{tag}"
            entry = SampleEntry(
                id=sid,
                class_index=base.label.class_index,
                amp_png=f"images/{sid}_amp.png",
                phase_png=f"images/{sid}_phase.png",
                amp_tsm=f"fields/{sid}_amp.tsm",
                phase_tsm=f"fields/{sid}_phase.tsm",
                base_id=base.base_id,
                augmentation=tag,
            )
            for matrix, png, tsm in ((amp, entry.amp_png, entry.amp_tsm), (phase, entry.phase_png, entry.phase_tsm)):
                scalar = render_scalar(matrix, render)
                save_tsm(out_dir / tsm, scalar)
                save_png(out_dir / png, colorize(scalar, render.colormap))
            samples.append(entry)

    manifest = DatasetManifest(
        samples,
        seed=seed,
        root=out_dir,
        render=asdict(render),
        augmentation={"src": list(src), "offsets": offsets, "flip": flip},
    )
    manifest.save(out_dir / "manifest.json")
    return manifest


def split(manifest: DatasetManifest, train_fraction: float, seed: int):
    """Uniform random split without replacement into (train, test)."""
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError(f"train_fraction {train_fraction} outside (0, 1)")
    n = len(manifest)
    if n == 0:
        raise DatasetError("cannot split an empty manifest")
    n_train = int(np.floor(train_fraction * n + 0.5))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B117]))
    order = rng.permutation(n)
    ids = [manifest.samples[i].id for i in order]
    return manifest.subset(ids[:n_train], "train"), manifest.subset(ids[n_train:], "test")


def load_images(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack amplitude and phase images as float arrays scaled to [0, 1]."""
    amp = np.stack([load_png(manifest.resolve(s.amp_png)) for s in manifest.samples])
    phase = np.stack([load_png(manifest.resolve(s.phase_png)) for s in manifest.samples])
    return amp / 255.0, phase / 255.0, manifest.labels
