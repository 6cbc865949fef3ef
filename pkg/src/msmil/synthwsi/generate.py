"""Synthetic slide generator with a planted multi-scale class signal.

Each slide is stroma noise plus one lesion blob. Class identity is written
into the blob twice, at two deliberately disjoint scales:

* micro texture: a +/-1 pattern with period `micro_period` (default 32 px).
  It survives the 8x patch resize of 512 px crops but averages to exactly
  zero under the 32x resize of 2048 px crops, so it is invisible at 5x.
* macro bands: +/-1 intensity cells of side `macro_cell` (default 1024 px),
  axis-aligned with every crop grid. A 512 or 1024 px crop sits inside a
  single cell and sees only an uninformative constant offset (cell phase is
  randomized per slide); a 2048 px crop spans several cells and reads the
  band orientation directly.

With four classes, 0 and 1 share the micro texture and differ only in band
orientation, while 2 and 3 share the (flat) macro pattern and differ only
in micro texture. A classifier restricted to one crop size therefore has
one indistinguishable class pair, capping its accuracy at (C-1)/C; both
cues together separate everything. The caps are recorded in the dataset
manifest. Stroma carries no class information at any scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..numcore.rng import Rng
from .ppm import read_ppm, write_ppm
from .pyramid import THUMB_SIDE, LesionMask, PyramidImage


class SpecError(Exception):
    pass


_MICRO_KINDS = ("vstripe", "hstripe", "checker")
_MACRO_KINDS = ("hband", "vband", "flat")

# (micro_kind, macro_kind) per class; prefix defines the C=2 and C=3 tasks
_CLASS_TRAITS = (
    ("vstripe", "hband"),
    ("vstripe", "vband"),
    ("hstripe", "flat"),
    ("checker", "flat"),
)

_STROMA = (205, 185, 198)
_LESION = (168, 146, 168)


@dataclass(frozen=True)
class SynthSpec:
    classes: int = 4
    width: int = 4096
    height: int = 4096
    lesion_fraction: float = 0.3
    noise: int = 6
    micro_period: int = 32
    micro_amp: int = 22
    macro_cell: int = 1024
    macro_amp: int = 12

    def __post_init__(self):
        if not 2 <= self.classes <= len(_CLASS_TRAITS):
            raise SpecError(f"separability construction defined for 2..4 classes, got {self.classes}")
        if not 0.1 <= self.lesion_fraction <= 0.5:
            raise SpecError(f"lesion_fraction {self.lesion_fraction} outside [0.1, 0.5]")
        if self.micro_period not in (16, 32) or 32 % self.micro_period:
            raise SpecError("micro_period must be 16 or 32 so the 5x resize erases it exactly")
        if self.macro_cell not in (512, 1024, 2048):
            raise SpecError("macro_cell must align with the crop grid (512, 1024 or 2048)")
        if self.width % THUMB_SIDE or self.height % THUMB_SIDE:
            raise SpecError("base dims must be multiples of 1024 for exact mask alignment")

    def traits(self, label: int) -> tuple[str, str]:
        return _CLASS_TRAITS[label]


def single_scale_caps(spec: SynthSpec) -> dict[int, float]:
    """Best achievable accuracy per crop size, from the ambiguity construction.

    512 and 1024 px crops resolve micro texture only; 2048 px crops resolve
    macro bands only. Cap = number of distinguishable groups / class count.
    """
    micro = {spec.traits(c)[0] for c in range(spec.classes)}
    macro = {spec.traits(c)[1] for c in range(spec.classes)}
    micro_cap = len(micro) / spec.classes
    macro_cap = len(macro) / spec.classes
    return {512: micro_cap, 1024: micro_cap, 2048: macro_cap}


# superellipse |u/a|^6 + |v/b|^6 <= 1; area = 4ab * K6
_K6 = math.gamma(1 + 1 / 6) ** 2 / math.gamma(1 + 2 / 6)


def _blob_geometry(spec: SynthSpec, rng: Rng):
    """Label-independent lesion placement in mask coordinates."""
    half = THUMB_SIDE // 2
    quad = rng.integers(0, 4)
    jit_x = rng.integers(-24, 25)
    jit_y = rng.integers(-24, 25)
    aspect = 0.95 + 0.1 * rng.uniform()
    radius = math.sqrt(spec.lesion_fraction * THUMB_SIDE * THUMB_SIDE / (4.0 * _K6))
    a = radius * math.sqrt(aspect)
    b = radius / math.sqrt(aspect)
    qcx = half // 2 + (quad % 2) * half
    qcy = half // 2 + (quad // 2) * half
    lo_x, hi_x = math.ceil(a) + 1, THUMB_SIDE - math.ceil(a) - 1
    lo_y, hi_y = math.ceil(b) + 1, THUMB_SIDE - math.ceil(b) - 1
    cx = min(max(qcx + jit_x, lo_x), hi_x)
    cy = min(max(qcy + jit_y, lo_y), hi_y)
    return cx, cy, a, b


_BLOCK = 8  # mask px; 32 base px at the default 4096 width


def _footprint(spec: SynthSpec, rng: Rng) -> np.ndarray:
    """Superellipse blob quantized to the 32-base-px grid.

    Quantization keeps every resize block of every crop size fully inside or
    fully outside the lesion, so the micro texture cancels exactly at 5x
    instead of leaking at the boundary.
    """
    cx, cy, a, b = _blob_geometry(spec, rng)
    n = THUMB_SIDE // _BLOCK
    centers = np.arange(n) * _BLOCK + (_BLOCK - 1) / 2.0
    ys = (centers - cy) / b
    xs = (centers - cx) / a
    blocks = (np.abs(xs[None, :]) ** 6 + np.abs(ys[:, None]) ** 6) <= 1.0
    return np.repeat(np.repeat(blocks, _BLOCK, axis=0), _BLOCK, axis=1)


def generate_mask(spec: SynthSpec, seed: int) -> LesionMask:
    """Oracle lesion mask for a slide seed; red channel marks the blob."""
    foot = _footprint(spec, Rng(seed).child(1))
    raster = np.zeros((THUMB_SIDE, THUMB_SIDE, 3), dtype=np.uint8)
    raster[:, :, 0] = foot
    return LesionMask(raster, provenance="oracle")


def _sign_pattern(kind: str, spec: SynthSpec, h: int, w: int, phase_y: int, phase_x: int):
    """+/-1 field (broadcastable) for one texture or band kind."""
    half = spec.micro_period // 2
    col = np.arange(w, dtype=np.int32)[None, :]
    row = np.arange(h, dtype=np.int32)[:, None]
    if kind == "vstripe":
        return (1 - 2 * ((col // half) & 1)).astype(np.int16)
    if kind == "hstripe":
        return (1 - 2 * ((row // half) & 1)).astype(np.int16)
    if kind == "checker":
        cx = ((col // half) & 1).astype(np.int16)
        cy = ((row // half) & 1).astype(np.int16)
        return 1 - 2 * (cx ^ cy)
    if kind == "hband":
        return (1 - 2 * ((row // spec.macro_cell + phase_y) & 1)).astype(np.int16)
    if kind == "vband":
        return (1 - 2 * ((col // spec.macro_cell + phase_x) & 1)).astype(np.int16)
    if kind == "flat":
        return np.zeros((1, 1), dtype=np.int16)
    raise ValueError(kind)


def generate_wsi(spec: SynthSpec, label: int, seed: int) -> tuple[PyramidImage, LesionMask, int]:
    """Pure function of (spec, label, seed); see the module docstring for the signal."""
    if not 0 <= label < spec.classes:
        raise SpecError(f"label {label} out of range for {spec.classes} classes")
    h, w = spec.height, spec.width
    root = Rng(seed)
    geometry = root.child(1)
    noise_stream = root.child(2)
    phase_stream = root.child(3)
    # drawn unconditionally so stream positions never depend on the label
    phase_y = phase_stream.integers(0, 2)
    phase_x = phase_stream.integers(0, 2)

    foot_mask = _footprint(spec, geometry)
    fy = np.arange(h) * THUMB_SIDE // h
    fx = np.arange(w) * THUMB_SIDE // w
    foot = foot_mask[fy[:, None], fx[None, :]]

    micro_kind, macro_kind = spec.traits(label)
    micro = _sign_pattern(micro_kind, spec, h, w, phase_y, phase_x)
    macro = _sign_pattern(macro_kind, spec, h, w, phase_y, phase_x)
    lesion_signal = spec.micro_amp * micro + spec.macro_amp * macro

    img = np.empty((h, w, 3), dtype=np.uint8)
    n_levels = np.uint64(2 * spec.noise + 1)
    # one u64 per pixel; independent 21-bit fields give the three channel noises
    bits = noise_stream.u64(h * w)
    field_mask = np.uint64(0x1FFFFF)
    for c in range(3):
        sub = (bits >> np.uint64(21 * c)) & field_mask
        noise = (sub % n_levels).astype(np.int16).reshape(h, w)
        noise -= spec.noise
        chan = np.where(foot, _LESION[c] + lesion_signal, np.int16(_STROMA[c]))
        img[:, :, c] = np.clip(chan + noise, 0, 255).astype(np.uint8)

    raster = np.zeros((THUMB_SIDE, THUMB_SIDE, 3), dtype=np.uint8)
    raster[:, :, 0] = foot_mask
    return PyramidImage(img), LesionMask(raster, provenance="oracle"), label


# --------------------------------------------------------- dataset on disk


@dataclass
class SlideRecord:
    ident: str
    label: int
    width: int
    height: int
    seed: int
    path: Path | None = None
    _image: PyramidImage | None = field(default=None, repr=False)
    _mask: LesionMask | None = field(default=None, repr=False)

    def image(self) -> PyramidImage:
        if self._image is None:
            img = PyramidImage(read_ppm(self.path / "image.ppm"), ident=self.ident)
            self._image = img
        self._image.ident = self.ident
        return self._image

    def mask(self) -> LesionMask:
        if self._mask is None:
            raster = (read_ppm(self.path / "mask.ppm") >= 128).astype(np.uint8)
            self._mask = LesionMask(raster, provenance="file")
        return self._mask

    def drop_cache(self):
        if self.path is not None:
            self._image = None
            self._mask = None


@dataclass
class Dataset:
    spec: SynthSpec
    seed: int
    slides: list[SlideRecord]
    root: Path | None = None

    @property
    def caps(self) -> dict[int, float]:
        return single_scale_caps(self.spec)

    def labels(self) -> list[int]:
        return [s.label for s in self.slides]


def slide_seed(dataset_seed: int, index: int) -> int:
    return Rng(dataset_seed).child(index).u64()


def build_dataset(spec: SynthSpec, n_slides: int, seed: int) -> Dataset:
    """In-memory dataset; labels cycle round-robin so classes stay balanced."""
    slides = []
    for i in range(n_slides):
        label = i % spec.classes
        s_seed = slide_seed(seed, i)
        image, mask, _ = generate_wsi(spec, label, s_seed)
        ident = f"slide_{i:04d}"
        image.ident = ident
        rec = SlideRecord(ident, label, spec.width, spec.height, s_seed)
        rec._image = image
        rec._mask = mask
        slides.append(rec)
    return Dataset(spec, seed, slides)


def write_manifest(path: Path, entries: dict) -> None:
    with open(path, "w") as fh:
        for key, val in entries.items():
            fh.write(f"{key}={val}\n")


def read_manifest(path: Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and "=" in line:
            key, val = line.split("=", 1)
            out[key] = val
    return out


def write_dataset(root: Path, spec: SynthSpec, n_slides: int, seed: int) -> Dataset:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    caps = single_scale_caps(spec)
    slides = []
    for i in range(n_slides):
        label = i % spec.classes
        s_seed = slide_seed(seed, i)
        image, mask, _ = generate_wsi(spec, label, s_seed)
        ident = f"slide_{i:04d}"
        sdir = root / ident
        sdir.mkdir(exist_ok=True)
        write_ppm(image.base, sdir / "image.ppm")
        write_ppm(mask.raster * np.uint8(255), sdir / "mask.ppm")
        write_manifest(sdir / "meta.txt", {
            "label": label,
            "W": spec.width,
            "H": spec.height,
            "seed": s_seed,
            "single_scale_cap": max(caps.values()),
        })
        slides.append(SlideRecord(ident, label, spec.width, spec.height, s_seed, path=sdir))
    write_manifest(root / "manifest.txt", {
        "slides": n_slides,
        "classes": spec.classes,
        "seed": seed,
        "width": spec.width,
        "height": spec.height,
        "lesion_fraction": spec.lesion_fraction,
        "noise": spec.noise,
        "micro_period": spec.micro_period,
        "micro_amp": spec.micro_amp,
        "macro_cell": spec.macro_cell,
        "macro_amp": spec.macro_amp,
        "cap_512": caps[512],
        "cap_1024": caps[1024],
        "cap_2048": caps[2048],
        "single_scale_cap": max(caps.values()),
    })
    return Dataset(spec, seed, slides, root=root)


def load_dataset(root: Path) -> Dataset:
    root = Path(root)
    man = read_manifest(root / "manifest.txt")
    spec = SynthSpec(
        classes=int(man["classes"]),
        width=int(man["width"]),
        height=int(man["height"]),
        lesion_fraction=float(man["lesion_fraction"]),
        noise=int(man["noise"]),
        micro_period=int(man["micro_period"]),
        micro_amp=int(man["micro_amp"]),
        macro_cell=int(man["macro_cell"]),
        macro_amp=int(man["macro_amp"]),
    )
    slides = []
    for sdir in sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("slide_")):
        meta = read_manifest(sdir / "meta.txt")
        slides.append(SlideRecord(
            sdir.name, int(meta["label"]), int(meta["W"]), int(meta["H"]),
            int(meta["seed"]), path=sdir,
        ))
    return Dataset(spec, int(man["seed"]), slides, root=root)
