"""End-to-end joint training, cached-feature refinement, and inference.

Training keeps one slide's bag per optimizer step: the recording graph spans
patch encoding through the attention network and the loss, so gradients
reach both parameter groups (the end-to-end coupling this build exists to
demonstrate). Stage two freezes the encoder by construction: it trains the
attention network on cached feature files in which patches are constants.

Per-slide crops are resized once into an in-memory bank; crops are pure
functions of the slide, so the cache changes nothing observable.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numcore as nc
from .iaam import Bag, IaamConfig, IaamNet
from .msfem import EncoderConfig, PatchEncoder, resize_patch
from .params import ParamStore
from .raster import box_downscale
from .sffm import (
    SCALE_SIDES,
    MaskProvider,
    PatchRef,
    PatchSet,
    crop_patch,
    full_grid,
    run_sffm,
)
from .synthwsi import Dataset, PyramidImage, SlideRecord

BACKGROUND_MEAN = 240.0  # patches brighter than this on every channel are skipped


class EmptySlideError(Exception):
    pass


class DivergenceError(Exception):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step


class CacheFormatError(Exception):
    pass


PATCH_SOURCES = ("all_nonbackground", "lesion_only", "random_k")


@dataclass(frozen=True)
class TrainConfig:
    instances_per_graph: int = 64
    lr: float = 0.05
    epochs: int = 6
    accum_steps: int = 1
    seed: int = 0
    stage: str = "e2e"                      # e2e | mil_only
    patch_source: str = "all_nonbackground"
    scales: tuple[int, ...] = SCALE_SIDES
    random_quotas: tuple[int, int, int] = (46, 11, 3)  # 20x/10x/5x, desk scale

    def __post_init__(self):
        if self.instances_per_graph < 1:
            raise ValueError("instances_per_graph must be >= 1")
        if self.stage not in ("e2e", "mil_only"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.patch_source not in PATCH_SOURCES:
            raise ValueError(f"unknown patch source {self.patch_source!r}")
        if any(s not in SCALE_SIDES for s in self.scales) or not self.scales:
            raise ValueError(f"scales must be a non-empty subset of {SCALE_SIDES}")


@dataclass
class Model:
    encoder: PatchEncoder
    mil: IaamNet
    store: ParamStore
    encoder_cfg: EncoderConfig
    mil_cfg: IaamConfig

    def extractor_params(self) -> list[nc.Tensor]:
        return self.store.subset("enc.")

    def mil_params(self) -> list[nc.Tensor]:
        return self.store.subset("mil.")


def build_model(encoder_cfg: EncoderConfig, mil_cfg: IaamConfig, seed: int) -> Model:
    if mil_cfg.dim != encoder_cfg.token_dim:
        raise ValueError(
            f"attention dim {mil_cfg.dim} must equal encoder token dim {encoder_cfg.token_dim}"
        )
    store = ParamStore()
    rng = nc.Rng(seed)
    encoder = PatchEncoder(encoder_cfg, store, rng.child(1), prefix="enc")
    mil = IaamNet(mil_cfg, store, rng.child(2), prefix="mil")
    return Model(encoder, mil, store, encoder_cfg, mil_cfg)


# ------------------------------------------------------------- patch banks


@dataclass
class SlideBank:
    """Resized crops for every grid position of one slide, plus which of them
    the lesion filter retained. Patch pixels are pure functions of the slide,
    so caching them is observationally neutral."""

    ident: str
    label: int
    width: int
    height: int
    refs: list[PatchRef]                  # full grid, (d_k asc, y, x) order
    patches: np.ndarray                   # (n, S, S, 3) float32, 0..255
    background: np.ndarray                # (n,) bool
    lesion_idx: np.ndarray                # indices into refs, sffm order
    lesion_set: PatchSet = field(repr=False, default=None)

    def idx_for(self, source: str, scales: tuple[int, ...]) -> np.ndarray:
        if source == "lesion_only":
            idx = self.lesion_idx
        else:
            idx = np.flatnonzero(~self.background)
        if tuple(scales) != SCALE_SIDES:
            keep = {s for s in scales}
            idx = np.asarray([i for i in idx if self.refs[i].d_k in keep], dtype=np.int64)
        return idx


def build_bank(record: SlideRecord, provider: MaskProvider, resize_side: int) -> SlideBank:
    image = record.image()
    lesion = run_sffm(image, provider)
    grid = full_grid(image.width, image.height)
    pos = {(r.x, r.y, r.d_k): i for i, r in enumerate(grid)}
    patches = np.empty((len(grid), resize_side, resize_side, 3), dtype=np.float32)
    background = np.empty(len(grid), dtype=bool)
    # aligned crops resize to exact slices of whole-image box averages;
    # dyadic-rational block means make the cascade 8 -> 16 -> 32 and the
    # crop-then-resize path all bitwise-equal
    levels: dict[int, np.ndarray] = {}

    def level_of(factor: int) -> np.ndarray:
        if factor not in levels:
            prev = max((f for f in levels if factor % f == 0), default=1)
            src = levels.get(prev, image.base)
            levels[factor] = box_downscale(src, factor // prev, factor // prev)
        return levels[factor]

    for i, ref in enumerate(grid):
        y0, _, x0, _ = ref.bounds()
        factor, rem = divmod(ref.d_k, resize_side)
        if rem == 0 and x0 % factor == 0 and y0 % factor == 0:
            patch = level_of(factor)[y0 // factor:y0 // factor + resize_side,
                                     x0 // factor:x0 // factor + resize_side]
            patches[i] = patch
            background[i] = bool((patch.mean(axis=(0, 1)) > BACKGROUND_MEAN).all())
        else:
            crop = crop_patch(image, ref)
            background[i] = bool((crop.mean(axis=(0, 1)) > BACKGROUND_MEAN).all())
            patches[i] = resize_patch(crop, resize_side)
    lesion_idx = np.asarray([pos[(r.x, r.y, r.d_k)] for r in lesion.refs], dtype=np.int64)
    record.drop_cache()
    return SlideBank(record.ident, record.label, image.width, image.height,
                     grid, patches, background, lesion_idx, lesion_set=lesion)


def build_banks(dataset: Dataset, provider: MaskProvider, resize_side: int) -> list[SlideBank]:
    return [build_bank(rec, provider, resize_side) for rec in dataset.slides]


# ------------------------------------------------------------ batch choice


def select_batch(bank: SlideBank, source: str, batch: int, rng: nc.Rng,
                 scales: tuple[int, ...] = SCALE_SIDES,
                 quotas: tuple[int, int, int] = (46, 11, 3)) -> np.ndarray:
    """Uniform sample without replacement of min(batch, available) grid indices."""
    if source == "random_k":
        pool = []
        for code, quota in enumerate(quotas):
            scale_idx = [i for i in bank.idx_for("all_nonbackground", scales)
                         if bank.refs[i].scale_code == code]
            take = min(quota, len(scale_idx))
            if take:
                chosen = rng.sample(len(scale_idx), take)
                pool.extend(scale_idx[j] for j in chosen)
        idx = np.asarray(sorted(pool), dtype=np.int64)
    else:
        idx = bank.idx_for(source, scales)
    if len(idx) == 0:
        raise EmptySlideError(f"slide {bank.ident}: no candidate patches under {source!r}")
    if batch >= len(idx):
        return idx
    pick = rng.sample(len(idx), batch)
    return idx[np.sort(pick)]


def bag_from_bank(bank: SlideBank, idx: np.ndarray, model: Model,
                  features: nc.Tensor | None = None) -> Bag:
    refs = [bank.refs[i] for i in idx]
    coords = np.asarray([(r.x, r.y) for r in refs], dtype=np.int64)
    scales = np.asarray([r.scale_code for r in refs], dtype=np.int64)
    if features is None:
        features = model.encoder.extract_batch(bank.patches[idx].astype(np.float64))
    return Bag(features, coords, scales, bank.width, bank.height, label=bank.label)


# ----------------------------------------------------------- e2e training


def e2e_train_step(bank: SlideBank, model: Model, opt: nc.GradAccumSgd,
                   cfg: TrainConfig, rng: nc.Rng) -> tuple[float, int]:
    """One recorded forward/backward over a sampled bag; updates both the
    extractor and the attention parameters through the shared optimizer.
    Returns (loss, predicted label)."""
    idx = select_batch(bank, cfg.patch_source, cfg.instances_per_graph, rng,
                       cfg.scales, cfg.random_quotas)
    opt.zero_grad()
    with nc.record() as graph:
        bag = bag_from_bank(bank, idx, model)
        logits = model.mil.forward_logits(bag)
        loss = nc.cross_entropy(logits, bank.label)
    graph.backward(loss)
    opt.accumulate()
    if opt.ready:
        opt.step()
    return loss.item(), int(np.argmax(logits.data))


def train_e2e(banks: list[SlideBank], model: Model, cfg: TrainConfig) -> dict:
    """Joint training over epochs x slides (one slide bag per step)."""
    t0 = time.perf_counter()
    opt = nc.GradAccumSgd(model.store.tensors(), lr=cfg.lr, accum_steps=cfg.accum_steps)
    root = nc.Rng(cfg.seed)
    manifest: dict = {"stage": "e2e", "slides": len(banks)}
    manifest.update(config_echo(cfg))
    step = 0
    for epoch in range(cfg.epochs):
        order = root.child(100 + epoch).permutation(len(banks))
        batch_rng = root.child(200 + epoch)
        losses, hits = [], 0
        for slide_pos in order:
            bank = banks[slide_pos]
            loss, pred = e2e_train_step(bank, model, opt, cfg, batch_rng)
            if not np.isfinite(loss):
                manifest["diverged_at_step"] = step
                raise DivergenceError(step, loss)
            losses.append(loss)
            hits += int(pred == bank.label)
            step += 1
        manifest[f"epoch{epoch}_loss"] = f"{np.mean(losses):.6f}"
        manifest[f"epoch{epoch}_acc"] = f"{hits / len(banks):.4f}"
    manifest["steps"] = step
    manifest["wall_clock_s"] = f"{time.perf_counter() - t0:.3f}"
    return manifest


def config_echo(cfg: TrainConfig) -> dict:
    return {
        "instances_per_graph": cfg.instances_per_graph,
        "lr": cfg.lr,
        "epochs": cfg.epochs,
        "accum_steps": cfg.accum_steps,
        "seed": cfg.seed,
        "patch_source": cfg.patch_source,
        "scales": ",".join(str(s) for s in cfg.scales),
        "random_quotas": ",".join(str(q) for q in cfg.random_quotas),
    }


# ---------------------------------------------------------- feature cache


CACHE_MAGIC = b"MSML"
CACHE_VERSION = 1


@dataclass
class FeatureCache:
    rows: np.ndarray                       # (count, dim) float32
    sidecar: list[tuple[str, int, int, int, int]]  # slide_id, x, y, d_k, scale_code

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2:
            raise CacheFormatError(f"rows must be 2-D, got shape {self.rows.shape}")
        if self.rows.shape[0] != len(self.sidecar):
            raise CacheFormatError(
                f"{self.rows.shape[0]} rows vs {len(self.sidecar)} sidecar entries"
            )

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def by_slide(self) -> dict[str, np.ndarray]:
        out: dict[str, list[int]] = {}
        for i, entry in enumerate(self.sidecar):
            out.setdefault(entry[0], []).append(i)
        return {k: np.asarray(v, dtype=np.int64) for k, v in out.items()}


def cache_features(banks: list[SlideBank], model: Model,
                   source: str = "lesion_only",
                   scales: tuple[int, ...] = SCALE_SIDES) -> FeatureCache:
    """Inference-mode extraction (no graph); rows follow slide id then
    filter order. Values are stored as 32-bit floats (relative downcast
    error bounded by 2**-24)."""
    rows = []
    sidecar = []
    for bank in sorted(banks, key=lambda b: b.ident):
        idx = bank.idx_for(source, scales)
        if len(idx) == 0:
            continue
        feats = model.encoder.extract_batch(bank.patches[idx].astype(np.float64))
        rows.append(feats.data.astype(np.float32))
        for i in idx:
            r = bank.refs[i]
            sidecar.append((bank.ident, r.x, r.y, r.d_k, r.scale_code))
    dim = model.encoder_cfg.token_dim
    stacked = np.concatenate(rows, axis=0) if rows else np.zeros((0, dim), dtype=np.float32)
    return FeatureCache(stacked, sidecar)


def write_cache(cache: FeatureCache, path: Path) -> None:
    path = Path(path)
    header = CACHE_MAGIC + struct.pack("<III", CACHE_VERSION, cache.rows.shape[0], cache.rows.shape[1])
    path.write_bytes(header + np.ascontiguousarray(cache.rows, dtype="<f4").tobytes())
    with open(sidecar_path(path), "w") as fh:
        for ident, x, y, d_k, code in cache.sidecar:
            fh.write(f"{ident} {x} {y} {d_k} {code}\n")


def sidecar_path(path: Path) -> Path:
    return Path(str(path) + ".sidecar")


def read_cache(path: Path) -> FeatureCache:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != CACHE_MAGIC:
        raise CacheFormatError(f"bad magic {buf[:4]!r}")
    version, count, dim = struct.unpack_from("<III", buf, 4)
    if version != CACHE_VERSION:
        raise CacheFormatError(f"unsupported version {version}")
    need = count * dim * 4
    data = buf[16:]
    if len(data) != need:
        raise CacheFormatError(f"raster size {len(data)} != expected {need}")
    rows = np.frombuffer(data, dtype="<f4").reshape(count, dim).astype(np.float32)
    sidecar = []
    for line in sidecar_path(path).read_text().splitlines():
        if not line.strip():
            continue
        ident, x, y, d_k, code = line.split()
        sidecar.append((ident, int(x), int(y), int(d_k), int(code)))
    return FeatureCache(rows, sidecar)


# -------------------------------------------------------- stage-2 training


def train_mil_stage2(cache: FeatureCache, labels: dict[str, int], model: Model,
                     cfg: TrainConfig, slide_dims: dict[str, tuple[int, int]] | None = None) -> dict:
    """Per-slide full-bag training of the attention network only. Features
    are graph constants, so extractor gradients are zero by construction."""
    if cache.rows.shape[0] == 0:
        raise CacheFormatError("empty feature cache")
    t0 = time.perf_counter()
    groups = cache.by_slide()
    idents = sorted(groups)
    opt = nc.GradAccumSgd(model.mil_params(), lr=cfg.lr, accum_steps=cfg.accum_steps)
    root = nc.Rng(cfg.seed)
    manifest: dict = {"stage": "mil_only", "slides": len(idents)}
    manifest.update(config_echo(cfg))
    for epoch in range(cfg.epochs):
        order = root.child(100 + epoch).permutation(len(idents))
        losses, hits = [], 0
        for pos in order:
            ident = idents[pos]
            idx = groups[ident]
            entries = [cache.sidecar[i] for i in idx]
            coords = np.asarray([(e[1], e[2]) for e in entries], dtype=np.int64)
            scales = np.asarray([e[4] for e in entries], dtype=np.int64)
            dims = (slide_dims or {}).get(ident, (4096, 4096))
            feats = nc.tensor(cache.rows[idx].astype(np.float64))
            bag = Bag(feats, coords, scales, dims[0], dims[1], label=labels[ident])
            opt.zero_grad()
            with nc.record() as graph:
                logits = model.mil.forward_logits(bag)
                loss = nc.cross_entropy(logits, labels[ident])
            graph.backward(loss)
            opt.accumulate()
            if opt.ready:
                opt.step()
            losses.append(loss.item())
            hits += int(np.argmax(logits.data) == labels[ident])
        manifest[f"epoch{epoch}_loss"] = f"{np.mean(losses):.6f}"
        manifest[f"epoch{epoch}_acc"] = f"{hits / len(idents):.4f}"
    manifest["wall_clock_s"] = f"{time.perf_counter() - t0:.3f}"
    return manifest


# ---------------------------------------------------------------- inference


@dataclass
class InferResult:
    predicted: int
    probabilities: np.ndarray
    patch_count: int
    wall_ms: float
    fallback: bool = False


def infer_bank(bank: SlideBank, model: Model, source: str = "lesion_only",
               scales: tuple[int, ...] = SCALE_SIDES) -> InferResult:
    """Filter -> extract -> fuse, no graph recording. An empty filtered set
    falls back to the non-background grid with a flag."""
    t0 = time.perf_counter()
    idx = bank.idx_for(source, scales)
    fallback = False
    if len(idx) == 0:
        idx = bank.idx_for("all_nonbackground", scales)
        fallback = True
        if len(idx) == 0:
            raise EmptySlideError(f"slide {bank.ident} has no usable patches")
    bag = bag_from_bank(bank, idx, model)
    probs = model.mil.forward(bag).data[0]
    wall = (time.perf_counter() - t0) * 1000.0
    return InferResult(int(np.argmax(probs)), probs, len(idx), wall, fallback)


def infer(record: SlideRecord, provider: MaskProvider, model: Model,
          source: str = "lesion_only", scales: tuple[int, ...] = SCALE_SIDES) -> InferResult:
    """Single-slide path from raw pixels (bank built on the fly, timed)."""
    t0 = time.perf_counter()
    bank = build_bank(record, provider, model.encoder_cfg.input_side)
    result = infer_bank(bank, model, source, scales)
    result.wall_ms = (time.perf_counter() - t0) * 1000.0
    return result


# ---------------------------------------------------------------- protocol


def oracle_provider(dataset: Dataset):
    """Ground-truth masks for every slide (regenerated from slide seeds when
    the dataset lives on disk)."""
    from .sffm import OracleMaskProvider
    from .synthwsi import generate_mask

    masks = {}
    for rec in dataset.slides:
        masks[rec.ident] = rec._mask if rec._mask is not None else generate_mask(dataset.spec, rec.seed)
    return OracleMaskProvider(masks)


def train_full(banks: list[SlideBank], encoder_cfg: EncoderConfig, mil_cfg: IaamConfig,
               cfg: TrainConfig, model_seed: int,
               stage2_epochs: int = 0, stage2_lr: float | None = None) -> tuple[Model, dict]:
    """Joint training, then optional cached-feature refinement of the
    attention network (the two-stage protocol)."""
    model = build_model(encoder_cfg, mil_cfg, model_seed)
    manifest = train_e2e(banks, model, cfg)
    if stage2_epochs > 0:
        cache = cache_features(banks, model, scales=cfg.scales)
        labels = {b.ident: b.label for b in banks}
        dims = {b.ident: (b.width, b.height) for b in banks}
        s2_cfg = replace(cfg, epochs=stage2_epochs, stage="mil_only",
                         lr=cfg.lr if stage2_lr is None else stage2_lr)
        s2_manifest = train_mil_stage2(cache, labels, model, s2_cfg, dims)
        manifest.update({f"stage2_{k}": v for k, v in s2_manifest.items()})
    return model, manifest
