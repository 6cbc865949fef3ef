import numpy as np
import pytest

from msmil.iaam import IaamConfig
from msmil.msfem import EncoderConfig
from msmil.pipeline import build_banks, build_model
from msmil.sffm import OracleMaskProvider
from msmil.synthwsi import SynthSpec, build_dataset, generate_wsi

TINY_SIDE = 32


def tiny_model_config():
    enc = EncoderConfig(input_side=TINY_SIDE, widths=(8, 12, 16), token_dim=24, depth=1, heads=2)
    mil = IaamConfig(dim=24, rank=6, queries=4, classes=4)
    return enc, mil


def fresh_tiny_model(seed=5):
    enc, mil = tiny_model_config()
    return build_model(enc, mil, seed=seed)


@pytest.fixture(scope="session")
def c4_spec():
    return SynthSpec()


@pytest.fixture(scope="session")
def tiny_dataset(c4_spec):
    ds = build_dataset(c4_spec, 4, seed=77)
    provider = OracleMaskProvider({r.ident: r.mask() for r in ds.slides})
    return ds, provider


@pytest.fixture(scope="session")
def tiny_banks(tiny_dataset):
    ds, provider = tiny_dataset
    return build_banks(ds, provider, TINY_SIDE)


@pytest.fixture(scope="session")
def c2_banks():
    """Six-slide two-class set; macro bands separate the classes (needs 5x)."""
    ds = build_dataset(SynthSpec(classes=2), 6, seed=66)
    provider = OracleMaskProvider({r.ident: r.mask() for r in ds.slides})
    return build_banks(ds, provider, TINY_SIDE)


@pytest.fixture(scope="session")
def c4_slides(c4_spec):
    """One generated slide per class, shared across the suite (generation is ~3 s each)."""
    out = {}
    for label in range(4):
        img, mask, _ = generate_wsi(c4_spec, label, 9000 + label)
        img.ident = f"fix_{label}"
        out[label] = (img, mask, label)
    return out


@pytest.fixture(scope="session")
def blank_image_4096():
    from msmil.synthwsi import PyramidImage

    return PyramidImage(np.full((4096, 4096, 3), 180, dtype=np.uint8), ident="blank")
