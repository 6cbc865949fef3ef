import numpy as np
import pytest

import msmil.numcore as nc
from msmil.encoding import sinusoid_table
from msmil.msfem import ConfigError, EncoderConfig, FeatureVec, PatchEncoder, resize_patch, tokenize
from msmil.params import ParamStore
from msmil.sffm import PatchRef


def tiny_encoder(seed=1, **kw):
    cfg = EncoderConfig(input_side=kw.pop("input_side", 16), widths=kw.pop("widths", (6, 8)),
                        token_dim=kw.pop("token_dim", 12), depth=kw.pop("depth", 1),
                        heads=kw.pop("heads", 2), **kw)
    store = ParamStore()
    return PatchEncoder(cfg, store, nc.Rng(seed)), store


# ------------------------------------------------------------- resize_patch


def test_resize_identity():
    patch = np.arange(27.0).reshape(3, 3, 3)
    out = resize_patch(patch, 3)
    np.testing.assert_array_equal(out, patch)


def test_resize_constant_patch():
    patch = np.full((512, 512, 3), 33, dtype=np.uint8)
    out = resize_patch(patch, 64)
    assert out.shape == (64, 64, 3)
    np.testing.assert_allclose(out, 33.0)


def test_resize_checkerboard_to_single_pixel():
    patch = np.zeros((2, 2, 3))
    patch[0, 0] = patch[1, 1] = 255.0
    out = resize_patch(patch, 1)
    np.testing.assert_allclose(out, 127.5)


def test_resize_grow_is_bilinear_smooth():
    patch = np.zeros((2, 2, 3))
    patch[:, 1] = 100.0
    out = resize_patch(patch, 4)
    assert out.shape == (4, 4, 3)
    assert (np.diff(out[:, :, 0], axis=1) >= 0).all()


# --------------------------------------------------------------- backbone


def test_backbone_zero_input_zero_map():
    enc, _ = tiny_encoder()
    out = enc.backbone(np.zeros((16, 16, 3)))
    np.testing.assert_array_equal(out, np.zeros_like(out))
    assert out.shape == (4, 4, 8)


def test_backbone_translation_equivariance():
    """Shifting the input by the total stride shifts the map one cell (interior)."""
    cfg = EncoderConfig(input_side=64, widths=(6, 8), token_dim=8, depth=0, heads=2)
    store = ParamStore()
    enc = PatchEncoder(cfg, store, nc.Rng(3))
    stride = 4  # two stride-2 stages
    rng = nc.Rng(9)
    base = (rng.uniform(64 * 64 * 3) * 255).reshape(64, 64, 3)
    shifted = np.zeros_like(base)
    shifted[:, stride:] = base[:, :-stride]
    map_a = enc.backbone(base)
    map_b = enc.backbone(shifted)
    # interior: drop cells whose receptive field touches the pad or the seam
    np.testing.assert_allclose(map_b[2:-2, 3:-2], map_a[2:-2, 2:-3], atol=1e-12)


def test_backbone_gradient_check():
    enc, store = tiny_encoder(seed=5)
    rng = nc.Rng(17)
    patch = (rng.uniform(16 * 16 * 3) * 255).reshape(1, 16, 16, 3)

    def f():
        x = nc.tensor(patch.reshape(16 * 16, 3) / 255.0)
        return nc.sum_all(enc.conv_trunk(x, 1))

    conv_params = [t for n, t in store.items() if ".conv" in n]
    assert nc.finite_diff_check(f, conv_params) < 1e-4


def test_config_error_on_bad_stride_divisibility():
    with pytest.raises(ConfigError):
        EncoderConfig(input_side=50, widths=(4, 8), token_dim=8, depth=1, heads=2)


# ---------------------------------------------------------------- tokenize


def test_tokenize_row_major_order():
    fmap = np.arange(2 * 2 * 3.0).reshape(2, 2, 3)
    seq, _ = tokenize(fmap)
    np.testing.assert_array_equal(seq[0], fmap[0, 0])
    np.testing.assert_array_equal(seq[1], fmap[0, 1])
    np.testing.assert_array_equal(seq[2], fmap[1, 0])
    np.testing.assert_array_equal(seq[3], fmap[1, 1])


def test_position_encoding_base_pattern():
    table = sinusoid_table(4, 6)
    np.testing.assert_allclose(table[0], [0.0, 1.0, 0.0, 1.0, 0.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(table[1, 0], np.sin(1.0), atol=1e-15)
    np.testing.assert_allclose(table[1, 1], np.cos(1.0), atol=1e-15)


def test_tokenize_purity():
    fmap = np.random.default_rng(0).random((3, 3, 5))
    a, ea = tokenize(fmap)
    b, eb = tokenize(fmap)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(ea, eb)


# ------------------------------------------------------------------ encode


def test_encode_depth_zero_returns_projected_cls_token():
    enc, store = tiny_encoder(depth=0)
    patch = np.full((16, 16, 3), 55.0)
    out = enc.extract(patch)
    # depth 0: tokens never mix with the classification token, so the output
    # is the (normalized) learnable token's projection, input-independent
    cls = store["enc.cls"].data[0]
    normed = (cls - cls.mean()) / np.sqrt(cls.var() + 1e-5)
    expect = normed @ store["enc.proj.w"].data + store["enc.proj.b"].data
    np.testing.assert_allclose(out.values, expect[0], atol=1e-12)
    other = enc.extract(np.full((16, 16, 3), 200.0))
    np.testing.assert_allclose(out.values, other.values, atol=1e-15)


def test_encode_gradient_check_full():
    enc, store = tiny_encoder(seed=11)
    rng = nc.Rng(23)
    patches = (rng.uniform(2 * 16 * 16 * 3) * 255).reshape(2, 16, 16, 3)

    def f():
        return nc.sum_all(enc.extract_batch(patches))

    assert nc.finite_diff_check(f, enc.parameters()) < 1e-4


def test_encode_token_order_matters():
    """Position encoding is active: permuting the token grid changes the output."""
    enc, _ = tiny_encoder(seed=2)
    rng = nc.Rng(31)
    patch = (rng.uniform(16 * 16 * 3) * 255).reshape(16, 16, 3)
    flipped = patch[::-1].copy()
    a = enc.extract(patch).values
    b = enc.extract(flipped).values
    assert np.abs(a - b).max() > 1e-8


# ----------------------------------------------------------------- extract


def test_extract_ignores_scale_code():
    enc, _ = tiny_encoder(seed=7)
    rng = nc.Rng(41)
    patch = (rng.uniform(16 * 16 * 3) * 255).reshape(16, 16, 3)
    a = enc.extract(patch, origin=PatchRef(256, 256, 512, 0))
    b = enc.extract(patch, origin=PatchRef(256, 256, 512, 2))
    np.testing.assert_array_equal(a.values, b.values)


def test_extract_deterministic():
    enc, _ = tiny_encoder(seed=7)
    patch = np.full((32, 32, 3), 90.0)
    a = enc.extract(patch).values
    b = enc.extract(patch).values
    np.testing.assert_array_equal(a, b)


def test_extract_output_shape_and_finiteness():
    enc, _ = tiny_encoder(seed=8)
    rng = nc.Rng(43)
    patch = (rng.uniform(48 * 48 * 3) * 255).reshape(48, 48, 3)
    fv = enc.extract(patch)
    assert fv.values.shape == (12,)
    assert np.isfinite(fv.values).all()


def test_extract_batch_matches_single(c4_slides):
    enc, _ = tiny_encoder(seed=9)
    img, _, _ = c4_slides[0]
    patches = np.stack([
        resize_patch(img.base[0:512, 0:512], 16),
        resize_patch(img.base[1024:3072, 1024:3072], 16),
    ])
    batched = enc.extract_batch(patches).data
    for i in range(2):
        single = enc.extract_batch(patches[i:i + 1]).data[0]
        np.testing.assert_allclose(batched[i], single, atol=1e-12)


def test_feature_vec_rejects_non_finite():
    with pytest.raises(ValueError):
        FeatureVec(np.array([1.0, np.nan]))
