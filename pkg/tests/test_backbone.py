import numpy as np
import pytest

from msfpt.backbone import (FeatureVolume, backbone_forward, build_pyramid, diff_features,
                            extract_features, scale_features, scaled_size, to_canonical)
from msfpt.config import ScaleSet
from msfpt.errors import DimensionError, InputTooSmallError
from msfpt.nn import init_params
from msfpt.tensor import Tensor

from conftest import random_image, small_config


@pytest.fixture(scope="module")
def store():
    return init_params(small_config(), 11)


def test_pyramid_sizes_192(rng):
    pyr = build_pyramid(Tensor(random_image(rng, 192)))
    assert [p.shape[-1] for p in pyr] == [192, 96, 64, 384]
    assert [p.shape[-2] for p in pyr] == [192, 96, 64, 384]


def test_pyramid_scale1_is_input(rng):
    img = Tensor(random_image(rng, 40))
    assert build_pyramid(img)[0].data.tobytes() == img.data.tobytes()


def test_pyramid_constant_image_stays_constant():
    img = Tensor(np.full((3, 50, 50), 0.3))
    for p in build_pyramid(img):
        assert np.all(p.data == 0.3)


def test_pyramid_too_small():
    with pytest.raises(InputTooSmallError):
        build_pyramid(Tensor(np.zeros((3, 25, 25))))  # 25/3 rounds to 8
    assert build_pyramid(Tensor(np.zeros((3, 26, 26))))[2].shape == (3, 9, 9)


def test_scaled_size_rounding():
    assert scaled_size(100, 3) == 33
    assert scaled_size(50, 3) == 17
    assert scaled_size(45, 2) == 23
    assert scaled_size(21, 0.5) == 42


def test_feature_channels_and_spatial(store, rng):
    f = extract_features(Tensor(random_image(rng, 192).astype(np.float32)), store)
    assert f.shape == (6 * 4, 24, 24)
    assert f.channels == small_config().channels == 24


def test_paper_preset_channels():
    from msfpt.config import ModelConfig
    assert ModelConfig.paper().channels == 1920


def test_identical_images_identical_volumes(store, rng):
    img = random_image(rng, 48).astype(np.float32)
    a = extract_features(Tensor(img), store)
    b = extract_features(Tensor(img.copy()), store)
    assert a.data.data.tobytes() == b.data.data.tobytes()


def test_backbone_is_frozen(store, rng):
    out = backbone_forward(Tensor(random_image(rng, 32).astype(np.float32)), store)
    assert not out.requires_grad


def test_batched_backbone_matches_single(store, rng):
    imgs = random_image(rng, 32, batch=2).astype(np.float32)
    batched = backbone_forward(Tensor(imgs), store).data
    for i in range(2):
        np.testing.assert_allclose(batched[i], backbone_forward(Tensor(imgs[i]), store).data, rtol=1e-6, atol=1e-7)


def vol(rng, shape=(5, 6, 6), s=1.0):
    return FeatureVolume(Tensor(rng.standard_normal(shape)), s)


def test_diff_identical_is_zero(rng):
    a = vol(rng)
    assert np.all(diff_features(a, a).data.data == 0)


def test_diff_against_zero(rng):
    a = vol(rng)
    z = FeatureVolume(Tensor(np.zeros(a.shape)), 1.0)
    assert diff_features(a, z).data.data.tobytes() == a.data.data.tobytes()


def test_diff_antisymmetric(rng):
    a, b = vol(rng), vol(rng)
    np.testing.assert_array_equal(diff_features(a, b).data.data, -diff_features(b, a).data.data)


def test_diff_mismatch(rng):
    with pytest.raises(DimensionError):
        diff_features(vol(rng), vol(rng, (5, 6, 7)))
    with pytest.raises(DimensionError):
        diff_features(vol(rng), vol(rng, s=2))


def test_canonical_from_33(rng):
    f = FeatureVolume(Tensor(rng.random((1920, 33, 33)).astype(np.float32)), 0.5)
    assert to_canonical(f).shape == (1920, 21, 21)


def test_canonical_identity_at_target(rng):
    f = FeatureVolume(Tensor(rng.random((1920, 21, 21)).astype(np.float32)), 1)
    assert to_canonical(f).data.data.tobytes() == f.data.data.tobytes()


def test_canonical_from_9_stays_in_channel_range(rng):
    x = rng.standard_normal((1920, 9, 9)).astype(np.float32)
    out = to_canonical(FeatureVolume(Tensor(x), 3)).data.data
    assert out.shape == (1920, 21, 21)
    lo = x.min(axis=(1, 2))[:, None, None]
    hi = x.max(axis=(1, 2))[:, None, None]
    assert np.all(out >= lo) and np.all(out <= hi)


def test_scale_features_shapes(store, rng):
    ref = Tensor(random_image(rng, 40).astype(np.float32))
    for s in ScaleSet().scales:
        f_ref, f_diff = scale_features(ref, ref, s, store)
        assert f_ref.shape == f_diff.shape == (24, 4, 4)
        assert np.all(f_diff.data.data == 0)
