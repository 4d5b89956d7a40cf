import numpy as np
import pytest

from vidmil.backbone import FeatureCache, ResNet50Extractor, SyntheticProjector, build_extractor
from vidmil.errors import BackboneUnavailableError, ContractViolation


def test_black_frame_is_deterministic():
    frame = np.zeros((1, 16, 16, 3))
    a = SyntheticProjector(seed=5).extract(frame)
    b = SyntheticProjector(seed=5).extract(frame)
    assert a.shape == (1, 32) and np.array_equal(a, b)
    assert not np.array_equal(a, SyntheticProjector(seed=6).extract(frame))


def test_block_upsampled_frame_gives_same_features(rng):
    small = rng.random((1, 8, 8, 3))
    big = small.repeat(2, axis=1).repeat(2, axis=2)
    proj = SyntheticProjector(resize=(8, 8))
    assert np.abs(proj.extract(small) - proj.extract(big)).max() < 1e-6


def test_batch_invariance(rng):
    frames = rng.random((5, 12, 12, 3))
    proj = SyntheticProjector()
    full = proj.extract(frames)
    assert np.array_equal(full[2:3], proj.extract(frames[2:3]))


def test_non_finite_pixels_rejected():
    frames = np.zeros((2, 4, 4, 3))
    frames[0, 0, 0, 0] = np.nan
    with pytest.raises(ContractViolation):
        SyntheticProjector().extract(frames)


def test_resnet_output_shape():
    pytest.importorskip("torchvision")
    ext = ResNet50Extractor(weights="random", input_size=64)
    out = ext.extract(np.random.default_rng(0).random((30, 20, 20, 3)))
    assert out.shape == (30, 2048)


def test_resnet_bad_weights_raise(tmp_path):
    pytest.importorskip("torchvision")
    with pytest.raises(BackboneUnavailableError):
        ResNet50Extractor(weights=str(tmp_path / "missing.pt"))


def test_unknown_kind():
    with pytest.raises(ContractViolation):
        build_extractor("vgg")


def test_feature_cache(tmp_path, rng):
    frames = rng.random((3, 8, 8, 3))
    cache = FeatureCache(tmp_path)
    proj = SyntheticProjector()
    a = cache.get_or_compute("vid", frames, proj)
    assert cache.path_for("vid", proj).exists()
    b = cache.get_or_compute("vid", np.zeros_like(frames), proj)  # served from disk
    assert np.array_equal(a, b)
    assert cache.path_for("vid", SyntheticProjector(seed=1)) != cache.path_for("vid", proj)
