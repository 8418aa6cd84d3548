import numpy as np
import pytest

from dpcnet import inference
from dpcnet.inference import axis_origins, hit_counts, plan_windows, predict_volume
from dpcnet.io import Volume
from dpcnet.model import ModelConfig, build, dpcnet_forward
from dpcnet.tensor import Tensor, no_grad


@pytest.fixture(scope="module")
def model():
    return build(ModelConfig(levels=2, base_channels=4, num_classes=3), seed=0, dtype=np.float64)


def vol(shape, seed=0):
    return Volume(np.random.default_rng(seed).standard_normal(shape).astype(np.float32), (1.0, 1.0, 1.0), "normalized")


def test_axis_origins():
    assert axis_origins(128, 128) == [0]
    assert axis_origins(100, 128) == [0]
    assert axis_origins(192, 128) == [0, 64]
    assert axis_origins(200, 128) == [0, 64, 72]
    assert axis_origins(20, 8) == [0, 4, 8, 12]


@pytest.mark.parametrize("shape", [(192, 192, 192), (200, 150, 129), (40, 17, 33)])
def test_plan_covers_every_voxel(shape):
    plan = plan_windows(shape, (128, 128, 128) if shape[0] > 100 else (16, 16, 16))
    counts = hit_counts(plan)
    assert counts.min() >= 1
    assert all(o[k] + plan.patch_size[k] <= plan.padded_shape[k] for o in plan.origins for k in range(3))


def test_overlap_region_hit_twice():
    plan = plan_windows((192, 192, 192), (128, 128, 128))
    counts = hit_counts(plan)
    assert len(plan.origins) == 8
    assert np.all(counts[64:128, 64:128, 64:128] == 8)
    assert np.all(counts[64:128] >= 2)
    assert counts[0, 0, 0] == 1


def test_small_volume_is_padded():
    plan = plan_windows((10, 16, 3), (16, 16, 16))
    assert plan.padded_shape == (16, 16, 16) and plan.origins == [(0, 0, 0)]
    assert plan.pad == ((3, 3), (0, 0), (6, 7))
    with pytest.raises(ValueError):
        plan_windows((8, 8, 8), (8, 7, 8))


def test_single_window_matches_forward(model):
    v = vol((16, 16, 16))
    labels, probs = predict_volume(model, v, (16, 16, 16))
    with no_grad():
        direct = dpcnet_forward(model, Tensor(v.voxels[None].astype(np.float64))).final_probs.data
    np.testing.assert_allclose(probs, direct, atol=1e-7)
    assert np.array_equal(labels.labels, np.argmax(direct, 0))


def test_output_contract(model):
    v = vol((20, 11, 14), 1)
    labels, probs = predict_volume(model, v, (8, 8, 8))
    assert labels.shape == v.shape and labels.labels.dtype == np.uint8 and labels.spacing == v.spacing
    assert probs.shape == (3,) + v.shape and probs.dtype == np.float32
    np.testing.assert_allclose(probs.sum(0), 1, atol=1e-5)
    assert np.array_equal(labels.labels, np.argmax(probs, 0))


def test_window_order_does_not_matter(model, monkeypatch):
    v = vol((20, 12, 12), 2)
    _, a = predict_volume(model, v, (8, 8, 8))
    orig = inference.plan_windows

    def reversed_plan(*args):
        p = orig(*args)
        p.origins = p.origins[::-1]
        return p

    monkeypatch.setattr(inference, "plan_windows", reversed_plan)
    _, b = predict_volume(model, v, (8, 8, 8))
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-6)


def test_prediction_is_deterministic(model):
    v = vol((12, 12, 12), 3)
    a, pa = predict_volume(model, v, (8, 8, 8))
    b, pb = predict_volume(model, v, (8, 8, 8))
    assert a.labels.tobytes() == b.labels.tobytes() and pa.tobytes() == pb.tobytes()
