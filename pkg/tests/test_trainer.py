import csv
import json
import struct

import numpy as np
import pytest

from dpcnet.data import preprocess_pair, synth_phantom
from dpcnet.model import ModelConfig, build
from dpcnet.tensor import Tensor
from dpcnet.trainer import (
    CKPT_MAGIC,
    LOG_COLUMNS,
    AdamState,
    Case,
    CheckpointError,
    NonFiniteError,
    TrainConfig,
    TrainState,
    adam_step,
    batch_loss_and_grads,
    load_checkpoint,
    save_checkpoint,
    train,
)

SMALL = ModelConfig(levels=2, base_channels=4, num_classes=3)


@pytest.fixture(scope="module")
def cases():
    out = []
    for i in range(2):
        v, l = preprocess_pair(*synth_phantom([7, i], (32, 32, 32)))
        out.append(Case(v, l, str(i)))
    return {"train": out[:1], "val": out[1:]}


def quick_cfg(**kw):
    base = dict(learning_rate=1e-3, epochs=2, batch_size=1, iterations_per_epoch=2, patch_size=(8, 8, 8), augment=False, val_patches=1)
    base.update(kw)
    return TrainConfig(**base)


# Adam ---------------------------------------------------------------------------


def test_adam_minimizes_quadratic():
    x = {"x": Tensor(np.array([5.0]))}
    st = AdamState.zeros_like(x)
    for _ in range(200):
        adam_step(x, {"x": 2 * x["x"].data}, st, 0.1)
    assert abs(x["x"].data[0]) < 1e-2 and st.t == 200


def test_adam_first_step_is_lr_times_sign():
    x = {"a": Tensor(np.array([1.0, -2.0, 3.0]))}
    st = AdamState.zeros_like(x)
    adam_step(x, {"a": np.array([0.3, -7.0, 0.0])}, st, 0.01)
    np.testing.assert_allclose(x["a"].data, [0.99, -1.99, 3.0], rtol=0, atol=1e-9)


def test_adam_zero_gradient_leaves_params():
    x = {"a": Tensor(np.arange(4.0))}
    st = AdamState.zeros_like(x)
    for _ in range(3):
        adam_step(x, {"a": np.zeros(4)}, st, 1.0)
    assert np.array_equal(x["a"].data, np.arange(4.0))


def test_adam_rejects_non_finite_without_side_effects():
    x = {"w": Tensor(np.ones(3)), "b": Tensor(np.zeros(2))}
    st = AdamState.zeros_like(x)
    with pytest.raises(NonFiniteError, match="b"):
        adam_step(x, {"w": np.ones(3), "b": np.array([0.0, np.nan])}, st, 0.1)
    assert st.t == 0 and np.all(x["w"].data == 1) and not st.m["w"].any()
    with pytest.raises(ValueError):
        adam_step(x, {"w": np.ones(4), "b": np.zeros(2)}, st, 0.1)


def test_train_config_validation():
    for kw in (dict(learning_rate=-1), dict(epochs=0), dict(foreground_fraction=2), dict(patch_size=(8, 8))):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


# checkpoints ----------------------------------------------------------------------


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    m = build(SMALL, seed=1)
    st = TrainState(AdamState.zeros_like(m.params), epoch=3, iteration=12, extra={"k": [1, 2]})
    for a in st.adam.m.values():
        a += 0.5
    save_checkpoint(m, st, tmp_path / "a.dpck")
    m2, st2 = load_checkpoint(tmp_path / "a.dpck")
    assert m2.config == SMALL and (st2.epoch, st2.iteration, st2.extra) == (3, 12, {"k": [1, 2]})
    assert all(np.array_equal(m[k].data, m2[k].data) for k in m.params)
    save_checkpoint(m2, st2, tmp_path / "b.dpck")
    assert (tmp_path / "a.dpck").read_bytes() == (tmp_path / "b.dpck").read_bytes()
    assert (tmp_path / "a.dpck").read_bytes().startswith(CKPT_MAGIC)
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_config_mismatch_names_parameter(tmp_path):
    m = build(SMALL, seed=1)
    save_checkpoint(m, TrainState(AdamState.zeros_like(m.params)), tmp_path / "a.dpck")
    with pytest.raises(CheckpointError, match=r"pfe\."):
        load_checkpoint(tmp_path / "a.dpck", ModelConfig(levels=2, base_channels=8, num_classes=3))


def test_checkpoint_corruption(tmp_path):
    m = build(SMALL, seed=1)
    save_checkpoint(m, TrainState(AdamState.zeros_like(m.params)), tmp_path / "a.dpck")
    buf = (tmp_path / "a.dpck").read_bytes()
    (tmp_path / "trunc.dpck").write_bytes(buf[:-4])
    (tmp_path / "magic.dpck").write_bytes(b"DPCK2\n" + buf[6:])
    for name in ("trunc", "magic"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / f"{name}.dpck")
    (n,) = struct.unpack("<I", buf[6:10])
    meta = json.loads(buf[10 : 10 + n])
    assert {t["kind"] for t in meta["tensors"]} == {"param", "adam_m", "adam_v"}


# training loop --------------------------------------------------------------------


def test_same_seed_same_losses(cases):
    runs = []
    for _ in range(2):
        _, recs = train(build(SMALL, seed=0), cases, quick_cfg())
        runs.append([l for r in recs for l in r.iteration_losses])
    assert runs[0] == runs[1] and len(runs[0]) == 4


def test_resume_matches_uninterrupted(cases, tmp_path):
    cfg = quick_cfg(epochs=3)
    ref_model = build(SMALL, seed=0)
    _, ref = train(ref_model, cases, cfg)
    m = build(SMALL, seed=0)
    train(m, cases, cfg, out_dir=tmp_path, epochs=1)
    m2, st = load_checkpoint(tmp_path / "last.dpck")
    st, rest = train(m2, cases, cfg, state=st)
    assert st.epoch == 3 and st.iteration == 6
    assert [r.iteration_losses for r in rest] == [r.iteration_losses for r in ref[1:]]
    assert all(np.array_equal(m2[k].data, ref_model[k].data) for k in m2.params)


def test_zero_lr_keeps_loss_constant(cases):
    from dpcnet.data import sample_patch

    m = build(SMALL, seed=0)
    c = cases["train"][0]
    patch = sample_patch(np.random.default_rng(0), c.volume, c.labels, (8, 8, 8))
    st = AdamState.zeros_like(m.params)
    seen = []
    for _ in range(3):
        loss, g = batch_loss_and_grads(m, [patch])
        adam_step(m.params, g, st, 0.0)
        seen.append(loss)
    assert seen[0] == seen[1] == seen[2]


def test_training_reduces_loss_on_fixed_patch(cases):
    from dpcnet.data import sample_patch

    m = build(SMALL, seed=0)
    c = cases["train"][0]
    patch = sample_patch(np.random.default_rng(1), c.volume, c.labels, (8, 8, 8), foreground_fraction=1.0)
    st = AdamState.zeros_like(m.params)
    first = None
    for _ in range(15):
        loss, g = batch_loss_and_grads(m, [patch])
        first = loss if first is None else first
        adam_step(m.params, g, st, 1e-2)
    assert loss < first


def test_log_and_checkpoints_written(cases, tmp_path):
    train(build(SMALL, seed=0), cases, quick_cfg(), out_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_0001.dpck", "epoch_0002.dpck", "last.dpck", "train_log.csv"]
    with open(tmp_path / "train_log.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == LOG_COLUMNS and [r[:2] for r in rows[1:]] == [["1", "2"], ["2", "4"]]
    assert all(float(x) >= 0 for x in rows[1][2:])


def test_log_na_without_validation(cases, tmp_path):
    train(build(SMALL, seed=0), {"train": cases["train"]}, quick_cfg(epochs=1), out_dir=tmp_path)
    rows = list(csv.reader(open(tmp_path / "train_log.csv")))
    assert rows[1][3:] == ["NA", "NA", "NA"]


def test_non_finite_loss_raises_with_iteration(cases, monkeypatch):
    from dpcnet import trainer

    def bad(model, batch):
        raise FloatingPointError("overflow in forward")

    monkeypatch.setattr(trainer, "batch_loss_and_grads", bad)
    with pytest.raises(NonFiniteError, match="iteration 0"):
        train(build(SMALL, seed=0), cases, quick_cfg())


def test_missing_training_split(cases):
    with pytest.raises(ValueError):
        train(build(SMALL, seed=0), {"val": cases["val"]}, quick_cfg())


def test_fixed_patch_descent_is_monotone_for_most_seeds():
    from dpcnet.data import sample_patch

    v, l = preprocess_pair(*synth_phantom(3, (32, 32, 32)))
    monotone = 0
    for s in range(10):
        m = build(SMALL, seed=s)
        patch = sample_patch(np.random.default_rng(s), v, l, (16, 16, 16), foreground_fraction=1.0)
        st = AdamState.zeros_like(m.params)
        seq = []
        for _ in range(50):
            loss, g = batch_loss_and_grads(m, [patch])
            adam_step(m.params, g, st, 1e-4)
            seq.append(loss)
        monotone += all(b <= a for a, b in zip(seq, seq[1:]))
    assert monotone >= 9
