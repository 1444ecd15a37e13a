import csv

import numpy as np
import pytest

from mcmri import kspace
from mcmri.autodiff import Parameter, Tape
from mcmri.imaging import AugmentationPolicy, make_phantom_dataset
from mcmri.models import ModelSpec, build_model, forward_reconstruct, load_checkpoint
from mcmri.training import (
    AdamState,
    NumericalAbort,
    TrainConfig,
    _batch_stream,
    adam_step,
    simulate,
    train,
    xavier_init,
)


def test_xavier_variance_and_support():
    model = xavier_init(build_model(ModelSpec("DFSN", 2), np.float64), 3)
    w = model.params["block1.conv1.weight"].data
    assert w.shape == (32, 32, 3, 3)
    fan = 32 * 9 + 32 * 9
    a = np.sqrt(6 / fan)
    assert np.all(np.abs(w) < a)
    assert abs(w.var() / (2 / fan) - 1) < 0.1
    assert np.all(model.params["block1.conv1.bias"].data == 0)


def test_xavier_deterministic():
    a = xavier_init(build_model(ModelSpec("DISN", 2)), 5).state_dict()
    b = xavier_init(build_model(ModelSpec("DISN", 2)), 5).state_dict()
    c = xavier_init(build_model(ModelSpec("DISN", 2)), 6).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not all(np.array_equal(a[k], c[k]) for k in a)


# ------------------------------------------------------------------ adam


def _param(value):
    return Parameter(np.array(value, dtype=np.float64), "p")


def test_adam_zero_grad_no_change():
    p = _param([1.0, -2.0])
    st = AdamState([p])
    adam_step([p], st, TrainConfig())
    assert np.array_equal(p.data, [1.0, -2.0]) and st.t == 1


def test_adam_first_step_by_hand():
    cfg = TrainConfig(lr=0.01)
    p = _param([0.0, 0.0, 0.0])
    g = np.array([0.3, -2.0, 1e-9])
    p.grad[...] = g
    adam_step([p], AdamState([p]), cfg)
    # m_hat = g, v_hat = g^2
    np.testing.assert_allclose(p.data, -cfg.lr * g / (np.abs(g) + cfg.epsilon), rtol=1e-12)


def test_adam_constant_gradient_step_tends_to_lr():
    cfg = TrainConfig(lr=1e-3)
    p = _param([0.0])
    st = AdamState([p])
    for _ in range(2000):
        before = p.data.copy()
        p.grad[...] = 0.7
        adam_step([p], st, cfg)
    assert abs(abs(before - p.data)[0] - cfg.lr) < 1e-9


def test_adam_shape_mismatch():
    p = _param([0.0, 1.0])
    st = AdamState([p])
    p.grad = np.zeros(3)
    with pytest.raises(ValueError):
        adam_step([p], st, TrainConfig())


# ------------------------------------------------------------------ loop


@pytest.fixture(scope="module")
def small():
    ds = make_phantom_dataset(8, 16, 16, 3, seed=2, n_test=2)
    masks = [kspace.make_mask("cartesian1d", 16, 16, 0.4, 0.1, seed=s) for s in (1, 2, 3)]
    return ds, masks


def _fresh(kind="DFSN", blocks=1):
    return xavier_init(build_model(ModelSpec(kind, blocks)), 0)


def test_lr_zero_leaves_parameters(small):
    ds, masks = small
    model = _fresh()
    before = model.state_dict()
    res = train(model, ds, masks, TrainConfig(iterations=1, lr=0.0))
    assert all(np.array_equal(before[k], v) for k, v in model.state_dict().items())
    # the recorded loss is the loss at the initial weights
    fresh = _fresh()
    cfg = TrainConfig(iterations=1, lr=0.0)
    assert train(fresh, ds, masks, cfg).losses == res.losses


def test_training_deterministic(small, tmp_path):
    ds, masks = small
    cfg = TrainConfig(iterations=6, seed=3)
    a = train(_fresh("DISN", 2), ds, masks, cfg, out_dir=tmp_path / "a")
    b = train(_fresh("DISN", 2), ds, masks, cfg, out_dir=tmp_path / "b")
    assert a.losses == b.losses
    assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
    rows = list(csv.reader(open(tmp_path / "a" / "loss.csv")))
    assert rows[0] == ["iteration", "loss"] and len(rows) == 7


def test_checkpoint_schedule(small, tmp_path):
    ds, masks = small
    model = _fresh()
    train(model, ds, masks, TrainConfig(iterations=4, checkpoint_every=2), out_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.glob("*.ckp")) == ["checkpoint_000002.ckp", "checkpoint_000004.ckp"]
    back, extra = load_checkpoint(tmp_path / "checkpoint_000004.ckp")
    assert extra["iteration"] == 4
    assert all(np.array_equal(back.params[k].data, v) for k, v in model.state_dict().items())


def test_loss_decreases_short_run(small):
    ds, masks = small
    res = train(_fresh(), ds, masks, TrainConfig(iterations=40, lr=1e-3))
    assert np.mean(res.losses[-10:]) < np.mean(res.losses[:10])


def test_random_mask_mode(small):
    ds, masks = small
    factory = lambda rng: np.stack(
        [kspace.make_mask("cartesian1d", 16, 16, 0.4, 0.1, seed=int(rng.integers(1 << 30))).grid for _ in range(3)])
    cfg = TrainConfig(iterations=2, random_masks=True)
    res = train(_fresh(), ds, masks, cfg, mask_factory=factory)
    assert len(res.losses) == 2
    with pytest.raises(ValueError):
        train(_fresh(), ds, masks, cfg)


def test_errors(small):
    ds, masks = small
    with pytest.raises(ValueError):
        train(_fresh(), ds, masks[:2], TrainConfig(iterations=1))
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0).validate()
    bad = AugmentationPolicy(shift_max_px=5)
    with pytest.raises(ValueError):
        train(_fresh(), ds, masks, TrainConfig(iterations=1, augmentation=bad))


def test_non_finite_loss_aborts(small):
    ds, masks = small
    model = _fresh()
    model.params["block1.conv3.bias"].data[...] = np.nan
    with pytest.raises(NumericalAbort, match="iteration 1"):
        train(model, ds, masks, TrainConfig(iterations=3))


@pytest.mark.parametrize("kind", ["DIRN", "DFSN", "DISN"])
def test_every_block_receives_gradient(small, kind):
    ds, masks = small
    model = xavier_init(build_model(ModelSpec(kind, 3)), 1)
    for p in model.parameters():
        if p.name.endswith(".bias"):
            p.data += 0.01
    x = ds.stack()[:4]
    marr = np.stack([m.grid for m in masks])
    y, zf = simulate(x, marr)
    t = Tape()
    t.backward(t.mse_loss(forward_reconstruct(model, zf.astype(np.float32), y, marr, tape=t), x.astype(np.float32)))
    for p in model.parameters():
        assert np.linalg.norm(p.grad) > 0, p.name


def test_batch_stream_wraps_with_fresh_shuffles():
    rng = np.random.default_rng(0)
    stream = _batch_stream(5, 4, rng)
    seen = np.concatenate([next(stream) for _ in range(5)])
    assert len(seen) == 20
    for k in range(4):
        assert sorted(seen[5 * k:5 * k + 5]) == [0, 1, 2, 3, 4]
