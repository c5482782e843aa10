from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from mixsup import losses as L
from mixsup.data import LabeledSample, derive_weak_dataset, synth_blob_dataset
from mixsup.errors import ConfigError, NonFiniteLoss
from mixsup.model import rotate90
from mixsup.trainer import (SGD, TrainConfig, TrainHistory, batch_loss_and_grad, learning_rate_at,
                            load_model, point_predictions, size_at, train, train_step)

SMALL = dict(stage_channels=(4, 8, 8, 8), fusion_channels=4, size_set=(32,), batch_size=2)


@pytest.fixture(scope="module")
def mixed_sets():
    dense = synth_blob_dataset(20, 32, 32, seed=7)
    kinds = ("pixel", "polygon", "box", "scribble", "point")
    return [(k, derive_weak_dataset(dense[4 * i:4 * i + 4], k, seed=1)) for i, k in enumerate(kinds)]


@pytest.fixture(scope="module")
def val_sets():
    return [("val", synth_blob_dataset(4, 32, 32, seed=99))]


class ProbeModel:
    """One scalar parameter w; logits = w * (first input channel)."""

    def __init__(self, w=0.3):
        self.config = SimpleNamespace(in_channels=3)
        self.params = {"w": np.array([w])}

    def forward(self, x, return_cache=False):
        logits = self.params["w"][0] * x[:, 0]
        return (logits, x[:, 0]) if return_cache else logits

    def backward(self, cache, dlogits):
        return {"w": np.array([(dlogits * cache).sum()])}


class IdentityModel:
    """Logits equal the first input channel; no parameters."""

    config = SimpleNamespace(in_channels=3)
    params: dict = {}

    def forward(self, x, return_cache=False):
        return (x[:, 0].copy(), None) if return_cache else x[:, 0].copy()


def _pixel_batch(n=2, size=8, seed=0):
    rng = np.random.default_rng(seed)
    return [LabeledSample(rng.random((size, size, 3)), "pixel",
                          (rng.random((size, size)) < 0.5).astype(np.uint8)) for _ in range(n)]


# -- config ----------------------------------------------------------------------

def test_config_validation():
    for bad in (dict(learning_rate=0.0), dict(learning_rate=-1), dict(momentum=1.0),
                dict(iterations=0), dict(size_set=(60,)), dict(lr_schedule="cosine"),
                dict(norm_groups=3)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 0.1, "warmup": 5})
    cfg = TrainConfig(seed=4, size_set=(32, 48))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_defaults_follow_reported_settings():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.momentum, cfg.batch_size) == (0.05, 0.9, 4)
    assert cfg.lr_schedule == "constant" and cfg.grad_clip == 0.0


def test_lr_schedules():
    cfg = TrainConfig(iterations=100, lr_schedule="poly")
    assert learning_rate_at(cfg, 0) == 0.05
    assert learning_rate_at(cfg, 50) == pytest.approx(0.05 * 0.5 ** 0.9)
    assert learning_rate_at(TrainConfig(), 1999) == 0.05


# -- single steps ----------------------------------------------------------------

def test_zero_learning_rate_leaves_params_bit_exact():
    from mixsup.model import PyramidSegNet

    cfg = TrainConfig(**SMALL)
    model = PyramidSegNet(cfg.model_config())
    before = {k: v.copy() for k, v in model.params.items()}
    train_step(model, _pixel_batch(size=32), "pixel", SGD(0.9), cfg, lr=0.0)
    assert all(np.array_equal(before[k], model.params[k]) for k in before)


def test_plain_sgd_step_is_minus_lr_times_gradient():
    cfg = TrainConfig(momentum=0.0, learning_rate=0.1)
    batch = _pixel_batch()
    probe = ProbeModel(0.3)
    x = np.stack([s.image.transpose(2, 0, 1) for s in batch])
    logits, cache = probe.forward(x, return_cache=True)
    _, g, _ = batch_loss_and_grad("pixel", logits, [s.payload for s in batch], cfg)
    grad = probe.backward(cache, g)["w"][0]
    train_step(probe, batch, "pixel", SGD(0.0), cfg)
    assert probe.params["w"][0] == 0.3 - 0.1 * grad
    assert grad != 0.0


def test_momentum_buffer():
    params = {"w": np.array([1.0])}
    opt = SGD(0.5)
    opt.step(params, {"w": np.array([2.0])}, 0.1)
    opt.step(params, {"w": np.array([2.0])}, 0.1)
    # v1 = 2, v2 = 0.5 * 2 + 2 = 3
    assert params["w"][0] == pytest.approx(1.0 - 0.1 * 2 - 0.1 * 3)


def test_routing_zeroes_inactive_kinds(mixed_sets):
    from mixsup.model import PyramidSegNet

    cfg = TrainConfig(**SMALL)
    model = PyramidSegNet(cfg.model_config())
    opt = SGD(cfg.momentum)
    for kind, samples in mixed_sets:
        b = train_step(model, samples[:2], kind, opt, cfg)
        d = b.as_dict()
        field = L.loss_field(kind)
        assert d[field] > 0 and d["l_total"] == d[field]
        assert all(v == 0.0 for k, v in d.items() if k not in (field, "l_total"))


def test_rotation_bookkeeping_with_identity_stub():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(12, 40))
        x = rng.random((2, 3, n, n))
        logits, _, back, _ = point_predictions(IdentityModel(), x)
        assert np.array_equal(back, logits)
        assert L.consistency_loss(L.PredictionMap.from_logits(logits[0]),
                                  L.PredictionMap.from_logits(back[0])) == 0.0


def test_rotated_pass_gradient_matches_finite_difference():
    # The point loss depends on w through both passes; compare the full step gradient.
    rng = np.random.default_rng(1)
    image = rng.random((8, 8, 3))
    pts = L.PointLabel(((1, 2), (5, 5)), ((0, 7),))
    sample = LabeledSample(image, "point", pts)
    cfg = TrainConfig(momentum=0.0, learning_rate=1.0)

    class Asym(ProbeModel):
        def forward(self, x, return_cache=False):
            # a position-dependent map so the rotated pass differs from the plain one
            ramp = np.arange(x.shape[-1])[None, None, :] / x.shape[-1]
            base = x[:, 0] + ramp
            logits = self.params["w"][0] * base
            return (logits, base) if return_cache else logits

    def loss_at(w):
        m = Asym(w)
        x = np.stack([image.transpose(2, 0, 1)])
        lg, _, back, _ = point_predictions(m, x)
        v, _, _ = batch_loss_and_grad("point", lg, [pts], cfg, back)
        return v

    m = Asym(0.7)
    train_step(m, [sample], "point", SGD(0.0), cfg)
    analytic = 0.7 - m.params["w"][0]
    h = 1e-6
    fd = (loss_at(0.7 + h) - loss_at(0.7 - h)) / (2 * h)
    assert analytic == pytest.approx(fd, rel=1e-6)


def test_non_finite_loss_aborts():
    class Exploding(ProbeModel):
        def forward(self, x, return_cache=False):
            lg = np.full(x[:, 0].shape, np.nan)
            return (lg, x[:, 0]) if return_cache else lg

    with pytest.raises(NonFiniteLoss) as exc:
        train_step(Exploding(), _pixel_batch(), "pixel", SGD(0.0), TrainConfig(), step=17)
    assert exc.value.step == 17


def test_size_at_is_pure_and_in_set():
    cfg = TrainConfig(size_set=(64, 80, 96), seed=3)
    sizes = [size_at(cfg, t) for t in range(300)]
    assert set(sizes) == {64, 80, 96}
    assert sizes == [size_at(cfg, t) for t in range(300)]


# -- runs ------------------------------------------------------------------------

def test_train_writes_outputs_and_resumes(tmp_path, mixed_sets, val_sets):
    cfg = TrainConfig(iterations=10, **SMALL)
    first = train(cfg, mixed_sets, val_sets, out_dir=tmp_path)
    assert (tmp_path / "checkpoint.mixsup").is_file() and (tmp_path / "history.csv").is_file()
    assert len(first.history) == 10 and first.final_val_dice is not None

    more = replace(cfg, iterations=20)
    res = train(more, mixed_sets, val_sets, out_dir=tmp_path, resume=True)
    hist = TrainHistory.from_csv(tmp_path / "history.csv")
    assert [r.step for r in hist] == list(range(20))
    assert len(res.history) == 20

    # resuming reproduces an uninterrupted run exactly; only the extra
    # validation entry at the end of the first leg differs
    straight = train(more, mixed_sets, val_sets, out_dir=tmp_path / "straight")
    assert [(r.step, r.kind, r.losses) for r in straight.history] == \
        [(r.step, r.kind, r.losses) for r in hist]
    assert hist[9].val_dice is not None and straight.history[9].val_dice is None
    assert straight.final_val_dice == res.final_val_dice
    assert all(np.array_equal(straight.model.params[k], res.model.params[k]) for k in res.model.params)
    loaded = load_model(tmp_path / "checkpoint.mixsup")
    assert all(np.array_equal(loaded.params[k], res.model.params[k]) for k in loaded.params)


def test_resume_without_checkpoint(tmp_path, mixed_sets):
    with pytest.raises(FileNotFoundError):
        train(TrainConfig(iterations=2, **SMALL), mixed_sets, out_dir=tmp_path, resume=True)


def test_history_accounting_and_routing(mixed_sets):
    res = train(TrainConfig(iterations=25, **SMALL), mixed_sets)
    kinds = [r.kind for r in res.history]
    assert kinds == ["pixel", "polygon", "box", "scribble", "point"] * 5
    for r in res.history:
        b = r.losses
        assert b.l_total == sum(b.components())
    for start in range(0, 21):
        window = res.history[start:start + 5]
        assert {r.kind for r in window if r.losses.l_total > 0} == set(kinds)


def test_checkpoint_cadence(tmp_path, mixed_sets):
    cfg = TrainConfig(iterations=6, checkpoint_every=4, **SMALL)
    train(cfg, mixed_sets, out_dir=tmp_path)
    hist = TrainHistory.from_csv(tmp_path / "history.csv")
    assert len(hist) == 6


def test_unknown_kind_rejected(mixed_sets):
    with pytest.raises(ConfigError):
        train(TrainConfig(iterations=2, **SMALL), [("mesh", mixed_sets[0][1])])


def test_lambda_c_zero_skips_rotated_pass(mixed_sets):
    calls = []

    class Counting(ProbeModel):
        def forward(self, x, return_cache=False):
            calls.append(1)
            return super().forward(x, return_cache)

    cfg = TrainConfig(lambda_c=0.0)
    train_step(Counting(), mixed_sets[4][1][:2], "point", SGD(0.0), cfg)
    assert len(calls) == 1
    train_step(Counting(), mixed_sets[4][1][:2], "point", SGD(0.0), TrainConfig())
    assert len(calls) == 3


def test_rotate_helper_on_batches():
    x = np.arange(2 * 3 * 4 * 4, dtype=float).reshape(2, 3, 4, 4)
    assert np.array_equal(rotate90(rotate90(x, 1, axes=(-2, -1)), 3, axes=(-2, -1)), x)
