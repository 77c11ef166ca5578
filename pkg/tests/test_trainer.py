import dataclasses
import math

import numpy as np
import pytest

from cmvim import numerics as nx
from cmvim.config import ModelConfig, TrainConfig
from cmvim.data import SyntheticSpec, generate
from cmvim.numerics import Parameter
from cmvim.trainer import (AdamW, Checkpoint, CheckpointError, PretrainSession, TokenCache, TrainingError,
                           adamw_step, checkpoint_bytes, clip_grad_norm, cosine_lr, load_checkpoint, run_finetune,
                           run_stage1, run_stage2, save_checkpoint)

TINY = ModelConfig(volume_size=16, patch_size=8, d_model=16, depth=1, d_state=4, d_proj=16, dtype="float64")


@pytest.fixture(scope="module")
def tiny_data():
    return generate(SyntheticSpec(n_samples=12, volume_size=16, blob_radius=2.0, region_jitter=1.0, seed=2))


def tiny_train(**kw):
    base = dict(batch_size=4, epochs=2, seed=5)
    base.update(kw)
    return TrainConfig(**base)


def test_cosine_schedule_endpoints_and_midpoint():
    assert cosine_lr(0, 100, 0.005) == 0.005
    assert cosine_lr(50, 100, 0.005) == pytest.approx(0.0025, abs=1e-15)
    assert cosine_lr(100, 100, 0.005) == pytest.approx(0.0, abs=1e-18)
    lrs = [cosine_lr(s, 100, 1.0) for s in range(101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 1.0)


def test_adamw_first_steps_by_hand():
    p, g = np.array([1.0, -2.0]), np.array([0.5, 0.1])
    m, v = np.zeros(2), np.zeros(2)
    lr, wd = 0.01, 0.05
    adamw_step(p, g, m, v, 1, lr, wd)
    # bias-corrected first step is lr * sign(g) (up to eps) after the decay shrink
    expected = np.array([1.0, -2.0]) * (1 - lr * wd) - lr * g / (np.abs(g) + 1e-8)
    assert np.allclose(p, expected, rtol=0, atol=1e-15)
    g2 = np.array([-0.2, 0.3])
    before = p.copy()
    adamw_step(p, g2, m, v, 2, lr, wd)
    m2 = 0.9 * 0.1 * g + 0.1 * g2
    v2 = 0.999 * 0.001 * g ** 2 + 0.001 * g2 ** 2
    step = lr * (m2 / (1 - 0.9 ** 2)) / (np.sqrt(v2 / (1 - 0.999 ** 2)) + 1e-8)
    assert np.allclose(p, before * (1 - lr * wd) - step, rtol=0, atol=1e-15)


def test_adamw_skips_parameters_without_gradient():
    a, b = Parameter(np.ones(3)), Parameter(np.ones(3))
    opt = AdamW([("a", a), ("b", b)], weight_decay=0.5)
    a.grad = np.ones(3)
    opt.step(0.1)
    assert np.all(b.data == 1.0)  # no decay either
    assert not np.all(a.data == 1.0)


def test_adamw_rejects_non_finite_gradient():
    a = Parameter(np.ones(2))
    opt = AdamW([("a", a)])
    a.grad = np.array([1.0, np.nan])
    with pytest.raises(TrainingError, match="a"):
        opt.step(0.1)


def test_clip_grad_norm():
    a, b = Parameter(np.zeros(2)), Parameter(np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert math.hypot(*a.grad, *b.grad) == pytest.approx(1.0)


def test_checkpoint_round_trip_is_bit_exact(tmp_path, tiny_data):
    ck = run_stage1(TINY, tiny_train(max_steps=2), tiny_data)
    path = tmp_path / "s1.ckpt"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    assert checkpoint_bytes(back) == path.read_bytes()
    assert back.stage == "pretrain1" and back.step == 2 and back.model_config == TINY
    for k, v in ck.params.items():
        assert back.params[k].tobytes() == v.tobytes()


@pytest.mark.parametrize("damage,msg", [
    (lambda raw: b"XXXXXXXX" + raw[8:], "bad magic"),
    (lambda raw: raw[:20], "truncated"),
    (lambda raw: raw[:-3], "does not fit|blob has"),
    (lambda raw: raw + b"\0", "blob has"),
    (lambda raw: raw[:8] + (7).to_bytes(4, "little") + raw[12:], "unsupported version"),
])
def test_corrupt_checkpoints_raise(tmp_path, damage, msg):
    cfgs = dict(model_config=TINY, train_config=TrainConfig())
    raw = checkpoint_bytes(Checkpoint(stage="pretrain1", params={"w": np.arange(6.0)}, **cfgs))
    path = tmp_path / "bad.ckpt"
    path.write_bytes(damage(raw))
    with pytest.raises(CheckpointError, match=msg):
        load_checkpoint(path)


def test_stage_two_needs_stage_one_checkpoint(tiny_data):
    with pytest.raises(TrainingError, match="stage-1"):
        run_stage2(TINY, tiny_train(), tiny_data, None)
    fake = Checkpoint(TINY, TrainConfig(stage="finetune"), "finetune", {})
    with pytest.raises(TrainingError):
        run_stage2(TINY, tiny_train(), tiny_data, fake)


def test_stage_two_adds_inter_term_and_resets_moments(tiny_data):
    ck1 = run_stage1(TINY, tiny_train(max_steps=2), tiny_data)
    s2 = PretrainSession(TINY, dataclasses.replace(tiny_train(), stage="pretrain2"), ck1)
    assert s2.opt.t == 0 and all(np.all(m == 0) for m in s2.opt.m.values())
    assert s2.step_count == 0 and s2.ema_updates == ck1.ema_updates
    rec = s2.train_step(TokenCache(tiny_data, TINY), np.arange(4), 1e-4)
    assert "inter" in rec


def test_ema_moves_toward_online_once_per_step(tiny_data):
    sess = PretrainSession(TINY, tiny_train(ema_momentum=0.5))
    shadow0 = [s.data.copy() for s, _ in sess.pairs]
    sess.train_step(TokenCache(tiny_data, TINY), np.arange(4), 1e-3)
    for (s, o), s0 in zip(sess.pairs, shadow0):
        assert np.allclose(s.data, 0.5 * s0 + 0.5 * o.data)
    assert sess.ema_updates == 1


def test_same_seed_same_history(tiny_data):
    a = run_stage1(TINY, tiny_train(max_steps=3), tiny_data).history
    b = run_stage1(TINY, tiny_train(max_steps=3), tiny_data).history
    assert [r["total"] for r in a] == [r["total"] for r in b]


def test_resume_at_epoch_boundary_matches_uninterrupted_run(tmp_path, tiny_data):
    snaps = []
    sess = PretrainSession(TINY, tiny_train(epochs=2))
    full = sess.run(tiny_data, on_epoch=lambda s: snaps.append(s.checkpoint()) if s.epoch == 1 else None)
    save_checkpoint(snaps[0], tmp_path / "epoch1.ckpt")
    resumed = PretrainSession(TINY, tiny_train(epochs=2), load_checkpoint(tmp_path / "epoch1.ckpt")).run(tiny_data)
    assert [r["total"] for r in resumed.history] == [r["total"] for r in full.history[3:]]
    for k, v in full.params.items():
        assert resumed.params[k].tobytes() == v.tobytes()


def test_metrics_log_schema(tmp_path, tiny_data):
    log = tmp_path / "m.tsv"
    run_stage1(TINY, tiny_train(epochs=2), tiny_data, log_path=log)
    rows = [line.split("\t") for line in log.read_text().splitlines()]
    assert {r[0] for r in rows} == {"1", "2"}
    assert {r[1] for r in rows} == {"rec_mri", "rec_pet", "intra_mri", "intra_pet", "total"}
    assert all(math.isfinite(float(r[2])) for r in rows)


def test_finetune_returns_best_validation_epoch(tiny_data):
    order = np.argsort(tiny_data.labels, kind="stable").reshape(3, 4).T.ravel()  # class-interleaved
    tr, va, te = (tiny_data.subset(order[i:j]) for i, j in ((0, 6), (6, 9), (9, 12)))
    res = run_finetune(TINY, TrainConfig(stage="finetune", epochs=3, batch_size=3), tr, va, te)
    best = max(res.history, key=lambda r: r["val_acc"])
    assert res.best_epoch == best["epoch"]
    assert res.report.confusion.sum() == 3
    assert res.epochs_to(2.0) is None


def test_non_finite_loss_stops_training(tiny_data):
    sess = PretrainSession(TINY, tiny_train())
    sess.model.decoder["mri"].pred.bias.data[...] = np.inf
    with pytest.raises(TrainingError, match="non-finite"):
        sess.train_step(TokenCache(tiny_data, TINY), np.arange(4), 1e-3)
    assert nx.grad_enabled()
