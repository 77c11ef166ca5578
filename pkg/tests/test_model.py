import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmvim import numerics as nx
from cmvim.config import ConfigError, ModelConfig
from cmvim.model import (CMViM, CrossAttention, MaskView, full_volume_mask, patchify, random_mask,
                         sincos_positions, unpatchify)
from cmvim.numerics import ContractError, Tensor
from cmvim.objectives import mse_recon


def toy(**kw):
    base = dict(volume_size=16, patch_size=8, d_model=16, depth=2, d_state=4, d_proj=16, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def test_patchify_64_cube_shape_and_order():
    vol = np.arange(64 ** 3, dtype=np.float32).reshape(64, 64, 64)
    tok = patchify(vol, 8)
    assert tok.shape == (512, 512)
    pz, py, px = 2, 5, 7
    row = tok[(pz * 8 + py) * 8 + px]
    assert np.array_equal(row, vol[pz * 8:pz * 8 + 8, py * 8:py * 8 + 8, px * 8:px * 8 + 8].ravel())


def test_constant_volume_gives_constant_rows():
    assert np.all(patchify(np.full((16, 16, 16), 0.25), 8) == 0.25)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([np.float32, np.float64, np.int32]), st.integers(1, 3), st.integers(0, 2**31))
def test_patch_round_trip_is_exact(dtype, grid, seed):
    vol = (np.random.default_rng(seed).normal(size=(2, 4 * grid, 4 * grid, 4 * grid)) * 100).astype(dtype)
    assert np.array_equal(unpatchify(patchify(vol, 4), 4), vol)


def test_patchify_rejects_indivisible_extents():
    with pytest.raises(ConfigError):
        patchify(np.zeros((10, 16, 16)), 8)


def test_mask_sizes_and_partition():
    vis, msk = random_mask(512, 0.75, np.random.default_rng(0))
    assert len(msk) == 384 and len(vis) == 128
    assert np.array_equal(np.sort(np.r_[vis, msk]), np.arange(512))
    again = random_mask(512, 0.75, np.random.default_rng(0))
    assert np.array_equal(again[0], vis) and np.array_equal(again[1], msk)


@pytest.mark.parametrize("ratio", [0.0, 1.0, -0.1])
def test_mask_ratio_bounds(ratio):
    with pytest.raises(ConfigError):
        random_mask(8, ratio, np.random.default_rng(0))


def test_mask_frequency_is_uniform():
    rng = np.random.default_rng(7)
    counts = np.zeros(64)
    for _ in range(10_000):
        counts[random_mask(64, 0.75, rng)[1]] += 1
    assert np.all(np.abs(counts / 10_000 - 0.75) <= 0.02)


def test_restore_puts_tokens_back_in_grid_order():
    view = MaskView.sample(3, 27, 0.75, np.random.default_rng(1))
    seq = np.concatenate([view.visible, view.masked], axis=1)
    assert np.array_equal(np.take_along_axis(seq, view.restore, axis=1), np.tile(np.arange(27), (3, 1)))


def test_masked_row_loss_equals_masked_voxel_loss():
    rng = np.random.default_rng(2)
    recon, target = rng.normal(size=(2, 64, 4 ** 3)), rng.normal(size=(2, 64, 4 ** 3))
    view = MaskView.sample(2, 64, 0.75, rng)
    row_loss = float(mse_recon(Tensor(recon), target, view.masked).data)
    vox = full_volume_mask(view, 4, 64)
    diff = unpatchify(recon, 4) - unpatchify(target, 4)
    assert row_loss == pytest.approx(np.mean(diff[vox] ** 2), abs=1e-12)


def test_sincos_positions_are_distinct_and_bounded():
    pos = sincos_positions(4, 32)
    assert pos.shape == (64, 32) and np.max(np.abs(pos)) <= 1.0
    dists = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    assert np.min(dists + np.eye(64) * 10) > 1e-3
    assert np.all(pos[:, 30:] == 0.0)  # 32 // 6 = 5 frequencies per axis fill 30 channels


def test_embedding_zero_weights_and_position_sensitivity():
    model = CMViM(toy())
    emb = model.embed["mri"]
    tokens = np.ones((1, 8, 512))  # identical patch at every position
    out = model.embed_tokens(tokens, "mri").data[0]
    assert not np.allclose(out[0], out[5])
    emb.proj.weight.data[...] = 0
    emb.proj.bias.data[...] = 0
    emb.pos.data[...] = 0
    assert np.all(model.embed_tokens(tokens, "mri").data == 0)
    with pytest.raises(ContractError):
        model.embed_tokens(tokens, "ct")


def test_encoder_is_identity_with_zero_out_projections():
    model = CMViM(toy())
    for blk in model.encoder:
        blk.out_proj.weight.data[...] = 0
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 2, 16)), rng.normal(size=(2, 3, 16))
    e_mri, e_pet = model.encode(Tensor(a), Tensor(b))
    assert np.array_equal(e_mri.data, a) and np.array_equal(e_pet.data, b)


def test_encoder_sees_mri_before_pet():
    """The forward scan is causal, so the first MRI token cannot depend on PET tokens through it."""
    model = CMViM(toy())
    for blk in model.encoder:
        blk.bwd.D.data[...] = 0
        blk.bwd.x_proj.weight.data[...] = 0  # backward branch now carries no signal
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(1, 3, 16)), rng.normal(size=(1, 3, 16))
    e1, _ = model.encode(Tensor(a), Tensor(b))
    e2, _ = model.encode(Tensor(a), Tensor(b + 1.0))
    assert np.allclose(e1.data, e2.data, atol=1e-12)


def test_cross_attention_invariant_to_key_order():
    rng = np.random.default_rng(5)
    att = CrossAttention(rng, toy(dtype="float32"))
    q, ctx = rng.normal(size=(2, 4, 16)).astype(np.float32), rng.normal(size=(2, 10, 16)).astype(np.float32)
    out1 = att(Tensor(q), Tensor(ctx)).data
    out2 = att(Tensor(q), Tensor(ctx[:, rng.permutation(10)])).data
    assert np.max(np.abs(out1 - out2)) <= 1e-6


def test_cross_attention_saturates_on_dominant_key():
    rng = np.random.default_rng(6)
    att = CrossAttention(rng, toy())
    eye = np.eye(16)
    att.q.weight.data[...] = eye
    att.k.weight.data[...] = eye
    q = np.zeros((1, 1, 16))
    q[0, 0, 0] = 1.0
    ctx = rng.normal(size=(1, 5, 16)) * 0.1
    ctx[0, 2, 0] = 150.0  # score margin >= 30 after the 1/sqrt(16) scale
    expected = q + att.o(att.v(Tensor(ctx[:, 2:3]))).data
    assert np.max(np.abs(att(Tensor(q), Tensor(ctx)).data - expected)) <= 1e-9


def test_pretrain_shapes_at_full_scale():
    cfg = ModelConfig(volume_size=64, patch_size=8, d_model=8, depth=1, d_state=2, d_proj=8, dtype="float32")
    model = CMViM(cfg)
    rng = np.random.default_rng(0)
    x = {m: rng.normal(size=(1, 512, 512)).astype(np.float32) for m in ("mri", "pet")}
    views = {m: MaskView.sample(1, 512, 0.75, rng) for m in ("mri", "pet")}
    assert views["mri"].visible.shape == (1, 128)
    with nx.no_grad():
        out = model.forward_pretrain(x, views)
    assert out.e["mri"].shape == (1, 128, 8)
    assert out.c["pet"].shape == (1, 512, 8)
    assert out.recon["mri"].shape == (1, 512, 512)


def test_zero_decoder_head_gives_zero_reconstruction():
    model = CMViM(toy())
    for dec in model.decoder.values():
        dec.pred.weight.data[...] = 0
    rng = np.random.default_rng(8)
    x = {m: rng.normal(size=(2, 8, 512)) for m in ("mri", "pet")}
    views = {m: MaskView.sample(2, 8, 0.75, rng) for m in ("mri", "pet")}
    assert all(np.all(r.data == 0) for r in model.forward_pretrain(x, views).recon.values())


def test_decoders_share_shape_not_weights():
    model = CMViM(toy())
    a, b = model.decoder["mri"].state_dict(), model.decoder["pet"].state_dict()
    assert a.keys() == b.keys() and all(a[k].shape == b[k].shape for k in a)
    assert all(a[k] is not b[k] for k in a)
    assert not np.array_equal(a["pred.weight"], b["pred.weight"])


def test_target_encoder_mirrors_online_and_takes_no_gradient():
    model = CMViM(toy())
    target = model.make_target()
    pairs = model.target_pairs(target)
    assert pairs and all(s.shape == o.shape and s is not o for s, o in pairs)
    rng = np.random.default_rng(9)
    x = {m: rng.normal(size=(2, 8, 512)) for m in ("mri", "pet")}
    views = {m: MaskView.sample(2, 8, 0.75, rng) for m in ("mri", "pet")}
    out = target(x, views)
    assert not out["mri"].requires_grad
    assert all(not p.requires_grad for p in target.parameters())


def test_classify_zero_head_and_determinism():
    model = CMViM(toy())
    rng = np.random.default_rng(10)
    a, b = rng.normal(size=(3, 8, 512)), rng.normal(size=(3, 8, 512))
    first = model.classify(a, b).data
    assert first.shape == (3, 3)
    assert np.array_equal(first, model.classify(a, b).data)
    model.head.mlp.fc2.weight.data[...] = 0
    model.head.mlp.fc2.bias.data[...] = 0
    assert np.all(model.classify(a, b).data == 0)


def test_classify_without_class_token():
    model = CMViM(toy(use_class_token=False))
    with pytest.raises(ContractError):
        model.classify(np.zeros((1, 8, 512)), np.zeros((1, 8, 512)))
