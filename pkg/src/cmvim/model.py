"""Multi-modal masked Vim autoencoder: tokenisation, encoder, fusion, decoders, heads."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import ConfigError, ModelConfig
from .nn import MLP, LayerNorm, Linear, Module, normal, zeros
from .numerics import ContractError, Parameter, Tensor
from .ssm import PredictHead, VimBlock

MODALITIES = ("mri", "pet")


# ---------------------------------------------------------------------------
# tokenisation
# ---------------------------------------------------------------------------

def patchify(volume: np.ndarray, patch: int) -> np.ndarray:
    """``[..., Z, Y, X] -> [..., n_tokens, patch**3]``.

    Tokens run z-major over the patch grid, voxels z-major within a patch.
    """
    *lead, z, y, x = volume.shape
    if z % patch or y % patch or x % patch:
        raise ConfigError(f"patch size {patch} does not divide volume extents {(z, y, x)}")
    gz, gy, gx = z // patch, y // patch, x // patch
    v = volume.reshape(*lead, gz, patch, gy, patch, gx, patch)
    k = len(lead)
    perm = list(range(k)) + [k, k + 2, k + 4, k + 1, k + 3, k + 5]
    return v.transpose(perm).reshape(*lead, gz * gy * gx, patch ** 3)


def unpatchify(tokens: np.ndarray, patch: int, extents: tuple[int, int, int] | None = None) -> np.ndarray:
    *lead, n, pv = tokens.shape
    if pv != patch ** 3:
        raise ConfigError(f"token width {pv} is not patch**3 = {patch ** 3}")
    if extents is None:
        g = round(n ** (1 / 3))
        if g ** 3 != n:
            raise ConfigError(f"{n} tokens do not form a cube; pass extents")
        extents = (g * patch,) * 3
    gz, gy, gx = (e // patch for e in extents)
    v = tokens.reshape(*lead, gz, gy, gx, patch, patch, patch)
    k = len(lead)
    perm = list(range(k)) + [k, k + 3, k + 1, k + 4, k + 2, k + 5]
    return v.transpose(perm).reshape(*lead, *extents)


def random_mask(n_tokens: int, ratio: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform split into ``(visible, masked)`` index arrays, each sorted ascending.

    ``|masked| == round(ratio * n_tokens)``.
    """
    if not 0 < ratio < 1:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")
    n_mask = int(round(ratio * n_tokens))
    perm = rng.permutation(n_tokens)
    return np.sort(perm[n_mask:]), np.sort(perm[:n_mask])


@dataclass
class MaskView:
    """Per-sample partitions for one modality: ``visible [B, n_vis]``, ``masked [B, n_mask]``."""
    visible: np.ndarray
    masked: np.ndarray

    @classmethod
    def sample(cls, batch: int, n_tokens: int, ratio: float, rng: np.random.Generator) -> "MaskView":
        pairs = [random_mask(n_tokens, ratio, rng) for _ in range(batch)]
        return cls(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]))

    @property
    def restore(self) -> np.ndarray:
        """Index into ``[visible ‖ masked]`` that puts tokens back in grid order."""
        return np.argsort(np.concatenate([self.visible, self.masked], axis=1), axis=1, kind="stable")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def sincos_positions(grid: int, d_model: int) -> np.ndarray:
    """``[grid**3, d_model]`` sine/cosine features of the (z, y, x) patch coordinates.

    Each axis gets ``2 * (d_model // 6)`` channels; leftover channels stay zero.
    """
    per_axis = d_model // 6
    freqs = 1.0 / 10000 ** (np.arange(per_axis) / max(per_axis, 1))
    coords = np.stack(np.meshgrid(*(np.arange(grid),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    out = np.zeros((grid ** 3, d_model))
    for axis in range(3):
        angles = coords[:, axis, None] * freqs[None, :]
        base = 2 * per_axis * axis
        out[:, base:base + per_axis] = np.sin(angles)
        out[:, base + per_axis:base + 2 * per_axis] = np.cos(angles)
    return out


class ModalityEmbed(Module):
    """Linear patch projection plus a learnable position table."""

    def __init__(self, rng, cfg: ModelConfig):
        self.proj = Linear(rng, cfg.patch_voxels, cfg.d_model, cfg.np_dtype)
        if cfg.pos_init == "sincos":
            self.pos = Parameter(sincos_positions(cfg.grid, cfg.d_model), dtype=cfg.np_dtype)
        else:
            self.pos = normal(rng, (cfg.n_tokens, cfg.d_model), 0.02, cfg.np_dtype)

    def __call__(self, tokens: Tensor) -> Tensor:
        return nx.add(self.proj(tokens), self.pos)


class CrossAttention(Module):
    """``q + O(softmax(Q K^T / sqrt(d_head)) V)`` with learned Q/K/V/O maps."""

    def __init__(self, rng, cfg: ModelConfig):
        dt, d = cfg.np_dtype, cfg.d_model
        self.q = Linear(rng, d, d, dt)
        self.k = Linear(rng, d, d, dt)
        self.v = Linear(rng, d, d, dt)
        self.o = Linear(rng, d, d, dt)
        self.heads = cfg.heads

    def attend(self, query: Tensor, context: Tensor) -> Tensor:
        Q, K, V = self.q(query), self.k(context), self.v(context)
        h = self.heads
        d_head = Q.shape[-1] // h
        if h > 1:
            Q, K, V = (nx.transpose(nx.reshape(t, t.shape[:-1] + (h, d_head)), (0, 2, 1, 3)) for t in (Q, K, V))
        scores = nx.scale(nx.matmul(Q, nx.transpose(K, _swap_last(K.ndim))), 1.0 / math.sqrt(d_head))
        out = nx.matmul(nx.softmax(scores, axis=-1), V)
        if h > 1:
            out = nx.transpose(out, (0, 2, 1, 3))
            out = nx.reshape(out, out.shape[:-2] + (h * d_head,))
        return self.o(out)

    def __call__(self, query: Tensor, context: Tensor) -> Tensor:
        return nx.add(query, self.attend(query, context))


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


class Decoder(Module):
    """Vim layer(s) followed by a norm and a linear map to patch voxels."""

    def __init__(self, rng, cfg: ModelConfig):
        self.blocks = [VimBlock(rng, cfg) for _ in range(cfg.decoder_depth)]
        self.norm = LayerNorm(cfg.d_model, cfg.np_dtype)
        self.pred = Linear(rng, cfg.d_model, cfg.patch_voxels, cfg.np_dtype)

    def __call__(self, c: Tensor) -> Tensor:
        for blk in self.blocks:
            c = blk(c)
        return self.pred(self.norm(c))


# ---------------------------------------------------------------------------
# shared forward pieces (used by the online model and the EMA target)
# ---------------------------------------------------------------------------

def run_encoder(blocks, vis_mri: Tensor, vis_pet: Tensor) -> tuple[Tensor, Tensor]:
    """Encode ``[MRI ‖ PET]`` visible tokens through the residual Vim stack and split back."""
    n_mri = vis_mri.shape[-2]
    x = nx.concat([vis_mri, vis_pet], axis=-2)
    for blk in blocks:
        x = blk(x)
    return nx.slice_axis(x, 0, n_mri, axis=-2), nx.slice_axis(x, n_mri, x.shape[-2], axis=-2)


def pooled_projection(head: MLP, tokens: Tensor) -> Tensor:
    """Token-mean pooling, projection head, row L2 normalisation."""
    return nx.l2_normalize(head(nx.mean(tokens, axis=-2)), axis=-1)


class TargetEncoder(Module):
    """EMA shadow of the online embedding path, encoder and intra-modal projection."""

    def __init__(self, embed: dict, encoder: list, proj: dict):
        self.embed = embed
        self.encoder = encoder
        self.proj = proj
        for p in self.parameters():
            p.requires_grad = False

    def __call__(self, x: dict[str, np.ndarray], views: dict[str, MaskView]) -> dict[str, Tensor]:
        with nx.no_grad():
            vis = {m: nx.gather(self.embed[m](Tensor(x[m])), views[m].visible, axis=1) for m in MODALITIES}
            e = dict(zip(MODALITIES, run_encoder(self.encoder, vis["mri"], vis["pet"])))
            return {m: pooled_projection(self.proj[m], e[m]) for m in MODALITIES}


@dataclass
class PretrainOutputs:
    e: dict[str, Tensor]        # encoded visible tokens per modality
    c: dict[str, Tensor]        # fused full-length tokens per modality
    recon: dict[str, Tensor]    # [B, n_tokens, patch_voxels]
    s_online: dict[str, Tensor]  # intra-modal online projections


class CMViM(Module):
    """Online model: everything that receives gradients."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        dt, d = cfg.np_dtype, cfg.d_model
        hid = cfg.proj_hidden or d
        self.embed = {m: ModalityEmbed(rng, cfg) for m in MODALITIES}
        self.encoder = [VimBlock(rng, cfg) for _ in range(cfg.depth)]
        self.mask_token = {m: normal(rng, (d,), 0.02, dt) for m in MODALITIES}
        self.fusion = {m: CrossAttention(rng, cfg) for m in MODALITIES}
        self.decoder = {m: Decoder(rng, cfg) for m in MODALITIES}
        self.proj_intra = {m: MLP(rng, d, hid, cfg.d_proj, dt) for m in MODALITIES}
        self.proj_inter = {m: MLP(rng, d, hid, cfg.d_proj, dt) for m in MODALITIES}
        self.cls_token = normal(rng, (d,), 0.02, dt) if cfg.use_class_token else None
        self.head = PredictHead(rng, cfg)

    def make_target(self) -> TargetEncoder:
        snap = self.clone()
        return TargetEncoder(snap.embed, snap.encoder, snap.proj_intra)

    def target_pairs(self, target: TargetEncoder) -> list[tuple[Tensor, Tensor]]:
        """(shadow, online) parameter pairs in a fixed order."""
        online = TargetEncoder.__new__(TargetEncoder)
        online.embed, online.encoder, online.proj = self.embed, self.encoder, self.proj_intra
        return [(s, o) for (_, s), (_, o) in zip(target.named_parameters(), online.named_parameters())]

    # -- pieces --------------------------------------------------------------

    def embed_tokens(self, tokens, modality: str) -> Tensor:
        if modality not in self.embed:
            raise ContractError(f"unknown modality {modality!r}")
        return self.embed[modality](tokens if isinstance(tokens, Tensor) else Tensor(tokens))

    def encode(self, vis_mri: Tensor, vis_pet: Tensor) -> tuple[Tensor, Tensor]:
        return run_encoder(self.encoder, vis_mri, vis_pet)

    def full_sequence(self, modality: str, e: Tensor, view: MaskView) -> Tensor:
        """Encoded visible tokens plus positional mask tokens, restored to grid order."""
        pos = self.embed[modality].pos
        mask_tok = nx.add(nx.gather(pos, view.masked.reshape(-1), axis=0).reshape(
            view.masked.shape + (pos.shape[-1],)), self.mask_token[modality])
        seq = nx.concat([e, mask_tok], axis=1)
        return nx.gather(seq, view.restore, axis=1)

    def fuse(self, modality: str, full: dict[str, Tensor]) -> Tensor:
        context = nx.concat([full[m] for m in MODALITIES], axis=1)
        return self.fusion[modality](full[modality], context)

    def decode(self, modality: str, c: Tensor) -> Tensor:
        return self.decoder[modality](c)

    # -- full paths ----------------------------------------------------------

    def forward_pretrain(self, x: dict[str, np.ndarray], views: dict[str, MaskView]) -> PretrainOutputs:
        emb = {m: self.embed_tokens(x[m], m) for m in MODALITIES}
        vis = {m: nx.gather(emb[m], views[m].visible, axis=1) for m in MODALITIES}
        e = dict(zip(MODALITIES, self.encode(vis["mri"], vis["pet"])))
        full = {m: self.full_sequence(m, e[m], views[m]) for m in MODALITIES}
        c = {m: self.fuse(m, full) for m in MODALITIES}
        recon = {m: self.decode(m, c[m]) for m in MODALITIES}
        s = {m: pooled_projection(self.proj_intra[m], e[m]) for m in MODALITIES}
        return PretrainOutputs(e, c, recon, s)

    def inter_projections(self, c: dict[str, Tensor]) -> dict[str, Tensor]:
        return {m: pooled_projection(self.proj_inter[m], c[m]) for m in MODALITIES}

    def classify(self, x_mri, x_pet) -> Tensor:
        """Logits ``[B, num_classes]`` from unmasked token grids ``[B, n_tokens, patch_voxels]``."""
        if self.cls_token is None:
            raise ContractError("classification needs use_class_token = true")
        e_mri, e_pet = self.embed_tokens(x_mri, "mri"), self.embed_tokens(x_pet, "pet")
        B = e_mri.shape[0]
        cls = nx.add(Tensor(np.zeros((B, 1, self.cfg.d_model), dtype=self.cfg.np_dtype)), self.cls_token)
        x = nx.concat([cls, e_mri, e_pet], axis=1)
        for blk in self.encoder:
            x = blk(x)
        return self.head(x)


def count_parameters(model: Module) -> int:
    return model.num_parameters()


def parameter_breakdown(model: CMViM) -> dict[str, int]:
    out: dict[str, int] = {}
    for name, p in model.named_parameters():
        key = name.split(".", 1)[0]
        out[key] = out.get(key, 0) + p.size
    return out


def full_volume_mask(view: MaskView, patch: int, n_tokens: int) -> np.ndarray:
    """Boolean voxel mask ``[B, Z, Y, X]`` that is true on masked patches."""
    tok = np.zeros((view.masked.shape[0], n_tokens, patch ** 3), dtype=bool)
    np.put_along_axis(tok, view.masked[..., None], True, axis=1)
    return unpatchify(tok, patch)
