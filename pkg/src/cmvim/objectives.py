"""Losses and the EMA target update."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Tensor


def mse_recon(recon: Tensor, target, masked_idx: np.ndarray | None) -> Tensor:
    """Mean squared error over the voxels of the masked tokens.

    ``recon`` and ``target`` are ``[B, n_tokens, patch_voxels]``; ``masked_idx``
    is ``[B, n_mask]``. ``None`` scores every token.
    """
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=recon.dtype))
    if masked_idx is not None:
        masked_idx = np.asarray(masked_idx)
        if masked_idx.size == 0:
            raise ContractError("mse_recon needs at least one masked token")
        recon = nx.gather(recon, masked_idx, axis=1)
        target = nx.gather(target, masked_idx, axis=1)
    diff = nx.sub(recon, target)
    return nx.mean(nx.mul(diff, diff))


def normalize_patches(tokens: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mu = tokens.mean(axis=-1, keepdims=True)
    var = tokens.var(axis=-1, keepdims=True)
    return (tokens - mu) / np.sqrt(var + eps)


def ema_update(shadow: Sequence, online: Sequence, momentum: float = 0.999) -> None:
    """In place: ``shadow <- momentum * shadow + (1 - momentum) * online``.

    Elements are Tensors or ndarrays, paired by position.
    """
    if len(shadow) != len(online):
        raise ContractError(f"ema_update: {len(shadow)} shadow tensors vs {len(online)} online")
    for s, o in zip(shadow, online):
        s_arr = s.data if isinstance(s, Tensor) else s
        o_arr = o.data if isinstance(o, Tensor) else o
        if s_arr.shape != o_arr.shape:
            raise ContractError(f"ema_update shape mismatch {s_arr.shape} vs {o_arr.shape}")
        s_arr *= s_arr.dtype.type(momentum)
        s_arr += s_arr.dtype.type(1.0 - momentum) * o_arr


def _symmetric_info_nce(a: Tensor, b: Tensor, temperature: float) -> Tensor:
    if a.shape[0] == 0:
        raise ContractError("InfoNCE needs a batch of at least one pair")
    if a.shape != b.shape:
        raise ContractError(f"InfoNCE pair shapes differ: {a.shape} vs {b.shape}")
    B = a.shape[0]
    logits = nx.matmul(a, nx.transpose(b))
    if temperature != 1.0:
        logits = nx.scale(logits, 1.0 / temperature)
    eye = Tensor(np.eye(B, dtype=a.dtype))
    pos_ab = nx.sum(nx.mul(nx.log_softmax(logits, axis=1), eye))
    pos_ba = nx.sum(nx.mul(nx.log_softmax(nx.transpose(logits), axis=1), eye))
    return nx.scale(nx.add(pos_ab, pos_ba), -1.0 / (2 * B))


def intra_nce(s1: Tensor, s2: Tensor, temperature: float = 1.0) -> Tensor:
    """Two-view InfoNCE; ``s2`` comes from the EMA target and is detached."""
    return _symmetric_info_nce(s1, s2.detach(), temperature)


def inter_nce(z_mri: Tensor, z_pet: Tensor, temperature: float = 1.0) -> Tensor:
    """Cross-modal InfoNCE; both sides receive gradient."""
    return _symmetric_info_nce(z_mri, z_pet, temperature)


def focal_loss(logits: Tensor, labels, gamma: float = 3.0) -> Tensor:
    """Batch mean of ``-(1 - p_true)**gamma * log p_true``."""
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:1] or labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"labels must be integers in [0, {k}) with one per row")
    onehot = Tensor(np.eye(k, dtype=logits.dtype)[labels])
    logp_true = nx.sum(nx.mul(nx.log_softmax(logits, axis=-1), onehot), axis=-1)
    if gamma == 0:
        return nx.neg(nx.mean(logp_true))
    weight = nx.power(nx.sub(1.0, nx.exp(logp_true)), gamma)
    return nx.neg(nx.mean(nx.mul(weight, logp_true)))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels)
    onehot = Tensor(np.eye(logits.shape[-1], dtype=logits.dtype)[labels])
    return nx.neg(nx.mean(nx.sum(nx.mul(nx.log_softmax(logits, axis=-1), onehot), axis=-1)))


@dataclass
class LossParts:
    rec_mri: object
    rec_pet: object
    intra_mri: object
    intra_pet: object
    inter: object = None

    def values(self) -> dict[str, float]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                out[f.name] = float(v.data) if isinstance(v, Tensor) else float(v)
        return out


def stage1_loss(parts: LossParts, alpha: float = 0.005):
    """Reconstruction of both modalities plus ``alpha`` times both intra-modal terms."""
    return parts.rec_mri + parts.rec_pet + alpha * (parts.intra_mri + parts.intra_pet)


def stage2_loss(parts: LossParts, alpha: float = 0.005, lambda_inter: float = 0.2):
    """Stage-one composite plus ``lambda_inter`` times the cross-modal term."""
    return stage1_loss(parts, alpha) + lambda_inter * parts.inter
