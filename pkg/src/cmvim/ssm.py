"""Selective state-space scan and the bidirectional Vim block."""
from __future__ import annotations

import math

import numpy as np

from . import kernels
from . import numerics as nx
from .config import ModelConfig
from .nn import MLP, LayerNorm, Linear, Module, Parameter, uniform, zeros
from .numerics import ContractError, DimensionError, Tensor, register_op

_MODES = {"zoh": kernels.ZOH, "euler": kernels.EULER}


def discretize(delta, A, Bm, mode: str = "zoh"):
    """Zero-order-hold discretisation ``(Abar, Bbar)``.

    ``delta: [L, Di]``, ``A: [Di, N]``, ``Bm: [L, N]`` (leading batch axes
    allowed) -> arrays of shape ``[L, Di, N]``. ``mode="euler"`` replaces the
    input weight with ``delta * B``.
    """
    delta, A, Bm = (np.asarray(getattr(v, "data", v)) for v in (delta, A, Bm))
    if np.any(delta <= 0):
        raise ContractError("discretize needs delta > 0")
    return kernels.discretize(delta, A, Bm, _MODES[mode])


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, Bm: Tensor, C: Tensor, D: Tensor,
                   mode: str = "zoh") -> Tensor:
    """``y_t = C_t h_t + D u_t`` with ``h_t = Abar_t h_{t-1} + Bbar_t u_t``, ``h_0 = 0``.

    Accepts ``[L, Di]`` or batched ``[B, L, Di]`` inputs (``Bm``/``C`` follow
    with ``N`` in place of ``Di``).
    """
    if u.shape[-2] == 0:
        raise ContractError("selective_scan needs a sequence of length >= 1")
    if u.shape != delta.shape or A.shape[0] != u.shape[-1] or D.shape != (u.shape[-1],):
        raise DimensionError(f"scan shapes u={u.shape} delta={delta.shape} A={A.shape} D={D.shape}")
    if Bm.shape != C.shape or Bm.shape[:-1] != u.shape[:-1] or Bm.shape[-1] != A.shape[1]:
        raise DimensionError(f"scan shapes B={Bm.shape} C={C.shape} for u={u.shape}, A={A.shape}")
    single = u.ndim == 2
    arrs = [np.ascontiguousarray(t.data[None] if single and t.ndim == 2 else t.data)
            for t in (u, delta, A, Bm, C, D)]
    arrs[2] = np.ascontiguousarray(A.data)
    dtype = u.dtype
    arrs = [a.astype(dtype, copy=False) for a in arrs]
    m = _MODES[mode]
    y, hs = kernels.scan_forward(*arrs, m)
    if single:
        y = y[0]
    return nx.apply_op("selective_scan", y, (u, delta, A, Bm, C, D), (arrs, hs, m, single))


@register_op("selective_scan")
def _selective_scan_bw(ctx, inputs, g):
    arrs, hs, m, single = ctx
    dy = g[None] if single else g
    du, ddelta, dA, dB, dC, dD = kernels.scan_backward(dy, *arrs, hs, m)
    if single:
        du, ddelta, dB, dC = du[0], ddelta[0], dB[0], dC[0]
    return du, ddelta, dA, dB, dC, dD


def _inv_softplus(x: np.ndarray) -> np.ndarray:
    return x + np.log(-np.expm1(-x))


class SsmBranch(Module):
    """One scan direction: short causal conv, input-dependent (delta, B, C), and the scan."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        dt = cfg.np_dtype
        di, n, r, k = cfg.d_inner, cfg.d_state, cfg.rank, cfg.conv_width
        self.conv_w = uniform(rng, (di, k), 1.0 / math.sqrt(k), dt)
        self.conv_b = uniform(rng, (di,), 1.0 / math.sqrt(k), dt)
        self.x_proj = Linear(rng, di, r + 2 * n, dt, bias=False)
        self.dt_proj = Linear(rng, r, di, dt)
        self.dt_proj.weight = uniform(rng, (r, di), r ** -0.5, dt)
        # softplus(bias) log-uniform in [dt_min, dt_max]
        step = np.exp(rng.uniform(math.log(cfg.dt_min), math.log(cfg.dt_max), size=di))
        self.dt_proj.bias = Parameter(_inv_softplus(step), dtype=dt)
        self.A_log = Parameter(np.log(np.tile(np.arange(1, n + 1, dtype=np.float64), (di, 1))), dtype=dt)
        self.D = Parameter(np.ones(di), dtype=dt)
        self.rank, self.d_state = r, n
        self.mode = cfg.discretization

    def __call__(self, x: Tensor) -> Tensor:
        x = nx.silu(nx.causal_conv1d(x, self.conv_w, self.conv_b))
        dt_in, Bm, C = nx.split(self.x_proj(x), [self.rank, self.d_state, self.d_state], axis=-1)
        delta = nx.softplus(self.dt_proj(dt_in))
        A = nx.neg(nx.exp(self.A_log))
        return selective_scan(x, delta, A, Bm, C, self.D, self.mode)


class VimBlock(Module):
    """Residual bidirectional Mamba layer: ``T + out(mean(fwd, bwd) * silu(z))``.

    The backward branch scans the reversed sequence and its output is
    reversed back before merging.
    """

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        dt = cfg.np_dtype
        self.norm = LayerNorm(cfg.d_model, dt)
        self.in_proj = Linear(rng, cfg.d_model, 2 * cfg.d_inner, dt, bias=False)
        self.fwd = SsmBranch(rng, cfg)
        self.bwd = SsmBranch(rng, cfg)
        self.out_proj = Linear(rng, cfg.d_inner, cfg.d_model, dt, bias=False)
        self.d_model, self.d_inner = cfg.d_model, cfg.d_inner

    def tie_branches(self) -> None:
        """Make the backward branch share the forward branch's parameters."""
        self.bwd = self.fwd

    def __call__(self, T: Tensor) -> Tensor:
        if T.shape[-1] != self.d_model:
            raise DimensionError(f"vim_block width {T.shape[-1]} != d_model {self.d_model}")
        if T.shape[-2] < 1:
            raise ContractError("vim_block needs at least one token")
        x, z = nx.split(self.in_proj(self.norm(T)), [self.d_inner, self.d_inner], axis=-1)
        seq = x.ndim - 2
        y_f = self.fwd(x)
        y_b = nx.flip(self.bwd(nx.flip(x, seq)), seq)
        y = nx.mul(nx.scale(nx.add(y_f, y_b), 0.5), nx.silu(z))
        return nx.add(T, self.out_proj(y))

    def named_parameters(self, prefix: str = ""):
        # a tied backward branch must not be reported twice
        seen = set()
        for name, p in super().named_parameters(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield name, p


def vim_block(T: Tensor, params: VimBlock) -> Tensor:
    return params(T)


class PredictHead(Module):
    """``MLP(Norm(T[0]))`` on the class-token state."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        dt = cfg.np_dtype
        self.norm = LayerNorm(cfg.d_model, dt)
        self.mlp = MLP(rng, cfg.d_model, cfg.head_hidden or cfg.d_model, cfg.num_classes, dt)
        self.has_class_token = cfg.use_class_token

    def __call__(self, T_L: Tensor) -> Tensor:
        if not self.has_class_token:
            raise ContractError("predict_head needs a class token but use_class_token is off")
        cls_state = nx.slice_axis(T_L, 0, 1, axis=-2)
        logits = self.mlp(self.norm(cls_state))
        return nx.reshape(logits, logits.shape[:-2] + (logits.shape[-1],))


def predict_head(T_L: Tensor, params: PredictHead) -> Tensor:
    return params(T_L)
