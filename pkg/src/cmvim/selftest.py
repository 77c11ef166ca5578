"""Oracle suites behind ``cmvim selftest`` and the acceptance tests.

Each suite compares the implementation against something computed a
different way:

* ``scan``: a plain per-step recurrence in float64.
* ``grad``: central finite differences, per differentiable op and for the
  composed pretraining and fine-tuning losses of a tiny float64 model.
* ``losses``: closed-form identities of the objectives.
* ``formats``: bit-exact round-trips of tokens, volumes and checkpoints.

A suite returns a :class:`SuiteResult`; failures carry the offending op or
check name so a broken backward rule is reported by name.
"""
from __future__ import annotations

import dataclasses
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from . import objectives as obj
from .config import ModelConfig, TrainConfig
from .data import read_volume, write_volume
from .model import MODALITIES, CMViM, MaskView, patchify, random_mask, unpatchify
from .numerics import Tensor
from .ssm import selective_scan

GRAD_TOL = 1e-4


@dataclass
class SuiteResult:
    name: str
    ok: bool
    failures: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        detail = "; ".join(self.failures if not self.ok else self.notes)
        return f"{status} {self.name} ({self.seconds:.1f}s){': ' + detail if detail else ''}"


# ---------------------------------------------------------------------------
# scan oracle
# ---------------------------------------------------------------------------

def reference_scan(u, delta, A, Bm, C, D, mode: str = "zoh") -> np.ndarray:
    """Step-by-step recurrence in float64. ``u, delta: [L, Di]``, ``Bm, C: [L, N]``."""
    u, delta, A, Bm, C, D = (np.asarray(a, dtype=np.float64) for a in (u, delta, A, Bm, C, D))
    L, Di = u.shape
    h = np.zeros(A.shape)
    y = np.empty((L, Di))
    for t in range(L):
        dA = delta[t][:, None] * A
        decay = np.exp(dA)
        if mode == "zoh":
            # (exp(dA) - 1) / A, written as delta * expm1(dA) / dA so A -> 0 stays finite
            ratio = np.where(dA == 0, 1.0, np.expm1(dA) / np.where(dA == 0, 1.0, dA))
            weight = delta[t][:, None] * ratio
        else:
            weight = np.broadcast_to(delta[t][:, None], A.shape)
        h = decay * h + weight * Bm[t][None, :] * u[t][:, None]
        y[t] = h @ C[t] + D * u[t]
    return y


def random_scan_case(rng: np.random.Generator, dtype, max_len: int = 256, max_state: int = 16,
                     max_inner: int = 32) -> list[np.ndarray]:
    L = int(rng.integers(1, max_len + 1))
    N = int(rng.integers(1, max_state + 1))
    Di = int(rng.integers(1, max_inner + 1))
    u = rng.normal(size=(L, Di))
    delta = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=(L, Di)))
    A = -np.exp(rng.uniform(np.log(0.5), np.log(N + 0.5), size=(Di, N)))
    Bm = rng.normal(size=(L, N))
    C = rng.normal(size=(L, N))
    D = rng.normal(size=Di)
    return [a.astype(dtype) for a in (u, delta, A, Bm, C, D)]


def scan_suite(cases: int = 200, seed: int = 0, tolerances=None) -> SuiteResult:
    """``selective_scan`` against :func:`reference_scan` on random shapes in both precisions."""
    tolerances = tolerances or {np.float32: 1e-5, np.float64: 1e-10}
    t0 = time.perf_counter()
    res = SuiteResult("scan", True)
    rng = np.random.default_rng(seed)
    worst = {dt: 0.0 for dt in tolerances}
    for i in range(cases):
        dtype = (np.float32, np.float64)[i % 2]
        args = random_scan_case(rng, dtype)
        with nx.no_grad():
            y = selective_scan(*(Tensor(a) for a in args)).data
        ref = reference_scan(*args)
        err = float(np.max(np.abs(y - ref)) / max(np.max(np.abs(ref)), 1e-30))
        worst[dtype] = max(worst[dtype], err)
        if err > tolerances[dtype]:
            res.ok = False
            res.failures.append(f"case {i} ({np.dtype(dtype).name}, L={args[0].shape[0]}) rel err {err:.2e}")
    res.notes.append(", ".join(f"{np.dtype(k).name} max rel err {v:.1e}" for k, v in worst.items()))
    res.seconds = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def fd_derivative(f: Callable[[], float], arr: np.ndarray, index, h: float = 1e-4) -> float:
    """Fourth-order central difference of ``f`` with respect to ``arr[index]`` (perturbed in place)."""
    old = arr[index]
    vals = []
    for k in (2, 1, -1, -2):
        arr[index] = old + k * h
        vals.append(f())
    arr[index] = old
    f2, f1, m1, m2 = vals
    return (-f2 + 8 * f1 - 8 * m1 + m2) / (12 * h)


def rel_err(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps round-off on exact zeros from counting."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class OpCase:
    name: str
    fn: Callable[..., Tensor]
    inputs: list[np.ndarray]


def _op_cases(rng: np.random.Generator) -> list[OpCase]:
    r = lambda *s: rng.normal(size=s)               # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)  # noqa: E731
    idx = rng.integers(0, 5, size=(2, 3))
    scan_args = random_scan_case(rng, np.float64, max_len=7, max_state=3, max_inner=3)
    return [
        OpCase("add", nx.add, [r(3, 4), r(4)]),
        OpCase("sub", nx.sub, [r(2, 3), r(2, 1)]),
        OpCase("mul", nx.mul, [r(3, 4), r(3, 4)]),
        OpCase("div", nx.div, [r(3, 4), pos(4)]),
        OpCase("neg", nx.neg, [r(5)]),
        OpCase("scale", lambda x: nx.scale(x, -1.7), [r(2, 3)]),
        OpCase("exp", nx.exp, [r(4)]),
        OpCase("log", nx.log, [pos(4)]),
        OpCase("sqrt", nx.sqrt, [pos(4)]),
        OpCase("power", lambda x: nx.power(x, 2.5), [pos(4)]),
        OpCase("sigmoid", nx.sigmoid, [r(2, 5)]),
        OpCase("silu", nx.silu, [r(2, 5)]),
        OpCase("softplus", nx.softplus, [r(2, 5) * 3]),
        OpCase("sum", lambda x: nx.sum(x, axis=1), [r(3, 4, 2)]),
        OpCase("mean", lambda x: nx.mean(x, axis=0, keepdims=True), [r(3, 4)]),
        OpCase("matmul", nx.matmul, [r(2, 3, 4), r(4, 5)]),
        OpCase("transpose", lambda x: nx.transpose(x, (1, 2, 0)), [r(2, 3, 4)]),
        OpCase("reshape", lambda x: nx.reshape(x, (4, 3)), [r(2, 6)]),
        OpCase("concat", lambda a, b: nx.concat([a, b], axis=1), [r(2, 3), r(2, 2)]),
        OpCase("slice", lambda x: nx.slice_axis(x, 1, 3, axis=0), [r(4, 3)]),
        OpCase("split", lambda x: nx.mul(*nx.split(x, [2, 2], axis=-1)), [r(3, 4)]),
        OpCase("gather", lambda x: nx.gather(x, idx, axis=1), [r(2, 5, 3)]),
        OpCase("pad", lambda x: nx.pad(x, [(1, 0), (0, 2)]), [r(2, 3)]),
        OpCase("flip", lambda x: nx.flip(x, 1), [r(2, 4)]),
        OpCase("softmax", lambda x: nx.softmax(x, axis=-1), [r(3, 4)]),
        OpCase("log_softmax", lambda x: nx.log_softmax(x, axis=-1), [r(3, 4)]),
        OpCase("layer_norm", nx.layer_norm, [r(3, 6), 1 + 0.1 * r(6), r(6)]),
        OpCase("causal_conv1d", nx.causal_conv1d, [r(2, 6, 3), r(3, 4), r(3)]),
        OpCase("l2_normalize", nx.l2_normalize, [r(3, 4)]),
        OpCase("selective_scan", selective_scan, scan_args),
        OpCase("selective_scan[euler]", lambda *a: selective_scan(*a, mode="euler"), list(scan_args)),
    ]


def check_op(case: OpCase, rng: np.random.Generator) -> float:
    """Worst relative error between the op's backward rule and finite differences."""
    arrays = [np.array(a, dtype=np.float64) for a in case.inputs]
    probe = rng.normal(size=case.fn(*(Tensor(a) for a in arrays)).shape)

    def value() -> float:
        with nx.no_grad():
            return float(np.sum(case.fn(*(Tensor(a) for a in arrays)).data * probe))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = case.fn(*leaves)
    nx.sum(nx.mul(out, Tensor(probe))).backward()
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        for index in np.ndindex(arr.shape):
            worst = max(worst, rel_err(float(grad[index]), fd_derivative(value, arr, index)))
    return worst


def op_grad_suite(seed: int = 0, tol: float = GRAD_TOL) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    res = SuiteResult("grad-ops", True)
    worst = 0.0
    for case in _op_cases(rng):
        err = check_op(case, rng)
        worst = max(worst, err)
        if not err <= tol:
            res.ok = False
            res.failures.append(f"op {case.name} rel err {err:.2e}")
    res.notes.append(f"max rel err {worst:.1e}")
    res.seconds = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------------------
# composed losses on a tiny float64 model
# ---------------------------------------------------------------------------

def tiny_model_config() -> ModelConfig:
    return ModelConfig(volume_size=16, patch_size=8, d_model=16, depth=2, decoder_depth=1,
                       d_proj=16, dtype="float64").validate()


def _tiny_batch(cfg: ModelConfig, batch: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    v = cfg.volume_size
    return {m: patchify(rng.uniform(size=(batch, v, v, v)), cfg.patch_size) for m in MODALITIES}


def composed_losses(cfg: ModelConfig | None = None, batch: int = 2, seed: int = 0):
    """The model plus closures for the stage-1, stage-2 and fine-tuning losses with frozen randomness."""
    from .trainer import PretrainSession, TokenCache  # local: trainer imports this module's neighbours

    cfg = cfg or tiny_model_config()
    rng = np.random.default_rng(seed)
    x = _tiny_batch(cfg, batch, rng)
    labels = np.arange(batch) % cfg.num_classes
    views1 = {m: MaskView.sample(batch, cfg.n_tokens, 0.75, rng) for m in MODALITIES}
    views2 = {m: MaskView.sample(batch, cfg.n_tokens, 0.75, rng) for m in MODALITIES}
    tcfg = TrainConfig(seed=seed, batch_size=batch)
    session = PretrainSession(cfg, tcfg)
    # perturb the target away from the online weights so the intra term is non-trivial
    for _, p in session.target.named_parameters():
        p.data += 0.01 * rng.normal(size=p.shape)
    tokens = TokenCache.__new__(TokenCache)
    tokens.mri, tokens.pet, tokens.labels = x["mri"], x["pet"], labels
    tokens.target = dict(x)
    idx = np.arange(batch)

    def stage(two: bool) -> Callable[[], Tensor]:
        def loss() -> Tensor:
            session.tcfg = dataclasses.replace(tcfg, stage="pretrain2" if two else "pretrain1")
            return session.loss_parts(tokens, idx, views1, views2)[1]
        return loss

    def finetune() -> Tensor:
        return obj.focal_loss(session.model.classify(x["mri"], x["pet"]), labels, 3.0)

    return session.model, {"stage1": stage(False), "stage2": stage(True), "finetune": finetune}


def check_loss(model, loss_fn: Callable[[], Tensor], rng: np.random.Generator, per_tensor: int = 2,
               floor: float = 1e-7) -> tuple[float, str]:
    """Worst relative error over sampled coordinates of every parameter; returns ``(err, where)``."""
    model.zero_grad()
    loss_fn().backward()
    grads = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for n, p in model.named_parameters()}

    def value() -> float:
        with nx.no_grad():
            return float(loss_fn().data)

    worst, where = 0.0, ""
    for name, p in model.named_parameters():
        flat = rng.choice(p.size, size=min(per_tensor, p.size), replace=False)
        for f in flat:
            index = np.unravel_index(int(f), p.shape)
            err = rel_err(float(grads[name][index]), fd_derivative(value, p.data, index), floor)
            if err > worst:
                worst, where = err, f"{name}{list(index)}"
    model.zero_grad()
    return worst, where


def loss_grad_suite(seed: int = 0, tol: float = GRAD_TOL, per_tensor: int = 2) -> SuiteResult:
    t0 = time.perf_counter()
    res = SuiteResult("grad-losses", True)
    model, losses = composed_losses(seed=seed)
    rng = np.random.default_rng(seed + 1)
    for name, fn in losses.items():
        err, where = check_loss(model, fn, rng, per_tensor)
        res.notes.append(f"{name} {err:.1e}")
        if not err <= tol:
            res.ok = False
            res.failures.append(f"loss {name} rel err {err:.2e} at {where}")
    res.seconds = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------------------
# identities and round-trips
# ---------------------------------------------------------------------------

def loss_identity_suite(seed: int = 0) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    res = SuiteResult("losses", True)

    def expect(name: str, ok: bool, detail: str = "") -> None:
        if not ok:
            res.ok = False
            res.failures.append(f"{name} {detail}".strip())

    a = Tensor(nx.l2_normalize(Tensor(rng.normal(size=(1, 8)))).data)
    b = Tensor(nx.l2_normalize(Tensor(rng.normal(size=(1, 8)))).data)
    for name, v in (("intra_nce@B=1", obj.intra_nce(a, b)), ("inter_nce@B=1", obj.inter_nce(a, b))):
        expect(name, abs(float(v.data)) <= 1e-12, f"= {float(v.data):.3e}")

    logits = Tensor(rng.normal(size=(6, 3)) * 2)
    labels = rng.integers(0, 3, size=6)
    diff = abs(float(obj.focal_loss(logits, labels, 0.0).data) - float(obj.cross_entropy(logits, labels).data))
    expect("focal(gamma=0)==cross_entropy", diff <= 1e-12, f"diff {diff:.3e}")

    parts = obj.LossParts(*(Tensor(np.float64(v)) for v in rng.uniform(0.1, 2.0, size=4)), inter=Tensor(np.float64(3.3)))
    s1 = float(obj.stage1_loss(parts, 0.005).data)
    s2 = float(obj.stage2_loss(parts, 0.005, 0.0).data)
    expect("stage2(lambda=0)==stage1", s1 == s2, f"{s1!r} vs {s2!r}")

    beta, k = 0.999, 500
    shadow0 = rng.normal(size=(4, 5))
    online = rng.normal(size=(4, 5))
    shadow = shadow0.copy()
    for _ in range(k):
        obj.ema_update([shadow], [online], beta)
    closed = online + beta ** k * (shadow0 - online)
    err = float(np.max(np.abs(shadow - closed) / np.maximum(np.abs(closed), 1e-12)))
    expect("ema closed form", err <= 1e-6, f"rel err {err:.2e}")
    res.seconds = time.perf_counter() - t0
    return res


def format_suite(seed: int = 0) -> SuiteResult:
    from .trainer import PretrainSession, checkpoint_bytes, load_checkpoint

    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    res = SuiteResult("formats", True)

    def expect(name: str, ok: bool) -> None:
        if not ok:
            res.ok = False
            res.failures.append(name)

    vis, masked = random_mask(512, 0.75, rng)
    expect("mask 512@0.75 -> 384 masked / 128 visible", len(masked) == 384 and len(vis) == 128)
    expect("mask partition", np.array_equal(np.sort(np.concatenate([vis, masked])), np.arange(512)))
    for dtype in (np.float32, np.float64):
        vol = rng.normal(size=(16, 24, 32)).astype(dtype)
        back = unpatchify(patchify(vol, 8), 8, vol.shape)
        expect(f"patchify round-trip {np.dtype(dtype).name}", back.dtype == vol.dtype and back.tobytes() == vol.tobytes())
    with tempfile.TemporaryDirectory() as tmp:
        vol = rng.uniform(size=(8, 12, 16)).astype(np.float32)
        path = Path(tmp) / "v.cmv"
        write_volume(path, vol, "pet", 2)
        back, modality, label = read_volume(path)
        expect("volume round-trip", back.tobytes() == vol.tobytes() and modality == "pet" and label == 2)

        cfg = ModelConfig(volume_size=16, patch_size=8, d_model=8, depth=1, d_proj=8).validate()
        ck = PretrainSession(cfg, TrainConfig(batch_size=2)).checkpoint()
        raw = checkpoint_bytes(ck)
        cpath = Path(tmp) / "c.ckpt"
        cpath.write_bytes(raw)
        back_ck = load_checkpoint(cpath)
        expect("checkpoint round-trip", checkpoint_bytes(back_ck) == raw)
    res.seconds = time.perf_counter() - t0
    return res


SUITES: dict[str, Callable[[], SuiteResult]] = {
    "scan": scan_suite,
    "grad-ops": op_grad_suite,
    "grad-losses": loss_grad_suite,
    "losses": loss_identity_suite,
    "formats": format_suite,
}


def run_all(names=None, out=None) -> bool:
    """Run the named suites (default: all), print one line each, return overall success."""
    ok = True
    for name in names or SUITES:
        result = SUITES[name]()
        ok &= result.ok
        print(result.line(), file=out, flush=True)
    return ok
