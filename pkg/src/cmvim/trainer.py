"""Optimisation: AdamW + cosine decay, two pretraining stages, fine-tuning, checkpoints.

Checkpoint file layout (all integers little-endian)::

    b"CMVIMCKP" | u32 version | u64 manifest length | manifest (UTF-8) | blob

Each manifest line is ``name<TAB>dtype<TAB>shape<TAB>offset`` where shape is
``x``-joined extents (empty for scalars) and offset is relative to the blob
start. The record ``__meta__`` is a uint8 JSON document holding configs, stage,
counters and RNG states.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .config import ModelConfig, TrainConfig
from .data import Dataset
from .metrics import EvalReport
from .model import MODALITIES, CMViM, MaskView, patchify
from .objectives import (LossParts, ema_update, focal_loss, inter_nce, intra_nce, mse_recon,
                         normalize_patches, stage1_loss, stage2_loss)
from .nn import LayerNorm, MLP, normal
from .numerics import Tensor

CKPT_MAGIC = b"CMVIMCKP"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# schedule and optimiser
# ---------------------------------------------------------------------------

def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0) -> float:
    """Half-cosine from ``base_lr`` at step 0 to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup_steps) / span))


def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
               lr: float, weight_decay: float = 0.05, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> None:
    """One in-place AdamW update; ``step`` counts from 1."""
    if step < 1:
        raise ValueError("AdamW step counter starts at 1")
    param *= 1.0 - lr * weight_decay
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    def __init__(self, named_params: list[tuple[str, nx.Parameter]], weight_decay: float = 0.05,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(named_params)
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0
        self.weight_decay, self.beta1, self.beta2, self.eps = weight_decay, beta1, beta2, eps

    def step(self, lr: float) -> None:
        """Update every parameter that has a gradient; parameters without one are left alone."""
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in parameter {name}")
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adamw_step(p.data, p.grad.astype(p.dtype, copy=False), self.m[name], self.v[name], self.t,
                       lr, self.weight_decay, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    stage: str
    params: dict[str, np.ndarray]
    target: dict[str, np.ndarray] = field(default_factory=dict)
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    step: int = 0
    epoch: int = 0
    ema_updates: int = 0
    rng: dict = field(default_factory=dict)
    history: list = field(default_factory=list, compare=False, repr=False)

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"param/{k}", v) for k, v in self.params.items()]
        out += [(f"ema/{k}", v) for k, v in self.target.items()]
        out += [(f"adam_m/{k}", v) for k, v in self.adam_m.items()]
        out += [(f"adam_v/{k}", v) for k, v in self.adam_v.items()]
        return out

    def meta(self) -> dict:
        return {
            "model_config": dataclasses.asdict(self.model_config),
            "train_config": dataclasses.asdict(self.train_config),
            "stage": self.stage, "adam_t": self.adam_t, "step": self.step, "epoch": self.epoch,
            "ema_updates": self.ema_updates, "rng": self.rng,
        }


def _manifest_line(name: str, arr: np.ndarray, offset: int) -> str:
    shape = "x".join(str(s) for s in arr.shape)
    return f"{name}\t{arr.dtype.str}\t{shape}\t{offset}"


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = np.frombuffer(json.dumps(ckpt.meta(), sort_keys=True).encode("utf-8"), dtype=np.uint8)
    records = [("__meta__", meta)] + ckpt.arrays()
    lines, blobs, offset = [], [], 0
    for name, arr in records:
        if "\t" in name or "\n" in name:
            raise CheckpointError(f"illegal parameter name {name!r}")
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        lines.append(_manifest_line(name, arr, offset))
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    return CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(manifest)) + manifest + b"".join(blobs)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def parse_manifest(manifest: str) -> list[tuple[str, np.dtype, tuple, int]]:
    records = []
    for line in manifest.splitlines():
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise CheckpointError(f"malformed manifest line {line!r}")
        name, dt, shape, off = parts
        try:
            shape_t = tuple(int(s) for s in shape.split("x")) if shape else ()
            records.append((name, np.dtype(dt), shape_t, int(off)))
        except (TypeError, ValueError):
            raise CheckpointError(f"malformed manifest line {line!r}") from None
    return records


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    head = len(CKPT_MAGIC) + 12
    if len(raw) < head:
        raise CheckpointError(f"{path}: truncated header")
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    version, mlen = struct.unpack("<IQ", raw[8:head])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if head + mlen > len(raw):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        records = parse_manifest(raw[head:head + mlen].decode("utf-8"))
    except UnicodeDecodeError:
        raise CheckpointError(f"{path}: manifest is not UTF-8") from None
    blob = memoryview(raw)[head + mlen:]
    arrays: dict[str, np.ndarray] = {}
    expected = 0
    for name, dt, shape, off in records:
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        if off != expected or off + nbytes > len(blob):
            raise CheckpointError(f"{path}: record {name} at offset {off} ({nbytes} bytes) does not fit the blob")
        if name in arrays:
            raise CheckpointError(f"{path}: duplicate record {name}")
        arrays[name] = np.frombuffer(blob[off:off + nbytes], dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        expected = off + nbytes
    if expected != len(blob):
        raise CheckpointError(f"{path}: blob has {len(blob)} bytes, manifest accounts for {expected}")
    if "__meta__" not in arrays:
        raise CheckpointError(f"{path}: missing __meta__ record")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode("utf-8"))
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "ema": {}, "adam_m": {}, "adam_v": {}}
    for name, arr in arrays.items():
        kind, _, key = name.partition("/")
        if kind not in groups:
            raise CheckpointError(f"{path}: unknown record group in {name}")
        groups[kind][key] = arr
    return Checkpoint(
        model_config=ModelConfig(**meta["model_config"]), train_config=TrainConfig(**meta["train_config"]),
        stage=meta["stage"], params=groups["param"], target=groups["ema"], adam_m=groups["adam_m"],
        adam_v=groups["adam_v"], adam_t=meta["adam_t"], step=meta["step"], epoch=meta["epoch"],
        ema_updates=meta["ema_updates"], rng=meta["rng"])


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

class TokenCache:
    """Patchified volumes for a dataset, cast to the model dtype."""

    def __init__(self, ds: Dataset, cfg: ModelConfig):
        self.mri = patchify(ds.mri, cfg.patch_size).astype(cfg.np_dtype)
        self.pet = patchify(ds.pet, cfg.patch_size).astype(cfg.np_dtype)
        self.labels = ds.labels
        if cfg.norm_pix:
            self.target = {"mri": normalize_patches(self.mri), "pet": normalize_patches(self.pet)}
        else:
            self.target = {"mri": self.mri, "pet": self.pet}

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, idx) -> dict[str, np.ndarray]:
        return {"mri": self.mri[idx], "pet": self.pet[idx]}


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _rng_state(g: np.random.Generator) -> dict:
    return g.bit_generator.state


def _rng_from(state: dict) -> np.random.Generator:
    g = np.random.default_rng()
    g.bit_generator.state = state
    return g


class MetricsLog:
    """Append-only ``epoch<TAB>key<TAB>value`` lines."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None

    def write(self, epoch: int, values: dict[str, float]) -> None:
        if self.path is None:
            return
        with open(self.path, "a", encoding="utf-8") as fh:
            for k, v in values.items():
                fh.write(f"{epoch}\t{k}\t{v!r}\n")


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

class PretrainSession:
    """Owns the online model, its EMA target, the optimiser and the RNG streams."""

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, checkpoint: Checkpoint | None = None):
        self.mcfg, self.tcfg = model_cfg.validate(), train_cfg.validate()
        self.model = CMViM(model_cfg, seed=train_cfg.seed)
        if checkpoint is not None:
            self.model.load_state_dict(checkpoint.params)
        self.target = self.model.make_target()
        if checkpoint is not None and checkpoint.target:
            self.target.load_state_dict(checkpoint.target)
        self.pairs = self.model.target_pairs(self.target)
        self.opt = AdamW(list(self.model.named_parameters()), train_cfg.weight_decay,
                         train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps)
        seeds = np.random.SeedSequence(train_cfg.seed).spawn(3)
        self.rng = {"data": np.random.default_rng(seeds[0]), "view1": np.random.default_rng(seeds[1]),
                    "view2": np.random.default_rng(seeds[2])}
        self.step_count = 0
        self.epoch = 0
        self.ema_updates = 0
        if checkpoint is not None:
            same_stage = checkpoint.stage == train_cfg.stage
            if same_stage or not train_cfg.fresh_moments:
                for k in self.opt.m:
                    if k in checkpoint.adam_m:
                        self.opt.m[k][...] = checkpoint.adam_m[k]
                        self.opt.v[k][...] = checkpoint.adam_v[k]
                self.opt.t = checkpoint.adam_t
            if same_stage:
                self.step_count, self.epoch = checkpoint.step, checkpoint.epoch
            self.ema_updates = checkpoint.ema_updates
            for k, state in checkpoint.rng.items():
                if k in self.rng:
                    self.rng[k] = _rng_from(state)
        self.history: list[dict[str, float]] = []

    @property
    def stage2(self) -> bool:
        return self.tcfg.stage == "pretrain2"

    def loss_parts(self, tokens: TokenCache, idx: np.ndarray, views1=None, views2=None) -> tuple[LossParts, Tensor]:
        cfg, t = self.mcfg, self.tcfg
        x = tokens.batch(idx)
        B = len(idx)
        if views1 is None:
            views1 = {m: MaskView.sample(B, cfg.n_tokens, t.mask_ratio, self.rng["view1"]) for m in MODALITIES}
        if views2 is None:
            views2 = {m: MaskView.sample(B, cfg.n_tokens, t.mask_ratio, self.rng["view2"]) for m in MODALITIES}
        out = self.model.forward_pretrain(x, views1)
        s2 = self.target(x, views2)
        scope = None if cfg.recon_scope == "full" else "masked"
        rec = {m: mse_recon(out.recon[m], tokens.target[m][idx],
                            views1[m].masked if scope else None) for m in MODALITIES}
        intra = {m: intra_nce(out.s_online[m], s2[m], cfg.temperature) for m in MODALITIES}
        parts = LossParts(rec["mri"], rec["pet"], intra["mri"], intra["pet"])
        if self.stage2:
            z = self.model.inter_projections(out.c)
            parts.inter = inter_nce(z["mri"], z["pet"], cfg.temperature)
            loss = stage2_loss(parts, t.alpha, t.lambda_inter)
        else:
            loss = stage1_loss(parts, t.alpha)
        return parts, loss

    def train_step(self, tokens: TokenCache, idx: np.ndarray, lr: float) -> dict[str, float]:
        parts, loss = self.loss_parts(tokens, idx)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at step {self.step_count}")
        self.opt.zero_grad()
        loss.backward()
        if self.tcfg.grad_clip > 0:
            clip_grad_norm(self.opt.params.values(), self.tcfg.grad_clip)
        self.opt.step(lr)
        ema_update([s for s, _ in self.pairs], [o for _, o in self.pairs], self.tcfg.ema_momentum)
        self.ema_updates += 1
        self.step_count += 1
        rec = parts.values()
        rec["total"] = value
        return rec

    def total_steps(self, n: int) -> int:
        per_epoch = math.ceil(n / self.tcfg.batch_size)
        return self.tcfg.max_steps or self.tcfg.epochs * per_epoch

    def run(self, data: Dataset, log: MetricsLog | None = None,
            on_epoch: Callable[["PretrainSession"], None] | None = None) -> Checkpoint:
        tokens = TokenCache(data, self.mcfg)
        total = self.total_steps(len(tokens))
        log = log or MetricsLog()
        while self.step_count < total:
            sums: dict[str, float] = {}
            count = 0
            for idx in _batches(len(tokens), self.tcfg.batch_size, self.rng["data"]):
                if self.step_count >= total:
                    break
                lr = cosine_lr(self.step_count, total, self.tcfg.lr, self.tcfg.warmup_steps)
                rec = self.train_step(tokens, idx, lr)
                self.history.append(rec)
                for k, v in rec.items():
                    sums[k] = sums.get(k, 0.0) + v
                count += 1
            self.epoch += 1
            if count:
                log.write(self.epoch, {k: v / count for k, v in sums.items()})
            if on_epoch is not None:
                on_epoch(self)
        return self.checkpoint()

    def checkpoint(self) -> Checkpoint:
        ck = Checkpoint(
            model_config=copy.deepcopy(self.mcfg), train_config=copy.deepcopy(self.tcfg), stage=self.tcfg.stage,
            params={k: v.copy() for k, v in self.model.state_dict().items()},
            target={k: v.copy() for k, v in self.target.state_dict().items()},
            adam_m={k: v.copy() for k, v in self.opt.m.items()},
            adam_v={k: v.copy() for k, v in self.opt.v.items()},
            adam_t=self.opt.t, step=self.step_count, epoch=self.epoch, ema_updates=self.ema_updates,
            rng={k: _rng_state(g) for k, g in self.rng.items()})
        ck.history = list(self.history)
        return ck


def run_stage1(model_cfg: ModelConfig, train_cfg: TrainConfig, data: Dataset,
               checkpoint: Checkpoint | None = None, log_path=None) -> Checkpoint:
    """Reconstruction + intra-modal contrastive pretraining."""
    cfg = dataclasses.replace(train_cfg, stage="pretrain1")
    return PretrainSession(model_cfg, cfg, checkpoint).run(data, MetricsLog(log_path))


def run_stage2(model_cfg: ModelConfig, train_cfg: TrainConfig, data: Dataset, checkpoint: Checkpoint,
               log_path=None) -> Checkpoint:
    """Stage one plus the inter-modal term; starts from a stage-one checkpoint."""
    if checkpoint is None or checkpoint.stage not in ("pretrain1", "pretrain2"):
        raise TrainingError("stage-2 requires stage-1 checkpoint")
    cfg = dataclasses.replace(train_cfg, stage="pretrain2")
    return PretrainSession(model_cfg, cfg, checkpoint).run(data, MetricsLog(log_path))


def inter_projections(model: CMViM, data: Dataset, mask_ratio: float, seed: int = 1234,
                      batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """``z_mri, z_pet`` for every sample, using one fixed-seed masked view."""
    tokens = TokenCache(data, model.cfg)
    rng = np.random.default_rng(seed)
    zs = {m: [] for m in MODALITIES}
    with nx.no_grad():
        for start in range(0, len(tokens), batch_size):
            idx = np.arange(start, min(start + batch_size, len(tokens)))
            views = {m: MaskView.sample(len(idx), model.cfg.n_tokens, mask_ratio, rng) for m in MODALITIES}
            out = model.forward_pretrain(tokens.batch(idx), views)
            z = model.inter_projections(out.c)
            for m in MODALITIES:
                zs[m].append(z[m].data)
    return np.concatenate(zs["mri"]), np.concatenate(zs["pet"])


def alignment_gap(model: CMViM, data: Dataset, mask_ratio: float = 0.75, seed: int = 1234) -> float:
    """Mean cosine of true (z_mri, z_pet) pairs minus the mean over mismatched pairs."""
    z_mri, z_pet = inter_projections(model, data, mask_ratio, seed)
    sim = z_mri.astype(np.float64) @ z_pet.astype(np.float64).T
    n = sim.shape[0]
    true = np.trace(sim) / n
    off = (sim.sum() - np.trace(sim)) / (n * (n - 1))
    return float(true - off)


def model_from_checkpoint(ckpt: Checkpoint) -> CMViM:
    model = CMViM(ckpt.model_config, seed=ckpt.train_config.seed)
    model.load_state_dict(ckpt.params)
    return model


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    report: EvalReport
    history: list[dict]
    best_epoch: int

    def epochs_to(self, threshold: float, key: str = "test_acc") -> int | None:
        """First epoch (1-based) whose ``key`` metric reaches ``threshold``."""
        for rec in self.history:
            if rec[key] >= threshold:
                return rec["epoch"]
        return None


def predict_scores(model: CMViM, data: Dataset | TokenCache, batch_size: int = 32) -> np.ndarray:
    tokens = data if isinstance(data, TokenCache) else TokenCache(data, model.cfg)
    out = []
    with nx.no_grad():
        for start in range(0, len(tokens), batch_size):
            idx = np.arange(start, min(start + batch_size, len(tokens)))
            x = tokens.batch(idx)
            out.append(nx.softmax(model.classify(x["mri"], x["pet"]), axis=-1).data)
    return np.concatenate(out).astype(np.float64)


def evaluate(model: CMViM, data: Dataset | TokenCache, batch_size: int = 32) -> EvalReport:
    tokens = data if isinstance(data, TokenCache) else TokenCache(data, model.cfg)
    return EvalReport.from_scores(predict_scores(model, tokens, batch_size), tokens.labels)


def _fresh_head(model: CMViM, seed: int) -> None:
    rng = np.random.default_rng([seed, 7])
    cfg = model.cfg
    model.head.norm = LayerNorm(cfg.d_model, cfg.np_dtype)
    model.head.mlp = MLP(rng, cfg.d_model, cfg.head_hidden or cfg.d_model, cfg.num_classes, cfg.np_dtype)
    if cfg.use_class_token:
        model.cls_token = normal(rng, (cfg.d_model,), 0.02, cfg.np_dtype)


def run_finetune(model_cfg: ModelConfig, train_cfg: TrainConfig, train: Dataset, val: Dataset, test: Dataset,
                 checkpoint: Checkpoint | None = None, log_path=None) -> FinetuneResult:
    """Full-model fine-tuning with focal loss; keeps the epoch with the best validation accuracy.

    ``checkpoint=None`` trains from scratch.
    """
    tcfg = dataclasses.replace(train_cfg, stage="finetune").validate()
    model = CMViM(model_cfg, seed=tcfg.seed)
    if checkpoint is not None:
        model.load_state_dict(checkpoint.params)
    _fresh_head(model, tcfg.seed)
    opt = AdamW(list(model.named_parameters()), tcfg.weight_decay, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)
    rng = np.random.default_rng(np.random.SeedSequence(tcfg.seed).spawn(4)[3])
    tr, va, te = (TokenCache(d, model_cfg) for d in (train, val, test))
    per_epoch = math.ceil(len(tr) / tcfg.batch_size)
    total = tcfg.max_steps or tcfg.epochs * per_epoch
    log = MetricsLog(log_path)
    history: list[dict] = []
    best = (-1.0, 0, None)
    step = 0
    for epoch in range(1, tcfg.epochs + 1):
        losses = []
        for idx in _batches(len(tr), tcfg.batch_size, rng):
            if step >= total:
                break
            x = tr.batch(idx)
            loss = focal_loss(model.classify(x["mri"], x["pet"]), tr.labels[idx], tcfg.focal_gamma)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at finetune step {step}")
            opt.zero_grad()
            loss.backward()
            if tcfg.grad_clip > 0:
                clip_grad_norm(opt.params.values(), tcfg.grad_clip)
            opt.step(cosine_lr(step, total, tcfg.lr, tcfg.warmup_steps))
            losses.append(value)
            step += 1
        val_rep, test_rep = evaluate(model, va), evaluate(model, te)
        rec = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"),
               "val_acc": val_rep.accuracy, "test_acc": test_rep.accuracy, "test_auc": test_rep.auc}
        history.append(rec)
        log.write(epoch, {k: v for k, v in rec.items() if k != "epoch"})
        if val_rep.accuracy > best[0]:
            best = (val_rep.accuracy, epoch, {k: v.copy() for k, v in model.state_dict().items()})
        if step >= total:
            break
    model.load_state_dict(best[2])
    report = evaluate(model, te)
    ck = Checkpoint(model_config=copy.deepcopy(model_cfg), train_config=tcfg, stage="finetune",
                    params=best[2], adam_t=opt.t, step=step, epoch=best[1])
    return FinetuneResult(ck, report, history, best[1])
