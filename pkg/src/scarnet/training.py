"""Optimization: Adam with per-epoch exponential learning-rate decay,
gradient accumulation, checkpointing and a finite-difference gradient check."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional

import numpy as np
import torch

from .errors import CheckpointError, ConfigError, NumericError
from .losses import LossWeights, combined_loss
from .phantom import MYOCARDIUM, SCAR, AugmentParams, augment_train

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    decay_per_epoch: float = 0.05
    epochs: int = 100
    micro_batch: int = 4
    accum_steps: int = 4
    seed: int = 0
    val_fraction: float = 0.1
    dtype: str = "float32"
    checkpoint_every: int = 1

    def validate(self):
        if not 0 < self.decay_per_epoch < 1:
            raise ConfigError("train.decay_per_epoch must lie in (0, 1)")
        if self.lr0 <= 0:
            raise ConfigError("train.lr0 must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("train.beta1/beta2 must lie in [0, 1)")
        if self.epochs < 0 or self.micro_batch < 1 or self.accum_steps < 1:
            raise ConfigError("train.epochs >= 0, micro_batch >= 1 and accum_steps >= 1 required")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("train.val_fraction must lie in [0, 1)")
        if self.dtype not in DTYPES:
            raise ConfigError(f"train.dtype must be one of {sorted(DTYPES)}")
        if self.seed < 0:
            raise ConfigError("train.seed must be unsigned")

    @property
    def effective_batch(self):
        return self.micro_batch * self.accum_steps


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * (1 - cfg.decay_per_epoch) ** epoch


# -- Adam ------------------------------------------------------------------

def adam_step(params: Dict[str, torch.Tensor], grads: Dict[str, torch.Tensor], state: dict,
              lr: float, beta1: float, beta2: float, eps: float = 1e-8) -> dict:
    """One bias-corrected adaptive-moment update, applied in place.

    ``state`` holds ``m`` and ``v`` (dicts of tensors keyed like ``params``)
    and the step counter ``t``; missing entries start at zero.
    """
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter '{name}'")
    m, v = state.setdefault("m", {}), state.setdefault("v", {})
    t = state.get("t", 0) + 1
    state["t"] = t
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            if name not in m:
                m[name] = torch.zeros_like(p)
                v[name] = torch.zeros_like(p)
            m[name].mul_(beta1).add_(g, alpha=1 - beta1)
            v[name].mul_(beta2).addcmul_(g, g, value=1 - beta2)
            p.sub_(lr * (m[name] / c1) / ((v[name] / c2).sqrt() + eps))
    return state


class Adam:
    """Thin stateful wrapper over :func:`adam_step` for named parameters."""

    def __init__(self, named_params, beta1=0.9, beta2=0.99, eps=1e-8):
        self.params = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {"m": {}, "v": {}, "t": 0}

    def step(self, lr):
        grads = {n: p.grad for n, p in self.params.items()}
        adam_step(self.params, grads, self.state, lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# -- stepping ----------------------------------------------------------------

class Trainer:
    """Accumulates micro-batch gradients and steps every ``accum_steps``."""

    def __init__(self, model, cfg: TrainConfig, loss_weights: LossWeights = LossWeights()):
        self.model = model
        self.cfg = cfg
        self.loss_weights = loss_weights
        self.optimizer = Adam(model.named_parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps)
        self.pending = 0

    def train_step(self, images, labels, epoch: int):
        """Forward/backward one micro-batch; returns (components, stepped)."""
        self.model.train()
        total, parts = combined_loss(self.model(images), labels, self.loss_weights)
        (total / self.cfg.accum_steps).backward()
        self.pending += 1
        stepped = False
        if self.pending == self.cfg.accum_steps:
            self._apply(epoch)
            stepped = True
        return {k: float(v.detach()) for k, v in parts.items()}, stepped

    def flush(self, epoch: int) -> bool:
        """Step on a partial accumulation window (end of epoch)."""
        if self.pending == 0:
            return False
        scale = self.cfg.accum_steps / self.pending
        for p in self.optimizer.params.values():
            if p.grad is not None:
                p.grad.mul_(scale)
        self._apply(epoch)
        return True

    def _apply(self, epoch):
        self.optimizer.step(lr_at(epoch, self.cfg))
        self.optimizer.zero_grad()
        self.pending = 0


# -- checkpoint container ----------------------------------------------------

MAGIC = b"SCARCKPT"
VERSION = 1


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    epoch: int = 0
    rng_state: Optional[dict] = None
    torch_rng: Optional[str] = None
    config: dict = field(default_factory=dict)

    @property
    def config_hash(self):
        return config_hash(self.config)


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(path, ckpt: Checkpoint):
    meta = {
        "adam_t": ckpt.adam_t,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "torch_rng": ckpt.torch_rng,
        "config": ckpt.config,
    }
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    records = [("param/" + n, a) for n, a in ckpt.params.items()]
    records += [("adam.m/" + n, a) for n, a in ckpt.adam_m.items()]
    records += [("adam.v/" + n, a) for n, a in ckpt.adam_v.items()]
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", VERSION) + bytes.fromhex(ckpt.config_hash))
        fh.write(struct.pack("<Q", len(meta_raw)) + meta_raw)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            fh.write(_pack_record(name, arr))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    buf = path.read_bytes()
    try:
        if buf[:8] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack_from("<I", buf, 8)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        stored_hash = buf[12:44].hex()
        (meta_len,) = struct.unpack_from("<Q", buf, 44)
        off = 52
        meta = json.loads(buf[off:off + meta_len])
        off += meta_len
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        groups = {"param": {}, "adam.m": {}, "adam.v": {}}
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + ln].decode()
            off += ln
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", buf, off)
            off += 8 * ndim
            count = math.prod(shape)
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
            off += 8 * count
            kind, _, pname = name.partition("/")
            groups[kind][pname] = arr
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    ckpt = Checkpoint(groups["param"], groups["adam.m"], groups["adam.v"], meta["adam_t"], meta["epoch"],
                      meta["rng_state"], meta["torch_rng"], meta["config"])
    if ckpt.config_hash != stored_hash:
        raise CheckpointError(f"{path}: config hash mismatch")
    return ckpt


def snapshot(model, trainer: Optional[Trainer], epoch, rng: Optional[np.random.Generator], config: dict) -> Checkpoint:
    params = {n: p.detach().cpu().double().numpy().copy() for n, p in model.named_parameters()}
    m, v, t = {}, {}, 0
    if trainer is not None:
        st = trainer.optimizer.state
        m = {n: x.detach().cpu().double().numpy().copy() for n, x in st["m"].items()}
        v = {n: x.detach().cpu().double().numpy().copy() for n, x in st["v"].items()}
        t = st["t"]
    return Checkpoint(params, m, v, t, epoch,
                      None if rng is None else rng.bit_generator.state,
                      torch.random.get_rng_state().numpy().tobytes().hex(), config)


def restore_model(model, ckpt: Checkpoint):
    own = dict(model.named_parameters())
    if set(own) != set(ckpt.params):
        missing = sorted(set(own) ^ set(ckpt.params))
        raise CheckpointError(f"checkpoint parameters do not match the model: {missing[:5]}")
    with torch.no_grad():
        for n, p in own.items():
            arr = ckpt.params[n]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(f"parameter '{n}': checkpoint shape {arr.shape} vs model {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr).to(p.dtype))
    return model


def restore_trainer(trainer: Trainer, ckpt: Checkpoint):
    dtype = next(iter(trainer.optimizer.params.values())).dtype
    st = trainer.optimizer.state
    st["m"] = {n: torch.from_numpy(a).to(dtype) for n, a in ckpt.adam_m.items()}
    st["v"] = {n: torch.from_numpy(a).to(dtype) for n, a in ckpt.adam_v.items()}
    st["t"] = ckpt.adam_t


# -- training loop -----------------------------------------------------------

LOG_COLUMNS = ["epoch", "lr", "loss_total", "loss_dice", "loss_ftl", "loss_ce",
               "train_dice_myo", "train_dice_scar", "val_dice_myo", "val_dice_scar"]


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list
    checkpoint: Checkpoint


def split_validation(n: int, fraction: float, seed: int):
    n_val = int(math.floor(fraction * n))
    order = np.random.default_rng([seed, 0x5A11]).permutation(n)
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def _batch_dice(model, samples, dtype):
    from .evaluation import dice_score
    if not samples:
        return float("nan"), float("nan")
    model.eval()
    myo, scar = [], []
    with torch.no_grad():
        for i in range(0, len(samples), 8):
            chunk = samples[i:i + 8]
            x = torch.from_numpy(np.stack([s.image for s in chunk])).to(dtype)
            pred = model(x).argmax(dim=1).numpy()
            for s, p in zip(chunk, pred):
                myo.append(dice_score(p, s.mask, MYOCARDIUM))
                scar.append(dice_score(p, s.mask, SCAR))
    return float(np.mean(myo)), float(np.mean(scar))


def train(samples, cfg, out_dir=None, resume: Optional[Checkpoint] = None,
          on_epoch: Optional[Callable[[dict], bool]] = None) -> TrainResult:
    """Train a model on ``samples`` according to a full run config.

    ``cfg`` is a :class:`scarnet.config.RunConfig`. When ``out_dir`` is given,
    the epoch log (``train_log.csv``) and ``checkpoint.bin`` are written
    there. ``on_epoch`` receives each log row and may return True to stop.
    """
    from .model import build_model

    tc: TrainConfig = cfg.train
    tc.validate()
    if len(samples) == 0:
        raise ValueError("cannot train on an empty dataset")
    dtype = DTYPES[tc.dtype]
    config_dict = cfg.to_dict()

    model = build_model(cfg.model, seed=tc.seed, dtype=dtype)
    trainer = Trainer(model, tc, cfg.loss)
    rng = np.random.default_rng(tc.seed)
    start = 0
    if resume is not None:
        restore_model(model, resume)
        restore_trainer(trainer, resume)
        rng.bit_generator.state = resume.rng_state
        torch.random.set_rng_state(torch.from_numpy(np.frombuffer(bytes.fromhex(resume.torch_rng), dtype=np.uint8).copy()))
        start = resume.epoch
    else:
        torch.manual_seed(tc.seed)

    train_idx, val_idx = split_validation(len(samples), tc.val_fraction, tc.seed)
    train_set = [samples[i] for i in train_idx]
    val_set = [samples[i] for i in val_idx]

    out = None if out_dir is None else Path(out_dir)
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        kept = []
        if resume is not None and log_path.exists():
            with open(log_path, newline="") as fh:
                kept = [r for r in list(csv.reader(fh))[1:] if r and int(r[0]) < start]
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            w.writerows(kept)

    aug = cfg.data.augment
    history = []
    ckpt = snapshot(model, trainer, start, rng, config_dict)
    for epoch in range(start, tc.epochs):
        order = rng.permutation(len(train_set))
        sums = {"total": 0.0, "dice": 0.0, "ftl": 0.0, "ce": 0.0}
        n_batches = 0
        for b in range(0, len(order), tc.micro_batch):
            chunk = [train_set[i] for i in order[b:b + tc.micro_batch]]
            pairs = [augment_train((s.image, s.mask), aug, rng) for s in chunk]
            x = torch.from_numpy(np.stack([p[0] for p in pairs])).to(dtype)
            y = torch.from_numpy(np.stack([p[1] for p in pairs]).astype(np.int64))
            parts, _ = trainer.train_step(x, y, epoch)
            for k in sums:
                sums[k] += parts[k]
            n_batches += 1
        trainer.flush(epoch)

        tr_myo, tr_scar = _batch_dice(model, train_set, dtype)
        va_myo, va_scar = _batch_dice(model, val_set, dtype)
        row = {"epoch": epoch, "lr": lr_at(epoch, tc),
               "loss_total": sums["total"] / n_batches, "loss_dice": sums["dice"] / n_batches,
               "loss_ftl": sums["ftl"] / n_batches, "loss_ce": sums["ce"] / n_batches,
               "train_dice_myo": tr_myo, "train_dice_scar": tr_scar,
               "val_dice_myo": va_myo, "val_dice_scar": va_scar}
        history.append(row)
        log.info("epoch %d lr %.3g loss %.4f dice myo %.3f scar %.3f", epoch, row["lr"],
                 row["loss_total"], tr_myo, tr_scar)

        ckpt = snapshot(model, trainer, epoch + 1, rng, config_dict)
        if out is not None:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh).writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in LOG_COLUMNS])
            if (epoch + 1) % tc.checkpoint_every == 0 or epoch + 1 == tc.epochs:
                save_checkpoint(out / "checkpoint.bin", ckpt)
        if on_epoch is not None and on_epoch(row):
            break
    if out is not None and tc.epochs == start:
        save_checkpoint(out / "checkpoint.bin", ckpt)
    return TrainResult(model, history, ckpt)


# -- gradient verification ---------------------------------------------------

@dataclass
class GradCheckReport:
    errors: Dict[str, float]
    tolerance: float

    @property
    def worst(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def worst_group(self):
        return max(self.errors, key=self.errors.get) if self.errors else None

    @property
    def passed(self):
        return self.worst < self.tolerance


def check_gradients(loss_fn: Callable[[], torch.Tensor], tensors: Dict[str, torch.Tensor],
                    analytic: Optional[Dict[str, torch.Tensor]] = None, entries: Optional[int] = None,
                    step: float = 1e-4, tolerance: float = 1e-3, seed: int = 0,
                    floor: float = 1e-6) -> GradCheckReport:
    """Compare autograd gradients of ``loss_fn()`` with central differences.

    ``tensors`` are leaf tensors read by ``loss_fn``. ``entries`` limits how
    many randomly chosen elements of each tensor are probed (all if None).
    The error of a group is ``max|a - n| / max(max|n|, floor)``. The floor
    keeps gradients that are exactly zero in theory (a bias feeding a
    normalization layer) from dividing round-off noise by round-off noise.
    Max-pooling and channel-max maps are only piecewise smooth: if a probe
    moves two pooled values past each other the difference quotient is off
    by O(1). A smaller ``step`` (1e-6 still leaves float64 round-off near
    1e-11) makes that unlikely.
    """
    if analytic is None:
        for t in tensors.values():
            t.grad = None
        loss = loss_fn()
        grads = torch.autograd.grad(loss, list(tensors.values()), allow_unused=True)
        analytic = {n: (torch.zeros_like(t) if g is None else g.detach())
                    for (n, t), g in zip(tensors.items(), grads)}
    rng = np.random.default_rng(seed)
    errors = {}
    with torch.no_grad():
        for name, t in tensors.items():
            flat = t.view(-1)
            if entries is None or entries >= flat.numel():
                idx = np.arange(flat.numel())
            else:
                idx = rng.choice(flat.numel(), size=entries, replace=False)
            a = analytic[name].reshape(-1)[torch.as_tensor(idx)].double()
            num = torch.empty(len(idx), dtype=torch.float64)
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(loss_fn())
                flat[i] = orig - step
                down = float(loss_fn())
                flat[i] = orig
                num[j] = (up - down) / (2 * step)
            denom = max(float(num.abs().max()), floor)
            errors[name] = float((a - num).abs().max()) / denom
    return GradCheckReport(errors, tolerance)


def grad_check(model, image, labels, tolerance=1e-3, loss_weights: LossWeights = LossWeights(),
               entries: Optional[int] = 2, step=1e-4, seed=0, include_input=True,
               analytic_scale: float = 1.0) -> GradCheckReport:
    """Finite-difference check of the combined loss through ``model``.

    Every parameter tensor is one group (``entries`` elements probed each);
    the input image forms the ``input`` group. ``analytic_scale`` multiplies
    the autograd gradients and exists to exercise the failure path.
    """
    model = model.double()
    model.eval()
    image = image.detach().double().clone().requires_grad_(include_input)
    tensors = dict(model.named_parameters())
    if include_input:
        tensors = {"input": image, **tensors}

    def loss_fn():
        return combined_loss(model(image), labels, loss_weights)[0]

    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(tensors.values()), allow_unused=True)
    analytic = {n: analytic_scale * (torch.zeros_like(t) if g is None else g.detach())
                for (n, t), g in zip(tensors.items(), grads)}
    return check_gradients(loss_fn, tensors, analytic, entries=entries, step=step,
                           tolerance=tolerance, seed=seed)
