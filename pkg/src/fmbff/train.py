"""Loss, Adam, plateau schedule, early stopping, training loop, checkpoints.

Protocol: initial learning rate 0.001, reduced by 25% after 7 consecutive
epochs without validation improvement, early stop after 10, at most 100
epochs.  The monitored quantity is validation Dice (higher is better);
improvement means strictly greater than the best seen so far.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import metrics as metrics_mod
from .engine import Tensor, add, backward, clip, log, mean_, mul, pow_, sub, sum_
from .errors import (
    DimensionError,
    FormatError,
    ParseError,
    TrainingDiverged,
    UsageError,
)
from .model import ModelConfig, ModelParams, build_model, model_forward

_U64 = (1 << 64) - 1


@dataclass
class TrainConfig:
    lr0: float = 0.001
    max_epochs: int = 100
    plateau_patience: int = 7
    plateau_factor: float = 0.75
    early_stop_patience: int = 10
    batch_size: int = 8
    loss_weights: tuple = (1.0, 1.0)  # (w_bce, w_dice)
    augment: bool = False
    seed: int = 0

    def validate(self):
        if not 0.0 < self.plateau_factor < 1.0:
            raise UsageError(f"plateau_factor must be in (0,1), got {self.plateau_factor}")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise UsageError("patience values must be >= 1")


@dataclass
class TrainState:
    lr: float
    epoch: int = 0
    best_val_metric: float = -math.inf
    epochs_since_best: int = 0
    epochs_since_plateau: int = 0
    reductions: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_t: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)


# ---------------------------------------------------------------------------
# loss


def loss(pred, gt, w_bce=1.0, w_dice=1.0, eps=1.0):
    """Weighted BCE + (1 - soft Dice) on probability maps in (0, 1)."""
    gt_arr = gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=pred.data.dtype)
    if pred.shape != gt_arr.shape:
        raise DimensionError(f"pred {pred.shape} and gt {gt_arr.shape} differ")
    clamped = clip(pred, 1e-7, 1.0 - 1e-7)
    log_p = log(clamped)
    log_1p = log(sub(1.0, clamped))
    ll = add(mul(gt_arr, log_p), mul(1.0 - gt_arr, log_1p))
    bce = mul(mean_(ll), -1.0)

    intersection = sum_(mul(pred, gt_arr))
    total = add(sum_(pred), float(gt_arr.sum()))
    soft_dice = mul(
        add(mul(intersection, 2.0), eps), pow_(add(total, eps), -1.0)
    )
    return add(mul(bce, w_bce), mul(sub(1.0, soft_dice), w_dice))


# ---------------------------------------------------------------------------
# optimizer and schedule


def adam_step(store, state: TrainState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update over every ParamStore entry; clears grads afterwards."""
    for name, p in store.items():
        if p.grad is None:
            raise UsageError(f"adam_step before backward: no grad for {name!r}")
    state.adam_t += 1
    t = state.adam_t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in store.items():
        g = p.grad
        m = state.adam_m.get(name)
        v = state.adam_v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.adam_m[name] = m
        state.adam_v[name] = v
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.grad = None


def plateau_step(state: TrainState, cfg: TrainConfig, val_metric):
    """Track the monitored metric; cut lr by the plateau factor on stagnation."""
    if val_metric > state.best_val_metric:
        state.best_val_metric = val_metric
        state.epochs_since_best = 0
        state.epochs_since_plateau = 0
    else:
        state.epochs_since_best += 1
        state.epochs_since_plateau += 1
        if state.epochs_since_plateau >= cfg.plateau_patience:
            state.lr *= cfg.plateau_factor
            state.reductions += 1
            state.epochs_since_plateau = 0
    return state.lr


def early_stop(state: TrainState, cfg: TrainConfig):
    return state.epochs_since_best >= cfg.early_stop_patience


# ---------------------------------------------------------------------------
# training loop


def _forward_probs(params, images, batch_size):
    """Eval-mode probability maps for a stack of images, batched."""
    outputs = []
    for start in range(0, len(images), batch_size):
        x = Tensor(np.stack(images[start : start + batch_size]))
        trace = model_forward(x, params, mode="eval")
        outputs.append(trace.f_out.data)
    return np.concatenate(outputs, axis=0)


def validation_dice(params, samples, batch_size=8, threshold=0.5):
    images = [s.image for s in samples]
    masks = np.stack([s.mask for s in samples])
    probs = _forward_probs(params, images, batch_size)
    confusions = metrics_mod.confusion(probs, masks, threshold)
    return float(np.mean([metrics_mod.metrics_from(c)["d"] for c in confusions]))


def train(params: ModelParams, train_set, val_set, cfg: TrainConfig,
          stop_at_metric=None, log_fn=None):
    """Epoch loop returning (params restored to the best epoch, history).

    History rows carry epoch, mean train loss, the lr in effect during the
    epoch, and validation Dice.  ``stop_at_metric`` allows regression tests
    to end a run once a target validation Dice is reached.
    """
    if not train_set or not val_set:
        raise UsageError("train and validation sets must be nonempty")
    cfg.validate()
    state = TrainState(lr=cfg.lr0, rng=np.random.default_rng(cfg.seed))
    w_bce, w_dice = cfg.loss_weights

    images = [np.asarray(s.image, dtype=np.float32) for s in train_set]
    masks = [np.asarray(s.mask, dtype=np.float32) for s in train_set]

    history = []
    best_snapshot = None
    for epoch in range(1, cfg.max_epochs + 1):
        order = state.rng.permutation(len(images))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            x = Tensor(np.stack([images[i] for i in batch]))
            y = np.stack([masks[i] for i in batch])
            trace = model_forward(x, params, mode="train", rng=state.rng)
            batch_loss = loss(trace.f_out, y, w_bce, w_dice)
            value = batch_loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"loss became {value} at epoch {epoch}, step {state.adam_t + 1}"
                )
            backward(batch_loss)
            adam_step(params.store, state, state.lr)
            epoch_losses.append(value)

        val_metric = validation_dice(params, val_set, cfg.batch_size)
        lr_used = state.lr
        if val_metric > state.best_val_metric:
            best_snapshot = _snapshot(params)
        plateau_step(state, cfg, val_metric)
        state.epoch = epoch
        row = {
            "epoch": epoch,
            "loss": float(np.mean(epoch_losses)),
            "lr": lr_used,
            "val_dice": val_metric,
        }
        history.append(row)
        if log_fn is not None:
            log_fn(row)
        if stop_at_metric is not None and val_metric >= stop_at_metric:
            break
        if early_stop(state, cfg):
            break

    if best_snapshot is not None:
        _restore(params, best_snapshot)
    return params, state, history


def _snapshot(params: ModelParams):
    return (
        params.store.copy_values(),
        {
            name: (st.running_mean.copy(), st.running_var.copy(), st.count)
            for name, st in params.bn_states.items()
        },
    )


def _restore(params: ModelParams, snapshot):
    values, bn = snapshot
    params.store.load_values(values)
    for name, (mean, var, count) in bn.items():
        st = params.bn_states[name]
        st.running_mean = mean.copy()
        st.running_var = var.copy()
        st.count = count


def history_csv(history):
    lines = ["epoch,loss,lr,val_dice"]
    for row in history:
        lines.append(
            f"{row['epoch']},{row['loss']:.8f},{row['lr']:.10f},{row['val_dice']:.8f}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# checkpoint format
#
# magic "FMBF", u16 version=1, u32 entry count, then per entry:
# u16 name length, UTF-8 name, u8 dtype tag (0=f32, 1=f64), u8 rank,
# u32 dims[rank], little-endian payload; trailing CRC32 of all prior bytes.

_MAGIC = b"FMBF"
_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _scalar(v):
    return np.asarray(float(v), dtype=np.float64)


def _encode_rng(gen):
    st = gen.bit_generator.state
    s = st["state"]["state"]
    inc = st["state"]["inc"]
    words = np.array(
        [s & _U64, s >> 64, inc & _U64, inc >> 64, st["has_uint32"], st["uinteger"]],
        dtype=np.uint64,
    )
    return words.view(np.float64)


def _decode_rng(arr):
    words = np.asarray(arr, dtype=np.float64).view(np.uint64)
    gen = np.random.default_rng(0)
    gen.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {
            "state": int(words[0]) | (int(words[1]) << 64),
            "inc": int(words[2]) | (int(words[3]) << 64),
        },
        "has_uint32": int(words[4]),
        "uinteger": int(words[5]),
    }
    return gen


def _config_entries(cfg: ModelConfig):
    entries = [
        ("config/in_channels", _scalar(cfg.in_channels)),
        ("config/input_h", _scalar(cfg.input_size[0])),
        ("config/input_w", _scalar(cfg.input_size[1])),
        ("config/encoder_widths", np.asarray(cfg.encoder_widths, dtype=np.float64)),
        ("config/decoder_widths", np.asarray(cfg.decoder_widths, dtype=np.float64)),
        ("config/heads", _scalar(cfg.heads)),
        ("config/fmcab_reduction", _scalar(cfg.fmcab_reduction)),
        ("config/p_exponent", _scalar(cfg.p_exponent)),
        ("config/shuffle_groups", _scalar(cfg.shuffle_groups)),
        ("config/skip_mode", _scalar(0 if cfg.skip_mode == "literal_s4" else 1)),
        ("config/seed", _scalar(cfg.seed)),
    ]
    return entries


def _config_from_entries(values):
    return ModelConfig(
        in_channels=int(values["config/in_channels"]),
        input_size=(int(values["config/input_h"]), int(values["config/input_w"])),
        encoder_widths=tuple(int(v) for v in values["config/encoder_widths"]),
        decoder_widths=tuple(int(v) for v in values["config/decoder_widths"]),
        heads=int(values["config/heads"]),
        fmcab_reduction=int(values["config/fmcab_reduction"]),
        p_exponent=float(values["config/p_exponent"]),
        shuffle_groups=int(values["config/shuffle_groups"]),
        skip_mode="literal_s4" if int(values["config/skip_mode"]) == 0 else "stage_matched",
        seed=int(values["config/seed"]),
    )


def save_checkpoint(path, params: ModelParams, state: TrainState | None = None):
    entries = list(_config_entries(params.config))
    for name, t in params.store.items():
        entries.append((f"param/{name}", t.data))
    for name, st in params.bn_states.items():
        entries.append((f"bnstat/{name}/mean", st.running_mean))
        entries.append((f"bnstat/{name}/var", st.running_var))
        entries.append((f"bnstat/{name}/count", _scalar(st.count)))
    if state is not None:
        entries.append(("state/lr", _scalar(state.lr)))
        entries.append(("state/epoch", _scalar(state.epoch)))
        entries.append(("state/best", _scalar(state.best_val_metric)))
        entries.append(("state/since_best", _scalar(state.epochs_since_best)))
        entries.append(("state/since_plateau", _scalar(state.epochs_since_plateau)))
        entries.append(("state/reductions", _scalar(state.reductions)))
        entries.append(("state/adam_t", _scalar(state.adam_t)))
        entries.append(("state/rng", _encode_rng(state.rng)))
        for name in params.store.names():
            if name in state.adam_m:
                entries.append((f"adam/m/{name}", state.adam_m[name]))
                entries.append((f"adam/v/{name}", state.adam_v[name]))

    buf = bytearray()
    buf += _MAGIC
    buf += struct.pack("<HI", _VERSION, len(entries))
    for name, arr in entries:
        arr = np.asarray(arr)
        if arr.dtype == np.float32:
            tag, payload = 0, arr.astype("<f4", copy=False)
        elif arr.dtype == np.float64:
            tag, payload = 1, arr.astype("<f8", copy=False)
        else:
            raise UsageError(f"entry {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb))
        buf += nb
        buf += struct.pack("<BB", tag, arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += payload.tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def _read_exact(blob, offset, count, path):
    if offset + count > len(blob):
        raise ParseError(f"{path}: truncated checkpoint", offset=len(blob))
    return blob[offset : offset + count], offset + count


def read_checkpoint_entries(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 10:
        raise ParseError(f"{path}: truncated checkpoint", offset=len(blob))
    if blob[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    stored_crc = struct.unpack_from("<I", blob, len(blob) - 4)[0]
    actual_crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise FormatError(f"{path}: checksum mismatch")
    offset = 10
    entries = {}
    order = []
    for _ in range(count):
        raw, offset = _read_exact(blob, offset, 2, path)
        (nlen,) = struct.unpack("<H", raw)
        raw, offset = _read_exact(blob, offset, nlen, path)
        name = raw.decode("utf-8")
        raw, offset = _read_exact(blob, offset, 2, path)
        tag, rank = struct.unpack("<BB", raw)
        if tag not in _DTYPE_TAGS:
            raise FormatError(f"{path}: unknown dtype tag {tag} for {name!r}")
        raw, offset = _read_exact(blob, offset, 4 * rank, path)
        shape = struct.unpack(f"<{rank}I", raw)
        dtype = _DTYPE_TAGS[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        raw, offset = _read_exact(blob, offset, nbytes, path)
        entries[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        order.append(name)
    return entries, order


def load_checkpoint(path):
    """Rebuild (ModelParams, TrainState-or-None) from a checkpoint file."""
    entries, _order = read_checkpoint_entries(path)
    config = _config_from_entries(entries)
    params = build_model(config)
    params.store.load_values(
        {
            name[len("param/") :]: arr
            for name, arr in entries.items()
            if name.startswith("param/")
        }
    )
    for name, st in params.bn_states.items():
        st.running_mean = entries[f"bnstat/{name}/mean"].astype(np.float64)
        st.running_var = entries[f"bnstat/{name}/var"].astype(np.float64)
        st.count = int(entries[f"bnstat/{name}/count"])

    state = None
    if "state/lr" in entries:
        state = TrainState(
            lr=float(entries["state/lr"]),
            epoch=int(entries["state/epoch"]),
            best_val_metric=float(entries["state/best"]),
            epochs_since_best=int(entries["state/since_best"]),
            epochs_since_plateau=int(entries["state/since_plateau"]),
            reductions=int(entries["state/reductions"]),
            adam_t=int(entries["state/adam_t"]),
            rng=_decode_rng(entries["state/rng"]),
        )
        for name in params.store.names():
            key = f"adam/m/{name}"
            if key in entries:
                state.adam_m[name] = entries[key]
                state.adam_v[name] = entries[f"adam/v/{name}"]
    return params, state
