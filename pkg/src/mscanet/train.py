"""Training harness: initialization, Adam, schedule, epoch loop, eval.

Everything is deterministic given (seed, config, dataset): parameter
draws follow declaration order, epoch shuffles and per-sample crops use
generators derived from (seed, epoch, index), and batches execute
serially.
"""

from __future__ import annotations

import io as _stdio
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import AugmentConfig, augment_rng, hflip, random_crop
from .density import block_upsample, downscale_density
from .engine import Tape, Tensor
from .errors import CheckpointError, ConfigError, MetricError, NumericalAbort
from .losses import LossWeights, combined_loss, density_loss
from .metrics import EvalReport, mae as count_mae, psnr, rmse as count_rmse, ssim
from .model import MSCANet, ModelConfig, load_model, save_model

LOG_COLUMNS = ("epoch", "lr", "loss_total", "loss_den",
               "loss_att1", "loss_att2", "loss_att3", "mae", "rmse")

_SHUFFLE_TAG = 0x53484C46  # disambiguates shuffle streams from (seed, epoch, index)


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    decay_factor: float = 0.1
    decay_every: int = 10
    epochs: int = 50
    batch_size: int = 4
    init_std: float = 0.01
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    eval_every: int = 10          # 0 = evaluate only after the last epoch
    den_divisor: float | None = None  # None = 2 * batch size
    lr_floor: float = 1e-12
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError(f"decay_factor must be in (0,1], got {self.decay_factor}")
        if self.decay_every < 1:
            raise ConfigError(f"decay_every must be >= 1, got {self.decay_every}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


def preset(name: str):
    """Named (ModelConfig, TrainConfig) pairs.

    "paper" restores the full-width recipe (500 epochs, batch 16, 320px
    crops); "desk" is the laptop-scale default used by the tests.
    """
    if name == "paper":
        return (
            ModelConfig(width_scale=1.0, in_channels=3),
            TrainConfig(epochs=500, batch_size=16,
                        augment=AugmentConfig(crop_size=320, flip_prob=0.5)),
        )
    if name == "desk":
        return (
            ModelConfig(width_scale=0.125, in_channels=1),
            TrainConfig(epochs=50, batch_size=4,
                        augment=AugmentConfig(crop_size=64, flip_prob=0.5)),
        )
    raise ConfigError(f"unknown preset {name!r} (expected 'paper' or 'desk')")


def init_params(model: MSCANet, seed: int, std: float = 0.01):
    """Deterministic re-init: conv weights N(0, std^2), biases/shifts 0,
    BN scales 1, running stats reset."""
    model.init_params(seed, std=std)
    return model.parameters()


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(params, state: AdamState, lr: float):
    """One bias-corrected Adam update; mutates params and state in place."""
    if len(params) != len(state.m):
        raise ConfigError(f"adam state holds {len(state.m)} buffers for {len(params)} params")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match param {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
    return params


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step-decayed learning rate, floored so the schedule never hits zero."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return max(config.lr_floor, config.lr0 * config.decay_factor ** (epoch // config.decay_every))


# -- batch assembly ----------------------------------------------------------


def _image_chw(image, in_channels, dtype):
    arr = np.asarray(image, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    if arr.shape[0] == 3 and in_channels == 1:
        # luma conversion for RGB inputs feeding a grayscale model
        arr = (0.299 * arr[0] + 0.587 * arr[1] + 0.114 * arr[2])[None].astype(dtype)
    if arr.shape[0] != in_channels:
        raise ConfigError(f"image has {arr.shape[0]} channels, model wants {in_channels}")
    return arr


def _make_batch(samples, cfg: TrainConfig, model: MSCANet, epoch, indices, out_stride):
    images, dens, masks8, masks4, masks2 = [], [], [], [], []
    ids = []
    for idx in indices:
        rng = augment_rng(cfg.seed, epoch, idx)
        sample = random_crop(samples[idx], cfg.augment, rng)
        sample = hflip(sample, cfg.augment, rng)
        ids.append(sample.scene.id)
        images.append(_image_chw(sample.scene.image, model.config.in_channels, model.dtype))
        den = downscale_density(sample.density, out_stride).values
        dens.append(den[None].astype(model.dtype))
        if model.config.variant == "full":
            masks8.append(sample.masks[8].values[None].astype(model.dtype))
            masks4.append(sample.masks[4].values[None].astype(model.dtype))
            masks2.append(sample.masks[2].values[None].astype(model.dtype))
    batch = {
        "images": np.stack(images),
        "density": np.stack(dens),
        "ids": ids,
    }
    if model.config.variant == "full":
        batch["masks"] = (np.stack(masks8), np.stack(masks4), np.stack(masks2))
    return batch


def _train_step(model, batch, cfg):
    with Tape() as tape:
        out = model.forward(Tensor(batch["images"]), training=True)
        den_pair = (out.density, batch["density"])
        if model.config.variant == "full":
            att_pairs = list(zip(out.att_maps, batch["masks"]))
            loss, comps = combined_loss(den_pair, att_pairs, cfg.weights,
                                        den_divisor=cfg.den_divisor)
        else:
            loss = density_loss(den_pair[0], den_pair[1], divisor=cfg.den_divisor)
            comps = {"den": loss.item(), "att1": 0.0, "att2": 0.0, "att3": 0.0,
                     "total": loss.item()}
        if not np.isfinite(comps["total"]):
            raise NumericalAbort(
                f"non-finite loss {comps['total']} on batch {batch['ids']}",
                batch_id=batch["ids"],
            )
        tape.backward(loss)
    return comps


def train(model: MSCANet, samples, config: TrainConfig, out_dir=None, eval_samples=None):
    """Full training loop; returns one log record per epoch.

    Writes ``train_log.csv`` plus final (and best-MAE) checkpoints when
    ``out_dir`` is given.  Raises :class:`NumericalAbort` the moment a
    loss stops being finite.
    """
    if not samples:
        raise ConfigError("training dataset is empty")
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    init_params(model, config.seed, config.init_std)
    params = model.parameters()
    state = AdamState(params)
    out_stride = 2 if model.config.variant == "full" else 8
    records = []
    best_mae = np.inf
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        shuffle_rng = np.random.default_rng(
            np.random.SeedSequence([int(config.seed), _SHUFFLE_TAG, int(epoch)])
        )
        order = shuffle_rng.permutation(len(samples))
        sums = {"total": 0.0, "den": 0.0, "att1": 0.0, "att2": 0.0, "att3": 0.0}
        n_steps = 0
        for start in range(0, len(order), config.batch_size):
            indices = order[start : start + config.batch_size]
            batch = _make_batch(samples, config, model, epoch, indices, out_stride)
            comps = _train_step(model, batch, config)
            adam_step(params, state, lr)
            model.zero_grad()
            for key in sums:
                sums[key] += comps[key]
            n_steps += 1
        record = {
            "epoch": epoch,
            "lr": lr,
            "loss_total": sums["total"] / n_steps,
            "loss_den": sums["den"] / n_steps,
            "loss_att1": sums["att1"] / n_steps,
            "loss_att2": sums["att2"] / n_steps,
            "loss_att3": sums["att3"] / n_steps,
            "mae": float("nan"),
            "rmse": float("nan"),
        }
        eval_now = eval_samples is not None and (
            (config.eval_every > 0 and (epoch + 1) % config.eval_every == 0)
            or epoch == config.epochs - 1
        )
        if eval_now:
            report = evaluate(model, eval_samples)
            record["mae"] = report.mae
            record["rmse"] = report.rmse
            if out_dir is not None and report.mae < best_mae:
                best_mae = report.mae
                save_checkpoint(os.path.join(out_dir, "model_best.msca"), model)
        records.append(record)
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "model_final.msca"), model, state)
        write_log(os.path.join(out_dir, "train_log.csv"), records)
    return records


def format_log(records) -> str:
    """CSV text of the per-epoch records; repr() keeps floats lossless so
    determinism checks can compare bytes."""
    lines = [",".join(LOG_COLUMNS)]
    for rec in records:
        lines.append(",".join(repr(rec[c]) if c != "epoch" else str(rec[c])
                              for c in LOG_COLUMNS))
    return "\n".join(lines) + "\n"


def write_log(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_log(records))


# -- evaluation ---------------------------------------------------------------


def predict_density(model: MSCANet, image):
    """Eval-mode forward on one whole image; returns (map HxW, stride)."""
    arr = _image_chw(image, model.config.in_channels, model.dtype)
    out = model.forward(Tensor(arr[None]), training=False)
    return out.density.data[0, 0].astype(np.float64), out.density_stride


def evaluate(model: MSCANet, samples) -> EvalReport:
    """Whole-image evaluation: counts from map sums, maps compared at
    stride 2 (native for the full model, block-expanded for the stride-8
    ablation heads) and at full resolution."""
    if not samples:
        raise ConfigError("evaluation dataset is empty")
    pairs = []
    per_image = []
    psnrs, ssims, psnrs_full, ssims_full = [], [], [], []
    for sample in samples:
        pred, stride = predict_density(model, sample.scene.image)
        if stride != 2:
            pred2 = block_upsample(pred, stride // 2)
        else:
            pred2 = pred
        gt_count = float(sample.scene.count)
        pred_count = float(pred.sum())
        pairs.append((gt_count, pred_count))
        per_image.append((sample.scene.id, gt_count, pred_count))
        gt2 = downscale_density(sample.density, 2).values
        if gt2.max() > 0:
            psnrs.append(psnr(pred2, gt2))
            gt_full = sample.density.values
            pred_full = block_upsample(pred2, 2)
            psnrs_full.append(psnr(pred_full, gt_full))
            try:
                ssims.append(ssim(pred2, gt2))
                ssims_full.append(ssim(pred_full, gt_full))
            except MetricError:
                pass  # map smaller than the SSIM window
    return EvalReport(
        mae=count_mae(pairs),
        rmse=count_rmse(pairs),
        psnr=float(np.mean(psnrs)) if psnrs else float("nan"),
        ssim=float(np.mean(ssims)) if ssims else float("nan"),
        psnr_full=float(np.mean(psnrs_full)) if psnrs_full else float("nan"),
        ssim_full=float(np.mean(ssims_full)) if ssims_full else float("nan"),
        per_image=per_image,
    )


# -- checkpoints with optimizer state -----------------------------------------

ADAM_MAGIC = b"ADAM1"


def save_checkpoint(path, model: MSCANet, state: AdamState | None = None):
    """Model checkpoint, optionally with trailing Adam state."""

    def extra(fh):
        if state is None:
            return
        fh.write(ADAM_MAGIC)
        fh.write(struct.pack("<dddQ", state.beta1, state.beta2, state.eps, state.t))
        fh.write(struct.pack("<I", len(state.m)))
        for buf in state.m + state.v:
            fh.write(struct.pack("<I", buf.ndim))
            fh.write(struct.pack("<" + "I" * buf.ndim, *buf.shape))
            fh.write(np.ascontiguousarray(buf, dtype="<f4").tobytes())

    save_model(path, model, extra_writer=extra)


def _read_adam(trailer, params):
    fh = _stdio.BytesIO(trailer)
    magic = fh.read(5)
    if magic != ADAM_MAGIC:
        raise CheckpointError(f"bad optimizer magic {magic!r}; expected {ADAM_MAGIC!r}")
    beta1, beta2, eps, t = struct.unpack("<dddQ", fh.read(32))
    (count,) = struct.unpack("<I", fh.read(4))
    if count != len(params):
        raise CheckpointError(f"optimizer holds {count} buffers for {len(params)} params")
    buffers = []
    for _ in range(2 * count):
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack("<" + "I" * ndim, fh.read(4 * ndim)) if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        buffers.append(np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape))
    state = AdamState(params, beta1=beta1, beta2=beta2, eps=eps)
    state.t = t
    state.m = [b.astype(params[i].dtype) for i, b in enumerate(buffers[:count])]
    state.v = [b.astype(params[i].dtype) for i, b in enumerate(buffers[count:])]
    return state


def load_checkpoint(path, dtype=np.float32):
    """Returns (model, AdamState or None)."""
    model, trailer = load_model(path, dtype=dtype)
    state = None
    if trailer:
        state = _read_adam(trailer, model.parameters())
    return model, state
