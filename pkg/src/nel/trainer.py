"""Deterministic mini-batch training, evaluation, and forward benchmarking.

Reproducibility contract: given (seed, config, dataset manifest), every run
produces bitwise-identical parameters, and a run resumed from a checkpoint
continues exactly where the uninterrupted run would be.  This works because
nothing consumes shared RNG state: batch order, vertical flips, crops, and
per-epoch noise are each drawn from counter-keyed streams
(seed, stream, epoch, index), and optimizer moments travel inside the
checkpoint's sidecar state file.

Per-epoch noise: training samples are re-noised from their clean pattern
every epoch (fresh instantiation of the same faintness), while the test
split keeps the epoch-0 noise it was materialized with, so evaluation stays
fixed.
"""

from __future__ import annotations

import json
import math
import os
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import datagen, filters, losses, metrics, unet
from .errors import (
    CompatibilityError,
    ContractError,
    DataFormatError,
    DimensionError,
    TrainingDiverged,
)

LOG_HEADER = "epoch,step,loss,loss_l2,loss_edge,eval_metric,wall_ms"


@dataclass
class TrainConfig:
    task: str  # "edges" | "denoise"
    epochs: int = 100
    batch_size: int = 4
    optimizer: str = "adam"  # "adam" | "sgd_momentum"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_edge: float = 1.0
    seed: int = 0
    eval_every: int = 1
    checkpoint_path: Optional[str] = None
    crop: Optional[int] = None  # random square crop; None trains on full images
    clip_norm: Optional[float] = 10.0
    threshold: float = 0.5  # binarization for the edge eval metric

    def __post_init__(self):
        if self.task not in ("edges", "denoise"):
            raise ContractError(f"task must be 'edges' or 'denoise', got {self.task!r}")
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.crop is not None and self.crop % 8:
            raise ContractError(f"crop size must be divisible by 8, got {self.crop}")
        if self.lambda_edge < 0:
            raise ContractError(f"lambda_edge must be >= 0, got {self.lambda_edge}")
        if self.eval_every < 1:
            raise ContractError(f"eval_every must be >= 1, got {self.eval_every}")


@dataclass
class OptimizerState:
    kind: str
    t: int
    m: list  # first moments (or momentum velocity)
    v: list  # second moments (adam only, else empty)

    @staticmethod
    def fresh(kind: str, params: Sequence[ad.Tensor]) -> "OptimizerState":
        m = [np.zeros_like(p.data) for p in params]
        v = [np.zeros_like(p.data) for p in params] if kind == "adam" else []
        return OptimizerState(kind, 0, m, v)


def _check_aligned(params, grads, moments, caller):
    if len(params) != len(grads):
        raise DimensionError(f"{caller}: {len(params)} params vs {len(grads)} grads")
    for p, g, m in zip(params, grads, moments):
        if p.data.shape != g.shape or p.data.shape != m.shape:
            raise DimensionError(
                f"{caller}: shape mismatch param {p.data.shape} grad {g.shape} moment {m.shape}"
            )


def step_adam(
    params: Sequence[ad.Tensor],
    grads: Sequence[np.ndarray],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam, epsilon outside the root:
    w -= lr * m_hat / (sqrt(v_hat) + eps).  In-place and deterministic."""
    _check_aligned(params, grads, state.m, "step_adam")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(m.dtype, copy=False)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + eps)


def step_sgd_momentum(
    params: Sequence[ad.Tensor],
    grads: Sequence[np.ndarray],
    state: OptimizerState,
    lr: float,
    momentum: float = 0.9,
) -> None:
    """Heavy-ball update: velocity = momentum * velocity + grad; w -= lr * velocity."""
    _check_aligned(params, grads, state.m, "step_sgd_momentum")
    state.t += 1
    for p, g, m in zip(params, grads, state.m):
        m *= momentum
        m += g.astype(m.dtype, copy=False)
        p.data -= lr * m


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale all gradients down when the global L2 norm exceeds max_norm."""
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    rows: list  # per-epoch log dicts
    final_path: Optional[str]
    best_path: Optional[str]
    best_metric: Optional[float]
    epochs_run: int


def _state_path(ckpt_path) -> Path:
    return Path(str(ckpt_path) + ".state")


def _save_train_state(path, model: unet.Model, opt: OptimizerState, epoch: int) -> None:
    names = [n for n, _ in model.spec.registry]
    registry = []
    arrays = []
    np_dtype = np.dtype("<f4") if model.dtype == "f32" else np.dtype("<f8")
    for label, buffers in (("m", opt.m), ("v", opt.v)):
        for name, buf in zip(names, buffers):
            registry.append({"name": f"{label}.{name}", "shape": list(buf.shape)})
            arrays.append(buf.astype(np_dtype, copy=False))
    meta = {
        "version": 1,
        "kind": "train-state",
        "optimizer": opt.kind,
        "t": opt.t,
        "epoch": epoch,
        "in_channels": model.spec.in_channels,
        "base_width": model.spec.base_width,
        "dtype": model.dtype,
        "registry": registry,
    }
    unet.write_container(path, meta, arrays)


def _load_train_state(path, model: unet.Model) -> tuple:
    meta, arrays = unet.read_container(path)
    if meta.get("kind") != "train-state":
        raise DataFormatError(f"{path}: not a training-state file")
    if meta.get("optimizer") not in ("adam", "sgd_momentum"):
        raise DataFormatError(f"{path}: unknown optimizer {meta.get('optimizer')!r}")
    names = [n for n, _ in model.spec.registry]
    np_dtype = np.float32 if model.dtype == "f32" else np.float64
    try:
        m = [arrays[f"m.{n}"].astype(np_dtype, copy=False) for n in names]
        v = (
            [arrays[f"v.{n}"].astype(np_dtype, copy=False) for n in names]
            if meta["optimizer"] == "adam"
            else []
        )
    except KeyError as exc:
        raise CompatibilityError(f"{path}: state is missing buffer {exc}") from None
    return OptimizerState(meta["optimizer"], int(meta["t"]), m, v), int(meta["epoch"])


def _epoch_inputs(sample: datagen.Sample, idx: int, epoch: int, task: str, data_seed: int):
    """Fresh-noise instantiation of one training sample for this epoch."""
    if sample.clean is None:
        return sample.input  # no clean backing: keep the materialized noise
    if task == "edges":
        rng = datagen.rng_for(data_seed, datagen.STREAM_NOISE, epoch, idx)
        return datagen.apply_noise_model(sample.clean, sample.tag, rng)
    rng = datagen.rng_for(data_seed, datagen.STREAM_DENOISE, epoch, idx)
    return datagen.add_white_noise(sample.clean, sample.tag, rng)


def train(
    config: TrainConfig,
    manifest: datagen.DatasetManifest,
    samples: Sequence[datagen.Sample],
    model: unet.Model,
    resume_from=None,
    log_path=None,
) -> TrainResult:
    """Run the loop; returns per-epoch rows and writes checkpoints/log.

    Aborts with TrainingDiverged (epoch, batch, loss breakdown) when the loss
    goes non-finite.  With `resume_from` pointing at a checkpoint written by
    an earlier run of the same config, the remaining epochs reproduce the
    uninterrupted run bitwise (wall_ms excepted).
    """
    if config.task != manifest.task:
        raise ContractError(f"config task {config.task!r} != dataset task {manifest.task!r}")
    np_dtype = np.float32 if model.dtype == "f32" else np.float64
    train_set = [(i, s) for i, s in enumerate(samples) if s.split == "train"]
    test_set = [s for s in samples if s.split == "test"]
    if not train_set:
        raise ContractError("training split is empty")

    h0, w0 = train_set[0][1].input.shape
    eff_h, eff_w = (config.crop, config.crop) if config.crop else (h0, w0)
    if config.crop and (config.crop > h0 or config.crop > w0):
        raise ContractError(f"crop {config.crop} exceeds image size {h0}x{w0}")
    if eff_h % 8 or eff_w % 8:
        raise ContractError(
            f"training resolution {eff_h}x{eff_w} must be divisible by 8; use --crop"
        )

    params = model.parameters()
    start_epoch = 0
    if resume_from is not None:
        opt, last_epoch = _load_train_state(_state_path(resume_from), model)
        start_epoch = last_epoch + 1
    else:
        opt = OptimizerState.fresh(config.optimizer, params)

    best_metric = None
    best_path = None
    final_path = None
    rows = []
    step = opt.t
    data_seed = manifest.seed

    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        order = datagen.rng_for(config.seed, datagen.STREAM_ORDER, epoch).permutation(len(train_set))
        loss_sum = 0.0
        l2_sum = 0.0
        edge_sum = 0.0
        n_batches = 0
        for b0 in range(0, len(order), config.batch_size):
            batch = [train_set[j] for j in order[b0 : b0 + config.batch_size]]
            xs, ys = [], []
            for idx, sample in batch:
                x = _epoch_inputs(sample, idx, epoch, config.task, data_seed)
                y = sample.label.astype(np.float64)
                if datagen.rng_for(config.seed, datagen.STREAM_VFLIP, epoch, idx).random() < 0.5:
                    x, y = datagen.vflip(x), datagen.vflip(y)
                if config.crop and (x.shape[0] > config.crop or x.shape[1] > config.crop):
                    crng = datagen.rng_for(config.seed, datagen.STREAM_CROP, epoch, idx)
                    r0 = int(crng.integers(0, x.shape[0] - config.crop + 1))
                    c0 = int(crng.integers(0, x.shape[1] - config.crop + 1))
                    x = x[r0 : r0 + config.crop, c0 : c0 + config.crop]
                    y = y[r0 : r0 + config.crop, c0 : c0 + config.crop]
                xs.append(x)
                ys.append(y)
            xt = ad.Tensor(np.stack(xs)[:, None].astype(np_dtype))
            yt = ad.Tensor(np.stack(ys)[:, None].astype(np_dtype))
            out = unet.forward(model, xt)
            if config.task == "edges":
                loss = losses.dice_loss(out, yt)
            else:
                loss = losses.combined_denoise_loss(out, yt, config.lambda_edge)
            lv = loss.item()
            if not math.isfinite(lv):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} batch {n_batches}: "
                    f"loss={lv} breakdown={loss.breakdown}"
                )
            ad.zero_grads(params)
            loss.value.backward()
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            if config.clip_norm is not None:
                clip_global_norm(grads, config.clip_norm)
            if config.optimizer == "adam":
                step_adam(params, grads, opt, config.lr, config.beta1, config.beta2, config.adam_eps)
            else:
                step_sgd_momentum(params, grads, opt, config.lr, config.momentum)
            step += 1
            loss_sum += lv
            l2_sum += loss.breakdown.get("l2_term", 0.0)
            edge_sum += loss.breakdown.get("edge_term", 0.0)
            n_batches += 1

        row = {
            "epoch": epoch,
            "step": step,
            "loss": loss_sum / n_batches,
            "loss_l2": l2_sum / n_batches if config.task == "denoise" else None,
            "loss_edge": edge_sum / n_batches if config.task == "denoise" else None,
            "eval_metric": None,
            "wall_ms": (time.perf_counter() - t0) * 1000.0,
        }
        if test_set and (epoch % config.eval_every == 0 or epoch == config.epochs - 1):
            report = evaluate(model, test_set, config.task, threshold=config.threshold)
            metric = report.overall["f_mean"] if config.task == "edges" else report.overall["ssim_mean"]
            row["eval_metric"] = metric
            if config.checkpoint_path and (best_metric is None or metric > best_metric):
                best_metric = metric
                best_path = str(config.checkpoint_path) + ".best"
                unet.save_checkpoint(model, best_path)
        rows.append(row)
        if config.checkpoint_path:
            final_path = str(config.checkpoint_path)
            unet.save_checkpoint(model, final_path)
            _save_train_state(_state_path(final_path), model, opt, epoch)

    if log_path:
        write_training_log(log_path, rows)
    return TrainResult(rows, final_path, best_path, best_metric, config.epochs - start_epoch)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return format(value, ".6g")


def write_training_log(path, rows: Sequence[dict]) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(LOG_HEADER + "\n")
        for r in rows:
            fh.write(
                ",".join(
                    _fmt(r[k])
                    for k in ("epoch", "step", "loss", "loss_l2", "loss_edge", "eval_metric", "wall_ms")
                )
                + "\n"
            )


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricsReport:
    task: str
    buckets: dict  # bucket name -> {metric: value}
    overall: dict
    count: int

    def to_json(self) -> str:
        return json.dumps(
            {"task": self.task, "buckets": self.buckets, "overall": self.overall, "count": self.count},
            sort_keys=True,
            indent=2,
        )


def _forward_2d(model: unet.Model, img: np.ndarray) -> np.ndarray:
    np_dtype = np.float32 if model.dtype == "f32" else np.float64
    with ad.no_grad():
        out = unet.forward(model, ad.Tensor(img[None, None].astype(np_dtype)))
    return out.data[0, 0].astype(np.float64)


def evaluate(
    model: unet.Model,
    samples: Sequence[datagen.Sample],
    task: str,
    threshold: float = 0.5,
    noise_redraws: int = 0,
    seed: int = 0,
    peak255: bool = False,
) -> MetricsReport:
    """Mean metrics per faintness/noise bucket.

    Edges: mean strict F at `threshold`; with noise_redraws > 0 each sample
    with a clean backing is re-noised that many times and its F values are
    averaged (fresh draws come from (seed, redraw, sample) streams).
    Denoise: mean PSNR and SSIM against the clean target; peak255 scores on
    the 0-255 scale (numerically identical for unit-range images, provided
    for parity with published tables).
    """
    if not samples:
        raise ContractError("evaluate: empty sample list")
    buckets: dict = {}

    def push(bucket, **vals):
        slot = buckets.setdefault(bucket, {})
        for k, val in vals.items():
            slot.setdefault(k, []).append(val)

    if task == "edges":
        for i, s in enumerate(samples):
            label = s.label.astype(np.float64)
            if noise_redraws > 0 and s.clean is not None:
                fs = []
                for j in range(noise_redraws):
                    rng = datagen.rng_for(seed, datagen.STREAM_EVAL, j, i)
                    noisy = datagen.apply_noise_model(s.clean, s.tag, rng)
                    fs.append(metrics.strict_f_measure(_forward_2d(model, noisy), label, threshold).f)
                push(f"snr={s.tag:g}", f=float(np.mean(fs)))
            else:
                score = metrics.strict_f_measure(_forward_2d(model, s.input), label, threshold)
                push(f"snr={s.tag:g}", f=score.f)
    elif task == "denoise":
        for s in samples:
            out = _forward_2d(model, s.input)
            if peak255:
                # SSIM constants are defined for unit dynamic range; only the
                # PSNR is restated on the 0-255 scale
                pv = metrics.psnr(255.0 * out, 255.0 * s.label, peak=255.0)
                sv = metrics.ssim(out, s.label)
            else:
                q = metrics.quality_score(out, s.label)
                pv, sv = q.psnr, q.ssim
            p = pv if math.isfinite(pv) else 99.0  # saturated sentinel for averaging
            push(f"sigma={s.tag:g}", psnr=p, ssim=sv)
    else:
        raise ContractError(f"unknown task {task!r}")

    summary = {}
    alls: dict = {}
    for bucket in sorted(buckets):
        summary[bucket] = {}
        for k, vals in buckets[bucket].items():
            summary[bucket][f"{k}_mean"] = float(np.mean(vals))
            if len(vals) > 1:
                summary[bucket][f"{k}_std"] = float(np.std(vals))
            alls.setdefault(k, []).extend(vals)
    overall = {f"{k}_mean": float(np.mean(v)) for k, v in alls.items()}
    return MetricsReport(task, summary, overall, len(samples))


def snr_sweep(
    model: unet.Model,
    snrs: Sequence[float],
    iterations: int = 10,
    seed: int = 0,
    size=(128, 128),
    threshold: float = 0.5,
) -> list:
    """Model vs Canny baseline on the fixed evaluation pattern.

    For each snr, `iterations` fresh noise draws of the pattern are scored
    with the strict F-measure against the pattern's Canny labels.  Returns
    rows (snr, method, f_mean, f_std).
    """
    if not snrs:
        raise ContractError("snr list must be non-empty")
    if iterations < 1:
        raise ContractError(f"iterations must be >= 1, got {iterations}")
    pattern = datagen.render_eval_pattern(size)
    label = datagen.extract_labels(pattern).astype(np.float64)
    rows = []
    for snr in snrs:
        f_model, f_canny = [], []
        for it in range(iterations):
            rng = datagen.rng_for(seed, datagen.STREAM_EVAL, int(round(snr * 1000)), it)
            noisy = datagen.apply_noise_model(pattern, snr, rng)
            f_model.append(metrics.strict_f_measure(_forward_2d(model, noisy), label, threshold).f)
            mask = filters.canny(noisy).astype(np.float64)
            f_canny.append(metrics.strict_f_measure(mask, label, 0.5).f)
        for method, fs in (("model", f_model), ("canny", f_canny)):
            rows.append((float(snr), method, float(np.mean(fs)), float(np.std(fs))))
    return rows


def bench_forward(model: unet.Model, sizes: Sequence[int], repeat: int = 5) -> list:
    """Median forward wall time per square input size, warm-up discarded."""
    if repeat < 1:
        raise ContractError(f"repeat must be >= 1, got {repeat}")
    np_dtype = np.float32 if model.dtype == "f32" else np.float64
    out = []
    for size in sizes:
        x = np.zeros((1, model.spec.in_channels, size, size), dtype=np_dtype)
        with ad.no_grad():
            unet.forward(model, ad.Tensor(x))  # warm-up
            times = []
            for _ in range(repeat):
                t0 = time.perf_counter()
                unet.forward(model, ad.Tensor(x))
                times.append((time.perf_counter() - t0) * 1000.0)
        out.append((int(size), float(statistics.median(times))))
    return out
