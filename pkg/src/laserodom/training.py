"""Losses and the two-stage optimisation.

Stage 1 trains the convolutions with two linear heads on single scan pairs
(translation regression plus either rotation regression or 112-way rotation
classification).  Stage 2 loads those convolutions, freezes the heads so
they keep supplying a first estimate, and trains convolutions + LSTM on
truncated windows as a pure regression problem.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .encoding import stack_pairs
from .geometry import MotionDelta
from .kitti import DEFAULT_ANGLE_SPEC, AngleClassSpec, LabeledSequence, angles_to_classes, class_midpoints
from .model import (
    Checkpoint,
    CheckpointError,
    CnnConfig,
    ModelConfig,
    ModelParams,
    RnnConfig,
    cnn_backward,
    cnn_forward_cached,
    init_params,
    param_group,
    pretrain_backward,
    pretrain_estimate,
    pretrain_forward_cached,
    rnn_window_backward,
    rnn_window_forward,
)

log = logging.getLogger(__name__)


class Stage(str, Enum):
    CNN_REGRESSION = "cnn-pretrain-regression"
    CNN_CLASSIFICATION = "cnn-pretrain-classification"
    RCNN_REGRESSION = "rcnn-regression"


class RegressionForm(str, Enum):
    LITERAL = "euclidean-literal"
    SQUARED = "squared"


@dataclass(frozen=True)
class LossConfig:
    beta: float = 100.0
    regression_form: RegressionForm = RegressionForm.SQUARED
    stage: Stage = Stage.CNN_CLASSIFICATION

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        object.__setattr__(self, "regression_form", RegressionForm(self.regression_form))
        object.__setattr__(self, "stage", Stage(self.stage))

    def to_dict(self) -> dict:
        return {"beta": self.beta, "regression_form": self.regression_form.value, "stage": self.stage.value}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32  # scan pairs per step in stage 1
    window: int = 8  # frames per truncated window in stage 2 (window - 1 recurrent steps)
    windows_per_batch: int = 4
    epochs: int = 10
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 = only at the end
    finetune_cnn: bool = True
    skip_empty: bool = False
    save_optimizer_state: bool = True

    def __post_init__(self):
        if min(self.lr, self.batch_size, self.windows_per_batch) <= 0 or self.epochs < 0:
            raise ValueError("learning rate, batch sizes must be positive and epochs non-negative")
        if self.window < 2:
            raise ValueError("truncated window must cover at least 2 frames")

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, message: str, last_good: Checkpoint | None):
        super().__init__(message)
        self.last_good = last_good


# -- losses -----------------------------------------------------------------------------------


def _elementwise(form: RegressionForm):
    return nn.squared_error if form == RegressionForm.SQUARED else nn.absolute_error


def regression_loss(pred: MotionDelta, truth: MotionDelta, cfg: LossConfig = LossConfig()) -> float:
    le = _elementwise(cfg.regression_form)
    ld, _ = le(np.float64(pred.delta_d), truth.delta_d)
    lt, _ = le(np.float64(pred.delta_theta), truth.delta_theta)
    return float(ld + cfg.beta * lt)


def classification_loss(delta_d_hat: float, rot_logits, truth: MotionDelta, cfg: LossConfig = LossConfig(),
                        spec: AngleClassSpec = DEFAULT_ANGLE_SPEC) -> float:
    le = _elementwise(cfg.regression_form)
    cls, _ = angles_to_classes(truth.delta_theta, spec)
    ld, _ = le(np.float64(delta_d_hat), truth.delta_d)
    ce, _ = nn.softmax_cross_entropy(np.asarray(rot_logits, dtype=np.float64)[None], np.array([int(cls)]))
    return float(ld + cfg.beta * ce[0])


# -- stage objectives (shared by training and gradient checks) ------------------------------


def pretrain_loss_and_grads(params: ModelParams, pairs: np.ndarray, labels: np.ndarray, lcfg: LossConfig):
    """Mean stage-1 loss over a batch and gradients for conv + head parameters.

    Returns ``(loss, grads, stats)`` where stats carries the two loss terms
    and the number of correctly classified pairs.
    """
    spec = params.config.angle_spec
    feats, c_cnn = cnn_forward_cached(pairs, params)
    d_hat, logits, c_head = pretrain_forward_cached(feats, params)
    n = pairs.shape[0]
    le = _elementwise(lcfg.regression_form)
    ld, gd = le(d_hat.astype(np.float64), labels[:, 0])
    logits64 = logits.astype(np.float64)
    classes, n_clamped = angles_to_classes(labels[:, 1], spec)
    if lcfg.stage == Stage.CNN_CLASSIFICATION:
        lr_, glogits = nn.softmax_cross_entropy(logits64, classes)
    elif lcfg.stage == Stage.CNN_REGRESSION:
        # rotation read out as the softmax expectation over class midpoints
        mids = class_midpoints(spec)
        p = np.exp(nn.log_softmax(logits64))
        theta_hat = p @ mids
        lr_, gth = le(theta_hat, labels[:, 1])
        glogits = gth[:, None] * p * (mids[None, :] - theta_hat[:, None])
    else:
        raise ValueError(f"{lcfg.stage} is not a pretraining stage")
    loss = float(np.mean(ld + lcfg.beta * lr_))
    grads: dict = {}
    dd = (gd / n).astype(params.dtype)
    dlog = (lcfg.beta * glogits / n).astype(params.dtype)
    dfeat = pretrain_backward(dd, dlog, c_head, grads)
    cnn_backward(dfeat, c_cnn, params, grads)
    correct = int(np.sum(np.argmax(logits, axis=1) == classes))
    stats = {"loss_trans": float(np.mean(ld)), "loss_rot": float(np.mean(lr_)), "correct": correct,
             "clamped": n_clamped}
    return loss, grads, stats


def rcnn_loss_and_grads(params: ModelParams, windows: np.ndarray, labels: np.ndarray, mask: np.ndarray,
                        lcfg: LossConfig, finetune_cnn: bool = True, feats: np.ndarray | None = None):
    """Stage-2 loss: regression summed over each window, averaged over windows.

    windows: (B, T, 2, L) scan pairs, labels: (B, T, 2), mask: (B, T) with 1
    for real steps (padding sits at the end of a window).  The pretraining
    heads are frozen: they provide the estimate but get no gradient.
    """
    bsz, t_len = mask.shape
    valid = mask.astype(bool)
    if feats is None:
        flat_pairs = windows[valid]
        f_valid, c_cnn = cnn_forward_cached(flat_pairs, params)
    else:
        f_valid, c_cnn = feats, None
    d_hat, logits, c_head = pretrain_forward_cached(f_valid, params)
    est = pretrain_estimate(d_hat, logits, params.config.angle_spec)
    fdim = f_valid.shape[1]
    xs = np.zeros((t_len, bsz, fdim + 2), dtype=params.dtype)
    xs_valid = np.concatenate([f_valid, est], axis=1)
    xs.transpose(1, 0, 2)[valid] = xs_valid
    out, _, c_rnn = rnn_window_forward(xs, params)
    pred = out.transpose(1, 0, 2).astype(np.float64)  # (B, T, 2)
    le = _elementwise(lcfg.regression_form)
    ld, gd = le(pred[..., 0], labels[..., 0])
    lt, gt = le(pred[..., 1], labels[..., 1])
    m = mask.astype(np.float64)
    loss = float(np.sum((ld + lcfg.beta * lt) * m) / bsz)
    dpred = np.stack([gd * m, lcfg.beta * gt * m], axis=-1) / bsz
    grads: dict = {}
    dxs = rnn_window_backward(dpred.transpose(1, 0, 2).astype(params.dtype), c_rnn, grads)
    if finetune_cnn and c_cnn is not None:
        dx_valid = dxs.transpose(1, 0, 2)[valid]
        dfeat = dx_valid[:, :fdim].copy()
        # translation estimate depends on the features; the class argmax is piecewise constant
        dfeat += pretrain_backward(dx_valid[:, fdim], np.zeros_like(logits), c_head, grads, update_heads=False)
        cnn_backward(dfeat, c_cnn, params, grads)
    abs_err = np.abs(pred - labels)[valid]
    stats = {"loss_trans": float(np.sum(ld * m) / bsz), "loss_rot": float(np.sum(lt * m) / bsz),
             "abs_err_d": float(abs_err[:, 0].mean()), "abs_err_theta": float(abs_err[:, 1].mean())}
    return loss, grads, stats


# -- optimiser -----------------------------------------------------------------------------------


class Adam:
    """Adaptive-moment optimiser updating parameter arrays in place."""

    def __init__(self, params: ModelParams, names: Sequence[str], cfg: TrainConfig, state: dict | None = None,
                 step: int = 0):
        self.params = params
        self.names = list(names)
        self.cfg = cfg
        self.step = step
        self.m = {}
        self.v = {}
        for n in self.names:
            if state and f"adam.m/{n}" in state:
                self.m[n] = state[f"adam.m/{n}"].astype(params[n].dtype)
                self.v[n] = state[f"adam.v/{n}"].astype(params[n].dtype)
            else:
                self.m[n] = np.zeros_like(params[n])
                self.v[n] = np.zeros_like(params[n])

    def update(self, grads: dict) -> None:
        self.step += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        lr_t = self.cfg.lr * math.sqrt(1.0 - b2**self.step) / (1.0 - b1**self.step)
        for n in self.names:
            g = grads.get(n)
            if g is None:
                continue
            g = g.astype(self.params[n].dtype, copy=False)
            m, v, p = self.m[n], self.v[n], self.params[n]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            g = g * g
            g *= 1.0 - b2
            v += g
            np.sqrt(v, out=g)
            g += self.cfg.adam_eps
            np.divide(m, g, out=g)
            g *= lr_t
            p -= g

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.names:
            out[f"adam.m/{n}"] = self.m[n]
            out[f"adam.v/{n}"] = self.v[n]
        return out


def _snapshot(params: ModelParams, opt: Adam, meta: dict, tcfg: TrainConfig, live: bool) -> Checkpoint:
    """Checkpoint of the running state.

    The per-epoch fallback kept for divergence (``live=False``) copies the
    parameters only; copying the two moment estimates as well would triple
    its size.  ``live=True`` shares the arrays, optimiser state included, and
    is only used once training has stopped or to write a file right away.
    """
    if live:
        return Checkpoint(params, meta, opt.state() if tcfg.save_optimizer_state else {})
    return Checkpoint(params.copy(), meta, {})


# -- data ---------------------------------------------------------------------------------------------


def collect_pairs(data: Sequence[LabeledSequence], max_range: float, skip_empty: bool = False):
    """All consecutive scan pairs ``(N, 2, L)`` and labels ``(N, 2)`` across sequences."""
    from .encoding import EncoderConfig

    xs, ys = [], []
    for seq in data:
        if len(seq) < 2:
            continue
        pairs = stack_pairs(seq.frames, EncoderConfig(max_range)).astype(np.float32)
        labels = seq.label_array()
        if skip_empty:
            keep = (pairs[:, 0].max(axis=1) > 0) & (pairs[:, 1].max(axis=1) > 0)
            pairs, labels = pairs[keep], labels[keep]
        xs.append(pairs)
        ys.append(labels)
    if not xs or sum(len(x) for x in xs) == 0:
        raise TrainingError("no scan pairs to train on")
    return np.concatenate(xs), np.concatenate(ys)


def make_windows(data: Sequence[LabeledSequence], window: int, max_range: float):
    """Split every sequence into chunks of ``window - 1`` consecutive pairs.

    Returns padded arrays ``(W, T, 2, L)``, labels ``(W, T, 2)`` and mask ``(W, T)``.
    """
    from .encoding import EncoderConfig

    t_len = window - 1
    chunks = []
    for seq in data:
        if len(seq) < 2:
            continue
        pairs = stack_pairs(seq.frames, EncoderConfig(max_range)).astype(np.float32)
        labels = seq.label_array()
        for start in range(0, len(labels), t_len):
            chunks.append((pairs[start : start + t_len], labels[start : start + t_len]))
    if not chunks:
        raise TrainingError("no scan pairs to train on")
    length = chunks[0][0].shape[-1]
    w = np.zeros((len(chunks), t_len, 2, length), dtype=np.float32)
    y = np.zeros((len(chunks), t_len, 2))
    mask = np.zeros((len(chunks), t_len))
    for i, (p, l) in enumerate(chunks):
        w[i, : len(p)] = p
        y[i, : len(l)] = l
        mask[i, : len(l)] = 1.0
    return w, y, mask


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


class _Logger:
    def __init__(self, path):
        self.fh = open(path, "a") if path else None

    def write(self, **record):
        if self.fh:
            self.fh.write(json.dumps(record, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


# -- stage 1 ----------------------------------------------------------------------------------


def train_cnn(data: Sequence[LabeledSequence], lcfg: LossConfig = LossConfig(), tcfg: TrainConfig = TrainConfig(),
              model_cfg: ModelConfig = ModelConfig(), resume: Checkpoint | None = None, log_path=None,
              checkpoint_dir=None, dtype=np.float32, strict: bool = True,
              on_epoch: Callable[[dict], None] | None = None) -> tuple[Checkpoint, list[dict]]:
    """Pretrain convolutions and heads on shuffled scan pairs.

    Returns the final checkpoint and one record per epoch (mean loss,
    classification accuracy, clamp count).
    """
    if lcfg.stage not in (Stage.CNN_CLASSIFICATION, Stage.CNN_REGRESSION):
        raise ValueError("train_cnn needs a pretraining stage")
    pairs, labels = collect_pairs(data, model_cfg.max_range, tcfg.skip_empty)
    if resume is not None:
        if resume.digest != model_cfg.digest():
            raise CheckpointError("resume checkpoint was built for a different configuration")
        params = resume.params.astype(dtype)
        start_epoch = int(resume.meta.get("epoch", 0))
        step = int(resume.meta.get("step", 0))
        state = resume.extra
    else:
        params = init_params(model_cfg, tcfg.seed, dtype, strict=strict)
        start_epoch, step, state = 0, 0, None
    names = [n for n in params if param_group(n) in ("cnn", "heads")]
    opt = Adam(params, names, tcfg, state, step)
    logger = _Logger(log_path)
    history: list[dict] = []

    def snapshot(epoch, live=False):
        meta = {"stage": lcfg.stage.value, "epoch": epoch, "step": opt.step, "seed": tcfg.seed,
                "loss_config": lcfg.to_dict(), "train_config": tcfg.to_dict()}
        return _snapshot(params, opt, meta, tcfg, live)

    last_good = snapshot(start_epoch)
    done = start_epoch
    n = len(pairs)
    try:
        for epoch in range(start_epoch, tcfg.epochs):
            t0 = time.perf_counter()
            order = _epoch_rng(tcfg.seed, epoch).permutation(n)
            tot = {"loss": 0.0, "loss_trans": 0.0, "loss_rot": 0.0, "correct": 0, "clamped": 0}
            for b in range(0, n, tcfg.batch_size):
                idx = order[b : b + tcfg.batch_size]
                loss, grads, stats = pretrain_loss_and_grads(params, pairs[idx], labels[idx], lcfg)
                if not math.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {opt.step}", last_good)
                opt.update(grads)
                k = len(idx)
                tot["loss"] += loss * k
                tot["loss_trans"] += stats["loss_trans"] * k
                tot["loss_rot"] += stats["loss_rot"] * k
                tot["correct"] += stats["correct"]
                tot["clamped"] += stats["clamped"]
            if not params.all_finite():
                raise TrainingDiverged(f"non-finite parameters after epoch {epoch}", last_good)
            rec = {"stage": lcfg.stage.value, "epoch": epoch + 1, "step": opt.step,
                   "loss": tot["loss"] / n, "loss_trans": tot["loss_trans"] / n, "loss_rot": tot["loss_rot"] / n,
                   "accuracy": tot["correct"] / n, "clamp_count": tot["clamped"],
                   "wall_time": time.perf_counter() - t0}
            history.append(rec)
            logger.write(**rec)
            log.info("stage1 epoch %d loss %.5f acc %.3f", epoch + 1, rec["loss"], rec["accuracy"])
            if on_epoch:
                on_epoch(rec)
            last_good = snapshot(epoch + 1)
            done = epoch + 1
            if checkpoint_dir and tcfg.checkpoint_every and done % tcfg.checkpoint_every == 0:
                snapshot(done, live=True).save(Path(checkpoint_dir) / f"cnn_epoch{done:04d}.ckpt")
    finally:
        logger.close()
    return snapshot(done, live=True), history


# -- stage 2 ----------------------------------------------------------------------------------


def train_rcnn(data: Sequence[LabeledSequence], cnn_ckpt: Checkpoint, lcfg: LossConfig | None = None,
               tcfg: TrainConfig = TrainConfig(), resume: Checkpoint | None = None, log_path=None,
               checkpoint_dir=None, dtype=np.float32, expect_digest: str | None = None,
               on_epoch: Callable[[dict], None] | None = None) -> tuple[Checkpoint, list[dict]]:
    """Train the full network on truncated windows, starting from pretrained convolutions."""
    lcfg = lcfg or LossConfig(stage=Stage.RCNN_REGRESSION)
    if lcfg.stage != Stage.RCNN_REGRESSION:
        raise ValueError("train_rcnn optimises the regression objective")
    model_cfg = cnn_ckpt.config
    if expect_digest is not None and cnn_ckpt.digest != expect_digest:
        raise CheckpointError(f"CNN checkpoint config {cnn_ckpt.digest} is incompatible with {expect_digest}")
    if resume is not None:
        if resume.digest != cnn_ckpt.digest:
            raise CheckpointError("resume checkpoint was built for a different configuration")
        params = resume.params.astype(dtype)
        start_epoch = int(resume.meta.get("epoch", 0))
        step = int(resume.meta.get("step", 0))
        state = resume.extra
    else:
        params = init_params(model_cfg, tcfg.seed, dtype, strict=False)
        for name, arr in cnn_ckpt.params.items():
            if param_group(name) in ("cnn", "heads"):
                params[name] = arr.astype(dtype).copy()
        start_epoch, step, state = 0, 0, None
    trainable = [n for n in params if param_group(n) == "rnn" or (tcfg.finetune_cnn and param_group(n) == "cnn")]
    opt = Adam(params, trainable, tcfg, state, step)
    windows, labels, mask = make_windows(data, tcfg.window, model_cfg.max_range)
    feats_cache = None
    if not tcfg.finetune_cnn:
        feats_cache = [cnn_forward_cached(windows[i][mask[i].astype(bool)], params)[0] for i in range(len(windows))]
    logger = _Logger(log_path)
    history: list[dict] = []

    def snapshot(epoch, live=False):
        meta = {"stage": lcfg.stage.value, "epoch": epoch, "step": opt.step, "seed": tcfg.seed,
                "loss_config": lcfg.to_dict(), "train_config": tcfg.to_dict(),
                "cnn_checkpoint_digest": cnn_ckpt.digest}
        return _snapshot(params, opt, meta, tcfg, live)

    last_good = snapshot(start_epoch)
    done = start_epoch
    n_win = len(windows)
    n_steps = float(mask.sum())
    try:
        for epoch in range(start_epoch, tcfg.epochs):
            t0 = time.perf_counter()
            order = _epoch_rng(tcfg.seed, epoch).permutation(n_win)
            tot = {"loss": 0.0, "err_d": 0.0, "err_t": 0.0}
            for b in range(0, n_win, tcfg.windows_per_batch):
                idx = order[b : b + tcfg.windows_per_batch]
                feats = None
                if feats_cache is not None:
                    feats = np.concatenate([feats_cache[i] for i in idx])
                loss, grads, stats = rcnn_loss_and_grads(params, windows[idx], labels[idx], mask[idx], lcfg,
                                                         tcfg.finetune_cnn, feats)
                if not math.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {opt.step}", last_good)
                opt.update(grads)
                steps = float(mask[idx].sum())
                tot["loss"] += loss * len(idx)
                tot["err_d"] += stats["abs_err_d"] * steps
                tot["err_t"] += stats["abs_err_theta"] * steps
            if not params.all_finite():
                raise TrainingDiverged(f"non-finite parameters after epoch {epoch}", last_good)
            rec = {"stage": lcfg.stage.value, "epoch": epoch + 1, "step": opt.step, "loss": tot["loss"] / n_win,
                   "mean_abs_err_d": tot["err_d"] / n_steps, "mean_abs_err_theta": tot["err_t"] / n_steps,
                   "wall_time": time.perf_counter() - t0}
            history.append(rec)
            logger.write(**rec)
            log.info("stage2 epoch %d loss %.5f |dd| %.4f |dth| %.5f", epoch + 1, rec["loss"],
                     rec["mean_abs_err_d"], rec["mean_abs_err_theta"])
            if on_epoch:
                on_epoch(rec)
            last_good = snapshot(epoch + 1)
            done = epoch + 1
            if checkpoint_dir and tcfg.checkpoint_every and done % tcfg.checkpoint_every == 0:
                snapshot(done, live=True).save(Path(checkpoint_dir) / f"rcnn_epoch{done:04d}.ckpt")
    finally:
        logger.close()
    return snapshot(done, live=True), history


# -- gradient checks ----------------------------------------------------------------------------


TOY_CONFIG = ModelConfig(
    cnn=CnnConfig(input_length=64, in_channels=2, layers=((3, 1, 4), (3, 2, 4), (3, 1, 4), (3, 2, 4), (3, 1, 4), (3, 2, 4))),
    rnn=RnnConfig(num_layers=2, hidden_size=8),
)


@dataclass
class GradCheckReport:
    stage: str
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def gradient_check(stage: Stage | str, seed: int = 0, regression_form: RegressionForm | str = RegressionForm.SQUARED,
                   cfg: ModelConfig = TOY_CONFIG, eps: float = 1e-5) -> GradCheckReport:
    """Analytic vs central-difference gradients of a stage loss on toy dimensions (float64)."""
    stage = Stage(stage)
    form = RegressionForm(regression_form)
    lcfg = LossConfig(regression_form=form, stage=stage)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed, np.float64, strict=False)
    for name in params:  # non-trivial biases so no term is identically zero
        if name.endswith("bias"):
            params[name] += rng.normal(0.0, 0.1, params[name].shape)
    length = cfg.cnn.input_length
    if stage == Stage.RCNN_REGRESSION:
        bsz, t_len = 2, 3
        x = rng.uniform(0.0, 1.0, (bsz, t_len, 2, length))
        y = np.column_stack([rng.uniform(0.5, 1.5, bsz * t_len), rng.uniform(-0.08, 0.08, bsz * t_len)])
        y = y.reshape(bsz, t_len, 2)
        mask = np.ones((bsz, t_len))
        mask[1, -1] = 0.0
        if form == RegressionForm.LITERAL:
            _push_from_kink(lambda: _rcnn_pred(params, x, mask), y)

        def objective():
            return rcnn_loss_and_grads(params, x, y, mask, lcfg)[0]

        _, grads, _ = rcnn_loss_and_grads(params, x, y, mask, lcfg)
        names = [n for n in params if param_group(n) in ("cnn", "rnn")]
    else:
        bsz = 3
        x = rng.uniform(0.0, 1.0, (bsz, 2, length))
        y = np.column_stack([rng.uniform(0.5, 1.5, bsz), rng.uniform(-0.08, 0.08, bsz)])
        if form == RegressionForm.LITERAL:
            _push_from_kink(lambda: _pretrain_pred(params, x, stage), y)

        def objective():
            return pretrain_loss_and_grads(params, x, y, lcfg)[0]

        _, grads, _ = pretrain_loss_and_grads(params, x, y, lcfg)
        names = [n for n in params if param_group(n) in ("cnn", "heads")]
    report = GradCheckReport(stage.value if form == RegressionForm.SQUARED else f"{stage.value}/{form.value}", 0.0)
    for name in names:
        num = nn.numerical_gradient(objective, params[name], eps)
        err = nn.relative_error(grads[name], num)
        report.per_param[name] = err
        report.max_rel_error = max(report.max_rel_error, err)
    return report


def _pretrain_pred(params, x, stage):
    feats, _ = cnn_forward_cached(x, params)
    d_hat, logits, _ = pretrain_forward_cached(feats, params)
    if stage == Stage.CNN_REGRESSION:
        p = np.exp(nn.log_softmax(logits))
        return np.column_stack([d_hat, p @ class_midpoints(params.config.angle_spec)])
    return np.column_stack([d_hat, np.full_like(d_hat, np.nan)])


def _rcnn_pred(params, x, mask):
    bsz, t_len = mask.shape
    feats, _ = cnn_forward_cached(x.reshape(bsz * t_len, *x.shape[2:]), params)
    d_hat, logits, _ = pretrain_forward_cached(feats, params)
    est = pretrain_estimate(d_hat, logits, params.config.angle_spec)
    xs = np.concatenate([feats, est], axis=1).reshape(bsz, t_len, -1).transpose(1, 0, 2)
    out, _, _ = rnn_window_forward(np.ascontiguousarray(xs), params)
    return out.transpose(1, 0, 2).reshape(-1, 2)


def _push_from_kink(predict, y, margin=1e-3):
    """Move targets so every residual of the literal loss is at least ``margin`` from zero."""
    pred = predict().reshape(y.shape)
    for k in range(y.shape[-1]):
        r = pred[..., k] - y[..., k]
        close = np.isfinite(r) & (np.abs(r) < margin)
        y[..., k] = np.where(close, pred[..., k] - np.where(r >= 0, 10 * margin, -10 * margin), y[..., k])
