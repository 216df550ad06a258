"""Optimizer, schedules, masking, and the classification and masked-patch training loops."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import encoder as E
from . import tensor as T
from .encoder import EncoderConfig
from .geometry import PointCloud, chamfer_batch, group_batch
from .ssm import subparams, trunc_normal
from .tensor import NonFiniteError, Tensor

METRIC_COLUMNS = ("epoch", "split", "loss", "oa", "lr")


# ---------------------------------------------------------------- AdamW


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    no_decay: frozenset = frozenset()


def default_no_decay(params: dict[str, Tensor]) -> frozenset:
    """Biases, norm gains, tokens and other 1-D parameters are not decayed."""
    return frozenset(k for k, t in params.items() if t.ndim < 2)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
               lr: float | None = None) -> None:
    """In-place AdamW update with decoupled weight decay and bias correction."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if name not in state.no_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def cosine_lr(epoch: int, total_epochs: int, lr_max: float, lr_min: float = 0.0, warmup_epochs: int = 10) -> float:
    """Linear warmup reaching lr_max at ``warmup_epochs``, then a half cosine down to lr_min."""
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    warm = min(warmup_epochs, total_epochs)
    if epoch == total_epochs:
        return lr_min if total_epochs > warm else lr_max
    if epoch < warm:
        return lr_max * (epoch + 1) / (warm + 1)
    t = (epoch - warm) / (total_epochs - warm)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------- masking


@dataclass
class MaskSpec:
    ratio: float
    masked: np.ndarray  # sorted token indices into 0..L-1 (CLS excluded)
    visible: np.ndarray


def masked_count(L: int, ratio: float) -> int:
    return int(math.floor(ratio * L + 0.5))


def mask_tokens(L: int, ratio: float, seed) -> MaskSpec:
    """Uniform random subset of round(ratio * L) patch tokens; ``seed`` is an int or Generator."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must be in (0, 1), got {ratio}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = masked_count(L, ratio)
    if not 1 <= n < L:
        raise ValueError(f"ratio {ratio} masks {n} of {L} tokens; need at least one masked and one visible")
    perm = rng.permutation(L)
    return MaskSpec(ratio, np.sort(perm[:n]), np.sort(perm[n:]))


# ---------------------------------------------------------------- hyperparameters


@dataclass
class TrainHyper:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 5e-4
    lr_min: float = 1e-6
    warmup_epochs: int = 10
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    augment: bool = True
    scale_range: tuple = (0.8, 1.2)
    translate_range: tuple = (-0.1, 0.1)
    mask_range: tuple = (0.55, 0.85)
    decoder_depth: int = 4

    def __post_init__(self):
        for name in ("betas", "scale_range", "translate_range", "mask_range"):
            setattr(self, name, tuple(float(x) for x in getattr(self, name)))
        if self.epochs < 0 or self.batch_size < 1 or self.decoder_depth < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and decoder_depth >= 1 required")
        lo, hi = self.mask_range
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError(f"mask_range must satisfy 0 < lo <= hi < 1, got {self.mask_range}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHyper":
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ValueError(f"unknown training keys: {unknown}")
        return cls(**d)


def new_optimizer(params: dict[str, Tensor], hyper: TrainHyper, lr: float) -> OptimizerState:
    return OptimizerState(lr=lr, betas=hyper.betas, eps=hyper.eps, weight_decay=hyper.weight_decay,
                          no_decay=default_no_decay(params))


# ---------------------------------------------------------------- helpers


def augment_cloud(cloud: PointCloud, rng: np.random.Generator, hyper: TrainHyper) -> PointCloud:
    """Per-axis random scaling then a random translation."""
    s = rng.uniform(*hyper.scale_range, size=3)
    t = rng.uniform(*hyper.translate_range, size=3)
    return PointCloud(cloud.points * s + t, cloud.label)


def _batches(n: int, size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i : i + size] for i in range(0, n, size)]


def _require_grad(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.requires_grad = True


def _step(params: dict[str, Tensor], loss: Tensor, opt: OptimizerState, lr: float) -> None:
    if not np.isfinite(loss.data).all():
        raise NonFiniteError(f"non-finite loss {float(loss.data)}")
    for t in params.values():
        t.grad = None
    T.backward(loss)
    adamw_step(params, {k: t.grad for k, t in params.items() if t.grad is not None}, opt, lr)


def _labels(clouds) -> np.ndarray:
    labels = np.array([c.label for c in clouds])
    if any(c.label is None for c in clouds):
        raise ValueError("every training cloud needs a label")
    return labels


@dataclass
class EvalResult:
    loss: float
    oa: float
    predictions: np.ndarray
    labels: np.ndarray

    def per_class(self, n_classes: int) -> list[float]:
        out = []
        for c in range(n_classes):
            sel = self.labels == c
            out.append(float((self.predictions[sel] == c).mean()) if sel.any() else float("nan"))
        return out


def classify_logits(clouds, params: dict[str, Tensor], cfg: EncoderConfig, rng=None) -> Tensor:
    groups, centers = group_batch(clouds, cfg.L, cfg.K)
    tokens = E.encode_patches(groups, centers, params, cfg)
    return E.classification_head(E.readout(tokens), params, cfg.dropout, rng)


def evaluate(clouds, params: dict[str, Tensor], cfg: EncoderConfig, batch_size: int = 32) -> EvalResult:
    labels = _labels(clouds)
    preds, total = [], 0.0
    with T.no_grad():
        for idx in _batches(len(clouds), batch_size, None):
            logits = classify_logits([clouds[i] for i in idx], params, cfg)
            total += T.cross_entropy(logits, labels[idx]).item() * len(idx)
            preds.append(np.argmax(logits.data, axis=-1))
    preds = np.concatenate(preds)
    return EvalResult(total / len(clouds), float((preds == labels).mean()), preds, labels)


# ---------------------------------------------------------------- classification


@dataclass
class TrainResult:
    params: dict
    optimizer: OptimizerState
    history: list
    epoch: int
    rng_state: dict
    seconds: float = 0.0


Logger = Callable[[dict], None]


def train_classifier(train_set, test_set, cfg: EncoderConfig, hyper: TrainHyper, seed: int = 0,
                     init_params: dict[str, Tensor] | None = None, log: Logger | None = None) -> TrainResult:
    """Supervised training from scratch (or from ``init_params``); one train and one test row per epoch.

    Epoch 0 rows hold the metrics before any update. Train rows evaluate the
    training clouds without augmentation or dropout.
    """
    if not train_set:
        raise ValueError("training set is empty")
    labels = _labels(train_set)
    if labels.min() < 0 or labels.max() >= cfg.n_classes:
        raise ValueError(f"labels must lie in [0, {cfg.n_classes})")
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    params = E.init_encoder_params(cfg, rng)
    params.update(E.init_head_params(cfg, rng))
    if init_params is not None:
        for k, v in init_params.items():
            if k in params:
                if params[k].shape != v.shape:
                    raise T.ShapeError(f"initial parameter {k} has shape {v.shape}, expected {params[k].shape}")
                params[k] = Tensor(v.data.copy(), dtype=params[k].dtype)
    _require_grad(params)
    opt = new_optimizer(params, hyper, hyper.lr)
    history: list[dict] = []

    def record(epoch, lr):
        for split, clouds in (("train", train_set), ("test", test_set)):
            if not clouds:
                continue
            r = evaluate(clouds, params, cfg, hyper.batch_size)
            row = {"epoch": epoch, "split": split, "loss": r.loss, "oa": r.oa, "lr": lr}
            history.append(row)
            if log:
                log(row)

    record(0, cosine_lr(0, hyper.epochs, hyper.lr, hyper.lr_min, hyper.warmup_epochs))
    for epoch in range(1, hyper.epochs + 1):
        lr = cosine_lr(epoch - 1, hyper.epochs, hyper.lr, hyper.lr_min, hyper.warmup_epochs)
        for idx in _batches(len(train_set), hyper.batch_size, rng):
            clouds = [train_set[i] for i in idx]
            if hyper.augment:
                clouds = [augment_cloud(c, rng, hyper) for c in clouds]
            T.reset_tape()
            logits = classify_logits(clouds, params, cfg, rng)
            _step(params, T.cross_entropy(logits, labels[idx]), opt, lr)
        record(epoch, lr)
    return TrainResult(params, opt, history, hyper.epochs, rng.bit_generator.state,
                       time.perf_counter() - start)


# ---------------------------------------------------------------- masked-patch pretraining


def init_decoder_params(cfg: EncoderConfig, depth: int, rng: np.random.Generator) -> dict[str, Tensor]:
    c = cfg.C
    p: dict[str, Tensor] = {"dec.mask_token": Tensor(trunc_normal(rng, (c,))),
                            "dec.cls_pos": Tensor(trunc_normal(rng, (c,)))}
    E._lin(rng, p, "dec.pos.fc1", 3, cfg.pos_hidden)
    E._lin(rng, p, "dec.pos.fc2", cfg.pos_hidden, c)
    for i in range(depth):
        E.init_bi_ssm_params(rng, c, cfg.variant, cfg.ssm, f"dec.layers.{i}", p)
    E._ln(p, "dec.norm", c)
    E._lin(rng, p, "dec.pred", c, 3 * cfg.K)
    return E._cast(p)


def batch_masks(batch: int, L: int, ratio: float, rng: np.random.Generator) -> list[MaskSpec]:
    return [mask_tokens(L, ratio, rng) for _ in range(batch)]


def pretrain_loss(groups: np.ndarray, centers: np.ndarray, masks: list[MaskSpec], params: dict[str, Tensor],
                  cfg: EncoderConfig) -> Tensor:
    """Mean Chamfer distance between predicted and true center-relative masked patches.

    The encoder sees visible patches only. The decoder sequence is
    ``[CLS, visible outputs, mask tokens]`` so that every masked slot follows
    all visible context under forward scans; positional encodings of the true
    centers are added before every decoder block, and a linear head predicts
    K x 3 offsets per masked slot.
    """
    b, L = groups.shape[:2]
    vis = np.stack([m.visible for m in masks])
    msk = np.stack([m.masked for m in masks])
    lv, nm = vis.shape[1], msk.shape[1]
    rows = np.arange(b)[:, None]
    k_eff = min(cfg.k, lv)
    emb = E.light_pointnet_embed(groups[rows, vis], params)
    z = E.assemble_tokens(emb, centers[rows, vis], params, k_eff)
    enc = E.encode_tokens(z, params, cfg)  # (B, Lv+1, C)

    c = cfg.C
    mask_tok = T.expand(T.reshape(params["dec.mask_token"], (1, 1, c)), (b, nm, c))
    x = T.concat([enc, mask_tok], axis=1)
    dec_pos_p = {k[4:]: v for k, v in params.items() if k.startswith("dec.pos.")}
    cls_pos = T.expand(T.reshape(params["dec.cls_pos"], (1, 1, c)), (b, 1, c))
    ordered = np.concatenate([centers[rows, vis], centers[rows, msk]], axis=1)
    pos = T.concat([cls_pos, E.pos_encode(ordered, dec_pos_p)], axis=1)
    depth = len({k.split(".")[2] for k in params if k.startswith("dec.layers.")})
    for i in range(depth):
        x = E.bi_ssm_block(x + pos, subparams(params, f"dec.layers.{i}"), cfg.variant)
    x = T.layernorm(x, params["dec.norm.g"], params["dec.norm.b"])
    pred = T.linear(x[:, 1 + lv:], params["dec.pred.w"], params["dec.pred.b"])
    pred = T.reshape(pred, (b * nm, cfg.K, 3))
    target = groups[rows, msk].reshape(b * nm, cfg.K, 3)
    return T.reduce_mean(chamfer_batch(pred, target.astype(pred.dtype)))


def pretrain(train_set, cfg: EncoderConfig, hyper: TrainHyper, seed: int = 0,
             log: Logger | None = None) -> TrainResult:
    """Masked point modeling; one ``pretrain`` row per epoch with the mean training Chamfer loss."""
    if not train_set:
        raise ValueError("training set is empty")
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    params = E.init_encoder_params(cfg, rng)
    params.update(init_decoder_params(cfg, hyper.decoder_depth, rng))
    _require_grad(params)
    opt = new_optimizer(params, hyper, hyper.lr)
    history: list[dict] = []
    for epoch in range(1, hyper.epochs + 1):
        lr = cosine_lr(epoch - 1, hyper.epochs, hyper.lr, hyper.lr_min, hyper.warmup_epochs)
        total = 0.0
        for idx in _batches(len(train_set), hyper.batch_size, rng):
            groups, centers = group_batch([train_set[i] for i in idx], cfg.L, cfg.K)
            ratio = rng.uniform(*hyper.mask_range)
            T.reset_tape()
            loss = pretrain_loss(groups, centers, batch_masks(len(idx), cfg.L, ratio, rng), params, cfg)
            _step(params, loss, opt, lr)
            total += loss.item() * len(idx)
        row = {"epoch": epoch, "split": "pretrain", "loss": total / len(train_set), "oa": float("nan"), "lr": lr}
        history.append(row)
        if log:
            log(row)
    return TrainResult(params, opt, history, hyper.epochs, rng.bit_generator.state,
                       time.perf_counter() - start)


def encoder_part(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Drop decoder and head parameters, e.g. to fine-tune a pretrained encoder."""
    return {k: v for k, v in params.items() if not k.startswith(("dec.", "head."))}


def metrics_csv(history: list[dict]) -> str:
    lines = [",".join(METRIC_COLUMNS)]
    for r in history:
        oa = "" if r["oa"] != r["oa"] else f"{r['oa']:.6f}"
        lines.append(f"{r['epoch']},{r['split']},{r['loss']:.8g},{oa},{r['lr']:.8g}")
    return "\n".join(lines) + "\n"
