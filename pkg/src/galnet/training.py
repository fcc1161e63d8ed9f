"""Losses, learning-rate schedules and the gradient-partitioned SGD loop.

Two losses are computed per step: ``L_f`` on the branch classifiers and
``L_c`` on the classifiers that read refined nodes. Each is backpropagated on
its own, and each may only touch the parameters its variant allows:

============  =====================  ======================
variant       L_f updates            L_c updates
============  =====================  ======================
baseline      FLN, HEAD_F            (no L_c)
gal_j         FLN, HEAD_F            CLN, HEAD_C
gal_c         nothing (frozen)       CLN, HEAD_C
gal_p         FLN, HEAD_F            CLN, HEAD_C (fixed attention)
============  =====================  ======================

A gradient from either loss landing anywhere else raises
:class:`GradientIsolationError`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from galnet import autodiff as ad
from galnet.autodiff import Tensor
from galnet.data import Dataset, random_flip
from galnet.errors import ConfigError, ContractError, GradientIsolationError, NumericError
from galnet.model import AttributeModel, ParamRegistry, normalize_variant

logger = logging.getLogger(__name__)

# the baseline decays half as hard as the graph variants
DEFAULT_WEIGHT_DECAY = {"baseline": 0.0005, "gal_j": 0.001, "gal_c": 0.001, "gal_p": 0.001}

ROUTES = {
    "baseline": {"f": ("FLN", "HEAD_F"), "c": ()},
    "gal_j": {"f": ("FLN", "HEAD_F"), "c": ("CLN", "HEAD_C")},
    "gal_c": {"f": (), "c": ("CLN", "HEAD_C")},
    "gal_p": {"f": ("FLN", "HEAD_F"), "c": ("CLN", "HEAD_C")},
}


def attribute_ce_loss(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Softmax cross-entropy summed over attributes, averaged over samples.

    ``logits`` is B x M x 2, ``labels`` B x M in {0, 1}. Returns the scalar
    loss and the per-attribute terms (same averaging, no attribute sum).
    """
    labels = np.asarray(labels)
    if logits.data.ndim != 3 or logits.shape[-1] != 2 or logits.shape[:2] != labels.shape:
        raise ContractError(f"logits {logits.shape} do not match labels {labels.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise ContractError("labels must be 0 or 1")
    b = labels.shape[0]
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, labels.astype(np.int64)[..., None], 1.0, axis=-1)
    picked = ad.mul(ad.log_softmax(logits, axis=-1), Tensor(onehot))
    per_attr = ad.sum(picked, axes=(0, 2))
    loss = ad.mul(ad.sum(per_attr), -1.0 / b)
    return loss, -per_attr.data / b


def poly_decay_lr(step: int, initial: float, power: float, max_steps: int) -> float:
    if step >= max_steps:
        return 0.0
    return initial * (1.0 - step / max_steps) ** power


def cyclical_lr(step: int, min_lr: float, max_lr: float, stepsize: int) -> float:
    """Triangular cyclical policy: min at multiples of 2*stepsize, max halfway."""
    cycle = math.floor(1 + step / (2 * stepsize))
    x = abs(step / stepsize - 2 * cycle + 1)
    return min_lr + (max_lr - min_lr) * max(0.0, 1.0 - x)


@dataclass
class TrainConfig:
    variant: str = "gal_j"
    batch_size: int = 16
    max_steps: int = 500
    schedule: str = "poly"  # poly | cyclical
    lr: float = 0.005  # poly: initial rate
    lr_power: float = 1.0
    lr_min: float = 0.0  # cyclical
    lr_max: float = 0.005
    stepsize: int = 5000
    weight_decay: float | None = None  # None: per-variant default
    seed: int = 0
    eval_every: int = 50
    augment_flip: bool = True

    def __post_init__(self):
        self.variant = normalize_variant(self.variant)
        if self.weight_decay is None:
            self.weight_decay = DEFAULT_WEIGHT_DECAY[self.variant]
        if self.batch_size < 2:
            raise ConfigError(f"batch_size: batch norm needs at least 2, got {self.batch_size}")
        if self.max_steps < 0:
            raise ConfigError(f"max_steps: must be non-negative, got {self.max_steps}")
        if self.schedule not in ("poly", "cyclical"):
            raise ConfigError(f"schedule: expected poly or cyclical, got {self.schedule!r}")
        if self.stepsize < 1:
            raise ConfigError("stepsize: must be at least 1")
        if self.lr_min > self.lr_max:
            raise ConfigError("lr_min: must not exceed lr_max")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr/weight_decay: must be non-negative")
        if self.eval_every < 1:
            raise ConfigError("eval_every: must be at least 1")

    def lr_at(self, step: int) -> float:
        if self.schedule == "poly":
            return poly_decay_lr(step, self.lr, self.lr_power, self.max_steps)
        return cyclical_lr(step, self.lr_min, self.lr_max, self.stepsize)


@dataclass
class LossBreakdown:
    l_f: float
    l_c: float | None = None
    per_attribute_f: np.ndarray = field(default_factory=lambda: np.zeros(0))
    per_attribute_c: np.ndarray | None = None
    acc_f: float = float("nan")
    acc_c: float | None = None


def _collect(registry: ParamRegistry, allowed: tuple[str, ...], loss_name: str) -> dict[str, np.ndarray]:
    """Take gradients off the registry, failing if one landed outside ``allowed``."""
    grads = {}
    for name, t, tag in registry:
        g = t.grad
        t.grad = None
        if g is None:
            continue
        if tag not in allowed:
            raise GradientIsolationError(f"{loss_name} reached {name} ({tag})")
        grads[name] = g
    return grads


def compute_gradients(model: AttributeModel, batch, labels, variant: str | None = None):
    """Forward + two isolated backward passes.

    Returns (LossBreakdown, grads_f, grads_c) where each grads dict maps
    parameter names to the gradient from that loss alone.
    """
    variant = normalize_variant(variant or model.variant)
    if variant != model.variant:
        raise ContractError(f"step variant {variant} does not match model variant {model.variant}")
    routes = ROUTES[variant]
    registry = model.registry
    registry.zero_grad()
    out = model.forward(batch, mode="train", freeze_fln=variant == "gal_c")
    l_f, per_f = attribute_ce_loss(out.logits_f, labels)
    labels = np.asarray(labels)
    report = LossBreakdown(
        float(l_f.data), per_attribute_f=per_f,
        acc_f=float(np.mean(np.argmax(out.logits_f.data, -1) == labels)),
    )
    grads_c: dict[str, np.ndarray] = {}
    if out.logits_c is not None:
        l_c, per_c = attribute_ce_loss(out.logits_c, labels)
        report.l_c, report.per_attribute_c = float(l_c.data), per_c
        report.acc_c = float(np.mean(np.argmax(out.logits_c.data, -1) == labels))
        ad.backward(l_c)
        grads_c = _collect(registry, routes["c"], "L_c")
    grads_f: dict[str, np.ndarray] = {}
    if routes["f"]:
        ad.backward(l_f)
        grads_f = _collect(registry, routes["f"], "L_f")
    return report, grads_f, grads_c


def apply_sgd(registry: ParamRegistry, grads: dict[str, np.ndarray], lr: float, weight_decay: float) -> None:
    """Plain SGD with decoupled weight decay on the parameters in ``grads``."""
    for name, g in grads.items():
        t = registry.entries[name][0]
        if weight_decay:
            t.data = t.data - lr * g - lr * weight_decay * t.data
        else:
            t.data = t.data - lr * g


def partitioned_step(
    model: AttributeModel,
    registry: ParamRegistry,
    batch,
    labels,
    variant: str,
    lr: float,
    weight_decay: float,
) -> LossBreakdown:
    report, grads_f, grads_c = compute_gradients(model, batch, labels, variant)
    overlap = grads_f.keys() & grads_c.keys()
    if overlap:
        raise GradientIsolationError(f"parameters receive both losses: {sorted(overlap)[:3]}")
    grads = {**grads_f, **grads_c}
    # every updatable parameter decays, even one the loss left untouched
    if weight_decay:
        routes = ROUTES[normalize_variant(variant)]
        allowed = set(routes["f"]) | set(routes["c"])
        for name, t, tag in registry:
            if tag in allowed and name not in grads:
                grads[name] = np.zeros_like(t.data)
    apply_sgd(registry, grads, lr, weight_decay)
    return report


@dataclass
class MetricsRow:
    step: int
    lr: float
    l_f: float
    l_c: float | None
    mean_acc_f: float
    mean_acc_c: float | None

    FIELDS = ("step", "lr", "l_f", "l_c", "mean_acc_f", "mean_acc_c")

    def format(self) -> str:
        vals = [str(self.step)] + ["" if v is None else repr(float(v)) for v in
                                   (self.lr, self.l_f, self.l_c, self.mean_acc_f, self.mean_acc_c)]
        return ",".join(vals)


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless shuffled index batches; a short tail is merged into a fresh epoch."""
    pool = np.zeros(0, dtype=np.int64)
    while True:
        while pool.size < batch_size:
            pool = np.concatenate([pool, rng.permutation(n)])
        yield pool[:batch_size]
        pool = pool[batch_size:]


def train(
    model: AttributeModel,
    registry: ParamRegistry,
    dataset: Dataset,
    config: TrainConfig,
    eval_dataset: Dataset | None = None,
    on_row=None,
) -> list[MetricsRow]:
    """Run ``config.max_steps`` partitioned SGD steps.

    Rows go to ``on_row`` (if given) every ``eval_every`` steps and at the
    end. Accuracies come from ``eval_dataset`` when given, else from the
    current mini-batch.
    """
    from galnet.evaluation import evaluate

    if dataset.num_attributes != model.config.num_attributes:
        raise ConfigError(
            f"num_attributes: dataset has {dataset.num_attributes}, model expects {model.config.num_attributes}"
        )
    if normalize_variant(config.variant) != model.variant:
        raise ConfigError(f"variant: config says {config.variant}, model is {model.variant}")
    if len(dataset) < 1:
        raise ContractError("empty training set")
    rng = np.random.default_rng(config.seed)
    batches = iterate_batches(len(dataset), config.batch_size, rng)
    history: list[MetricsRow] = []
    for step in range(config.max_steps):
        idx = next(batches)
        images = dataset.images[idx]
        if config.augment_flip:
            images = np.stack([random_flip(img, rng) for img in images])
        lr = config.lr_at(step)
        report = partitioned_step(
            model, registry, images, dataset.labels[idx], config.variant, lr, config.weight_decay
        )
        done = step + 1
        if not np.isfinite(report.l_f) or (report.l_c is not None and not np.isfinite(report.l_c)):
            raise NumericError(f"loss is not finite at step {done} (lr {lr:g})")
        if done % config.eval_every == 0 or done == config.max_steps:
            acc_f, acc_c = report.acc_f, report.acc_c
            if eval_dataset is not None:
                rep = evaluate(model, eval_dataset)
                acc_f, acc_c = rep.mean_acc_f, rep.mean_acc_c
            row = MetricsRow(done, lr, report.l_f, report.l_c, acc_f, acc_c)
            history.append(row)
            logger.info("step %d lr %.5f l_f %.4f l_c %s acc_f %.4f", done, lr, report.l_f, report.l_c, acc_f)
            if on_row is not None:
                on_row(row)
    return history
