"""Training protocol: RMSProp, plateau LR decay, early stopping, augmentation.

The loop is deterministic: the per-epoch batch order comes from a generator
seeded with (run seed, epoch) and each sample's augmentation generator is
seeded with (run seed, epoch, dataset index), so results never depend on
execution order or wall clock.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datasets import Sample
from .evaluation import MetricSpec, evaluate_model
from .hourglass import ForwardError
from .keypoints import render_heatmaps, transform_pose, center_affine, warp_image


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    """Raised when the loss or a gradient stops being finite."""


@dataclass
class TrainingConfig:
    learning_rate: float = 2.5e-4
    lr_decay_factor: float = 5.0
    plateau_patience_epochs: int = 3
    early_stop_patience_epochs: int = 10
    iterations_per_epoch: int = 50
    batch_size: int = 4
    rmsprop_alpha: float = 0.99
    rmsprop_eps: float = 1e-8
    scale_min: float = 0.75
    scale_max: float = 1.25
    rot_max_deg: float = 30.0
    target_sigma: float = 1.0
    seed: int = 0
    max_epochs: int = 30

    def validate(self):
        if self.learning_rate <= 0:
            raise TrainingError("learning_rate must be positive")
        if self.lr_decay_factor <= 1:
            raise TrainingError("lr_decay_factor must exceed 1")
        for name in ("plateau_patience_epochs", "early_stop_patience_epochs",
                     "iterations_per_epoch", "batch_size", "max_epochs"):
            if getattr(self, name) < 1:
                raise TrainingError(f"{name} must be positive")
        if self.scale_min > self.scale_max:
            raise TrainingError("scale_min must not exceed scale_max")
        if self.scale_min <= 0:
            raise TrainingError("scale_min must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class RunHistory:
    records: list = field(default_factory=list)

    def epochs(self):
        return [r["epoch"] for r in self.records]

    def accuracies(self):
        return [r["val_accuracy"] for r in self.records]

    def best_epoch(self):
        best = max(self.records, key=lambda r: (r["val_accuracy"], -r["epoch"]))
        return best["epoch"]


# --- optimizer -----------------------------------------------------------------


def rmsprop_step(params, grads, state, lr, alpha, eps, freeze_mask=frozenset()):
    """v <- alpha*v + (1-alpha)*g^2 ; p <- p - lr*g/(sqrt(v)+eps).

    Parameters named in ``freeze_mask`` are skipped entirely: neither their
    values nor their accumulator state change. Parameters without a gradient
    this step are also left untouched.
    """
    for name, tensor in params.items():
        if name in freeze_mask:
            continue
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteLossError(f"non-finite gradient for parameter {name}")
        v = state.get(name)
        if v is None:
            v = np.zeros_like(tensor.data)
            state[name] = v
        v *= alpha
        v += (1.0 - alpha) * (g * g)
        tensor.data -= lr * g / (np.sqrt(v) + eps)


# --- schedules -------------------------------------------------------------------


class PlateauScheduler:
    """Divide the learning rate by ``factor`` after ``patience`` consecutive
    epochs without a strict improvement of the best validation accuracy; the
    plateau counter resets after each decay."""

    def __init__(self, base_lr, patience, factor):
        if factor <= 1:
            raise TrainingError("decay factor must exceed 1")
        self.lr = float(base_lr)
        self.patience = int(patience)
        self.factor = float(factor)
        self.best = -np.inf
        self.counter = 0

    def step(self, accuracy):
        if accuracy > self.best:
            self.best = accuracy
            self.counter = 0
        else:
            self.counter += 1
            if self.counter >= self.patience:
                self.lr /= self.factor
                self.counter = 0
        return self.lr


def plateau_lr(accuracy_history, base_lr, patience, factor):
    """Learning rate after replaying an accuracy history through the scheduler."""
    sched = PlateauScheduler(base_lr, patience, factor)
    lr = sched.lr
    for acc in accuracy_history:
        lr = sched.step(acc)
    return lr


class EarlyStopper:
    """Stop once the last ``patience`` epochs all failed to beat the best."""

    def __init__(self, patience=10):
        if patience < 1:
            raise TrainingError("early-stop patience must be >= 1")
        self.patience = int(patience)
        self.best = -np.inf
        self.counter = 0

    def step(self, accuracy):
        """Returns True when training should stop."""
        if accuracy > self.best:
            self.best = accuracy
            self.counter = 0
            return False
        self.counter += 1
        return self.counter >= self.patience


# --- augmentation ------------------------------------------------------------------


def augment(sample, rng, scale_min=0.75, scale_max=1.25, rot_max_deg=30.0):
    """Random scale/rotation warp of image and annotation with one affine.

    Draw order is fixed (scale, then rotation) so a given generator state
    always produces the same warp.
    """
    s = rng.uniform(scale_min, scale_max)
    r = rng.uniform(-rot_max_deg, rot_max_deg)
    res = sample.image.shape[-1]
    m = center_affine(s, r, res, res)
    image = warp_image(sample.image, m, res)
    annotation = transform_pose(sample.annotation, s, r, res, res)
    return Sample(image=image, annotation=annotation)


# --- the loop ----------------------------------------------------------------------


def _per_sample_rng(seed, epoch, index):
    # 4-element entropy so it can never collide with the 3-element batch-order
    # stream below.
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, epoch, int(index), 1])))


def _epoch_order(seed, epoch, n):
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch])))
    return rng.permutation(n)


def validation_accuracy(net, val_ds, subset):
    """Mean PCK@0.5 with the heatmap-tenth normalizer, the training-time
    accuracy that drives scheduling and early stopping."""
    report = evaluate_model(
        net, val_ds, subset,
        MetricSpec(kind="pck", threshold=0.5, normalization="heatmap_tenth"),
    )
    if report.average is None:
        raise TrainingError("validation subset has no joints included in the average")
    return report.average


def run_training(experiment, train_ds, val_ds, config, results_sink=None,
                 record_meta=None):
    """Train an assembled experiment; returns (best network, history).

    ``experiment`` provides: net, plan (per-unit domain/trainability), split,
    freeze_mask, eval_subset. ``results_sink(record)`` is called once per
    epoch with the history record (merged with ``record_meta``) for live
    logging. The returned network carries the parameters of the best
    validation epoch.
    """
    config.validate()
    net = experiment.net
    if train_ds.resolution != net.arch.input_resolution:
        raise TrainingError(
            f"dataset resolution {train_ds.resolution} != network input "
            f"{net.arch.input_resolution}"
        )
    plan = experiment.plan
    supervised = [(k, unit_plan.domain) for k, unit_plan in enumerate(plan)
                  if unit_plan.domain is not None]
    if not supervised:
        raise TrainingError("supervision plan has no supervised units")
    domain_subsets = {"s1": experiment.split.s1, "s2": experiment.split.s2}
    freeze_mask = frozenset(experiment.freeze_mask)

    params = net.parameters
    opt_state = {}
    scheduler = PlateauScheduler(config.learning_rate,
                                 config.plateau_patience_epochs,
                                 config.lr_decay_factor)
    stopper = EarlyStopper(config.early_stop_patience_epochs)
    history = RunHistory()
    hm_res = net.arch.heatmap_resolution
    n = len(train_ds)
    best_acc = -np.inf
    best_snapshot = net.snapshot()

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        net.train()
        order = _epoch_order(config.seed, epoch, n)
        cursor = 0
        loss_sum = 0.0
        for iteration in range(config.iterations_per_epoch):
            batch_samples = []
            for _ in range(config.batch_size):
                idx = int(order[cursor % n])
                cursor += 1
                rng = _per_sample_rng(config.seed, epoch, idx)
                batch_samples.append(augment(
                    train_ds.samples[idx], rng,
                    config.scale_min, config.scale_max, config.rot_max_deg,
                ))
            images = Tensor(np.stack([s.image for s in batch_samples]))
            try:
                heats = net.forward(images)
            except ForwardError as exc:
                raise NonFiniteLossError(
                    f"aborted at epoch {epoch}, iteration {iteration}: {exc}"
                ) from exc
            targets = {}
            for domain in {d for _, d in supervised}:
                targets[domain] = Tensor(np.stack([
                    render_heatmaps(s.annotation, domain_subsets[domain], hm_res,
                                    config.target_sigma, train_ds.resolution).maps
                    for s in batch_samples
                ]))
            loss = None
            for k, domain in supervised:
                term = ad.mse_loss(heats[k], targets[domain])
                loss = term if loss is None else ad.add(loss, term)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch}, iteration {iteration}"
                )
            net.zero_grads()
            ad.backward(loss)
            grads = {name: t.grad for name, t in params.items()}
            rmsprop_step(params, grads, opt_state, scheduler.lr,
                         config.rmsprop_alpha, config.rmsprop_eps, freeze_mask)
            loss_sum += value

        val_acc = validation_accuracy(net, val_ds, experiment.eval_subset)
        record = {
            "epoch": epoch,
            "train_loss": loss_sum / config.iterations_per_epoch,
            "val_accuracy": val_acc,
            "learning_rate": scheduler.lr,
            "wall_time": time.perf_counter() - t0,
        }
        if record_meta:
            record = {**record_meta, **record}
        history.records.append(record)
        if results_sink is not None:
            results_sink(record)

        if val_acc > best_acc:
            best_acc = val_acc
            best_snapshot = net.snapshot()
        scheduler.step(val_acc)
        if stopper.step(val_acc):
            break

    net.restore(best_snapshot)
    return net, history
