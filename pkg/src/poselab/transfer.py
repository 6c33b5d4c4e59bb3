"""The three experiment configurations: transfer, frozen weights, random init.

A stage-1 network (two stacks, heads sized to the source subset S1) trains on
S1 targets. Stage 2 assembles a four-stack network:

  transfer_learning   stem + units 1-2 copied from the stage-1 checkpoint,
                      units 3-4 fresh; everything trainable; units 1-2 keep
                      supervising S1 targets while 3-4 learn S2 (the
                      "both domains jointly" reading; set
                      stage1_domain="s2" to re-head units 1-2 and supervise
                      everything on S2 instead)
  frozen_weights      same transplant, but stem + units 1-2 (heads and remaps
                      included) are frozen: no gradients, no updates, batch
                      norm statistics pinned; only units 3-4 receive loss
  random_init         all four units fresh from the seed, all supervised on S2

The stem is transplanted and frozen together with units 1-2.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import storage
from .hourglass import HourglassArch, build, parameter_count, replace_head
from .keypoints import JointSubsetSplit
from .training import run_training


class AssemblyError(ValueError):
    pass


class TransferMode(str, enum.Enum):
    transfer_learning = "transfer_learning"
    frozen_weights = "frozen_weights"
    random_init = "random_init"


MODE_LABELS = {
    TransferMode.transfer_learning: "Transfer learning",
    TransferMode.frozen_weights: "Frozen weights",
    TransferMode.random_init: "Random initialization",
}

_STAGE1_PREFIXES = ("stem.", "unit1.", "unit2.")


@dataclass
class UnitPlan:
    domain: str = None  # "s1" | "s2" | None (no loss term)
    trainable: bool = True


@dataclass
class SupervisionPlan:
    units: list

    def __post_init__(self):
        if not any(u.domain is not None for u in self.units):
            raise AssemblyError("supervision plan must supervise at least one unit")

    def __iter__(self):
        return iter(self.units)

    def __getitem__(self, i):
        return self.units[i]

    def __len__(self):
        return len(self.units)


@dataclass
class AssembledExperiment:
    mode: TransferMode
    split: JointSubsetSplit
    net: object
    plan: SupervisionPlan
    freeze_mask: frozenset = frozenset()
    stage1_checkpoint: str = None
    eval_subset: tuple = None  # defaults to the target domain S2

    def __post_init__(self):
        if self.eval_subset is None:
            self.eval_subset = self.split.s2
        for name in self.freeze_mask:
            if name not in self.net.parameters:
                raise AssemblyError(f"freeze mask names unknown parameter {name}")


def stage1_arch(arch4, num_s1):
    """The two-stack architecture matching units 1-2 of the stage-2 network."""
    return HourglassArch(
        num_stacks=2,
        depth=arch4.depth,
        base_channels=arch4.base_channels,
        input_resolution=arch4.input_resolution,
        heatmap_resolution=arch4.heatmap_resolution,
        num_output_channels=num_s1,
    )


def train_stage1(split, arch2, config, train_ds, val_ds, checkpoint_path,
                 results_sink=None, record_meta=None):
    """Train the two-stack source network on S1 and persist its checkpoint."""
    if arch2.num_stacks != 2:
        raise AssemblyError(f"stage-1 network must have 2 stacks, got {arch2.num_stacks}")
    if arch2.num_output_channels != len(split.s1):
        raise AssemblyError(
            f"stage-1 heads must match |S1|={len(split.s1)}, "
            f"got {arch2.num_output_channels}"
        )
    net = build(arch2, seed=config.seed)
    plan = SupervisionPlan([UnitPlan(domain="s1"), UnitPlan(domain="s1")])
    # Stage 1 validates on its own domain S1.
    experiment = AssembledExperiment(
        mode=TransferMode.random_init, split=split, net=net, plan=plan,
        eval_subset=split.s1)
    net, history = run_training(experiment, train_ds, val_ds, config,
                                results_sink=results_sink, record_meta=record_meta)
    storage.save_checkpoint(checkpoint_path, net, extra={
        "stage": 1,
        "split": split.to_dict(),
        "training": config.to_dict(),
    })
    return net, history


def _copy_stage1_params(net, ckpt_arrays):
    copied = []
    for name, tensor in net.parameters.items():
        if name.startswith(_STAGE1_PREFIXES):
            np.copyto(tensor.data, ckpt_arrays[name])
            copied.append(name)
    for name in net.state:
        if name.startswith(_STAGE1_PREFIXES):
            np.copyto(net.state[name], ckpt_arrays[name])
    return copied


def _check_stage1_compat(header, arch4, num_s1):
    ck = header["arch"]
    problems = []
    for key in ("depth", "base_channels", "input_resolution", "heatmap_resolution"):
        if ck[key] != getattr(arch4, key):
            problems.append(f"{key}: checkpoint {ck[key]} vs stage-2 {getattr(arch4, key)}")
    if ck["num_stacks"] != 2:
        problems.append(f"num_stacks: checkpoint {ck['num_stacks']} vs required 2")
    if list(header["head_channels"]) != [num_s1, num_s1]:
        problems.append(
            f"head_channels: checkpoint {header['head_channels']} vs |S1|={num_s1}"
        )
    if problems:
        raise AssemblyError("stage-1 checkpoint incompatible: " + "; ".join(problems))


def assemble(mode, split, stage1_checkpoint, arch4, seed, stage1_domain="s1"):
    """Build the stage-2 experiment for one of the three configurations."""
    mode = TransferMode(mode)
    if arch4.num_stacks != 4:
        raise AssemblyError(f"stage-2 network must have 4 stacks, got {arch4.num_stacks}")
    num_s1, num_s2 = len(split.s1), len(split.s2)
    if arch4.num_output_channels != num_s2:
        raise AssemblyError(
            f"stage-2 heads must match |S2|={num_s2}, got {arch4.num_output_channels}"
        )
    if stage1_domain not in ("s1", "s2"):
        raise AssemblyError(f"stage1_domain must be 's1' or 's2', got {stage1_domain!r}")

    if mode == TransferMode.random_init:
        net = build(arch4, seed)
        plan = SupervisionPlan([UnitPlan(domain="s2") for _ in range(4)])
        return AssembledExperiment(mode=mode, split=split, net=net, plan=plan)

    if stage1_checkpoint is None:
        raise AssemblyError(f"{mode.value} requires a stage-1 checkpoint")
    header, arrays = storage.read_checkpoint(stage1_checkpoint)
    _check_stage1_compat(header, arch4, num_s1)

    net = build(arch4, seed, head_channels=[num_s1, num_s1, num_s2, num_s2])
    _copy_stage1_params(net, arrays)

    if mode == TransferMode.frozen_weights:
        mask = net.freeze(_STAGE1_PREFIXES)
        plan = SupervisionPlan([
            UnitPlan(domain=None, trainable=False),
            UnitPlan(domain=None, trainable=False),
            UnitPlan(domain="s2"),
            UnitPlan(domain="s2"),
        ])
        return AssembledExperiment(mode=mode, split=split, net=net, plan=plan,
                                   freeze_mask=frozenset(mask),
                                   stage1_checkpoint=str(stage1_checkpoint))

    # transfer_learning
    if stage1_domain == "s2":
        # Alternative reading: re-head the transplanted units for the target
        # domain and supervise all four units on S2.
        replace_head(net, 0, num_s2, seed)
        replace_head(net, 1, num_s2, seed)
        domains = ["s2", "s2", "s2", "s2"]
    else:
        domains = ["s1", "s1", "s2", "s2"]
    plan = SupervisionPlan([UnitPlan(domain=d) for d in domains])
    return AssembledExperiment(mode=mode, split=split, net=net, plan=plan,
                               stage1_checkpoint=str(stage1_checkpoint))


# --- parameter parity ----------------------------------------------------------------


@dataclass
class ParityReport:
    counts: dict
    expected_deltas: dict
    actual_deltas: dict
    failures: list

    @property
    def ok(self):
        return not self.failures


def _head_delta(base_channels, heads_a, heads_b):
    """Closed-form parameter difference implied by per-unit head channels.

    Per unit, a head of J channels costs J*C weights + J biases and its
    heatmap remap costs C*J weights + C biases, so changing J by dJ changes
    the count by dJ*(2C + 1).
    """
    c = base_channels
    return sum((ja - jb) * (2 * c + 1) for ja, jb in zip(heads_a, heads_b))


def parity_check(experiments):
    """Compare total parameter counts across experiments against the exact
    difference their head sizes imply; any other difference is a failure."""
    if not experiments:
        raise AssemblyError("parity_check needs at least one experiment")
    ref = experiments[0]
    counts = {}
    expected = {}
    actual = {}
    failures = []
    for e in experiments:
        counts[e.mode.value] = parameter_count(e.net)
    for e in experiments[1:]:
        if e.net.arch.base_channels != ref.net.arch.base_channels or \
                e.net.arch.depth != ref.net.arch.depth or \
                e.net.arch.num_stacks != ref.net.arch.num_stacks:
            failures.append(
                f"{e.mode.value}: architecture differs from {ref.mode.value} "
                f"(depth/base_channels/num_stacks)"
            )
            continue
        exp_delta = _head_delta(ref.net.arch.base_channels,
                                e.net.head_channels, ref.net.head_channels)
        act_delta = counts[e.mode.value] - counts[ref.mode.value]
        expected[e.mode.value] = exp_delta
        actual[e.mode.value] = act_delta
        if exp_delta != act_delta:
            failures.append(
                f"{e.mode.value}: count delta {act_delta} vs expected head "
                f"delta {exp_delta}"
            )
    return ParityReport(counts=counts, expected_deltas=expected,
                        actual_deltas=actual, failures=failures)
