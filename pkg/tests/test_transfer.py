import hashlib

import numpy as np
import pytest

from poselab import autodiff as ad
from poselab.autodiff import Tensor
from poselab.datasets import generate_synthetic, split_train_val
from poselab.hourglass import HourglassArch, parameter_count
from poselab.keypoints import builtin_split
from poselab.training import TrainingConfig, run_training, validation_accuracy
from poselab.transfer import (
    AssemblyError,
    SupervisionPlan,
    TransferMode,
    UnitPlan,
    assemble,
    parity_check,
    stage1_arch,
    train_stage1,
)

SPLIT = builtin_split("d")
ARCH4 = HourglassArch(4, 2, 8, 32, 8, len(SPLIT.s2))

STAGE1_PREFIXES = ("stem.", "unit1.", "unit2.")


@pytest.fixture(scope="module")
def data():
    ds = generate_synthetic(77, 40, 32)
    return split_train_val(ds, 8, seed=5)


@pytest.fixture(scope="module")
def stage1(tmp_path_factory, data):
    train_ds, val_ds = data
    cfg = TrainingConfig(seed=3, max_epochs=3, iterations_per_epoch=8, batch_size=4,
                         learning_rate=2.5e-3)
    path = tmp_path_factory.mktemp("stage1") / "s1.ckpt"
    net, history = train_stage1(SPLIT, stage1_arch(ARCH4, 8), cfg,
                                train_ds, val_ds, path)
    return path, net, history, cfg


def hash_params(net, names):
    h = hashlib.sha256()
    for name in sorted(names):
        h.update(net.parameters[name].data.tobytes())
    for name in sorted(net.state):
        if name.startswith(STAGE1_PREFIXES):
            h.update(net.state[name].tobytes())
    return h.hexdigest()


# --- stage 1 ---------------------------------------------------------------------


def test_stage1_head_channels_match_s1(stage1):
    _, net, _, _ = stage1
    assert net.head_channels == [8, 8]
    for tag in "abcd":
        assert len(builtin_split(tag).s1) == 8


def test_stage1_loss_decreases(data):
    train_ds, val_ds = data
    cfg = TrainingConfig(seed=9, max_epochs=3, iterations_per_epoch=10, batch_size=4,
                         learning_rate=2.5e-3)
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as tmp:
        _, history = train_stage1(SPLIT, stage1_arch(ARCH4, 8), cfg, train_ds, val_ds,
                                  Path(tmp) / "x.ckpt")
    losses = [r["train_loss"] for r in history.records]
    assert losses[1] < losses[0] and losses[2] < losses[1]


def test_stage1_checkpoint_reload_reproduces_metric(stage1, data):
    path, net, history, _ = stage1
    _, val_ds = data
    from poselab.storage import load_checkpoint

    reloaded, _ = load_checkpoint(path)
    acc_orig = validation_accuracy(net, val_ds, SPLIT.s1)
    acc_reload = validation_accuracy(reloaded, val_ds, SPLIT.s1)
    assert acc_orig == acc_reload


def test_stage1_rejects_wrong_arch():
    cfg = TrainingConfig(max_epochs=1, iterations_per_epoch=1)
    with pytest.raises(AssemblyError):
        train_stage1(SPLIT, ARCH4, cfg, None, None, "x.ckpt")  # 4 stacks


# --- assembly --------------------------------------------------------------------


def test_transfer_transplants_exact_values(stage1):
    path, s1net, _, _ = stage1
    exp = assemble(TransferMode.transfer_learning, SPLIT, path, ARCH4, seed=21)
    for name, tensor in exp.net.parameters.items():
        if name.startswith(STAGE1_PREFIXES):
            assert np.array_equal(tensor.data, s1net.parameters[name].data), name
    for name in exp.net.state:
        if name.startswith(STAGE1_PREFIXES):
            assert np.array_equal(exp.net.state[name], s1net.state[name]), name
    assert exp.freeze_mask == frozenset()
    assert [u.domain for u in exp.plan] == ["s1", "s1", "s2", "s2"]
    assert all(u.trainable for u in exp.plan)


def test_frozen_mask_is_exactly_stem_plus_units_1_2(stage1):
    path, _, _, _ = stage1
    exp = assemble(TransferMode.frozen_weights, SPLIT, path, ARCH4, seed=21)
    expected = {n for n in exp.net.parameter_names() if n.startswith(STAGE1_PREFIXES)}
    assert exp.freeze_mask == expected
    assert [u.domain for u in exp.plan] == [None, None, "s2", "s2"]
    for name in expected:
        assert not exp.net.parameters[name].requires_grad
    assert exp.net.parameters["unit3.head.weight"].requires_grad


def test_random_init_is_seed_deterministic():
    a = assemble(TransferMode.random_init, SPLIT, None, ARCH4, seed=5)
    b = assemble(TransferMode.random_init, SPLIT, None, ARCH4, seed=5)
    c = assemble(TransferMode.random_init, SPLIT, None, ARCH4, seed=6)
    for name in a.net.parameter_names():
        assert np.array_equal(a.net.parameters[name].data, b.net.parameters[name].data)
    assert any(not np.array_equal(a.net.parameters[n].data, c.net.parameters[n].data)
               for n in a.net.parameter_names())
    assert [u.domain for u in a.plan] == ["s2", "s2", "s2", "s2"]


def test_assembly_requires_checkpoint_for_transplant_modes():
    with pytest.raises(AssemblyError):
        assemble(TransferMode.frozen_weights, SPLIT, None, ARCH4, seed=0)


def test_assembly_rejects_mismatched_arch(stage1, tmp_path):
    path, _, _, _ = stage1
    wrong = HourglassArch(4, 2, 6, 32, 8, len(SPLIT.s2))
    with pytest.raises(AssemblyError, match="base_channels"):
        assemble(TransferMode.transfer_learning, SPLIT, path, wrong, seed=0)


def test_transfer_alternative_reading_reheads_units(stage1):
    path, _, _, _ = stage1
    exp = assemble(TransferMode.transfer_learning, SPLIT, path, ARCH4, seed=21,
                   stage1_domain="s2")
    assert exp.net.head_channels == [8, 8, 8, 8]
    assert [u.domain for u in exp.plan] == ["s2", "s2", "s2", "s2"]


def test_supervision_plan_needs_one_supervised_unit():
    with pytest.raises(AssemblyError):
        SupervisionPlan([UnitPlan(domain=None), UnitPlan(domain=None)])


# --- freeze semantics under training ------------------------------------------------


def test_frozen_parameters_bit_identical_after_training(stage1, data):
    path, _, _, _ = stage1
    train_ds, val_ds = data
    exp = assemble(TransferMode.frozen_weights, SPLIT, path, ARCH4, seed=33)
    before = hash_params(exp.net, exp.freeze_mask)
    cfg = TrainingConfig(seed=4, max_epochs=2, iterations_per_epoch=6, batch_size=4,
                         learning_rate=2.5e-3)
    run_training(exp, train_ds, val_ds, cfg)
    assert hash_params(exp.net, exp.freeze_mask) == before


def test_frozen_parameters_never_receive_gradients(stage1, data):
    path, _, _, _ = stage1
    train_ds, _ = data
    exp = assemble(TransferMode.frozen_weights, SPLIT, path, ARCH4, seed=34)
    from poselab.keypoints import render_heatmaps

    images = Tensor(np.stack([s.image for s in train_ds.samples[:2]]))
    heats = exp.net.forward(images)
    targets = Tensor(np.stack([
        render_heatmaps(s.annotation, SPLIT.s2, 8, 1.0, 32).maps
        for s in train_ds.samples[:2]]))
    loss = ad.add(ad.mse_loss(heats[2], targets), ad.mse_loss(heats[3], targets))
    exp.net.zero_grads()
    ad.backward(loss)
    for name in exp.freeze_mask:
        assert exp.net.parameters[name].grad is None, name
    assert exp.net.parameters["unit3.head.weight"].grad is not None


def test_transfer_co_adapts_at_least_one_early_parameter(stage1, data):
    path, s1net, _, _ = stage1
    train_ds, val_ds = data
    exp = assemble(TransferMode.transfer_learning, SPLIT, path, ARCH4, seed=35)
    cfg = TrainingConfig(seed=6, max_epochs=1, iterations_per_epoch=4, batch_size=4,
                         learning_rate=2.5e-3)
    run_training(exp, train_ds, val_ds, cfg)
    moved = [
        name for name in exp.net.parameter_names()
        if name.startswith(STAGE1_PREFIXES)
        and not np.array_equal(exp.net.parameters[name].data,
                               s1net.parameters[name].data)
    ]
    assert moved, "transplanted weights must co-adapt in transfer mode"


def test_plan_loss_equals_manual_summation(stage1, data):
    path, _, _, _ = stage1
    train_ds, _ = data
    from poselab.keypoints import render_heatmaps

    exp = assemble(TransferMode.transfer_learning, SPLIT, path, ARCH4, seed=36)
    images = Tensor(np.stack([s.image for s in train_ds.samples[:2]]))
    heats = exp.net.forward(images)
    subsets = {"s1": SPLIT.s1, "s2": SPLIT.s2}
    total = None
    parts = []
    for k, plan in enumerate(exp.plan):
        target = Tensor(np.stack([
            render_heatmaps(s.annotation, subsets[plan.domain], 8, 1.0, 32).maps
            for s in train_ds.samples[:2]]))
        term = ad.mse_loss(heats[k], target)
        parts.append(float(term.data))
        total = term if total is None else ad.add(total, term)
    assert float(total.data) == pytest.approx(sum(parts), rel=1e-6)


# --- parameter parity --------------------------------------------------------------


def test_parity_exact_across_modes(stage1):
    path, _, _, _ = stage1
    experiments = [
        assemble(TransferMode.transfer_learning, SPLIT, path, ARCH4, seed=1),
        assemble(TransferMode.frozen_weights, SPLIT, path, ARCH4, seed=1),
        assemble(TransferMode.random_init, SPLIT, None, ARCH4, seed=1),
    ]
    report = parity_check(experiments)
    assert report.ok
    counts = set(report.counts.values())
    assert len(counts) == 1  # |S1| == |S2| == 8: exactly equal


def test_parity_single_experiment_passes():
    exp = assemble(TransferMode.random_init, SPLIT, None, ARCH4, seed=2)
    assert parity_check([exp]).ok


def test_parity_flags_mismatched_arch(stage1):
    path, _, _, _ = stage1
    small = HourglassArch(4, 2, 6, 32, 8, len(SPLIT.s2))
    experiments = [
        assemble(TransferMode.random_init, SPLIT, None, ARCH4, seed=1),
        assemble(TransferMode.random_init, SPLIT, None, small, seed=1),
    ]
    report = parity_check(experiments)
    assert not report.ok
    assert "base_channels" in report.failures[0] or "architecture" in report.failures[0]


def test_parity_head_delta_closed_form(stage1):
    path, _, _, _ = stage1
    # a split-like pair with |S2| = 6 against the 8-channel reference
    from poselab.keypoints import JointSubsetSplit

    s2small = tuple(sorted(SPLIT.s2))[:6]
    split_small = JointSubsetSplit(name="x", s1=SPLIT.s1, s2=s2small)
    arch_small = HourglassArch(4, 2, 8, 32, 8, 6)
    a = assemble(TransferMode.random_init, SPLIT, None, ARCH4, seed=1)
    b = assemble(TransferMode.random_init, split_small, None, arch_small, seed=1)
    diff = parameter_count(b.net) - parameter_count(a.net)
    # four heads shrink by 2 channels each: dJ * (2C + 1) per unit
    assert diff == 4 * (6 - 8) * (2 * 8 + 1)
