"""Stacked hourglass networks with per-unit heatmap heads.

Layer inventory (this is the normative structure; the closed-form parameter
count in the tests enumerates exactly these layers):

  stem (input R x R, 3 channels -> C channels at R/4):
      conv 4x4 stride 2 pad 1 (3 -> C), batchnorm, relu,
      residual (C -> C), maxpool2
      (the stem kernel is even because stride-2 output extents must divide
      exactly; odd kernels with stride 2 on even inputs cannot)
  per unit k = 1..num_stacks:
      hourglass block of the configured depth, where each level l holds
          skip residual (C -> C)   at the incoming resolution
          down residual (C -> C)   after maxpool2
          up residual   (C -> C)   before upsample_nearest2
      plus one bottleneck residual (C -> C) at the smallest resolution;
      the level output is skip(x) + upsample(up(inner(down(maxpool2(x)))))
      then: post residual (C -> C), lin 1x1 conv (C -> C) + batchnorm + relu,
            head 1x1 conv (C -> J_k) producing the unit's heatmaps,
            remap_feat 1x1 conv (C -> C), remap_heat 1x1 conv (J_k -> C)
      units feed forward as: next_input = unit_input + remap_feat + remap_heat
      (the last unit's remap layers exist for transplant compatibility but are
      not applied in forward)

  residual (Cin -> Cout), preactivation bottleneck with mid = Cout // 2:
      bn1 + relu + conv 1x1 (Cin -> mid)
      bn2 + relu + conv 3x3 pad 1 (mid -> mid)
      bn3 + relu + conv 1x1 (mid -> Cout)
      skip branch: identity when Cin == Cout, else conv 1x1 (Cin -> Cout)

Initialization: conv weights are uniform in (-1/sqrt(fan_in), +1/sqrt(fan_in))
with fan_in = Cin*kh*kw, biases zero, batchnorm gamma 1 / beta 0, running
mean 0 / var 1. All draws come from one seeded generator consumed in
construction order, so identical seeds give bit-identical parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ArchError(ValueError):
    """Raised for architecture configurations that violate the invariants."""


class ForwardError(RuntimeError):
    """Raised when forward receives invalid input or produces non-finite values."""


@dataclass(frozen=True)
class HourglassArch:
    num_stacks: int
    depth: int
    base_channels: int
    input_resolution: int
    heatmap_resolution: int
    num_output_channels: int

    def validate(self):
        for name in ("num_stacks", "depth", "base_channels", "input_resolution",
                     "heatmap_resolution", "num_output_channels"):
            if getattr(self, name) < 1:
                raise ArchError(f"{name} must be positive, got {getattr(self, name)}")
        if self.heatmap_resolution * 4 != self.input_resolution:
            raise ArchError(
                f"heatmap_resolution must be input_resolution/4 "
                f"(stem downsamples 4x), got {self.heatmap_resolution} vs "
                f"{self.input_resolution}"
            )
        if self.heatmap_resolution % (2 ** self.depth):
            raise ArchError(
                f"heatmap_resolution {self.heatmap_resolution} not divisible by "
                f"2^depth = {2 ** self.depth}"
            )
        if self.base_channels % 2:
            raise ArchError(f"base_channels must be even, got {self.base_channels}")

    def to_dict(self):
        return {
            "num_stacks": self.num_stacks,
            "depth": self.depth,
            "base_channels": self.base_channels,
            "input_resolution": self.input_resolution,
            "heatmap_resolution": self.heatmap_resolution,
            "num_output_channels": self.num_output_channels,
        }

    @classmethod
    def from_dict(cls, d):
        arch = cls(**{k: int(d[k]) for k in (
            "num_stacks", "depth", "base_channels", "input_resolution",
            "heatmap_resolution", "num_output_channels")})
        arch.validate()
        return arch


# --- parameter registry -------------------------------------------------------


class _Params:
    """Ordered name -> Tensor registry plus non-learned state arrays."""

    def __init__(self, dtype=np.float32):
        self.tensors = {}
        self.state = {}
        self.dtype = dtype

    def add(self, name, array):
        if name in self.tensors:
            raise ArchError(f"duplicate parameter name {name}")
        t = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=True, name=name)
        self.tensors[name] = t
        return t

    def add_state(self, name, array):
        if name in self.state:
            raise ArchError(f"duplicate state name {name}")
        self.state[name] = np.asarray(array, dtype=self.dtype)
        return self.state[name]


def _init_conv(rng, cin, cout, k):
    fan_in = cin * k * k
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(cout, cin, k, k))
    b = np.zeros(cout)
    return w, b


# --- layers --------------------------------------------------------------------


class _Conv:
    def __init__(self, params, name, rng, cin, cout, k, stride=1, padding=0):
        w, b = _init_conv(rng, cin, cout, k)
        self.w = params.add(f"{name}.weight", w)
        self.b = params.add(f"{name}.bias", b)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class _BatchNorm:
    def __init__(self, params, name, c):
        self.gamma = params.add(f"{name}.gamma", np.ones(c))
        self.beta = params.add(f"{name}.beta", np.zeros(c))
        self.running_mean = params.add_state(f"{name}.running_mean", np.zeros(c))
        self.running_var = params.add_state(f"{name}.running_var", np.ones(c))
        self.frozen = False

    def __call__(self, x, training):
        return ad.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=training and not self.frozen,
        )


class _Residual:
    """Preactivation bottleneck; see the module docstring for the layout."""

    def __init__(self, params, name, rng, cin, cout):
        mid = max(1, cout // 2)
        self.bn1 = _BatchNorm(params, f"{name}.bn1", cin)
        self.conv1 = _Conv(params, f"{name}.conv1", rng, cin, mid, 1)
        self.bn2 = _BatchNorm(params, f"{name}.bn2", mid)
        self.conv2 = _Conv(params, f"{name}.conv2", rng, mid, mid, 3, padding=1)
        self.bn3 = _BatchNorm(params, f"{name}.bn3", mid)
        self.conv3 = _Conv(params, f"{name}.conv3", rng, mid, cout, 1)
        self.skip_conv = None
        if cin != cout:
            self.skip_conv = _Conv(params, f"{name}.skip", rng, cin, cout, 1)

    def __call__(self, x, training):
        y = self.conv1(ad.relu(self.bn1(x, training)))
        y = self.conv2(ad.relu(self.bn2(y, training)))
        y = self.conv3(ad.relu(self.bn3(y, training)))
        skip = self.skip_conv(x) if self.skip_conv is not None else x
        return ad.add(skip, y)

    def bns(self):
        return [self.bn1, self.bn2, self.bn3]


class _HourglassBlock:
    def __init__(self, params, name, rng, depth, c):
        self.depth = depth
        self.levels = []
        for level in range(1, depth + 1):
            self.levels.append({
                "skip": _Residual(params, f"{name}.l{level}.skip", rng, c, c),
                "down": _Residual(params, f"{name}.l{level}.down", rng, c, c),
                "up": _Residual(params, f"{name}.l{level}.up", rng, c, c),
            })
        self.bottleneck = _Residual(params, f"{name}.bottleneck", rng, c, c)

    def __call__(self, x, training):
        return self._run(x, 0, training)

    def _run(self, x, level_index, training):
        level = self.levels[level_index]
        skip = level["skip"](x, training)
        pooled, _ = ad.maxpool2(x)
        down = level["down"](pooled, training)
        if level_index + 1 < self.depth:
            inner = self._run(down, level_index + 1, training)
        else:
            inner = self.bottleneck(down, training)
        up = ad.upsample_nearest2(level["up"](inner, training))
        return ad.add(skip, up)

    def bns(self):
        out = []
        for level in self.levels:
            for res in level.values():
                out.extend(res.bns())
        out.extend(self.bottleneck.bns())
        return out


class _Unit:
    def __init__(self, params, name, rng, depth, c, num_out):
        self.name = name
        self.num_out = num_out
        self.hg = _HourglassBlock(params, f"{name}.hg", rng, depth, c)
        self.post = _Residual(params, f"{name}.post", rng, c, c)
        self.lin_conv = _Conv(params, f"{name}.lin.conv", rng, c, c, 1)
        self.lin_bn = _BatchNorm(params, f"{name}.lin.bn", c)
        self.head = _Conv(params, f"{name}.head", rng, c, num_out, 1)
        self.remap_feat = _Conv(params, f"{name}.remap_feat", rng, c, c, 1)
        self.remap_heat = _Conv(params, f"{name}.remap_heat", rng, num_out, c, 1)

    def __call__(self, x, training, apply_remap):
        feats = self.post(self.hg(x, training), training)
        feats = ad.relu(self.lin_bn(self.lin_conv(feats), training))
        heat = self.head(feats)
        nxt = None
        if apply_remap:
            nxt = ad.add(x, ad.add(self.remap_feat(feats), self.remap_heat(heat)))
        return heat, nxt

    def bns(self):
        return self.hg.bns() + self.post.bns() + [self.lin_bn]


class _Stem:
    def __init__(self, params, rng, c):
        self.conv = _Conv(params, "stem.conv", rng, 3, c, 4, stride=2, padding=1)
        self.bn = _BatchNorm(params, "stem.bn", c)
        self.res = _Residual(params, "stem.res", rng, c, c)

    def __call__(self, x, training):
        y = ad.relu(self.bn(self.conv(x), training))
        y = self.res(y, training)
        pooled, _ = ad.maxpool2(y)
        return pooled

    def bns(self):
        return [self.bn] + self.res.bns()


# --- the network ----------------------------------------------------------------


class StackedHourglassNet:
    """Built via :func:`build`; do not construct directly."""

    def __init__(self, arch, params, stem, units, head_channels):
        self.arch = arch
        self._params = params
        self.stem = stem
        self.units = units
        self.head_channels = list(head_channels)
        self.training = True
        self.frozen_prefixes = ()

    # -- parameter access

    @property
    def parameters(self):
        return self._params.tensors

    @property
    def state(self):
        return self._params.state

    def parameter_names(self):
        return list(self._params.tensors.keys())

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def zero_grads(self):
        for t in self._params.tensors.values():
            t.zero_grad()

    def snapshot(self):
        """Copies of all parameter and state arrays, keyed by name."""
        snap = {name: t.data.copy() for name, t in self._params.tensors.items()}
        snap.update({name: a.copy() for name, a in self._params.state.items()})
        return snap

    def restore(self, snap):
        for name, t in self._params.tensors.items():
            np.copyto(t.data, snap[name])
        for name, a in self._params.state.items():
            np.copyto(a, snap[name])

    def all_bns(self):
        return self.stem.bns() + [bn for u in self.units for bn in u.bns()]

    def freeze(self, prefixes):
        """Exclude parameters under the given name prefixes from training.

        Frozen tensors stop requiring gradients and frozen batchnorm layers
        run in eval mode permanently (their running statistics are state and
        stay untouched).
        """
        prefixes = tuple(prefixes)
        self.frozen_prefixes = prefixes
        frozen_names = set()
        for name, t in self._params.tensors.items():
            if name.startswith(prefixes):
                t.requires_grad = False
                frozen_names.add(name)
        for bn in self.all_bns():
            if bn.gamma.name in frozen_names:
                bn.frozen = True
        return frozen_names

    def cast(self, dtype):
        """Return a structurally identical net with parameters in ``dtype``."""
        clone = build(self.arch, seed=0, head_channels=self.head_channels, dtype=dtype)
        for name, t in self._params.tensors.items():
            np.copyto(clone._params.tensors[name].data, t.data.astype(dtype))
        for name, a in self._params.state.items():
            np.copyto(clone._params.state[name], a.astype(dtype))
        clone.training = self.training
        if self.frozen_prefixes:
            clone.freeze(self.frozen_prefixes)
        return clone

    # -- forward

    def forward(self, batch):
        """Run the full stack on a [B,3,R,R] tensor; returns one heatmap
        tensor per unit, each [B, J_k, heatmap_res, heatmap_res]."""
        r = self.arch.input_resolution
        if batch.data.ndim != 4 or batch.shape[1] != 3 or batch.shape[2:] != (r, r):
            raise ForwardError(
                f"expected input of shape [B,3,{r},{r}], got {batch.shape}"
            )
        if batch.dtype != self._params.dtype:
            raise ForwardError(
                f"input dtype {batch.dtype} does not match network dtype "
                f"{self._params.dtype}"
            )
        inter = self.stem(batch, self.training)
        _check_finite(inter, "stem")
        heats = []
        last = len(self.units) - 1
        for k, unit in enumerate(self.units):
            heat, nxt = unit(inter, self.training, apply_remap=(k != last))
            _check_finite(heat, f"{unit.name}.head")
            heats.append(heat)
            if nxt is not None:
                inter = nxt
        return heats

    def __call__(self, batch):
        return self.forward(batch)


def _check_finite(t, label):
    if not np.all(np.isfinite(t.data)):
        raise ForwardError(f"non-finite activation in layer {label}")


def build(arch, seed, head_channels=None, dtype=np.float32):
    """Construct a deterministic network from the architecture and seed.

    ``head_channels`` overrides the per-unit head output channels (defaults to
    ``arch.num_output_channels`` for every unit); transfer experiments use it
    to host stage-1 heads next to stage-2 heads.
    """
    arch.validate()
    if head_channels is None:
        head_channels = [arch.num_output_channels] * arch.num_stacks
    if len(head_channels) != arch.num_stacks:
        raise ArchError(
            f"head_channels must list {arch.num_stacks} entries, got {len(head_channels)}"
        )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    params = _Params(dtype=dtype)
    stem = _Stem(params, rng, arch.base_channels)
    units = [
        _Unit(params, f"unit{k + 1}", rng, arch.depth, arch.base_channels, head_channels[k])
        for k in range(arch.num_stacks)
    ]
    return StackedHourglassNet(arch, params, stem, units, head_channels)


def parameter_count(net_or_arch):
    """Total number of learned scalars (weights, biases, gammas, betas)."""
    net = net_or_arch
    if isinstance(net_or_arch, HourglassArch):
        net = build(net_or_arch, seed=0)
    return sum(t.size for t in net._params.tensors.values())


def replace_head(net, unit_index, new_num_output_channels, seed):
    """Swap one unit's head and heatmap-remap convs for freshly seeded ones.

    Every other parameter keeps its exact values. The unit's feature remap is
    channel-count independent and therefore untouched.
    """
    if not 0 <= unit_index < len(net.units):
        raise ArchError(
            f"unit_index {unit_index} out of range for {len(net.units)} stacks"
        )
    unit = net.units[unit_index]
    c = net.arch.base_channels
    j = int(new_num_output_channels)
    if j < 1:
        raise ArchError(f"num_output_channels must be positive, got {j}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, unit_index])))
    params = net._params
    for name in (f"{unit.name}.head.weight", f"{unit.name}.head.bias",
                 f"{unit.name}.remap_heat.weight", f"{unit.name}.remap_heat.bias"):
        del params.tensors[name]
    unit.head = _Conv(params, f"{unit.name}.head", rng, c, j, 1)
    unit.remap_heat = _Conv(params, f"{unit.name}.remap_heat", rng, j, c, 1)
    unit.num_out = j
    net.head_channels[unit_index] = j
    # Rebuild the registry in canonical construction order so save/load and
    # optimizer iteration order stay stable.
    order = _canonical_name_order(net)
    params.tensors = {name: params.tensors[name] for name in order}
    return net


def _canonical_name_order(net):
    names = list(net._params.tensors.keys())
    by_name = set(names)
    ordered = []
    probe = build(net.arch, seed=0, head_channels=net.head_channels)
    for name in probe._params.tensors.keys():
        if name in by_name:
            ordered.append(name)
    leftovers = [n for n in names if n not in set(ordered)]
    return ordered + leftovers
