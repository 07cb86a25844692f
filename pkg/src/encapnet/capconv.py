"""One-pass approximate routing: the master/aide capsule convolution.

Instead of iterating coefficients, each higher capsule is built from two
candidate votes in a single pass: the master branch convolves only its own
input capsule channel (grouped conv), the aide branch convolves every other
channel (full conv whose same-index kernel weights are structurally masked to
zero). Sigmoid coefficients produced by a 1x1 grouped conv gate the two votes,
and the sum goes through BN, ReLU and squash. No routing loop exists anywhere
in the op graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .capsules import grid_squash
from .errors import ConfigError, ShapeError
from .layers import BatchNorm2d, Conv2d, Layer
from .tensor import Tensor, seeded_rng

INTERACTIONS = ("master_only", "v1", "v2", "v3")
SKIP_MODES = ("none", "type_I", "type_II", "both")


@dataclass
class CapConvSpec:
    """Geometry of one capsule convolution.

    caps is both the input and output capsule-channel count; the master branch
    is grouped by it, so the layer cannot change it. kernel is 3 for the
    spatial Type I layer and 1 for the depth-building Type II layer; the aide
    kernel is always 1.
    """

    caps: int
    dim_in: int
    dim_out: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    interaction: str = "v3"
    aide_all_channels: bool = False

    def __post_init__(self):
        if self.interaction not in INTERACTIONS:
            raise ConfigError(f"unknown interaction {self.interaction!r}")
        if self.caps < 1 or self.dim_in < 1 or self.dim_out < 1:
            raise ConfigError("capsule counts and dims must be positive")
        if self.interaction != "master_only" and not self.aide_all_channels and self.caps < 2:
            raise ConfigError("the masked aide needs at least 2 capsule channels")


def _aide_mask(caps: int, dim_out: int, dim_in: int, dtype) -> np.ndarray:
    """Zero out each output capsule's view of its same-index input capsule."""
    mask = np.ones((caps * dim_out, caps * dim_in, 1, 1), dtype=dtype)
    for c in range(caps):
        mask[c * dim_out:(c + 1) * dim_out, c * dim_in:(c + 1) * dim_in] = 0.0
    return mask


class CapConv(Layer):
    """Master/aide capsule conv layer; see module docstring.

    coefficient_override, when set to a (m1, m2) float pair, bypasses the
    learned gates; master_only is exactly the (1, 0) override with no aide.
    """

    _children = ("master", "aide", "gate", "bn")

    def __init__(self, spec: CapConvSpec, seed: int = 0, name: str = "capconv"):
        super().__init__()
        self.spec = spec
        c, d1, d2 = spec.caps, spec.dim_in, spec.dim_out
        self.master = Conv2d(c * d1, c * d2, spec.kernel, spec.stride, spec.padding,
                             groups=c, rng=seeded_rng(seed, name, "master"))
        self.coefficient_override: tuple[float, float] | None = None
        if spec.interaction == "master_only":
            self.aide = None
            self.gate = None
            self.coefficient_override = (1.0, 0.0)
        else:
            # aide: kernel 1, stride matched to the master so shapes agree
            self.aide = Conv2d(c * d1, c * d2, 1, spec.stride, 0, groups=1,
                               rng=seeded_rng(seed, name, "aide"))
            if spec.aide_all_channels:
                self._mask = None
            else:
                self._mask = T.constant(_aide_mask(c, d2, d1, T.get_default_dtype()))
            gate_in = 2 * d2 if spec.interaction == "v3" else d2
            gate_out = 2 if spec.interaction == "v3" else 1
            self.gate = Conv2d(c * gate_in, c * gate_out, 1, 1, 0, groups=c,
                               rng=seeded_rng(seed, name, "gate"))
            if spec.interaction in ("v1", "v2"):
                self.gate2 = Conv2d(c * d2, c, 1, 1, 0, groups=c,
                                    rng=seeded_rng(seed, name, "gate2"))
                self._children = self._children + ("gate2",)
        self.bn = BatchNorm2d(c * d2)

    def _master_votes(self, x: Tensor) -> Tensor:
        return self.master(x)

    def _aide_votes(self, x: Tensor) -> Tensor:
        w = self.aide.weight if self._mask is None else self.aide.weight * self._mask
        return T.conv2d(x, w, self.aide.stride, self.aide.padding, self.aide.groups)

    def _coefficients(self, v1: Tensor, v2: Tensor):
        """Per-capsule sigmoid gates (m1, m2), each (B, caps, H, W)."""
        c, d2 = self.spec.caps, self.spec.dim_out
        b, _, h, w = v1.shape
        kind = self.spec.interaction
        if kind == "v3":
            a = T.reshape(v1, (b, c, d2, h, w))
            bb = T.reshape(v2, (b, c, d2, h, w))
            both = T.reshape(T.concat([a, bb], axis=2), (b, c * 2 * d2, h, w))
            m = self.gate(both)                       # (B, 2*caps, H, W)
            m = T.reshape(m, (b, c, 2, h, w))
            m1 = T.reshape(T.slice_axis(m, 2, 0, 1), (b, c, h, w))
            m2 = T.reshape(T.slice_axis(m, 2, 1, 2), (b, c, h, w))
        elif kind == "v1":
            m1, m2 = self.gate(v1), self.gate2(v2)
        else:  # v2: each branch gated by the other's vote
            m1, m2 = self.gate(v2), self.gate2(v1)
        return T.sigmoid(m1), T.sigmoid(m2)

    def __call__(self, x: Tensor) -> Tensor:
        spec = self.spec
        c, d1, d2 = spec.caps, spec.dim_in, spec.dim_out
        if x.shape[1] != c * d1:
            raise ShapeError(f"expected {c * d1} channels, got {x.shape[1]}")
        v1 = self._master_votes(x)
        b, _, h, w = v1.shape
        if spec.interaction == "master_only":
            s = v1
        else:
            v2 = self._aide_votes(x)
            if v2.shape != v1.shape:
                raise ShapeError(f"master {v1.shape} / aide {v2.shape} disagree")
            if self.coefficient_override is not None:
                f1, f2 = self.coefficient_override
                s = f1 * v1 + f2 * v2
            else:
                m1, m2 = self._coefficients(v1, v2)
                s = (T.reshape(m1, (b, c, 1, h, w)) * T.reshape(v1, (b, c, d2, h, w))
                     + T.reshape(m2, (b, c, 1, h, w)) * T.reshape(v2, (b, c, d2, h, w)))
                s = T.reshape(s, (b, c * d2, h, w))
        out = T.relu(self.bn(s))
        return grid_squash(out, c, d2)


@dataclass
class ModuleTrace:
    """Live tensors a feedback unit can regularise against."""

    input: Tensor
    type1_out: Tensor
    output: Tensor


class EncapModule(Layer):
    """One Type I capsule conv plus n_type2 Type II convs with skips.

    Type I moves spatial size / capsule dim; its skip is a strided 1x1 grouped
    projection. Type II layers keep shape; their skip is a plain residual add.
    Depth counts every capsule conv plus the Type I layer: n_type2 + 1.
    """

    _children = ("type1", "type1_skip", "type2")

    def __init__(self, caps: int, dim_in: int, dim_out: int, n_type2: int = 0,
                 stride: int = 1, interaction: str = "v3", skip: str = "both",
                 aide_all_channels: bool = False, seed: int = 0, name: str = "module"):
        super().__init__()
        if skip not in SKIP_MODES:
            raise ConfigError(f"unknown skip mode {skip!r}")
        if n_type2 < 0:
            raise ConfigError("n_type2 must be >= 0")
        self.skip = skip
        self.type1 = CapConv(
            CapConvSpec(caps, dim_in, dim_out, kernel=3, stride=stride, padding=1,
                        interaction=interaction, aide_all_channels=aide_all_channels),
            seed=seed, name=f"{name}.type1")
        if skip in ("type_I", "both"):
            self.type1_skip = Conv2d(caps * dim_in, caps * dim_out, 1, stride, 0,
                                     groups=caps, rng=seeded_rng(seed, name, "type1_skip"))
        else:
            self.type1_skip = None
        self.type2 = [
            CapConv(CapConvSpec(caps, dim_out, dim_out, kernel=1, stride=1, padding=0,
                                interaction=interaction, aide_all_channels=aide_all_channels),
                    seed=seed, name=f"{name}.type2_{i}")
            for i in range(n_type2)
        ]

    @property
    def depth(self) -> int:
        return len(self.type2) + 1

    def __call__(self, x: Tensor) -> tuple[Tensor, ModuleTrace]:
        y = self.type1(x)
        if self.type1_skip is not None:
            y = y + self.type1_skip(x)
        type1_out = y
        for layer in self.type2:
            if self.skip in ("type_II", "both"):
                y = layer(y) + y
            else:
                y = layer(y)
        return y, ModuleTrace(input=x, type1_out=type1_out, output=y)


def mapping_kernel_extent(dim_out: int, caps: int, n_out: int) -> int:
    """Output-channel extent of an iterative layer's vote kernel."""
    return dim_out * caps * n_out


def mapping_param_reduction(n_out: int) -> float:
    """How many times fewer mapping parameters one-pass needs: n2/2."""
    return n_out / 2.0


def routing_ops_reduction(spatial: int, dim_out: int) -> float:
    """How many times fewer routing ops one-pass needs: S^4/d2."""
    return spatial ** 4 / dim_out
