"""Architecture templates: the tiny encoder-decoder and its fusion variants.

tiny-ED: every encoder stage is ``[conv k3 s2, ReLU, conv k3 s1, ReLU]``;
the decoder mirrors it with stride-2 transposed convs and concatenated skips
from the encoder stage(s) at the same resolution. A last transposed conv
returns to full resolution, where the raw inputs are concatenated before the
head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import GraphError, LayerSpec, NetworkGraph

# sparse depth enters as inverse depth in 1/km; this brings it to O(1)
SD_INPUT_SCALE = 0.01
# the regression head emits O(1) activations; this maps them to 1/km
INV_DEPTH_OUTPUT_SCALE = 100.0

SLOT_CHANNELS = {"rgb": 3, "sd": 1}


@dataclass(frozen=True)
class BranchSpec:
    """Encoder for one modality (or one early-fused input)."""

    slots: tuple[str, ...]
    channels: tuple[int, ...] = (16, 32, 64)
    first_layer: str = "sparse"  # or "dense"


@dataclass(frozen=True)
class FusionTemplate:
    mode: str  # "single", "early" or "late"
    branches: tuple[BranchSpec, ...]
    channels: tuple[int, ...] = (16, 32, 64)
    top_channels: int = 8
    batchnorm: bool = False
    join_k: int = 3

    def __post_init__(self):
        if self.mode not in ("single", "early", "late"):
            raise GraphError(f"unknown fusion mode {self.mode!r}")
        if self.mode == "late" and len(self.branches) != 2:
            raise GraphError("late fusion needs exactly two branches")
        if self.mode != "late" and len(self.branches) != 1:
            raise GraphError(f"{self.mode} template takes a single branch")


@dataclass(frozen=True)
class Head:
    kind: str = "regression"  # or "softmax"
    num_classes: int = 0
    k: int = 3
    scale: float = INV_DEPTH_OUTPUT_SCALE


def tiny_ed(inputs=("sd",), fusion: str = "late", channels=(16, 32, 64), first_layer: str = "sparse",
            batchnorm: bool = False, top_channels: int = 8) -> FusionTemplate:
    """Template for the given input slots. Two slots use ``fusion`` (early or late)."""
    inputs = tuple(inputs)
    unknown = set(inputs) - set(SLOT_CHANNELS)
    if unknown or not inputs:
        raise GraphError(f"inputs must be drawn from {sorted(SLOT_CHANNELS)}, got {inputs}")
    channels = tuple(channels)
    if len(inputs) == 1:
        first = first_layer if inputs == ("sd",) else "dense"
        return FusionTemplate("single", (BranchSpec(inputs, channels, first),), channels, top_channels, batchnorm)
    if fusion == "early":
        return FusionTemplate("early", (BranchSpec(("rgb", "sd"), channels, "dense"),),
                              channels, top_channels, batchnorm)
    if fusion == "late":
        return FusionTemplate("late", (BranchSpec(("rgb",), channels, "dense"),
                                       BranchSpec(("sd",), channels, first_layer)),
                              channels, top_channels, batchnorm)
    raise GraphError(f"unknown fusion mode {fusion!r}")


class _Builder:
    def __init__(self):
        self.specs: list[LayerSpec] = []

    def add(self, id, kind, inputs=(), **attrs):
        self.specs.append(LayerSpec(id, kind, tuple(inputs), attrs))
        return id


def _encoder(b: _Builder, prefix: str, src: str, branch: BranchSpec, batchnorm: bool, sparse_src: bool):
    stages = []
    x = src
    for i, c in enumerate(branch.channels):
        kind = "sparseconv" if (i == 0 and branch.first_layer == "sparse" and sparse_src) else "conv"
        x = b.add(f"{prefix}{i + 1}a", kind, [x], k=3, s=2, out=c)
        if batchnorm:
            # statistics of a strided conv over zero-filled sparse input are meaningless
            on = 0 if (i == 0 and sparse_src) else 1
            x = b.add(f"{prefix}{i + 1}a_bn", "batchnorm", [x], enabled=on)
        x = b.add(f"{prefix}{i + 1}a_relu", "relu", [x])
        x = b.add(f"{prefix}{i + 1}b", "conv", [x], k=3, s=1, out=c)
        if batchnorm:
            x = b.add(f"{prefix}{i + 1}b_bn", "batchnorm", [x])
        x = b.add(f"{prefix}{i + 1}b_relu", "relu", [x])
        stages.append(x)
    return stages


def template_specs(template: FusionTemplate, head: Head) -> list[LayerSpec]:
    b = _Builder()
    slots = []
    for branch in template.branches:
        for slot in branch.slots:
            if slot not in slots:
                slots.append(slot)
    for slot in slots:
        if slot == "sd":
            b.add("sd", "input", channels=1, scale=SD_INPUT_SCALE, sparse=1)
        else:
            b.add(slot, "input", channels=SLOT_CHANNELS[slot])

    branch_stages = []
    for branch in template.branches:
        if branch.channels != template.channels:
            raise GraphError("all branches must share the decoder's channel plan")
        if len(branch.slots) > 1:
            src = b.add("fused_input", "concat", branch.slots)
            prefix = "enc"
        else:
            src = branch.slots[0]
            prefix = f"{src}_enc" if template.mode == "late" else "enc"
        branch_stages.append(_encoder(b, prefix, src, branch, template.batchnorm, "sd" in branch.slots))

    c = template.channels
    if template.mode == "late":
        x = b.add("join_cat", "concat", [stages[-1] for stages in branch_stages])
        x = b.add("join_conv", "conv", [x], k=template.join_k, s=1, out=c[-1])
        x = b.add("join_relu", "relu", [x])
    else:
        x = branch_stages[0][-1]

    for i in range(len(c) - 2, -1, -1):
        x = b.add(f"dec{i + 1}_up", "tconv", [x], k=3, s=2, out=c[i])
        x = b.add(f"dec{i + 1}_up_relu", "relu", [x])
        x = b.add(f"dec{i + 1}_cat", "concat", [x] + [stages[i] for stages in branch_stages])
        x = b.add(f"dec{i + 1}_conv", "conv", [x], k=3, s=1, out=c[i])
        if template.batchnorm:
            x = b.add(f"dec{i + 1}_bn", "batchnorm", [x])
        x = b.add(f"dec{i + 1}_relu", "relu", [x])
    x = b.add("dec0_up", "tconv", [x], k=3, s=2, out=template.top_channels)
    x = b.add("dec0_up_relu", "relu", [x])
    x = b.add("dec0_cat", "concat", [x] + slots)

    if head.kind == "regression":
        b.add("head", "regression_head", [x], k=head.k, scale=head.scale)
    elif head.kind == "softmax":
        b.add("head", "softmax_head", [x], k=head.k, classes=head.num_classes)
    else:
        raise GraphError(f"unknown head kind {head.kind!r}")
    return b.specs


def build_network(template: FusionTemplate, head: Head = Head(), seed: int = 0, dtype=np.float64) -> NetworkGraph:
    """Instantiate ``template`` with ``head``; all structural checks run here."""
    if isinstance(template, (list, tuple)) and template and isinstance(template[0], LayerSpec):
        return NetworkGraph(template, seed=seed, dtype=dtype)
    return NetworkGraph(template_specs(template, head), seed=seed, dtype=dtype)


def forward(g: NetworkGraph, inputs: dict, train: bool = False):
    return g.forward(inputs, train=train)


def backward(g: NetworkGraph, loss_grad):
    return g.backward(loss_grad)


__all__ = ["BranchSpec", "FusionTemplate", "Head", "tiny_ed", "template_specs", "build_network",
           "forward", "backward", "SD_INPUT_SCALE", "INV_DEPTH_OUTPUT_SCALE"]
