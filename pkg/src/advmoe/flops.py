"""Analytic and instrumented FLOP accounting.

Conventions (shared by both paths, multiply-accumulates count as 2):

* conv:        2 * Ho * Wo * k^2 * active_in * active_out
* linear head: 2 * active_in * num_classes
* router:      active_in * H * W   (pooling adds)  +  2 * active_in * N
* normalization, relu and residual adds are not counted.

"Active" is the semantic slice width: full for dense, round(r*C) for
sdense/moe, mask size for sparse. The instrumented pass derives its
counts from runtime shapes and masks while actually computing the batch,
so it independently cross-checks the analytic walk.
"""

import numpy as np

from .config import BackboneConfig, ChannelMask, ConvSpec, MoEConfig, round_half_even
from .model import MoEModel, forward
from .tensor import ContractError


def _conv_out(h, w, k, stride, pad):
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def flops_estimate(backbone: BackboneConfig, variant: str, moe: MoEConfig | None = None,
                   mask: ChannelMask | None = None) -> float:
    """Per-example test-time FLOPs for a model variant."""
    if variant == "moe" and moe is None:
        raise ContractError("moe variant needs a MoEConfig")
    if variant == "sparse" and mask is None:
        raise ContractError("sparse variant needs a ChannelMask")
    scale = moe.model_scale if moe is not None else None

    def active_out(ui, spec):
        if variant == "dense":
            return spec.out_channels
        if variant in ("sdense", "moe"):
            return round_half_even(scale * spec.out_channels)
        return len(mask.layers[ui])

    c_in, h, w = backbone.input_shape
    total = 0.0
    groups = []
    if variant == "moe":
        from .model import _unit_group_chunks

        groups = {ids[0] for ids in _unit_group_chunks(len(backbone.units), moe.blocks_per_router)}

    for ui, spec in enumerate(backbone.units):
        out = active_out(ui, spec)
        if variant == "moe" and ui in groups:
            total += c_in * h * w + 2.0 * c_in * moe.num_experts
        if isinstance(spec, ConvSpec):
            ho, wo = _conv_out(h, w, spec.kernel, spec.stride, spec.padding)
            total += 2.0 * ho * wo * spec.kernel ** 2 * c_in * out
            h, w = ho, wo
        else:
            ho, wo = _conv_out(h, w, 3, spec.stride, 1)
            total += 2.0 * ho * wo * 9 * c_in * out          # conv1
            total += 2.0 * ho * wo * 9 * out * out           # conv2
            if spec.stride != 1 or backbone_in_full(backbone, ui) != spec.out_channels:
                total += 2.0 * ho * wo * 1 * c_in * out      # projection shortcut
            h, w = ho, wo
        c_in = out

    total += 2.0 * c_in * backbone.num_classes
    return total


def backbone_in_full(backbone: BackboneConfig, ui: int) -> int:
    return backbone.input_shape[0] if ui == 0 else backbone.units[ui - 1].out_channels


def count_forward_flops(model: MoEModel, x, mode: str = "hard"):
    """Instrumented op count on a real forward pass.

    Runs the model on ``x`` and tallies the multiply-accumulate work an
    exact sliced implementation would perform, from runtime mask and
    partition sizes. Returns (flops_per_example, logits ndarray).
    """
    x = np.asarray(x, dtype=model.dtype)
    b = x.shape[0]
    logits, trace = forward(model, x, mode=mode if model.variant == "moe" else None)

    per_example = np.zeros(b)
    c_in = np.full(b, model.backbone.input_shape[0])
    h, w = model.backbone.input_shape[1:]
    group_starts = {ids[0]: gi for gi, ids in enumerate(model.router_groups)}

    for ui, unit in enumerate(model.units):
        spec = unit.spec
        if model.variant == "dense":
            out = np.full(b, spec.out_channels)
        elif model.variant == "sdense":
            width = (unit.gamma if unit.kind == "conv" else unit.g1).data.shape[0]
            out = np.full(b, width)
        elif model.variant == "sparse":
            out = np.full(b, len(model.mask.layers[ui]))
        else:
            gi = next(g for g, ids in enumerate(model.router_groups) if ui in ids)
            chosen = trace.expert_indices[:, gi]
            out = np.array([len(model.partitions[ui][e]) for e in chosen])
        if model.variant == "moe" and ui in group_starts:
            per_example += c_in * h * w + 2.0 * c_in * model.moe.num_experts
        if unit.kind == "conv":
            ho, wo = _conv_out(h, w, spec.kernel, spec.stride, spec.padding)
            per_example += 2.0 * ho * wo * spec.kernel ** 2 * c_in * out
            h, w = ho, wo
        else:
            ho, wo = _conv_out(h, w, 3, spec.stride, 1)
            per_example += 2.0 * ho * wo * 9 * c_in * out
            per_example += 2.0 * ho * wo * 9 * out * out
            if unit.has_projection:
                per_example += 2.0 * ho * wo * c_in * out
            h, w = ho, wo
        c_in = out

    per_example += 2.0 * c_in * model.backbone.num_classes
    if not np.all(per_example == per_example[0]):
        raise ContractError("per-example FLOPs diverged across the batch")
    return float(per_example[0]), logits.data
