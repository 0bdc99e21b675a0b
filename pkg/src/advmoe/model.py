"""MoE-CNN model variants, routing, and forward passes.

One backbone definition serves four variants:

* ``dense``  - the full network.
* ``sdense`` - every layer uniformly shrunk to its expert width.
* ``sparse`` - dense-shaped weights restricted to one static channel mask.
* ``moe``    - dense-shaped backbone plus per-unit routers; each input
  activates exactly one expert (channel slice) per routed unit.

Channel slicing is realised on full-width tensors: inactive channels are
held at zero, which gives exact slice semantics for convolutions while
keeping everything batched. Hard routing uses a straight-through mask,
``hard + (soft - detach(soft))``, so forward values come from the hard
choice while gradients also reach the gate probabilities.
"""

from dataclasses import dataclass

import numpy as np

from .config import (
    BackboneConfig,
    BlockSpec,
    ChannelMask,
    ConvSpec,
    MoEConfig,
    round_half_even,
)
from .optim import ParamGroup
from .rng import RngStream
from .tensor import (
    ContractError,
    ShapeError,
    Tensor,
    add,
    batch_norm2d,
    conv2d,
    detach,
    global_avg_pool,
    linear,
    matmul,
    mul,
    relu,
    reshape,
    softmax,
    sub,
)

VARIANTS = ("dense", "sdense", "sparse", "moe")


def expert_partition(channels: int, num_experts: int, scale: float):
    """Channel index sets for one layer's experts.

    Experts own ``round(scale * channels)`` channels each. When the total
    expert budget fits (``num_experts * scale <= 1``) the sets are
    contiguous disjoint blocks; otherwise evenly spaced overlapping
    windows. Starts are clamped so every window stays in range.
    """
    e = round_half_even(scale * channels)
    if e < 1 or e > channels:
        raise ContractError(f"expert width {e} invalid for {channels} channels (scale {scale})")
    if num_experts < 1:
        raise ContractError("need at least one expert")
    if num_experts == 1:
        return (tuple(range(e)),)
    if num_experts * e <= channels:
        starts = [i * e for i in range(num_experts)]
    else:
        starts = [min(round_half_even(i * (channels - e) / (num_experts - 1)), channels - e)
                  for i in range(num_experts)]
    return tuple(tuple(range(s, s + e)) for s in starts)


@dataclass
class PathwayTrace:
    """Expert choices and gate probabilities for one forward batch."""

    expert_indices: np.ndarray  # (B, n_router_groups) int
    gate_probs: list  # per group, ndarray (B, N)

    def pathway_sets(self, partitions, unit_groups):
        """Per sample, the set of (unit, channel) pairs on its pathway."""
        b = self.expert_indices.shape[0]
        out = []
        for n in range(b):
            pairs = set()
            for g, units in enumerate(unit_groups):
                e = int(self.expert_indices[n, g])
                for ui in units:
                    pairs.update((ui, c) for c in partitions[ui])
            out.append(pairs)
        return out


class ConvUnit:
    def __init__(self, spec: ConvSpec, w, gamma, beta):
        self.spec = spec
        self.w, self.gamma, self.beta = w, gamma, beta

    kind = "conv"

    def tensors(self, prefix):
        return [(f"{prefix}.w", self.w), (f"{prefix}.gamma", self.gamma),
                (f"{prefix}.beta", self.beta)]


class ResBlock:
    def __init__(self, spec: BlockSpec, w1, g1, b1, w2, g2, b2, ws=None, gs=None, bs=None):
        self.spec = spec
        self.w1, self.g1, self.b1 = w1, g1, b1
        self.w2, self.g2, self.b2 = w2, g2, b2
        self.ws, self.gs, self.bs = ws, gs, bs  # projection shortcut, or None

    kind = "block"

    @property
    def has_projection(self):
        return self.ws is not None

    def tensors(self, prefix):
        out = [(f"{prefix}.c1.w", self.w1), (f"{prefix}.c1.gamma", self.g1),
               (f"{prefix}.c1.beta", self.b1),
               (f"{prefix}.c2.w", self.w2), (f"{prefix}.c2.gamma", self.g2),
               (f"{prefix}.c2.beta", self.b2)]
        if self.has_projection:
            out += [(f"{prefix}.sc.w", self.ws), (f"{prefix}.sc.gamma", self.gs),
                    (f"{prefix}.sc.beta", self.bs)]
        return out


class Router:
    def __init__(self, w, b):
        self.w, self.b = w, b

    def tensors(self, prefix):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


class MoEModel:
    """A built model of any variant; parameters live in Tensor leaves."""

    def __init__(self, backbone: BackboneConfig, variant: str, units, head_w, head_b,
                 moe: MoEConfig | None = None, routers=None, router_groups=None,
                 partitions=None, mask: ChannelMask | None = None, seed: int = 0,
                 dtype=np.float32):
        self.backbone = backbone
        self.variant = variant
        self.units = units
        self.head_w, self.head_b = head_w, head_b
        self.moe = moe
        self.routers = routers or []
        self.router_groups = router_groups or []
        self.partitions = partitions
        self.mask = mask
        self.seed = seed
        self.dtype = dtype

    # -- parameter bookkeeping -------------------------------------------

    def named_parameters(self):
        out = []
        for i, u in enumerate(self.units):
            out.extend(u.tensors(f"u{i}"))
        out.append(("head.w", self.head_w))
        out.append(("head.b", self.head_b))
        for g, r in enumerate(self.routers):
            out.extend(r.tensors(f"router{g}"))
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def param_groups(self) -> dict:
        backbone, routers = [], []
        for name, t in self.named_parameters():
            (routers if name.startswith("router") else backbone).append(t)
        return {"backbone": ParamGroup("backbone", backbone),
                "routers": ParamGroup("routers", routers)}

    def checksums(self) -> dict:
        groups = self.param_groups()
        return {name: g.checksum() for name, g in groups.items()}

    def astype(self, dtype) -> "MoEModel":
        """Deep copy with every parameter cast (float64 for grad checks)."""
        import copy

        clone = copy.copy(self)
        clone.units = []
        for u in self.units:
            cu = copy.copy(u)
            for attr in ("w", "gamma", "beta", "w1", "g1", "b1", "w2", "g2", "b2", "ws", "gs", "bs"):
                if hasattr(cu, attr) and getattr(cu, attr) is not None:
                    t = getattr(cu, attr)
                    setattr(cu, attr, Tensor(t.data.astype(dtype), requires_grad=t.requires_grad))
            clone.units.append(cu)
        clone.head_w = Tensor(self.head_w.data.astype(dtype), requires_grad=True)
        clone.head_b = Tensor(self.head_b.data.astype(dtype), requires_grad=True)
        clone.routers = [Router(Tensor(r.w.data.astype(dtype), requires_grad=True),
                                Tensor(r.b.data.astype(dtype), requires_grad=True))
                         for r in self.routers]
        clone.dtype = dtype
        return clone

    # -- structural helpers ----------------------------------------------

    def unit_widths(self):
        """Physical (tensor) out-channel width per unit."""
        return [u.spec.out_channels if self.variant != "sdense"
                else round_half_even(self.moe_scale() * u.spec.out_channels)
                for u in self.units]

    def moe_scale(self) -> float:
        if self.variant == "sdense":
            return self._sdense_scale
        return self.moe.model_scale if self.moe else 1.0

    def active_widths(self):
        """Semantically active out-channel count per unit."""
        if self.variant == "dense":
            return [u.spec.out_channels for u in self.units]
        if self.variant == "sdense":
            return self.unit_widths()
        if self.variant == "sparse":
            return [len(l) for l in self.mask.layers]
        return [len(self.partitions[i][0]) for i in range(len(self.units))]


def _unit_group_chunks(n_units: int, blocks_per_router: int):
    return [list(range(i, min(i + blocks_per_router, n_units)))
            for i in range(0, n_units, blocks_per_router)]


def build_model(backbone: BackboneConfig, variant: str, moe: MoEConfig | None = None,
                mask: ChannelMask | None = None, seed: int = 0, dtype=np.float32) -> MoEModel:
    """Construct and initialise a model variant.

    All variants draw each weight tensor at its full dense shape from the
    same named init stream and slice afterwards, so the channel-sliced
    variants (sdense / sparse / moe with matching partitions) start from
    bit-identical weights on their shared slices. Fan-in for the He scale
    is taken from the full dense backbone for the same reason.
    """
    if variant not in VARIANTS:
        raise ContractError(f"unknown variant {variant!r}")
    if variant == "moe" and moe is None:
        raise ContractError("variant 'moe' requires a MoEConfig")
    if variant == "sparse" and mask is None:
        raise ContractError("variant 'sparse' requires a ChannelMask")

    scale = 1.0
    if variant in ("sdense", "moe"):
        if variant == "sdense":
            scale = moe.model_scale if moe else (mask.ratio if mask else None)
            if scale is None:
                raise ContractError("variant 'sdense' needs a scale via MoEConfig")
        else:
            scale = moe.model_scale
    if variant == "sparse":
        if len(mask.layers) != len(backbone.units):
            raise ContractError(
                f"mask has {len(mask.layers)} layers for {len(backbone.units)} units")
        for li, (idx, u) in enumerate(zip(mask.layers, backbone.units)):
            want = round_half_even(mask.ratio * u.out_channels)
            if len(idx) != want:
                raise ShapeError(f"mask layer {li}: {len(idx)} channels, expected {want}")
            if list(idx) != sorted(set(idx)) or (idx and (idx[0] < 0 or idx[-1] >= u.out_channels)):
                raise ContractError(f"mask layer {li} indices invalid")

    init = RngStream(seed, "init")

    def draw(stream_id, full_shape, fan_in, rows=None, cols=None):
        sigma = np.sqrt(2.0 / fan_in)
        w = init.child(stream_id).generator().standard_normal(full_shape) * sigma
        w = w[:rows] if rows is not None else w
        w = w[:, :cols] if cols is not None else w
        return Tensor(np.ascontiguousarray(w, dtype=dtype), requires_grad=True)

    def norm_pair(width):
        return (Tensor(np.ones(width, dtype=dtype), requires_grad=True),
                Tensor(np.zeros(width, dtype=dtype), requires_grad=True))

    units = []
    in_full = backbone.input_shape[0]
    in_width = in_full
    partitions = [] if variant == "moe" else None
    for ui, spec in enumerate(backbone.units):
        out_full = spec.out_channels
        out_width = round_half_even(scale * out_full) if variant == "sdense" else out_full
        if variant == "moe":
            if out_full < moe.num_experts:
                raise ContractError(
                    f"unit {ui}: {out_full} channels cannot host {moe.num_experts} experts")
            partitions.append(expert_partition(out_full, moe.num_experts, scale))
        if isinstance(spec, ConvSpec):
            k = spec.kernel
            w = draw(f"u{ui}/w", (out_full, in_full, k, k), in_full * k * k,
                     rows=out_width, cols=in_width)
            g, b = norm_pair(out_width)
            units.append(ConvUnit(spec, w, g, b))
        else:
            w1 = draw(f"u{ui}/c1", (out_full, in_full, 3, 3), in_full * 9,
                      rows=out_width, cols=in_width)
            g1, b1 = norm_pair(out_width)
            w2 = draw(f"u{ui}/c2", (out_full, out_full, 3, 3), out_full * 9,
                      rows=out_width, cols=out_width)
            g2, b2 = norm_pair(out_width)
            if spec.stride != 1 or in_full != out_full:
                ws = draw(f"u{ui}/sc", (out_full, in_full, 1, 1), in_full,
                          rows=out_width, cols=in_width)
                gs, bs = norm_pair(out_width)
                units.append(ResBlock(spec, w1, g1, b1, w2, g2, b2, ws, gs, bs))
            else:
                units.append(ResBlock(spec, w1, g1, b1, w2, g2, b2))
        in_full, in_width = out_full, out_width

    head_w = draw("head", (backbone.num_classes, in_full), in_full, cols=in_width)
    head_b = Tensor(np.zeros(backbone.num_classes, dtype=dtype), requires_grad=True)

    routers, groups = [], []
    if variant == "moe":
        groups = _unit_group_chunks(len(backbone.units), moe.blocks_per_router)
        router_in = backbone.input_shape[0]
        widths = [u.out_channels for u in backbone.units]
        for gi, unit_ids in enumerate(groups):
            rw = draw(f"router{gi}", (moe.num_experts, router_in), router_in)
            rb = Tensor(np.zeros(moe.num_experts, dtype=dtype), requires_grad=True)
            routers.append(Router(rw, rb))
            router_in = widths[unit_ids[-1]]

    m = MoEModel(backbone, variant, units, head_w, head_b, moe=moe, routers=routers,
                 router_groups=groups, partitions=tuple(partitions) if partitions else None,
                 mask=mask, seed=seed, dtype=dtype)
    if variant == "sdense":
        m._sdense_scale = scale
    return m


def apply_mask(dense_model: MoEModel, mask: ChannelMask) -> MoEModel:
    """Restrict a dense model to one static pathway (Sparse-CNN)."""
    if dense_model.variant != "dense":
        raise ContractError("apply_mask expects a dense model")
    sparse = build_model(dense_model.backbone, "sparse", mask=mask,
                         seed=dense_model.seed, dtype=dense_model.dtype)
    # carry over the (possibly trained) dense weights
    src = dict(dense_model.named_parameters())
    for name, t in sparse.named_parameters():
        if src[name].data.shape != t.data.shape:
            raise ShapeError(f"{name}: {src[name].data.shape} vs {t.data.shape}")
        t.data = src[name].data.copy()
    return sparse


def route(router: Router, features: Tensor):
    """Gate one router: softmax over pooled features, argmax selection.

    Returns (chosen indices (B,), probs Tensor (B, N)); ties resolve to
    the lowest expert index.
    """
    pooled = global_avg_pool(features)
    logits = linear(pooled, router.w, router.b)
    probs = softmax(logits)
    chosen = np.argmax(probs.data, axis=1)
    return chosen, probs


def _st_mask(activ: Tensor, hard_w: np.ndarray | None, soft_w: Tensor | None, mode: str) -> Tensor:
    """Apply a routing mask to full-width activations.

    hard mode: value from the hard 0/1 mask, gradient through the soft
    gate as well (hard + (soft - detach(soft))). soft mode: probability-
    weighted channel mixture. hard_value: the hard mask alone, no
    gradient path to the gate (diagnostics only).
    """
    b, c = activ.data.shape[0], activ.data.shape[1]
    if mode == "hard_value":
        return mul(activ, hard_w.reshape(b, c, 1, 1))
    soft = mul(activ, reshape(soft_w, (b, c, 1, 1)))
    if mode == "soft":
        return soft
    hard = mul(activ, hard_w.reshape(b, c, 1, 1))
    return add(hard, sub(soft, detach(soft)))


def forward(model: MoEModel, x, mode: str | None = None, channel_gates=None):
    """Run a batch through the model.

    Returns (logits Tensor, PathwayTrace or None). ``mode`` overrides the
    configured routing mode for MoE models ("hard" or "soft").
    ``channel_gates`` (dense variant only) multiplies each unit's output
    channels by a learnable gate vector, the hook used by the structured
    mask learner.
    """
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=model.dtype))
    if x.data.ndim != 4 or x.data.shape[1] != model.backbone.input_shape[0]:
        raise ShapeError(f"input shape {x.data.shape} does not match "
                         f"{model.backbone.input_shape}")

    is_moe = model.variant == "moe"
    if is_moe:
        mode = mode or model.moe.routing_mode
        if mode not in ("hard", "soft", "hard_value"):
            raise ContractError(f"unknown routing mode {mode!r}")
    elif mode not in (None, "hard", "soft"):
        raise ContractError(f"unknown routing mode {mode!r}")

    b = x.data.shape[0]
    feat = x
    trace = None
    chosen_all, probs_all = [], []
    # per-unit masking state for the current router group
    unit_hard = {}
    unit_soft = {}

    if is_moe:
        group_of_unit = {}
        for gi, ids in enumerate(model.router_groups):
            for ui in ids:
                group_of_unit[ui] = gi

    if channel_gates is not None and model.variant != "dense":
        raise ContractError("channel_gates only apply to the dense variant")

    def masked(t: Tensor, ui: int) -> Tensor:
        if model.variant == "dense":
            if channel_gates is not None and channel_gates[ui] is not None:
                c = t.data.shape[1]
                return mul(t, reshape(channel_gates[ui], (1, c, 1, 1)))
            return t
        if model.variant == "sdense":
            return t
        if model.variant == "sparse":
            c = t.data.shape[1]
            mvec = np.zeros((1, c, 1, 1), dtype=t.data.dtype)
            mvec[0, list(model.mask.layers[ui]), 0, 0] = 1.0
            return mul(t, mvec)
        return _st_mask(t, unit_hard.get(ui), unit_soft[ui], mode)

    for ui, unit in enumerate(model.units):
        if is_moe and ui in group_of_unit and model.router_groups[group_of_unit[ui]][0] == ui:
            gi = group_of_unit[ui]
            chosen, probs = route(model.routers[gi], feat)
            chosen_all.append(chosen)
            probs_all.append(probs.data)
            for uj in model.router_groups[gi]:
                part = model.partitions[uj]
                c = model.units[uj].spec.out_channels
                indicator = np.zeros((model.moe.num_experts, c), dtype=model.dtype)
                for e, idx in enumerate(part):
                    indicator[e, list(idx)] = 1.0
                unit_soft[uj] = matmul(probs, Tensor(indicator))
                unit_hard[uj] = indicator[chosen]

        if unit.kind == "conv":
            s = unit.spec
            y = relu(batch_norm2d(conv2d(feat, unit.w, s.stride, s.padding), unit.gamma, unit.beta))
            feat = masked(y, ui)
        else:
            s = unit.spec
            a1 = relu(batch_norm2d(conv2d(feat, unit.w1, s.stride, 1), unit.g1, unit.b1))
            a1 = masked(a1, ui)
            a2 = batch_norm2d(conv2d(a1, unit.w2, 1, 1), unit.g2, unit.b2)
            if unit.has_projection:
                sc = batch_norm2d(conv2d(feat, unit.ws, s.stride, 0), unit.gs, unit.bs)
            else:
                sc = feat
            feat = masked(relu(add(a2, sc)), ui)

    pooled = global_avg_pool(feat)
    logits = linear(pooled, model.head_w, model.head_b)

    if is_moe:
        trace = PathwayTrace(np.stack(chosen_all, axis=1) if chosen_all else
                             np.zeros((b, 0), dtype=int), probs_all)
    return logits, trace
