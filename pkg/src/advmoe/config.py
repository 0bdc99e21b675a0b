"""Backbone and mixture configuration types."""

from dataclasses import dataclass

from .tensor import ContractError


def round_half_even(x: float) -> int:
    """Banker's rounding, the fixed rounding rule for channel counts."""
    return int(round(x))


@dataclass(frozen=True)
class ConvSpec:
    """One plain conv unit: conv -> batch-stat norm -> relu."""

    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class BlockSpec:
    """Residual basic block: two 3x3 convs plus (projection) shortcut."""

    out_channels: int
    stride: int = 1


@dataclass(frozen=True)
class BackboneConfig:
    name: str
    input_shape: tuple  # (C, H, W)
    num_classes: int
    units: tuple  # ConvSpec | BlockSpec, in forward order

    def to_dict(self) -> dict:
        out = []
        for u in self.units:
            if isinstance(u, ConvSpec):
                out.append({"kind": "conv", "out_channels": u.out_channels,
                            "kernel": u.kernel, "stride": u.stride, "padding": u.padding})
            else:
                out.append({"kind": "block", "out_channels": u.out_channels, "stride": u.stride})
        return {"name": self.name, "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "units": out}

    @staticmethod
    def from_dict(d: dict) -> "BackboneConfig":
        units = []
        for u in d["units"]:
            if u["kind"] == "conv":
                units.append(ConvSpec(u["out_channels"], u["kernel"], u["stride"], u["padding"]))
            elif u["kind"] == "block":
                units.append(BlockSpec(u["out_channels"], u["stride"]))
            else:
                raise ContractError(f"unknown unit kind {u['kind']!r}")
        return BackboneConfig(d["name"], tuple(d["input_shape"]), d["num_classes"], tuple(units))


@dataclass(frozen=True)
class MoEConfig:
    num_experts: int = 2
    model_scale: float = 0.5
    routing_mode: str = "hard"
    blocks_per_router: int = 1

    def __post_init__(self):
        if self.num_experts < 1:
            raise ContractError("num_experts must be >= 1")
        if not 0.0 < self.model_scale <= 1.0:
            raise ContractError("model_scale must be in (0, 1]")
        if self.routing_mode not in ("hard", "soft"):
            raise ContractError(f"unknown routing_mode {self.routing_mode!r}")
        if self.blocks_per_router < 1:
            raise ContractError("blocks_per_router must be >= 1")

    def to_dict(self) -> dict:
        return {"num_experts": self.num_experts, "model_scale": self.model_scale,
                "routing_mode": self.routing_mode, "blocks_per_router": self.blocks_per_router}

    @staticmethod
    def from_dict(d: dict) -> "MoEConfig":
        return MoEConfig(d["num_experts"], d["model_scale"], d["routing_mode"], d["blocks_per_router"])


@dataclass(frozen=True)
class ChannelMask:
    """Static input-agnostic channel subset, one row per routed unit."""

    ratio: float
    layers: tuple  # tuple of tuples of sorted channel indices

    def to_dict(self) -> dict:
        return {"ratio": self.ratio, "layers": [list(l) for l in self.layers]}

    @staticmethod
    def from_dict(d: dict) -> "ChannelMask":
        return ChannelMask(d["ratio"], tuple(tuple(l) for l in d["layers"]))


def tiny_convnet(input_shape=(3, 16, 16), num_classes=10) -> BackboneConfig:
    """Four plain conv units at 16/32/64/64 channels."""
    return BackboneConfig(
        name="tiny_convnet",
        input_shape=tuple(input_shape),
        num_classes=num_classes,
        units=(
            ConvSpec(16, 3, 1, 1),
            ConvSpec(32, 3, 2, 1),
            ConvSpec(64, 3, 2, 1),
            ConvSpec(64, 3, 1, 1),
        ),
    )


def mini_resnet8(input_shape=(3, 16, 16), num_classes=10) -> BackboneConfig:
    """Conv stem plus three residual blocks (16/16/32/64 channels)."""
    return BackboneConfig(
        name="mini_resnet8",
        input_shape=tuple(input_shape),
        num_classes=num_classes,
        units=(
            ConvSpec(16, 3, 1, 1),
            BlockSpec(16, 1),
            BlockSpec(32, 2),
            BlockSpec(64, 2),
        ),
    )


_BACKBONES = {"tiny_convnet": tiny_convnet, "mini_resnet8": mini_resnet8}


def backbone_by_name(name: str, input_shape, num_classes) -> BackboneConfig:
    if name not in _BACKBONES:
        raise ContractError(f"unknown backbone {name!r}; have {sorted(_BACKBONES)}")
    return _BACKBONES[name](tuple(input_shape), num_classes)
