"""Wide-ResNet family and two smaller CNN families with named tap points.

Every family is organised as a stem followed by three groups at 1x, 1/2x and
1/4x spatial resolution; the taps ``group1..group3`` sit at the end of each
group, which is what teacher/student layer pairing relies on.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..tensor import Tensor, global_avg_pool, relu
from .layers import BatchNorm2d, Conv2d, Linear, Module

FAMILIES = ("wrn", "resnet-basic", "plain-cnn")
DEFAULT_TAPS = ["group1", "group2", "group3"]


class ModelSpecError(ValueError):
    pass


@dataclass
class ModelSpec:
    family: str = "wrn"
    depth: int = 16
    width: int = 1
    num_classes: int = 10
    input_shape: Tuple[int, int, int] = (3, 32, 32)
    tap_points: List[str] = field(default_factory=lambda: list(DEFAULT_TAPS))
    base_width: int = 16
    # "post" applies ReLU to the tapped group output; "pre" exposes it raw
    tap_activation: str = "post"

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ModelSpecError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.width <= 0 or self.base_width <= 0:
            raise ModelSpecError("width must be positive")
        if self.family == "wrn" and (self.depth < 10 or (self.depth - 4) % 6):
            raise ModelSpecError(f"WRN depth must satisfy (depth-4) % 6 == 0, got {self.depth}")
        if self.family == "resnet-basic" and (self.depth < 8 or (self.depth - 2) % 6):
            raise ModelSpecError(f"ResNet depth must satisfy (depth-2) % 6 == 0, got {self.depth}")
        if self.family == "plain-cnn" and (self.depth < 3 or self.depth % 3):
            raise ModelSpecError(f"plain-cnn depth must be a multiple of 3, got {self.depth}")
        if not self.tap_points:
            raise ModelSpecError("tap_points must be non-empty")
        bad = [t for t in self.tap_points if t not in DEFAULT_TAPS]
        if bad:
            raise ModelSpecError(f"unknown tap points {bad}; available {DEFAULT_TAPS}")
        if self.tap_activation not in ("pre", "post"):
            raise ModelSpecError("tap_activation must be 'pre' or 'post'")
        if len(self.input_shape) != 3:
            raise ModelSpecError("input_shape must be (c, h, w)")

    @property
    def name(self) -> str:
        tag = {"wrn": "WRN", "resnet-basic": "ResNet", "plain-cnn": "CNN"}[self.family]
        return f"{tag}{self.depth}-{self.width}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


class WideBasic(Module):
    """Pre-activation block: BN-ReLU-conv3x3-BN-ReLU-conv3x3 plus shortcut."""

    def __init__(self, cin, cout, stride, rng, dtype):
        super().__init__()
        self.bn1 = BatchNorm2d(cin, dtype=dtype)
        self.conv1 = Conv2d(cin, cout, 3, stride, 1, rng, dtype)
        self.bn2 = BatchNorm2d(cout, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, rng, dtype)
        self.equal = cin == cout and stride == 1
        if not self.equal:
            self.shortcut = Conv2d(cin, cout, 1, stride, 0, rng, dtype)

    def forward(self, x):
        o = relu(self.bn1(x))
        y = self.conv2(relu(self.bn2(self.conv1(o))))
        return y + (x if self.equal else self.shortcut(o))


class ResBasic(Module):
    """Post-activation block: conv-BN-ReLU-conv-BN, add shortcut, ReLU.

    ``forward`` returns the pre-ReLU sum; the caller applies the ReLU.
    """

    def __init__(self, cin, cout, stride, rng, dtype):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, stride, 1, rng, dtype)
        self.bn1 = BatchNorm2d(cout, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, rng, dtype)
        self.bn2 = BatchNorm2d(cout, dtype=dtype)
        self.equal = cin == cout and stride == 1
        if not self.equal:
            self.shortcut = Conv2d(cin, cout, 1, stride, 0, rng, dtype)
            self.shortcut_bn = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x):
        y = self.bn2(self.conv2(relu(self.bn1(self.conv1(x)))))
        sc = x if self.equal else self.shortcut_bn(self.shortcut(x))
        return y + sc


class ConvBN(Module):
    def __init__(self, cin, cout, stride, rng, dtype):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, stride, 1, rng, dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x):
        return self.bn(self.conv(x))


class Group(Module):
    def __init__(self, blocks: List[Module]):
        super().__init__()
        for i, b in enumerate(blocks):
            setattr(self, f"block{i}", b)

    def __iter__(self):
        return iter(self._modules.values())


class Model(Module):
    """A classifier whose forward also returns the tapped group outputs."""

    def __init__(self, spec: ModelSpec, dtype=np.float32, seed: int = 0):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c_in = spec.input_shape[0]
        base = spec.base_width
        widths = [base * spec.width, 2 * base * spec.width, 4 * base * spec.width]
        self.stem = Conv2d(c_in, base, 3, 1, 1, rng, dtype)
        if spec.family == "wrn":
            n = (spec.depth - 4) // 6
            block = WideBasic
        elif spec.family == "resnet-basic":
            n = (spec.depth - 2) // 6
            block = ResBasic
            self.stem_bn = BatchNorm2d(base, dtype=dtype)
        else:
            n = spec.depth // 3
            block = ConvBN
            self.stem_bn = BatchNorm2d(base, dtype=dtype)
        cin = base
        for g, cout in enumerate(widths):
            blocks = []
            for i in range(n):
                stride = 2 if (g > 0 and i == 0) else 1
                blocks.append(block(cin, cout, stride, rng, dtype))
                cin = cout
            setattr(self, f"group{g + 1}", Group(blocks))
        if spec.family == "wrn":
            self.final_bn = BatchNorm2d(cin, dtype=dtype)
        self.fc = Linear(cin, spec.num_classes, rng, dtype)

    @property
    def groups(self) -> List[Group]:
        return [self.group1, self.group2, self.group3]

    def forward(self, x, mode: Optional[str] = None) -> Tuple[Tensor, Dict[str, Tensor]]:
        if mode is not None:
            if mode not in ("train", "eval"):
                raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
            self.train(mode == "train")
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        expect = tuple(self.spec.input_shape)
        if x.ndim != 4 or tuple(x.shape[1:]) != expect:
            raise ValueError(f"input shape {x.shape} does not match (n, {expect})")
        fam = self.spec.family
        post = self.spec.tap_activation == "post"
        taps: Dict[str, Tensor] = {}

        h = self.stem(x)
        if fam != "wrn":
            h = relu(self.stem_bn(h))
        for gi, group in enumerate(self.groups):
            name = f"group{gi + 1}"
            if fam == "wrn":
                for blk in group:
                    h = blk(h)
                if name in self.spec.tap_points:
                    taps[name] = relu(h) if post else h
            else:
                for blk in group:
                    pre = blk(h)
                    h = relu(pre)
                if name in self.spec.tap_points:
                    taps[name] = h if post else pre
        if fam == "wrn":
            h = relu(self.final_bn(h))
        logits = self.fc(global_avg_pool(h))
        return logits, taps

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def build_model(spec: ModelSpec, dtype=np.float32, seed: int = 0) -> Model:
    return Model(spec, dtype=dtype, seed=seed)
