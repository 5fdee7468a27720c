"""Declarative network plans and their plan-file format.

A plan lists every layer of the encoder stages, the decoder stages and the
segmentation head. Plans serialize to JSON with a fixed field order, so a
plan file is both human-readable and usable as a test golden.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

DEFAULT_CHANNELS = (32, 64, 128, 256, 320, 320)
VARIANTS = ("baseline", "acs", "jcs")
CONV_KINDS = ("3d", "acs")
NORM_KINDS = ("instance", "batch")
LAYER_KINDS = ("conv3d", "acs_conv", "conv_transpose3d", "norm", "activation", "pool",
               "linear", "dropout", "se_block", "adapter")
PLAN_FORMAT = "acsseg-plan/1"


@dataclass
class LayerSpec:
    kind: str
    in_ch: int
    out_ch: int
    kernel: tuple[int, ...] = ()
    stride: tuple[int, ...] = ()
    norm_kind: str | None = None
    activation_slope: float | None = None
    bias: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.in_ch < 1 or self.out_ch < 1:
            raise ValueError(f"{self.kind}: channel counts must be >= 1")
        self.kernel = tuple(self.kernel)
        self.stride = tuple(self.stride)
        if self.kind in ("conv3d", "acs_conv") and any(k % 2 == 0 for k in self.kernel):
            raise ValueError(f"{self.kind}: same-padding needs odd kernel extents, got {self.kernel}")

    @property
    def is_conv(self) -> bool:
        return self.kind in ("conv3d", "acs_conv", "conv_transpose3d")

    def param_count(self) -> int:
        if self.kind in ("conv3d", "acs_conv", "conv_transpose3d"):
            n = self.in_ch * self.out_ch
            for k in self.kernel:
                n *= k
            return n + (self.out_ch if self.bias else 0)
        if self.kind == "norm":
            return 2 * self.out_ch
        if self.kind == "linear":
            return self.in_ch * self.out_ch + (self.out_ch if self.bias else 0)
        return 0


@dataclass
class EncoderStage:
    channels: int
    stride: int
    layers: list[LayerSpec]


@dataclass
class DecoderStage:
    channels: int
    skip: int  # encoder stage whose output is concatenated
    upsample: LayerSpec
    layers: list[LayerSpec]


@dataclass
class NetworkPlan:
    variant: str
    conv_kind: str
    norm_kind: str
    in_channels: int
    num_classes: int
    activation_slope: float
    encoder_stages: list[EncoderStage]
    decoder_stages: list[DecoderStage]
    head: LayerSpec
    classifier_hidden: int = 128
    classifier_dropout: float = 0.5
    se_reduction: int = 16
    format: str = field(default=PLAN_FORMAT)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.conv_kind not in CONV_KINDS:
            raise ValueError(f"unknown conv_kind {self.conv_kind!r}")
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"unknown norm_kind {self.norm_kind!r}")
        if len(self.encoder_stages) != 6:
            raise ValueError(f"plan needs exactly 6 encoder stages, got {len(self.encoder_stages)}")
        chans = self.channels
        if any(b < a for a, b in zip(chans, chans[1:])):
            raise ValueError(f"stage channels must be non-decreasing, got {chans}")
        for d in self.decoder_stages:
            if d.channels != self.encoder_stages[d.skip].channels:
                raise ValueError(f"decoder stage for skip {d.skip} has mismatched channels")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(s.channels for s in self.encoder_stages)

    def conv_specs(self, include_decoder: bool = True) -> Iterator[tuple[str, LayerSpec]]:
        """Convolution specs in depth order with their layer paths."""
        for i, stage in enumerate(self.encoder_stages):
            for j, spec in enumerate(stage.layers):
                if spec.is_conv:
                    yield f"encoder.{i}.layers.{j}", spec
        if include_decoder:
            for i, stage in enumerate(self.decoder_stages):
                yield f"decoder.{i}.upsample", stage.upsample
                for j, spec in enumerate(stage.layers):
                    if spec.is_conv:
                        yield f"decoder.{i}.layers.{j}", spec
            yield "head", self.head

    def encoder_param_count(self) -> int:
        return sum(spec.param_count() for s in self.encoder_stages for spec in s.layers)

    def segmenter_param_count(self) -> int:
        n = self.encoder_param_count()
        for d in self.decoder_stages:
            n += d.upsample.param_count() + sum(spec.param_count() for spec in d.layers)
        return n + self.head.param_count()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkPlan":
        d = dict(d)
        fmt = d.pop("format", PLAN_FORMAT)
        if fmt != PLAN_FORMAT:
            raise ValueError(f"unsupported plan format {fmt!r}")
        d["encoder_stages"] = [
            EncoderStage(s["channels"], s["stride"], [LayerSpec(**l) for l in s["layers"]])
            for s in d["encoder_stages"]
        ]
        d["decoder_stages"] = [
            DecoderStage(s["channels"], s["skip"], LayerSpec(**s["upsample"]),
                         [LayerSpec(**l) for l in s["layers"]])
            for s in d["decoder_stages"]
        ]
        d["head"] = LayerSpec(**d["head"])
        return cls(**d)


def _conv(conv_kind: str, in_ch: int, out_ch: int, stride: int = 1) -> LayerSpec:
    if conv_kind == "acs":
        return LayerSpec("acs_conv", in_ch, out_ch, (3, 3), (stride, stride))
    return LayerSpec("conv3d", in_ch, out_ch, (3, 3, 3), (stride,) * 3)


def _conv_norm_act(conv_kind, in_ch, out_ch, norm_kind, slope, stride=1) -> list[LayerSpec]:
    return [
        _conv(conv_kind, in_ch, out_ch, stride),
        LayerSpec("norm", out_ch, out_ch, norm_kind=norm_kind),
        LayerSpec("activation", out_ch, out_ch, activation_slope=slope),
    ]


def default_plan(variant: str = "baseline", conv_kind: str | None = None,
                 norm_kind: str = "instance", channels=DEFAULT_CHANNELS,
                 in_channels: int = 4, num_classes: int = 3, slope: float = 0.01,
                 classifier_hidden: int = 128, classifier_dropout: float = 0.5,
                 se_reduction: int = 16) -> NetworkPlan:
    """Six-stage encoder-decoder plan.

    3D plans downsample with a stride-2 first conv in each stage. ACS plans
    keep every 3x3 layer at stride 1 and downsample with a stride-2 1x1x1
    projection in front of the stage, so all k=3 kernels stay 2D-loadable.
    """
    if conv_kind is None:
        conv_kind = "acs" if variant == "acs" else "3d"
    channels = tuple(int(c) for c in channels)
    enc = []
    prev = in_channels
    for s, ch in enumerate(channels):
        stride = 1 if s == 0 else 2
        layers: list[LayerSpec] = []
        if conv_kind == "acs":
            if stride > 1:
                layers.append(LayerSpec("conv3d", prev, prev, (1, 1, 1), (stride,) * 3))
            layers += _conv_norm_act("acs", prev, ch, norm_kind, slope)
        else:
            layers += _conv_norm_act("3d", prev, ch, norm_kind, slope, stride)
        layers += _conv_norm_act(conv_kind, ch, ch, norm_kind, slope)
        enc.append(EncoderStage(ch, stride, layers))
        prev = ch
    dec = []
    for s in range(len(channels) - 2, -1, -1):
        ch, deeper = channels[s], channels[s + 1]
        up = LayerSpec("conv_transpose3d", deeper, ch, (2, 2, 2), (2, 2, 2))
        layers = (_conv_norm_act(conv_kind, 2 * ch, ch, norm_kind, slope)
                  + _conv_norm_act(conv_kind, ch, ch, norm_kind, slope))
        dec.append(DecoderStage(ch, s, up, layers))
    head = LayerSpec("conv3d", channels[0], num_classes, (1, 1, 1), (1, 1, 1), bias=True)
    return NetworkPlan(variant, conv_kind, norm_kind, in_channels, num_classes, slope,
                       enc, dec, head, classifier_hidden, classifier_dropout, se_reduction)


def classifier_head_param_count(plan: NetworkPlan) -> int:
    c, h = plan.channels[-1], plan.classifier_hidden
    return c * h + h + h + 1


def adapter_param_count(plan: NetworkPlan) -> int:
    """Parameters of the six fusion adapters (SE block + 3x3 conv with bias)."""
    total = 0
    k = 9 if plan.conv_kind == "acs" else 27
    for c in plan.channels:
        cc = 2 * c
        hidden = max(cc // plan.se_reduction, 1)
        total += cc * hidden + hidden + hidden * cc + cc
        total += cc * c * k + c
    return total


def jcs_param_count(plan: NetworkPlan, trainable_only: bool = False) -> int:
    n = plan.segmenter_param_count() + adapter_param_count(plan)
    return n if trainable_only else n + plan.encoder_param_count()


def save_plan(plan: NetworkPlan, path) -> None:
    Path(path).write_text(json.dumps(plan.to_dict(), indent=2) + "\n")


def load_plan(path) -> NetworkPlan:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not a valid plan file ({exc})") from exc
    try:
        return NetworkPlan.from_dict(data)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed plan ({exc})") from exc
