"""Network construction from plans: segmenter, grade classifier and JCS."""
from __future__ import annotations

import numpy as np

from .layers import (
    ACSConv, BatchNorm, Conv3d, ConvTranspose3d, Dropout, GlobalAvgPool, InstanceNorm,
    LeakyReLU, Linear, Module, SEBlock, Sequential,
)
from .plan import LayerSpec, NetworkPlan
from .transfer import kaiming_init


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator used for every seeded draw in the package."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


def make_layer(spec: LayerSpec, dtype=np.float32) -> Module:
    if spec.kind == "conv3d":
        return Conv3d(spec.in_ch, spec.out_ch, spec.kernel, spec.stride, bias=spec.bias,
                      dtype=dtype)
    if spec.kind == "acs_conv":
        return ACSConv(spec.in_ch, spec.out_ch, spec.kernel[0], spec.stride, bias=spec.bias,
                       dtype=dtype)
    if spec.kind == "conv_transpose3d":
        return ConvTranspose3d(spec.in_ch, spec.out_ch, spec.kernel, spec.stride,
                               bias=spec.bias, dtype=dtype)
    if spec.kind == "norm":
        cls = BatchNorm if spec.norm_kind == "batch" else InstanceNorm
        return cls(spec.out_ch, dtype=dtype)
    if spec.kind == "activation":
        return LeakyReLU(spec.activation_slope)
    raise ValueError(f"layer kind {spec.kind!r} cannot appear inside a stage")


def _crop_to(x: np.ndarray, spatial) -> np.ndarray:
    if x.shape[2:] == tuple(spatial):
        return x
    return x[(slice(None), slice(None)) + tuple(slice(0, n) for n in spatial)]


def _pad_to(g: np.ndarray, spatial) -> np.ndarray:
    if g.shape[2:] == tuple(spatial):
        return g
    out = np.zeros(g.shape[:2] + tuple(spatial), dtype=g.dtype)
    out[(slice(None), slice(None)) + tuple(slice(0, n) for n in g.shape[2:])] = g
    return out


def _batched(x: np.ndarray, in_channels: int):
    if x.ndim == 4:
        x, squeeze = x[None], True
    elif x.ndim == 5:
        squeeze = False
    else:
        raise ValueError(f"expected (C, D, H, W) or (N, C, D, H, W) input, got {x.shape}")
    if x.shape[1] != in_channels:
        raise ValueError(f"expected {in_channels} input channels, got {x.shape[1]}")
    return x, squeeze


def init_parameters(net: Module, seed, slope: float = 0.01) -> None:
    """Kaiming-normal weights, zero biases, unit norm gains (the layer defaults)."""
    rng = make_rng(seed)
    for _, p in net.named_parameters():
        if p.data.ndim >= 2:
            p.data = kaiming_init(p.data.shape, rng, slope).astype(p.data.dtype)


def _encoder(plan: NetworkPlan, dtype) -> list[Sequential]:
    return [Sequential([make_layer(s, dtype) for s in stage.layers])
            for stage in plan.encoder_stages]


def _encode(stages, x, train):
    feats = []
    for stage in stages:
        x = stage.forward(x, train)
        feats.append(x)
    return feats


def _encode_backward(stages, grads):
    g = grads[-1]
    for s in range(len(stages) - 1, -1, -1):
        g = stages[s].backward(g)
        if s > 0:
            g = g + grads[s - 1]
    return g


class DecoderStage(Module):
    def __init__(self, stage, dtype=np.float32):
        self.skip = stage.skip
        self.upsample = make_layer(stage.upsample, dtype)
        self.layers = [make_layer(s, dtype) for s in stage.layers]

    def forward(self, deeper, skip, train=False):
        up = self.upsample.forward(deeper, train)
        self._up_shape = up.shape[2:]
        x = np.concatenate([_crop_to(up, skip.shape[2:]), skip], axis=1)
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        n_up = self.upsample.weight.shape[1]
        g_up, g_skip = g[:, :n_up], g[:, n_up:]
        return self.upsample.backward(_pad_to(g_up, self._up_shape)), g_skip


class UNet(Module):
    """Six-stage encoder-decoder producing region logits."""

    def __init__(self, plan: NetworkPlan, dtype=np.float32):
        self.plan = plan
        self.encoder = _encoder(plan, dtype)
        self.decoder = [DecoderStage(s, dtype) for s in plan.decoder_stages]
        self.head = make_layer(plan.head, dtype)

    def encode(self, x, train=False):
        return _encode(self.encoder, x, train)

    def decode(self, feats, train=False):
        x = feats[-1]
        for stage in self.decoder:
            x = stage.forward(x, feats[stage.skip], train)
        return self.head.forward(x, train)

    def decode_backward(self, g):
        g = self.head.backward(g)
        grads = [None] * len(self.encoder)
        for stage in reversed(self.decoder):
            g, g_skip = stage.backward(g)
            grads[stage.skip] = g_skip
        grads[-1] = g
        return grads

    def forward(self, x, train=False, return_features=False):
        x, squeeze = _batched(x, self.plan.in_channels)
        feats = self.encode(x, train)
        logits = self.decode(feats, train)
        if squeeze:
            logits = logits[0]
            feats = [f[0] for f in feats]
        return (logits, feats) if return_features else logits

    def backward(self, g_logits):
        if g_logits.ndim == 4:
            return self.backward(g_logits[None])[0]
        return _encode_backward(self.encoder, self.decode_backward(g_logits))


class ClassifierNet(Module):
    """Encoder -> global average pool -> fc -> LeakyReLU -> dropout -> fc (one logit)."""

    def __init__(self, plan: NetworkPlan, hidden: int | None = None,
                 dropout_rate: float | None = None, dtype=np.float32):
        self.plan = plan
        hidden = plan.classifier_hidden if hidden is None else hidden
        rate = plan.classifier_dropout if dropout_rate is None else dropout_rate
        self.encoder = _encoder(plan, dtype)
        self.pool = GlobalAvgPool()
        self.fc1 = Linear(plan.channels[-1], hidden, dtype=dtype)
        self.act = LeakyReLU(plan.activation_slope)
        self.drop = Dropout(rate)
        self.fc2 = Linear(hidden, 1, dtype=dtype)

    def head_modules(self):
        return [self.pool, self.fc1, self.act, self.drop, self.fc2]

    def forward(self, x, train=False, rng=None, return_features=False):
        x, squeeze = _batched(x, self.plan.in_channels)
        self.drop.rng = rng
        feats = _encode(self.encoder, x, train)
        h = feats[-1]
        for m in self.head_modules():
            h = m.forward(h, train)
        logits = h[:, 0]
        if squeeze:
            logits = logits[0]
            feats = [f[0] for f in feats]
        return (logits, feats) if return_features else logits

    def backward(self, g_logits):
        g = np.asarray(g_logits).reshape(-1, 1)
        for m in reversed(self.head_modules()):
            g = m.backward(g)
        grads = [np.zeros(1, dtype=g.dtype)] * (len(self.encoder) - 1) + [g]
        return _encode_backward(self.encoder, grads)


class Adapter(Module):
    """Fuse classifier and segmenter stage features: concat -> SE -> 3x3 conv."""

    def __init__(self, cls_ch: int, seg_ch: int, conv_kind: str, se_reduction: int = 16,
                 dtype=np.float32):
        self.cls_ch = cls_ch
        self.se = SEBlock(cls_ch + seg_ch, se_reduction, dtype=dtype)
        if conv_kind == "acs":
            self.conv = ACSConv(cls_ch + seg_ch, seg_ch, 3, bias=True, dtype=dtype)
        else:
            self.conv = Conv3d(cls_ch + seg_ch, seg_ch, 3, bias=True, dtype=dtype)

    def forward(self, cls_feat, seg_feat, train=False):
        if cls_feat.shape[2:] != seg_feat.shape[2:]:
            raise ValueError(
                f"adapter inputs differ spatially: {cls_feat.shape[2:]} vs {seg_feat.shape[2:]}")
        x = np.concatenate([cls_feat, seg_feat], axis=1)
        return self.conv.forward(self.se.forward(x, train), train)

    def backward(self, g):
        g = self.se.backward(self.conv.backward(g))
        return g[:, self.cls_ch:]


class ClassifierBranch(Module):
    def __init__(self, encoder: list[Sequential]):
        self.encoder = encoder


class JCSNet(Module):
    """Segmenter whose stage features are fused with a frozen classifier encoder.

    Each of the six adapters fuses one stage; stages 0-4 feed the decoder skip
    connections and stage 5 feeds the bottleneck input of the decoder. The
    segmentation encoder's own stage-to-stage path is untouched.
    """

    def __init__(self, plan: NetworkPlan, classifier_encoder: list[Sequential],
                 dtype=np.float32):
        if len(classifier_encoder) != len(plan.encoder_stages):
            raise ValueError(
                f"classifier has {len(classifier_encoder)} stages, plan has "
                f"{len(plan.encoder_stages)}")
        self.plan = plan
        self.classifier = ClassifierBranch(classifier_encoder)
        self.classifier.freeze()
        self.segmenter = UNet(plan, dtype)
        cls_ch = [stage.layers[_last_conv(stage)].weight.shape[0] for stage in classifier_encoder]
        self.adapters = [Adapter(c, s, plan.conv_kind, plan.se_reduction, dtype)
                         for c, s in zip(cls_ch, plan.channels)]

    def forward(self, x, train=False, return_features=False):
        x, squeeze = _batched(x, self.plan.in_channels)
        cls_feats = _encode(self.classifier.encoder, x, False)
        for stage in self.classifier.encoder:
            stage.clear_cache()
        seg_feats = self.segmenter.encode(x, train)
        fused = [a.forward(c, s, train) for a, c, s in zip(self.adapters, cls_feats, seg_feats)]
        logits = self.segmenter.decode(fused, train)
        if squeeze:
            logits = logits[0]
            seg_feats = [f[0] for f in seg_feats]
        return (logits, seg_feats) if return_features else logits

    def backward(self, g_logits):
        if g_logits.ndim == 4:
            return self.backward(g_logits[None])[0]
        g_fused = self.segmenter.decode_backward(g_logits)
        g_seg = [a.backward(g) for a, g in zip(self.adapters, g_fused)]
        return _encode_backward(self.segmenter.encoder, g_seg)


def _last_conv(stage: Sequential) -> int:
    return max(i for i, m in enumerate(stage.layers) if hasattr(m, "weight") and m.weight.data.ndim > 2)


def build(plan: NetworkPlan, seed=0, dtype=np.float32):
    """Instantiate ``plan`` with Kaiming-normal weights.

    A ``jcs`` plan gets a freshly initialized (and frozen) classifier branch;
    use :func:`build_jcs` to plug in a trained classifier.
    """
    if plan.variant == "jcs":
        classifier = build_classifier(plan, seed=seed, dtype=dtype)
        return build_jcs(plan, classifier, seed=seed, dtype=dtype)
    net = UNet(plan, dtype)
    init_parameters(net, seed, plan.activation_slope)
    return net


def build_classifier(plan: NetworkPlan, hidden: int | None = None,
                     dropout_rate: float | None = None, seed=0,
                     dtype=np.float32) -> ClassifierNet:
    net = ClassifierNet(plan, hidden, dropout_rate, dtype)
    init_parameters(net, seed, plan.activation_slope)
    return net


def build_jcs(plan: NetworkPlan, classifier: ClassifierNet, seed=0,
              dtype=np.float32) -> JCSNet:
    """Segmenter + adapters around ``classifier``'s encoder, which becomes frozen.

    The classifier's encoder arrays are shared, not copied.
    """
    net = JCSNet(plan, classifier.encoder, dtype)
    rng = make_rng(seed)
    for m in [net.segmenter] + net.adapters:
        init_parameters(m, rng, plan.activation_slope)
    return net


def count_parameters(net: Module, trainable_only: bool = False) -> int:
    return sum(p.size for p in net.parameters() if not (trainable_only and p.frozen))
