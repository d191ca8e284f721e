"""Network specs, parameters, and forward/backward for the three block
structures (Bi-Real, ResNet-style, plain).

A Bi-Real block is ``sign -> 1-bit conv -> BN -> + input``. The ResNet
style block runs two such conv/BN pairs before the shortcut add; the
plain block has no shortcut. Stage transitions use a real-valued 1x1
strided conv + BN on the shortcut. The stem conv and the classifier are
always real-valued.
"""

from __future__ import annotations

import copy
import enum
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ops
from .conv import (
    ConvGeometry,
    ShapeError,
    binconv2d,
    conv2d_cols,
    float_conv2d_backward,
    maxpool2d,
    maxpool2d_backward,
    pack_weight_rows,
)
from .ops import BatchNormParams, SurrogateKind
from .tensor import sign, sign_pack


class Variant(str, enum.Enum):
    BIREAL = "bireal"
    RESNET = "resnet"
    PLAIN = "plain"


class Mode(str, enum.Enum):
    BINARY_INFER = "binary_infer"
    BINARY_TRAIN = "binary_train"
    SURROGATE = "surrogate"
    PRETRAIN_CLIP = "pretrain_clip"
    PRETRAIN_RELU = "pretrain_relu"


class WeightUpdate(str, enum.Enum):
    ORIGINAL = "original_ste"
    MAGNITUDE_AWARE = "magnitude_aware"


class SpecError(ValueError):
    pass


class ModeError(RuntimeError):
    pass


# --- specs -----------------------------------------------------------------


@dataclass(frozen=True)
class StemSpec:
    channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    maxpool: bool = False


@dataclass(frozen=True)
class StageSpec:
    channels: int
    convs: int  # binarized convs in the stage, independent of variant
    stride: int = 1


@dataclass(frozen=True)
class BlockSpec:
    variant: Variant
    in_channels: int
    out_channels: int
    stride: int
    downsample: bool

    @property
    def n_convs(self) -> int:
        return 2 if self.variant is Variant.RESNET else 1

    @property
    def has_shortcut(self) -> bool:
        return self.variant is not Variant.PLAIN


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    stem: StemSpec
    stages: tuple[StageSpec, ...]
    variant: Variant = Variant.BIREAL
    kernel: int = 3
    binarized: bool = True

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "stages", tuple(self.stages))

    def with_variant(self, variant) -> "NetworkSpec":
        v = Variant(variant)
        return replace(self, variant=v, name=f"{self.name}:{v.value}" if v is not self.variant else self.name)

    def full_precision(self) -> "NetworkSpec":
        return replace(self, binarized=False)

    def with_input(self, h, w) -> "NetworkSpec":
        return replace(self, input_shape=(self.input_shape[0], h, w))

    def blocks(self) -> list[tuple[str, BlockSpec]]:
        out = []
        cin = self.stem.channels
        for si, st in enumerate(self.stages):
            if self.variant is Variant.RESNET:
                if st.convs % 2:
                    raise SpecError(f"stage {si}: resnet-style blocks need an even conv count")
                n = st.convs // 2
            else:
                n = st.convs
            for bi in range(n):
                stride = st.stride if bi == 0 else 1
                down = self.variant is not Variant.PLAIN and (stride != 1 or cin != st.channels)
                out.append((f"s{si}.b{bi}", BlockSpec(self.variant, cin, st.channels, stride, down)))
                cin = st.channels
        return out

    @property
    def feature_channels(self) -> int:
        return self.stages[-1].channels if self.stages else self.stem.channels

    def validate(self):
        if self.num_classes < 1:
            raise SpecError("num_classes must be >= 1")
        if min(self.input_shape) < 1:
            raise SpecError("input extents must be >= 1")
        if self.stem.channels < 1 or any(s.channels < 1 or s.convs < 0 or s.stride < 1 for s in self.stages):
            raise SpecError("channels must be >= 1, strides >= 1")
        try:
            layer_plan(self)
        except ShapeError as exc:
            raise SpecError(f"impossible stride chain: {exc}") from exc
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d) -> "NetworkSpec":
        d = dict(d)
        d["stem"] = StemSpec(**d["stem"])
        d["stages"] = tuple(StageSpec(**s) for s in d["stages"])
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d).validate()


def _resnet_like(name, convs):
    widths = (64, 128, 256, 512)
    return NetworkSpec(
        name=name,
        input_shape=(3, 224, 224),
        num_classes=1000,
        stem=StemSpec(64, kernel=7, stride=2, padding=3, maxpool=True),
        stages=tuple(StageSpec(w, c, 1 if i == 0 else 2) for i, (w, c) in enumerate(zip(widths, convs))),
    )


PRESETS = {
    "bireal18": _resnet_like("bireal18", (4, 4, 4, 4)),
    "bireal34": _resnet_like("bireal34", (6, 8, 12, 6)),
    "tiny": NetworkSpec(
        name="tiny",
        input_shape=(1, 28, 28),
        num_classes=10,
        stem=StemSpec(16, kernel=3, stride=2, padding=1),
        stages=(StageSpec(16, 2, 1), StageSpec(32, 2, 2), StageSpec(64, 2, 2)),
    ),
    # 12 binary convs: deep enough for the shortcut to matter
    "tiny-deep": NetworkSpec(
        name="tiny-deep",
        input_shape=(1, 28, 28),
        num_classes=10,
        stem=StemSpec(16, kernel=3, stride=2, padding=1),
        stages=(StageSpec(16, 4, 1), StageSpec(32, 4, 2), StageSpec(64, 4, 2)),
    ),
    "fig3": NetworkSpec(
        name="fig3",
        input_shape=(32, 14, 14),
        num_classes=10,
        stem=StemSpec(32, kernel=3, stride=1, padding=1),
        stages=(StageSpec(32, 2, 1),),
    ),
    "toy": NetworkSpec(
        name="toy",
        input_shape=(1, 6, 6),
        num_classes=3,
        stem=StemSpec(4, kernel=3, stride=1, padding=1),
        stages=(StageSpec(4, 1, 1), StageSpec(8, 1, 2)),
    ),
}


def get_preset(name: str, variant=None) -> NetworkSpec:
    try:
        spec = PRESETS[name]
    except KeyError:
        raise SpecError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return (spec.with_variant(variant) if variant is not None else spec).validate()


# --- layer plan ------------------------------------------------------------


@dataclass(frozen=True)
class LayerInfo:
    name: str
    kind: str  # "conv", "fc", "bn", "maxpool"
    binary: bool
    geometry: ConvGeometry | None
    in_hw: tuple[int, int]
    out_hw: tuple[int, int]
    channels: int = 0

    @property
    def n_params(self) -> int:
        if self.kind == "conv":
            g = self.geometry
            return g.out_channels * g.fan_in
        if self.kind == "fc":
            return self.geometry.out_channels * self.geometry.in_channels + self.geometry.out_channels
        if self.kind == "bn":
            return 2 * self.channels
        return 0

    @property
    def mults(self) -> int:
        """Multiplications of a conv/fc layer (output elements x fan-in)."""
        if self.kind == "conv":
            g = self.geometry
            return self.out_hw[0] * self.out_hw[1] * g.out_channels * g.fan_in
        if self.kind == "fc":
            return self.geometry.out_channels * self.geometry.in_channels
        return 0


def layer_plan(spec: NetworkSpec) -> list[LayerInfo]:
    c, h, w = spec.input_shape
    plan = []
    st = spec.stem
    g = ConvGeometry.square(c, st.channels, st.kernel, st.stride, st.padding)
    hw = g.output_hw(h, w)
    plan.append(LayerInfo("stem.conv", "conv", False, g, (h, w), hw))
    plan.append(LayerInfo("stem.bn", "bn", False, None, hw, hw, st.channels))
    if st.maxpool:
        pg = ConvGeometry.square(st.channels, st.channels, 3, 2, 1)
        nhw = pg.output_hw(*hw)
        plan.append(LayerInfo("stem.pool", "maxpool", False, pg, hw, nhw, st.channels))
        hw = nhw
    k = spec.kernel
    for name, b in spec.blocks():
        in_hw = hw
        cin = b.in_channels
        for i in range(b.n_convs):
            stride = b.stride if i == 0 else 1
            g = ConvGeometry.square(cin, b.out_channels, k, stride, k // 2)
            out_hw = g.output_hw(*hw)
            plan.append(LayerInfo(f"{name}.conv{i}", "conv", spec.binarized, g, hw, out_hw))
            plan.append(LayerInfo(f"{name}.bn{i}", "bn", False, None, out_hw, out_hw, b.out_channels))
            hw, cin = out_hw, b.out_channels
        if b.downsample:
            g = ConvGeometry.square(b.in_channels, b.out_channels, 1, b.stride, 0)
            dhw = g.output_hw(*in_hw)
            if dhw != hw:
                raise ShapeError(f"{name}: shortcut {dhw} does not match block output {hw}")
            plan.append(LayerInfo(f"{name}.down.conv", "conv", False, g, in_hw, dhw))
            plan.append(LayerInfo(f"{name}.down.bn", "bn", False, None, dhw, dhw, b.out_channels))
    g = ConvGeometry(spec.feature_channels, spec.num_classes, 1, 1)
    plan.append(LayerInfo("fc", "fc", False, g, (1, 1), (1, 1)))
    return plan


# --- parameters ------------------------------------------------------------


@dataclass
class NetParams:
    spec: NetworkSpec
    weights: dict[str, np.ndarray]
    bn: dict[str, BatchNormParams]
    frozen: set = field(default_factory=set)
    absorbed: bool = False

    @property
    def binary_layers(self) -> list[str]:
        return [l.name for l in layer_plan(self.spec) if l.kind == "conv" and l.binary]

    @property
    def dtype(self):
        return self.weights["fc.weight"].dtype

    def tensors(self) -> dict[str, np.ndarray]:
        """Every trainable tensor by name (BN as '<layer>.gamma'/'.beta')."""
        out = dict(self.weights)
        for name, bn in self.bn.items():
            out[f"{name}.gamma"] = bn.gamma
            out[f"{name}.beta"] = bn.beta
        return out

    def state(self) -> dict[str, np.ndarray]:
        """Every stored tensor, including BN running statistics."""
        out = self.tensors()
        for name, bn in self.bn.items():
            out[f"{name}.running_mean"] = bn.running_mean
            out[f"{name}.running_var"] = bn.running_var
        return out

    def copy(self) -> "NetParams":
        return copy.deepcopy(self)


def build(spec: NetworkSpec, seed=0, dtype=np.float32) -> NetParams:
    """Allocate parameters; conv weights Kaiming-normal, BN gamma=1, beta=0."""
    spec.validate()
    rng = np.random.default_rng(seed)
    weights, bns = {}, {}
    for layer in layer_plan(spec):
        if layer.kind == "conv":
            g = layer.geometry
            std = math.sqrt(2.0 / g.fan_in)
            weights[f"{layer.name}.weight"] = (rng.standard_normal(g.weight_shape) * std).astype(dtype)
        elif layer.kind == "bn":
            bns[layer.name] = BatchNormParams.create(layer.channels, dtype)
        elif layer.kind == "fc":
            g = layer.geometry
            std = math.sqrt(1.0 / g.in_channels)
            weights["fc.weight"] = (rng.standard_normal((g.out_channels, g.in_channels)) * std).astype(dtype)
            weights["fc.bias"] = np.zeros(g.out_channels, dtype)
    return NetParams(spec, weights, bns)


def count_params(spec: NetworkSpec) -> int:
    return sum(l.n_params for l in layer_plan(spec))


# --- forward / backward ----------------------------------------------------


class Tape:
    """Backward closures recorded during a forward pass, replayed in reverse."""

    def __init__(self):
        self.steps = []
        self.grads: dict[str, np.ndarray] = {}
        self.bn_caches: dict[str, dict] = {}

    def push(self, fn):
        self.steps.append(fn)

    def add_grad(self, name, g):
        if name in self.grads:
            self.grads[name] = self.grads[name] + g
        else:
            self.grads[name] = g

    def backward(self, grad_logits):
        g = grad_logits
        for fn in reversed(self.steps):
            g = fn(g)
        return self.grads


class _Runner:
    def __init__(self, params, mode, bn_mode, weight_update, act_backward, scale_scope, record):
        self.p = params
        self.mode = Mode(mode)
        self.bn_mode = bn_mode
        self.weight_update = WeightUpdate(weight_update)
        self.act_backward = SurrogateKind(act_backward)
        self.scope = scale_scope
        self.tape = Tape() if record else None
        if self.mode is Mode.BINARY_INFER and bn_mode != "eval":
            raise ModeError("binary_infer runs batchnorm in eval mode only")

    # each op returns (y, backward) where backward maps grad_y -> grad_x

    def conv_real(self, name, x, g):
        w = self.p.weights[f"{name}.weight"]
        y, cols = conv2d_cols(x, w, g, 0.0)

        def back(gy):
            gx, gw = float_conv2d_backward(gy, x, w, g, 0.0, cols)
            self.tape.add_grad(f"{name}.weight", gw)
            return gx

        return y, back

    def bn(self, name, x):
        params = self.p.bn[name]
        y, cache = ops.batchnorm_forward(x, params, self.bn_mode)
        if self.tape is not None:
            self.tape.bn_caches[name] = cache

        def back(gy):
            gx, gg, gb = ops.batchnorm_backward(gy, cache, params)
            self.tape.add_grad(f"{name}.gamma", gg)
            self.tape.add_grad(f"{name}.beta", gb)
            return gx

        return y, back

    def binary_unit(self, name, x, g):
        """Activation binarization followed by the 1-bit conv."""
        w_r = self.p.weights[f"{name}.weight"]
        m = self.mode
        if m is Mode.BINARY_INFER:
            bits = sign_pack(x)
            wb = sign_pack(w_r)
            y = binconv2d(bits, wb, g, w_rows=pack_weight_rows(wb)).astype(x.dtype)
            return y, None
        if m is Mode.BINARY_TRAIN:
            a = sign(x)
            act_back = lambda gy: ops.sign_backward(x, gy, self.act_backward)  # noqa: E731
        elif m is Mode.SURROGATE:
            a = ops.poly_forward(x)
            act_back = lambda gy: ops.poly_backward(x, gy)  # noqa: E731
        elif m is Mode.PRETRAIN_CLIP:
            a = ops.clip_forward(x)
            act_back = lambda gy: ops.clip_backward(x, gy)  # noqa: E731
        else:
            a = ops.relu_forward(x)
            act_back = lambda gy: ops.relu_backward(x, gy)  # noqa: E731
        pad_value = 0.0 if m is Mode.PRETRAIN_RELU else -1.0
        # weight
        magnitude = self.weight_update is WeightUpdate.MAGNITUDE_AWARE
        if m is Mode.BINARY_TRAIN:
            if magnitude:
                w = ops.magnitude_aware_binarize(w_r, self.scope)
                w_back = lambda gw: ops.magnitude_aware_backward(w_r, gw)  # noqa: E731
            else:
                w = sign(w_r)
                w_back = lambda gw: ops.original_ste_backward(w_r, gw)  # noqa: E731
        elif m is Mode.SURROGATE:
            if magnitude:
                w = ops.scaled_poly_weight(w_r, self.scope)
                w_back = lambda gw: ops.scaled_poly_weight_backward(w_r, gw, self.scope)  # noqa: E731
            else:
                w = ops.poly_forward(w_r)
                w_back = lambda gw: ops.poly_backward(w_r, gw)  # noqa: E731
        else:
            w = w_r
            w_back = lambda gw: gw  # noqa: E731
        y, cols = conv2d_cols(a, w, g, pad_value)

        def back(gy):
            ga, gw = float_conv2d_backward(gy, a, w, g, pad_value, cols)
            self.tape.add_grad(f"{name}.weight", w_back(gw))
            return act_back(ga)

        return y, back

    def run(self, x):
        spec = self.p.spec
        if tuple(x.shape[1:]) != spec.input_shape:
            raise ShapeError(f"input shape {tuple(x.shape[1:])} != spec input {spec.input_shape}")
        plan = {l.name: l for l in layer_plan(spec)}
        record = self.tape is not None

        def chain(*steps):
            def back(gy):
                for s in reversed(steps):
                    gy = s(gy)
                return gy

            return back

        # stem
        h, b1 = self.conv_real("stem.conv", x, plan["stem.conv"].geometry)
        h, b2 = self.bn("stem.bn", h)
        steps = [b1, b2]
        if spec.stem.maxpool:
            xin = h
            h, idx = maxpool2d(h, 3, 2, 1)
            steps.append(lambda gy, s=xin.shape, i=idx: maxpool2d_backward(gy, s, i, 3, 2, 1))
        if record:
            self.tape.push(chain(*steps))

        for name, blk in spec.blocks():
            xin = h
            inner = []
            for i in range(blk.n_convs):
                h, bc = self.binary_unit(f"{name}.conv{i}", h, plan[f"{name}.conv{i}"].geometry)
                h, bb = self.bn(f"{name}.bn{i}", h)
                inner += [bc, bb]
            if blk.has_shortcut:
                if blk.downsample:
                    sc, d1 = self.conv_real(f"{name}.down.conv", xin, plan[f"{name}.down.conv"].geometry)
                    sc, d2 = self.bn(f"{name}.down.bn", sc)
                    short_back = chain(d1, d2)
                else:
                    sc, short_back = xin, (lambda gy: gy)
                h = h + sc
                if record:
                    main_back = chain(*inner)
                    self.tape.push(lambda gy, mb=main_back, sb=short_back: mb(gy) + sb(gy))
            elif record:
                self.tape.push(chain(*inner))

        feat_in = h
        feat = h.mean(axis=(2, 3))
        wfc, bfc = self.p.weights["fc.weight"], self.p.weights["fc.bias"]
        logits = feat @ wfc.T + bfc
        if record:
            hw = feat_in.shape[2] * feat_in.shape[3]

            def head_back(gy):
                self.tape.add_grad("fc.weight", gy.T @ feat)
                self.tape.add_grad("fc.bias", gy.sum(axis=0))
                gf = gy @ wfc
                return np.broadcast_to((gf / hw)[:, :, None, None], feat_in.shape).copy()

            self.tape.push(head_back)
        return logits


def forward(
    params: NetParams,
    x,
    mode=Mode.BINARY_TRAIN,
    *,
    bn_mode="eval",
    weight_update=WeightUpdate.MAGNITUDE_AWARE,
    act_backward=SurrogateKind.PIECEWISE_POLY,
    scale_scope="kernel",
    record=False,
):
    """Run the network. Returns logits, or (logits, tape) with ``record``."""
    mode = Mode(mode)
    if mode is Mode.BINARY_INFER and not params.absorbed:
        raise ModeError("binary_infer needs a model whose BN has absorbed the weight scale")
    if mode is Mode.BINARY_INFER and record:
        raise ModeError("binary_infer is inference only")
    x = np.asarray(x, dtype=params.dtype)
    r = _Runner(params, mode, bn_mode, weight_update, act_backward, scale_scope, record)
    logits = r.run(x)
    return (logits, r.tape) if record else logits


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n


def loss_and_grads(params, x, labels, mode, **kw):
    """Forward with batch-statistics BN, loss, and full backward.

    Returns (loss, grads, tape); running statistics are not touched. The
    tape keeps the logits as ``tape.logits``.
    """
    kw.setdefault("bn_mode", "train")
    logits, tape = forward(params, x, mode, record=True, **kw)
    tape.logits = logits
    loss, g = softmax_cross_entropy(logits, labels)
    grads = tape.backward(g.astype(logits.dtype))
    return loss, grads, tape


# --- representational capability -------------------------------------------


@dataclass(frozen=True)
class Capability:
    tensor: str
    values_per_entry: int
    num_entries: int

    @property
    def log2(self) -> float:
        return self.num_entries * math.log2(self.values_per_entry)

    @property
    def log2_exact(self):
        """Exact integer when values_per_entry is a power of two, else None."""
        v = self.values_per_entry
        if v & (v - 1) == 0:
            return self.num_entries * (v.bit_length() - 1)
        return None


def capability_report(spec: NetworkSpec) -> list[Capability]:
    """Distinct-value counts for the tensors inside each binary block.

    Sign output: 2 values per entry. 1-bit conv output over a fan-in of n:
    n+1 values (BN is one-to-one, so it keeps the count). After a shortcut
    add: (n+1)^2.
    """
    plan = {l.name: l for l in layer_plan(spec)}
    rows = []
    for name, blk in spec.blocks():
        n_conv = 0
        for i in range(blk.n_convs):
            conv = plan[f"{name}.conv{i}"]
            g = conv.geometry
            in_entries = g.in_channels * conv.in_hw[0] * conv.in_hw[1]
            out_entries = g.out_channels * conv.out_hw[0] * conv.out_hw[1]
            n_conv = g.fan_in + 1
            rows.append(Capability(f"{name}.sign{i}", 2, in_entries))
            rows.append(Capability(f"{name}.conv{i}", n_conv, out_entries))
            rows.append(Capability(f"{name}.bn{i}", n_conv, out_entries))
        if blk.has_shortcut:
            rows.append(Capability(f"{name}.add", n_conv * n_conv, out_entries))
    return rows
