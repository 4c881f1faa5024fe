"""Layer and network types: backbone construction, model surgery, freezing.

Networks are linear chains of named layers over named parameters. The
builder lays out VGG-style conv blocks ((conv 3x3 pad 1 + relu) x count,
then 2x2/2 max pool), optionally topped with the classic flatten/dense
stack or with the small grafted classification head.
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import (
    InvalidHyperparameterError,
    InvalidProfileError,
    InvalidRateError,
    ShapeMismatchError,
    ShapeUnderflowError,
    UnknownLayerError,
)

PARAM_KINDS = ("conv", "pointwise_dense", "dense")


@dataclass
class LayerSpec:
    kind: str  # conv | maxpool | relu | pointwise_dense | global_avg_pool | dropout | flatten | dense | softmax
    name: str
    filters: int | None = None
    kernel: int | None = None
    stride: int | None = None
    pad: int | None = None
    rate: float | None = None
    units: int | None = None


@dataclass
class ArchProfile:
    """Backbone recipe. The default matches the literal block listing
    (2,2,4,4,5 convolutions); canonical VGG19 is (2,2,4,4,4) if wanted."""

    input_shape: tuple = (224, 224, 3)
    block_conv_counts: tuple = (2, 2, 4, 4, 5)
    block_filters: tuple = (64, 128, 256, 512, 512)
    head: str = "none"  # none | imagenet_top | paper_head
    width_divisor: int = 1

    def validate(self):
        if len(self.block_conv_counts) != len(self.block_filters):
            raise InvalidProfileError(
                "block_conv_counts and block_filters must have equal length"
            )
        if len(self.input_shape) != 3 or any(e < 1 for e in self.input_shape):
            raise InvalidProfileError(f"bad input_shape {self.input_shape}")
        if self.width_divisor < 1:
            raise InvalidProfileError("width_divisor must be positive")
        for f in self.block_filters:
            if f % self.width_divisor:
                raise InvalidProfileError(
                    f"width_divisor {self.width_divisor} does not divide filter count {f}"
                )
        if any(c < 1 for c in self.block_conv_counts):
            raise InvalidProfileError("every block needs at least one conv layer")
        if self.head not in ("none", "imagenet_top", "paper_head"):
            raise InvalidProfileError(f"unknown head {self.head!r}")

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "block_conv_counts": list(self.block_conv_counts),
            "block_filters": list(self.block_filters),
            "head": self.head,
            "width_divisor": self.width_divisor,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            input_shape=tuple(d["input_shape"]),
            block_conv_counts=tuple(d["block_conv_counts"]),
            block_filters=tuple(d["block_filters"]),
            head=d.get("head", "none"),
            width_divisor=int(d.get("width_divisor", 1)),
        )


@dataclass
class Network:
    layers: list = field(default_factory=list)
    params: dict = field(default_factory=dict)  # name -> Tensor
    trainable: dict = field(default_factory=dict)  # name -> bool
    input_shape: tuple = ()
    dtype: np.dtype = np.float32

    def output_shape(self):
        return infer_shapes(self.layers, self.input_shape)[-1] if self.layers else self.input_shape

    def layer_names(self):
        return [l.name for l in self.layers]


def _check_unique_names(layers):
    seen = set()
    for layer in layers:
        if layer.name in seen:
            raise InvalidProfileError(f"duplicate layer name {layer.name!r}")
        seen.add(layer.name)


def infer_shapes(layers, input_shape):
    """Static per-layer output shapes; raises where a layer cannot apply."""
    shapes = []
    cur = tuple(input_shape)
    for layer in layers:
        k = layer.kind
        if k == "conv":
            if len(cur) != 3:
                raise ShapeMismatchError(f"{layer.name}: conv needs a spatial map, got {cur}")
            h, w, _ = cur
            kk, s, p = layer.kernel, layer.stride, layer.pad
            if h + 2 * p < kk or w + 2 * p < kk:
                raise ShapeUnderflowError(f"{layer.name}: {h}x{w} too small for {kk}x{kk} conv")
            cur = ((h + 2 * p - kk) // s + 1, (w + 2 * p - kk) // s + 1, layer.filters)
        elif k == "maxpool":
            h, w, c = cur
            kk, s = layer.kernel, layer.stride
            if h < kk or w < kk:
                raise ShapeUnderflowError(f"{layer.name}: {h}x{w} too small for {kk}x{kk} pool")
            cur = ((h - kk) // s + 1, (w - kk) // s + 1, c)
        elif k in ("relu", "dropout", "softmax"):
            pass
        elif k in ("pointwise_dense", "dense"):
            cur = cur[:-1] + (layer.units,)
        elif k == "global_avg_pool":
            if len(cur) != 3:
                raise ShapeMismatchError(f"{layer.name}: GAP needs a spatial map, got {cur}")
            cur = (cur[2],)
        elif k == "flatten":
            cur = (int(np.prod(cur)),)
        else:
            raise InvalidHyperparameterError(f"unknown layer kind {k!r}")
        shapes.append(cur)
    return shapes


def _fan_uniform(rng, shape, fan_in, dtype):
    """Uniform init with limit sqrt(6 / fan_in): unit forward gain through a
    relu layer. Gentler fan-averaged limits leave a 17-conv stack emitting
    ~1e-3-scale logits, where the pinned optimizers cannot start moving."""
    limit = np.sqrt(6.0 / fan_in)
    gen = np.float64 if np.dtype(dtype) == np.float64 else np.float32
    u = rng.random(shape, dtype=gen)  # native dtype: no float64 transient on big layers
    return ((u * 2 - 1) * gen(limit)).astype(dtype, copy=False)


def _init_params(layers, input_shape, rng, dtype):
    """Fan-scaled uniform weights, zero biases.

    Conv fan_in counts only taps that can land on real pixels
    (min(k, H) * min(k, W) * Cin): a 5x5 kernel over a 1x1 map touches one
    column of data, and sizing the limit for 25 columns starves the head."""
    dtype = np.dtype(dtype)
    shapes = infer_shapes(layers, input_shape)
    params = {}
    prev = tuple(input_shape)
    softmax_feeders = {
        layers[i].name for i in range(len(layers) - 1) if layers[i + 1].kind == "softmax"
    }
    for layer, out_shape in zip(layers, shapes):
        if layer.kind == "conv":
            k, cin, cout = layer.kernel, prev[2], layer.filters
            support = min(k, prev[0]) * min(k, prev[1])
            w = _fan_uniform(rng, (k, k, cin, cout), support * cin, dtype)
            params[f"{layer.name}/w"] = T.Tensor(
                np.asarray(w, dtype=dtype), name=f"{layer.name}/w", trainable=True
            )
            params[f"{layer.name}/b"] = T.Tensor(
                np.zeros(cout, dtype=dtype), name=f"{layer.name}/b", trainable=True
            )
        elif layer.kind in ("pointwise_dense", "dense"):
            # dense layers are not all relu-followed; the fan-averaged limit
            # keeps their initial outputs calm
            cin, cout = prev[-1], layer.units
            w = _fan_uniform(rng, (cin, cout), (cin + cout) / 2, dtype)
            if layer.name in softmax_feeders:
                # near-zero initial logits: the first gradients then point at
                # class structure instead of at shrinking confident noise,
                # which otherwise traps training in a uniform-output basin
                w = w * dtype.type(0.05)
            params[f"{layer.name}/w"] = T.Tensor(
                np.asarray(w, dtype=dtype), name=f"{layer.name}/w", trainable=True
            )
            params[f"{layer.name}/b"] = T.Tensor(
                np.zeros(cout, dtype=dtype), name=f"{layer.name}/b", trainable=True
            )
        prev = out_shape
    return params


def _head_layers(prefix, num_classes):
    """The grafted head: 5-filter 5x5 conv, pointwise 128, GAP, dropout 0.3,
    classifier dense, softmax."""
    return [
        LayerSpec("conv", f"{prefix}conv", filters=5, kernel=5, stride=1, pad=2),
        LayerSpec("relu", f"{prefix}conv_relu"),
        LayerSpec("pointwise_dense", f"{prefix}dense", units=128),
        LayerSpec("global_avg_pool", f"{prefix}gap"),
        LayerSpec("dropout", f"{prefix}dropout", rate=0.3),
        LayerSpec("dense", f"{prefix}out", units=num_classes),
        LayerSpec("softmax", f"{prefix}softmax"),
    ]


def build_backbone(profile, seed=0, dtype=np.float32):
    """Build the block stack described by the profile, plus its head.

    head='imagenet_top' appends flatten + 4096/4096/1000 dense stack;
    head='paper_head' appends the 2-class grafted head; head='none' stops
    at the final pool.
    """
    profile.validate()
    layers = []
    for bi, (count, filters) in enumerate(
        zip(profile.block_conv_counts, profile.block_filters), start=1
    ):
        eff = filters // profile.width_divisor
        if eff < 1:
            raise InvalidProfileError(f"block {bi}: width_divisor leaves no filters")
        for j in range(1, count + 1):
            layers.append(
                LayerSpec("conv", f"block{bi}_conv{j}", filters=eff, kernel=3, stride=1, pad=1)
            )
            layers.append(LayerSpec("relu", f"block{bi}_relu{j}"))
        layers.append(LayerSpec("maxpool", f"block{bi}_pool", kernel=2, stride=2))

    if profile.head == "imagenet_top":
        layers += [
            LayerSpec("flatten", "flatten"),
            LayerSpec("dense", "fc1", units=4096),
            LayerSpec("relu", "fc1_relu"),
            LayerSpec("dense", "fc2", units=4096),
            LayerSpec("relu", "fc2_relu"),
            LayerSpec("dense", "predictions", units=1000),
            LayerSpec("softmax", "predictions_softmax"),
        ]
    elif profile.head == "paper_head":
        layers += _head_layers("head_", 2)

    _check_unique_names(layers)
    infer_shapes(layers, profile.input_shape)  # build-time shape check
    rng = np.random.default_rng(seed)
    params = _init_params(layers, profile.input_shape, rng, dtype)
    return Network(
        layers=layers,
        params=params,
        trainable={k: True for k in params},
        input_shape=tuple(profile.input_shape),
        dtype=np.dtype(dtype),
    )


def truncate_top(net):
    """Drop every layer after the last max pool (and its parameters).

    Idempotent; returns a new Network sharing the surviving parameter
    tensors with the input.
    """
    pool_idx = max(
        (i for i, l in enumerate(net.layers) if l.kind == "maxpool"), default=None
    )
    if pool_idx is None:
        kept = list(net.layers)
    else:
        kept = net.layers[: pool_idx + 1]
    names = {f"{l.name}/{s}" for l in kept if l.kind in PARAM_KINDS for s in ("w", "b")}
    params = {k: v for k, v in net.params.items() if k in names}
    return Network(
        layers=kept,
        params=params,
        trainable={k: net.trainable[k] for k in params},
        input_shape=net.input_shape,
        dtype=net.dtype,
    )


def graft_head(net, num_classes, seed):
    """Append the small classification head after the current output.

    The feature map feeding the head must be spatial (rank 3). New head
    parameters are Glorot-initialized from the seed and trainable.
    """
    out_shape = net.output_shape()
    if len(out_shape) != 3:
        raise ShapeMismatchError(
            f"graft_head needs a spatial feature map, network ends at {out_shape}"
        )
    head = _head_layers("head_", num_classes)
    layers = list(net.layers) + head
    _check_unique_names(layers)
    infer_shapes(layers, net.input_shape)
    rng = np.random.default_rng(seed)
    head_params = _init_params(head, out_shape, rng, net.dtype)
    params = dict(net.params)
    params.update(head_params)
    trainable = dict(net.trainable)
    trainable.update({k: True for k in head_params})
    return Network(
        layers=layers,
        params=params,
        trainable=trainable,
        input_shape=net.input_shape,
        dtype=net.dtype,
    )


def set_trainable(net, name_pattern, flag):
    """Set the trainable flag on every parameter matching the glob; returns
    the match count (zero matches is fine)."""
    count = 0
    for name, t in net.params.items():
        if fnmatch.fnmatchcase(name, name_pattern):
            net.trainable[name] = bool(flag)
            t.trainable = bool(flag)
            count += 1
    return count


def _apply_layer(layer, t, params, tape, training, rng):
    k = layer.kind
    if k == "conv":
        return T.conv2d(
            t, params[f"{layer.name}/w"], params[f"{layer.name}/b"],
            stride=layer.stride, pad=layer.pad, tape=tape,
        )
    if k == "maxpool":
        return T.maxpool2d(t, layer.kernel, layer.stride, tape=tape)
    if k == "relu":
        return T.relu(t, tape=tape)
    if k in ("pointwise_dense", "dense"):
        return T.pointwise_dense(
            t, params[f"{layer.name}/w"], params[f"{layer.name}/b"], tape=tape
        )
    if k == "global_avg_pool":
        return T.global_avg_pool(t, tape=tape)
    if k == "dropout":
        return T.dropout(t, layer.rate, rng, training, tape=tape)
    if k == "flatten":
        lead = t.data.shape[: t.data.ndim - 3]
        return T.reshape(t, lead + (-1,), tape=tape)
    if k == "softmax":
        return T.softmax(t, tape=tape)
    raise InvalidHyperparameterError(f"unknown layer kind {k!r}")


def forward(net, batch, mode="eval", rng=None):
    """Run the chain over a (B,H,W,C) batch.

    mode='train' records a Tape and applies dropout (rng required if any
    dropout layer has rate > 0); mode='eval' records nothing and dropout
    is the identity. Returns (output, tape_or_None).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    data = batch.data
    if data.ndim != 4 or tuple(data.shape[1:]) != tuple(net.input_shape):
        raise ShapeMismatchError(
            f"batch shape {data.shape} does not match input {net.input_shape}"
        )
    training = mode == "train"
    if training and rng is None and any(
        l.kind == "dropout" and l.rate > 0 for l in net.layers
    ):
        raise InvalidRateError("training forward through dropout requires an rng")
    tape = T.Tape() if training else None
    t = batch
    for layer in net.layers:
        t = _apply_layer(layer, t, net.params, tape, training, rng)
    return t, tape


def forward_activations(net, batch, layer_name):
    """Eval-mode forward that stops at (and returns) the named layer's output."""
    if layer_name not in net.layer_names():
        raise UnknownLayerError(f"no layer named {layer_name!r}")
    t = batch
    for layer in net.layers:
        t = _apply_layer(layer, t, net.params, None, False, None)
        if layer.name == layer_name:
            return t
    raise UnknownLayerError(f"no layer named {layer_name!r}")  # unreachable
