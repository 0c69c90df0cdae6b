"""VGGish-family network descriptions and their realization on the engine.

Three cumulative variants are available:

* ``vggish_base``: VGG conv trunk, dense 4096-4096-128 head.
* ``vggish_bn``: as above with batch normalization after each conv activation.
* ``vggish_fullconv``: the dense head replaced by conv 6x4x4096 (valid),
  conv 1x1x4096 and conv 1x1x128, each followed by ReLU and batchnorm.

All three end in a dense layer over the label vocabulary and a sigmoid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .engine import ops
from .exceptions import InvalidConfigError, InvalidShapeError, NonFiniteError, SpecError

N_CLASSES = 10998
EMBEDDING_WIDTH = 128
INPUT_SHAPE = (100, 64, 1)
VARIANTS = ("vggish_base", "vggish_bn", "vggish_fullconv")
PAPER_PARAMETERS = 73_540_000
PAPER_FLOPS = 360_720_000
LAYER_KINDS = ("conv2d", "maxpool2d", "batchnorm", "dense", "relu", "sigmoid", "dropout", "flatten")

_TRUNK = (("conv1", 64), "pool1", ("conv2", 128), "pool2", ("conv3_1", 256), ("conv3_2", 256), "pool3",
          ("conv4_1", 512), ("conv4_2", 512), "pool4")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    kernel: tuple | None = None  # (h, w, out_channels) for conv2d
    units: int | None = None  # dense width
    stride: int = 1
    padding: str = "same"
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"{self.name}: unknown layer kind {self.kind!r}")
        if self.kind == "conv2d" and (self.kernel is None or min(self.kernel) < 1):
            raise SpecError(f"{self.name}: conv kernel must be positive-sized")
        if self.kind == "dense" and (self.units is None or self.units < 1):
            raise SpecError(f"{self.name}: dense units must be positive")
        if self.stride < 1:
            raise SpecError(f"{self.name}: stride must be >= 1")
        if self.padding not in ("same", "valid"):
            raise SpecError(f"{self.name}: padding must be 'same' or 'valid'")
        if not 0.0 <= self.rate < 1.0:
            raise SpecError(f"{self.name}: dropout rate must lie in [0, 1)")


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple
    input_shape: tuple = INPUT_SHAPE
    embedding_layer: str | None = None
    width_divisor: int = 1

    @property
    def n_classes(self):
        dense = [l for l in self.layers if l.kind == "dense"]
        return dense[-1].units if dense else None

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def validate(self):
        """Check the structural invariants: one 128-wide tap, dense+sigmoid head."""
        shapes = infer_shapes(self)
        if self.embedding_layer is None:
            raise SpecError(f"{self.name}: no embedding tap")
        if shapes[self.embedding_layer][-1] != EMBEDDING_WIDTH:
            raise SpecError(f"{self.name}: embedding tap must be {EMBEDDING_WIDTH} wide")
        if len(self.layers) < 2 or self.layers[-1].kind != "sigmoid" or self.layers[-2].kind != "dense":
            raise SpecError(f"{self.name}: network must end in dense + sigmoid")
        return self


def _conv_block(name, width, batchnorm):
    block = [LayerSpec("conv2d", name, kernel=(3, 3, width)), LayerSpec("relu", f"{name}_relu")]
    if batchnorm:
        block.append(LayerSpec("batchnorm", f"{name}_bn"))
    return block


def build_variant(variant, n_classes=N_CLASSES, width_divisor=1):
    """Return the NetworkSpec for one of ``VARIANTS``.

    ``width_divisor`` shrinks every conv/dense width except the 128-unit
    embedding and the output head (used for desk-scale smoke tests).
    """
    if variant not in VARIANTS:
        raise InvalidConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if width_divisor < 1:
        raise InvalidConfigError("width_divisor must be >= 1")

    def w(n):
        return max(1, n // width_divisor)

    batchnorm = variant != "vggish_base"
    layers = []
    for item in _TRUNK:
        if isinstance(item, str):
            layers.append(LayerSpec("maxpool2d", item, kernel=(2, 2), stride=2, padding="valid"))
        else:
            layers += _conv_block(item[0], w(item[1]), batchnorm)

    if variant == "vggish_fullconv":
        for name, kernel in (("fc1", (6, 4, w(4096))), ("fc2", (1, 1, w(4096))), ("embedding", (1, 1, EMBEDDING_WIDTH))):
            layers += [
                LayerSpec("conv2d", name, kernel=kernel, padding="valid"),
                LayerSpec("relu", f"{name}_relu"),
                LayerSpec("batchnorm", f"{name}_bn"),
            ]
        tap = "embedding_bn"
        layers.append(LayerSpec("flatten", "flatten"))
    else:
        layers.append(LayerSpec("flatten", "flatten"))
        for name, units in (("fc1", w(4096)), ("fc2", w(4096)), ("embedding", EMBEDDING_WIDTH)):
            layers += [LayerSpec("dense", name, units=units), LayerSpec("relu", f"{name}_relu")]
        tap = "embedding_relu"
    layers += [LayerSpec("dense", "logits", units=n_classes), LayerSpec("sigmoid", "output")]
    return NetworkSpec(variant, tuple(layers), INPUT_SHAPE, tap, width_divisor).validate()


def infer_shapes(spec: NetworkSpec):
    """Ordered mapping layer name -> output shape (without the batch axis)."""
    shape = tuple(spec.input_shape)
    shapes = {}
    for layer in spec.layers:
        if layer.kind == "conv2d":
            if len(shape) != 3:
                raise SpecError(f"{layer.name}: conv2d needs a HxWxC input, got {shape}")
            kh, kw, cout = layer.kernel
            ho = ops.conv_output_size(shape[0], kh, layer.stride, layer.padding)
            wo = ops.conv_output_size(shape[1], kw, layer.stride, layer.padding)
            shape = (ho, wo, cout)
        elif layer.kind == "maxpool2d":
            k = layer.kernel[0] if layer.kernel else 2
            shape = ((shape[0] - k) // layer.stride + 1, (shape[1] - k) // layer.stride + 1, shape[2])
        elif layer.kind == "flatten":
            shape = (math.prod(shape),)
        elif layer.kind == "dense":
            if len(shape) != 1:
                raise SpecError(f"{layer.name}: dense needs a flat input, got {shape}")
            shape = (layer.units,)
        if min(shape) < 1:
            raise SpecError(f"layer {layer.name!r} produces non-positive shape {shape}")
        shapes[layer.name] = shape
    return shapes


def parameter_shapes(spec: NetworkSpec):
    """Trainable arrays (name -> shape) and non-trainable buffers."""
    shape = tuple(spec.input_shape)
    params, buffers = {}, {}
    shapes = infer_shapes(spec)
    for layer in spec.layers:
        if layer.kind == "conv2d":
            kh, kw, cout = layer.kernel
            params[f"{layer.name}/kernel"] = (kh, kw, shape[-1], cout)
            params[f"{layer.name}/bias"] = (cout,)
        elif layer.kind == "dense":
            params[f"{layer.name}/kernel"] = (shape[0], layer.units)
            params[f"{layer.name}/bias"] = (layer.units,)
        elif layer.kind == "batchnorm":
            c = shape[-1]
            params[f"{layer.name}/gamma"] = (c,)
            params[f"{layer.name}/beta"] = (c,)
            buffers[f"{layer.name}/moving_mean"] = (c,)
            buffers[f"{layer.name}/moving_variance"] = (c,)
        shape = shapes[layer.name]
    return params, buffers


def count_parameters(spec: NetworkSpec):
    params, _ = parameter_shapes(spec)
    return sum(math.prod(s) for s in params.values())


@dataclass
class FlopReport:
    convention: str
    rows: list = field(default_factory=list)  # (layer name, cost)

    @property
    def total(self):
        return sum(c for _, c in self.rows)


def count_flops(spec: NetworkSpec, convention="mac"):
    """Per-layer cost of conv and dense layers for a single input.

    ``mac`` counts multiply-accumulates; ``mul_plus_add`` counts the multiply
    and the add separately (2 x MAC). Bias, activation, pooling and
    normalization costs are not counted under either convention.
    """
    if convention not in ("mac", "mul_plus_add"):
        raise InvalidConfigError(f"unknown FLOP convention {convention!r}")
    factor = 1 if convention == "mac" else 2
    shapes = infer_shapes(spec)
    shape = tuple(spec.input_shape)
    report = FlopReport(convention)
    for layer in spec.layers:
        out = shapes[layer.name]
        if layer.kind == "conv2d":
            kh, kw, cout = layer.kernel
            report.rows.append((layer.name, factor * out[0] * out[1] * kh * kw * shape[-1] * cout))
        elif layer.kind == "dense":
            report.rows.append((layer.name, factor * shape[0] * layer.units))
        shape = out
    return report


def table_rows(spec: NetworkSpec):
    """Collapse the layer list into rows in the style of a published layer table.

    conv + relu + batchnorm becomes ``("Convolution with BN", "3*3*64")``;
    consecutive identical 3x3 rows merge into ``"[3*3, 256]*2"``.
    """
    rows = []
    layers = list(spec.layers)
    i = 0
    while i < len(layers):
        layer = layers[i]
        if layer.kind == "conv2d":
            has_bn = i + 2 < len(layers) and layers[i + 2].kind == "batchnorm"
            label = "Convolution with BN" if has_bn else "Convolution"
            kh, kw, c = layer.kernel
            rows.append([label, (kh, kw, c), 1])
            i += 3 if has_bn else 2
            continue
        if layer.kind == "maxpool2d":
            rows.append(["Max Pooling", "2*2", None])
        elif layer.kind == "dense":
            rows.append([f"Fully-connected-{layer.units}", None, None])
        elif layer.kind == "sigmoid":
            rows.append(["Sigmoid", None, None])
        i += 1
    merged = []
    for row in rows:
        if merged and isinstance(row[1], tuple) and merged[-1][:2] == row[:2] and row[1][:2] == (3, 3):
            merged[-1][2] += 1
        else:
            merged.append(row)
    out = []
    for label, kernel, repeat in merged:
        if isinstance(kernel, tuple):
            kh, kw, c = kernel
            kernel = f"{kh}*{kw}*{c}" if repeat == 1 else f"[{kh}*{kw}, {c}]*{repeat}"
        out.append((label, kernel))
    return out


def describe(spec: NetworkSpec, convention="mac"):
    """Stable plain-text summary: layer table, shape chain, parameter and FLOP counts."""
    shapes = infer_shapes(spec)
    params, _ = parameter_shapes(spec)
    per_layer = {}
    for name, s in params.items():
        layer = name.split("/")[0]
        per_layer[layer] = per_layer.get(layer, 0) + math.prod(s)
    lines = [f"network: {spec.name}", f"input: {'x'.join(map(str, spec.input_shape))}", "", "layer table:"]
    for label, kernel in table_rows(spec):
        lines.append(f"  {label:<24}{kernel or ''}")
    lines += ["", "shape chain:"]
    lines.append(f"  {'layer':<16}{'kind':<11}{'output':<16}{'params':>12}")
    for layer in spec.layers:
        out = "x".join(map(str, shapes[layer.name]))
        lines.append(f"  {layer.name:<16}{layer.kind:<11}{out:<16}{per_layer.get(layer.name, 0):>12,}")
    lines.append(f"embedding tap: {spec.embedding_layer} ({'x'.join(map(str, shapes[spec.embedding_layer]))})")
    total = count_parameters(spec)
    lines += ["", f"parameters: {total:,}"]
    if spec.name == "vggish_fullconv" and spec.width_divisor == 1 and spec.n_classes == N_CLASSES:
        rel = (total - PAPER_PARAMETERS) / PAPER_PARAMETERS
        lines.append(f"reported: {PAPER_PARAMETERS:,} (relative difference {rel:+.4%})")
    for conv in ("mac", "mul_plus_add"):
        report = count_flops(spec, conv)
        lines += ["", f"flops ({conv}):"]
        for name, cost in report.rows:
            lines.append(f"  {name:<16}{cost:>16,}")
        lines.append(f"  {'total':<16}{report.total:>16,}")
        if spec.name == "vggish_fullconv" and spec.width_divisor == 1:
            ratio = report.total / PAPER_FLOPS
            lines.append(f"  reported 360.72M; this convention gives {ratio:.3f}x the reported figure (not reconciled)")
    return "\n".join(lines) + "\n"


def he_uniform(rng, shape, fan_in, dtype):
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Network:
    """A NetworkSpec realized as parameter arrays with forward/backward passes.

    Parameters are stored in ``params`` (trainable) and ``buffers``
    (batchnorm running statistics), keyed ``"<layer>/<array>"``.
    """

    def __init__(self, spec: NetworkSpec, seed=0, dtype=np.float32, params=None, buffers=None):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.shapes = infer_shapes(spec)
        self._caches = None
        pshapes, bshapes = parameter_shapes(spec)
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            for name, shape in pshapes.items():
                kind = name.split("/")[1]
                if kind == "kernel":
                    params[name] = he_uniform(rng, shape, math.prod(shape[:-1]), self.dtype)
                elif kind == "gamma":
                    params[name] = np.ones(shape, self.dtype)
                else:
                    params[name] = np.zeros(shape, self.dtype)
        if buffers is None:
            buffers = {
                name: (np.zeros(s, self.dtype) if name.endswith("moving_mean") else np.ones(s, self.dtype))
                for name, s in bshapes.items()
            }
        for name, shape in pshapes.items():
            if name not in params or params[name].shape != tuple(shape):
                raise InvalidShapeError(f"parameter {name} missing or mis-shaped")
        self.params = {k: np.asarray(params[k], dtype=self.dtype) for k in pshapes}
        self.buffers = {k: np.asarray(buffers[k], dtype=self.dtype) for k in bshapes}

    @property
    def weight_names(self):
        """Conv and dense kernels: the arrays L2 regularization applies to."""
        return [k for k in self.params if k.endswith("/kernel")]

    @property
    def n_parameters(self):
        return sum(p.size for p in self.params.values())

    def forward(self, x, mode="infer", rng=None, until=None, logits=True, check_finite=True):
        """Run the network on a (N, 100, 64) or (N, 100, 64, 1) batch.

        Returns pre-sigmoid logits by default, sigmoid probabilities with
        ``logits=False``, or the activation of layer ``until``.
        """
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[..., None]
        if x.shape[1:] != tuple(self.spec.input_shape):
            raise InvalidShapeError(f"expected input {self.spec.input_shape}, got {x.shape[1:]}")
        caches = []
        for layer in self.spec.layers:
            if layer.kind == "sigmoid" and logits and until is None:
                break
            x, cache = self._forward_layer(layer, x, mode, rng)
            caches.append((layer, cache))
            if check_finite and not np.all(np.isfinite(x)):
                raise NonFiniteError(f"non-finite activation in layer {layer.name!r}", layer=layer.name)
            if layer.name == until:
                break
        self._caches = caches if mode == "train" or until is None else None
        return x

    def embed(self, x):
        return self.forward(x, mode="infer", until=self.spec.embedding_layer).reshape(len(x), -1)

    def predict_proba(self, x):
        return ops.sigmoid(self.forward(x, mode="infer"))

    def _forward_layer(self, layer, x, mode, rng):
        p = self.params
        name = layer.name
        if layer.kind == "conv2d":
            return ops.conv2d_forward(x, p[f"{name}/kernel"], p[f"{name}/bias"], layer.stride, layer.padding)
        if layer.kind == "dense":
            return ops.dense_forward(x, p[f"{name}/kernel"], p[f"{name}/bias"])
        if layer.kind == "relu":
            return ops.relu_forward(x)
        if layer.kind == "maxpool2d":
            return ops.maxpool2d_forward(x, layer.kernel[0] if layer.kernel else 2, layer.stride)
        if layer.kind == "batchnorm":
            out, cache, (mean, var) = ops.batchnorm_forward(
                x, p[f"{name}/gamma"], p[f"{name}/beta"],
                self.buffers[f"{name}/moving_mean"], self.buffers[f"{name}/moving_variance"], mode,
            )
            if mode == "train":
                self.buffers[f"{name}/moving_mean"] = mean.astype(self.dtype)
                self.buffers[f"{name}/moving_variance"] = var.astype(self.dtype)
            return out, cache
        if layer.kind == "flatten":
            return ops.flatten_forward(x)
        if layer.kind == "dropout":
            return ops.dropout_forward(x, layer.rate, mode, rng)
        if layer.kind == "sigmoid":
            return ops.sigmoid_forward(x)
        raise SpecError(f"unsupported layer kind {layer.kind}")

    def backward(self, grad, check_finite=False):
        """Backpropagate ``grad`` (w.r.t. the last forward output); returns parameter grads.

        Non-finite parameter gradients always raise; ``check_finite`` also
        checks every intermediate gradient so the offending layer is named.
        """
        if self._caches is None:
            raise InvalidShapeError("backward called without a preceding full forward pass")
        grads = {}
        for layer, cache in reversed(self._caches):
            name = layer.name
            if layer.kind == "conv2d":
                grad, grads[f"{name}/kernel"], grads[f"{name}/bias"] = ops.conv2d_backward(grad, cache)
            elif layer.kind == "dense":
                grad, grads[f"{name}/kernel"], grads[f"{name}/bias"] = ops.dense_backward(grad, cache)
            elif layer.kind == "relu":
                grad = ops.relu_backward(grad, cache)
            elif layer.kind == "maxpool2d":
                grad = ops.maxpool2d_backward(grad, cache)
            elif layer.kind == "batchnorm":
                grad, grads[f"{name}/gamma"], grads[f"{name}/beta"] = ops.batchnorm_backward(grad, cache)
            elif layer.kind == "flatten":
                grad = ops.flatten_backward(grad, cache)
            elif layer.kind == "dropout":
                grad = ops.dropout_backward(grad, cache)
            elif layer.kind == "sigmoid":
                grad = ops.sigmoid_backward(grad, cache)
            if check_finite and not np.all(np.isfinite(grad)):
                raise NonFiniteError(f"non-finite gradient in layer {name!r}", layer=name)
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name}", layer=name.split("/")[0])
        return grads

    def state(self):
        return {"params": self.params, "buffers": self.buffers}


def tiny_variant(variant="vggish_fullconv", n_classes=N_CLASSES, width_divisor=8):
    return build_variant(variant, n_classes=n_classes, width_divisor=width_divisor)


def with_classes(spec: NetworkSpec, n_classes):
    """Copy of ``spec`` whose output head has ``n_classes`` units."""
    layers = list(spec.layers)
    layers[-2] = replace(layers[-2], units=n_classes)
    return replace(spec, layers=tuple(layers)).validate()
