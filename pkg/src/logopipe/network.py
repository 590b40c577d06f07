"""The tiny logo classification network.

Fixed 12-layer stack for 32x32x3 RGB crops:

    conv 32@5x5 -> maxpool/2 -> relu -> conv 32@5x5 -> relu -> avgpool/2
    -> conv 64@5x5 -> relu -> avgpool/2 -> fc 64 -> fc C -> softmax

All 5x5 convolutions use stride 1 and padding 2, so spatial extents only
change at the pools (32 -> 16 -> 8 -> 4); the first fully-connected layer
therefore sees 4*4*64 = 1024 inputs. With the default 33 outputs (32 logo
classes plus background) the network has exactly 147,073 parameters.

Model files pair a plain-text header (version, class names, layer shapes,
normalization stats, decision threshold) with a little-endian float32
parameter payload. Parameters are stored down-cast to float32 and up-cast
to float64 on load.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .ops import LayerParams, Param

MODEL_MAGIC = "logopipe-model"
MODEL_VERSION = 1

CONV_KERNEL = 5
CONV_PAD = 2
INPUT_SIZE = 32
FEATURE_DIM = 64


class ModelFormatError(Exception):
    """Model file is corrupt, truncated, or not a model file at all."""


class ModelVersionError(ModelFormatError):
    """Model file uses an unsupported format version."""


class ModelShapeError(ModelFormatError):
    """Stored parameter shapes disagree with the manifest or the caller."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str                 # conv | max-pool | avg-pool | relu | fc | softmax
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    in_channels: int = 0
    out_channels: int = 0


def layer_stack(num_classes: int) -> list[LayerSpec]:
    """The fixed layer list; only the final fc width is parametric."""
    conv = lambda cin, cout: LayerSpec("conv", kernel=CONV_KERNEL, stride=1,
                                       padding=CONV_PAD, in_channels=cin,
                                       out_channels=cout)
    return [
        conv(3, 32),
        LayerSpec("max-pool", kernel=2, stride=2),
        LayerSpec("relu"),
        conv(32, 32),
        LayerSpec("relu"),
        LayerSpec("avg-pool", kernel=2, stride=2),
        conv(32, 64),
        LayerSpec("relu"),
        LayerSpec("avg-pool", kernel=2, stride=2),
        LayerSpec("fc", in_channels=4 * 4 * 64, out_channels=FEATURE_DIM),
        LayerSpec("fc", in_channels=FEATURE_DIM, out_channels=num_classes),
        LayerSpec("softmax"),
    ]


@dataclass
class LogoNet:
    """Network parameters plus everything needed to apply them.

    norm_mean/norm_std are per-channel contrast-normalization statistics
    (None when the model was trained without contrast normalization).
    threshold is the calibrated image-level decision cutoff. class_names
    lists the logo classes in label order; when has_background is true the
    output layer has one extra trailing unit for the background class.
    """
    specs: list[LayerSpec]
    params: list[LayerParams]
    num_classes: int
    class_names: list[str] = field(default_factory=list)
    has_background: bool = True
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None
    threshold: float = 0.0

    def parameter_count(self) -> int:
        return sum(lp.weight.value.size + lp.bias.value.size for lp in self.params)


def build_network(num_classes: int = 33, seed: int = 0) -> LogoNet:
    """Construct the network with fan-in-scaled Gaussian weights.

    Weights ~ N(0, 2 / fan_in), biases zero; deterministic per seed.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    rng = np.random.default_rng(seed)
    specs = layer_stack(num_classes)
    params = []
    for spec in specs:
        if spec.kind == "conv":
            fan_in = spec.kernel * spec.kernel * spec.in_channels
            shape = (spec.kernel, spec.kernel, spec.in_channels, spec.out_channels)
        elif spec.kind == "fc":
            fan_in = spec.in_channels
            shape = (spec.in_channels, spec.out_channels)
        else:
            continue
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params.append(LayerParams(Param(w), Param(np.zeros(spec.out_channels))))
    return LogoNet(specs=specs, params=params, num_classes=num_classes)


def forward_batch(net: LogoNet, batch: np.ndarray, train: bool = False):
    """Run the network on an N x 32 x 32 x 3 batch.

    Returns N x C probabilities, or (probabilities, caches) when train is
    true; the caches feed backward_batch.
    """
    x = np.asarray(batch, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.shape[1:] != (INPUT_SIZE, INPUT_SIZE, 3):
        raise ValueError(
            f"expected Nx{INPUT_SIZE}x{INPUT_SIZE}x3 input, got {x.shape}")
    caches = []
    p_idx = 0
    for spec in net.specs:
        if spec.kind == "conv":
            lp = net.params[p_idx]
            if train:
                prev = x
                x, cols = ops.conv2d_forward(prev, lp.weight.value,
                                             lp.bias.value, spec.stride,
                                             spec.padding, return_cols=True)
                caches.append(("conv", (prev, cols), lp, spec))
            else:
                x = ops.conv2d_forward(x, lp.weight.value, lp.bias.value,
                                       spec.stride, spec.padding)
            p_idx += 1
        elif spec.kind in ("max-pool", "avg-pool"):
            x, pc = ops.pool_forward(x, spec.kind[:3])
            caches.append(("pool", pc, None, spec))
        elif spec.kind == "relu":
            caches.append(("relu", x, None, spec))
            x = ops.relu_forward(x)
        elif spec.kind == "fc":
            if x.ndim == 4:
                caches.append(("flatten", x.shape, None, spec))
                x = x.reshape(x.shape[0], -1)
            lp = net.params[p_idx]
            caches.append(("fc", x, lp, spec))
            x = ops.fc_forward(x, lp.weight.value, lp.bias.value)
            p_idx += 1
        elif spec.kind == "softmax":
            x = ops.softmax(x)
    probs = x[0] if single else x
    return (probs, caches) if train else probs


def backward_batch(net: LogoNet, caches, grad_logits: np.ndarray,
                   need_input_grad: bool = False) -> np.ndarray | None:
    """Backpropagate d(loss)/d(logits); overwrites each param's .grad.

    Returns the input gradient when need_input_grad is true (the default
    skips the first layer's col2im, which training never needs).
    """
    g = grad_logits
    for i, entry in enumerate(reversed(caches)):
        kind, cache, lp, spec = entry
        is_input_layer = i == len(caches) - 1
        if kind == "conv":
            conv_in, cols = cache
            gx, gw, gb = ops.conv2d_backward(
                g, conv_in, lp.weight.value, spec.stride, spec.padding,
                need_input_grad=need_input_grad or not is_input_layer,
                cols=cols)
            lp.weight.grad = gw
            lp.bias.grad = gb
            g = gx
        elif kind == "pool":
            g = ops.pool_backward(g, cache)
        elif kind == "relu":
            g = ops.relu_backward(g, cache)
        elif kind == "flatten":
            g = g.reshape(cache)
        elif kind == "fc":
            gx, gw, gb = ops.fc_backward(g, cache, lp.weight.value)
            lp.weight.grad = gw
            lp.bias.grad = gb
            g = gx
    return g


def extract_features(net: LogoNet, crop: np.ndarray) -> np.ndarray:
    """64-d embedding: the first fully-connected layer's activation.

    Equivalent to running the network with the final fully-connected layer
    and the softmax removed. Accepts one crop (32x32x3) or a batch.
    """
    x = np.asarray(crop, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    last_fc = max(i for i, s in enumerate(net.specs) if s.kind == "fc")
    p_idx = 0
    for i, spec in enumerate(net.specs):
        if i == last_fc:
            break
        if spec.kind == "conv":
            lp = net.params[p_idx]
            x = ops.conv2d_forward(x, lp.weight.value, lp.bias.value,
                                   spec.stride, spec.padding)
            p_idx += 1
        elif spec.kind in ("max-pool", "avg-pool"):
            x, _ = ops.pool_forward(x, spec.kind[:3])
        elif spec.kind == "relu":
            x = ops.relu_forward(x)
        elif spec.kind == "fc":
            if x.ndim == 4:
                x = x.reshape(x.shape[0], -1)
            lp = net.params[p_idx]
            x = ops.fc_forward(x, lp.weight.value, lp.bias.value)
            p_idx += 1
    return x[0] if single else x


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _manifest(net: LogoNet) -> list[str]:
    lines = []
    for lp in net.params:
        ws = "x".join(str(d) for d in lp.weight.value.shape)
        bs = "x".join(str(d) for d in lp.bias.value.shape)
        lines.append(f"{ws} {bs}")
    return lines


def save_model(net: LogoNet, path) -> None:
    """Write the model: text header, blank line, float32 LE payload."""
    header = io.StringIO()
    header.write(f"{MODEL_MAGIC} v{MODEL_VERSION}\n")
    header.write(f"classes: {','.join(net.class_names)}\n")
    header.write(f"background: {int(net.has_background)}\n")
    if net.norm_mean is not None:
        header.write("norm-mean: " + " ".join(repr(float(v)) for v in net.norm_mean) + "\n")
        header.write("norm-std: " + " ".join(repr(float(v)) for v in net.norm_std) + "\n")
    else:
        header.write("norm: none\n")
    header.write(f"threshold: {net.threshold!r}\n")
    header.write("layers:\n")
    for line in _manifest(net):
        header.write(f"  {line}\n")
    header.write("\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("utf-8"))
        for lp in net.params:
            fh.write(lp.weight.value.astype("<f4").tobytes())
            fh.write(lp.bias.value.astype("<f4").tobytes())


def load_model(path, expected_classes: list[str] | None = None) -> LogoNet:
    """Read a model file back; raises the documented error types.

    ModelFormatError for bad magic or truncation, ModelVersionError for an
    unsupported version, ModelShapeError when the stored shapes disagree
    with the header manifest or with expected_classes.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise ModelFormatError(f"{path}: missing header terminator")
    try:
        header = blob[:sep].decode("utf-8").splitlines()
    except UnicodeDecodeError as exc:
        raise ModelFormatError(f"{path}: undecodable header") from exc
    payload = blob[sep + 2:]

    if not header or not header[0].startswith(MODEL_MAGIC + " v"):
        raise ModelFormatError(f"{path}: not a {MODEL_MAGIC} file")
    try:
        version = int(header[0].split(" v", 1)[1])
    except ValueError as exc:
        raise ModelFormatError(f"{path}: malformed version line") from exc
    if version != MODEL_VERSION:
        raise ModelVersionError(
            f"{path}: format version {version} unsupported (expected {MODEL_VERSION})")

    fields: dict[str, str] = {}
    manifest: list[str] = []
    in_layers = False
    for line in header[1:]:
        if line.startswith("layers:"):
            in_layers = True
        elif in_layers:
            manifest.append(line.strip())
        elif ": " in line or line.endswith(":"):
            key, _, val = line.partition(":")
            fields[key.strip()] = val.strip()
    if "classes" not in fields or "threshold" not in fields or not manifest:
        raise ModelFormatError(f"{path}: incomplete header")

    class_names = [c for c in fields["classes"].split(",") if c]
    has_background = fields.get("background", "1") == "1"
    num_classes = len(class_names) + (1 if has_background else 0)
    if expected_classes is not None and class_names != list(expected_classes):
        raise ModelShapeError(
            f"{path}: model classes {class_names} do not match expected "
            f"{list(expected_classes)}")

    net = build_network(num_classes=num_classes, seed=0)
    if _manifest(net) != manifest:
        raise ModelShapeError(f"{path}: shape manifest does not match the "
                              f"{num_classes}-class architecture")

    expected_floats = sum(lp.weight.value.size + lp.bias.value.size
                          for lp in net.params)
    if len(payload) != expected_floats * 4:
        raise ModelFormatError(
            f"{path}: payload holds {len(payload)} bytes, expected "
            f"{expected_floats * 4} (truncated or padded file)")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    pos = 0
    for lp in net.params:
        for p in (lp.weight, lp.bias):
            n = p.value.size
            p.value = flat[pos:pos + n].reshape(p.value.shape).copy()
            p.grad = np.zeros_like(p.value)
            p.momentum = np.zeros_like(p.value)
            pos += n

    net.class_names = class_names
    net.has_background = has_background
    if "norm-mean" in fields:
        net.norm_mean = np.array([float(v) for v in fields["norm-mean"].split()])
        net.norm_std = np.array([float(v) for v in fields["norm-std"].split()])
    else:
        net.norm_mean = None
        net.norm_std = None
    net.threshold = float(fields["threshold"])
    return net
