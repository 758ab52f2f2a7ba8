"""Networks built from a compact architecture string.

Strings look like "Conv(32)-ReLU-Conv(64)-ReLU-Conv(128)-FC(512)": Conv and
ConvTran are 3x3 stride-2 layers (halving / doubling the spatial size), FC is
a fully connected layer, ReLU and Tanh are activations. A triplet of such
networks (shared encoder, decoder, classifier) is the open-set model.
"""

from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, affine, conv2d, conv_transpose2d, relu, softmax, tanh

CHECKPOINT_MAGIC = b"OSRM"
CHECKPOINT_VERSION = 1


class ArchitectureError(ValueError):
    """Raised when an architecture string cannot be parsed or resolved."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # Conv | ConvTran | FC | ReLU | Tanh
    width: int | None = None


@dataclass
class ArchitectureSpec:
    """Parsed layer list with input/output shapes resolved per layer.

    Shapes are either (channels, height, width) tuples or flat ints. For a
    decoder whose flat input feeds transposed convolutions, output_image
    fixes the target image shape so the FC->spatial reshape is determined.
    """

    text: str
    layers: list[LayerSpec]
    input_shape: tuple[int, int, int] | int
    shapes: list[tuple | int] = field(default_factory=list)  # shape after each layer
    reshapes: dict[int, tuple[int, int, int]] = field(default_factory=dict)

    @property
    def output_shape(self):
        return self.shapes[-1] if self.shapes else self.input_shape

    def flat_output_dim(self) -> int:
        out = self.output_shape
        return out if isinstance(out, int) else int(np.prod(out))


_TOKEN = re.compile(r"^([A-Za-z]+)(?:\((\d+)\))?$")
_WIDTH_KINDS = {"Conv", "ConvTran", "FC"}
_ACT_KINDS = {"ReLU", "Tanh"}


def _flat_dim(shape) -> int:
    return shape if isinstance(shape, int) else int(np.prod(shape))


def parse_architecture(text: str, input_shape, output_image=None) -> ArchitectureSpec:
    """Parse an architecture string and resolve the shape chain.

    input_shape is (C, H, W) for image inputs or an int for flat inputs.
    output_image, when given, is the (C, H, W) the network must end at and
    is used to place the reshape between an FC layer and ConvTran layers.
    """
    layers: list[LayerSpec] = []
    for pos, token in enumerate(text.split("-")):
        m = _TOKEN.match(token.strip())
        if m is None:
            raise ArchitectureError(f"layer {pos}: malformed token {token!r}")
        kind, width = m.group(1), m.group(2)
        if kind not in _WIDTH_KINDS | _ACT_KINDS:
            raise ArchitectureError(f"layer {pos}: unknown layer kind {kind!r}")
        if kind in _WIDTH_KINDS and width is None:
            raise ArchitectureError(f"layer {pos}: {kind} requires a width")
        if kind in _ACT_KINDS and width is not None:
            raise ArchitectureError(f"layer {pos}: {kind} takes no width")
        layers.append(LayerSpec(kind, int(width) if width else None))

    spec = ArchitectureSpec(text=text, layers=layers, input_shape=_norm_shape(input_shape))
    state = spec.input_shape
    n_tran_left = sum(1 for l in layers if l.kind == "ConvTran")
    for pos, layer in enumerate(layers):
        if layer.kind == "Conv":
            if isinstance(state, int):
                raise ArchitectureError(f"layer {pos}: Conv needs a spatial input, got flat {state}")
            c, h, w = state
            state = (layer.width, (h + 1) // 2, (w + 1) // 2)
        elif layer.kind == "ConvTran":
            if isinstance(state, int):
                state = _infer_reshape(state, n_tran_left, output_image, pos)
                spec.reshapes[pos] = state
            c, h, w = state
            state = (layer.width, 2 * h, 2 * w)
            n_tran_left -= 1
        elif layer.kind == "FC":
            state = layer.width
        # activations leave the shape unchanged
        spec.shapes.append(state)
    return spec


def _norm_shape(shape):
    if isinstance(shape, int):
        return shape
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or any(s < 1 for s in shape):
        raise ArchitectureError(f"input_shape must be (C, H, W) or int, got {shape}")
    return shape


def _infer_reshape(flat: int, n_tran: int, output_image, pos: int) -> tuple[int, int, int]:
    if output_image is None:
        raise ArchitectureError(
            f"layer {pos}: flat input feeds ConvTran but no output image shape was given"
        )
    _, oh, ow = _norm_shape(output_image)
    h, w = oh >> n_tran, ow >> n_tran
    if h << n_tran != oh or w << n_tran != ow or h < 1:
        raise ArchitectureError(
            f"layer {pos}: output {oh}x{ow} not reachable by {n_tran} doubling layers"
        )
    if flat % (h * w):
        raise ArchitectureError(
            f"layer {pos}: flat width {flat} does not factor as channels x {h}x{w}"
        )
    return (flat // (h * w), h, w)


class _Layer:
    params: list[Tensor] = []

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError


class _Activation(_Layer):
    def __init__(self, fn):
        self.fn = fn
        self.params = []

    def forward(self, x):
        return self.fn(x)


class _FC(_Layer):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        bound = math.sqrt(6.0 / (in_dim + out_dim))
        self.weight = Tensor(rng.uniform(-bound, bound, size=(in_dim, out_dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)
        self.params = [self.weight, self.bias]

    def forward(self, x):
        if x.data.ndim > 2:
            x = x.reshape(x.shape[0], -1)
        return affine(x, self.weight, self.bias)


class _Conv(_Layer):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        fan_in, fan_out = in_ch * 9, out_ch * 9
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        self.kernels = Tensor(
            rng.uniform(-bound, bound, size=(out_ch, in_ch, 3, 3)), requires_grad=True
        )
        self.params = [self.kernels]

    def forward(self, x):
        return conv2d(x, self.kernels, stride=2, padding=1)


class _ConvTran(_Layer):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, reshape_to=None):
        fan_in, fan_out = in_ch * 9, out_ch * 9
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        self.kernels = Tensor(
            rng.uniform(-bound, bound, size=(in_ch, out_ch, 3, 3)), requires_grad=True
        )
        self.reshape_to = reshape_to
        self.params = [self.kernels]

    def forward(self, x):
        if self.reshape_to is not None:
            x = x.reshape((x.shape[0],) + self.reshape_to)
        return conv_transpose2d(x, self.kernels, stride=2)


class Network:
    """A parameterized feed-forward network instantiated from a spec."""

    def __init__(self, spec: ArchitectureSpec, seed: int):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.layers: list[_Layer] = []
        state = spec.input_shape
        for pos, layer in enumerate(spec.layers):
            if layer.kind == "FC":
                self.layers.append(_FC(_flat_dim(state), layer.width, rng))
            elif layer.kind == "Conv":
                self.layers.append(_Conv(state[0], layer.width, rng))
            elif layer.kind == "ConvTran":
                reshape = spec.reshapes.get(pos)
                in_ch = reshape[0] if reshape is not None else state[0]
                self.layers.append(_ConvTran(in_ch, layer.width, rng, reshape))
            elif layer.kind == "ReLU":
                self.layers.append(_Activation(relu))
            else:
                self.layers.append(_Activation(tanh))
            state = spec.shapes[pos]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.parameters()]

    def load_state_arrays(self, arrays):
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError(f"expected {len(params)} parameter arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            if p.data.shape != a.shape:
                raise ValueError(f"parameter shape {p.data.shape} != stored {a.shape}")
            p.data = np.ascontiguousarray(a, dtype=np.float64)


def expected_parameter_count(spec: ArchitectureSpec) -> int:
    """Parameter count computable from the spec alone (no allocation)."""
    total = 0
    state = spec.input_shape
    for pos, layer in enumerate(spec.layers):
        if layer.kind == "FC":
            total += _flat_dim(state) * layer.width + layer.width
        elif layer.kind == "Conv":
            total += layer.width * state[0] * 9
        elif layer.kind == "ConvTran":
            in_ch = spec.reshapes.get(pos, state)[0]
            total += in_ch * layer.width * 9
        state = spec.shapes[pos]
    return total


@dataclass
class ModelTriplet:
    """Shared encoder plus decoder and classifier heads."""

    encoder: Network
    decoder: Network
    classifier: Network
    input_shape: tuple[int, int, int]
    latent_dim: int
    num_classes: int

    def _check_input(self, x: Tensor):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"input shape {x.shape[1:]} != model input {self.input_shape}")

    def forward_encoder(self, x: Tensor) -> Tensor:
        self._check_input(x)
        return self.encoder.forward(x)

    def forward_decoder(self, z: Tensor) -> Tensor:
        if z.shape[1] != self.latent_dim:
            raise ShapeError(f"latent width {z.shape[1]} != {self.latent_dim}")
        out = self.decoder.forward(z)
        if out.data.ndim == 2:  # flat FC decoder output, reshape to the image
            out = out.reshape((out.shape[0],) + self.input_shape)
        return out

    def classifier_logits(self, z: Tensor) -> Tensor:
        if z.shape[1] != self.latent_dim:
            raise ShapeError(f"latent width {z.shape[1]} != {self.latent_dim}")
        return self.classifier.forward(z)

    def forward_classifier(self, z: Tensor) -> Tensor:
        return softmax(self.classifier_logits(z))

    def predict_labels(self, probs: np.ndarray) -> np.ndarray:
        # np.argmax already breaks ties toward the lowest index
        return np.argmax(probs, axis=1)

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.decoder.parameters() + self.classifier.parameters()


def build_triplet(
    encoder_text: str,
    decoder_text: str,
    classifier_text: str,
    input_shape,
    seed: int = 0,
) -> ModelTriplet:
    """Instantiate encoder/decoder/classifier from architecture strings."""
    input_shape = _norm_shape(input_shape)
    enc_spec = parse_architecture(encoder_text, input_shape)
    latent = enc_spec.flat_output_dim()
    dec_spec = parse_architecture(decoder_text, latent, output_image=input_shape)
    dec_out = dec_spec.output_shape
    ok = (
        dec_out == int(np.prod(input_shape))  # flat decoder, reshaped at forward time
        if isinstance(dec_out, int)
        else _norm_shape(dec_out) == input_shape
    )
    if not ok:
        raise ArchitectureError(f"decoder output {dec_out} != input image {input_shape}")
    clf_spec = parse_architecture(classifier_text, latent)
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=3)
    return ModelTriplet(
        encoder=Network(enc_spec, int(seeds[0])),
        decoder=Network(dec_spec, int(seeds[1])),
        classifier=Network(clf_spec, int(seeds[2])),
        input_shape=input_shape,
        latent_dim=latent,
        num_classes=clf_spec.flat_output_dim(),
    )


def save_checkpoint(path, networks: dict[str, Network], meta: dict):
    """Versioned binary container: JSON header + little-endian float64 blocks."""
    header = {
        "version": CHECKPOINT_VERSION,
        "meta": meta,
        "networks": [
            {
                "name": name,
                "architecture": net.spec.text,
                "input_shape": net.spec.input_shape,
                "output_image": _output_image_of(net.spec),
                "param_shapes": [list(p.data.shape) for p in net.parameters()],
            }
            for name, net in networks.items()
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for net in networks.values():
            for p in net.parameters():
                f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def _output_image_of(spec: ArchitectureSpec):
    if spec.reshapes and not isinstance(spec.output_shape, int):
        return list(spec.output_shape)
    return None


def load_checkpoint(path) -> tuple[dict[str, Network], dict]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        networks: dict[str, Network] = {}
        for entry in header["networks"]:
            in_shape = entry["input_shape"]
            in_shape = in_shape if isinstance(in_shape, int) else tuple(in_shape)
            out_img = entry["output_image"]
            spec = parse_architecture(
                entry["architecture"], in_shape, tuple(out_img) if out_img else None
            )
            net = Network(spec, seed=0)
            arrays = []
            for shape in entry["param_shapes"]:
                count = int(np.prod(shape))
                raw = f.read(count * 8)
                if len(raw) != count * 8:
                    raise ValueError("truncated checkpoint parameter block")
                arrays.append(np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
            net.load_state_arrays(arrays)
            networks[entry["name"]] = net
    return networks, header["meta"]


def triplet_from_networks(networks: dict[str, Network], meta: dict) -> ModelTriplet:
    enc = networks["encoder"]
    latent = enc.spec.flat_output_dim()
    return ModelTriplet(
        encoder=enc,
        decoder=networks.get("decoder"),
        classifier=networks["classifier"],
        input_shape=tuple(meta["input_shape"]),
        latent_dim=latent,
        num_classes=networks["classifier"].spec.flat_output_dim(),
    )
