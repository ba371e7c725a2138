"""
The six encoder-decoder road segmentation variants.

======  ==============  =============  ================
Model   Camera / LiDAR  Encoders       Skip connections
======  ==============  =============  ================
A       both            one, 6-ch      yes
B       both            one, 6-ch      no
C       both            twin           yes
D       both            twin           no
E       camera          one, 3-ch      yes
F       LiDAR           one, 3-ch      yes
======  ==============  =============  ================

A model is a list of :class:`Layer` records forming a small DAG. The same
list drives the forward pass, shape inference (:func:`describe_shapes`) and
structural queries such as :func:`skip_edges`, so those never drift apart.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .errors import ShapeError
from .tensor_core import Tensor


class ModelVariant(enum.Enum):
    A = "A"
    B = "B"
    C = "C"
    D = "D"
    E = "E"
    F = "F"

    @classmethod
    def parse(cls, text: str) -> "ModelVariant":
        try:
            return cls(text.strip().upper())
        except ValueError:
            raise ValueError(f"unknown model variant {text!r}; expected one of A-F") from None

    @property
    def combined_input(self) -> bool:
        return self in (ModelVariant.A, ModelVariant.B)

    @property
    def twin_encoders(self) -> bool:
        return self in (ModelVariant.C, ModelVariant.D)

    @property
    def skip_connections(self) -> bool:
        return self not in (ModelVariant.B, ModelVariant.D)

    @property
    def camera_only(self) -> bool:
        return self is ModelVariant.E

    @property
    def lidar_only(self) -> bool:
        return self is ModelVariant.F

    @property
    def uses_camera(self) -> bool:
        return not self.lidar_only

    @property
    def uses_lidar(self) -> bool:
        return not self.camera_only

    @property
    def inputs(self) -> tuple[tuple[str, int], ...]:
        """``(name, channels)`` of each model input, in call order."""
        if self.combined_input:
            return (("combined", 6),)
        if self.twin_encoders:
            return (("camera", 3), ("lidar", 3))
        return (("camera", 3),) if self.camera_only else (("lidar", 3),)


@dataclass(frozen=True)
class ScaleProfile:
    input_h: int
    input_w: int
    encoder_depths: tuple[int, int, int, int]
    dense_width: int
    convs_per_block: tuple[int, int, int, int]

    def __post_init__(self):
        if self.input_h % 16 or self.input_w % 16 or self.input_h <= 0 or self.input_w <= 0:
            raise ValueError(f"input {self.input_h}x{self.input_w} must be positive multiples of 16")
        if len(self.encoder_depths) != 4 or len(self.convs_per_block) != 4:
            raise ValueError("encoder_depths and convs_per_block need four entries")
        if min(self.encoder_depths) < 1 or self.dense_width < 1 or min(self.convs_per_block) < 1:
            raise ValueError("depths, dense width and conv counts must be positive")


FULL_PROFILE = ScaleProfile(800, 400, (16, 32, 64, 128), 1024, (2, 2, 3, 3))
DESK_PROFILE = ScaleProfile(160, 80, (4, 8, 16, 32), 64, (2, 2, 2, 2))
PROFILES = {"full": FULL_PROFILE, "desk": DESK_PROFILE}


@dataclass(frozen=True)
class Layer:
    name: str
    op: str  # input | conv | pool | concat | dense | dropout | upconv | head
    inputs: tuple[str, ...] = ()
    channels: int = 0


@dataclass
class Model:
    variant: ModelVariant
    profile: ScaleProfile
    layers: list[Layer]
    params: dict[str, Tensor]
    dropout_rate: float = 0.2
    seed: int = 0
    skip_sources: dict[str, str] = field(default_factory=dict)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise ShapeError(f"parameter names differ (missing {missing[:3]}, extra {extra[:3]})")
        for k, arr in state.items():
            if arr.shape != self.params[k].shape:
                raise ShapeError(f"{k}: shape {arr.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=np.float64)

    def __call__(self, inputs, training: bool = False, rng=None) -> Tensor:
        return forward(self, inputs, training=training, rng=rng)


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------


def _encoders(variant: ModelVariant) -> list[tuple[str, str]]:
    """``(scope, input name)`` for every encoder branch."""
    if variant.combined_input:
        return [("encoder", "combined")]
    names = {"camera": "encoder_camera", "lidar": "encoder_lidar"}
    return [(names[inp], inp) for inp, _ in variant.inputs]


def _build_layers(variant: ModelVariant, profile: ScaleProfile) -> tuple[list[Layer], dict[str, str]]:
    depths, convs = profile.encoder_depths, profile.convs_per_block
    layers: list[Layer] = []
    skip_sources: dict[str, str] = {}

    for name, ch in variant.inputs:
        layers.append(Layer(f"input_{name}", "input", (), ch))

    block_ends: dict[str, dict[int, str]] = {}
    bottlenecks = []
    for scope, inp in _encoders(variant):
        prev = f"input_{inp}"
        block_ends[scope] = {}
        for b in range(1, 5):
            for i in range(1, convs[b - 1] + 1):
                name = f"{scope}/block{b}/conv{i}"
                layers.append(Layer(name, "conv", (prev,), depths[b - 1]))
                prev = name
            block_ends[scope][b] = prev
            name = f"{scope}/block{b}/pool"
            layers.append(Layer(name, "pool", (prev,), depths[b - 1]))
            prev = name
        bottlenecks.append(prev)

    if len(bottlenecks) == 2:
        layers.append(Layer("bottleneck/fuse", "concat", tuple(bottlenecks), 2 * depths[3]))
        prev = "bottleneck/fuse"
    else:
        prev = bottlenecks[0]
    for name, op, ch in (
        ("bottleneck/dense1", "dense", profile.dense_width),
        ("bottleneck/dropout1", "dropout", profile.dense_width),
        ("bottleneck/dense2", "dense", profile.dense_width),
        ("bottleneck/dropout2", "dropout", profile.dense_width),
        ("bottleneck/bridge", "dense", depths[3]),
    ):
        layers.append(Layer(name, op, (prev,), ch))
        prev = name

    channels = {layer.name: layer.channels for layer in layers}
    for stage in range(1, 5):
        depth = depths[4 - stage]
        name = f"decoder/stage{stage}/upconv"
        layers.append(Layer(name, "upconv", (prev,), depth))
        prev = name
        channels[prev] = depth
        # encoder block 4, 3, 2 (pre-pool) -> decoder stage 1, 2, 3
        if variant.skip_connections and stage <= 3:
            block = 5 - stage
            for scope in block_ends:
                src = block_ends[scope][block]
                name = f"decoder/stage{stage}/skip_{scope}"
                ch = channels[prev] + depths[block - 1]
                layers.append(Layer(name, "concat", (prev, src), ch))
                skip_sources[name] = src
                prev = name
                channels[prev] = ch
        for i in range(1, convs[4 - stage] + 1):
            name = f"decoder/stage{stage}/conv{i}"
            layers.append(Layer(name, "conv", (prev,), depth))
            prev = name
            channels[prev] = depth
    layers.append(Layer("head", "head", (prev,), 1))
    return layers, skip_sources


def _input_channels(layers: list[Layer]) -> dict[str, int]:
    chans: dict[str, int] = {}
    for layer in layers:
        chans[layer.name] = layer.channels
    return chans


def build_model(
    variant: ModelVariant | str,
    profile: ScaleProfile = DESK_PROFILE,
    seed: int = 0,
    dropout_rate: float = 0.2,
) -> Model:
    """Build and He-uniform initialise a model. Biases start at zero."""
    if isinstance(variant, str):
        variant = ModelVariant.parse(variant)
    if not isinstance(profile, ScaleProfile):
        raise TypeError("profile must be a ScaleProfile")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {dropout_rate}")
    layers, skip_sources = _build_layers(variant, profile)
    chans = _input_channels(layers)
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def add(name, shape, fan_in):
        limit = np.sqrt(6.0 / fan_in)
        params[f"{name}/kernel"] = Tensor(rng.uniform(-limit, limit, shape), True, f"{name}/kernel")
        params[f"{name}/bias"] = Tensor(np.zeros(shape[-1]), True, f"{name}/bias")

    for layer in layers:
        cin = sum(chans[i] for i in layer.inputs)
        if layer.op == "conv":
            add(layer.name, (3, 3, cin, layer.channels), 9 * cin)
        elif layer.op in ("dense", "head"):
            add(layer.name, (cin, layer.channels), cin)
        elif layer.op == "upconv":
            # every output pixel sees one input pixel, so fan-in is C_in
            add(layer.name, (2, 2, cin, layer.channels), cin)
    return Model(variant, profile, layers, params, dropout_rate, seed, skip_sources)


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


def forward(model: Model, inputs, training: bool = False, rng=None) -> Tensor:
    """Run the model on 1 or 2 NHWC inputs scaled to [0, 1]; returns N x H x W x 1."""
    if isinstance(inputs, (np.ndarray, Tensor)):
        inputs = [inputs]
    wanted = model.variant.inputs
    if len(inputs) != len(wanted):
        raise ShapeError(f"model {model.variant.value} takes {len(wanted)} input(s), got {len(inputs)}")

    values: dict[str, Tensor] = {}
    for (name, ch), x in zip(wanted, inputs):
        x = tc.as_tensor(x)
        if x.data.ndim == 3:
            x = Tensor(x.data[None])
        if x.data.ndim != 4 or x.shape[3] != ch:
            raise ShapeError(f"input {name!r} must be NxHxWx{ch}, got {x.shape}")
        if x.shape[1:3] != (model.profile.input_h, model.profile.input_w):
            raise ShapeError(
                f"input {name!r} is {x.shape[1]}x{x.shape[2]}, model expects "
                f"{model.profile.input_h}x{model.profile.input_w}"
            )
        values[f"input_{name}"] = x

    p = model.params
    for layer in model.layers:
        if layer.op == "input":
            continue
        args = [values[i] for i in layer.inputs]
        if layer.op == "conv":
            out = tc.relu(tc.conv2d(args[0], p[f"{layer.name}/kernel"], p[f"{layer.name}/bias"]))
        elif layer.op == "pool":
            out = tc.maxpool2(args[0])
        elif layer.op == "concat":
            out = tc.concat_channels(args[0], args[1])
        elif layer.op == "dense":
            out = tc.relu(
                tc.dense_channelwise(args[0], p[f"{layer.name}/kernel"], p[f"{layer.name}/bias"])
            )
        elif layer.op == "dropout":
            out = tc.dropout(args[0], model.dropout_rate, rng, training)
        elif layer.op == "upconv":
            out = tc.conv2d_transpose(args[0], p[f"{layer.name}/kernel"], p[f"{layer.name}/bias"])
        elif layer.op == "head":
            out = tc.sigmoid(
                tc.dense_channelwise(args[0], p[f"{layer.name}/kernel"], p[f"{layer.name}/bias"])
            )
        else:  # pragma: no cover - layer list is built internally
            raise ValueError(layer.op)
        values[layer.name] = out
    return values[model.layers[-1].name]


def predict(model: Model, inputs) -> np.ndarray:
    """Inference without graph recording; returns an N x H x W x 1 array."""
    with tc.no_grad():
        return forward(model, inputs, training=False).data


def prepare_inputs(variant: ModelVariant, camera: np.ndarray, lidar: np.ndarray) -> list[np.ndarray]:
    """Turn 8-bit camera/LiDAR rasters ((N,)H,W,3) into the model's [0, 1] inputs."""
    cam = np.asarray(camera, dtype=np.float64) / 255.0
    lid = np.asarray(lidar, dtype=np.float64) / 255.0
    if variant.combined_input:
        return [np.concatenate([cam, lid], axis=-1)]
    if variant.twin_encoders:
        return [cam, lid]
    return [cam] if variant.camera_only else [lid]


# ---------------------------------------------------------------------------
# introspection
# ---------------------------------------------------------------------------


def parameter_count(model: Model) -> int:
    return int(sum(t.size for t in model.params.values()))


def describe_shapes(model: Model) -> list[tuple[str, tuple[int, int, int]]]:
    """``(layer name, (H, W, C))`` for every layer, in execution order."""
    shapes: dict[str, tuple[int, int, int]] = {}
    h, w = model.profile.input_h, model.profile.input_w
    out = []
    for layer in model.layers:
        if layer.op == "input":
            shape = (h, w, layer.channels)
        else:
            ih, iw, _ = shapes[layer.inputs[0]]
            if layer.op == "pool":
                ih, iw = ih // 2, iw // 2
            elif layer.op == "upconv":
                ih, iw = ih * 2, iw * 2
            elif layer.op == "concat":
                if any(shapes[i][:2] != (ih, iw) for i in layer.inputs):
                    raise ShapeError(f"{layer.name}: concat inputs disagree spatially")
            shape = (ih, iw, layer.channels)
        shapes[layer.name] = shape
        out.append((layer.name, shape))
    return out


def bottleneck_shape(model: Model) -> tuple[int, int, int]:
    """Shape of the feature map entering the first dense layer."""
    shapes = dict(describe_shapes(model))
    first_dense = next(layer for layer in model.layers if layer.name == "bottleneck/dense1")
    return shapes[first_dense.inputs[0]]


def encoder_output_shapes(model: Model) -> dict[str, tuple[int, int, int]]:
    shapes = dict(describe_shapes(model))
    return {scope: shapes[f"{scope}/block4/pool"] for scope, _ in _encoders(model.variant)}


def skip_edges(model: Model) -> list[tuple[str, str]]:
    """``(encoder layer, decoder concat)`` pairs bridging encoder and decoder."""
    return [(src, dst) for dst, src in model.skip_sources.items()]


def encoder_scopes(model: Model) -> list[str]:
    return [scope for scope, _ in _encoders(model.variant)]


def encoder_parameter_names(model: Model, scope: str) -> set[str]:
    return {k for k in model.params if k.startswith(scope + "/")}
