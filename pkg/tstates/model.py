"""
Transformational States Model
Encoder-decoder video predictor with a transformation-accumulating core

The encoder factorizes each frame into a state latent s and a
transformational latent d. A ConvLSTM stack integrates [d, s] into a
transformation estimate g, and the operator Phi applies g to s to produce
the next state. Only s reaches the decoder. Decoder layers mix their output
with the activation carried from the previous step through per-position
sigmoid gates.
"""

import logging
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from tstates.errors import ConfigError, ShapeError, UsageError
from tstates.tensor_core import (
    BatchNormState,
    ConvSpec,
    Mode,
    Tensor,
    batch_norm,
    concat_channels,
    channel_slice,
    conv2d,
    conv2d_transposed,
    dropout,
    keyed_rng,
    leaky_relu,
    sigmoid,
    split_channels,
    tanh,
    zeros,
    zeros_like,
)


LATENT_SIZE = 4

RNG_INIT = 0
RNG_DROPOUT = 1


class ResidualMode(Enum):
    FULL = "full"                                   # Z_prev from the previous decoder step
    SKIP_FROM_LAST_INPUT = "skip_from_last_input"   # Z_prev always from the encoder at t=T
    NONE = "none"                                   # No residual or skip connections


class CoreMode(Enum):
    TRANSFORMATIONAL = "transformational"
    CONVLSTM_ONLY = "convlstm_only"


class OutputNonlinearity(Enum):
    SIGMOID = "sigmoid"
    TANH = "tanh"


@dataclass
class ModelConfig:
    name: str = "desk"
    input_size: int = 64
    image_channels: int = 1
    input_frames: int = 10
    predict_frames: int = 10
    encoder_channels: Tuple[int, ...] = (16, 16, 24, 24, 32)
    state_channels: int = 16
    kernel_size: int = 4
    convlstm_layers: int = 3
    convlstm_hidden: int = 16
    convlstm_kernel: int = 3
    phi_layers: int = 3
    phi_kernel: int = 4
    residual_mode: ResidualMode = ResidualMode.FULL
    core_mode: CoreMode = CoreMode.TRANSFORMATIONAL
    image_residual: bool = False
    output_nonlinearity: OutputNonlinearity = OutputNonlinearity.SIGMOID
    encoder_dropout: float = 0.0
    dtype: str = "float32"
    seed: int = 0

    @property
    def transform_channels(self) -> int:
        """N_d, the channels of the transformational latent"""
        return self.encoder_channels[-1] - self.state_channels

    @property
    def decoder_channels(self) -> Tuple[int, ...]:
        """Mirror of the encoder schedule without its output layer, then the image"""
        return tuple(reversed(self.encoder_channels[:-1])) + (self.image_channels,)

    @property
    def value_range(self) -> Tuple[float, float]:
        if self.output_nonlinearity is OutputNonlinearity.SIGMOID:
            return 0.0, 1.0
        return -1.0, 1.0

    @property
    def numpy_dtype(self):
        return np.dtype(self.dtype).type

    def validate(self) -> "ModelConfig":
        """Raise ConfigError when the schedule cannot produce a 4×4 latent"""
        if not self.encoder_channels or any(c < 1 for c in self.encoder_channels):
            raise ConfigError(f"encoder channel schedule must be positive: {self.encoder_channels}")
        downsamples = len(self.encoder_channels) - 1
        if self.input_size != LATENT_SIZE * 2 ** downsamples:
            raise ConfigError(
                f"{len(self.encoder_channels)} encoder layers map {self.input_size}px to "
                f"{self.input_size / 2 ** downsamples:g}px, latent must be {LATENT_SIZE}×{LATENT_SIZE}"
            )
        if self.state_channels < 1 or self.transform_channels != self.state_channels:
            raise ConfigError(
                f"encoder output {self.encoder_channels[-1]} must split into N_s = N_d "
                f"(state_channels={self.state_channels})"
            )
        if self.input_frames < 1 or self.predict_frames < 0:
            raise ConfigError(f"need T >= 1 and K >= 0, got T={self.input_frames} K={self.predict_frames}")
        if self.convlstm_layers < 1 or self.convlstm_hidden < 1 or self.phi_layers < 1:
            raise ConfigError("core needs at least one ConvLSTM layer and one Phi layer")
        if self.core_mode is CoreMode.CONVLSTM_ONLY and self.convlstm_hidden != self.state_channels:
            raise ConfigError(
                f"convlstm_only core feeds g as the next state: hidden {self.convlstm_hidden} "
                f"must equal N_s {self.state_channels}"
            )
        if not 0.0 <= self.encoder_dropout < 1.0:
            raise ConfigError(f"encoder_dropout must lie in [0, 1), got {self.encoder_dropout}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        for name in ("kernel_size", "convlstm_kernel", "phi_kernel"):
            if getattr(self, name) not in (1, 3, 4):
                raise ConfigError(f"{name} must be 1, 3 or 4, got {getattr(self, name)}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, Enum):
                data[key] = value.value
            elif isinstance(value, tuple):
                data[key] = list(value)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {', '.join(sorted(unknown))}")
        values = dict(data)
        enums = {
            "residual_mode": ResidualMode,
            "core_mode": CoreMode,
            "output_nonlinearity": OutputNonlinearity,
        }
        try:
            for key, enum_type in enums.items():
                if key in values:
                    values[key] = enum_type(values[key])
        except ValueError as e:
            raise ConfigError(str(e))
        if "encoder_channels" in values:
            values["encoder_channels"] = tuple(int(c) for c in values["encoder_channels"])
        return cls(**values)


@dataclass
class LatentPair:
    s: Tensor
    d: Tensor


@dataclass
class CoreState:
    """Per-layer (h, c) of the ConvLSTM stack; g is the top hidden state"""
    layers: List[Tuple[Tensor, Tensor]]

    @property
    def g(self) -> Tensor:
        return self.layers[-1][0]


@dataclass
class ResidualState:
    """Carried decoder activations Z^l (None where a layer has no residual) and the carried image"""
    carried: List[Optional[Tensor]]
    image: Optional[Tensor] = None


@dataclass
class Census:
    components: Dict[str, int]
    gate_counts: List[int] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(self.components.values())

    def to_dict(self) -> Dict[str, Any]:
        return {"components": dict(self.components), "gate_counts": list(self.gate_counts),
                "total": self.total}


@dataclass
class ConvLayer:
    kernel: Tensor
    bias: Tensor
    spec: ConvSpec
    transposed: bool = False
    gamma: Optional[Tensor] = None
    beta: Optional[Tensor] = None
    bn_state: Optional[BatchNormState] = None


@dataclass
class GateParams:
    """1×1 convolution producing one weight per position: K^l weights + 1 bias"""
    kernel: Tensor
    bias: Tensor


def convlstm_step(x: Tensor, state: Tuple[Tensor, Tensor], kernel: Tensor,
                  bias: Tensor) -> Tuple[Tensor, Tensor]:
    """
    One ConvLSTM update without peepholes.

    Args:
        x: Input N×Cin×H×W
        state: (h, c), each N×Hc×H×W
        kernel: 4Hc×(Cin+Hc)×k×k gate kernel, gates ordered input, forget, output, candidate
        bias: 4Hc gate bias

    Returns:
        (h', c')
    """
    h, c = state
    hidden = h.dims[1]
    if kernel.dims[0] != 4 * hidden or kernel.dims[1] != x.dims[1] + hidden:
        raise ShapeError(f"ConvLSTM kernel {kernel.dims} does not fit input {x.dims} and hidden {hidden}")
    spec = ConvSpec((kernel.dims[2], kernel.dims[3]), 1, 4 * hidden)
    gates = conv2d(concat_channels(x, h), kernel, bias, spec)
    i = sigmoid(channel_slice(gates, 0, hidden))
    f = sigmoid(channel_slice(gates, hidden, 2 * hidden))
    o = sigmoid(channel_slice(gates, 2 * hidden, 3 * hidden))
    candidate = tanh(channel_slice(gates, 3 * hidden, 4 * hidden))
    c_next = f * c + i * candidate
    h_next = o * tanh(c_next)
    return h_next, c_next


def weighted_residual(y: Tensor, z_prev: Tensor, gate: GateParams,
                      gate_input: Optional[Tensor] = None) -> Tensor:
    """
    Z = (1 - sigma(W)) * Y + sigma(W) * Z_prev.

    W is a 1×1 convolution of `gate_input` (Y when omitted) with a single
    output channel, broadcast across all channels of Y.
    """
    if y.dims != z_prev.dims:
        raise ShapeError(f"residual operands differ: Y {y.dims} vs Z_prev {z_prev.dims}")
    source = y if gate_input is None else gate_input
    w = conv2d(source, gate.kernel, gate.bias, ConvSpec((1, 1), 1, 1))
    weight = sigmoid(w)
    return (1.0 - weight) * y + weight * z_prev


class TransformationalStatesModel:
    """
    Transformational-states video predictor.

    Parameters are allocated at construction and initialized from the
    config seed. Batch-norm parameters and running statistics are shared
    across timesteps.
    """

    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        self._logger = logging.getLogger("tstates-model")
        self._dtype = config.numpy_dtype
        self._init_rng = keyed_rng(config.seed, RNG_INIT)
        self._dropout_rng = keyed_rng(config.seed, RNG_DROPOUT)
        self._params: Dict[str, Tensor] = {}
        self._bn_states: Dict[str, BatchNormState] = {}
        self.mode = Mode.EVAL

        self._encoder = self._build_encoder()
        self._lstm = self._build_core_rnn()
        self._phi = self._build_phi() if config.core_mode is CoreMode.TRANSFORMATIONAL else []
        self._decoder = self._build_decoder()
        self._pairing = self._pair_residuals()
        self._gates, self._projections = self._build_residuals()
        self._image_gate = self._build_image_gate()

    # Parameter allocation

    def _uniform(self, dims: Tuple[int, ...], fan_in: int) -> np.ndarray:
        bound = np.sqrt(1.0 / fan_in)
        return self._init_rng.uniform(-bound, bound, size=dims).astype(self._dtype)

    def _param(self, name: str, data: np.ndarray, decay: bool = False) -> Tensor:
        t = Tensor(data.astype(self._dtype), requires_grad=True, name=name)
        t.decay = decay
        self._params[name] = t
        return t

    def _conv_layer(self, prefix: str, cin: int, cout: int, kernel: int, stride: int,
                    transposed: bool, with_bn: bool, decay: bool) -> ConvLayer:
        dims = (cin, cout, kernel, kernel) if transposed else (cout, cin, kernel, kernel)
        layer = ConvLayer(
            kernel=self._param(f"{prefix}.kernel", self._uniform(dims, cin * kernel * kernel), decay=decay),
            bias=self._param(f"{prefix}.bias", np.zeros(cout)),
            spec=ConvSpec((kernel, kernel), stride, cout),
            transposed=transposed,
        )
        if with_bn:
            layer.gamma = self._param(f"{prefix}.bn.gamma", np.ones(cout))
            layer.beta = self._param(f"{prefix}.bn.beta", np.zeros(cout))
            layer.bn_state = BatchNormState.fresh(cout, self._dtype)
            self._bn_states[f"{prefix}.bn"] = layer.bn_state
        return layer

    def _build_encoder(self) -> List[ConvLayer]:
        cfg = self.config
        layers = []
        cin = cfg.image_channels
        last = len(cfg.encoder_channels) - 1
        for i, cout in enumerate(cfg.encoder_channels):
            layers.append(self._conv_layer(
                f"encoder.{i}", cin, cout, cfg.kernel_size, 1 if i == last else 2,
                transposed=False, with_bn=i > 0, decay=True,
            ))
            cin = cout
        return layers

    def _build_core_rnn(self) -> List[Tuple[Tensor, Tensor]]:
        cfg = self.config
        hidden = cfg.convlstm_hidden
        k = cfg.convlstm_kernel
        cells = []
        cin = cfg.transform_channels + cfg.state_channels
        for j in range(cfg.convlstm_layers):
            fan_in = (cin + hidden) * k * k
            bias = np.zeros(4 * hidden)
            bias[hidden:2 * hidden] = 1.0
            cells.append((
                self._param(f"core.lstm.{j}.kernel", self._uniform((4 * hidden, cin + hidden, k, k), fan_in)),
                self._param(f"core.lstm.{j}.bias", bias),
            ))
            cin = hidden
        return cells

    def _build_phi(self) -> List[ConvLayer]:
        cfg = self.config
        layers = []
        cin = cfg.convlstm_hidden + cfg.state_channels
        for j in range(cfg.phi_layers):
            layers.append(self._conv_layer(
                f"core.phi.{j}", cin, cfg.state_channels, cfg.phi_kernel, 1,
                transposed=False, with_bn=False, decay=False,
            ))
            cin = cfg.state_channels
        return layers

    def _build_decoder(self) -> List[ConvLayer]:
        cfg = self.config
        layers = []
        cin = cfg.state_channels
        schedule = cfg.decoder_channels
        last = len(schedule) - 1
        for j, cout in enumerate(schedule):
            layers.append(self._conv_layer(
                f"decoder.{j}", cin, cout, cfg.kernel_size, 1 if j == last else 2,
                transposed=True, with_bn=j < last, decay=True,
            ))
            cin = cout
        return layers

    def _encoder_sizes(self) -> List[int]:
        cfg = self.config
        last = len(cfg.encoder_channels) - 1
        return [cfg.input_size >> (i + 1) if i < last else LATENT_SIZE for i in range(last + 1)]

    def _decoder_sizes(self) -> List[int]:
        cfg = self.config
        last = len(cfg.decoder_channels) - 1
        return [LATENT_SIZE << (j + 1) if j < last else cfg.input_size for j in range(last + 1)]

    def _pair_residuals(self) -> List[Optional[int]]:
        """Encoder layer index feeding each non-output decoder layer, by equal spatial size"""
        if self.config.residual_mode is ResidualMode.NONE:
            return [None] * (len(self._decoder) - 1)
        encoder_sizes = self._encoder_sizes()[:-1]
        pairing: List[Optional[int]] = []
        for size in self._decoder_sizes()[:-1]:
            matches = [i for i, s in enumerate(encoder_sizes) if s == size]
            pairing.append(matches[-1] if matches else None)
        return pairing

    def _build_residuals(self) -> Tuple[List[Optional[GateParams]], List[Optional[ConvLayer]]]:
        cfg = self.config
        gates: List[Optional[GateParams]] = []
        projections: List[Optional[ConvLayer]] = []
        for j, source in enumerate(self._pairing):
            if source is None:
                gates.append(None)
                projections.append(None)
                continue
            channels = cfg.decoder_channels[j]
            gates.append(GateParams(
                kernel=self._param(f"residual.{j}.gate.kernel", self._uniform((1, channels, 1, 1), channels)),
                bias=self._param(f"residual.{j}.gate.bias", np.zeros(1)),
            ))
            encoder_channels = cfg.encoder_channels[source]
            if encoder_channels != channels:
                projections.append(self._conv_layer(
                    f"residual.{j}.proj", encoder_channels, channels, 1, 1,
                    transposed=False, with_bn=False, decay=False,
                ))
            else:
                projections.append(None)
        return gates, projections

    def _build_image_gate(self) -> Optional[GateParams]:
        cfg = self.config
        if not cfg.image_residual or cfg.residual_mode is ResidualMode.NONE:
            return None
        channels = cfg.image_channels
        return GateParams(
            kernel=self._param("residual.image.gate.kernel", self._uniform((1, channels, 1, 1), channels)),
            bias=self._param("residual.image.gate.bias", np.zeros(1)),
        )

    # Introspection

    def named_parameters(self) -> Dict[str, Tensor]:
        return dict(self._params)

    def parameters(self) -> List[Tensor]:
        return list(self._params.values())

    def batch_norm_states(self) -> Dict[str, BatchNormState]:
        return dict(self._bn_states)

    def gate_params(self) -> List[Optional[GateParams]]:
        return list(self._gates)

    @property
    def image_gate(self) -> Optional[GateParams]:
        return self._image_gate

    def census(self) -> Census:
        """Exact parameter counts per component"""
        components = {
            "encoder": 0, "core_rnn": 0, "core_phi": 0, "decoder": 0,
            "residual_gates": 0, "residual_projections": 0, "image_gate": 0,
        }
        prefixes = [
            ("encoder.", "encoder"), ("core.lstm.", "core_rnn"), ("core.phi.", "core_phi"),
            ("decoder.", "decoder"), ("residual.image.", "image_gate"),
        ]
        for name, t in self._params.items():
            for prefix, component in prefixes:
                if name.startswith(prefix):
                    break
            else:
                component = "residual_projections" if ".proj." in name else "residual_gates"
            components[component] += t.size
        gate_counts = [g.kernel.size + g.bias.size for g in self._gates if g is not None]
        return Census(components, gate_counts)

    def train(self) -> "TransformationalStatesModel":
        self.mode = Mode.TRAIN
        return self

    def eval(self) -> "TransformationalStatesModel":
        self.mode = Mode.EVAL
        return self

    # Forward pieces

    def _apply_conv(self, layer: ConvLayer, x: Tensor) -> Tensor:
        op = conv2d_transposed if layer.transposed else conv2d
        out = op(x, layer.kernel, layer.bias, layer.spec)
        if layer.bn_state is not None:
            out = batch_norm(out, layer.gamma, layer.beta, self.mode, layer.bn_state)
        return out

    def _as_input(self, frames: Union[Tensor, np.ndarray]) -> Tensor:
        data = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
        return Tensor(data.astype(self._dtype, copy=False))

    def encode(self, frame: Union[Tensor, np.ndarray]) -> Tuple[LatentPair, List[Tensor]]:
        """
        Encode one frame batch N×C×H×W.

        Returns:
            The (s, d) latent pair and the hidden-layer activations used to
            seed the residual connections
        """
        cfg = self.config
        x = frame if isinstance(frame, Tensor) else self._as_input(frame)
        expected = (cfg.image_channels, cfg.input_size, cfg.input_size)
        if x.data.ndim != 4 or tuple(x.dims[1:]) != expected:
            raise ShapeError(f"frame dims {x.dims} do not match N×{expected[0]}×{expected[1]}×{expected[2]}")

        activations = []
        last = len(self._encoder) - 1
        for i, layer in enumerate(self._encoder):
            pre = self._apply_conv(layer, x)
            if i == last:
                x = tanh(pre)
            else:
                x = dropout(leaky_relu(pre), cfg.encoder_dropout, self.mode, self._dropout_rng)
                activations.append(x)
        s, d = split_channels(x, cfg.state_channels)
        return LatentPair(s=s, d=d), activations

    def initial_core_state(self, batch: int) -> CoreState:
        dims = (batch, self.config.convlstm_hidden, LATENT_SIZE, LATENT_SIZE)
        return CoreState([(zeros(dims, self._dtype), zeros(dims, self._dtype))
                          for _ in range(self.config.convlstm_layers)])

    def accumulate_transform(self, core: CoreState, d: Tensor, s: Tensor) -> CoreState:
        """Feed [d, s] through the ConvLSTM stack; the new g is the top hidden state"""
        x = concat_channels(d, s)
        layers = []
        for (kernel, bias), state in zip(self._lstm, core.layers):
            h, c = convlstm_step(x, state, kernel, bias)
            layers.append((h, c))
            x = h
        return CoreState(layers)

    def apply_transform(self, g: Tensor, s: Tensor) -> Tensor:
        """Phi: three stride-1 convolutions over [g, s] ending in tanh"""
        if not self._phi:
            raise UsageError("convlstm_only core has no Phi operator")
        x = concat_channels(g, s)
        last = len(self._phi) - 1
        for j, layer in enumerate(self._phi):
            pre = self._apply_conv(layer, x)
            x = tanh(pre) if j == last else leaky_relu(pre)
        return x

    def _next_state(self, core: CoreState, s: Tensor) -> Tensor:
        if self.config.core_mode is CoreMode.CONVLSTM_ONLY:
            return core.g
        return self.apply_transform(core.g, s)

    def seed_residuals(self, activations: Sequence[Tensor], last_frame: Tensor) -> ResidualState:
        """Residual sources for the first prediction step: encoder activations and the image at t=T"""
        carried: List[Optional[Tensor]] = []
        for source, projection in zip(self._pairing, self._projections):
            if source is None:
                carried.append(None)
                continue
            z = activations[source]
            if projection is not None:
                z = self._apply_conv(projection, z)
            carried.append(z)
        image = last_frame if self._image_gate is not None else None
        return ResidualState(carried=carried, image=image)

    def _output(self, pre: Tensor) -> Tensor:
        if self.config.output_nonlinearity is OutputNonlinearity.SIGMOID:
            return sigmoid(pre)
        return tanh(pre)

    def decode(self, s_hat: Tensor, residual: ResidualState) -> Tuple[Tensor, ResidualState]:
        """
        Decode a predicted state.

        The decoder sees only s. Each gated layer mixes its activation with
        the carried Z^l; the output image is mixed after the output
        nonlinearity.

        Returns:
            The image and the residual state the next step inherits
        """
        x = s_hat
        carried: List[Optional[Tensor]] = []
        for j, layer in enumerate(self._decoder[:-1]):
            pre = self._apply_conv(layer, x)
            y = leaky_relu(pre)
            gate = self._gates[j]
            if gate is not None and residual.carried[j] is not None:
                y = weighted_residual(y, residual.carried[j], gate, gate_input=pre)
            carried.append(y)
            x = y

        pre = self._apply_conv(self._decoder[-1], x)
        image = self._output(pre)
        if self._image_gate is not None and residual.image is not None:
            image = weighted_residual(image, residual.image, self._image_gate, gate_input=pre)

        if self.config.residual_mode is ResidualMode.SKIP_FROM_LAST_INPUT:
            return image, residual
        return image, ResidualState(carried=carried, image=image)

    def predict_sequence(self, inputs: Union[Tensor, np.ndarray],
                         steps: Optional[int] = None) -> List[Tensor]:
        """
        Predict future frames from T input frames.

        Args:
            inputs: N×T×C×H×W frames in the model's value range
            steps: Number of frames to predict (the configured K when omitted)

        Returns:
            One N×C×H×W tensor per predicted frame
        """
        cfg = self.config
        x = inputs if isinstance(inputs, Tensor) else self._as_input(inputs)
        if x.data.ndim != 5:
            raise ShapeError(f"inputs must be N×T×C×H×W, got {x.dims}")
        if x.dims[1] != cfg.input_frames:
            raise UsageError(f"expected exactly {cfg.input_frames} input frames, got {x.dims[1]}")
        steps = cfg.predict_frames if steps is None else steps
        if steps < 0:
            raise UsageError(f"steps must be >= 0, got {steps}")
        if steps == 0:
            return []

        frames = [self._as_input(x.data[:, t]) for t in range(cfg.input_frames)]
        core = self.initial_core_state(x.dims[0])
        pair, activations = None, []
        for frame in frames:
            pair, activations = self.encode(frame)
            core = self.accumulate_transform(core, pair.d, pair.s)

        residual = self.seed_residuals(activations, frames[-1])
        s_current = pair.s
        zero_d = zeros_like(pair.d)
        predictions = []
        for k in range(steps):
            if k > 0:
                core = self.accumulate_transform(core, zero_d, s_current)
            s_hat = self._next_state(core, s_current)
            image, residual = self.decode(s_hat, residual)
            predictions.append(image)
            s_current = s_hat
        return predictions

    def rollout(self, inputs: Union[Tensor, np.ndarray], steps: int) -> np.ndarray:
        """Recursive prediction for `steps` frames; returns N×steps×C×H×W"""
        frames = self.predict_sequence(inputs, steps=steps)
        if not frames:
            cfg = self.config
            n = np.asarray(inputs.data if isinstance(inputs, Tensor) else inputs).shape[0]
            return np.zeros((n, 0, cfg.image_channels, cfg.input_size, cfg.input_size), dtype=self._dtype)
        return np.stack([f.data for f in frames], axis=1)


def build_model(config: ModelConfig) -> Tuple[TransformationalStatesModel, Census]:
    """Allocate and initialize every parameter; return the model and its census"""
    model = TransformationalStatesModel(config)
    census = model.census()
    model._logger.info(f"Built {config.name} model: {census.total} parameters {census.components}")
    return model, census
