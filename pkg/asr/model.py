"""
The ASR network and the Baseline convolutional autoencoder.

ASR encodes an image with a stack of ConvBlocks; each block's output map
feeds a Modeler (a strided 1x1 convolution with sigmoid outputs) that emits
six ellipse variables per grid cell of one scale.  A BackgroundBlock on the
last map predicts the background color.  The renderer turns the resulting
structured latent back into an image.

DocString style: https://www.sphinx-doc.org/en/master/usage/extensions/example_numpy.html
"""

import dataclasses
import logging
import math

import numpy as np

from asr import autodiff as ad
from asr import layers
from asr import renderer
from asr.checkpoint import load_checkpoint, save_checkpoint
from asr.config import ModelConfig
from asr.errors import ConfigurationError, ContractError, DimensionError

logger = logging.getLogger(__name__)

ELLIPSE_VARIABLES = ("w", "h", "d", "ar", "ag", "ab")
MODELER_OUTPUTS = len(ELLIPSE_VARIABLES)

W_MIN, W_MAX = 0.1, 2.0


def _conv_out(side, kernel, stride, padding):
    return (side + 2 * padding - kernel) // stride + 1


class ConvBlock(layers.Module):
    """``convs`` repetitions of conv -> relu -> batchnorm."""

    def __init__(self, in_channels, out_channels, kernel=5, stride=2, convs=2, momentum=0.1, eps=1e-5):
        super().__init__()
        self.convs = layers.ModuleList()
        self.norms = layers.ModuleList()
        self.kernel, self.stride, self.padding = kernel, stride, kernel // 2

        channels = in_channels
        for _ in range(convs):
            self.convs.append(layers.Conv2d(channels, out_channels, kernel, stride=stride, padding=self.padding))
            self.norms.append(layers.BatchNorm2d(out_channels, momentum=momentum, eps=eps))
            channels = out_channels

    def output_side(self, side):
        for _ in self.convs:
            side = _conv_out(side, self.kernel, self.stride, self.padding)
        return side

    def forward(self, x):
        for conv, norm in zip(self.convs, self.norms):
            x = norm(ad.relu(conv(x)))
        return x


class BackgroundBlock(layers.Module):
    """flatten -> dense -> relu -> dense(3) -> sigmoid; biases start at one."""

    def __init__(self, in_features, hidden=64):
        super().__init__()
        self.hidden = layers.Dense(in_features, hidden, bias_init="ones")
        self.out = layers.Dense(hidden, 3, bias_init="ones")

    def forward(self, z):
        flat = ad.reshape(z, (z.shape[0], -1))
        return ad.sigmoid(self.out(ad.relu(self.hidden(flat))))


class Modeler(layers.Module):
    """Strided 1x1 convolution emitting the six ellipse variables of every cell of one scale."""

    def __init__(self, in_channels, stride):
        super().__init__()
        self.conv = layers.Conv2d(in_channels, MODELER_OUTPUTS, 1, stride=stride, padding=0)

    def forward(self, z, gate=1.0):
        return ad.sigmoid(self.conv(z)) * gate


def range_map(v):
    """Map gated sigmoid outputs [B,6,gh,gw] to (w, h, d [B,gh,gw], a [B,gh,gw,3])."""
    w = W_MIN + (W_MAX - W_MIN) * v[:, 0]
    h = W_MIN + (W_MAX - W_MIN) * v[:, 1]
    d = 2 * math.pi * v[:, 2]
    a = v[:, 3:6].transpose(0, 2, 3, 1)
    return w, h, d, a


@dataclasses.dataclass
class StructuredLatent:
    """Per-scale ellipse variables and the background color of a batch.

    Attributes:
        scales (list): one ``(w, h, d, a)`` tuple of tensors per scale; w, h, d are [B,gh,gw], a is [B,gh,gw,3]
        bg (Tensor): [B,3] background color
        canvases (list): per-scale transmission canvases, filled in by ``AsrModel.forward``
    """

    scales: list
    bg: object
    canvases: list = None

    @property
    def batch(self):
        return self.bg.shape[0]

    def cells(self, j):
        """Numpy array [B, cells, 6] of the variables of scale ``j`` in row-major cell order."""
        w, h, d, a = (np.asarray(t.data) for t in self.scales[j])
        batch = w.shape[0]
        cells = w.shape[1] * w.shape[2]
        shape = [w.reshape(batch, cells, 1), h.reshape(batch, cells, 1), d.reshape(batch, cells, 1)]
        return np.concatenate(shape + [a.reshape(batch, cells, 3)], axis=-1)

    def ellipses(self, sample, j):
        """Grid (list of rows) of EllipseParams of scale ``j`` for one sample."""
        w, h, d, a = (np.asarray(t.data)[sample] for t in self.scales[j])
        rows, cols = w.shape
        return [
            [
                renderer.EllipseParams(float(w[r, c]), float(h[r, c]), float(d[r, c]), tuple(a[r, c]))
                for c in range(cols)
            ]
            for r in range(rows)
        ]

    def mean_absorption(self):
        """Mean absorption over cells, channels and batch for each scale."""
        return [float(np.mean(t[3].data)) for t in self.scales]

    def to_vector(self):
        """Flat [B, 6 * total cells] serialization (504 values per image at the default geometry)."""
        return np.concatenate([self.cells(j).reshape(self.batch, -1) for j in range(len(self.scales))], axis=1)

    @classmethod
    def from_vector(cls, vector, scales, bg=None):
        """Inverse of ``to_vector`` for the given list of ScaleConfig."""
        vector = np.atleast_2d(np.asarray(vector))
        batch = vector.shape[0]
        expected = MODELER_OUTPUTS * sum(s.cells for s in scales)

        if vector.shape[1] != expected:
            raise DimensionError(f"structured latent axis (1) must have {expected} entries, got {vector.shape[1]}")

        per_scale = []
        start = 0
        for scale in scales:
            stop = start + MODELER_OUTPUTS * scale.cells
            cells = vector[:, start:stop].reshape(batch, scale.grid_h, scale.grid_w, MODELER_OUTPUTS)
            per_scale.append(
                (
                    ad.Tensor(cells[..., 0], dtype=vector.dtype),
                    ad.Tensor(cells[..., 1], dtype=vector.dtype),
                    ad.Tensor(cells[..., 2], dtype=vector.dtype),
                    ad.Tensor(cells[..., 3:6], dtype=vector.dtype),
                )
            )
            start = stop

        bg = ad.Tensor(np.ones((batch, 3)) if bg is None else bg, dtype=vector.dtype)
        return cls(scales=per_scale, bg=bg)

    def validate(self):
        # float32 range mapping may overshoot the endpoints by an ulp.
        tol = 1e-5
        for j, (w, h, d, a) in enumerate(self.scales):
            bounds = (("w", w, W_MIN, W_MAX), ("h", h, W_MIN, W_MAX), ("d", d, 0.0, 2 * math.pi), ("a", a, 0.0, 1.0))
            for name, t, low, high in bounds:
                values = np.asarray(t.data)
                if values.min() < low - tol or values.max() > high + tol:
                    raise ContractError(f"scale {j}: {name} outside [{low}, {high}]")
        return self


class AsrModel(layers.Module):
    """ConvBlocks, BackgroundBlock and one Modeler per scale, rendered by ``asr.renderer``."""

    kind = "asr"

    def __init__(self, config=None):
        super().__init__()
        config = config or ModelConfig()
        self.config = config
        self.scales = renderer.scale_configs(config.image_side, config.grids)
        self.render_config = renderer.RenderConfig(sharpness=config.sharpness, image_side=config.image_side)
        self.gates = [1.0] * len(self.scales)

        if len(config.conv_channels) != len(self.scales):
            raise ConfigurationError("model grids and conv_channels must list one entry per scale")

        self.conv_blocks = layers.ModuleList()
        self.modelers = layers.ModuleList()

        side, channels = config.image_side, 3
        self.map_sides = []
        for j, out_channels in enumerate(config.conv_channels):
            block = ConvBlock(
                channels,
                out_channels,
                kernel=config.conv_kernel,
                stride=config.conv_stride,
                convs=config.convs_per_block,
                momentum=config.bn_momentum,
                eps=config.bn_eps,
            )
            side = block.output_side(side)
            grid = self.scales[j].grid_h

            if side < grid or side % grid:
                raise ConfigurationError(
                    f"scale {j}: a {side}x{side} feature map cannot be strided down to a {grid}x{grid} grid"
                )

            self.conv_blocks.append(block)
            self.modelers.append(Modeler(out_channels, stride=side // grid))
            self.map_sides.append(side)
            channels = out_channels

        self.background_block = BackgroundBlock(side * side * channels, hidden=config.background_hidden)

    @property
    def ellipse_count(self):
        return sum(s.cells for s in self.scales)

    @property
    def latent_size(self):
        return MODELER_OUTPUTS * self.ellipse_count

    def set_gates(self, gates):
        gates = [float(g) for g in gates]
        if len(gates) != len(self.scales):
            raise ContractError(f"{len(gates)} gates for {len(self.scales)} scales")
        for j, gate in enumerate(gates):
            if not 0.0 <= gate <= 1.0:
                raise ContractError(f"gate {j} = {gate} outside [0, 1]")
        self.gates = gates

    def _check_image(self, image):
        image = ad.as_tensor(image)
        if image.ndim == 3:
            image = ad.reshape(image, (1,) + image.shape)

        side = self.config.image_side
        if image.ndim != 4 or image.shape[1:] != (3, side, side):
            raise DimensionError(f"expected images of shape [B,3,{side},{side}], got {image.shape}")

        return image

    def encode(self, image):
        """Return the ConvBlock output maps and the background color [B,3]."""
        x = self._check_image(image)
        maps = []
        for block in self.conv_blocks:
            x = block(x)
            maps.append(x)
        return maps, self.background_block(x)

    def model_scale(self, z, j, gate=None):
        """Gate and range-map the Modeler outputs of scale ``j`` into ``(w, h, d, a)``."""
        gate = self.gates[j] if gate is None else float(gate)
        if not 0.0 <= gate <= 1.0:
            raise ContractError(f"gate {j} = {gate} outside [0, 1]")

        v = self.modelers[j](z, gate)
        scale = self.scales[j]
        if v.shape[2:] != (scale.grid_h, scale.grid_w):
            raise ConfigurationError(
                f"scale {j}: modeler produced a {v.shape[2]}x{v.shape[3]} grid, expected {scale.grid_h}x{scale.grid_w}"
            )

        return range_map(v)

    def latent(self, image):
        maps, bg = self.encode(image)
        return StructuredLatent(scales=[self.model_scale(z, j) for j, z in enumerate(maps)], bg=bg)

    def render(self, latent):
        image, canvases = renderer.render_scene(latent.scales, latent.bg, self.scales, self.render_config, self.gates)
        latent.canvases = canvases
        return image

    def forward(self, image):
        latent = self.latent(image)
        return self.render(latent), latent

    def metadata(self):
        return {"kind": self.kind, "model": dataclasses.asdict(self.config), "gates": list(self.gates)}


class BaselineModel(layers.Module):
    """Conventional convolutional autoencoder with a global latent vector."""

    kind = "baseline"

    def __init__(self, config=None):
        super().__init__()
        config = config or ModelConfig()
        self.config = config

        encoder_channels = tuple(config.baseline_encoder_channels)
        decoder_channels = tuple(config.baseline_decoder_channels)
        kernel, padding = config.baseline_kernel, config.baseline_kernel // 2

        if len(encoder_channels) != len(decoder_channels):
            raise ConfigurationError("baseline encoder and decoder must have the same number of blocks")

        self.bottom_side = config.image_side >> len(encoder_channels)
        if self.bottom_side < 1 or self.bottom_side << len(encoder_channels) != config.image_side:
            raise ConfigurationError(
                f"a {config.image_side}-pixel image cannot be halved {len(encoder_channels)} times"
                " by the baseline encoder"
            )

        self.encoder_convs = layers.ModuleList()
        self.encoder_norms = layers.ModuleList()
        channels = 3
        for out_channels in encoder_channels:
            self.encoder_convs.append(layers.Conv2d(channels, out_channels, kernel, padding=padding, bias_init="zeros"))
            self.encoder_norms.append(layers.BatchNorm2d(out_channels, config.bn_momentum, config.bn_eps))
            channels = out_channels

        self.bottom_channels = channels
        flat = channels * self.bottom_side**2
        self.to_latent = layers.Dense(flat, config.baseline_latent, bias_init="zeros")
        self.from_latent = layers.Dense(config.baseline_latent, flat, bias_init="zeros")

        self.decoder_convs = layers.ModuleList()
        self.decoder_norms = layers.ModuleList()
        for out_channels in decoder_channels:
            self.decoder_convs.append(layers.Conv2d(channels, out_channels, kernel, padding=padding, bias_init="zeros"))
            self.decoder_norms.append(layers.BatchNorm2d(out_channels, config.bn_momentum, config.bn_eps))
            channels = out_channels

        self.output_conv = layers.Conv2d(channels, 3, kernel, padding=padding, bias_init="zeros")

    @property
    def latent_size(self):
        return self.config.baseline_latent

    def _check_image(self, image):
        image = ad.as_tensor(image)
        if image.ndim == 3:
            image = ad.reshape(image, (1,) + image.shape)

        side = self.config.image_side
        if image.ndim != 4 or image.shape[1:] != (3, side, side):
            raise DimensionError(f"expected images of shape [B,3,{side},{side}], got {image.shape}")

        return image

    def encode(self, image):
        """Global latent [B, latent]."""
        x = self._check_image(image)
        for conv, norm in zip(self.encoder_convs, self.encoder_norms):
            x = ad.maxpool2d(norm(ad.elu(conv(x))), 2)
        return self.to_latent(ad.reshape(x, (x.shape[0], -1)))

    def decode(self, latent):
        side = self.bottom_side
        x = ad.reshape(self.from_latent(latent), (latent.shape[0], self.bottom_channels, side, side))
        for conv, norm in zip(self.decoder_convs, self.decoder_norms):
            x = norm(ad.elu(conv(ad.upsample_nearest_2x(x))))
        return ad.sigmoid(self.output_conv(x))

    def forward(self, image):
        latent = self.encode(image)
        return self.decode(latent), latent

    def metadata(self):
        return {"kind": self.kind, "model": dataclasses.asdict(self.config)}


MODEL_KINDS = {"asr": AsrModel, "baseline": BaselineModel}


def build_model(kind, config=None, seed=0):
    """Construct and initialize a model of ``kind`` ("asr" or "baseline")."""
    if kind not in MODEL_KINDS:
        raise ConfigurationError(f"unknown model kind {kind!r}")

    model = MODEL_KINDS[kind](config)
    layers.init_parameters(model, seed=seed)

    logger.debug(f"build_model: {kind} with {model.parameter_count()} parameters")

    return model


def save_model(model, path, **metadata):
    meta = model.metadata()
    meta.update(metadata)
    precision = np.dtype(model.parameters()[0].dtype).itemsize
    save_checkpoint(path, model.state_dict(), meta, precision=precision)


def load_model(path):
    """Rebuild a model from a checkpoint written by ``save_model``.

    Returns
    -------
    tuple
        ``(model, metadata)`` with the model in evaluation mode.
    """
    state, metadata = load_checkpoint(path)

    if metadata.get("kind") not in MODEL_KINDS:
        raise ContractError(f"{path}: checkpoint does not describe a known model (kind {metadata.get('kind')!r})")

    fields = {f.name for f in dataclasses.fields(ModelConfig)}
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in metadata.get("model", {}).items() if k in fields}
    model = MODEL_KINDS[metadata["kind"]](ModelConfig(**values))
    model.load_state_dict(state)
    if "gates" in metadata:
        model.set_gates(metadata["gates"])

    return model.eval(), metadata


# Functional entry points.


def encode(model, image):
    return model.encode(image)


def model_scale(model, z, j, gate):
    return model.model_scale(z, j, gate)


def asr_forward(model, image):
    """Reconstruction [B,3,H,W] and StructuredLatent of an ASR model."""
    return model(image)


def baseline_forward(model, image):
    """Reconstruction [B,3,H,W] of a Baseline model."""
    reconstruction, _ = model(image)
    return reconstruction
