"""
Differentiable absorption renderer.

Each grid cell of a scale carries one ellipse.  A soft disc raster of side
2r+1 is warped by the ellipse's scale and rotation, tinted by its RGB
absorption, and the tinted rasters of a scale are fused multiplicatively into
a transmission canvas.  The final image is the product of all scale canvases
and a uniform background canvas.  The renderer has no trainable parameters.
"""

import functools
import logging
import math
from dataclasses import dataclass

import numpy as np

from asr import autodiff as ad
from asr.errors import ConfigurationError, ContractError

logger = logging.getLogger(__name__)

# Rasters overlap only their immediate neighbours, so cells whose row and
# column indices agree modulo 3 never touch and can be pasted together.
_FUSION_STEP = 3


@dataclass(frozen=True)
class ScaleConfig:
    """Grid geometry of one scale: ``grid_h`` x ``grid_w`` cells spaced ``spacing`` pixels apart."""

    index: int
    grid_h: int
    grid_w: int
    spacing: int

    @property
    def cells(self):
        return self.grid_h * self.grid_w

    @property
    def raster_side(self):
        return 2 * self.spacing + 1

    def positions(self):
        """Row-major (row, col) cell indices."""
        return [(row, col) for row in range(self.grid_h) for col in range(self.grid_w)]

    def offset(self, row, col):
        """Top-left canvas pixel of the raster of cell (row, col); the raster is centered on the cell center."""
        r = self.spacing
        return row * r + r // 2 - r, col * r + r // 2 - r


def scale_configs(image_side=256, grids=(8, 4, 2)):
    """Build one ScaleConfig per grid size; every grid must tile the image exactly."""
    scales = []
    for index, grid in enumerate(grids):
        if grid < 1 or image_side % grid:
            raise ConfigurationError(f"scale {index}: a {grid}x{grid} grid does not tile a {image_side}-pixel image")
        scales.append(ScaleConfig(index=index, grid_h=grid, grid_w=grid, spacing=image_side // grid))
    return scales


@dataclass(frozen=True)
class RenderConfig:
    """``sharpness`` is the steepness of the blob edge sigmoid; ``image_side`` the output raster side."""

    sharpness: float = 1.0
    image_side: int = 256

    def __post_init__(self):
        if not self.sharpness > 0:
            raise ConfigurationError(f"sharpness must be positive, got {self.sharpness}")


@dataclass
class EllipseParams:
    """One primitive: scale factors ``w``, ``h`` in [0.1, 2], rotation ``d`` in [0, 2pi] and RGB absorption ``a``."""

    w: float
    h: float
    d: float
    a: tuple

    def validate(self):
        for name in ("w", "h"):
            value = _scalar(getattr(self, name))
            if not 0.1 <= value <= 2.0:
                raise ContractError(f"ellipse {name}={value} outside [0.1, 2.0]")
        if not 0.0 <= _scalar(self.d) <= 2 * math.pi:
            raise ContractError(f"ellipse rotation d={_scalar(self.d)} outside [0, 2pi]")
        a = np.asarray(self.a.data if isinstance(self.a, ad.Tensor) else self.a, dtype=float)
        if a.shape != (3,) or a.min() < 0 or a.max() > 1:
            raise ContractError(f"ellipse absorption {a.tolist()} is not an RGB vector in [0,1]")
        return self


def _scalar(value):
    return value.item() if isinstance(value, ad.Tensor) else float(value)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))


@functools.lru_cache(maxsize=32)
def _blob_array(sharpness, spacing, dtype_name):
    side = 2 * spacing + 1
    offsets = np.arange(side, dtype=np.float64) - spacing
    distance = np.sqrt(offsets[:, None] ** 2 + offsets[None, :] ** 2)
    blob = _sigmoid(sharpness * (spacing - distance)).astype(dtype_name)
    blob.setflags(write=False)
    return blob


def render_blob(cfg, spacing):
    """Soft disc raster [1, 2r+1, 2r+1] with value sigmoid(sharpness * (r - distance from center)).

    Parameters
    ----------
    cfg : RenderConfig
    spacing : int
        Grid spacing r_j, which is also the disc radius.
    """
    if spacing < 1:
        raise ContractError(f"blob radius must be >= 1, got {spacing}")
    blob = _blob_array(float(cfg.sharpness), int(spacing), np.dtype(ad.get_dtype()).name)
    return ad.Tensor(blob[None])


def ellipse_theta(w, h, d):
    """Inverse affine maps [N,2,3] taking output raster coordinates to blob coordinates.

    The forward warp scales by (w, h) and then rotates by d about the raster
    center; sampling needs its inverse, diag(1/w, 1/h) @ R(-d).
    """
    w, h, d = ad.as_tensor(w), ad.as_tensor(h), ad.as_tensor(d)
    c, s = ad.cos(d), ad.sin(d)
    zero = ad.Tensor(np.zeros(d.shape), dtype=d.dtype)
    row_x = ad.stack([c / w, s / w, zero], axis=-1)
    row_y = ad.stack([-s / h, c / h, zero], axis=-1)
    return ad.stack([row_x, row_y], axis=-2)


def transform_rasters(blob, w, h, d):
    """Warp one shared blob [1,S,S] by N ellipse shapes (w, h, d each of shape [N]) into [N,1,S,S]."""
    side = blob.shape[-1]
    grid = ad.affine_grid(ellipse_theta(w, h, d), (side, side))
    return ad.grid_sample_bilinear(ad.reshape(blob, (1, 1, side, side)), grid)


def transform_blob(blob, p):
    """Warp a square, odd-sided blob [1,S,S] by the scale and rotation of ellipse ``p``."""
    side = blob.shape[-1]
    if blob.shape[-2] != side or side % 2 == 0:
        raise ContractError(f"transform_blob needs a square raster with an odd side, got {blob.shape}")

    def as_vector(value):
        value = ad.as_tensor(value)
        return ad.reshape(value, (1,))

    out = transform_rasters(blob, as_vector(p.w), as_vector(p.h), as_vector(p.d))
    return ad.reshape(out, (1, side, side))


def colorize(blob, a):
    """Tint a monochrome raster: channel c equals ``a[c] * blob``.

    ``blob`` is [1,S,S] with ``a`` of shape [3], or [N,1,S,S] with ``a`` of shape [N,3].
    """
    blob, a = ad.as_tensor(blob), ad.as_tensor(a)
    if blob.ndim == 3:
        return blob * ad.reshape(a, (3, 1, 1))
    return blob * ad.reshape(a, (a.shape[0], 3, 1, 1))


def fuse_canvas(rasters, scale, image_side, positions=None):
    """Fuse tinted rasters into a transmission canvas.

    Every canvas pixel holds, per channel, the product of (1 - R_i) over the
    rasters covering it; uncovered pixels stay 1.

    Parameters
    ----------
    rasters : Tensor
        [B, G, 3, S, S] tinted rasters, S = 2 * scale.spacing + 1.
    scale : ScaleConfig
    image_side : int
    positions : list of (row, col)
        Grid cell of each of the G rasters; defaults to all cells row-major.

    Returns
    -------
    Tensor
        [B, 3, image_side, image_side] canvas.
    """
    positions = scale.positions() if positions is None else list(positions)
    batch = rasters.shape[0]
    canvas = ad.Tensor(np.ones((batch, 3, image_side, image_side)), dtype=rasters.dtype)

    if not positions:
        return canvas

    groups = {}
    for index, (row, col) in enumerate(positions):
        groups.setdefault((row % _FUSION_STEP, col % _FUSION_STEP), []).append(index)

    for key in sorted(groups):
        members = groups[key]
        offsets = [scale.offset(*positions[i]) for i in members]
        pasted = ad.paste(rasters[:, members], offsets, (image_side, image_side))
        canvas = canvas * (1.0 - pasted)

    return canvas


def render_scale(w, h, d, a, scale, cfg):
    """Render the canvas [B,3,H,W] of one scale from per-cell tensors w, h, d [B,gh,gw] and a [B,gh,gw,3]."""
    batch = w.shape[0]
    count = batch * scale.cells
    side = scale.raster_side

    blob = render_blob(cfg, scale.spacing)
    shaped = transform_rasters(blob, ad.reshape(w, (count,)), ad.reshape(h, (count,)), ad.reshape(d, (count,)))
    tinted = colorize(shaped, ad.reshape(a, (count, 3)))

    return fuse_canvas(ad.reshape(tinted, (batch, scale.cells, 3, side, side)), scale, cfg.image_side)


def render_scene(scale_params, bg, scales, cfg, gates=None):
    """Render the final reconstruction.

    Parameters
    ----------
    scale_params : list of tuple
        Per scale ``(w, h, d, a)`` tensors as produced by the modelers.
    bg : Tensor
        [B, 3] background color.
    scales : list of ScaleConfig
    cfg : RenderConfig
    gates : sequence of float
        Scale gates the parameters were produced with; checked to lie in [0, 1].

    Returns
    -------
    tuple
        ``(image, canvases)``: the [B,3,H,W] reconstruction and the list of per-scale canvases.
    """
    if gates is not None:
        for index, gate in enumerate(gates):
            if not 0.0 <= float(gate) <= 1.0:
                raise ContractError(f"gate {index} = {gate} outside [0, 1]")

    if len(scale_params) != len(scales):
        raise ContractError(f"{len(scale_params)} parameter sets for {len(scales)} scales")

    bg = ad.as_tensor(bg)
    image = ad.reshape(bg, (bg.shape[0], 3, 1, 1))
    canvases = []

    for (w, h, d, a), scale in zip(scale_params, scales):
        canvas = render_scale(w, h, d, a, scale, cfg)
        canvases.append(canvas)
        image = image * canvas

    return image, canvases


def background_canvas(bg, image_side):
    """Uniform [B,3,H,W] canvas filled with the background colors [B,3] (for visualization)."""
    bg = np.asarray(bg.data if isinstance(bg, ad.Tensor) else bg)
    return np.broadcast_to(bg[:, :, None, None], bg.shape + (image_side, image_side)).copy()
