"""Dense descriptor network: a VGG-style conv stack with stride-1 pooling.

The stack is organised in stages of 3x3 convolutions (each followed by ReLU).
Between consecutive stages sits a 3x3 max-pool with stride 1 and padding 1, so
the feature map keeps the spatial extents of the input image. The full-scale
plan mirrors VGG-16 truncated after its tenth convolution.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from rapnet import rapw
from rapnet.tensorops import functional as fn

logger = logging.getLogger(__name__)

PREFIX = "backbone/"
FULL_PLAN = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512))
TOY_PLAN = ((8, 8), (16, 16))
# Caffe-style VGG statistics in 0-255 pixel units
IMAGENET_MEAN = (123.675, 116.28, 103.53)
IMAGENET_SCALE = (1 / 58.395, 1 / 57.12, 1 / 57.375)
POOL = (3, 1, 1)  # kernel, stride, padding

_CONV_NAME = re.compile(r"^backbone/stage(\d+)/conv(\d+)/(weight|bias)$")


class ModelError(ValueError):
    """Weights are missing or do not fit the architecture."""


@dataclass(frozen=True)
class BackboneConfig:
    plan: tuple[tuple[int, ...], ...] = FULL_PLAN
    in_channels: int = 3
    mean: tuple[float, float, float] = IMAGENET_MEAN
    scale: tuple[float, float, float] = IMAGENET_SCALE

    @property
    def channels(self) -> int:
        """Descriptor dimensionality (width of the last stage)."""
        return self.plan[-1][-1]

    @property
    def num_convs(self) -> int:
        return sum(len(s) for s in self.plan)

    @property
    def num_pools(self) -> int:
        return len(self.plan) - 1

    @property
    def receptive_radius(self) -> int:
        """Half-width of the region of the input that affects one output pixel."""
        return self.num_convs + self.num_pools * (POOL[0] // 2)

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        cin = self.in_channels
        for s, stage in enumerate(self.plan):
            for j, cout in enumerate(stage):
                shapes[f"{PREFIX}stage{s}/conv{j}/weight"] = (cout, cin, 3, 3)
                shapes[f"{PREFIX}stage{s}/conv{j}/bias"] = (cout,)
                cin = cout
        shapes[f"{PREFIX}preprocess/mean"] = (3,)
        shapes[f"{PREFIX}preprocess/scale"] = (3,)
        return shapes


@dataclass(frozen=True)
class PreprocessedImage:
    tensor: np.ndarray  # (3, H, W) float32, standardized
    scale_to_original: float
    original_size: tuple[int, int]  # (width, height)


@dataclass(frozen=True)
class DenseFeatureMap:
    values: np.ndarray  # (C, H, W)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    def descriptor(self, i: int, j: int) -> np.ndarray:
        return self.values[:, i, j]


@dataclass(frozen=True)
class Backbone:
    config: BackboneConfig
    tensors: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        for arr in self.tensors.values():
            arr.flags.writeable = False

    def layers(self) -> list[tuple[str, tuple[int, ...]]]:
        """Layer inventory as ``(name, shape)`` pairs in execution order."""
        return [(name, self.tensors[name].shape) for name in self.config.tensor_shapes()]

    def state(self) -> dict[str, np.ndarray]:
        return dict(self.tensors)

    def preprocess(self, image, max_edge: int = 640) -> PreprocessedImage:
        return preprocess(image, max_edge, self.config.mean, self.config.scale)

    def save(self, path: str | Path, extra: dict[str, np.ndarray] | None = None) -> None:
        tensors = self.state()
        if extra:
            tensors.update(extra)
        rapw.save(path, tensors)


def random_backbone(config: BackboneConfig = BackboneConfig(plan=TOY_PLAN), seed: int = 0) -> Backbone:
    """He-initialised weights; a stand-in wherever pretrained weights are unavailable."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in config.tensor_shapes().items():
        if name.endswith("/weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            tensors[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        elif name.endswith("/bias"):
            tensors[name] = np.zeros(shape, np.float32)
    tensors[f"{PREFIX}preprocess/mean"] = np.asarray(config.mean, np.float32)
    tensors[f"{PREFIX}preprocess/scale"] = np.asarray(config.scale, np.float32)
    # keep the config identical to what a save/load round trip reconstructs
    config = replace(
        config,
        mean=tuple(float(v) for v in tensors[f"{PREFIX}preprocess/mean"]),
        scale=tuple(float(v) for v in tensors[f"{PREFIX}preprocess/scale"]),
    )
    return Backbone(config, tensors)


def config_from_tensors(tensors: dict[str, np.ndarray]) -> BackboneConfig:
    """Recover the stage plan from tensor names and check every expected tensor is present."""
    layout: dict[int, set[int]] = {}
    for name in tensors:
        m = _CONV_NAME.match(name)
        if m:
            layout.setdefault(int(m.group(1)), set()).add(int(m.group(2)))
    if not layout:
        raise ModelError("weight file contains no backbone tensors")
    plan = []
    cin = 3
    for s in range(max(layout) + 1):
        convs = layout.get(s)
        if not convs:
            raise ModelError(f"missing tensor {PREFIX}stage{s}/conv0/weight")
        stage = []
        for j in range(max(convs) + 1):
            wname = f"{PREFIX}stage{s}/conv{j}/weight"
            if wname not in tensors:
                raise ModelError(f"missing tensor {wname}")
            w = tensors[wname]
            if w.ndim != 4 or w.shape[1:] != (cin, 3, 3):
                raise ModelError(f"tensor {wname} has shape {w.shape}, expected (*, {cin}, 3, 3)")
            stage.append(w.shape[0])
            cin = w.shape[0]
        plan.append(tuple(stage))
    for key in ("mean", "scale"):
        if f"{PREFIX}preprocess/{key}" not in tensors:
            raise ModelError(f"missing tensor {PREFIX}preprocess/{key}")
    mean = tuple(float(v) for v in tensors[f"{PREFIX}preprocess/mean"])
    scale = tuple(float(v) for v in tensors[f"{PREFIX}preprocess/scale"])
    return BackboneConfig(plan=tuple(plan), mean=mean, scale=scale)  # type: ignore[arg-type]


def backbone_from_tensors(tensors: dict[str, np.ndarray], config: BackboneConfig | None = None) -> Backbone:
    config = config or config_from_tensors(tensors)
    own = {}
    for name, shape in config.tensor_shapes().items():
        if name not in tensors:
            raise ModelError(f"missing tensor {name}")
        if tensors[name].shape != shape:
            raise ModelError(f"tensor {name} has shape {tensors[name].shape}, expected {shape}")
        own[name] = np.array(tensors[name], dtype=np.float32)
    return Backbone(config, own)


def load_weights(source: str | Path, config: BackboneConfig | None = None) -> Backbone:
    """Load a backbone from a RAPW file (other tensors in the file are ignored)."""
    try:
        tensors = rapw.load(source)
    except rapw.WeightFileError as exc:
        raise ModelError(str(exc)) from None
    backbone = backbone_from_tensors(tensors, config)
    logger.info(
        "loaded backbone from %s: %d convs, %d pools, %d-dim descriptors",
        source,
        backbone.config.num_convs,
        backbone.config.num_pools,
        backbone.config.channels,
    )
    return backbone


# -------------------------------------------------------------------- images


def read_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB") if im.mode not in ("L", "RGB") else im
            return np.asarray(im)
    except (OSError, ValueError) as exc:
        raise ModelError(f"cannot read image {path}: {exc}") from None


def preprocess(
    image,
    max_edge: int = 640,
    mean=IMAGENET_MEAN,
    scale=IMAGENET_SCALE,
) -> PreprocessedImage:
    """Downscale so the longest edge is at most ``max_edge`` and standardize.

    ``image`` is an 8-bit ``(H, W)`` or ``(H, W, 3)`` array or an image path.
    Images are never upscaled. Resizing uses Pillow's bilinear filter.
    """
    if isinstance(image, (str, Path)):
        image = read_image(image)
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ModelError(f"expected a non-empty grayscale or RGB image, got shape {arr.shape}")
    h, w = arr.shape[:2]
    longest = max(h, w)
    if longest > max_edge:
        ratio = max_edge / longest
        nw = max(1, int(np.floor(w * ratio + 0.5)))
        nh = max(1, int(np.floor(h * ratio + 0.5)))
        arr = np.asarray(Image.fromarray(arr.astype(np.uint8)).resize((nw, nh), Image.BILINEAR))
    x = arr.astype(np.float32).transpose(2, 0, 1)
    x = (x - np.asarray(mean, np.float32)[:, None, None]) * np.asarray(scale, np.float32)[:, None, None]
    return PreprocessedImage(
        tensor=np.ascontiguousarray(x),
        scale_to_original=longest / max(arr.shape[:2]),
        original_size=(w, h),
    )


# ------------------------------------------------------------------- forward


def forward_dense(backbone: Backbone, image: PreprocessedImage | np.ndarray) -> DenseFeatureMap:
    """Run the conv stack; output extents equal input extents."""
    x = image.tensor if isinstance(image, PreprocessedImage) else np.asarray(image, np.float32)
    if x.ndim != 3 or x.shape[0] != backbone.config.in_channels:
        raise ModelError(f"expected a (3, H, W) input tensor, got {x.shape}")
    if min(x.shape[1:]) < POOL[0]:
        raise ModelError(f"input extents {x.shape[1:]} below the minimum of {POOL[0]} pixels")
    t = backbone.tensors
    for s, stage in enumerate(backbone.config.plan):
        if s:
            x = fn.maxpool(x, *POOL)
        for j in range(len(stage)):
            x = fn.conv2d(x, t[f"{PREFIX}stage{s}/conv{j}/weight"], t[f"{PREFIX}stage{s}/conv{j}/bias"], 1, 1)
            x = fn.relu(x)
    return DenseFeatureMap(x)
