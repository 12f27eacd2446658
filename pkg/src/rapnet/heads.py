"""Weight estimators over a dense feature map.

* point-wise reliability: a soft local-maximum / channel-maximum score with a
  hard-detection companion mask;
* region-wise invariability: a three-branch attention head run on a 2x2
  max-pooled copy of the feature map and upsampled back.

Both maps are normalized per image by dividing by their spatial maximum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from rapnet.tensorops import functional as fn
from rapnet.tensorops import graph as G

ATTN_PREFIX = "attention/"
BRANCH_KERNELS = (3, 5, 7)
TRAINABLE_SUFFIXES = ("weight", "bias", "bn_scale", "bn_shift")


@dataclass(frozen=True)
class PointWeightMap:
    values: np.ndarray  # (1, H, W)


@dataclass(frozen=True)
class RegionWeightMap:
    values: np.ndarray  # (1, H, W), spatial max 1
    unnormalized: np.ndarray  # softplus output before division by the max
    stats: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


# ------------------------------------------------------------------ detection


def _neighborhoods(x: np.ndarray, pad_mode: str, **pad_kw) -> np.ndarray:
    """3x3 neighbourhoods of every pixel as a ``(C, H, W, 9)`` array (row-major, centre at 4)."""
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode=pad_mode, **pad_kw)
    win = sliding_window_view(padded, (3, 3), axis=(1, 2))
    return win.reshape(win.shape[:3] + (9,))


def hard_detect(F) -> np.ndarray:
    """Boolean (H, W) mask of pixels that are a strict 3x3 local maximum in their strongest channel.

    The strongest channel is the lowest-index argmax over channels. Neighbours
    outside the image do not take part in the comparison.
    """
    f = np.asarray(getattr(F, "values", F), dtype=np.float64)
    win = _neighborhoods(f, "constant", constant_values=-np.inf)
    others = np.delete(win, 4, axis=-1).max(axis=-1)
    local_max = f > others  # (C, H, W)
    best = f.argmax(axis=0)
    return np.take_along_axis(local_max, best[None], axis=0)[0]


def point_weight(F) -> PointWeightMap:
    """Soft detection score ``max_k alpha_k * beta_k`` normalized to a spatial max of 1.

    ``alpha`` is a 3x3 spatial softmax of the map divided by its global maximum
    (edge-replicated at the border), ``beta`` the ratio of a channel to the
    per-pixel channel maximum, zeroed where that maximum is not positive.
    """
    f = np.asarray(getattr(F, "values", F), dtype=np.float64)
    gmax = f.max()
    e = f / gmax if gmax > 0 else f
    win = _neighborhoods(e, "edge")
    local = win.max(axis=-1)
    alpha = np.exp(e - local) / np.exp(win - local[..., None]).sum(axis=-1)
    depth_max = f.max(axis=0)
    safe = np.where(depth_max > 0, depth_max, 1.0)
    beta = np.where(depth_max > 0, f / safe, 0.0)
    score = (alpha * beta).max(axis=0)
    top = score.max()
    if top > 0:
        score = score / top
    return PointWeightMap(score[None].astype(np.float32))


# ------------------------------------------------------------------ attention


@dataclass(frozen=True)
class AttentionParams:
    """Tensors of the attention head keyed by name without the ``attention/`` prefix."""

    tensors: dict[str, np.ndarray]

    @property
    def channels(self) -> int:
        return self.tensors["branch3/weight"].shape[1]

    def trainable_names(self) -> list[str]:
        return sorted(k for k in self.tensors if k.rsplit("/", 1)[1] in TRAINABLE_SUFFIXES)

    def stats_for(self, k: int) -> fn.BatchNormStats:
        return fn.BatchNormStats(self.tensors[f"branch{k}/bn_mean"], self.tensors[f"branch{k}/bn_var"])

    def updated(self, tensors: dict[str, np.ndarray]) -> "AttentionParams":
        merged = dict(self.tensors)
        merged.update(tensors)
        return AttentionParams(merged)

    def prefixed(self) -> dict[str, np.ndarray]:
        return {ATTN_PREFIX + k: np.asarray(v, np.float32) for k, v in self.tensors.items()}

    @classmethod
    def from_prefixed(cls, tensors: dict[str, np.ndarray]) -> "AttentionParams":
        own = {k[len(ATTN_PREFIX) :]: np.array(v, np.float32) for k, v in tensors.items() if k.startswith(ATTN_PREFIX)}
        if not own:
            raise KeyError("no attention tensors found")
        params = cls(own)
        params.validate()
        return params

    def validate(self) -> None:
        c = self.channels
        width = branch_width(c)
        for k in BRANCH_KERNELS:
            expect = {
                f"branch{k}/weight": (width, c, k, k),
                f"branch{k}/bn_scale": (width,),
                f"branch{k}/bn_shift": (width,),
                f"branch{k}/bn_mean": (width,),
                f"branch{k}/bn_var": (width,),
            }
            for name, shape in expect.items():
                if name not in self.tensors:
                    raise KeyError(f"missing attention tensor {ATTN_PREFIX}{name}")
                if self.tensors[name].shape != shape:
                    raise ValueError(f"attention tensor {name} has shape {self.tensors[name].shape}, expected {shape}")
        if self.tensors.get("fusion/weight", np.empty(0)).shape != (1, 3 * width, 1, 1):
            raise ValueError(f"attention fusion/weight must have shape (1, {3 * width}, 1, 1)")
        if self.tensors.get("fusion/bias", np.empty(0)).shape != (1,):
            raise ValueError("attention fusion/bias must have shape (1,)")


def branch_width(channels: int) -> int:
    return max(1, channels // 4)


def init_attention(channels: int, seed: int = 0, fusion_scale: float = 0.1) -> AttentionParams:
    """Fresh attention parameters that start close to uniform attention.

    Branch kernels are uniform in +-sqrt(6 / fan_in); the fusion kernel uses a
    ``fusion_scale`` fraction of its own fan-in bound and the fusion bias is
    ln(e - 1) so that softplus of a zero pre-activation is exactly 1.
    """
    rng = np.random.default_rng(seed)
    width = branch_width(channels)
    t: dict[str, np.ndarray] = {}
    for k in BRANCH_KERNELS:
        bound = np.sqrt(6.0 / (channels * k * k))
        t[f"branch{k}/weight"] = rng.uniform(-bound, bound, (width, channels, k, k)).astype(np.float32)
        t[f"branch{k}/bn_scale"] = np.ones(width, np.float32)
        t[f"branch{k}/bn_shift"] = np.zeros(width, np.float32)
        t[f"branch{k}/bn_mean"] = np.zeros(width, np.float32)
        t[f"branch{k}/bn_var"] = np.ones(width, np.float32)
    bound = fusion_scale * np.sqrt(1.0 / (3 * width))
    t["fusion/weight"] = rng.uniform(-bound, bound, (1, 3 * width, 1, 1)).astype(np.float32)
    t["fusion/bias"] = np.array([np.log(np.e - 1.0)], np.float32)
    return AttentionParams(t)


def region_weight_graph(
    F: G.Node, params: dict[str, G.Node], stats: dict[int, fn.BatchNormStats], mode: str
) -> tuple[G.Node, G.Node, dict[int, fn.BatchNormStats]]:
    """Attention head on a recorded graph.

    ``params`` maps unprefixed names (``branch3/weight``...) to nodes. Returns
    the normalized map, the softplus map before normalization and the
    batchnorm statistics after this pass.
    """
    _, h, w = F.shape
    if h < 2 or w < 2:
        raise fn.ShapeError(f"region_weight needs extents >= 2, got {h}x{w}")
    pooled = G.maxpool(G.pad_to_even(F), 2, 2, 0)
    branches = []
    new_stats = {}
    for k in BRANCH_KERNELS:
        y = G.conv2d(pooled, params[f"branch{k}/weight"], None, 1, k // 2)
        y, new_stats[k] = G.batchnorm(y, params[f"branch{k}/bn_scale"], params[f"branch{k}/bn_shift"], mode, stats[k])
        branches.append(G.activate(y, "relu"))
    z = G.conv2d(G.concat(branches), params["fusion/weight"], params["fusion/bias"], 1, 0)
    raw = G.crop(G.upsample_nearest(G.activate(z, "softplus")), h, w)
    return G.div(raw, G.max_(raw)), raw, new_stats


def region_weight(F, params: AttentionParams, mode: str = "infer") -> RegionWeightMap:
    """Region-wise invariability map of a feature map; pure in both modes.

    In train mode the returned map carries the updated batchnorm running
    statistics in ``stats``; the input parameters are left untouched.
    """
    f = np.asarray(getattr(F, "values", F))
    dtype = np.float64 if f.dtype == np.float64 else np.float32
    g = G.Graph(dtype)
    nodes = {name: g.constant(v) for name, v in params.tensors.items()}
    stats = {k: params.stats_for(k) for k in BRANCH_KERNELS}
    r, raw, new_stats = region_weight_graph(g.constant(f), nodes, stats, mode)
    updated = {}
    for k, s in new_stats.items():
        updated[f"branch{k}/bn_mean"] = np.asarray(s.mean, np.float32)
        updated[f"branch{k}/bn_var"] = np.asarray(s.var, np.float32)
    return RegionWeightMap(r.value.astype(np.float32), raw.value.astype(np.float32), updated)
