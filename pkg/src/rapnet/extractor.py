"""Keypoint extraction: re-weight the point map by the region map and pick the top K.

The per-pixel score is ``P * exp(R - mean(R))``: pixels whose invariability
beats the image average are amplified, the rest damped. Only hard-detected
pixels are eligible, so re-weighting changes the ranking but never adds points.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rapnet import heads
from rapnet.backbone import Backbone, forward_dense
from rapnet.tensorops.functional import l2_normalize_rows

RAPF_MAGIC = b"RAPF"
RAPF_VERSION = 1


class FeatureFileError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreMap:
    values: np.ndarray  # (1, H, W)
    r_mean: float


@dataclass(frozen=True)
class ExtractOptions:
    top_k: int = 500
    max_edge: int = 640
    border: int = 8
    use_region: bool = True


@dataclass
class FeatureSet:
    keypoints: np.ndarray  # (K, 3): x, y, score in original-image pixels
    descriptors: np.ndarray  # (K, C), unit rows
    image_size: tuple[int, int]  # original (width, height)
    scale: float = 1.0
    meta: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.keypoints)

    @property
    def xy(self) -> np.ndarray:
        return self.keypoints[:, :2]


def score_map(P, R) -> ScoreMap:
    p = np.asarray(getattr(P, "values", P), dtype=np.float64)
    r = np.asarray(getattr(R, "values", R), dtype=np.float64)
    if p.shape != r.shape:
        raise ValueError(f"score_map: point map {p.shape} and region map {r.shape} differ")
    r_mean = float(r.mean())
    return ScoreMap((p * np.exp(r - r_mean)).astype(np.float32), r_mean)


def select_topk(scores, mask: np.ndarray, k: int, border: int = 0) -> np.ndarray:
    """Pick up to ``k`` masked pixels at least ``border`` px from every edge.

    Returns an ``(n, 3)`` array of ``(x, y, score)`` rows ordered by score
    descending, then y, then x.
    """
    if k < 1 or border < 0:
        raise ValueError("select_topk needs k >= 1 and border >= 0")
    s = np.asarray(getattr(scores, "values", scores))
    s = s.reshape(s.shape[-2:])
    h, w = s.shape
    keep = np.zeros_like(mask, dtype=bool)
    keep[border : h - border, border : w - border] = mask[border : h - border, border : w - border]
    ys, xs = np.nonzero(keep)  # already row-major, i.e. (y, x) ascending
    vals = s[ys, xs]
    order = np.argsort(-vals, kind="stable")[:k]
    return np.stack([xs[order], ys[order], vals[order]], axis=1).astype(np.float64)


def extract(
    image,
    backbone: Backbone,
    attention: heads.AttentionParams | None,
    options: ExtractOptions = ExtractOptions(),
) -> FeatureSet:
    """Full inference pipeline from an image (array or path) to a :class:`FeatureSet`.

    With ``attention=None`` or ``options.use_region=False`` the point map is
    used on its own, which is what a constant region map reduces to.
    """
    pre = backbone.preprocess(image, options.max_edge)
    fmap = forward_dense(backbone, pre)
    P = heads.point_weight(fmap)
    mask = heads.hard_detect(fmap)
    if attention is not None and options.use_region:
        R = heads.region_weight(fmap, attention, "infer")
        scores = score_map(P, R).values
    else:
        scores = P.values
    picked = select_topk(scores, mask, options.top_k, options.border)
    rows, cols = picked[:, 1].astype(int), picked[:, 0].astype(int)
    desc = fmap.values[:, rows, cols].T
    if len(desc):
        desc = l2_normalize_rows(desc)
    kps = picked.copy()
    kps[:, :2] *= pre.scale_to_original
    return FeatureSet(
        keypoints=kps,
        descriptors=np.asarray(desc, np.float32).reshape(len(kps), fmap.channels),
        image_size=pre.original_size,
        scale=pre.scale_to_original,
    )


# --------------------------------------------------------------- feature files


def write_features(path: str | Path, features: FeatureSet) -> None:
    k, c = features.descriptors.shape
    w, h = features.image_size
    head = RAPF_MAGIC + struct.pack("<5I", RAPF_VERSION, k, c, w, h)
    body = np.ascontiguousarray(features.keypoints, dtype="<f4").tobytes()
    body += np.ascontiguousarray(features.descriptors, dtype="<f4").tobytes()
    Path(path).write_bytes(head + body)


def read_features(path: str | Path) -> FeatureSet:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FeatureFileError(f"cannot read {path}: {exc}") from None
    if buf[:4] != RAPF_MAGIC or len(buf) < 24:
        raise FeatureFileError(f"{path}: not a RAPF file")
    version, k, c, w, h = struct.unpack_from("<5I", buf, 4)
    if version != RAPF_VERSION:
        raise FeatureFileError(f"{path}: unsupported RAPF version {version}")
    if len(buf) != 24 + 4 * (3 * k + k * c):
        raise FeatureFileError(f"{path}: size does not match {k} keypoints of dimension {c}")
    kps = np.frombuffer(buf, "<f4", 3 * k, 24).reshape(k, 3).astype(np.float64)
    desc = np.frombuffer(buf, "<f4", k * c, 24 + 12 * k).reshape(k, c).astype(np.float32)
    return FeatureSet(kps, desc, (w, h))


def write_features_text(path: str | Path, features: FeatureSet) -> None:
    """One keypoint per line: ``x y score d0 d1 ...``."""
    with open(path, "w", encoding="utf-8") as fh:
        w, h = features.image_size
        fh.write(f"# width={w} height={h} count={len(features)} dim={features.descriptors.shape[1]}\n")
        for kp, d in zip(features.keypoints, features.descriptors):
            fh.write(" ".join([f"{kp[0]:.3f}", f"{kp[1]:.3f}", f"{kp[2]:.6g}"] + [f"{v:.6g}" for v in d]) + "\n")
