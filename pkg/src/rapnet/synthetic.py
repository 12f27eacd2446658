"""Synthetic images and datasets used to exercise training and the benchmark harness."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from rapnet.locdata import Location, LocationSet


@dataclass
class OccluderDataset:
    locations: LocationSet
    images: dict[str, np.ndarray]  # (H, W, 3) uint8
    masks: dict[str, np.ndarray]  # (H, W) bool, True on the occluder

    def load(self, ref: str) -> np.ndarray:
        return self.images[ref]


def location_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth colored texture: a few random oriented gratings blended with two colors."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    field = np.zeros((size, size))
    for _ in range(3):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.15, 0.5)
        phase = rng.uniform(0, 2 * np.pi)
        field += np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    field = (field - field.min()) / (np.ptp(field) + 1e-9)
    c0, c1 = rng.uniform(0, 255, 3), rng.uniform(0, 255, 3)
    img = c0[None, None] * (1 - field[..., None]) + c1[None, None] * field[..., None]
    return img


def occluder_dataset(
    n_locations: int = 10,
    per_location: int = 6,
    size: int = 32,
    area: float = 0.2,
    seed: int = 0,
    contrast: float = 1.0,
) -> OccluderDataset:
    """Fixed texture per location plus a per-image random-noise patch covering ``area`` of the frame.

    ``contrast`` scales each texture about mid-gray; the occluder noise always
    spans the full 0-255 range.
    """
    rng = np.random.default_rng(seed)
    side = int(round(np.sqrt(area) * size))
    images, masks, locs = {}, {}, []
    for loc in range(n_locations):
        texture = 127.5 + contrast * (location_texture(rng, size) - 127.5)
        members = []
        for k in range(per_location):
            y0, x0 = rng.integers(0, size - side + 1, 2)
            img = texture.copy()
            img[y0 : y0 + side, x0 : x0 + side] = rng.uniform(0, 255, (side, side, 3))
            mask = np.zeros((size, size), bool)
            mask[y0 : y0 + side, x0 : x0 + side] = True
            ref = f"loc{loc:02d}/img{k}.png"
            images[ref] = np.clip(np.round(img), 0, 255).astype(np.uint8)
            masks[ref] = mask
            members.append(ref)
        locs.append(Location(loc, "synthetic", None, members))
    return OccluderDataset(LocationSet({"synthetic": locs}), images, masks)


def checkerboard(size: tuple[int, int], square: int = 4) -> np.ndarray:
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w]
    board = ((yy // square + xx // square) % 2).astype(np.float64)
    return np.repeat((board * 255)[..., None], 3, axis=2).astype(np.uint8)


def warp_image(image: np.ndarray, H: np.ndarray, out_size: tuple[int, int] | None = None) -> np.ndarray:
    """Resample ``image`` so that pixel p of the output shows ``image`` at H^-1 p (bilinear)."""
    h, w = out_size or image.shape[:2]
    Hinv = np.linalg.inv(H)
    coeffs = (Hinv / Hinv[2, 2]).ravel()[:8]
    im = Image.fromarray(image)
    return np.asarray(im.transform((w, h), Image.PERSPECTIVE, tuple(coeffs), Image.BILINEAR))


def write_sequence(root: str | Path, name: str, images: list[np.ndarray], homographies: list[np.ndarray]) -> Path:
    """Write an HPatches-style folder: ``1.ppm..N.ppm`` and ``H_1_k`` for k >= 2."""
    seq = Path(root) / name
    seq.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(images, 1):
        Image.fromarray(img).save(seq / f"{k}.ppm")
    for k, H in enumerate(homographies, 2):
        np.savetxt(seq / f"H_1_{k}", np.asarray(H, np.float64))
    return seq
