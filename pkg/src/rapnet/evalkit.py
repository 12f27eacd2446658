"""Mutual nearest-neighbour matching and the HPatches mean-matching-accuracy benchmark."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

THRESHOLDS = tuple(range(1, 11))
PROJECTION_FLOOR = 1e-12
IMAGE_EXTENSIONS = (".ppm", ".png", ".jpg", ".jpeg", ".bmp")
KINDS = {"i": "illumination", "v": "viewpoint"}


class BenchmarkError(ValueError):
    pass


@dataclass(frozen=True)
class MatchSet:
    pairs: np.ndarray  # (N, 2) int: index into a, index into b
    distances: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class MmaCurve:
    thresholds: tuple[int, ...]
    accuracy: np.ndarray
    matches: int

    def at(self, t: int) -> float:
        return float(self.accuracy[self.thresholds.index(t)])


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(sq, 0.0))


def match_mutual_nn(desc_a: np.ndarray, desc_b: np.ndarray) -> MatchSet:
    """Keep (i, j) when j is i's nearest neighbour in b and i is j's nearest in a."""
    if desc_a.ndim != 2 or desc_b.ndim != 2 or desc_a.shape[1] != desc_b.shape[1]:
        raise ValueError(f"descriptor dimensions differ: {desc_a.shape} vs {desc_b.shape}")
    if len(desc_a) == 0 or len(desc_b) == 0:
        return MatchSet(np.zeros((0, 2), int), np.zeros(0))
    d = pairwise_distances(desc_a, desc_b)
    nn_ab = d.argmin(axis=1)  # argmin keeps the lowest index on ties
    nn_ba = d.argmin(axis=0)
    ids = np.arange(len(desc_a))
    keep = nn_ba[nn_ab] == ids
    pairs = np.stack([ids[keep], nn_ab[keep]], axis=1)
    return MatchSet(pairs, d[pairs[:, 0], pairs[:, 1]])


def check_homography(H) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.shape != (3, 3):
        raise ValueError(f"homography must be 3x3, got {H.shape}")
    if abs(np.linalg.det(H)) < 1e-12:
        raise ValueError("homography is singular")
    return H


def project(H, pts: np.ndarray) -> np.ndarray:
    """Apply a homography to ``(N, 2)`` pixel coordinates."""
    H = check_homography(H)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ H.T
    if np.any(np.abs(hom[:, 2]) < PROJECTION_FLOOR):
        raise ValueError("point projects to infinity under the homography")
    return hom[:, :2] / hom[:, 2:]


def mma(matches: MatchSet, kps_a: np.ndarray, kps_b: np.ndarray, H, thresholds: Sequence[int] = THRESHOLDS) -> MmaCurve:
    """Fraction of matches whose reprojection error is within each pixel threshold (0 with no matches)."""
    thresholds = tuple(thresholds)
    H = check_homography(H)
    if len(matches) == 0:
        return MmaCurve(thresholds, np.zeros(len(thresholds)), 0)
    a = np.asarray(kps_a, np.float64)[matches.pairs[:, 0], :2]
    b = np.asarray(kps_b, np.float64)[matches.pairs[:, 1], :2]
    err = np.linalg.norm(project(H, a) - b, axis=1)
    acc = np.array([np.mean(err <= t) for t in thresholds])
    return MmaCurve(thresholds, acc, len(matches))


# --------------------------------------------------------------- benchmark


@dataclass
class SequenceResult:
    name: str
    kind: str
    curve: MmaCurve
    pairs: int
    skipped: int = 0


@dataclass
class BenchmarkResult:
    sequences: list[SequenceResult]
    aggregates: dict[str, MmaCurve] = field(default_factory=dict)
    skipped: int = 0

    def rows(self) -> list[tuple]:
        out = []
        for seq in self.sequences:
            for t, acc in zip(seq.curve.thresholds, seq.curve.accuracy):
                out.append((seq.name, seq.kind, t, float(acc), seq.curve.matches))
        for kind, curve in self.aggregates.items():
            for t, acc in zip(curve.thresholds, curve.accuracy):
                out.append(("ALL", kind, t, float(acc), curve.matches))
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sequence", "kind", "threshold", "accuracy", "matches"])
            for name, kind, t, acc, n in self.rows():
                w.writerow([name, kind, t, repr(acc), n])


def sequence_kind(name: str) -> str:
    return KINDS.get(name.split("_", 1)[0], "other")


def _sequence_images(seq_dir: Path) -> dict[int, Path]:
    out = {}
    for p in seq_dir.iterdir():
        if p.suffix.lower() in IMAGE_EXTENSIONS and p.stem.isdigit():
            out[int(p.stem)] = p
    return out


def evaluate_sequence(
    seq_dir: Path, extract_fn: Callable[[Path], object], thresholds: Sequence[int] = THRESHOLDS
) -> SequenceResult:
    images = _sequence_images(seq_dir)
    if 1 not in images:
        raise BenchmarkError(f"{seq_dir}: reference image 1 not found")
    skipped = 0
    try:
        ref = extract_fn(images[1])
    except (OSError, ValueError) as exc:
        logger.warning("skipping sequence %s: reference unreadable (%s)", seq_dir.name, exc)
        return SequenceResult(seq_dir.name, sequence_kind(seq_dir.name), MmaCurve(tuple(thresholds), np.zeros(len(thresholds)), 0), 0, len(images))
    curves = []
    for k in sorted(images):
        if k == 1:
            continue
        h_path = seq_dir / f"H_1_{k}"
        if not h_path.exists():
            raise BenchmarkError(f"{seq_dir.name}: missing homography file {h_path.name}")
        H = np.loadtxt(h_path).reshape(3, 3)
        try:
            query = extract_fn(images[k])
        except (OSError, ValueError) as exc:
            logger.warning("skipping %s: %s", images[k], exc)
            skipped += 1
            continue
        m = match_mutual_nn(ref.descriptors, query.descriptors)
        curves.append(mma(m, ref.keypoints, query.keypoints, H, thresholds))
    if curves:
        acc = np.mean([c.accuracy for c in curves], axis=0)
    else:
        acc = np.zeros(len(thresholds))
    curve = MmaCurve(tuple(thresholds), acc, int(sum(c.matches for c in curves)))
    return SequenceResult(seq_dir.name, sequence_kind(seq_dir.name), curve, len(curves), skipped)


def run_benchmark(
    dataset_root: str | Path,
    extract_fn: Callable[[Path], object],
    output: str | Path | None = None,
    thresholds: Sequence[int] = THRESHOLDS,
    threads: int = 1,
) -> BenchmarkResult:
    """Evaluate every sequence folder under ``dataset_root`` and average per kind.

    ``extract_fn`` maps an image path to an object with ``keypoints`` (original
    pixel coordinates in the first two columns) and ``descriptors``.
    """
    root = Path(dataset_root)
    if not root.is_dir():
        raise BenchmarkError(f"dataset root {root} is not a directory")
    seq_dirs = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name)
    if not seq_dirs:
        raise BenchmarkError(f"no sequences under {root}")
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(lambda d: evaluate_sequence(d, extract_fn, thresholds), seq_dirs))
    bench = BenchmarkResult(results, skipped=sum(r.skipped for r in results))
    groups = {"illumination": [], "viewpoint": [], "overall": []}
    for r in results:
        if r.pairs == 0:
            continue
        groups["overall"].append(r)
        if r.kind in groups:
            groups[r.kind].append(r)
    for kind, members in groups.items():
        if members:
            bench.aggregates[kind] = MmaCurve(
                tuple(thresholds),
                np.mean([m.curve.accuracy for m in members], axis=0),
                int(sum(m.curve.matches for m in members)),
            )
    if output is not None:
        bench.write_csv(output)
    return bench


def plot_curves(result: BenchmarkResult, path: str | Path) -> None:
    """One MMA-versus-threshold panel per sequence kind, next to the overall curve."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6), sharey=True)
    for ax, kind in zip(axes, ("overall", "illumination", "viewpoint")):
        curve = result.aggregates.get(kind)
        if curve is not None:
            ax.plot(curve.thresholds, curve.accuracy, marker="o")
        ax.set_title(kind.capitalize())
        ax.set_xlabel("threshold [px]")
        ax.set_xlim(1, 10)
        ax.set_ylim(0, 1)
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("MMA")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
