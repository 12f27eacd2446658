"""Location datasets built from posed image sequences.

Images are grouped incrementally: the first image founds location 0 and each
later image joins the closest existing location whose founding pose is within
both the distance and the orientation threshold, or founds a new location.
"""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

logger = logging.getLogger(__name__)

QUAT_TOL = 1e-6
TUM_QUAT_TOL = 1e-3  # text files carry ~6 digits; renormalized on read
DEFAULT_DIST_THRESH = 1.0
DEFAULT_ANGLE_THRESH = 30.0
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".ppm", ".bmp")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class PosedImage:
    path: str
    timestamp: float
    position: tuple[float, float, float]
    orientation: tuple[float, float, float, float]  # qx, qy, qz, qw

    def __post_init__(self):
        n = float(np.linalg.norm(self.orientation))
        if abs(n - 1.0) > QUAT_TOL:
            raise ValueError(f"{self.path}: quaternion norm {n:.9f} is not 1")


@dataclass
class Location:
    id: int
    scene: str
    founding: PosedImage | None
    members: list[str] = field(default_factory=list)


@dataclass
class LocationSet:
    scenes: dict[str, list[Location]]

    def __post_init__(self):
        self.index = {}
        for scene, locs in self.scenes.items():
            for loc in locs:
                for m in loc.members:
                    self.index[m] = (scene, loc.id)

    def groups(self) -> dict[tuple[str, int], list[str]]:
        return {(s, loc.id): list(loc.members) for s, locs in self.scenes.items() for loc in locs}

    def images(self) -> list[str]:
        return [m for s in sorted(self.scenes) for loc in self.scenes[s] for m in loc.members]

    def location_of(self, image: str) -> tuple[str, int]:
        return self.index[image]

    @property
    def num_locations(self) -> int:
        return sum(len(v) for v in self.scenes.values())

    @property
    def num_images(self) -> int:
        return len(self.index)


# ------------------------------------------------------------------- poses


def _check_unit(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if abs(np.linalg.norm(q) - 1.0) > QUAT_TOL:
        raise ValueError(f"quaternion {q} is not unit length")
    return q


def pose_delta(a: PosedImage, b: PosedImage) -> tuple[float, tuple[float, float, float]]:
    """Distance in metres and ZYX Euler angles (yaw, pitch, roll; degrees) of ``a^-1 * b``.

    Angles are wrapped to (-180, 180].
    """
    qa, qb = _check_unit(a.orientation), _check_unit(b.orientation)
    dist = float(np.linalg.norm(np.subtract(b.position, a.position)))
    rel = Rotation.from_quat(qa).inv() * Rotation.from_quat(qb)
    angles = rel.as_euler("ZYX", degrees=True)
    wrapped = tuple(float(180.0 if v <= -180.0 else v) for v in angles)
    return dist, wrapped  # type: ignore[return-value]


def extract_locations(
    sequence: Sequence[PosedImage],
    dist_thresh: float = DEFAULT_DIST_THRESH,
    angle_thresh: float = DEFAULT_ANGLE_THRESH,
    scene: str = "scene",
) -> LocationSet:
    """Group a posed sequence into locations.

    Candidates are locations whose founding pose is closer than
    ``dist_thresh`` and whose largest Euler-angle change is below
    ``angle_thresh``. The image joins the nearest candidate by distance
    (lowest id on ties); with no candidate it founds a new location.
    """
    if not sequence:
        raise ValueError("extract_locations needs at least one image")
    if dist_thresh <= 0 or angle_thresh <= 0:
        raise ValueError("thresholds must be positive")
    locations: list[Location] = []
    for img in sequence:
        best, best_dist = None, np.inf
        for loc in locations:
            dist, angles = pose_delta(loc.founding, img)
            if dist < dist_thresh and max(abs(v) for v in angles) < angle_thresh and dist < best_dist:
                best, best_dist = loc, dist
        if best is None:
            best = Location(len(locations), scene, img)
            locations.append(best)
        best.members.append(img.path)
    return LocationSet({scene: locations})


def read_tum(path: str | Path, image_template: str = "{timestamp:.6f}.png") -> list[PosedImage]:
    """Parse ``timestamp tx ty tz qx qy qz qw`` lines; '#' starts a comment."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ManifestError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            t, tx, ty, tz, qx, qy, qz, qw = map(float, parts)
            q = np.array([qx, qy, qz, qw])
            if abs(np.linalg.norm(q) - 1.0) > TUM_QUAT_TOL:
                raise ManifestError(f"{path}:{lineno}: quaternion is not unit length")
            out.append(
                PosedImage(
                    image_template.format(timestamp=t, index=len(out)),
                    t,
                    (tx, ty, tz),
                    tuple(q / np.linalg.norm(q)),
                )
            )
    return out


# ---------------------------------------------------------------- manifests


def parse_manifest(lines: Iterable[str], source: str = "<manifest>") -> LocationSet:
    """Build a set from ``<relative_path> <scene> <location_id>`` lines."""
    seen: dict[str, int] = {}
    members: dict[str, dict[int, list[str]]] = defaultdict(lambda: defaultdict(list))
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ManifestError(f"{source}:{lineno}: expected '<path> <scene> <location_id>'")
        path, scene, loc = parts
        try:
            loc_id = int(loc)
        except ValueError:
            raise ManifestError(f"{source}:{lineno}: location id {loc!r} is not an integer") from None
        if loc_id < 0:
            raise ManifestError(f"{source}:{lineno}: unknown location reference {loc_id}")
        if path in seen:
            raise ManifestError(f"{source}:{lineno}: duplicate image entry {path} (first on line {seen[path]})")
        seen[path] = lineno
        members[scene][loc_id].append(path)
    if not seen:
        raise ManifestError(f"{source}: manifest lists no images")
    scenes = {}
    for scene in sorted(members):
        ids = sorted(members[scene])
        if ids != list(range(len(ids))):
            missing = sorted(set(range(max(ids) + 1)) - set(ids))
            raise ManifestError(f"{source}: scene {scene!r} references location {max(ids)} but lacks {missing}")
        scenes[scene] = [Location(i, scene, None, members[scene][i]) for i in ids]
    return LocationSet(scenes)


def load_manifest(path: str | Path) -> LocationSet:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_manifest(fh, str(path))
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from None


def write_manifest(path: str | Path, dataset: LocationSet) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# path scene location_id\n")
        for scene in sorted(dataset.scenes):
            for loc in dataset.scenes[scene]:
                for m in loc.members:
                    fh.write(f"{m} {scene} {loc.id}\n")


def scan_directory(root: str | Path) -> LocationSet:
    """Read the ``<root>/<scene>/location_<id>/<image>`` layout into a set."""
    root = Path(root)
    lines = []
    for scene_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for loc_dir in sorted(p for p in scene_dir.iterdir() if p.is_dir() and p.name.startswith("location_")):
            loc_id = loc_dir.name[len("location_") :]
            for img in sorted(loc_dir.iterdir()):
                if img.suffix.lower() in IMAGE_EXTENSIONS:
                    lines.append(f"{img.relative_to(root).as_posix()} {scene_dir.name} {loc_id}")
    return parse_manifest(lines, str(root))


@dataclass
class ValidationReport:
    per_scene: dict[str, tuple[int, int]]  # scene -> (locations, images)
    violations: list[str]

    @property
    def total_locations(self) -> int:
        return sum(v[0] for v in self.per_scene.values())

    @property
    def total_images(self) -> int:
        return sum(v[1] for v in self.per_scene.values())

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        rows = [f"{s:<12} {n_loc:>5} locations {n_img:>6} images" for s, (n_loc, n_img) in self.per_scene.items()]
        rows.append(f"{'total':<12} {self.total_locations:>5} locations {self.total_images:>6} images")
        rows.extend(f"violation: {v}" for v in self.violations)
        return "\n".join(rows)


def validate(dataset: LocationSet) -> ValidationReport:
    per_scene = {}
    violations = []
    counts = Counter()
    for scene, locs in dataset.scenes.items():
        per_scene[scene] = (len(locs), sum(len(loc.members) for loc in locs))
        for i, loc in enumerate(locs):
            if loc.id != i:
                violations.append(f"scene {scene}: location ids are not dense (found {loc.id} at position {i})")
            if not loc.members:
                violations.append(f"scene {scene}: location {loc.id} has no images")
            if loc.founding is not None and loc.members and loc.members[0] != loc.founding.path:
                violations.append(f"scene {scene}: location {loc.id} founding pose is not its first member")
            counts.update(loc.members)
    violations.extend(f"image {p} belongs to {n} locations" for p, n in sorted(counts.items()) if n > 1)
    return ValidationReport(per_scene, violations)
