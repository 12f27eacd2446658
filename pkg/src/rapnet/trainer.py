"""Metric-learning of the attention head with a frozen backbone.

Each image's region map weights its dense descriptors into a single unit
global descriptor. For a triplet of one anchor, one positive (same location)
and four negatives (four other locations) the anchor-positive distance is
compared with the mean anchor-negative distance through a ratio loss,
after swapping anchor and positive whenever the positive sits closer to the
negatives.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from rapnet import heads
from rapnet.backbone import Backbone, forward_dense
from rapnet.locdata import LocationSet
from rapnet.rapw import tensor_checksum
from rapnet.tensorops import functional as fn
from rapnet.tensorops import graph as G

logger = logging.getLogger(__name__)

NUM_NEGATIVES = 4


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class GlobalDescriptor:
    vector: np.ndarray
    role: str = "anchor"


@dataclass(frozen=True)
class Triplet:
    anchor: str
    positive: str
    negatives: tuple[str, ...]

    @property
    def images(self) -> tuple[str, ...]:
        return (self.anchor, self.positive) + self.negatives


@dataclass(frozen=True)
class TripletDistances:
    d_ap: float
    d_an: float  # as measured, before the swap
    d_pn: float
    swapped: bool

    @property
    def effective_an(self) -> float:
        return self.d_pn if self.swapped else self.d_an


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    steps: int = 200
    seed: int = 0
    batch_size: int = 1
    threads: int = 1

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch size must be >= 1 and steps >= 0")


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    swap_rates: list[float] = field(default_factory=list)
    epochs: list[int] = field(default_factory=list)
    steps_per_epoch: int = 0

    def epoch_means(self) -> list[float]:
        out: dict[int, list[float]] = {}
        for e, loss in zip(self.epochs, self.losses):
            out.setdefault(e, []).append(loss)
        return [float(np.mean(out[e])) for e in sorted(out)]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "swapped_rate"])
            for i, (loss, rate) in enumerate(zip(self.losses, self.swap_rates)):
                w.writerow([i, repr(loss), repr(rate)])


# ------------------------------------------------------------- loss pieces


def aggregate_global(F, R, role: str = "anchor") -> GlobalDescriptor:
    """Sum of per-pixel descriptors weighted by the region map, then L2-normalized."""
    f = np.asarray(getattr(F, "values", F), dtype=np.float64)
    r = np.asarray(getattr(R, "values", R), dtype=np.float64)
    if f.shape[1:] != r.shape[-2:]:
        raise ValueError(f"aggregate_global: feature map {f.shape} and weights {r.shape} differ")
    g = np.tensordot(f, r.reshape(r.shape[-2:]), axes=([1, 2], [0, 1]))
    return GlobalDescriptor(fn.l2_normalize(g), role)


def triplet_distances(g_a, g_p, g_n: Sequence) -> TripletDistances:
    a, p = (np.asarray(getattr(v, "vector", v), np.float64) for v in (g_a, g_p))
    negs = [np.asarray(getattr(v, "vector", v), np.float64) for v in g_n]
    if any(v.shape != a.shape for v in [p, *negs]):
        raise ValueError("triplet_distances: descriptor dimensions differ")
    d_ap = float(np.linalg.norm(a - p))
    d_an = float(np.mean([np.linalg.norm(a - n) for n in negs]))
    d_pn = float(np.mean([np.linalg.norm(p - n) for n in negs]))
    return TripletDistances(d_ap, d_an, d_pn, d_an > d_pn)


def ratio_loss_terms(d_ap: float, d_an: float) -> tuple[float, float]:
    m = max(d_ap, d_an)
    ea, en = np.exp(d_ap - m), np.exp(d_an - m)
    return float((ea / (ea + en)) ** 2), float((1.0 - en / (ea + en)) ** 2)


def ratio_loss(d_ap: float, d_an: float) -> float:
    """Margin-free triplet loss; equals 2 * sigmoid(d_ap - d_an)^2."""
    t1, t2 = ratio_loss_terms(d_ap, d_an)
    return t1 + t2


def ratio_loss_graph(d_ap: G.Node, d_an: G.Node) -> G.Node:
    m = max(float(d_ap.value), float(d_an.value))  # gradient-neutral shift
    ea, en = G.exp(d_ap - m), G.exp(d_an - m)
    total = ea + en
    return G.square(ea / total) + G.square(1.0 - en / total)


def triplet_loss_graph(
    g: G.Graph,
    features: Sequence[np.ndarray],
    params: dict[str, G.Node],
    stats: dict[int, fn.BatchNormStats],
    mode: str = "train",
) -> tuple[G.Node, bool, dict[int, fn.BatchNormStats]]:
    """Record the loss of one triplet; ``features`` are the maps of a, p, n1..n4 in order."""
    descs = []
    for f in features:
        r, _, stats = heads.region_weight_graph(g.constant(f), params, stats, mode)
        descs.append(G.l2_normalize(G.weighted_sum(g.constant(f), r)))
    a, p, negs = descs[0], descs[1], descs[2:]
    d_ap = G.distance(a, p)
    d_an = G.scale(_sum_nodes([G.distance(a, n) for n in negs]), 1.0 / len(negs))
    d_pn = G.scale(_sum_nodes([G.distance(p, n) for n in negs]), 1.0 / len(negs))
    swapped = float(d_an.value) > float(d_pn.value)
    loss = ratio_loss_graph(d_ap, d_pn if swapped else d_an)
    return loss, swapped, stats


def _sum_nodes(nodes: Sequence[G.Node]) -> G.Node:
    total = nodes[0]
    for n in nodes[1:]:
        total = total + n
    return total


# ---------------------------------------------------------------- sampling


def mine_triplets(dataset: LocationSet, seed: int, epochs: int | None = None) -> Iterator[Triplet]:
    """Yield triplets epoch by epoch; each eligible image is the anchor once per epoch.

    An image is eligible when its location holds at least two images. The
    positive is drawn uniformly from the other members of that location; four
    negatives come from four distinct other locations, one uniform image each.
    """
    groups = dataset.groups()
    if len(groups) < NUM_NEGATIVES + 1:
        raise ValueError(f"need at least {NUM_NEGATIVES + 1} locations, got {len(groups)}")
    keys = sorted(groups)
    anchors = [(key, img) for key in keys if len(groups[key]) >= 2 for img in groups[key]]
    if not anchors:
        raise ValueError("no location has two or more images")
    rng = np.random.default_rng(seed)
    epoch = 0
    while epochs is None or epoch < epochs:
        for idx in rng.permutation(len(anchors)):
            key, anchor = anchors[idx]
            members = [m for m in groups[key] if m != anchor]
            positive = members[rng.integers(len(members))]
            others = [k for k in keys if k != key]
            chosen = rng.choice(len(others), NUM_NEGATIVES, replace=False)
            negatives = []
            for c in chosen:
                pool = groups[others[c]]
                negatives.append(pool[rng.integers(len(pool))])
            yield Triplet(anchor, positive, tuple(negatives))
        epoch += 1


def anchors_per_epoch(dataset: LocationSet) -> int:
    return sum(len(m) for m in dataset.groups().values() if len(m) >= 2)


# ---------------------------------------------------------------- training


def compute_features(
    backbone: Backbone,
    images: Sequence[str],
    load_image: Callable[[str], np.ndarray],
    max_edge: int = 640,
    threads: int = 1,
) -> dict[str, np.ndarray]:
    """Frozen-backbone feature maps for every image, keyed by image reference."""

    def one(ref):
        return forward_dense(backbone, backbone.preprocess(load_image(ref), max_edge)).values.astype(np.float64)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        maps = list(pool.map(one, images))
    return dict(zip(images, maps))


def train_attention(
    dataset: LocationSet,
    backbone: Backbone,
    init: heads.AttentionParams,
    config: TrainConfig,
    load_image: Callable[[str], np.ndarray],
    max_edge: int = 640,
    features: dict[str, np.ndarray] | None = None,
) -> tuple[heads.AttentionParams, TrainReport]:
    """Optimise the attention head by momentum gradient descent on the ratio loss.

    Only attention parameters move; the backbone is checked to be bitwise
    unchanged at the end. Returns the trained parameters and a per-step report.
    """
    fingerprint = {k: tensor_checksum(v) for k, v in backbone.tensors.items()}
    if features is None:
        features = compute_features(backbone, dataset.images(), load_image, max_edge, config.threads)
    init.validate()
    names = init.trainable_names()
    values = {n: init.tensors[n].astype(np.float64) for n in names}
    velocity = {n: np.zeros_like(v) for n, v in values.items()}
    stats = {k: init.stats_for(k) for k in heads.BRANCH_KERNELS}
    stats = {k: fn.BatchNormStats(s.mean.astype(np.float64), s.var.astype(np.float64)) for k, s in stats.items()}

    report = TrainReport(steps_per_epoch=-(-anchors_per_epoch(dataset) // config.batch_size))
    per_epoch = anchors_per_epoch(dataset)
    stream = mine_triplets(dataset, config.seed)
    seen = 0
    for step in range(config.steps):
        g = G.Graph(np.float64)
        nodes = {n: g.parameter(values[n], n) for n in names}
        losses, swaps = [], []
        for _ in range(config.batch_size):
            trip = next(stream)
            try:
                loss, swapped, stats = triplet_loss_graph(g, [features[i] for i in trip.images], nodes, stats)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"non-finite values at step {step}: {exc}") from None
            losses.append(loss)
            swaps.append(swapped)
            seen += 1
        total = G.scale(_sum_nodes(losses), 1.0 / len(losses))
        value = float(total.value)
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at step {step}")
        grads = g.backward(total)
        for n in names:
            velocity[n] = config.momentum * velocity[n] + grads[n]
            values[n] = values[n] - config.learning_rate * velocity[n]
            if not np.all(np.isfinite(values[n])):
                raise TrainingDiverged(f"parameter {n} became non-finite at step {step}")
        report.losses.append(value)
        report.swap_rates.append(float(np.mean(swaps)))
        report.epochs.append((seen - 1) // per_epoch)
        if step % 20 == 0:
            logger.info("step %d loss %.5f", step, value)

    if {k: tensor_checksum(v) for k, v in backbone.tensors.items()} != fingerprint:
        raise RuntimeError("backbone parameters changed during attention training")
    trained = dict(init.tensors)
    for n in names:
        trained[n] = values[n].astype(np.float32)
    for k, s in stats.items():
        trained[f"branch{k}/bn_mean"] = s.mean.astype(np.float32)
        trained[f"branch{k}/bn_var"] = s.var.astype(np.float32)
    return heads.AttentionParams(trained), report
