"""Subset machinery: route images into class subsets, fine-tune one feature
network per subset, and pick the most relevant subset per image with either a
centroid-based or a network-based selector.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from . import convnet
from .cluster import ClassClusterMap, KMeansModel, LdaModel, kmeans_assign, lda_transform
from .convnet import Network, Tap, TrainConfig
from .errors import ContractError, ShapeError
from .numkit import Rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SubsetInfo:
    classes: np.ndarray  # original class ids, ascending
    rows: np.ndarray  # indices into the training arrays, in row order
    local_labels: np.ndarray  # per row, dense in [0, len(classes))


@dataclass(frozen=True)
class SubsetPartition:
    subsets: tuple[SubsetInfo, ...]

    @property
    def k(self) -> int:
        return len(self.subsets)

    def sizes(self) -> tuple[int, ...]:
        return tuple(int(s.rows.size) for s in self.subsets)


@dataclass(frozen=True)
class SelectorDecision:
    """One-hot subset weights: exactly one entry is 1."""

    weights: np.ndarray
    chosen: int


@dataclass(frozen=True)
class CentroidSelector:
    """Routes an image to the nearest pre-clustering centroid of its
    lda-projected penultimate feature."""

    kmeans: KMeansModel
    lda: LdaModel
    base: Network


@dataclass(frozen=True)
class NetSelector:
    """Softmax network over subset labels; the head has one output per subset."""

    net: Network


Selector = CentroidSelector | NetSelector


@dataclass
class SubsetEnsemble:
    k: int
    nets: tuple[Network, ...]
    tap: Tap = Tap.FC_PENULTIMATE
    selector: Selector | None = None

    def validate(self, class_counts: tuple[int, ...] | None = None) -> None:
        if self.k != len(self.nets) or self.k < 1:
            raise ContractError("ensemble must hold exactly k nets")
        dims = {net.spec.tap_dim(self.tap) for net in self.nets}
        if len(dims) != 1:
            raise ContractError("all subset nets must share the tap dimensionality")
        if class_counts is not None:
            for net, c in zip(self.nets, class_counts):
                if net.spec.class_count != c:
                    raise ContractError("subset net head size must equal its subset class count")
        if isinstance(self.selector, CentroidSelector) and self.selector.kmeans.k != self.k:
            raise ContractError("centroid selector k must match the ensemble")
        if isinstance(self.selector, NetSelector) and self.selector.net.spec.class_count != self.k:
            raise ContractError("selector net head size must match the ensemble")

    @property
    def feature_dim(self) -> int:
        return self.nets[0].spec.tap_dim(self.tap)


def build_partition(cmap: ClassClusterMap, labels) -> SubsetPartition:
    """Split rows by their class's subset; local labels are dense per subset.

    Membership depends only on classes, so permuting row order permutes each
    subset's row list but never its membership set.
    """
    labels = np.asarray(labels).astype(np.int64)
    if labels.ndim != 1 or labels.size == 0:
        raise ShapeError("labels must be a nonempty 1-d array")
    n_classes = cmap.class_to_subset.size
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ContractError("dataset contains a class that the cluster map does not cover")
    subsets = []
    for k in range(cmap.k):
        classes = np.flatnonzero(cmap.class_to_subset == k)
        rows = np.flatnonzero(np.isin(labels, classes))
        if rows.size == 0:
            raise ContractError(f"subset {k} has no rows in this dataset")
        remap = {int(c): i for i, c in enumerate(classes)}
        local = np.array([remap[int(c)] for c in labels[rows]], dtype=np.int64)
        subsets.append(SubsetInfo(classes=classes, rows=rows, local_labels=local))
    return SubsetPartition(subsets=tuple(subsets))


def train_subset_nets(
    partition: SubsetPartition,
    images: np.ndarray,
    base: Network,
    cfg: TrainConfig,
    workers: int = 1,
) -> SubsetEnsemble:
    """Fine-tune one feature network per subset from the shared base trunk.

    Each net starts from the base trunk with its head re-initialized to the
    subset's class count and trains only on that subset's rows.  Per-subset
    seeds derive from cfg.seed, so results do not depend on scheduling order.
    """
    cfg.validate()

    def _train_one(k: int) -> Network:
        info = partition.subsets[k]
        if info.classes.size == 1:
            log.warning(
                "subset %d contains a single class; its softmax head is degenerate", k
            )
        head_seed, train_seed = convnet.subset_train_seeds(cfg.seed, k)
        spec_k, params_k = convnet.reinit_head(
            base.spec, base.params, int(info.classes.size), Rng(head_seed)
        )
        cfg_k = dataclasses.replace(
            cfg, seed=train_seed, batch_size=min(cfg.batch_size, int(info.rows.size))
        )
        trained, _ = convnet.train(spec_k, params_k, images[info.rows], info.local_labels, cfg_k)
        return Network(spec_k, trained)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            nets = tuple(pool.map(_train_one, range(partition.k)))
    else:
        nets = tuple(_train_one(k) for k in range(partition.k))
    ensemble = SubsetEnsemble(k=partition.k, nets=nets)
    ensemble.validate(tuple(int(s.classes.size) for s in partition.subsets))
    return ensemble


def train_selector_net(
    cmap: ClassClusterMap,
    images: np.ndarray,
    labels,
    base: Network,
    cfg: TrainConfig,
) -> NetSelector:
    """Train the network selector: subset indices become the class labels and
    the head is resized to k outputs, starting from the base trunk."""
    cfg.validate()
    labels = np.asarray(labels).astype(np.int64)
    subset_labels = cmap.class_to_subset[labels]
    head_seed, train_seed = convnet.subset_train_seeds(cfg.seed, 0)
    spec_s, params_s = convnet.reinit_head(base.spec, base.params, cmap.k, Rng(head_seed))
    cfg_s = dataclasses.replace(cfg, seed=train_seed, batch_size=min(cfg.batch_size, len(labels)))
    trained, _ = convnet.train(spec_s, params_s, images, subset_labels, cfg_s)
    return NetSelector(net=Network(spec_s, trained))


def _one_hot(chosen: np.ndarray, k: int) -> np.ndarray:
    weights = np.zeros((chosen.size, k))
    weights[np.arange(chosen.size), chosen] = 1.0
    return weights


def select_batch(selector: Selector, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Subset choices for a batch.  Returns (chosen indices, one-hot weights).

    Network selector: argmax of the k softmax outputs.  Centroid selector:
    nearest pre-clustering centroid of the lda-projected base feature.  Ties
    break to the lowest index either way.
    """
    if isinstance(selector, NetSelector):
        probs = selector.net.forward(images, Tap.HEAD)
        chosen = np.argmax(probs, axis=1)
        return chosen, _one_hot(chosen, selector.net.spec.class_count)
    if isinstance(selector, CentroidSelector):
        feats = selector.base.forward(images, Tap.FC_PENULTIMATE)
        chosen = kmeans_assign(selector.kmeans, lda_transform(selector.lda, feats))
        return chosen, _one_hot(chosen, selector.kmeans.k)
    raise ContractError(f"untrained or unknown selector {selector!r}")


def select(selector: Selector, image: np.ndarray) -> SelectorDecision:
    """Decision for one image (C, H, W)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError("select expects a single image (C, H, W)")
    chosen, weights = select_batch(selector, image[None])
    return SelectorDecision(weights=weights[0], chosen=int(chosen[0]))


def extract_subset_features(ensemble: SubsetEnsemble, images: np.ndarray) -> np.ndarray:
    """Tap activations from every subset net on the same images: (B, K, D).

    All K features are extracted regardless of selection; max voting zeroes
    the losers downstream.
    """
    feats = [net.forward(images, ensemble.tap) for net in ensemble.nets]
    return np.stack(feats, axis=1)
