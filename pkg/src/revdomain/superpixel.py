"""SLIC-style over-segmentation, superpixel adjacency graphs and depth pooling."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .io import write_pgm16

logger = logging.getLogger(__name__)


@dataclass
class SuperpixelMap:
    labels: np.ndarray
    n_segments: int
    centroids: np.ndarray  # (p, 3): x, y, mean intensity

    @property
    def shape(self):
        return self.labels.shape


@dataclass
class SimilarityGraph:
    n_nodes: int
    edges: np.ndarray  # (E, 2) with i < j
    similarities: np.ndarray  # (E, K)

    @property
    def n_channels(self) -> int:
        return self.similarities.shape[1]

    def edge_weights(self, beta: np.ndarray) -> np.ndarray:
        return self.similarities @ np.asarray(beta, dtype=np.float64)

    def laplacians(self) -> np.ndarray:
        """Per-channel graph Laplacians, shape (K, p, p)."""
        k = self.n_channels
        out = np.zeros((k, self.n_nodes, self.n_nodes))
        if len(self.edges) == 0:
            return out
        i, j = self.edges[:, 0], self.edges[:, 1]
        for c in range(k):
            s = self.similarities[:, c]
            np.add.at(out[c], (i, j), -s)
            np.add.at(out[c], (j, i), -s)
            np.add.at(out[c], (i, i), s)
            np.add.at(out[c], (j, j), s)
        return out

    def subgraph(self, keep: np.ndarray) -> "SimilarityGraph":
        """Restrict to the nodes in ``keep`` (sorted indices), renumbering them 0..len-1."""
        keep = np.asarray(keep)
        remap = np.full(self.n_nodes, -1)
        remap[keep] = np.arange(len(keep))
        e = remap[self.edges] if len(self.edges) else self.edges.reshape(0, 2)
        ok = (e >= 0).all(axis=1) if len(e) else np.zeros(0, dtype=bool)
        return SimilarityGraph(len(keep), e[ok], self.similarities[ok])

    def is_connected(self) -> bool:
        if self.n_nodes <= 1:
            return True
        e = self.edges
        adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(self.n_nodes, self.n_nodes))
        n, _ = connected_components(adj, directed=False)
        return n == 1


@dataclass
class SuperpixelDepth:
    values: np.ndarray  # depth per kept superpixel
    kept: np.ndarray  # indices of superpixels with finite depth


def _grid_shape(h: int, w: int, p: int) -> tuple:
    best = None
    for ny in range(1, p + 1):
        nx = max(1, int(round(p / ny)))
        score = (abs(ny * nx - p), abs(np.log((h / ny) / (w / nx))), -nx)
        if best is None or score < best[0]:
            best = (score, ny, nx)
    return best[1], best[2]


def slic_segment(image: np.ndarray, p_target: int = 64, compactness: float = 0.1, n_iter: int = 10) -> SuperpixelMap:
    """k-means in (y, x, intensity) from a regular grid, then a connectivity repair.

    The distance is ``dI^2 + (compactness * ds / S)^2`` with ``S`` the grid
    step, so ``compactness`` is the intensity difference that one grid step of
    spatial distance is worth.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.size == 0:
        raise ValueError(f"slic_segment needs a non-empty 2-D image, got shape {image.shape}")
    h, w = image.shape
    if p_target < 2:
        raise ValueError(f"p_target must be >= 2, got {p_target}")
    if p_target > h * w:
        raise ValueError(f"p_target={p_target} exceeds the pixel count {h * w}")
    ny, nx = _grid_shape(h, w, p_target)
    step = np.sqrt(h * w / (ny * nx))
    yy, xx = np.mgrid[0:h, 0:w]
    py = yy.ravel() + 0.5
    px = xx.ravel() + 0.5
    pi = image.ravel()
    cy = np.repeat((np.arange(ny) + 0.5) * h / ny, nx)
    cx = np.tile((np.arange(nx) + 0.5) * w / nx, ny)
    cell = (np.minimum((py * ny / h).astype(int), ny - 1) * nx + np.minimum((px * nx / w).astype(int), nx - 1))
    k = ny * nx
    counts = np.bincount(cell, minlength=k)
    ci = np.bincount(cell, weights=pi, minlength=k) / np.maximum(counts, 1)
    wy, wx = 2 * h / ny, 2 * w / nx
    scale = (compactness / step) ** 2

    assign = cell
    for _ in range(n_iter):
        dy = py[:, None] - cy[None]
        dx = px[:, None] - cx[None]
        d = (pi[:, None] - ci[None]) ** 2 + scale * (dy ** 2 + dx ** 2)
        d[(np.abs(dy) > wy) | (np.abs(dx) > wx)] = np.inf
        new = d.argmin(axis=1)
        counts = np.bincount(new, minlength=k)
        nz = counts > 0
        cy[nz] = (np.bincount(new, weights=py, minlength=k) / np.maximum(counts, 1))[nz]
        cx[nz] = (np.bincount(new, weights=px, minlength=k) / np.maximum(counts, 1))[nz]
        ci[nz] = (np.bincount(new, weights=pi, minlength=k) / np.maximum(counts, 1))[nz]
        if np.array_equal(new, assign):
            assign = new
            break
        assign = new

    labels = _enforce_connectivity(assign.reshape(h, w), min_size=max(1, int(step * step / 4)))
    return _finalize(labels, image)


def _enforce_connectivity(labels: np.ndarray, min_size: int) -> np.ndarray:
    """Keep one 4-connected component per label; absorb the rest into neighbours."""
    four = ndimage.generate_binary_structure(2, 1)
    comp = np.zeros(labels.shape, dtype=np.int64)
    n_comp = 0
    for lab in np.unique(labels):
        cc, n = ndimage.label(labels == lab, structure=four)
        comp[cc > 0] = cc[cc > 0] + n_comp
        n_comp += n
    sizes = np.bincount(comp.ravel(), minlength=n_comp + 1)
    # per original label only its largest component survives as-is
    comp_label = np.zeros(n_comp + 1, dtype=np.int64)
    comp_label[comp.ravel()] = labels.ravel()
    keep = np.zeros(n_comp + 1, dtype=bool)
    for lab in np.unique(labels):
        ids = np.nonzero(comp_label == lab)[0]
        ids = ids[ids > 0]
        big = ids[np.argmax(sizes[ids])]
        keep[big] = sizes[big] >= min_size
    if keep.sum() == 0:
        keep[np.argmax(sizes[1:]) + 1] = True
    # absorb dropped components, smallest first, into the neighbour sharing the longest border
    out = comp.copy()
    order = sorted(np.nonzero(~keep[1:])[0] + 1, key=lambda c: (sizes[c], c))
    pending = list(order)
    while pending:
        progressed = False
        rest = []
        for c in pending:
            mask = out == c
            ring = ndimage.binary_dilation(mask, structure=four) & ~mask
            neigh = out[ring]
            if neigh.size == 0:
                rest.append(c)
                continue
            vals, cnt = np.unique(neigh, return_counts=True)
            target = vals[np.lexsort((vals, -cnt))[0]]
            out[mask] = target
            progressed = True
        if not progressed:
            break
        pending = rest
    return out


def _finalize(labels: np.ndarray, image: np.ndarray) -> SuperpixelMap:
    # renumber by first appearance in raster order
    flat = labels.ravel()
    _, first = np.unique(flat, return_index=True)
    order = flat[np.sort(first)]
    remap = {int(v): i for i, v in enumerate(order)}
    new = np.vectorize(remap.__getitem__, otypes=[np.int64])(labels)
    p = len(order)
    h, w = labels.shape
    yy, xx = np.mgrid[0:h, 0:w]
    counts = np.bincount(new.ravel(), minlength=p)
    cxs = np.bincount(new.ravel(), weights=xx.ravel() + 0.5, minlength=p) / counts
    cys = np.bincount(new.ravel(), weights=yy.ravel() + 0.5, minlength=p) / counts
    mus = np.bincount(new.ravel(), weights=image.ravel(), minlength=p) / counts
    return SuperpixelMap(new, p, np.stack([cxs, cys, mus], axis=1))


def adjacent_pairs(labels: np.ndarray) -> np.ndarray:
    """Sorted unique (i, j), i < j, of labels touching across a 4-neighbour pixel pair."""
    a = np.concatenate([labels[:, :-1].ravel(), labels[:-1, :].ravel()])
    b = np.concatenate([labels[:, 1:].ravel(), labels[1:, :].ravel()])
    diff = a != b
    pairs = np.stack([np.minimum(a[diff], b[diff]), np.maximum(a[diff], b[diff])], axis=1)
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(pairs, axis=0).astype(np.int64)


def superpixel_histograms(image: np.ndarray, labels: np.ndarray, n_segments: int, bins: int = 16) -> np.ndarray:
    idx = np.minimum((np.clip(image, 0.0, 1.0) * bins).astype(int), bins - 1)
    hist = np.zeros((n_segments, bins))
    np.add.at(hist, (labels.ravel(), idx.ravel()), 1.0)
    return hist / hist.sum(axis=1, keepdims=True)


def build_graph(
    image: np.ndarray,
    spmap: SuperpixelMap,
    histogram_bins: int = 16,
    gamma_intensity: float = 10.0,
    gamma_histogram: float = 5.0,
) -> SimilarityGraph:
    """Edges between touching superpixels with intensity and histogram similarities.

    ``S1 = exp(-g1 |mu_i - mu_j|)`` and ``S2 = exp(-g2 ||hist_i - hist_j||_2)``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != spmap.labels.shape:
        raise ValueError(f"image shape {image.shape} does not match superpixel map {spmap.labels.shape}")
    p = spmap.n_segments
    labels = spmap.labels
    counts = np.bincount(labels.ravel(), minlength=p)
    mu = np.bincount(labels.ravel(), weights=image.ravel(), minlength=p) / counts
    hist = superpixel_histograms(image, labels, p, histogram_bins)
    edges = adjacent_pairs(labels)
    i, j = edges[:, 0], edges[:, 1]
    s1 = np.exp(-gamma_intensity * np.abs(mu[i] - mu[j]))
    s2 = np.exp(-gamma_histogram * np.linalg.norm(hist[i] - hist[j], axis=1))
    graph = SimilarityGraph(p, edges, np.stack([s1, s2], axis=1))
    if not graph.is_connected():
        warnings.warn("superpixel graph is not connected", RuntimeWarning, stacklevel=2)
    return graph


def pool_depth(depth: np.ndarray, spmap: SuperpixelMap) -> SuperpixelDepth:
    """Mean finite depth per superpixel; superpixels with no finite pixel are dropped."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != spmap.labels.shape:
        raise ValueError(f"depth shape {depth.shape} does not match superpixel map {spmap.labels.shape}")
    finite = np.isfinite(depth)
    if not finite.any():
        raise ValueError("depth map has no finite pixel")
    lab = spmap.labels[finite]
    counts = np.bincount(lab, minlength=spmap.n_segments)
    sums = np.bincount(lab, weights=depth[finite], minlength=spmap.n_segments)
    kept = np.nonzero(counts > 0)[0]
    return SuperpixelDepth(sums[kept] / counts[kept], kept)


def broadcast(values: np.ndarray, kept: np.ndarray, spmap: SuperpixelMap, fill: float = np.inf) -> np.ndarray:
    """Paint per-superpixel ``values`` back onto the pixel raster."""
    full = np.full(spmap.n_segments, fill, dtype=np.float64)
    full[kept] = values
    return full[spmap.labels]


def dump_labels(path, spmap: SuperpixelMap) -> None:
    write_pgm16(path, spmap.labels)


def dump_graph(path, graph: SimilarityGraph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for (i, j), (s1, s2) in zip(graph.edges, graph.similarities):
            fh.write(f"{i}\t{j}\t{float(s1)!r}\t{float(s2)!r}\n")
