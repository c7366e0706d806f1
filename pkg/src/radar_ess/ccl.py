"""Two-pass connected component labeling (8-connectivity).

Phase one scans the mask row by row and looks only at the half
neighbourhood of each foreground pixel, i.e. the already-visited pixels
``(x-1, y-1), (x, y-1), (x+1, y-1), (x-1, y)``.  A pixel with no labeled
half-neighbour opens a new provisional label; otherwise it takes one of
the neighbour labels, and any differing neighbour labels are recorded as
equivalent.  Phase two resolves the equivalences and rewrites every pixel
with a dense final label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .frame_io import BinaryImage


class EquivalenceSet:
    """Disjoint-set forest over provisional labels ``1..n``.

    The root of every set is its smallest member, so resolving labels in
    ascending root order reproduces first-appearance order of the scan.
    """

    def __init__(self):
        self.parent = [0]  # index 0 is the background and never joined

    def __len__(self):
        return len(self.parent) - 1

    def make(self) -> int:
        label = len(self.parent)
        self.parent.append(label)
        return label

    def find(self, label: int) -> int:
        parent = self.parent
        root = label
        while parent[root] != root:
            root = parent[root]
        while parent[label] != root:
            parent[label], label = root, parent[label]
        return root

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if rb < ra:
            ra, rb = rb, ra
        self.parent[rb] = ra
        return ra

    def roots(self) -> list[int]:
        return [self.find(i) for i in range(len(self.parent))]


@dataclass
class LabelMap:
    labels: np.ndarray  # (height, width) int32, 0 = background
    cluster_count: int

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]


def _first_pass(mask: np.ndarray):
    h, w = mask.shape
    stride = w + 2
    # one blank row on top and one blank column either side: no bound checks
    padded = np.zeros((h + 1, stride), dtype=bool)
    padded[1:, 1:-1] = mask
    fg = np.flatnonzero(padded).tolist()

    prov = [0] * padded.size
    eq = EquivalenceSet()
    make, union = eq.make, eq.union
    for i in fg:
        up = i - stride
        nw, n, ne, wst = prov[up - 1], prov[up], prov[up + 1], prov[i - 1]
        if n:
            # n is adjacent to nw, ne and w, which are therefore already merged
            label = n
        elif nw:
            label = nw
            if ne and ne != nw:
                union(nw, ne)
        elif wst:
            label = wst
            if ne and ne != wst:
                union(wst, ne)
        elif ne:
            label = ne
        else:
            label = make()
        prov[i] = label
    return padded, fg, prov, eq


def label_components(mask: BinaryImage | np.ndarray) -> LabelMap:
    arr = mask.mask if isinstance(mask, BinaryImage) else np.asarray(mask, dtype=bool)
    h, w = arr.shape
    padded, fg, prov, eq = _first_pass(arr)
    roots = np.asarray(eq.roots(), dtype=np.int64)

    # dense relabel: roots are the minimum label of their set, and provisional
    # labels are issued in scan order, so sorting roots gives scan order
    is_root = roots == np.arange(len(roots))
    is_root[0] = False
    dense = np.zeros(len(roots), dtype=np.int32)
    dense[is_root] = np.arange(1, int(is_root.sum()) + 1, dtype=np.int32)
    final = dense[roots]

    flat = np.zeros(padded.size, dtype=np.int32)
    if fg:
        idx = np.asarray(fg, dtype=np.int64)
        flat[idx] = final[np.asarray(prov, dtype=np.int64)[idx]]
    labels = flat.reshape(padded.shape)[1:, 1:-1].copy()
    return LabelMap(labels=labels, cluster_count=int(is_root.sum()))


def filter_small(label_map: LabelMap, min_area: int = 1) -> LabelMap:
    """Drop clusters below ``min_area`` pixels and re-densify the labels."""
    if min_area <= 1 or label_map.cluster_count == 0:
        return label_map
    areas = np.bincount(label_map.labels.ravel(), minlength=label_map.cluster_count + 1)
    keep = areas >= min_area
    keep[0] = False
    remap = np.zeros(len(areas), dtype=np.int32)
    remap[keep] = np.arange(1, int(keep.sum()) + 1, dtype=np.int32)
    return LabelMap(labels=remap[label_map.labels], cluster_count=int(keep.sum()))


def extract_clusters(label_map: LabelMap) -> list[np.ndarray]:
    """Pixel coordinates of each cluster, as ``(N_l, 2)`` arrays of ``(x, y)``.

    Element ``l - 1`` holds the pixels labeled ``l``.
    """
    k = label_map.cluster_count
    if k == 0:
        return []
    flat = label_map.labels.ravel()
    idx = np.flatnonzero(flat)
    lab = flat[idx]
    order = np.argsort(lab, kind="stable")
    idx, lab = idx[order], lab[order]
    ys, xs = np.divmod(idx, label_map.width)
    coords = np.column_stack([xs, ys])
    bounds = np.searchsorted(lab, np.arange(1, k + 2))
    return [coords[bounds[i]:bounds[i + 1]] for i in range(k)]
