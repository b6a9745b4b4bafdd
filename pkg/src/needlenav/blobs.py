"""Retro-reflective marker detection in grayscale IR frames.

Bright regions are segmented by intensity thresholding, labelled with
8-connectivity, then screened by size, circularity and black-white ratio
before their intensity-weighted centroids feed stereo matching.

Pixel convention: integer coordinates are pixel centres, u = column,
v = row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Perimeter estimator: boundary pixels are foreground pixels with at least
# one background 4-neighbour; pixels on a straight edge run (exactly one
# background 4-neighbour) weigh 0.948, staircase/corner pixels weigh 1.340.
# The corner-corrected weights make 4*pi*A/P^2 of rasterized discs converge
# to 1 instead of the ~1.26 a raw pixel count yields.
PERIM_STRAIGHT_WEIGHT = 0.948
PERIM_CORNER_WEIGHT = 1.340


@dataclass(frozen=True)
class Blob:
    """A detected bright region."""

    centroid: np.ndarray  # (u, v), intensity-weighted
    area: int
    perimeter: float
    circularity: float
    bw_ratio: float
    bbox: tuple  # (u_min, v_min, u_max, v_max), inclusive


@dataclass(frozen=True)
class BlobFilterParams:
    threshold: int = 96
    area_range: tuple = (6, 4000)
    circularity_range: tuple = (0.6, 1.1)
    bw_ratio_range: tuple = (0.45, 1.0)

    def __post_init__(self):
        for name in ("area_range", "circularity_range", "bw_ratio_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: min {lo} exceeds max {hi}")
        if not 0 <= self.threshold <= 255:
            raise ValueError("threshold must be in [0, 255]")


def circularity(area: float, perimeter: float) -> float:
    """4*pi*area / perimeter^2; 1.0 for an ideal circle."""
    if perimeter <= 0:
        raise ValueError("perimeter must be > 0")
    return 4.0 * np.pi * area / perimeter ** 2


def _label_components(fg: np.ndarray) -> tuple:
    """8-connected component labels for a boolean mask.

    Returns (coords, comp_ids, n_components) where coords is the (K, 2)
    row/col array of foreground pixels in scan order.
    """
    coords = np.argwhere(fg)
    k = len(coords)
    if k == 0:
        return coords, np.empty(0, dtype=int), 0
    index = -np.ones(fg.shape, dtype=int)
    index[coords[:, 0], coords[:, 1]] = np.arange(k)

    parent = list(range(k))

    def find(a):
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    h, w = fg.shape
    for idx, (r, c) in enumerate(coords):
        # union with already-scanned neighbours (8-connectivity)
        for dr, dc in ((-1, -1), (-1, 0), (-1, 1), (0, -1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and index[rr, cc] >= 0:
                ra, rb = find(idx), find(index[rr, cc])
                if ra != rb:
                    parent[ra] = rb

    roots = np.fromiter((find(i) for i in range(k)), dtype=int, count=k)
    uniq, comp_ids = np.unique(roots, return_inverse=True)
    return coords, comp_ids, len(uniq)


def detect_blobs(img: np.ndarray, params: BlobFilterParams) -> list:
    """Detect marker blobs in an 8-bit grayscale image.

    Connected components of pixels strictly above the intensity threshold,
    filtered by area, circularity and black-white ratio (foreground pixels
    over bounding-box pixels). Returns blobs sorted by centroid (v, u).
    """
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("image must be a 2D grayscale array")
    fg = img > params.threshold
    coords, comp_ids, n = _label_components(fg)
    if n == 0:
        return []

    rows, cols = coords[:, 0], coords[:, 1]
    weights = img[rows, cols].astype(float)

    # background-4-neighbour count per foreground pixel (image border = background)
    padded = np.pad(fg, 1)
    nbg = ((~padded[:-2, 1:-1]).astype(np.uint8) + (~padded[2:, 1:-1]) +
           (~padded[1:-1, :-2]) + (~padded[1:-1, 2:]))
    kbg = nbg[rows, cols]

    area = np.bincount(comp_ids, minlength=n)
    wsum = np.bincount(comp_ids, weights=weights, minlength=n)
    cu = np.bincount(comp_ids, weights=weights * cols, minlength=n) / wsum
    cv = np.bincount(comp_ids, weights=weights * rows, minlength=n) / wsum
    n_straight = np.bincount(comp_ids[kbg == 1], minlength=n)
    n_corner = np.bincount(comp_ids[kbg >= 2], minlength=n)
    perim = PERIM_STRAIGHT_WEIGHT * n_straight + PERIM_CORNER_WEIGHT * n_corner

    u0 = np.full(n, np.inf)
    v0 = np.full(n, np.inf)
    u1 = np.full(n, -np.inf)
    v1 = np.full(n, -np.inf)
    np.minimum.at(u0, comp_ids, cols)
    np.minimum.at(v0, comp_ids, rows)
    np.maximum.at(u1, comp_ids, cols)
    np.maximum.at(v1, comp_ids, rows)
    bbox_area = (u1 - u0 + 1) * (v1 - v0 + 1)
    bw = area / bbox_area

    blobs = []
    for i in range(n):
        if perim[i] <= 0:
            continue
        circ = circularity(area[i], perim[i])
        if not (params.area_range[0] <= area[i] <= params.area_range[1]):
            continue
        if not (params.circularity_range[0] <= circ <= params.circularity_range[1]):
            continue
        if not (params.bw_ratio_range[0] <= bw[i] <= params.bw_ratio_range[1]):
            continue
        blobs.append(Blob(
            centroid=np.array([cu[i], cv[i]]),
            area=int(area[i]),
            perimeter=float(perim[i]),
            circularity=float(circ),
            bw_ratio=float(bw[i]),
            bbox=(int(u0[i]), int(v0[i]), int(u1[i]), int(v1[i])),
        ))
    blobs.sort(key=lambda b: (b.centroid[1], b.centroid[0]))
    return blobs


def match_rows(left_uv: np.ndarray, right_uv: np.ndarray, row_tol: float) -> list:
    """Greedy one-to-one pairing of centroids across a rectified pair.

    Candidates must agree in row within row_tol and have positive disparity.
    Greedy in ascending row discrepancy; ties prefer smaller disparity, then
    left-to-right image order. Returns (left_index, right_index) pairs
    sorted by left index.
    """
    left_uv = np.atleast_2d(np.asarray(left_uv, dtype=float))
    right_uv = np.atleast_2d(np.asarray(right_uv, dtype=float))
    cands = []
    for i, (ul, vl) in enumerate(left_uv):
        for j, (ur, vr) in enumerate(right_uv):
            disparity = ul - ur
            dv = abs(vl - vr)
            if dv <= row_tol and disparity > 0:
                cands.append((dv, disparity, ul, ur, i, j))
    cands.sort()
    used_l, used_r = set(), set()
    pairs = []
    for dv, disparity, ul, ur, i, j in cands:
        if i in used_l or j in used_r:
            continue
        used_l.add(i)
        used_r.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


def stereo_match(left: list, right: list, row_tol: float = 2.0) -> list:
    """Pair detected blobs across views; see match_rows for the policy."""
    if not left or not right:
        return []
    lc = np.array([b.centroid for b in left])
    rc = np.array([b.centroid for b in right])
    return match_rows(lc, rc, row_tol)


def write_pgm(path, img: np.ndarray) -> None:
    """Write an 8-bit grayscale image as binary PGM (P5)."""
    img = np.ascontiguousarray(np.asarray(img, dtype=np.uint8))
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5) image written by write_pgm or compatible tools."""
    with open(path, "rb") as f:
        data = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        # tokenizer that skips whitespace and '#' comments
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM (P5) file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGMs are supported")
    pos += 1  # single whitespace byte after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return pixels.reshape(h, w).copy()
