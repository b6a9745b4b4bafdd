"""Marker labelling by Euclidean distance matrix comparison.

Reconstructed 3D points are matched against a rigid marker model by
comparing pairwise-distance structure, which is invariant to the motion
we are trying to estimate. Two matchers run in parallel: a per-marker
sorted-profile heuristic and a global permutation search. Disagreements
are settled by proximity to the previous frame's labelled positions.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Point3

MAX_PERMUTATION_N = 12
EXHAUSTIVE_N = 8


def _as_array(points) -> np.ndarray:
    if isinstance(points, np.ndarray):
        return np.asarray(points, dtype=float).reshape(-1, 3)
    return np.array([p.to_array() if isinstance(p, Point3) else np.asarray(p, float)
                     for p in points], dtype=float).reshape(-1, 3)


@dataclass(frozen=True)
class Edm:
    """Pairwise-distance matrix of a marker constellation, mm."""

    n: int
    d: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float)
        if d.shape != (self.n, self.n):
            raise ValueError(f"distance matrix shape {d.shape} != ({self.n}, {self.n})")
        if not np.all(np.isfinite(d)):
            raise ValueError("distance matrix has non-finite entries")
        if np.any(np.abs(np.diagonal(d)) > 1e-9):
            raise ValueError("distance matrix diagonal not zero")
        if np.any(np.abs(d - d.T) > 1e-9):
            raise ValueError("distance matrix not symmetric")
        if np.any(d < -1e-9):
            raise ValueError("negative distances")
        object.__setattr__(self, "d", d)


@dataclass(frozen=True)
class Labeling:
    """Partial injective map from model marker index to reconstructed index."""

    assignment: dict[int, int]
    residual: float

    def __post_init__(self):
        values = list(self.assignment.values())
        if len(set(values)) != len(values):
            raise ValueError("assignment is not injective")
        if self.residual < 0:
            raise ValueError("residual must be >= 0")


@dataclass
class TrackState:
    """Last known position of each labelled marker, carried across frames."""

    positions: dict[int, np.ndarray] = field(default_factory=dict)
    frame: int = 0

    def snapshot(self) -> "TrackState":
        return TrackState({k: v.copy() for k, v in self.positions.items()}, self.frame)


def build_edm(points) -> Edm:
    pts = _as_array(points)
    if len(pts) < 2:
        raise ValueError("need at least 2 points to build a distance matrix")
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    return Edm(n=len(pts), d=d)


def _pair_residual(mm: Edm, rm: Edm, assignment: dict[int, int]) -> float:
    """Mean squared distance-matrix error over assigned marker pairs."""
    idx = sorted(assignment)
    if len(idx) < 2:
        return 0.0
    mi = np.array(idx)
    ri = np.array([assignment[i] for i in idx])
    dm = mm.d[np.ix_(mi, mi)]
    dr = rm.d[np.ix_(ri, ri)]
    iu = np.triu_indices(len(idx), k=1)
    return float(np.mean((dm[iu] - dr[iu]) ** 2))


def match_profile(rm: Edm, mm: Edm) -> Labeling:
    """Greedy per-marker matching on sorted distance profiles.

    Each marker is summarised by its ascending-sorted row of distances to
    the other markers. Profiles of unequal length are aligned by truncating
    to the shorter one, which discards distances to points absent from the
    smaller set. Pairs are committed in ascending cost order, one-to-one.
    """
    length = min(mm.n, rm.n)
    pm = np.sort(mm.d, axis=1)[:, :length]
    pr = np.sort(rm.d, axis=1)[:, :length]
    cost = np.abs(pm[:, None, :] - pr[None, :, :]).sum(axis=-1)

    order = sorted(((cost[i, j], i, j) for i in range(mm.n) for j in range(rm.n)))
    assignment: dict[int, int] = {}
    used = set()
    for _, i, j in order:
        if i in assignment or j in used:
            continue
        assignment[i] = j
        used.add(j)
    return Labeling(assignment=assignment, residual=_pair_residual(mm, rm, assignment))


def _injection_cost(mm_d: np.ndarray, rm_d: np.ndarray, sigma) -> float:
    sub = rm_d[np.ix_(sigma, sigma)]
    iu = np.triu_indices(len(sigma), k=1)
    return float(np.sum((mm_d[iu] - sub[iu]) ** 2))


def _match_exhaustive(rm: Edm, mm: Edm) -> tuple[tuple, float]:
    best_sigma, best_cost = None, np.inf
    for sigma in itertools.permutations(range(rm.n), mm.n):
        c = _injection_cost(mm.d, rm.d, sigma)
        if c < best_cost:
            best_sigma, best_cost = sigma, c
    return best_sigma, best_cost


def _match_branch_bound(rm: Edm, mm: Edm, seed: tuple | None) -> tuple[tuple, float]:
    """Depth-first search over injections with partial-cost pruning.

    The accumulated squared error of a partial assignment never decreases
    as it is extended, so any branch whose partial cost exceeds the best
    complete injection found so far can be discarded. Ties resolve to the
    lexicographically smallest injection, matching exhaustive enumeration.
    """
    best_sigma, best_cost = None, np.inf
    if seed is not None and len(seed) == mm.n:
        best_sigma, best_cost = tuple(seed), _injection_cost(mm.d, rm.d, seed)

    sigma = np.empty(mm.n, dtype=int)
    used = np.zeros(rm.n, dtype=bool)

    def descend(k: int, partial: float):
        nonlocal best_sigma, best_cost
        if k == mm.n:
            cand = tuple(sigma)
            if partial < best_cost or (partial == best_cost and cand < best_sigma):
                best_sigma, best_cost = cand, partial
            return
        for j in range(rm.n):
            if used[j]:
                continue
            added = float(np.sum((mm.d[:k, k] - rm.d[sigma[:k], j]) ** 2))
            nxt = partial + added
            if nxt > best_cost:
                continue
            sigma[k] = j
            used[j] = True
            descend(k + 1, nxt)
            used[j] = False

    descend(0, 0.0)
    return best_sigma, best_cost


def match_permutation(rm: Edm, mm: Edm, method: str = "auto") -> Labeling:
    """Globally optimal labelling by search over injections.

    Minimises the mean squared difference between the model distance
    matrix and the submatrix of the scene matrix induced by the chosen
    injection. Exhaustive enumeration up to 8 model markers, pruned
    depth-first search above that (guarded at 12).
    """
    if mm.n > MAX_PERMUTATION_N:
        raise ValueError(f"model too large for permutation search: {mm.n} > {MAX_PERMUTATION_N}")
    if rm.n < mm.n:
        raise ValueError(f"scene has fewer points ({rm.n}) than model ({mm.n})")
    if method not in ("auto", "exhaustive", "branch_bound"):
        raise ValueError(f"unknown method {method!r}")
    if method == "auto":
        method = "exhaustive" if mm.n <= EXHAUSTIVE_N else "branch_bound"

    if method == "exhaustive":
        sigma, cost = _match_exhaustive(rm, mm)
    else:
        seed = match_profile(rm, mm).assignment
        seed_sigma = tuple(seed[i] for i in range(mm.n)) if len(seed) == mm.n else None
        sigma, cost = _match_branch_bound(rm, mm, seed_sigma)

    n_pairs = mm.n * (mm.n - 1) // 2
    assignment = {i: int(j) for i, j in enumerate(sigma)}
    return Labeling(assignment=assignment, residual=cost / n_pairs)


def resolve(a: Labeling, b: Labeling, track: TrackState, points,
            mm: Edm | None = None) -> Labeling:
    """Merge two labelings, settling disagreements with frame history.

    Markers where both matchers agree keep that label. Disputed markers
    take the candidate nearest their previous-frame position; without
    history the permutation result (b) is adopted. Updates the track with
    the merged labelling. Passing mm recomputes the exact residual,
    otherwise the residual of the matching source labelling is carried.
    """
    pts = _as_array(points)
    markers = sorted(set(a.assignment) | set(b.assignment))
    merged: dict[int, int] = {}
    used: set[int] = set()

    if not track.positions:
        merged = dict(b.assignment)
        used = set(merged.values())
    else:
        for i in markers:
            ja, jb = a.assignment.get(i), b.assignment.get(i)
            if ja == jb and ja is not None and ja not in used:
                merged[i] = ja
                used.add(ja)
        for i in markers:
            if i in merged:
                continue
            candidates = [j for j in dict.fromkeys([b.assignment.get(i), a.assignment.get(i)])
                          if j is not None and j not in used]
            if not candidates:
                continue
            prev = track.positions.get(i)
            if prev is None:
                choice = candidates[0]
            else:
                choice = min(candidates, key=lambda j: float(np.linalg.norm(pts[j] - prev)))
            merged[i] = choice
            used.add(choice)

    if mm is not None and len(pts) >= 2:
        residual = _pair_residual(mm, build_edm(pts), merged)
    elif merged == a.assignment:
        residual = a.residual
    elif merged == b.assignment:
        residual = b.residual
    else:
        residual = min(a.residual, b.residual)

    for i, j in merged.items():
        track.positions[i] = pts[j].copy()
    track.frame += 1
    return Labeling(assignment=merged, residual=residual)


def label_points(points, mm: Edm, track: TrackState, method: str = "auto") -> Labeling:
    """One full labelling pass: both matchers plus temporal resolution.

    Handles scenes with fewer points than the model by running the
    permutation search in the opposite direction (scene into model) and
    inverting the result, so occluded frames still yield a partial map.
    """
    pts = _as_array(points)
    if len(pts) < 2:
        return resolve(Labeling({}, 0.0), Labeling({}, 0.0), track, pts)
    rm = build_edm(pts)
    prof = match_profile(rm, mm)
    if rm.n >= mm.n:
        perm = match_permutation(rm, mm, method=method)
    else:
        back = match_permutation(mm, rm, method=method)
        inverted = {j: i for i, j in back.assignment.items()}
        perm = Labeling(assignment=inverted, residual=back.residual)
    return resolve(prof, perm, track, pts, mm=mm)


def _anchor_tol(d_model, tol: float, tol_rel: float):
    """Distance gate combining a noise floor with a strain allowance.

    Smooth tissue deformation perturbs a pairwise distance roughly in
    proportion to its length, so long edges get a wider gate than the
    reconstruction noise floor alone.
    """
    return tol + tol_rel * d_model


def _extend_anchor(rm: Edm, mm: Edm, model_anchor: tuple[int, int, int],
                   scene_anchor: tuple[int, int, int], tol: float,
                   tol_rel: float) -> Labeling:
    """Grow an anchored 3-correspondence marker by marker.

    Each unassigned model marker is placed at the scene point whose
    distances to the three anchor points best reproduce the model's,
    committed in ascending cost order, one-to-one, and only when every
    anchor distance agrees within its gate.
    """
    assignment = dict(zip(model_anchor, scene_anchor))
    rest = [m for m in range(mm.n) if m not in assignment]
    if rest:
        target = mm.d[np.ix_(rest, list(model_anchor))]
        got = rm.d[:, list(scene_anchor)]
        diff = np.abs(got[None, :, :] - target[:, None, :])
        feasible = np.all(diff <= _anchor_tol(target[:, None, :], tol, tol_rel),
                          axis=-1)
        cost = diff.sum(axis=-1)
        order = sorted((cost[k, s], rest[k], s)
                       for k, s in zip(*np.nonzero(feasible)))
        used = set(scene_anchor)
        for _, m, s in order:
            if m in assignment or s in used:
                continue
            assignment[m] = s
            used.add(s)
    return Labeling(assignment=assignment, residual=_pair_residual(mm, rm, assignment))


def match_anchored(rm: Edm, mm: Edm, tol: float = 5.0, tol_rel: float = 0.12,
                   anchors: int = 4) -> Labeling:
    """Clutter-tolerant matching seeded from distinctive model triangles.

    The widest model triangles (largest minimum side) are searched for in
    the scene by side length, each candidate triple is extended to a full
    assignment, and the largest assignment with the lowest residual wins.
    Distances are gated by tol plus tol_rel times the model distance, so
    short edges are held near the noise floor while long edges may
    stretch. Unlike the permutation search this stays fast with many
    unmodelled points, at the price of exactness guarantees.
    """
    if mm.n < 3:
        raise ValueError("anchored matching needs a model with >= 3 markers")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if tol_rel < 0:
        raise ValueError("tol_rel must be >= 0")
    if anchors < 1:
        raise ValueError("anchors must be >= 1")
    if rm.n < 3:
        return Labeling(assignment={}, residual=0.0)

    spread = sorted(itertools.combinations(range(mm.n), 3),
                    key=lambda t: -min(mm.d[t[0], t[1]], mm.d[t[0], t[2]],
                                       mm.d[t[1], t[2]]))
    best: Labeling | None = None
    off_diag = ~np.eye(rm.n, dtype=bool)
    for a, b, c in spread[:anchors]:
        d_ab, d_ac, d_bc = mm.d[a, b], mm.d[a, c], mm.d[b, c]
        pair_ok = (np.abs(rm.d - d_ab) <= _anchor_tol(d_ab, tol, tol_rel)) & off_diag
        for p, q in np.argwhere(pair_ok):
            r_ok = ((np.abs(rm.d[p] - d_ac) <= _anchor_tol(d_ac, tol, tol_rel))
                    & (np.abs(rm.d[q] - d_bc) <= _anchor_tol(d_bc, tol, tol_rel)))
            r_ok[[p, q]] = False
            for r in np.flatnonzero(r_ok):
                lab = _extend_anchor(rm, mm, (a, b, c), (int(p), int(q), int(r)),
                                     tol, tol_rel)
                if (best is None or len(lab.assignment) > len(best.assignment)
                        or (len(lab.assignment) == len(best.assignment)
                            and lab.residual < best.residual)):
                    best = lab
    if best is None:
        return Labeling(assignment={}, residual=0.0)
    return best


def split_claims(scene_points, labelings: dict[str, Labeling]) -> dict[str, Labeling]:
    """Resolve scene points claimed by several model labelings.

    A reconstructed point assigned by more than one model keeps only the
    assignment from the labelling with the lower residual; the loser's
    claim on that point is dropped.
    """
    order = sorted(labelings, key=lambda k: (labelings[k].residual, k))
    taken: set[int] = set()
    out: dict[str, Labeling] = {}
    for name in order:
        lab = labelings[name]
        kept = {i: j for i, j in lab.assignment.items() if j not in taken}
        taken.update(kept.values())
        out[name] = lab if kept == lab.assignment else replace(lab, assignment=kept)
    return out
