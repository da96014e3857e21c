"""Pose metrics, evaluation protocols and multi-view fusion.

Poses are flat ``[3N]`` vectors (``[2N]`` for 2D) and every metric also
accepts leading batch dimensions, returning one value per pose.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .camera import CameraModel, camera_to_world
from .data import PoseDataset, Skeleton, denormalize_y, normalize_x, occlusion_mask, root_center
from .errors import ConfigError, DataError, DegeneratePoseError, DimensionError, FusionError, MetricDomainError, NumericError
from .mdn import hypothesis_spread

EXHAUSTIVE_LIMIT = 10_000
METRIC_PCK3D = 150.0  # mm, for metric-scale data
SYNTH_PCK3D_FRACTION = 0.15


def _joints(pose, width: int = 3) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape[-1] % width:
        raise DimensionError(f"pose length {pose.shape[-1]} is not a multiple of {width}")
    return pose.reshape(*pose.shape[:-1], -1, width)


def _per_joint_distance(a, b, width: int = 3) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"pose lengths differ: {a.shape[-1]} vs {b.shape[-1]}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise NumericError("non-finite pose coordinates")
    return np.linalg.norm(_joints(a, width) - _joints(b, width), axis=-1)


def mpjpe(a, b):
    """Mean per-joint Euclidean distance."""
    out = _per_joint_distance(a, b).mean(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class HypothesisSet:
    poses: np.ndarray  # [M, 3N], denormalized
    alphas: np.ndarray
    sigmas: np.ndarray
    sample_id: int = -1

    def __post_init__(self):
        self.poses = np.atleast_2d(np.asarray(self.poses, dtype=np.float64))
        self.alphas = np.asarray(self.alphas, dtype=np.float64).reshape(-1)
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64).reshape(-1)
        M = len(self.poses)
        if M < 1:
            raise ConfigError("a hypothesis set needs at least one pose")
        if self.alphas.shape != (M,) or self.sigmas.shape != (M,):
            raise DimensionError(f"expected {M} alphas and sigmas, got {self.alphas.shape} and {self.sigmas.shape}")
        if abs(self.alphas.sum() - 1.0) > 1e-6:
            raise DataError(f"mixing coefficients sum to {self.alphas.sum():.9f}, not 1")

    @property
    def M(self) -> int:
        return len(self.poses)

    def top(self) -> int:
        return int(np.argmax(self.alphas))


def hypothesis_sets(pred: Dict[str, np.ndarray], stats, start_id: int = 0) -> List[HypothesisSet]:
    """Wrap raw network outputs (normalized ``mu``) as denormalized sets."""
    mu = denormalize_y(pred["mu"], stats)
    return [HypothesisSet(mu[i], pred["alpha"][i], pred["sigma"][i], start_id + i) for i in range(len(mu))]


def _poses_of(hs) -> np.ndarray:
    return hs.poses if isinstance(hs, HypothesisSet) else np.atleast_2d(np.asarray(hs, dtype=np.float64))


def best_hypothesis(hs, gt) -> Tuple[int, float]:
    """Hypothesis closest to ``gt``; ``argmin`` keeps the lowest index on ties."""
    errors = np.atleast_1d(mpjpe(_poses_of(hs), np.asarray(gt)[None]))
    i = int(np.argmin(errors))
    return i, float(errors[i])


def best_hypothesis_errors(poses: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Batched form: ``poses [K, M, 3N]``, ``gt [K, 3N]`` -> (indices, errors)."""
    errors = mpjpe(poses, np.asarray(gt)[:, None])
    idx = np.argmin(errors, axis=1)
    return idx, errors[np.arange(len(idx)), idx]


def procrustes_align(a, b, allow_scale: bool = False) -> Tuple[np.ndarray, float]:
    """Align ``a`` onto ``b`` by the least-squares rotation and translation.

    With ``allow_scale`` a uniform scale is fitted as well. Reflections are
    excluded by the determinant correction. Returns the aligned copy of ``a``
    and its MPJPE against ``b``.
    """
    A, B = _joints(a), _joints(b)
    if A.shape != B.shape or A.ndim != 2:
        raise DimensionError(f"procrustes_align needs two single poses of equal size, got {A.shape} and {B.shape}")
    if not (np.isfinite(A).all() and np.isfinite(B).all()):
        raise NumericError("non-finite pose coordinates")
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    A0, B0 = A - ca, B - cb
    U, S, Vt = np.linalg.svd(A0.T @ B0)
    scale_ref = max(np.abs(A0).max(), np.abs(B0).max(), 1e-300)
    if S[1] <= 1e-12 * scale_ref ** 2:
        raise DegeneratePoseError("pose is degenerate (fewer than 3 non-collinear joints)")
    d = np.sign(np.linalg.det(U @ Vt)) or 1.0
    D = np.array([1.0, 1.0, d])
    R = (U * D) @ Vt  # maps row vectors: A0 @ R ~ B0
    s = 1.0
    if allow_scale:
        s = float((S * D).sum() / (A0 * A0).sum())
    aligned = s * A0 @ R + cb
    flat = aligned.reshape(-1)
    return flat, mpjpe(flat, np.asarray(b, dtype=np.float64).reshape(-1))


def pckh(projected, reference2d, skeleton: Skeleton, factor: float = 0.5):
    """Percentage of 2D joints within ``factor`` times the reference-segment length (inclusive)."""
    if factor <= 0:
        raise ConfigError(f"PCKh factor must be positive, got {factor}")
    ref = _joints(reference2d, 2)
    i, j = skeleton.reference
    seg = np.linalg.norm(ref[..., i, :] - ref[..., j, :], axis=-1)
    if np.any(seg <= 0):
        raise MetricDomainError("reference segment has zero length")
    dist = _per_joint_distance(projected, reference2d, 2)
    out = 100.0 * (dist <= factor * np.asarray(seg)[..., None]).mean(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def pck3d(pred, gt, threshold: float):
    """Percentage of 3D joints within ``threshold`` of ground truth (inclusive)."""
    if not threshold > 0:
        raise ConfigError(f"3DPCK threshold must be positive, got {threshold}")
    out = 100.0 * (_per_joint_distance(pred, gt) <= threshold).mean(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def mode_coverage(hs, oracle_modes, tau: float) -> float:
    """Fraction of oracle modes matched by some hypothesis within MPJPE ``tau``."""
    if not tau > 0:
        raise ConfigError(f"coverage tolerance must be positive, got {tau}")
    modes = np.atleast_2d(np.asarray(oracle_modes, dtype=np.float64))
    if len(modes) == 0:
        raise ConfigError("mode coverage needs at least one oracle mode")
    d = mpjpe(_poses_of(hs)[None, :, :], modes[:, None, :])
    return float((np.atleast_2d(d).min(axis=1) <= tau).mean())


def mode_coverage_batch(poses: np.ndarray, modes: np.ndarray, tau: float) -> np.ndarray:
    """``poses [K, M, 3N]``, ``modes [K, P, 3N]`` -> per-sample coverage."""
    if not tau > 0:
        raise ConfigError(f"coverage tolerance must be positive, got {tau}")
    d = mpjpe(poses[:, None, :, :], modes[:, :, None, :])
    return (d.min(axis=2) <= tau).mean(axis=1)


# -- multi-view fusion ---------------------------------------------------------


def _world_sets(sets, cams, root: int) -> List[np.ndarray]:
    out = []
    for hs, cam in zip(sets, cams):
        world = camera_to_world(cam, _poses_of(hs)).reshape(len(_poses_of(hs)), -1)
        out.append(root_center(world, root))
    return out


def _pair_costs(world: List[np.ndarray]) -> Dict[Tuple[int, int], np.ndarray]:
    C = len(world)
    return {(c, e): mpjpe(world[c][:, None, :], world[e][None, :, :]) for c in range(C) for e in range(c + 1, C)}


def _combo_cost(costs, combo) -> float:
    return float(sum(D[combo[c], combo[e]] for (c, e), D in costs.items()))


def _select_exhaustive(world, costs) -> Tuple[int, ...]:
    sizes = [len(w) for w in world]
    C = len(sizes)
    total = np.zeros(sizes)
    for (c, e), D in costs.items():
        shape = [1] * C
        shape[c], shape[e] = sizes[c], sizes[e]
        total = total + D.reshape(shape)
    # argmin returns the first minimum in C order, the lexicographically smallest tuple
    return tuple(int(i) for i in np.unravel_index(int(np.argmin(total)), sizes))


def _anchored_start(world, costs, first: int) -> List[int]:
    """Fix camera 0 at ``first``, then add cameras one at a time at their cheapest hypothesis."""
    combo = [first]
    for c in range(1, len(world)):
        scores = sum(costs[(p, c)][combo[p], :] for p in range(c))
        combo.append(int(np.argmin(scores)))
    return combo


def _select_greedy(world, costs, start: Sequence[int], max_sweeps: int = 100) -> Tuple[int, ...]:
    combo = list(start)
    C = len(world)
    for _ in range(max_sweeps):
        changed = False
        for c in range(C):
            scores = np.zeros(len(world[c]))
            for (p, q), D in costs.items():
                if p == c:
                    scores += D[:, combo[q]]
                elif q == c:
                    scores += D[combo[p], :]
            i = int(np.argmin(scores))
            if scores[i] < scores[combo[c]]:
                combo[c] = i
                changed = True
        if not changed:
            break
    return tuple(combo)


def multiview_fuse(sets, cams: Sequence[CameraModel], root: int = 0, method: str = "auto",
                   return_selection: bool = False):
    """Fuse per-camera hypothesis sets into one world-frame pose.

    One hypothesis per camera is chosen so that the summed pairwise MPJPE
    between the selected world-frame poses is minimal; the result is their
    joint-wise average, centred on ``root``. ``method`` is ``"auto"``,
    ``"exhaustive"`` or ``"greedy"``.
    """
    if len(sets) != len(cams):
        raise ConfigError(f"{len(sets)} hypothesis sets for {len(cams)} cameras")
    if len(cams) < 2:
        raise FusionError("multi-view fusion needs at least 2 cameras; use best_hypothesis or predict for one view")
    if method not in ("auto", "exhaustive", "greedy"):
        raise ConfigError(f"unknown fusion method {method!r}")
    world = _world_sets(sets, cams, root)
    costs = _pair_costs(world)
    n_combos = int(np.prod([len(w) for w in world], dtype=np.float64))
    if method == "exhaustive" or (method == "auto" and n_combos <= EXHAUSTIVE_LIMIT):
        combo = _select_exhaustive(world, costs)
    else:
        top = [hs.top() if isinstance(hs, HypothesisSet) else 0 for hs in sets]
        # one descent from the top-alpha choice can stall in a local minimum,
        # so also start from every hypothesis of the first camera
        starts = [top] + [_anchored_start(world, costs, i) for i in range(len(world[0]))]
        found = [_select_greedy(world, costs, s) for s in starts]
        combo = min(found, key=lambda c: (_combo_cost(costs, c), c))
    chosen = np.stack([world[c][i] for c, i in enumerate(combo)])
    # sorting makes the float summation independent of camera order
    chosen = chosen[np.lexsort(chosen.T[::-1])]
    fused = chosen.mean(axis=0)
    if return_selection:
        return fused, combo, _combo_cost(costs, combo)
    return fused


# -- reports -------------------------------------------------------------------

_METRICS = ("mpjpe_p1", "mpjpe_p2", "mpjpe_top", "pckh", "pck3d", "coverage", "spread")


@dataclass
class EvalReport:
    groups: Dict[str, Dict[str, float]]
    aggregate: Dict[str, float]
    count: int
    settings: Dict[str, object] = field(default_factory=dict)
    degradation: Dict[str, Dict[str, float]] = field(default_factory=dict)
    per_sample: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {"count": self.count, "settings": self.settings, "aggregate": self.aggregate,
                "groups": self.groups, "degradation": self.degradation}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        cols = [m for m in _METRICS if m in self.aggregate]
        head = ["group", "count"] + cols
        rows = [[name, str(int(g["count"]))] + [_fmt(g.get(m)) for m in cols]
                for name, g in self.groups.items() if name != "all"]
        rows.append(["all", str(self.count)] + [_fmt(self.aggregate.get(m)) for m in cols])
        lines = _align([head] + rows)
        if self.degradation:
            lines.append("")
            lines.append("missing joints")
            dhead = ["k", "mpjpe_p1", "ratio"]
            drows = [[k, _fmt(v["mpjpe_p1"]), _fmt(v["ratio"])] for k, v in self.degradation.items()]
            lines += _align([dhead] + drows)
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return "-" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.4f}"


def _align(rows: List[List[str]]) -> List[str]:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return ["  ".join(c.rjust(w) if k else c.ljust(w) for k, (c, w) in enumerate(zip(r, widths))).rstrip()
            for r in rows]


def summarize(per_sample: Dict[str, np.ndarray], groups: Optional[Sequence[str]] = None) -> Tuple[dict, dict]:
    """Count-weighted aggregates of per-sample metric arrays, overall and per group."""
    n = len(next(iter(per_sample.values())))
    labels = np.asarray(groups if groups is not None else ["all"] * n, dtype=object)
    aggregate = {k: float(np.mean(v)) for k, v in per_sample.items()}
    out = {}
    for name in sorted(set(labels.tolist())):
        mask = labels == name
        out[str(name)] = {"count": int(mask.sum()), **{k: float(np.mean(v[mask])) for k, v in per_sample.items()}}
    return out, aggregate


def default_pck3d_threshold(oracle=None) -> float:
    if oracle is not None and hasattr(oracle, "bone_lengths"):
        return SYNTH_PCK3D_FRACTION * float(np.sum(oracle.bone_lengths))
    return METRIC_PCK3D


def score_predictions(pred: Dict[str, np.ndarray], stats, ds: PoseDataset, oracle=None,
                      tau: Optional[float] = None, pck_threshold: Optional[float] = None,
                      allow_scale: bool = False) -> Dict[str, np.ndarray]:
    """Per-sample metrics for network outputs on ``ds``."""
    root = ds.skeleton.root
    poses = denormalize_y(pred["mu"], stats)  # [K, M, 3N], root-centred
    gt = root_center(ds.y, root)
    K, M, _ = poses.shape
    idx, p1 = best_hypothesis_errors(poses, gt)
    p2 = np.empty(K)
    for k in range(K):
        p2[k] = min(procrustes_align(poses[k, m], gt[k], allow_scale)[1] for m in range(M))
    top = mpjpe(poses[np.arange(K), np.argmax(pred["alpha"], axis=1)], gt)
    # orthographic reprojection of every hypothesis against the root-centred input
    ref2d = _joints(ds.x, 2)
    ref2d = (ref2d - ref2d[:, root:root + 1]).reshape(K, -1)
    proj = _joints(poses)[..., :2].reshape(K, M, -1)
    pk = pckh(proj, np.broadcast_to(ref2d[:, None], proj.shape), ds.skeleton).mean(axis=1)
    threshold = pck_threshold if pck_threshold is not None else default_pck3d_threshold(oracle)
    out = {"mpjpe_p1": p1, "mpjpe_p2": p2, "mpjpe_top": top, "pckh": pk,
           "pck3d": pck3d(poses[np.arange(K), idx], gt, threshold),
           "spread": hypothesis_spread(poses) if M > 1 else np.full(K, np.nan)}
    if oracle is not None:
        if tau is None:
            tau = 0.1 * float(np.sum(oracle.bone_lengths))
        out["coverage"] = mode_coverage_batch(poses, oracle.modes(ds.x), tau)
    return out


def evaluate(model, stats, ds: PoseDataset, oracle=None, occlude_k: Sequence[int] = (), seed: int = 0,
             groups: Optional[Sequence[str]] = None, tau: Optional[float] = None,
             pck_threshold: Optional[float] = None, allow_scale: bool = False) -> EvalReport:
    """Full report; each ``k`` in ``occlude_k`` adds a missing-joint degradation row."""
    def run(vis):
        pred = model.predict(normalize_x(ds.x, stats, vis))
        return score_predictions(pred, stats, ds, oracle, tau, pck_threshold, allow_scale)

    per_sample = run(ds.vis)
    if groups is None:
        groups = [f"cam{c}" if c >= 0 else "all" for c in ds.cam]
    group_stats, aggregate = summarize(per_sample, groups)
    settings = {"allow_scale": allow_scale,
                "pck3d_threshold": pck_threshold if pck_threshold is not None else default_pck3d_threshold(oracle)}
    if oracle is not None:
        settings["tau"] = tau if tau is not None else 0.1 * float(np.sum(oracle.bone_lengths))
    report = EvalReport(group_stats, aggregate, len(ds), settings, per_sample=per_sample)
    for k in occlude_k:
        rng = np.random.default_rng([seed, 2, int(k)])
        vis = occlusion_mask(len(ds), int(k), ds.skeleton, rng) & ds.vis
        err = float(np.mean(run(vis)["mpjpe_p1"]))
        report.degradation[str(k)] = {"mpjpe_p1": err, "ratio": err / aggregate["mpjpe_p1"]}
    return report
