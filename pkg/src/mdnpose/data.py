"""Pose datasets, normalization, occlusion and the synthetic chain benchmark.

The synthetic benchmark builds a kinematic chain whose bone directions are
drawn per bone, then folds every bone's depth component to be non-negative.
Orthographic projection drops depth, so given the 2D joints the folded chain
is the only preimage with non-negative depths.  A fraction
``reflection_mix`` of samples is stored with every depth negated, which makes
the conditional distribution of 3D given 2D exactly bimodal at 0.5 and
unimodal at 0.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .camera import CameraModel, project, rotation_about, world_to_camera
from .errors import ConfigError, DimensionError, ParseError

STD_FLOOR = 1e-8
FORMAT_TAG = "#mdnpose v1"


@dataclass
class Skeleton:
    names: List[str]
    parents: List[int]
    reference: Tuple[int, int] = (0, 1)
    limbs: List[int] = field(default_factory=list)
    root: int = 0

    def __post_init__(self):
        self.reference = tuple(int(j) for j in self.reference)
        n = len(self.names)
        if len(self.parents) != n:
            raise ConfigError("skeleton: names and parents differ in length")
        if self.parents[self.root] != self.root:
            raise ConfigError("skeleton: the root must be its own parent")
        for j in range(n):
            seen, k = set(), j
            while k != self.root:
                if k in seen or not 0 <= self.parents[k] < n:
                    raise ConfigError(f"skeleton: joint {j} does not reach the root")
                seen.add(k)
                k = self.parents[k]
        for j in (*self.reference, *self.limbs):
            if not 0 <= j < n:
                raise ConfigError(f"skeleton: joint index {j} out of range")

    @property
    def n_joints(self) -> int:
        return len(self.names)

    def to_dict(self) -> dict:
        return {"names": list(self.names), "parents": list(self.parents),
                "reference": list(self.reference), "limbs": list(self.limbs), "root": self.root}

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        return cls(d["names"], [int(p) for p in d["parents"]], tuple(d["reference"]),
                   [int(j) for j in d.get("limbs", [])], int(d.get("root", 0)))


def chain_skeleton(bones: int) -> Skeleton:
    """Root followed by ``bones`` joints in a line; every non-root joint is a limb joint."""
    names = ["root"] + [f"j{i}" for i in range(1, bones + 1)]
    parents = [0] + list(range(bones))
    return Skeleton(names, parents, (0, 1), list(range(1, bones + 1)))


@dataclass
class PoseSample:
    x: np.ndarray
    y: np.ndarray
    camera_id: int = -1
    visibility: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.visibility is None:
            self.visibility = np.ones(len(self.x) // 2, dtype=bool)


@dataclass
class PoseDataset:
    x: np.ndarray
    y: np.ndarray
    skeleton: Skeleton
    cam: Optional[np.ndarray] = None
    vis: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        n, k = self.skeleton.n_joints, len(self.x)
        if self.x.shape != (k, 2 * n) or self.y.shape != (k, 3 * n):
            raise DimensionError(f"dataset arrays {self.x.shape}/{self.y.shape} do not match {n} joints")
        self.cam = np.full(k, -1, dtype=np.int64) if self.cam is None else np.asarray(self.cam, dtype=np.int64)
        self.vis = np.ones((k, n), dtype=bool) if self.vis is None else np.asarray(self.vis, dtype=bool)

    def __len__(self) -> int:
        return len(self.x)

    @property
    def n_joints(self) -> int:
        return self.skeleton.n_joints

    def sample(self, i: int) -> PoseSample:
        return PoseSample(self.x[i].copy(), self.y[i].copy(), int(self.cam[i]), self.vis[i].copy())

    def subset(self, idx) -> "PoseDataset":
        idx = np.asarray(idx)
        return PoseDataset(self.x[idx], self.y[idx], self.skeleton, self.cam[idx], self.vis[idx])


# -- normalization -------------------------------------------------------------


def root_center(y: np.ndarray, root: int = 0) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    joints = y.reshape(*y.shape[:-1], -1, 3)
    return (joints - joints[..., root:root + 1, :]).reshape(y.shape)


@dataclass
class NormStats:
    mean_x: np.ndarray
    std_x: np.ndarray
    mean_y: np.ndarray
    std_y: np.ndarray
    warnings: List[str] = field(default_factory=list, compare=False)

    @classmethod
    def compute(cls, ds: PoseDataset) -> "NormStats":
        if len(ds) < 2:
            raise ConfigError("normalization statistics need at least 2 samples")
        root = ds.skeleton.root
        y = root_center(ds.y, root)
        mean_x, std_x = ds.x.mean(axis=0), ds.x.std(axis=0)
        mean_y, std_y = y.mean(axis=0), y.std(axis=0)
        root_dims = np.arange(3 * root, 3 * root + 3)
        floored = np.concatenate([std_x < STD_FLOOR, np.delete(std_y < STD_FLOOR, root_dims)])
        std_x = np.maximum(std_x, STD_FLOOR)
        std_y = np.maximum(std_y, STD_FLOOR)
        mean_y[root_dims] = 0.0
        std_y[root_dims] = 1.0
        notes = []
        if floored.mean() > 0.1:
            notes.append(f"standard deviation floor hit on {int(floored.sum())} of {floored.size} dimensions")
            warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)
        return cls(mean_x, std_x, mean_y, std_y, notes)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.mean_x, self.std_x, self.mean_y, self.std_y):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("mean_x", "std_x", "mean_y", "std_y")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("mean_x", "std_x", "mean_y", "std_y")))


def normalize_x(x: np.ndarray, stats: NormStats, vis: Optional[np.ndarray] = None) -> np.ndarray:
    """Standardize 2D inputs; coordinates of invisible joints become exactly 0."""
    out = (np.asarray(x, dtype=np.float64) - stats.mean_x) / stats.std_x
    if vis is not None:
        out = np.where(np.repeat(np.asarray(vis, dtype=bool), 2, axis=-1), out, 0.0)
    return out


def normalize_y(y: np.ndarray, stats: NormStats, root: int = 0) -> np.ndarray:
    return (root_center(y, root) - stats.mean_y) / stats.std_y


def denormalize_x(xn: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(xn) * stats.std_x + stats.mean_x


def denormalize_y(yn: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(yn) * stats.std_y + stats.mean_y


def normalize(sample: PoseSample, stats: NormStats, root: int = 0) -> PoseSample:
    return PoseSample(normalize_x(sample.x, stats, sample.visibility), normalize_y(sample.y, stats, root),
                      sample.camera_id, sample.visibility.copy())


def denormalize(sample: PoseSample, stats: NormStats) -> PoseSample:
    return PoseSample(denormalize_x(sample.x, stats), denormalize_y(sample.y, stats),
                      sample.camera_id, sample.visibility.copy())


# -- occlusion -----------------------------------------------------------------


def occlude(sample: PoseSample, k: int, rng: np.random.Generator, skeleton: Skeleton, fill: float = 0.0) -> PoseSample:
    """Hide ``k`` distinct limb joints, chosen uniformly; ``y`` is left untouched."""
    limbs = skeleton.limbs
    if not 0 <= k <= len(limbs):
        raise ConfigError(f"cannot hide {k} joints from a limb set of {len(limbs)}")
    out = PoseSample(sample.x.copy(), sample.y, sample.camera_id, sample.visibility.copy())
    if k == 0:
        return out
    for j in rng.choice(limbs, size=k, replace=False):
        out.visibility[j] = False
        out.x[2 * j:2 * j + 2] = fill
    return out


def occlusion_mask(count: int, k, skeleton: Skeleton, rng: np.random.Generator) -> np.ndarray:
    """Visibility masks for ``count`` samples, hiding ``k`` limb joints in each.

    ``k`` is an int or a per-sample integer array.
    """
    limbs = np.asarray(skeleton.limbs)
    ks = np.broadcast_to(np.asarray(k), (count,))
    if (ks < 0).any() or (ks > len(limbs)).any():
        raise ConfigError(f"cannot hide more than {len(limbs)} limb joints")
    vis = np.ones((count, skeleton.n_joints), dtype=bool)
    if ks.max(initial=0) == 0:
        return vis
    # ranking i.i.d. uniform keys gives a uniformly random ordering of the limb set per row
    order = np.argsort(rng.random((count, len(limbs))), axis=1)
    for i in range(count):
        vis[i, limbs[order[i, :ks[i]]]] = False
    return vis


# -- synthetic benchmark -------------------------------------------------------


@dataclass
class SynthSpec:
    bones: int = 4
    bone_lengths: Optional[Sequence[float]] = None
    polar: Tuple[float, float] = (math.pi / 6, 5 * math.pi / 6)
    azimuth: Tuple[float, float] = (-math.pi, math.pi)
    samples: int = 10_000
    reflection_mix: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.bones < 1:
            raise ConfigError(f"bones: need at least one bone, got {self.bones}")
        if self.bone_lengths is None:
            self.bone_lengths = [1.0] * self.bones
        self.bone_lengths = [float(v) for v in self.bone_lengths]
        if len(self.bone_lengths) != self.bones or min(self.bone_lengths) <= 0:
            raise ConfigError("bone_lengths: need one positive length per bone")
        if not 0.0 <= self.reflection_mix <= 1.0:
            raise ConfigError(f"reflection_mix must lie in [0, 1], got {self.reflection_mix}")
        if self.samples < 1:
            raise ConfigError(f"samples must be positive, got {self.samples}")
        lo, hi = self.polar
        if not 0 <= lo <= hi <= math.pi:
            raise ConfigError(f"polar bounds must satisfy 0 <= lo <= hi <= pi, got {self.polar}")
        if self.azimuth[0] > self.azimuth[1]:
            raise ConfigError(f"azimuth bounds are reversed: {self.azimuth}")

    @property
    def chain_length(self) -> float:
        return float(sum(self.bone_lengths))

    def to_dict(self) -> dict:
        return {"bones": self.bones, "bone_lengths": list(self.bone_lengths), "polar": list(self.polar),
                "azimuth": list(self.azimuth), "samples": self.samples,
                "reflection_mix": self.reflection_mix, "seed": self.seed}


def reflect_depth(y: np.ndarray) -> np.ndarray:
    out = np.array(y, dtype=np.float64, copy=True)
    out[..., 2::3] *= -1.0
    return out


def _sample_chain(spec: SynthSpec, index: int) -> Tuple[np.ndarray, bool]:
    rng = np.random.default_rng([spec.seed, index])
    theta = rng.uniform(*spec.polar, size=spec.bones)
    phi = rng.uniform(*spec.azimuth, size=spec.bones)
    reflected = bool(rng.random() < spec.reflection_mix)
    dirs = np.stack([np.sin(theta) * np.cos(phi), np.cos(theta), np.abs(np.sin(theta) * np.sin(phi))], axis=1)
    if reflected:
        dirs[:, 2] = -dirs[:, 2]
    joints = np.zeros((spec.bones + 1, 3))
    joints[1:] = np.cumsum(np.asarray(spec.bone_lengths)[:, None] * dirs, axis=0)
    return joints.reshape(-1), reflected


@dataclass
class ChainOracle:
    """Closed-form preimages of a 2D chain under orthographic projection."""

    bone_lengths: List[float]
    reflection_mix: float

    def canonical(self, x: np.ndarray) -> np.ndarray:
        """Depth-non-negative lift of ``x``; works on ``[2N]`` or ``[K, 2N]``."""
        x = np.asarray(x, dtype=np.float64)
        xy = x.reshape(*x.shape[:-1], -1, 2)
        bones = np.diff(xy, axis=-2)
        lengths = np.asarray(self.bone_lengths)
        depth = np.sqrt(np.maximum(lengths ** 2 - (bones ** 2).sum(axis=-1), 0.0))
        z = np.concatenate([np.zeros(depth.shape[:-1] + (1,)), np.cumsum(depth, axis=-1)], axis=-1)
        joints = np.concatenate([xy - xy[..., :1, :], z[..., None]], axis=-1)
        return joints.reshape(*x.shape[:-1], -1)

    def modes(self, x: np.ndarray) -> np.ndarray:
        """All preimages in the data's support: ``[n_modes, 3N]`` (or ``[K, n_modes, 3N]``)."""
        canon = self.canonical(x)
        if self.reflection_mix == 0.0:
            stack = [canon]
        elif self.reflection_mix == 1.0:
            stack = [reflect_depth(canon)]
        else:
            stack = [canon, reflect_depth(canon)]
        return np.stack(stack, axis=-2)

    __call__ = modes

    def to_dict(self) -> dict:
        return {"kind": "orthographic_chain", "bone_lengths": list(self.bone_lengths),
                "reflection_mix": self.reflection_mix}

    @classmethod
    def from_dict(cls, d: dict) -> "ChainOracle":
        return cls([float(v) for v in d["bone_lengths"]], float(d["reflection_mix"]))


def synth_generate(spec: SynthSpec) -> Tuple[PoseDataset, ChainOracle]:
    ys = np.stack([_sample_chain(spec, i)[0] for i in range(spec.samples)])
    return _chain_dataset(spec, ys), ChainOracle(list(spec.bone_lengths), spec.reflection_mix)


def _chain_dataset(spec: SynthSpec, ys: np.ndarray, cam_id: int = -1) -> PoseDataset:
    xs = ys.reshape(len(ys), -1, 3)[:, :, :2].reshape(len(ys), -1)
    return PoseDataset(xs, ys, chain_skeleton(spec.bones), np.full(len(ys), cam_id))


def orthogonal_cameras(views: int = 2) -> List[CameraModel]:
    """Orthographic cameras a quarter turn apart about the vertical axis."""
    if not 1 <= views <= 4:
        raise ConfigError(f"between 1 and 4 orthogonal views are supported, got {views}")
    return [CameraModel(R=rotation_about("y", math.pi / 2 * v), id=v) for v in range(views)]


def synth_multiview(spec: SynthSpec, cams: Sequence[CameraModel]):
    """Synthetic world poses seen by several orthographic cameras.

    World poses are drawn from the single-view generator (the world frame
    coincides with the first camera) and kept only if every camera sees
    bone depths of a single sign, so each view is itself a sample from the
    benchmark's support.  Returns ``(world_poses, per_camera_datasets, oracle)``.
    """
    kept, index = [], 0
    while len(kept) < spec.samples:
        y, _ = _sample_chain(spec, index)
        index += 1
        ok = True
        for cam in cams:
            depth = np.diff(world_to_camera(cam, y).reshape(-1, 3)[:, 2])
            if not ((depth >= 0).all() or (depth <= 0).all()):
                ok = False
                break
        if ok:
            kept.append(y)
        if index > 1000 * spec.samples:
            raise ConfigError("camera layout rejects nearly every synthetic pose")
    world = np.stack(kept)
    views = []
    for cam in cams:
        ycam = np.stack([world_to_camera(cam, y) for y in world])
        ycam = root_center(ycam)
        xs = np.stack([project(cam, y) for y in ycam])
        views.append(PoseDataset(xs, ycam, chain_skeleton(spec.bones), np.full(len(world), cam.id)))
    return world, views, ChainOracle(list(spec.bone_lengths), spec.reflection_mix)


# -- splitting -----------------------------------------------------------------


def split(ds: PoseDataset, train_fraction: float, seed: int) -> Tuple[PoseDataset, PoseDataset]:
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train fraction must lie in (0, 1), got {train_fraction}")
    n_train = int(round(len(ds) * train_fraction))
    if n_train == 0 or n_train == len(ds):
        raise ConfigError(f"split of {len(ds)} samples at {train_fraction} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(np.sort(perm[:n_train])), ds.subset(np.sort(perm[n_train:]))


# -- file I/O ------------------------------------------------------------------


def _header(n: int) -> str:
    return f"{FORMAT_TAG} N={n} fields=x[2N],y[3N],cam,vis[N]"


def companion_path(path, suffix: str) -> Path:
    path = Path(path)
    stem = path.name[:-4] if path.name.endswith(".csv") else path.name
    return path.with_name(f"{stem}.{suffix}.json")


def save_dataset(ds: PoseDataset, path, stats: Optional[NormStats] = None) -> None:
    """Write the CSV and its ``.stats.json`` companion (statistics plus skeleton)."""
    path = Path(path)
    lines = [_header(ds.n_joints)]
    for i in range(len(ds)):
        fields = [repr(float(v)) for v in ds.x[i]] + [repr(float(v)) for v in ds.y[i]]
        fields.append(str(int(ds.cam[i])))
        fields.extend("1" if v else "0" for v in ds.vis[i])
        lines.append(",".join(fields))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    stats = stats if stats is not None else NormStats.compute(ds)
    payload = dict(stats.to_dict(), skeleton=ds.skeleton.to_dict())
    companion_path(path, "stats").write_text(json.dumps(payload, indent=1) + "\n")


def parse_header(line: str) -> int:
    parts = line.strip().split()
    if len(parts) < 3 or " ".join(parts[:2]) != FORMAT_TAG or not parts[2].startswith("N="):
        raise ParseError(f"malformed header {line.strip()!r}", 1)
    try:
        n = int(parts[2][2:])
    except ValueError:
        raise ParseError(f"malformed joint count in header {line.strip()!r}", 1) from None
    if n < 1:
        raise ParseError("joint count must be positive", 1)
    return n


def _parse_float(token: str, lineno: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"row {lineno}: not a number: {token!r}", lineno) from None
    if not math.isfinite(value):
        raise ParseError(f"row {lineno}: non-finite value {token!r}", lineno)
    return value


def load_dataset(path) -> PoseDataset:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file", 1)
    n = parse_header(lines[0])
    base = 2 * n + 3 * n + 1
    xs, ys, cams, vis = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        tokens = line.split(",")
        if len(tokens) not in (base, base + n):
            raise ParseError(f"row {lineno}: expected {base} or {base + n} columns, got {len(tokens)}", lineno)
        values = [_parse_float(t, lineno) for t in tokens[:5 * n]]
        try:
            cams.append(int(tokens[5 * n]))
        except ValueError:
            raise ParseError(f"row {lineno}: camera id {tokens[5 * n]!r} is not an integer", lineno) from None
        flags = tokens[base:]
        if any(f.strip() not in ("0", "1") for f in flags):
            raise ParseError(f"row {lineno}: visibility flags must be 0 or 1", lineno)
        vis.append([f.strip() == "1" for f in flags] if flags else [True] * n)
        xs.append(values[:2 * n])
        ys.append(values[2 * n:])
    skeleton = load_skeleton(path) or chain_skeleton(n - 1)
    if skeleton.n_joints != n:
        raise ParseError(f"{path}: companion skeleton has {skeleton.n_joints} joints, header says {n}", 1)
    k = len(xs)
    return PoseDataset(np.array(xs).reshape(k, 2 * n), np.array(ys).reshape(k, 3 * n), skeleton,
                       np.array(cams, dtype=np.int64), np.array(vis, dtype=bool).reshape(k, n))


def load_skeleton(path) -> Optional[Skeleton]:
    comp = companion_path(path, "stats")
    if not comp.exists():
        return None
    return Skeleton.from_dict(json.loads(comp.read_text())["skeleton"])


def load_stats(path) -> NormStats:
    comp = companion_path(path, "stats")
    return NormStats.from_dict(json.loads(comp.read_text()))
