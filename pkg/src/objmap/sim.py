"""Deterministic synthetic sequences: gravity-aligned objects from a shape
database, an interpolated camera trajectory, and per-frame observations."""

from __future__ import annotations

import json
import logging
import math
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.spatial.transform import Rotation, Slerp

from .geometry import RigidTransform, look_at, rodrigues, unit_gravity
from .mesh import ShapeDatabase, synthetic_database
from .perception import (
    FrameObservation,
    NoiseConfig,
    SceneTruth,
    occlusion_fraction,
    synth_observation,
    write_edge_map,
    write_proposals,
)
from .raster import CameraIntrinsics

log = logging.getLogger(__name__)

SIM_STREAM = 7

TRAJECTORY_FILE = "trajectory.txt"
PROPOSALS_FILE = "proposals.jsonl"
EDGES_DIR = "edges"
MANIFEST_FILE = "manifest.json"


class SimError(ValueError):
    pass


class Keyframe(BaseModel):
    """Camera pose, either looking at a target or given as a quaternion."""

    model_config = ConfigDict(extra="forbid")

    position: tuple[float, float, float]
    target: tuple[float, float, float] | None = None
    quaternion: tuple[float, float, float, float] | None = None  # scalar-last, camera to world

    @model_validator(mode="after")
    def _one_orientation(self):
        if (self.target is None) == (self.quaternion is None):
            raise ValueError("keyframe needs exactly one of target or quaternion")
        return self

    def pose(self, up) -> RigidTransform:
        if self.target is not None:
            return look_at(self.position, self.target, up)
        q = np.asarray(self.quaternion, dtype=float)
        return RigidTransform(Rotation.from_quat(q / np.linalg.norm(q)).as_matrix(), self.position)


class TrajectorySpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    keyframes: list[Keyframe] = Field(min_length=1)
    frames: int = Field(100, ge=1)
    fps: float = Field(30.0, gt=0.0)


class ObjectSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    shape: int
    position: tuple[float, float, float]
    azimuth: float


class IntrinsicsSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    fx: float = 250.0
    fy: float = 250.0
    cx: float = 160.0
    cy: float = 120.0
    width: int = 320
    height: int = 240

    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)


class SceneSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    gravity: tuple[float, float, float] = (0.0, 0.0, -1.0)
    objects: list[ObjectSpec] = Field(default_factory=list)
    trajectory: TrajectorySpec
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    intrinsics: IntrinsicsSpec = Field(default_factory=IntrinsicsSpec)
    seed: int = Field(0, ge=0)
    # force detector dropout for an object whenever it is at least this occluded
    dropout_when_occluded: float | None = Field(None, gt=0.0, le=1.0)
    record_occlusion: bool = False
    # object id expected to be at least half hidden for at least half the frames
    occluded_object: int | None = Field(None, ge=1)

    @field_validator("gravity")
    @classmethod
    def _unit_gravity(cls, g):
        n = float(np.linalg.norm(g))
        if not n > 0:
            raise ValueError("gravity must be non-zero")
        return tuple(float(v) / n for v in g)

    def check_database(self, db: ShapeDatabase) -> None:
        missing = [o.shape for o in self.objects if o.shape not in db]
        if missing:
            raise SimError(f"shape ids {missing} are not in the database")


def object_pose(o: ObjectSpec, gamma) -> RigidTransform:
    return RigidTransform(rodrigues(gamma, o.azimuth), o.position)


def scene_truth(spec: SceneSpec, db: ShapeDatabase) -> SceneTruth:
    spec.check_database(db)
    g = unit_gravity(spec.gravity)
    return SceneTruth(tuple(
        (i + 1, o.shape, db.category_of(o.shape), db.mesh(o.shape), object_pose(o, g))
        for i, o in enumerate(spec.objects)
    ))


def interpolate_keyframes(keys, n_frames: int):
    """Keyframes spread evenly over the sequence; linear translation and
    spherical rotation interpolation in between."""
    if len(keys) == 1 or n_frames == 1:
        return [keys[0]] * n_frames
    s = np.linspace(0.0, len(keys) - 1, n_frames)
    slerp = Slerp(np.arange(len(keys)), Rotation.from_matrix(np.stack([k.R for k in keys])))
    Rs = slerp(s).as_matrix()
    T = np.stack([k.t for k in keys])
    out = []
    for f, sf in enumerate(s):
        i = min(int(math.floor(sf)), len(keys) - 2)
        a = sf - i
        if a == 0.0 or a == 1.0:
            # land exactly on keyframes
            out.append(keys[i + int(a)])
            continue
        out.append(RigidTransform(Rs[f], (1.0 - a) * T[i] + a * T[i + 1]))
    return out


def camera_poses(spec: SceneSpec):
    up = -np.asarray(spec.gravity)
    keys = [k.pose(up) for k in spec.trajectory.keyframes]
    return interpolate_keyframes(keys, spec.trajectory.frames)


def frame_seed(seed: int, frame: int):
    return [seed, SIM_STREAM, frame]


@dataclass(frozen=True, eq=False)
class Sequence:
    """A generated sequence held in memory."""

    spec: SceneSpec
    truth: SceneTruth
    K: CameraIntrinsics
    poses: list
    timestamps: np.ndarray
    frames: list  # SynthFrame per frame
    occlusion: dict  # obj id -> per-frame hidden fraction (may be empty)

    @property
    def observations(self):
        return [f.observation for f in self.frames]

    def gt_boxes(self) -> dict:
        """frame -> [(box, category)] of every visible object, for the oracle
        scorer. Dropout removes proposals only; hypothesis boxes are still scored."""
        return {
            i: [(b, self.truth.category(o)) for o, b in sorted(f.truth.boxes.items())]
            for i, f in enumerate(self.frames)
        }


def simulate(spec: SceneSpec, db: ShapeDatabase | None = None) -> Sequence:
    db = db or synthetic_database()
    truth = scene_truth(spec, db)
    K = spec.intrinsics.camera()
    poses = camera_poses(spec)
    n = len(poses)
    stamps = np.arange(n) / spec.trajectory.fps
    occlusion = {}
    noise = spec.noise
    if spec.record_occlusion or spec.dropout_when_occluded is not None or spec.occluded_object is not None:
        for oid, *_ in truth.objects:
            occlusion[oid] = [occlusion_fraction(truth, cam, K, oid) for cam in poses]
    target = spec.occluded_object
    if target is not None and target in occlusion:
        fr = np.array(occlusion[target], dtype=float)
        if not np.mean(fr >= 0.5) >= 0.5:
            log.warning("object %d is at least half hidden in only %.0f%% of frames (mean fraction %.2f)", target,
                        100 * np.mean(fr >= 0.5), np.nanmean(fr))
    if spec.dropout_when_occluded is not None:
        forced = {k: list(v) for k, v in noise.forced_dropout.items()}
        for oid, fr in occlusion.items():
            forced.setdefault(oid, []).extend(
                (f, f) for f, v in enumerate(fr) if np.isfinite(v) and v >= spec.dropout_when_occluded)
        noise = noise.model_copy(update={"forced_dropout": forced})
    cats = sorted({c for _, _, c, _, _ in truth.objects}) or [1]
    frames = [
        synth_observation(truth, cam, K, noise, frame_seed(spec.seed, f), frame=f, timestamp=float(stamps[f]),
                          gravity=spec.gravity, categories=tuple(cats))
        for f, cam in enumerate(poses)
    ]
    return Sequence(spec, truth, K, poses, stamps, frames, occlusion)


def manifest_record(seq: Sequence) -> dict:
    objs = []
    for oid, shape, cat, _, g in seq.truth.objects:
        o = seq.spec.objects[oid - 1]
        objs.append({"id": oid, "shape": shape, "category": cat, "azimuth": float(o.azimuth),
                     "R": g.R.tolist(), "t": g.t.tolist()})
    frames = []
    for i, f in enumerate(seq.frames):
        rec = {"index": i, "timestamp": float(seq.timestamps[i]),
               "boxes": {str(k): [int(v) for v in b] for k, b in sorted(f.truth.boxes.items())},
               "detected": list(f.detected)}
        if seq.occlusion:
            rec["occlusion"] = {str(k): (None if not np.isfinite(v[i]) else float(v[i]))
                                for k, v in sorted(seq.occlusion.items())}
        frames.append(rec)
    out = {
        "gravity": list(seq.spec.gravity),
        "intrinsics": seq.K.as_dict(),
        "objects": objs,
        "frames": frames,
        "spec": json.loads(seq.spec.model_dump_json()),
    }
    if seq.occlusion:
        out["mean_occlusion"] = {str(k): float(np.nanmean(v)) if np.isfinite(v).any() else None
                                 for k, v in sorted(seq.occlusion.items())}
    return out


def write_sequence(seq: Sequence, out_dir) -> Path:
    """Write the four sequence artifacts. Output is assembled in a scratch
    directory and moved into place, so a failure leaves nothing behind."""
    from .filtering import write_trajectory

    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".seq-", dir=out_dir.parent))
    try:
        write_trajectory(tmp / TRAJECTORY_FILE, seq.timestamps, seq.poses)
        write_proposals(tmp / PROPOSALS_FILE, [p for f in seq.frames for p in f.observation.proposals])
        (tmp / EDGES_DIR).mkdir()
        for i, f in enumerate(seq.frames):
            write_edge_map(tmp / EDGES_DIR / f"{i:06d}.pgm", f.observation.edges)
        (tmp / MANIFEST_FILE).write_text(json.dumps(manifest_record(seq), indent=1, sort_keys=True) + "\n")
        if out_dir.exists():
            shutil.rmtree(out_dir)
        tmp.rename(out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out_dir


def generate(spec: SceneSpec, out_dir, db: ShapeDatabase | None = None) -> Path:
    """Simulate and write ``trajectory.txt``, ``proposals.jsonl``,
    ``edges/%06d.pgm`` and ``manifest.json`` into ``out_dir``."""
    return write_sequence(simulate(spec, db), out_dir)


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------


def azimuth_grid(seed: int, n: int = 1, bins: int = 24) -> np.ndarray:
    """Seeded azimuths on a half-offset grid, never exactly 0."""
    rng = np.random.default_rng([seed, SIM_STREAM, 99])
    return (rng.integers(0, bins, n) + 0.5) * (2.0 * math.pi / bins)


def orbit_keyframes(center, radius: float, height: float, start_deg: float, end_deg: float, n: int = 5):
    cx, cy, cz = (float(v) for v in center)
    out = []
    for a in np.radians(np.linspace(start_deg, end_deg, n)):
        pos = (cx + radius * math.cos(a), cy + radius * math.sin(a), height)
        out.append(Keyframe(position=pos, target=(cx, cy, cz)))
    return out


def single_object_spec(seed: int, shape: int | None = None, frames: int = 100, noise: NoiseConfig | None = None,
                       radius: float = 1.6, sweep_deg: float = 60.0, db: ShapeDatabase | None = None) -> SceneSpec:
    """One database object on the floor, camera orbiting it at eye height."""
    db = db or synthetic_database()
    rng = np.random.default_rng([seed, SIM_STREAM, 98])
    if shape is None:
        shape = int(rng.integers(1, db.K + 1))
    half_h = 0.5 * float(np.ptp(db.mesh(shape).vertices[:, 2]))
    az = float(azimuth_grid(seed)[0])
    start = float(rng.uniform(0.0, 360.0))
    keys = orbit_keyframes((0.0, 0.0, half_h), radius, 1.2, start, start + sweep_deg)
    if noise is None:
        noise = NoiseConfig(box_jitter=2.0, edge_blur=1.0)
    return SceneSpec(objects=[ObjectSpec(shape=shape, position=(0.0, 0.0, half_h), azimuth=az)],
                     trajectory=TrajectorySpec(keyframes=keys, frames=frames), noise=noise, seed=seed)


# (time fraction, camera x) for the occlusion sweep: a clear approach, a slow
# pass behind A, and a clear exit
CAMERA_SWEEP = ((0.0, -3.0), (0.2, -1.8), (0.24, -0.5), (0.78, 0.5), (0.82, 1.8), (1.0, 3.0))
SWEEP_KEYFRAMES = 51


def occlusion_fixture(seed: int = 0, frames: int = 160, with_occluder: bool = True, full_cover: bool = False,
                      noise: NoiseConfig | None = None, dropout_when_occluded: float | None = 0.5,
                      db: ShapeDatabase | None = None) -> SceneSpec:
    """Two objects: A (the cabinet, shape 4) between the camera path and B
    (the armchair, shape 2). A is taller than B, so it can hide B whatever
    the two azimuths are.

    The camera slides sideways past A, so B is mostly visible at both ends
    and at least half hidden behind A through the middle of the sequence.
    About a fifth of the frames see B nearly unobstructed before it goes
    behind A, and about a fifth see it again afterwards.
    ``full_cover`` parks the camera where A hides B entirely.
    """
    db = db or synthetic_database()
    az = azimuth_grid(seed, 2)
    za = 0.5 * float(np.ptp(db.mesh(4).vertices[:, 2]))
    zb = 0.5 * float(np.ptp(db.mesh(2).vertices[:, 2]))
    a_pos = (0.0, -0.9, za)
    b_pos = (0.0, 0.0, zb)
    objects = [ObjectSpec(shape=4, position=a_pos, azimuth=float(az[0])),
               ObjectSpec(shape=2, position=b_pos, azimuth=float(az[1]))]
    if not with_occluder:
        objects = objects[1:]
    target = (0.0, -0.45, 0.4)
    if full_cover:
        keys = [Keyframe(position=(0.0, -1.45, 0.5), target=(0.0, 0.0, zb))]
    else:
        t, x = zip(*CAMERA_SWEEP)
        xs = np.interp(np.linspace(0.0, 1.0, SWEEP_KEYFRAMES), t, x)
        keys = [Keyframe(position=(float(v), -2.6, 0.9), target=target) for v in xs]
    if noise is None:
        noise = NoiseConfig(box_jitter=2.0, edge_blur=1.0)
    return SceneSpec(objects=objects, trajectory=TrajectorySpec(keyframes=keys, frames=frames), noise=noise,
                     seed=seed, dropout_when_occluded=dropout_when_occluded, record_occlusion=True,
                     occluded_object=2 if with_occluder else None)


def load_spec(path) -> SceneSpec:
    doc = json.loads(Path(path).read_text())
    doc.pop("version", None)
    return SceneSpec.model_validate(doc)


# ---------------------------------------------------------------------------
# reading a written sequence back
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LoadedSequence:
    manifest: dict
    K: CameraIntrinsics
    observations: list

    def gt_boxes(self) -> dict:
        """frame -> [(box, category)] of every visible ground-truth object."""
        cat = {o["id"]: o["category"] for o in self.manifest["objects"]}
        return {
            f["index"]: [(b, cat[int(o)]) for o, b in sorted(f["boxes"].items(), key=lambda kv: int(kv[0]))]
            for f in self.manifest["frames"]
        }

    def gt_poses(self) -> dict:
        """obj id -> (shape id, object-to-world)."""
        return {o["id"]: (o["shape"], RigidTransform(np.array(o["R"]), np.array(o["t"])))
                for o in self.manifest["objects"]}


def read_sequence(seq_dir, gravity=None, K: CameraIntrinsics | None = None) -> LoadedSequence:
    """Load every frame of a sequence directory; raises ValueError on any
    missing or malformed part."""
    from .filtering import read_trajectory
    from .perception import read_edge_map, read_proposals

    seq_dir = Path(seq_dir)
    for name in (TRAJECTORY_FILE, PROPOSALS_FILE, MANIFEST_FILE, EDGES_DIR):
        if not (seq_dir / name).exists():
            raise ValueError(f"sequence {seq_dir} is missing {name}")
    try:
        manifest = json.loads((seq_dir / MANIFEST_FILE).read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{seq_dir / MANIFEST_FILE}: {e}") from None
    if K is None:
        K = CameraIntrinsics(**manifest["intrinsics"])
    gravity = manifest.get("gravity", (0.0, 0.0, -1.0)) if gravity is None else gravity
    stamps, poses = read_trajectory(seq_dir / TRAJECTORY_FILE)
    props = read_proposals(seq_dir / PROPOSALS_FILE)
    if props and (min(props) < 0 or max(props) >= len(poses)):
        raise ValueError("proposal frame index outside the trajectory")
    obs = []
    for i, (t, cam) in enumerate(zip(stamps, poses)):
        path = seq_dir / EDGES_DIR / f"{i:06d}.pgm"
        if not path.exists():
            raise ValueError(f"missing edge map {path}")
        edges = read_edge_map(path)
        if edges.shape != (K.height, K.width):
            raise ValueError(f"{path}: edge map is {edges.shape}, expected {(K.height, K.width)}")
        obs.append(FrameObservation(i, float(t), cam, gravity, tuple(props.get(i, ())), edges))
    return LoadedSequence(manifest, K, obs)
