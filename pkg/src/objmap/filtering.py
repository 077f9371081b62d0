"""Per-object bootstrap particle filter over shape label x gravity-aligned
pose, with proposal-driven spawning, explain-away and Z-buffer occlusion."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .geometry import (
    PoseParams,
    RigidTransform,
    angle_diff,
    centroid_in_camera,
    matrix_to_quat,
    object_to_inertial,
    object_to_inertial_batch,
    quat_to_matrix,
    unit_gravity,
    wrap_angle,
)
from .mesh import ShapeDatabase
from .perception import (
    LOG_EDGE_FLOOR,
    DetectionProposal,
    FrameObservation,
    LikelihoodWeights,
    ProviderError,
    batched_edge_likelihood,
    combined_log_likelihood,
)
from .raster import (
    CameraIntrinsics,
    MeshPack,
    box_iou,
    box_iou_matrix,
    composite,
    mask_box,
    render_depth,
    render_particles,
)

log = logging.getLogger(__name__)

# rng stream tags, combined with (seed, frame, object id)
STAGE_PREDICT = 0
STAGE_RESAMPLE = 1
STAGE_INIT = 2


class FilterError(RuntimeError):
    pass


class FrameOrderError(FilterError):
    """Observation older than (or as old as) the last processed frame."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


class DiffusionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    std_x: float = Field(0.01, ge=0.0)
    std_y: float = Field(0.01, ge=0.0)
    std_rho: float = Field(0.02, ge=0.0)
    std_theta: float = Field(0.05, ge=0.0)
    p_stay: float = Field(0.9, gt=0.0, le=1.0)
    anneal: float = Field(0.99, gt=0.0, le=1.0)
    anneal_floor: float = Field(0.1, ge=0.0, le=1.0)

    def stds(self, age: int = 0) -> np.ndarray:
        """Per-dimension stds after ``age`` frames of annealing."""
        scale = max(self.anneal ** age, self.anneal_floor)
        return scale * np.array([self.std_x, self.std_y, self.std_rho, self.std_theta])


class FilterConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_particles: int = Field(400, ge=1)
    z_nominal: float = Field(1.5, gt=0.0)
    z_nominal_by_category: dict[int, float] = Field(default_factory=dict)
    sigma_rho: float = Field(0.5, ge=0.0)
    sigma_bearing: float = Field(0.02, ge=0.0)
    persistence: int = Field(3, ge=1)
    persistence_iou: float = Field(0.5, gt=0.0, le=1.0)
    explain_iou: float = Field(0.5, gt=0.0, le=1.0)
    nms_iou: float = Field(0.5, gt=0.0, le=1.0)
    min_proposal_score: float = Field(0.0, ge=0.0, le=1.0)
    loss_frames: int = Field(10, ge=1)
    # a set whose mean state shows less than this fraction of its pixels past
    # the other tracked objects is held unchanged that frame
    occlusion_gate: float = Field(0.1, ge=0.0, le=1.0)
    ess_resample: bool = False
    alpha: float = Field(1.0, ge=0.0)
    beta: float = Field(1.0, ge=0.0)
    search_radius: int = Field(10, ge=1)
    edge_sigma: float = Field(3.0, gt=0.0)
    max_contour_samples: int = Field(200, ge=1)
    seed: int = Field(0, ge=0)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)

    @field_validator("z_nominal_by_category")
    @classmethod
    def _positive_depths(cls, v):
        if any(z <= 0 for z in v.values()):
            raise ValueError("nominal depths must be positive")
        return v

    @property
    def weights(self) -> LikelihoodWeights:
        return LikelihoodWeights(self.alpha, self.beta)

    def nominal_depth(self, category: int) -> float:
        return self.z_nominal_by_category.get(category, self.z_nominal)


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


class Status(str, Enum):
    INITIALIZING = "initializing"
    TRACKING = "tracking"
    LOST = "lost"


_STATUS_ORDER = {Status.INITIALIZING: 0, Status.TRACKING: 1, Status.LOST: 2}


@dataclass(frozen=True, eq=False)
class ObjectHypothesis:
    shape: int
    pose: PoseParams
    ref_frame: int
    ref_cam: RigidTransform

    def object_to_inertial(self, gamma) -> RigidTransform:
        return object_to_inertial(self.pose, self.ref_cam, gamma)


@dataclass(frozen=True, eq=False)
class ParticleSet:
    """N weighted hypotheses for one object instance, sharing a reference camera."""

    obj_id: int
    category: int
    shapes: np.ndarray  # (N,) database shape ids
    params: np.ndarray  # (N, 4) x, y, rho, theta
    weights: np.ndarray  # (N,)
    ref_frame: int
    ref_cam: RigidTransform
    gamma: np.ndarray
    status: Status = Status.INITIALIZING
    age: int = 0  # predict steps taken
    floor_frames: int = 0  # consecutive frames with every particle at the likelihood floor
    ess: float = float("nan")

    def __post_init__(self):
        n = len(self.shapes)
        if self.params.shape != (n, 4) or self.weights.shape != (n,):
            raise ValueError("inconsistent particle array shapes")

    @property
    def n(self) -> int:
        return len(self.shapes)

    def particle(self, i: int) -> ObjectHypothesis:
        return ObjectHypothesis(int(self.shapes[i]), PoseParams.from_array(self.params[i]), self.ref_frame,
                                self.ref_cam)

    def with_status(self, status: Status) -> "ParticleSet":
        if _STATUS_ORDER[status] < _STATUS_ORDER[self.status]:
            raise FilterError(f"status cannot move from {self.status.value} back to {status.value}")
        return replace(self, status=status)


@dataclass(frozen=True, eq=False)
class MeanState:
    hypothesis: ObjectHypothesis
    shape_posterior: dict  # shape id -> probability

    @property
    def shape(self) -> int:
        return self.hypothesis.shape


@dataclass
class _Candidate:
    box: tuple
    category: int
    count: int


@dataclass
class WorldState:
    sets: dict = field(default_factory=dict)  # obj id -> ParticleSet
    means: dict = field(default_factory=dict)  # obj id -> MeanState
    frame: int = -1
    timestamp: float = -math.inf
    next_id: int = 1
    candidates: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# filter operations
# ---------------------------------------------------------------------------


def stream_rng(seed: int, frame: int, obj_id: int, stage: int) -> np.random.Generator:
    """Independent generator per (frame, object, stage), so results do not
    depend on the order objects are processed in."""
    return np.random.default_rng([seed, max(frame, 0), obj_id, stage])


def initialize_object(proposal: DetectionProposal, cam: RigidTransform, gamma, K: CameraIntrinsics,
                      db: ShapeDatabase, cfg: FilterConfig, rng, obj_id: int = 1,
                      frame: int | None = None) -> ParticleSet | None:
    """Spawn N particles around the ray through the proposal's box center.

    Returns None (with a warning) if no database shape has the proposal's category.
    """
    shapes = db.shapes_in_category(proposal.category)
    if not shapes:
        log.warning("no database shape for category %d; proposal ignored", proposal.category)
        return None
    N = cfg.n_particles
    x0, y0, x1, y1 = proposal.box
    bx, by = K.back_project(0.5 * (x0 + x1), 0.5 * (y0 + y1))
    params = np.empty((N, 4))
    params[:, 0] = bx + rng.normal(0.0, cfg.sigma_bearing, N)
    params[:, 1] = by + rng.normal(0.0, cfg.sigma_bearing, N)
    params[:, 2] = math.log(cfg.nominal_depth(proposal.category)) + rng.normal(0.0, cfg.sigma_rho, N)
    params[:, 3] = rng.uniform(0.0, 2.0 * math.pi, N)
    params[:, 3] = wrap_angle(params[:, 3])
    k = np.asarray(shapes, dtype=np.int64)[rng.integers(0, len(shapes), N)]
    return ParticleSet(obj_id, proposal.category, k, params, np.full(N, 1.0 / N),
                       proposal.frame if frame is None else frame, cam, unit_gravity(gamma))


def predict(pset: ParticleSet, cfg: DiffusionConfig, rng, shape_ids) -> ParticleSet:
    """Gaussian random walk on the pose chart; shape kept with p_stay, else
    uniform over the other labels in ``shape_ids``."""
    N = pset.n
    params = pset.params + rng.normal(size=(N, 4)) * cfg.stds(pset.age)[None, :]
    params[:, 3] = wrap_angle(params[:, 3])
    shapes = pset.shapes.copy()
    labels = np.asarray(shape_ids, dtype=np.int64)
    jump = rng.random(N) >= cfg.p_stay
    if len(labels) > 1 and jump.any():
        # draw among K-1 alternatives by skipping the current label's slot
        pos = np.searchsorted(labels, shapes[jump])
        draw = rng.integers(0, len(labels) - 1, int(jump.sum()))
        draw = draw + (draw >= pos)
        shapes[jump] = labels[draw]
    return replace(pset, params=params, shapes=shapes, age=pset.age + 1)


@dataclass
class ScoringContext:
    """Everything ``score`` needs besides the particles and the frame."""

    db: ShapeDatabase
    K: CameraIntrinsics
    weights: LikelihoodWeights
    provider: object | None = None
    search_radius: int = 10
    edge_sigma: float = 3.0
    max_samples: int = 200
    pack: MeshPack = None

    def __post_init__(self):
        if self.pack is None:
            self.pack = MeshPack([self.db.mesh(k) for k in self.db.shape_ids])
        self._index = {k: i for i, k in enumerate(self.db.shape_ids)}

    def pack_index(self, shapes: np.ndarray) -> np.ndarray:
        return np.array([self._index[int(k)] for k in shapes], dtype=np.int64)


def particle_camera_poses(pset: ParticleSet, cam: RigidTransform):
    """(R_co, t_co) for every particle: inertial pose pulled into camera ``cam``."""
    R_io, T_io = object_to_inertial_batch(pset.params, pset.ref_cam, pset.gamma)
    Rc_t = cam.R.T
    R_co = np.einsum("ij,njk->nik", Rc_t, R_io)
    t_co = (T_io - cam.t) @ cam.R
    return R_co, t_co


def log_likelihoods(pset: ParticleSet, obs: FrameObservation, ctx: ScoringContext, zbuffer=None):
    """Per-particle L = alpha * Phi_cnn + beta * Phi_edge and the floor value.

    ``zbuffer`` is (depth, instance id) of the other tracked objects.
    Particles with nothing visible get the floor.
    """
    R_co, t_co = particle_camera_poses(pset, obs.camera)
    other_depth, other_id = zbuffer if zbuffer is not None else (None, None)
    rend = render_particles(ctx.pack, ctx.pack_index(pset.shapes), R_co, t_co, ctx.K, other_depth, other_id,
                            self_id=pset.obj_id, max_samples=ctx.max_samples)
    visible = rend.n_contour > 0
    cnn = np.zeros(pset.n)
    cnn_scored = ctx.provider is not None and ctx.weights.alpha > 0
    if cnn_scored:
        try:
            cnn_floor = ctx.provider.floor_log_score
            cnn[:] = cnn_floor
            if visible.any():
                cats = ctx.db.category_of(pset.shapes[visible])
                cnn[visible] = ctx.provider.score_boxes(obs.index, rend.boxes[visible], cats)
        except ProviderError as e:
            log.warning("frame %d: detector unavailable (%s); edge term only", obs.index, e)
            cnn[:] = 0.0
            cnn_scored = False
    edge = np.full(pset.n, LOG_EDGE_FLOOR)
    if obs.edges is not None and visible.any():
        edge[visible] = batched_edge_likelihood(rend.samples[visible], rend.normals[visible],
                                                rend.n_samples[visible], obs.edges, ctx.search_radius,
                                                ctx.edge_sigma)
    floor = combined_log_likelihood(ctx.provider.floor_log_score if cnn_scored else 0.0, LOG_EDGE_FLOOR,
                                    ctx.weights)
    L = combined_log_likelihood(cnn, edge, ctx.weights)
    L[~visible] = floor
    return L, floor, rend


def normalize_log_weights(L: np.ndarray) -> np.ndarray:
    m = float(np.max(L))
    w = np.exp(L - m)
    return w / w.sum()


def score(pset: ParticleSet, obs: FrameObservation, ctx: ScoringContext, zbuffer=None) -> ParticleSet:
    """Reweight particles by exp(L); tracks consecutive all-floor frames."""
    L, floor, _ = log_likelihoods(pset, obs, ctx, zbuffer)
    w = normalize_log_weights(L)
    at_floor = bool(np.max(L) <= floor + 1e-12)
    floor_frames = pset.floor_frames + 1 if at_floor else 0
    return replace(pset, weights=w, floor_frames=floor_frames, ess=effective_sample_size(w))


def effective_sample_size(w: np.ndarray) -> float:
    return float(1.0 / np.sum(np.square(w)))


def systematic_counts(weights: np.ndarray, rng) -> np.ndarray:
    """Offspring counts of systematic resampling; floor(N w) <= n_i <= ceil(N w)."""
    w = np.asarray(weights, dtype=float)
    N = len(w)
    if N == 0 or not np.all(w >= 0) or not w.sum() > 0:
        raise FilterError("resampling needs non-negative weights with positive sum")
    c = np.cumsum(w / w.sum()) * N
    # snap round-off so integral N*w_i give exact integral counts for every offset
    r = np.round(c)
    c = np.where(np.abs(c - r) <= 1e-9 * N, r, c)
    c[-1] = N
    u = rng.random()
    idx = np.searchsorted(c, np.arange(N) + u, side="right")
    return np.bincount(np.minimum(idx, N - 1), minlength=N)


def resample(pset: ParticleSet, rng) -> ParticleSet:
    counts = systematic_counts(pset.weights, rng)
    idx = np.repeat(np.arange(pset.n), counts)
    return replace(pset, shapes=pset.shapes[idx], params=pset.params[idx], weights=np.full(pset.n, 1.0 / pset.n))


def mean_state(pset: ParticleSet) -> MeanState:
    """Weighted modal shape, then weighted mean pose over particles with that
    shape (circular mean for azimuth)."""
    w = pset.weights
    labels, inv = np.unique(pset.shapes, return_inverse=True)
    mass = np.bincount(inv, weights=w, minlength=len(labels))
    total = mass.sum()
    posterior = {int(k): float(m / total) for k, m in zip(labels, mass)}
    # ties go to the smaller shape id
    k = int(labels[int(np.argmax(mass))])
    sel = pset.shapes == k
    ws = w[sel] / w[sel].sum()
    p = pset.params[sel]
    xyz = ws @ p[:, :3]
    theta = math.atan2(float(ws @ np.sin(p[:, 3])), float(ws @ np.cos(p[:, 3])))
    pose = PoseParams(float(xyz[0]), float(xyz[1]), float(xyz[2]), theta)
    return MeanState(ObjectHypothesis(k, pose, pset.ref_frame, pset.ref_cam), posterior)


# ---------------------------------------------------------------------------
# Z-buffer and explain-away
# ---------------------------------------------------------------------------


def mean_object_poses(world: WorldState) -> dict:
    """obj id -> (shape id, object-to-inertial) at the mean state."""
    out = {}
    for oid in sorted(world.means):
        m = world.means[oid]
        out[oid] = (m.shape, m.hypothesis.object_to_inertial(world.sets[oid].gamma))
    return out


def render_means(world: WorldState, cam: RigidTransform, K: CameraIntrinsics, db: ShapeDatabase):
    """Per-object depth images of the mean states seen from ``cam``."""
    inv = cam.inverse()
    return {oid: render_depth(db.mesh(k), inv @ g, K) for oid, (k, g) in mean_object_poses(world).items()}


def zbuffer_excluding(depths: dict, exclude: int, K: CameraIntrinsics):
    ids = [i for i in sorted(depths) if i != exclude]
    return composite([depths[i] for i in ids], ids, K)


def visible_fraction(depth: np.ndarray, obj_id: int, zbuffer) -> float:
    """Share of an object's rendered pixels that stay in front of the other
    objects' Z-buffer (same tie rule as compositing). 1 when nothing renders,
    so objects out of view are not mistaken for occluded ones."""
    own = depth < np.inf
    n = np.count_nonzero(own)
    if n == 0:
        return 1.0
    other_depth, other_id = zbuffer
    vis = own & ((depth < other_depth) | ((depth == other_depth) & (obj_id < other_id)))
    return np.count_nonzero(vis) / n


def explain_away(world: WorldState, proposals, cam: RigidTransform, K: CameraIntrinsics, db: ShapeDatabase,
                 iou_threshold: float = 0.5, depths: dict | None = None):
    """Proposals not accounted for by any tracked object's projection mask box."""
    proposals = list(proposals)
    if not world.means or not proposals:
        return proposals
    if depths is None:
        depths = render_means(world, cam, K, db)
    ids = sorted(depths)
    _, inst = composite([depths[i] for i in ids], ids, K)
    boxes, cats = [], []
    for oid in ids:
        b = mask_box(inst == oid)
        if b is not None:
            boxes.append(b)
            cats.append(int(db.category_of(world.means[oid].shape)))
    if not boxes:
        return proposals
    iou = box_iou_matrix(np.array([p.box for p in proposals]), np.array(boxes, dtype=float))
    same = np.array([[p.category == c for c in cats] for p in proposals])
    explained = ((iou >= iou_threshold) & same).any(axis=1)
    return [p for p, e in zip(proposals, explained) if not e]


def suppress_duplicates(proposals, iou_threshold: float):
    """Greedy same-category NMS, highest score first (ties by input order)."""
    order = sorted(range(len(proposals)), key=lambda i: -proposals[i].score)
    kept = []
    for i in order:
        p = proposals[i]
        if all(q.category != p.category or box_iou(p.box, q.box) < iou_threshold for q in kept):
            kept.append(p)
    return kept


def _update_candidates(candidates, proposals, cfg: FilterConfig):
    """Match this frame's unexplained proposals to last frame's candidates.

    Returns (new candidate list, proposals that reached the persistence count).
    """
    nxt, ready = [], []
    used = set()
    for p in proposals:
        best, best_iou = None, cfg.persistence_iou
        for j, c in enumerate(candidates):
            if j in used or c.category != p.category:
                continue
            iou = box_iou(p.box, c.box)
            if iou >= best_iou:
                best, best_iou = j, iou
        count = 1
        if best is not None:
            used.add(best)
            count = candidates[best].count + 1
        if count >= cfg.persistence:
            ready.append(p)
        else:
            nxt.append(_Candidate(p.box, p.category, count))
    return nxt, ready


# ---------------------------------------------------------------------------
# full step
# ---------------------------------------------------------------------------


class SemanticFilter:
    """Drives the per-frame recursion over a WorldState."""

    def __init__(self, db: ShapeDatabase, K: CameraIntrinsics, cfg: FilterConfig | None = None, provider=None):
        self.db = db
        self.K = K
        self.cfg = cfg or FilterConfig()
        self.ctx = ScoringContext(db, K, self.cfg.weights, provider, self.cfg.search_radius, self.cfg.edge_sigma,
                                  self.cfg.max_contour_samples)
        self.shape_ids = np.array(db.shape_ids, dtype=np.int64)

    def _track(self, pset: ParticleSet, obs: FrameObservation, zbuffer, predict_first: bool,
               hidden: bool = False) -> ParticleSet:
        if hidden:
            # nothing to measure and the pose model is static: hold the set
            # as is (no diffusion, no annealing) until it reappears
            return pset
        seed = self.cfg.seed
        if predict_first:
            pset = predict(pset, self.cfg.diffusion, stream_rng(seed, obs.index, pset.obj_id, STAGE_PREDICT),
                           self.shape_ids)
        pset = score(pset, obs, self.ctx, zbuffer)
        if not self.cfg.ess_resample or pset.ess < 0.5 * pset.n:
            pset = resample(pset, stream_rng(seed, obs.index, pset.obj_id, STAGE_RESAMPLE))
        if pset.floor_frames >= self.cfg.loss_frames:
            log.info("object %d lost at frame %d", pset.obj_id, obs.index)
            return pset.with_status(Status.LOST)
        if pset.status is Status.INITIALIZING:
            pset = pset.with_status(Status.TRACKING)
        return pset

    def step(self, world: WorldState, obs: FrameObservation) -> WorldState:
        """One recursion. Out-of-order frames raise FrameOrderError and leave
        ``world`` untouched."""
        if obs.index <= world.frame or obs.timestamp < world.timestamp:
            raise FrameOrderError(f"frame {obs.index} (t={obs.timestamp}) does not follow frame {world.frame} "
                                  f"(t={world.timestamp})")
        K, db = self.K, self.db
        # other-object occlusion uses the previous mean states for every set
        depths = render_means(world, obs.camera, K, db)
        sets = dict(world.sets)
        means = dict(world.means)
        for oid in sorted(sets):
            pset = sets[oid]
            if pset.status is Status.LOST:
                continue
            zb = zbuffer_excluding(depths, oid, K)
            hidden = visible_fraction(depths[oid], oid, zb) < self.cfg.occlusion_gate
            pset = self._track(pset, obs, zb, predict_first=True, hidden=hidden)
            sets[oid] = pset
            means[oid] = mean_state(pset)
        world = WorldState(sets, means, obs.index, obs.timestamp, world.next_id, world.candidates)

        props = [p for p in obs.proposals if p.score >= self.cfg.min_proposal_score]
        props = suppress_duplicates(props, self.cfg.nms_iou)
        props = explain_away(world, props, obs.camera, K, db, self.cfg.explain_iou)
        candidates, ready = _update_candidates(world.candidates, props, self.cfg)
        world.candidates = candidates
        if ready:
            depths = render_means(world, obs.camera, K, db)
        for p in ready:
            oid = world.next_id
            pset = initialize_object(p, obs.camera, obs.gravity, K, db, self.cfg,
                                     stream_rng(self.cfg.seed, obs.index, oid, STAGE_INIT), obj_id=oid,
                                     frame=obs.index)
            if pset is None:
                continue
            world.next_id += 1
            # weigh the fresh set against this frame before it is ever used
            pset = self._track(pset, obs, zbuffer_excluding(depths, oid, K), predict_first=False)
            world.sets[oid] = pset
            world.means[oid] = mean_state(pset)
        return world

    def run(self, observations, callback=None) -> WorldState:
        world = WorldState()
        for obs in observations:
            world = self.step(world, obs)
            if callback is not None:
                callback(world, obs)
        return world


# ---------------------------------------------------------------------------
# on-disk forms
# ---------------------------------------------------------------------------


def read_trajectory(path):
    """Lines ``timestamp tx ty tz qx qy qz qw`` (camera to inertial).

    Returns (timestamps (F,), list of RigidTransform).
    """
    stamps, poses = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                vals = [float(v) for v in parts]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric field") from None
            q = np.array(vals[4:])
            if abs(np.linalg.norm(q) - 1.0) > 1e-6:
                raise ValueError(f"{path}:{lineno}: quaternion is not unit norm")
            stamps.append(vals[0])
            poses.append(RigidTransform(quat_to_matrix(q), vals[1:4]))
    return np.array(stamps), poses


def write_trajectory(path, stamps, poses) -> None:
    with open(path, "w") as fh:
        for t, g in zip(stamps, poses):
            q = matrix_to_quat(g.R)
            fh.write(" ".join(repr(float(v)) for v in (t, *g.t, *q)) + "\n")


def _f(x: float) -> float:
    return float(x)


def world_record(world: WorldState) -> dict:
    """JSON-ready summary: per object mean state, shape posterior, ESS."""
    objects = []
    for oid in sorted(world.sets):
        pset = world.sets[oid]
        m = world.means.get(oid)
        rec = {
            "id": oid,
            "category": pset.category,
            "status": pset.status.value,
            "ref_frame": pset.ref_frame,
            "ess": _f(pset.ess),
            "floor_frames": pset.floor_frames,
        }
        if m is not None:
            g = m.hypothesis.object_to_inertial(pset.gamma)
            rec.update({
                "shape": m.shape,
                "shape_posterior": {str(k): _f(v) for k, v in sorted(m.shape_posterior.items())},
                "pose": {"x": _f(m.hypothesis.pose.x), "y": _f(m.hypothesis.pose.y),
                         "rho": _f(m.hypothesis.pose.rho), "theta": _f(m.hypothesis.pose.theta)},
                "ref_cam": {"R": pset.ref_cam.R.tolist(), "t": pset.ref_cam.t.tolist()},
                "R_io": g.R.tolist(),
                "T_io": g.t.tolist(),
            })
        objects.append(rec)
    return {"frame": world.frame, "timestamp": _f(world.timestamp), "objects": objects}


def dumps_record(rec: dict) -> str:
    if not _all_finite(rec):
        raise FilterError("state contains non-finite values")
    return json.dumps(rec, sort_keys=True, allow_nan=False)


def _all_finite(x) -> bool:
    if isinstance(x, float):
        return math.isfinite(x)
    if isinstance(x, dict):
        return all(_all_finite(v) for v in x.values())
    if isinstance(x, list):
        return all(_all_finite(v) for v in x)
    return True


def estimated_poses(record: dict) -> dict:
    """obj id -> (shape id, RigidTransform) from a world record."""
    out = {}
    for o in record["objects"]:
        if "shape" in o:
            out[o["id"]] = (o["shape"], RigidTransform(np.array(o["R_io"]), np.array(o["T_io"])))
    return out


def translation_error(est: RigidTransform, gt: RigidTransform) -> float:
    return float(np.linalg.norm(est.t - gt.t))


def azimuth_error(theta_est: float, theta_gt: float) -> float:
    return float(angle_diff(theta_est, theta_gt))


def reanchor_set(pset: ParticleSet, cam: RigidTransform, frame: int) -> ParticleSet:
    """Same inertial particles expressed in the chart of another camera."""
    T = pset.ref_cam.apply(centroid_in_camera(pset.params[:, 0], pset.params[:, 1], pset.params[:, 2]))
    Tc = cam.inverse().apply(T)
    if np.any(Tc[:, 2] <= 0):
        raise FilterError("particles behind the new reference camera")
    params = pset.params.copy()
    params[:, 0] = Tc[:, 0] / Tc[:, 2]
    params[:, 1] = Tc[:, 1] / Tc[:, 2]
    params[:, 2] = np.log(Tc[:, 2])
    return replace(pset, params=params, ref_cam=cam, ref_frame=frame)
