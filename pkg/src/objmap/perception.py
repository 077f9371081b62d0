"""Measurement model: detector log-score, edge likelihood by 1-D search
along contour normals, their weighted sum, and synthetic observations."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage

from .geometry import RigidTransform, unit_gravity
from .raster import (
    CameraIntrinsics,
    RenderBuffers,
    box_iou_matrix,
    projection_mask,
    render_scene,
    write_pgm,
)

EDGE_FLOOR = 1e-6
LOG_EDGE_FLOOR = math.log(EDGE_FLOOR)
EDGE_THRESHOLD = 0.5
DEFAULT_RADIUS = 10
DEFAULT_SIGMA = 3.0
MAX_CONTOUR_SAMPLES = 200


class ProviderError(RuntimeError):
    """A detector provider could not score a frame."""


@dataclass(frozen=True)
class DetectionProposal:
    frame: int
    box: tuple
    category: int
    score: float

    def __post_init__(self):
        x0, y0, x1, y1 = (float(v) for v in self.box)
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate proposal box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("proposal score must lie in [0, 1]")
        object.__setattr__(self, "box", (x0, y0, x1, y1))

    def to_record(self) -> dict:
        return {"frame": self.frame, "box": list(self.box), "category": self.category, "score": self.score}

    @classmethod
    def from_record(cls, rec: dict) -> "DetectionProposal":
        return cls(int(rec["frame"]), tuple(rec["box"]), int(rec["category"]), float(rec["score"]))


@dataclass(frozen=True, eq=False)
class FrameObservation:
    index: int
    timestamp: float
    camera: RigidTransform
    gravity: np.ndarray
    proposals: tuple = ()
    edges: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "gravity", unit_gravity(self.gravity))
        object.__setattr__(self, "proposals", tuple(self.proposals))


@dataclass(frozen=True)
class LikelihoodWeights:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("likelihood weights must be non-negative")
        if self.alpha == 0 and self.beta == 0:
            raise ValueError("alpha and beta cannot both be zero")


def combined_log_likelihood(phi_cnn, phi_edge, w: LikelihoodWeights):
    return w.alpha * phi_cnn + w.beta * phi_edge


# ---------------------------------------------------------------------------
# detector scores
# ---------------------------------------------------------------------------


class OracleDetector:
    """Synthetic stand-in for the second detector stage.

    Score of a box for category c is floor + (ceil - floor) * max IoU with
    the frame's ground-truth boxes of category c, returned as a log.
    """

    def __init__(self, gt_boxes: dict, floor: float = 0.02, ceil: float = 0.98):
        # gt_boxes: frame index -> list of (box, category)
        self.gt_boxes = gt_boxes
        self.floor = floor
        self.ceil = ceil

    @property
    def floor_log_score(self) -> float:
        return math.log(self.floor)

    def score_boxes(self, frame: int, boxes, categories) -> np.ndarray:
        boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
        categories = np.asarray(categories, dtype=np.int64).reshape(-1)
        best = np.zeros(len(boxes))
        gt = self.gt_boxes.get(frame, [])
        for c in np.unique(categories):
            gt_c = [b for b, cat in gt if cat == c]
            if not gt_c:
                continue
            sel = categories == c
            best[sel] = box_iou_matrix(boxes[sel], np.array(gt_c)).max(axis=1)
        return np.log(self.floor + (self.ceil - self.floor) * best)

    def score(self, frame: int, box, category: int) -> float:
        return float(self.score_boxes(frame, [box], [category])[0])


# ---------------------------------------------------------------------------
# edge likelihood
# ---------------------------------------------------------------------------


def contour_normals(mask: np.ndarray) -> np.ndarray:
    """Unit normals (H, W, 2) as (dx, dy) from the Sobel gradient of a mask.

    Pixels with a vanishing gradient get (1, 0).
    """
    m = np.asarray(mask, dtype=float)
    gx = ndimage.sobel(m, axis=1, mode="reflect")
    gy = ndimage.sobel(m, axis=0, mode="reflect")
    n = np.hypot(gx, gy)
    safe = np.where(n > 0, n, 1.0)
    return np.stack([np.where(n > 0, gx / safe, 1.0), np.where(n > 0, gy / safe, 0.0)], axis=-1)


def sample_contour(contour: np.ndarray, max_samples: int = MAX_CONTOUR_SAMPLES) -> np.ndarray:
    """Evenly spaced contour pixels in raster order, (M, 2) as (x, y)."""
    ys, xs = np.nonzero(contour)
    n = len(xs)
    if n == 0:
        return np.zeros((0, 2), dtype=np.int64)
    m = min(n, max_samples)
    sel = (np.arange(m) * n) // m
    return np.stack([xs[sel], ys[sel]], axis=1)


def normal_search_coords(points, normals, radius: int, shape):
    """Pixels visited by the search: offsets d = -radius..radius from each
    pixel center along its normal. Returns (xs, ys, valid), each (M, 2R+1)."""
    d = np.arange(-radius, radius + 1, dtype=float)
    pts = np.asarray(points, dtype=float)
    nrm = np.asarray(normals, dtype=float)
    xs = np.floor(pts[:, 0:1] + 0.5 + d[None, :] * nrm[:, 0:1]).astype(np.int64)
    ys = np.floor(pts[:, 1:2] + 0.5 + d[None, :] * nrm[:, 1:2]).astype(np.int64)
    h, w = shape[:2]
    valid = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    return xs, ys, valid


def pixel_edge_scores(points, normals, edges, radius: int = DEFAULT_RADIUS, sigma: float = DEFAULT_SIGMA):
    """Per-pixel score exp(-d*^2 / 2 sigma^2), d* the smallest |offset| whose
    edge probability exceeds 0.5, or 0 if none within the radius."""
    if len(points) == 0:
        return np.zeros(0)
    xs, ys, valid = normal_search_coords(points, normals, radius, edges.shape)
    vals = np.full(xs.shape, -1.0)
    # a single gather; nothing outside the search segments is read
    vals[valid] = edges[ys[valid], xs[valid]]
    hit = vals > EDGE_THRESHOLD
    absd = np.abs(np.arange(-radius, radius + 1, dtype=float))
    dmin = np.where(hit, absd[None, :], np.inf).min(axis=1)
    return np.where(np.isfinite(dmin), np.exp(-dmin * dmin / (2.0 * sigma * sigma)), 0.0)


def edge_likelihood(contour: np.ndarray, normals: np.ndarray, edges, search_radius: int = DEFAULT_RADIUS,
                    sigma: float = DEFAULT_SIGMA, max_samples: int = MAX_CONTOUR_SAMPLES) -> float:
    """Log of the mean per-pixel normal-search score, floored at 1e-6.

    ``normals`` is an (H, W, 2) field (see ``contour_normals``) read at the
    sampled contour pixels.
    """
    if search_radius < 1:
        raise ValueError("search radius must be >= 1")
    pts = sample_contour(contour, max_samples)
    if len(pts) == 0:
        return LOG_EDGE_FLOOR
    nrm = normals[pts[:, 1], pts[:, 0]]
    phi = float(pixel_edge_scores(pts, nrm, edges, search_radius, sigma).mean())
    return math.log(max(phi, EDGE_FLOOR))


def batched_edge_likelihood(samples, normals, counts, edges, radius: int = DEFAULT_RADIUS,
                            sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """``edge_likelihood`` for many contours at once (compiled).

    samples (N, S, 2), normals (N, S, 2) and counts (N,) as produced by
    ``raster.render_particles``; the first counts[i] rows of particle i are used.
    Matches ``batched_edge_likelihood_reference`` exactly.
    """
    out = np.empty(len(counts))
    _edge_kernel(np.ascontiguousarray(samples, dtype=np.int64), np.ascontiguousarray(normals, dtype=float),
                 np.ascontiguousarray(counts, dtype=np.int64), np.ascontiguousarray(edges, dtype=float),
                 int(radius), float(sigma), out)
    return out


def batched_edge_likelihood_reference(samples, normals, counts, edges, radius: int = DEFAULT_RADIUS,
                                      sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    N, S = samples.shape[:2]
    keep = np.arange(S)[None, :] < counts[:, None]
    owner = np.repeat(np.arange(N), S).reshape(N, S)[keep]
    scores = pixel_edge_scores(samples[keep], normals[keep], edges, radius, sigma)
    sums = np.bincount(owner, weights=scores, minlength=N)
    phi = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    return np.log(np.maximum(phi, EDGE_FLOOR))


@njit(cache=True)
def _edge_kernel(samples, normals, counts, edges, radius, sigma, out):
    h, w = edges.shape
    two_s2 = 2.0 * sigma * sigma
    for p in range(len(counts)):
        n = counts[p]
        total = 0.0
        for m in range(n):
            px = samples[p, m, 0] + 0.5
            py = samples[p, m, 1] + 0.5
            nx, ny = normals[p, m, 0], normals[p, m, 1]
            best = np.inf
            for k in range(2 * radius + 1):
                d = float(k - radius)
                x = int(math.floor(px + d * nx))
                y = int(math.floor(py + d * ny))
                if 0 <= x < w and 0 <= y < h and edges[y, x] > EDGE_THRESHOLD:
                    best = min(best, abs(d))
            if best < np.inf:
                total += math.exp(-best * best / two_s2)
        phi = total / n if n > 0 else 0.0
        out[p] = math.log(max(phi, EDGE_FLOOR))


# ---------------------------------------------------------------------------
# synthetic observations
# ---------------------------------------------------------------------------


class NoiseConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    box_jitter: float = Field(0.0, ge=0.0)  # pixels, per box coordinate
    edge_blur: float = Field(0.0, ge=0.0)  # pixels, Gaussian sigma
    false_positive_rate: float = Field(0.0, ge=0.0)  # Poisson mean clutter proposals per frame
    dropout_rate: float = Field(0.0, ge=0.0, le=1.0)  # chance a visible object yields no detection
    clutter_segments: float = Field(0.0, ge=0.0)  # Poisson mean spurious edge segments per frame
    duplicate_rate: float = Field(0.0, ge=0.0, le=1.0)  # chance of a second jittered proposal per object
    # object id -> [first, last] frame ranges with forced dropout
    forced_dropout: dict[int, list[tuple[int, int]]] = Field(default_factory=dict)

    def dropped(self, obj_id: int, frame: int) -> bool:
        return any(a <= frame <= b for a, b in self.forced_dropout.get(obj_id, ()))


def _line_peak(sigma: float) -> float:
    """Response of a Gaussian blur at the center of an ideal 1-px line."""
    delta = np.zeros(8 * int(math.ceil(sigma)) + 9)
    delta[len(delta) // 2] = 1.0
    return float(ndimage.gaussian_filter1d(delta, sigma)[len(delta) // 2])


def blur_edges(contour: np.ndarray, sigma: float) -> np.ndarray:
    """Blur a binary contour, rescaled so an isolated straight edge keeps
    probability 1 on its center line."""
    e = contour.astype(float)
    if sigma <= 0:
        return e
    return np.clip(ndimage.gaussian_filter(e, sigma) / _line_peak(sigma), 0.0, 1.0)


def _draw_segment(img, x0, y0, x1, y1):
    n = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
    xs = np.floor(np.linspace(x0, x1, n)).astype(int)
    ys = np.floor(np.linspace(y0, y1, n)).astype(int)
    ok = (xs >= 0) & (xs < img.shape[1]) & (ys >= 0) & (ys < img.shape[0])
    img[ys[ok], xs[ok]] = 1.0


@dataclass(frozen=True, eq=False)
class SceneTruth:
    """Ground-truth objects: (id, shape id, category, mesh, object-to-inertial)."""

    objects: tuple

    def camera_objects(self, cam: RigidTransform):
        inv = cam.inverse()
        return [(oid, mesh, inv @ g_io) for oid, _, _, mesh, g_io in self.objects]

    def category(self, obj_id: int) -> int:
        for oid, _, cat, _, _ in self.objects:
            if oid == obj_id:
                return cat
        raise KeyError(obj_id)


@dataclass(frozen=True, eq=False)
class SynthFrame:
    observation: FrameObservation
    truth: RenderBuffers  # ground-truth render of the frame
    detected: tuple  # ids of objects the detector saw this frame


def synth_observation(truth: SceneTruth, cam: RigidTransform, K: CameraIntrinsics, noise: NoiseConfig, seed,
                      frame: int = 0, timestamp: float = 0.0, gravity=(0.0, 0.0, -1.0),
                      categories=(1,)) -> SynthFrame:
    """One synthetic observation of ``truth`` seen from camera pose ``cam``,
    with the ground truth it was drawn from.

    Edge probabilities are quantized to multiples of 1/255 so the in-memory
    frame equals its on-disk form.
    """
    rng = np.random.default_rng(seed)
    buffers = render_scene(truth.camera_objects(cam), K)
    W, H = K.width, K.height
    proposals, detected = [], []
    for oid in sorted(buffers.boxes):
        box = np.array(buffers.boxes[oid], dtype=float)
        cat = truth.category(oid)
        # draw unconditionally so one object's dropout does not shift the others' noise
        drop = rng.random() < noise.dropout_rate
        dup = rng.random() < noise.duplicate_rate
        jit = rng.normal(0.0, 1.0, (2, 4)) * noise.box_jitter
        if noise.dropped(oid, frame) or drop:
            continue
        detected.append(oid)
        for c in range(2 if dup else 1):
            b = _clip_box(box + jit[c], W, H)
            if b is not None:
                proposals.append((b, cat))
    n_fp = rng.poisson(noise.false_positive_rate) if noise.false_positive_rate > 0 else 0
    for _ in range(n_fp):
        w, h = rng.uniform(10, W / 2), rng.uniform(10, H / 2)
        x0, y0 = rng.uniform(0, W - w), rng.uniform(0, H - h)
        proposals.append((np.array([x0, y0, x0 + w, y0 + h]), int(categories[rng.integers(len(categories))])))
    # second-stage scores see every visible object, detected or not
    scorer = OracleDetector({frame: [(b, truth.category(o)) for o, b in sorted(buffers.boxes.items())]})
    props = tuple(
        DetectionProposal(frame, tuple(float(v) for v in b), cat, float(math.exp(scorer.score(frame, b, cat))))
        for b, cat in proposals
    )
    edges = blur_edges(buffers.contour, noise.edge_blur)
    n_seg = rng.poisson(noise.clutter_segments) if noise.clutter_segments > 0 else 0
    for _ in range(n_seg):
        x0, y0 = rng.uniform(0, W), rng.uniform(0, H)
        ang, length = rng.uniform(0, 2 * math.pi), rng.uniform(10, 30)
        _draw_segment(edges, x0, y0, x0 + length * math.cos(ang), y0 + length * math.sin(ang))
    edges = np.round(edges * 255.0) / 255.0
    obs = FrameObservation(frame, timestamp, cam, gravity, props, edges)
    return SynthFrame(obs, buffers, tuple(detected))


def synth_frame(truth: SceneTruth, cam: RigidTransform, K: CameraIntrinsics, noise: NoiseConfig, seed,
                **kwargs) -> FrameObservation:
    """Synthetic FrameObservation: jittered ground-truth boxes, clutter and
    dropout; edge map = blurred ground-truth contour plus clutter segments."""
    return synth_observation(truth, cam, K, noise, seed, **kwargs).observation


def _clip_box(b, W, H):
    x0, x1 = sorted((min(max(b[0], 0.0), W), min(max(b[2], 0.0), W)))
    y0, y1 = sorted((min(max(b[1], 0.0), H), min(max(b[3], 0.0), H)))
    if x1 - x0 < 1.0 or y1 - y0 < 1.0:
        return None
    return np.array([x0, y0, x1, y1])


def occlusion_fraction(truth: SceneTruth, cam: RigidTransform, K: CameraIntrinsics, obj_id: int) -> float:
    """Share of ``obj_id``'s solo-render pixels hidden in the full render."""
    objs = truth.camera_objects(cam)
    solo = render_scene([o for o in objs if o[0] == obj_id], K)
    total = np.count_nonzero(projection_mask(solo, obj_id))
    if total == 0:
        return float("nan")
    full = render_scene(objs, K)
    return 1.0 - np.count_nonzero(projection_mask(full, obj_id)) / total


# ---------------------------------------------------------------------------
# on-disk forms
# ---------------------------------------------------------------------------


def write_proposals(path, proposals) -> None:
    with open(path, "w") as fh:
        for p in proposals:
            fh.write(json.dumps(p.to_record(), sort_keys=True) + "\n")


def read_proposals(path) -> dict:
    """frame index -> list of DetectionProposal."""
    out: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                p = DetectionProposal.from_record(json.loads(line))
            except (ValueError, KeyError, TypeError) as e:
                raise ValueError(f"{path}:{lineno}: bad proposal record ({e})") from None
            out.setdefault(p.frame, []).append(p)
    return out


def write_edge_map(path, edges: np.ndarray) -> None:
    write_pgm(path, np.round(np.clip(edges, 0.0, 1.0) * 255.0))


def read_edge_map(path) -> np.ndarray:
    from .raster import read_pgm

    return read_pgm(path).astype(float) / 255.0
