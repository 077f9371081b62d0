"""objmap command line: simulate, filter, eval, render.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .evaluation import (
    EvaluationError,
    IcpDivergence,
    assemble_scene,
    match_objects,
    metrics_csv,
    pose_error,
    surface_error_report,
)
from .filtering import (
    FilterConfig,
    FilterError,
    SemanticFilter,
    dumps_record,
    estimated_poses,
    world_record,
)
from .geometry import GeometryError, NearSingularityError, RigidTransform
from .mesh import MeshFormatError, ShapeDatabase, synthetic_database
from .perception import OracleDetector, read_edge_map, read_proposals
from .raster import CameraIntrinsics, composite, contour_from_instance, render_depth, write_ppm
from .sim import MANIFEST_FILE, PROPOSALS_FILE, EDGES_DIR, SceneSpec, SimError, generate, read_sequence

log = logging.getLogger("objmap")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

CONFIG_VERSION = 1
EVAL_STREAM = 11

STATES_FILE = "states.jsonl"
WORLD_FILE = "world.json"
METRICS_FILE = "metrics.json"
METRICS_CSV = "metrics.csv"


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


class TransformSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    R: list[list[float]] = Field(default_factory=lambda: np.eye(3).tolist())
    t: list[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])

    def transform(self) -> RigidTransform:
        return RigidTransform(np.array(self.R), np.array(self.t)).validate(1e-6)


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_samples: int = Field(100_000, ge=10)
    icp_points: int = Field(5000, ge=3)
    align: bool = True
    mode: Literal["full", "gravity"] = "full"
    iters: int = Field(50, ge=1)
    init: TransformSpec | None = None


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: Literal[1]
    database: str | None = None  # manifest path; built-in synthetic shapes when omitted
    sequence: str
    output: str
    seed: int = Field(0, ge=0)
    gravity: tuple[float, float, float] = (0.0, 0.0, -1.0)
    intrinsics: dict | None = None
    detector: Literal["oracle", "none"] = "oracle"
    filter: FilterConfig = Field(default_factory=FilterConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    def resolve(self, base: Path) -> "RunConfig":
        """Paths relative to the config file; referenced inputs must exist."""
        upd = {"sequence": str((base / self.sequence).resolve()), "output": str((base / self.output).resolve())}
        if self.database is not None:
            upd["database"] = str((base / self.database).resolve())
        cfg = self.model_copy(update=upd)
        if not Path(cfg.sequence).is_dir():
            raise ConfigError(f"sequence directory {cfg.sequence} does not exist")
        if cfg.database is not None and not Path(cfg.database).is_file():
            raise ConfigError(f"database manifest {cfg.database} does not exist")
        g = np.asarray(cfg.gravity, dtype=float)
        if not np.linalg.norm(g) > 0:
            raise ConfigError("gravity must be non-zero")
        if cfg.intrinsics is not None:
            try:
                CameraIntrinsics(**cfg.intrinsics)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad intrinsics: {e}") from None
        return cfg

    @property
    def unit_gravity(self) -> np.ndarray:
        g = np.asarray(self.gravity, dtype=float)
        return g / np.linalg.norm(g)

    def filter_config(self) -> FilterConfig:
        return self.filter.model_copy(update={"seed": self.seed})


def _read_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc


def load_run_config(path) -> RunConfig:
    doc = _read_json(path)
    if doc.get("version") != CONFIG_VERSION:
        raise ConfigError(f"{path}: unsupported or missing version {doc.get('version')!r}")
    try:
        cfg = RunConfig.model_validate(doc)
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}") from None
    return cfg.resolve(Path(path).resolve().parent)


def load_scene_spec(path) -> SceneSpec:
    doc = _read_json(path)
    if doc.pop("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"{path}: unsupported version")
    try:
        return SceneSpec.model_validate(doc)
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}") from None


def load_database(path) -> ShapeDatabase:
    if path is None:
        return synthetic_database()
    try:
        return ShapeDatabase.load(path)
    except (OSError, KeyError, json.JSONDecodeError, MeshFormatError) as e:
        raise DataError(f"database {path}: {e}") from None


def _intrinsics(cfg: RunConfig):
    return CameraIntrinsics(**cfg.intrinsics) if cfg.intrinsics is not None else None


class _StagedDir:
    """Write into a scratch directory; files move to ``target`` only on success."""

    def __init__(self, target: Path):
        self.target = Path(target)

    def __enter__(self) -> Path:
        self.target.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".stage-", dir=self.target))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                for f in sorted(self.tmp.iterdir()):
                    f.replace(self.target / f.name)
        finally:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    spec = load_scene_spec(args.spec)
    db = load_database(args.database)
    try:
        spec.check_database(db)
    except SimError as e:
        raise ConfigError(str(e)) from None
    generate(spec, args.out, db)
    log.info("wrote sequence to %s", args.out)
    return EXIT_OK


def cmd_filter(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    db = load_database(cfg.database)
    try:
        seq = read_sequence(cfg.sequence, cfg.unit_gravity, _intrinsics(cfg))
    except (ValueError, KeyError, OSError) as e:
        raise DataError(str(e)) from None
    provider = OracleDetector(seq.gt_boxes()) if cfg.detector == "oracle" else None
    flt = SemanticFilter(db, seq.K, cfg.filter_config(), provider)
    lines = []
    world = flt.run(seq.observations, lambda w, obs: lines.append(dumps_record(world_record(w))))
    with _StagedDir(Path(cfg.output)) as out:
        (out / STATES_FILE).write_text("".join(line + "\n" for line in lines))
        (out / WORLD_FILE).write_text(json.dumps(world_record(world), sort_keys=True, indent=1) + "\n")
    log.info("filtered %d frames; %d objects", len(seq.observations), len(world.sets))
    return EXIT_OK


def _read_states(path) -> list:
    recs = []
    try:
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    recs.append(json.loads(line))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"state dump {path}: {e}") from None
    return recs


def _tracked(record: dict) -> dict:
    keep = {o["id"] for o in record["objects"] if o["status"] != "lost"}
    return {k: v for k, v in estimated_poses(record).items() if k in keep}


def evaluate(states: list, manifest: dict, db: ShapeDatabase, ecfg: EvalConfig, gravity, seed: int) -> dict:
    gt = {o["id"]: (o["shape"], RigidTransform(np.array(o["R"]), np.array(o["t"]))) for o in manifest["objects"]}
    final = states[-1] if states else {"objects": [], "frame": -1}
    est = _tracked(final)
    out = {"frame": final["frame"], "n_estimated": len(est), "n_ground_truth": len(gt)}
    objects = []
    for e_id, g_id in match_objects(est, gt):
        pe = pose_error(est[e_id][1], gt[g_id][1])
        # per-frame errors of the same object, over the frames it had a mean state
        per_frame = []
        for rec in states:
            p = estimated_poses(rec).get(e_id)
            if p is not None:
                per_frame.append(pose_error(p[1], gt[g_id][1]))
        objects.append({
            "id": e_id, "gt_id": g_id, "shape": est[e_id][0], "gt_shape": gt[g_id][0],
            "final": {"translational_m": pe.translational, "rotational_deg": pe.rotational_deg},
            "mean_over_frames": {
                "translational_m": float(np.mean([p.translational for p in per_frame])),
                "rotational_deg": float(np.mean([p.rotational_deg for p in per_frame])),
                "frames": len(per_frame),
            },
        })
    out["objects"] = objects
    out["surface_error"] = None
    if est and gt:
        scene = assemble_scene(est, db)
        gt_scene = assemble_scene(gt, db).mesh()
        init = ecfg.init.transform() if ecfg.init is not None else None
        rep = surface_error_report(scene, gt_scene, ecfg.n_samples, [seed, EVAL_STREAM], ecfg.align, mode=ecfg.mode,
                                   gamma=gravity, init=init, iters=ecfg.iters,
                                   icp_points=ecfg.icp_points)
        out["surface_error"] = rep.stats.as_dict()
        out["alignment"] = {"R": rep.alignment.R.tolist(), "t": rep.alignment.t.tolist(),
                            "iterations": rep.icp.iterations if rep.icp else 0}
    return out


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    states_path = Path(args.states) if args.states else Path(cfg.output) / STATES_FILE
    if not states_path.is_file():
        raise DataError(f"state dump {states_path} not found (run `objmap filter` first)")
    states = _read_states(states_path)
    mpath = Path(cfg.sequence) / MANIFEST_FILE
    try:
        manifest = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"manifest {mpath}: {e}") from None
    db = load_database(cfg.database)
    try:
        metrics = evaluate(states, manifest, db, cfg.eval, cfg.unit_gravity, cfg.seed)
    except (EvaluationError, KeyError) as e:
        raise DataError(str(e)) from None
    with _StagedDir(Path(cfg.output)) as out:
        (out / METRICS_FILE).write_text(json.dumps(metrics, sort_keys=True, indent=1, allow_nan=False) + "\n")
        (out / METRICS_CSV).write_text(metrics_csv(metrics))
    return EXIT_OK


def depth_shade(depth: np.ndarray, max_depth: float = 5.0) -> np.ndarray:
    """Mask intensity in [60, 255]: nearer is darker."""
    return 60.0 + 195.0 * np.clip(depth / max_depth, 0.0, 1.0)


def overlay_image(edges: np.ndarray, record: dict, cam: RigidTransform, K: CameraIntrinsics, db: ShapeDatabase,
                  proposals=()) -> np.ndarray:
    """RGB overlay: edge map background, mean-state masks shaded by depth,
    their contours in green, proposal boxes in red."""
    bg = np.clip(edges, 0.0, 1.0) * 255.0
    img = np.repeat(bg[..., None], 3, axis=2)
    poses = _tracked(record)
    inv = cam.inverse()
    ids = sorted(poses)
    depths = [render_depth(db.mesh(poses[i][0]), inv @ poses[i][1], K) for i in ids]
    depth, inst = composite(depths, ids, K)
    mask = inst > 0
    shade = depth_shade(depth)
    img[mask] = shade[mask][:, None] * np.array([0.55, 0.75, 1.0])[None, :]
    img[contour_from_instance(inst)] = (0.0, 255.0, 0.0)
    H, W = edges.shape
    for p in proposals:
        x0, y0, x1, y1 = p.box
        c0, r0 = int(math.floor(x0)), int(math.floor(y0))
        c1, r1 = min(int(math.ceil(x1)) - 1, W - 1), min(int(math.ceil(y1)) - 1, H - 1)
        img[r0, c0:c1 + 1] = img[r1, c0:c1 + 1] = (255.0, 0.0, 0.0)
        img[r0:r1 + 1, c0] = img[r0:r1 + 1, c1] = (255.0, 0.0, 0.0)
    return np.round(img).astype(np.uint8)


def cmd_render(args) -> int:
    cfg = load_run_config(args.config)
    states_path = Path(args.states) if args.states else Path(cfg.output) / STATES_FILE
    if not states_path.is_file():
        raise DataError(f"state dump {states_path} not found")
    states = {r["frame"]: r for r in _read_states(states_path)}
    if args.frame not in states:
        raise DataError(f"frame {args.frame} is not in the state dump")
    from .filtering import read_trajectory

    seq_dir = Path(cfg.sequence)
    try:
        manifest = json.loads((seq_dir / MANIFEST_FILE).read_text())
        K = _intrinsics(cfg) or CameraIntrinsics(**manifest["intrinsics"])
        _, poses = read_trajectory(seq_dir / "trajectory.txt")
        edges = read_edge_map(seq_dir / EDGES_DIR / f"{args.frame:06d}.pgm")
        props = read_proposals(seq_dir / PROPOSALS_FILE).get(args.frame, [])
    except (OSError, ValueError, KeyError) as e:
        raise DataError(str(e)) from None
    img = overlay_image(edges, states[args.frame], poses[args.frame], K, load_database(cfg.database), props)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(out, img)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="objmap", description="Object-level mapping with a semantic particle filter.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic sequence from a scene spec")
    p.add_argument("spec", help="scene spec JSON")
    p.add_argument("out", help="output sequence directory (replaced if present)")
    p.add_argument("--database", default=None, help="shape database manifest (default: built-in shapes)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("filter", help="run the filter over a sequence; writes states.jsonl and world.json")
    p.add_argument("config", help="run config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("eval", help="surface and pose errors; writes metrics.json and metrics.csv")
    p.add_argument("config", help="run config JSON")
    p.add_argument("--states", default=None, help="state dump (default: <output>/states.jsonl)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="overlay image (P6) of one frame's mean-state estimate")
    p.add_argument("config", help="run config JSON")
    p.add_argument("frame", type=int, help="frame index")
    p.add_argument("out", help="output .ppm path")
    p.add_argument("--states", default=None, help="state dump (default: <output>/states.jsonl)")
    p.set_defaults(func=cmd_render)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"objmap: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SimError, GeometryError, MeshFormatError) as e:
        print(f"objmap: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (IcpDivergence, NearSingularityError, FilterError, FloatingPointError) as e:
        print(f"objmap: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
