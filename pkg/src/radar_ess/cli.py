"""Command-line entry point: ``radar-ess index|query|eval|sweep|synth``.

Settings come from built-in defaults, then an optional flat JSON config
file (``--config``), then command-line flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import logging
import math
import operator
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .descriptor import DescriptorConfig, EssDescriptor
from .evaluation import (
    METHODS,
    SUMMARY_FIELDS,
    EvalConfig,
    MethodSettings,
    db_config,
    describe_one,
    evaluate,
    write_curve_csv,
    write_summary_csv,
)
from .frame_io import FrameFormatError, RadarFrame, iter_session, write_session
from .retrieval import DescriptorDb, ExclusionWindow
from .synth import FrameConfig, SceneError, load_scene, load_trajectory, make_loop_sequence, preset

logger = logging.getLogger("radar_ess")

EXIT_ERROR = 1
EXIT_ASSERT = 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """All tunables of a run; numeric ranges are checked by ``validate``."""

    size: int = 100
    max_range: Optional[float] = None  # px; None = half the image diagonal
    cluster_threshold: float = 10
    verify_threshold: float = 0.2
    revisit_distance: float = 100.0  # m
    frame_stride: int = 5
    binarize_threshold: int = 0
    min_cluster_area: int = 1
    exclusion_frames: int = 50
    method: str = "ess"
    workers: int = 1
    target: Optional[str] = None
    query: Optional[str] = None
    db: Optional[str] = None
    out: Optional[str] = None

    def validate(self) -> "RunConfig":
        checks = [
            (1 <= self.size <= 100_000, "size must be in [1, 100000]"),
            (self.max_range is None or self.max_range > 0, "max_range must be positive"),
            (self.cluster_threshold >= 0, "cluster_threshold must be >= 0"),
            (0.0 <= self.verify_threshold <= 2.0, "verify_threshold must be in [0, 2]"),
            (self.revisit_distance > 0, "revisit_distance must be positive"),
            (self.frame_stride >= 1, "frame_stride must be >= 1"),
            (0 <= self.binarize_threshold <= 0xFFFF, "binarize_threshold must be in [0, 65535]"),
            (self.min_cluster_area >= 1, "min_cluster_area must be >= 1"),
            (self.method in METHODS, f"method must be one of {METHODS}"),
            (self.workers >= 1, "workers must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    def settings(self, mode: str = "intra") -> MethodSettings:
        return MethodSettings(
            method=self.method,
            descriptor=DescriptorConfig(
                size=self.size,
                max_range=self.max_range,
                binarize_threshold=self.binarize_threshold,
                min_cluster_area=self.min_cluster_area,
            ),
            cluster_threshold=self.cluster_threshold,
            verify_threshold=self.verify_threshold,
            eval=EvalConfig(
                revisit_distance=self.revisit_distance,
                frame_stride=self.frame_stride,
                mode=mode,
                exclusion_frames=self.exclusion_frames,
            ),
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


_FIELD_TYPES = {
    "size": int,
    "max_range": float,
    "cluster_threshold": float,
    "verify_threshold": float,
    "revisit_distance": float,
    "frame_stride": int,
    "binarize_threshold": int,
    "min_cluster_area": int,
    "exclusion_frames": int,
    "method": str,
    "workers": int,
    "target": str,
    "query": str,
    "db": str,
    "out": str,
}
GRID_KEYS = tuple(k for k in _FIELD_TYPES if k not in ("workers", "target", "query", "db", "out"))


def _coerce(key: str, value):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown setting {key!r}")
    if value is None:
        return None
    kind = _FIELD_TYPES[key]
    try:
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot use {value!r} as {kind.__name__}") from None


def load_config(path) -> RunConfig:
    """Read a flat JSON object of ``RunConfig`` fields."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return RunConfig(**{k: _coerce(k, v) for k, v in data.items()}).validate()


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = _coerce(f.name, value)
    return dataclasses.replace(cfg, **overrides).validate()


def parse_grid(items: Sequence[str]) -> list[tuple[str, list]]:
    """``["cluster_threshold=1,10,100", ...]`` -> ordered axes."""
    axes = []
    for item in items or ():
        key, sep, values = item.partition("=")
        key = key.strip()
        if not sep or not values.strip():
            raise ConfigError(f"grid axis {item!r} must look like key=v1,v2")
        if key not in GRID_KEYS:
            raise ConfigError(f"cannot sweep {key!r}; choose from {GRID_KEYS}")
        if any(key == k for k, _ in axes):
            raise ConfigError(f"grid axis {key!r} given twice")
        axes.append((key, [_coerce(key, v.strip()) for v in values.split(",")]))
    return axes


_ASSERT_RE = re.compile(r"^\s*([a-z_0-9]+)\s*(>=|<=|=)\s*([-+0-9.eE]+|inf)\s*$")
_OPS = {">=": operator.ge, "=": operator.ge, "<=": operator.le}
_ASSERT_METRICS = ("pr_auc", "roc_auc", "f1_max", "recall_at_1", "mean_query_ms", "mean_candidates")


@dataclass
class Bound:
    metric: str
    op: str
    value: float

    def holds(self, row: dict) -> bool:
        return bool(_OPS[self.op](float(row[self.metric]), self.value))

    def __str__(self):
        return f"{self.metric}{'>=' if self.op == '=' else self.op}{self.value:g}"


def parse_bounds(items: Sequence[str]) -> list[Bound]:
    """``metric>=v`` or ``metric<=v``; a bare ``metric=v`` is a lower bound."""
    out = []
    for item in items or ():
        m = _ASSERT_RE.match(item)
        if not m:
            raise ConfigError(f"bad bound {item!r}; use e.g. pr_auc>=0.95")
        metric, op, value = m.groups()
        if metric not in _ASSERT_METRICS:
            raise ConfigError(f"unknown metric {metric!r}; choose from {_ASSERT_METRICS}")
        out.append(Bound(metric, op, float(value)))
    return out


def _describe_timed(job) -> tuple[EssDescriptor, float]:
    frame, session_id, settings = job
    start = time.perf_counter()
    d = describe_one(frame, session_id, settings)
    return d, time.perf_counter() - start


def describe_parallel(frames: Sequence[RadarFrame], session_id: str, settings: MethodSettings,
                      workers: int = 1) -> tuple[list[EssDescriptor], list[float]]:
    """Per-frame descriptors in input order, with per-frame wall times."""
    jobs = [(f, session_id, settings) for f in frames]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_describe_timed, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_describe_timed(j) for j in jobs]
    return [d for d, _ in results], [t for _, t in results]


def load_session(path, stride: int) -> list[RadarFrame]:
    frames = list(iter_session(path, stride))
    if not frames:
        raise FrameFormatError(f"{path}: session has no frames")
    shapes = {f.intensities.shape for f in frames}
    resolutions = {f.resolution for f in frames}
    if len(shapes) > 1 or len(resolutions) > 1:
        raise FrameFormatError(
            f"{path}: inconsistent frames (shapes {sorted(shapes)}, resolutions {sorted(resolutions)})"
        )
    return frames


def session_name(path) -> str:
    return Path(path).resolve().name


def _require(value, flag: str):
    if value is None:
        raise ConfigError(f"missing {flag}")
    return value


def cmd_index(args) -> int:
    cfg = resolve_config(args)
    target = _require(cfg.target, "session directory")
    out = Path(_require(cfg.db, "--out"))
    sid = args.session_id or session_name(target)
    frames = load_session(target, cfg.frame_stride)
    settings = cfg.settings()
    descriptors, times = describe_parallel(frames, sid, settings, cfg.workers)
    DescriptorDb(db_config(settings)).extend(descriptors).save(out)
    print(f"indexed {len(descriptors)} frames from {target} -> {out}")
    print(f"mean descriptor time {1000.0 * float(np.mean(times)):.2f} ms/frame")
    return 0


def cmd_query(args) -> int:
    cfg = resolve_config(args)
    db = DescriptorDb.load(_require(cfg.db, "database"))
    dbc = db.config
    settings = MethodSettings(
        method=dbc.method,
        descriptor=DescriptorConfig(size=dbc.size, max_range=dbc.max_range,
                                    binarize_threshold=dbc.binarize_threshold,
                                    min_cluster_area=dbc.min_cluster_area),
    )
    session = _require(cfg.query, "query session")
    sid = args.session_id or session_name(session)
    frames = load_session(session, cfg.frame_stride)
    if args.frame:
        wanted = set(args.frame)
        frames = [f for f in frames if f.frame_id in wanted]
    descriptors, _ = describe_parallel(frames, sid, settings, cfg.workers)
    gap = math.inf if dbc.method == "ringkey" else cfg.cluster_threshold
    for q in descriptors:
        window = ExclusionWindow(sid, q.frame_id, cfg.exclusion_frames) if cfg.exclusion_frames > 0 else None
        start = time.perf_counter()
        res = db.query(q, cluster_threshold=gap, verify_threshold=cfg.verify_threshold, exclusion=window)
        elapsed = (time.perf_counter() - start) * 1000.0
        print(json.dumps({
            "frame_id": q.frame_id,
            "matched": res.matched,
            "candidate": list(res.candidate_frame) if res.candidate_frame else None,
            "distance": res.distance if math.isfinite(res.distance) else None,
            "candidates_examined": res.candidates_examined,
            "query_ms": round(elapsed, 3),
        }))
    return 0


def _stored_descriptors(path, cfg: RunConfig, settings: MethodSettings, frames: Sequence[RadarFrame],
                        session_id: str) -> list[EssDescriptor]:
    """Descriptors of an index run, checked against the current settings."""
    db = DescriptorDb.load(path)
    want = db_config(settings)
    for name in ("method", "size", "max_range", "binarize_threshold", "min_cluster_area"):
        if getattr(db.config, name) != getattr(want, name):
            raise ConfigError(f"{path}: built with {name}={getattr(db.config, name)!r}, "
                              f"run uses {getattr(want, name)!r}")
    by_id = {d.frame_id: d for d in db.descriptors}
    missing = [f.frame_id for f in frames if f.frame_id not in by_id]
    if missing:
        raise ConfigError(f"{path}: no descriptors for frames {missing[:5]} (check --stride)")
    return [dataclasses.replace(by_id[f.frame_id], session_id=session_id) for f in frames]


def _grid_tag(combo: dict) -> str:
    if not combo:
        return "default"
    return "_".join(f"{k}-{v}" for k, v in combo.items())


def _descriptor_key(cfg: RunConfig) -> tuple:
    return cfg.method, cfg.size, cfg.max_range, cfg.binarize_threshold, cfg.min_cluster_area, cfg.frame_stride


def cmd_eval(args) -> int:
    base = resolve_config(args)
    axes = parse_grid(args.grid)
    bounds = parse_bounds(args.assert_)
    target = _require(base.target, "target session")
    mode = args.mode or ("inter" if base.query else "intra")
    if mode == "inter" and not base.query:
        raise ConfigError("inter-session evaluation needs a query session")
    out = Path(base.out or "eval_out")
    out.mkdir(parents=True, exist_ok=True)
    target_id = session_name(target)
    query_id = session_name(base.query) if mode == "inter" else None

    sessions: dict[tuple, list[RadarFrame]] = {}
    cache: dict[tuple, list[EssDescriptor]] = {}

    def frames_of(path, stride):
        key = (str(path), stride)
        if key not in sessions:
            sessions[key] = load_session(path, stride)
        return sessions[key]

    def descriptors_of(path, sid, cfg: RunConfig, settings: MethodSettings):
        key = (str(path), sid) + _descriptor_key(cfg)
        if key not in cache:
            cache[key], _ = describe_parallel(frames_of(path, cfg.frame_stride), sid, settings, cfg.workers)
        return cache[key]

    combos = [dict(zip([k for k, _ in axes], values)) for values in itertools.product(*[v for _, v in axes])]
    rows, failures = [], []
    for combo in combos:
        cfg = dataclasses.replace(base, **combo).validate()
        settings = cfg.settings(mode)
        tgt = frames_of(target, cfg.frame_stride)
        qry = frames_of(base.query, cfg.frame_stride) if mode == "inter" else None
        if args.db and mode == "intra":
            tdesc = _stored_descriptors(args.db, cfg, settings, tgt, target_id)
        else:
            tdesc = descriptors_of(target, target_id, cfg, settings)
        qdesc = descriptors_of(base.query, query_id, cfg, settings) if qry is not None else None
        sequence = args.sequence or (target_id if mode == "intra" else f"{query_id}->{target_id}")
        result = evaluate(tgt, target_id, settings, query=qry, query_id=query_id, sequence=sequence,
                          target_descriptors=tdesc, query_descriptors=qdesc)
        tag = _grid_tag(combo)
        write_curve_csv(out / "curves" / f"{cfg.method}_{tag}.csv", result.curve)
        row = result.summary_row()
        row.update(combo)
        row["mean_candidates"] = result.mean_candidates
        row["low_tn"] = result.low_tn
        rows.append(row)
        for b in bounds:
            if not b.holds(row):
                failures.append(f"{tag}: {b} violated ({b.metric}={row[b.metric]:.4f})")
        print(" ".join(f"{k}={row[k]:.4f}" if isinstance(row[k], float) else f"{k}={row[k]}"
                       for k in list(SUMMARY_FIELDS) + list(combo)))

    extra = [k for k, _ in axes] + ["mean_candidates", "low_tn"]
    write_summary_csv(out / "summary.csv", rows, extra_fields=extra)
    manifest = {
        "command": "eval",
        "version": __version__,
        "mode": mode,
        "config": asdict(base),
        "grid": {k: v for k, v in axes},
        "bounds": [str(b) for b in bounds],
        "rows": rows,
        "violations": failures,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    for f in failures:
        print(f"ASSERTION FAILED {f}", file=sys.stderr)
    return EXIT_ASSERT if failures else 0


def cmd_sweep(args) -> int:
    if not args.grid:
        raise ConfigError("sweep needs at least one --grid axis")
    return cmd_eval(args)


def cmd_synth(args) -> int:
    if args.preset:
        scene, trajectory, frame_cfg = preset(args.preset)
    else:
        if not (args.scene and args.trajectory):
            raise ConfigError("synth needs --preset or both --scene and --trajectory")
        scene, frame_cfg = load_scene(args.scene)
        trajectory = load_trajectory(args.trajectory)
        frame_cfg = frame_cfg or FrameConfig.small()
    if args.size_px:
        frame_cfg = dataclasses.replace(FrameConfig.small(args.size_px), **{
            k: getattr(frame_cfg, k) for k in ("blind_range", "cut_level", "fluctuation", "morph_radius",
                                               "speckle", "vessel_aspect")
        })
    frames = make_loop_sequence(scene, trajectory, frame_cfg, seed=args.seed)
    out = Path(args.out)
    write_session(out, frames, ext=f".{args.format}")
    manifest = {
        "command": "synth",
        "version": __version__,
        "preset": args.preset,
        "seed": args.seed,
        "frames": len(frames),
        "frame_config": asdict(frame_cfg),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def _add_run_flags(p: argparse.ArgumentParser, query_side: bool = False) -> None:
    p.add_argument("--config", help="flat JSON file of run settings")
    p.add_argument("--size", type=int, help="descriptor length (default 100)")
    p.add_argument("--max-range", dest="max_range", type=float, help="histogram range in px")
    p.add_argument("--stride", dest="frame_stride", type=int, help="use every n-th frame (default 5)")
    p.add_argument("--binarize", dest="binarize_threshold", type=int, help="detection threshold (default 0)")
    p.add_argument("--min-area", dest="min_cluster_area", type=int, help="drop smaller clusters, px")
    p.add_argument("--workers", type=int, help="processes for descriptor extraction")
    if query_side:
        p.add_argument("--cluster-threshold", dest="cluster_threshold", type=float,
                       help="max cluster-count difference (default 10)")
        p.add_argument("--verify", dest="verify_threshold", type=float, help="max cosine distance (default 0.2)")
        p.add_argument("--exclusion", dest="exclusion_frames", type=int,
                       help="hide same-session frames this many ids before the query (default 50)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radar-ess", description="Radar place recognition with ESS descriptors.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="describe a session and write a descriptor database")
    p.add_argument("target", help="session directory (frames + metadata.csv)")
    p.add_argument("-o", "--out", dest="db", help="database path (.jsonl)")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--session-id", help="defaults to the directory name")
    _add_run_flags(p)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="look up the frames of a session in a database")
    p.add_argument("db", help="database written by index")
    p.add_argument("query", help="session directory")
    p.add_argument("--frame", type=int, action="append", help="query only these frame ids")
    p.add_argument("--session-id", help="defaults to the directory name")
    _add_run_flags(p, query_side=True)
    p.set_defaults(func=cmd_query)

    for name, func, text in (
        ("eval", cmd_eval, "score place recognition against pose ground truth"),
        ("sweep", cmd_sweep, "eval over a --grid of settings (ablations)"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("target", help="target session directory")
        p.add_argument("query", nargs="?", help="query session directory (inter-session mode)")
        p.add_argument("-o", "--out", dest="out", help="output directory (default eval_out)")
        p.add_argument("--mode", choices=("intra", "inter"))
        p.add_argument("--method", choices=METHODS)
        p.add_argument("--revisit", dest="revisit_distance", type=float, help="revisit distance, m (default 100)")
        p.add_argument("--db", help="reuse target descriptors from this database (intra mode)")
        p.add_argument("--sequence", help="label for the summary rows")
        p.add_argument("--grid", action="append", metavar="KEY=V1,V2",
                       help="sweep a setting; repeat for a product")
        p.add_argument("--assert", dest="assert_", action="append", metavar="METRIC>=V",
                       help="fail with exit code 3 when a row violates the bound")
        _add_run_flags(p, query_side=True)
        p.set_defaults(func=func)

    p = sub.add_parser("synth", help="render a synthetic session")
    p.add_argument("out", help="output session directory")
    p.add_argument("--preset", choices=("single-island", "anchorage-loop"))
    p.add_argument("--scene", help="scene JSON")
    p.add_argument("--trajectory", help="trajectory JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size-px", type=int, help="frame size; resolution follows to keep coverage")
    p.add_argument("--format", choices=("png", "pgm"), default="png")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SceneError, FrameFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
