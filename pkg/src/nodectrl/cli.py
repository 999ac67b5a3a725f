"""Command-line entry points, file formats, trajectory export and run manifests.

Exit codes: 0 success with every acceptance flag true, 2 malformed input,
3 synthesis precondition failure, 4 certification failure or a false flag.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .approx import approximate, estimate_box_dimension
from .classify import synthesize_classifier, verify_classification
from .core import (
    Box,
    CertificationError,
    ControlSchedule,
    DiscreteMeasure,
    LabeledEnsemble,
    PreconditionError,
    Region,
    SchemaError,
    SimpleFunction,
    StripPartition,
    dumps,
    schedule_from_json,
    schedule_metrics,
    schedule_to_json,
    sequence_of_floats,
)
from .flow import integrate_schedule, points_from_csv, trajectories_to_csv
from .simcontrol import synthesize_approx_simcontrol, synthesize_simcontrol
from .transport import DensitySpec, synthesize_multiclass_transport, synthesize_transport

log = logging.getLogger("nodectrl")

EXIT_OK, EXIT_SCHEMA, EXIT_PRECONDITION, EXIT_CERT = 0, 2, 3, 4
SCENARIO_VERSION = 1
MAX_TRAJECTORIES = 200

# ---------------------------------------------------------------- schemas

_VEC = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_POINTS = {"type": "array", "items": _VEC, "minItems": 1}
_BOX = {"type": "object", "required": ["lo", "hi"], "properties": {"lo": _VEC, "hi": _VEC}}
_POS = {"type": "number", "exclusiveMinimum": 0}

DENSITY_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "required": ["type", "boxes"],
            "properties": {"type": {"const": "uniform_boxes"}, "boxes": {"type": "array", "items": _BOX, "minItems": 1}},
        },
        {
            "type": "object",
            "required": ["type", "points"],
            "properties": {"type": {"const": "samples"}, "points": _POINTS},
        },
    ]
}
DIRAC_SCHEMA = {
    "type": "object",
    "required": ["points"],
    "properties": {"points": _POINTS, "weights": {"type": "array", "items": {"type": "number"}}},
}
FUNCTION_SCHEMA = {
    "type": "object",
    "required": ["domain", "regions"],
    "properties": {
        "domain": _BOX,
        "regions": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["boxes", "value"],
                "properties": {"boxes": {"type": "array", "items": _BOX, "minItems": 1}, "value": _VEC},
            },
        },
    },
}
PAYLOAD_SCHEMAS = {
    "classify": {
        "type": "object",
        "required": ["points", "labels", "strips"],
        "properties": {
            "points": _POINTS,
            "labels": {"type": "array", "items": {"type": "integer"}},
            "strips": {"type": "array", "items": {"type": "number"}},
            "time": _POS,
        },
    },
    "simcontrol": {
        "type": "object",
        "required": ["points", "targets"],
        "properties": {"points": _POINTS, "targets": _POINTS, "eps": {"type": "number", "minimum": 0}, "time": _POS},
    },
    "approx": {
        "type": "object",
        "required": ["function", "eps"],
        "properties": {"function": FUNCTION_SCHEMA, "eps": _POS, "time": _POS, "h": _POS, "grid_step": _POS},
    },
    "transport": {
        "type": "object",
        "required": ["rho0", "target", "eps"],
        "properties": {
            "rho0": DENSITY_SCHEMA,
            "target": DIRAC_SCHEMA,
            "eps": _POS,
            "particles": {"type": "integer", "minimum": 1},
            "time": _POS,
        },
    },
    "multitransport": {
        "type": "object",
        "required": ["classes", "eps"],
        "properties": {
            "classes": {
                "type": "array",
                "minItems": 1,
                "items": {
                    "type": "object",
                    "required": ["rho0", "target"],
                    "properties": {"rho0": DENSITY_SCHEMA, "target": DIRAC_SCHEMA},
                },
            },
            "eps": _POS,
            "particles": {"type": "integer", "minimum": 1},
            "time": _POS,
        },
    },
}
SCENARIO_SCHEMA = {
    "type": "object",
    "required": ["version", "kind", "payload"],
    "properties": {
        "version": {"const": SCENARIO_VERSION},
        "kind": {"enum": sorted(PAYLOAD_SCHEMAS)},
        "payload": {"type": "object"},
        "seed": {"type": "integer"},
        "outputs": {"type": "object", "properties": {"dir": {"type": "string"}, "svg": {"type": "boolean"}}},
    },
}


def validate(doc, schema, what: str) -> None:
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"invalid {what}: {exc.message}") from exc


def load_json(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SchemaError(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed JSON in {path}: {exc}") from exc


def simple_function_from_dict(doc) -> SimpleFunction:
    validate(doc, FUNCTION_SCHEMA, "function document")
    dom = Box(doc["domain"]["lo"], doc["domain"]["hi"])
    regions = [Region(np.array(r["value"], float), tuple(Box(b["lo"], b["hi"]) for b in r["boxes"])) for r in doc["regions"]]
    return SimpleFunction(dom, tuple(regions))


def dirac_from_dict(doc) -> DiscreteMeasure:
    validate(doc, DIRAC_SCHEMA, "target measure")
    pts = np.array(doc["points"], float)
    if "weights" in doc:
        return DiscreteMeasure(pts, np.array(doc["weights"], float))
    return DiscreteMeasure.uniform(pts)


def density_from_dict(doc) -> DensitySpec:
    validate(doc, DENSITY_SCHEMA, "density document")
    return DensitySpec.from_dict(doc)


def _array(rows, what: str) -> np.ndarray:
    try:
        return np.array(rows, float)
    except ValueError as exc:
        raise SchemaError(f"{what} rows have unequal lengths") from exc


# ---------------------------------------------------------------- output


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _n(v: float) -> str:
    return "%.6f" % v


def render_svg(trajs, strips=(), targets=None, size: int = 480) -> str:
    """Static plot of the trajectories projected onto the first two coordinates."""
    pts = [tr.states[:, :2] for tr in trajs]
    allp = np.vstack(pts + ([np.asarray(targets)[:, :2]] if targets is not None and len(targets) else []))
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    lo, span = lo - 0.05 * span, 1.1 * span
    pad = 10

    def xy(p):
        x = pad + (p[0] - lo[0]) / span[0] * (size - 2 * pad)
        y = size - pad - (p[1] - lo[1]) / span[1] * (size - 2 * pad)
        return _n(x), _n(y)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
    ]
    for a in strips:
        x, _ = xy((a, lo[1]))
        out.append(f'<line x1="{x}" y1="0" x2="{x}" y2="{size}" stroke="#999" stroke-dasharray="4 3"/>')
    for p in pts:
        path = " ".join(",".join(xy(q)) for q in p)
        out.append(f'<polyline points="{path}" fill="none" stroke="#1f77b4" stroke-width="0.8"/>')
        x, y = xy(p[-1])
        out.append(f'<circle cx="{x}" cy="{y}" r="1.8" fill="#d62728"/>')
    if targets is not None:
        for z in np.asarray(targets):
            x, y = xy(z[:2])
            out.append(f'<path d="M{x} {y} m-4 -4 l8 8 m0 -8 l-8 8" stroke="black" stroke-width="1.2"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


@dataclass
class Outcome:
    schedule: ControlSchedule
    report: dict
    flags: dict
    probe_points: np.ndarray
    strips: tuple = ()
    targets: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def trajectories(points: np.ndarray, s: ControlSchedule, oracle: str):
    _, trajs = integrate_schedule(points, s, record=True, oracle=oracle)
    return trajs


# ---------------------------------------------------------------- dispatch


def run_classify(p: dict, seed: int, oracle: str) -> Outcome:
    E = LabeledEnsemble(_array(p["points"], "points"), np.array(p["labels"]))
    P = StripPartition(tuple(p["strips"]))
    s = synthesize_classifier(E, P, float(p.get("time", 1.0)))
    rep = verify_classification(E, P, s)
    doc = rep.as_dict()
    if oracle == "rk4":
        final, _ = integrate_schedule(E.points, s, oracle="rk4")
        doc["rk4_accuracy"] = float(np.mean([P.contains(int(l), float(x[0]), 1e-9) for l, x in zip(E.labels, final)]))
    return Outcome(s, doc, {"accuracy_one": rep.accuracy == 1.0}, E.points, P.thresholds)


def run_simcontrol(p: dict, seed: int, oracle: str) -> Outcome:
    X, Z = _array(p["points"], "points"), _array(p["targets"], "targets")
    eps = float(p.get("eps", 0.0))
    T = float(p.get("time", 1.0))
    s = synthesize_simcontrol(X, Z, T) if eps == 0 else synthesize_approx_simcontrol(X, Z, eps, T)
    final, _ = integrate_schedule(X, s, oracle=oracle)
    err = float(np.max(np.linalg.norm(final - Z, axis=1)))
    tol = 1e-6 if oracle == "closed" else 1e-5
    m = schedule_metrics(s)
    doc = {"max_error": err, "oracle": oracle, "eps": eps, **m.as_dict(), "final": final.tolist()}
    flag = err < tol if eps == 0 else err <= eps + tol
    return Outcome(s, doc, {"targets_reached": bool(flag), "switches_le_6N": m.switches <= 6 * len(X)}, X, (), Z)


def run_approx(p: dict, seed: int, oracle: str) -> Outcome:
    f = simple_function_from_dict(p["function"])
    res = approximate(f, float(p["eps"]), float(p.get("time", 1.0)), h=p.get("h"), grid_step=p.get("grid_step"))
    rng = np.random.default_rng(seed)
    probe = f.domain.lo + rng.random((60, f.d)) * (f.domain.hi - f.domain.lo)
    return Outcome(res.schedule, res.certificate, {"l2_below_eps": res.certificate["l2_error"] < float(p["eps"])},
                   probe, (), f.values())


def _probe(particles, seed) -> np.ndarray:
    pts = np.asarray(particles)
    if len(pts) <= MAX_TRAJECTORIES:
        return pts
    idx = np.sort(np.random.default_rng(seed).choice(len(pts), MAX_TRAJECTORIES, replace=False))
    return pts[idx]


def run_transport(p: dict, seed: int, oracle: str) -> Outcome:
    from .transport import sample_particles

    rho = density_from_dict(p["rho0"])
    tgt = dirac_from_dict(p["target"])
    n = int(p.get("particles", 10000))
    eps = float(p["eps"])
    s, cert = synthesize_transport(rho, tgt, eps, n, float(p.get("time", 1.0)), seed)
    probe = _probe(sample_particles(rho, n, seed).points, seed)
    return Outcome(s, cert.as_dict(), {"w1_below_eps": cert.w1 < eps}, probe, (), tgt.points)


def run_multitransport(p: dict, seed: int, oracle: str) -> Outcome:
    from .transport import sample_particles

    rhos = [density_from_dict(c["rho0"]) for c in p["classes"]]
    tgts = [dirac_from_dict(c["target"]) for c in p["classes"]]
    n = int(p.get("particles", 10000))
    eps = float(p["eps"])
    s, certs, rep = synthesize_multiclass_transport(rhos, tgts, eps, n, float(p.get("time", 1.0)), seed)
    doc = {"classes": [c.as_dict() for c in certs], "pooled_w1": rep.pooled_w1, "captured_fraction": rep.captured_fraction}
    flags = {f"class_{j}_w1_below_eps": c.w1 < eps for j, c in enumerate(certs)}
    flags["pooled_w1_below_eps"] = rep.pooled_w1 < eps
    probe = np.vstack([_probe(sample_particles(r, n, seed + 101 * j).points, seed) for j, r in enumerate(rhos)])
    return Outcome(s, doc, flags, probe, (), np.vstack([t.points for t in tgts]))


RUNNERS = {
    "classify": run_classify,
    "simcontrol": run_simcontrol,
    "approx": run_approx,
    "transport": run_transport,
    "multitransport": run_multitransport,
}


def execute(kind: str, payload: dict, seed: int, oracle: str) -> Outcome:
    validate(payload, PAYLOAD_SCHEMAS[kind], f"{kind} input")
    return RUNNERS[kind](payload, seed, oracle)


def write_outcome(out: Outcome, schedule_path, report_path, traj_path=None, svg_path=None, oracle="closed") -> None:
    atomic_write(schedule_path, schedule_to_json(out.schedule))
    if report_path is not None:
        atomic_write(report_path, dumps(out.report))
    if traj_path is None and svg_path is None:
        return
    trajs = trajectories(out.probe_points, out.schedule, oracle)
    if traj_path is not None:
        atomic_write(traj_path, trajectories_to_csv(trajs, out.schedule.d))
    if svg_path is not None:
        atomic_write(svg_path, render_svg(trajs, out.strips, out.targets))


def manifest(out: Outcome, scenario_hash: str, wall: float) -> dict:
    return {
        "tool": "nodectrl",
        "version": __version__,
        "scenario_sha256": scenario_hash,
        "wall_time_s": wall,
        "metrics": schedule_metrics(out.schedule).as_dict(),
        "acceptance": out.flags,
    }


def _status(out: Outcome) -> int:
    bad = [k for k, v in out.flags.items() if not v]
    if bad:
        log.error("acceptance flags false: %s", ", ".join(bad))
        return EXIT_CERT
    return EXIT_OK


# ---------------------------------------------------------------- commands


def cmd_run(args) -> int:
    path = Path(args.scenario)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise SchemaError(f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SchemaError(f"malformed scenario JSON: {exc}") from exc
    validate(doc, SCENARIO_SCHEMA, "scenario")
    seed = int(doc.get("seed", args.seed))
    outputs = doc.get("outputs", {})
    outdir = Path(args.outdir or outputs.get("dir") or path.with_suffix("").name + "_out")
    t0 = time.perf_counter()
    out = execute(doc["kind"], doc["payload"], seed, args.oracle)
    report_name = "cert.json" if doc["kind"] in ("approx", "transport", "multitransport") else "report.json"
    svg = outdir / "trajectories.svg" if (args.svg or outputs.get("svg")) else None
    write_outcome(out, outdir / "schedule.json", outdir / report_name, outdir / "trajectories.csv", svg, args.oracle)
    wall = time.perf_counter() - t0
    atomic_write(outdir / "manifest.json", dumps(manifest(out, hashlib.sha256(raw).hexdigest(), wall)))
    return _status(out)


def _svg_path(args):
    if not args.svg:
        return None
    return Path(args.out).with_suffix(".svg")


def _finish(args, out: Outcome, report_path) -> int:
    write_outcome(out, args.out, report_path, getattr(args, "trajectories", None), _svg_path(args), args.oracle)
    print(dumps(out.flags), end="")
    return _status(out)


def cmd_classify(args) -> int:
    doc = load_json(args.input)
    payload = {"points": doc.get("points"), "labels": doc.get("labels"), "strips": sequence_of_floats(args.strips), "time": args.time}
    return _finish(args, execute("classify", payload, args.seed, args.oracle), args.report)


def cmd_simcontrol(args) -> int:
    doc = load_json(args.input)
    payload = {"points": doc.get("points"), "targets": doc.get("targets"), "eps": args.eps, "time": args.time}
    return _finish(args, execute("simcontrol", payload, args.seed, args.oracle), args.report)


def cmd_approx(args) -> int:
    payload = {"function": load_json(args.fn), "eps": args.eps, "time": args.time}
    if args.grid_step is not None:
        payload["grid_step"] = args.grid_step
    return _finish(args, execute("approx", payload, args.seed, args.oracle), args.cert)


def cmd_transport(args) -> int:
    payload = {"rho0": load_json(args.rho0), "target": load_json(args.target), "eps": args.eps,
               "particles": args.particles, "time": args.time}
    return _finish(args, execute("transport", payload, args.seed, args.oracle), args.cert)


def cmd_multitransport(args) -> int:
    if len(args.rho0) != len(args.target):
        raise SchemaError("give one --target per --rho0")
    classes = [{"rho0": load_json(r), "target": load_json(t)} for r, t in zip(args.rho0, args.target)]
    payload = {"classes": classes, "eps": args.eps, "particles": args.particles, "time": args.time}
    return _finish(args, execute("multitransport", payload, args.seed, args.oracle), args.cert)


def replay(schedule: ControlSchedule, points: np.ndarray, oracle: str = "closed") -> str:
    """Trajectories CSV of ``points`` under ``schedule``; deterministic."""
    if points.shape[1] != schedule.d:
        raise PreconditionError(f"points have dimension {points.shape[1]}, schedule has {schedule.d}")
    return trajectories_to_csv(trajectories(points, schedule, oracle), schedule.d)


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise SchemaError(f"cannot read {path}: {exc}") from exc


def cmd_replay(args) -> int:
    s = schedule_from_json(_read_text(args.schedule))
    pts = points_from_csv(_read_text(args.points))
    if args.probes:
        probes = points_from_csv(_read_text(args.probes))
        if probes.shape[1] != pts.shape[1]:
            raise PreconditionError("probe points have a different dimension")
        pts = np.vstack([pts, probes])
    csv = replay(s, pts, args.oracle)
    if args.out:
        atomic_write(args.out, csv)
    else:
        sys.stdout.write(csv)
    return EXIT_OK


def cmd_boxdim(args) -> int:
    f = simple_function_from_dict(load_json(args.fn))
    hs = sequence_of_floats(args.h)
    D = estimate_box_dimension(f, hs)
    print(dumps({"dimension": D, "h": hs}), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    def globals_(defaults: bool) -> argparse.ArgumentParser:
        # subcommands repeat the global flags without overriding values given before the command
        g = argparse.ArgumentParser(add_help=False)
        kw = {} if defaults else {"default": argparse.SUPPRESS}
        g.add_argument("--seed", type=int, **({"default": 0} if defaults else kw))
        g.add_argument("--oracle", choices=["closed", "rk4"], **({"default": "closed"} if defaults else kw))
        g.add_argument("--svg", action="store_true", help="also write an SVG plot of the trajectories", **kw)
        g.add_argument("-v", "--verbose", action="store_true", **kw)
        return g

    common = globals_(False)
    ap = argparse.ArgumentParser(
        prog="nodectrl", description="Piecewise-constant ReLU flow control synthesis.", parents=[globals_(True)]
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_, parents=[common])
        p.set_defaults(func=fn)
        return p

    p = add("run", cmd_run, "run a scenario file")
    p.add_argument("scenario")
    p.add_argument("--outdir")

    p = add("classify", cmd_classify, "labelled points to strips")
    p.add_argument("--input", required=True)
    p.add_argument("--strips", required=True)
    p.add_argument("--time", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--trajectories")

    p = add("simcontrol", cmd_simcontrol, "points onto targets")
    p.add_argument("--input", required=True)
    p.add_argument("--time", type=float, default=1.0)
    p.add_argument("--eps", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--trajectories")

    p = add("approx", cmd_approx, "L2 approximation of a simple function")
    p.add_argument("--fn", required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--time", type=float, default=1.0)
    p.add_argument("--grid-step", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--cert")
    p.add_argument("--trajectories")

    for name, help_ in (("transport", "density onto Dirac mixture"), ("multitransport", "several densities, one schedule")):
        fn = cmd_transport if name == "transport" else cmd_multitransport
        p = add(name, fn, help_)
        nargs = None if name == "transport" else "+"
        p.add_argument("--rho0", required=True, nargs=nargs)
        p.add_argument("--target", required=True, nargs=nargs)
        p.add_argument("--eps", type=float, required=True)
        p.add_argument("--particles", type=int, default=10000)
        p.add_argument("--time", type=float, default=1.0)
        p.add_argument("--out", required=True)
        p.add_argument("--cert")
        p.add_argument("--trajectories")

    p = add("replay", cmd_replay, "re-integrate a schedule on points")
    p.add_argument("schedule")
    p.add_argument("points")
    p.add_argument("--probes")
    p.add_argument("--out")

    p = add("boxdim", cmd_boxdim, "box-counting dimension of region boundaries")
    p.add_argument("--fn", required=True)
    p.add_argument("--h", default="0.2,0.1,0.05,0.025")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except PreconditionError as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except CertificationError as exc:
        print(f"certification failed: {exc}", file=sys.stderr)
        return EXIT_CERT


if __name__ == "__main__":
    sys.exit(main())
