"""Experiment orchestration: configs, canned runs, artifacts and the constant registry.

Config grammar
--------------
A config is an INI file (``configparser`` syntax): ``[section]`` headers
followed by ``key = value`` lines, ``#`` or ``;`` starting a comment.  Lists are
comma separated and blank values mean "use the default".  Recognised sections
and keys, with defaults, are in :data:`DEFAULTS`; unknown sections or keys are
rejected.  The resolved config, with every default filled in, is written next
to the results so a manifest alone reproduces a run.

``[expect]`` keys turn into pass/fail checks in the manifest; an experiment
without expectations only produces artifacts.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import diagnostics as diag
from . import flow as fl
from . import spectral
from .errors import AbortNotGeneric, ConfigError, EmptyInput, RegressionFailure, ShrinkerLabError
from .geometry import GeometrySnapshot, circle, fourier_resample, isoperimetric_ratio, sphere_profile
from .shrinkers import ShrinkerSpec, make_shrinker

INITIAL_KINDS = ("circle", "sphere", "round", "abresch_langer", "angenent_torus", "file", "circle_pair")
F_SOURCES = ("none", "eigenfunction", "constant", "file")

DEFAULTS = {
    "experiment": {
        "name": "experiment",
        "output_dir": "runs/experiment",
        "seed": "0",
    },
    "initial": {
        "kind": "angenent_torus",
        "radius": "1.0",
        "outer_radius": "2.0",
        "n": "1",
        "p": "2",
        "q": "3",
        "n_vertices": "256",
        "tol": "1e-12",
        "path": "",
    },
    "perturbation": {
        "f": "none",
        "path": "",
        "amplitude": "auto",
        "direction": "inward",
        "min_margin": "1e-3",
    },
    "flow": {
        "mode": "RMCF",
        "t_max": "10.0",
        "cfl": "0.4",
        "remesh_every": "50",
        "a_max": "1000.0",
        "output_dt": "",
        "output_growth": "1.05",
        "monitor": "0.0",
        "dt_max": "0.01",
        "t_start": "",
    },
    "diagnostics": {
        "noncollapse_every": "1",
        "classify": "true",
        "transport": "false",
        "nestedness": "false",
        "identities": "",
        "identity_levels": "128, 256, 512",
        "isoperimetric": "false",
        "mcf_companion_t_max": "0",
        "svg_every": "10",
    },
    "expect": {},
}

# Keys allowed in [expect]; each present key produces one check.
EXPECT_KEYS = (
    "termination",
    "singular_time",
    "singular_time_tol",
    "transported_singular_time",
    "tangent_type",
    "collapse_side",
    "decay_exponent",
    "decay_exponent_tol",
    "fit_residual_max",
    "transport_agrees",
    "sign_preserved",
    "delta_monotone_tol",
    "delta_closed_form_rtol",
    "nested",
    "spatial_order_min",
    "temporal_order_min",
    "isoperimetric_decreasing",
    "avoidance_tol",
    "avoidance_closed_form_tol",
    "self_adjoint_tol",
    "identity_exact_tol",
)


# ----------------------------------------------------------------------
# config


@dataclass
class ExperimentConfig:
    """Resolved experiment settings; ``sections`` holds every key as a string."""

    sections: dict
    source: str = "<string>"

    # typed accessors -------------------------------------------------
    def get(self, section, key):
        return self.sections[section][key]

    def getfloat(self, section, key, default=None):
        raw = self.sections[section].get(key, "")
        if raw == "":
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not a number") from None

    def getint(self, section, key):
        raw = self.sections[section][key]
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not an integer") from None

    def getbool(self, section, key):
        raw = self.sections[section].get(key, "false").strip().lower()
        if raw in ("1", "true", "yes", "on"):
            return True
        if raw in ("0", "false", "no", "off", ""):
            return False
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a boolean")

    def getlist(self, section, key, cast=float):
        raw = self.sections[section].get(key, "")
        return [cast(x) for x in raw.split(",") if x.strip()]

    @property
    def name(self):
        return self.sections["experiment"]["name"]

    @property
    def output_dir(self) -> Path:
        return Path(self.sections["experiment"]["output_dir"])

    @property
    def expectations(self) -> dict:
        return dict(self.sections["expect"])

    def with_output_dir(self, path) -> "ExperimentConfig":
        sections = {k: dict(v) for k, v in self.sections.items()}
        sections["experiment"]["output_dir"] = str(path)
        return ExperimentConfig(sections, self.source)

    def to_ini(self) -> str:
        """Canonical text: fixed section order, keys sorted."""
        lines = []
        for sec in DEFAULTS:
            lines.append(f"[{sec}]")
            for key in sorted(self.sections[sec]):
                lines.append(f"{key} = {self.sections[sec][key]}")
            lines.append("")
        return "\n".join(lines)

    @property
    def hash(self) -> str:
        """SHA-256 of the canonical config minus the output directory."""
        sections = {k: dict(v) for k, v in self.sections.items()}
        sections["experiment"].pop("output_dir")
        text = json.dumps(sections, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()


def parse_config(text: str, source: str = "<string>", base_dir=None) -> ExperimentConfig:
    """Parse and validate INI text, filling in defaults.

    Relative ``path`` entries are resolved against ``base_dir``.

    Raises
    ------
    ConfigError
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    sections = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    for sec in cp.sections():
        if sec not in DEFAULTS:
            raise ConfigError(f"unknown section [{sec}]")
        for key, val in cp.items(sec):
            if sec == "expect":
                if key not in EXPECT_KEYS:
                    raise ConfigError(f"unknown expectation {key!r}")
            elif key not in DEFAULTS[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            sections[sec][key] = val.strip()
    cfg = ExperimentConfig(sections, source)
    _validate(cfg, base_dir)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path), base_dir=path.parent)


def _validate(cfg: ExperimentConfig, base_dir):
    kind = cfg.get("initial", "kind")
    if kind not in INITIAL_KINDS:
        raise ConfigError(f"[initial] kind must be one of {INITIAL_KINDS}")
    fsrc = cfg.get("perturbation", "f")
    if fsrc not in F_SOURCES:
        raise ConfigError(f"[perturbation] f must be one of {F_SOURCES}")
    for sec in ("initial", "perturbation"):
        p = cfg.get(sec, "path")
        needed = (sec == "initial" and kind == "file") or (sec == "perturbation" and fsrc == "file")
        if needed and not p:
            raise ConfigError(f"[{sec}] path is required")
        if p:
            full = Path(p) if base_dir is None or Path(p).is_absolute() else Path(base_dir) / p
            if not full.exists():
                raise ConfigError(f"[{sec}] path {p} does not exist")
            cfg.sections[sec]["path"] = str(full)
    if fsrc != "none":
        amp = cfg.get("perturbation", "amplitude")
        if amp != "auto":
            if cfg.getfloat("perturbation", "amplitude") == 0.0:
                raise ConfigError("perturbation amplitude must be nonzero")
        elif cfg.get("perturbation", "direction") not in ("inward", "outward"):
            raise ConfigError("[perturbation] direction must be inward or outward")
    if cfg.get("flow", "mode") not in fl.FLOW_MODES:
        raise ConfigError(f"[flow] mode must be one of {fl.FLOW_MODES}")
    for key in ("t_max", "cfl", "a_max", "output_growth", "monitor", "dt_max"):
        cfg.getfloat("flow", key)
    for key in ("noncollapse_every", "svg_every"):
        cfg.getint("diagnostics", key)
    for key in ("classify", "transport", "nestedness", "isoperimetric"):
        cfg.getbool("diagnostics", key)


# ----------------------------------------------------------------------
# canned experiments

_CANNED = {
    "circle-collapse": """
[experiment]
name = circle-collapse
[initial]
kind = circle
radius = 1.0
n_vertices = 256
[flow]
mode = RMCF
t_max = 2.0
output_dt = 0.01
[diagnostics]
transport = true
identities = 0.0
identity_levels = 128
[expect]
termination = blow_up
singular_time = 0.6931471805599453
singular_time_tol = 1e-3
transported_singular_time = -0.5
tangent_type = round
collapse_side = inside
decay_exponent = 0.5
decay_exponent_tol = 0.05
transport_agrees = true
sign_preserved = true
delta_closed_form_rtol = 0.01
identity_exact_tol = 1e-8
""",
    "circle-expand": """
[experiment]
name = circle-expand
[initial]
kind = circle
radius = 1.6
n_vertices = 256
[flow]
mode = RMCF
t_max = 3.0
output_dt = 0.01
[diagnostics]
classify = false
[expect]
termination = reached_t_max
sign_preserved = true
delta_closed_form_rtol = 0.01
""",
    "torus-inward": """
[experiment]
name = torus-inward
[initial]
kind = angenent_torus
n_vertices = 256
[perturbation]
f = eigenfunction
amplitude = auto
direction = inward
[flow]
mode = RMCF
t_max = 10.0
[diagnostics]
transport = true
nestedness = true
identities = 0.2, 0.55
[expect]
termination = blow_up
tangent_type = cylindrical
collapse_side = inside
decay_exponent = 0.5
decay_exponent_tol = 0.05
fit_residual_max = 0.02
transport_agrees = true
sign_preserved = true
delta_monotone_tol = 1e-3
nested = inward
spatial_order_min = 1.8
temporal_order_min = 0.9
self_adjoint_tol = 1e-10
""",
    "torus-outward": """
[experiment]
name = torus-outward
[initial]
kind = angenent_torus
n_vertices = 256
[perturbation]
f = eigenfunction
amplitude = auto
direction = outward
[flow]
mode = RMCF
t_max = 10.0
monitor = 0.3
[diagnostics]
transport = true
nestedness = true
[expect]
termination = blow_up
tangent_type = cylindrical
collapse_side = outside
decay_exponent = 0.5
decay_exponent_tol = 0.05
fit_residual_max = 0.02
transport_agrees = true
sign_preserved = true
nested = outward
self_adjoint_tol = 1e-10
""",
    "abresch-langer-inward": """
[experiment]
name = abresch-langer-inward
[initial]
kind = abresch_langer
p = 2
q = 3
n_vertices = 256
[perturbation]
f = constant
amplitude = -0.1
[flow]
mode = RMCF
t_max = 10.0
monitor = 0.3
[diagnostics]
noncollapse_every = 0
[expect]
termination = blow_up
tangent_type = cusp|round
sign_preserved = true
""",
    "abresch-langer-outward": """
[experiment]
name = abresch-langer-outward
[initial]
kind = abresch_langer
p = 2
q = 3
n_vertices = 256
[perturbation]
f = constant
amplitude = 0.1
[flow]
mode = RMCF
t_max = 10.0
monitor = 0.3
[diagnostics]
noncollapse_every = 0
classify = false
isoperimetric = true
mcf_companion_t_max = 1.5
[expect]
termination = reached_t_max
sign_preserved = true
isoperimetric_decreasing = true
""",
    "avoidance-demo": """
[experiment]
name = avoidance-demo
[initial]
kind = circle_pair
radius = 1.0
outer_radius = 2.0
n_vertices = 512
[flow]
mode = MCF
t_max = 0.5
cfl = 0.2
a_max = 100
output_dt = 0.01
[diagnostics]
noncollapse_every = 0
classify = false
[expect]
avoidance_tol = 1e-3
avoidance_closed_form_tol = 1e-4
""",
}

CANNED = tuple(_CANNED)


def canned_config(name: str, output_dir=None) -> ExperimentConfig:
    if name not in _CANNED:
        raise ConfigError(f"unknown canned experiment {name!r}; choose from {CANNED}")
    cfg = parse_config(_CANNED[name], source=f"canned:{name}")
    cfg.sections["experiment"]["output_dir"] = str(output_dir if output_dir is not None else Path("runs") / name)
    return cfg


# ----------------------------------------------------------------------
# file formats


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(obj) -> str:
    """Deterministic JSON (sorted keys, non-finite floats as null)."""
    return json.dumps(_jsonable(obj), sort_keys=True, indent=1) + "\n"


def atomic_write(path, text: str):
    """Write through a temporary file in the target directory and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        # mkstemp creates the file private; artifacts are meant to be shared
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) if not isinstance(v, str) else v for v in row])
    atomic_write(path, buf.getvalue())


RECORD_COLUMNS = ("time", "dt", "max_A", "min_Htilde", "max_Htilde", "gaussian_area")


def write_trajectory(traj: fl.FlowTrajectory, jsonl_path, csv_path=None):
    """Snapshots as JSONL (one geometry per line) plus a sidecar with run metadata."""
    jsonl_path = Path(jsonl_path)
    lines = [g.to_json() for g in traj.snapshots]
    atomic_write(jsonl_path, "\n".join(lines) + "\n")
    meta = {
        "flow_mode": traj.mode,
        "termination": traj.termination,
        "singular_time": traj.singular_time,
        "message": traj.message,
        "remesh_events": traj.remesh_events,
        "records": traj.records,
        "n_steps": len(traj.step_times),
    }
    atomic_write(jsonl_path.with_suffix(".meta.json"), dumps(meta))
    if csv_path is not None:
        write_csv(csv_path, RECORD_COLUMNS, ([r[c] for c in RECORD_COLUMNS] for r in traj.records))


def read_trajectory(jsonl_path, mode: str | None = None) -> fl.FlowTrajectory:
    """Inverse of :func:`write_trajectory`; the sidecar is optional.

    Without it the flow mode must be given and records are recomputed from
    the snapshots (with ``dt`` unknown, stored as 0).
    """
    jsonl_path = Path(jsonl_path)
    snaps = [GeometrySnapshot.from_json(line) for line in jsonl_path.read_text().splitlines() if line.strip()]
    if not snaps:
        raise EmptyInput(f"{jsonl_path} holds no snapshots")
    meta_path = jsonl_path.with_suffix(".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    mode = meta.get("flow_mode", mode)
    if mode is None:
        raise ConfigError("flow mode unknown: pass it explicitly or keep the .meta.json sidecar")
    traj = fl.FlowTrajectory(mode, snapshots=snaps)
    traj.termination = meta.get("termination", "unknown")
    traj.singular_time = meta.get("singular_time")
    traj.message = meta.get("message", "")
    traj.remesh_events = meta.get("remesh_events", [])
    traj.records = meta.get("records") or [fl._record(g, 0.0, mode) for g in snaps]
    return traj


def write_geometry(geom: GeometrySnapshot, path, provenance: dict | None = None):
    atomic_write(path, geom.to_json() + "\n")
    if provenance is not None:
        atomic_write(Path(path).with_suffix(".provenance.json"), dumps(provenance))


def read_geometry(path) -> GeometrySnapshot:
    return GeometrySnapshot.from_json(Path(path).read_text())


# ----------------------------------------------------------------------
# SVG


def _svg_points(geom: GeometrySnapshot) -> np.ndarray:
    return geom.closed_curve()


def emit_svg(source, path=None, every: int = 1, overlay=None, width: int = 600) -> str:
    """Render snapshots as SVG, one closed path per snapshot.

    Parameters
    ----------
    source : GeometrySnapshot, FlowTrajectory or list of snapshots
    every : int
        Keep every ``every``-th snapshot; the last one is always drawn.
    overlay : (center, radius), optional
        Circle drawn on top, e.g. a fitted collapse circle.

    Returns the SVG text, also written to ``path`` when given.

    Raises
    ------
    EmptyInput
    """
    if isinstance(source, GeometrySnapshot):
        snaps = [source]
    elif isinstance(source, fl.FlowTrajectory):
        snaps = list(source.snapshots)
    else:
        snaps = list(source)
    if not snaps:
        raise EmptyInput("nothing to draw")
    keep = snaps[:: max(1, int(every))]
    if keep[-1] is not snaps[-1]:
        keep.append(snaps[-1])
    curves = [_svg_points(g) for g in keep]
    allp = np.vstack(curves)
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    if overlay is not None:
        c, R = np.asarray(overlay[0], float), float(overlay[1])
        lo, hi = np.minimum(lo, c - R), np.maximum(hi, c + R)
    span = np.maximum(hi - lo, 1e-12)
    margin = 0.1 * span
    x0, y0 = lo - margin
    w, h = span + 2 * margin
    height = int(round(width * h / w))
    stroke = 0.002 * max(w, h)

    def tr(p):
        # SVG's y axis points down
        return p[:, 0], (y0 + h) - (p[:, 1] - y0)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="{x0:.6f} {y0:.6f} {w:.6f} {h:.6f}">'
    ]
    for k, p in enumerate(curves):
        xs, ys = tr(p)
        d = "M" + " L".join(f"{a:.6f} {b:.6f}" for a, b in zip(xs, ys)) + " Z"
        out.append(f'<path d="{d}" fill="none" stroke="black" stroke-width="{stroke:.6f}" data-time="{keep[k].time:.9g}"/>')
    if overlay is not None:
        cx, cy = tr(np.asarray(overlay[0], float)[None, :])
        out.append(
            f'<circle cx="{cx[0]:.6f}" cy="{cy[0]:.6f}" r="{float(overlay[1]):.6f}" fill="none" '
            f'stroke="red" stroke-width="{stroke:.6f}"/>'
        )
    out.append("</svg>")
    text = "\n".join(out) + "\n"
    if path is not None:
        atomic_write(path, text)
    return text


# ----------------------------------------------------------------------
# pipeline pieces


def build_initial(cfg: ExperimentConfig):
    """Construct the unperturbed initial data; returns (geometry, provenance, extra)."""
    kind = cfg.get("initial", "kind")
    n_vertices = cfg.getint("initial", "n_vertices")
    radius = cfg.getfloat("initial", "radius")
    if kind in ("circle", "circle_pair"):
        g = circle(radius, n_vertices)
        prov = {"kind": kind, "radius": radius}
        extra = circle(cfg.getfloat("initial", "outer_radius"), n_vertices) if kind == "circle_pair" else None
        return g, prov, extra
    if kind == "sphere":
        return sphere_profile(radius, n_vertices), {"kind": kind, "radius": radius}, None
    if kind == "file":
        g = read_geometry(cfg.get("initial", "path"))
        return g, {"kind": "file", "path": cfg.get("initial", "path")}, None
    spec = ShrinkerSpec(
        kind=kind,
        n=cfg.getint("initial", "n"),
        p=cfg.getint("initial", "p"),
        q=cfg.getint("initial", "q"),
        n_vertices=n_vertices,
        tol=cfg.getfloat("initial", "tol"),
    )
    res = make_shrinker(spec)
    prov = shooting_provenance(spec, res)
    return res.geometry, prov, None


def shooting_provenance(spec: ShrinkerSpec, res) -> dict:
    return {
        "kind": spec.kind,
        "spec": {"n": spec.n, "p": spec.p, "q": spec.q, "n_vertices": spec.n_vertices, "tol": spec.tol},
        "shooting_parameter": res.shooting_parameter,
        "closure_error": res.closure_error,
        "residual": res.residual,
        "info": res.info,
        "version": __version__,
    }


def self_adjointness_error(L: spectral.LinearizedOperator, rng, n_probes: int = 3) -> float:
    """Relative asymmetry ``|<u, Lv> - <Lu, v>| / (|u| |Lv|)`` over random probes."""
    worst = 0.0
    n = L.weight.shape[0]
    for _ in range(n_probes):
        u, v = rng.standard_normal(n), rng.standard_normal(n)
        Lu, Lv = L.apply(u), L.apply(v)
        a, b = L.inner(u, Lv), L.inner(Lu, v)
        scale = math.sqrt(L.inner(u, u) * L.inner(Lv, Lv))
        worst = max(worst, abs(a - b) / scale)
    return worst


def flow_config(cfg: ExperimentConfig, initial: GeometrySnapshot, mode=None, t_max=None) -> fl.FlowConfig:
    return fl.FlowConfig(
        mode=mode or cfg.get("flow", "mode"),
        initial=initial,
        t_max=t_max if t_max is not None else cfg.getfloat("flow", "t_max"),
        cfl=cfg.getfloat("flow", "cfl"),
        remesh_every=cfg.getint("flow", "remesh_every"),
        a_max=cfg.getfloat("flow", "a_max"),
        output_dt=cfg.getfloat("flow", "output_dt"),
        output_growth=cfg.getfloat("flow", "output_growth"),
        monitor=cfg.getfloat("flow", "monitor"),
        dt_max=cfg.getfloat("flow", "dt_max"),
        t_start=cfg.getfloat("flow", "t_start"),
    )


def perturbed_initial(cfg: ExperimentConfig, shrinker: GeometrySnapshot, results: dict, artifacts: dict, out: Path):
    """Eigenfunction, amplitude search, perturbation and the genericity gate.

    Raises
    ------
    AbortNotGeneric
        The perturbed hypersurface is neither rescaled mean convex nor concave.
    """
    fsrc = cfg.get("perturbation", "f")
    if fsrc == "none":
        return shrinker
    n = shrinker.n_vertices
    if fsrc == "eigenfunction":
        L = spectral.assemble_L(shrinker)
        ep = spectral.first_eigenpair(L)
        rng = np.random.default_rng(cfg.getint("experiment", "seed"))
        results["self_adjoint_error"] = self_adjointness_error(L, rng)
        results["eigen"] = {"mu1": ep.eigenvalue, "residual": ep.residual}
        atomic_write(out / "eigens.json", dumps({"mu1": ep.eigenvalue, "phi1": ep.eigenfunction, "residual": ep.residual}))
        artifacts["eigens"] = "eigens.json"
        f = ep.eigenfunction
    elif fsrc == "constant":
        f = np.ones(n)
    else:
        f = np.asarray(json.loads(Path(cfg.get("perturbation", "path")).read_text()), dtype=float)
        if f.shape != (n,):
            raise ConfigError(f"perturbation file holds {f.size} values for {n} vertices")
    if np.any(f <= 0.0):
        raise ConfigError("perturbation function f must be positive")
    amp = cfg.get("perturbation", "amplitude")
    if amp == "auto":
        sign = -1 if cfg.get("perturbation", "direction") == "inward" else 1
        found = spectral.search_amplitude(shrinker, f, sign, min_margin=cfg.getfloat("perturbation", "min_margin"))
        if found is None:
            raise AbortNotGeneric("no amplitude gives a rescaled mean convex or concave perturbation")
        s, g, cls = found
    else:
        s = float(amp)
        g = spectral.perturb(spectral.PerturbationSpec(f, s, shrinker))
        cls = spectral.classify_perturbation(g)
    results["perturbation"] = {"s": s, "label": cls.label, "margin": cls.margin, "min_Htilde": cls.min_Htilde, "max_Htilde": cls.max_Htilde}
    if cls.label == "neither":
        raise AbortNotGeneric(f"perturbation with s={s} is neither rescaled mean convex nor concave")
    return g


# ----------------------------------------------------------------------
# checks


@dataclass
class Check:
    passed: bool
    value: object = None
    threshold: object = None
    note: str = ""

    def to_dict(self):
        return {"passed": bool(self.passed), "value": self.value, "threshold": self.threshold, "note": self.note}


@dataclass
class RunManifest:
    name: str
    config_hash: str
    version: str
    config: dict
    artifacts: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks.values())

    def to_dict(self):
        return {
            "name": self.name,
            "config_hash": self.config_hash,
            "version": self.version,
            "config": self.config,
            "artifacts": self.artifacts,
            "checks": self.checks,
            "results": self.results,
            "passed": self.passed,
        }

    @classmethod
    def load(cls, path) -> "RunManifest":
        d = json.loads(Path(path).read_text())
        return cls(d["name"], d["config_hash"], d["version"], d["config"], d["artifacts"], d["checks"], d["results"])


def _close(value, target, tol):
    return value is not None and abs(value - target) <= tol


def evaluate_checks(expect: dict, results: dict) -> dict:
    """Turn ``[expect]`` entries into checks against the collected results."""
    checks = {}
    get = results.get
    term = get("termination")
    if "termination" in expect:
        checks["termination"] = Check(term == expect["termination"], term, expect["termination"])
    if "singular_time" in expect:
        tol = float(expect.get("singular_time_tol", 1e-3))
        T = get("singular_time")
        checks["singular_time"] = Check(_close(T, float(expect["singular_time"]), tol), T, f"{expect['singular_time']} +- {tol}")
    if "transported_singular_time" in expect:
        tol = float(expect.get("singular_time_tol", 1e-3))
        T = get("transported", {}).get("singular_time")
        checks["transported_singular_time"] = Check(
            _close(T, float(expect["transported_singular_time"]), tol), T, f"{expect['transported_singular_time']} +- {tol}"
        )
    sing = get("singularity") or {}
    if "tangent_type" in expect:
        allowed = expect["tangent_type"].split("|")
        checks["tangent_type"] = Check(sing.get("tangent_type") in allowed, sing.get("tangent_type"), expect["tangent_type"])
    if "collapse_side" in expect:
        checks["collapse_side"] = Check(sing.get("collapse_side") == expect["collapse_side"], sing.get("collapse_side"), expect["collapse_side"])
    if "decay_exponent" in expect:
        tol = float(expect.get("decay_exponent_tol", 0.05))
        a = sing.get("decay_exponent")
        checks["decay_exponent"] = Check(_close(a, float(expect["decay_exponent"]), tol), a, f"{expect['decay_exponent']} +- {tol}")
    if "fit_residual_max" in expect:
        r = sing.get("fit_residual")
        checks["fit_residual"] = Check(r is not None and r <= float(expect["fit_residual_max"]), r, expect["fit_residual_max"])
    if "transport_agrees" in expect:
        tr = get("transported", {}).get("singularity") or {}
        same = (tr.get("tangent_type"), tr.get("collapse_side")) == (sing.get("tangent_type"), sing.get("collapse_side"))
        checks["transport_agrees"] = Check(same, [tr.get("tangent_type"), tr.get("collapse_side")], [sing.get("tangent_type"), sing.get("collapse_side")])
    if "sign_preserved" in expect:
        sp = get("sign_preservation") or {}
        checks["sign_preserved"] = Check(sp.get("passed") is True, sp.get("violations"), 0, sp.get("initial_label", ""))
    if "delta_monotone_tol" in expect:
        nc = get("noncollapse") or {}
        tol = float(expect["delta_monotone_tol"])
        worst = nc.get("min_ratio_to_initial")
        checks["delta_monotone"] = Check(worst is not None and worst >= 1.0 - tol, worst, f">= 1 - {tol}")
    if "delta_closed_form_rtol" in expect:
        nc = get("noncollapse") or {}
        err = nc.get("circle_closed_form_rel_error")
        tol = float(expect["delta_closed_form_rtol"])
        checks["delta_closed_form"] = Check(err is not None and err <= tol, err, tol)
    if "nested" in expect:
        ns = get("nestedness") or {}
        ok = ns.get("direction") == expect["nested"] and ns.get("violations") == 0
        checks["nested"] = Check(ok, ns.get("violations"), 0, ns.get("direction", ""))
    if "spatial_order_min" in expect or "temporal_order_min" in expect:
        ids = get("identities") or []
        so = [o for w in ids for o in w["spatial_order"].values()]
        to = [o for w in ids for o in w["temporal_order"].values()]
        if "spatial_order_min" in expect:
            m = float(expect["spatial_order_min"])
            checks["spatial_order"] = Check(bool(so) and min(so) >= m, min(so) if so else None, m)
        if "temporal_order_min" in expect:
            m = float(expect["temporal_order_min"])
            checks["temporal_order"] = Check(bool(to) and min(to) >= m, min(to) if to else None, m)
    if "isoperimetric_decreasing" in expect:
        iso = get("isoperimetric") or {}
        ok = iso.get("monotone_nonincreasing") is True and iso.get("final", 0) < iso.get("initial", 0)
        checks["isoperimetric_decreasing"] = Check(ok, [iso.get("initial"), iso.get("final")], "monotone, final < initial")
    if "avoidance_tol" in expect:
        av = get("avoidance") or {}
        checks["avoidance"] = Check(av.get("passed") is True, av.get("min_margin"), f">= -{expect['avoidance_tol']}")
    if "avoidance_closed_form_tol" in expect:
        av = get("avoidance") or {}
        err = av.get("closed_form_max_error")
        tol = float(expect["avoidance_closed_form_tol"])
        checks["avoidance_closed_form"] = Check(err is not None and err <= tol, err, tol)
    if "identity_exact_tol" in expect:
        e = get("identity_max_relative_error")
        tol = float(expect["identity_exact_tol"])
        checks["identity_exact"] = Check(e is not None and e <= tol, e, tol)
    if "self_adjoint_tol" in expect:
        e = get("self_adjoint_error")
        tol = float(expect["self_adjoint_tol"])
        checks["self_adjoint"] = Check(e is not None and e <= tol, e, tol)
    return {k: v.to_dict() for k, v in checks.items()}


# ----------------------------------------------------------------------
# diagnostics stage


def _noncollapse_stage(traj, every, results, out, artifacts, circle_radius=None):
    times, reps = diag.delta_series(traj, every=every)
    signed = np.array([r.sign * r.delta_in for r in reps])
    rows = [(r.time, r.delta_in, r.delta_out, r.min_Ztilde, r.sign) for r in reps]
    write_csv(out / "delta.csv", ("time", "delta_in", "delta_out", "min_Ztilde", "sign"), rows)
    artifacts["delta"] = "delta.csv"
    d_in = np.array([r.delta_in for r in reps])
    nc = {
        "delta_in_initial": float(d_in[0]),
        "delta_in_min": float(d_in.min()),
        "min_ratio_to_initial": float(np.min(d_in / d_in[0])),
        "min_Ztilde": float(min(r.min_Ztilde for r in reps)),
        "pinching_ratio_max": float(max(diag.pinching_check(g, r).ratio for g, r in zip(traj.snapshots[::every], reps))),
    }
    if circle_radius is not None:
        # delta(t) = (2 - r0^2) e^t / 2 for the RMCF circle family
        exact = (2.0 - circle_radius**2) * np.exp(times) / 2.0
        nc["circle_closed_form_rel_error"] = float(np.max(np.abs(signed - exact) / np.abs(exact)))
    results["noncollapse"] = nc


def _isoperimetric_stage(traj):
    iso = np.array([isoperimetric_ratio(g) for g in traj.snapshots])
    return {
        "initial": float(iso[0]),
        "final": float(iso[-1]),
        "monotone_nonincreasing": bool(np.all(np.diff(iso) <= 0.0)),
        "max_increase": float(max(0.0, np.max(np.diff(iso)))) if len(iso) > 1 else 0.0,
    }


def _identity_stage(cfg, traj, results, out, artifacts):
    fractions = cfg.getlist("diagnostics", "identities")
    if not fractions:
        return
    levels = tuple(cfg.getlist("diagnostics", "identity_levels", int))
    t0, t1 = traj.snapshots[0].time, traj.snapshots[-1].time
    windows = []
    rows = []
    for frac in fractions:
        target = t0 + frac * (t1 - t0)
        if len(levels) == 1:
            g = traj.snapshots[int(np.argmin(np.abs(traj.times - target)))]
            g = fourier_resample(g, levels[0])
            errs = diag.identity_errors(g)
            windows.append({"time": g.time, "levels": list(levels), "relative_errors": errs, "spatial_order": {}, "temporal_order": {}})
            rows.extend((g.time, name, levels[0], errs[name], "", "") for name in diag.IDENTITIES)
            continue
        rep = diag.verify_evolution_identities(traj, levels=levels, time=target)
        k = int(np.argmin(np.abs(traj.times - target)))
        tk = traj.snapshots[k].time
        windows.append(
            {
                "time": tk,
                "levels": rep.levels,
                "dts": rep.dts,
                "spatial_errors": rep.spatial_errors,
                "temporal_errors": rep.temporal_errors,
                "spatial_order": rep.spatial_order,
                "temporal_order": rep.temporal_order,
            }
        )
        for row in rep.rows():
            for lev, e in zip(rep.levels, row["spatial_errors"]):
                rows.append((tk, row["identity"], lev, e, "spatial", row["spatial_order"]))
            for dt, e in zip(rep.dts, row["temporal_errors"]):
                rows.append((tk, row["identity"], dt, e, "temporal", row["temporal_order"]))
    write_csv(out / "identities.csv", ("time", "identity", "level_or_dt", "error", "kind", "order"), rows)
    artifacts["identities"] = "identities.csv"
    results["identities"] = windows
    if len(levels) == 1:
        worst = max(max(w["relative_errors"].values()) for w in windows)
        results["identity_max_relative_error"] = worst


def run_experiment(config: ExperimentConfig) -> RunManifest:
    """construct -> eigens -> perturb -> classify -> flow -> diagnose, then write the manifest.

    Raises
    ------
    AbortNotGeneric
        The perturbed initial data fails the convex/concave gate.
    """
    cfg = config
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    artifacts, results = {}, {}
    atomic_write(out / "config.ini", cfg.to_ini())
    artifacts["config"] = "config.ini"

    base, prov, partner = build_initial(cfg)
    write_geometry(base, out / "initial.json", prov)
    artifacts["initial"] = "initial.json"
    results["initial"] = {k: prov[k] for k in ("kind", "residual", "shooting_parameter") if k in prov}
    start = perturbed_initial(cfg, base, results, artifacts, out)
    if start is not base:
        write_geometry(start, out / "perturbed.json")
        artifacts["perturbed"] = "perturbed.json"

    traj = fl.run(flow_config(cfg, start))
    write_trajectory(traj, out / "trajectory.jsonl", out / "records.csv")
    artifacts.update(trajectory="trajectory.jsonl", trajectory_meta="trajectory.meta.json", records="records.csv")
    results["termination"] = traj.termination
    results["singular_time"] = traj.singular_time
    results["n_steps"] = len(traj.step_times)
    results["n_snapshots"] = len(traj)
    diag_cfg = "diagnostics"

    if partner is not None:
        traj_b = fl.run(flow_config(cfg, partner, t_max=cfg.getfloat("flow", "t_max")))
        write_trajectory(traj_b, out / "partner.jsonl", out / "partner_records.csv")
        artifacts.update(partner="partner.jsonl", partner_meta="partner.meta.json", partner_records="partner_records.csv")
        rep = diag.avoidance_check(traj, traj_b, tol=float(cfg.expectations.get("avoidance_tol", 1e-3)))
        r1, r2 = cfg.getfloat("initial", "radius"), cfg.getfloat("initial", "outer_radius")
        s = rep.times - rep.times[0]
        before = 1.0 - 2.0 * s / r1**2 > 0.0
        exact = np.sqrt(r2**2 - 2.0 * s) - np.sqrt(np.where(before, r1**2 - 2.0 * s, 0.0))
        err = np.abs(rep.distances - exact)
        write_csv(out / "avoidance.csv", ("time", "distance", "closed_form"), zip(rep.times, rep.distances, exact))
        artifacts["avoidance"] = "avoidance.csv"
        results["avoidance"] = {
            "passed": rep.passed,
            "d0": rep.d0,
            "min_margin": rep.min_margin,
            "n_times": int(len(rep.times)),
            # the closed form is compared strictly before the exact inner collapse
            "closed_form_max_error": float(np.max(err[before])) if np.any(before) else None,
            "compared_until": float(rep.times[before][-1]) if np.any(before) else None,
        }

    sp = diag.sign_preservation(traj)
    results["sign_preservation"] = {
        "initial_label": sp.initial_label,
        "violations": sp.violations,
        "passed": sp.passed,
        "min_Htilde": float(np.min(sp.min_Htilde)),
        "max_Htilde": float(np.max(sp.max_Htilde)),
    }
    every = cfg.getint(diag_cfg, "noncollapse_every")
    if every > 0 and sp.passed:
        radius = cfg.getfloat("initial", "radius") if cfg.get("initial", "kind") == "circle" and traj.mode == "RMCF" else None
        _noncollapse_stage(traj, every, results, out, artifacts, circle_radius=radius)
    if cfg.getbool(diag_cfg, "nestedness"):
        direction = "inward" if sp.initial_label == "rescaled_mean_convex" else "outward"
        ns = diag.nestedness_check(traj, direction)
        results["nestedness"] = {"direction": direction, "pairs": ns.pairs_checked, "violations": ns.violations}
    if cfg.getbool(diag_cfg, "isoperimetric"):
        results["isoperimetric"] = _isoperimetric_stage(traj)
        companion_t = cfg.getfloat(diag_cfg, "mcf_companion_t_max")
        if companion_t:
            comp = fl.run(flow_config(cfg, start, mode="MCF", t_max=companion_t))
            write_trajectory(comp, out / "companion.jsonl", out / "companion_records.csv")
            artifacts.update(companion="companion.jsonl", companion_meta="companion.meta.json", companion_records="companion_records.csv")
            iso = _isoperimetric_stage(comp)
            iso["termination"] = comp.termination
            iso["singular_time"] = comp.singular_time
            results["companion_mcf"] = iso
    overlay = None
    if cfg.getbool(diag_cfg, "classify"):
        sing = diag.detect_and_classify(traj)
        results["singularity"] = sing.to_dict()
        if sing.template == "loop" and sing.singular_point is not None and sing.fit_residual is not None:
            c, R, _ = diag.fit_circle(traj.snapshots[-1].closed_curve())
            overlay = (c, R)
        if cfg.getbool(diag_cfg, "transport") and traj.mode == "RMCF":
            m = fl.rmcf_to_mcf(traj)
            results["transported"] = {"singular_time": m.singular_time, "singularity": diag.detect_and_classify(m).to_dict()}
    _identity_stage(cfg, traj, results, out, artifacts)

    svg_every = cfg.getint(diag_cfg, "svg_every")
    if svg_every > 0:
        emit_svg(traj, out / "trajectory.svg", every=svg_every, overlay=overlay)
        artifacts["svg"] = "trajectory.svg"
    atomic_write(out / "results.json", dumps(results))
    artifacts["results"] = "results.json"

    checks = evaluate_checks(cfg.expectations, results)
    hashed = {}
    for key, rel in sorted(artifacts.items()):
        hashed[key] = {"path": rel, "sha256": hashlib.sha256((out / rel).read_bytes()).hexdigest()}
    manifest = RunManifest(cfg.name, cfg.hash, __version__, cfg.sections, hashed, checks, _jsonable(results))
    atomic_write(out / "manifest.json", dumps(manifest.to_dict()))
    return manifest


# ----------------------------------------------------------------------
# regression registry

REGISTRY_FILE = "registry.json"


def _registry_path(path=None) -> Path:
    if path is not None:
        return Path(path)
    return Path(str(resources.files("shrinkerlab") / "data" / REGISTRY_FILE))


def compute_registry_values() -> dict:
    """Recompute every registered constant; returns name -> (value, provenance)."""
    vals = {}
    torus = make_shrinker(ShrinkerSpec("angenent_torus", n_vertices=2048))
    vals["torus.r_out"] = (torus.info["r_out"], {"n_vertices": 2048, "source": "shooting"})
    vals["torus.r_in"] = (torus.info["r_in"], {"n_vertices": 2048, "source": "shooting"})
    vals["torus.residual"] = (torus.residual, {"n_vertices": 2048, "source": "max |Htilde|"})
    al = make_shrinker(ShrinkerSpec("abresch_langer", p=2, q=3, n_vertices=2048))
    vals["abresch_langer_2_3.radial_max"] = (al.info["radial_max"], {"n_vertices": 2048, "source": "shooting"})
    vals["abresch_langer_2_3.radial_min"] = (al.info["radial_min"], {"n_vertices": 2048, "source": "shooting"})
    vals["abresch_langer_2_3.residual"] = (al.residual, {"n_vertices": 2048, "source": "max |Htilde|"})
    for name, geom, n in (
        ("mu1.circle", make_shrinker(ShrinkerSpec("round", n=1, n_vertices=512)).geometry, 512),
        ("mu1.sphere", make_shrinker(ShrinkerSpec("round", n=2, n_vertices=513)).geometry, 513),
        ("mu1.torus", torus.geometry, 2048),
        ("mu1.abresch_langer_2_3", al.geometry, 2048),
    ):
        try:
            ep = spectral.first_eigenpair(spectral.assemble_L(geom))
        except ShrinkerLabError as exc:
            # recorded as missing, which the check reports as a failure
            vals[name] = (None, {"n_vertices": n, "error": f"{type(exc).__name__}: {exc}"})
            continue
        vals[name] = (ep.eigenvalue, {"n_vertices": n, "source": "inverse iteration"})
    return vals


# absolute tolerances; residual entries are upper bounds rather than targets
_REGISTRY_TOL = {
    "torus.r_out": 1e-9,
    "torus.r_in": 1e-9,
    "abresch_langer_2_3.radial_max": 1e-9,
    "abresch_langer_2_3.radial_min": 1e-9,
    "mu1.circle": 1e-8,
    "mu1.sphere": 1e-8,
    "mu1.torus": 1e-7,
    "mu1.abresch_langer_2_3": 1e-7,
}
_RESIDUAL_BOUND = 1e-6


def registry_freeze(path=None) -> dict:
    """Recompute and store the constants with tolerances and provenance."""
    vals = compute_registry_values()
    entries = {}
    for name, (value, prov) in sorted(vals.items()):
        if value is None:
            raise RegressionFailure(f"refusing to freeze {name}: {prov.get('error')}")
        if name.endswith(".residual"):
            if value > _RESIDUAL_BOUND:
                raise RegressionFailure(f"refusing to freeze {name} = {value:.3e} above {_RESIDUAL_BOUND:g}")
            entries[name] = {"value": value, "bound": _RESIDUAL_BOUND, "provenance": prov}
        else:
            entries[name] = {"value": value, "tol": _REGISTRY_TOL[name], "provenance": prov}
    data = {"version": __version__, "entries": entries}
    atomic_write(_registry_path(path), dumps(data))
    return data


def registry_check(path=None, values=None) -> dict:
    """Compare recomputed constants with the registry.

    Returns name -> {"expected", "actual", "passed"}.

    Raises
    ------
    RegressionFailure
        Any entry outside its tolerance (or above its residual bound).
    """
    data = json.loads(_registry_path(path).read_text())
    vals = values if values is not None else compute_registry_values()
    report = {}
    for name, entry in sorted(data["entries"].items()):
        actual = vals[name][0] if name in vals else None
        if actual is None:
            ok = False
        elif "bound" in entry:
            ok = actual <= entry["bound"]
        else:
            ok = abs(actual - entry["value"]) <= entry["tol"]
        report[name] = {"expected": entry["value"], "actual": actual, "passed": bool(ok)}
    bad = [k for k, v in report.items() if not v["passed"]]
    if bad:
        err = RegressionFailure("registry mismatch: " + ", ".join(bad))
        err.report = report
        raise err
    return report
