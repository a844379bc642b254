"""Synthetic bathymetry and lawnmower multibeam surveys cut into submaps."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import cloud, geom

KINDS = ("gaussian-bump", "ridge", "fractal-octave")
_WAVES_PER_OCTAVE = 24


class EmptySurvey(ValueError):
    pass


@dataclass
class Component:
    kind: str
    amplitude: float
    length_scale: float
    x: float = 0.0
    y: float = 0.0
    orientation: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown component kind {self.kind!r}")
        if self.length_scale <= 0:
            raise ValueError("length_scale must be positive")

    def evaluate(self, x, y):
        if self.kind == "gaussian-bump":
            r2 = (x - self.x) ** 2 + (y - self.y) ** 2
            return self.amplitude * np.exp(-0.5 * r2 / self.length_scale**2)
        if self.kind == "ridge":
            # perpendicular distance to the axis through (x, y) along `orientation`
            d = -(x - self.x) * np.sin(self.orientation) + (y - self.y) * np.cos(self.orientation)
            return self.amplitude * np.exp(-0.5 * d**2 / self.length_scale**2)
        # one octave of random Fourier features: a stationary Gaussian-process-like draw
        rng = np.random.default_rng(self.seed)
        angles = rng.uniform(0.0, 2.0 * np.pi, _WAVES_PER_OCTAVE)
        phases = rng.uniform(0.0, 2.0 * np.pi, _WAVES_PER_OCTAVE)
        k = 2.0 * np.pi / self.length_scale
        out = np.zeros(np.broadcast(x, y).shape)
        for a, p in zip(angles, phases):
            out = out + np.cos(k * (np.cos(a) * x + np.sin(a) * y) + p)
        return self.amplitude * np.sqrt(2.0 / _WAVES_PER_OCTAVE) * out


@dataclass
class TerrainField:
    seed: int = 0
    components: list = field(default_factory=list)
    base_depth: float = -50.0

    def height(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.full(np.broadcast(x, y).shape, float(self.base_depth))
        for c in self.components:
            out = out + c.evaluate(x, y)
        return out if out.ndim else float(out)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "base_depth": self.base_depth,
                "components": [asdict(c) for c in self.components]}

    @classmethod
    def from_dict(cls, d: dict) -> "TerrainField":
        return cls(d["seed"], [Component(**c) for c in d["components"]], d["base_depth"])


def height(f: TerrainField, x, y):
    return f.height(x, y)


@dataclass
class SurveyPlan:
    n_lines: int = 4
    line_length: float = 150.0
    line_spacing: float = 12.0
    heading: float = 0.0
    speed: float = 1.5
    swath_width: float = 40.0
    ping_spacing: float = 1.5
    beams_per_ping: int = 24
    origin: tuple = (0.0, 0.0)
    beam_jitter: float = 0.0

    def __post_init__(self):
        if self.n_lines < 1 or self.beams_per_ping < 1:
            raise ValueError("need at least one line and one beam")
        for name in ("line_length", "line_spacing", "swath_width", "ping_spacing", "speed"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def overlapping(self) -> bool:
        return self.line_spacing < self.swath_width


@dataclass
class Survey:
    submaps: list
    poses: list
    line_of: list

    def __len__(self):
        return len(self.submaps)


def _line_pings(plan: SurveyPlan, line: int):
    h = plan.heading
    fwd = np.array([np.cos(h), np.sin(h)])
    left = np.array([-np.sin(h), np.cos(h)])
    start = np.asarray(plan.origin, dtype=float) + line * plan.line_spacing * left
    n = int(np.floor(plan.line_length / plan.ping_spacing + 1e-9))
    s = (np.arange(n) + 0.5) * plan.ping_spacing
    if line % 2 == 0:
        pos, yaw = start + s[:, None] * fwd, h
    else:
        pos, yaw = start + (plan.line_length - s)[:, None] * fwd, h + np.pi
    return pos, float(np.arctan2(np.sin(yaw), np.cos(yaw)))


def simulate_survey(terrain: TerrainField, plan: SurveyPlan, submap_length: float,
                    seed: int = 0, first_id: int = 0) -> Survey:
    """Lawnmower survey; each submap groups consecutive pings of one line.

    A trailing group shorter than the nominal count by more than one ping is
    dropped.  Submap points are in the world frame; each frame is the vehicle
    pose (z = 0) at the submap midpoint.
    """
    if submap_length <= plan.ping_spacing:
        raise ValueError("submap_length must exceed ping_spacing")
    per = max(1, int(round(submap_length / plan.ping_spacing)))
    rng = np.random.default_rng(seed)
    offsets = np.linspace(-plan.swath_width / 2, plan.swath_width / 2, plan.beams_per_ping)
    submaps, poses, line_of = [], [], []
    any_ping = False
    for line in range(plan.n_lines):
        pos, yaw = _line_pings(plan, line)
        if len(pos) == 0:
            continue
        any_ping = True
        across = np.array([-np.sin(yaw), np.cos(yaw)])
        for start in range(0, len(pos), per):
            chunk = pos[start:start + per]
            if len(chunk) < max(1, per - 1):
                continue
            xy = chunk[:, None, :] + offsets[None, :, None] * across
            xy = xy.reshape(-1, 2)
            if plan.beam_jitter > 0:
                xy = xy + rng.normal(scale=plan.beam_jitter, size=xy.shape)
            z = terrain.height(xy[:, 0], xy[:, 1])
            mid = 0.5 * (chunk[0] + chunk[-1])
            frame = geom.from_xy_yaw(mid[0], mid[1], yaw)
            sid = first_id + len(submaps)
            submaps.append(cloud.Submap(sid, np.column_stack([xy, z]), frame))
            poses.append(frame)
            line_of.append(line)
    if not any_ping or not submaps:
        raise EmptySurvey("survey plan produced no submaps")
    return Survey(submaps, poses, line_of)


def random_field(seed: int, extent=(0.0, 0.0, 150.0, 40.0), style: str = "mixed",
                 base_depth: float = -50.0) -> TerrainField:
    """Random terrain over ``extent = (xmin, ymin, xmax, ymax)``.

    Styles: flat, bumps, ridges, rough, mixed.  ``mixed`` draws a sparse
    combination so that one survey contains flat, ridged and rough submaps.
    """
    rng = np.random.default_rng(seed)
    x0, y0, x1, y1 = extent
    comps = []

    def place():
        return float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1))

    def add_bumps(n, amp=(1.0, 8.0), scale=(2.0, 8.0)):
        for _ in range(n):
            x, y = place()
            comps.append(Component("gaussian-bump", float(rng.uniform(*amp)) * rng.choice([-1, 1]),
                                   float(rng.uniform(*scale)), x, y))

    def add_ridges(n, amp=(1.0, 6.0), scale=(1.5, 5.0)):
        for _ in range(n):
            x, y = place()
            comps.append(Component("ridge", float(rng.uniform(*amp)), float(rng.uniform(*scale)),
                                   x, y, float(rng.uniform(0, np.pi))))

    def add_rough(n, amp=(0.3, 3.0), scale=(6.0, 30.0)):
        for _ in range(n):
            comps.append(Component("fractal-octave", float(rng.uniform(*amp)),
                                   float(rng.uniform(*scale)), seed=int(rng.integers(2**31))))

    area = max((x1 - x0) * (y1 - y0), 1.0)
    if style == "flat":
        pass
    elif style == "bumps":
        add_bumps(max(1, int(area / 400)))
    elif style == "ridges":
        add_ridges(max(1, int(area / 1500)))
    elif style == "rough":
        add_rough(3)
    elif style == "mixed":
        add_bumps(int(rng.integers(0, max(2, int(area / 800)))))
        add_ridges(int(rng.integers(0, max(2, int(area / 2000)))))
        if rng.random() < 0.5:
            add_rough(int(rng.integers(1, 3)), amp=(0.2, 4.0))
    else:
        raise ValueError(f"unknown terrain style {style!r}")
    return TerrainField(seed, comps, base_depth)


def survey_extent(plan: SurveyPlan, margin: float | None = None):
    """Axis-aligned box covering every beam of the plan."""
    margin = plan.swath_width / 2 if margin is None else margin
    corners = []
    for line in (0, plan.n_lines - 1):
        pos, _ = _line_pings(plan, line)
        corners.append(pos.min(axis=0))
        corners.append(pos.max(axis=0))
    c = np.array(corners)
    lo, hi = c.min(axis=0) - margin, c.max(axis=0) + margin
    return (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


def generate_corpus(n_submaps: int, seed: int, plan: SurveyPlan | None = None,
                    submap_length: float = 15.0, styles=("mixed", "flat", "ridges", "bumps", "rough")):
    """Concatenate surveys over random fields until ``n_submaps`` submaps exist.

    Returns the submaps (ids ``0..n-1``) and the terrain fields used.
    """
    plan = plan or SurveyPlan(n_lines=1)
    out, fields = [], []
    k = 0
    while len(out) < n_submaps:
        style = styles[k % len(styles)]
        f = random_field(seed * 100003 + k, survey_extent(plan), style)
        sv = simulate_survey(f, plan, submap_length, seed=seed + k, first_id=len(out))
        fields.append(f)
        out.extend(sv.submaps[: n_submaps - len(out)])
        k += 1
    return out, fields


def write_manifest(path, terrain: TerrainField | list, plan: SurveyPlan, submap_length: float,
                   survey: Survey, submap_files, extra: dict | None = None) -> dict:
    fields = terrain if isinstance(terrain, list) else [terrain]
    doc = {
        "format": "bathykl-survey v1",
        "fields": [f.to_dict() for f in fields],
        "plan": asdict(plan),
        "submap_length": submap_length,
        "submaps": [
            {"id": s.id, "file": str(fn), "line": int(ln), "pose": geom.to_pose7(p).tolist()}
            for s, fn, ln, p in zip(survey.submaps, submap_files, survey.line_of, survey.poses)
        ],
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return doc


def read_manifest(path):
    """Load a survey manifest; returns ``(doc, Survey)`` with submap paths resolved."""
    path = Path(path)
    doc = json.loads(path.read_text())
    submaps, poses, lines = [], [], []
    for rec in doc["submaps"]:
        f = Path(rec["file"])
        if not f.is_absolute():
            f = path.parent / f
        s = cloud.read_submap(f, rec["id"])
        s.id = rec["id"]
        submaps.append(s)
        poses.append(geom.from_pose7(rec["pose"]))
        lines.append(rec.get("line", 0))
    return doc, Survey(submaps, poses, lines)
