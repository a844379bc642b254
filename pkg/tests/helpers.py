"""Synthetic submaps shared by the tests."""

import numpy as np

from bathykl import synthworld as sw
from bathykl.cloud import Submap


def grid_submap(height, nx=24, ny=10, spacing=1.5, sid=0, x0=0.0, y0=0.0):
    """Regular grid of ``nx * ny`` samples of ``height(x, y)``."""
    xs = x0 + np.arange(nx) * spacing
    ys = y0 + np.arange(ny) * spacing
    xx, yy = np.meshgrid(xs, ys)
    z = height(xx, yy)
    return Submap(sid, np.column_stack([xx.ravel(), yy.ravel(), np.broadcast_to(z, xx.shape).ravel()]))


def flat_submap(sid=0, nx=24, ny=10, spacing=1.5):
    return grid_submap(lambda x, y: -50.0 + 0 * x, nx, ny, spacing, sid)


def bumpy_field(seed=0, n=6, amp=2.0, scale=6.0, extent=40.0):
    rng = np.random.default_rng(seed)
    comps = [sw.Component("gaussian-bump", float(rng.uniform(0.6, 1) * amp * rng.choice([-1, 1])),
                          float(rng.uniform(0.7, 1.2) * scale), float(rng.uniform(0, extent)),
                          float(rng.uniform(-extent / 2, extent / 2))) for _ in range(n)]
    return sw.TerrainField(seed, comps, -50.0)


def featured_submap(sid=0, seed=0):
    """A 40 m square survey submap over smooth bumps: every planar shift is observable."""
    plan = sw.SurveyPlan(n_lines=1, line_length=40.5, beams_per_ping=28)
    s = sw.simulate_survey(bumpy_field(seed), plan, 40.5).submaps[0]
    s.id = sid
    return s


def ridge_submap(orientation=np.pi / 2, sid=0):
    """Submap crossed by a single ridge whose crest runs along ``orientation``."""
    f = sw.TerrainField(0, [sw.Component("ridge", 6.0, 4.0, 7.5, 0.0, orientation)], -50.0)
    plan = sw.SurveyPlan(n_lines=1, line_length=15.0)
    s = sw.simulate_survey(f, plan, 15.0).submaps[0]
    s.id = sid
    return s
