"""Per-criterion outcomes collected by the acceptance tests for the terminal summary."""

import functools
import time

TITLES = {
    1: "gradient correctness",
    2: "permutation invariance and positive definiteness",
    3: "KL closed form",
    4: "MC flat-plane oracle",
    5: "MC anisotropy oracle",
    6: "training convergence",
    7: "SLAM directional reproduction",
    8: "prediction runtime",
    9: "GICP exactness",
    10: "determinism",
}
RESULTS = {}


def criterion(n):
    """Record PASS/FAIL (with the failure message) for criterion ``n``."""
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            t = time.perf_counter()
            try:
                detail = fn(*args, **kwargs) or ""
            except BaseException as exc:
                msg = str(exc).strip().splitlines()
                RESULTS[n] = (False, f"{type(exc).__name__}: {msg[0] if msg else ''}", time.perf_counter() - t)
                raise
            RESULTS[n] = (True, detail, time.perf_counter() - t)
        return wrapper
    return deco


def summary_lines():
    out = []
    for n, title in TITLES.items():
        if n not in RESULTS:
            continue
        ok, detail, secs = RESULTS[n]
        out.append(f"criterion {n:2d} {'PASS' if ok else 'FAIL'} {title} ({secs:.0f} s) {detail}")
    return out
