"""Wall-clock timing of embedding and Jacobian computation, MLP vs LUTI.

Each method is run ``warmup`` times untimed, then ``repeats`` times timed
with ``time.perf_counter``. Both the median and the mean are reported.
"""

import csv
import io
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .lattice import Lattice3, interpolate, locate
from .mlp import Mlp, forward, tabulate
from .registration import LutEmbedder, MlpEmbedder, approx_jacobian, canonical_jacobian

METHODS = (
    "mlp_forward",
    "luti_forward",
    "approx_jacobian_mlp",
    "approx_jacobian_luti",
    "canonical_jacobian_mlp",
    "canonical_jacobian_luti",
)
# numerator / denominator of each reported speedup
RATIOS = {
    "forward": ("mlp_forward", "luti_forward"),
    "approx_jacobian": ("approx_jacobian_mlp", "approx_jacobian_luti"),
    "canonical_jacobian": ("canonical_jacobian_mlp", "canonical_jacobian_luti"),
}
FIELDS = ("method", "d", "k", "points", "repeats", "median_s", "mean_s", "min_s")


@dataclass
class BenchRow:
    method: str
    d: int
    k: int
    points: int
    repeats: int
    median_s: float
    mean_s: float
    min_s: float


def time_call(fn, repeats, warmup=2):
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def _cases(mlp, lut, pts):
    mlp_emb, lut_emb = MlpEmbedder(mlp), LutEmbedder(lut)
    return {
        "mlp_forward": lambda: forward(mlp_emb.mlp, pts),
        "luti_forward": lambda: interpolate(lut, locate(lut.lattice, pts)),
        "approx_jacobian_mlp": lambda: approx_jacobian(mlp_emb, pts),
        "approx_jacobian_luti": lambda: approx_jacobian(lut_emb, pts),
        "canonical_jacobian_mlp": lambda: canonical_jacobian(mlp_emb, pts),
        "canonical_jacobian_luti": lambda: canonical_jacobian(lut_emb, pts),
    }


def run_bench(ds=(8, 16), k=128, points=1000, repeats=30, hidden=(64, 64), seed=0, methods=METHODS, warmup=2):
    """Time every method at every lattice size; returns a list of BenchRow."""
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    if points < 1:
        raise ValueError("points must be >= 1")
    rng = np.random.default_rng(seed)
    mlp = Mlp.init((3,) + tuple(hidden) + (k,), rng)
    pts = rng.uniform(-1.0, 1.0, (points, 3))
    rows = []
    for d in ds:
        cases = _cases(mlp, tabulate(mlp, Lattice3(d)), pts)
        for name in methods:
            t = time_call(cases[name], repeats, warmup)
            rows.append(BenchRow(name, d, k, points, repeats, statistics.median(t), statistics.fmean(t), min(t)))
    return rows


def speedups(rows, stat="median_s"):
    """``{(ratio_name, d): mlp_time / luti_time}`` for every complete pair."""
    by = {(r.method, r.d): getattr(r, stat) for r in rows}
    out = {}
    for name, (slow, fast) in RATIOS.items():
        for (method, d), val in by.items():
            if method == slow and (fast, d) in by:
                out[(name, d)] = val / by[(fast, d)]
    return out


def to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIELDS)
    for r in rows:
        w.writerow([getattr(r, f) if not f.endswith("_s") else f"{getattr(r, f):.9f}" for f in FIELDS])
    return buf.getvalue()


def to_text(rows):
    header = ["method", "d", "k", "points", "median ms", "mean ms"]
    body = [[r.method, str(r.d), str(r.k), str(r.points), f"{r.median_s * 1e3:.3f}", f"{r.mean_s * 1e3:.3f}"] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in [header] + body]
    for (name, d), ratio in sorted(speedups(rows).items()):
        lines.append(f"speedup {name} d={d}: {ratio:.1f}x")
    return "\n".join(lines) + "\n"
