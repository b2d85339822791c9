"""Inverse-compositional point-set registration on max-pooled embeddings.

The Jacobian describes how the target's global feature moves when the
target is pushed by ``exp(-xi)``. It is computed once. Every iteration
re-embeds the warped source, solves ``J dxi ~= r`` and composes
``G <- exp(dxi) G``. The returned ``G`` maps the source onto the target.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import se3
from .aggregate import max_aggregate
from .lattice import interpolate, locate, spatial_jacobian, spatial_jacobian_channels
from .mlp import backward, forward, forward_cached
from .numeric import DEFAULT_RIDGE, pinv_apply

log = logging.getLogger(__name__)

JACOBIAN_MODES = ("approx", "canonical")


class RegistrationError(RuntimeError):
    pass


class LutEmbedder:
    """Per-point embedding by trilinear lookup in a table."""

    def __init__(self, lut):
        self.lut = lut

    @property
    def k(self):
        return self.lut.k

    def embed(self, points):
        return interpolate(self.lut, locate(self.lut.lattice, points))

    def spatial_jacobian(self, points):
        return spatial_jacobian(self.lut, locate(self.lut.lattice, points))

    def channel_gradients(self, points, channels):
        """d z[c_i] / d p_i for each (point, channel) pair, shape (n, 3)."""
        q = locate(self.lut.lattice, np.asarray(points).reshape(-1, 3))
        return spatial_jacobian_channels(self.lut, q, channels)


class MlpEmbedder:
    """Per-point embedding by evaluating the network directly."""

    def __init__(self, mlp):
        self.mlp = mlp.folded()

    @property
    def k(self):
        return self.mlp.out_dim

    def embed(self, points):
        return forward(self.mlp, points)

    def channel_gradients(self, points, channels):
        # one backward pass per requested channel
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty((len(points), 3))
        for i, (p, c) in enumerate(zip(points, channels)):
            _, cache = forward_cached(self.mlp, p[None])
            up = np.zeros((1, self.k))
            up[0, c] = 1.0
            _, dx = backward(self.mlp, p[None], up, cache)
            out[i] = dx[0]
        return out


def as_embedder(obj):
    if hasattr(obj, "embed"):
        return obj
    if hasattr(obj, "lattice"):
        return LutEmbedder(obj)
    return MlpEmbedder(obj)


def _points(cloud):
    return cloud.points if hasattr(cloud, "points") else np.asarray(cloud, dtype=np.float64)


def global_feature(embedder, cloud):
    return max_aggregate(as_embedder(embedder).embed(_points(cloud)))


def residual(embedder, g, source, target_feature):
    """Global feature of the warped source minus the target feature."""
    pts = _points(source)
    if len(pts) == 0:
        raise ValueError("source cloud is empty")
    a = max_aggregate(as_embedder(embedder).embed(se3.transform_points(g, pts))).a
    target = getattr(target_feature, "a", target_feature)
    if a.shape != np.shape(target):
        raise ValueError(f"feature width mismatch: {a.shape} vs {np.shape(target)}")
    return a - target


def approx_jacobian(embedder, target, t=1e-2):
    """Finite-difference Jacobian: column k is the change of the global
    feature under ``exp(-t T_k)`` divided by ``t``."""
    if not t > 0:
        raise ValueError("perturbation t must be positive")
    emb = as_embedder(embedder)
    pts = _points(target)
    a0 = max_aggregate(emb.embed(pts)).a
    jac = np.empty((a0.shape[0], 6))
    for k in range(6):
        xi = np.zeros(6)
        xi[k] = -t
        ak = max_aggregate(emb.embed(se3.transform_points(se3.exp(xi), pts))).a
        jac[:, k] = (ak - a0) / t
    return jac


def canonical_jacobian(embedder, target, feature=None):
    """Analytic Jacobian of the target's global feature.

    Row k uses only the point that won channel k of the max pool: its
    spatial gradient for that channel chained through the point Jacobian,
    negated because the target is perturbed by ``exp(-xi)``.
    """
    emb = as_embedder(embedder)
    pts = _points(target)
    if feature is None:
        feature = max_aggregate(emb.embed(pts))
    winners = pts[feature.argmax]
    grads = emb.channel_gradients(winners, np.arange(len(feature.argmax)))
    return -np.einsum("ki,kij->kj", grads, se3.point_jacobian(winners))


@dataclass
class RegistrationConfig:
    max_iters: int = 20
    tol: float = 1e-7
    jacobian_mode: str = "approx"
    t: float = 1e-2
    ridge: float = DEFAULT_RIDGE

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.t > 0:
            raise ValueError("perturbation t must be positive")
        if self.jacobian_mode not in JACOBIAN_MODES:
            raise ValueError(f"jacobian_mode must be one of {JACOBIAN_MODES}")


@dataclass
class RegistrationResult:
    g: np.ndarray
    residual_norms: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    final_residual: float = float("nan")


def register(embedder, source, target, cfg=None):
    """Estimate the rigid transform that maps ``source`` onto ``target``.

    ``residual_norms[i]`` is the residual norm before update ``i``;
    ``final_residual`` is measured at the returned pose.
    """
    cfg = cfg or RegistrationConfig()
    emb = as_embedder(embedder)
    src = _points(source)
    tgt = _points(target)
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("both clouds must be non-empty")

    feature = max_aggregate(emb.embed(tgt))
    if cfg.jacobian_mode == "canonical":
        jac = canonical_jacobian(emb, tgt, feature)
    else:
        jac = approx_jacobian(emb, tgt, cfg.t)
    if not np.all(np.isfinite(jac)):
        raise RegistrationError("Jacobian has non-finite entries")

    g = np.eye(4)
    result = RegistrationResult(g)
    for it in range(cfg.max_iters):
        r = residual(emb, g, src, feature)
        if not np.all(np.isfinite(r)):
            raise RegistrationError(f"non-finite residual at iteration {it}")
        result.residual_norms.append(float(np.linalg.norm(r)))
        dxi = pinv_apply(jac, r, cfg.ridge)
        if not np.all(np.isfinite(dxi)):
            raise RegistrationError(f"non-finite update at iteration {it}: {dxi}")
        g = se3.exp(dxi) @ g
        result.iterations = it + 1
        step = float(np.linalg.norm(dxi))
        log.debug("iter %d residual %.3e step %.3e", it, result.residual_norms[-1], step)
        if step < cfg.tol:
            result.converged = True
            break
    result.g = g
    result.final_residual = float(np.linalg.norm(residual(emb, g, src, feature)))
    return result
