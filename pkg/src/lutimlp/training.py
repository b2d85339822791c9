"""Training the point-set classifier with MLP, LUT and LUTI embeddings.

Variants (embedding used at test time):

``mlp``               the network itself
``lut_mlp_approx``    trained ``mlp``, then nearest-node lookup in its table
``luti_mlp_approx``   trained ``mlp``, then trilinear lookup in its table
``lut_mlp_e2e``       network evaluated at the nearest node, trained through it
``luti_mlp_e2e``      network evaluated at the 8 cell corners and blended
``lut_direct``        free table, nearest-node lookup
``luti_direct``       free table, trilinear lookup

In the ``*_e2e`` variants the network is only ever evaluated at lattice
nodes and its outputs are rounded to the table dtype before blending, so the
training forward pass and the tabulated test-time pass give identical bits.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .aggregate import max_aggregate_batch
from .dataio import FormatError, PointCloud, load_checkpoint, save_checkpoint
from .lattice import Lattice3, Lut, interpolate, locate, nearest, scatter_matrix, weighted_sum
from .mlp import Mlp, BatchNormParams, backward, forward, forward_cached, tabulate

log = logging.getLogger(__name__)

VARIANTS = (
    "mlp",
    "lut_mlp_approx",
    "luti_mlp_approx",
    "lut_mlp_e2e",
    "luti_mlp_e2e",
    "lut_direct",
    "luti_direct",
)
MLP_TRAINED = ("mlp", "lut_mlp_approx", "luti_mlp_approx")
DIRECT = ("lut_direct", "luti_direct")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    variant: str = "luti_mlp_e2e"
    d: int = 8
    k: int = 128
    hidden: tuple = (64, 64, 128)
    head_hidden: int = 64
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    lr_decay_every: int = 20
    lr_decay: float = 0.5
    tv_p: int = None  # None disables TV; 1 or 2 selects the norm
    tv_weight: float = 1.0
    seed: int = 0
    lo: float = -1.0
    hi: float = 1.0
    batchnorm: bool = False
    augment: bool = True
    jitter: float = 0.02
    table_dtype: str = "float32"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.d < 2:
            raise ValueError("d must be >= 2")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be >= 0")
        if self.tv_p not in (None, 1, 2):
            raise ValueError("tv_p must be 1, 2 or None")
        if self.table_dtype not in ("float32", "float64"):
            raise ValueError("table_dtype must be float32 or float64")
        self.hidden = tuple(self.hidden)

    @property
    def lattice(self):
        return Lattice3(self.d, (self.lo,) * 3, (self.hi,) * 3)

    def to_dict(self):
        return asdict(self)


# -- total variation ----------------------------------------------------------

def _table4(table):
    data = table.data if isinstance(table, Lut) else np.asarray(table)
    if data.ndim == 2:
        d = round(data.shape[0] ** (1 / 3))
        data = data.reshape(d, d, d, -1)
    return data.astype(np.float64)


def tv_regularizer(table, p=2):
    """Sum of ``|w_i - w_j|^p`` over channels and over every unordered pair
    of axis-adjacent nodes."""
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    w = _table4(table)
    total = 0.0
    for axis in range(3):
        diff = np.diff(w, axis=axis)
        total += np.sum(np.abs(diff) ** p)
    return float(total)


def tv_gradient(table, p=2):
    """Gradient of ``tv_regularizer`` wrt the table, same shape as the input."""
    raw = table.data if isinstance(table, Lut) else np.asarray(table)
    w = _table4(table)
    grad = np.zeros_like(w)
    for axis in range(3):
        diff = np.diff(w, axis=axis)
        g = np.sign(diff) if p == 1 else 2.0 * diff
        lo = [slice(None)] * 4
        hi = [slice(None)] * 4
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        grad[tuple(hi)] += g
        grad[tuple(lo)] -= g
    return grad.reshape(raw.shape)


# -- augmentation -------------------------------------------------------------

def augment(cloud, rng, sigma=0.02, angle=None, lo=-1.0, hi=1.0):
    """Random rotation about the up (y) axis, Gaussian jitter, then clamp."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if angle is None:
        angle = rng.uniform(0.0, 2 * np.pi)
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    out = pts @ rot.T
    if sigma > 0:
        out = out + rng.normal(0.0, sigma, out.shape)
    out = np.clip(out, lo, hi)
    if isinstance(cloud, PointCloud):
        return PointCloud(out, cloud.label)
    return out


# -- model --------------------------------------------------------------------

class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class PointNetClassifier:
    """Embedding (per variant) -> channel max -> small MLP head."""

    def __init__(self, cfg, n_classes, rng=None, embed_mlp=None):
        if n_classes < 2:
            raise ValueError("need at least two classes")
        self.cfg = cfg
        self.n_classes = n_classes
        self.lattice = cfg.lattice
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.embed_mlp = None
        self.table = None
        if cfg.variant in DIRECT:
            self.table = rng.uniform(0.0, 0.01, (self.lattice.n_nodes, cfg.k))
        else:
            self.embed_mlp = embed_mlp.copy() if embed_mlp is not None else Mlp.init((3,) + cfg.hidden + (cfg.k,), rng)
            if self.embed_mlp.out_dim != cfg.k:
                raise ValueError("pretrained embedding width does not match cfg.k")
            if cfg.batchnorm:
                for layer in self.embed_mlp.layers:
                    if layer.bn is None:
                        layer.bn = BatchNormParams.identity(layer.out_dim)
        self.head = Mlp.init((cfg.k, cfg.head_hidden, n_classes), rng, final_activation="none")
        self._lut = None

    @property
    def table_dtype(self):
        return np.dtype(self.cfg.table_dtype)

    def params(self):
        first = [self.table] if self.table is not None else self.embed_mlp.params()
        return first + self.head.params()

    def invalidate(self):
        self._lut = None

    def lut(self):
        """Test-time table (tabulated network or the direct table)."""
        if self._lut is None:
            if self.table is not None:
                self._lut = Lut(self.lattice, self.table.astype(self.table_dtype))
            else:
                self._lut = tabulate(self.embed_mlp, self.lattice, self.table_dtype)
        return self._lut

    # training-path embedding; returns z and a function mapping dz to grads
    def embed_train(self, pts, train_bn=False):
        v = self.cfg.variant
        lat = self.lattice
        if v in MLP_TRAINED:
            z, cache = forward_cached(self.embed_mlp, pts, train_bn)

            def back(dz):
                return backward(self.embed_mlp, pts, dz, cache)[0]

            return z, back

        if v in ("luti_mlp_e2e", "luti_direct"):
            q = locate(lat, pts)
            corners, weights = q.corners, q.weights
        else:
            corners = nearest(lat, pts)[:, None]
            weights = np.ones((len(pts), 1))

        if v in DIRECT:
            rows, idx, n_rows = self.table, corners, lat.n_nodes
        else:
            nodes, inv = np.unique(corners, return_inverse=True)
            idx = inv.reshape(corners.shape)
            node_pts = lat.node_points(nodes)
            vals, cache = forward_cached(self.embed_mlp, node_pts, train_bn)
            rows, n_rows = vals.astype(self.table_dtype), len(nodes)

        if corners.shape[1] == 8:
            z = weighted_sum(rows, idx, weights)
        else:
            z = rows[idx[:, 0]].astype(np.float64)

        def back(dz):
            n = len(pts)
            width = idx.shape[1]
            s = sp.csr_matrix(
                (weights.ravel(), (idx.ravel(), np.repeat(np.arange(n), width))), shape=(n_rows, n)
            )
            drows = s @ dz
            if v in DIRECT:
                return [drows]
            return backward(self.embed_mlp, node_pts, drows, cache)[0]

        return z, back

    def embed_test(self, pts):
        """Test-time embedding for this variant."""
        v = self.cfg.variant
        if v == "mlp":
            return forward(self.embed_mlp, pts)
        lut = self.lut()
        if v.startswith("luti"):
            return interpolate(lut, locate(self.lattice, pts))
        return lut.table[nearest(self.lattice, pts)].astype(np.float64)

    def logits(self, points):
        """Class scores for a (B, N, 3) batch at test time."""
        points = np.asarray(points, dtype=np.float64)
        b, n, _ = points.shape
        z = self.embed_test(points.reshape(-1, 3)).reshape(b, n, -1)
        a, _ = max_aggregate_batch(z)
        return forward(self.head, a)

    def predict(self, points):
        return np.argmax(self.logits(points), axis=1)


def _softmax_xent(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    b = len(labels)
    loss = -logp[np.arange(b), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


def loss_and_grads(model, points, labels, train_bn=False):
    """Cross-entropy (+ TV for direct variants) and gradients for ``model.params()``."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b, n, _ = points.shape
    z, back = model.embed_train(points.reshape(-1, 3), train_bn)
    z = z.reshape(b, n, -1)
    a, arg = max_aggregate_batch(z)
    logits, hcache = forward_cached(model.head, a)
    loss, dlogits = _softmax_xent(logits, labels)
    head_grads, da = backward(model.head, a, dlogits, hcache)

    dz = np.zeros_like(z)
    bi = np.repeat(np.arange(b), z.shape[2])
    ki = np.tile(np.arange(z.shape[2]), b)
    dz[bi, arg.ravel(), ki] = da.ravel()
    embed_grads = back(dz.reshape(b * n, -1))

    cfg = model.cfg
    if cfg.variant in DIRECT and cfg.tv_p is not None and cfg.tv_weight > 0:
        loss += cfg.tv_weight * tv_regularizer(model.table.reshape((cfg.d,) * 3 + (-1,)), cfg.tv_p)
        embed_grads[0] = embed_grads[0] + cfg.tv_weight * tv_gradient(model.table, cfg.tv_p)
    return float(loss), embed_grads + head_grads


class Trainer:
    def __init__(self, cfg, n_classes, embed_mlp=None):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.model = PointNetClassifier(cfg, n_classes, self.rng, embed_mlp)
        self.opt = Adam(self.model.params(), lr=cfg.lr)
        self.epoch = 0

    def step(self, batch):
        return train_step(self, batch)

    def fit(self, train, test=None, epochs=None, on_epoch=None):
        """Run epochs; returns a list of per-epoch metric dicts."""
        history = []
        for _ in range(epochs if epochs is not None else self.cfg.epochs):
            if self.cfg.lr_decay_every and self.epoch and self.epoch % self.cfg.lr_decay_every == 0:
                self.opt.lr *= self.cfg.lr_decay
            order = self.rng.permutation(len(train))
            losses = []
            for start in range(0, len(order), self.cfg.batch_size):
                losses.append(self.step([train[i] for i in order[start : start + self.cfg.batch_size]]))
            self.epoch += 1
            row = {"epoch": self.epoch, "loss": float(np.mean(losses)), "lr": self.opt.lr}
            if test is not None:
                row["test_acc"] = evaluate(self.model, test)
            log.info("epoch %d %s", self.epoch, row)
            history.append(row)
            if on_epoch is not None:
                on_epoch(row)
        return history


def _stack(batch):
    n = min(len(c) for c in batch)
    return np.stack([c.points[:n] for c in batch])


def train_step(trainer, batch):
    """One optimisation step on a list of labelled clouds; returns the loss."""
    if not batch:
        raise ValueError("empty batch")
    cfg = trainer.cfg
    if cfg.augment:
        batch = [augment(c, trainer.rng, cfg.jitter, lo=cfg.lo, hi=cfg.hi) for c in batch]
    labels = [c.label for c in batch]
    loss, grads = loss_and_grads(trainer.model, _stack(batch), labels, train_bn=cfg.batchnorm)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss} at epoch {trainer.epoch}")
    trainer.opt.step(grads)
    trainer.model.invalidate()
    return loss


def evaluate(model, dataset, batch_size=64):
    """Fraction of clouds whose predicted class matches the label."""
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start : start + batch_size]
        pred = model.predict(_stack(chunk))
        correct += int(np.sum(pred == np.array([c.label for c in chunk])))
    return correct / len(dataset)


def as_variant(model, variant):
    """Copy of a trained model evaluated through a different embedding path.

    Used for the approx variants: a trained ``mlp`` model re-read through
    its table. Parameters are shared, not copied.
    """
    cfg = TrainConfig(**{**model.cfg.to_dict(), "variant": variant})
    other = PointNetClassifier.__new__(PointNetClassifier)
    other.__dict__.update(model.__dict__)
    other.cfg = cfg
    other.lattice = cfg.lattice
    other._lut = None
    return other


def with_lattice(model, d):
    """Same trained parameters, different lattice resolution (MLP-based variants only)."""
    if model.table is not None:
        raise ValueError("direct tables are tied to their lattice")
    cfg = TrainConfig(**{**model.cfg.to_dict(), "d": d})
    other = as_variant(model, cfg.variant)
    other.cfg = cfg
    other.lattice = cfg.lattice
    return other


def run_ablation(
    train,
    test,
    ds=(4, 8, 16),
    variants=("luti_mlp_e2e", "lut_mlp_approx", "luti_mlp_approx"),
    base=None,
    n_classes=None,
    on_row=None,
):
    """Train the raw-MLP baseline and each requested variant at each lattice size.

    Approx variants reuse the trained baseline; every other variant is
    trained from scratch with ``base`` as the template config. Returns rows
    ``{"variant", "d", "accuracy"}`` with ``d`` = None for the baseline.
    """
    base = base or TrainConfig()
    n_classes = n_classes or 1 + max(c.label for c in train + test)
    rows = []

    def emit(variant, d, acc):
        row = {"variant": variant, "d": d, "accuracy": acc}
        rows.append(row)
        if on_row is not None:
            on_row(row)

    mlp_trainer = Trainer(TrainConfig(**{**base.to_dict(), "variant": "mlp"}), n_classes)
    mlp_trainer.fit(train)
    emit("mlp", None, evaluate(mlp_trainer.model, test))
    for variant in variants:
        if variant == "mlp":
            continue
        for d in ds:
            if variant in ("lut_mlp_approx", "luti_mlp_approx"):
                model = as_variant(with_lattice(mlp_trainer.model, d), variant)
            else:
                trainer = Trainer(TrainConfig(**{**base.to_dict(), "variant": variant, "d": d}), n_classes)
                trainer.fit(train)
                model = trainer.model
            emit(variant, d, evaluate(model, test))
    return rows


# -- checkpoints --------------------------------------------------------------

def save_model(path, model, extra=None):
    """Write a trained classifier (parameters, BN statistics, config)."""
    arrays = {f"p{i}": p for i, p in enumerate(model.params())}
    if model.embed_mlp is not None:
        for i, layer in enumerate(model.embed_mlp.layers):
            if layer.bn is not None:
                arrays[f"bn{i}.mean"] = layer.bn.mean
                arrays[f"bn{i}.var"] = layer.bn.var
    meta = {"config": model.cfg.to_dict(), "n_classes": model.n_classes, **(extra or {})}
    save_checkpoint(path, arrays, meta)


def load_model(path):
    """Inverse of ``save_model``; returns ``(model, meta)``."""
    arrays, meta = load_checkpoint(path)
    try:
        cfg = TrainConfig(**meta["config"])
        model = PointNetClassifier(cfg, int(meta["n_classes"]))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad checkpoint metadata ({exc})") from None
    params = model.params()
    for i, p in enumerate(params):
        saved = arrays.get(f"p{i}")
        if saved is None or saved.shape != p.shape:
            raise FormatError(f"{path}: parameter {i} missing or has the wrong shape")
        p[...] = saved
    if model.embed_mlp is not None:
        for i, layer in enumerate(model.embed_mlp.layers):
            if layer.bn is not None:
                layer.bn.mean = arrays[f"bn{i}.mean"].astype(np.float64)
                layer.bn.var = arrays[f"bn{i}.var"].astype(np.float64)
    model.invalidate()
    return model, meta
