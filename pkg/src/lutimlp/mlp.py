"""Plain numpy MLP: forward, backward, batch-norm folding and tabulation.

Layer products in ``forward`` go through ``np.einsum`` rather than BLAS.
BLAS kernels pick different blocking for different batch sizes, so the same
row can round differently depending on what it is batched with. einsum
computes every output row the same way regardless of the batch, which is
what lets a tabulated table match on-the-fly node evaluations bit for bit.
"""

from dataclasses import dataclass, field

import numpy as np

from .lattice import Lut

ACTIVATIONS = ("relu", "none")


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("gamma", "beta", "mean", "var"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if np.any(self.var < 0):
            raise ValueError("batch-norm variance must be non-negative")
        if not self.eps > 0:
            raise ValueError("batch-norm eps must be positive")

    @classmethod
    def identity(cls, n, eps=1e-5):
        return cls(np.ones(n), np.zeros(n), np.zeros(n), np.ones(n), eps)


@dataclass
class Layer:
    """Affine map ``x @ weight + bias`` followed by an activation.

    ``weight`` is stored (in_dim, out_dim). When ``bn`` is set the layer
    applies inference-mode batch norm between the affine map and activation.
    """

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"
    bn: BatchNormParams = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError(f"bad layer shapes W{self.weight.shape} b{self.bias.shape}")

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]


@dataclass
class Mlp:
    layers: list = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")

    @classmethod
    def init(cls, sizes, rng, final_activation="relu"):
        """He-uniform weights and zero biases for a stack of ``sizes``."""
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = np.sqrt(6.0 / n_in)
            act = final_activation if i == len(sizes) - 2 else "relu"
            layers.append(Layer(rng.uniform(-bound, bound, (n_in, n_out)), np.zeros(n_out), act))
        return cls(layers)

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    @property
    def sizes(self):
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    def params(self):
        """Flat list of parameter arrays, in the order ``backward`` returns grads."""
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
            if layer.bn is not None:
                out += [layer.bn.gamma, layer.bn.beta]
        return out

    def copy(self):
        layers = []
        for l in self.layers:
            bn = None
            if l.bn is not None:
                bn = BatchNormParams(l.bn.gamma.copy(), l.bn.beta.copy(), l.bn.mean.copy(), l.bn.var.copy(), l.bn.eps)
            layers.append(Layer(l.weight.copy(), l.bias.copy(), l.activation, bn))
        return Mlp(layers)

    def folded(self):
        """Equivalent network with every batch norm merged into its layer."""
        layers = []
        for layer in self.layers:
            if layer.bn is None:
                layers.append(layer)
            else:
                w, b = fold_batchnorm(layer.weight, layer.bias, layer.bn)
                layers.append(Layer(w, b, layer.activation))
        return Mlp(layers)


def _affine(x, w, b):
    return np.einsum("ni,io->no", x, w) + b


def _activate(h, activation):
    return np.maximum(h, 0.0) if activation == "relu" else h


def _bn_apply(h, bn):
    return bn.gamma * (h - bn.mean) / np.sqrt(bn.var + bn.eps) + bn.beta


def forward(mlp, x):
    """Evaluate the network on points ``x`` of shape (..., in_dim)."""
    x = np.asarray(x, dtype=np.float64)
    lead = x.shape[:-1]
    h = x.reshape(-1, x.shape[-1])
    for layer in mlp.layers:
        h = _affine(h, layer.weight, layer.bias)
        if layer.bn is not None:
            h = _bn_apply(h, layer.bn)
        h = _activate(h, layer.activation)
    return h.reshape(lead + (h.shape[-1],))


def forward_cached(mlp, x, train_bn=False, momentum=0.1):
    """Forward pass that keeps what ``backward`` needs.

    With ``train_bn`` batch-norm layers normalise with the batch statistics
    and update their running estimates.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, mlp.in_dim)
    cache = []
    h = x
    for layer in mlp.layers:
        inp = h
        pre = _affine(h, layer.weight, layer.bias)
        bn_cache = None
        if layer.bn is not None:
            bn = layer.bn
            if train_bn:
                mu = pre.mean(axis=0)
                var = pre.var(axis=0)
                inv = 1.0 / np.sqrt(var + bn.eps)
                xhat = (pre - mu) * inv
                bn.mean = (1 - momentum) * bn.mean + momentum * mu
                bn.var = (1 - momentum) * bn.var + momentum * var
                bn_cache = (xhat, inv, True)
            else:
                inv = 1.0 / np.sqrt(bn.var + bn.eps)
                xhat = (pre - bn.mean) * inv
                bn_cache = (xhat, inv, False)
            pre = bn.gamma * xhat + bn.beta
        h = _activate(pre, layer.activation)
        cache.append((inp, pre, bn_cache))
    return h, cache


def backward(mlp, x, upstream, cache=None):
    """Gradients of ``sum(upstream * forward(x))``.

    Returns ``(grads, dx)`` where ``grads`` follows ``mlp.params()`` order
    (weight then bias per layer) and ``dx`` has the shape of ``x``. Batch
    gradients are summed over rows. Batch-norm gamma/beta gradients are
    returned in ``grads`` as extra entries after the layer's bias.
    """
    x = np.asarray(x, dtype=np.float64)
    shape = x.shape
    if cache is None:
        _, cache = forward_cached(mlp, x)
    g = np.asarray(upstream, dtype=np.float64).reshape(-1, mlp.out_dim)
    grads = []
    for layer, (inp, pre, bn_cache) in zip(reversed(mlp.layers), reversed(cache)):
        if layer.activation == "relu":
            g = g * (pre > 0)
        layer_grads = []
        if bn_cache is not None:
            xhat, inv, batch_stats = bn_cache
            bn = layer.bn
            dgamma = (g * xhat).sum(axis=0)
            dbeta = g.sum(axis=0)
            dxhat = g * bn.gamma
            if batch_stats:
                m = dxhat.shape[0]
                g = inv / m * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                g = dxhat * inv
            layer_grads = [dgamma, dbeta]
        dw = inp.T @ g
        db = g.sum(axis=0)
        g = g @ layer.weight.T
        grads = [dw, db] + layer_grads + grads
    return grads, g.reshape(shape)


def fold_batchnorm(weight, bias, bn):
    """Merge inference batch norm into the preceding affine layer.

    Returns ``(W', b')`` with ``x @ W' + b' == bn(x @ W + b)``.
    """
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weight.shape[1] != bn.gamma.shape[0] or bias.shape != bn.gamma.shape:
        raise ValueError("batch-norm channel count does not match the layer")
    denom = bn.var + bn.eps
    if np.any(denom <= 0):
        raise ValueError("batch-norm variance + eps must be positive")
    scale = bn.gamma / np.sqrt(denom)
    return weight * scale, (bias - bn.mean) * scale + bn.beta


def tabulate(mlp, lattice, dtype=np.float32):
    """Evaluate the network at every lattice node and store it as a Lut."""
    net = mlp.folded()
    if net.in_dim != 3:
        raise ValueError(f"tabulation needs a 3-input network, got in_dim={net.in_dim}")
    values = forward(net, lattice.all_nodes()).astype(dtype)
    return Lut(lattice, values.reshape(lattice.d, lattice.d, lattice.d, -1))
