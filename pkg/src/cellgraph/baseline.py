"""Minimal two-layer graph convolutional classifier.

Forward pass: softmax(A_hat ReLU(A_hat X W1 + b1) W2 + b2) with
A_hat the symmetrically normalized self-loop adjacency. Gradients are
derived by hand (no autodiff), optimization is plain Adam, and the
loss is mean node cross-entropy plus an L2 penalty on the weight
matrices. Training is full batch per specimen, single threaded, and
bit-deterministic for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .evalkit import class_avg_accuracy, top1_accuracy
from .graph_build import CellGraph
from .homogenize import FeatureBundle
from .volume_io import N_CLASSES

LN_EPS = 1e-5


class TrainError(ValueError):
    """Bundles or configuration cannot be trained on."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the GCN baseline."""

    learning_rate: float = 1e-2
    weight_decay: float = 1e-5
    epochs: int = 200
    hidden: int = 128
    dropout: float = 0.5
    seed: int = 0
    feature_noise: float = 0.0   # sigma of Gaussian noise on node features
    edge_dropout: float = 0.0    # per-edge drop probability, resampled per epoch
    use_bias: bool = True
    hidden_norm: bool = False    # parameter-free layer norm after ReLU
    n_classes: int = N_CLASSES

    def __post_init__(self) -> None:
        # lr = 0 is allowed so a frozen-optimizer run stays expressible.
        if self.learning_rate < 0:
            raise TrainError("learning rate must not be negative")
        if not 0.0 <= self.edge_dropout < 1.0:
            raise TrainError("edge dropout must lie in [0, 1)")
        if self.feature_noise < 0:
            raise TrainError("feature noise sigma must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise TrainError("dropout must lie in [0, 1)")


@dataclass
class GcnParams:
    """Weights of the two-layer GCN; biases optional."""

    W1: np.ndarray
    W2: np.ndarray
    b1: np.ndarray | None = None
    b2: np.ndarray | None = None

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"W1": self.W1, "W2": self.W2}
        if self.b1 is not None:
            out["b1"] = self.b1
        if self.b2 is not None:
            out["b2"] = self.b2
        return out

    def copy(self) -> "GcnParams":
        return GcnParams(
            W1=self.W1.copy(),
            W2=self.W2.copy(),
            b1=None if self.b1 is None else self.b1.copy(),
            b2=None if self.b2 is None else self.b2.copy(),
        )


def init_params(n_features: int, hidden: int, n_classes: int, seed: int,
                use_bias: bool = True) -> GcnParams:
    """Glorot-uniform weights, zero biases, seeded."""
    rng = np.random.Generator(np.random.PCG64(seed))

    def glorot(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    return GcnParams(
        W1=glorot(n_features, hidden),
        W2=glorot(hidden, n_classes),
        b1=np.zeros(hidden) if use_bias else None,
        b2=np.zeros(n_classes) if use_bias else None,
    )


def normalized_adjacency(edges, n_nodes: int | None = None) -> sparse.csr_matrix:
    """Symmetrically normalized adjacency with self-loops.

    A_hat = D^{-1/2} (A + I) D^{-1/2}, rows in node order. ``edges``
    is a CellGraph or an (E, 2) array of node index pairs (one edge
    per row); bundle edge indexes are (2, E) and must be transposed.
    """
    if isinstance(edges, CellGraph):
        pairs = edges.edges
        n_nodes = edges.n_nodes
    else:
        pairs = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if n_nodes is None:
            raise TrainError("n_nodes required when passing a raw edge array")
    rows = np.concatenate([pairs[:, 0], pairs[:, 1], np.arange(n_nodes)])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0], np.arange(n_nodes)])
    vals = np.ones(rows.size, dtype=float)
    a = sparse.coo_matrix((vals, (rows, cols)), shape=(n_nodes, n_nodes)).tocsr()
    a.data[:] = np.minimum(a.data, 1.0)  # guard duplicate edges
    deg = np.asarray(a.sum(axis=1)).reshape(-1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    d = sparse.diags(inv_sqrt)
    return (d @ a @ d).tocsr()


def _layer_norm_forward(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    y = (x - mu) * inv
    return y, (y, inv)


def _layer_norm_backward(dy: np.ndarray, cache: tuple) -> np.ndarray:
    y, inv = cache
    m1 = dy.mean(axis=1, keepdims=True)
    m2 = (dy * y).mean(axis=1, keepdims=True)
    return inv * (dy - m1 - y * m2)


def forward(
    params: GcnParams,
    a_hat: sparse.csr_matrix,
    x: np.ndarray,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    hidden_norm: bool = False,
) -> tuple[np.ndarray, dict]:
    """Class probabilities per node plus cached activations.

    Dropout (training only) requires an rng and uses inverted scaling;
    inference is deterministic with dropout = 0.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[1] != params.W1.shape[0]:
        raise TrainError(
            f"feature width {x.shape[1]} does not match W1 rows {params.W1.shape[0]}"
        )
    ax = a_hat @ x
    z1 = ax @ params.W1
    if params.b1 is not None:
        z1 = z1 + params.b1
    h = np.maximum(z1, 0.0)
    cache: dict = {"ax": ax, "z1": z1}
    if hidden_norm:
        h, ln_cache = _layer_norm_forward(h)
        cache["ln"] = ln_cache
    if dropout > 0.0:
        if rng is None:
            raise TrainError("dropout needs an rng")
        mask = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
        h = h * mask
        cache["mask"] = mask
    ah = a_hat @ h
    z2 = ah @ params.W2
    if params.b2 is not None:
        z2 = z2 + params.b2
    z2 = z2 - z2.max(axis=1, keepdims=True)
    expz = np.exp(z2)
    probs = expz / expz.sum(axis=1, keepdims=True)
    cache.update({"h": h, "ah": ah, "probs": probs})
    return probs, cache


def loss_and_grads(
    params: GcnParams,
    a_hat: sparse.csr_matrix,
    x: np.ndarray,
    labels: np.ndarray,
    weight_decay: float = 0.0,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    hidden_norm: bool = False,
) -> tuple[float, dict]:
    """Mean cross-entropy + (wd/2) sum ||W||^2, with analytic gradients.

    The L2 penalty covers the weight matrices only, not biases.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    probs, cache = forward(params, a_hat, x, dropout, rng, hidden_norm)
    picked = np.clip(probs[np.arange(n), labels], 1e-300, None)
    loss = float(-np.mean(np.log(picked)))
    loss += 0.5 * weight_decay * (float((params.W1 ** 2).sum()) + float((params.W2 ** 2).sum()))

    dz2 = cache["probs"].copy()
    dz2[np.arange(n), labels] -= 1.0
    dz2 /= n
    grads: dict = {}
    grads["W2"] = cache["ah"].T @ dz2 + weight_decay * params.W2
    if params.b2 is not None:
        grads["b2"] = dz2.sum(axis=0)
    dh = (a_hat @ dz2) @ params.W2.T
    if "mask" in cache:
        dh = dh * cache["mask"]
    if hidden_norm:
        dh = _layer_norm_backward(dh, cache["ln"])
    dz1 = dh * (cache["z1"] > 0)
    grads["W1"] = cache["ax"].T @ dz1 + weight_decay * params.W1
    if params.b1 is not None:
        grads["b1"] = dz1.sum(axis=0)
    return loss, grads


@dataclass
class AdamState:
    """First/second moment estimates plus step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: GcnParams,
    state: AdamState,
    grads: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> GcnParams:
    """One bias-corrected Adam update; mutates ``state``, returns new params."""
    state.t += 1
    t = state.t
    new = params.copy()
    tensors = new.tensors()
    for name, g in grads.items():
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        tensors[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return new


def augment(
    x: np.ndarray,
    edge_index: np.ndarray,
    sigma: float,
    p: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian feature noise plus independent edge dropout.

    ``edge_index`` is (E, 2), one undirected edge per row; each edge
    survives with probability 1 - p. The sampled graph may be
    disconnected, callers rebuild A_hat from the result.
    """
    if not 0.0 <= p < 1.0:
        raise TrainError("edge dropout must lie in [0, 1)")
    out_x = np.asarray(x, dtype=float)
    if sigma > 0:
        out_x = out_x + sigma * rng.standard_normal(out_x.shape)
    ei = np.asarray(edge_index).reshape(-1, 2)
    if p > 0 and ei.shape[0] > 0:
        keep = rng.random(ei.shape[0]) >= p
        ei = ei[keep]
    return out_x, ei


def predict(params: GcnParams, bundle: FeatureBundle,
            hidden_norm: bool = False) -> np.ndarray:
    """Deterministic class predictions for a bundle."""
    a_hat = normalized_adjacency(bundle.edge_index.T, bundle.n_nodes)
    probs, _ = forward(params, a_hat, bundle.node_matrix.astype(float),
                       hidden_norm=hidden_norm)
    return np.argmax(probs, axis=1)


def train(
    train_bundles: list[FeatureBundle],
    val_bundles: list[FeatureBundle],
    cfg: TrainConfig,
) -> tuple[GcnParams, list[dict]]:
    """Full-batch per-specimen training with validation tracking.

    Specimens are visited in a seed-shuffled order each epoch; the
    returned parameters are the ones with the best validation
    class-average accuracy. History holds one record per epoch.
    """
    if not train_bundles or not val_bundles:
        raise TrainError("need at least one training and one validation bundle")
    widths = {b.node_matrix.shape[1] for b in train_bundles + val_bundles}
    manifests = {tuple((e.name, e.width) for e in b.node_manifest)
                 for b in train_bundles + val_bundles}
    if len(widths) != 1 or len(manifests) != 1:
        raise TrainError("bundles disagree on the node feature manifest")
    for b in train_bundles + val_bundles:
        if b.labels is None:
            raise TrainError("training requires bundles with labels")
    n_features = widths.pop()

    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    params = init_params(n_features, cfg.hidden, cfg.n_classes, cfg.seed, cfg.use_bias)
    state = AdamState()

    train_x = [b.node_matrix.astype(float) for b in train_bundles]
    train_y = [b.labels.astype(np.int64) for b in train_bundles]
    train_ei = [b.edge_index.T.astype(np.int64) for b in train_bundles]
    base_ahat = [normalized_adjacency(ei, x.shape[0]) for ei, x in zip(train_ei, train_x)]

    history: list[dict] = []
    best_params = params.copy()
    best_score = -np.inf
    augmenting = cfg.feature_noise > 0 or cfg.edge_dropout > 0

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_bundles))
        losses = []
        for s in order:
            x, y = train_x[s], train_y[s]
            if augmenting:
                x, ei = augment(x, train_ei[s], cfg.feature_noise, cfg.edge_dropout, rng)
                a_hat = normalized_adjacency(ei, x.shape[0])
            else:
                a_hat = base_ahat[s]
            loss, grads = loss_and_grads(
                params, a_hat, x, y, cfg.weight_decay,
                cfg.dropout, rng, cfg.hidden_norm,
            )
            params = adam_step(params, state, grads, cfg.learning_rate)
            losses.append(loss)

        pairs = []
        top1s = []
        for b in val_bundles:
            pred = predict(params, b, cfg.hidden_norm)
            pairs.append((pred, b.labels.astype(np.int64)))
            top1s.append(top1_accuracy(pred, b.labels.astype(np.int64)))
        val_cavg = class_avg_accuracy(pairs)
        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_top1": float(np.mean(top1s)),
            "val_class_avg": val_cavg,
        }
        history.append(record)
        if val_cavg > best_score:
            best_score = val_cavg
            best_params = params.copy()
    return best_params, history


def save_model(params: GcnParams, cfg: TrainConfig, path: str | Path) -> Path:
    """Write ``<base>.hdr`` (shapes + config) and ``<base>.f32`` payload."""
    base = Path(path)
    if base.suffix in (".hdr", ".f32"):
        base = base.with_suffix("")
    tensors = params.tensors()
    lines = ["format_version=1"]
    for key, value in sorted(vars(cfg).items()):
        lines.append(f"cfg_{key}={value}")
    payload = b""
    for name in sorted(tensors):
        t = tensors[name]
        lines.append(f"tensor={name}," + ",".join(str(d) for d in t.shape))
        payload += np.ascontiguousarray(t, dtype="<f4").tobytes()
    base.with_suffix(".f32").write_bytes(payload)
    base.with_suffix(".hdr").write_text("\n".join(lines) + "\n")
    return base.with_suffix(".hdr")


def load_model(path: str | Path) -> tuple[GcnParams, dict]:
    """Load a model pair written by :func:`save_model`."""
    base = Path(path)
    if base.suffix in (".hdr", ".f32"):
        base = base.with_suffix("")
    specs = []
    cfg: dict = {}
    for line in base.with_suffix(".hdr").read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        key, value = line.split("=", 1)
        if key == "tensor":
            parts = value.split(",")
            specs.append((parts[0], tuple(int(d) for d in parts[1:])))
        elif key.startswith("cfg_"):
            cfg[key[4:]] = value
    raw = np.frombuffer(base.with_suffix(".f32").read_bytes(), dtype="<f4")
    tensors = {}
    offset = 0
    for name, shape in specs:
        size = int(np.prod(shape))
        tensors[name] = raw[offset:offset + size].reshape(shape).astype(float)
        offset += size
    if offset != raw.size:
        raise TrainError("model payload size does not match header shapes")
    return (
        GcnParams(
            W1=tensors["W1"],
            W2=tensors["W2"],
            b1=tensors.get("b1"),
            b2=tensors.get("b2"),
        ),
        cfg,
    )
