"""Transfer-learning head trainer.

The backbone is hard-frozen: features are the pooled activations at the
bundle's feature node (a Mean, possibly behind Identity aliases), extracted
once and cached on disk keyed by (bundle checksum, image content hash).
Only a dense head is trained — single sigmoid logit for two classes,
softmax for more — with mini-batch Adam and the weights from the epoch with
the best validation accuracy.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional

import numpy as np

from . import engine
from .bundle import ModelBundle
from .data import DatasetManifest
from .errors import DataError, GraphError, ShapeMismatchError
from .graph import Node, OpKind, WeightEntry, infer_shapes, validate

PROB_CLAMP = 1e-7


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 0.001
    folds: int = 5
    epochs: int = 50
    optimizer: str = "adam"
    loss: str = "binary-cross-entropy"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @staticmethod
    def for_params(params: dict[str, np.ndarray]) -> "AdamState":
        return AdamState(m={k: np.zeros_like(p) for k, p in params.items()},
                         v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> dict[str, np.ndarray]:
    """One Adam update; mutates state, returns the new parameter dict."""
    state.t += 1
    out = {}
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ShapeMismatchError(
                f"gradient shape {g.shape} != parameter shape {p.shape} for {key!r}")
        state.m[key] = beta1 * state.m[key] + (1 - beta1) * g
        state.v[key] = beta2 * state.v[key] + (1 - beta2) * g * g
        m_hat = state.m[key] / (1 - beta1 ** state.t)
        v_hat = state.v[key] / (1 - beta2 ** state.t)
        out[key] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss(p, y):
    """Elementwise binary cross-entropy with probabilities clamped to
    [1e-7, 1-1e-7].  Returns (loss, dL/dlogit) where the gradient is taken
    w.r.t. the logit that produced p: exactly p - y."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    loss = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return loss, p - y


# ---------------------------------------------------------------------------
# feature extraction

def find_feature_node(b: ModelBundle) -> str:
    """The designated feature node: the bundle output, following Identity
    aliases back to a Mean (pooled) node."""
    if not b.graph.outputs:
        raise GraphError("bundle declares no outputs", code="no-feature-node")
    nodes = b.graph.node_map()
    nid = b.graph.outputs[0]
    while nodes[nid].op is OpKind.Identity:
        nid = nodes[nid].inputs[0]
    if nodes[nid].op is not OpKind.Mean:
        raise GraphError(
            f"output node {b.graph.outputs[0]!r} is not a pooled feature node",
            code="no-feature-node")
    return b.graph.outputs[0]


def extract_features(b: ModelBundle, m: DatasetManifest,
                     cache_dir=None) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """(features, labels, paths): one row per manifest item, row = activation
    at the feature node.  With cache_dir set, rows are memoized per
    (bundle checksum, image content hash) and reruns execute zero forwards."""
    feature_out = find_feature_node(b)
    cache_root = None
    if cache_dir is not None:
        cache_root = Path(cache_dir) / f"feat-{b.checksum()[:16]}"
        cache_root.mkdir(parents=True, exist_ok=True)
    rows, labels, paths = [], [], []
    for item in m.items:
        raw = m.resolve(item).read_bytes()
        cache_file = None
        if cache_root is not None:
            cache_file = cache_root / f"{hashlib.sha256(raw).hexdigest()}.npy"
        if cache_file is not None and cache_file.exists():
            vec = np.load(cache_file)
        else:
            t = engine.preprocess(raw, b.preprocess)
            values = engine.run_forward(b, t)
            vec = values[feature_out].to_float32().reshape(-1)
            if cache_file is not None:
                np.save(cache_file, vec)
        rows.append(vec)
        labels.append(item.class_index)
        paths.append(item.path)
    if not rows:
        raise DataError("manifest has no items", code="empty-dataset")
    return np.stack(rows).astype(np.float32), np.asarray(labels, dtype=np.int64), paths


# ---------------------------------------------------------------------------
# head training

@dataclass
class HeadParams:
    weights: np.ndarray   # (F, 1) sigmoid head or (F, K) softmax head
    bias: np.ndarray      # (1,) or (K,)
    kind: str             # "sigmoid" | "softmax"


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


def head_loss_and_grads(w: np.ndarray, b: np.ndarray, X: np.ndarray,
                        y: np.ndarray, kind: str = "sigmoid"):
    """Mean loss over the batch plus analytic gradients (dW, db)."""
    n = X.shape[0]
    if kind == "sigmoid":
        z = X @ w.reshape(-1) + b[0]
        p = sigmoid(z)
        losses, dz = bce_loss(p, y)
        dz = dz / n
        dw = (X.T @ dz).reshape(w.shape)
        db = np.array([dz.sum()])
        return float(losses.mean()), dw, db
    z = X @ w + b
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    onehot = np.eye(w.shape[1])[y]
    p_clamped = np.clip(p, PROB_CLAMP, 1.0)
    loss = float(-(onehot * np.log(p_clamped)).sum(axis=1).mean())
    dz = (p - onehot) / n
    return loss, X.T @ dz, dz.sum(axis=0)


def _head_eval(w, b, X, y, kind):
    loss, _, _ = head_loss_and_grads(w, b, X, y, kind)
    preds = predict_head(HeadParams(w, b, kind), X)[1]
    return loss, float((preds == y).mean())


def predict_head(head: HeadParams, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(positive-class or per-class probabilities, predicted indices).
    Binary ties at p = 0.5 go to the positive class."""
    if head.kind == "sigmoid":
        p = sigmoid(X @ head.weights.reshape(-1) + head.bias[0])
        return p, (p >= 0.5).astype(np.int64)
    z = X @ head.weights + head.bias
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return p, p.argmax(axis=1)


def train_head(features: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
               val: Optional[tuple[np.ndarray, np.ndarray]] = None
               ) -> tuple[HeadParams, list[EpochLog]]:
    """Mini-batch Adam over cfg.epochs; returns the weights from the epoch
    with the best validation accuracy (training accuracy when no validation
    data is supplied) and the per-epoch log."""
    classes = np.unique(labels)
    if classes.size < 2:
        raise DataError("training labels contain a single class",
                        code="single-class-data")
    kind = "sigmoid" if classes.size == 2 else "softmax"
    n_out = 1 if kind == "sigmoid" else int(classes.size)
    F = features.shape[1]
    rng = np.random.default_rng(cfg.seed)
    params = {"w": rng.normal(0.0, 0.01, size=(F, n_out)), "b": np.zeros(n_out)}
    state = AdamState.for_params(params)
    # ZCA-whiten the frozen features for conditioning (folded back into the
    # returned head, which therefore still operates on raw feature space)
    mu = features.mean(axis=0).astype(np.float64)
    centered = features.astype(np.float64) - mu
    cov = centered.T @ centered / max(centered.shape[0] - 1, 1)
    lam, V = np.linalg.eigh(cov)
    lam = np.maximum(lam, 1e-5 * max(float(lam.max()), 1e-12))
    W_zca = (V * (1.0 / np.sqrt(lam))) @ V.T
    X = centered @ W_zca
    y = labels.astype(np.int64)
    vX, vy = (val if val is not None else (features, labels))
    vX = (np.asarray(vX, dtype=np.float64) - mu) @ W_zca
    vy = np.asarray(vy, dtype=np.int64)

    best = (-1.0, None)
    log: list[EpochLog] = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(X.shape[0])
        for start in range(0, X.shape[0], cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, dw, db = head_loss_and_grads(params["w"], params["b"],
                                            X[idx], y[idx], kind)
            params = adam_step(params, {"w": dw, "b": db}, state,
                               cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
        tr_loss, tr_acc = _head_eval(params["w"], params["b"], X, y, kind)
        va_loss, va_acc = _head_eval(params["w"], params["b"], vX, vy, kind)
        log.append(EpochLog(epoch, tr_loss, tr_acc, va_loss, va_acc))
        if va_acc > best[0]:
            best = (va_acc, (params["w"].copy(), params["b"].copy()))
    w, b = best[1]
    # fold whitening into raw space: w'·W(x-mu) + b' = (W w')·x + (b' - (W w')·mu)
    w_raw = W_zca @ w
    b_raw = b - mu @ w_raw
    return HeadParams(weights=w_raw, bias=b_raw, kind=kind), log


def render_training_log(log: list[EpochLog]) -> str:
    lines = ["epoch\tsplit\tloss\taccuracy"]
    for row in log:
        lines.append(f"{row.epoch}\ttrain\t{row.train_loss:.6f}\t{row.train_acc:.4f}")
        lines.append(f"{row.epoch}\tval\t{row.val_loss:.6f}\t{row.val_acc:.4f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# head attachment

def attach_head(b: ModelBundle, head: HeadParams, classes: list[str]) -> ModelBundle:
    """New bundle with MatMul + bias AddV2 appended at the feature node."""
    try:
        feature_out = find_feature_node(b)
    except GraphError:
        tail = b.graph.node_map().get(b.graph.outputs[0]) if b.graph.outputs else None
        if tail is not None and tail.op in (OpKind.MatMul, OpKind.AddV2):
            raise GraphError("feature node already consumed by a head",
                             code="feature-node-consumed")
        raise
    g = b.graph.copy()
    shapes = infer_shapes(g)
    feat_width = shapes[feature_out][-1]
    if head.weights.shape[0] != feat_width:
        raise ShapeMismatchError(
            f"head expects width {head.weights.shape[0]}, feature node provides "
            f"{feat_width}", code="width-mismatch")
    expected = 2 if head.kind == "sigmoid" else head.weights.shape[1]
    if len(classes) != expected:
        raise DataError(f"head outputs {expected} classes, got {len(classes)} names")

    g.weights.append(WeightEntry(head.weights.astype(np.float32), "fp32"))
    w_ref = len(g.weights) - 1
    g.weights.append(WeightEntry(head.bias.astype(np.float32), "fp32"))
    b_ref = len(g.weights) - 1
    g.nodes.append(Node(id="head/weights", op=OpKind.Const, inputs=[], weight_ref=w_ref))
    g.nodes.append(Node(id="head/matmul", op=OpKind.MatMul,
                        inputs=[feature_out, "head/weights"]))
    g.nodes.append(Node(id="head/bias", op=OpKind.Const, inputs=[], weight_ref=b_ref))
    g.nodes.append(Node(id="head/logits", op=OpKind.AddV2,
                        inputs=["head/matmul", "head/bias"]))
    g.outputs = ["head/logits"]
    validate(g)
    out = ModelBundle(graph=g, name=b.name, variant="fp32", classes=list(classes),
                      preprocess=b.preprocess, created=b.created)
    return out
