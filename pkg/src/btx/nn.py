"""Dense numerical core.

Seedable RNG, a small reverse-mode tape over numpy arrays, the gated
recurrent cell, regularizers (weight noise, dropout), gradient clipping,
plain SGD, and the binary checkpoint format.

Everything runs on the CPU. Arrays are float64 by default; float32 is
accepted for speed, with looser tolerances expected downstream.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

PARAM_GROUPS = (
    "src-embed",
    "tgt-embed",
    "enc-fwd",
    "enc-bwd",
    "attention",
    "dec",
    "output",
)

CHECKPOINT_MAGIC = b"BTX1"


class DimensionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Seeding.  All randomness flows through PCG64 generators derived from
# (base seed, labels); the derivation is sha256-based so it is stable across
# platforms and Python versions.


def derive_seed(seed: int, *labels) -> int:
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little")


def make_rng(seed: int, *labels) -> np.random.Generator:
    """PCG64 generator; identical (seed, labels) gives identical streams."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *labels)))


# ---------------------------------------------------------------------------
# Parameters


@dataclass
class Parameter:
    """One trainable array with its gradient buffer and freeze flag."""

    name: str
    group: str
    value: np.ndarray
    grad: np.ndarray | None = None
    frozen: bool = False

    def __post_init__(self):
        if self.group not in PARAM_GROUPS:
            raise ValueError(f"unknown parameter group {self.group!r}")
        self.value = np.asarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(
                f"grad shape {self.grad.shape} != value shape {self.value.shape}"
            )


def orthogonal(rng: np.random.Generator, n: int, dtype=np.float64) -> np.ndarray:
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    # fix signs so the factorization is unique (deterministic across BLAS builds)
    q = q * np.sign(np.diag(r))
    return q.astype(dtype)


def uniform_init(rng: np.random.Generator, shape, scale=0.01, dtype=np.float64) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# Reverse-mode tape.  Nodes wrap a forward value plus a closure that routes
# an incoming gradient to the node's parents; backward() walks the graph in
# reverse topological order.  Leaf nodes created from a Parameter accumulate
# into Parameter.grad unless the parameter is frozen.


class Node:
    __slots__ = ("value", "parents", "bwd", "grad", "param")

    def __init__(self, value, parents=(), bwd=None, param: Parameter | None = None):
        self.value = value
        self.parents = parents
        self.bwd = bwd
        self.grad = None
        self.param = param


def const(x, dtype=None) -> Node:
    return Node(np.asarray(x, dtype=dtype))


def leaf(p: Parameter) -> Node:
    return Node(p.value, param=p)


def _acc(n: Node, g) -> None:
    # grads are never mutated in place, so sharing the first array is safe
    n.grad = g if n.grad is None else n.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(root: Node) -> None:
    """Accumulate dRoot/dParam into every reachable unfrozen Parameter.grad."""
    if np.ndim(root.value) != 0:
        raise ValueError("backward expects a scalar loss node")
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.asarray(1.0, dtype=np.asarray(root.value).dtype)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        if node.param is not None and not node.param.frozen:
            node.param.grad += g
        if node.bwd is not None:
            node.bwd(g)
        node.grad = None


# --- ops -------------------------------------------------------------------


def as_node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value + b.value

    def bwd(g):
        _acc(a, _unbroadcast(g, np.shape(a.value)))
        _acc(b, _unbroadcast(g, np.shape(b.value)))

    return Node(out, (a, b), bwd)


def add3(a, b, c) -> Node:
    return add(add(a, b), c)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value * b.value

    def bwd(g):
        _acc(a, _unbroadcast(g * b.value, np.shape(a.value)))
        _acc(b, _unbroadcast(g * a.value, np.shape(b.value)))

    return Node(out, (a, b), bwd)


def matmul(a, b) -> Node:
    """np.matmul with broadcasting over leading batch dims; operands >= 2-D."""
    a, b = as_node(a), as_node(b)
    if np.ndim(a.value) < 2 or np.ndim(b.value) < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    out = a.value @ b.value

    def bwd(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        _acc(a, _unbroadcast(ga, a.value.shape))
        _acc(b, _unbroadcast(gb, b.value.shape))

    return Node(out, (a, b), bwd)


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.value.shape

    def bwd(g):
        _acc(a, g.reshape(old))

    return Node(a.value.reshape(shape), (a,), bwd)


def tanh(a) -> Node:
    a = as_node(a)
    y = np.tanh(a.value)

    def bwd(g):
        _acc(a, g * (1.0 - y * y))

    return Node(y, (a,), bwd)


def sigmoid(a) -> Node:
    a = as_node(a)
    y = _sigmoid_raw(a.value)

    def bwd(g):
        _acc(a, g * y * (1.0 - y))

    return Node(y, (a,), bwd)


def concat(nodes, axis=-1) -> Node:
    nodes = [as_node(n) for n in nodes]
    sizes = [n.value.shape[axis] for n in nodes]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for n, piece in zip(nodes, np.split(g, splits, axis=axis)):
            _acc(n, piece)

    return Node(out, tuple(nodes), bwd)


def stack(nodes, axis=1) -> Node:
    nodes = [as_node(n) for n in nodes]
    out = np.stack([n.value for n in nodes], axis=axis)

    def bwd(g):
        for i, n in enumerate(nodes):
            _acc(n, np.take(g, i, axis=axis))

    return Node(out, tuple(nodes), bwd)


def rows(emb, ids) -> Node:
    """Row lookup emb[ids]; backward scatters into the embedding gradient."""
    emb = as_node(emb)
    ids = np.asarray(ids)
    out = emb.value[ids]

    def bwd(g):
        ge = np.zeros_like(emb.value)
        np.add.at(ge, ids, g)
        _acc(emb, ge)

    return Node(out, (emb,), bwd)


def softmax_node(a, axis=-1) -> Node:
    a = as_node(a)
    x = a.value
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        _acc(a, (g - (g * s).sum(axis=axis, keepdims=True)) * s)

    return Node(s, (a,), bwd)


def ce_from_logits(logits, targets) -> Node:
    """Per-row negative log-likelihood, -ln softmax(logits)[target].

    Fused for stability; backward is (softmax - onehot) scaled by the
    incoming gradient.
    """
    logits = as_node(logits)
    x = logits.value
    targets = np.asarray(targets)
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    rows_idx = np.arange(x.shape[0])
    nll = lse[:, 0] - x[rows_idx, targets]

    def bwd(g):
        p = np.exp(x - lse)
        p[rows_idx, targets] -= 1.0
        _acc(logits, p * g[:, None])

    return Node(nll, (logits,), bwd)


def sum_all(a) -> Node:
    a = as_node(a)
    out = np.asarray(a.value.sum())

    def bwd(g):
        _acc(a, np.broadcast_to(np.asarray(g), np.shape(a.value)))

    return Node(out, (a,), bwd)


def affine(x, w, b) -> Node:
    """x @ w + b as one fused op (x is (B, in), w (in, out), b (out,))."""
    x, w, b = as_node(x), as_node(w), as_node(b)
    out = x.value @ w.value + b.value

    def bwd(g):
        _acc(x, g @ w.value.T)
        _acc(w, x.value.T @ g)
        _acc(b, g.sum(axis=0))

    return Node(out, (x, w, b), bwd)


def attend_context(s_prev, ann, uh, attn_w, attn_v,
                   mask_add: np.ndarray | None = None):
    """Fused alignment step: score every source position against the
    previous decoder state, softmax, and take the weighted annotation sum.

    score_j = v . tanh(W s_prev + U h_j)   (U h_j precomputed as `uh`)

    Returns (alpha values (B, m), context node (B, 2H)); alpha is a plain
    array for inspection, gradients flow through the context.
    """
    s_prev, ann, uh = as_node(s_prev), as_node(ann), as_node(uh)
    attn_w, attn_v = as_node(attn_w), as_node(attn_v)
    sv, annv, uhv = s_prev.value, ann.value, uh.value
    wv, vv = attn_w.value, attn_v.value
    q = sv @ wv                                   # (B, H)
    t = np.tanh(uhv + q[:, None, :])              # (B, m, H)
    e = (t @ vv)[:, :, 0]                         # (B, m)
    if mask_add is not None:
        e = e + mask_add
    e = e - e.max(axis=1, keepdims=True)
    ex = np.exp(e)
    alpha = ex / ex.sum(axis=1, keepdims=True)    # (B, m)
    c = (alpha[:, None, :] @ annv)[:, 0, :]       # (B, 2H)

    def bwd(g):
        g_alpha = (annv @ g[:, :, None])[:, :, 0]
        _acc(ann, alpha[:, :, None] * g[:, None, :])
        g_e = (g_alpha - (g_alpha * alpha).sum(axis=1, keepdims=True)) * alpha
        g_t = g_e[:, :, None] * vv[None, None, :, 0]
        _acc(attn_v, (t.reshape(-1, t.shape[-1]).T @ g_e.reshape(-1))[:, None])
        g_pre = g_t * (1.0 - t * t)
        _acc(uh, g_pre)
        g_q = g_pre.sum(axis=1)
        _acc(attn_w, sv.T @ g_q)
        _acc(s_prev, g_q @ wv.T)

    return alpha, Node(c, (s_prev, ann, uh, attn_w, attn_v), bwd)


# ---------------------------------------------------------------------------
# Gated recurrent cell


@dataclass
class GruParams:
    """Weights for one direction/cell: input, recurrent and bias per gate."""

    wz: Parameter
    uz: Parameter
    bz: Parameter
    wr: Parameter
    ur: Parameter
    br: Parameter
    wh: Parameter
    uh: Parameter
    bh: Parameter

    def parameters(self) -> list[Parameter]:
        return [self.wz, self.uz, self.bz, self.wr, self.ur, self.br,
                self.wh, self.uh, self.bh]


def init_gru(rng: np.random.Generator, name: str, group: str, in_dim: int,
             hidden: int, dtype=np.float64, scale: float = 0.01) -> GruParams:
    def p(suffix, value):
        return Parameter(f"{name}.{suffix}", group, value)

    return GruParams(
        wz=p("wz", uniform_init(rng, (in_dim, hidden), scale=scale, dtype=dtype)),
        uz=p("uz", orthogonal(rng, hidden, dtype=dtype)),
        bz=p("bz", np.zeros(hidden, dtype=dtype)),
        wr=p("wr", uniform_init(rng, (in_dim, hidden), scale=scale, dtype=dtype)),
        ur=p("ur", orthogonal(rng, hidden, dtype=dtype)),
        br=p("br", np.zeros(hidden, dtype=dtype)),
        wh=p("wh", uniform_init(rng, (in_dim, hidden), scale=scale, dtype=dtype)),
        uh=p("uh", orthogonal(rng, hidden, dtype=dtype)),
        bh=p("bh", np.zeros(hidden, dtype=dtype)),
    )


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    # overflow-free and cheaper than the exp form on small arrays
    return 0.5 * np.tanh(0.5 * x) + 0.5


def gru_node(w: GruParams, lv, x: Node, h_prev: Node,
             mask: np.ndarray | None = None) -> Node:
    """One batched cell update as a single fused tape op.

    z = sigma(x Wz + h Uz + bz), r = sigma(x Wr + h Ur + br),
    cand = tanh(x Wh + (r*h) Uh + bh), h' = (1-z)*h + z*cand.

    `lv` maps Parameter -> leaf Node (one leaf per graph).  An optional
    per-row {0,1} mask (B, 1) keeps the previous state where it is 0, which
    is how padded positions are skipped.  The backward pass is hand-derived;
    the finite-difference suite pins it down.
    """
    xv, hv = x.value, h_prev.value
    az = xv @ w.wz.value + hv @ w.uz.value + w.bz.value
    ar = xv @ w.wr.value + hv @ w.ur.value + w.br.value
    z = _sigmoid_raw(az)
    r = _sigmoid_raw(ar)
    rh = r * hv
    cand = np.tanh(xv @ w.wh.value + rh @ w.uh.value + w.bh.value)
    h_new = hv + z * (cand - hv)
    if mask is not None:
        h_out = mask * h_new + (1.0 - mask) * hv
    else:
        h_out = h_new
    lz, luz, lbz = lv(w.wz), lv(w.uz), lv(w.bz)
    lr, lur, lbr = lv(w.wr), lv(w.ur), lv(w.br)
    lh, luh, lbh = lv(w.wh), lv(w.uh), lv(w.bh)

    def bwd(g):
        if mask is not None:
            g_extra_h = g * (1.0 - mask)
            g = g * mask
        g_z = g * (cand - hv)
        g_cand = g * z
        g_h = g * (1.0 - z)
        if mask is not None:
            g_h = g_h + g_extra_h
        g_ac = g_cand * (1.0 - cand * cand)
        g_az = g_z * z * (1.0 - z)
        g_rh = g_ac @ w.uh.value.T
        g_ar = (g_rh * hv) * r * (1.0 - r)
        g_h = g_h + g_rh * r
        _acc(lh, xv.T @ g_ac)
        _acc(luh, rh.T @ g_ac)
        _acc(lbh, g_ac.sum(axis=0))
        _acc(lr, xv.T @ g_ar)
        _acc(lur, hv.T @ g_ar)
        _acc(lbr, g_ar.sum(axis=0))
        _acc(lz, xv.T @ g_az)
        _acc(luz, hv.T @ g_az)
        _acc(lbz, g_az.sum(axis=0))
        g_x = g_ac @ w.wh.value.T + g_ar @ w.wr.value.T + g_az @ w.wz.value.T
        g_h = g_h + g_ar @ w.ur.value.T + g_az @ w.uz.value.T
        _acc(x, g_x)
        _acc(h_prev, g_h)

    parents = (x, h_prev, lz, luz, lbz, lr, lur, lbr, lh, luh, lbh)
    return Node(h_out, parents, bwd)


def gru_step(x: np.ndarray, h_prev: np.ndarray, weights: GruParams) -> np.ndarray:
    """Single-vector cell update (no gradient recording)."""
    x = np.asarray(x)
    h_prev = np.asarray(h_prev)
    in_dim, hidden = weights.wz.value.shape
    if x.shape != (in_dim,) or h_prev.shape != (hidden,):
        raise DimensionError(
            f"gru_step expects x({in_dim},) and h_prev({hidden},), "
            f"got {x.shape} and {h_prev.shape}"
        )
    leaves = {}

    def lv(p):
        if id(p) not in leaves:
            leaves[id(p)] = leaf(p)
        return leaves[id(p)]

    out = gru_node(weights, lv, const(x[None, :]), const(h_prev[None, :]))
    return out.value[0]


# ---------------------------------------------------------------------------
# Pointwise numerics used outside the tape


def softmax(v: np.ndarray) -> np.ndarray:
    """Stable softmax of a 1-D vector (max-subtraction)."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input must be finite")
    e = np.exp(v - v.max())
    return e / e.sum()


def log_softmax(x: np.ndarray, axis=-1) -> np.ndarray:
    x = np.asarray(x)
    m = x.max(axis=axis, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=axis, keepdims=True))


def cross_entropy(probs: np.ndarray, target_id: int) -> float:
    probs = np.asarray(probs)
    if not 0 <= target_id < probs.shape[-1]:
        raise IndexError(f"target id {target_id} out of range for {probs.shape[-1]} classes")
    return float(-np.log(probs[target_id]))


# ---------------------------------------------------------------------------
# Regularizers and optimizer


def clip_gradients(params: list[Parameter], threshold: float) -> float:
    """Scale all unfrozen grads so their global L2 norm is <= threshold.

    Returns the scale factor applied (1.0 when no clipping happened).
    """
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    sq = 0.0
    for p in params:
        if not p.frozen:
            sq += float((p.grad * p.grad).sum())
    norm = np.sqrt(sq)
    if norm <= threshold or norm == 0.0:
        return 1.0
    scale = threshold / norm
    for p in params:
        if not p.frozen:
            p.grad *= scale
    return scale


def sgd_step(params: list[Parameter], learning_rate: float) -> None:
    """value <- value - lr * grad for unfrozen parameters; zero all grads."""
    for p in params:
        if not p.frozen:
            p.value -= learning_rate * p.grad
        p.grad[...] = 0.0


def add_gaussian_noise(params: list[Parameter], stddev: float,
                       rng: np.random.Generator) -> list[tuple[Parameter, np.ndarray]]:
    """Perturb weights in place with N(0, stddev^2) noise.

    Returns a restore handle holding pristine copies; pass it to
    restore_weights so the optimizer always updates clean weights and frozen
    parameters stay bit-identical.
    """
    if stddev < 0:
        raise ValueError("noise stddev must be >= 0")
    if stddev == 0:
        return []
    handle = []
    for p in params:
        handle.append((p, p.value.copy()))
        p.value += rng.normal(0.0, stddev, size=p.value.shape).astype(p.value.dtype)
    return handle


def restore_weights(handle: list[tuple[Parameter, np.ndarray]]) -> None:
    for p, clean in handle:
        p.value[...] = clean


def dropout_mask(dim: int, p: float, rng: np.random.Generator,
                 dtype=np.float64) -> np.ndarray:
    """Inverted-dropout keep mask: Bernoulli(1-p) scaled by 1/(1-p)."""
    if not 0 <= p < 1:
        raise ValueError("dropout probability must be in [0, 1)")
    if p == 0:
        return np.ones(dim, dtype=dtype)
    keep = (rng.random(dim) >= p).astype(dtype)
    return keep / (1.0 - p)


# ---------------------------------------------------------------------------
# Checkpoint serialization.  Layout: magic "BTX1", 8-byte little-endian
# manifest length, canonical-JSON manifest, then each parameter's raw
# little-endian values in manifest order.


def save_params(path, params: list[Parameter], extra: dict | None = None) -> None:
    dtype = params[0].value.dtype
    precision = {"float64": "float64", "float32": "float32"}[dtype.name]
    wire = "<f8" if precision == "float64" else "<f4"
    manifest = {
        "format": 1,
        "precision": precision,
        "params": [
            {"name": p.name, "group": p.group, "shape": list(p.value.shape),
             "frozen": bool(p.frozen)}
            for p in params
        ],
    }
    if extra:
        manifest.update(extra)
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        for p in params:
            f.write(np.ascontiguousarray(p.value, dtype=wire).tobytes())


def load_params(path) -> tuple[list[Parameter], dict]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        n = int.from_bytes(f.read(8), "little")
        manifest = json.loads(f.read(n).decode("utf-8"))
        wire = "<f8" if manifest["precision"] == "float64" else "<f4"
        dtype = np.float64 if manifest["precision"] == "float64" else np.float32
        params = []
        for entry in manifest["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * np.dtype(wire).itemsize)
            value = np.frombuffer(raw, dtype=wire).astype(dtype).reshape(shape)
            params.append(Parameter(entry["name"], entry["group"], value.copy(),
                                    frozen=bool(entry.get("frozen", False))))
    return params, manifest


def param_fingerprint(params: list[Parameter], groups: set[str] | None = None) -> str:
    """sha256 over names and raw bytes; optionally restricted to some groups."""
    h = hashlib.sha256()
    for p in params:
        if groups is not None and p.group not in groups:
            continue
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.value).tobytes())
    return h.hexdigest()
