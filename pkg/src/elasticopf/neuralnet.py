"""Unified elastic MLP: shared ReLU trunk, growing input columns and output rows.

Network indices are 0-based. Network k uses input-column blocks 0..k, the
shared trunk and output blocks 0..k; blocks above k are never read or
written while working on k.

Parameter names (declaration order): ``in.<j>``, ``b1``, ``hidden.<i>.W``,
``hidden.<i>.b``, ``out.<j>.W``, ``out.<j>.b``.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .dataset import InvalidSlotMap, Scaler

CHECKPOINT_MAGIC = b"ELASTNN\x00"
CHECKPOINT_VERSION = 1


class LengthMismatch(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class EmptyTrainSet(ValueError):
    pass


class CorruptFile(ValueError):
    pass


class VersionMismatch(ValueError):
    pass


@dataclass
class ElasticDnn:
    in_sizes: tuple[int, ...]   # cumulative input width per network
    out_sizes: tuple[int, ...]  # cumulative output height per network
    hidden_dims: tuple[int, ...]
    input_blocks: list[np.ndarray]   # (h1, in_sizes[j] - in_sizes[j-1])
    b1: np.ndarray
    hidden: list[tuple[np.ndarray, np.ndarray]]
    output_blocks: list[tuple[np.ndarray, np.ndarray]]
    va_mask: np.ndarray  # True at angle rows of the largest output vector
    seed: int | None = None

    @property
    def n_networks(self) -> int:
        return len(self.in_sizes)

    def params(self, k: int | None = None) -> dict[str, np.ndarray]:
        """Name -> array views of the parameters active for network k (all when None)."""
        top = self.n_networks if k is None else k + 1
        p = {f"in.{j}": self.input_blocks[j] for j in range(top)}
        p["b1"] = self.b1
        for i, (W, b) in enumerate(self.hidden):
            p[f"hidden.{i}.W"] = W
            p[f"hidden.{i}.b"] = b
        for j in range(top):
            p[f"out.{j}.W"], p[f"out.{j}.b"] = self.output_blocks[j]
        return p

    def copy(self) -> "ElasticDnn":
        return ElasticDnn(self.in_sizes, self.out_sizes, self.hidden_dims,
                          [a.copy() for a in self.input_blocks], self.b1.copy(),
                          [(W.copy(), b.copy()) for W, b in self.hidden],
                          [(W.copy(), b.copy()) for W, b in self.output_blocks],
                          self.va_mask.copy(), self.seed)

    def astype(self, dtype) -> "ElasticDnn":
        net = self.copy()
        net.input_blocks = [a.astype(dtype) for a in net.input_blocks]
        net.b1 = net.b1.astype(dtype)
        net.hidden = [(W.astype(dtype), b.astype(dtype)) for W, b in net.hidden]
        net.output_blocks = [(W.astype(dtype), b.astype(dtype)) for W, b in net.output_blocks]
        return net


def _check_sizes(sizes, what):
    sizes = tuple(int(s) for s in sizes)
    if not sizes or sizes[0] <= 0 or any(a >= b for a, b in zip(sizes, sizes[1:])):
        raise InvalidSlotMap(f"{what} sizes must be positive and strictly increasing: {sizes}")
    return sizes


def default_va_mask(out_sizes) -> np.ndarray:
    """Each output block holds magnitudes in its first half, angles in its second."""
    edges = (0, *out_sizes)
    parts = []
    for a, b in zip(edges, edges[1:]):
        if (b - a) % 2:
            raise InvalidSlotMap(f"output block of odd height {b - a}")
        parts.append(np.repeat([False, True], (b - a) // 2))
    return np.concatenate(parts)


def init_elastic_dnn(slot_maps, hidden_dims, seed: int = 0, va_mask=None,
                     dtype=np.float64) -> ElasticDnn:
    """He-uniform ReLU layers, Xavier-uniform sigmoid output, zero biases.

    ``slot_maps`` is ``(in_sizes, out_sizes)``, one cumulative width per network.
    The full first-layer and output matrices are drawn at once and then split
    into per-network blocks.
    """
    in_sizes, out_sizes = slot_maps
    in_sizes = _check_sizes(in_sizes, "input")
    out_sizes = _check_sizes(out_sizes, "output")
    if len(in_sizes) != len(out_sizes):
        raise InvalidSlotMap("input and output slot maps list different network counts")
    hidden_dims = tuple(int(h) for h in hidden_dims)
    if not hidden_dims or min(hidden_dims) <= 0:
        raise InvalidSlotMap(f"hidden_dims must be non-empty and positive: {hidden_dims}")
    if va_mask is None:
        va_mask = default_va_mask(out_sizes)
    va_mask = np.asarray(va_mask, dtype=bool)
    if va_mask.shape != (out_sizes[-1],):
        raise InvalidSlotMap("va_mask must cover the largest output vector")

    rng = np.random.default_rng(seed)

    def he(n_out, n_in):
        lim = math.sqrt(6.0 / n_in)
        return rng.uniform(-lim, lim, size=(n_out, n_in)).astype(dtype)

    W1 = he(hidden_dims[0], in_sizes[-1])
    hidden = []
    for a, b in zip(hidden_dims, hidden_dims[1:]):
        hidden.append((he(b, a), np.zeros(b, dtype=dtype)))
    lim = math.sqrt(6.0 / (hidden_dims[-1] + out_sizes[-1]))
    Wo = rng.uniform(-lim, lim, size=(out_sizes[-1], hidden_dims[-1])).astype(dtype)

    in_edges = (0, *in_sizes)
    out_edges = (0, *out_sizes)
    input_blocks = [W1[:, a:b].copy() for a, b in zip(in_edges, in_edges[1:])]
    output_blocks = [(Wo[a:b].copy(), np.zeros(b - a, dtype=dtype))
                     for a, b in zip(out_edges, out_edges[1:])]
    return ElasticDnn(in_sizes, out_sizes, hidden_dims, input_blocks,
                      np.zeros(hidden_dims[0], dtype=dtype), hidden, output_blocks, va_mask, seed)


def _active(dnn: ElasticDnn, k: int):
    if not 0 <= k < dnn.n_networks:
        raise IndexError(f"network index {k} outside 0..{dnn.n_networks - 1}")
    W1 = np.hstack(dnn.input_blocks[:k + 1])
    Wo = np.vstack([W for W, _ in dnn.output_blocks[:k + 1]])
    bo = np.concatenate([b for _, b in dnn.output_blocks[:k + 1]])
    return W1, Wo, bo


def _forward(dnn, k, U):
    W1, Wo, bo = _active(dnn, k)
    acts = [U]
    h = np.maximum(U @ W1.T + dnn.b1, 0.0)
    acts.append(h)
    for W, b in dnn.hidden:
        h = np.maximum(h @ W.T + b, 0.0)
        acts.append(h)
    y = expit(h @ Wo.T + bo)
    return y, acts, W1, Wo


def forward(dnn: ElasticDnn, k: int, u) -> np.ndarray:
    """Scaled prediction for network k; ``u`` is one input vector or a (batch, in) matrix."""
    u = np.asarray(u, dtype=dnn.b1.dtype)
    if u.shape[-1] != dnn.in_sizes[k]:
        raise LengthMismatch(f"network {k} expects {dnn.in_sizes[k]} inputs, got {u.shape[-1]}")
    single = u.ndim == 1
    y = _forward(dnn, k, u[None, :] if single else u)[0]
    return y[0] if single else y


def inference_view(dnn: ElasticDnn, k: int):
    """Single-sample predictor for network k with the active blocks stacked once.

    Returns a callable u -> scaled prediction; it snapshots the weights, so
    rebuild it after further training.
    """
    W1, Wo, bo = _active(dnn, k)
    layers = [(W1, dnn.b1)] + list(dnn.hidden)
    n_in = dnn.in_sizes[k]

    def predict(u):
        if u.shape[-1] != n_in:
            raise LengthMismatch(f"network {k} expects {n_in} inputs, got {u.shape[-1]}")
        h = u
        for W, b in layers:
            h = W @ h + b
            np.maximum(h, 0.0, out=h)
        return expit(Wo @ h + bo)
    return predict


def loss_weights(dnn: ElasticDnn, k: int, gamma: float) -> np.ndarray:
    mask = dnn.va_mask[:dnn.out_sizes[k]]
    return np.where(mask, gamma, 1.0)


def loss_and_grads(dnn: ElasticDnn, k: int, U, X, gamma: float = 1.0):
    """Batch-mean of sum_i w_i (y_i - x_i)^2 (w = 1 on magnitudes, gamma on angles).

    Returns ``(loss, grads)``; ``grads`` only holds the blocks active for k.
    """
    U = np.asarray(U, dtype=dnn.b1.dtype)
    X = np.asarray(X, dtype=dnn.b1.dtype)
    if U.ndim == 1:
        U, X = U[None, :], X[None, :]
    if U.shape[1] != dnn.in_sizes[k] or X.shape[1] != dnn.out_sizes[k] or len(U) != len(X):
        raise LengthMismatch(f"batch shapes {U.shape}/{X.shape} do not fit network {k}")
    B = len(U)
    w = loss_weights(dnn, k, gamma)
    y, acts, W1, Wo = _forward(dnn, k, U)
    err = y - X
    loss = float(np.sum(w * err**2) / B)

    dz = (2.0 / B) * w * err * y * (1.0 - y)
    grads: dict[str, np.ndarray] = {}
    h_last = acts[-1]
    dWo = dz.T @ h_last
    dbo = dz.sum(axis=0)
    edges = (0, *dnn.out_sizes[:k + 1])
    for j, (a, b) in enumerate(zip(edges, edges[1:])):
        grads[f"out.{j}.W"] = dWo[a:b]
        grads[f"out.{j}.b"] = dbo[a:b]
    delta = (dz @ Wo) * (h_last > 0)
    for i in range(len(dnn.hidden) - 1, -1, -1):
        W, _ = dnn.hidden[i]
        h_prev = acts[i + 1]
        grads[f"hidden.{i}.W"] = delta.T @ h_prev
        grads[f"hidden.{i}.b"] = delta.sum(axis=0)
        delta = (delta @ W) * (h_prev > 0)
    dW1 = delta.T @ U
    grads["b1"] = delta.sum(axis=0)
    edges = (0, *dnn.in_sizes[:k + 1])
    for j, (a, b) in enumerate(zip(edges, edges[1:])):
        grads[f"in.{j}"] = dW1[:, a:b]
    return loss, grads


@dataclass
class AdamState:
    """Adam moments per parameter block. Each block keeps its own step count, so a
    block only advances its bias correction when it actually receives a gradient."""
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_dnn(cls, dnn: ElasticDnn) -> "AdamState":
        p = dnn.params()
        return cls(m={n: np.zeros_like(a) for n, a in p.items()},
                   v={n: np.zeros_like(a) for n, a in p.items()},
                   steps={n: 0 for n in p})


def adam_step(dnn: ElasticDnn, grads: dict, state: AdamState, lr: float):
    """In-place Adam update of the blocks named in ``grads``; others stay untouched."""
    params = dnn.params()
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        if name not in params:
            raise ShapeMismatch(f"gradient for unknown parameter {name!r}")
        p = params[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.steps[name] = 0
        t = state.steps[name] + 1
        state.steps[name] = t
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return dnn, state


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    alpha: float = 1e-3
    batch_size: int = 100
    epochs: int = 500
    gamma: float = 1.0
    lr_halving_period: int = 50
    seed: int = 0
    schedule: str = "round_robin"
    dtype: str = "float64"

    def __post_init__(self):
        if self.alpha <= 0 or self.batch_size < 1 or self.gamma < 0:
            raise ValueError("need alpha > 0, batch_size >= 1 and gamma >= 0")
        if self.schedule not in ("round_robin", "sequential"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class TrainingData:
    """Scaled (U, X) arrays per network index; absent networks are not trained."""
    train: dict[int, tuple[np.ndarray, np.ndarray]]
    test: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @classmethod
    def from_dataset(cls, ds, networks=None) -> "TrainingData":
        networks = range(len(ds.cases)) if networks is None else networks
        return cls(train={k: ds.arrays(k, "train") for k in networks},
                   test={k: ds.arrays(k, "test") for k in networks if ds.test[k]})


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    adam: AdamState | None = field(default=None, repr=False)

    def to_csv(self) -> str:
        if not self.epochs:
            return "epoch,lr\n"
        nets = sorted(self.epochs[0]["train_loss"])
        cols = ["epoch", "lr"] + [f"train_loss_{k}" for k in nets] + [f"test_loss_{k}" for k in nets]
        lines = [",".join(cols)]
        for e in self.epochs:
            row = [str(e["epoch"]), repr(e["lr"])]
            row += [repr(e["train_loss"][k]) for k in nets]
            row += [repr(e["test_loss"].get(k, float("nan"))) for k in nets]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def evaluate_loss(dnn, k, U, X, gamma, chunk: int = 4096) -> float:
    total = 0.0
    w = loss_weights(dnn, k, gamma)
    for i in range(0, len(U), chunk):
        y = forward(dnn, k, U[i:i + chunk])
        total += float(np.sum(w * (y - X[i:i + chunk]) ** 2))
    return total / max(len(U), 1)


def train_incremental(dnn: ElasticDnn, data: TrainingData, config: TrainConfig,
                      adam: AdamState | None = None, start_epoch: int = 0,
                      history: TrainHistory | None = None, log=None):
    """Incremental training over the networks present in ``data``.

    Each epoch every network's training set is shuffled and cut into
    ceil(n / batch_size) mini-batches. Batches are visited round-robin across
    networks (k = 0, 1, ..., K-1, 0, 1, ...); each one is backpropagated and
    applied immediately, touching only the blocks active for its network.
    The learning rate halves every ``lr_halving_period`` epochs, counted from
    epoch 0 so a resumed run continues the same schedule.
    """
    nets = sorted(data.train)
    if not nets or any(len(data.train[k][0]) == 0 for k in nets):
        raise EmptyTrainSet("every trained network needs at least one training sample")
    for k in nets:
        if k >= dnn.n_networks:
            raise LengthMismatch(f"data for network {k} but the model has {dnn.n_networks}")
    dtype = np.dtype(config.dtype)
    if dnn.b1.dtype != dtype:
        dnn = dnn.astype(dtype)
    train = {k: (U.astype(dtype), X.astype(dtype)) for k, (U, X) in data.train.items()}
    adam = adam or AdamState.for_dnn(dnn)
    history = history or TrainHistory()
    history.meta.update({"gamma": config.gamma, "loss": "batch-mean of per-bus sum",
                         "networks": nets, "config": config.to_dict()})

    for e in range(start_epoch, start_epoch + config.epochs):
        lr = config.alpha * 0.5 ** (e // config.lr_halving_period) if config.lr_halving_period \
            else config.alpha
        rng = np.random.default_rng([config.seed, e])
        batches = {}
        for k in nets:
            n = len(train[k][0])
            perm = rng.permutation(n)
            batches[k] = [perm[i:i + config.batch_size] for i in range(0, n, config.batch_size)]
        if config.schedule == "round_robin":
            order = [(k, b) for b in range(max(len(v) for v in batches.values()))
                     for k in nets if b < len(batches[k])]
        else:
            order = [(k, b) for k in nets for b in range(len(batches[k]))]
        sums = {k: 0.0 for k in nets}
        for k, b in order:
            idx = batches[k][b]
            U, X = train[k]
            loss, grads = loss_and_grads(dnn, k, U[idx], X[idx], config.gamma)
            adam_step(dnn, grads, adam, lr)
            sums[k] += loss * len(idx)
        entry = {"epoch": e, "lr": lr,
                 "train_loss": {k: sums[k] / len(train[k][0]) for k in nets},
                 "test_loss": {k: evaluate_loss(dnn, k, *data.test[k], config.gamma)
                               for k in nets if k in data.test}}
        history.epochs.append(entry)
        if log is not None:
            log(entry)
    history.adam = adam
    return dnn, history


# --------------------------------------------------------------------------
# counts and checkpoints


def _mlp_count(n_in, n_out, hidden_dims) -> int:
    dims = (n_in, *hidden_dims, n_out)
    return sum(a * b + b for a, b in zip(dims, dims[1:]))


def param_count(dnn: ElasticDnn) -> int:
    return int(sum(a.size for a in dnn.params().values()))


def param_count_separate(slot_maps, hidden_dims) -> int:
    """Parameters of one standalone MLP per network with the same hidden widths."""
    in_sizes, out_sizes = slot_maps
    return sum(_mlp_count(i, o, hidden_dims) for i, o in zip(in_sizes, out_sizes))


def save_checkpoint(dnn: ElasticDnn, path, scaler=None, extra: dict | None = None,
                    adam: AdamState | None = None) -> int:
    """Write a versioned binary checkpoint and return its size in bytes.

    Layout: magic, uint32 version, uint32 header length, UTF-8 JSON header,
    then every block as little-endian float64 in declared order (Adam moments
    follow the parameters when saved). The header stores the payload SHA-256.
    """
    params = dnn.params()
    names = list(params)
    blocks = [(n, params[n]) for n in names]
    if adam is not None:
        blocks += [(f"adam.m.{n}", adam.m[n]) for n in names]
        blocks += [(f"adam.v.{n}", adam.v[n]) for n in names]
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in blocks)
    header = {
        "in_sizes": list(dnn.in_sizes), "out_sizes": list(dnn.out_sizes),
        "hidden_dims": list(dnn.hidden_dims), "seed": dnn.seed,
        "dtype": str(dnn.b1.dtype), "va_mask": dnn.va_mask.astype(int).tolist(),
        "blocks": [{"name": n, "shape": list(a.shape)} for n, a in blocks],
        "n_params": param_count(dnn),
        "adam": None if adam is None else {"steps": adam.steps, "beta1": adam.beta1,
                                           "beta2": adam.beta2, "eps": adam.eps},
        "scaler": scaler.to_dict() if scaler is not None else None,
        "extra": extra or {},
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    data = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)) + hbytes + payload
    Path(path).write_bytes(data)
    return len(data)


@dataclass
class Checkpoint:
    dnn: ElasticDnn
    scaler: Scaler | None
    extra: dict
    adam: AdamState | None
    size_bytes: int


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    head = len(CHECKPOINT_MAGIC) + 8
    if len(data) < head or not data.startswith(CHECKPOINT_MAGIC):
        raise CorruptFile(f"{path}: not an elastic-network checkpoint")
    version, hlen = struct.unpack("<II", data[len(CHECKPOINT_MAGIC):head])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        header = json.loads(data[head:head + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CorruptFile(f"{path}: unreadable header") from None
    payload = data[head + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptFile(f"{path}: payload checksum mismatch (truncated or modified)")

    arrays = {}
    off = 0
    for blk in header["blocks"]:
        n = int(np.prod(blk["shape"])) if blk["shape"] else 1
        arrays[blk["name"]] = np.frombuffer(payload, dtype="<f8", count=n, offset=off) \
            .reshape(blk["shape"]).astype(np.float64)
        off += 8 * n
    dtype = np.dtype(header["dtype"])
    K = len(header["in_sizes"])
    n_hidden = len(header["hidden_dims"]) - 1
    cast = lambda a: a.astype(dtype)  # noqa: E731
    dnn = ElasticDnn(
        tuple(header["in_sizes"]), tuple(header["out_sizes"]), tuple(header["hidden_dims"]),
        [cast(arrays[f"in.{j}"]) for j in range(K)], cast(arrays["b1"]),
        [(cast(arrays[f"hidden.{i}.W"]), cast(arrays[f"hidden.{i}.b"])) for i in range(n_hidden)],
        [(cast(arrays[f"out.{j}.W"]), cast(arrays[f"out.{j}.b"])) for j in range(K)],
        np.array(header["va_mask"], dtype=bool), header["seed"])
    adam = None
    if header["adam"] is not None:
        names = list(dnn.params())
        a = header["adam"]
        adam = AdamState(m={n: cast(arrays[f"adam.m.{n}"]) for n in names},
                         v={n: cast(arrays[f"adam.v.{n}"]) for n in names},
                         steps={n: int(a["steps"][n]) for n in names},
                         beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
    scaler = Scaler.from_dict(header["scaler"]) if header["scaler"] else None
    return Checkpoint(dnn, scaler, header["extra"], adam, len(data))
