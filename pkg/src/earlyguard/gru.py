"""Stacked, optionally bidirectional GRU classifier written directly in numpy.

Cell equations (h_0 = 0)::

    z_t  = sigmoid(x_t W_z + h_{t-1} U_z + b_z)
    r_t  = sigmoid(x_t W_r + h_{t-1} U_r + b_r)
    hc_t = tanh(x_t W_h + (r_t * h_{t-1}) U_h + b_h)
    h_t  = (1 - z_t) * h_{t-1} + z_t * hc_t

A backward direction runs the same recurrence over the reversed sequence.
Per-timestep outputs of both directions are concatenated and fed to the
next layer. The head reads the final state of each direction of the top
layer (last step forward, first step backward) and applies an affine map
and a sigmoid.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .traces import N_FEATURES, BehaviorTrace, LabeledDataset, Normalizer, TraceError, standardized_batch

log = logging.getLogger(__name__)

DEPTHS = (1, 2, 3)
DROPOUT_RATES = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
REG_MODES = ("none", "l1", "l2", "l1_and_l2")
BATCH_SIZES = (32, 64, 128, 256)
MAX_HIDDEN = 500
MAX_EPOCHS = 500
MAX_TRAIN_TIME = 20

L1_STRENGTH = 0.01
L2_STRENGTH = 0.01
SCORE_CLAMP = 1e-7

ADAM_LR = 0.001
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

GATES = ("z", "r", "h")

# names used in config files, matching the published hyperparameter table
TABLE_NAMES = {
    "depth": "Depth",
    "bidirectional": "Bidirectional",
    "hidden_neurons": "Hidden neurons",
    "epochs": "Epochs",
    "dropout_rate": "Dropout rate",
    "weight_reg": "Weight regularisation",
    "bias_reg": "Bias regularisation",
    "batch_size": "Batch size",
    "train_time_seconds": "Time into execution",
}
_REG_TABLE = {"none": "None", "l1": "l1", "l2": "l2", "l1_and_l2": "l1 and l2"}
REG_ALIASES = {v.lower(): k for k, v in _REG_TABLE.items()} | {k: k for k in REG_MODES}


class ModelError(ValueError):
    """Invalid configuration, malformed model file or numerical failure."""


@dataclass(frozen=True)
class HyperConfig:
    depth: int = 1
    bidirectional: bool = False
    hidden_neurons: int = 16
    epochs: int = 10
    dropout_rate: float = 0.0
    weight_reg: str = "none"
    bias_reg: str = "none"
    batch_size: int = 64
    train_time_seconds: int = 5

    def __post_init__(self):
        problems = []
        if self.depth not in DEPTHS:
            problems.append(f"depth {self.depth!r} not in {DEPTHS}")
        if not isinstance(self.bidirectional, bool):
            problems.append("bidirectional must be a bool")
        if not (isinstance(self.hidden_neurons, int) and 1 <= self.hidden_neurons <= MAX_HIDDEN):
            problems.append(f"hidden_neurons {self.hidden_neurons!r} outside 1..{MAX_HIDDEN}")
        if not (isinstance(self.epochs, int) and 1 <= self.epochs <= MAX_EPOCHS):
            problems.append(f"epochs {self.epochs!r} outside 1..{MAX_EPOCHS}")
        if self.dropout_rate not in DROPOUT_RATES:
            problems.append(f"dropout_rate {self.dropout_rate!r} not in {DROPOUT_RATES}")
        if self.weight_reg not in REG_MODES:
            problems.append(f"weight_reg {self.weight_reg!r} not in {REG_MODES}")
        if self.bias_reg not in REG_MODES:
            problems.append(f"bias_reg {self.bias_reg!r} not in {REG_MODES}")
        if self.batch_size not in BATCH_SIZES:
            problems.append(f"batch_size {self.batch_size!r} not in {BATCH_SIZES}")
        if not (isinstance(self.train_time_seconds, int) and 1 <= self.train_time_seconds <= MAX_TRAIN_TIME):
            problems.append(f"train_time_seconds {self.train_time_seconds!r} outside 1..{MAX_TRAIN_TIME}")
        if problems:
            raise ModelError("invalid HyperConfig: " + "; ".join(problems))

    @property
    def directions(self) -> int:
        return 2 if self.bidirectional else 1

    def to_dict(self) -> dict:
        return asdict(self)

    def to_table(self) -> dict:
        d = self.to_dict()
        out = {}
        for key, name in TABLE_NAMES.items():
            v = d[key]
            out[name] = _REG_TABLE[v] if key in ("weight_reg", "bias_reg") else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "HyperConfig":
        """Accept either snake_case keys or the table's column names."""
        reverse = {v: k for k, v in TABLE_NAMES.items()}
        kwargs = {}
        for key, value in d.items():
            name = reverse.get(key, key)
            if name not in TABLE_NAMES:
                raise ModelError(f"unknown config field {key!r}")
            if name in ("weight_reg", "bias_reg"):
                parsed = REG_ALIASES.get(str(value).lower())
                if parsed is None:
                    raise ModelError(f"unknown regularisation {value!r}")
                value = parsed
            elif name == "dropout_rate":
                value = round(float(value), 1)
            elif name == "bidirectional" and not isinstance(value, bool):
                raise ModelError(f"bidirectional must be true/false, got {value!r}")
            kwargs[name] = value
        return cls(**kwargs)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


CONFIG_A = HyperConfig(3, True, 74, 53, 0.3, "l2", "none", 64, 5)
CONFIG_B = HyperConfig(1, True, 358, 112, 0.1, "l2", "none", 64, 5)
CONFIG_C = HyperConfig(2, False, 195, 39, 0.1, "l1", "none", 64, 5)
PRESETS = {"A": CONFIG_A, "B": CONFIG_B, "C": CONFIG_C}


def layer_input_dims(config: HyperConfig, input_dim: int = N_FEATURES) -> list[int]:
    return [input_dim] + [config.hidden_neurons * config.directions] * (config.depth - 1)


def param_shapes(config: HyperConfig, input_dim: int = N_FEATURES) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list; this order is also the model-file order."""
    n = config.hidden_neurons
    shapes = []
    dirs = ("fwd", "bwd")[: config.directions]
    for layer, d_in in enumerate(layer_input_dims(config, input_dim)):
        for direction in dirs:
            prefix = f"L{layer}.{direction}."
            shapes += [(prefix + f"W_{g}", (d_in, n)) for g in GATES]
            shapes += [(prefix + f"U_{g}", (n, n)) for g in GATES]
            shapes += [(prefix + f"b_{g}", (n,)) for g in GATES]
    shapes.append(("head.w", (n * config.directions,)))
    shapes.append(("head.b", (1,)))
    return shapes


def is_bias(name: str) -> bool:
    return name.rsplit(".", 1)[-1].startswith("b")


@dataclass
class GruNetwork:
    config: HyperConfig
    params: dict[str, np.ndarray]
    input_dim: int = N_FEATURES
    normalizer: Normalizer | None = None
    seed: int = 0
    train_seed: int | None = None
    trained: bool = False

    def __post_init__(self):
        expected = param_shapes(self.config, self.input_dim)
        if [k for k, _ in expected] != list(self.params):
            raise ModelError("parameter names do not match the architecture")
        for name, shape in expected:
            if self.params[name].shape != shape:
                raise ModelError(f"{name}: shape {self.params[name].shape}, expected {shape}")

    def copy(self) -> "GruNetwork":
        return GruNetwork(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            self.input_dim,
            self.normalizer,
            self.seed,
            self.train_seed,
            self.trained,
        )

    def provenance(self) -> dict:
        return {"config_hash": self.config.digest(), "seed": self.seed, "train_seed": self.train_seed}


def init_params(config: HyperConfig, seed: int, input_dim: int = N_FEATURES) -> GruNetwork:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config, input_dim):
        if is_bias(name):
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[0]
            fan_out = shape[1] if len(shape) > 1 else 1
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return GruNetwork(config, params, input_dim, seed=seed)


def parameter_count(network: GruNetwork | HyperConfig, input_dim: int | None = None) -> int:
    if isinstance(network, GruNetwork):
        config, input_dim = network.config, network.input_dim
    else:
        config, input_dim = network, input_dim or N_FEATURES
    n = config.hidden_neurons
    total = 0
    for d_in in layer_input_dims(config, input_dim):
        total += config.directions * 3 * (n * d_in + n * n + n)
    return total + n * config.directions + 1


# forward / backward


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_LO = np.nextafter(0.0, 1.0)
_HI = np.nextafter(1.0, 0.0)


def _run_direction(p, prefix, X):
    """One GRU direction over X (B, T, d). Returns outputs (B, T, n) and cache."""
    B, T, _ = X.shape
    Wz, Wr, Wh = (p[prefix + f"W_{g}"] for g in GATES)
    Uz, Ur, Uh = (p[prefix + f"U_{g}"] for g in GATES)
    bz, br, bh = (p[prefix + f"b_{g}"] for g in GATES)
    n = Uz.shape[0]
    xz = X @ Wz + bz
    xr = X @ Wr + br
    xh = X @ Wh + bh
    H = np.empty((B, T, n))
    Z = np.empty_like(H)
    R = np.empty_like(H)
    HC = np.empty_like(H)
    h = np.zeros((B, n))
    for t in range(T):
        z = _sigmoid(xz[:, t] + h @ Uz)
        r = _sigmoid(xr[:, t] + h @ Ur)
        hc = np.tanh(xh[:, t] + (r * h) @ Uh)
        h = (1.0 - z) * h + z * hc
        Z[:, t], R[:, t], HC[:, t], H[:, t] = z, r, hc, h
    return H, (X, H, Z, R, HC)


def _back_direction(p, prefix, cache, dH, grads):
    """Accumulate parameter grads for one direction; return dX."""
    X, H, Z, R, HC = cache
    B, T, _ = X.shape
    Wz, Wr, Wh = (p[prefix + f"W_{g}"] for g in GATES)
    Uz, Ur, Uh = (p[prefix + f"U_{g}"] for g in GATES)
    n = Uz.shape[0]
    daz_all = np.empty((B, T, n))
    dar_all = np.empty_like(daz_all)
    dah_all = np.empty_like(daz_all)
    dUz = np.zeros_like(Uz)
    dUr = np.zeros_like(Ur)
    dUh = np.zeros_like(Uh)
    dh_next = np.zeros((B, n))
    for t in range(T - 1, -1, -1):
        h_prev = H[:, t - 1] if t > 0 else np.zeros((B, n))
        z, r, hc = Z[:, t], R[:, t], HC[:, t]
        dh = dH[:, t] + dh_next
        dah = dh * z * (1.0 - hc * hc)
        daz = dh * (hc - h_prev) * z * (1.0 - z)
        drh = dah @ Uh.T
        dar = drh * h_prev * r * (1.0 - r)
        dUh += (r * h_prev).T @ dah
        dUz += h_prev.T @ daz
        dUr += h_prev.T @ dar
        dh_next = dh * (1.0 - z) + drh * r + daz @ Uz.T + dar @ Ur.T
        daz_all[:, t], dar_all[:, t], dah_all[:, t] = daz, dar, dah
    d_in = X.shape[2]
    Xf = X.reshape(-1, d_in)
    for g, da in zip(GATES, (daz_all, dar_all, dah_all)):
        daf = da.reshape(-1, n)
        grads[prefix + f"W_{g}"] = Xf.T @ daf
        grads[prefix + f"b_{g}"] = daf.sum(axis=0)
    grads[prefix + "U_z"] = dUz
    grads[prefix + "U_r"] = dUr
    grads[prefix + "U_h"] = dUh
    return daz_all @ Wz.T + dar_all @ Wr.T + dah_all @ Wh.T


def _check_finite(arr, what):
    bad = ~np.isfinite(arr)
    if bad.any():
        t = int(np.argwhere(bad)[0][1]) if arr.ndim == 3 else -1
        raise ModelError(f"non-finite values in {what} at timestep {t}")


def _dropout_masks(config: HyperConfig, shape_for_layer, dropout_seed):
    rate = config.dropout_rate
    rng = np.random.default_rng(dropout_seed)
    masks = []
    for layer in range(config.depth):
        shape = shape_for_layer(layer)
        masks.append((rng.random(shape) >= rate) / (1.0 - rate))
    return masks


def forward(network: GruNetwork, sequence, training_mode: bool = False, dropout_seed: int = 0):
    """Score one sequence (T, d) or a batch (B, T, d).

    Returns ``(scores, cache)``; ``scores`` is a float for a single sequence.
    Dropout masks are drawn from ``dropout_seed`` only when training.
    """
    X = np.asarray(sequence, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    if X.ndim != 3 or X.shape[2] != network.input_dim:
        raise ModelError(f"expected (batch, time, {network.input_dim}) input, got {X.shape}")
    if X.shape[1] < 2:
        raise ModelError("sequence length must be at least 2 (t >= 1 second)")
    config, p = network.config, network.params
    dirs = ("fwd", "bwd")[: config.directions]
    n = config.hidden_neurons
    B, T, _ = X.shape

    masks = None
    if training_mode and config.dropout_rate > 0:
        masks = _dropout_masks(config, lambda _: (B, T, n * len(dirs)), dropout_seed)

    layer_caches = []
    inp = X
    for layer in range(config.depth):
        outs, caches = [], []
        for direction in dirs:
            prefix = f"L{layer}.{direction}."
            src = inp if direction == "fwd" else inp[:, ::-1]
            H, cache = _run_direction(p, prefix, src)
            _check_finite(H, f"layer {layer} ({direction})")
            outs.append(H if direction == "fwd" else H[:, ::-1])
            caches.append(cache)
        out = np.concatenate(outs, axis=2) if len(outs) > 1 else outs[0]
        if masks is not None:
            out = out * masks[layer]
        layer_caches.append(caches)
        inp = out

    feats = [inp[:, -1, :n]]
    if config.bidirectional:
        feats.append(inp[:, 0, n:])
    feat = np.concatenate(feats, axis=1)
    logit = feat @ p["head.w"] + p["head.b"][0]
    if not np.all(np.isfinite(logit)):
        raise ModelError("non-finite output logit")
    score = np.clip(_sigmoid(logit), _LO, _HI)
    cache = {"X": X, "layers": layer_caches, "masks": masks, "feat": feat, "top": inp, "score": score}
    return (float(score[0]) if single else score), cache


def regularization_penalty(network: GruNetwork) -> float:
    cfg = network.config
    total = 0.0
    for name, w in network.params.items():
        mode = cfg.bias_reg if is_bias(name) else cfg.weight_reg
        if mode in ("l1", "l1_and_l2"):
            total += L1_STRENGTH * float(np.abs(w).sum())
        if mode in ("l2", "l1_and_l2"):
            total += L2_STRENGTH * float((w * w).sum())
    return total


def bce(score, label):
    s = np.clip(score, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    return -(label * np.log(s) + (1 - label) * np.log(1.0 - s))


def loss_with_reg(network: GruNetwork, score: float, label: int) -> float:
    """Binary cross-entropy of one prediction plus the configured penalties."""
    return float(bce(score, label)) + regularization_penalty(network)


def batch_loss(network: GruNetwork, X, y, dropout_seed: int = 0, training_mode: bool = True) -> float:
    scores, _ = forward(network, X, training_mode, dropout_seed)
    return float(np.mean(bce(scores, np.asarray(y)))) + regularization_penalty(network)


def _batch_arrays(batch):
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray) and batch[0].ndim == 3:
        return batch[0], np.asarray(batch[1], dtype=np.float64)
    if not batch:
        raise ModelError("empty batch")
    lengths = {len(seq) for seq, _ in batch}
    if len(lengths) != 1:
        raise ModelError("all sequences in a batch must share one length")
    X = np.stack([np.asarray(seq, dtype=np.float64) for seq, _ in batch])
    y = np.array([lab for _, lab in batch], dtype=np.float64)
    return X, y


def loss_and_gradients(network: GruNetwork, batch, dropout_seed: int = 0, training_mode: bool = True):
    """Mean regularized loss over the batch and its exact gradient.

    ``batch`` is a list of ``(sequence, label)`` pairs or an ``(X, y)`` tuple.
    """
    X, y = _batch_arrays(batch)
    config, p = network.config, network.params
    B = X.shape[0]
    n = config.hidden_neurons
    dirs = ("fwd", "bwd")[: config.directions]
    scores, cache = forward(network, X, training_mode, dropout_seed)
    loss = float(np.mean(bce(scores, y))) + regularization_penalty(network)

    inside = (scores > SCORE_CLAMP) & (scores < 1.0 - SCORE_CLAMP)
    dlogit = np.where(inside, scores - y, 0.0) / B
    grads: dict[str, np.ndarray] = {}
    grads["head.w"] = cache["feat"].T @ dlogit
    grads["head.b"] = np.array([dlogit.sum()])
    dfeat = np.outer(dlogit, p["head.w"])

    top = cache["top"]
    d_out = np.zeros_like(top)
    d_out[:, -1, :n] = dfeat[:, :n]
    if config.bidirectional:
        d_out[:, 0, n:] = dfeat[:, n:]

    for layer in range(config.depth - 1, -1, -1):
        if cache["masks"] is not None:
            d_out = d_out * cache["masks"][layer]
        d_in = None
        for k, direction in enumerate(dirs):
            prefix = f"L{layer}.{direction}."
            dH = d_out[:, :, k * n : (k + 1) * n]
            if direction == "fwd":
                dX = _back_direction(p, prefix, cache["layers"][layer][k], dH, grads)
            else:
                dX = _back_direction(p, prefix, cache["layers"][layer][k], dH[:, ::-1], grads)[:, ::-1]
            d_in = dX if d_in is None else d_in + dX
        d_out = d_in

    cfg = config
    for name, w in p.items():
        mode = cfg.bias_reg if is_bias(name) else cfg.weight_reg
        if mode in ("l1", "l1_and_l2"):
            grads[name] = grads[name] + L1_STRENGTH * np.sign(w)
        if mode in ("l2", "l1_and_l2"):
            grads[name] = grads[name] + 2.0 * L2_STRENGTH * w
    ordered = {name: grads[name] for name in p}
    return loss, ordered


def gradients(network: GruNetwork, batch, dropout_seed: int = 0, training_mode: bool = True):
    return loss_and_gradients(network, batch, dropout_seed, training_mode)[1]


# optimisation


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state: AdamState, lr=ADAM_LR, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """One bias-corrected Adam update, applied in place; returns (params, state)."""
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


@dataclass
class TrainRecord:
    epoch_loss: list[float]
    epochs_run: int
    wall_time: float


def train(network: GruNetwork, train_set: LabeledDataset | Sequence[BehaviorTrace], normalizer: Normalizer, seed: int) -> TrainRecord:
    """Fit the network in place for ``config.epochs`` epochs of minibatch Adam."""
    config = network.config
    traces = list(train_set)
    if not traces:
        raise ModelError("empty training set")
    t = config.train_time_seconds
    short = [tr.sample_id for tr in traces if len(tr.snapshots) < t + 1]
    if short:
        raise ModelError(f"traces too short for t={t}: {', '.join(short)}")
    X = standardized_batch(traces, normalizer, t)
    y = np.array([tr.y for tr in traces], dtype=np.float64)
    network.normalizer = normalizer
    rng = np.random.default_rng(seed)
    state = AdamState()
    losses = []
    start = time.perf_counter()
    N = len(traces)
    for epoch in range(config.epochs):
        order = rng.permutation(N)
        total = 0.0
        for lo in range(0, N, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            dseed = int(rng.integers(2**63))
            loss, grads = loss_and_gradients(network, (X[idx], y[idx]), dseed)
            adam_step(network.params, grads, state)
            total += loss * len(idx)
        losses.append(total / N)
        log.debug("epoch %d loss %.6f", epoch + 1, losses[-1])
    network.trained = True
    network.train_seed = seed
    return TrainRecord(losses, config.epochs, time.perf_counter() - start)


# inference


def _masked(X, off_features):
    if off_features:
        X = X.copy()
        X[..., sorted(off_features)] = 0.0
    return X


def predict_many(network: GruNetwork, traces: Sequence[BehaviorTrace], t_seconds: int, off_features=()) -> np.ndarray:
    """Scores for many traces at one time; ``off_features`` are zeroed after standardizing."""
    if t_seconds < 1:
        raise ModelError("t=0 leaves no sequence to analyse; need t >= 1")
    if not traces:
        return np.empty(0)
    normalizer = network.normalizer or Normalizer.identity()
    try:
        X = standardized_batch(traces, normalizer, t_seconds)
    except TraceError as exc:
        raise ModelError(str(exc)) from None
    scores, _ = forward(network, _masked(X, off_features), training_mode=False)
    return scores


def predict_proba(network: GruNetwork, trace: BehaviorTrace, t_seconds: int) -> float:
    return float(predict_many(network, [trace], t_seconds)[0])


def classify(score: float, threshold: float = 0.5) -> int:
    """1 (malicious) when score >= threshold, else 0 (benign)."""
    return int(score >= threshold)


# model files
#
# layout: MAGIC (8 bytes) | version (uint32 LE) | header length (uint32 LE)
#         | header (UTF-8 JSON) | tensors as float64 LE, C order, header order

MAGIC = b"EGRUNET\x00"
FORMAT_VERSION = 1


def dump_model(network: GruNetwork) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "config": network.config.to_dict(),
        "input_dim": network.input_dim,
        "normalizer": network.normalizer.to_dict() if network.normalizer else None,
        "seed": network.seed,
        "train_seed": network.train_seed,
        "trained": network.trained,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in network.params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob]
    parts += [np.ascontiguousarray(v, dtype="<f8").tobytes() for v in network.params.values()]
    return b"".join(parts)


def parse_model(data: bytes) -> GruNetwork:
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise ModelError("not a model file (bad magic bytes)")
    version, hlen = struct.unpack_from("<II", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ModelError(f"unsupported model format version {version} (expected {FORMAT_VERSION})")
    pos = len(MAGIC) + 8
    if len(data) < pos + hlen:
        raise ModelError("truncated model file (header)")
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelError(f"corrupt model header: {exc}") from None
    pos += hlen
    config = HyperConfig(**header["config"])
    params = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if len(data) < pos + nbytes:
            raise ModelError(f"truncated model file (tensor {spec['name']})")
        params[spec["name"]] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(data):
        raise ModelError("trailing bytes after last tensor")
    norm = header["normalizer"]
    return GruNetwork(
        config,
        params,
        header["input_dim"],
        Normalizer.from_dict(norm) if norm else None,
        header["seed"],
        header["train_seed"],
        header["trained"],
    )


def save_model(network: GruNetwork, path) -> None:
    Path(path).write_bytes(dump_model(network))


def load_model(path) -> GruNetwork:
    return parse_model(Path(path).read_bytes())
