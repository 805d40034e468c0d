"""Stacked LSTM encoder trained with triplet loss.

Architecture (per window of ``M`` steps, ``C`` channels)::

    LSTM(H) -> BatchNorm (per feature, over batch x time) -> Dropout -> LSTM(H) -> h_M

The embedding is the last hidden state of the top layer. Each LSTM layer
applies one recurrent-dropout mask per sequence to ``h_prev``. Dropout
masks use inverted scaling (kept units are multiplied by ``1/(1-p)``).
Everything runs in float64.
"""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .errors import ChannelMismatch, ModelFormatError, TrainingDiverged

FORMAT_VERSION = 1
_MAGIC = b"BIOFUSEM"


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_units: int = 64
    num_layers: int = 2
    dropout_between: float = 0.5
    recurrent_dropout: float = 0.2
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_units < 1 or self.num_layers < 1:
            raise ValueError("input_dim, hidden_units and num_layers must be positive")
        for p in (self.dropout_between, self.recurrent_dropout):
            if not 0.0 <= p < 1.0:
                raise ValueError(f"dropout rate {p} outside [0, 1)")

    @property
    def embedding_dim(self):
        return self.hidden_units


@dataclass(frozen=True)
class TripletLossConfig:
    margin: float = 1.0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("triplet margin must be positive")


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 512

    def __post_init__(self):
        if not 0.0 < self.beta1 < self.beta2 < 1.0:
            raise ValueError("need 0 < beta1 < beta2 < 1")


@dataclass
class EncoderModel:
    config: EncoderConfig
    params: dict  # trainable tensors
    running: dict  # batch-norm running statistics
    channels: tuple = ()
    modality: str = ""

    def copy(self):
        return EncoderModel(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.running.items()},
            tuple(self.channels),
            self.modality,
        )


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _orthogonal(rng, rows, cols):
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def init_model(config, rng=None, channels=(), modality=""):
    """Glorot-uniform input weights, orthogonal recurrent weights, forget bias 1."""
    if rng is None or isinstance(rng, int):
        rng = np.random.default_rng(rng)
    H = config.hidden_units
    params, running = {}, {}
    c_in = config.input_dim
    for layer in range(config.num_layers):
        lim = np.sqrt(6.0 / (c_in + 4 * H))
        params[f"W{layer}"] = rng.uniform(-lim, lim, size=(4 * H, c_in))
        params[f"U{layer}"] = _orthogonal(rng, 4 * H, H)
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0
        params[f"b{layer}"] = b
        if layer < config.num_layers - 1:
            params[f"bn{layer}_gamma"] = np.ones(H)
            params[f"bn{layer}_beta"] = np.zeros(H)
            running[f"bn{layer}_mean"] = np.zeros(H)
            running[f"bn{layer}_var"] = np.ones(H)
        c_in = H
    return EncoderModel(config, params, running, tuple(channels), str(modality))


def zero_model(config, channels=(), modality=""):
    m = init_model(config, 0, channels, modality)
    for k in m.params:
        m.params[k] = np.zeros_like(m.params[k])
    return m


# ---------------------------------------------------------------------------
# LSTM cell (single step, mainly for inspection/tests)
# ---------------------------------------------------------------------------

def lstm_cell_forward(W, U, b, x_t, h_prev, c_prev, rec_dropout_mask=None):
    """One LSTM step; returns ``(h_t, c_t, cache)``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    H = U.shape[1]
    if W.shape[1] != x_t.shape[-1] or h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise ValueError("LSTM cell dimension mismatch")
    hm = h_prev if rec_dropout_mask is None else h_prev * rec_dropout_mask
    a = W @ x_t + U @ hm + b
    i = kernels.sigmoid(a[:H])
    f = kernels.sigmoid(a[H:2 * H])
    g = np.tanh(a[2 * H:3 * H])
    o = kernels.sigmoid(a[3 * H:])
    c_t = f * c_prev + i * g
    h_t = o * np.tanh(c_t)
    return h_t, c_t, {"i": i, "f": f, "g": g, "o": o, "hm": hm, "c_prev": c_prev}


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _as_batch(windows):
    if isinstance(windows, np.ndarray):
        X = windows
    else:
        X = np.stack([w.data for w in windows])
    if X.ndim == 2:
        X = X[None]
    return np.asarray(X, dtype=np.float64)


def sample_masks(config, batch, steps, rng):
    """Dropout masks for one training forward pass."""
    H = config.hidden_units
    masks = {}
    p = config.recurrent_dropout
    for layer in range(config.num_layers):
        if p > 0:
            masks[f"rec{layer}"] = (rng.random((batch, H)) >= p) / (1.0 - p)
    q = config.dropout_between
    for layer in range(config.num_layers - 1):
        if q > 0:
            masks[f"drop{layer}"] = (rng.random((steps, batch, H)) >= q) / (1.0 - q)
    return masks


def encoder_forward(model, windows, mode="infer", rng=None, masks=None):
    """Embed a batch of windows.

    ``windows`` is a list of :class:`FeatureWindow` or an array ``[B, M, C]``.
    In ``train`` mode batch norm uses batch statistics and dropout masks come
    from ``masks`` or are drawn from ``rng``. Returns ``(embeddings [B, E], cache)``.
    """
    cfg = model.config
    X = _as_batch(windows)
    B, M, C = X.shape
    if C != cfg.input_dim:
        raise ChannelMismatch(f"window has {C} channels, model expects {cfg.input_dim}")
    train = mode == "train"
    if train and masks is None:
        masks = sample_masks(cfg, B, M, rng if rng is not None else np.random.default_rng())
    masks = masks or {}

    x = np.ascontiguousarray(X.transpose(1, 0, 2))  # [M, B, C]
    cache = {"layers": [], "between": [], "train": train, "B": B, "M": M}
    for layer in range(cfg.num_layers):
        P = model.params
        rec_mask = masks.get(f"rec{layer}") if train else None
        h, c, gates, tanh_c = kernels.lstm_forward(x, P[f"W{layer}"], P[f"U{layer}"],
                                                   P[f"b{layer}"], rec_mask)
        cache["layers"].append((x, rec_mask, h, c, gates, tanh_c))
        if layer == cfg.num_layers - 1:
            break
        gamma, beta = P[f"bn{layer}_gamma"], P[f"bn{layer}_beta"]
        if train:
            mu = h.mean(axis=(0, 1))
            var = h.var(axis=(0, 1))
        else:
            mu = model.running[f"bn{layer}_mean"]
            var = model.running[f"bn{layer}_var"]
        inv_std = 1.0 / np.sqrt(var + cfg.bn_eps)
        xhat = (h - mu) * inv_std
        y = gamma * xhat + beta
        drop = masks.get(f"drop{layer}") if train else None
        if drop is not None:
            y = y * drop
        cache["between"].append({"xhat": xhat, "inv_std": inv_std, "mu": mu, "var": var,
                                 "drop": drop})
        x = y
    emb = cache["layers"][-1][2][-1].copy()
    if not np.all(np.isfinite(emb)):
        raise TrainingDiverged("non-finite embedding")
    return emb, cache


def update_running_stats(model, cache):
    """Fold the batch statistics of a train-mode forward into the running averages."""
    mom = model.config.bn_momentum
    for layer, st in enumerate(cache["between"]):
        rm, rv = f"bn{layer}_mean", f"bn{layer}_var"
        model.running[rm] = mom * model.running[rm] + (1.0 - mom) * st["mu"]
        model.running[rv] = mom * model.running[rv] + (1.0 - mom) * st["var"]


def encoder_backward(model, cache, d_emb):
    """Gradients of a scalar loss w.r.t. every trainable tensor, given
    ``d_emb = dLoss/dEmbedding`` of shape ``[B, E]``."""
    if cache is None or "layers" not in cache or not cache["layers"]:
        raise ValueError("missing forward cache")
    cfg = model.config
    P = model.params
    M, B = cache["M"], cache["B"]
    d_emb = np.asarray(d_emb, dtype=np.float64)
    if d_emb.shape != (B, cfg.hidden_units):
        raise ValueError(f"upstream gradient shape {d_emb.shape} != {(B, cfg.hidden_units)}")
    grads = {}
    dh = np.zeros((M, B, cfg.hidden_units))
    dh[-1] = d_emb
    for layer in range(cfg.num_layers - 1, -1, -1):
        x, rec_mask, h, c, gates, tanh_c = cache["layers"][layer]
        dW, dU, db, dx = kernels.lstm_backward(x, P[f"W{layer}"], P[f"U{layer}"], rec_mask,
                                               h, c, gates, tanh_c, dh)
        grads[f"W{layer}"], grads[f"U{layer}"], grads[f"b{layer}"] = dW, dU, db
        if layer == 0:
            break
        st = cache["between"][layer - 1]
        dy = dx if st["drop"] is None else dx * st["drop"]
        gamma = P[f"bn{layer - 1}_gamma"]
        xhat = st["xhat"]
        grads[f"bn{layer - 1}_gamma"] = np.sum(dy * xhat, axis=(0, 1))
        grads[f"bn{layer - 1}_beta"] = np.sum(dy, axis=(0, 1))
        dxhat = dy * gamma
        if cache["train"]:
            n = M * B
            dh = (st["inv_std"] / n) * (
                n * dxhat - dxhat.sum(axis=(0, 1)) - xhat * np.sum(dxhat * xhat, axis=(0, 1))
            )
        else:
            dh = dxhat * st["inv_std"]
    return grads


def embed(model, windows, batch_size=1024):
    """Inference embeddings ``[N, E]`` for a list of windows."""
    windows = list(windows)
    if not windows:
        return np.zeros((0, model.config.embedding_dim))
    out = []
    for i in range(0, len(windows), batch_size):
        e, _ = encoder_forward(model, windows[i:i + batch_size], "infer")
        out.append(e)
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# triplet loss
# ---------------------------------------------------------------------------

def triplet_loss(vA, vP, vN, cfg=TripletLossConfig()):
    """``max(0, |A-P|^2 - |A-N|^2 + margin)`` and its subgradients.

    Works on single vectors or row-wise on ``[B, E]`` batches (per-triplet
    losses). At the hinge kink the zero branch is taken.
    """
    margin = cfg.margin if isinstance(cfg, TripletLossConfig) else float(cfg)
    vA, vP, vN = (np.asarray(v, dtype=np.float64) for v in (vA, vP, vN))
    if not vA.shape == vP.shape == vN.shape:
        raise ValueError("embedding shapes differ")
    dap = np.sum((vA - vP) ** 2, axis=-1)
    dan = np.sum((vA - vN) ** 2, axis=-1)
    z = dap - dan + margin
    loss = np.maximum(z, 0.0)
    active = (z > 0).astype(np.float64)[..., None] if vA.ndim > 1 else float(z > 0)
    gA = 2.0 * (vN - vP) * active
    gP = -2.0 * (vA - vP) * active
    gN = 2.0 * (vA - vN) * active
    if vA.ndim == 1:
        loss = float(loss)
    return loss, (gA, gP, gN)


def batch_triplet_loss(emb, margin):
    """Mean triplet loss of an ``[3B, E]`` stack ordered (anchors, positives,
    negatives); returns ``(loss, d_emb)``."""
    B = emb.shape[0] // 3
    vA, vP, vN = emb[:B], emb[B:2 * B], emb[2 * B:]
    losses, (gA, gP, gN) = triplet_loss(vA, vP, vN, margin)
    d_emb = np.concatenate([gA, gP, gN], axis=0) / B
    return float(np.mean(losses)), d_emb


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, cfg=OptimizerConfig()):
    """In-place bias-corrected Adam update; advances ``state.t``."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for k in sorted(params):
        g = grads.get(k)
        if g is None:
            continue
        if params[k].shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
        if k not in state.m:
            state.m[k] = np.zeros_like(params[k])
            state.v[k] = np.zeros_like(params[k])
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * (g * g)
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        params[k] -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    return params, state


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradCheckSpec:
    input_dim: int = 3
    hidden_units: int = 4
    num_layers: int = 2
    steps: int = 10
    triplets: int = 3
    margin: float = 1.0
    dropout: bool = True
    step_size: float = 1e-5


@dataclass
class GradCheckReport:
    errors: dict  # block -> max relative error
    tolerance: float = 1e-4

    @property
    def max_error(self):
        return max(self.errors.values())

    @property
    def passed(self):
        return self.max_error < self.tolerance

    def lines(self):
        out = [f"{k:>12s}  {v:.3e}" for k, v in sorted(self.errors.items())]
        out.append(f"{'max':>12s}  {self.max_error:.3e}  ({'PASS' if self.passed else 'FAIL'})")
        return out


def _rel_error(a, n, floor=1e-6):
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def gradient_check(spec=GradCheckSpec(), seed=0, backward=None, tolerance=1e-4):
    """Compare BPTT gradients of the batch triplet loss with central differences.

    Dropout masks are drawn once and held fixed across all perturbations, so
    the loss is a deterministic smooth function of the parameters (away from
    hinge kinks). Relative error per entry is ``|a-n| / max(|a|, |n|, 1e-6)``.
    """
    backward = backward or encoder_backward
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(spec.input_dim, spec.hidden_units, spec.num_layers,
                        0.5 if spec.dropout else 0.0, 0.2 if spec.dropout else 0.0)
    model = init_model(cfg, rng)
    for k in model.params:  # move BN/bias off their trivial init values
        model.params[k] = model.params[k] + 0.1 * rng.standard_normal(model.params[k].shape)
    n = 3 * spec.triplets
    X = rng.standard_normal((n, spec.steps, spec.input_dim))
    masks = sample_masks(cfg, n, spec.steps, rng)

    def loss_of(m):
        emb, cache = encoder_forward(m, X, "train", masks=masks)
        loss, d_emb = batch_triplet_loss(emb, spec.margin)
        return loss, d_emb, cache, emb

    loss, d_emb, cache, emb = loss_of(model)
    B = spec.triplets
    z = (np.sum((emb[:B] - emb[B:2 * B]) ** 2, 1) - np.sum((emb[:B] - emb[2 * B:]) ** 2, 1)
         + spec.margin)
    if np.min(np.abs(z)) < 1e-3:
        raise RuntimeError("a triplet sits on the hinge kink; pick another seed")
    analytic = backward(model, cache, d_emb)

    h = spec.step_size
    errors = {}
    for name in sorted(model.params):
        p = model.params[name]
        num = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = loss_of(model)[0]
            flat[i] = old - h
            lm = loss_of(model)[0]
            flat[i] = old
            gflat[i] = (lp - lm) / (2 * h)
        errors[name] = _rel_error(analytic[name], num)
    return GradCheckReport(errors, tolerance)


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------

def save_model(model, path):
    """Write ``magic | version | header length | JSON header | float64 payload``."""
    tensors = []
    chunks = []
    offset = 0
    for group, store in (("params", model.params), ("running", model.running)):
        for name in sorted(store):
            arr = np.ascontiguousarray(store[name], dtype="<f8")
            raw = arr.tobytes()
            tensors.append({"group": group, "name": name, "shape": list(arr.shape),
                            "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.config),
        "channels": list(model.channels),
        "modality": model.modality,
        "tensors": tensors,
        "payload_bytes": offset,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for raw in chunks:
            fh.write(raw)


def load_model(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    pre = len(_MAGIC) + struct.calcsize("<IQ")
    if len(blob) < pre or blob[:len(_MAGIC)] != _MAGIC:
        raise ModelFormatError(f"{path}: not a model file")
    version, hlen = struct.unpack("<IQ", blob[len(_MAGIC):pre])
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(blob) < pre + hlen:
        raise ModelFormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[pre:pre + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: corrupt header ({exc})") from None
    payload = blob[pre + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise ModelFormatError(
            f"{path}: payload is {len(payload)} bytes, header says {header['payload_bytes']}"
        )
    params, running = {}, {}
    for t in header["tensors"]:
        raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").reshape(t["shape"]).astype(np.float64)
        (params if t["group"] == "params" else running)[t["name"]] = arr
    cfg = EncoderConfig(**header["config"])
    return EncoderModel(cfg, params, running, tuple(header["channels"]), header["modality"])
