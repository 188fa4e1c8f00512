"""From-scratch differentiable GRU binary classifier.

Architecture: two stacked GRU layers, batch normalization on the final
hidden state, inverted dropout, a tanh dense layer, and a sigmoid output
unit, trained with binary cross-entropy and AdamW.

Everything runs in float64 numpy. Gradients come from handwritten
backpropagation through time and are checked against central finite
differences (see :func:`gradient_check`).

GRU cell convention, per timestep:

    z = sigmoid(x W_z + h_prev U_z + b_z)
    r = sigmoid(x W_r + h_prev U_r + b_r)
    h~ = tanh(x W_h + (r * h_prev) U_h + b_h)
    h  = (1 - z) * h_prev + z * h~

Parameter order is total and stable: layers in [gru1, gru2, bn, dense1,
dense2] order, tensor names sorted within each layer. Batch-norm running
statistics live in the parameter set (so they travel with the weights)
but are updated by the training loop, never by forward itself, and carry
zero gradients.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .errors import ValidationError
from .features import WindowDataset, inject_noise

TRAIN = "train"
EVAL = "eval"


@dataclass
class ModelConfig:
    input_dim: int = 1000
    gru1_units: int = 32
    gru2_units: int = 16
    dense_hidden: int = 16
    dropout_rate: float = 0.5
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-5
    learning_rate: float = 5e-5
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 32

    def validate(self) -> list[str]:
        problems = []
        for name in ("input_dim", "gru1_units", "gru2_units", "dense_hidden", "batch_size"):
            if getattr(self, name) < 1:
                problems.append(f"model.{name}: must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.dropout_rate < 1.0:
            problems.append(f"model.dropout_rate: must be in [0, 1), got {self.dropout_rate}")
        if self.learning_rate <= 0:
            problems.append(f"model.learning_rate: must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            problems.append(f"model.weight_decay: must be >= 0, got {self.weight_decay}")
        if not 0.0 < self.bn_momentum < 1.0:
            problems.append(f"model.bn_momentum: must be in (0, 1), got {self.bn_momentum}")
        if self.bn_epsilon <= 0:
            problems.append(f"model.bn_epsilon: must be > 0, got {self.bn_epsilon}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                problems.append(f"model.{name}: must be in [0, 1), got {getattr(self, name)}")
        if self.adam_epsilon <= 0:
            problems.append(f"model.adam_epsilon: must be > 0, got {self.adam_epsilon}")
        return problems

    def check(self) -> None:
        problems = self.validate()
        if problems:
            raise ValidationError(problems)

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_GRU_TENSORS = ("U_h", "U_r", "U_z", "W_h", "W_r", "W_z", "b_h", "b_r", "b_z")
_BN_TENSORS = ("beta", "gamma", "running_mean", "running_var")


def param_schema(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list for a config."""
    v, h1, h2, d = cfg.input_dim, cfg.gru1_units, cfg.gru2_units, cfg.dense_hidden

    def gru(prefix: str, in_dim: int, units: int):
        shapes = {
            "U_h": (units, units), "U_r": (units, units), "U_z": (units, units),
            "W_h": (in_dim, units), "W_r": (in_dim, units), "W_z": (in_dim, units),
            "b_h": (units,), "b_r": (units,), "b_z": (units,),
        }
        return [(f"{prefix}/{n}", shapes[n]) for n in _GRU_TENSORS]

    schema = gru("gru1", v, h1) + gru("gru2", h1, h2)
    schema += [(f"bn/{n}", (h2,)) for n in _BN_TENSORS]
    schema += [("dense1/W", (h2, d)), ("dense1/b", (d,)),
               ("dense2/W", (d, 1)), ("dense2/b", (1,))]
    return schema


class ParamSet:
    """Named float64 tensors backed by one flat contiguous buffer.

    The flat layout makes the optimizer and FedAvg single vectorized
    operations; `view(name)` returns a writable view into the buffer.
    """

    def __init__(self, schema: Sequence[tuple[str, tuple[int, ...]]],
                 flat: np.ndarray | None = None):
        self.schema = [(name, tuple(shape)) for name, shape in schema]
        self._index: dict[str, tuple[int, int, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in self.schema:
            size = int(np.prod(shape)) if shape else 1
            self._index[name] = (offset, offset + size, shape)
            offset += size
        if flat is None:
            flat = np.zeros(offset, dtype=np.float64)
        else:
            flat = np.ascontiguousarray(flat, dtype=np.float64)
            if flat.shape != (offset,):
                raise ValidationError(
                    f"ParamSet: flat buffer has {flat.shape}, schema needs ({offset},)")
        self.flat = flat

    @classmethod
    def for_config(cls, cfg: ModelConfig) -> "ParamSet":
        return cls(param_schema(cfg))

    def names(self) -> list[str]:
        return [name for name, _ in self.schema]

    def view(self, name: str) -> np.ndarray:
        start, end, shape = self._index[name]
        return self.flat[start:end].reshape(shape)

    def items(self):
        for name, _ in self.schema:
            yield name, self.view(name)

    def copy(self) -> "ParamSet":
        return ParamSet(self.schema, self.flat.copy())

    def zeros_like(self) -> "ParamSet":
        return ParamSet(self.schema)

    def same_schema(self, other: "ParamSet") -> bool:
        return self.schema == other.schema


def _xavier_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


def init_params(cfg: ModelConfig, seed) -> ParamSet:
    """Xavier-uniform input matrices, orthogonal recurrent matrices, zero
    biases, identity batch norm. Draw order follows the schema order.
    """
    cfg.check()
    rng = np.random.default_rng(seed)
    params = ParamSet.for_config(cfg)
    for name, view in params.items():
        kind = name.split("/")[1]
        if kind.startswith("U_"):
            view[...] = _orthogonal(rng, view.shape[0])
        elif kind.startswith("W") and name.startswith("gru"):
            view[...] = _xavier_uniform(rng, view.shape)
        elif name in ("dense1/W", "dense2/W"):
            view[...] = _xavier_uniform(rng, view.shape)
        elif name in ("bn/gamma", "bn/running_var"):
            view[...] = 1.0
        # biases, bn/beta, bn/running_mean stay zero
    return params


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # sigmoid(x) == (1 + tanh(x/2)) / 2; tanh saturates instead of
    # overflowing, and one vectorized call beats masked exp on small arrays
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def gru_cell_forward(x_t: np.ndarray, h_prev: np.ndarray, params: ParamSet,
                     prefix: str) -> np.ndarray:
    """Single GRU step for one layer; x_t (B, Din), h_prev (B, H)."""
    w_z, w_r, w_h = (params.view(f"{prefix}/W_{g}") for g in "zrh")
    u_z, u_r, u_h = (params.view(f"{prefix}/U_{g}") for g in "zrh")
    b_z, b_r, b_h = (params.view(f"{prefix}/b_{g}") for g in "zrh")
    if x_t.shape[1] != w_z.shape[0] or h_prev.shape[1] != u_z.shape[0]:
        raise ValidationError(
            f"gru_cell_forward: shapes {x_t.shape}/{h_prev.shape} do not match layer {prefix}")
    z = _sigmoid(x_t @ w_z + h_prev @ u_z + b_z)
    r = _sigmoid(x_t @ w_r + h_prev @ u_r + b_r)
    h_cand = np.tanh(x_t @ w_h + (r * h_prev) @ u_h + b_h)
    return (1.0 - z) * h_prev + z * h_cand


def _gru_layer_forward(x_seq: np.ndarray, params: ParamSet, prefix: str) -> tuple[np.ndarray, dict]:
    """Run one GRU layer over a full time-major (W, B, Din) sequence.

    Input-side projections for all timesteps are batched into one matmul;
    the recurrent loop only touches contiguous (B, H)-sized operands.
    """
    w, b, din = x_seq.shape
    w_z, w_r, w_h = (params.view(f"{prefix}/W_{g}") for g in "zrh")
    u_z, u_r, u_h = (params.view(f"{prefix}/U_{g}") for g in "zrh")
    b_z, b_r, b_h = (params.view(f"{prefix}/b_{g}") for g in "zrh")
    h_units = u_z.shape[0]

    w_cat = np.concatenate([w_z, w_r, w_h], axis=1)          # (Din, 3H)
    proj = x_seq.reshape(w * b, din) @ w_cat
    proj = proj.reshape(w, b, 3 * h_units)
    proj[..., :h_units] += b_z
    proj[..., h_units:2 * h_units] += b_r
    proj[..., 2 * h_units:] += b_h
    u_zr = np.concatenate([u_z, u_r], axis=1)                # (H, 2H)

    h = np.zeros((b, h_units), dtype=np.float64)
    h_seq = np.empty((w, b, h_units), dtype=np.float64)
    z_seq = np.empty_like(h_seq)
    r_seq = np.empty_like(h_seq)
    cand_seq = np.empty_like(h_seq)
    hprev_seq = np.empty_like(h_seq)
    for t in range(w):
        proj_t = proj[t]
        zr = h @ u_zr
        zr += proj_t[:, :2 * h_units]
        gates = _sigmoid(zr)
        z = gates[:, :h_units]
        r = gates[:, h_units:]
        rh = r * h
        cand = np.tanh(rh @ u_h + proj_t[:, 2 * h_units:])
        hprev_seq[t] = h
        z_seq[t] = z
        r_seq[t] = r
        cand_seq[t] = cand
        h = h + z * (cand - h)  # == (1 - z) * h + z * cand
        h_seq[t] = h
    cache = {"x": x_seq, "z": z_seq, "r": r_seq, "cand": cand_seq,
             "h_prev": hprev_seq, "prefix": prefix}
    return h_seq, cache


def _gru_layer_backward(cache: dict, dh_ext: np.ndarray, params: ParamSet,
                        grads: ParamSet) -> np.ndarray:
    """BPTT through one layer. dh_ext (W, B, H) is the gradient arriving at
    each timestep's hidden output from above; returns dX (W, B, Din).
    """
    prefix = cache["prefix"]
    x_seq, z_seq, r_seq = cache["x"], cache["z"], cache["r"]
    cand_seq, hprev_seq = cache["cand"], cache["h_prev"]
    w, b, din = x_seq.shape
    h_units = z_seq.shape[2]
    w_z, w_r, w_h = (params.view(f"{prefix}/W_{g}") for g in "zrh")
    u_z, u_r, u_h = (params.view(f"{prefix}/U_{g}") for g in "zrh")
    u_zr_t = np.concatenate([u_z, u_r], axis=1).T            # (2H, H)

    d_u_z = grads.view(f"{prefix}/U_z")
    d_u_r = grads.view(f"{prefix}/U_r")
    d_u_h = grads.view(f"{prefix}/U_h")
    da = np.empty((w, b, 3 * h_units), dtype=np.float64)  # (a_z, a_r, a_h) pre-activations

    dh = np.zeros((b, h_units), dtype=np.float64)
    for t in range(w - 1, -1, -1):
        dh = dh + dh_ext[t]
        da_t = da[t]
        z, r = z_seq[t], r_seq[t]
        cand, h_prev = cand_seq[t], hprev_seq[t]

        dcand = dh * z
        da_h = dcand * (1.0 - cand * cand)
        drh = da_h @ u_h.T
        dr = drh * h_prev

        da_t[:, :h_units] = dh * (cand - h_prev) * z * (1.0 - z)
        da_t[:, h_units:2 * h_units] = dr * r * (1.0 - r)
        da_t[:, 2 * h_units:] = da_h

        # recurrent gradient: direct path + both gate paths + candidate path
        dh = dh - dh * z + drh * r + da_t[:, :2 * h_units] @ u_zr_t

        d_u_h += (r * h_prev).T @ da_h
        d_u_z += h_prev.T @ da_t[:, :h_units]
        d_u_r += h_prev.T @ da_t[:, h_units:2 * h_units]

    da_flat = da.reshape(w * b, 3 * h_units)
    dw_cat = x_seq.reshape(w * b, din).T @ da_flat           # (Din, 3H)
    grads.view(f"{prefix}/W_z")[...] += dw_cat[:, :h_units]
    grads.view(f"{prefix}/W_r")[...] += dw_cat[:, h_units:2 * h_units]
    grads.view(f"{prefix}/W_h")[...] += dw_cat[:, 2 * h_units:]
    db = da_flat.sum(axis=0)
    grads.view(f"{prefix}/b_z")[...] += db[:h_units]
    grads.view(f"{prefix}/b_r")[...] += db[h_units:2 * h_units]
    grads.view(f"{prefix}/b_h")[...] += db[2 * h_units:]

    w_cat = np.concatenate([w_z, w_r, w_h], axis=1)
    dx = (da_flat @ w_cat.T).reshape(w, b, din)
    return dx


def forward(x: np.ndarray, params: ParamSet, cfg: ModelConfig, mode: str,
            rng: np.random.Generator | None = None) -> tuple[np.ndarray, dict]:
    """Full forward pass over a (B, W, V) batch; returns (probs, cache).

    Train mode uses batch statistics for batch norm and applies inverted
    dropout (requires rng when dropout_rate > 0); eval mode uses running
    statistics and no dropout. Forward never mutates params; the training
    loop owns the running-statistics update.
    """
    if x.ndim != 3:
        raise ValidationError(f"forward: expected (B, W, V) input, got {x.shape}")
    b = x.shape[0]
    if b == 0:
        raise ValidationError("forward: empty batch")
    if x.shape[2] != cfg.input_dim:
        raise ValidationError(f"forward: input dim {x.shape[2]} != config input_dim {cfg.input_dim}")
    if mode not in (TRAIN, EVAL):
        raise ValidationError(f"forward: unknown mode {mode!r}")
    if mode == TRAIN and b < 2:
        raise ValidationError("forward: train mode needs batch size >= 2 for batch norm")

    x_tm = np.ascontiguousarray(np.swapaxes(x, 0, 1))  # time-major (W, B, V)
    h1_seq, cache1 = _gru_layer_forward(x_tm, params, "gru1")
    h2_seq, cache2 = _gru_layer_forward(h1_seq, params, "gru2")
    h2 = h2_seq[-1]

    gamma = params.view("bn/gamma")
    beta = params.view("bn/beta")
    if mode == TRAIN:
        mu = h2.mean(axis=0)
        var = h2.var(axis=0)
    else:
        mu = params.view("bn/running_mean")
        var = params.view("bn/running_var")
    inv_std = 1.0 / np.sqrt(var + cfg.bn_epsilon)
    x_hat = (h2 - mu) * inv_std
    bn_out = gamma * x_hat + beta

    mask = None
    dropped = bn_out
    if mode == TRAIN and cfg.dropout_rate > 0.0:
        if rng is None:
            raise ValidationError("forward: train mode with dropout needs an rng")
        keep = 1.0 - cfg.dropout_rate
        mask = (rng.random(bn_out.shape) < keep) / keep
        dropped = bn_out * mask

    w1, b1 = params.view("dense1/W"), params.view("dense1/b")
    w2, b2 = params.view("dense2/W"), params.view("dense2/b")
    hidden = np.tanh(dropped @ w1 + b1)
    logits = (hidden @ w2 + b2)[:, 0]
    probs = _sigmoid(logits)

    cache = {
        "mode": mode, "cfg": cfg, "params": params, "probs": probs,
        "gru1": cache1, "gru2": cache2, "h1_seq": h1_seq,
        "bn": {"x_hat": x_hat, "inv_std": inv_std, "mu": mu, "var": var},
        "mask": mask, "dropped": dropped, "hidden": hidden,
    }
    return probs, cache


def bce_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy; probabilities clamped to [1e-7, 1-1e-7]."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValidationError(f"bce_loss: probs shape {p.shape} != labels shape {y.shape}")
    p = np.clip(p, 1e-7, 1.0 - 1e-7)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def backward(cache: dict, labels: np.ndarray) -> ParamSet:
    """Exact gradients of bce_loss w.r.t. every parameter.

    Batch-norm running statistics get zero gradients (they are not on the
    train-mode compute path).
    """
    if cache["mode"] != TRAIN:
        raise ValidationError("backward: cache must come from a train-mode forward")
    params: ParamSet = cache["params"]
    cfg: ModelConfig = cache["cfg"]
    probs = cache["probs"]
    y = np.asarray(labels, dtype=np.float64)
    if probs.shape != y.shape:
        raise ValidationError("backward: labels do not match the cached batch")
    b = probs.shape[0]
    grads = params.zeros_like()

    # sigmoid + BCE collapse to (p - y) / B at the logit
    dlogits = (probs - y) / b

    hidden, dropped = cache["hidden"], cache["dropped"]
    w1, w2 = params.view("dense1/W"), params.view("dense2/W")
    da2 = dlogits[:, None]
    grads.view("dense2/W")[...] = hidden.T @ da2
    grads.view("dense2/b")[...] = da2.sum(axis=0)
    dhidden = da2 @ w2.T
    da1 = dhidden * (1.0 - hidden * hidden)
    grads.view("dense1/W")[...] = dropped.T @ da1
    grads.view("dense1/b")[...] = da1.sum(axis=0)
    ddropped = da1 @ w1.T

    mask = cache["mask"]
    dbn_out = ddropped if mask is None else ddropped * mask

    bn = cache["bn"]
    x_hat, inv_std = bn["x_hat"], bn["inv_std"]
    gamma = params.view("bn/gamma")
    grads.view("bn/gamma")[...] = (dbn_out * x_hat).sum(axis=0)
    grads.view("bn/beta")[...] = dbn_out.sum(axis=0)
    dx_hat = dbn_out * gamma
    # batch-statistics path: d/dx of (x - mean) / sqrt(var + eps)
    dh2 = (inv_std / b) * (
        b * dx_hat - dx_hat.sum(axis=0) - x_hat * (dx_hat * x_hat).sum(axis=0))

    w = cache["h1_seq"].shape[0]
    dh2_ext = np.zeros((w, b, cfg.gru2_units), dtype=np.float64)
    dh2_ext[-1] = dh2
    dh1_ext = _gru_layer_backward(cache["gru2"], dh2_ext, params, grads)
    _gru_layer_backward(cache["gru1"], dh1_ext, params, grads)
    return grads


def update_running_stats(params: ParamSet, cache: dict, momentum: float) -> None:
    """running <- momentum * running + (1 - momentum) * batch_stat."""
    bn = cache["bn"]
    rm = params.view("bn/running_mean")
    rv = params.view("bn/running_var")
    rm[...] = momentum * rm + (1.0 - momentum) * bn["mu"]
    rv[...] = momentum * rv + (1.0 - momentum) * bn["var"]


class OptimizerState:
    """AdamW moments, shape-aligned with a ParamSet, plus step counter."""

    def __init__(self, params: ParamSet):
        self.m = np.zeros_like(params.flat)
        self.v = np.zeros_like(params.flat)
        self.t = 0


def decay_mask(params: ParamSet) -> np.ndarray:
    """True where decoupled weight decay applies: weight matrices only,
    never biases, batch-norm parameters, or running statistics.
    """
    mask = np.zeros_like(params.flat, dtype=bool)
    for name, _ in params.schema:
        layer, tensor = name.split("/")
        if layer.startswith("gru") and (tensor.startswith("W") or tensor.startswith("U")):
            start, end, _ = params._index[name]
            mask[start:end] = True
        elif layer.startswith("dense") and tensor == "W":
            start, end, _ = params._index[name]
            mask[start:end] = True
    return mask


def adamw_step(params: ParamSet, grads: ParamSet, state: OptimizerState,
               cfg: ModelConfig, mask: np.ndarray | None = None
               ) -> tuple[ParamSet, OptimizerState]:
    """In-place AdamW update with decoupled weight decay."""
    if not params.same_schema(grads):
        raise ValidationError("adamw_step: gradient schema does not match parameters")
    if mask is None:
        mask = decay_mask(params)
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon
    state.t += 1
    g = grads.flat
    state.m = b1 * state.m + (1.0 - b1) * g
    state.v = b2 * state.v + (1.0 - b2) * g * g
    m_hat = state.m / (1.0 - b1 ** state.t)
    v_hat = state.v / (1.0 - b2 ** state.t)
    step = m_hat / (np.sqrt(v_hat) + eps)
    decay = np.where(mask, params.flat, 0.0)
    params.flat -= cfg.learning_rate * (step + cfg.weight_decay * decay)
    return params, state


def predict_probs(params: ParamSet, cfg: ModelConfig, x: np.ndarray,
                  batch_size: int = 1024) -> np.ndarray:
    """Eval-mode probabilities over a whole (N, W, V) array, in chunks."""
    out = np.empty(x.shape[0], dtype=np.float64)
    for start in range(0, x.shape[0], batch_size):
        chunk = x[start:start + batch_size]
        out[start:start + len(chunk)], _ = forward(chunk, params, cfg, EVAL)
    return out


def trace_accuracy(params: ParamSet, cfg: ModelConfig, data: WindowDataset,
                   threshold: float = 0.5) -> float:
    probs = predict_probs(params, cfg, data.x)
    trace_probs, trace_y = metrics.aggregate_trace_level(
        probs, data.trace_ids, data.trace_labels)
    return metrics.evaluate(trace_probs, trace_y, threshold, level=metrics.TRACE).accuracy


@dataclass
class EarlyStop:
    """Halt when train and validation trace-level accuracy both exceed
    the threshold. Used by the centralized driver; federated runs apply
    the same rule at the server between rounds instead.
    """

    threshold: float
    train_data: WindowDataset
    val_data: WindowDataset


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Contiguous batches over a permutation; a trailing singleton is
    merged into the previous batch so train-mode batch norm never sees
    batch size 1.
    """
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def train_epochs(dataset: WindowDataset, params: ParamSet, state: OptimizerState,
                 cfg: ModelConfig, epochs: int, rng: np.random.Generator,
                 noise_sigma: float = 0.02,
                 early_stop: EarlyStop | None = None,
                 ) -> tuple[ParamSet, OptimizerState, list[dict]]:
    """Mini-batch AdamW training with per-epoch shuffling and per-batch
    Gaussian input noise. Returns per-epoch history.
    """
    n = len(dataset)
    if n == 0:
        raise ValidationError("train_epochs: empty dataset")
    if n == 1:
        raise ValidationError("train_epochs: need >= 2 samples for batch norm")
    mask = decay_mask(params)
    history: list[dict] = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        correct = 0
        for idxs in _batches(order, cfg.batch_size):
            xb = dataset.x[idxs]
            yb = dataset.y[idxs]
            if noise_sigma > 0.0:
                xb = inject_noise(xb, noise_sigma, rng)
            probs, cache = forward(xb, params, cfg, TRAIN, rng)
            losses.append(bce_loss(probs, yb) * len(idxs))
            correct += int(np.sum((probs >= 0.5) == (yb == 1)))
            grads = backward(cache, yb)
            adamw_step(params, grads, state, cfg, mask)
            update_running_stats(params, cache, cfg.bn_momentum)
        record = {
            "epoch": epoch + 1,
            "loss": sum(losses) / n,
            "accuracy": correct / n,
        }
        if early_stop is not None:
            record["train_accuracy_trace"] = trace_accuracy(params, cfg, early_stop.train_data)
            record["val_accuracy_trace"] = trace_accuracy(params, cfg, early_stop.val_data)
        history.append(record)
        if early_stop is not None:
            if (record["train_accuracy_trace"] > early_stop.threshold
                    and record["val_accuracy_trace"] > early_stop.threshold):
                break
    return params, state, history


# --- checkpointing -----------------------------------------------------

def save_checkpoint(params: ParamSet, cfg: ModelConfig, path) -> None:
    """Write params in the wire tensor format, tagged with the config hash
    so incompatible checkpoints are rejected at load time. Tensor data is
    stored at 32-bit precision.
    """
    from .transport import GlobalWeights, encode

    blob = encode(GlobalWeights(round=0, params=params))
    tag = cfg.hash().encode("ascii")
    with open(path, "wb") as fh:
        fh.write(len(tag).to_bytes(4, "big"))
        fh.write(tag)
        fh.write(blob)


def load_checkpoint(path, cfg: ModelConfig) -> ParamSet:
    from .transport import GlobalWeights, decode

    raw = open(path, "rb").read()
    if len(raw) < 4:
        raise ValidationError(f"checkpoint truncated: {path}")
    tag_len = int.from_bytes(raw[:4], "big")
    tag = raw[4:4 + tag_len].decode("ascii")
    if tag != cfg.hash():
        raise ValidationError(
            f"checkpoint config hash {tag} does not match model config {cfg.hash()}")
    msg = decode(raw[4 + tag_len:])
    if not isinstance(msg, GlobalWeights):
        raise ValidationError("checkpoint does not contain a weights frame")
    return msg.params


# --- gradient checking -------------------------------------------------

def finite_difference_check(cfg: ModelConfig, batch: int, seq_len: int, seed: int,
                            delta: float = 1e-5) -> float:
    """Max relative error between analytic and central finite-difference
    gradients on a random batch, with dropout disabled.
    """
    cfg_nodrop = ModelConfig(**{**asdict(cfg), "dropout_rate": 0.0})
    rng = np.random.default_rng(seed)
    params = init_params(cfg_nodrop, rng.integers(2**32))
    x = rng.normal(0.0, 0.5, size=(batch, seq_len, cfg_nodrop.input_dim))
    y = rng.integers(0, 2, size=batch).astype(np.float64)

    probs, cache = forward(x, params, cfg_nodrop, TRAIN)
    analytic = backward(cache, y).flat

    def loss_at(flat: np.ndarray) -> float:
        probe = ParamSet(params.schema, flat.copy())
        p, _ = forward(x, probe, cfg_nodrop, TRAIN)
        return bce_loss(p, y)

    numeric = np.empty_like(params.flat)
    base = params.flat
    for i in range(base.size):
        orig = base[i]
        base[i] = orig + delta
        up = loss_at(base)
        base[i] = orig - delta
        down = loss_at(base)
        base[i] = orig
        numeric[i] = (up - down) / (2.0 * delta)

    # The floor absorbs central-difference roundoff (~1e-11 here) on
    # gradients that are exactly zero by symmetry, e.g. output bias on an
    # antisymmetric 2-sample batch-normalized batch.
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradient_check(n_configs: int = 5, seed: int = 7,
                   progress: Callable[[str], None] | None = None) -> list[dict]:
    """Run the finite-difference oracle on random tiny configurations."""
    rng = np.random.default_rng(seed)
    results = []
    for i in range(n_configs):
        cfg = ModelConfig(
            input_dim=int(rng.integers(4, 9)),
            gru1_units=int(rng.integers(3, 6)),
            gru2_units=int(rng.integers(2, 5)),
            dense_hidden=int(rng.integers(2, 5)),
            dropout_rate=0.0,
        )
        batch = int(rng.integers(2, 5))
        seq_len = int(rng.integers(2, 5))
        err = finite_difference_check(cfg, batch, seq_len, seed=int(rng.integers(2**32)))
        results.append({
            "config": {"input_dim": cfg.input_dim, "gru1_units": cfg.gru1_units,
                       "gru2_units": cfg.gru2_units, "dense_hidden": cfg.dense_hidden,
                       "batch": batch, "seq_len": seq_len},
            "max_rel_error": err,
        })
        if progress is not None:
            progress(f"config {i + 1}/{n_configs}: max relative error {err:.3e}")
    return results
