"""Learnable vector field: an MLP mapping (y, z) to (v_y, v_z).

Everything is plain numpy: batched forward passes, exact reverse-mode
gradients of the matching loss (including the finite/projection mode
transform), forward-mode directional derivatives for divergence traces,
and a decoupled-weight-decay Adam update. Hidden layers use softplus so
the learned field is smooth enough for an adaptive ODE integrator; the
output head is linear and its last coordinate is v_z.

The mode transform mirrors the training procedure: in finite mode both
the target and the model output are divided by their own v_z, with the
model-side denominator clamped away from zero (``DEFAULT_CLAMP``) because
an untrained network can predict arbitrarily small v_z. The projection
mode multiplies v_y by a per-sample hyperbolic projector. One shared
function performs the transform for both sides so the two code paths
cannot drift apart.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FormatError, ValidationError

DEFAULT_CLAMP = 1e-3

_MAGIC = b"HIFM-MLP"
_VERSION = 1


@dataclass
class MlpParams:
    """Weights (out, in) and biases (out,) per layer; softplus hidden."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def widths(self) -> list[int]:
        ws = [self.weights[0].shape[1]]
        ws += [w.shape[0] for w in self.weights]
        return ws

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def dim(self) -> int:
        """Data dimension: inputs are (y, z), outputs (v_y, v_z)."""
        return self.n_out - 1

    def copy(self) -> "MlpParams":
        return MlpParams(weights=[w.copy() for w in self.weights],
                         biases=[b.copy() for b in self.biases])


def init(widths: list[int], seed: int) -> MlpParams:
    """Glorot-normal weights (variance 2 / (fan_in + fan_out)), zero biases."""
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ValidationError(f"invalid layer widths {widths}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        std = np.sqrt(2.0 / (fan_in + fan_out))
        weights.append(rng.normal(0.0, std, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights=weights, biases=biases)


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _forward_cached(p: MlpParams, x: np.ndarray):
    """Batched forward pass keeping pre-activations for reuse."""
    acts = [x]
    pres = []
    a = x
    n_layers = len(p.weights)
    for l, (w, b) in enumerate(zip(p.weights, p.biases)):
        s = a @ w.T + b
        pres.append(s)
        a = _softplus(s) if l < n_layers - 1 else s
        acts.append(a)
    return acts, pres


def forward_batch(p: MlpParams, ys: np.ndarray,
                  zs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate a batch: ys (B, dim), zs (B,) -> (v_y (B, dim), v_z (B,))."""
    ys = np.asarray(ys, dtype=np.float64)
    zs = np.asarray(zs, dtype=np.float64)
    if not (np.all(np.isfinite(ys)) and np.all(np.isfinite(zs))):
        raise ValidationError("non-finite network input")
    x = np.concatenate([ys, zs[:, None]], axis=1)
    if x.shape[1] != p.n_in:
        raise ValidationError(
            f"input width {x.shape[1]} does not match network {p.n_in}")
    out = _forward_cached(p, x)[0][-1]
    return out[:, :-1], out[:, -1]


def forward(p: MlpParams, y: np.ndarray, z: float) -> tuple[np.ndarray, float]:
    """Single-sample forward; the last output coordinate is v_z."""
    vy, vz = forward_batch(p, np.asarray(y, dtype=np.float64)[None, :],
                           np.array([z]))
    return vy[0], float(vz[0])


def jvp_many(p: MlpParams, y: np.ndarray, z: float,
             tangents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward-mode directional derivatives at one point.

    tangents is (K, dim + 1); returns (dv_y (K, dim), dv_z (K,)).
    """
    y = np.asarray(y, dtype=np.float64)
    tangents = np.asarray(tangents, dtype=np.float64)
    if tangents.ndim != 2 or tangents.shape[1] != p.n_in:
        raise ValidationError("tangents must be (K, dim + 1)")
    x = np.concatenate([y, [z]])[None, :]
    _, pres = _forward_cached(p, x)
    dt = tangents
    n_layers = len(p.weights)
    for l, w in enumerate(p.weights):
        ds = dt @ w.T
        dt = ds * _sigmoid(pres[l]) if l < n_layers - 1 else ds
    return dt[:, :-1], dt[:, -1]


def jvp(p: MlpParams, y: np.ndarray, z: float,
        tangent: np.ndarray) -> tuple[np.ndarray, float]:
    """Directional derivative of forward along a single (dy, dz) tangent."""
    dvy, dvz = jvp_many(p, y, z, np.asarray(tangent, dtype=np.float64)[None, :])
    return dvy[0], float(dvz[0])


@dataclass(frozen=True)
class ModeTransform:
    """Finite/projection transform of Alg-style matching losses.

    ``projector`` may be None, a shared (dim, dim) matrix, or a per-sample
    (B, dim, dim) stack. The clamp floor applies to the finite division.
    """

    finite: bool = True
    projector: np.ndarray | None = None
    clamp: float = DEFAULT_CLAMP


def clamp_away_from_zero(vz: np.ndarray, floor: float):
    """Sign-preserving clamp |vz| >= floor; returns (clamped, active_mask)."""
    sign = np.where(vz >= 0.0, 1.0, -1.0)
    active = np.abs(vz) < floor
    return sign * np.maximum(np.abs(vz), floor), active


def apply_mode_transform(vy: np.ndarray, vz: np.ndarray,
                         mode: ModeTransform):
    """Shared transform for targets and model outputs.

    Returns (vy_t, vz_t, n_clamped). Finite mode divides v_y by the clamped
    v_z and pins v_z to one; projection multiplies v_y by the projector.
    """
    vy = np.asarray(vy, dtype=np.float64)
    vz = np.asarray(vz, dtype=np.float64)
    n_clamped = 0
    if mode.finite:
        c, active = clamp_away_from_zero(vz, mode.clamp)
        vy = vy / c[:, None]
        vz = np.ones_like(vz)
        n_clamped = int(active.sum())
    if mode.projector is not None:
        proj = mode.projector
        if proj.ndim == 2:
            vy = vy @ proj.T
        else:
            vy = np.einsum("bij,bj->bi", proj, vy)
    return vy, vz, n_clamped


def loss_and_grad(p: MlpParams, ys: np.ndarray, zs: np.ndarray,
                  target_vy: np.ndarray, target_vz: np.ndarray,
                  mode: ModeTransform | None = None,
                  sample_weights: np.ndarray | None = None):
    """Mean squared matching loss and its exact parameter gradients.

    The mode transform is applied identically to the model outputs and the
    targets before the residual is formed. Returns (loss, grads, n_clamped)
    where grads mirrors the parameter structure and n_clamped counts
    model-side clamp activations.
    """
    ys = np.asarray(ys, dtype=np.float64)
    zs = np.asarray(zs, dtype=np.float64)
    target_vy = np.asarray(target_vy, dtype=np.float64)
    target_vz = np.asarray(target_vz, dtype=np.float64)
    if mode is None:
        mode = ModeTransform(finite=False)
    bsz = ys.shape[0]
    if sample_weights is None:
        sample_weights = np.ones(bsz)

    x = np.concatenate([ys, zs[:, None]], axis=1)
    acts, pres = _forward_cached(p, x)
    out = acts[-1]
    vy_raw, vz_raw = out[:, :-1], out[:, -1]

    ty, tz, _ = apply_mode_transform(target_vy, target_vz, mode)
    vy_t, vz_t, n_clamped = apply_mode_transform(vy_raw, vz_raw, mode)

    ry = vy_t - ty
    rz = vz_t - tz
    per_sample = np.sum(ry * ry, axis=1) + rz * rz
    loss = float(np.mean(sample_weights * per_sample))

    # backward through the loss and the transform to the raw outputs
    scale = (2.0 / bsz) * sample_weights
    g_vy = scale[:, None] * ry
    g_vz = scale * rz
    if mode.projector is not None:
        proj = mode.projector
        if proj.ndim == 2:
            g_vy = g_vy @ proj  # projector is symmetric
        else:
            g_vy = np.einsum("bji,bj->bi", proj, g_vy)
    if mode.finite:
        c, active = clamp_away_from_zero(vz_raw, mode.clamp)
        g_vz = np.where(active, 0.0,
                        -np.sum(g_vy * vy_raw, axis=1) / (c * c))
        g_vy = g_vy / c[:, None]

    g_out = np.concatenate([g_vy, g_vz[:, None]], axis=1)
    grads_w = [np.zeros_like(w) for w in p.weights]
    grads_b = [np.zeros_like(b) for b in p.biases]
    delta = g_out
    for l in range(len(p.weights) - 1, -1, -1):
        grads_w[l] = delta.T @ acts[l]
        grads_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ p.weights[l]) * _sigmoid(pres[l - 1])
    return loss, MlpParams(weights=grads_w, biases=grads_b), n_clamped


@dataclass
class AdamWState:
    """Decoupled-weight-decay Adam state; moments mirror the parameters."""

    step: int
    m: MlpParams
    v: MlpParams
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def adamw_init(p: MlpParams, lr: float = 1e-4, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.01) -> AdamWState:
    zeros = MlpParams(weights=[np.zeros_like(w) for w in p.weights],
                      biases=[np.zeros_like(b) for b in p.biases])
    return AdamWState(step=0, m=zeros, v=zeros.copy(), lr=lr, beta1=beta1,
                      beta2=beta2, eps=eps, weight_decay=weight_decay)


def adamw_step(state: AdamWState, p: MlpParams,
               grads: MlpParams) -> tuple[AdamWState, MlpParams]:
    """One update; weight decay is applied to parameters, not gradients."""
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_w, new_b = [], []
    new_m = MlpParams(weights=[], biases=[])
    new_v = MlpParams(weights=[], biases=[])
    for kind in ("weights", "biases"):
        for param, g, m, v in zip(getattr(p, kind), getattr(grads, kind),
                                  getattr(state.m, kind),
                                  getattr(state.v, kind)):
            m_new = state.beta1 * m + (1.0 - state.beta1) * g
            v_new = state.beta2 * v + (1.0 - state.beta2) * g * g
            update = (m_new / bc1) / (np.sqrt(v_new / bc2) + state.eps)
            out = param - state.lr * update - state.lr * state.weight_decay * param
            getattr(new_m, kind).append(m_new)
            getattr(new_v, kind).append(v_new)
            (new_w if kind == "weights" else new_b).append(out)
    return (replace(state, step=t, m=new_m, v=new_v),
            MlpParams(weights=new_w, biases=new_b))


def save(p: MlpParams, path) -> None:
    """Write the binary model format (magic, version, shapes, f64 payload)."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(p.weights)))
        for w in p.weights:
            fh.write(struct.pack("<II", w.shape[0], w.shape[1]))
        for w, b in zip(p.weights, p.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load(path) -> MlpParams:
    """Read the binary model format; bit-exact round trip with `save`."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise FormatError(f"bad magic {data[:8]!r}, expected {_MAGIC!r}")
    if len(data) < 16:
        raise FormatError("truncated model header")
    version, n_layers = struct.unpack_from("<II", data, 8)
    if version != _VERSION:
        raise FormatError(
            f"unsupported model version {version}, expected {_VERSION}")
    offset = 16
    shapes = []
    for _ in range(n_layers):
        if offset + 8 > len(data):
            raise FormatError("truncated shape table")
        rows, cols = struct.unpack_from("<II", data, offset)
        shapes.append((rows, cols))
        offset += 8
    weights, biases = [], []
    for rows, cols in shapes:
        need = 8 * rows * cols + 8 * rows
        if offset + need > len(data):
            raise FormatError("truncated model payload")
        w = np.frombuffer(data, dtype="<f8", count=rows * cols,
                          offset=offset).reshape(rows, cols)
        offset += 8 * rows * cols
        b = np.frombuffer(data, dtype="<f8", count=rows, offset=offset)
        offset += 8 * rows
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    if offset != len(data):
        raise FormatError("trailing bytes after model payload")
    return MlpParams(weights=weights, biases=biases)


class MlpModel:
    """Protocol adapter used by the likelihood machinery.

    Exposes ``forward(y, z)`` and ``jvp_many(y, z, tangents)`` over fixed
    parameters so integrators can treat learned and analytic fields alike.
    """

    def __init__(self, params: MlpParams):
        self.params = params

    @property
    def dim(self) -> int:
        return self.params.dim

    def forward(self, y, z):
        return forward(self.params, y, z)

    def jvp_many(self, y, z, tangents):
        return jvp_many(self.params, y, z, tangents)
