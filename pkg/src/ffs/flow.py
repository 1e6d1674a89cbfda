"""Invertible normalizing flows on dense feature vectors.

Four variants are supported, all built from the same pieces:

* ``NICE``    M additive couplings followed by a diagonal scaling
* ``RealNVP`` M affine couplings
* ``Glow``    M blocks of ActNorm -> invertible linear (LU) -> affine coupling
* ``GIN``     M affine couplings whose log-scales sum to zero (volume preserving)

Consecutive couplings alternate which coordinates pass through unchanged:
coupling ``j`` keeps the even-indexed coordinates when ``j`` is even and the
odd-indexed ones otherwise.

Every computation runs on :mod:`ffs.autodiff` variables so the same code
serves inference, parameter gradients, input gradients and gradients of
samples ``f^-1(z)`` with respect to the parameters.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import autodiff as ad
from .errors import FormatError, InvalidArgument, NumericOverflow
from .numerics import LOG_2PI, SeededRng, as_vector

VARIANTS = ("NICE", "RealNVP", "Glow", "GIN")
SCALE_BOUND = 2.0

FLOW_MAGIC = b"FFSF"
FLOW_VERSION = 1


class SubnetMLP:
    """Fully connected net: ``hidden`` ReLU layers of ``width`` units, linear output."""

    def __init__(self, n_in, n_out, hidden, width, rng: SeededRng, prefix=""):
        if hidden < 1 or width < 1:
            raise InvalidArgument("subnet needs hidden >= 1 and width >= 1")
        self.prefix = prefix
        self.n_layers = hidden + 1
        sizes = [n_in] + [width] * hidden + [n_out]
        self.params = {}
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            if i < hidden:
                w = rng.normal((a, b)) / math.sqrt(a)
            else:
                w = np.zeros((a, b))
            self.params[f"{prefix}W{i}"] = w
            self.params[f"{prefix}b{i}"] = np.zeros(b)

    def apply(self, x, p):
        h = x
        for i in range(self.n_layers):
            h = h @ p[f"{self.prefix}W{i}"] + p[f"{self.prefix}b{i}"]
            if i < self.n_layers - 1:
                h = ad.relu(h)
        return h


def coupling_mask(d: int, index: int) -> np.ndarray:
    """Boolean mask of pass-through coordinates for coupling number ``index``."""
    parity = np.arange(d) % 2
    return parity == (index % 2)


class CouplingLayer:
    """``kind`` is ``additive``, ``affine`` or ``volume`` (zero-sum log-scales)."""

    def __init__(self, d, index, kind, hidden, width, rng: SeededRng):
        if kind not in ("additive", "affine", "volume"):
            raise InvalidArgument(f"unknown coupling kind {kind!r}")
        self.kind = kind
        self.mask = coupling_mask(d, index)
        self.keep = np.flatnonzero(self.mask)
        self.change = np.flatnonzero(~self.mask)
        n_in, n_out = len(self.keep), len(self.change)
        self.params = {}
        if kind != "additive":
            self.s_net = SubnetMLP(n_in, n_out, hidden, width, rng, "s.")
            self.params.update(self.s_net.params)
        else:
            self.s_net = None
        self.t_net = SubnetMLP(n_in, n_out, hidden, width, rng, "t.")
        self.params.update(self.t_net.params)

    @property
    def zero_logdet(self):
        return self.kind != "affine"

    def _scale_shift(self, xa, p):
        t = self.t_net.apply(xa, p)
        if self.s_net is None:
            return None, t
        raw = self.s_net.apply(xa, p)
        log_s = SCALE_BOUND * ad.tanh(raw * (1.0 / SCALE_BOUND))
        if self.kind == "volume":
            log_s = log_s - ad.mean(log_s, axis=1, keepdims=True)
        return log_s, t

    def forward(self, x, p):
        xa = ad.take_cols(x, self.keep)
        xb = ad.take_cols(x, self.change)
        log_s, t = self._scale_shift(xa, p)
        if log_s is None:
            yb = xb + t
        else:
            yb = xb * ad.exp(log_s) + t
        y = ad.merge_cols(xa, self.keep, yb, self.change)
        if self.zero_logdet:
            return y, 0.0
        return y, ad.sum(log_s, axis=1)

    def inverse(self, y, p):
        ya = ad.take_cols(y, self.keep)
        yb = ad.take_cols(y, self.change)
        log_s, t = self._scale_shift(ya, p)
        if log_s is None:
            xb = yb - t
        else:
            xb = (yb - t) * ad.exp(-log_s)
        x = ad.merge_cols(ya, self.keep, xb, self.change)
        if self.zero_logdet:
            return x, 0.0
        return x, -ad.sum(log_s, axis=1)


class ActNorm:
    """Per-coordinate affine map ``y = x * exp(log_scale) + bias``."""

    def __init__(self, d):
        self.params = {"log_scale": np.zeros(d), "bias": np.zeros(d)}
        self.initialized = False

    def initialize(self, x: np.ndarray):
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
        self.params["log_scale"] = -np.log(std)
        self.params["bias"] = -mean / std
        self.initialized = True

    def forward(self, x, p):
        ls = p["log_scale"]
        return x * ad.exp(ls) + p["bias"], ad.sum(ls) * np.ones(x.shape[0])

    def inverse(self, y, p):
        ls = p["log_scale"]
        return (y - p["bias"]) * ad.exp(-ls), -ad.sum(ls) * np.ones(y.shape[0])


class InvertibleLinear:
    """Dense mixing ``W = P L U`` with fixed permutation ``P``.

    ``L`` is unit lower triangular, ``U`` upper triangular with diagonal
    ``exp(log_diag)`` so it can never vanish.  Initialized to a random
    rotation (column signs folded into ``U``), so the log-determinant starts
    at 0.  A bare permutation start can undo the alternating coupling masks.
    """

    def __init__(self, d, rng: SeededRng):
        q, _ = np.linalg.qr(rng.normal((d, d)))
        P, lower, upper = scipy.linalg.lu(q)
        upper = upper * np.sign(np.diag(upper))
        self.perm = np.argmax(P, axis=1)
        self.params = {
            "lower": np.tril(lower, -1),
            "upper": np.triu(upper, 1),
            "log_diag": np.log(np.abs(np.diag(upper))),
        }
        self._lower_mask = np.tril(np.ones((d, d)), -1)
        self._upper_mask = np.triu(np.ones((d, d)), 1)
        self._eye = np.eye(d)

    @property
    def perm_matrix(self):
        d = len(self.perm)
        P = np.zeros((d, d))
        P[np.arange(d), self.perm] = 1.0
        return P

    def weight(self, p):
        L = p["lower"] * self._lower_mask + self._eye
        U = p["upper"] * self._upper_mask + self._eye * ad.exp(p["log_diag"])
        return ad.matmul(self.perm_matrix, L @ U)

    def forward(self, x, p):
        W = self.weight(p)
        return x @ W.T, ad.sum(p["log_diag"]) * np.ones(x.shape[0])

    def inverse(self, y, p):
        W_inv = ad.inv(self.weight(p))
        return y @ W_inv.T, -ad.sum(p["log_diag"]) * np.ones(y.shape[0])


class DiagScaling:
    def __init__(self, d):
        self.params = {"log_scale": np.zeros(d)}

    def forward(self, x, p):
        ls = p["log_scale"]
        return x * ad.exp(ls), ad.sum(ls) * np.ones(x.shape[0])

    def inverse(self, y, p):
        ls = p["log_scale"]
        return y * ad.exp(-ls), -ad.sum(ls) * np.ones(y.shape[0])


@dataclass
class FlowModel:
    variant: str
    d: int
    M: int
    H: int
    W: int
    layers: list = field(default_factory=list)

    @property
    def n_params(self):
        return sum(a.size for _, _, a in self.param_items())

    def param_items(self):
        """``(layer index, name, array)`` in the canonical order of gamma."""
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                yield i, name, layer.params[name]

    def get_params(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, _, a in self.param_items()])

    def set_params(self, vector):
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != self.n_params:
            raise InvalidArgument(f"expected {self.n_params} parameters, got {vector.size}")
        pos = 0
        for i, name, arr in list(self.param_items()):
            n = arr.size
            self.layers[i].params[name] = vector[pos:pos + n].reshape(arr.shape).copy()
            pos += n

    def needs_init(self):
        return any(isinstance(l, ActNorm) and not l.initialized for l in self.layers)

    def copy(self):
        clone = load_flow_bytes(flow_to_bytes(self))
        return clone


def init_flow(variant, d, M=2, H=2, W=64, rng: SeededRng | None = None) -> FlowModel:
    if variant not in VARIANTS:
        raise InvalidArgument(f"unknown flow variant {variant!r}; choose from {VARIANTS}")
    if d < 2:
        raise InvalidArgument("coupling layers need d >= 2")
    if M < 1 or H < 1 or W < 1:
        raise InvalidArgument("M, H and W must all be >= 1")
    rng = rng if rng is not None else SeededRng(0)
    layers = []
    kind = {"NICE": "additive", "RealNVP": "affine", "Glow": "affine", "GIN": "volume"}[variant]
    for j in range(M):
        if variant == "Glow":
            layers.append(ActNorm(d))
            layers.append(InvertibleLinear(d, rng))
        layers.append(CouplingLayer(d, j, kind, H, W, rng))
    if variant == "NICE":
        layers.append(DiagScaling(d))
    return FlowModel(variant, d, M, H, W, layers)


def identity_flow(d: int) -> FlowModel:
    """Flow with no layers (``f(l) = l``), for any ``d >= 1``."""
    return FlowModel("identity", d, 0, 0, 0, [])


def scaling_flow(log_scale) -> FlowModel:
    """Single diagonal scaling ``f(l) = l * exp(log_scale)``."""
    log_scale = np.atleast_1d(np.asarray(log_scale, dtype=np.float64))
    layer = DiagScaling(len(log_scale))
    layer.params["log_scale"] = log_scale.copy()
    return FlowModel("scaling", len(log_scale), 0, 0, 0, [layer])


def initialize_actnorm(model: FlowModel, batch):
    """Data-dependent ActNorm initialization from one batch (no-op if done)."""
    if not model.needs_init():
        return
    x = ad.Var(_as_batch(model, batch)[0])
    for layer in model.layers:
        if isinstance(layer, ActNorm) and not layer.initialized:
            layer.initialize(x.value)
        x, _ = layer.forward(x, _consts(layer))


# -- tape-level entry points ---------------------------------------------------


def _consts(layer):
    return {k: ad.Var(v) for k, v in layer.params.items()}


def param_vars(model: FlowModel, track: bool = True):
    """One ``{name: Var}`` dict per layer; leaves when ``track`` is true."""
    make = ad.leaf if track else ad.Var
    return [{k: make(v) for k, v in layer.params.items()} for layer in model.layers]


def flatten_grads(model: FlowModel, pvars) -> np.ndarray:
    out = []
    for i, name, arr in model.param_items():
        g = pvars[i][name].grad
        out.append(np.zeros(arr.size) if g is None else g.ravel())
    return np.concatenate(out)


def _check(value, what, index):
    if not np.all(np.isfinite(value)):
        raise NumericOverflow(f"non-finite values after {what} of layer {index}", where=index)


def forward_var(model: FlowModel, x, pvars=None):
    """Tape forward pass; returns ``(z, logdet)`` as variables."""
    pvars = param_vars(model, track=False) if pvars is None else pvars
    x = ad.wrap(x)
    logdet = ad.Var(np.zeros(x.shape[0]))
    for i, layer in enumerate(model.layers):
        x, ld = layer.forward(x, pvars[i])
        _check(x.value, "forward", i)
        if not isinstance(ld, float):
            logdet = logdet + ld
    _check(logdet.value, "forward logdet", len(model.layers) - 1)
    return x, logdet


def inverse_var(model: FlowModel, z, pvars=None):
    """Tape inverse pass; returns ``(x, logdet of the inverse map)``."""
    pvars = param_vars(model, track=False) if pvars is None else pvars
    z = ad.wrap(z)
    logdet = ad.Var(np.zeros(z.shape[0]))
    for i in reversed(range(len(model.layers))):
        z, ld = model.layers[i].inverse(z, pvars[i])
        _check(z.value, "inverse", i)
        if not isinstance(ld, float):
            logdet = logdet + ld
    return z, logdet


def log_prob_var(model: FlowModel, x, pvars=None):
    z, logdet = forward_var(model, x, pvars)
    d = z.shape[1]
    return ad.sum(z * z, axis=1) * -0.5 - 0.5 * d * LOG_2PI + logdet


# -- array API -----------------------------------------------------------------


def _as_batch(model: FlowModel, x, name="l"):
    x = as_vector(x, name)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != model.d:
        raise InvalidArgument(f"{name} has dimension {x2.shape[-1]}, model expects {model.d}")
    return x2, single


def forward(model: FlowModel, l):
    """``(z, logdet)`` for one vector or a batch of row vectors."""
    x, single = _as_batch(model, l)
    z, logdet = forward_var(model, x)
    if single:
        return z.value[0], float(logdet.value[0])
    return z.value, logdet.value


def inverse(model: FlowModel, z):
    x, single = _as_batch(model, z, "z")
    out, _ = inverse_var(model, x)
    return out.value[0] if single else out.value


def inverse_logdet(model: FlowModel, z):
    x, single = _as_batch(model, z, "z")
    out, logdet = inverse_var(model, x)
    if single:
        return out.value[0], float(logdet.value[0])
    return out.value, logdet.value


def log_prob(model: FlowModel, l):
    x, single = _as_batch(model, l)
    lp = log_prob_var(model, x).value
    return float(lp[0]) if single else lp


def nll_loss(model: FlowModel, batch) -> float:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.size == 0:
        raise InvalidArgument("NLL of an empty batch")
    return float(-np.mean(log_prob(model, np.atleast_2d(batch))))


def grad_params_nll(model: FlowModel, batch) -> np.ndarray:
    """Gradient of the mean NLL with respect to the flattened parameters."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.size == 0:
        raise InvalidArgument("NLL of an empty batch")
    x, _ = _as_batch(model, np.atleast_2d(batch))
    pvars = param_vars(model)
    loss = -ad.mean(log_prob_var(model, x, pvars))
    loss.backward()
    return flatten_grads(model, pvars)


def grad_input_logprob(model: FlowModel, o) -> np.ndarray:
    """d log p(o) / d o, row-wise for a batch."""
    x, single = _as_batch(model, o, "o")
    xv = ad.leaf(x)
    ad.sum(log_prob_var(model, xv)).backward()
    return xv.grad[0] if single else xv.grad


# -- checkpoint ----------------------------------------------------------------


def _layer_state(layer):
    """Trainable parameters then buffers, as one flat float64 vector."""
    parts = [layer.params[n].ravel() for n in sorted(layer.params)]
    if isinstance(layer, InvertibleLinear):
        parts.append(layer.perm.astype(np.float64))
    if isinstance(layer, ActNorm):
        parts.append(np.array([1.0 if layer.initialized else 0.0]))
    return np.concatenate(parts)


def _set_layer_state(layer, vec):
    pos = 0
    for n in sorted(layer.params):
        arr = layer.params[n]
        layer.params[n] = vec[pos:pos + arr.size].reshape(arr.shape).copy()
        pos += arr.size
    if isinstance(layer, InvertibleLinear):
        d = len(layer.perm)
        layer.perm = vec[pos:pos + d].astype(np.int64)
        pos += d
    if isinstance(layer, ActNorm):
        layer.initialized = bool(vec[pos])
        pos += 1
    return pos


def flow_to_bytes(model: FlowModel) -> bytes:
    if model.variant not in VARIANTS:
        raise InvalidArgument(f"cannot serialize a {model.variant!r} flow")
    buf = io.BytesIO()
    buf.write(FLOW_MAGIC)
    buf.write(struct.pack("<IB4I", FLOW_VERSION, VARIANTS.index(model.variant),
                          model.d, model.M, model.H, model.W))
    payload = np.concatenate([_layer_state(l) for l in model.layers])
    buf.write(payload.astype("<f8").tobytes())
    return buf.getvalue()


FLOW_HEADER = struct.Struct("<IB4I")


def load_flow_bytes(data: bytes, offset: int = 0) -> FlowModel:
    model, _ = read_flow(data, offset)
    return model


def read_flow(data: bytes, offset: int = 0):
    """Decode a flow block starting at ``offset``; returns ``(model, end offset)``."""
    if data[offset:offset + 4] != FLOW_MAGIC:
        raise FormatError("bad flow magic", offset)
    pos = offset + 4
    if len(data) < pos + FLOW_HEADER.size:
        raise FormatError("truncated flow header", len(data))
    version, tag, d, M, H, W = FLOW_HEADER.unpack_from(data, pos)
    if version != FLOW_VERSION:
        raise FormatError(f"unsupported flow format version {version}", pos)
    if tag >= len(VARIANTS):
        raise FormatError(f"unknown variant tag {tag}", pos + 4)
    pos += FLOW_HEADER.size
    try:
        model = init_flow(VARIANTS[tag], d, M, H, W, SeededRng(0))
    except InvalidArgument as exc:
        raise FormatError(f"invalid flow shape: {exc}", pos - 16) from None
    n = sum(_layer_state(l).size for l in model.layers)
    end = pos + 8 * n
    if len(data) < end:
        raise FormatError(f"truncated flow parameters (need {n} floats)", len(data))
    vec = np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(np.float64)
    k = 0
    for layer in model.layers:
        k += _set_layer_state(layer, vec[k:])
    return model, end


def save_flow(model: FlowModel, path):
    with open(path, "wb") as fh:
        fh.write(flow_to_bytes(model))


def load_flow(path) -> FlowModel:
    with open(path, "rb") as fh:
        data = fh.read()
    model, end = read_flow(data)
    if end != len(data):
        raise FormatError("trailing bytes after flow block", end)
    return model
