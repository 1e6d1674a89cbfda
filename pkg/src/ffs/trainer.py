"""Joint training of flow, classification head, energy weights and Phi.

Each iteration samples a batch, scores the detection surrogate on every
record and the flow NLL on inlier records only.  During warmup
(``i <= warmup_iters``) the regularizer is off and no outliers are
synthesized; afterwards outliers are drawn every iteration and the full
objective ``det + beta * nll + alpha * reg`` is minimized.  Gradients reach
the flow through the NLL and, via ``o = f^-1(z)``, through the regularizer.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import flow as flowlib
from . import heads
from . import synthesis
from .datakit import FeatureSet
from .errors import FormatError, InvalidArgument, NumericOverflow
from .heads import HeadBundle, LossWeights
from .numerics import SeededRng
from .synthesis import SynthesisConfig

CKPT_MAGIC = b"FFSC"
CKPT_VERSION = 1
OPTIMIZERS = ("adam", "sgd")


@dataclass
class TrainConfig:
    total_iters: int = 2000
    warmup_iters: int | None = None  # None -> floor(0.6 * total_iters)
    batch_size: int = 128
    lr_flow: float = 1e-3
    lr_heads: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    flow_variant: str = "Glow"
    M: int = 2
    H: int = 2
    W: int = 64
    head_hidden: tuple = (64, 64)
    T: float = 1.0
    vos_ridge: float = 1e-3
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.warmup_iters is None:
            self.warmup_iters = int(math.floor(0.6 * self.total_iters))
        if not 0 <= self.warmup_iters <= self.total_iters:
            raise InvalidArgument("warmup_iters must lie in [0, total_iters]")
        if self.batch_size < 2:
            raise InvalidArgument("batch_size must be >= 2")
        if self.lr_flow < 0 or self.lr_heads <= 0:
            raise InvalidArgument("learning rates must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise InvalidArgument(f"unknown optimizer {self.optimizer!r}")


class Optimizer:
    """Adam (per-parameter step counts) or plain SGD over named arrays."""

    def __init__(self, kind="adam", b1=0.9, b2=0.999, eps=1e-8):
        self.kind = kind
        self.b1, self.b2, self.eps = b1, b2, eps
        self.slots = {}  # key -> [t, m, v]

    def step(self, key, param, grad, lr):
        if self.kind == "sgd":
            return param - lr * grad
        slot = self.slots.get(key)
        if slot is None:
            slot = self.slots[key] = [0, np.zeros_like(param), np.zeros_like(param)]
        slot[0] += 1
        t = slot[0]
        slot[1] = self.b1 * slot[1] + (1 - self.b1) * grad
        slot[2] = self.b2 * slot[2] + (1 - self.b2) * grad * grad
        m_hat = slot[1] / (1 - self.b1 ** t)
        v_hat = slot[2] / (1 - self.b2 ** t)
        return param - lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainState:
    iteration: int
    flow: flowlib.FlowModel
    bundle: HeadBundle
    optimizer: Optimizer
    rng: SeededRng
    history: list = field(default_factory=list)  # (iter, det, nll, reg, total)
    synthesis_calls: int = 0
    delta_frozen: float | None = None


def init_state(d: int, K: int, cfg: TrainConfig) -> TrainState:
    flow = flowlib.init_flow(cfg.flow_variant, d, cfg.M, cfg.H, cfg.W, SeededRng(cfg.seed, (1,)))
    bundle = HeadBundle.create(K, d, cfg.head_hidden, cfg.T, SeededRng(cfg.seed, (2,)))
    return TrainState(0, flow, bundle, Optimizer(cfg.optimizer), SeededRng(cfg.seed, (3,)))


def _check_dataset(data: FeatureSet, K: int):
    labels = data.labels
    if np.any((labels < 0) | (labels > K)):
        raise InvalidArgument("training labels must lie in [0, K]")
    missing = [c for c in range(K) if not np.any(labels == c)]
    if missing:
        raise InvalidArgument(f"inlier class {missing[0]} has no training samples")


def _apply_updates(state: TrainState, cfg: TrainConfig, fvars, hvars):
    opt = state.optimizer
    for i, layer in enumerate(state.flow.layers):
        for name in sorted(layer.params):
            g = fvars[i][name].grad
            if g is None or cfg.lr_flow == 0:
                continue
            layer.params[name] = opt.step(("flow", i, name), layer.params[name], g, cfg.lr_flow)
    b = state.bundle
    for (group, name), var in hvars.items():
        if var.grad is None:
            continue
        key = ("heads", group, name)
        if group == "head":
            b.head.params[name] = opt.step(key, b.head.params[name], var.grad, cfg.lr_heads)
        elif group == "energy":
            b.energy.r = opt.step(key, b.energy.r, var.grad, cfg.lr_heads)
        else:
            new = opt.step(key, np.array(getattr(b.phi, name)), var.grad, cfg.lr_heads)
            setattr(b.phi, name, float(new))


def _all_finite(state: TrainState):
    if not np.all(np.isfinite(state.flow.get_params())):
        return "flow"
    if not np.all(np.isfinite(state.bundle.get_params())):
        return "heads"
    return None


def train(data: FeatureSet, cfg: TrainConfig, state: TrainState | None = None,
          callback=None) -> TrainState:
    """Run (or resume) training until ``cfg.total_iters``.

    ``callback(state, info)`` is called after every step; ``info`` carries
    the loss parts, whether the step was a warmup step and the synthesized
    outlier batch (``None`` during warmup).
    """
    K = data.n_classes()
    _check_dataset(data, K)
    if state is None:
        state = init_state(data.d, K, cfg)
    inlier_mask = data.labels < K
    gaussians = None
    scfg = cfg.synthesis
    if scfg.mode in ("vos", "vos_plus"):
        gaussians = synthesis.fit_class_gaussians(
            data.features[inlier_mask], data.labels[inlier_mask], cfg.vos_ridge, K)
    n = len(data)
    batch_size = min(cfg.batch_size, n)
    rng = state.rng

    while state.iteration < cfg.total_iters:
        i = state.iteration + 1
        idx = np.sort(rng.choice(n, batch_size))
        x, y = data.features[idx], data.labels[idx]
        inl = x[y < K]
        if state.flow.needs_init():
            flowlib.initialize_actnorm(state.flow, inl if len(inl) >= 2 else data.features[inlier_mask])

        warm = i <= cfg.warmup_iters
        batch = None
        outlier_z = outliers = None
        if not warm and len(inl):
            delta = None
            if scfg.mode == "projection":
                if scfg.freeze_delta and state.delta_frozen is not None:
                    delta = state.delta_frozen
                else:
                    delta = synthesis.estimate_delta(state.flow, inl)
                    if scfg.freeze_delta:
                        state.delta_frozen = delta
            batch = synthesis.sample_outliers(state.flow, scfg, rng, delta=delta, gaussians=gaussians)
            state.synthesis_calls += 1
            if batch.latents is not None:
                outlier_z = batch.latents
            elif len(batch):
                outliers = batch.features

        weights = cfg.weights
        if warm:
            weights = LossWeights(0.0, weights.beta, weights.reg_variant, weights.m_in, weights.m_out)
        fvars = flowlib.param_vars(state.flow)
        hvars = state.bundle.variables()
        total, parts = heads.objective_var(state.flow, state.bundle, x, y, weights,
                                           outlier_z=outlier_z, outliers=outliers,
                                           fvars=fvars, hvars=hvars)
        parts["total"] = float(total.value)
        for name, val in parts.items():
            if not math.isfinite(val):
                raise NumericOverflow(f"{name} loss is not finite at iteration {i}", where=(i, name))
        total.backward()
        _apply_updates(state, cfg, fvars, hvars)
        bad = _all_finite(state)
        if bad:
            raise NumericOverflow(f"non-finite {bad} parameters after iteration {i}", where=(i, bad))
        state.iteration = i
        state.history.append((i, parts["det"], parts["nll"], parts["reg"], parts["total"]))
        if callback is not None:
            callback(state, {"iteration": i, "warmup": warm, "parts": parts, "outliers": batch})
    return state


def train_flow(flow: flowlib.FlowModel, data, iters: int, batch_size: int = 128,
               lr: float = 1e-3, seed: int = 0, eval_every: int = 0):
    """Maximum-likelihood training of a flow alone.

    Returns the per-step batch NLL and, when ``eval_every > 0``, a list of
    ``(step, full-data NLL)`` pairs recorded every ``eval_every`` steps.
    """
    data = np.asarray(data, dtype=np.float64)
    rng = SeededRng(seed, (4,))
    opt = Optimizer("adam")
    batch_size = min(batch_size, len(data))
    losses, evals = [], []
    for step in range(1, iters + 1):
        xb = data[np.sort(rng.choice(len(data), batch_size))]
        if flow.needs_init():
            flowlib.initialize_actnorm(flow, xb)
        pvars = flowlib.param_vars(flow)
        loss = -ad.mean(flowlib.log_prob_var(flow, xb, pvars))
        loss.backward()
        for i, layer in enumerate(flow.layers):
            for name in sorted(layer.params):
                g = pvars[i][name].grad
                if g is not None:
                    layer.params[name] = opt.step((i, name), layer.params[name], g, lr)
        losses.append(float(loss.value))
        if eval_every and step % eval_every == 0:
            evals.append((step, flowlib.nll_loss(flow, data)))
    return losses, evals


# -- energies / evaluation helpers -----------------------------------------------


def energies(bundle: HeadBundle, features):
    logits = heads.class_logits(bundle.head, np.atleast_2d(features))
    return heads.energy_score(logits, bundle.energy), logits


# -- checkpoint ----------------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data, self.pos = data, pos

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def values(self, fmt, what):
        st = struct.Struct("<" + fmt)
        return st.unpack(self.take(st.size, what))

    def unpack(self, fmt, what):
        vals = self.values(fmt, what)
        return vals if len(vals) > 1 else vals[0]

    def floats(self, n, what):
        return np.frombuffer(self.take(8 * n, what), dtype="<f8").astype(np.float64)


def _opt_keys(state: TrainState):
    keys = []
    for i, layer in enumerate(state.flow.layers):
        for name in sorted(layer.params):
            keys.append((("flow", i, name), layer.params[name].size))
    for group, name, arr in state.bundle.param_items():
        keys.append((("heads", group, name), np.size(arr)))
    return keys


def _int128(x):
    return int(x).to_bytes(16, "little")


def checkpoint_bytes(state: TrainState) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IIQ", CKPT_VERSION, state.iteration, state.synthesis_calls))
    buf.write(flowlib.flow_to_bytes(state.flow))

    b = state.bundle
    buf.write(struct.pack("<III", b.head.K, b.head.d, len(b.head.hidden)))
    buf.write(struct.pack(f"<{len(b.head.hidden)}I", *b.head.hidden))
    buf.write(struct.pack("<d", b.energy.T))
    buf.write(b.get_params().astype("<f8").tobytes())

    opt = state.optimizer
    buf.write(struct.pack("<B", OPTIMIZERS.index(opt.kind)))
    for key, size in _opt_keys(state):
        slot = opt.slots.get(key)
        if slot is None:
            buf.write(struct.pack("<Q", 0))
            continue
        buf.write(struct.pack("<Q", slot[0]))
        buf.write(np.ravel(slot[1]).astype("<f8").tobytes())
        buf.write(np.ravel(slot[2]).astype("<f8").tobytes())

    rng = state.rng
    st = rng.get_state()
    buf.write(struct.pack("<QI", rng.seed, len(rng.stream)))
    buf.write(struct.pack(f"<{len(rng.stream)}Q", *rng.stream))
    buf.write(_int128(st["state"]["state"]) + _int128(st["state"]["inc"]))
    buf.write(struct.pack("<BQ", st["has_uint32"], st["uinteger"]))

    buf.write(struct.pack("<d", math.nan if state.delta_frozen is None else state.delta_frozen))
    buf.write(struct.pack("<I", len(state.history)))
    if state.history:
        buf.write(np.asarray(state.history, dtype="<f8").tobytes())
    return buf.getvalue()


def state_from_bytes(data: bytes) -> TrainState:
    r = _Reader(data)
    if r.take(4, "magic") != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version = r.unpack("I", "version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    iteration, calls = r.unpack("IQ", "header")
    flow, r.pos = flowlib.read_flow(data, r.pos)

    K, d, n_hidden = r.unpack("III", "head header")
    hidden = r.values(f"{n_hidden}I", "head widths")
    T = r.unpack("d", "temperature")
    bundle = HeadBundle.create(K, d, hidden, T)
    bundle.set_params(r.floats(bundle.get_params().size, "head parameters"))

    kind = r.unpack("B", "optimizer kind")
    if kind >= len(OPTIMIZERS):
        raise FormatError(f"unknown optimizer tag {kind}", r.pos - 1)
    opt = Optimizer(OPTIMIZERS[kind])
    state = TrainState(iteration, flow, bundle, opt, SeededRng(0), synthesis_calls=calls)
    for key, size in _opt_keys(state):
        t = r.unpack("Q", "optimizer step count")
        if t:
            shape = _param_shape(state, key)
            m = r.floats(size, "optimizer moments").reshape(shape)
            v = r.floats(size, "optimizer moments").reshape(shape)
            opt.slots[key] = [t, m, v]

    seed, n_stream = r.unpack("QI", "rng header")
    stream = r.values(f"{n_stream}Q", "rng stream")
    raw = r.take(32, "rng state")
    has32, uint = r.unpack("BQ", "rng cache")
    rng = SeededRng(seed, stream)
    rng.set_state({
        "bit_generator": "PCG64",
        "state": {"state": int.from_bytes(raw[:16], "little"),
                  "inc": int.from_bytes(raw[16:], "little")},
        "has_uint32": has32, "uinteger": uint,
    })
    state.rng = rng

    delta = r.unpack("d", "delta")
    state.delta_frozen = None if math.isnan(delta) else delta
    n_hist = r.unpack("I", "history length")
    hist = r.floats(5 * n_hist, "history").reshape(n_hist, 5)
    state.history = [(int(h[0]), float(h[1]), float(h[2]), float(h[3]), float(h[4])) for h in hist]
    if r.pos != len(data):
        raise FormatError("trailing bytes after checkpoint", r.pos)
    return state


def _param_shape(state, key):
    if key[0] == "flow":
        return state.flow.layers[key[1]].params[key[2]].shape
    for group, name, arr in state.bundle.param_items():
        if (group, name) == key[1:]:
            return np.shape(arr)
    raise KeyError(key)


def save_checkpoint(state: TrainState, path):
    data = checkpoint_bytes(state)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as fh:
        return state_from_bytes(fh.read())
