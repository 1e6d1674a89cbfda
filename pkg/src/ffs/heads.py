"""Classification head, energy scoring, binary inlier classifier and losses.

The head maps a d-dimensional feature to K+1 logits; index K is background.
Energy scores use only the K inlier logits::

    E = -T * log(sum_k w_k * exp(h_k / T)),   w = exp(r)

and a logistic classifier ``p = sigmoid(u * E + v)`` turns energies into
inlier probabilities for the regularization loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import flow as flowlib
from .errors import InvalidArgument
from .numerics import SeededRng, as_vector

PROB_CLAMP = 1e-12
REG_VARIANTS = ("BCE", "CE", "JSD", "Hinge")


@dataclass
class ClassifierHead:
    """Stack of affine maps (ReLU between them) ending in K+1 logits.

    With ``hidden == ()`` this is a single affine map ``x @ W0 + b0``.
    """

    K: int
    d: int
    hidden: tuple = ()
    params: dict = field(default_factory=dict)

    @classmethod
    def create(cls, K, d, hidden=(), rng: SeededRng | None = None):
        if K < 1 or d < 1:
            raise InvalidArgument("head needs K >= 1 and d >= 1")
        rng = rng if rng is not None else SeededRng(0)
        sizes = [d, *hidden, K + 1]
        params = {}
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            params[f"W{i}"] = rng.normal((a, b)) / math.sqrt(a)
            params[f"b{i}"] = np.zeros(b)
        return cls(K, d, tuple(hidden), params)

    @property
    def n_layers(self):
        return len(self.hidden) + 1


@dataclass
class EnergyParams:
    r: np.ndarray
    T: float = 1.0

    @classmethod
    def create(cls, K, T=1.0):
        if T <= 0:
            raise InvalidArgument("temperature must be positive")
        return cls(np.zeros(K), float(T))

    @property
    def weights(self):
        return np.exp(self.r)


@dataclass
class BinaryClassifier:
    u: float = -1.0
    v: float = 0.0

    def __call__(self, energy):
        return ad.sigmoid(self.u * np.asarray(energy, dtype=np.float64) + self.v).value


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    reg_variant: str = "BCE"
    m_in: float = -25.0
    m_out: float = -5.0

    def __post_init__(self):
        for name in ("alpha", "beta"):
            if getattr(self, name) < 0:
                raise InvalidArgument(f"{name}: loss weights must be non-negative")
        if self.reg_variant not in REG_VARIANTS:
            raise InvalidArgument(f"unknown regularization loss {self.reg_variant!r}")


@dataclass
class HeadBundle:
    head: ClassifierHead
    energy: EnergyParams
    phi: BinaryClassifier

    @classmethod
    def create(cls, K, d, hidden=(), T=1.0, rng=None):
        return cls(ClassifierHead.create(K, d, hidden, rng), EnergyParams.create(K, T), BinaryClassifier())

    def param_items(self):
        """``(group, name, array)`` in canonical order."""
        for name in sorted(self.head.params):
            yield "head", name, self.head.params[name]
        yield "energy", "r", self.energy.r
        yield "phi", "u", np.array(self.phi.u)
        yield "phi", "v", np.array(self.phi.v)

    def get_params(self):
        return np.concatenate([np.ravel(a) for _, _, a in self.param_items()])

    def set_params(self, vector):
        vector = np.asarray(vector, dtype=np.float64)
        expected = sum(np.size(a) for _, _, a in self.param_items())
        if vector.size != expected:
            raise InvalidArgument(f"expected {expected} head parameters, got {vector.size}")
        pos = 0
        for group, name, arr in list(self.param_items()):
            n = np.size(arr)
            chunk = vector[pos:pos + n].reshape(np.shape(arr)).copy()
            pos += n
            if group == "head":
                self.head.params[name] = chunk
            elif group == "energy":
                self.energy.r = chunk
            else:
                setattr(self.phi, name, float(chunk))

    def variables(self, track=True):
        make = ad.leaf if track else ad.Var
        return {(g, n): make(a) for g, n, a in self.param_items()}

    def flatten_grads(self, hvars):
        out = []
        for g, n, a in self.param_items():
            grad = hvars[(g, n)].grad
            out.append(np.zeros(np.size(a)) if grad is None else np.ravel(grad))
        return np.concatenate(out)


# -- tape builders -------------------------------------------------------------


def logits_var(head: ClassifierHead, x, hvars=None):
    h = ad.wrap(x)
    for i in range(head.n_layers):
        if hvars is None:
            W, b = head.params[f"W{i}"], head.params[f"b{i}"]
        else:
            W, b = hvars[("head", f"W{i}")], hvars[("head", f"b{i}")]
        h = h @ W + b
        if i < head.n_layers - 1:
            h = ad.relu(h)
    return h


def energy_var(logits, K, r, T):
    inlier = ad.take_cols(ad.wrap(logits), np.arange(K))
    return ad.logsumexp(inlier * (1.0 / T) + r, axis=1) * (-T)


def phi_var(energy, u, v):
    return ad.sigmoid(energy * u + v)


def bce_var(p_id, p_ood):
    p_id = ad.clip(p_id, PROB_CLAMP, 1.0 - PROB_CLAMP)
    p_ood = ad.clip(p_ood, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -ad.mean(ad.log(p_id)) - ad.mean(ad.log(1.0 - p_ood))


def ce_background_var(ood_logits, K):
    lsm = ad.log_softmax(ood_logits, axis=1)
    return -ad.mean(ad.take_cols(lsm, [K]))


def jsd_uniform_var(ood_logits):
    logp = ad.log_softmax(ood_logits, axis=1)
    p = ad.exp(logp)
    n_cls = ood_logits.shape[1]
    u = 1.0 / n_cls
    logm = ad.log((p + u) * 0.5)
    kl_pm = ad.sum(p * (logp - logm), axis=1)
    kl_um = ad.sum((math.log(u) - logm) * u, axis=1)
    return ad.mean((kl_pm + kl_um) * 0.5)


def hinge_var(e_id, e_ood, m_in, m_out):
    return ad.mean(ad.relu(e_id - m_in)) + ad.mean(ad.relu(m_out - e_ood))


def reg_var(weights: LossWeights, K, id_logits, ood_logits, hvars, T):
    """Regularization loss on tape from inlier and outlier logits."""
    r = hvars[("energy", "r")]
    if weights.reg_variant == "CE":
        return ce_background_var(ood_logits, K)
    if weights.reg_variant == "JSD":
        return jsd_uniform_var(ood_logits)
    e_id = energy_var(id_logits, K, r, T)
    e_ood = energy_var(ood_logits, K, r, T)
    if weights.reg_variant == "Hinge":
        return hinge_var(e_id, e_ood, weights.m_in, weights.m_out)
    u, v = hvars[("phi", "u")], hvars[("phi", "v")]
    return bce_var(phi_var(e_id, u, v), phi_var(e_ood, u, v))


def det_var(logits, labels):
    lsm = ad.log_softmax(logits, axis=1)
    picked = ad.getitem(lsm, (np.arange(len(labels)), labels))
    return -ad.mean(picked)


# -- array API -----------------------------------------------------------------


def class_logits(head: ClassifierHead, feature):
    x = as_vector(feature, "feature")
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.shape[1] != head.d:
        raise InvalidArgument(f"feature has dimension {x2.shape[1]}, head expects {head.d}")
    out = logits_var(head, x2).value
    return out[0] if single else out


def energy_score(logits, params: EnergyParams):
    """Energy over the first K logits; accepts one logit vector or a batch."""
    lg = as_vector(logits, "logits")
    single = lg.ndim == 1
    lg2 = lg[None, :] if single else lg
    K = len(params.r)
    if K < 1 or lg2.shape[1] < K:
        raise InvalidArgument("energy needs at least K logits")
    e = energy_var(lg2, K, params.r, params.T).value
    return float(e[0]) if single else e


def _nonempty(x, name):
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.size == 0:
        raise InvalidArgument(f"{name} is empty")
    return x


def reg_loss_bce(id_energies, ood_energies, phi: BinaryClassifier) -> float:
    """Binary cross-entropy; inlier and outlier terms are averaged separately."""
    e_id = _nonempty(id_energies, "id_energies")
    e_ood = _nonempty(ood_energies, "ood_energies")
    return float(bce_var(phi_var(e_id, phi.u, phi.v), phi_var(e_ood, phi.u, phi.v)).value)


def bce_from_probs(p_id, p_ood) -> float:
    return float(bce_var(_nonempty(p_id, "p_id"), _nonempty(p_ood, "p_ood")).value)


def reg_loss_variant(variant, id_logits, ood_logits, energy: EnergyParams | None = None,
                     m_in=-25.0, m_out=-5.0) -> float:
    """CE / JSD / Hinge alternatives to the BCE regularizer.

    ``id_logits`` is only used by Hinge (through inlier energies).
    """
    ood = np.atleast_2d(_nonempty(ood_logits, "ood_logits"))
    if variant == "CE":
        return float(ce_background_var(ood, ood.shape[1] - 1).value)
    if variant == "JSD":
        return float(jsd_uniform_var(ood).value)
    if variant == "Hinge":
        idl = np.atleast_2d(_nonempty(id_logits, "id_logits"))
        energy = energy if energy is not None else EnergyParams.create(ood.shape[1] - 1)
        e_id = energy_score(idl, energy)
        e_ood = energy_score(ood, energy)
        return float(hinge_var(e_id, e_ood, m_in, m_out).value)
    raise InvalidArgument(f"unknown regularization variant {variant!r}")


def hinge_from_energies(e_id, e_ood, m_in, m_out) -> float:
    return float(hinge_var(_nonempty(e_id, "e_id"), _nonempty(e_ood, "e_ood"), m_in, m_out).value)


def total_loss(det_loss, nll_loss, reg_loss, weights: LossWeights) -> float:
    return det_loss + weights.beta * nll_loss + weights.alpha * reg_loss


def _check_labels(labels, K):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise InvalidArgument("empty batch")
    bad = (labels < 0) | (labels > K)
    if bad.any():
        raise InvalidArgument(f"label {labels[bad][0]} outside [0, {K}]")
    return labels


def det_loss_surrogate(head: ClassifierHead, features, labels) -> float:
    """Mean softmax cross-entropy over all K+1 classes."""
    labels = _check_labels(labels, head.K)
    logits = class_logits(head, np.atleast_2d(features))
    return float(det_var(logits, labels).value)


def objective_var(flow, bundle: HeadBundle, features, labels, weights: LossWeights,
                  *, outlier_z=None, outliers=None, fvars=None, hvars=None):
    """Total loss ``det + beta * nll + alpha * reg`` as a tape variable.

    Outliers may be given as latent codes ``outlier_z`` (then ``o = f^-1(z)``
    is differentiated through the flow parameters) or as fixed feature
    vectors ``outliers``.  Without either, or with ``alpha == 0``, the
    regularizer is skipped entirely.  Returns ``(total, parts)`` where
    ``parts`` holds the float values of det, nll and reg.
    """
    K = bundle.head.K
    labels = _check_labels(labels, K)
    if not isinstance(features, ad.Var):
        features = ad.Var(np.atleast_2d(np.asarray(features, dtype=np.float64)))
    logits = logits_var(bundle.head, features, hvars)
    det = det_var(logits, labels)
    inlier = labels < K
    if inlier.any():
        nll = -ad.mean(flowlib.log_prob_var(flow, ad.getitem(features, np.flatnonzero(inlier)), fvars))
    else:
        nll = ad.Var(0.0)
    total = det + nll * weights.beta
    reg_value = 0.0
    use_reg = weights.alpha > 0 and (outlier_z is not None or outliers is not None)
    if use_reg and inlier.any():
        if outlier_z is not None:
            z = outlier_z if isinstance(outlier_z, ad.Var) else np.atleast_2d(outlier_z)
            o, _ = flowlib.inverse_var(flow, z, fvars)
        else:
            o = ad.Var(np.atleast_2d(outliers))
        id_logits = ad.getitem(logits, np.flatnonzero(inlier))
        ood_logits = logits_var(bundle.head, o, hvars)
        reg = reg_var(weights, K, id_logits, ood_logits, hvars if hvars is not None
                      else bundle.variables(track=False), bundle.energy.T)
        total = total + reg * weights.alpha
        reg_value = float(reg.value)
    parts = {"det": float(det.value), "nll": float(nll.value), "reg": reg_value}
    return total, parts


def grad_params_heads(flow, bundle: HeadBundle, features, labels, weights: LossWeights,
                      *, outlier_z=None, outliers=None):
    """Gradients of the total loss.

    Returns ``(loss, heads_grad, flow_grad)``: ``heads_grad`` follows
    :meth:`HeadBundle.param_items` order (head, energy r, phi u/v) and
    ``flow_grad`` the flow's canonical parameter order.
    """
    fvars = flowlib.param_vars(flow)
    hvars = bundle.variables()
    total, _ = objective_var(flow, bundle, features, labels, weights,
                             outlier_z=outlier_z, outliers=outliers, fvars=fvars, hvars=hvars)
    total.backward()
    return float(total.value), bundle.flatten_grads(hvars), flowlib.flatten_grads(flow, fvars)


def grad_inputs_heads(flow, bundle: HeadBundle, features, labels, weights: LossWeights,
                      *, outlier_z=None):
    """Gradients of the total loss with respect to the input features and,
    when given, the outlier latent codes.  Returns ``(loss, d_features, d_z)``."""
    xv = ad.leaf(np.atleast_2d(np.asarray(features, dtype=np.float64)))
    zv = None if outlier_z is None else ad.leaf(np.atleast_2d(np.asarray(outlier_z, dtype=np.float64)))
    total, _ = objective_var(flow, bundle, xv, labels, weights, outlier_z=zv)
    total.backward()
    dx = np.zeros_like(xv.value) if xv.grad is None else xv.grad
    dz = None if zv is None else (np.zeros_like(zv.value) if zv.grad is None else zv.grad)
    return float(total.value), dx, dz
