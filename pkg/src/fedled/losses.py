"""Objective terms: source classification, entropy-weighted conditional
adversarial loss, joint multi-kernel alignment, and their weighted sum.

Sign convention of the total::

    total = l_cls - lam * l_cdan + beta * l_align

``l_cdan`` is the discriminator's log-likelihood (<= 0).  Its input passes
through a gradient-reversal node, so a single backward pass drives the
discriminator up the likelihood and the extractors/classifier down it.

Entropy weights and kernel bandwidths are computed from forward values and
treated as constants by the backward pass.  :class:`FrozenStats` carries them
so that a caller can re-evaluate the exact same function (finite-difference
checks, centralized replays).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fedled import autodiff as ad
from fedled.errors import ContractError, DataError, DimensionError
from fedled.models import MlpParams, mlp_forward


@dataclass(frozen=True)
class KernelConfig:
    multipliers: tuple = (0.25, 0.5, 1.0, 2.0, 4.0)
    # None -> median heuristic on the joint batch, per layer
    base_bandwidth: float | None = None

    def __post_init__(self):
        if not self.multipliers or any(m <= 0 for m in self.multipliers):
            raise ContractError("bandwidth multipliers must be positive")
        if self.base_bandwidth is not None and self.base_bandwidth <= 0:
            raise ContractError("base bandwidth must be positive")


@dataclass(frozen=True)
class LossWeights:
    lam: float = 1.0  # adversarial coefficient in the total
    beta: float = 0.5  # alignment coefficient
    grl: float = 1.0  # gradient-reversal coefficient (warm-up schedule lives in the protocol)


@dataclass(frozen=True)
class LossBreakdown:
    l_cls: float
    l_cdan: float
    l_align: float
    total: float
    lam: float
    beta: float

    def check(self, tol: float = 1e-12) -> bool:
        expected = self.l_cls - self.lam * self.l_cdan + self.beta * self.l_align
        return abs(self.total - expected) <= tol * max(1.0, abs(expected))


@dataclass
class FrozenStats:
    """Stop-gradient quantities of one objective evaluation."""

    weight_source: np.ndarray | None = None
    weight_target: np.ndarray | None = None
    bandwidths: list = field(default_factory=list)


def cross_entropy(logits: ad.Var, labels) -> ad.Var:
    """Mean negative log-softmax likelihood of integer labels."""
    labels = np.asarray(labels)
    n, c = logits.value.shape
    if labels.shape != (n,):
        raise DimensionError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"labels must lie in [0, {c})")
    return -ad.mean_all(ad.pick(ad.log_softmax_rows(logits), labels))


def entropy_weight(p) -> np.ndarray:
    """``1 + exp(-H(p_i))`` per row; lies in (1, 2] and is 2 exactly for one-hot rows."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise DimensionError("entropy_weight expects an n x C matrix")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
        raise ContractError("rows of p must be probability vectors")
    plogp = np.zeros_like(p)
    nz = p > 0
    plogp[nz] = p[nz] * np.log(p[nz])
    entropy = -plogp.sum(axis=1)
    return 1.0 + np.exp(-entropy)


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    """Median squared distance over distinct pairs of the joint batch; 1.0 if degenerate."""
    joint = np.vstack([a, b])
    diff = joint[:, None, :] - joint[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    iu = np.triu_indices(joint.shape[0], k=1)
    med = float(np.median(d2[iu])) if iu[0].size else 0.0
    return med if med > 0 and math.isfinite(med) else 1.0


def random_multilinear_map(config_dims, seed: int = 0):
    """Fixed Gaussian projections for the randomized conditioning map."""
    feature_dim, num_classes, out_dim = config_dims
    rng = np.random.default_rng([int(seed), 7919])
    return rng.standard_normal((feature_dim, out_dim)), rng.standard_normal((num_classes, out_dim))


def conditioning(f: ad.Var, g: ad.Var, random_map=None) -> ad.Var:
    """``f (x) g`` flattened, or ``(f R_f) * (g R_g) / sqrt(d)`` when a random map is given."""
    if random_map is None:
        return ad.outer_flatten(f, g)
    rf, rg = random_map
    d = rf.shape[1]
    return ad.mul(ad.matmul(f, rf), ad.matmul(g, rg)) / math.sqrt(d)


def cdan_loss(
    f_s: ad.Var,
    g_s: ad.Var,
    f_t: ad.Var,
    g_t: ad.Var,
    disc: MlpParams,
    lambda_grl: float,
    tape: ad.Tape,
    *,
    random_map=None,
    frozen: FrozenStats | None = None,
    stats: FrozenStats | None = None,
):
    """Entropy-weighted discriminator log-likelihood.

    ``mean(w_S log D(h_S)) + mean(w_T log(1 - D(h_T)))`` with ``h`` the
    conditioned features behind a reversal node and weights rescaled to mean
    one per domain.  Returns ``(loss, discriminator_forward)``.
    """
    h_s = conditioning(f_s, g_s, random_map)
    h_t = conditioning(f_t, g_t, random_map)
    if h_s.value.shape[1] != disc.in_dim or h_t.value.shape[1] != disc.in_dim:
        raise DimensionError(
            f"conditioning width {h_s.value.shape[1]} != discriminator in-dim {disc.in_dim}"
        )
    n_s = h_s.value.shape[0]
    n_t = h_t.value.shape[0]
    h = ad.grad_reverse(ad.concat_rows(h_s, h_t), lambda_grl)
    dfwd = mlp_forward(disc, h, tape)
    logits = dfwd.output
    log_d_s = ad.log_sigmoid(ad.row_slice(logits, 0, n_s))
    log_1md_t = ad.log_sigmoid(-ad.row_slice(logits, n_s, n_s + n_t))

    if frozen is not None and frozen.weight_source is not None:
        w_s, w_t = frozen.weight_source, frozen.weight_target
    else:
        w_s = entropy_weight(g_s.value)
        w_t = entropy_weight(g_t.value)
        w_s = w_s / w_s.mean()
        w_t = w_t / w_t.mean()
    if stats is not None:
        stats.weight_source, stats.weight_target = w_s, w_t
    loss = ad.mean_all(ad.mul(log_d_s, w_s.reshape(-1, 1))) + ad.mean_all(
        ad.mul(log_1md_t, w_t.reshape(-1, 1))
    )
    return loss, dfwd


def _multi_gaussian(d2: ad.Var, base: float, multipliers) -> ad.Var:
    k = None
    for m in multipliers:
        term = ad.exp(d2 * (-1.0 / (m * base)))
        k = term if k is None else k + term
    return k


def jmmd_loss(
    acts_s,
    acts_t,
    cfg: KernelConfig = KernelConfig(),
    *,
    frozen: FrozenStats | None = None,
    stats: FrozenStats | None = None,
) -> ad.Var:
    """Biased joint MMD^2 over paired layer activations.

    The joint kernel is the product over layers of per-layer sums of
    Gaussians.  Returns ``mean K(s,s') + mean K(t,t') - 2 mean K(s,t)``.
    """
    if len(acts_s) != len(acts_t) or not acts_s:
        raise DimensionError("source and target need the same non-zero number of layers")
    bandwidths = []
    k_ss = k_tt = k_st = None
    for li, (s, t) in enumerate(zip(acts_s, acts_t)):
        sv, tv = s.value, t.value
        if sv.shape[1] != tv.shape[1]:
            raise DimensionError(f"layer {li}: width {sv.shape[1]} vs {tv.shape[1]}")
        if sv.shape[0] < 2 or tv.shape[0] < 2:
            raise ContractError("joint MMD needs at least two samples per domain")
        if frozen is not None and frozen.bandwidths:
            base = frozen.bandwidths[li]
        elif cfg.base_bandwidth is not None:
            base = cfg.base_bandwidth
        else:
            base = median_bandwidth(sv, tv)
        bandwidths.append(base)
        ss = _multi_gaussian(ad.sqdist(s, s), base, cfg.multipliers)
        tt = _multi_gaussian(ad.sqdist(t, t), base, cfg.multipliers)
        st = _multi_gaussian(ad.sqdist(s, t), base, cfg.multipliers)
        if k_ss is None:
            k_ss, k_tt, k_st = ss, tt, st
        else:
            k_ss, k_tt, k_st = k_ss * ss, k_tt * tt, k_st * st
    if stats is not None:
        stats.bandwidths = bandwidths
    return ad.mean_all(k_ss) + ad.mean_all(k_tt) - 2.0 * ad.mean_all(k_st)


def total_loss(l_cls: ad.Var, l_cdan: ad.Var, l_align: ad.Var, lam: float, beta: float):
    """Combine the three terms; returns ``(total_var, LossBreakdown)``."""
    total = l_cls - l_cdan * float(lam) + l_align * float(beta)
    breakdown = LossBreakdown(
        l_cls=float(l_cls.value),
        l_cdan=float(l_cdan.value),
        l_align=float(l_align.value),
        total=float(total.value),
        lam=float(lam),
        beta=float(beta),
    )
    return total, breakdown


@dataclass
class Objective:
    """Everything one evaluation of the full objective leaves on the tape."""

    total: ad.Var
    breakdown: LossBreakdown
    classifier: object  # MlpForward over the joint batch
    discriminator: object
    stats: FrozenStats


def fedled_objective(
    tape: ad.Tape,
    f_s: ad.Var,
    labels_s,
    f_t: ad.Var,
    classifier: MlpParams,
    disc: MlpParams,
    weights: LossWeights,
    kernel: KernelConfig = KernelConfig(),
    *,
    random_map=None,
    frozen: FrozenStats | None = None,
) -> Objective:
    """Forward the whole server-side objective from the two feature batches.

    The classifier runs once over the stacked batch so its parameters get a
    single set of tape leaves.  The alignment uses the last two classifier
    layers, with the output layer taken through softmax.
    """
    n_s = f_s.value.shape[0]
    n_t = f_t.value.shape[0]
    cfwd = mlp_forward(classifier, ad.concat_rows(f_s, f_t), tape)
    logits = cfwd.output
    probs = ad.softmax_rows(logits)
    logits_s = ad.row_slice(logits, 0, n_s)
    g_s = ad.row_slice(probs, 0, n_s)
    g_t = ad.row_slice(probs, n_s, n_s + n_t)

    l_cls = cross_entropy(logits_s, labels_s)
    stats = FrozenStats()
    l_cdan, dfwd = cdan_loss(
        f_s, g_s, f_t, g_t, disc, weights.grl, tape, random_map=random_map, frozen=frozen, stats=stats
    )
    hidden = cfwd.activations[-2] if len(cfwd.activations) >= 2 else f_s
    if len(cfwd.activations) >= 2:
        acts_s = [ad.row_slice(hidden, 0, n_s), g_s]
        acts_t = [ad.row_slice(hidden, n_s, n_s + n_t), g_t]
    else:
        acts_s, acts_t = [g_s], [g_t]
    l_align = jmmd_loss(acts_s, acts_t, kernel, frozen=frozen, stats=stats)
    total, breakdown = total_loss(l_cls, l_cdan, l_align, weights.lam, weights.beta)
    return Objective(total, breakdown, cfwd, dfwd, stats)
