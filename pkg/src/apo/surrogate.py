"""Surrogate lower bound on ``J - k * Var`` for a policy pair.

The exact functions take a :class:`~apo.tabular.TabularMdp` and two tabular
policies (``pi_old`` is the anchor the bound is built around). The sampled
estimator further down works on a rollout batch and is what the agents
differentiate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numba
import numpy as np

from .errors import BadParam, DimensionMismatch, EmptyBatch, NonFiniteAdvantage
from .nets import backward, forward_cached, kl, kl_grad, log_prob_grad
from .tabular import ExactEvaluation, TabularMdp, TabularPolicy, _solve, evaluate

MAX_OVER_STATES = "max"
MEAN_OVER_STATES = "mean"
RATIO_CAP = 10.0
# sampled variance-of-mean forms
VM_CLAMP = "clamp"          # E[V^2] + spread - min J^2 over the surrogate interval
VM_RECENTRED = "recentred"  # variance about the new mean; no reward term
VM_FORMS = (VM_CLAMP, VM_RECENTRED)


@dataclass(frozen=True)
class SurrogateConfig:
    """Knobs of the surrogate.

    ``h_max`` is ``None`` to compute the advantage-shift bound from the
    policies, or a non-negative constant to use it as a hyperparameter.
    ``penalty_scale`` multiplies the variance penalty of the sampled
    objective; ``None`` means ``1 - gamma``, which is the whole objective
    divided by the ``1 / (1 - gamma)`` factor of the advantage term, so at
    ``k = 0`` the objective is the plain ratio-advantage mean.
    ``kl_slack`` keeps the KL-proportional slack inside the sampled penalty
    estimators (the exact tier always includes it). ``vm_form`` picks the
    sampled variance-of-mean estimator, see ``SampledObjective``.
    """

    k: float = 7.0
    mu_inf_norm: float = 1.0
    h_max: Optional[float] = 0.05
    aggregation: str = MEAN_OVER_STATES
    gamma: float = 0.99
    penalty_scale: Optional[float] = None
    ratio_cap: float = RATIO_CAP
    kl_slack: bool = True
    vm_form: str = VM_CLAMP

    def __post_init__(self):
        if self.k < 0:
            raise BadParam(f"k must be >= 0, got {self.k}")
        if self.mu_inf_norm <= 0:
            raise BadParam(f"mu_inf_norm must be > 0, got {self.mu_inf_norm}")
        if self.h_max is not None and self.h_max < 0:
            raise BadParam(f"h_max hyperparameter must be >= 0, got {self.h_max}")
        if self.aggregation not in (MAX_OVER_STATES, MEAN_OVER_STATES):
            raise BadParam(f"aggregation must be 'max' or 'mean', got {self.aggregation!r}")
        if self.vm_form not in VM_FORMS:
            raise BadParam(f"vm_form must be one of {VM_FORMS}, got {self.vm_form!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise BadParam(f"gamma must lie in [0, 1), got {self.gamma}")
        if (self.penalty_scale is not None and self.penalty_scale <= 0) or self.ratio_cap <= 0:
            raise BadParam("penalty_scale and ratio_cap must be > 0")

    @property
    def penalty_weight(self):
        """``k`` times the penalty scale: the coefficient on ``MV_bar + VM_bar``."""
        scale = 1.0 - self.gamma if self.penalty_scale is None else self.penalty_scale
        return self.k * scale

    def exact_theory(self) -> "SurrogateConfig":
        """Settings under which the exact bounds are certified."""
        return replace(self, mu_inf_norm=1.0, h_max=None, aggregation=MAX_OVER_STATES)


def exact_theory_config(k=7.0, gamma=0.99) -> SurrogateConfig:
    return SurrogateConfig(k=k, gamma=gamma).exact_theory()


@dataclass(frozen=True)
class SurrogateTerms:
    j_lower: float
    j_upper: float
    mv: float
    vm: float
    mv_barred: float
    vm_barred: float
    h_max: float
    eta_max: float
    epsilon: float
    epsilon_prime: float
    kl_mean: float
    kl_max: float
    m_k: float


def _aggregate(values, how):
    values = np.asarray(values, dtype=np.float64)
    return float(values.max() if how == MAX_OVER_STATES else values.mean())


def _check(mdp, pi_old, pi_new):
    shape = (mdp.n_states, mdp.n_actions)
    if pi_old.probs.shape != shape or pi_new.probs.shape != shape:
        raise DimensionMismatch(
            f"policies {pi_old.probs.shape}, {pi_new.probs.shape} do not match MDP {shape}"
        )


def tabular_kl(pi_new: TabularPolicy, pi_old: TabularPolicy):
    """Per-state ``KL(pi_new || pi_old)``."""
    p, q = pi_new.probs, pi_old.probs
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return np.maximum(terms.sum(axis=1), 0.0)


def advantage_gap(ev_old: ExactEvaluation, pi_new: TabularPolicy):
    """Expected old-policy advantage of the new policy's actions, per state."""
    if pi_new.probs.shape != ev_old.advantages.shape:
        raise DimensionMismatch(
            f"policy shape {pi_new.probs.shape} != advantage shape {ev_old.advantages.shape}"
        )
    return np.einsum("sa,sa->s", pi_new.probs, ev_old.advantages)


class _Pair:
    """Shared intermediate quantities of one (mdp, pi_old, pi_new) evaluation."""

    def __init__(self, mdp, pi_old, pi_new, ev_old=None):
        _check(mdp, pi_old, pi_new)
        self.mdp = mdp
        self.ev = ev_old if ev_old is not None else evaluate(mdp, pi_old)
        self.gap = advantage_gap(self.ev, pi_new)
        self.kl = tabular_kl(pi_new, pi_old)
        self.kl_max = float(self.kl.max())
        self.kl_mean = float(self.ev.disc_state_dist @ self.kl)
        self.eps = float(np.abs(self.ev.advantages).max())
        self.eps_prime = float(np.abs(self.gap).max())
        g = mdp.gamma
        # expected discounted sum of the gap along old-policy trajectories
        self.resolvent = _solve(np.eye(mdp.n_states) - g * self.ev.p_pi, self.gap)
        self.pi_old = pi_old
        self.pi_new = pi_new


def _j_bounds(pair: _Pair):
    g = pair.mdp.gamma
    slack = (2.0 * g * pair.eps_prime / (1.0 - g)) * np.sqrt(0.5 * pair.kl)
    d = pair.ev.disc_state_dist
    j = pair.ev.perf
    lower = j + float(d @ (pair.gap - slack)) / (1.0 - g)
    upper = j + float(d @ (pair.gap + slack)) / (1.0 - g)
    return lower, upper


def j_bounds(mdp, pi_old, pi_new, cfg=None):
    """Lower and upper bounds on ``J(pi_new)`` built around ``pi_old``."""
    return _j_bounds(_Pair(mdp, pi_old, pi_new))


def _h_max(pair: _Pair, cfg: SurrogateConfig):
    if cfg.h_max is not None:
        return float(cfg.h_max)
    g = pair.mdp.gamma
    x = pair.resolvent
    shift = np.abs(g * x[None, :] - x[:, None])  # indexed [s, s']
    support = pair.mdp.trans > 0
    triples = np.broadcast_to(shift[:, None, :], support.shape)[support]
    kl_term = 2.0 * g * (1.0 + g) * pair.eps / (1.0 - g) ** 2 * pair.kl_max
    return _aggregate(triples, cfg.aggregation) + kl_term


def h_max(mdp, pi_old, pi_new, cfg: SurrogateConfig):
    """Bound on ``|A_new(s,a,s') - A_old(s,a,s')|`` over supported triples."""
    return _h_max(_Pair(mdp, pi_old, pi_new), cfg)


def _eta_vector(pair: _Pair):
    g = pair.mdp.gamma
    return np.abs(pair.resolvent) + 2.0 * g * pair.eps / (1.0 - g) ** 2 * pair.kl_max


def eta_max(mdp, pi_old, pi_new, cfg: Optional[SurrogateConfig] = None):
    """Per-state bound on ``|V_new(s) - V_old(s)|`` and its aggregate."""
    eta = _eta_vector(_Pair(mdp, pi_old, pi_new))
    how = MAX_OVER_STATES if cfg is None else cfg.aggregation
    return eta, _aggregate(eta, how)


def _mv_parts(pair: _Pair, cfg: SurrogateConfig, h: float):
    g = pair.mdp.gamma
    mdp = pair.mdp
    a2 = np.einsum("sat,sat->sa", mdp.trans, pair.ev.adv_sas**2)
    second_new = np.einsum("sa,sa->s", pair.pi_new.probs, a2)
    second_old = np.einsum("sa,sa->s", pair.pi_old.probs, a2)
    per_state = np.abs(second_new - second_old + h * h + 2.0 * pair.gap * h)
    barred = cfg.mu_inf_norm / (1.0 - g * g) * _aggregate(per_state, cfg.aggregation)
    kl_term = (
        2.0 * g * g * cfg.mu_inf_norm / (1.0 - g * g) ** 2
        * math.sqrt(0.5 * pair.kl_max) * float(np.abs(pair.ev.omega).max())
    )
    return barred, barred + pair.ev.mean_variance + kl_term


def mv_bound(mdp, pi_old, pi_new, cfg: SurrogateConfig):
    """Upper bound on the mean (over start states) return variance of ``pi_new``."""
    pair = _Pair(mdp, pi_old, pi_new)
    return _mv_parts(pair, cfg, _h_max(pair, cfg))[1]


def min_square_on_interval(lo, hi):
    """``min x**2`` over the closed interval ``[lo, hi]``."""
    if lo <= 0.0 <= hi:
        return 0.0
    return min(lo * lo, hi * hi)


def _vm_parts(pair: _Pair, cfg: SurrogateConfig, j_lo: float, j_hi: float):
    eta = _eta_vector(pair)
    v_abs = np.abs(pair.ev.values)
    spread = cfg.mu_inf_norm * _aggregate(np.abs(eta * eta + 2.0 * v_abs * eta), cfg.aggregation)
    barred = spread - min_square_on_interval(j_lo, j_hi)
    return barred, barred + pair.ev.second_moment, _aggregate(eta, cfg.aggregation)


def vm_bound(mdp, pi_old, pi_new, cfg: SurrogateConfig):
    """Upper bound on the variance over start states of ``V_new``."""
    pair = _Pair(mdp, pi_old, pi_new)
    lo, hi = _j_bounds(pair)
    return _vm_parts(pair, cfg, lo, hi)[1]


def objective_m_k(mdp, pi_old, pi_new, cfg: SurrogateConfig, ev_old=None) -> SurrogateTerms:
    """All surrogate terms and ``M_k = J_lower - k * (MV + VM)``."""
    pair = _Pair(mdp, pi_old, pi_new, ev_old)
    lo, hi = _j_bounds(pair)
    h = _h_max(pair, cfg)
    mv_bar, mv = _mv_parts(pair, cfg, h)
    vm_bar, vm, eta_agg = _vm_parts(pair, cfg, lo, hi)
    return SurrogateTerms(
        j_lower=lo, j_upper=hi, mv=mv, vm=vm, mv_barred=mv_bar, vm_barred=vm_bar,
        h_max=h, eta_max=eta_agg, epsilon=pair.eps, epsilon_prime=pair.eps_prime,
        kl_mean=pair.kl_mean, kl_max=pair.kl_max, m_k=lo - cfg.k * (mv + vm),
    )


# ---------------------------------------------------------------------------
# Sampled objective


@numba.njit(cache=True)
def _reverse_discounted(x, ends, gamma):
    """``y_t = x_t + gamma * y_{t+1}`` restarted after every segment end."""
    y = np.empty_like(x)
    acc = 0.0
    for t in range(x.shape[0] - 1, -1, -1):
        if ends[t]:
            acc = 0.0
        acc = x[t] + gamma * acc
        y[t] = acc
    return y


@numba.njit(cache=True)
def _forward_discounted(g, ends, gamma):
    """Adjoint of :func:`_reverse_discounted`."""
    y = np.empty_like(g)
    acc = 0.0
    for t in range(g.shape[0]):
        acc = g[t] + gamma * acc
        y[t] = acc
        if ends[t]:
            acc = 0.0
    return y


def _agg_weights(values, how):
    w = np.zeros_like(values)
    if how == MAX_OVER_STATES:
        w[int(np.argmax(values))] = 1.0
    else:
        w[:] = 1.0 / values.size
    return w


@dataclass(frozen=True)
class SampledTerms:
    objective: float
    adv_term: float
    mv: float
    vm: float
    kl_mean: float
    j_lower: float
    j_upper: float
    h_max: float
    ratio_cap_hits: int


def old_mean_variance(episodes, start_values):
    """Batch estimate of the anchor's mean variance.

    Total variance of the discounted returns of completed episodes minus the
    spread of the start-state value estimates, floored at zero.
    """
    disc = np.array([e.disc_ret for e in episodes if not e.cut])
    if disc.size < 2:
        return 0.0
    spread = float(np.var(start_values, ddof=1)) if start_values.size > 1 else 0.0
    return max(0.0, float(np.var(disc, ddof=1)) - spread)


class SampledObjective:
    """Differentiable batch estimate of the penalized surrogate.

    ``O = mean(ratio * A) - k * scale * (MV_bar + VM_bar)`` where the
    advantage term is optionally clipped (PAPO) and the variance penalties
    use capped ratios, the normalized advantages and the batch value
    estimates. Calling the object with new parameters returns
    ``(value, gradient, SampledTerms)``.

    The ``clamp`` variance-of-mean form is ``E[V^2] + spread(|V|) - min J^2``
    over the surrogate interval for ``J``. Its ``-J^2`` piece rewards moving
    ``J`` away from zero in either direction, and when ``mu_inf_norm < 1``
    the reward outgrows the spread. The ``recentred`` form bounds the
    variance about the new mean instead, ``E[(V - J_old)^2] +
    spread(|V - J_old|)`` with every per-state shift widened by the largest
    ``|J - J_old|`` on the interval. It is shift invariant and has no
    reward term.
    """

    def __init__(self, batch, spec, old_params, cfg: SurrogateConfig, clip_ratio=None):
        if len(batch) == 0:
            raise EmptyBatch("batch has no transitions")
        adv = batch.advantages
        if adv is None or not np.all(np.isfinite(adv)):
            raise NonFiniteAdvantage("advantages are missing or not finite")
        self.batch = batch
        self.spec = spec
        self.cfg = cfg
        self.clip_ratio = clip_ratio
        self.adv = np.asarray(adv, dtype=np.float64)
        self.actions = batch.actions
        self.old_dist, _ = forward_cached(old_params, spec, batch.obs)
        self.logp_old = self.old_dist.log_prob(self.actions)
        self.ends = np.asarray(batch.ends, dtype=np.bool_)
        values = np.asarray(batch.values, dtype=np.float64)
        starts = np.ones(len(batch), dtype=bool)
        starts[1:] = self.ends[:-1]
        start_values = values[starts]
        self.j_old = float(np.mean(start_values))
        self.recentred = cfg.vm_form == VM_RECENTRED
        # interval centres and value magnitudes are measured from this origin
        self.origin = self.j_old if self.recentred else 0.0
        self.values_abs = np.abs(values - self.origin)
        self.eps = float(np.abs(self.adv).max())
        # per-epoch constants of the barred forms: E[(V(s0) - origin)^2] and the old policy's mean variance
        self.second_moment = float(np.mean((start_values - self.origin) ** 2))
        self.mv_old = old_mean_variance(batch.episodes, start_values)

    # -- pieces -------------------------------------------------------------

    def _adv_term(self, ratio):
        a, n = self.adv, self.adv.size
        if self.clip_ratio is None:
            return float(ratio @ a) / n, a / n
        clipped = np.clip(ratio, 1.0 - self.clip_ratio, 1.0 + self.clip_ratio)
        surr = ratio * a
        alt = clipped * a
        use_raw = surr <= alt
        value = float(np.where(use_raw, surr, alt).sum()) / n
        return value, np.where(use_raw, a, 0.0) / n

    def _penalty(self, ratio, kl_mean):
        """Penalty value and its derivatives w.r.t. ratio and mean KL."""
        cfg = self.cfg
        g = cfg.gamma
        a = self.adv
        n = a.size
        capped = np.minimum(ratio, cfg.ratio_cap)
        live = (ratio < cfg.ratio_cap).astype(np.float64)
        slack = 1.0 if cfg.kl_slack else 0.0
        d_capped = np.zeros(n)
        d_kl = 0.0

        x = (capped - 1.0) * a
        tail = _reverse_discounted(x, self.ends, g)

        # advantage-shift bound
        if cfg.h_max is not None:
            h, dh_dx, dh_dkl = float(cfg.h_max), None, 0.0
        else:
            ax = np.abs(x)
            w = _agg_weights(ax, cfg.aggregation)
            coef = slack * 2.0 * g * (1.0 + g) * self.eps / (1.0 - g) ** 2
            h = float(w @ ax) + coef * kl_mean
            dh_dx, dh_dkl = w * np.sign(x), coef

        # mean-variance term
        m = (capped - 1.0) * a * a + 2.0 * capped * a * h + h * h
        am = np.abs(m)
        w = _agg_weights(am, cfg.aggregation)
        c_mv = cfg.mu_inf_norm / (1.0 - g * g)
        mv = self.mv_old + c_mv * float(w @ am)
        sm = c_mv * w * np.sign(m)
        d_capped += sm * (a * a + 2.0 * a * h)
        d_h = float(sm @ (2.0 * capped * a + 2.0 * h))

        # surrogate interval for J, relative to the origin
        ra = capped * a
        arg = int(np.argmax(np.abs(ra)))
        eps_prime = abs(ra[arg])
        c_j = slack * 2.0 * g / (1.0 - g) ** 2
        root = math.sqrt(0.5 * kl_mean)
        centre = self.j_old - self.origin + float(x.mean()) / (1.0 - g)
        lo, hi = centre - c_j * eps_prime * root, centre + c_j * eps_prime * root

        def through_endpoint(d_end, end, sign):
            # push d(value)/d(end) back through centre, eps' and the KL root
            nonlocal d_kl
            d_capped[arg] += d_end * sign * c_j * root * np.sign(ra[arg]) * a[arg]
            if root > 1e-12:
                d_kl += d_end * sign * c_j * eps_prime * 0.25 / root
            return d_end / ((1.0 - g) * n)

        # variance-mean term
        c_eta = slack * 2.0 * g * self.eps / (1.0 - g) ** 2
        eta = np.abs(tail) + c_eta * kl_mean
        if self.recentred:
            end, sign = (lo, -1.0) if abs(lo) >= abs(hi) else (hi, 1.0)
            eta = eta + abs(end)
        u = eta * eta + 2.0 * self.values_abs * eta
        w = _agg_weights(u, cfg.aggregation)
        spread = cfg.mu_inf_norm * float(w @ u)
        d_eta = cfg.mu_inf_norm * w * (2.0 * eta + 2.0 * self.values_abs)
        d_x = _forward_discounted(d_eta * np.sign(tail), self.ends, g)
        d_kl += float(d_eta.sum()) * c_eta
        if self.recentred:
            clamp = 0.0
            d_x += through_endpoint(float(d_eta.sum()) * np.sign(end), end, sign)
        else:
            clamp = min_square_on_interval(lo, hi)
            if clamp > 0.0:
                # derivative of the clamp through whichever endpoint is nearest zero
                end, sign = (lo, -1.0) if lo > 0.0 else (hi, 1.0)
                d_x += through_endpoint(-2.0 * end, end, sign)  # the clamp enters VM with a minus sign
        vm = self.second_moment + spread - clamp

        if dh_dx is not None:
            d_x += d_h * dh_dx
            d_kl += d_h * dh_dkl
        d_capped += d_x * a
        d_ratio = d_capped * live
        return mv, vm, self.origin + lo, self.origin + hi, h, d_ratio, d_kl, int(n - live.sum())

    # -- evaluation ---------------------------------------------------------

    def __call__(self, params, with_grad=True):
        dist, cache = forward_cached(params, self.spec, self.batch.obs)
        logp = dist.log_prob(self.actions)
        ratio = np.exp(logp - self.logp_old)
        adv_val, d_ratio = self._adv_term(ratio)
        k = self.cfg.penalty_weight
        kl_mean = float(kl(dist, self.old_dist).mean())
        mv = vm = 0.0
        lo = hi = self.j_old
        h = 0.0
        hits = 0
        d_kl = 0.0
        if k != 0.0:
            mv, vm, lo, hi, h, d_pen, d_kl_pen, hits = self._penalty(ratio, kl_mean)
            d_ratio = d_ratio - k * d_pen
            d_kl = -k * d_kl_pen
        value = adv_val - k * (mv + vm)
        terms = SampledTerms(value, adv_val, mv, vm, kl_mean, lo, hi, h, hits)
        if not with_grad:
            return value, None, terms
        d_logp = d_ratio * ratio
        g_out, g_ls = log_prob_grad(dist, self.actions)
        g_out = g_out * d_logp[:, None]
        g_ls = None if g_ls is None else (g_ls * d_logp[:, None]).sum(axis=0)
        if d_kl != 0.0:
            k_out, k_ls = kl_grad(dist, self.old_dist)
            n = k_out.shape[0]
            g_out = g_out + (d_kl / n) * k_out
            if g_ls is not None:
                g_ls = g_ls + (d_kl / n) * k_ls.sum(axis=0)
        return value, backward(cache, g_out, g_ls, params), terms


def sampled_objective(batch, policy_new, policy_old, cfg: SurrogateConfig, clip_ratio=None):
    """Value and gradient of the sampled objective; policies are ``(params, spec)``."""
    new_params, spec = policy_new
    old_params, old_spec = policy_old
    if spec != old_spec:
        raise DimensionMismatch("old and new policies use different network specs")
    return SampledObjective(batch, spec, old_params, cfg, clip_ratio)(new_params)
