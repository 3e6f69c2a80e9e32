"""Policy update rules and value fitting.

APO and TRPO share one trust-region routine (TRPO is APO with ``k = 0``),
PAPO and PPO share one proximal routine (PPO is PAPO with ``k = 0``). The
exact tabular loop at the bottom runs APO on a :class:`TabularMdp` with the
exact surrogate, for certifying monotone improvement of ``J - k * Var``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from .errors import BadParam, CgBreakdown, NonFiniteGradient
from .nets import (
    DEFAULT_DAMPING,
    MlpSpec,
    backward,
    fisher_vector_product,
    forward_cached,
    kl,
    log_prob_grad,
)
from .surrogate import SampledObjective, SurrogateConfig, exact_theory_config, objective_m_k, tabular_kl
from .tabular import TabularMdp, TabularPolicy, evaluate

APO, TRPO, PPO, PAPO, A2C = "apo", "trpo", "ppo", "papo", "a2c"
ALGORITHMS = (APO, TRPO, PPO, PAPO, A2C)
CG_RESIDUAL_TOL = 1e-6


@dataclass(frozen=True)
class AgentConfig:
    algorithm: str = APO
    target_kl: float = 0.02
    k: float = 7.0
    backtrack_steps: int = 100
    backtrack_coef: float = 0.8
    clip_ratio: float = 0.2
    papo_clip: bool = True
    policy_iters: int = 80
    policy_lr: float = 3e-4
    value_iters: int = 80
    value_lr: float = 1e-3
    cg_iters: int = 10
    cg_damping: float = DEFAULT_DAMPING
    gamma: float = 0.99
    lam: float = 0.97
    normalize_advantages: bool = True
    hidden: tuple = (64, 64)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise BadParam(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.target_kl <= 0:
            raise BadParam("target_kl must be > 0")
        if not 0.0 < self.backtrack_coef < 1.0:
            raise BadParam("backtrack_coef must lie in (0, 1)")
        if min(self.backtrack_steps, self.policy_iters, self.cg_iters) < 1 or self.value_iters < 0:
            raise BadParam("iteration counts must be >= 1")
        if self.policy_lr <= 0 or self.value_lr <= 0:
            raise BadParam("learning rates must be > 0")
        if self.k < 0:
            raise BadParam("k must be >= 0")
        if self.cg_damping < 0:
            raise BadParam("cg_damping must be >= 0")
        if not 0.0 <= self.lam <= 1.0:
            raise BadParam("lam must lie in [0, 1]")
        # the surrogate always sees the agent's k and gamma
        object.__setattr__(self, "surrogate", replace(self.surrogate, k=self.k, gamma=self.gamma))

    def penalty_k(self):
        return self.k if self.algorithm in (APO, PAPO) else 0.0


@dataclass
class UpdateReport:
    accepted: bool
    backtracks: int = 0
    kl_after: float = 0.0
    objective_before: float = 0.0
    objective_after: float = 0.0
    value_loss: float = float("nan")
    ratio_cap_hits: int = 0
    early_stopped_at: Optional[int] = None
    iterations: int = 0
    cg_iters: int = 0
    cg_damping: float = 0.0
    cg_residual: float = 0.0
    ratio_cap: float = 0.0
    iterate_kls: List[float] = field(default_factory=list)  # proximal updates: KL of every kept iterate


class Adam:
    """First-order adaptive-moment optimizer over a flat vector (ascent or descent by sign of grad)."""

    def __init__(self, size, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params, grad):
        """One descent step along ``grad``; returns new parameters."""
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def snapshot(self):
        return self.m.copy(), self.v.copy(), self.t

    def restore(self, snap):
        self.m, self.v, self.t = snap[0].copy(), snap[1].copy(), snap[2]


def _check_grad(g):
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("policy gradient is not finite")


@dataclass(frozen=True)
class CgResult:
    x: np.ndarray
    iterations: int
    residual: float


def conjugate_gradient(matvec, b, iters=10, tol=CG_RESIDUAL_TOL):
    """Approximately solve ``A x = b`` for symmetric positive-definite ``A``.

    Stops once ``||A x - b|| <= tol * ||b||`` or after ``iters`` iterations.
    """
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    b_norm = math.sqrt(float(b @ b))
    done = 0
    for i in range(iters):
        if math.sqrt(rr) <= tol * b_norm:
            break
        ap = matvec(p)
        pap = float(p @ ap)
        if pap <= 0.0:
            raise CgBreakdown(f"non-positive curvature {pap} in conjugate gradient")
        alpha = rr / pap
        x = x + alpha * p
        r = r - alpha * ap
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
        done = i + 1
    return CgResult(x, done, math.sqrt(rr))


def trust_region_update(params, spec: MlpSpec, batch, cfg: AgentConfig, k: float):
    """One line-searched natural-gradient step on the sampled objective."""
    sur = replace(cfg.surrogate, k=k)
    obj = SampledObjective(batch, spec, params, sur)
    f0, g, t0 = obj(params)
    _check_grad(g)
    report = UpdateReport(accepted=False, objective_before=f0, objective_after=f0,
                          cg_damping=cfg.cg_damping, ratio_cap=sur.ratio_cap)
    if not np.any(g):
        return params, report
    _, cache = forward_cached(params, spec, batch.obs)

    def hv(v):
        return fisher_vector_product(cache, v, cfg.cg_damping)

    cg = conjugate_gradient(hv, g, cfg.cg_iters)
    report.cg_iters, report.cg_residual = cg.iterations, cg.residual
    curv = float(cg.x @ hv(cg.x))
    if not curv > 0.0:
        raise CgBreakdown(f"x^T H x = {curv} after damping")
    full_step = math.sqrt(2.0 * cfg.target_kl / curv) * cg.x
    for m in range(cfg.backtrack_steps):
        candidate = params + cfg.backtrack_coef**m * full_step
        f1, _, t1 = obj(candidate, with_grad=False)
        if t1.kl_mean <= cfg.target_kl and f1 >= f0:
            report.accepted = True
            report.backtracks = m
            report.kl_after = t1.kl_mean
            report.objective_after = f1
            report.ratio_cap_hits = t1.ratio_cap_hits
            return candidate, report
    report.backtracks = cfg.backtrack_steps
    return params, report


def apo_update(params, spec, batch, cfg: AgentConfig):
    return trust_region_update(params, spec, batch, cfg, cfg.k)


def trpo_update(params, spec, batch, cfg: AgentConfig):
    return trust_region_update(params, spec, batch, cfg, 0.0)


def proximal_update(params, spec, batch, cfg: AgentConfig, k: float, clip: Optional[float],
                    opt: Optional[Adam] = None):
    """Repeated Adam ascent steps with a mean-KL guard.

    An iterate whose mean KL from the batch policy exceeds ``target_kl`` is
    discarded and the loop stops. If the final objective ends below the
    starting one the whole update is rolled back.
    """
    obj = SampledObjective(batch, spec, params, replace(cfg.surrogate, k=k), clip)
    opt = opt if opt is not None else Adam(spec.n_params, cfg.policy_lr)
    start_snap = opt.snapshot()
    current = params
    f0 = None
    report = UpdateReport(accepted=False, ratio_cap=cfg.surrogate.ratio_cap)
    kept = (params, None, None)
    for i in range(cfg.policy_iters + 1):
        f, g, t = obj(current, with_grad=i < cfg.policy_iters)
        if f0 is None:
            f0 = f
        if t.kl_mean > cfg.target_kl:
            report.early_stopped_at = i
            opt.restore(kept[2])
            break
        kept = (current, t, opt.snapshot())
        report.iterate_kls.append(t.kl_mean)
        report.iterations = i
        if i == cfg.policy_iters:
            break
        _check_grad(g)
        current = opt.step(current, -g)
    final, t_final, _ = kept
    report.objective_before = f0
    if t_final is None or t_final.objective < f0:
        opt.restore(start_snap)
        report.objective_after = f0
        report.iterations = 0
        report.iterate_kls = [0.0]
        return params, report
    report.accepted = final is not params
    report.objective_after = t_final.objective
    report.kl_after = t_final.kl_mean
    report.ratio_cap_hits = t_final.ratio_cap_hits
    return final, report


def ppo_update(params, spec, batch, cfg: AgentConfig, opt=None):
    return proximal_update(params, spec, batch, cfg, 0.0, cfg.clip_ratio, opt)


def papo_update(params, spec, batch, cfg: AgentConfig, opt=None):
    return proximal_update(params, spec, batch, cfg, cfg.k, cfg.clip_ratio if cfg.papo_clip else None, opt)


def a2c_update(params, spec, batch, cfg: AgentConfig, opt=None):
    """Single Adam step on ``-mean(log pi(a|s) * A)``."""
    dist, cache = forward_cached(params, spec, batch.obs)
    adv = batch.advantages
    n = len(adv)
    g_out, g_ls = log_prob_grad(dist, batch.actions)
    g_out = g_out * (adv / n)[:, None]
    g_ls = None if g_ls is None else (g_ls * (adv / n)[:, None]).sum(axis=0)
    g = backward(cache, g_out, g_ls, params)
    _check_grad(g)
    before = float(dist.log_prob(batch.actions) @ adv) / n
    report = UpdateReport(accepted=True, objective_before=before, iterations=1)
    if not np.any(g):
        report.objective_after = before
        return params, report
    opt = opt if opt is not None else Adam(spec.n_params, cfg.policy_lr)
    new = opt.step(params, -g)
    new_dist, _ = forward_cached(new, spec, batch.obs)
    report.objective_after = float(new_dist.log_prob(batch.actions) @ adv) / n
    report.kl_after = float(kl(new_dist, dist).mean())
    return new, report


def value_loss_and_grad(params, spec, obs, targets):
    pred, cache = forward_cached(params, spec, obs)
    err = pred - targets
    n = len(targets)
    return float(err @ err) / n, backward(cache, (2.0 / n) * err, None)


def value_update(params, spec, batch, cfg: AgentConfig, opt: Optional[Adam] = None):
    """``value_iters`` full-batch Adam steps on the squared error to GAE returns."""
    targets = batch.returns
    opt = opt if opt is not None else Adam(spec.n_params, cfg.value_lr)
    for _ in range(cfg.value_iters):
        _, g = value_loss_and_grad(params, spec, batch.obs, targets)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("value gradient is not finite")
        params = opt.step(params, g)
    loss, _ = value_loss_and_grad(params, spec, batch.obs, targets)
    return params, loss


def update_policy(params, spec, batch, cfg: AgentConfig, opt=None):
    """Dispatch on ``cfg.algorithm``."""
    if cfg.algorithm == APO:
        return apo_update(params, spec, batch, cfg)
    if cfg.algorithm == TRPO:
        return trpo_update(params, spec, batch, cfg)
    if cfg.algorithm == PPO:
        return ppo_update(params, spec, batch, cfg, opt)
    if cfg.algorithm == PAPO:
        return papo_update(params, spec, batch, cfg, opt)
    return a2c_update(params, spec, batch, cfg, opt)


# ---------------------------------------------------------------------------
# Exact tabular APO


@dataclass
class ExactStep:
    iteration: int
    bound: float          # exact J - k * Var of the policy after this iteration
    accepted: bool
    backtracks: int
    kl_mean: float
    surrogate_gain: float


def _softmax_policy(logits):
    return TabularPolicy.from_logits(logits)


def _bound(mdp, logits, k):
    ev = evaluate(mdp, _softmax_policy(logits), k)
    return ev.abs_bound


def exact_bound_gradient(mdp, logits, k, h=1e-6):
    """Central-difference gradient of the exact ``J - k * Var`` in the logits."""
    g = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        e = np.zeros_like(logits)
        e[idx] = h
        g[idx] = (_bound(mdp, logits + e, k) - _bound(mdp, logits - e, k)) / (2 * h)
    return g


def exact_apo(mdp: TabularMdp, logits, k=7.0, iterations=50, target_kl=0.02, backtrack_coef=0.8,
              backtrack_steps=100, damping=1e-3) -> List[ExactStep]:
    """APO on exact quantities with the exact-theory surrogate.

    The search direction is the natural gradient (Fisher weighted by the
    discounted state distribution) of ``J - k * Var``; a candidate is accepted
    when its mean KL is within ``target_kl`` and the exact surrogate does not
    decrease from its value at the anchor.
    """
    cfg = exact_theory_config(k=k, gamma=mdp.gamma)
    logits = np.array(logits, dtype=np.float64)
    trace = []
    for it in range(iterations):
        pi = _softmax_policy(logits)
        ev = evaluate(mdp, pi, k)
        anchor = objective_m_k(mdp, pi, pi, cfg, ev_old=ev).m_k
        d = ev.disc_state_dist
        g = exact_bound_gradient(mdp, logits, k).ravel()
        probs = pi.probs

        def fisher(v, probs=probs, d=d):
            v = v.reshape(probs.shape)
            pv = (probs * v).sum(axis=1, keepdims=True)
            return (d[:, None] * probs * (v - pv)).ravel() + damping * v.ravel()

        step = ExactStep(it, ev.abs_bound, False, backtrack_steps, 0.0, 0.0)
        if np.any(g):
            x = conjugate_gradient(fisher, g, iters=max(10, g.size)).x
            curv = float(x @ fisher(x))
            full = math.sqrt(2.0 * target_kl / curv) * x.reshape(logits.shape) if curv > 0 else None
            for m in range(backtrack_steps if full is not None else 0):
                cand = logits + backtrack_coef**m * full
                new_pi = _softmax_policy(cand)
                kl_mean = float(d @ tabular_kl(new_pi, pi))
                if kl_mean > target_kl:
                    continue
                m_new = objective_m_k(mdp, pi, new_pi, cfg, ev_old=ev).m_k
                if m_new >= anchor:
                    logits = cand
                    step = ExactStep(it, evaluate(mdp, new_pi, k).abs_bound, True, m, kl_mean, m_new - anchor)
                    break
        trace.append(step)
    return trace
