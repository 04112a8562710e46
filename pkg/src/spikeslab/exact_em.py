"""Exact EM: exhaustive E-step expectations and closed-form M-step updates.

The E-step core `sweep_states` loops over binary states while staying
vectorized over data points; both the exact engine (full state space) and
the truncated engine (restricted state sets) run on it.  Per-point weights
are normalized with log-sum-exp inside fixed-size blocks so memory stays
bounded and summation order is deterministic.
"""

import csv
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError
from .linalg import chol_psd
from .model import (
    H_EXACT_MAX,
    BinaryState,
    ModelParams,
    all_states,
    clamp_pi,
    conditional_gaussian,
)

_LOG2PI = np.log(2.0 * np.pi)
_BLOCK = 4096


@dataclass
class Counters:
    """Instrumentation for the clustering-economy accounting."""

    factorizations: int = 0   # state-dependent factor computations
    state_evals: int = 0      # factorizations weighted by points touched

    def merge(self, other):
        self.factorizations += other.factorizations
        self.state_evals += other.state_evals


@dataclass
class SufficientStats:
    """Posterior expectations accumulated over data points.

    Es/Ess/Esz/Eszsz follow the E-step expectation definitions; y_esz and
    yy are the data cross-moments the M-step needs alongside them.
    """

    Es: np.ndarray        # (H,)   sum_n <s>_n
    Ess: np.ndarray       # (H, H) sum_n <s s^T>_n
    Esz: np.ndarray       # (H,)   sum_n <s*z>_n
    Eszsz: np.ndarray     # (H, H) sum_n <(s*z)(s*z)^T>_n
    y_esz: np.ndarray     # (D, H) sum_n y^(n) <s*z>_n^T
    yy: np.ndarray        # (D, D) sum_n y^(n) y^(n)^T
    n_count: int

    @classmethod
    def zeros(cls, D, H):
        return cls(np.zeros(H), np.zeros((H, H)), np.zeros(H),
                   np.zeros((H, H)), np.zeros((D, H)), np.zeros((D, D)), 0)

    def add(self, other):
        return SufficientStats(
            self.Es + other.Es, self.Ess + other.Ess,
            self.Esz + other.Esz, self.Eszsz + other.Eszsz,
            self.y_esz + other.y_esz, self.yy + other.yy,
            self.n_count + other.n_count)


def combine_stats(parts):
    """Pairwise tree reduction of partial statistics.

    The reduction tree depends only on len(parts), so a fixed partition
    gives bit-identical results for any worker count.
    """
    parts = list(parts)
    if not parts:
        raise ConfigError("no partial statistics to combine")
    while len(parts) > 1:
        nxt = []
        for i in range(0, len(parts) - 1, 2):
            nxt.append(parts[i].add(parts[i + 1]))
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


@dataclass
class PointwiseStats:
    """Per-point E-step expectations (leading axis n)."""

    Es: np.ndarray        # (N, H)
    Ess: np.ndarray       # (N, H, H)
    Esz: np.ndarray       # (N, H)
    Eszsz: np.ndarray     # (N, H, H)
    log_norm: np.ndarray  # (N,) log of the state-sum the weights used
    underflow: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def accumulate(self, Y):
        Y = np.asarray(Y, dtype=np.float64)
        return SufficientStats(
            Es=self.Es.sum(axis=0),
            Ess=self.Ess.sum(axis=0),
            Esz=self.Esz.sum(axis=0),
            Eszsz=self.Eszsz.sum(axis=0),
            y_esz=Y.T @ self.Esz,
            yy=Y.T @ Y,
            n_count=self.Es.shape[0])


class Precomp:
    """Per-parameter quantities shared by every state evaluation."""

    def __init__(self, params):
        self.params = params
        self.sig = chol_psd(params.Sigma, context="Sigma")
        self.P = self.sig.solve(params.W)            # Sigma^-1 W, (D, H)
        self.G = params.W.T @ self.P                 # W^T Sigma^-1 W, (H, H)
        pi = clamp_pi(params.pi)
        self.log_prior_base = float(np.sum(np.log1p(-pi)))
        self.logit = np.log(pi) - np.log1p(-pi)


class _StateFactor:
    """Data-independent pieces of one state's posterior component."""

    __slots__ = ("active", "log_prior", "logdet_C", "Lam", "mu_A", "GAAmu",
                 "quad_mu")

    def __init__(self, pre, active):
        params = pre.params
        A = np.asarray(active, dtype=int)
        self.active = A
        self.log_prior = pre.log_prior_base + float(pre.logit[A].sum()) \
            if len(A) else pre.log_prior_base
        if len(A) == 0:
            self.logdet_C = pre.sig.logdet
            self.Lam = np.zeros((0, 0))
            self.mu_A = np.zeros(0)
            self.GAAmu = np.zeros(0)
            self.quad_mu = 0.0
            return
        psi = chol_psd(params.Psi[np.ix_(A, A)], context="Psi_AA",
                       state=tuple(A))
        M = pre.G[np.ix_(A, A)] + psi.inv()
        mfac = chol_psd(M, context="Lambda_inv", state=tuple(A))
        self.Lam = mfac.inv()
        self.logdet_C = pre.sig.logdet + psi.logdet + mfac.logdet
        self.mu_A = params.mu[A]
        self.GAAmu = pre.G[np.ix_(A, A)] @ self.mu_A
        self.quad_mu = float(self.mu_A @ self.GAAmu)


def _state_logw(fac, U, q0, D):
    """Unnormalized log weight log B(s) + log N(y; W_s mu, C_s), batched."""
    A = fac.active
    if len(A) == 0:
        quad = q0
    else:
        UA = U[:, A]
        v = UA - fac.GAAmu
        quad = q0 - 2.0 * UA @ fac.mu_A + fac.quad_mu \
            - np.einsum("nk,nk->n", v, v @ fac.Lam)
    return fac.log_prior - 0.5 * (D * _LOG2PI + fac.logdet_C + quad)


def _state_kappa(fac, U):
    A = fac.active
    v = U[:, A] - fac.GAAmu
    return fac.mu_A + v @ fac.Lam


def _stacked_chol_logdet(Astack, context):
    """Cholesky-factor a stack of symmetric matrices at once.

    Fast path: one batched LAPACK call.  If any matrix in the stack fails,
    fall back to the per-matrix jitter escalation and return the repaired
    matrices so downstream inverses stay consistent.
    """
    try:
        L = np.linalg.cholesky(Astack)
        logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)),
                              axis=-1)
        return Astack, logdet
    except np.linalg.LinAlgError:
        fixed = np.array(Astack, copy=True)
        logdet = np.empty(Astack.shape[0])
        for i in range(Astack.shape[0]):
            fac = chol_psd(Astack[i], context=context)
            if fac.jitter:
                fixed[i] = Astack[i] + fac.jitter * np.eye(Astack.shape[-1])
            logdet[i] = fac.logdet
        return fixed, logdet


class _StateGroup:
    """All states of one popcount, factored together with stacked linear
    algebra (one LAPACK call per quantity instead of one per state)."""

    __slots__ = ("k", "pos", "idx", "log_prior", "logdet_C", "Lam", "mu_A",
                 "GAAmu", "quad_mu")

    def __init__(self, pre, k, pos, idx):
        params = pre.params
        self.k = k
        self.pos = pos                      # columns in the logw matrix
        self.idx = idx                      # (S_k, k) active indices
        if k == 0:
            self.log_prior = np.array([pre.log_prior_base])
            self.logdet_C = np.array([pre.sig.logdet])
            return
        GAA = pre.G[idx[:, :, None], idx[:, None, :]]      # (S_k, k, k)
        PsiAA = params.Psi[idx[:, :, None], idx[:, None, :]]
        self.mu_A = params.mu[idx]                         # (S_k, k)
        PsiAA, logdet_psi = _stacked_chol_logdet(PsiAA, "Psi_AA")
        eye = np.broadcast_to(np.eye(k), PsiAA.shape)
        M = GAA + np.linalg.solve(PsiAA, eye)
        M, logdet_M = _stacked_chol_logdet(M, "Lambda_inv")
        Lam = np.linalg.inv(M)
        self.Lam = 0.5 * (Lam + Lam.transpose(0, 2, 1))
        self.logdet_C = pre.sig.logdet + logdet_psi + logdet_M
        self.GAAmu = np.einsum("skl,sl->sk", GAA, self.mu_A)
        self.quad_mu = np.einsum("sk,sk->s", self.mu_A, self.GAAmu)
        self.log_prior = pre.log_prior_base + pre.logit[idx].sum(axis=1)

    def log_weights(self, Ub, q0b, D):
        """(nb, S_k) unnormalized log joint weights; also returns the
        whitened residual product needed for posterior means."""
        if self.k == 0:
            logw = self.log_prior[0] - 0.5 * (
                D * _LOG2PI + self.logdet_C[0] + q0b)
            return logw[:, None], None
        UA = Ub[:, self.idx]                               # (nb, S_k, k)
        v = UA - self.GAAmu[None, :, :]
        vLam = np.einsum("nsk,skl->nsl", v, self.Lam)
        quad = (q0b[:, None]
                - 2.0 * np.einsum("nsk,sk->ns", UA, self.mu_A)
                + self.quad_mu[None, :]
                - np.einsum("nsk,nsk->ns", vLam, v))
        logw = self.log_prior[None, :] - 0.5 * (
            D * _LOG2PI + self.logdet_C[None, :] + quad)
        return logw, self.mu_A[None, :, :] + vLam          # kappa


def _group_states(pre, states):
    by_k = {}
    for j, s in enumerate(states):
        by_k.setdefault(s.popcount, []).append((j, s.active))
    groups = []
    for k in sorted(by_k):
        pos = np.array([j for j, _ in by_k[k]], dtype=int)
        if k == 0:
            idx = np.zeros((len(pos), 0), dtype=int)
        else:
            idx = np.array([a for _, a in by_k[k]], dtype=int)
        groups.append(_StateGroup(pre, k, pos, idx))
    return groups


def sweep_states(pre, Y, states, *, pointwise=False, want_esz=False,
                 counters=None, block=_BLOCK):
    """Posterior expectations over a common list of binary states.

    States are batched by popcount so the per-state covariance factors are
    computed with stacked linear algebra.  Returns (stats, log_norm, esz,
    underflow_rows) where stats is either a PointwiseStats (pointwise=True)
    or an accumulated SufficientStats.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    N, D = Y.shape
    H = pre.params.H
    S = len(states)
    if S == 0:
        raise ConfigError("state list must be nonempty")

    groups = _group_states(pre, states)
    if counters is not None:
        counters.factorizations += S
        counters.state_evals += S * N

    U = Y @ pre.P
    q0 = np.einsum("nd,nd->n", Y, pre.sig.solve(Y.T).T)
    log_norm = np.empty(N)
    underflow = []

    if pointwise:
        out = PointwiseStats(np.zeros((N, H)), np.zeros((N, H, H)),
                             np.zeros((N, H)), np.zeros((N, H, H)),
                             log_norm)
    else:
        acc = SufficientStats.zeros(D, H)
        acc.yy = Y.T @ Y
        acc.n_count = N
    esz = np.zeros((N, H)) if (want_esz and not pointwise) else None

    for lo in range(0, N, block):
        hi = min(lo + block, N)
        Ub, q0b, Yb = U[lo:hi], q0[lo:hi], Y[lo:hi]
        nb = hi - lo
        logw = np.empty((nb, S))
        kappas = []
        for g in groups:
            lw_g, kap_g = g.log_weights(Ub, q0b, D)
            logw[:, g.pos] = lw_g
            kappas.append(kap_g)
        lz = logsumexp(logw, axis=1)
        bad = ~np.isfinite(lz)
        if np.any(bad):
            # Total underflow: fall back to uniform weights within the set.
            logw[bad] = 0.0
            underflow.extend((lo + np.nonzero(bad)[0]).tolist())
        log_norm[lo:hi] = lz
        q = np.exp(logw - np.where(np.isfinite(lz), lz, 0.0)[:, None])
        if np.any(bad):
            q[bad] = 1.0 / S

        rows = np.arange(nb)
        for g, kap in zip(groups, kappas):
            if g.k == 0:
                continue
            idx = g.idx                                    # (S_k, k)
            qg = q[:, g.pos]                               # (nb, S_k)
            qk = qg[:, :, None] * kap                      # (nb, S_k, k)
            if pointwise:
                np.add.at(out.Es[lo:hi],
                          (rows[:, None, None], idx[None, :, :]),
                          qg[:, :, None])
                np.add.at(out.Ess[lo:hi],
                          (rows[:, None, None, None],
                           idx[None, :, :, None], idx[None, :, None, :]),
                          qg[:, :, None, None])
                np.add.at(out.Esz[lo:hi],
                          (rows[:, None, None], idx[None, :, :]), qk)
                T = qg[:, :, None, None] * (
                    g.Lam[None, :, :, :]
                    + kap[:, :, :, None] * kap[:, :, None, :])
                np.add.at(out.Eszsz[lo:hi],
                          (rows[:, None, None, None],
                           idx[None, :, :, None], idx[None, :, None, :]), T)
            else:
                qsum = qg.sum(axis=0)                      # (S_k,)
                qk_sum = qk.sum(axis=0)                    # (S_k, k)
                np.add.at(acc.Es, idx, qsum[:, None])
                np.add.at(acc.Ess,
                          (idx[:, :, None], idx[:, None, :]),
                          qsum[:, None, None])
                np.add.at(acc.Esz, idx, qk_sum)
                T = (qsum[:, None, None] * g.Lam
                     + np.einsum("nsk,nsl->skl", kap, qk))
                np.add.at(acc.Eszsz,
                          (idx[:, :, None], idx[:, None, :]), T)
                M2 = np.einsum("nd,nsk->dsk", Yb, qk)
                np.add.at(acc.y_esz,
                          (np.arange(D)[:, None, None], idx[None, :, :]),
                          M2)
                if esz is not None:
                    np.add.at(esz[lo:hi],
                              (rows[:, None, None], idx[None, :, :]), qk)

    und = np.asarray(underflow, dtype=int)
    if pointwise:
        out.underflow = und
        return out, log_norm, None, und
    return acc, log_norm, esz, und


def state_log_weights(params, Y, states):
    """Matrix of log p(y^(n), s_j) for every point/state pair, (N, S)."""
    pre = Precomp(params)
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    N, D = Y.shape
    U = Y @ pre.P
    q0 = np.einsum("nd,nd->n", Y, pre.sig.solve(Y.T).T)
    out = np.empty((N, len(states)))
    for j, s in enumerate(states):
        out[:, j] = _state_logw(_StateFactor(pre, s.active), U, q0, D)
    return out


def exact_estep(params, data, *, h_exact_max=H_EXACT_MAX, counters=None):
    """Per-point expectations under the exact posterior (all 2^H states)."""
    states = all_states(params.H, h_exact_max=h_exact_max)
    pre = Precomp(params)
    out, log_norm, _, _ = sweep_states(pre, data.Y, states, pointwise=True,
                                       counters=counters)
    return out


def posterior_stats(params, y, states=None):
    """Single-point expectations, optionally restricted to a state list."""
    if states is None:
        states = all_states(params.H)
    pre = Precomp(params)
    out, log_norm, _, und = sweep_states(pre, np.atleast_2d(y), states,
                                         pointwise=True)
    return out


def mstep(stats, data, params_old, *, pi_floor_clamp=True,
          sigma_form="simplified"):
    """Closed-form parameter updates from accumulated statistics.

    Returns (params_new, flags).  Flags note held-back entries (zero
    activation mass) and pi values that hit the clamp.
    """
    N = stats.n_count
    if N != data.N:
        raise ConfigError("statistics were not accumulated over the dataset")
    H = params_old.H
    flags = {"held_mu": [], "held_psi": [], "pi_clamped": False}

    # W solves W (sum Eszsz) = sum y Esz^T.
    W = np.linalg.solve(
        0.5 * (stats.Eszsz + stats.Eszsz.T)
        + 1e-12 * max(np.trace(stats.Eszsz) / H, 1.0) * np.eye(H),
        stats.y_esz.T).T

    pi_raw = stats.Es / N
    pi = clamp_pi(pi_raw) if pi_floor_clamp else pi_raw
    if np.any(pi != pi_raw):
        flags["pi_clamped"] = True

    es = stats.Es
    dead = es <= 0.0
    mu = np.where(dead, params_old.mu, stats.Esz / np.where(dead, 1.0, es))
    flags["held_mu"] = np.nonzero(dead)[0].tolist()

    ess = stats.Ess
    dead_ss = ess <= 0.0
    denom = np.where(dead_ss, 1.0, ess)
    Psi = (stats.Eszsz - ess * np.outer(mu, mu)) / denom
    Psi = np.where(dead_ss, params_old.Psi, Psi)
    Psi = 0.5 * (Psi + Psi.T)
    # The element-wise quotient is an exact free-energy stationary point on
    # the diagonal but not off it, so a diagonal slab covariance keeps its
    # structure; this also makes the (mu, Psi) update a joint maximizer.
    if np.array_equal(params_old.Psi, np.diag(np.diag(params_old.Psi))):
        Psi = np.diag(np.diag(Psi))
    flags["held_psi"] = sorted({int(i) for i in np.nonzero(dead_ss)[0]})

    if sigma_form == "simplified":
        # Two-term noise update; equals the residual form because W solves
        # its normal equations.
        Sigma = (stats.yy - W @ stats.Eszsz @ W.T) / N
    elif sigma_form == "residual":
        # Full residual form, exact for any W; kept as a cross-check.
        Sigma = (stats.yy - stats.y_esz @ W.T - W @ stats.y_esz.T
                 + W @ stats.Eszsz @ W.T) / N
    else:
        raise ConfigError(f"unknown sigma_form {sigma_form!r}")
    Sigma = 0.5 * (Sigma + Sigma.T)
    if params_old.noise_mode == "homoscedastic":
        Sigma = (np.trace(Sigma) / params_old.D) * np.eye(params_old.D)
    elif params_old.noise_mode == "diagonal":
        Sigma = np.diag(np.diag(Sigma))

    params = ModelParams(W=W, Sigma=Sigma, pi=pi, mu=mu, Psi=Psi,
                         noise_mode=params_old.noise_mode)
    return params, flags


def sigma_update_simplified(stats, W):
    """Two-term noise update (second-moment form); equals the residual form
    when W exactly solves its normal equations."""
    return (stats.yy - W @ stats.Eszsz @ W.T) / stats.n_count


def free_energy(params, params_old, data, *, h_exact_max=H_EXACT_MAX):
    """EM free energy: expected log joint under the exact posterior at
    params_old, plus that posterior's entropy.

    By construction free_energy(theta, theta, data) equals the total log
    marginal likelihood at theta.
    """
    states = all_states(params.H, h_exact_max=h_exact_max)
    sig_new = chol_psd(params.Sigma, context="Sigma")
    total = 0.0
    for n in range(data.N):
        y = data.Y[n]
        cgs = [conditional_gaussian(params_old, s, y) for s in states]
        lws = np.array([cg.log_weight for cg in cgs])
        lz = logsumexp(lws)
        q = np.exp(lws - lz)
        for s, cg, qs in zip(states, cgs, q):
            if qs <= 0.0:
                continue
            A = list(s.active)
            k = len(A)
            log_prior = float(np.sum(
                s.as_array() * np.log(clamp_pi(params.pi))
                + (1.0 - s.as_array()) * np.log1p(-clamp_pi(params.pi))))
            kap = cg.kappa[A]
            Lam = cg.Lambda[np.ix_(A, A)]
            if k:
                psi_new = chol_psd(params.Psi[np.ix_(A, A)], context="Psi_AA")
                d = kap - params.mu[A]
                term_z = -0.5 * (k * _LOG2PI + psi_new.logdet
                                 + np.trace(psi_new.solve(Lam))
                                 + d @ psi_new.solve(d))
                WA = params.W[:, A]
                r = y - WA @ kap
                term_y = -0.5 * (params.D * _LOG2PI + sig_new.logdet
                                 + r @ sig_new.solve(r)
                                 + np.trace(sig_new.solve(WA @ Lam @ WA.T)))
                ldet_lam = float(np.linalg.slogdet(Lam)[1])
                ent_z = 0.5 * (k * (_LOG2PI + 1.0) + ldet_lam)
            else:
                term_z = 0.0
                ent_z = 0.0
                term_y = -0.5 * (params.D * _LOG2PI + sig_new.logdet
                                 + y @ sig_new.solve(y))
            total += qs * (log_prior + term_z + term_y + ent_z
                           - np.log(qs))
    return float(total)


@dataclass
class EmTrace:
    """One EM iteration's monitoring record."""

    iteration: int
    log_likelihood: float
    param_deltas: dict
    wall_time: float

    @property
    def max_param_delta(self):
        return max(self.param_deltas.values()) if self.param_deltas else 0.0


def trace_to_csv(traces, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "log_likelihood", "max_param_delta",
                    "wall_time_ms"])
        for t in traces:
            w.writerow([t.iteration, repr(t.log_likelihood),
                        repr(t.max_param_delta), repr(t.wall_time * 1e3)])


def param_deltas(new, old):
    return {
        "W": float(np.max(np.abs(new.W - old.W))),
        "Sigma": float(np.max(np.abs(new.Sigma - old.Sigma))),
        "pi": float(np.max(np.abs(new.pi - old.pi))),
        "mu": float(np.max(np.abs(new.mu - old.mu))),
        "Psi": float(np.max(np.abs(new.Psi - old.Psi))),
    }


def standard_init(data, H, rng, *, noise_mode="full"):
    """Random initialization: pi uniform in [0.05, 0.95], mu standard
    normal, Psi diagonal with positive uniform entries, Sigma set to the
    empirical data covariance, W standard normal."""
    rng = np.random.default_rng(rng)
    D = data.D
    pi = rng.uniform(0.05, 0.95, size=H)
    mu = rng.standard_normal(H)
    Psi = np.diag(np.clip(rng.uniform(0.0, 1.0, size=H), 0.05, None))
    Yc = data.Y - data.Y.mean(axis=0)
    Sigma = (Yc.T @ Yc) / max(data.N - 1, 1) + 1e-3 * np.eye(D)
    if noise_mode == "homoscedastic":
        Sigma = (np.trace(Sigma) / D) * np.eye(D)
    elif noise_mode == "diagonal":
        Sigma = np.diag(np.diag(Sigma))
    W = rng.standard_normal((D, H))
    return ModelParams(W=W, Sigma=Sigma, pi=pi, mu=mu, Psi=Psi,
                       noise_mode=noise_mode)


def run_exact_em(data, init, iters, *, h_exact_max=H_EXACT_MAX,
                 early_stop=False, rel_tol=1e-9, patience=5, counters=None):
    """Exact EM loop; returns final parameters and the per-iteration trace."""
    if iters < 1:
        raise ConfigError("iters must be >= 1")
    params = init
    states = all_states(init.H, h_exact_max=h_exact_max)
    traces = []
    stall = 0
    prev_ll = None
    for it in range(iters):
        t0 = time.perf_counter()
        pre = Precomp(params)
        stats, log_norm, _, _ = sweep_states(pre, data.Y, states,
                                             counters=counters)
        ll = float(np.sum(log_norm))
        new_params, _ = mstep(stats, data, params)
        traces.append(EmTrace(it, ll, param_deltas(new_params, params),
                              time.perf_counter() - t0))
        params = new_params
        if early_stop and prev_ll is not None:
            rel = abs(ll - prev_ll) / max(abs(prev_ll), 1.0)
            stall = stall + 1 if rel < rel_tol else 0
            if stall >= patience:
                break
        prev_ll = ll
    return params, traces
