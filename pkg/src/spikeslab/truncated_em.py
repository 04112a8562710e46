"""Truncated variational EM.

Instead of summing posterior expectations over all 2^H binary states, each
data point gets a small candidate set K_n: all states with at most gamma
active bits drawn from its H' highest-scoring latents, plus every singleton
state and the zero state.  Weights are renormalized within K_n.  Points
whose candidate sets share the same selected index set are clustered so the
state-dependent factorizations are computed once per cluster.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import itertools
import time

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError
from .exact_em import (
    Counters,
    EmTrace,
    Precomp,
    SufficientStats,
    _stacked_chol_logdet,
    combine_stats,
    mstep,
    param_deltas,
    sweep_states,
)
from .model import (
    H_EXACT_MAX,
    BinaryState,
    log_joint_ys,
    log_marginal_likelihood,
)

_LOG2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class TruncationConfig:
    """Truncation parameters: H' selected latents, gamma max active bits."""

    h_prime: int
    gamma: int
    include_singletons: bool = True

    def validate(self, H):
        if not (1 <= self.gamma <= self.h_prime <= H):
            raise ConfigError(
                f"need 1 <= gamma <= H' <= H, got gamma={self.gamma}, "
                f"H'={self.h_prime}, H={H}")
        return self

    def n_states(self, H):
        """Candidate-set size per point (before de-duplication it is exact:
        subsets of I_n up to gamma plus the H - H' outside singletons)."""
        from math import comb
        n = sum(comb(self.h_prime, g) for g in range(self.gamma + 1))
        if self.include_singletons:
            n += H - self.h_prime
        return n


@dataclass
class StateSpace:
    """A point's candidate states K_n and the selected index set I_n."""

    index_set: tuple
    states: list

    def __len__(self):
        return len(self.states)


@dataclass
class ClusterPlan:
    """Partition of data indices into clusters sharing one StateSpace."""

    clusters: list            # list of (key tuple, np.ndarray of indices)
    alpha_percentile: float
    size_cap: int

    @property
    def n_clusters(self):
        return len(self.clusters)


def selection_scores(params, Y):
    """Per-latent scores S_h = log N(y; w_h mu_h, Sigma + Psi_hh w_h w_h^T).

    This is the data likelihood under the singleton state for latent h,
    deliberately without the state prior.  Y may be (D,) or (N, D); returns
    (H,) or (N, H).
    """
    Y2 = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    N, D = Y2.shape
    pre = Precomp(params)
    U = Y2 @ pre.P
    q0 = np.einsum("nd,nd->n", Y2, pre.sig.solve(Y2.T).T)
    H = params.H
    g = np.diag(pre.G)
    psi_d = np.diag(params.Psi)
    if np.any(psi_d <= 0.0):
        raise ConfigError("Psi diagonal must be positive")
    lam = 1.0 / (g + 1.0 / psi_d)                      # (H,)
    logdet_C = pre.sig.logdet + np.log(psi_d) + np.log(g + 1.0 / psi_d)
    v = U - g[None, :] * params.mu[None, :]            # (N, H)
    quad = (q0[:, None] - 2.0 * U * params.mu[None, :]
            + (params.mu ** 2 * g)[None, :] - lam[None, :] * v * v)
    S = -0.5 * (D * _LOG2PI + logdet_C[None, :] + quad)
    return S[0] if np.asarray(Y).ndim == 1 else S


def select_indices(scores, h_prime):
    """Indices of the H' largest scores, ties broken toward lower index."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    return tuple(sorted(int(i) for i in order[:h_prime]))


def build_state_space(scores, cfg, *, index_set=None):
    """Candidate set K_n from per-latent scores.

    K_n holds every subset of the selected index set with popcount <= gamma
    (including the empty state) plus, when configured, all remaining
    singleton states.  States come out in canonical lexicographic order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    H = scores.shape[0]
    cfg.validate(H)
    I = index_set if index_set is not None else select_indices(scores,
                                                               cfg.h_prime)
    seen = set()
    for g in range(cfg.gamma + 1):
        for combo in itertools.combinations(I, g):
            seen.add(combo)
    if cfg.include_singletons:
        for h in range(H):
            seen.add((h,))
    states = [BinaryState.from_active(a, H) for a in seen]
    states.sort()
    return StateSpace(index_set=tuple(I), states=states)


def truncated_expectations(params, y, space):
    """Single-point posterior expectations restricted to K_n.

    Returns accumulated SufficientStats for the one point (weights
    renormalized within the candidate set)."""
    if not space.states:
        raise ConfigError("empty state space")
    pre = Precomp(params)
    stats, log_norm, _, _ = sweep_states(pre, np.atleast_2d(y), space.states)
    return stats


def q_value(params, y, space, *, h_exact_max=H_EXACT_MAX):
    """Fraction of exact posterior mass captured by the candidate set."""
    lw_k = logsumexp([log_joint_ys(params, s, y) for s in space.states])
    lw_all = log_marginal_likelihood(params, y, h_exact_max=h_exact_max)
    return float(np.exp(min(lw_k - lw_all, 0.0)))


def cluster_partition(spaces, alpha=5.0):
    """Group data points whose selected index sets match.

    Clusters larger than the size cap -- the top-alpha-percentile of
    occurring cluster sizes -- are split into even contiguous chunks.
    """
    if not (0.0 < alpha < 100.0):
        raise ConfigError("alpha percentile must be in (0, 100)")
    groups = {}
    for n, sp in enumerate(spaces):
        groups.setdefault(tuple(sp.index_set), []).append(n)
    sizes = np.array([len(v) for v in groups.values()])
    cap = max(int(np.ceil(np.percentile(sizes, 100.0 - alpha))), 1)
    clusters = []
    for key in sorted(groups):
        idx = np.asarray(groups[key], dtype=int)
        if len(idx) > cap:
            for chunk in np.array_split(idx, int(np.ceil(len(idx) / cap))):
                clusters.append((key, chunk))
        else:
            clusters.append((key, idx))
    return ClusterPlan(clusters=clusters, alpha_percentile=alpha,
                       size_cap=cap)


class _GroupFactors:
    """Per-state covariance factors for one popcount level, stacked over a
    chunk of clusters (one LAPACK call per quantity).

    IDX has shape (C, S, k): C clusters (or 1 when the group is shared by
    all clusters, e.g. the singleton states), S states per cluster, k
    active latents per state.
    """

    __slots__ = ("k", "S", "IDX", "per_cluster", "Lam", "logdet_C", "mu_A",
                 "GAAmu", "quad_mu", "log_prior")

    def __init__(self, pre, IDX, per_cluster):
        params = pre.params
        C, S, k = IDX.shape
        self.k, self.S, self.IDX, self.per_cluster = k, S, IDX, per_cluster
        if k == 0:
            self.logdet_C = np.full((C, S), pre.sig.logdet)
            self.log_prior = np.full((C, S), pre.log_prior_base)
            return
        flat = IDX.reshape(C * S, k)
        GAA = pre.G[flat[:, :, None], flat[:, None, :]]
        PsiAA = params.Psi[flat[:, :, None], flat[:, None, :]]
        muA = params.mu[flat]
        PsiAA, ld_psi = _stacked_chol_logdet(PsiAA, "Psi_AA")
        M = GAA + np.linalg.inv(PsiAA)
        M, ld_M = _stacked_chol_logdet(M, "Lambda_inv")
        Lam = np.linalg.inv(M)
        self.Lam = (0.5 * (Lam + Lam.transpose(0, 2, 1))).reshape(C, S, k, k)
        self.logdet_C = (pre.sig.logdet + ld_psi + ld_M).reshape(C, S)
        self.mu_A = muA.reshape(C, S, k)
        GAAmu = np.einsum("mkl,ml->mk", GAA, muA)
        self.GAAmu = GAAmu.reshape(C, S, k)
        self.quad_mu = np.einsum("mk,mk->m", muA, GAAmu).reshape(C, S)
        self.log_prior = (pre.log_prior_base
                          + pre.logit[flat].sum(axis=-1)).reshape(C, S)


def _chunk_groups(pre, keys, cfg):
    """Factor groups for one chunk of clusters: the zero state and (when
    configured) the singleton states are shared across clusters; higher
    popcounts get per-cluster stacks of I_n subsets."""
    H = pre.params.H
    groups = [_GroupFactors(pre, np.zeros((1, 1, 0), dtype=int), False)]
    if cfg.include_singletons:
        groups.append(_GroupFactors(
            pre, np.arange(H, dtype=int).reshape(1, H, 1), False))
        k_start = 2
    else:
        k_start = 1
    for k in range(k_start, cfg.gamma + 1):
        arr = np.array([list(itertools.combinations(key, k))
                        for key in keys], dtype=int)
        if arr.size:
            groups.append(_GroupFactors(pre, arr.reshape(len(keys), -1, k),
                                        True))
    return groups


def _run_starts(cid):
    starts = np.r_[0, np.nonzero(np.diff(cid))[0] + 1]
    return starts, cid[starts]


def _chunk_sweep(pre, Y, U, q0, chunk, cfg, *, want_esz, counters,
                 point_block=1024, share_keys=True):
    """Truncated E-step over one chunk of clusters.

    When share_keys is on, clusters carrying the same index set (for
    instance after size-cap splitting) share one factor stack; otherwise
    every cluster is factorized independently.  Returns (stats, rows,
    log_norm_rows, esz_rows, underflow_rows) where rows are the dataset
    indices the chunk covers, in processing order.
    """
    D = Y.shape[1]
    H = pre.params.H
    members = [idx for _, idx in chunk]
    rows = np.concatenate(members)
    if share_keys:
        key_id = {}
        kid = [key_id.setdefault(key, len(key_id))
               for key, _ in chunk]
        keys = list(key_id)
    else:
        kid = list(range(len(chunk)))
        keys = [key for key, _ in chunk]
    cid = np.concatenate([np.full(len(m), kid[i], dtype=int)
                          for i, m in enumerate(members)])
    Np = len(rows)
    groups = _chunk_groups(pre, keys, cfg)
    S_tot = sum(g.S for g in groups)
    offs = np.cumsum([0] + [g.S for g in groups])
    if counters is not None:
        counters.factorizations += sum(
            (len(keys) if g.per_cluster else 1) * g.S for g in groups)
        counters.state_evals += Np * S_tot

    acc = SufficientStats.zeros(D, H)
    acc.n_count = Np
    log_norm = np.empty(Np)
    esz_rows = np.empty((Np, H)) if want_esz else None
    underflow = []

    for lo in range(0, Np, point_block):
        hi = min(lo + point_block, Np)
        nb = hi - lo
        rb, cb = rows[lo:hi], cid[lo:hi]
        Ub, q0b, Yb = U[rb], q0[rb], Y[rb]
        narange = np.arange(nb)
        zeros_c = np.zeros(nb, dtype=int)

        logw = np.empty((nb, S_tot))
        kappas = []
        for g, off in zip(groups, offs):
            if g.k == 0:
                logw[:, off] = g.log_prior[0, 0] - 0.5 * (
                    D * _LOG2PI + g.logdet_C[0, 0] + q0b)
                kappas.append(None)
                continue
            c = cb if g.per_cluster else zeros_c
            IDXp = g.IDX[c]                              # (nb, S, k)
            UA = Ub[narange[:, None, None], IDXp]
            v = UA - g.GAAmu[c]
            vLam = np.einsum("nsk,nskl->nsl", v, g.Lam[c])
            quad = (q0b[:, None]
                    - 2.0 * np.einsum("nsk,nsk->ns", UA, g.mu_A[c])
                    + g.quad_mu[c]
                    - np.einsum("nsk,nsk->ns", vLam, v))
            logw[:, off:off + g.S] = g.log_prior[c] - 0.5 * (
                D * _LOG2PI + g.logdet_C[c] + quad)
            kappas.append(g.mu_A[c] + vLam)

        lz = logsumexp(logw, axis=1)
        bad = ~np.isfinite(lz)
        if np.any(bad):
            logw[bad] = 0.0
            underflow.extend(rb[bad].tolist())
        log_norm[lo:hi] = lz
        q = np.exp(logw - np.where(np.isfinite(lz), lz, 0.0)[:, None])
        if np.any(bad):
            q[bad] = 1.0 / S_tot

        marg = np.zeros((nb, H))
        ez = np.zeros((nb, H))
        seg_starts, seg_cids = _run_starts(cb)
        for g, off, kap in zip(groups, offs, kappas):
            if g.k == 0:
                continue
            c = cb if g.per_cluster else zeros_c
            qg = q[:, off:off + g.S]
            IDXp = g.IDX[c]
            np.add.at(marg, (narange[:, None, None], IDXp), qg[:, :, None])
            qk = qg[:, :, None] * kap
            np.add.at(ez, (narange[:, None, None], IDXp), qk)
            T = qg[:, :, None, None] * (
                g.Lam[c] + kap[:, :, :, None] * kap[:, :, None, :])
            if g.per_cluster:
                # Per-cluster segment sums, then one scatter per cluster.
                Tc = np.add.reduceat(T, seg_starts, axis=0)
                qc = np.add.reduceat(qg, seg_starts, axis=0)
                IDXc = g.IDX[seg_cids]
                np.add.at(acc.Ess,
                          (IDXc[:, :, :, None], IDXc[:, :, None, :]),
                          qc[:, :, None, None])
                np.add.at(acc.Eszsz,
                          (IDXc[:, :, :, None], IDXc[:, :, None, :]), Tc)
            else:
                IDX0 = g.IDX[0]
                np.add.at(acc.Ess, (IDX0[:, :, None], IDX0[:, None, :]),
                          qg.sum(axis=0)[:, None, None])
                np.add.at(acc.Eszsz, (IDX0[:, :, None], IDX0[:, None, :]),
                          T.sum(axis=0))
        acc.Es += marg.sum(axis=0)
        acc.Esz += ez.sum(axis=0)
        acc.y_esz += Yb.T @ ez
        acc.yy += Yb.T @ Yb
        if want_esz:
            esz_rows[lo:hi] = ez
    return acc, rows, log_norm, esz_rows, underflow


def truncated_estep(params, data, cfg, *, alpha=5.0, workers=1,
                    use_clustering=True, counters=None, pre=None,
                    want_esz=False, cluster_chunk=256):
    """One truncated E-step over the whole dataset.

    Clusters are processed in fixed-size chunks; chunk results merge in a
    worker-count-independent order, so parameters are reproducible for any
    worker count.  Returns (stats, log_norm, plan, esz) where log_norm[n]
    is the log of the K_n-restricted marginal sum (the truncated-likelihood
    surrogate), stats are the accumulated sufficient statistics, and esz is
    the (N, H) matrix of per-point posterior means of s*z when requested
    (else None).
    """
    cfg.validate(params.H)
    if pre is None:
        pre = Precomp(params)
    scores = selection_scores(params, data.Y)
    keys = [select_indices(scores[n], cfg.h_prime) for n in range(data.N)]

    if use_clustering:
        spaces = [StateSpace(index_set=k, states=[]) for k in keys]
        plan = cluster_partition(spaces, alpha)
    else:
        plan = ClusterPlan(
            clusters=[(k, np.array([n])) for n, k in enumerate(keys)],
            alpha_percentile=alpha, size_cap=1)

    chunks = [plan.clusters[i:i + cluster_chunk]
              for i in range(0, plan.n_clusters, cluster_chunk)]
    chunk_counters = [Counters() for _ in chunks]

    def work(i):
        return _chunk_sweep(pre, data.Y, work.U, work.q0, chunks[i], cfg,
                            want_esz=want_esz, counters=chunk_counters[i],
                            share_keys=use_clustering)

    work.U = data.Y @ pre.P
    work.q0 = np.einsum("nd,nd->n", data.Y, pre.sig.solve(data.Y.T).T)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(work, range(len(chunks))))
    else:
        results = [work(i) for i in range(len(chunks))]

    log_norm = np.empty(data.N)
    esz = np.empty((data.N, params.H)) if want_esz else None
    partials = []
    for acc, rows, ln_c, esz_c, _ in results:
        log_norm[rows] = ln_c
        if want_esz:
            esz[rows] = esz_c
        partials.append(acc)
    stats = combine_stats(partials)
    if counters is not None:
        for cc in chunk_counters:
            counters.merge(cc)
    return stats, log_norm, plan, esz


def run_truncated_em(data, init, cfg, iters, *, alpha=5.0, workers=1,
                     use_clustering=True, counters=None,
                     sigma_form="simplified", cluster_chunk=256):
    """Truncated EM loop; the trace's likelihood column is the truncated
    surrogate sum_n log sum_{s in K_n} p(y, s)."""
    if iters < 1:
        raise ConfigError("iters must be >= 1")
    cfg.validate(init.H)
    params = init
    traces = []
    for it in range(iters):
        t0 = time.perf_counter()
        stats, log_norm, _, _ = truncated_estep(
            params, data, cfg, alpha=alpha, workers=workers,
            use_clustering=use_clustering, counters=counters,
            cluster_chunk=cluster_chunk)
        ll = float(np.sum(log_norm))
        new_params, _ = mstep(stats, data, params, sigma_form=sigma_form)
        traces.append(EmTrace(it, ll, param_deltas(new_params, params),
                              time.perf_counter() - t0))
        params = new_params
    return params, traces


def average_q(params, data, cfg, *, h_exact_max=H_EXACT_MAX, alpha=5.0):
    """Mean truncated-posterior mass Q over the dataset at fixed params.

    Vectorized: the full-space log marginals come from one exhaustive sweep
    and the candidate-set sums from per-cluster restricted sweeps.
    """
    from .model import all_states

    pre = Precomp(params)
    full = all_states(params.H, h_exact_max=h_exact_max)
    _, lw_all, _, _ = sweep_states(pre, data.Y, full)
    _, lw_k, _, _ = truncated_estep(params, data, cfg, alpha=alpha, pre=pre)
    qs = np.exp(np.minimum(lw_k - lw_all, 0.0))
    return float(qs.mean()), qs
