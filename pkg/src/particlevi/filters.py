"""Particle filters: sequential (SMC), marginal (MPF), independent (IPF), tensor (TMC).

Weights live in log space end to end; normalized weights are materialized
only as exp(log w - logsumexp) at the categorical sampling boundary, which
is also where the gradient path is cut in biased mode.  Resampling is
multinomial inverse-CDF only.

All randomness is routed through a draw backend keyed by (step, purpose,
offset), so a run is bit-reproducible regardless of evaluation order, the
same noise can be replayed under a different estimator, and runs on finite
models can be enumerated exhaustively instead of sampled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

import particlevi.autodiff as ad
from particlevi.autodiff import Var
from particlevi import models as mo
from particlevi.distributions import (
    GaussianMixture,
    TailCounter,
    categorical_sample_many,
    mixture_implicit_rsample,
)
from particlevi.rng import RngStream

# sub-stream purposes within a time step
ANCESTOR, PROPOSAL, PERM = 0, 1, 2

_GRAD_MODES = ("none", "biased", "unbiased")


class DegeneracyError(RuntimeError):
    """Every particle weight vanished at one step; the estimate is meaningless."""

    def __init__(self, t: int):
        super().__init__(f"particle degeneracy: all weights are zero at t={t}")
        self.t = t


# ---------------------------------------------------------------------------
# draw backends


class RandomBackend:
    """Counter-addressed pseudo-random draws from a root stream."""

    def __init__(self, rng: RngStream):
        self.rng = rng

    def uniforms(self, t: int, purpose: int, offsets) -> np.ndarray:
        return self.rng.split(t, purpose).uniforms_at(np.asarray(offsets))

    def normals(self, t: int, purpose: int, offsets) -> np.ndarray:
        return self.rng.split(t, purpose).normals_at(np.asarray(offsets))

    def choose_shared(self, t: int, purpose: int, n: int, probs: np.ndarray) -> np.ndarray:
        """n inverse-CDF draws from one probability vector, offsets 0..n-1."""
        us = self.uniforms(t, purpose, np.arange(n))
        return categorical_sample_many(probs, us)

    def choose_one(self, t: int, purpose: int, offset: int, probs: np.ndarray) -> int:
        u = self.uniforms(t, purpose, np.asarray([offset]))[0]
        return int(categorical_sample_many(probs, np.asarray([u]))[0])


class ScriptBackend:
    """Replays a prescribed branch at each discrete choice point.

    Used by enumerate_expectation to walk every realization of a run on a
    finite model.  Positions beyond the script take the first branch with
    positive probability and extend the script; the trace records every
    (branch, probability vector) so the driver can compute the path weight
    and advance to the next path.  Continuous draws are rejected.
    """

    def __init__(self, script):
        self.script = list(script)
        self.trace = []
        self._pos = 0

    def uniforms(self, t, purpose, offsets):
        raise RuntimeError("exhaustive enumeration requires a fully discrete model")

    normals = uniforms

    def _choose(self, probs: np.ndarray) -> int:
        probs = np.asarray(probs, dtype=np.float64)
        if self._pos < len(self.script):
            k = self.script[self._pos]
        else:
            nonzero = np.flatnonzero(probs > 0.0)
            if nonzero.size == 0:
                raise ValueError("all branches have zero probability")
            k = int(nonzero[0])
            self.script.append(k)
        self.trace.append((k, probs))
        self._pos += 1
        return k

    def choose_shared(self, t, purpose, n, probs):
        return np.asarray([self._choose(probs) for _ in range(n)], dtype=np.intp)

    def choose_one(self, t, purpose, offset, probs):
        return self._choose(probs)


def enumerate_paths(run_fn, cap: int = 1_000_000):
    """Yield (value, probability, trace) for every realization of run_fn.

    run_fn(backend) -> value.  Depth-first walk with an odometer over the
    recorded choice points; zero-probability branches are skipped.  Raises
    once the number of realizations exceeds cap.
    """
    script: list = []
    realizations = 0
    while True:
        backend = ScriptBackend(script)
        value = run_fn(backend)
        prob = 1.0
        for k, probs in backend.trace:
            prob *= probs[k]
        yield value, prob, list(backend.trace)
        realizations += 1
        if realizations > cap:
            raise RuntimeError(f"enumeration exceeded {cap} realizations")
        nxt = None
        pos = len(backend.trace) - 1
        while pos >= 0:
            k, probs = backend.trace[pos]
            later = np.flatnonzero(probs[k + 1 :] > 0.0)
            if later.size:
                nxt = k + 1 + int(later[0])
                break
            pos -= 1
        if nxt is None:
            return
        script = [k for k, _ in backend.trace[:pos]] + [nxt]


def enumerate_expectation(run_fn, cap: int = 1_000_000) -> float:
    """Exact E[run_fn] over every branch of its discrete draws."""
    return sum(value * prob for value, prob, _ in enumerate_paths(run_fn, cap))


# ---------------------------------------------------------------------------
# configuration and run record


@dataclass
class FilterConfig:
    n_particles: int
    grad_mode: str = "none"
    seed: int = 0
    keep_trajectories: bool = False
    resample: bool = True  # False: ancestors i->i, cumulative weights

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if self.grad_mode not in _GRAD_MODES:
            raise ValueError(f"grad_mode must be one of {_GRAD_MODES}")


@dataclass
class ParticleRun:
    """Everything a filter run produced, weights still on the tape.

    log_weights holds the per-step quantity native to the algorithm: the
    increment w_t / v_t for the resampling filters, the running product
    u_t / z_t for the cumulative ones (flagged by ``cumulative``).  Either
    way log_mean_weights[t] = logsumexp(log_weights[t]) - log N.
    """

    kind: str
    particles: list
    log_weights: list
    log_mean_weights: list
    log_evidence: Var
    cumulative: bool
    ancestors: list | None = None
    trajectories: np.ndarray | None = None
    params: object = None
    ys: np.ndarray | None = None
    tail_failures: int = 0

    @property
    def n_particles(self) -> int:
        return self.log_weights[0].data.shape[0]

    @property
    def t_max(self) -> int:
        return len(self.log_weights)


def _ys_of(data) -> np.ndarray:
    ys = data.ys if isinstance(data, mo.Dataset) else np.asarray(data, dtype=np.float64)
    if ys.ndim != 2:
        raise ValueError("observations must be a (T, dy) array")
    return ys


def _np_lse(a: np.ndarray, axis=None) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = safe + np.log(np.sum(np.exp(a - safe), axis=axis, keepdims=True))
    return out.reshape(()) if axis is None else np.squeeze(out, axis=axis)


def _check_alive(logw: Var, t: int):
    if not np.any(logw.data > -np.inf):
        raise DegeneracyError(t)


def _evidence(log_mean_weights: list, cumulative: bool) -> Var:
    if cumulative:
        return log_mean_weights[-1]
    total = log_mean_weights[0]
    for v in log_mean_weights[1:]:
        total = total + v
    return total


def _log_mean_weight(logw: Var, log_n: float) -> Var:
    # off-tape weights (discrete models, grad-free runs) fold to numpy;
    # enumeration re-runs a filter per path, so this is the hot line
    if logw.nid is None:
        return ad.constant(_np_lse(logw.data) - log_n)
    return ad.logsumexp(logw) - log_n


def _make_backend(rng, backend):
    if backend is not None:
        return backend
    if rng is None:
        raise ValueError("either rng or backend must be given")
    return RandomBackend(rng if isinstance(rng, RngStream) else RngStream(rng))


# ---------------------------------------------------------------------------
# density helpers shared by the filters and the identity check


def _hmm_proposal_rows(model: mo.DiscreteHmm, params, t: int, xp_idx, independent: bool) -> np.ndarray:
    """Proposal probability rows for a discrete model.

    Defaults: bootstrap (prior) proposals for the dependent filters,
    uniform for the independent ones; params may override with
    init_proposal / trans_proposal / indep_proposal tables.
    """
    params = params or {}
    k = model.pi0.shape[0]
    if t == 1:
        return np.asarray(params.get("init_proposal", model.pi0), dtype=np.float64)[None, :]
    if independent:
        dflt = np.full(k, 1.0 / k)
        return np.asarray(params.get("indep_proposal", dflt), dtype=np.float64)[None, :]
    table = np.asarray(params.get("trans_proposal", model.trans), dtype=np.float64)
    return table[xp_idx]


def _discrete_draw(model, params, t, xp_idx, n, backend, independent=False, mix_weights=None):
    """Draw n discrete states; returns (idx, log proposal density at idx)."""
    rows = _hmm_proposal_rows(model, params, t, xp_idx, independent)
    if mix_weights is not None:
        rows = (mix_weights @ rows)[None, :]
    if rows.shape[0] == 1:
        idx = backend.choose_shared(t, PROPOSAL, n, rows[0])
        chosen = np.broadcast_to(rows[0], (n, rows.shape[1]))
    else:
        idx = np.asarray(
            [backend.choose_one(t, PROPOSAL, i, rows[i]) for i in range(n)], dtype=np.intp
        )
        chosen = rows
    with np.errstate(divide="ignore"):
        log_r = np.log(chosen[np.arange(n), idx])
    return idx, log_r


def _hmm_log_g(model: mo.DiscreteHmm, idx: np.ndarray, y_row: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(model.emis)[idx, int(y_row[0])]


def _hmm_log_f(model: mo.DiscreteHmm, t: int, idx: np.ndarray, xp_idx) -> np.ndarray:
    with np.errstate(divide="ignore"):
        if t == 1:
            return np.log(model.pi0)[idx]
        return np.log(model.trans)[xp_idx, idx]


def _log_f_matrix(model, t: int, x, x_prev) -> Var:
    """(N, N_prev) matrix of log f(x_i | x_prev_j)."""
    if isinstance(model, mo.DiscreteHmm):
        idx = x.data[:, 0].astype(np.intp)
        xp = x_prev.data[:, 0].astype(np.intp)
        with np.errstate(divide="ignore"):
            return ad.constant(np.log(model.trans)[np.ix_(xp, idx)].T.copy())
    f_means, f_ls = mo.transition_build_many(model, t, x_prev)
    if f_means.data.shape[0] == 1:
        # single-column case goes through the row kernel so N=1 runs stay
        # bit-aligned with run_smc
        return ad.reshape(mo.gauss_logpdf_rows(x, f_means, f_ls), (-1, 1))
    return mo.gauss_logpdf_matrix(x, f_means, f_ls)


def _log_r_matrix(model, params, t: int, x, x_prev, y_t=None) -> Var:
    """(N, N_prev) matrix of log r_t(x_i | x_prev_j)."""
    if isinstance(model, mo.DiscreteHmm):
        idx = x.data[:, 0].astype(np.intp)
        xp = x_prev.data[:, 0].astype(np.intp)
        table = np.asarray((params or {}).get("trans_proposal", model.trans), dtype=np.float64)
        with np.errstate(divide="ignore"):
            return ad.constant(np.log(table)[np.ix_(xp, idx)].T.copy())
    p_means, p_ls = mo.proposal_build_many(model, params, t, x_prev, y_t)
    if p_means.data.shape[0] == 1:
        return ad.reshape(mo.gauss_logpdf_rows(x, p_means, p_ls), (-1, 1))
    return mo.gauss_logpdf_matrix(x, p_means, p_ls)


# ---------------------------------------------------------------------------
# Sequential Monte Carlo


def run_smc(model, params, data, cfg: FilterConfig, backend=None) -> ParticleRun:
    """Multinomial-resampling particle filter.

    Per step: ancestors drawn from the normalized previous weights, states
    extended through the proposal, weight f*g/r, trajectories reindexed.
    grad_mode "biased" keeps the reparameterization path through every
    state but none through the resampling probabilities.  resample=False
    turns the run into independent importance-sampling chains whose
    weights accumulate across steps.
    """
    if cfg.grad_mode == "unbiased":
        raise ValueError("unbiased gradients are only defined for run_mpf")
    backend = _make_backend(cfg.seed, backend)
    ys = _ys_of(data)
    n, t_max = cfg.n_particles, ys.shape[0]
    discrete = isinstance(model, mo.DiscreteHmm)
    if discrete and cfg.grad_mode != "none":
        raise ValueError("discrete models support grad_mode='none' only")
    log_n = math.log(n)

    particles, log_weights, log_mean_weights, ancestors = [], [], [], []
    hist = [] if cfg.keep_trajectories else None
    x = None
    x_idx = None

    for t in range(1, t_max + 1):
        if t == 1:
            anc = None
        elif cfg.resample:
            lw = log_weights[-1].data
            anc = backend.choose_shared(t, ANCESTOR, n, np.exp(lw - _np_lse(lw)))
        else:
            anc = np.arange(n)
        if anc is not None:
            ancestors.append(anc)
            if hist is not None:
                hist = [h[anc] for h in hist]

        if discrete:
            parent_idx = None if t == 1 else x_idx[anc]
            idx, log_r = _discrete_draw(model, params, t, parent_idx, n, backend)
            inc_np = (
                _hmm_log_f(model, t, idx, parent_idx)
                + _hmm_log_g(model, idx, ys[t - 1])
                - log_r
            )
            x, x_idx = ad.constant(idx[:, None].astype(np.float64)), idx
            if cfg.resample or t == 1:
                logw = ad.constant(inc_np)
            else:
                logw = ad.constant(log_weights[-1].data + inc_np)
        else:
            parent = None if t == 1 else ad.gather_rows(x, anc)
            p_means, p_ls = mo.proposal_build_many(model, params, t, parent, ys[t - 1])
            d = p_means.data.shape[1]
            eps = backend.normals(t, PROPOSAL, np.arange(n * d)).reshape(n, d)
            x = p_means + ad.exp(p_ls) * ad.constant(eps)
            f_means, f_ls = mo.transition_build_many(model, t, parent)
            inc = (
                mo.gauss_logpdf_rows(x, f_means, f_ls)
                + mo.emission_logpdf_rows(model, t, x, ys[t - 1])
                - mo.gauss_logpdf_rows(x, p_means, p_ls)
            )

        logw = inc if (cfg.resample or t == 1) else log_weights[-1] + inc
        _check_alive(logw, t)
        particles.append(x)
        log_weights.append(logw)
        log_mean_weights.append(ad.logsumexp(logw) - log_n)
        if hist is not None:
            hist.append(x.data.copy())

    return ParticleRun(
        kind="smc",
        particles=particles,
        log_weights=log_weights,
        log_mean_weights=log_mean_weights,
        log_evidence=_evidence(log_mean_weights, not cfg.resample),
        cumulative=not cfg.resample,
        ancestors=ancestors,
        trajectories=np.stack(hist) if hist is not None else None,
        params=params,
        ys=ys,
    )


# ---------------------------------------------------------------------------
# Marginal particle filter


def run_mpf(model, params, data, cfg: FilterConfig, backend=None) -> ParticleRun:
    """Marginal particle filter with the mixture proposal.

    New states are drawn from sum_j vbar_{t-1}^j r_t(. | x_{t-1}^j); the
    weight recursion marginalizes the ancestor:

        log v_t^i = logsumexp_j(log vbar_j + log f_ij) + log g_i
                  - logsumexp_j(log vbar_j + log r_ij)

    grad_mode picks the sampling estimator: "biased" draws the component
    index with detached probabilities then reparameterizes within it,
    "unbiased" makes every draw a mixture_implicit_rsample node so the
    mixture weights themselves carry gradients.
    """
    backend = _make_backend(cfg.seed, backend)
    ys = _ys_of(data)
    n, t_max = cfg.n_particles, ys.shape[0]
    discrete = isinstance(model, mo.DiscreteHmm)
    if discrete and cfg.grad_mode != "none":
        raise ValueError("discrete models support grad_mode='none' only")
    log_n = math.log(n)
    tail = TailCounter()

    particles, log_weights, log_mean_weights = [], [], []
    x = None
    x_idx = None

    for t in range(1, t_max + 1):
        if discrete:
            if t == 1:
                idx, log_r = _discrete_draw(model, params, 1, None, n, backend)
                logv_np = _hmm_log_f(model, 1, idx, None) + _hmm_log_g(model, idx, ys[0]) - log_r
                x_new = ad.constant(idx[:, None].astype(np.float64))
            else:
                log_vbar = log_weights[-1].data - _np_lse(log_weights[-1].data)
                idx, _ = _discrete_draw(
                    model, params, t, x_idx, n, backend, mix_weights=np.exp(log_vbar)
                )
                x_new = ad.constant(idx[:, None].astype(np.float64))
                log_f = _log_f_matrix(model, t, x_new, x).data
                log_r = _log_r_matrix(model, params, t, x_new, x).data
                num = _np_lse(log_vbar[None, :] + log_f, axis=1)
                den = _np_lse(log_vbar[None, :] + log_r, axis=1)
                logv_np = num + _hmm_log_g(model, idx, ys[t - 1]) - den
            x, x_idx, logv = x_new, idx, ad.constant(logv_np)
        else:
            if t == 1:
                log_vbar = ad.constant(np.zeros(1))
                means, log_stds = mo.proposal_build_many(model, params, 1, None, ys[0])
            else:
                log_vbar = log_weights[-1] - ad.logsumexp(log_weights[-1])
                means, log_stds = mo.proposal_build_many(model, params, t, x, ys[t - 1])
            d = means.data.shape[1]
            eps = backend.normals(t, PROPOSAL, np.arange(n * d)).reshape(n, d)
            if cfg.grad_mode == "unbiased":
                mix = GaussianMixture(log_vbar, means, log_stds)
                us = backend.uniforms(t, ANCESTOR, np.arange(n))
                x_new = ad.stack_rows(
                    [
                        mixture_implicit_rsample(mix, None, tail, u=us[i], eps=eps[i])
                        for i in range(n)
                    ]
                )
            elif t == 1:
                x_new = means + ad.exp(log_stds) * ad.constant(eps)
            else:
                anc = backend.choose_shared(t, ANCESTOR, n, np.exp(log_vbar.data))
                x_new = ad.gather_rows(means, anc) + ad.exp(
                    ad.gather_rows(log_stds, anc)
                ) * ad.constant(eps)

            log_g = mo.emission_logpdf_rows(model, t, x_new, ys[t - 1])
            if t == 1:
                f_means, f_ls = mo.transition_build_many(model, 1)
                logv = (
                    mo.gauss_logpdf_rows(x_new, f_means, f_ls)
                    + log_g
                    - mo.gauss_logpdf_rows(x_new, means, log_stds)
                )
            else:
                log_f = _log_f_matrix(model, t, x_new, x)
                if n == 1:
                    log_r = ad.reshape(mo.gauss_logpdf_rows(x_new, means, log_stds), (-1, 1))
                else:
                    log_r = mo.gauss_logpdf_matrix(x_new, means, log_stds)
                num = ad.logsumexp(log_vbar + log_f, axis=1)
                den = ad.logsumexp(log_vbar + log_r, axis=1)
                logv = num + log_g - den
            x = x_new

        _check_alive(logv, t)
        particles.append(x)
        log_weights.append(logv)
        log_mean_weights.append(ad.logsumexp(logv) - log_n)

    return ParticleRun(
        kind="mpf",
        particles=particles,
        log_weights=log_weights,
        log_mean_weights=log_mean_weights,
        log_evidence=_evidence(log_mean_weights, False),
        cumulative=False,
        params=params,
        ys=ys,
        tail_failures=tail.count,
    )


# ---------------------------------------------------------------------------
# Independent particle filter


def _permutation(backend, t: int, n: int) -> np.ndarray:
    """Fisher-Yates permutation driven by backend choices."""
    perm = np.arange(n)
    c = 0
    for i in range(n - 1, 0, -1):
        j = backend.choose_one(t, PERM, c, np.full(i + 1, 1.0 / (i + 1)))
        c += 1
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def run_ipf(
    model, params, data, n_particles: int, l_perms: int, rng=None, backend=None
) -> ParticleRun:
    """Independent particle filter: proposals may not condition on the past.

    Each step pairs particle i with the L parents k_{1..L,i} read off L
    columnwise-distinct permutations (a random base permutation and its
    cyclic shifts) and accumulates

        u_t^i = sum_l u_{t-1}^{k_li} f(x_t^i | x_{t-1}^{k_li}) g_i / (L r_t(x_t^i))
    """
    if not 1 <= l_perms <= n_particles:
        raise ValueError("l_perms must satisfy 1 <= L <= N")
    backend = _make_backend(rng, backend)
    ys = _ys_of(data)
    n, t_max = n_particles, ys.shape[0]
    discrete = isinstance(model, mo.DiscreteHmm)
    log_n, log_l = math.log(n), math.log(l_perms)

    particles, log_weights, log_mean_weights = [], [], []
    x = None
    x_idx = None

    for t in range(1, t_max + 1):
        if discrete:
            idx, log_r_np = _discrete_draw(model, params, t, None, n, backend, independent=True)
            x_new = ad.constant(idx[:, None].astype(np.float64))
            extra = ad.constant(_hmm_log_g(model, idx, ys[t - 1]) - log_r_np)
        else:
            means, log_stds = mo.proposal_build_many(model, params, t, None, ys[t - 1])
            d = means.data.shape[1]
            eps = backend.normals(t, PROPOSAL, np.arange(n * d)).reshape(n, d)
            x_new = means + ad.exp(log_stds) * ad.constant(eps)
            extra = mo.emission_logpdf_rows(model, t, x_new, ys[t - 1]) - mo.gauss_logpdf_rows(
                x_new, means, log_stds
            )

        if t == 1:
            if discrete:
                logu = ad.constant(_hmm_log_f(model, 1, idx, None)) + extra
            else:
                f_means, f_ls = mo.transition_build_many(model, 1)
                logu = mo.gauss_logpdf_rows(x_new, f_means, f_ls) + extra
        else:
            base = _permutation(backend, t, n)
            terms = []
            for l in range(l_perms):
                k_l = base[(np.arange(n) + l) % n]
                if discrete:
                    log_f_l = ad.constant(_hmm_log_f(model, t, idx, x_idx[k_l]))
                else:
                    f_means, f_ls = mo.transition_build_many(model, t, ad.gather_rows(x, k_l))
                    log_f_l = mo.gauss_logpdf_rows(x_new, f_means, f_ls)
                terms.append(ad.gather_rows(log_weights[-1], k_l) + log_f_l)
            pooled = ad.logsumexp(ad.stack_rows(terms), axis=0) - log_l
            logu = pooled + extra

        _check_alive(logu, t)
        x = x_new
        if discrete:
            x_idx = idx
        particles.append(x)
        log_weights.append(logu)
        log_mean_weights.append(ad.logsumexp(logu) - log_n)

    return ParticleRun(
        kind="ipf",
        particles=particles,
        log_weights=log_weights,
        log_mean_weights=log_mean_weights,
        log_evidence=_evidence(log_mean_weights, True),
        cumulative=True,
        params=params,
        ys=ys,
    )


# ---------------------------------------------------------------------------
# Tensor Monte Carlo


def run_tmc(model, params, data, n_particles: int, rng=None, backend=None) -> ParticleRun:
    """Factorized tensor Monte Carlo: every pairing of consecutive particles.

        z_t^i = sum_j z_{t-1}^j f(x_t^i | x_{t-1}^j) g_i / (N r_t(x_t^i))

    Proposals must be state-independent.  There is no resampling, so a run
    under an active tape is fully reparameterized.
    """
    backend = _make_backend(rng, backend)
    ys = _ys_of(data)
    n, t_max = n_particles, ys.shape[0]
    discrete = isinstance(model, mo.DiscreteHmm)
    log_n = math.log(n)

    particles, log_weights, log_mean_weights = [], [], []
    x = None

    for t in range(1, t_max + 1):
        if discrete:
            idx, log_r_np = _discrete_draw(model, params, t, None, n, backend, independent=True)
            x_new = ad.constant(idx[:, None].astype(np.float64))
            extra = ad.constant(_hmm_log_g(model, idx, ys[t - 1]) - log_r_np)
            log_f1 = ad.constant(_hmm_log_f(model, 1, idx, None)) if t == 1 else None
        else:
            means, log_stds = mo.proposal_build_many(model, params, t, None, ys[t - 1])
            d = means.data.shape[1]
            eps = backend.normals(t, PROPOSAL, np.arange(n * d)).reshape(n, d)
            x_new = means + ad.exp(log_stds) * ad.constant(eps)
            extra = mo.emission_logpdf_rows(model, t, x_new, ys[t - 1]) - mo.gauss_logpdf_rows(
                x_new, means, log_stds
            )
            if t == 1:
                f_means, f_ls = mo.transition_build_many(model, 1)
                log_f1 = mo.gauss_logpdf_rows(x_new, f_means, f_ls)

        if t == 1:
            logz = log_f1 + extra
        else:
            log_f = _log_f_matrix(model, t, x_new, x)
            logz = ad.logsumexp(log_weights[-1] + log_f, axis=1) - log_n + extra

        _check_alive(logz, t)
        x = x_new
        particles.append(x)
        log_weights.append(logz)
        log_mean_weights.append(ad.logsumexp(logz) - log_n)

    return ParticleRun(
        kind="tmc",
        particles=particles,
        log_weights=log_weights,
        log_mean_weights=log_mean_weights,
        log_evidence=_evidence(log_mean_weights, True),
        cumulative=True,
        params=params,
        ys=ys,
    )


# ---------------------------------------------------------------------------
# cross-estimator identity and posterior access


def mpf_tmc_identity_check(model, run: ParticleRun) -> float:
    """Max log-space gap between the MPF weights and TMC under its mixture.

    With proposal q_t(x) = sum_j vbar_{t-1}^j r_t(x | x_{t-1}^j), the TMC
    weight recursion applied to the recorded particles must reproduce
    z_t^i = v_t^i * prod_{tau<t} mean(v_tau).  Returns the largest
    absolute log-space discrepancy over all (t, i).
    """
    if run.kind != "mpf":
        raise ValueError("identity check expects an MPF run")
    n = run.n_particles
    log_n = math.log(n)
    worst = 0.0
    log_z = run.log_weights[0].data
    running = 0.0
    for t in range(2, run.t_max + 1):
        x, xp = run.particles[t - 1], run.particles[t - 2]
        logv_prev = run.log_weights[t - 2].data
        log_vbar = logv_prev - _np_lse(logv_prev)
        log_f = _log_f_matrix(model, t, x, xp).data
        log_r = _log_r_matrix(model, run.params, t, x, xp, run.ys[t - 1]).data
        if isinstance(model, mo.DiscreteHmm):
            log_g = _hmm_log_g(model, x.data[:, 0].astype(np.intp), run.ys[t - 1])
        else:
            log_g = mo.emission_logpdf_rows(model, t, x, run.ys[t - 1]).data
        log_q = _np_lse(log_vbar[None, :] + log_r, axis=1)
        line6 = _np_lse(log_z[None, :] + log_f, axis=1) + log_g - log_n - log_q
        running += float(run.log_mean_weights[t - 2].data)
        identity = run.log_weights[t - 1].data + running
        worst = max(worst, float(np.max(np.abs(line6 - identity))))
        log_z = identity
    return worst


def posterior_draw(run: ParticleRun, rng: RngStream) -> np.ndarray:
    """One atom from the final weights: a trajectory for SMC, x_T otherwise."""
    logw = run.log_weights[-1].data
    if not np.any(logw > -np.inf):
        raise DegeneracyError(run.t_max)
    probs = np.exp(logw - _np_lse(logw))
    i = int(categorical_sample_many(probs, np.asarray([rng.uniform()]))[0])
    if run.kind == "smc":
        if run.trajectories is None:
            raise ValueError("trajectory draw needs keep_trajectories=True")
        return run.trajectories[:, i, :].copy()
    return run.particles[-1].data[i].copy()
