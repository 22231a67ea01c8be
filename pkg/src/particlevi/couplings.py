"""Estimator-coupling pairs and the combinators that assemble filters from them.

An estimator-coupling pair packs a positive estimator R of an unnormalized
density's mass together with an atomic approximation a(x) of the normalized
target, tied by the validity condition E[R * a(x)] = gamma(x).  Four
combinators are enough to build particle filters out of such pairs:

  basic_pair     importance sampling against one unnormalized density
  replicate      run the nu-part in n lanes over a shared omega-part
  extend_target  grow the target by one conditional factor (optionally
                 dropping the old coordinate, which changes the target
                 to the new marginal instead of extending it)
  marginalize    replace R by its conditional expectation over a finite
                 auxiliary, which never increases variance

derive_smc and derive_mpf perform the corresponding folds literally, one
operation per time step.  Randomness routes through the same
(step, purpose, offset) backend seam as the filters module, so a derived
pair executed against the same root stream reproduces the matching filter's
log estimator to float-roundoff precision.  Execution here favors mechanical
transparency over speed (lanes are drawn one by one, marginalization is
quadratic); the filters module is the vectorized path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

import particlevi.autodiff as ad
from particlevi.autodiff import Var
from particlevi import models as mo
from particlevi.distributions import diag_gauss_logpdf
from particlevi.filters import (
    ANCESTOR,
    PROPOSAL,
    RandomBackend,
    _hmm_proposal_rows,
    _np_lse,
    _ys_of,
)
from particlevi.rng import RngStream


def _scalar(x) -> Var:
    return x if isinstance(x, Var) else ad.constant(np.asarray(x, dtype=np.float64))


def _as_backend(source):
    if isinstance(source, RngStream):
        return RandomBackend(source)
    if isinstance(source, (int, np.integer)):
        return RandomBackend(RngStream(int(source)))
    return source


# ---------------------------------------------------------------------------
# domain types


@dataclass
class WeightedAtoms:
    """Finite atomic measure as (value, log-weight) pairs."""

    atoms: list
    normalized: bool = True

    def __post_init__(self):
        if self.normalized and abs(float(_np_lse(self.log_weights()))) > 1e-10:
            raise ValueError("normalized atom weights must logsumexp to 0")

    def log_weights(self) -> np.ndarray:
        return np.asarray([lw for _, lw in self.atoms], dtype=np.float64)

    def probs(self) -> np.ndarray:
        return np.exp(self.log_weights())


@dataclass
class DrawResult:
    """One realization of a pair: internal state, estimator, coupling."""

    omega: dict
    log_r: Var
    coupling: WeightedAtoms

    def __post_init__(self):
        v = float(self.log_r.data)
        if np.isnan(v) or v == np.inf:
            raise ValueError("log-R must be finite or -inf")


@dataclass
class StepProposal:
    """Conditional proposal with draw addressing baked into its closures.

    sample(backend, lane, x_prev) -> value; logpdf(x_prev, value) -> scalar.
    x_prev may be a nested (history, state) tuple; closures unwrap it.
    """

    sample: Callable
    logpdf: Callable


@dataclass
class TargetRatio:
    """The factor log[gamma'(x, x') / gamma(x)] that extends a target by one step.

    Carries the step proposal and the time index used for draw addressing;
    drop_old selects between extending the target and replacing it with the
    new marginal.
    """

    evaluator: Callable
    proposal: StepProposal
    drop_old: bool = False
    t: int = 2


@dataclass
class CouplingPair:
    """A sampler factored as shared omega-part plus per-lane nu-part.

    draw() runs both parts once (lane 0) and is the public sampler; the
    factored form exists so replicate can rerun only the nu-part.
    """

    omega_part: Callable
    nu_part: Callable
    description: str

    def draw(self, source) -> DrawResult:
        backend = _as_backend(source)
        return self.nu_part(backend, self.omega_part(backend), 0)

    @property
    def sampler(self) -> Callable:
        return self.draw


def _atom(value) -> WeightedAtoms:
    return WeightedAtoms([(value, 0.0)])


def _normalized(raw: list) -> WeightedAtoms:
    # the same value object appearing twice is one support point (marginalize
    # hands every branch the same drawn atom); equal values in distinct
    # objects stay distinct, preserving particle multiplicity
    merged: dict = {}
    for value, lw in raw:
        key = id(value)
        if key in merged:
            merged[key] = (value, np.logaddexp(merged[key][1], lw))
        else:
            merged[key] = (value, lw)
    atoms = list(merged.values())
    z = float(_np_lse(np.asarray([lw for _, lw in atoms])))
    if z == -np.inf:
        raise ValueError("every atom weight vanished; coupling has no mass")
    return WeightedAtoms([(v, lw - z) for v, lw in atoms])


# ---------------------------------------------------------------------------
# the four operations


def basic_pair(log_density: Callable, proposal: StepProposal, description: str = "BasicPair") -> CouplingPair:
    """Importance sampling: R = gamma(x) / r(x), coupling = the drawn atom."""

    def nu(backend, omega, lane):
        x = proposal.sample(backend, lane, None)
        log_q = _scalar(proposal.logpdf(None, x))
        if float(log_q.data) == -np.inf:
            raise ValueError("proposal density vanished at its own draw")
        log_r = _scalar(log_density(x)) - log_q
        return DrawResult({"new": x, "prev": None, "lane": lane}, log_r, _atom(x))

    return CouplingPair(lambda backend: None, nu, description)


def replicate(p: CouplingPair, n: int) -> CouplingPair:
    """n lanes of p's nu-part over one shared omega-part.

    R = mean of the lane estimators; the coupling is the union of lane atoms
    reweighted by their estimators.
    """
    if n < 1:
        raise ValueError("replication count must be >= 1")

    def nu(backend, omega, lane):
        if lane != 0:
            raise ValueError("a replicated pair occupies every draw lane; replicate once per step")
        draws = [p.nu_part(backend, omega, i) for i in range(n)]
        log_r = ad.logsumexp(ad.stack_rows([d.log_r for d in draws])) - math.log(n)
        raw = []
        for d in draws:
            for value, lw in d.coupling.atoms:
                raw.append((value, float(d.log_r.data) + lw))
        return DrawResult({"draws": draws, "shared": omega}, log_r, _normalized(raw))

    return CouplingPair(p.omega_part, nu, f"Replicate[{n}]({p.description})")


def extend_target(p: CouplingPair, tr: TargetRatio) -> CouplingPair:
    """Select an atom, extend it through tr's proposal, multiply R by the ratio.

    The whole previous draw becomes the omega-part, so a following replicate
    reruns only the selection and extension.
    """

    def omega_part(backend):
        return p.nu_part(backend, p.omega_part(backend), 0)

    def nu(backend, prev: DrawResult, lane):
        j = backend.choose_one(tr.t, ANCESTOR, lane, prev.coupling.probs())
        old = prev.coupling.atoms[j][0]
        new = tr.proposal.sample(backend, lane, old)
        log_q = _scalar(tr.proposal.logpdf(old, new))
        if float(log_q.data) == -np.inf:
            raise ValueError("proposal density vanished at its own draw")
        ratio = _scalar(tr.evaluator(old, new))
        rv = float(ratio.data)
        if np.isnan(rv) or rv == np.inf:
            raise ValueError("target ratio must be finite or -inf wherever the proposal can land")
        log_r = prev.log_r + ratio - log_q
        value = new if tr.drop_old else (old, new)
        return DrawResult({"prev": prev, "atom": int(j), "new": new, "lane": lane}, log_r, _atom(value))

    name = "ChangeTarget" if tr.drop_old else "ExtendTarget"
    return CouplingPair(omega_part, nu, f"{name}({p.description})")


def marginalize(p: CouplingPair, selector: Callable) -> CouplingPair:
    """Replace R by its conditional expectation over a finite auxiliary.

    selector(draw) must return [(log conditional weight, log-R at that
    branch, coupling at that branch)] covering the auxiliary's conditional
    support given everything else.  Continuous-support auxiliaries are out
    of scope.  The result never has higher variance than the input.
    """

    def nu(backend, omega, lane):
        d0 = p.nu_part(backend, omega, lane)
        branches = selector(d0)
        terms = [_scalar(cw) + _scalar(lr) for cw, lr, _ in branches]
        log_r = ad.logsumexp(ad.stack_rows(terms))
        raw = []
        for (_, _, coupling), term in zip(branches, terms):
            for value, lw in coupling.atoms:
                raw.append((value, float(term.data) + lw))
        return DrawResult(d0.omega, log_r, _normalized(raw))

    return CouplingPair(p.omega_part, nu, f"Marginalize({p.description})")


# ---------------------------------------------------------------------------
# model plumbing for the filter derivations


def _last_state(value):
    while isinstance(value, tuple):
        value = value[1]
    return value


def trajectory_of(value) -> list:
    """Flatten the nested (history, state) pairs grown by extend_target."""
    if isinstance(value, tuple):
        return trajectory_of(value[0]) + [value[1]]
    return [value]


def _hmm_idx(value) -> int:
    data = value.data if isinstance(value, Var) else np.asarray(value)
    return int(data.reshape(-1)[0])


def _state_dim(model) -> int:
    if isinstance(model, (mo.Lgssm, mo.Dmm)):
        return model.dx
    if isinstance(model, mo.StochVol):
        return model.dim
    raise TypeError(f"unsupported model: {type(model).__name__}")


def step_density(model, ys: np.ndarray) -> Callable:
    """log gamma_1(x) = log f(x) + log g(y_1 | x)."""
    y = ys[0]
    if isinstance(model, mo.DiscreteHmm):
        with np.errstate(divide="ignore"):
            log_pi0, log_emis = np.log(model.pi0), np.log(model.emis)

        def dens(x):
            i = _hmm_idx(x)
            return float(log_pi0[i] + log_emis[i, int(y[0])])

        return dens

    def dens(x):
        log_f, log_g = mo.model_logdensities(model, 1, x, None, y)
        return log_f + log_g

    return dens


def step_ratio(model, ys: np.ndarray, t: int) -> Callable:
    """log[gamma_t / gamma_{t-1}] = log f(x_t | x_{t-1}) + log g(y_t | x_t)."""
    y = ys[t - 1]
    if isinstance(model, mo.DiscreteHmm):
        with np.errstate(divide="ignore"):
            log_trans, log_emis = np.log(model.trans), np.log(model.emis)

        def ratio(old, new):
            i = _hmm_idx(new)
            return float(log_trans[_hmm_idx(_last_state(old)), i] + log_emis[i, int(y[0])])

        return ratio

    def ratio(old, new):
        log_f, log_g = mo.model_logdensities(model, t, new, _last_state(old), y)
        return log_f + log_g

    return ratio


def step_proposal(model, params, ys: np.ndarray, t: int) -> StepProposal:
    """Lane-addressed draw from r_t plus its log-density, as the filters draw it."""
    y = ys[t - 1]
    if isinstance(model, mo.DiscreteHmm):

        def row_of(x_prev) -> np.ndarray:
            xp = None if x_prev is None else np.asarray([_hmm_idx(_last_state(x_prev))])
            return _hmm_proposal_rows(model, params, t, xp, independent=False)[0]

        def sample(backend, lane, x_prev):
            k = backend.choose_one(t, PROPOSAL, lane, row_of(x_prev))
            return np.asarray([float(k)])

        def logpdf(x_prev, x):
            with np.errstate(divide="ignore"):
                return float(np.log(row_of(x_prev)[_hmm_idx(x)]))

        return StepProposal(sample, logpdf)

    d = _state_dim(model)

    def build(x_prev):
        xp = None if x_prev is None else _last_state(x_prev)
        return mo.proposal_build(model, params, t, xp, y)

    def sample(backend, lane, x_prev):
        q = build(x_prev)
        eps = backend.normals(t, PROPOSAL, np.arange(lane * d, (lane + 1) * d))
        return q.mean + ad.exp(q.log_std) * ad.constant(eps)

    def logpdf(x_prev, x):
        return diag_gauss_logpdf(x, build(x_prev))

    return StepProposal(sample, logpdf)


def _ancestor_selector(proposal: StepProposal, ratio: Callable) -> Callable:
    """Conditional branches of the drawn ancestor given everything else.

    Reads the per-lane draws recorded by the preceding replicate so the
    conditional weights carry the same gradient paths as the direct filter:
    branch weight proportional to vbar_j * r(x' | x_j), branch estimator
    R_prev * f(x' | x_j) g(y | x') / r(x' | x_j).
    """

    def selector(d0: DrawResult):
        prev = d0.omega["prev"]
        lanes = prev.omega.get("draws")
        if lanes is None or any(len(ld.coupling.atoms) != 1 for ld in lanes):
            raise ValueError("ancestor marginalization expects a replicated parent with single-atom lanes")
        new = d0.omega["new"]
        log_vs = ad.stack_rows([ld.log_r for ld in lanes])
        log_vbar = log_vs - ad.logsumexp(log_vs)
        log_qs = [_scalar(proposal.logpdf(ld.coupling.atoms[0][0], new)) for ld in lanes]
        mix = [
            ad.gather_rows(log_vbar, np.asarray([j])).sum() + log_qs[j]
            for j in range(len(lanes))
        ]
        norm = ad.logsumexp(ad.stack_rows(mix))
        branches = []
        for j, ld in enumerate(lanes):
            old = ld.coupling.atoms[0][0]
            log_r0 = prev.log_r + _scalar(ratio(old, new)) - log_qs[j]
            branches.append((mix[j] - norm, log_r0, _atom(new)))
        return branches

    return selector


# ---------------------------------------------------------------------------
# filter derivations


def derive_smc(model, params, data, n_particles: int) -> CouplingPair:
    """Fold replicate(extend_target(...)) into the sequential filter's estimator."""
    ys = _ys_of(data)
    pair = replicate(
        basic_pair(step_density(model, ys), step_proposal(model, params, ys, 1), "Step1"),
        n_particles,
    )
    for t in range(2, ys.shape[0] + 1):
        tr = TargetRatio(step_ratio(model, ys, t), step_proposal(model, params, ys, t), drop_old=False, t=t)
        pair = replicate(extend_target(pair, tr), n_particles)
    return pair


def derive_mpf(model, params, data, n_particles: int) -> CouplingPair:
    """Like derive_smc, but each step changes target to the newest marginal and
    then integrates the drawn ancestor out of the estimator."""
    ys = _ys_of(data)
    pair = replicate(
        basic_pair(step_density(model, ys), step_proposal(model, params, ys, 1), "Step1"),
        n_particles,
    )
    for t in range(2, ys.shape[0] + 1):
        proposal = step_proposal(model, params, ys, t)
        ratio = step_ratio(model, ys, t)
        tr = TargetRatio(ratio, proposal, drop_old=True, t=t)
        pair = replicate(marginalize(extend_target(pair, tr), _ancestor_selector(proposal, ratio)), n_particles)
    return pair
