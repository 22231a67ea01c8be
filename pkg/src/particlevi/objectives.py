"""Variational objectives over the filter estimators, and their training loop.

Five bounds, one recipe: L = E[log p-hat] where p-hat is an unbiased
evidence estimator, so every kind is a lower bound on log p(y) by Jensen.

    iwvi     SMC with resampling disabled (ancestors i -> i)
    vsmc     SMC with multinomial resampling
    tmc      tensor estimator, state-independent proposals, no resampling
    vmpf-bg  marginal particle filter, reparameterized inside the drawn
             mixture component; the categorical probabilities are detached
    vmpf-ug  marginal particle filter with implicit reparameterization
             through the mixture weights themselves

Gradients are single-draw: one filter run per call, differentiated in
reverse mode.  iwvi and tmc contain no categorical draws, so their
"biased" gradient is exactly the reparameterized gradient.  Training is
Adam ascent on a (learning-rate, iterations) schedule with optional
global-norm clipping; phi (proposal) and, under VEM, theta (model)
parameters are updated jointly in one flat namespace: "phi.mu",
"theta.b_raw", and so on.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

import particlevi.autodiff as ad
from particlevi.autodiff import Var
from particlevi import filters as fl
from particlevi.rng import RngStream

KINDS = ("iwvi", "vsmc", "tmc", "vmpf-bg", "vmpf-ug")


@dataclass
class Objective:
    """One bound: estimator kind, model, proposal parameters, particle count.

    learn_theta turns on VEM: model parameters join the gradient and the
    optimizer state alongside the proposal's.  Only families exposing
    theta()/with_theta() support it (SV, DMM); linear-Gaussian model
    parameters stay fixed by construction.
    """

    kind: str
    model: object
    params: dict
    n_particles: int
    learn_theta: bool = False

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if self.learn_theta and not hasattr(self.model, "with_theta"):
            raise ValueError(
                f"{type(self.model).__name__} has no learnable model parameters; "
                "VEM covers the SV and DMM families"
            )


def _backend(rng) -> fl.RandomBackend:
    return fl.RandomBackend(rng if isinstance(rng, RngStream) else RngStream(int(rng)))


def _run(obj: Objective, model, params, data, rng, grad_mode: str) -> fl.ParticleRun:
    be = _backend(rng)
    if obj.kind == "tmc":
        return fl.run_tmc(model, params, data, obj.n_particles, backend=be)
    cfg = fl.FilterConfig(
        obj.n_particles, grad_mode=grad_mode, resample=(obj.kind == "vsmc")
    )
    if obj.kind in ("iwvi", "vsmc"):
        return fl.run_smc(model, params, data, cfg, backend=be)
    return fl.run_mpf(model, params, data, cfg, backend=be)


def objective_value(obj: Objective, data, rng) -> Var:
    """One draw of log p-hat, differentiable when evaluated under a tape.

    The filter runs in the kind's native gradient mode, so the same call
    serves value estimation (no tape) and training (tape active).
    """
    mode = "unbiased" if obj.kind == "vmpf-ug" else "biased"
    return _run(obj, obj.model, obj.params, data, rng, mode).log_evidence


# ---------------------------------------------------------------------------
# gradients


def _lift(obj: Objective):
    """Leaf copies of every learnable array, prefixed phi. / theta."""
    phi = {k: (ad.leaf(v) if isinstance(v, np.ndarray) else v) for k, v in obj.params.items()}
    leaves = {"phi." + k: v for k, v in phi.items() if isinstance(v, Var)}
    model = obj.model
    if obj.learn_theta:
        theta = {k: ad.leaf(v) for k, v in model.theta().items()}
        model = model.with_theta(theta)
        leaves.update({"theta." + k: v for k, v in theta.items()})
    return model, phi, leaves


def _gradient(obj: Objective, data, rng, mode: str) -> tuple:
    with ad.Tape():
        model, phi, leaves = _lift(obj)
        run = _run(obj, model, phi, data, rng, mode)
        names = sorted(leaves)
        grads = ad.grad(run.log_evidence, [leaves[k] for k in names])
    return float(run.log_evidence.data), dict(zip(names, grads))


def gradient_biased(obj: Objective, data, rng) -> tuple:
    """(value, gradient dict), categorical draws detached.

    Exact for iwvi and tmc, which contain no categorical draw at all.
    """
    if obj.kind == "vmpf-ug":
        raise ValueError("vmpf-ug trains with gradient_unbiased")
    return _gradient(obj, data, rng, "biased")


def gradient_unbiased(obj: Objective, data, rng) -> tuple:
    """(value, gradient dict) with implicit mixture reparameterization."""
    if obj.kind != "vmpf-ug":
        raise ValueError("gradient_unbiased applies to the vmpf-ug kind only")
    return _gradient(obj, data, rng, "unbiased")


def _grad_fn(obj: Objective):
    return gradient_unbiased if obj.kind == "vmpf-ug" else gradient_biased


def _global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


# ---------------------------------------------------------------------------
# parameter packing: the optimizer sees one flat name -> array dict


def pack_params(obj: Objective) -> dict:
    packed = {
        "phi." + k: np.array(v, dtype=np.float64)
        for k, v in obj.params.items()
        if isinstance(v, np.ndarray)
    }
    if obj.learn_theta:
        packed.update(
            {"theta." + k: np.array(v, dtype=np.float64) for k, v in obj.model.theta().items()}
        )
    return packed


def apply_params(obj: Objective, packed: dict) -> Objective:
    """A copy of obj with the packed parameters installed."""
    phi = {k[4:]: v for k, v in packed.items() if k.startswith("phi.")}
    theta = {k[6:]: v for k, v in packed.items() if k.startswith("theta.")}
    model = obj.model.with_theta(theta) if theta else obj.model
    return replace(obj, model=model, params={**obj.params, **phi})


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Bias-corrected Adam moments, lazily shaped to the parameters."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float | None = None  # global-norm threshold, None = off
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One ascent step (bounds are maximized); returns the updated dict.

    Non-finite gradients fail before any moment is touched, naming the
    offending parameter; a clip threshold rescales the whole gradient to
    that global norm first.
    """
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name])):
            raise ValueError(f"non-finite gradient for parameter {name!r}")
    if state.clip is not None:
        norm = _global_norm(grads)
        if norm > state.clip:
            scale = state.clip / norm
            grads = {k: g * scale for k, g in grads.items()}
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    out = dict(params)
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - state.beta1) * g if m is None else state.beta1 * m + (1.0 - state.beta1) * g
        v = (1.0 - state.beta2) * g * g if v is None else state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = params[name] + state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainRecord:
    """Append-only per-iteration log; grad_var is nan unless probed."""

    rows: list = field(default_factory=list)

    FIELDS = ("iter", "objective", "grad_norm", "grad_var", "wall_ms")

    def append(self, it: int, objective: float, grad_norm: float, grad_var: float, wall_ms: float):
        self.rows.append((it, objective, grad_norm, grad_var, wall_ms))

    def column(self, name: str) -> np.ndarray:
        idx = self.FIELDS.index(name)
        return np.asarray([r[idx] for r in self.rows], dtype=np.float64)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.FIELDS)
            for row in self.rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])


_NORM_ABORT = 1e6


def train(
    obj: Objective,
    data,
    schedule,
    rng,
    clip: float | None = None,
    probe_every: int = 0,
    probe_samples: int = 8,
    freeze: tuple = (),
) -> tuple:
    """Adam ascent on the bound; returns (trained Objective, TrainRecord).

    schedule is a list of (learning_rate, iterations) segments; moments
    persist across segments.  One objective draw per iteration.  The run
    aborts with the iteration index if the objective goes non-finite or the
    raw gradient norm exceeds 1e6 (instability is reported, never papered
    over).  Deterministic for a fixed rng seed and schedule.  Parameters
    named in freeze keep their initial values; their gradients are zeroed
    before the update and excluded from the recorded norm.
    """
    if not schedule:
        raise ValueError("schedule must hold at least one (learning-rate, iterations) pair")
    rng = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    grad_fn = _grad_fn(obj)
    packed = pack_params(obj)
    for name in freeze:
        if name not in packed:
            raise ValueError(f"unknown frozen parameter {name!r}")
    current = apply_params(obj, packed)
    state = AdamState(lr=float(schedule[0][0]), clip=clip)
    record = TrainRecord()
    it = 0
    for lr, iters in schedule:
        state.lr = float(lr)
        for _ in range(int(iters)):
            t0 = time.perf_counter()
            value, grads = grad_fn(current, data, rng.split(10, it))
            for name in freeze:
                grads[name] = np.zeros_like(grads[name])
            if not math.isfinite(value):
                raise ValueError(f"non-finite objective at iteration {it}")
            gnorm = _global_norm(grads)
            if gnorm > _NORM_ABORT:
                raise ValueError(f"gradient norm {gnorm:.3e} at iteration {it}; run diverged")
            gvar = math.nan
            if probe_every and it % probe_every == 0:
                gvar = grad_variance_probe(current, data, probe_samples, rng.split(11, it))
            packed = adam_step(state, packed, grads)
            current = apply_params(obj, packed)
            record.append(it, value, gnorm, gvar, (time.perf_counter() - t0) * 1e3)
            it += 1
    return current, record


# ---------------------------------------------------------------------------
# evaluation


def bound_estimate(obj: Objective, data, n_samples: int, rng, workers: int | None = None) -> tuple:
    """(mean, standard error) of log p-hat over n_samples independent runs.

    Runs fan out over threads; sample i always uses rng.split(i), so the
    result is deterministic and worker-count independent.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    rng = rng if isinstance(rng, RngStream) else RngStream(int(rng))

    def one(i: int) -> float:
        return float(objective_value(obj, data, rng.split(i)).data)

    with ThreadPoolExecutor(max_workers=workers) as ex:
        values = np.fromiter(ex.map(one, range(n_samples)), dtype=np.float64, count=n_samples)
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(n_samples))


def grad_variance_probe(obj: Objective, data, n_samples: int, rng, workers: int | None = None) -> float:
    """Per-coordinate gradient variance, averaged over every coordinate.

    Same fan-out and seeding convention as bound_estimate: draw i uses
    rng.split(i).
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    rng = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    grad_fn = _grad_fn(obj)

    def one(i: int) -> dict:
        return grad_fn(obj, data, rng.split(i))[1]

    with ThreadPoolExecutor(max_workers=workers) as ex:
        grads = list(ex.map(one, range(n_samples)))
    names = sorted(grads[0])
    stacked = np.stack([np.concatenate([g[k].ravel() for k in names]) for g in grads])
    return float(stacked.var(axis=0, ddof=1).mean())
