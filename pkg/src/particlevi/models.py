"""Model families, their proposals, exact oracles, and synthetic data.

Three continuous state space models (linear Gaussian, stochastic
volatility, deep Markov) plus a discrete HMM used as an enumeration
oracle.  Each family exposes the transition / emission / proposal
log-densities in two granularities: a single-state form used by the
coupling combinators, and row/matrix forms vectorized over particles
used by the filters.  The two are thin wrappers over the same kernels.
"""

from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

import particlevi.autodiff as ad
from particlevi.autodiff import Var
from particlevi.distributions import LOG_2PI, DiagGaussian, gauss_product_fuse
from particlevi.rng import RngStream


def _as_var(x):
    return x if isinstance(x, Var) else ad.constant(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# model families


@dataclass
class Lgssm:
    """x_t = A x_{t-1} + v_t, y_t = C x_t + e_t, with x_1 ~ N(0, I).

    Process and observation noises are unit white (Q = R = I diagonals
    kept explicit so the Kalman oracle stays general).
    """

    a: np.ndarray
    c: np.ndarray
    q_diag: np.ndarray
    r_diag: np.ndarray

    def __post_init__(self):
        if np.any(self.q_diag <= 0) or np.any(self.r_diag <= 0):
            raise ValueError("noise variances must be positive")

    @property
    def dx(self) -> int:
        return self.a.shape[0]

    @property
    def dy(self) -> int:
        return self.c.shape[0]


def lgssm_make(dx: int, dy: int, alpha: float, c_mode: str, rng: RngStream) -> Lgssm:
    """A_ij = alpha^(|i-j|+1); C either the diagonal embedding or dense normal."""
    if dx < 1 or dy < 1:
        raise ValueError("dimensions must be >= 1")
    idx = np.arange(dx)
    a = alpha ** (np.abs(idx[:, None] - idx[None, :]) + 1.0)
    if c_mode == "sparse":
        if dy > dx:
            raise ValueError("sparse C needs dy <= dx")
        c = np.zeros((dy, dx))
        c[np.arange(dy), np.arange(dy)] = 1.0
    elif c_mode == "dense":
        c = rng.split(91).normals(dy * dx).reshape(dy, dx)
    else:
        raise ValueError(f"unknown C mode: {c_mode}")
    return Lgssm(a, c, np.ones(dx), np.ones(dy))


@dataclass
class StochVol:
    """x_t = mu + Phi (x_{t-1} - mu) + v_t, y_t = diag(exp(x_t/2)) B e_t.

    Unconstrained parameterization: Phi = sigmoid(phi_logit), innovation
    std = exp(log_q_std), and B assembled from b_raw with exp on the
    diagonal (strictly-lower entries used only in triangular mode).
    Fields may be numpy arrays or tape Vars; `with_theta` swaps them.
    """

    mu: object
    phi_logit: object
    log_q_std: object
    b_raw: object
    b_mode: str = "diagonal"

    def __post_init__(self):
        if self.b_mode not in ("diagonal", "triangular"):
            raise ValueError(f"unknown B mode: {self.b_mode}")

    @property
    def dim(self) -> int:
        return int(np.asarray(getattr(self.mu, "data", self.mu)).shape[0])

    def theta(self) -> dict:
        return {
            "mu": self.mu,
            "phi_logit": self.phi_logit,
            "log_q_std": self.log_q_std,
            "b_raw": self.b_raw,
        }

    def with_theta(self, theta: dict) -> "StochVol":
        return replace(self, **theta)


def sv_make(d: int, b_mode: str, rng: RngStream) -> StochVol:
    """Synthetic generating parameters for a d-dimensional SV model."""
    mu = rng.split(1).normals(d) * 0.5
    phi_logit = np.full(d, 2.2)  # Phi ~ 0.9, the persistent-volatility regime
    log_q_std = np.full(d, math.log(0.3))
    b_raw = np.zeros((d, d))
    if b_mode == "triangular" and d > 1:
        strict = rng.split(2).normals(d * d).reshape(d, d) * 0.2
        b_raw += np.tril(strict, -1)
    return StochVol(mu, phi_logit, log_q_std, b_raw, b_mode)


def sv_b_matrix(model: StochVol) -> Var:
    """B with positive diagonal; gradient flows only through used entries."""
    b_raw = _as_var(model.b_raw)
    d = b_raw.data.shape[0]
    eye = np.eye(d)
    b = ad.exp(b_raw) * ad.constant(eye)
    if model.b_mode == "triangular":
        strict = np.tril(np.ones((d, d)), -1)
        b = b + b_raw * ad.constant(strict)
    return b


@dataclass
class Dmm:
    """Deep Markov model with shared-hidden two-head MLPs.

    Transition: x_t ~ N(mu(x_{t-1}), diag exp(sig(x_{t-1}))) with x_0 = 0;
    emission: y_t ~ Bernoulli(sigmoid(eta(x_t))).  The network outputs
    parameterize log variance, so log-std = head output / 2.
    """

    dx: int
    dy: int
    dh: int
    params: dict

    def theta(self) -> dict:
        return dict(self.params)

    def with_theta(self, theta: dict) -> "Dmm":
        return Dmm(self.dx, self.dy, self.dh, dict(theta))


def _mlp_init(rng: RngStream, sizes: list, names: list) -> dict:
    out = {}
    for k, (fan_in, fan_out) in enumerate(sizes):
        scale = 1.0 / math.sqrt(fan_in)
        w = (rng.split(k, 0).uniforms(fan_in * fan_out) * 2.0 - 1.0) * scale
        out[names[k] + "_w"] = w.reshape(fan_in, fan_out)
        out[names[k] + "_b"] = np.zeros(fan_out)
    return out


def dmm_make(dx: int, dy: int, dh: int, rng: RngStream) -> Dmm:
    params = {}
    params.update(_mlp_init(rng.split(0), [(dx, dh), (dh, dx), (dh, dx)],
                            ["trans_h", "trans_mu", "trans_sig"]))
    params.update(_mlp_init(rng.split(1), [(dx, dh), (dh, dy)], ["emis_h", "emis_out"]))
    return Dmm(dx, dy, dh, params)


def mlp_two_head(params: dict, prefix: str, x) -> tuple:
    """(mean, log-std) heads over a shared leaky-relu hidden layer; x is (M, in)."""
    h = ad.leaky_relu(_as_var(x) @ _as_var(params[prefix + "_h_w"]) + _as_var(params[prefix + "_h_b"]))
    mean = h @ _as_var(params[prefix + "_mu_w"]) + _as_var(params[prefix + "_mu_b"])
    raw = h @ _as_var(params[prefix + "_sig_w"]) + _as_var(params[prefix + "_sig_b"])
    return mean, raw * 0.5


def mlp_single(params: dict, prefix: str, out_name: str, x) -> Var:
    h = ad.leaky_relu(_as_var(x) @ _as_var(params[prefix + "_w"]) + _as_var(params[prefix + "_b"]))
    return h @ _as_var(params[out_name + "_w"]) + _as_var(params[out_name + "_b"])


@dataclass
class DiscreteHmm:
    """Finite HMM used as an exact enumeration oracle."""

    pi0: np.ndarray
    trans: np.ndarray
    emis: np.ndarray

    def __post_init__(self):
        for name, rows in (("pi0", self.pi0[None, :]), ("trans", self.trans), ("emis", self.emis)):
            if not np.allclose(rows.sum(axis=1), 1.0, atol=1e-10):
                raise ValueError(f"{name} rows must sum to 1")

    @property
    def n_states(self) -> int:
        return self.pi0.shape[0]


def hmm_reference() -> DiscreteHmm:
    """The 2-state reference instance; p(y=(0,0)) = 0.3525 by hand recursion."""
    return DiscreteHmm(
        pi0=np.asarray([0.5, 0.5]),
        trans=np.asarray([[0.9, 0.1], [0.1, 0.9]]),
        emis=np.asarray([[0.8, 0.2], [0.3, 0.7]]),
    )


# ---------------------------------------------------------------------------
# exact oracles


def kalman_filter(m: Lgssm, ys: np.ndarray):
    """Predict/update recursion; returns (loglik, filtered means, filtered covs)."""
    ys = np.asarray(ys, dtype=np.float64)
    t_max, dx = ys.shape[0], m.dx
    q, r = np.diag(m.q_diag), np.diag(m.r_diag)
    mean = np.zeros(dx)
    cov = np.eye(dx)
    loglik = 0.0
    means = np.zeros((t_max, dx))
    covs = np.zeros((t_max, dx, dx))
    for t in range(t_max):
        if t > 0:
            mean = m.a @ mean
            cov = m.a @ cov @ m.a.T + q
        innov_cov = m.c @ cov @ m.c.T + r
        try:
            factor = cho_factor(innov_cov, lower=True)
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"innovation covariance not positive definite at t={t + 1}") from exc
        resid = ys[t] - m.c @ mean
        solved = cho_solve(factor, resid)
        logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
        loglik += -0.5 * (m.dy * LOG_2PI + logdet + resid @ solved)
        gain = cov @ m.c.T @ cho_solve(factor, np.eye(m.dy))
        mean = mean + gain @ resid
        shrink = np.eye(dx) - gain @ m.c
        cov = shrink @ cov @ shrink.T + gain @ r @ gain.T  # Joseph form
        means[t], covs[t] = mean, cov
    return float(loglik), means, covs


def kalman_loglik(m: Lgssm, ys: np.ndarray) -> float:
    return kalman_filter(m, ys)[0]


def hmm_forward(h: DiscreteHmm, symbols: np.ndarray) -> float:
    """Exact log p(y) by the forward algorithm in log space."""
    symbols = np.asarray(symbols, dtype=np.intp)
    with np.errstate(divide="ignore"):
        log_pi = np.log(h.pi0)
        log_t = np.log(h.trans)
        log_e = np.log(h.emis)
    alpha = log_pi + log_e[:, symbols[0]]
    for sym in symbols[1:]:
        alpha = _np_logsumexp_cols(alpha[:, None] + log_t) + log_e[:, sym]
    return float(_np_logsumexp_cols(alpha[:, None])[0])


def _np_logsumexp_cols(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=0)
    safe = np.where(np.isfinite(m), m, 0.0)
    return safe + np.log(np.exp(a - safe).sum(axis=0))


# ---------------------------------------------------------------------------
# density kernels (vectorized over particles)


def gauss_logpdf_rows(x, means, log_stds) -> Var:
    """Row-aligned diagonal Gaussian log-densities: (N, d) against (N|1, d) -> (N,)."""
    x, means, log_stds = _as_var(x), _as_var(means), _as_var(log_stds)
    z = (x - means) * ad.exp(-log_stds)
    return (-0.5 * LOG_2PI - log_stds - 0.5 * z * z).sum(axis=1)


def gauss_logpdf_matrix(x, means, log_stds) -> Var:
    """All-pairs diagonal Gaussian log-densities: (N, d) against (M, d) -> (N, M).

    Expanded quadratic form so the N x M work is three matmuls.
    """
    x, means, log_stds = _as_var(x), _as_var(means), _as_var(log_stds)
    inv_var = ad.exp(-2.0 * log_stds)
    cross = x @ ad.transpose(means * inv_var)
    sq = (x * x) @ ad.transpose(inv_var)
    msq = (means * means * inv_var).sum(axis=1)
    const = (-0.5 * LOG_2PI - log_stds).sum(axis=1)
    return const - 0.5 * (sq - 2.0 * cross + msq)


def trisolve_rows(b: Var, u: Var) -> Var:
    """Rows of u through B^{-1} for lower-triangular B: (B^{-1} u_i)_i."""
    b, u = _as_var(b), _as_var(u)
    b_data, u_data = b.data, u.data
    z = solve_triangular(b_data, u_data.T, lower=True).T

    def rule(g):
        gt = solve_triangular(b_data.T, np.asarray(g).T, lower=False)
        grad_b = -np.tril(gt @ z)
        return grad_b, gt.T

    return ad.custom_vjp(z, [b, u], rule)


# ---------------------------------------------------------------------------
# transition / emission / proposal, per family


def transition_build_many(model, t: int, x_prev=None) -> tuple:
    """Mean and log-std rows of f(. | x_prev_j) for each previous particle.

    t is 1-based; t=1 ignores x_prev and returns a single row (the prior).
    """
    if isinstance(model, Lgssm):
        if t == 1:
            return ad.constant(np.zeros((1, model.dx))), ad.constant(np.zeros((1, model.dx)))
        x_prev = _as_var(x_prev)
        means = x_prev @ ad.constant(model.a.T)
        log_stds = 0.5 * np.log(np.tile(model.q_diag, (x_prev.data.shape[0], 1)))
        return means, ad.constant(log_stds)
    if isinstance(model, StochVol):
        mu, ls = _as_var(model.mu), _as_var(model.log_q_std)
        if t == 1:
            return ad.reshape(mu, (1, model.dim)), ad.reshape(ls, (1, model.dim))
        x_prev = _as_var(x_prev)
        n = x_prev.data.shape[0]
        phi = ad.sigmoid(_as_var(model.phi_logit))
        means = mu + phi * (x_prev - mu)
        return means, ad.reshape(ls, (1, model.dim)) * ad.constant(np.ones((n, 1)))
    if isinstance(model, Dmm):
        if t == 1:
            x_prev = ad.constant(np.zeros((1, model.dx)))
        return mlp_two_head(model.params, "trans", _as_var(x_prev))
    raise TypeError(f"unsupported model: {type(model).__name__}")


def emission_logpdf_rows(model, t: int, x, y_t) -> Var:
    """log g(y_t | x_i) for each particle row of x."""
    x = _as_var(x)
    y_t = np.asarray(y_t, dtype=np.float64)
    if isinstance(model, Lgssm):
        resid = ad.constant(y_t) - x @ ad.constant(model.c.T)
        log_r = np.log(model.r_diag)
        return (-0.5 * LOG_2PI - 0.5 * log_r - 0.5 * resid * resid / ad.constant(model.r_diag)).sum(axis=1)
    if isinstance(model, StochVol):
        b = sv_b_matrix(model)
        u = ad.constant(y_t) * ad.exp(-0.5 * x)
        z = trisolve_rows(b, u)
        log_det_b = (_as_var(model.b_raw) * ad.constant(np.eye(model.dim))).sum()
        half_trace = 0.5 * x.sum(axis=1)
        return -0.5 * model.dim * LOG_2PI - log_det_b - half_trace - 0.5 * (z * z).sum(axis=1)
    if isinstance(model, Dmm):
        logits = mlp_single(model.params, "emis_h", "emis_out", x)
        zeros = ad.constant(np.zeros(logits.data.shape))
        softplus = ad.logsumexp(ad.stack_rows([logits, zeros]), axis=0)
        return (ad.constant(y_t) * logits - softplus).sum(axis=1)
    raise TypeError(f"unsupported model: {type(model).__name__}")


def proposal_build_many(model, params: dict, t: int, x_prev=None, y_t=None) -> tuple:
    """Proposal mean and log-std rows r_t(. | x_prev_j); single row at t=1.

    LGSSM proposals are the free-form Gaussians of the experiments; SV and
    DMM proposals fuse the transition density with a learned Gaussian
    factor, which keeps every family inside the diagonal-Gaussian class.
    """
    if isinstance(model, Lgssm):
        mu_t = ad.gather_rows(_as_var(params["mu"]), np.asarray([t - 1]))
        ls_t = ad.gather_rows(_as_var(params["log_sigma"]), np.asarray([t - 1]))
        if t == 1 or x_prev is None:
            # x_prev=None asks for the state-independent form (beta unused)
            return mu_t, ls_t
        beta_t = ad.gather_rows(_as_var(params["beta"]), np.asarray([t - 1]))
        x_prev = _as_var(x_prev)
        means = mu_t + beta_t * (x_prev @ ad.constant(model.a.T))
        ones = ad.constant(np.ones((x_prev.data.shape[0], 1)))
        return means, ls_t * ones
    if t > 1 and x_prev is None:
        raise ValueError(
            f"{type(model).__name__} proposals condition on the previous state; "
            "no state-independent form exists"
        )
    if isinstance(model, StochVol):
        f_mean, f_ls = transition_build_many(model, t, x_prev)
        mu_t = ad.gather_rows(_as_var(params["mu"]), np.asarray([t - 1]))
        ls_t = ad.gather_rows(_as_var(params["log_sigma"]), np.asarray([t - 1]))
        fused, _ = gauss_product_fuse(DiagGaussian(f_mean, f_ls), DiagGaussian(mu_t, ls_t))
        return fused.mean, fused.log_std
    if isinstance(model, Dmm):
        if t == 1:
            x_prev = np.zeros((1, model.dx))
        x_mean, x_ls = mlp_two_head(params, "x", _as_var(x_prev))
        y_mean, y_ls = mlp_two_head(params, "y", np.asarray(y_t, dtype=np.float64)[None, :])
        fused, _ = gauss_product_fuse(DiagGaussian(x_mean, x_ls), DiagGaussian(y_mean, y_ls))
        return fused.mean, fused.log_std
    raise TypeError(f"unsupported model: {type(model).__name__}")


def proposal_build(model, params: dict, t: int, x_prev=None, y_t=None) -> DiagGaussian:
    """Single-state proposal r_t(. | x_prev) as a DiagGaussian."""
    if x_prev is not None:
        x_prev = ad.reshape(_as_var(x_prev), (1, -1))
    means, log_stds = proposal_build_many(model, params, t, x_prev, y_t)
    d = means.data.shape[1]
    return DiagGaussian(ad.reshape(means, (d,)), ad.reshape(log_stds, (d,)))


def model_logdensities(model, t: int, x_t, x_prev=None, y_t=None) -> tuple:
    """(log f, log g) at a single state; t=1 omits x_prev."""
    x_row = ad.reshape(_as_var(x_t), (1, -1))
    if x_prev is not None:
        x_prev = ad.reshape(_as_var(x_prev), (1, -1))
    f_mean, f_ls = transition_build_many(model, t, x_prev)
    log_f = gauss_logpdf_rows(x_row, f_mean, f_ls).sum()
    log_g = emission_logpdf_rows(model, t, x_row, y_t).sum()
    return log_f, log_g


def proposal_init(model, t_max: int, rng: RngStream | None = None) -> dict:
    """Default proposal parameters phi."""
    if isinstance(model, Lgssm):
        return {
            "mu": np.zeros((t_max, model.dx)),
            "beta": np.ones((t_max, model.dx)),
            "log_sigma": np.zeros((t_max, model.dx)),
        }
    if isinstance(model, StochVol):
        return {"mu": np.zeros((t_max, model.dim)), "log_sigma": np.zeros((t_max, model.dim))}
    if isinstance(model, Dmm):
        rng = rng if rng is not None else RngStream(0)
        params = {}
        params.update(_mlp_init(rng.split(2), [(model.dx, model.dh), (model.dh, model.dx), (model.dh, model.dx)],
                                ["x_h", "x_mu", "x_sig"]))
        params.update(_mlp_init(rng.split(3), [(model.dy, model.dh), (model.dh, model.dx), (model.dh, model.dx)],
                                ["y_h", "y_mu", "y_sig"]))
        return params
    raise TypeError(f"unsupported model: {type(model).__name__}")


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class Dataset:
    ys: np.ndarray
    kind: str
    meta: dict

    @property
    def t_max(self) -> int:
        return self.ys.shape[0]


def generate(model, t_max: int, rng: RngStream) -> Dataset:
    """Ancestral sampling of y_{1:T}; deterministic in the stream."""
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    if isinstance(model, DiscreteHmm):
        symbols = np.zeros(t_max, dtype=np.intp)
        state = 0
        for t in range(t_max):
            u_state, u_sym = rng.split(t, 0).uniform(), rng.split(t, 1).uniform()
            probs = model.pi0 if t == 0 else model.trans[state]
            state = int(np.searchsorted(np.cumsum(probs), u_state, side="right"))
            symbols[t] = int(np.searchsorted(np.cumsum(model.emis[state]), u_sym, side="right"))
        meta = {"kind": "hmm", "dy": 1, "t_max": t_max}
        return Dataset(symbols[:, None].astype(np.float64), "hmm", meta)
    if isinstance(model, Lgssm):
        ys = np.zeros((t_max, model.dy))
        x = rng.split(0, 0).normals(model.dx)
        for t in range(t_max):
            if t > 0:
                x = model.a @ x + np.sqrt(model.q_diag) * rng.split(t, 0).normals(model.dx)
            ys[t] = model.c @ x + np.sqrt(model.r_diag) * rng.split(t, 1).normals(model.dy)
        meta = {"kind": "lgssm", "dx": model.dx, "dy": model.dy, "t_max": t_max}
        return Dataset(ys, "lgssm", meta)
    if isinstance(model, StochVol):
        d = model.dim
        mu = np.asarray(getattr(model.mu, "data", model.mu))
        phi = 1.0 / (1.0 + np.exp(-np.asarray(getattr(model.phi_logit, "data", model.phi_logit))))
        q_std = np.exp(np.asarray(getattr(model.log_q_std, "data", model.log_q_std)))
        b = sv_b_matrix(model).data
        ys = np.zeros((t_max, d))
        x = mu + q_std * rng.split(0, 0).normals(d)
        for t in range(t_max):
            if t > 0:
                x = mu + phi * (x - mu) + q_std * rng.split(t, 0).normals(d)
            ys[t] = np.exp(x / 2.0) * (b @ rng.split(t, 1).normals(d))
        meta = {"kind": "sv", "dy": d, "t_max": t_max, "b_mode": model.b_mode}
        return Dataset(ys, "sv", meta)
    if isinstance(model, Dmm):
        ys = np.zeros((t_max, model.dy))
        x = np.zeros((1, model.dx))
        for t in range(t_max):
            mean, log_std = mlp_two_head(model.params, "trans", x)
            x = mean.data + np.exp(log_std.data) * rng.split(t, 0).normals(model.dx)
            logits = mlp_single(model.params, "emis_h", "emis_out", x).data[0]
            probs = 1.0 / (1.0 + np.exp(-logits))
            ys[t] = (rng.split(t, 1).uniforms(model.dy) < probs).astype(np.float64)
        meta = {"kind": "dmm", "dx": model.dx, "dy": model.dy, "dh": model.dh, "t_max": t_max}
        return Dataset(ys, "dmm", meta)
    raise TypeError(f"unsupported model: {type(model).__name__}")


def save_dataset(ds: Dataset, path: str) -> None:
    """CSV with header t,y1..y{dy} plus a key-value metadata sidecar."""
    dy = ds.ys.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"y{k + 1}" for k in range(dy)])
        for t in range(ds.ys.shape[0]):
            writer.writerow([t + 1] + [f"{v:.17g}" for v in ds.ys[t]])
    cfg = configparser.ConfigParser()
    cfg["dataset"] = {k: str(v) for k, v in ds.meta.items()}
    with open(path + ".meta", "w") as fh:
        cfg.write(fh)


def load_dataset(path: str) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    ys = np.asarray([[float(v) for v in row[1:]] for row in rows[1:]])
    cfg = configparser.ConfigParser()
    cfg.read(path + ".meta")
    meta = dict(cfg["dataset"]) if cfg.has_section("dataset") else {}
    return Dataset(ys, meta.get("kind", "unknown"), meta)
