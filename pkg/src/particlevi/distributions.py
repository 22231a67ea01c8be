"""Distribution families: diagonal Gaussians, their mixtures, categoricals.

Everything a proposal or model density needs lives here: log-densities that
are differentiable in parameters and argument, reparameterized sampling, the
closed-form product of two diagonal Gaussians, and the implicit
reparameterization gradient for mixture sampling.

The mixture sampler draws a genuinely categorical component and then a
Gaussian within it; the gradient comes from a custom-VJP node implementing
the distributional transform.  Writing the per-coordinate conditional CDF as

    F_e(x_e | x_{1:e-1}) = sum_j w_j(x_{1:e-1}) * Phi((x_e - mu_je)/sig_je),

with w_j proportional to the mixture weight times the likelihood of the
earlier coordinates under component j, the sample is the solution of
F(x) = u for fixed uniforms, so dx/dtheta solves a lower-triangular system
whose diagonal is the conditional mixture pdf.  The Phi derivatives are
analytic (dPhi/dmu = -pdf, dPhi/dsigma = -z*pdf), never finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import erf as _np_erf

from particlevi import autodiff as ad
from particlevi.autodiff import Var
from particlevi.rng import RngStream

LOG_2PI = math.log(2.0 * math.pi)
_TAIL_PDF_FLOOR = 1e-300


@dataclass
class DiagGaussian:
    """Diagonal Gaussian with differentiable mean and log standard deviation."""

    mean: Var
    log_std: Var

    def __post_init__(self):
        self.mean = ad.constant(self.mean) if not isinstance(self.mean, Var) else self.mean
        if not isinstance(self.log_std, Var):
            self.log_std = ad.constant(self.log_std)


@dataclass
class GaussianMixture:
    """Mixture of diagonal Gaussians with log-space normalized weights.

    Parameters are stored stacked (rows are components) because that is how
    the marginal particle filter produces them; ``from_components`` stacks a
    component list through the tape so gradients still reach each part.
    """

    log_weights: Var  # (K,), logsumexp == 0
    means: Var  # (K, d)
    log_stds: Var  # (K, d)

    def __post_init__(self):
        lw = self.log_weights.data
        total = float(np.logaddexp.reduce(lw))
        if abs(total) > 1e-12:
            raise ValueError(f"mixture log-weights not normalized (logsumexp={total:.3e})")
        if self.means.data.shape != self.log_stds.data.shape:
            raise ValueError("mixture means and log-stds must share a shape")
        if self.means.data.shape[0] != lw.shape[0]:
            raise ValueError("component count mismatch between weights and parameters")

    @classmethod
    def from_components(cls, log_weights: Var, components) -> "GaussianMixture":
        means = ad.stack_rows([c.mean for c in components])
        log_stds = ad.stack_rows([c.log_std for c in components])
        return cls(log_weights, means, log_stds)

    @property
    def n_components(self) -> int:
        return self.log_weights.data.shape[0]

    @property
    def dim(self) -> int:
        return self.means.data.shape[1]


@dataclass
class Categorical:
    """Plain probability vector; sampling is inverse-CDF and carries no gradient."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if np.any(self.probs < 0.0):
            raise ValueError("categorical weights must be nonnegative")
        if abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError("categorical weights must sum to 1")


@dataclass
class TailCounter:
    """Counts implicit-gradient tail failures (conditional pdf underflow)."""

    count: int = 0


def diag_gauss_logpdf(x, g: DiagGaussian) -> Var:
    """Log-density of a diagonal Gaussian, differentiable in x, mu, log-std."""
    x = ad.constant(x) if not isinstance(x, Var) else x
    if x.data.shape != g.mean.data.shape:
        raise ValueError(f"dimension mismatch: x {x.data.shape} vs mean {g.mean.data.shape}")
    z = (x - g.mean) * ad.exp(-g.log_std)
    terms = -0.5 * LOG_2PI - g.log_std - 0.5 * z * z
    return terms.sum()


def diag_gauss_rsample(g: DiagGaussian, rng: RngStream, eps=None) -> Var:
    """Reparameterized draw x = mu + sigma * eps; gradients flow to mu, log-std."""
    d = g.mean.data.shape[0]
    if eps is None:
        eps = rng.normals(d)
    return g.mean + ad.exp(g.log_std) * ad.constant(eps)


def gauss_product_fuse(a: DiagGaussian, b: DiagGaussian):
    """Normalize the product of two diagonal Gaussian densities.

    Returns the fused DiagGaussian and the log-normalizer
    sum_i log N(mu_a_i; mu_b_i, va_i + vb_i), so that pointwise
    logpdf_a(x) + logpdf_b(x) = log-normalizer + logpdf_fused(x).
    """
    va = ad.exp(2.0 * a.log_std)
    vb = ad.exp(2.0 * b.log_std)
    vsum = va + vb
    log_vsum = ad.log(vsum)
    var = va * vb / vsum
    mean = (a.mean * vb + b.mean * va) / vsum
    log_std = a.log_std + b.log_std - 0.5 * log_vsum
    delta = a.mean - b.mean
    log_norm = (-0.5 * LOG_2PI - 0.5 * log_vsum - 0.5 * delta * delta / vsum).sum()
    return DiagGaussian(mean, log_std), log_norm


def categorical_sample(c: Categorical, u: float) -> int:
    """Inverse-CDF index: smallest i whose cumulative weight exceeds u."""
    return int(categorical_sample_many(c.probs, np.asarray([u]))[0])


def categorical_sample_many(probs: np.ndarray, us: np.ndarray) -> np.ndarray:
    """Vectorized inverse-CDF sampling; element k uses uniform us[k]."""
    if not np.any(probs > 0.0):
        raise ValueError("total particle degeneracy: all categorical weights zero")
    cum = np.cumsum(probs)
    idx = np.searchsorted(cum, us, side="right")
    idx = np.minimum(idx, probs.shape[0] - 1)
    # float-tail guard: never land on a zero-weight atom
    while np.any(probs[idx] == 0.0):
        idx = np.where(probs[idx] == 0.0, idx - 1, idx)
    return idx


def mixture_logpdf(x, m: GaussianMixture) -> Var:
    """Log-density of a diagonal-Gaussian mixture at a point."""
    x = ad.constant(x) if not isinstance(x, Var) else x
    if x.data.shape != (m.dim,):
        raise ValueError(f"dimension mismatch: x {x.data.shape} vs mixture dim {m.dim}")
    z = (x - m.means) * ad.exp(-m.log_stds)
    comp = (-0.5 * LOG_2PI - m.log_stds - 0.5 * z * z).sum(axis=1)
    return ad.logsumexp(m.log_weights + comp)


def mixture_cdf_1d(x: float, m: GaussianMixture) -> float:
    """Plain-number mixture CDF for d=1 (test oracle helper)."""
    w = np.exp(m.log_weights.data)
    z = (x - m.means.data[:, 0]) / np.exp(m.log_stds.data[:, 0])
    return float(np.sum(w * 0.5 * (1.0 + _np_erf(z / math.sqrt(2.0)))))


def _implicit_backward(x, logw, means, logstds, tail_counter):
    """Build the custom-VJP rule for a realized mixture sample x."""

    def rule(g):
        k, d = means.shape
        sig = np.exp(logstds)
        z = (x[None, :] - means) / sig
        logphi = -0.5 * LOG_2PI - logstds - 0.5 * z * z
        pdf = np.exp(logphi)
        stdphi = pdf * sig
        big_phi = 0.5 * (1.0 + _np_erf(z / math.sqrt(2.0)))
        prefix = np.zeros((k, d))
        if d > 1:
            prefix[:, 1:] = np.cumsum(logphi, axis=1)[:, : d - 1]
        lmat = logw[:, None] + prefix
        lmat = lmat - lmat.max(axis=0, keepdims=True)
        w_post = np.exp(lmat)
        w_post /= w_post.sum(axis=0, keepdims=True)
        f_vals = (w_post * big_phi).sum(axis=0)
        cond_pdf = (w_post * pdf).sum(axis=0)
        if np.min(cond_pdf) < _TAIL_PDF_FLOOR or not np.all(np.isfinite(cond_pdf)):
            if tail_counter is not None:
                tail_counter.count += 1
            zero = np.zeros
            return zero(logw.shape), zero(means.shape), zero(logstds.shape)
        s = -z / sig  # d logphi / dx
        g_mat = w_post * (big_phi - f_vals[None, :])
        jac = np.tril(g_mat.T @ s, -1)
        np.fill_diagonal(jac, cond_pdf)
        lam = solve_triangular(jac.T, np.asarray(g, dtype=np.float64), lower=False)
        lam_g = lam[None, :] * g_mat
        tail = np.flip(np.cumsum(np.flip(lam_g, axis=1), axis=1), axis=1) - lam_g
        grad_logw = -lam_g.sum(axis=1)
        grad_mu = lam[None, :] * w_post * pdf - tail * z / sig
        grad_logstd = lam[None, :] * w_post * z * stdphi - tail * (z * z - 1.0)
        return grad_logw, grad_mu, grad_logstd

    return rule


def mixture_implicit_rsample(
    m: GaussianMixture,
    rng: RngStream,
    tail_counter: TailCounter | None = None,
    u: float | None = None,
    eps: np.ndarray | None = None,
) -> Var:
    """Exact mixture draw with implicit reparameterization gradients.

    Forward: pick component j by inverse-CDF on the mixture weights, then
    draw x = mu_j + sig_j * eps.  Backward: the distributional-transform
    rule above, flowing gradients into the mixture log-weights and every
    component's mean and log-std.  A conditional pdf underflowing 1e-300 at
    the sample marks an unresolvable tail draw: that node's gradient
    contribution is zeroed and the counter incremented.

    ``u`` and ``eps`` may be supplied to pin the underlying noise (filters
    use this to keep vectorized and per-particle layouts bit-identical).
    """
    if u is None:
        u = rng.uniform()
    j = categorical_sample(Categorical(np.exp(m.log_weights.data)), u)
    if eps is None:
        eps = rng.normals(m.dim)
    x = m.means.data[j] + np.exp(m.log_stds.data[j]) * eps
    rule = _implicit_backward(x, m.log_weights.data, m.means.data, m.log_stds.data, tail_counter)
    return ad.custom_vjp(x, [m.log_weights, m.means, m.log_stds], rule)


def bernoulli_logpmf(y, logits: Var) -> Var:
    """Sum_i [y_i * logit_i - softplus(logit_i)], softplus via logsumexp."""
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("bernoulli observations must be binary")
    logits = ad.constant(logits) if not isinstance(logits, Var) else logits
    if y.shape != logits.data.shape:
        raise ValueError("dimension mismatch between y and logits")
    stacked = ad.stack_rows([logits, ad.constant(np.zeros_like(y))])
    softplus = ad.logsumexp(stacked, axis=0)
    return (ad.constant(y) * logits - softplus).sum()
