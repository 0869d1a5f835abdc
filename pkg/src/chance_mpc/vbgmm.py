"""Variational Bayesian Gaussian mixture over feature vectors.

Conjugate Dirichlet + Normal-Wishart priors, coordinate-ascent updates,
and an evidence lower bound that must climb monotonically; fitting stops
when the bound change falls under the tolerance.  Components whose
concentration stays at the prior are flagged dormant, which is how the
mixture sheds capacity it does not need.

The file format for trained models is a JSON document with every real
printed at 17 significant digits, so a save/load round trip reproduces
the exact float values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.special import digamma, gammaln, logsumexp

_DORMANT_FRACTION = 1e-3
_JITTER = 1e-8


class NumericalError(RuntimeError):
    """Covariance updates lost positive definiteness despite jitter."""


@dataclass(frozen=True)
class VbgmmPrior:
    """Shared prior for all mixture components.

    Attributes:
        alpha0: Dirichlet concentration per component, > 0.
        beta0: mean-precision scaling, > 0.
        nu0: Wishart degrees of freedom, must exceed dim - 1.
        m0: prior mean, shape (D,).
        w0: Wishart scale matrix, SPD, shape (D, D).
        k_init: number of components the fit starts with.
    """

    alpha0: float
    beta0: float
    nu0: float
    m0: NDArray
    w0: NDArray
    k_init: int

    def __post_init__(self):
        m0 = np.asarray(self.m0, dtype=float)
        w0 = np.asarray(self.w0, dtype=float)
        d = m0.shape[0]
        if m0.ndim != 1 or w0.shape != (d, d):
            raise ValueError("m0 must be (D,) and w0 (D, D)")
        if self.alpha0 <= 0 or self.beta0 <= 0:
            raise ValueError("alpha0 and beta0 must be positive")
        if self.nu0 <= d - 1:
            raise ValueError("nu0 must exceed D - 1")
        if self.k_init < 1:
            raise ValueError("need at least one component")
        try:
            np.linalg.cholesky(w0)
        except np.linalg.LinAlgError as exc:
            raise ValueError("w0 must be symmetric positive definite") from exc
        object.__setattr__(self, "m0", m0)
        object.__setattr__(self, "w0", w0)

    @property
    def dim(self) -> int:
        return int(self.m0.shape[0])


@dataclass
class VbgmmPosterior:
    """Fitted variational parameters, one row per component.

    Attributes:
        prior: the prior the fit started from.
        alpha: Dirichlet concentrations, shape (K,).
        beta: mean-precision scalings, shape (K,).
        nu: Wishart degrees of freedom, shape (K,).
        m: component means, shape (K, D).
        w: Wishart scale matrices, shape (K, D, D).
        n_samples: number of training samples.
        elbo_trace: bound value after each iteration.
        converged: whether the bound change fell below tolerance.
    """

    prior: VbgmmPrior
    alpha: NDArray
    beta: NDArray
    nu: NDArray
    m: NDArray
    w: NDArray
    n_samples: int
    elbo_trace: list = field(default_factory=list)
    converged: bool = False

    @property
    def n_components(self) -> int:
        return int(self.alpha.shape[0])

    @property
    def dim(self) -> int:
        return int(self.m.shape[1])

    @property
    def weights(self) -> NDArray:
        return self.alpha / float(np.sum(self.alpha))

    @property
    def dormant(self) -> NDArray:
        """Components whose concentration never left the prior."""
        return (self.alpha - self.prior.alpha0) < _DORMANT_FRACTION * self.n_samples

    @property
    def dominant_count(self) -> int:
        return int(np.sum(~self.dormant))


def _expected_log_det(nu: NDArray, w: NDArray) -> NDArray:
    d = w.shape[-1]
    i = np.arange(1, d + 1)
    _, logdet = np.linalg.slogdet(w)
    return (
        np.sum(digamma(0.5 * (nu[:, None] + 1.0 - i[None, :])), axis=1)
        + d * np.log(2.0)
        + logdet
    )


def responsibilities(post: VbgmmPosterior, data: NDArray) -> NDArray:
    """E-step: per-sample component responsibilities under the posterior."""
    x = np.asarray(data, dtype=float)
    if x.ndim != 2 or x.shape[1] != post.dim:
        raise ValueError("data must be (N, D) matching the posterior")
    log_rho = _log_rho(post, x)
    return np.exp(log_rho - logsumexp(log_rho, axis=1, keepdims=True))


def _log_rho(post: VbgmmPosterior, x: NDArray) -> NDArray:
    d = post.dim
    e_logpi = digamma(post.alpha) - digamma(float(np.sum(post.alpha)))
    e_logdet = _expected_log_det(post.nu, post.w)
    diff = x[:, None, :] - post.m[None, :, :]  # (N, K, D)
    quad = np.einsum("nkd,kde,nke->nk", diff, post.w, diff)
    e_quad = d / post.beta[None, :] + post.nu[None, :] * quad
    return (
        e_logpi[None, :]
        + 0.5 * e_logdet[None, :]
        - 0.5 * d * np.log(2.0 * np.pi)
        - 0.5 * e_quad
    )


def _log_dirichlet_const(alpha: NDArray) -> float:
    return float(gammaln(np.sum(alpha)) - np.sum(gammaln(alpha)))


def _log_wishart_const(w: NDArray, nu: float) -> float:
    d = w.shape[0]
    _, logdet = np.linalg.slogdet(w)
    i = np.arange(1, d + 1)
    return float(
        -0.5 * nu * logdet
        - 0.5 * nu * d * np.log(2.0)
        - 0.25 * d * (d - 1) * np.log(np.pi)
        - np.sum(gammaln(0.5 * (nu + 1.0 - i)))
    )


def _bound(post: VbgmmPosterior, x: NDArray, r: NDArray) -> float:
    """Evidence lower bound with explicit responsibilities."""
    prior = post.prior
    n, d = x.shape
    k = post.n_components
    nk = np.sum(r, axis=0)
    safe = np.maximum(nk, 1e-300)
    xbar = (r.T @ x) / safe[:, None]
    diff = x[:, None, :] - xbar[None, :, :]
    sk = np.einsum("nk,nkd,nke->kde", r, diff, diff) / safe[:, None, None]

    e_logpi = digamma(post.alpha) - digamma(float(np.sum(post.alpha)))
    e_logdet = _expected_log_det(post.nu, post.w)

    dm = xbar - post.m
    quad_xm = np.einsum("kd,kde,ke->k", dm, post.w, dm)
    tr_sw = np.einsum("kde,ked->k", sk, post.w)
    t_data = 0.5 * float(
        np.sum(
            nk
            * (
                e_logdet
                - d / post.beta
                - post.nu * tr_sw
                - post.nu * quad_xm
                - d * np.log(2.0 * np.pi)
            )
        )
    )
    t_assign = float(np.sum(nk * e_logpi))
    t_pi = _log_dirichlet_const(np.full(k, prior.alpha0)) + (prior.alpha0 - 1.0) * float(
        np.sum(e_logpi)
    )
    dmm = post.m - prior.m0
    quad_m0 = np.einsum("kd,kde,ke->k", dmm, post.w, dmm)
    w0_inv = np.linalg.inv(prior.w0)
    tr_w0w = np.einsum("de,ked->k", w0_inv, post.w)
    t_gauss = 0.5 * float(
        np.sum(
            d * np.log(prior.beta0 / (2.0 * np.pi))
            + e_logdet
            - d * prior.beta0 / post.beta
            - prior.beta0 * post.nu * quad_m0
        )
    )
    t_wish = k * _log_wishart_const(prior.w0, prior.nu0) + 0.5 * (
        prior.nu0 - d - 1.0
    ) * float(np.sum(e_logdet)) - 0.5 * float(np.sum(post.nu * tr_w0w))

    with np.errstate(divide="ignore", invalid="ignore"):
        rlogr = np.where(r > 0, r * np.log(np.maximum(r, 1e-300)), 0.0)
    q_assign = float(np.sum(rlogr))
    q_pi = float(np.sum((post.alpha - 1.0) * e_logpi)) + _log_dirichlet_const(post.alpha)
    h_wish = np.array(
        [
            -_log_wishart_const(post.w[j], float(post.nu[j]))
            - 0.5 * (float(post.nu[j]) - d - 1.0) * e_logdet[j]
            + 0.5 * float(post.nu[j]) * d
            for j in range(k)
        ]
    )
    q_gauss_wish = float(
        np.sum(0.5 * e_logdet + 0.5 * d * np.log(post.beta / (2.0 * np.pi)) - 0.5 * d - h_wish)
    )
    return t_data + t_assign + t_pi + t_gauss + t_wish - q_assign - q_pi - q_gauss_wish


def elbo(post: VbgmmPosterior, data: NDArray) -> float:
    """Evidence lower bound of the posterior on the given data."""
    x = np.asarray(data, dtype=float)
    r = responsibilities(post, x)
    return _bound(post, x, r)


def _m_step(prior: VbgmmPrior, x: NDArray, r: NDArray) -> VbgmmPosterior:
    n, d = x.shape
    k = r.shape[1]
    nk = np.sum(r, axis=0)
    safe = np.maximum(nk, 1e-300)
    xbar = (r.T @ x) / safe[:, None]
    diff = x[:, None, :] - xbar[None, :, :]
    sk = np.einsum("nk,nkd,nke->kde", r, diff, diff) / safe[:, None, None]

    alpha = prior.alpha0 + nk
    beta = prior.beta0 + nk
    nu = prior.nu0 + nk
    m = (prior.beta0 * prior.m0[None, :] + nk[:, None] * xbar) / beta[:, None]
    w0_inv = np.linalg.inv(prior.w0)
    dm = xbar - prior.m0[None, :]
    w = np.empty((k, d, d))
    for j in range(k):
        w_inv = (
            w0_inv
            + nk[j] * sk[j]
            + (prior.beta0 * nk[j] / (prior.beta0 + nk[j])) * np.outer(dm[j], dm[j])
        )
        w_inv = 0.5 * (w_inv + w_inv.T)
        try:
            chol = np.linalg.cholesky(w_inv)
        except np.linalg.LinAlgError:
            w_inv = w_inv + _JITTER * np.eye(d)
            try:
                chol = np.linalg.cholesky(w_inv)
            except np.linalg.LinAlgError as exc:
                raise NumericalError(
                    "scale update lost positive definiteness"
                ) from exc
        inv_chol = np.linalg.inv(chol)
        w[j] = inv_chol.T @ inv_chol
    return VbgmmPosterior(
        prior=prior,
        alpha=alpha,
        beta=beta,
        nu=nu,
        m=m,
        w=w,
        n_samples=n,
    )


# init temperature multiple of the mean squared sample-center distance;
# large enough that all components start near-uniform with only a small
# locality tilt toward their centers
_INIT_TAU_SCALE = 10.0


def _farthest_point_init(x: NDArray, k: int, seed: int) -> NDArray:
    """Soft responsibilities around farthest-point centers.

    Centers come from greedy farthest-point selection; responsibilities
    decay with squared distance at a deliberately broad temperature, so
    every component starts as a near-global fit with a small tilt toward
    its own center.  Surplus components then lose the weight competition
    and drain, instead of each keeping a disjoint cell indefinitely.
    """
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    centers = [int(rng.integers(n))]
    d2 = np.sum((x - x[centers[0]]) ** 2, axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(d2))
        centers.append(nxt)
        d2 = np.minimum(d2, np.sum((x - x[nxt]) ** 2, axis=1))
    centers_arr = x[centers]  # (K, D)
    dist = np.sum((x[:, None, :] - centers_arr[None, :, :]) ** 2, axis=2)
    tau2 = max(_INIT_TAU_SCALE * float(np.mean(dist)), 1e-300)
    log_r = -0.5 * dist / tau2
    return np.exp(log_r - logsumexp(log_r, axis=1, keepdims=True))


def fit(
    data: NDArray,
    prior: VbgmmPrior,
    seed: int = 0,
    tol: float = 1e-12,
    max_iter: int = 500,
) -> VbgmmPosterior:
    """Coordinate-ascent fit of the variational mixture.

    Requires more samples than feature dimensions.  The bound is
    evaluated after every E-step; fitting stops when its change drops
    below tol (converged) or on the iteration cap.
    """
    x = np.asarray(data, dtype=float)
    if x.ndim != 2:
        raise ValueError("data must be (N, D)")
    if not np.all(np.isfinite(x)):
        raise ValueError("data must be finite")
    n, d = x.shape
    if n <= d:
        raise ValueError(f"need more than D={d} samples, got {n}")
    if prior.dim != d:
        raise ValueError("prior dimension does not match data")
    k = min(prior.k_init, n)

    r = _farthest_point_init(x, k, seed)
    post = _m_step(prior, x, r)
    trace: list[float] = []
    converged = False
    for _ in range(max_iter):
        r = responsibilities(post, x)
        bound = _bound(post, x, r)
        if trace and not np.isfinite(bound):
            raise NumericalError("bound became non-finite")
        if trace and abs(bound - trace[-1]) < tol:
            trace.append(bound)
            converged = True
            break
        trace.append(bound)
        post = _m_step(prior, x, r)
    post.elbo_trace = trace
    post.converged = converged
    return post


# ---------------------------------------------------------------------------
# Model file round trip


def _emit(obj, indent=0) -> str:
    pad = "  " * indent
    if isinstance(obj, dict):
        items = ",\n".join(
            f'{pad}  "{key}": {_emit(val, indent + 1).lstrip()}'
            for key, val in obj.items()
        )
        return f"{pad}{{\n{items}\n{pad}}}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(np.asarray(obj).tolist()) if isinstance(obj, np.ndarray) else list(obj)
        items = ", ".join(_emit(v, 0) for v in seq)
        return f"{pad}[{items}]"
    if isinstance(obj, bool):
        return f"{pad}{'true' if obj else 'false'}"
    if isinstance(obj, (int, np.integer)):
        return f"{pad}{int(obj)}"
    if isinstance(obj, (float, np.floating)):
        return pad + format(float(obj), ".17g")
    if isinstance(obj, str):
        return pad + json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj)!r}")


def posterior_to_document(post: VbgmmPosterior, extra: dict | None = None) -> str:
    """Self-describing text document; reals carry 17 significant digits."""
    doc = {
        "format": "chance-mpc-vbgmm",
        "version": 1,
        "dim": post.dim,
        "n_components": post.n_components,
        "n_samples": post.n_samples,
        "converged": post.converged,
        "prior": {
            "alpha0": post.prior.alpha0,
            "beta0": post.prior.beta0,
            "nu0": post.prior.nu0,
            "k_init": post.prior.k_init,
            "m0": post.prior.m0,
            "w0": post.prior.w0,
        },
        "components": [
            {
                "alpha": float(post.alpha[j]),
                "beta": float(post.beta[j]),
                "nu": float(post.nu[j]),
                "m": post.m[j],
                "w": post.w[j],
            }
            for j in range(post.n_components)
        ],
        "elbo_trace": [float(v) for v in post.elbo_trace],
    }
    if extra:
        doc["extra"] = extra
    return _emit(doc) + "\n"


def posterior_from_document(text: str) -> tuple[VbgmmPosterior, dict]:
    """Inverse of posterior_to_document; returns (posterior, extra)."""
    doc = json.loads(text)
    if doc.get("format") != "chance-mpc-vbgmm":
        raise ValueError("not a mixture model document")
    pr = doc["prior"]
    prior = VbgmmPrior(
        alpha0=pr["alpha0"],
        beta0=pr["beta0"],
        nu0=pr["nu0"],
        m0=np.array(pr["m0"], dtype=float),
        w0=np.array(pr["w0"], dtype=float),
        k_init=pr["k_init"],
    )
    comps = doc["components"]
    post = VbgmmPosterior(
        prior=prior,
        alpha=np.array([c["alpha"] for c in comps]),
        beta=np.array([c["beta"] for c in comps]),
        nu=np.array([c["nu"] for c in comps]),
        m=np.array([c["m"] for c in comps]),
        w=np.array([c["w"] for c in comps]),
        n_samples=int(doc["n_samples"]),
        elbo_trace=[float(v) for v in doc.get("elbo_trace", [])],
        converged=bool(doc.get("converged", False)),
    )
    return post, doc.get("extra", {})


def save_posterior(path, post: VbgmmPosterior, extra: dict | None = None) -> None:
    with open(path, "w") as fh:
        fh.write(posterior_to_document(post, extra))


def load_posterior(path) -> tuple[VbgmmPosterior, dict]:
    with open(path) as fh:
        return posterior_from_document(fh.read())
