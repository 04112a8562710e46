"""Generative model parameters and closed-form density computations.

The model: binary activations s ~ Bernoulli(pi), continuous amplitudes
z ~ N(mu, Psi), observation y = W (s * z) + Gaussian noise with covariance
Sigma.  Marginalizing z gives, for each binary state s, a Gaussian component
N(y; W_s mu, C_s) with C_s = Sigma + W_s Psi_s W_s^T, so the marginal over y
is a 2^H-component Gaussian mixture indexed by s.

All weights are handled in the log domain; mixtures are normalized with
log-sum-exp.  Quantities tied to a state s are computed on the active
sub-dimensions (s_h = 1) only and embedded back with zeros, which is the
well-defined limit of the masked-covariance formulas.
"""

import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import CapacityError, ConfigError
from .linalg import chol_psd, mvn_logpdf

# Bernoulli probabilities are clamped away from {0, 1} so log-priors stay
# finite after M-step updates.
PI_FLOOR = 1e-6

# Guard for operations that enumerate all 2^H binary states.
H_EXACT_MAX = 20

NOISE_MODES = ("full", "diagonal", "homoscedastic")


def clamp_pi(pi):
    return np.clip(pi, PI_FLOOR, 1.0 - PI_FLOOR)


@dataclass(frozen=True)
class ModelParams:
    """Full parameter set (W, Sigma, pi, mu, Psi) of the generative model."""

    W: np.ndarray          # (D, H) basis functions, one column per latent
    Sigma: np.ndarray      # (D, D) observation noise covariance
    pi: np.ndarray         # (H,) Bernoulli activation probabilities
    mu: np.ndarray         # (H,) slab mean
    Psi: np.ndarray        # (H, H) slab covariance
    noise_mode: str = "full"

    @property
    def D(self):
        return self.W.shape[0]

    @property
    def H(self):
        return self.W.shape[1]

    def validate(self):
        D, H = self.W.shape
        if self.noise_mode not in NOISE_MODES:
            raise ConfigError(f"unknown noise_mode {self.noise_mode!r}")
        if self.Sigma.shape != (D, D):
            raise ConfigError("Sigma shape does not match W")
        if self.pi.shape != (H,) or self.mu.shape != (H,):
            raise ConfigError("pi/mu shape does not match W")
        if self.Psi.shape != (H, H):
            raise ConfigError("Psi shape does not match W")
        if not np.allclose(self.Sigma, self.Sigma.T, rtol=1e-10, atol=1e-12):
            raise ConfigError("Sigma must be symmetric")
        if not np.allclose(self.Psi, self.Psi.T, rtol=1e-10, atol=1e-12):
            raise ConfigError("Psi must be symmetric")
        if np.any(self.pi < PI_FLOOR) or np.any(self.pi > 1.0 - PI_FLOOR):
            raise ConfigError("pi entries must lie in [PI_FLOOR, 1-PI_FLOOR]")
        if self.noise_mode == "homoscedastic":
            if not np.allclose(self.Sigma, self.Sigma[0, 0] * np.eye(D)):
                raise ConfigError("homoscedastic Sigma must be sigma^2 * I")
        elif self.noise_mode == "diagonal":
            if np.any(self.Sigma - np.diag(np.diag(self.Sigma)) != 0.0):
                raise ConfigError("diagonal Sigma must have zero off-diagonal")
        chol_psd(self.Sigma, context="Sigma")
        chol_psd(self.Psi, context="Psi")
        return self

    def replace(self, **kw):
        d = dict(W=self.W, Sigma=self.Sigma, pi=self.pi, mu=self.mu,
                 Psi=self.Psi, noise_mode=self.noise_mode)
        d.update(kw)
        return ModelParams(**d)

    def to_json(self):
        doc = {
            "W": self.W.tolist(),
            "Sigma": self.Sigma.tolist(),
            "pi": self.pi.tolist(),
            "mu": self.mu.tolist(),
            "Psi": self.Psi.tolist(),
            "noise_mode": self.noise_mode,
            "D": self.D,
            "H": self.H,
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        D, H = int(doc["D"]), int(doc["H"])
        params = cls(
            W=np.asarray(doc["W"], dtype=np.float64).reshape(D, H),
            Sigma=np.asarray(doc["Sigma"], dtype=np.float64).reshape(D, D),
            pi=np.asarray(doc["pi"], dtype=np.float64).reshape(H),
            mu=np.asarray(doc["mu"], dtype=np.float64).reshape(H),
            Psi=np.asarray(doc["Psi"], dtype=np.float64).reshape(H, H),
            noise_mode=doc.get("noise_mode", "full"),
        )
        return params.validate()

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())


class BinaryState:
    """A binary latent vector s of length H.

    Canonical ordering is lexicographic on the bit tuple, so enumeration is
    deterministic.  `active` holds the sorted indices of set bits.
    """

    __slots__ = ("bits", "active")

    def __init__(self, bits):
        self.bits = tuple(int(b) for b in bits)
        if any(b not in (0, 1) for b in self.bits):
            raise ConfigError("BinaryState bits must be 0/1")
        self.active = tuple(i for i, b in enumerate(self.bits) if b)

    @property
    def H(self):
        return len(self.bits)

    @property
    def popcount(self):
        return len(self.active)

    @classmethod
    def from_active(cls, active, H):
        bits = [0] * H
        for i in active:
            bits[i] = 1
        return cls(bits)

    @classmethod
    def zero(cls, H):
        return cls((0,) * H)

    @classmethod
    def singleton(cls, h, H):
        return cls.from_active((h,), H)

    def as_array(self):
        return np.asarray(self.bits, dtype=np.float64)

    def __eq__(self, other):
        return isinstance(other, BinaryState) and self.bits == other.bits

    def __lt__(self, other):
        return self.bits < other.bits

    def __hash__(self):
        return hash(self.bits)

    def __repr__(self):
        return "BinaryState(%s)" % "".join(str(b) for b in self.bits)


def all_states(H, *, h_exact_max=H_EXACT_MAX):
    """All 2^H binary states in canonical (lexicographic) order."""
    if H > h_exact_max:
        raise CapacityError(
            f"enumeration of 2^{H} states exceeds guard H <= {h_exact_max}")
    return [BinaryState(bits) for bits in itertools.product((0, 1), repeat=H)]


@dataclass(frozen=True)
class ConditionalGaussian:
    """Posterior of z given (s, y): N(z_active; kappa, Lambda), embedded in
    H dims with zeros on inactive rows/columns, plus the state's log joint
    weight log B(s; pi) + log N(y; W_s mu, C_s)."""

    kappa: np.ndarray      # (H,)
    Lambda: np.ndarray     # (H, H)
    log_weight: float


@dataclass
class Dataset:
    """N observations as rows of Y (N, D)."""

    Y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=np.float64))
        if self.Y.shape[0] < 1:
            raise ConfigError("Dataset needs at least one observation")
        if not np.all(np.isfinite(self.Y)):
            raise ConfigError("Dataset entries must be finite")

    @property
    def N(self):
        return self.Y.shape[0]

    @property
    def D(self):
        return self.Y.shape[1]


def masked_basis(W, s):
    """W with columns zeroed wherever s_h = 0, so W (s*z) = masked_basis @ z."""
    W = np.asarray(W, dtype=np.float64)
    if W.shape[1] != s.H:
        raise ConfigError("basis/state dimension mismatch")
    return W * np.asarray(s.bits, dtype=np.float64)[None, :]


def state_covariance(params, s):
    """Mixture-component covariance C_s = Sigma + W_s Psi W_s^T."""
    Ws = masked_basis(params.W, s)
    C = params.Sigma + Ws @ params.Psi @ Ws.T
    return 0.5 * (C + C.T)


def log_bernoulli(pi, s):
    pi = clamp_pi(np.asarray(pi, dtype=np.float64))
    bits = s.as_array()
    return float(np.sum(bits * np.log(pi) + (1.0 - bits) * np.log1p(-pi)))


def conditional_gaussian(params, s, y):
    """Closed-form posterior of the continuous latents given a binary state.

    Active-subspace computation: Lambda = (W_A^T Sigma^-1 W_A + Psi_AA^-1)^-1
    and kappa = mu_A + Lambda W_A^T Sigma^-1 (y - W_A mu_A), embedded back
    into H dimensions with zeros.
    """
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ConfigError("observation must be finite")
    H = params.H
    A = list(s.active)
    log_prior = log_bernoulli(params.pi, s)
    kappa = np.zeros(H)
    Lam = np.zeros((H, H))
    if not A:
        sig = chol_psd(params.Sigma, context="Sigma")
        lw = log_prior + mvn_logpdf(y, sig)
        return ConditionalGaussian(kappa, Lam, float(lw))

    W_A = params.W[:, A]
    Psi_AA = params.Psi[np.ix_(A, A)]
    mu_A = params.mu[A]
    sig = chol_psd(params.Sigma, context="Sigma", state=s)
    psi = chol_psd(Psi_AA, context="Psi_AA", state=s)
    Sinv_W = sig.solve(W_A)                    # (D, k)
    M = W_A.T @ Sinv_W + psi.inv()             # Lambda^-1 on the active dims
    mfac = chol_psd(M, context="Lambda_inv", state=s)
    Lam_A = mfac.inv()
    r = y - W_A @ mu_A
    v = Sinv_W.T @ r
    kappa_A = mu_A + Lam_A @ v
    # log N(y; W_A mu_A, C_s) via the Woodbury/determinant identities.
    logdet_C = sig.logdet + psi.logdet + mfac.logdet
    quad = r @ sig.solve(r) - v @ Lam_A @ v
    lw = log_prior - 0.5 * (len(y) * np.log(2.0 * np.pi) + logdet_C + quad)

    kappa[A] = kappa_A
    Lam[np.ix_(A, A)] = 0.5 * (Lam_A + Lam_A.T)
    return ConditionalGaussian(kappa, Lam, float(lw))


def log_joint_ys(params, s, y):
    """log p(y, s) = log B(s; pi) + log N(y; W_s mu, C_s)."""
    return conditional_gaussian(params, s, y).log_weight


def log_marginal_likelihood(params, y, *, h_exact_max=H_EXACT_MAX):
    """log p(y) by exhaustive log-sum-exp over all 2^H states."""
    states = all_states(params.H, h_exact_max=h_exact_max)
    lws = np.array([log_joint_ys(params, s, y) for s in states])
    return float(logsumexp(lws))


def binary_posterior(params, y, *, h_exact_max=H_EXACT_MAX):
    """Exact posterior p(s | y) over all 2^H states."""
    states = all_states(params.H, h_exact_max=h_exact_max)
    lws = np.array([log_joint_ys(params, s, y) for s in states])
    probs = np.exp(lws - logsumexp(lws))
    return dict(zip(states, probs))
