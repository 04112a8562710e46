"""Seeded synthetic data generators and dataset file IO.

All generators are pure functions of their arguments plus a seed
(np.random.default_rng semantics), and stamp the produced Dataset's meta
dict with enough provenance to regenerate it.
"""

import csv
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, MissingInputError
from .model import Dataset, ModelParams

GENERATOR_KINDS = ("spike_slab", "bars", "laplace_sc", "cauchy_sc")

_BIN_MAGIC = b"SSDS"


@dataclass(frozen=True)
class GeneratorSpec:
    """Provenance record for a generated dataset."""

    kind: str
    H: int
    D: int
    N: int
    noise_sigma: float = 0.0
    ortho_perturb_sigma: float = 0.0
    seed: int = 0

    def validate(self):
        if self.kind not in GENERATOR_KINDS:
            raise ConfigError(f"unknown generator kind {self.kind!r}")
        if min(self.H, self.D, self.N) <= 0:
            raise ConfigError("generator dimensions must be positive")
        if self.noise_sigma < 0.0:
            raise ConfigError("noise_sigma must be >= 0")
        return self

    def as_meta(self):
        return {"generator": asdict(self)}


def sample_spike_slab(params, N, seed):
    """Draw N observations from the generative model.

    Returns (Dataset, latents) where latents carries the ground-truth
    binary activations and slab amplitudes for diagnostics.
    """
    rng = np.random.default_rng(seed)
    D, H = params.D, params.H
    S = (rng.random((N, H)) < params.pi[None, :]).astype(np.float64)
    Lz = np.linalg.cholesky(params.Psi)
    Z = params.mu[None, :] + rng.standard_normal((N, H)) @ Lz.T
    Ln = np.linalg.cholesky(params.Sigma)
    noise = rng.standard_normal((N, D)) @ Ln.T
    Y = (S * Z) @ params.W.T + noise
    data = Dataset(Y, meta={"kind": "spike_slab", "seed": seed, "N": N})
    return data, {"s": S, "z": Z}


def bars_basis(H, *, magnitude=10.0, rng=None):
    """Horizontal/vertical bar dictionary on a (H/2)x(H/2) pixel grid.

    Column h < H/2 is a horizontal bar in row h; column H/2 + h is a
    vertical bar in column h.  Each bar carries a random sign.
    """
    if H % 2:
        raise ConfigError("bars need an even number of latents")
    D2 = H // 2
    W = np.zeros((D2 * D2, H))
    signs = (np.ones(H) if rng is None
             else np.where(rng.random(H) < 0.5, -1.0, 1.0))
    for h in range(D2):
        img = np.zeros((D2, D2))
        img[h, :] = signs[h] * magnitude
        W[:, h] = img.ravel()
        img = np.zeros((D2, D2))
        img[:, h] = signs[D2 + h] * magnitude
        W[:, D2 + h] = img.ravel()
    return W


def bars_dataset(H, N, seed, *, noise_var=2.0, magnitude=10.0,
                 mu_var=5.0):
    """Bar-superposition control data: on average two active bars per
    point, homoscedastic noise, unit slab covariance, Gaussian slab mean."""
    if H % 2:
        raise ConfigError("bars need an even number of latents")
    rng = np.random.default_rng(seed)
    D2 = H // 2
    D = D2 * D2
    W = bars_basis(H, magnitude=magnitude, rng=rng)
    gt = ModelParams(
        W=W,
        Sigma=noise_var * np.eye(D),
        pi=np.full(H, 2.0 / H),
        mu=np.sqrt(mu_var) * rng.standard_normal(H),
        Psi=np.eye(H),
        noise_mode="homoscedastic",
    )
    data, latents = sample_spike_slab(gt, N, rng)
    data.meta = GeneratorSpec("bars", H, D, N, np.sqrt(noise_var),
                              0.0, seed if isinstance(seed, int) else -1
                              ).as_meta()
    data.meta["latents_mean_active"] = float(latents["s"].sum(axis=1).mean())
    return data, gt


def sample_sparse_coding(prior, W_gen, noise_sigma, N, seed):
    """Heavy-tailed sparse-coding data: latents i.i.d. unit-scale Laplace
    or Cauchy, mixed by W_gen, plus isotropic Gaussian noise."""
    if noise_sigma < 0.0:
        raise ConfigError("noise_sigma must be >= 0")
    W_gen = np.asarray(W_gen, dtype=np.float64)
    D, H = W_gen.shape
    rng = np.random.default_rng(seed)
    if prior == "laplace":
        Z = rng.laplace(0.0, 1.0, size=(N, H))
    elif prior == "cauchy":
        Z = rng.standard_cauchy(size=(N, H))
    else:
        raise ConfigError(f"unknown sparse-coding prior {prior!r}")
    Y = Z @ W_gen.T
    if noise_sigma > 0.0:
        Y = Y + noise_sigma * rng.standard_normal((N, D))
    kind = "laplace_sc" if prior == "laplace" else "cauchy_sc"
    data = Dataset(Y, meta=GeneratorSpec(kind, H, D, N, noise_sigma,
                                         0.0, seed if isinstance(seed, int)
                                         else -1).as_meta())
    data.meta["latents"] = None
    return data


def perturbed_orthogonal_basis(H, D, perturb_sigma, seed, *, scale=1.0):
    """Random orthonormal columns (QR of a Gaussian matrix, signs fixed)
    scaled by `scale`, plus i.i.d. N(0, perturb_sigma^2) entries."""
    if H > D:
        raise ConfigError("need H <= D for orthogonal columns")
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((D, H))
    Q, R = np.linalg.qr(A)
    Q = Q * np.sign(np.where(np.diag(R) == 0.0, 1.0, np.diag(R)))[None, :]
    W = scale * Q
    if perturb_sigma > 0.0:
        W = W + perturb_sigma * rng.standard_normal((D, H))
    return W


def save_dataset_csv(data, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in data.Y:
            w.writerow([repr(float(v)) for v in row])


def load_dataset_csv(path):
    if not os.path.exists(path):
        raise MissingInputError(f"dataset file not found: {path}")
    Y = np.loadtxt(path, delimiter=",", ndmin=2)
    return Dataset(Y, meta={"source": path})


def save_dataset_bin(data, path):
    """Compact binary: magic, uint32 D, uint32 N, little-endian float64
    row-major."""
    with open(path, "wb") as fh:
        fh.write(_BIN_MAGIC)
        fh.write(struct.pack("<II", data.D, data.N))
        fh.write(np.ascontiguousarray(data.Y, dtype="<f8").tobytes())


def load_dataset_bin(path):
    if not os.path.exists(path):
        raise MissingInputError(f"dataset file not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _BIN_MAGIC:
            raise ConfigError(f"bad dataset magic in {path}")
        D, N = struct.unpack("<II", fh.read(8))
        buf = fh.read(8 * D * N)
        if len(buf) != 8 * D * N:
            raise ConfigError(f"truncated dataset file {path}")
        Y = np.frombuffer(buf, dtype="<f8").reshape(N, D).copy()
    return Dataset(Y, meta={"source": path})


def load_sources_csv(path):
    """Benchmark source signals as a CSV matrix (one source per row)."""
    if not os.path.exists(path):
        raise MissingInputError(f"source file not found: {path}")
    S = np.loadtxt(path, delimiter=",", ndmin=2)
    return S


def mix_sources(sources, n_points, seed, *, offset=0, noise_sigma=0.0,
                perturb_sigma=0.0):
    """Source-separation input: take n_points consecutive samples from each
    source starting at `offset`, mix them with a random orthogonal basis
    (optionally perturbed), and add Gaussian noise.

    Returns (Dataset, W_mix)."""
    S = np.asarray(sources, dtype=np.float64)
    H, T = S.shape
    if offset < 0 or offset + n_points > T:
        raise ConfigError(
            f"requested window [{offset}, {offset + n_points}) exceeds "
            f"source length {T}")
    rng = np.random.default_rng(seed)
    Z = S[:, offset:offset + n_points].T          # (N, H)
    W = perturbed_orthogonal_basis(H, H, perturb_sigma, rng)
    Y = Z @ W.T
    if noise_sigma > 0.0:
        Y = Y + noise_sigma * rng.standard_normal(Y.shape)
    return Dataset(Y, meta={"kind": "mixed_sources", "offset": offset}), W
