"""Evaluation metrics: Amari index, PSNR, truncation KL diagnostics."""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError


@dataclass
class MetricReport:
    """One aggregated metric value."""

    name: str
    value: float
    n_trials: int = 1
    std: float = 0.0

    def as_dict(self):
        return {"name": self.name, "value": self.value,
                "n_trials": self.n_trials, "std": self.std}


def report_from_values(name, values):
    values = np.asarray(values, dtype=np.float64)
    return MetricReport(name=name, value=float(values.mean()),
                        n_trials=int(values.size),
                        std=float(values.std(ddof=1)) if values.size > 1
                        else 0.0)


def write_reports_csv(reports, path):
    with open(path, "w") as fh:
        fh.write("name,value,n_trials,std\n")
        for r in reports:
            fh.write(f"{r.name},{r.value!r},{r.n_trials},{r.std!r}\n")


def write_reports_json(reports, path):
    with open(path, "w") as fh:
        json.dump([r.as_dict() for r in reports], fh, indent=2)


def amari_index(W, W_gen):
    """Permutation- and scale-invariant basis discrepancy.

    With O = W^-1 W_gen, sums each |O| entry normalized by its row max and
    by its column max, scaled by 1/(2H(H-1)), minus 1/(H-1).  Zero exactly
    when O is a scaled permutation.
    """
    W = np.asarray(W, dtype=np.float64)
    W_gen = np.asarray(W_gen, dtype=np.float64)
    if W.shape != W_gen.shape or W.shape[0] != W.shape[1]:
        raise ConfigError("Amari index needs square same-shape matrices")
    H = W.shape[0]
    if H < 2:
        raise ConfigError("Amari index needs H >= 2")
    try:
        O = np.linalg.solve(W, W_gen)
    except np.linalg.LinAlgError:
        # Near-singular recovered basis: fall back to a ridge inverse.
        scale = np.abs(W).max()
        if scale == 0.0:
            raise NumericalError("Amari index of a zero matrix",
                                 context="amari")
        O = np.linalg.lstsq(W + 1e-10 * scale * np.eye(H), W_gen,
                            rcond=None)[0]
    A = np.abs(O)
    row_max = A.max(axis=1)
    col_max = A.max(axis=0)
    if np.any(row_max == 0.0) or np.any(col_max == 0.0):
        raise NumericalError("Amari index undefined: zero row/column in O",
                             context="amari")
    total = (A / row_max[:, None]).sum() + (A / col_max[None, :]).sum()
    return float(total / (2.0 * H * (H - 1)) - 1.0 / (H - 1))


def psnr(clean, test, peak=255.0):
    """Peak signal-to-noise ratio in dB; +inf when the images are equal."""
    clean = np.asarray(clean, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if clean.shape != test.shape:
        raise ConfigError("psnr needs equal image dimensions")
    mse = np.mean((clean - test) ** 2)
    if mse == 0.0:
        return float("inf")
    return float(20.0 * np.log10(peak / np.sqrt(mse)))


def kl_from_q(q):
    """KL divergence of the truncated posterior from the exact one: -log q
    where q is the captured posterior mass."""
    q = float(q)
    if not (0.0 < q <= 1.0):
        raise ConfigError(f"q must be in (0, 1], got {q}")
    return -float(np.log(q))
