"""Patch-based image denoising.

Pipeline: slice the noisy image into all shift-1 overlapping p x p patches,
learn the model on those patches with truncated EM (homoscedastic noise,
no mean subtraction), replace each patch by its posterior-mean
reconstruction W <s*z>, and reassemble by uniform averaging of the
overlapping reconstructions.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MissingInputError
from .exact_em import standard_init
from .model import Dataset
from .truncated_em import run_truncated_em, truncated_estep


@dataclass
class GrayImage:
    """Grayscale image, float pixels in [0, 255]."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.atleast_2d(np.asarray(self.pixels,
                                               dtype=np.float64))
        if not np.all(np.isfinite(self.pixels)):
            raise ConfigError("image pixels must be finite")

    @property
    def R(self):
        return self.pixels.shape[0]

    @property
    def C(self):
        return self.pixels.shape[1]


@dataclass
class PatchGrid:
    """Flattened overlapping patches plus their top-left anchors."""

    patches: Dataset
    positions: list = field(default_factory=list)
    p: int = 8


def extract_patches(img, p=8):
    """All shift-1 p x p patches in row-major anchor order, each flattened
    row-major; no mean subtraction."""
    R, C = img.R, img.C
    if p > min(R, C):
        raise ConfigError(f"patch side {p} exceeds image {R}x{C}")
    # as_strided-free: sliding_window_view keeps this simple and exact.
    win = np.lib.stride_tricks.sliding_window_view(img.pixels, (p, p))
    n_r, n_c = win.shape[0], win.shape[1]
    Y = win.reshape(n_r * n_c, p * p).copy()
    positions = [(r, c) for r in range(n_r) for c in range(n_c)]
    return PatchGrid(patches=Dataset(Y, meta={"p": p, "R": R, "C": C}),
                     positions=positions, p=p)


def denoise_patches(params, grid, cfg, *, workers=1, alpha=5.0):
    """Posterior-mean reconstruction of every patch under the truncated
    posterior: y_hat = W <s*z>."""
    _, _, _, esz = truncated_estep(params, grid.patches, cfg, alpha=alpha,
                                   workers=workers, want_esz=True)
    Yhat = esz @ params.W.T
    return PatchGrid(patches=Dataset(Yhat, meta=dict(grid.patches.meta)),
                     positions=list(grid.positions), p=grid.p)


def reassemble(grid, R, C):
    """Average overlapping patch values per pixel; clip to [0, 255]."""
    p = grid.p
    acc = np.zeros((R, C))
    cnt = np.zeros((R, C))
    Y = grid.patches.Y
    if len(grid.positions) != Y.shape[0]:
        raise ConfigError("patch grid positions inconsistent with data")
    for (r, c), patch in zip(grid.positions, Y):
        if r + p > R or c + p > C:
            raise ConfigError("patch anchor outside image geometry")
        acc[r:r + p, c:c + p] += patch.reshape(p, p)
        cnt[r:r + p, c:c + p] += 1.0
    if np.any(cnt == 0.0):
        raise ConfigError("patch grid does not cover the image")
    return GrayImage(np.clip(acc / cnt, 0.0, 255.0))


def run_denoise(img_noisy, H, cfg, iters, seed, *, p=8, workers=1,
                alpha=5.0):
    """Train on the noisy image's own patches, then reconstruct it.

    Returns (denoised GrayImage, learned ModelParams, EM trace).  The
    learned sparsity values are available as sorted(params.pi)[::-1] for
    sparsity diagnostics.
    """
    grid = extract_patches(img_noisy, p)
    init = standard_init(grid.patches, H, seed, noise_mode="homoscedastic")
    params, traces = run_truncated_em(grid.patches, init, cfg, iters,
                                      alpha=alpha, workers=workers)
    rec = denoise_patches(params, grid, cfg, workers=workers, alpha=alpha)
    out = reassemble(rec, img_noisy.R, img_noisy.C)
    return out, params, traces


def add_gaussian_noise(img, sigma, seed, *, clip=True):
    """Noisy copy of an image; clipped to [0, 255] by default."""
    rng = np.random.default_rng(seed)
    noisy = img.pixels + sigma * rng.standard_normal(img.pixels.shape)
    if clip:
        noisy = np.clip(noisy, 0.0, 255.0)
    return GrayImage(noisy)


def read_pgm(path):
    """Binary 8-bit PGM (P5) reader."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise MissingInputError(f"image file not found: {path}")
    # header: magic, width, height, maxval, separated by whitespace with
    # optional '#' comments
    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(data):
            raise ConfigError(f"truncated PGM header in {path}")
        ch = data[i:i + 1]
        if ch == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j:j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
    if tokens[0] != b"P5":
        raise ConfigError(f"not a binary PGM (P5) file: {path}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ConfigError("only 8-bit PGM supported")
    i += 1  # single whitespace after maxval
    raster = np.frombuffer(data[i:i + w * h], dtype=np.uint8)
    if raster.size != w * h:
        raise ConfigError(f"truncated PGM raster in {path}")
    return GrayImage(raster.reshape(h, w).astype(np.float64))


def write_pgm(img, path):
    pix = np.clip(np.rint(img.pixels), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.C, img.R))
        fh.write(pix.tobytes())
