"""Experiment command-line runner.

Subcommands: bars | consistency | recovery | separation | denoise |
posteriors.  Every run writes a manifest (config echo, version, per-trial
seeds, outputs) into the output directory before any computation, so runs
are reproducible from the manifest alone.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 missing input file.
"""

import argparse
import csv
import datetime
import json
import os
import sys

import numpy as np

from . import __version__
from .datagen import (
    bars_dataset,
    load_dataset_bin,
    load_dataset_csv,
    load_sources_csv,
    mix_sources,
    perturbed_orthogonal_basis,
    sample_sparse_coding,
    sample_spike_slab,
)
from .denoise import (
    GrayImage,
    add_gaussian_noise,
    read_pgm,
    run_denoise,
    write_pgm,
)
from .errors import (
    ConfigError,
    MissingInputError,
    NumericalError,
    SpikeSlabError,
)
from .exact_em import (
    run_exact_em,
    standard_init,
    state_log_weights,
    trace_to_csv,
)
from .metrics import (
    MetricReport,
    amari_index,
    kl_from_q,
    psnr,
    report_from_values,
    write_reports_csv,
    write_reports_json,
)
from .model import H_EXACT_MAX, Dataset, ModelParams, all_states
from .truncated_em import TruncationConfig, average_q, run_truncated_em

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_MISSING_INPUT = 4


# ----------------------------------------------------------------- plumbing

def _common_flags(ap):
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--output-dir", default="runs")
    ap.add_argument("--engine", choices=("exact", "truncated"),
                    default="truncated")
    ap.add_argument("--h-prime", type=int, default=5)
    ap.add_argument("--gamma", type=int, default=3)
    ap.add_argument("--iters", type=int, default=50)
    ap.add_argument("--trials", type=int, default=1)
    ap.add_argument("--alpha-percentile", type=float, default=5.0)
    ap.add_argument("--config", default=None,
                    help="JSON file of flag defaults (CLI flags win)")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="spikeslab",
        description="Spike-and-slab sparse coding experiment runner")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bars", help="bar-superposition control experiment")
    _common_flags(p)
    p.add_argument("--latents", type=int, default=10)
    p.add_argument("--n-points", type=int, default=1000)
    p.set_defaults(func=cmd_bars)

    p = sub.add_parser("consistency",
                       help="basis recovery vs. training-set size")
    _common_flags(p)
    p.add_argument("--latents", type=int, default=10)
    p.add_argument("--n-values", default="1000,8000,64000")
    p.add_argument("--noise-sigma", type=float, default=1.0)
    p.set_defaults(func=cmd_consistency, iters=100, prior="spike_slab")

    p = sub.add_parser("recovery",
                       help="basis recovery under a chosen data prior")
    _common_flags(p)
    p.add_argument("--latents", type=int, default=10)
    p.add_argument("--n-values", default="1000,8000,64000")
    p.add_argument("--noise-sigma", type=float, default=1.0)
    p.add_argument("--prior",
                   choices=("spike_slab", "laplace", "cauchy"),
                   default="spike_slab")
    p.set_defaults(func=cmd_recovery, iters=100)

    p = sub.add_parser("separation", help="blind source separation")
    _common_flags(p)
    p.add_argument("--sources", default=None,
                   help="CSV of benchmark sources, one source per row")
    p.add_argument("--n-points", type=int, default=500)
    p.add_argument("--offset", type=int, default=0)
    p.add_argument("--latents", type=int, default=4,
                   help="synthetic source count when --sources is absent")
    p.add_argument("--noise-mode",
                   choices=("homoscedastic", "diagonal", "full"),
                   default="homoscedastic")
    p.set_defaults(func=cmd_separation, iters=350, engine="exact")

    p = sub.add_parser("denoise", help="patch-based image denoising")
    _common_flags(p)
    p.add_argument("--image", default=None, help="grayscale PGM input")
    p.add_argument("--crop", type=int, default=64,
                   help="center-crop side length (0 = full image)")
    p.add_argument("--sigma", type=float, default=25.0)
    p.add_argument("--latents", type=int, default=64)
    p.add_argument("--patch-size", type=int, default=8)
    p.set_defaults(func=cmd_denoise, iters=65, h_prime=10, gamma=8)

    p = sub.add_parser("posteriors",
                       help="exact posterior concentration histograms")
    _common_flags(p)
    p.add_argument("--latents", type=int, default=8)
    p.add_argument("--n-points", type=int, default=200)
    p.add_argument("--data", default=None,
                   help="dataset file (.csv or binary); default synthetic")
    p.set_defaults(func=cmd_posteriors, iters=25, engine="exact")
    return ap


def parse_args(argv):
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.config:
        try:
            with open(args.config) as fh:
                overrides = json.load(fh)
        except FileNotFoundError:
            raise MissingInputError(f"config file not found: {args.config}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid config JSON: {e}")
        if not isinstance(overrides, dict):
            raise ConfigError("config JSON must be an object of flag "
                              "defaults")
        for key, value in overrides.items():
            dest = key.replace("-", "_")
            if not hasattr(args, dest):
                raise ConfigError(f"unknown config key {key!r}")
            # Explicit command-line flags win over config-file defaults.
            if f"--{dest.replace('_', '-')}" not in argv:
                setattr(args, dest, value)
    return args


def trial_seeds(seed, trials):
    """Per-trial seeds derived from the run seed via SeedSequence spawning."""
    ss = np.random.SeedSequence(seed)
    return [int(child.generate_state(1)[0]) for child in ss.spawn(trials)]


class Manifest:
    def __init__(self, args, outdir, seeds):
        self.path = os.path.join(outdir, "manifest.json")
        self.doc = {
            "command": args.command,
            "config": {k: v for k, v in vars(args).items()
                       if k not in ("func",)},
            "version": __version__,
            "trial_seeds": seeds,
            "timestamp": datetime.datetime.now(
                datetime.timezone.utc).isoformat(),
            "outputs": [],
        }
        self.write()

    def write(self):
        with open(self.path, "w") as fh:
            json.dump(self.doc, fh, indent=2, default=str)

    def add_output(self, path):
        self.doc["outputs"].append(os.path.basename(path))
        self.write()
        return path


def _prepare(args):
    outdir = args.output_dir
    os.makedirs(outdir, exist_ok=True)
    seeds = trial_seeds(args.seed, args.trials)
    return outdir, seeds, Manifest(args, outdir, seeds)


def truncation_from_args(args, H):
    h_prime = min(args.h_prime, H)
    gamma = min(args.gamma, h_prime)
    return TruncationConfig(h_prime=h_prime, gamma=gamma).validate(H)


def run_engine(args, data, init, iters):
    if args.engine == "exact":
        if init.H > H_EXACT_MAX:
            raise ConfigError(
                f"exact engine needs H <= {H_EXACT_MAX}, got {init.H}")
        return run_exact_em(data, init, iters)
    cfg = truncation_from_args(args, init.H)
    return run_truncated_em(data, init, cfg, iters, workers=args.workers,
                            alpha=args.alpha_percentile)


# --------------------------------------------------------------- commands

def _bar_hits(W, W_gen, threshold=0.9):
    """Number of generating bars whose best-matching learned column has
    absolute cosine similarity above the threshold."""
    Wn = W / np.maximum(np.linalg.norm(W, axis=0), 1e-12)
    Gn = W_gen / np.maximum(np.linalg.norm(W_gen, axis=0), 1e-12)
    cos = np.abs(Gn.T @ Wn)          # (H_gen, H_learned)
    return int(np.sum(cos.max(axis=1) > threshold))


def cmd_bars(args):
    outdir, seeds, man = _prepare(args)
    H, N = args.latents, args.n_points
    cfg = truncation_from_args(args, H)
    q_vals, hit_vals = [], []
    for t, s in enumerate(seeds):
        data, gt = bars_dataset(H, N, s)
        init = standard_init(data, H, s + 1, noise_mode="homoscedastic")
        params, traces = run_truncated_em(data, init, cfg, args.iters,
                                          workers=args.workers,
                                          alpha=args.alpha_percentile)
        mq, _ = average_q(params, data, cfg)
        q_vals.append(mq)
        hit_vals.append(_bar_hits(params.W, gt.W))
        trace_to_csv(traces, man.add_output(
            os.path.join(outdir, f"trace_trial{t}.csv")))
        params.save(man.add_output(
            os.path.join(outdir, f"params_trial{t}.json")))
    reports = [
        report_from_values("mean_q", q_vals),
        report_from_values("kl_from_q", [kl_from_q(q) for q in q_vals]),
        report_from_values("bar_hits", hit_vals),
    ]
    write_reports_csv(reports, man.add_output(
        os.path.join(outdir, "reports.csv")))
    write_reports_json(reports, man.add_output(
        os.path.join(outdir, "reports.json")))
    return reports


def _recovery_trial(args, prior, H, N, seed):
    rng = np.random.default_rng(seed)
    W_gen = perturbed_orthogonal_basis(H, H, np.sqrt(2.0), rng)
    if prior == "spike_slab":
        gt = ModelParams(W=W_gen,
                         Sigma=args.noise_sigma ** 2 * np.eye(H),
                         pi=np.full(H, 1.0 / H), mu=np.zeros(H),
                         Psi=np.eye(H), noise_mode="homoscedastic")
        data, _ = sample_spike_slab(gt, N, rng)
    else:
        data = sample_sparse_coding(prior, W_gen, args.noise_sigma, N, rng)
    init = standard_init(data, H, rng, noise_mode="homoscedastic")
    params, _ = run_engine(args, data, init, args.iters)
    return amari_index(params.W, W_gen)


def _recovery_sweep(args, prior):
    outdir, seeds, man = _prepare(args)
    H = args.latents
    n_values = [int(v) for v in str(args.n_values).split(",") if v]
    if not n_values:
        raise ConfigError("empty --n-values sweep")
    reports = []
    rows = []
    for N in n_values:
        vals = [_recovery_trial(args, prior, H, N, s + 17 * N)
                for s in seeds]
        rep = report_from_values(f"amari_N{N}", vals)
        reports.append(rep)
        rows.append((N, rep.value, rep.std, vals))
    with open(man.add_output(os.path.join(outdir, "amari_sweep.csv")),
              "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n_points", "amari_mean", "amari_std", "trial_values"])
        for N, mean, std, vals in rows:
            w.writerow([N, repr(mean), repr(std),
                        ";".join(repr(v) for v in vals)])
    write_reports_json(reports, man.add_output(
        os.path.join(outdir, "reports.json")))
    return reports


def cmd_consistency(args):
    return _recovery_sweep(args, "spike_slab")


def cmd_recovery(args):
    return _recovery_sweep(args, args.prior)


def cmd_separation(args):
    outdir, seeds, man = _prepare(args)
    if args.sources:
        S = load_sources_csv(args.sources)
    else:
        # Synthetic heavy-tailed stand-in sources (unit-scale Laplace).
        rng = np.random.default_rng(args.seed)
        S = rng.laplace(size=(args.latents,
                              args.offset + args.n_points + 1000))
    H = S.shape[0]
    vals = []
    for t, s in enumerate(seeds):
        data, W_mix = mix_sources(S, args.n_points, s, offset=args.offset)
        init = standard_init(data, H, s + 1, noise_mode=args.noise_mode)
        params, traces = run_engine(args, data, init, args.iters)
        vals.append(amari_index(params.W, W_mix))
        trace_to_csv(traces, man.add_output(
            os.path.join(outdir, f"trace_trial{t}.csv")))
    reports = [report_from_values("amari", vals)]
    write_reports_csv(reports, man.add_output(
        os.path.join(outdir, "reports.csv")))
    write_reports_json(reports, man.add_output(
        os.path.join(outdir, "reports.json")))
    return reports


def _load_clean_image(args):
    if args.image:
        img = read_pgm(args.image)
    else:
        try:
            from skimage import data as skdata
        except ImportError:
            raise MissingInputError(
                "no --image given and scikit-image unavailable")
        img = GrayImage(skdata.camera().astype(np.float64))
    if args.crop:
        c = args.crop
        if c > min(img.R, img.C):
            raise ConfigError(f"crop {c} exceeds image {img.R}x{img.C}")
        r0 = (img.R - c) // 2
        c0 = (img.C - c) // 2
        img = GrayImage(img.pixels[r0:r0 + c, c0:c0 + c])
    return img


def _bases_grid(W, p):
    """Tile dictionary columns (p x p each, min-max normalized) into one
    image for visual inspection."""
    H = W.shape[1]
    cols = int(np.ceil(np.sqrt(H)))
    rows = int(np.ceil(H / cols))
    canvas = np.zeros((rows * (p + 1) + 1, cols * (p + 1) + 1))
    for h in range(H):
        tile = W[:, h].reshape(p, p)
        lo, hi = tile.min(), tile.max()
        tile = (tile - lo) / (hi - lo) * 255.0 if hi > lo else 0.0 * tile
        r, c = divmod(h, cols)
        canvas[r * (p + 1) + 1:r * (p + 1) + 1 + p,
               c * (p + 1) + 1:c * (p + 1) + 1 + p] = tile
    return GrayImage(canvas)


def cmd_denoise(args):
    outdir, seeds, man = _prepare(args)
    clean = _load_clean_image(args)
    cfg = truncation_from_args(args, args.latents)
    psnr_noisy, psnr_out = [], []
    for t, s in enumerate(seeds):
        noisy = add_gaussian_noise(clean, args.sigma, s)
        out, params, traces = run_denoise(
            noisy, args.latents, cfg, args.iters, s + 1,
            p=args.patch_size, workers=args.workers,
            alpha=args.alpha_percentile)
        psnr_noisy.append(psnr(clean.pixels, noisy.pixels))
        psnr_out.append(psnr(clean.pixels, out.pixels))
        write_pgm(noisy, man.add_output(
            os.path.join(outdir, f"noisy_trial{t}.pgm")))
        write_pgm(out, man.add_output(
            os.path.join(outdir, f"denoised_trial{t}.pgm")))
        write_pgm(_bases_grid(params.W, args.patch_size), man.add_output(
            os.path.join(outdir, f"bases_trial{t}.pgm")))
        with open(man.add_output(
                os.path.join(outdir, f"sparsity_trial{t}.csv")), "w",
                newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "pi"])
            for i, v in enumerate(sorted(params.pi)[::-1]):
                w.writerow([i, repr(float(v))])
        trace_to_csv(traces, man.add_output(
            os.path.join(outdir, f"trace_trial{t}.csv")))
    reports = [
        report_from_values("psnr_noisy_db", psnr_noisy),
        report_from_values("psnr_denoised_db", psnr_out),
        report_from_values("psnr_gain_db",
                           [b - a for a, b in zip(psnr_noisy, psnr_out)]),
    ]
    write_reports_csv(reports, man.add_output(
        os.path.join(outdir, "reports.csv")))
    write_reports_json(reports, man.add_output(
        os.path.join(outdir, "reports.json")))
    return reports


def cmd_posteriors(args):
    outdir, seeds, man = _prepare(args)
    H = args.latents
    if H > H_EXACT_MAX:
        raise ConfigError(f"posteriors needs H <= {H_EXACT_MAX}")
    s = seeds[0]
    if args.data:
        loader = (load_dataset_csv if args.data.endswith(".csv")
                  else load_dataset_bin)
        data = loader(args.data)
    else:
        rng = np.random.default_rng(s)
        W_gen = perturbed_orthogonal_basis(H, H, np.sqrt(2.0), rng)
        gt = ModelParams(W=W_gen, Sigma=np.eye(H),
                         pi=np.full(H, 2.0 / H), mu=np.zeros(H),
                         Psi=np.eye(H), noise_mode="homoscedastic")
        data, _ = sample_spike_slab(gt, args.n_points, rng)
    init = standard_init(data, H, s + 1, noise_mode="homoscedastic")
    params, _ = run_exact_em(data, init, args.iters)

    states = all_states(H)
    lw = state_log_weights(params, data.Y, states)
    lw -= lw.max(axis=1, keepdims=True)
    q = np.exp(lw)
    q /= q.sum(axis=1, keepdims=True)
    bits = np.array([st.bits for st in states], dtype=np.float64)  # (S, H)
    marginals = q @ bits                                           # (N, H)
    pops = bits.sum(axis=1).astype(int)
    pop_mass = np.zeros((data.N, H + 1))
    for i in range(H + 1):
        pop_mass[:, i] = q[:, pops == i].sum(axis=1)

    with open(man.add_output(os.path.join(outdir, "marginals.csv")), "w",
              newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n"] + [f"p_s{h}" for h in range(H)])
        for n in range(data.N):
            w.writerow([n] + [repr(float(v)) for v in marginals[n]])
    with open(man.add_output(os.path.join(outdir, "popcount_mass.csv")),
              "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n"] + [f"p_card{i}" for i in range(H + 1)])
        for n in range(data.N):
            w.writerow([n] + [repr(float(v)) for v in pop_mass[n]])
    reports = [
        report_from_values("mean_active", marginals.sum(axis=1)),
        report_from_values("mass_card_le4", pop_mass[:, :5].sum(axis=1)),
    ]
    write_reports_json(reports, man.add_output(
        os.path.join(outdir, "reports.json")))
    return reports


# ------------------------------------------------------------------- main

def main(argv=None):
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        reports = args.func(args)
        for r in reports:
            print(f"{r.name}: {r.value:.6g}"
                  + (f" (std {r.std:.3g}, n={r.n_trials})"
                     if r.n_trials > 1 else ""))
        return EXIT_OK
    except MissingInputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, SpikeSlabError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
