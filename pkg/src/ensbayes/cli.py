"""Command-line front end.

Three commands: ``run-gaussian`` (the six-procedure Gaussian study),
``run-hmm`` (the binary oil/water study) and ``selftest`` (fast oracle
checks).  Runs read a plain ``key = value`` config (or a preset), write CSV
artifacts at full precision plus self-contained SVG figures, and record a
JSON manifest whose config and seed reproduce every CSV byte for byte.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import __version__
from .distributions import RngStream
from .experiments import (
    GaussianExperimentConfig,
    HmmExperimentConfig,
    THETA_GENERATIONS,
    UPDATE_KINDS,
    run_gaussian_experiment,
    run_hmm_experiment,
)

__all__ = ["main", "parse_config_text", "ConfigError"]


class ConfigError(ValueError):
    """Malformed configuration; the message carries the offending line."""


# ---------------------------------------------------------------------------
# Configuration


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines with optional ``[section]`` headers and
    ``#`` comments into a flat string dictionary."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            continue  # sections are cosmetic; keys are globally unique
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


PRESETS: dict[str, dict[str, str]] = {
    "paper-gaussian-m19": {
        "experiment": "gaussian",
        "n": "100",
        "T": "11",
        "M": "19",
        "replicates": "1000",
        "forward_kind": "linear",
        "obs_var": "20",
        "gibbs_iters": "25",
        "procedures": "all",
    },
    "paper-gaussian-m199": {
        "experiment": "gaussian",
        "n": "100",
        "T": "11",
        "M": "199",
        "replicates": "1000",
        "forward_kind": "linear",
        "obs_var": "20",
        "gibbs_iters": "25",
        "procedures": "all",
    },
    "paper-hmm": {
        "experiment": "hmm",
        "n": "400",
        "T": "100",
        "M": "20",
        "sigma2": "4",
        "alpha": "2",
        "gibbs_iters": "100",
        "methods": "bayesian,non_bayesian",
    },
}


def _coerce(raw: dict[str, str], key: str, conv: Callable[[str], Any], default: Any) -> Any:
    if key not in raw:
        return default
    value = raw[key]
    try:
        if conv is bool:
            low = value.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        return conv(value)
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: cannot parse {value!r}") from exc


def _load_raw_config(args: argparse.Namespace) -> dict[str, str]:
    raw: dict[str, str] = {}
    if args.preset:
        raw.update(PRESETS[args.preset])
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        if path.suffix == ".json":
            # A manifest: re-run with its recorded config and seed.
            manifest = json.loads(path.read_text(encoding="utf-8"))
            raw.update({k: str(v) for k, v in manifest["config"].items()})
            raw.setdefault("seed", str(manifest["seed"]))
        else:
            raw.update(parse_config_text(path.read_text(encoding="utf-8")))
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    return raw


def _gaussian_procedures(raw: dict[str, str]) -> list[tuple[str, str]]:
    spec = raw.get("procedures", "all").strip()
    if spec == "all":
        return [(tg, uk) for tg in THETA_GENERATIONS for uk in UPDATE_KINDS]
    pairs = []
    for item in spec.split(","):
        theta, sep, update = item.strip().partition(":")
        if not sep or theta not in THETA_GENERATIONS or update not in UPDATE_KINDS:
            raise ConfigError(f"bad procedure {item.strip()!r}")
        pairs.append((theta, update))
    return pairs


# ---------------------------------------------------------------------------
# Artifact writers


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(
                ",".join(
                    str(v) if isinstance(v, (int, np.integer, str)) else _fmt(v)
                    for v in row
                )
                + "\n"
            )


def _svg_header(width: int, height: int, title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width // 2}" y="16" text-anchor="middle" '
        f'font-family="monospace" font-size="13">{title}</text>',
    ]


def svg_histogram(counts: np.ndarray, title: str) -> str:
    """Bar chart of nonnegative integer counts over bins 0..len-1."""
    width, height, pad = 640, 360, 40
    parts = _svg_header(width, height, title)
    top = max(int(counts.max()), 1)
    nbins = len(counts)
    span = width - 2 * pad
    bar = span / nbins
    for k, c in enumerate(counts):
        h = (height - 2 * pad) * (int(c) / top)
        x = pad + k * bar
        y = height - pad - h
        parts.append(
            f'<rect x="{x:.2f}" y="{y:.2f}" width="{max(bar - 1, 1):.2f}" '
            f'height="{h:.2f}" fill="steelblue"/>'
        )
    parts.append(
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" '
        'stroke="black"/>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def svg_heatmap(matrix: np.ndarray, title: str) -> str:
    """Grey-scale image of values in [0, 1]; rows are drawn top to bottom."""
    rows, cols = matrix.shape
    cell = max(1, min(4, 1200 // max(cols, 1)))
    pad = 24
    width, height = cols * cell + 2 * pad, rows * cell + 2 * pad
    parts = _svg_header(width, height, title)
    for r in range(rows):
        for c in range(cols):
            level = int(round(255 * (1.0 - float(np.clip(matrix[r, c], 0.0, 1.0)))))
            if level == 255:
                continue  # white background already present
            parts.append(
                f'<rect x="{pad + c * cell}" y="{pad + r * cell}" width="{cell}" '
                f'height="{cell}" fill="rgb({level},{level},{level})"/>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def svg_lines(series: dict[str, np.ndarray], title: str, y_max: float = 1.0) -> str:
    """Overlaid line plots sharing an x axis of sample indices."""
    width, height, pad = 640, 360, 40
    parts = _svg_header(width, height, title)
    colours = ("steelblue", "firebrick", "seagreen", "darkorange")
    for idx, (name, values) in enumerate(sorted(series.items())):
        values = np.asarray(values, dtype=float)
        n = len(values)
        xs = pad + (width - 2 * pad) * np.arange(n) / max(n - 1, 1)
        ys = height - pad - (height - 2 * pad) * np.clip(values, 0.0, y_max) / y_max
        points = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
        colour = colours[idx % len(colours)]
        parts.append(
            f'<polyline points="{points}" fill="none" stroke="{colour}" stroke-width="1.5"/>'
        )
        parts.append(
            f'<text x="{pad}" y="{30 + 14 * idx}" font-family="monospace" '
            f'font-size="12" fill="{colour}">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


class _Artifacts:
    """Tracks files written by one run so failures can clean up."""

    def __init__(self, out_dir: Path) -> None:
        self.out_dir = out_dir
        self.paths: list[Path] = []
        out_dir.mkdir(parents=True, exist_ok=True)

    def csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        path = self.out_dir / name
        _write_csv(path, header, rows)
        self.paths.append(path)
        return path

    def text(self, name: str, content: str) -> Path:
        path = self.out_dir / name
        path.write_text(content, encoding="utf-8")
        self.paths.append(path)
        return path

    def discard_all(self) -> None:
        for path in self.paths:
            path.unlink(missing_ok=True)


def _write_manifest(
    out_dir: Path, config: dict[str, str], seed: int, outputs: list[str], started: str
) -> Path:
    manifest = {
        "config": config,
        "seed": seed,
        "version": __version__,
        "outputs": outputs,
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


# ---------------------------------------------------------------------------
# Commands


def cmd_run_gaussian(args: argparse.Namespace) -> int:
    raw = _load_raw_config(args)
    seed = _coerce(raw, "seed", int, 0)
    procedures = _gaussian_procedures(raw)
    out = _Artifacts(Path(args.out))
    started = _now()
    # Record intent first: the config and seed alone reproduce the run.
    _write_manifest(out.out_dir, raw, seed, [], started)
    try:
        for theta_gen, update_kind in procedures:
            config = GaussianExperimentConfig(
                n=_coerce(raw, "n", int, 100),
                T=_coerce(raw, "T", int, 11),
                M=_coerce(raw, "M", int, 19),
                forward_kind=raw.get("forward_kind", "linear"),
                theta_generation=theta_gen,
                update_kind=update_kind,
                replicates=_coerce(raw, "replicates", int, 1),
                seed=seed,
                obs_var=_coerce(raw, "obs_var", float, 20.0),
                gibbs_iters=_coerce(raw, "gibbs_iters", int, 25),
                randomise_truth=_coerce(raw, "randomise_truth", bool, True),
            )
            result = run_gaussian_experiment(config, n_workers=args.threads)
            tag = f"{theta_gen}_{update_kind}"
            n = config.n
            out.csv(
                f"predictions_{tag}.csv",
                ["time", "member"] + [f"x{j + 1}" for j in range(n)],
                (
                    [t + 1, i + 1, *result.prediction_ensembles[t, i]]
                    for t in range(config.T)
                    for i in range(config.M)
                ),
            )
            out.csv(
                f"z_{tag}.csv",
                ["replicate", "z"],
                ((r + 1, int(z)) for r, z in enumerate(result.z_draws)),
            )
            counts = np.bincount(result.z_draws, minlength=config.M + 1)
            out.csv(
                f"zhist_{tag}.csv",
                ["z", "count"],
                ((k, int(c)) for k, c in enumerate(counts)),
            )
            out.text(f"zhist_{tag}.svg", svg_histogram(counts, f"rank statistic: {tag}"))
            print(f"run-gaussian: {tag} done ({config.replicates} replicates)")
        manifest = _write_manifest(
            out.out_dir, raw, seed, [p.name for p in out.paths], started
        )
        print(f"run-gaussian: wrote {manifest}")
        return 0
    except Exception:
        out.discard_all()
        raise


def cmd_run_hmm(args: argparse.Namespace) -> int:
    raw = _load_raw_config(args)
    seed = _coerce(raw, "seed", int, 0)
    methods = [m.strip() for m in raw.get("methods", "bayesian,non_bayesian").split(",")]
    out = _Artifacts(Path(args.out))
    started = _now()
    _write_manifest(out.out_dir, raw, seed, [], started)
    try:
        u_curves: dict[str, np.ndarray] = {}
        for method in methods:
            config = HmmExperimentConfig(
                n=_coerce(raw, "n", int, 400),
                T=_coerce(raw, "T", int, 100),
                M=_coerce(raw, "M", int, 20),
                sigma2=_coerce(raw, "sigma2", float, 4.0),
                alpha=_coerce(raw, "alpha", float, 2.0),
                gibbs_iters=_coerce(raw, "gibbs_iters", int, 100),
                method=method,
                seed=seed,
            )
            result = run_hmm_experiment(config)
            out.csv(
                f"phat_{method}.csv",
                [f"x{j + 1}" for j in range(config.n)],
                (result.marginal_estimates[t] for t in range(config.T)),
            )
            out.csv(
                f"unalikeability_{method}.csv",
                ["time", "u"],
                (
                    (t + 1, result.unalikeability_series[t])
                    for t in range(config.T)
                ),
            )
            out.text(
                f"phat_{method}.svg",
                svg_heatmap(result.marginal_estimates, f"filtering marginals: {method}"),
            )
            u_curves[method] = result.unalikeability_series
            print(f"run-hmm: {method} done (T={config.T})")
        out.text("unalikeability.svg", svg_lines(u_curves, "mean unalikeability over time"))
        manifest = _write_manifest(
            out.out_dir, raw, seed, [p.name for p in out.paths], started
        )
        print(f"run-hmm: wrote {manifest}")
        return 0
    except Exception:
        out.discard_all()
        raise


def _selftest_checks(perturb: float) -> list[tuple[str, float, float]]:
    """Fast oracle checks: (name, residual, tolerance) per check.

    `perturb` is added to each residual; nonzero values are a test hook to
    exercise the failure path.
    """
    from .gaussian import (
        GaussianParams,
        LikelihoodSpec,
        posterior_moments,
        theorem1_solve,
    )
    from .hmm import MarkovChainParams, SiteLikelihood, forward_backward
    from .hmm_update import conditional_independence_policy, expected_matches, optimal_policy

    checks: list[tuple[str, float, float]] = []
    rng = RngStream(20240817)
    gen = rng.generator

    # Scalar Kalman update against the precision-form computation.
    params = GaussianParams(mu=np.array([1.0]), Q=np.array([[4.0]]))
    lik = LikelihoodSpec(H=np.array([[1.0]]), R=np.array([[2.0]]))
    post = posterior_moments(params, lik, np.array([3.0]))
    prec = 1.0 / 4.0 + 1.0 / 2.0
    mu_ref = (1.0 / 4.0 * 1.0 + 1.0 / 2.0 * 3.0) / prec
    resid = max(abs(post.mu_star[0] - mu_ref), abs(post.Q_star[0, 0] - 1.0 / prec))
    checks.append(("scalar-kalman", resid + perturb, 1e-12))

    # Trace optimality on a random 4x4 full-rank matrix.
    z = gen.standard_normal((4, 4)) + 2.0 * np.eye(4)
    b = theorem1_solve(z)
    target = np.linalg.svd(z, compute_uv=False).sum()
    gap = abs(float(np.trace(b @ z)) - target)
    worst = 0.0
    for _ in range(100):
        q, _ = np.linalg.qr(gen.standard_normal((4, 4)))
        worst = max(worst, float(np.trace(q @ z)) - target)
    checks.append(("trace-optimality", max(gap, worst) + perturb, 1e-10))

    # Forward-backward marginals against exhaustive enumeration, n=6.
    n = 6
    init = gen.dirichlet(np.ones(2))
    trans = gen.dirichlet(np.ones(2), size=(n - 1, 2))
    theta = MarkovChainParams(initial=init, transitions=trans)
    dens = gen.random((n, 2)) + 0.1
    post_chain = forward_backward(theta, SiteLikelihood(dens=dens))
    marg = np.zeros((n, 2))
    for code in range(2**n):
        path = [(code >> j) & 1 for j in range(n)]
        w = init[path[0]] * dens[0, path[0]]
        for j in range(1, n):
            w *= trans[j - 1, path[j - 1], path[j]] * dens[j, path[j]]
        for j in range(n):
            marg[j, path[j]] += w
    marg /= marg.sum(axis=1, keepdims=True)
    checks.append(
        ("forward-backward", float(np.abs(marg - post_chain.marginals).max()) + perturb, 1e-12)
    )

    # Optimal coupling policy against a fine grid, n=2.
    init = gen.dirichlet(np.ones(2))
    trans = gen.dirichlet(np.ones(2), size=(1, 2))
    theta = MarkovChainParams(initial=init, transitions=trans)
    dens = gen.random((2, 2)) + 0.1
    posterior = forward_backward(theta, SiteLikelihood(dens=dens))
    achieved = expected_matches(theta, optimal_policy(theta, posterior))
    baseline = expected_matches(theta, conditional_independence_policy(posterior))
    best = _grid_best_matches_n2(theta, posterior)
    resid = max(best - achieved, baseline - achieved, 0.0)
    checks.append(("optimal-coupling", resid + perturb, 1e-3))
    return checks


def _grid_best_matches_n2(theta, posterior) -> float:
    """Best expected matches over a fine grid of feasible n=2 policies.

    The objective is affine increasing in each site's diagonal coupling, so
    for every gridded site-1 coupling t1 the best continuation takes the
    largest reachable site-2 coupling.
    """
    pm = theta.site_marginals()[:, 1]
    pi = posterior.marginals[:, 1]
    rho = posterior.pair_marginals[0][:, 1]
    t1_lo = max(0.0, pi[0] + pm[0] - 1.0)
    t1_hi = min(pi[0], pm[0])
    best = -np.inf
    for t1 in np.linspace(t1_lo, t1_hi, 2001):
        r1 = np.array(
            [[1.0 - pi[0] - pm[0] + t1, pm[0] - t1], [pi[0] - t1, t1]]
        ).clip(0.0, None)
        m = r1 @ theta.transitions[0]
        t2 = np.minimum(m[:, 1], rho).sum()
        matches = (1.0 - pi[0] - pm[0] + 2.0 * t1) + (1.0 - pi[1] - pm[1] + 2.0 * t2)
        best = max(best, matches)
    return float(best)


def cmd_selftest(args: argparse.Namespace) -> int:
    perturb = 1.0 if args.inject_failure else 0.0
    failures = 0
    for name, residual, tol in _selftest_checks(perturb):
        ok = residual <= tol
        failures += 0 if ok else 1
        print(f"{'PASS' if ok else 'FAIL'} {name}: max residual {residual:.3e} (tol {tol:.0e})")
    return 0 if failures == 0 else 1


# ---------------------------------------------------------------------------
# Entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ensbayes")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run-gaussian", "run-hmm"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key = value config file or manifest.json")
        p.add_argument("--preset", choices=sorted(PRESETS), default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out", default="out")
    st = sub.add_parser("selftest")
    st.add_argument("--inject-failure", action="store_true", help=argparse.SUPPRESS)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run-gaussian":
            if args.config is None and args.preset is None:
                print("error: provide --config or --preset", file=sys.stderr)
                return 2
            return cmd_run_gaussian(args)
        if args.command == "run-hmm":
            if args.config is None and args.preset is None:
                print("error: provide --config or --preset", file=sys.stderr)
                return 2
            return cmd_run_hmm(args)
        return cmd_selftest(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
