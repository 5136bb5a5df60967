"""Command-line front end.

``rankone <command> [--config FILE] [overrides]`` runs one experiment and
writes CSV data, a JSON manifest and optional SVG plots into the output
directory.  Exit status: 0 on success (partial results are flagged in the
manifest), 1 for numerical failures, 2 for invalid configuration, 3 when
the hierarchy is too shallow for every requested time.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, artifacts, dynamics, spectral
from .config import ConfigError, RunConfig, load_config
from .construction import build_stages
from .errors import DepthExhausted, ParameterError, RankOneError, StageDepthError

__all__ = ["main", "run", "COMMANDS", "OUTPUT_ROOT_ENV"]

OUTPUT_ROOT_ENV = "RANKONE_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "rankone-runs"
COMMANDS = ("build", "correlate", "weaklimit", "lemma", "spectrum", "multiplicity", "decay")

# flag -> (section, key, commands that accept it; None means all)
_FLAGS = {
    "family": ("construction", "family", None),
    "eps": ("construction", "eps", None),
    "h1": ("construction", "h1", None),
    "max_stage": ("construction", "max_stage", None),
    "eps_schedule": ("construction", "eps_schedule", None),
    "basis_size": ("basis", "size", None),
    "basis_stage": ("basis", "stage", None),
    "seed": ("run", "seed", None),
    "workers": ("run", "workers", None),
    "out": ("output", "dir", None),
    "times": (None, "times", ("correlate", "weaklimit", "multiplicity", "decay")),
    "a": (None, "a", ("weaklimit", "lemma")),
    "dictionary": ("weaklimit", "dictionary", ("weaklimit",)),
    "j": ("lemma", "j", ("lemma",)),
    "step": ("lemma", "step", ("lemma",)),
    "T": ("spectrum", "T", ("spectrum",)),
    "dt": ("spectrum", "dt", ("spectrum",)),
    "window": ("spectrum", "window", ("spectrum",)),
    "coefficients": ("spectrum", "coefficients", ("spectrum",)),
    "tol": ("multiplicity", "tol", ("multiplicity",)),
    "budget": ("multiplicity", "budget", ("multiplicity",)),
}


def _parser():
    parser = argparse.ArgumentParser(prog="rankone", description="Rank-one flow laboratory.")
    parser.add_argument("--version", action="version", version=f"rankone {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "build": "stage table of a construction",
        "correlate": "correlation matrices of the test basis at given times",
        "weaklimit": "fit Theta/Id (or Theta/Avg) to correlation matrices",
        "lemma": "scan windows around multiples of h_j for the integral family",
        "spectrum": "autocorrelation, spectral density and self-convolution overlap",
        "multiplicity": "cyclic-rank probe of tensor squares of Koopman compressions",
        "decay": "distance of correlation matrices from Theta along given times",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", type=Path, help="INI config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override any key")
        p.add_argument("--plot", action="store_true", default=None, help="also write SVG plots")
        for flag, (_, _, cmds) in _FLAGS.items():
            if cmds is None or name in cmds:
                p.add_argument("--" + flag.replace("_", "-"), dest=flag, default=None)
    return parser


def _overrides(args):
    out = []
    for flag, (section, key, cmds) in _FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            out.append((section or args.command, key, value, "--" + flag.replace("_", "-")))
    if args.plot:
        out.append(("output", "plot", "true", "--plot"))
    for item in args.set:
        name, sep, value = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError("expected SECTION.KEY=VALUE", origin=f"--set {item}")
        out.append((section, key, value.strip(), f"--set {item}"))
    return out


class _Run:
    """State of one command: config, hierarchy, output directory and written files."""

    def __init__(self, config: RunConfig, command: str):
        self.config = config
        self.command = command
        self.digest = config.digest(command)
        self.params = config.construction
        try:
            self.stages = build_stages(self.params)
        except StageDepthError as exc:
            raise config.error("construction", "max_stage", str(exc)) from None
        self.seed = config.get("run", "seed", int)
        self.workers = max(1, config.get("run", "workers", int))
        self.plot = config.get("output", "plot", bool)
        self.outputs = []
        self.exhausted = []
        self.summary = {}
        self.failure = None
        self.out_dir = self._out_dir()
        self._basis = None

    def _out_dir(self):
        explicit = self.config.text("output", "dir")
        if explicit:
            return Path(explicit)
        root = os.environ.get(OUTPUT_ROOT_ENV) or DEFAULT_OUTPUT_ROOT
        return Path(root) / f"{self.command}-{self.digest[:12]}"

    @property
    def basis(self):
        if self._basis is None:
            spec = self.config.basis
            if spec.stage > self.stages.max_stage:
                raise self.config.error("basis", "stage", f"stage {spec.stage} exceeds max_stage {self.stages.max_stage}")
            if spec.kind == "slabs":
                self._basis = analysis.TestBasis.equal_slabs(self.stages, spec.size, spec.stage)
            else:
                sets = self.config.checked(
                    "basis",
                    "strips",
                    lambda: [dynamics.TowerSet.from_strips(self.stages, spec.stage, [s]) for s in spec.strips],
                )
                self._basis = analysis.TestBasis.from_sets(sets, label="strips")
        return self._basis

    def header(self, **extra):
        h = {
            "command": self.command,
            "config_hash": self.digest,
            "construction": self.params.as_dict(),
            "seed": self.seed,
            "version": __version__,
        }
        if self._basis is not None:
            h["basis"] = self.config.basis.as_dict()
        h.update(extra)
        return h

    def csv(self, name, columns, rows, **extra):
        path = artifacts.write_csv(self.out_dir / name, self.header(**extra), columns, rows)
        self.outputs.append(path)
        return path

    def svg(self, name, series, xlabel, ylabel, title="", logy=False):
        if self.plot:
            self.outputs.append(artifacts.write_svg(self.out_dir / name, series, xlabel, ylabel, title, logy))

    def manifest(self):
        files = []
        for p in self.outputs:
            data = Path(p).read_bytes()
            files.append({"path": Path(p).name, "sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)})
        status = "failed" if self.failure else ("partial" if self.exhausted else "complete")
        manifest = {
            "command": self.command,
            "config_hash": self.digest,
            "config": self.config.as_dict(),
            "status": status,
            "depth_exhausted": [str(t) for t in self.exhausted],
            "failure": self.failure,
            "outputs": files,
            "summary": self.summary,
            "version": __version__,
        }
        return artifacts.write_manifest(self.out_dir / "manifest.json", manifest)

    def times(self, section, feasible_count=None):
        raw = self.config.text(section, "times").lower()
        if raw == "feasible":
            count = self.stages.max_stage if feasible_count is None else feasible_count
            found = analysis.feasible_stage_times(self.stages, self.basis, count=count)
            if not found:
                raise DepthExhausted("no stage time h_j is within reach", float(self.stages.heights[-1]))
            return found
        if raw == "default" and section == "multiplicity":
            return spectral.default_probe_times(self.stages)
        return self.config.times(section)


def _build(run):
    rows = [(s.index, s.cuts, s.height, s.width, s.added_spacer_mass) for s in run.stages]
    run.csv("stages.csv", ["j", "r_j", "h_j", "w_j", "added_spacer_mass"], rows, total_mass=run.stages.total_mass)
    run.summary = {"total_mass": run.stages.total_mass, "tail_fraction": run.stages.tail_fraction}
    js = [s.index for s in run.stages]
    run.svg("stages.svg", [("h_j", js, [s.height for s in run.stages])], "stage j", "height h_j", logy=True)


def _correlate(run):
    basis = run.basis
    times = run.times("correlate")
    series = analysis.correlation_matrices(run.stages, basis, times, workers=run.workers)
    rows = []
    for t, M, used, bound, bad in zip(series.times, series.matrices, series.stage_used, series.bounds, series.exhausted):
        if bad:
            run.exhausted.append(t)
        for a in range(len(basis)):
            for b in range(len(basis)):
                rows.append((str(t), a, b, math.nan if bad else M[a, b], bound, used, bad))
    run.csv("correlations.csv", ["t", "a", "b", "value", "bound", "stage_used", "exhausted"], rows)
    run.summary = {"times": [str(t) for t in times], "basis_size": len(basis)}
    ok = ~series.exhausted
    trace = [float(np.trace(M)) for M in series.matrices[ok]]
    run.svg("correlations.svg", [("trace M(t)", np.flatnonzero(ok), trace)], "time index", "trace")


def _weaklimit(run):
    basis = run.basis
    times = run.times("weaklimit", feasible_count=5)
    names = tuple(n.strip() for n in run.config.text("weaklimit", "dictionary").split(",") if n.strip())
    a = run.config.get("weaklimit", "a", float)
    series = analysis.correlation_matrices(run.stages, basis, times, workers=run.workers)
    rows, fits = [], []
    for t, M, used, bound, bad in zip(series.times, series.matrices, series.stage_used, series.bounds, series.exhausted):
        if bad:
            run.exhausted.append(t)
            rows.append((str(t), "+".join(names), math.nan, math.nan, math.nan, math.nan, bound, used, True))
            continue
        fit = run.config.checked("weaklimit", "dictionary", lambda: analysis.fit_weak_limit(M, basis, names, a=a, t=t))
        fits.append(fit)
        rows.append((str(t), "+".join(names), fit.alpha, fit.beta, fit.gamma, fit.residual, bound, used, False))
    run.csv(
        "weaklimit.csv",
        ["t", "dictionary", "alpha", "beta", "gamma", "residual", "bound", "stage_used", "exhausted"],
        rows,
        a=a if "Avg" in names else None,
    )
    run.summary = {"times": [str(t) for t in times], "fits": len(fits)}
    idx = list(range(len(fits)))
    run.svg(
        "weaklimit.svg",
        [("alpha", idx, [f.alpha for f in fits]), ("beta", idx, [f.beta for f in fits])],
        "time index",
        "coefficient",
    )


def _lemma(run):
    basis = run.basis
    cfg = run.config
    a = cfg.get("lemma", "a", float)
    j = cfg.get("lemma", "j", int, optional=True)
    eps = cfg.get("lemma", "eps", float, optional=True)
    step = cfg.get("lemma", "step", float, optional=True)
    windows = cfg.checked("lemma", "j", lambda: analysis.default_lemma_windows(run.stages, a, j=j, eps=eps))
    scan = cfg.checked("lemma", "step", lambda: analysis.scan_lemma_times(run.stages, basis, a, windows, step, run.workers))
    run.exhausted.extend(scan.exhausted)
    rows = [
        (str(r.t), r.pair.alpha, r.pair.beta, r.pair.residual, r.integral.alpha, r.integral.gamma, r.integral.residual, r.bound)
        for r in scan.rows
    ]
    cols = ["t", "pair_alpha", "pair_beta", "pair_residual", "avg_alpha", "avg_gamma", "avg_residual", "bound"]
    run.csv("lemma.csv", cols, rows, a=a, windows=[f"{w.center}+-{w.radius}" for w in windows], step=step or a / 32)
    run.summary = {
        "best_pair": {"t": str(scan.best_pair.t), "residual": scan.best_pair.pair.residual},
        "best_integral": {"t": str(scan.best_integral.t), "residual": scan.best_integral.integral.residual},
        "improvement": scan.improvement,
        "samples": len(scan.rows),
    }
    idx = list(range(len(rows)))
    run.svg(
        "lemma.svg",
        [("{Theta, Id}", idx, [r[3] for r in rows]), ("{Theta, Avg}", idx, [r[6] for r in rows])],
        "sample (sorted by Avg residual)",
        "residual",
    )


def _coefficients(run, n):
    raw = run.config.text("spectrum", "coefficients").lower()
    if raw == "random":
        return np.random.default_rng(run.seed).standard_normal(n)
    if raw == "first":
        return np.eye(n)[0]
    try:
        c = np.array([float(v) for v in raw.split(",")])
    except ValueError:
        raise run.config.error("spectrum", "coefficients", "expected random, first or a list of reals") from None
    if len(c) != n:
        raise run.config.error("spectrum", "coefficients", f"expected {n} values, got {len(c)}")
    return c


def _spectrum(run):
    basis = run.basis
    cfg = run.config
    T, dt = cfg.get("spectrum", "T", float), cfg.get("spectrum", "dt", float)
    if not (dt > 0 and T > dt):
        raise cfg.error("spectrum", "dt", f"expected 0 < dt < T, got dt={dt}, T={T}")
    window = cfg.text("spectrum", "window")
    pad = cfg.get("spectrum", "pad", int)
    grid = np.arange(int(math.floor(T / dt + 1e-9)) + 1) * dt
    c = _coefficients(run, len(basis))
    r = spectral.autocorrelation(run.stages, basis, c, grid)
    good = len(r.times) if not r.exhausted.any() else int(np.argmax(r.exhausted))
    run.exhausted.extend(float(t) for t in r.times[r.exhausted])
    if good < 2:
        raise DepthExhausted("autocorrelation grid is out of reach", float(r.times[0]))
    run.csv(
        "autocorrelation.csv",
        ["t", "r", "bound", "exhausted"],
        zip(r.times, r.values, r.bounds, r.exhausted),
        coefficients=c,
    )
    est = cfg.checked("spectrum", "window", lambda: spectral.spectral_density(r.times[:good], r.values[:good], window, pad))
    conv = spectral.convolution_density(r.times[:good], r.values[:good], window, pad)
    overlap = spectral.overlap_statistic(est, conv)
    run.csv(
        "spectrum.csv",
        ["freq", "sigma", "sigma_conv"],
        zip(est.freqs, est.density, conv.density),
        window=est.window,
        window_length=est.window_length,
        source_span=est.source_span,
        clipped_mass={"sigma": est.clipped_mass, "sigma_conv": conv.clipped_mass},
        coefficients=c,
        note="sigma_conv is the transform of r(t)^2 (sigma identified with its reflection)",
    )
    run.summary = {
        "overlap": overlap,
        "r0": float(r.values[0]),
        "integral_sigma": est.integral(),
        "integral_sigma_conv": conv.integral(),
        "samples_used": good,
    }
    run.svg(
        "spectrum.svg",
        [("sigma", est.freqs, est.density), ("sigma * sigma", conv.freqs, conv.density)],
        "frequency (cycles per time unit)",
        "density",
    )


def _multiplicity(run):
    basis = run.basis
    times = run.times("multiplicity")
    tol = run.config.get("multiplicity", "tol", float)
    rep = run.config.checked("multiplicity", "tol", lambda: spectral.multiplicity_probe(run.stages, basis, times, tol, run.seed))
    rows = [
        (r["mode"], r["basis_size"], r["rank"], r["dimension"], r["ratio"], r["inconclusive"], r["tolerance"], " ".join(map(str, res.rank_history)))
        for r, res in zip(rep.rows(), (rep.full, rep.sym))
    ]
    run.csv(
        "multiplicity.csv",
        ["mode", "basis_size", "rank", "dimension", "ratio", "inconclusive", "tolerance", "rank_history"],
        rows,
        times=[str(t) for t in rep.times],
        note="finite-basis probe; does not certify spectral multiplicity",
    )
    run.summary = {
        "sym_cyclic_ratio": rep.sym_cyclic_ratio,
        "full_cyclic_ratio": rep.full_cyclic_ratio,
        "base_cyclic_ratio": rep.base_cyclic_ratio,
        "inconclusive": rep.inconclusive,
        "note": "probe, not proof",
    }
    run.svg(
        "multiplicity.svg",
        [
            ("full square", range(len(rep.full.rank_history)), np.array(rep.full.rank_history) / rep.full.dimension),
            ("symmetric square", range(len(rep.sym.rank_history)), np.array(rep.sym.rank_history) / rep.sym.dimension),
        ],
        "word length",
        "rank / dimension",
    )


def _decay(run):
    basis = run.basis
    times = run.times("decay")
    prof = analysis.mixing_decay_profile(run.stages, basis, times, workers=run.workers)
    run.exhausted.extend(p.t for p in prof if p.exhausted)
    rows = [(str(p.t), p.deviation, p.bound, p.stage_used, p.exhausted) for p in prof]
    run.csv("decay.csv", ["t", "deviation", "bound", "stage_used", "exhausted"], rows)
    good = [p for p in prof if not p.exhausted]
    run.summary = {"points": len(prof), "final_deviation": good[-1].deviation if good else None}
    run.svg("decay.svg", [("sup |M - Theta|", range(len(good)), [p.deviation for p in good])], "time index", "deviation", logy=True)


_HANDLERS = {
    "build": _build,
    "correlate": _correlate,
    "weaklimit": _weaklimit,
    "lemma": _lemma,
    "spectrum": _spectrum,
    "multiplicity": _multiplicity,
    "decay": _decay,
}


def run(config: RunConfig, command: str) -> Path:
    """Execute ``command``; returns the manifest path.  Errors propagate."""
    if command not in _HANDLERS:
        raise ParameterError(f"command: unknown command {command!r}")
    state = _Run(config, command)
    try:
        _HANDLERS[command](state)
    except DepthExhausted as exc:
        state.failure = f"depth exhausted: {exc}"
        state.manifest()
        raise
    return state.manifest()


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        config = load_config(args.config).with_overrides(_overrides(args))
        manifest = run(config, args.command)
    except ParameterError as exc:
        print(f"rankone: error: {exc}", file=sys.stderr)
        return 2
    except DepthExhausted as exc:
        print(f"rankone: depth exhausted: {exc} (max safe time {exc.max_safe_time:g})", file=sys.stderr)
        return 3
    except RankOneError as exc:
        print(f"rankone: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    status = json.loads(manifest.read_text())["status"]
    if status != "complete":
        print(f"rankone: warning: {status} results (see {manifest})", file=sys.stderr)
    print(manifest)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
