"""Command-line front end: simulate, fit, ppc, coverage, summarize.

Every subcommand takes ``--config`` (YAML) and writes its outputs plus a
manifest to the output directory. Exit codes: 0 success, 2 config error,
3 data error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .archive_io import read_archive, write_archive, write_summary
from .config import chain_config, echo, load_config, mock_config, model_spec, substream
from .diagnostics import (
    coverage_summary,
    dump_json,
    format_ppc_table,
    run_ppc,
    score_coverage,
)
from .errors import ConfigError, DataError, TabreconError
from .hierarchy import load_counts, load_hierarchy, write_counts, write_hierarchy
from .mockdata import simulate
from .perturbation import MinimalPerturbConfig
from .priors import beta_contrasts, report_beta_contrasts
from .sampler import run_chain

log = logging.getLogger("tabrecon")


def _path(cfg, key, required=True):
    val = cfg["paths"].get(key)
    if val is None:
        if required:
            raise ConfigError(f"paths.{key} is required")
        return None
    return Path(val)


def _out(cfg) -> Path:
    out = _path(cfg, "out", required=False) or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _existing(cfg, key) -> Path:
    p = _path(cfg, key)
    if not p.exists():
        raise DataError(f"paths.{key} does not exist: {p}")
    return p


def _manifest(out: Path, command: str, cfg: dict, **extra) -> None:
    payload = {"command": command, "version": __version__, "seed": cfg["seed"], "config": echo(cfg)}
    payload.update(extra)
    dump_json(payload, out / f"{command}_manifest.json")


def cmd_simulate(cfg: dict) -> int:
    mock = mock_config(cfg)
    out = _out(cfg)
    rng = np.random.default_rng(substream(cfg["seed"], "simulate"))
    hierarchy = totals = None
    if cfg["paths"].get("hierarchy"):
        hierarchy = load_hierarchy(_existing(cfg, "hierarchy"))
    if cfg["paths"].get("totals"):
        if hierarchy is None:
            raise ConfigError("paths.totals needs paths.hierarchy")
        t = load_counts(_existing(cfg, "totals"), hierarchy, perturbed=True)
        totals = tuple(t.level(k)[:, -1] for k in (1, 2, 3))
    ds = simulate(mock, hierarchy=hierarchy, totals=totals, rng=rng)
    write_hierarchy(ds.hierarchy, out / "hierarchy.csv")
    write_counts(ds.truth, out / "truth.csv")
    write_counts(ds.observation, out / "observed.csv")
    manifest = dict(ds.manifest)
    manifest.update({"version": __version__, "root_seed": cfg["seed"], "config": echo(cfg)})
    dump_json(manifest, out / "manifest.json")
    log.info("wrote truth and observation for %s units to %s", ds.hierarchy.sizes, out)
    return 0


def cmd_fit(cfg: dict, resume: bool = False) -> int:
    spec = model_spec(cfg)
    chains = chain_config(cfg)
    h = load_hierarchy(_existing(cfg, "hierarchy"))
    obs = load_counts(_existing(cfg, "counts"), h, perturbed=spec.suppress_threshold >= 2)
    out = _out(cfg)
    ckpt = out / "checkpoints" if chains.checkpoint_interval else None
    archive = run_chain(obs, h, spec, chains, checkpoint_dir=ckpt, resume=resume)
    write_archive(archive, out, {"seed": cfg["seed"], "config": echo(cfg)})
    if spec.geostatistical and archive.n_samples:
        (out / "beta_contrasts.txt").write_text(report_beta_contrasts(archive.beta_draws()).format_table("IRSAD decile"))
    _manifest(out, "fit", cfg, acceptance_rates=archive.acceptance_rates, rhat_max=archive.meta.get("rhat", {}).get("max"))
    return 0


def _archive_dir(cfg) -> Path:
    p = cfg["paths"].get("archive") or cfg["paths"].get("out")
    if p is None:
        raise ConfigError("paths.archive is required")
    return Path(p)


def cmd_ppc(cfg: dict) -> int:
    h = load_hierarchy(_existing(cfg, "hierarchy"))
    spec = model_spec(cfg)
    obs = load_counts(_existing(cfg, "counts"), h, perturbed=spec.suppress_threshold >= 2)
    archive = read_archive(_archive_dir(cfg), h)
    n_rep = int(cfg["diagnostics"].get("n_replicates", 100))
    classes = cfg["diagnostics"].get("ppc_classes", "focal")
    if isinstance(classes, list):
        classes = [int(c) - 1 for c in classes]
    rng = np.random.default_rng(substream(cfg["seed"], "ppc"))
    perturb = MinimalPerturbConfig(spec.sigma_err, spec.suppress_threshold)
    try:
        agg, row = run_ppc(archive, obs, n_rep, rng, perturb, classes)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    out = _out(cfg)
    (out / "ppc.txt").write_text(
        "aggregation gap (level-1 sums minus level-2 outputs)\n" + format_ppc_table({"Data": agg})
        + "\nrow-sum gap (level-1 class sums minus row totals)\n" + format_ppc_table({"Data": row})
    )
    dump_json({"aggregation_gap": agg.to_dict(), "rowsum_gap": row.to_dict()}, out / "ppc.json")
    _manifest(out, "ppc", cfg)
    return 0


def cmd_coverage(cfg: dict) -> int:
    reps = cfg["coverage"].get("replicates")
    if not reps:
        reps = [{"archive": str(_archive_dir(cfg)), "truth": cfg["paths"].get("truth")}]
    reports = []
    for r, entry in enumerate(reps):
        if isinstance(entry, str):
            entry = {"archive": entry, "truth": str(Path(entry) / "truth.csv")}
        adir = Path(entry["archive"])
        hpath = Path(entry.get("hierarchy") or cfg["paths"].get("hierarchy") or adir / "hierarchy.csv")
        tpath = entry.get("truth")
        if tpath is None or not Path(tpath).exists():
            raise DataError(f"replicate {r}: truth file missing")
        if not hpath.exists():
            raise DataError(f"replicate {r}: hierarchy file missing ({hpath})")
        h = load_hierarchy(hpath)
        truth = load_counts(tpath, h, perturbed=False)
        archive = read_archive(adir, h)
        try:
            reports.append(score_coverage(archive, truth, replicate=r))
        except ValueError as exc:
            raise DataError(str(exc)) from None
    out = _out(cfg)
    summary = coverage_summary(reports)
    dump_json(summary, out / "coverage.json")
    with open(out / "coverage.csv", "w") as fh:
        fh.write("replicate,level1,level2,level3\n")
        for rep in reports:
            fh.write(",".join([str(rep.replicate)] + [f"{x:.4f}" for x in rep.fractions]) + "\n")
        fh.write(",".join(["mean"] + [f"{x:.4f}" for x in summary["mean"]]) + "\n")
    _manifest(out, "coverage", cfg, mean=summary["mean"])
    return 0


def cmd_summarize(cfg: dict) -> int:
    h = load_hierarchy(_existing(cfg, "hierarchy"))
    archive = read_archive(_archive_dir(cfg), h)
    if archive.n_samples == 0:
        raise DataError("archive holds no samples")
    out = _out(cfg)
    write_summary(archive, out / "summary.csv")
    beta = archive.beta_draws()
    if beta.size:
        (out / "beta_contrasts.txt").write_text(report_beta_contrasts(beta).format_table("IRSAD decile"))
        np.savetxt(out / "beta_contrast_draws.csv", beta_contrasts(beta), delimiter=",", fmt="%.6g")
    _manifest(out, "summarize", cfg, n_samples=archive.n_samples)
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "ppc": cmd_ppc,
    "coverage": cmd_coverage,
    "summarize": cmd_summarize,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tabrecon", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--seed", type=int, help="root seed (overrides config)")
        p.add_argument("--threads", type=int, help="worker threads (overrides config)")
        p.add_argument("--out", help="output directory (overrides paths.out)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "fit":
            p.add_argument("--resume", action="store_true", help="continue from checkpoints in the output directory")
    return parser


def _fail(kind: str, code: int, reason: str) -> int:
    reason = " ".join(str(reason).split()).replace('"', "'")
    print(f'tabrecon: error={kind} code={code} reason="{reason}"', file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "threads": args.threads, "out": args.out})
        if args.command == "fit":
            return cmd_fit(cfg, resume=args.resume)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        return _fail("config", exc.exit_code, exc)
    except DataError as exc:
        return _fail("data", exc.exit_code, exc)
    except TabreconError as exc:
        return _fail("numerical", exc.exit_code, exc)
    except ArithmeticError as exc:
        return _fail("numerical", 4, exc)


if __name__ == "__main__":
    sys.exit(main())
