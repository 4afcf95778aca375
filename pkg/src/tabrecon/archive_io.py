"""Reading and writing posterior archives as plain delimited-text files.

An archive directory holds:

``summary.csv``
    one row per cell per level with mean, median, 95% interval and P(0)
``samples.csv``
    sparse triplets ``chain,sample,unit_id,class_index,count``; the first
    sample of each chain lists its nonzero cells, later samples only the
    cells that changed since the previous one
``trace.csv``
    per retained sample log-likelihood and acceptance rate
``geo_trace.csv``
    decile effects and hyper-parameters (geostatistical runs only)
``run.json``
    metadata: seed, config echo, acceptance rates, convergence report
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError
from .hierarchy import SpatialHierarchy
from .sampler import ChainResult, PosteriorArchive, SampleStore, summarize

SUMMARY_HEADER = ["level", "unit_id", "class_index", "mean", "median", "q025", "q975", "width", "p_zero"]
SAMPLES_HEADER = ["chain", "sample", "unit_id", "class_index", "count"]


def write_summary(archive: PosteriorArchive, path) -> None:
    summ = summarize(archive)
    h = archive.hierarchy
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for k in (1, 2, 3):
            s = summ[k]
            ids = h.unit_ids[k - 1]
            for j in range(len(ids)):
                for i in range(archive.M):
                    w.writerow([k, ids[j], i + 1, f"{s.mean[j, i]:.6g}", f"{s.median[j, i]:g}",
                                f"{s.q025[j, i]:g}", f"{s.q975[j, i]:g}", f"{s.width[j, i]:g}",
                                f"{s.p_zero[j, i]:.6g}"])


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_archive(archive: PosteriorArchive, outdir, extra_meta: dict | None = None) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    h = archive.hierarchy
    ids = np.asarray(h.unit_ids[0], dtype=object)
    k_cls = archive.M - 1

    with open(out / "samples.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SAMPLES_HEADER)
        for chain in archive.chains:
            store = chain.store
            if store.first is None:
                continue
            blocks = [(np.flatnonzero(store.first), store.first[np.flatnonzero(store.first)])]
            blocks += store.deltas
            for s, (idx, val) in enumerate(blocks):
                idx = np.asarray(idx)
                rows = zip(ids[idx // k_cls], (idx % k_cls + 1).tolist(), np.asarray(val).tolist())
                w.writerows([chain.chain_id, s, u, c, v] for u, c, v in rows)

    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "sample", "loglik", "acceptance"])
        for chain in archive.chains:
            for s, (ll, acc) in enumerate(zip(chain.loglik, chain.acceptance)):
                w.writerow([chain.chain_id, s, repr(float(ll)), f"{acc:.6g}"])

    if any(c.beta for c in archive.chains):
        with open(out / "geo_trace.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["chain", "sample"] + [f"beta_{d}" for d in range(1, 11)] + ["gp_var", "gp_range", "sigma_iid"])
            for chain in archive.chains:
                for s, (b, hyp) in enumerate(zip(chain.beta, chain.hyper)):
                    w.writerow([chain.chain_id, s] + [repr(float(x)) for x in b] + [repr(float(x)) for x in hyp])

    if archive.n_samples:
        write_summary(archive, out / "summary.csv")

    meta = dict(archive.meta)
    meta.update({
        "version": __version__,
        "M": archive.M,
        "sizes": list(h.sizes),
        "chains": [
            {"chain": c.chain_id, "n_samples": len(c.store), "acceptance_rate": c.acceptance_rate,
             "n_proposed": c.n_proposed, "n_accepted": c.n_accepted, "n_boundary_rejections": c.n_boundary,
             "audit_max_abs": c.audit_max}
            for c in archive.chains
        ],
    })
    if extra_meta:
        meta.update(extra_meta)
    with open(out / "run.json", "w") as fh:
        json.dump(meta, fh, indent=2, default=float)
    return out


def read_archive(outdir, hierarchy: SpatialHierarchy) -> PosteriorArchive:
    """Rebuild an archive (samples, traces, metadata) from ``write_archive`` output."""
    out = Path(outdir)
    meta_path, samples_path = out / "run.json", out / "samples.csv"
    if not meta_path.exists() or not samples_path.exists():
        raise DataError(f"no archive found in {out}")
    meta = json.loads(meta_path.read_text())
    m = int(meta["M"])
    if list(hierarchy.sizes) != list(meta["sizes"]):
        raise DataError("archive was written for a different hierarchy")
    k_cls = m - 1
    n1 = hierarchy.sizes[0]
    index = {uid: j for j, uid in enumerate(hierarchy.unit_ids[0])}

    per_chain: dict[int, dict[int, list]] = {}
    with open(samples_path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != SAMPLES_HEADER:
            raise DataError("bad samples.csv header")
        for chain, sample, uid, cls, cnt in reader:
            try:
                flat = index[uid] * k_cls + int(cls) - 1
            except KeyError:
                raise DataError(f"unknown unit_id {uid!r} in samples") from None
            per_chain.setdefault(int(chain), {}).setdefault(int(sample), []).append((flat, int(cnt)))

    chains = []
    for info in meta.get("chains", []):
        cid = info["chain"]
        store = SampleStore((n1, k_cls))
        cur = np.zeros(n1 * k_cls, dtype=np.int64)
        rows = per_chain.get(cid, {})
        for s in range(info["n_samples"]):
            for flat, cnt in rows.get(s, []):
                cur[flat] = cnt
            store.append(cur)
        chain = ChainResult(cid, store, n_proposed=info["n_proposed"], n_accepted=info["n_accepted"],
                            n_boundary=info.get("n_boundary_rejections", 0), audit_max=info.get("audit_max_abs", 0.0))
        chains.append(chain)
    by_id = {c.chain_id: c for c in chains}

    trace = out / "trace.csv"
    if trace.exists():
        with open(trace, newline="") as fh:
            for row in csv.DictReader(fh):
                c = by_id[int(row["chain"])]
                c.loglik.append(float(row["loglik"]))
                c.acceptance.append(float(row["acceptance"]))
    geo = out / "geo_trace.csv"
    if geo.exists():
        with open(geo, newline="") as fh:
            for row in csv.DictReader(fh):
                c = by_id[int(row["chain"])]
                c.beta.append(np.array([float(row[f"beta_{d}"]) for d in range(1, 11)]))
                c.hyper.append((float(row["gp_var"]), float(row["gp_range"]), float(row["sigma_iid"])))
    return PosteriorArchive(hierarchy, m, chains, meta)
