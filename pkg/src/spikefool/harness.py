"""Attack campaigns, metrics and report export.

A campaign attacks every initially-correct sample of a dataset and keeps one
record per sample. All summary numbers are derived from those records, so a
report can always be re-checked against itself (:func:`check_report`).
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import attacks
from . import snn_core as core

__all__ = [
    "SCHEMA_VERSION",
    "CSV_COLUMNS",
    "CampaignReport",
    "ReportInconsistency",
    "run_campaign",
    "make_attack",
    "sample_seed",
    "perturbation_time_profile",
    "confusion_matrix",
    "patch_campaign",
    "export_report",
    "load_report",
    "check_report",
    "summarize",
]

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CSV_COLUMNS = ("index", "label", "pred", "attacked", "success", "adv_label", "l0", "queries",
               "elapsed_s", "n_added", "n_removed", "added_per_bin", "removed_per_bin")


class ReportInconsistency(ValueError):
    """A report's summary does not match its per-sample records."""


@dataclass
class CampaignReport:
    attack: dict
    seed: int
    n_classes: int
    n_bins: int
    records: list
    success_rate: float | None = None
    median_l0: float | None = None
    median_queries: float | None = None
    median_elapsed_s: float | None = None
    n_samples: int = 0
    n_initially_correct: int = 0
    confusion: list = field(default_factory=list)
    n_added: int = 0
    n_removed: int = 0
    time_profile: dict = field(default_factory=dict)
    # adversarial rasters by sample index; kept in memory, never serialized
    adversarial: dict = field(default_factory=dict, repr=False, compare=False)

    def to_dict(self):
        d = {k: getattr(self, k) for k in (
            "attack", "seed", "n_classes", "n_bins", "success_rate", "median_l0",
            "median_queries", "median_elapsed_s", "n_samples", "n_initially_correct",
            "confusion", "n_added", "n_removed", "time_profile", "records")}
        d["schema_version"] = SCHEMA_VERSION
        return d


def _median(values):
    return float(np.median(values)) if len(values) else None


def sample_seed(seed, index):
    """Independent per-sample seed derived from the campaign seed."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def make_attack(spec):
    """Turn an attack spec ``{"name": ..., "config": {...}}`` into a callable.

    The callable takes ``(net, x, y, seed)`` and returns an ``AttackResult``.
    """
    name = spec.get("name")
    cfg = dict(spec.get("config") or {})
    if name == "spikefool":
        sf = attacks.SpikeFoolConfig(**cfg)
        return lambda net, x, y, seed: attacks.spikefool(net, x, sf, label=y)
    if name == "cd_pgd":
        return lambda net, x, y, seed: attacks.cd_pgd(net, x, y, **cfg)
    if name == "prob_pgd":
        pp = attacks.ProbPgdConfig(**cfg)
        return lambda net, x, y, seed: attacks.prob_pgd(net, x, y, pp, seed=seed)
    raise ValueError(f"unknown attack {name!r}; expected spikefool, cd_pgd or prob_pgd")


def _per_bin(x, x_adv):
    diff = np.asarray(x_adv).astype(np.int64) - np.asarray(x).astype(np.int64)
    axes = tuple(range(1, diff.ndim))
    added = np.clip(diff, 0, None).sum(axis=axes)
    removed = np.clip(-diff, 0, None).sum(axis=axes)
    return added.astype(int).tolist(), removed.astype(int).tolist()


def _attack_one(net, attack, x, y, idx, seed, pred):
    rec = {"index": int(idx), "label": int(y), "pred": int(pred), "attacked": bool(pred == y),
           "success": None, "adv_label": None, "l0": None, "queries": None,
           "elapsed_s": None, "n_added": None, "n_removed": None,
           "added_per_bin": None, "removed_per_bin": None}
    if pred != y:
        return rec, None
    res = attack(net, x, int(y), sample_seed(seed, idx))
    added, removed = _per_bin(x, res.x_adv)
    rec.update(success=bool(res.success), adv_label=int(res.adversarial_label), l0=int(res.l0),
               queries=int(res.queries), elapsed_s=float(res.elapsed_s),
               n_added=int(sum(added)), n_removed=int(sum(removed)),
               added_per_bin=added, removed_per_bin=removed)
    return rec, res.x_adv


def summarize(report: CampaignReport):
    """Recompute every summary field of ``report`` from its records."""
    recs = report.records
    attacked = [r for r in recs if r["attacked"]]
    wins = [r for r in attacked if r["success"]]
    report.n_samples = len(recs)
    report.n_initially_correct = len(attacked)
    if attacked:
        report.success_rate = 100.0 * len(wins) / len(attacked)
        report.median_queries = _median([r["queries"] for r in attacked])
        report.median_elapsed_s = _median([r["elapsed_s"] for r in attacked])
    else:
        report.success_rate = report.median_queries = report.median_elapsed_s = None
    report.median_l0 = _median([r["l0"] for r in wins])
    report.confusion = confusion_matrix(recs, report.n_classes).tolist()
    report.n_added = int(sum(r["n_added"] for r in wins))
    report.n_removed = int(sum(r["n_removed"] for r in wins))
    report.time_profile = perturbation_time_profile(recs, report.n_bins)
    return report


def run_campaign(net, x, y, attack_spec, seed=0, threads=1, timing=True) -> CampaignReport:
    """Attack every initially-correct sample of ``(x, y)``.

    Samples are processed by up to ``threads`` workers, but records are
    gathered by sample index so the report does not depend on scheduling.
    With ``timing=False`` elapsed times are recorded as 0 for byte-stable
    output.
    """
    attack = make_attack(attack_spec)
    x = np.asarray(x)
    y = np.asarray(y).astype(int)
    preds = [int(np.argmax(core.forward(net, xi)[0])) for xi in x]
    jobs = range(len(x))

    def job(i):
        return _attack_one(net, attack, x[i], y[i], i, seed, preds[i])

    if threads > 1 and len(x) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(job, jobs))
    else:
        out = [job(i) for i in jobs]
    records = [rec for rec, _ in out]
    if not timing:
        for rec in records:
            if rec["attacked"]:
                rec["elapsed_s"] = 0.0
    report = CampaignReport(attack=attack_spec, seed=int(seed), n_classes=net.n_classes,
                            n_bins=int(x.shape[1]) if x.ndim == 5 else 0, records=records)
    report.adversarial = {rec["index"]: adv for rec, adv in out if adv is not None}
    summarize(report)
    log.info("campaign %s: %s/%s initially correct, success %.1f%%",
             attack_spec.get("name"), report.n_initially_correct, report.n_samples,
             report.success_rate or 0.0)
    return report


def perturbation_time_profile(records, n_bins=None):
    """Per-bin added and removed spike counts over successful attacks.

    Returns totals plus the 0.1 and 0.9 quantiles of the per-sample counts in
    each bin.
    """
    wins = [r for r in records if r.get("success")]
    if n_bins is None:
        n_bins = len(wins[0]["added_per_bin"]) if wins else 0
    added = np.array([r["added_per_bin"] for r in wins], dtype=float).reshape(len(wins), n_bins)
    removed = np.array([r["removed_per_bin"] for r in wins], dtype=float).reshape(len(wins), n_bins)

    def q(a, p):
        return np.quantile(a, p, axis=0).tolist() if len(a) else [0.0] * n_bins

    return {
        "added": added.sum(axis=0).astype(int).tolist(),
        "removed": removed.sum(axis=0).astype(int).tolist(),
        "added_q10": q(added, 0.1), "added_q90": q(added, 0.9),
        "removed_q10": q(removed, 0.1), "removed_q90": q(removed, 0.9),
    }


def confusion_matrix(records, n_classes):
    """Counts of (original, adversarial) label pairs over successful attacks."""
    m = np.zeros((n_classes, n_classes), dtype=int)
    for r in records:
        if r.get("success"):
            m[r["label"], r["adv_label"]] += 1
    return m


def patch_campaign(net, x, y, patch: attacks.Patch, placement="bbox", seed=0):
    """Targeted success rate of ``patch`` on samples not of the target class.

    ``placement`` is ``"bbox"`` (random position inside each sample's active
    bounding box), ``"frame"`` (anywhere) or an explicit region
    ``(y0, x0, y1, x1)``. The rate is a percentage, or None when no sample
    is eligible.
    """
    rng = np.random.default_rng(seed)
    target = patch.target_label
    h, w = patch.data.shape[-2:]
    n = hits = 0
    for xi, yi in zip(np.asarray(x), np.asarray(y)):
        if int(yi) == target:
            continue
        frame = xi.shape[-2:]
        if placement == "bbox":
            region = attacks.active_bbox(xi)
        elif placement == "frame":
            region = (0, 0) + tuple(frame)
        else:
            region = tuple(placement)
        pos = attacks.random_position(frame, (h, w), region, rng)
        counts, _ = core.forward(net, attacks.apply_patch(xi, patch, pos))
        n += 1
        hits += int(np.argmax(counts)) == target
    return {"target": target, "n_eligible": n, "n_success": hits,
            "success_rate": 100.0 * hits / n if n else None}


def check_report(report: CampaignReport):
    """Raise ``ReportInconsistency`` unless the summary matches the records."""
    stored = report.to_dict()
    fresh = summarize(CampaignReport(report.attack, report.seed, report.n_classes, report.n_bins,
                                     report.records)).to_dict()
    for key, val in fresh.items():
        if key == "records":
            continue
        if not _close(stored[key], val):
            raise ReportInconsistency(f"{key}: stored {stored[key]!r}, recomputed {val!r}")
    return True


def _close(a, b):
    if isinstance(a, float) or isinstance(b, float):
        return a is not None and b is not None and abs(a - b) <= 1e-9 * max(1.0, abs(b))
    if isinstance(a, dict):
        return a.keys() == b.keys() and all(_close(a[k], b[k]) for k in a)
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_close(u, v) for u, v in zip(a, b))
    return a == b


def export_report(report: CampaignReport, path, format=None):
    """Write ``report`` as JSON or as a per-sample CSV (format from suffix)."""
    check_report(report)
    format = format or os.path.splitext(str(path))[1].lstrip(".") or "json"
    if format == "json":
        with open(path, "w") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
    elif format == "csv":
        with open(path, "w", newline="") as f:
            out = csv.writer(f)
            out.writerow(["# schema_version", SCHEMA_VERSION, "attack", json.dumps(report.attack, sort_keys=True),
                          "seed", report.seed, "n_classes", report.n_classes, "n_bins", report.n_bins])
            out.writerow(CSV_COLUMNS)
            for r in report.records:
                out.writerow([_csv_cell(r[c]) for c in CSV_COLUMNS])
    else:
        raise ValueError(f"unknown report format {format!r}")


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, list):
        return ";".join(str(int(u)) for u in v)
    return v


def _parse_cell(col, s):
    if s == "":
        return None
    if col in ("added_per_bin", "removed_per_bin"):
        return [int(u) for u in s.split(";")] if s else []
    if col in ("attacked", "success"):
        return s == "True"
    if col == "elapsed_s":
        return float(s)
    return int(s)


def load_report(path, format=None) -> CampaignReport:
    """Read a report written by :func:`export_report`."""
    format = format or os.path.splitext(str(path))[1].lstrip(".") or "json"
    if format == "json":
        with open(path) as f:
            d = json.load(f)
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema_version')!r}")
        d.pop("schema_version")
        return CampaignReport(**d)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    head = rows[0]
    if int(head[1]) != SCHEMA_VERSION or tuple(rows[1]) != CSV_COLUMNS:
        raise ValueError("unsupported CSV report layout")
    records = [{c: _parse_cell(c, s) for c, s in zip(CSV_COLUMNS, row)} for row in rows[2:]]
    # an empty per-bin list and "not attacked" both serialize as ""
    for r in records:
        if r["attacked"]:
            r["added_per_bin"] = r["added_per_bin"] or []
            r["removed_per_bin"] = r["removed_per_bin"] or []
    rep = CampaignReport(json.loads(head[3]), int(head[5]), int(head[7]), int(head[9]), records)
    return summarize(rep)
