"""The ``spikefool`` command.

Every subcommand reads a JSON config, applies the common flag overrides
(``--seed``, ``--out``, ``--threads`` and repeated ``--set key=value``; flags
win), validates it, writes the resolved config to ``<out>/config.json`` and
then does its work. Exit status is 0 only when every output was written and
its self-consistency check passed.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys

import numpy as np

from . import attacks, event_data, harness, training
from . import snn_core as core

log = logging.getLogger("spikefool")

DEFAULTS = {
    "synth": {
        "dataset": {"n_classes": 4, "height": 16, "width": 16, "n_bins": 10,
                    "n_train": 512, "n_test": 256, "noise_rate": 0.005},
    },
    "train": {
        "dataset": None,
        "pipeline": "bptt",
        "model": {"arch": "small_cnn"},
        "train": {"lr": 3e-3, "batch_size": 64, "epochs": 12},
        "transfer": {"threshold": 1.0, "percentile": 99.0, "n_calibration": 256},
        "quantize_bits": None,
    },
    "attack": {
        "dataset": None,
        "model": None,
        "attack": {"name": "spikefool", "config": {}},
        "n_samples": None,
        "timing": True,
    },
    "patch": {
        "dataset": None,
        "model": None,
        "target": 0,
        "patch_size": [8, 8],
        "region": None,
        "placement": "bbox",
        "epochs": 1,
        "n_train": 200,
        "confidence": 0.75,
        "max_steps": 50,
        "step_size": 0.1,
    },
    "defend": {
        "dataset": None,
        "model": {"arch": "small_cnn"},
        "train": {"lr": 3e-3, "batch_size": 64, "epochs": 12},
        "trades": {"beta_rob": 0.05, "eps": 0.5, "n_pgd": 5},
        "attack": {"name": "spikefool", "config": {}},
        "n_samples": None,
        "timing": True,
    },
}


class ConfigError(ValueError):
    """An invalid config; the message names the offending field."""


# --------------------------------------------------------------------------- config handling


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_dotted(cfg, item):
    key, sep, raw = item.partition("=")
    if not sep:
        raise ConfigError(f"--set {item!r}: expected key=value")
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {p} is not a section")
    node[parts[-1]] = val


def resolve_config(command, args):
    """Defaults, then the config file, then flags."""
    cfg = copy.deepcopy(DEFAULTS.get(command, {}))
    if args.config:
        try:
            with open(args.config) as f:
                cfg = _merge(cfg, json.load(f))
        except OSError as e:
            raise ConfigError(f"config: cannot read {args.config}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config: {args.config} is not valid JSON ({e})") from None
    for item in args.set or []:
        _set_dotted(cfg, item)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    cfg["threads"] = args.threads if args.threads is not None else cfg.get("threads", os.cpu_count() or 1)
    _validate(command, cfg)
    return cfg


def _need_file(cfg, key):
    path = cfg.get(key)
    if not isinstance(path, str):
        raise ConfigError(f"{key}: required file path missing")
    if not os.path.exists(path):
        raise ConfigError(f"{key}: file {path} does not exist")


def _validate(command, cfg):
    if not isinstance(cfg.get("seed"), int):
        raise ConfigError("seed: required integer (use --seed N or set it in the config)")
    if not isinstance(cfg.get("out"), str):
        raise ConfigError("out: required output directory (use --out DIR)")
    if not isinstance(cfg["threads"], int) or cfg["threads"] < 1:
        raise ConfigError("threads: must be a positive integer")
    if command in ("train", "attack", "patch", "defend"):
        _need_file(cfg, "dataset")
    if command in ("attack", "patch"):
        _need_file(cfg, "model")
    if command == "train" and cfg["pipeline"] not in ("bptt", "analog", "transfer"):
        raise ConfigError("pipeline: must be one of bptt, analog, transfer")
    if command in ("attack", "defend"):
        name = cfg["attack"].get("name")
        if name not in ("spikefool", "cd_pgd", "prob_pgd"):
            raise ConfigError(f"attack.name: unknown attack {name!r}")
    for section, cls in (("train", training.TrainConfig), ("trades", training.TradesConfig)):
        if command in ("train", "defend") and section in cfg:
            try:
                cls(**cfg[section])
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{section}: {e}") from None


def _echo(cfg):
    os.makedirs(cfg["out"], exist_ok=True)
    with open(os.path.join(cfg["out"], "config.json"), "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")


def _dump(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=training._json_default)
        f.write("\n")


# --------------------------------------------------------------------------- commands


def cmd_synth(cfg):
    d = cfg["dataset"]
    ds = event_data.synth_dataset(d["n_classes"], d["height"], d["width"], d["n_bins"],
                                  d["n_train"], d["n_test"], d["noise_rate"], seed=cfg["seed"])
    path = os.path.join(cfg["out"], "dataset.npz")
    ds.save(path)
    log.info("wrote %s", path)
    return [path]


def _arch(model, ds, mode):
    arch = model.get("arch", "small_cnn")
    shape = list(ds.x_train.shape[2:])
    n_classes = int(model.get("n_classes", int(ds.y_train.max()) + 1))
    if arch == "small_cnn":
        return core.small_cnn(shape, n_classes, tuple(model.get("channels", (8, 16))), mode)
    if arch == "lenet5":
        return core.lenet5(shape, n_classes, tuple(model.get("channels", (8, 8, 8, 64))), mode,
                           batchnorm=model.get("batchnorm", False))
    if isinstance(arch, dict):
        return arch
    raise ConfigError(f"model.arch: unknown architecture {arch!r}")


def cmd_train(cfg):
    ds = event_data.Dataset.load(cfg["dataset"])
    tcfg = training.TrainConfig(seed=cfg["seed"], **cfg["train"])
    test = (ds.x_test, ds.y_test)
    pipeline = cfg["pipeline"]
    mode = core.SPIKING if pipeline == "bptt" else core.ANALOG
    net = core.build_network(_arch(cfg["model"], ds, mode), seed=cfg["seed"])
    if pipeline == "bptt":
        net, report = training.train_bptt(net, ds.x_train, ds.y_train, tcfg, test)
    else:
        net, report = training.train_analog(net, ds.x_train, ds.y_train, tcfg, test)
        if pipeline == "transfer":
            t = cfg["transfer"]
            net = training.transfer_weights(net, ds.x_train[:t["n_calibration"]], t["threshold"],
                                            t["percentile"])
            report["transfer"] = t
            report["transferred_test_accuracy"] = training.accuracy(net, *test)
    if cfg.get("quantize_bits"):
        report["full_precision_test_accuracy"] = training.accuracy(net, *test)
        net = training.quantize_weights(net, cfg["quantize_bits"])
        report["quantized_test_accuracy"] = training.accuracy(net, *test)
    model_path = os.path.join(cfg["out"], "model.snn")
    core.save_model(net, model_path)
    report_path = os.path.join(cfg["out"], "train_report.json")
    _dump(report, report_path)
    return [model_path, report_path]


def _subset(ds, n):
    return (ds.x_test, ds.y_test) if n is None else (ds.x_test[:n], ds.y_test[:n])


def _write_campaign(report, out, ras_format=True):
    os.makedirs(out, exist_ok=True)
    paths = [os.path.join(out, "report.json"), os.path.join(out, "report.csv")]
    harness.export_report(report, paths[0])
    harness.export_report(report, paths[1])
    # reading back is the self-consistency check for the written files
    harness.check_report(harness.load_report(paths[0]))
    harness.check_report(harness.load_report(paths[1]))
    if ras_format:
        sdir = os.path.join(out, "samples")
        adir = os.path.join(out, "adversarial")
        os.makedirs(sdir, exist_ok=True)
        os.makedirs(adir, exist_ok=True)
        for rec in report.records:
            if not rec["attacked"]:
                continue
            i = rec["index"]
            _dump(rec, os.path.join(sdir, f"{i:05d}.json"))
            event_data.save_raster(report.adversarial[i], os.path.join(adir, f"{i:05d}.ras"))
    return paths


def cmd_attack(cfg):
    ds = event_data.Dataset.load(cfg["dataset"])
    net = core.load_model(cfg["model"])
    x, y = _subset(ds, cfg["n_samples"])
    report = harness.run_campaign(net, x, y, cfg["attack"], cfg["seed"], cfg["threads"], cfg["timing"])
    return _write_campaign(report, cfg["out"])


def cmd_patch(cfg):
    ds = event_data.Dataset.load(cfg["dataset"])
    net = core.load_model(cfg["model"])
    T, P = ds.x_train.shape[1:3]
    shape = (T, P) + tuple(cfg["patch_size"])
    region = tuple(cfg["region"]) if cfg["region"] else None
    n = cfg["n_train"]
    patch = attacks.train_patch(net, ds.x_train[:n], ds.y_train[:n], cfg["target"], shape, region,
                                cfg["confidence"], cfg["epochs"], cfg["seed"], cfg["max_steps"],
                                cfg["step_size"])
    baseline = attacks.random_patch(shape, seed=cfg["seed"], target_label=cfg["target"])
    placement = region if region else cfg["placement"]
    result = {
        "target": cfg["target"],
        "patch_shape": list(shape),
        "trained": harness.patch_campaign(net, ds.x_test, ds.y_test, patch, placement, cfg["seed"]),
        "random": harness.patch_campaign(net, ds.x_test, ds.y_test, baseline, placement, cfg["seed"]),
    }
    patch_path = os.path.join(cfg["out"], "patch.ras")
    event_data.save_raster(patch.data, patch_path)
    report_path = os.path.join(cfg["out"], "patch_report.json")
    _dump(result, report_path)
    return [patch_path, report_path]


def cmd_defend(cfg):
    ds = event_data.Dataset.load(cfg["dataset"])
    tcfg = training.TrainConfig(seed=cfg["seed"], **cfg["train"])
    init = core.build_network(_arch(cfg["model"], ds, core.SPIKING), seed=cfg["seed"])
    test = (ds.x_test, ds.y_test)
    base, base_rep = training.train_bptt(init, ds.x_train, ds.y_train, tcfg, test)
    trades = training.TradesConfig(**cfg["trades"])
    robust, rob_rep = training.train_trades(init, ds.x_train, ds.y_train, tcfg, trades, test)
    x, y = _subset(ds, cfg["n_samples"])
    out = cfg["out"]
    paths = []
    summary = {"trades": cfg["trades"]}
    for name, net, rep in (("baseline", base, base_rep), ("trades", robust, rob_rep)):
        sub = os.path.join(out, name)
        os.makedirs(sub, exist_ok=True)
        core.save_model(net, os.path.join(sub, "model.snn"))
        _dump(rep, os.path.join(sub, "train_report.json"))
        camp = harness.run_campaign(net, x, y, cfg["attack"], cfg["seed"], cfg["threads"], cfg["timing"])
        paths += _write_campaign(camp, os.path.join(sub, "attack"), ras_format=False)
        summary[name] = {"test_accuracy": rep.get("test_accuracy"), "success_rate": camp.success_rate,
                         "median_l0": camp.median_l0, "median_queries": camp.median_queries}
    summary["identical_weights"] = all(
        np.array_equal(a[2], b[2]) for a, b in zip(base.parameters(), robust.parameters()))
    path = os.path.join(out, "defend_report.json")
    _dump(summary, path)
    return paths + [path]


def _lam(rep):
    cfg = rep.attack.get("config") or {}
    return cfg.get("lam", attacks.SpikeFoolConfig.lam if rep.attack.get("name") == "spikefool" else None)


def report_table(paths):
    """Rows of the merged summary table, sorted by attack name then lambda."""
    rows = []
    for p in paths:
        rep = harness.load_report(p)
        harness.check_report(rep)
        rows.append({"run": p, "attack": rep.attack.get("name"), "lam": _lam(rep),
                     "n": rep.n_initially_correct, "success_rate": rep.success_rate,
                     "median_l0": rep.median_l0, "median_queries": rep.median_queries,
                     "median_elapsed_s": rep.median_elapsed_s})
    rows.sort(key=lambda r: (r["attack"] or "", r["lam"] if r["lam"] is not None else -1.0, r["run"]))
    return rows


def _fmt(v, spec):
    return "-" if v is None else format(v, spec)


def format_table(rows):
    lines = [f"{'attack':<10} {'lambda':>6} {'n':>5} {'success%':>9} {'med L0':>8} {'med q':>7} {'med s':>8}  run"]
    for r in rows:
        lines.append(f"{r['attack']:<10} {_fmt(r['lam'], '>6.2f')} {r['n']:>5} "
                     f"{_fmt(r['success_rate'], '>9.2f')} {_fmt(r['median_l0'], '>8.1f')} "
                     f"{_fmt(r['median_queries'], '>7.1f')} {_fmt(r['median_elapsed_s'], '>8.3f')}  {r['run']}")
    return "\n".join(lines)


def cmd_report(paths, out=None):
    rows = report_table(paths)
    print(format_table(rows))
    if out:
        os.makedirs(out, exist_ok=True)
        path = os.path.join(out, "summary.json")
        _dump(rows, path)
        return [path]
    return []


# --------------------------------------------------------------------------- entry point

COMMANDS = {"synth": cmd_synth, "train": cmd_train, "attack": cmd_attack, "patch": cmd_patch,
            "defend": cmd_defend}


def build_parser():
    parser = argparse.ArgumentParser(prog="spikefool", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["report"]:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, help="worker threads (default: all cores)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field, e.g. attack.config.lam=3")
        if name == "report":
            p.add_argument("reports", nargs="+", help="campaign report.json files")
    return parser


def main(argv=None):
    logging.basicConfig(level=os.environ.get("SPIKEFOOL_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            cmd_report(args.reports, args.out)
            return 0
        cfg = resolve_config(args.command, args)
        _echo(cfg)
        COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"spikefool {args.command}: config error: {e}", file=sys.stderr)
        return 2
    except (harness.ReportInconsistency, ValueError, OSError) as e:
        print(f"spikefool {args.command}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
