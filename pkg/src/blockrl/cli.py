"""Command-line entry point: train, ablate, frontier, plot.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .core import ConfigError
from .decoder import frontier_sweep
from .plots import CURVE_KINDS, PLOT_KINDS, curve_plot, frontier_plot, parse_plot_csv, plot_csv, render_svg
from .policy import checkpoint_text, load_checkpoint
from .trainer import PRESETS, TrainConfig, TrainingAborted, config_from_dict, metrics_csv, prompt_pools, train

log = logging.getLogger("blockrl")

OUT_ENV = "BLOCKRL_OUT"
REQUIRED_FIELDS = ("task", "iterations", "groups_per_iter", "group_size")
REDUCTION_SWEEP = ("seq-seq-seq", "seq-tok-seq", "seq-tok-tok", "tok-tok-tok")
TOGGLES = ("nll", "filter", "decoupling", "reductions", "grpo", "gae")


class UsageError(Exception):
    """Bad invocation or configuration (exit code 2)."""


# --- config -------------------------------------------------------------------


def read_config_file(path: str | Path) -> dict:
    """Parse a YAML (or JSON) mapping, reporting the line of syntax errors."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"{path}: {e.strerror}") from e
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark
        line = f" line {mark.line + 1}" if mark is not None else ""
        raise UsageError(f"{path}:{line}: {e.problem}") from e
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise UsageError(f"{path}: top level must be a mapping of TrainConfig fields")
    return data


def resolve_config(config_path: str | None, preset: str | None) -> TrainConfig:
    """Preset (default ``toy``) overlaid by the config file.

    A config file used without ``--preset`` stands alone and must name the
    core fields explicitly.
    """
    data = read_config_file(config_path) if config_path else {}
    if config_path and preset is None:
        missing = [f for f in REQUIRED_FIELDS if f not in data]
        if missing:
            raise UsageError(f"{config_path}: missing required field {missing[0]!r}")
    base = config_from_dict(PRESETS[preset or "toy"])
    try:
        return config_from_dict(data, base)
    except ConfigError as e:
        where = f"{config_path}: " if config_path else ""
        raise UsageError(f"{where}{e}") from e


def config_hash(cfg: TrainConfig) -> str:
    d = cfg.to_dict()
    d.pop("workers")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as e:
        raise UsageError(f"--seeds expects comma-separated integers, got {text!r}") from e
    if not seeds:
        raise UsageError("--seeds must list at least one seed")
    if len(set(seeds)) != len(seeds):
        raise UsageError("--seeds contains duplicates")
    return seeds


def valid_name(name: str) -> str:
    if not name or name in (".", "..") or "/" in name or "\\" in name or "\0" in name:
        raise UsageError(f"{name!r} is not a valid path component")
    return name


def output_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get(OUT_ENV) or "runs")


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# --- train ----------------------------------------------------------------------


@dataclass
class RunSummary:
    seed: int
    status: str
    config_hash: str
    iterations_completed: int
    warmup: dict
    final: dict | None
    best_aup_iteration: int
    best: dict
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"


def _ev(e) -> dict:
    return {"accuracy": e.accuracy, "tpf": e.mean_tpf, "aup": e.aup}


def run_seed(cfg: TrainConfig, seed: int, run_dir: Path) -> RunSummary:
    """Train one seed and write its artifacts; partial logs survive an abort."""
    status, error = "ok", None
    try:
        result = train(cfg, seed)
    except TrainingAborted as e:
        result, status, error = e.result, "aborted", str(e)
    best_it, best = result.best_aup()
    summary = RunSummary(
        seed=seed,
        status=status,
        config_hash=config_hash(cfg),
        iterations_completed=len(result.metrics),
        warmup=_ev(result.baseline),
        final=_ev(result.final) if result.final else None,
        best_aup_iteration=best_it,
        best=_ev(best),
        error=error,
    )
    write_atomic(run_dir / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    write_atomic(run_dir / "metrics.csv", metrics_csv(result.metrics))
    write_atomic(run_dir / "final.ckpt", checkpoint_text(result.params))
    write_atomic(run_dir / "summary.json", summary.to_json())
    return summary


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.preset)
    if args.workers:
        cfg = replace(cfg, workers=args.workers)
    seeds = parse_seeds(args.seeds)
    root = output_root(args.out) / valid_name(args.name)
    failed = 0
    for seed in seeds:
        s = run_seed(cfg, seed, root / f"seed_{seed}")
        line = f"seed {seed}: {s.status}"
        if s.final:
            line += f" acc={s.final['accuracy']:.1f} tpf={s.final['tpf']:.3f} aup={s.final['aup']:.1f}"
        line += f" best_aup_iter={s.best_aup_iteration}"
        print(line)
        if s.status != "ok":
            print(f"  aborted: {s.error}", file=sys.stderr)
            failed += 1
    print(f"artifacts in {root}")
    return 1 if failed else 0


# --- ablate -----------------------------------------------------------------------


def ablation_variants(base: TrainConfig, toggles: Sequence[str]) -> dict[str, TrainConfig]:
    """Named configs that differ from ``base`` in one component each."""
    variants = {"full": base}
    for t in toggles:
        if t == "nll":
            variants["no-nll"] = replace(base, loss=replace(base.loss, nll_coeff=0.0))
        elif t == "filter":
            variants["no-filter"] = replace(base, filter=replace(base.filter, enabled=False))
        elif t == "decoupling":
            variants["no-decoupling"] = replace(base, norm=replace(base.norm, mode="coupled"))
        elif t == "grpo":
            variants["grpo"] = replace(base, advantage_mode="grpo")
        elif t == "gae":
            variants["gae"] = replace(base, advantage_mode="gae")
        elif t == "reductions":
            for r in REDUCTION_SWEEP:
                cfg = replace(base, loss=replace(base.loss, reductions=r))
                variants[cfg.loss.reduction_label] = cfg
        else:
            raise UsageError(f"unknown ablation toggle {t!r}; choose from {', '.join(TOGGLES)}")
    return variants


# Fields each toggle may change; everything else must hash identically.
TOGGLED_FIELDS = {
    "full": (),
    "no-nll": (("loss", "nll_coeff"),),
    "no-filter": (("filter", "enabled"),),
    "no-decoupling": (("norm", "mode"),),
    "grpo": (("advantage_mode",),),
    "gae": (("advantage_mode",),),
}


def _toggled(name: str):
    return TOGGLED_FIELDS.get(name, (("loss", "reductions"),))


def controlled_hash(d: dict, names) -> str:
    """Hash of a config with every field toggled by ``names`` removed."""
    d = json.loads(json.dumps(d))
    d.pop("workers", None)
    for path in {p for n in names for p in _toggled(n)}:
        node = d
        for k in path[:-1]:
            node = node[k]
        node.pop(path[-1], None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def check_controlled(configs: dict[str, dict]) -> None:
    """Refuse comparisons whose variants differ outside their toggles."""
    hashes = {name: controlled_hash(d, configs) for name, d in configs.items()}
    if len(set(hashes.values())) > 1:
        odd = [n for n, h in hashes.items() if h != hashes["full"]]
        raise UsageError(f"variants {odd} differ from 'full' outside the toggled components")


ABLATE_COLUMNS = ("variant", "seed", "config_hash", "controlled_hash", "accuracy", "accuracy_std", "tpf", "tpf_std", "aup", "aup_std",
                  "best_iteration")


def ablation_table(results: dict[str, dict[int, dict]], configs: dict[str, dict]) -> str:
    """Per-seed rows then a ``seed=all`` row (mean and population std) per variant."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATE_COLUMNS)
    for name, per_seed in results.items():
        ch = controlled_hash(configs[name], configs)
        accs, tpfs, aups = [], [], []
        for seed in sorted(per_seed):
            s = per_seed[seed]
            b = s["best"]
            accs.append(b["accuracy"])
            tpfs.append(b["tpf"])
            aups.append(b["aup"])
            w.writerow([name, seed, s["config_hash"], ch, repr(b["accuracy"]), "", repr(b["tpf"]), "", repr(b["aup"]), "",
                        s["best_aup_iteration"]])
        h = next(iter(per_seed.values()))["config_hash"]
        w.writerow([name, "all", h, ch,
                    repr(float(np.mean(accs))), repr(float(np.std(accs))),
                    repr(float(np.mean(tpfs))), repr(float(np.std(tpfs))),
                    repr(float(np.mean(aups))), repr(float(np.std(aups))), ""])
    return buf.getvalue()


def cmd_ablate(args) -> int:
    if not args.ablate:
        raise UsageError("ablate needs --ablate TOGGLE[,TOGGLE...]")
    toggles = [t.strip() for t in args.ablate.split(",") if t.strip()]
    root = output_root(args.out) / valid_name(args.name)
    seeds = parse_seeds(args.seeds)

    if args.no_train:
        wanted = list(ablation_variants(TrainConfig(), toggles))
        present = {v: {s for s in seeds if (root / v / f"seed_{s}" / "summary.json").exists()} for v in wanted}
        common = set.intersection(*present.values())
        if not common:
            missing = [f"{v}/seed_{s}" for v in wanted for s in seeds if s not in present[v]]
            raise UsageError("no seed has runs for every variant; missing: " + ", ".join(missing))
        seeds = sorted(common)
        configs = {v: json.loads((root / v / f"seed_{seeds[0]}" / "config.json").read_text()) for v in wanted}
    else:
        base = resolve_config(args.config, args.preset)
        if args.workers:
            base = replace(base, workers=args.workers)
        cfgs = ablation_variants(base, toggles)
        configs = {v: c.to_dict() for v, c in cfgs.items()}
    check_controlled(configs)

    results: dict[str, dict[int, dict]] = {}
    failed = 0
    for v in configs:
        results[v] = {}
        for seed in seeds:
            run_dir = root / v / f"seed_{seed}"
            if args.no_train:
                s = json.loads((run_dir / "summary.json").read_text())
            else:
                s = json.loads(run_seed(cfgs[v], seed, run_dir).to_json())
                print(f"{v} seed {seed}: {s['status']} best aup {s['best']['aup']:.1f}")
            failed += s["status"] != "ok"
            results[v][seed] = s
    table = ablation_table(results, configs)
    write_atomic(root / "ablation.csv", table)
    sys.stdout.write(table)
    return 1 if failed else 0


# --- frontier / plot -----------------------------------------------------------------


FRONTIER_COLUMNS = ("threshold", "accuracy", "mean_tpf", "aup")


def cmd_frontier(args) -> int:
    cfg = resolve_config(args.config, args.preset)
    try:
        thresholds = [float(t) for t in args.thresholds.split(",")]
    except ValueError as e:
        raise UsageError(f"bad --thresholds {args.thresholds!r}") from e
    try:
        params = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as e:
        raise UsageError(f"{args.checkpoint}: {e}") from e
    if params.layout.to_dict() != cfg.layout.to_dict():
        raise UsageError("checkpoint layout does not match the config")
    _, held = prompt_pools(cfg)
    try:
        rows = frontier_sweep(params, held, thresholds, cfg.decode)
    except ConfigError as e:
        raise UsageError(str(e)) from e
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FRONTIER_COLUMNS)
    for r in rows:
        w.writerow([repr(r.threshold), repr(r.accuracy), repr(r.mean_tpf), repr(r.aup)])
    if args.out_file:
        write_atomic(Path(args.out_file), buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return 0


def _read_rows(path: str) -> list[dict]:
    try:
        with open(path, newline="") as f:
            return list(csv.DictReader(f))
    except OSError as e:
        raise UsageError(f"{path}: {e.strerror}") from e


def cmd_plot(args) -> int:
    if args.plot not in PLOT_KINDS:
        raise UsageError(f"unknown plot kind {args.plot!r}; choose from {', '.join(PLOT_KINDS)}")
    if args.from_csv:
        data = parse_plot_csv(Path(args.from_csv).read_text())
    else:
        if not args.files:
            raise UsageError("plot needs at least one input CSV")
        labels = args.labels.split(",") if args.labels else [Path(f).parent.name or Path(f).stem for f in args.files]
        if len(labels) != len(args.files):
            raise UsageError("--labels must name every input file")
        if len(set(labels)) != len(labels):
            raise UsageError("run labels must be distinct (use --labels)")
        runs = {lab: _read_rows(f) for lab, f in zip(labels, args.files)}
        need = set(FRONTIER_COLUMNS) if args.plot == "frontier" else {"iteration", CURVE_KINDS[args.plot][0]}
        for lab, rows in runs.items():
            if not rows or not need <= set(rows[0]):
                raise UsageError(f"{lab}: CSV lacks columns {sorted(need)}")
        data = frontier_plot(runs) if args.plot == "frontier" else curve_plot(args.plot, runs)
    out = Path(args.out or ".")
    write_atomic(out / f"{args.plot}.csv", plot_csv(data))
    write_atomic(out / f"{args.plot}.svg", render_svg(data))
    print(f"wrote {out / args.plot}.svg and .csv")
    return 0


# --- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blockrl", description="Block-wise parallel-decoding RL experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeds=True):
        sp.add_argument("--config", help="YAML/JSON file of TrainConfig fields")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="base preset (default: toy)")
        sp.add_argument("--out", help=f"output root (default: ${OUT_ENV} or ./runs)")
        sp.add_argument("--workers", type=int, default=0, help="rollout worker processes")
        if seeds:
            sp.add_argument("--seeds", default="0", help="comma-separated seeds")
            sp.add_argument("--name", default="run", help="experiment name (a path component)")

    t = sub.add_parser("train", help="train one config over several seeds")
    common(t)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="train and compare ablation variants")
    common(a)
    a.add_argument("--ablate", required=True, help=f"toggles: {','.join(TOGGLES)}")
    a.add_argument("--no-train", action="store_true", help="only tabulate existing runs")
    a.set_defaults(func=cmd_ablate)

    f = sub.add_parser("frontier", help="accuracy/TPF/AUP across confidence thresholds")
    common(f, seeds=False)
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--thresholds", default="0.5,0.7,0.9,0.99")
    f.add_argument("--out-file", help="write the table here as well as stdout")
    f.set_defaults(func=cmd_frontier)

    pl = sub.add_parser("plot", help="render a curve or frontier plot to SVG plus CSV")
    pl.add_argument("--plot", required=True, help=f"kind: {', '.join(PLOT_KINDS)}")
    pl.add_argument("files", nargs="*", help="metrics CSVs (or frontier CSVs for kind=frontier)")
    pl.add_argument("--labels", help="comma-separated series names")
    pl.add_argument("--from-csv", help="re-render from a plot CSV companion")
    pl.add_argument("--out", help="output directory (default: .)")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"blockrl: error: {e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"blockrl: config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime error
        print(f"blockrl: runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
