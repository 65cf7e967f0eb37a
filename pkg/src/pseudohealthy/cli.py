"""Command-line interface.

Every subcommand works on one output directory (``--out-dir``). Stage
subcommands run a single pipeline stage against whatever earlier stages left
there; ``run`` executes the whole suite.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .pipeline.config import ConfigError, ExperimentConfig, config_from_dict, load_config, save_config

log = logging.getLogger("pseudohealthy")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for runtime failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _global_options(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="experiment config (JSON)")
    parser.add_argument("--seed", type=int, default=d, help="seed for every random stream")
    parser.add_argument("--out-dir", default=d, help="output directory")
    parser.add_argument("--threads", type=int, default=d, help="BLAS/OpenMP thread limit")
    parser.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0)


GROUP_HELP = {
    "phantom": "synthetic cohorts",
    "qc": "quality control",
    "cohort": "cohort splitting",
    "simulate": "simulated anomalies",
    "model": "training and reconstruction",
    "eval": "evaluation tables",
}

STAGE_COMMANDS = {
    ("phantom", "generate"): (["data"], "synthesize the atlas and the phantom cohort"),
    ("qc", "run"): (["qc"], "score every image with the outside-brain overlap check"),
    ("cohort", "split"): (["split"], "subject-level stratified test/fold split"),
    ("simulate", "make-sets"): (["simulate"], "write the simulated hypometabolism test sets"),
    ("model", "train"): (["train"], "train one model per fold and select a fold"),
    ("eval", "metrics"): (["reconstruction", "severity", "subtypes", "healthiness"],
                          "reconstruction, severity, subtype and healthiness tables"),
    ("eval", "regional"): (["regional"], "region-wise anomaly reports"),
    ("eval", "latent"): (["latent"], "PCA, distance studies and mixed models"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pseudohealthy", description="Evaluate pseudo-healthy reconstruction models.")
    parser.add_argument("--version", action="version", version=__version__)
    _global_options(parser, suppress=False)
    groups = parser.add_subparsers(dest="group", metavar="command", parser_class=_Parser)
    groups.required = True

    sub = {}
    for (group, cmd), (_, help_) in STAGE_COMMANDS.items():
        if group not in sub:
            g = groups.add_parser(group, help=GROUP_HELP[group])
            sub[group] = g.add_subparsers(dest="cmd", metavar="subcommand", parser_class=_Parser)
            sub[group].required = True
        p = sub[group].add_parser(cmd, help=help_)
        _global_options(p, suppress=True)
        if (group, cmd) == ("model", "train"):
            p.add_argument("--fold", type=int, help="train and select only this fold")
            p.add_argument("--folds", type=int, nargs="+", help="folds to train")
            p.add_argument("--model", choices=("vae", "identity"))

    p = sub["model"].add_parser("reconstruct", help="reconstruct the volumes of a manifest")
    _global_options(p, suppress=True)
    p.add_argument("--input", help="cohort or simulated manifest (default: the test split)")
    p.add_argument("--checkpoint", help="model file, or 'identity' (default: the selected fold)")
    p.add_argument("--dest", help="output folder (default: <out-dir>/reconstructions)")

    g = groups.add_parser("report", help="plot data and figures")
    report = g.add_subparsers(dest="cmd", metavar="subcommand", parser_class=_Parser)
    report.required = True
    p = report.add_parser("emit", help="write plot-ready JSON for every available section")
    _global_options(p, suppress=True)
    p.add_argument("--figures", action="store_true", help="also render PNGs (needs matplotlib)")

    p = groups.add_parser("run", help="run the whole experiment suite")
    _global_options(p, suppress=True)
    return parser


def resolve_config(args) -> ExperimentConfig:
    """Explicit --config, else the config saved in the output directory, else defaults."""
    out_dir = getattr(args, "out_dir", None)
    if args.config:
        cfg = load_config(args.config)
    elif out_dir and (Path(out_dir) / "config.json").exists():
        cfg = load_config(Path(out_dir) / "config.json")
    else:
        cfg = config_from_dict({})
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if out_dir:
        cfg = config_from_dict({**cfg.to_dict(), "out_dir": str(out_dir)})
    return cfg


def _check_inputs(cfg: ExperimentConfig) -> None:
    for label, path in (("cohort", cfg.cohort_path), ("atlas", cfg.atlas_path)):
        if path is not None and not Path(path).exists():
            raise UsageError(f"{label} path does not exist: {path}")


def _report_status(status: dict, stages: List[str]) -> int:
    code = EXIT_OK
    for name in stages:
        st = status.get(name, {"status": "missing", "reason": ""})
        line = f"{name:15s} {st['status']}"
        if st.get("reason"):
            line += f"  ({st['reason']})"
        print(line)
        if st["status"] in ("failed", "blocked"):
            code = EXIT_FAILED
    return code


def _cmd_stages(args, cfg, stages) -> int:
    from .pipeline.experiment import Workspace, run_stages

    if args.group == "model" and args.cmd == "train":
        overrides = {}
        if args.model:
            overrides["model"] = args.model
        if args.folds is not None:
            overrides["train_folds"] = args.folds
        if args.fold is not None:
            overrides["fold"] = args.fold
        if overrides:
            cfg = config_from_dict({**cfg.to_dict(), **overrides})
    ws = Workspace(cfg, Path(cfg.out_dir))
    save_config(cfg, ws.path("config.json"))
    status = run_stages(ws, stages)
    return _report_status(status, stages)


def _cmd_run(args, cfg) -> int:
    from .pipeline.experiment import STAGES, run_experiment

    result = run_experiment(cfg)
    code = _report_status(result.status, list(STAGES))
    print(f"results in {result.out_dir}")
    return code


def _cmd_reconstruct(args, cfg) -> int:
    from .genmodel import IdentityModel, VaeModel, load_checkpoint
    from .phantom import CohortManifest
    from .pipeline.experiment import Workspace, write_manifest_index
    from .simulate import read_simulated_manifest
    from .volume import load_volume, save_volume

    ws = Workspace(cfg, Path(cfg.out_dir))
    if args.checkpoint == "identity":
        model = IdentityModel()
    elif args.checkpoint:
        model = VaeModel(load_checkpoint(args.checkpoint))
    else:
        model = ws.model
    if args.input is None:
        items = [(r.image_id, ws.volume(r)) for r in ws.test_records]
    else:
        src = Path(args.input)
        if not src.exists():
            raise UsageError(f"input manifest not found: {src}")
        first = json.loads(src.read_text().splitlines()[0])
        if "simulated_path" in first:
            items = [(f"{e.set_name}/{e.image_id}", load_volume(e.simulated_path))
                     for e in read_simulated_manifest(src)]
        else:
            m = CohortManifest.read(src)
            items = [(r.image_id, m.load(r)) for r in m.records]
    dest = Path(args.dest) if args.dest else ws.path("reconstructions")
    recons = model.reconstruct_many([v for _, v in items])
    lines = []
    for (name, _), y in zip(items, recons):
        stem = dest / name
        stem.parent.mkdir(parents=True, exist_ok=True)
        save_volume(y, stem)
        lines.append(json.dumps({"image_id": name, "path": name, "model": model.name}))
    (dest / "reconstructions.jsonl").write_text("\n".join(lines) + "\n")
    if dest.resolve().is_relative_to(ws.root.resolve()):
        write_manifest_index(ws.root)
    print(f"{len(items)} reconstructions in {dest}")
    return EXIT_OK


def _cmd_report(args, cfg) -> int:
    from .pipeline.experiment import write_manifest_index
    from .pipeline.plotdata import ReportMissingError, emit_plot_data

    root = Path(cfg.out_dir)
    try:
        result = emit_plot_data(root)
    except ReportMissingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    for name in sorted(result.written):
        print(f"{name:15s} written")
    for name, why in sorted(result.missing.items()):
        print(f"{name:15s} missing  ({why})")
    if args.figures:
        from .pipeline.figures import FiguresUnavailable, render_figures

        try:
            pngs = render_figures(root / "plots")
        except FiguresUnavailable as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_FAILED
        print(f"{len(pngs)} figures in {root / 'plots' / 'figures'}")
    write_manifest_index(root)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        cfg = resolve_config(args)
        _check_inputs(cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID

    limiter = None
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(args.threads)
    try:
        if args.group == "run":
            return _cmd_run(args, cfg)
        if args.group == "report":
            return _cmd_report(args, cfg)
        if (args.group, args.cmd) == ("model", "reconstruct"):
            return _cmd_reconstruct(args, cfg)
        return _cmd_stages(args, cfg, STAGE_COMMANDS[(args.group, args.cmd)][0])
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
