#!/usr/bin/env python3
"""
divscan command line

Every subcommand writes one report plus a `<report>.manifest.json` run
manifest, prints the report path on stdout and logs to stderr.
Exit codes: 0 success, 1 I/O error, 2 validation error.
"""

import argparse
import hashlib
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

from divscan.config import DEFAULT_CLAMP_EPS, DEFAULT_GRID_STEP, TOOL_VERSION, Settings
from divscan.diversity import MEASURES, ClusterParams, model_diversity
from divscan.errors import BundleIOError, NumericalError, ValidationError
from divscan.gbdt_importance import DEFAULT_FEATURES, GbdtConfig, importance_table
from divscan.repr_metrics import CkaReport, abstraction_report, cka, class_metrics
from divscan.tensor_io import (
    load_accuracy_table,
    load_activations,
    load_bundle,
    load_embeddings,
    load_feature_table,
    load_numeric_column,
    render_json,
    write_bundle,
    write_report,
    write_text,
)
from divscan.toytrain import (
    DEFAULT_CYCLES,
    InjectionConfig,
    ToyModel,
    centroid_init_head,
    control_cycle_sweep,
    controlled_label_injection,
    make_task,
    model_to_bundle,
    parse_control_cycle,
    pretrain_instance_discrimination,
    require_diverse_backbone,
    write_log,
)
from divscan.transfer_stats import correlate, transfer_scores

logger = logging.getLogger("divscan")

EXIT_OK = 0
EXIT_IO = 1
EXIT_VALIDATION = 2

# argparse bookkeeping that does not belong in the run manifest
_NON_PARAMS = ("command", "handler", "verbose", "quiet", "record_time")


def file_digests(paths: List[str]) -> Dict[str, str]:
    """sha256 of every input file; directories expand to their files in sorted order"""
    files = []
    for path in paths:
        if os.path.isdir(path):
            for root, dirs, names in os.walk(path):
                dirs.sort()
                files.extend(os.path.join(root, n) for n in sorted(names))
        else:
            files.append(path)

    digests = {}
    for path in files:
        h = hashlib.sha256()
        try:
            with open(path, "rb") as f:
                for chunk in iter(lambda: f.read(1 << 20), b""):
                    h.update(chunk)
        except OSError as e:
            raise BundleIOError(f"cannot hash input {path}: {e}")
        digests[path.replace(os.sep, "/")] = h.hexdigest()
    return digests


@dataclass
class RunManifest:
    command: str
    params: Dict[str, Any]
    inputs: Dict[str, str] = field(default_factory=dict)
    tool_version: str = TOOL_VERSION
    wall_time: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "params": self.params,
            "inputs": self.inputs,
            "tool_version": self.tool_version,
            "wall_time": self.wall_time,
        }


def manifest_path_for(report_path: str) -> str:
    return report_path + ".manifest.json"


def _split_column_ref(ref: str):
    """'table.csv:column' -> ('table.csv', 'column')"""
    path, sep, column = ref.rpartition(":")
    if not sep or not path or not column:
        raise ValidationError(f"expected <csv>:<column>, got {ref!r}")
    return path, column


class DivscanCLI:
    """
    Runs one subcommand per call

    Each cmd_* method does the work and returns the report path plus the
    input files to digest; _run wraps it into a result dict.
    """

    def __init__(self, settings: Optional[Settings] = None):
        self.settings = settings

    def _settings(self) -> Settings:
        if self.settings is None:
            self.settings = Settings.from_env()
        return self.settings

    def _run(self, args: argparse.Namespace, work: Callable[[argparse.Namespace], Dict[str, Any]]) -> Dict[str, Any]:
        """Run a command, write its manifest and map errors to exit codes"""
        start = time.perf_counter()
        try:
            done = work(args)
            params = {k: v for k, v in sorted(vars(args).items()) if k not in _NON_PARAMS}
            manifest = RunManifest(
                command=args.command,
                params=params,
                inputs=file_digests(done["inputs"]),
                tool_version=self._settings().tool_version,
                wall_time=(time.perf_counter() - start) if args.record_time else None,
            )
            write_text(manifest_path_for(done["report_path"]), render_json(manifest.to_dict()) + "\n")
            return {
                "success": True,
                "exit_code": EXIT_OK,
                "error": None,
                "report_path": done["report_path"],
            }
        except (ValidationError, NumericalError) as e:
            return {"success": False, "exit_code": EXIT_VALIDATION, "error": str(e), "report_path": None}
        except (BundleIOError, OSError) as e:
            return {"success": False, "exit_code": EXIT_IO, "error": str(e), "report_path": None}

    # Weight diversity
    def cmd_diversity(self, args: argparse.Namespace) -> Dict[str, Any]:
        settings = self._settings()
        bundle = load_bundle(args.bundle, settings)
        report = model_diversity(
            bundle,
            params=ClusterParams(grid_step=args.grid_step),
            exclude_pattern=args.exclude,
            measure=args.measure,
            upstream_accuracy=args.accuracy,
            settings=settings,
        )
        return {"report_path": write_report(report, args.out), "inputs": [args.bundle]}

    # Transferability
    def cmd_transfer(self, args: argparse.Namespace) -> Dict[str, Any]:
        table = load_accuracy_table(args.table, args.clamp_eps)
        scores = transfer_scores(table)
        logger.info(f"📈 Scored {len(table.models)} models over {len(table.datasets)} datasets")
        return {"report_path": write_report(scores, args.out), "inputs": [args.table]}

    def cmd_correlate(self, args: argparse.Namespace) -> Dict[str, Any]:
        x_path, x_col = _split_column_ref(args.x)
        y_path, y_col = _split_column_ref(args.y)
        report = correlate(load_numeric_column(x_path, x_col), load_numeric_column(y_path, y_col))
        logger.info(f"🔗 n={report.n} pearson={report.pearson:.4f} spearman={report.spearman:.4f}")
        inputs = [x_path] if x_path == y_path else [x_path, y_path]
        return {"report_path": write_report(report, args.out), "inputs": inputs}

    # Representation metrics
    def _single_activation(self, path: str, layer: Optional[str]):
        stages = load_activations(path, layer, self._settings())
        if len(stages) != 1:
            raise ValidationError(f"{path} holds {len(stages)} activation layers; pick one with --layer")
        return stages[0]

    def cmd_cka(self, args: argparse.Namespace) -> Dict[str, Any]:
        x = self._single_activation(args.x, args.layer)
        y = self._single_activation(args.y, args.layer)
        report = CkaReport(x_name=x.name, y_name=y.name, n=x.n,
                           cka=cka(x, y, args.minibatch), minibatch=args.minibatch)
        logger.info(f"🧠 CKA({x.name}, {y.name}) = {report.cka:.6f}")
        inputs = [args.x] if args.x == args.y else [args.x, args.y]
        return {"report_path": write_report(report, args.out), "inputs": inputs}

    def cmd_abstraction(self, args: argparse.Namespace) -> Dict[str, Any]:
        stages = load_activations(args.activations, None, self._settings())
        report = abstraction_report(stages, args.minibatch)
        logger.info(f"🧠 Abstraction score over {len(stages)} stages: {report.score:.6f}")
        return {"report_path": write_report(report, args.out), "inputs": [args.activations]}

    def cmd_class_metrics(self, args: argparse.Namespace) -> Dict[str, Any]:
        metrics = class_metrics(load_embeddings(args.embeddings))
        logger.info(f"🧭 v_intra={metrics.v_intra:.4f} s_inter={metrics.s_inter:.4f} msc={metrics.msc:.4f}")
        return {"report_path": write_report(metrics, args.out), "inputs": [args.embeddings]}

    def cmd_importance(self, args: argparse.Namespace) -> Dict[str, Any]:
        records = load_feature_table(args.table, args.target)
        features = [f.strip() for f in args.features.split(",") if f.strip()] if args.features else None
        config = GbdtConfig(n_trees=args.trees, max_depth=args.depth,
                            learning_rate=args.lr, min_samples_leaf=args.min_leaf)
        vector = importance_table(records, args.target, features, config, args.seed)
        top = max(zip(vector.shares, vector.features))
        logger.info(f"🌲 Most important feature: {top[1]} ({top[0]:.3f})")
        return {"report_path": write_report(vector, args.out), "inputs": [args.table]}

    # Toy training
    def _toy_start(self, args: argparse.Namespace):
        task = make_task(n_classes=args.classes, dim=args.dim, n_per_class=args.per_class,
                         sigma=args.sigma, separation=args.separation, seed=args.seed)
        model = ToyModel.init(task.dim, args.hidden, task.n_classes, seed=args.seed)
        if args.pretrain_epochs:
            logger.info(f"🔁 Contrastive pretraining for {args.pretrain_epochs} epoch(s)")
            model = pretrain_instance_discrimination(
                model, task, epochs=args.pretrain_epochs, lr=args.pretrain_lr,
                noise_sigma=args.noise_sigma, temperature=args.temperature,
                batch_size=args.batch, seed=args.seed,
            )
        if args.centroid_init:
            model = centroid_init_head(model, task)
        return task, model

    def cmd_toytrain(self, args: argparse.Namespace) -> Dict[str, Any]:
        cfg = InjectionConfig(control_cycle=parse_control_cycle(args.control_cycle), steps=args.steps,
                              lr=args.lr, batch_size=args.batch, seed=args.seed)
        if args.diversity_every:
            require_diverse_backbone(args.hidden)
        task, model = self._toy_start(args)
        result = controlled_label_injection(model, task, cfg, diversity_every=args.diversity_every)

        stem = os.path.splitext(args.out)[0]
        write_bundle(model_to_bundle(model, "toy_initial"), f"{stem}_initial_model")
        write_bundle(model_to_bundle(result.model, "toy"), f"{stem}_model")
        return {"report_path": write_log(result, args.out), "inputs": []}

    def cmd_sweep(self, args: argparse.Namespace) -> Dict[str, Any]:
        cycles = [parse_control_cycle(c) for c in args.cycles.split(",") if c.strip()]
        cfg = InjectionConfig(control_cycle=1, steps=args.steps, lr=args.lr,
                              batch_size=args.batch, seed=args.seed)
        require_diverse_backbone(args.hidden)
        task, model = self._toy_start(args)
        report = control_cycle_sweep(model, task, cycles, cfg)
        return {"report_path": write_report(report, args.out), "inputs": []}


def _add_toy_flags(p: argparse.ArgumentParser):
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--separation", type=float, default=3.0)
    p.add_argument("--pretrain-epochs", type=int, default=0)
    p.add_argument("--pretrain-lr", type=float, default=0.1)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--temperature", type=float, default=0.5)
    p.add_argument("--centroid-init", action="store_true")


def build_parser(cli: DivscanCLI) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="divscan", description="Feature diversity and transferability analysis")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    parser.add_argument("--record-time", action="store_true", help="store wall time in the run manifest")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("diversity", help="cluster/spectral diversity and CIS of a weight bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--measure", choices=MEASURES, default="both")
    p.add_argument("--grid-step", type=float, default=DEFAULT_GRID_STEP)
    p.add_argument("--exclude", default=None, help="regex of layer names to skip")
    p.add_argument("--accuracy", type=float, default=None, help="upstream accuracy in [0, 1]")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cli.cmd_diversity)

    p = sub.add_parser("transfer", help="per-model transferability from an accuracy table")
    p.add_argument("--table", required=True)
    p.add_argument("--clamp-eps", type=float, default=DEFAULT_CLAMP_EPS)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cli.cmd_transfer)

    p = sub.add_parser("correlate", help="Pearson/Spearman/Kendall/R^2 of two CSV columns")
    p.add_argument("--x", required=True, help="<csv>:<column>")
    p.add_argument("--y", required=True, help="<csv>:<column>")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cli.cmd_correlate)

    p = sub.add_parser("cka", help="linear CKA between two activation bundles")
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--layer", default=None)
    p.add_argument("--minibatch", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cli.cmd_cka)

    p = sub.add_parser("abstraction", help="stage-pair CKA matrix and abstraction score")
    p.add_argument("--activations", required=True)
    p.add_argument("--minibatch", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cli.cmd_abstraction)

    p = sub.add_parser("class-metrics", help="intra-class variation, separation and silhouette")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cli.cmd_class_metrics)

    p = sub.add_parser("importance", help="boosted-tree feature importance for transfer")
    p.add_argument("--table", required=True)
    p.add_argument("--target", default="transfer")
    p.add_argument("--features", default=None,
                   help=f"comma-separated feature columns (e.g. {','.join(DEFAULT_FEATURES)})")
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--depth", type=int, default=6)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--min-leaf", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cli.cmd_importance)

    p = sub.add_parser("toytrain", help="Controlled Label Injection on a toy model")
    p.add_argument("--control-cycle", default="1", help="positive integer or 'inf'")
    _add_toy_flags(p)
    p.add_argument("--diversity-every", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cli.cmd_toytrain)

    p = sub.add_parser("sweep", help="accuracy, diversity and CIS across control cycles")
    p.add_argument("--cycles", default=",".join(str(c) for c in DEFAULT_CYCLES))
    _add_toy_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cli.cmd_sweep)

    return parser


def configure_logging(verbose: bool = False, quiet: bool = False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(stream=sys.stderr, level=level, format="%(message)s", force=True)


def main(argv: Optional[List[str]] = None) -> int:
    cli = DivscanCLI()
    args = build_parser(cli).parse_args(argv)
    configure_logging(args.verbose, args.quiet)

    result = cli._run(args, args.handler)
    if result["success"]:
        print(result["report_path"])
    else:
        logger.error(f"❌ {args.command}: {result['error']}")
    return result["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
