"""``coco`` command line: one subcommand per pipeline stage.

Results go to stdout as a single JSON object, logs go to stderr. Commands
that write files also write ``<output>.manifest.json`` (or
``manifest.json`` inside an output directory) holding the resolved
configuration, the toolkit version and sha256 checksums of every input.

Exit codes: 0 success, 1 operation error, 2 usage or configuration error.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .activations import ActivationDataset, load_activation_dump, write_activation_dump
from .config import load_config
from .contrast import ContrastBatch, compute_cav, loss_components
from .errors import CocoError, ConfigError
from .metrics import (
    class_conditional_energy,
    coverage_curve,
    coverage_thresholds,
    export_projection,
    hyperspherical_energy,
    neuron_coverage,
)
from .summarize import ConceptClusters, summarize
from .toy.data import DGData, generate_synthetic_dg
from .toy.train import run_toy

log = logging.getLogger("conceptcontrast")

SCHEMA_VERSION = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _bool(text):
    low = text.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_files(path):
    """A dump path plus its metadata sidecar for text dumps."""
    path = Path(path)
    files = [path]
    if path.suffix.lower() == ".csv":
        files.append(path.with_suffix(".jsonl"))
    return files


def _manifest(command, argv, cfg, inputs, outputs):
    checksums = {}
    for p in inputs:
        for f in _input_files(p):
            if f.exists():
                checksums[str(f)] = sha256(f)
    return {
        "schema": "conceptcontrast.manifest",
        "schema_version": SCHEMA_VERSION,
        "toolkit_version": __version__,
        "command": command,
        "argv": list(argv),
        "config": cfg.to_dict(),
        "inputs": checksums,
        "outputs": [str(o) for o in outputs],
    }


def _write_manifest(manifest, beside):
    beside = Path(beside)
    path = beside / "manifest.json" if beside.is_dir() else Path(f"{beside}.manifest.json")
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _features(ds):
    return np.asarray(ds.activations, dtype=np.float64).T


# subcommands; each returns (result dict, inputs, outputs)

def cmd_validate(args, cfg):
    result = {}
    inputs = []
    if args.dump:
        ds = load_activation_dump(args.dump)
        inputs.append(args.dump)
        result["dump"] = {
            "n_neurons": ds.n_neurons, "n_samples": ds.n_samples,
            "n_classes": ds.n_classes, "n_domains": ds.n_domains,
            "layer_name": ds.layer_name, "has_predictions": ds.has_predictions,
        }
    if args.clusters:
        cl = ConceptClusters.load(args.clusters)
        inputs.append(args.clusters)
        if args.dump:
            cl.weight_matrix(ds.n_neurons)
        result["clusters"] = {"n_clusters": len(cl), "covered_neurons": len(cl.covered_neurons())}
    if not inputs:
        raise UsageError("validate: give --dump and/or --clusters")
    result["valid"] = True
    return result, inputs, []


def cmd_summarize(args, cfg):
    cfg = cfg.override("summarizer", k_clusters=args.k, quantile=args.quantile,
                       min_active_ratio=args.lam, merge_threshold=args.merge_threshold,
                       seed=args.seed, correct_only=args.correct_only)
    ds = load_activation_dump(args.dump)
    clusters = summarize(ds, cfg.summarizer, step_tag=args.step)
    clusters.save(args.out)
    result = {
        "n_clusters": len(clusters),
        "covered_neurons": len(clusters.covered_neurons()),
        "n_neurons": ds.n_neurons,
        "warnings": list(clusters.warnings),
        "out": str(args.out),
    }
    return result, [args.dump], [args.out], cfg


def cmd_cav(args, cfg):
    ds = load_activation_dump(args.dump)
    clusters = ConceptClusters.load(args.clusters)
    cav = compute_cav(_features(ds), clusters).values
    out_ds = ActivationDataset(cav.T, ds.samples, ds.n_classes, ds.n_domains, "cav")
    write_activation_dump(out_ds, args.out)
    return {"n_concepts": cav.shape[1], "n_samples": cav.shape[0], "out": str(args.out)}, \
        [args.dump, args.clusters], [args.out]


def cmd_loss(args, cfg):
    ds = load_activation_dump(args.dump)
    clusters = ConceptClusters.load(args.clusters) if args.clusters else None
    if args.mode != "feature" and clusters is None:
        raise UsageError(f"loss: --mode {args.mode} needs --clusters")
    batch = ContrastBatch.from_features(_features(ds), ds.class_labels)
    parts = loss_components(batch, clusters if args.mode != "feature" else None,
                            args.renormalize)
    if args.mode == "concept":
        parts.pop("feature")
    result = {name: {"loss": r.loss, "anchors_without_positive": r.anchors_without_positive}
              for name, r in parts.items()}
    inputs = [args.dump] + ([args.clusters] if args.clusters else [])
    outputs = []
    if args.grad_out:
        grad = sum(r.grad_embeddings for r in parts.values())
        write_activation_dump(
            ActivationDataset(grad.T, ds.samples, ds.n_classes, ds.n_domains, "grad"),
            args.grad_out)
        result["grad_out"] = str(args.grad_out)
        outputs.append(args.grad_out)
    return result, inputs, outputs


def cmd_coverage(args, cfg):
    cfg = cfg.override("metrics", quantile=args.quantile, coverage_scope=args.scope,
                       coverage_mode=args.mode)
    m = cfg.metrics
    dumps = [load_activation_dump(p) for p in args.dump]
    reports = [neuron_coverage(d, coverage_thresholds(d, m.quantile, m.coverage_scope),
                               m.coverage_mode) for d in dumps]
    result = {"quantile": m.quantile, "scope": m.coverage_scope, "mode": m.coverage_mode}
    if len(dumps) == 1:
        result.update(reports[0].to_dict())
    else:
        curve = coverage_curve(dumps, m.quantile, m.coverage_scope, m.coverage_mode)
        result["curve"] = [{"step": t, "coverage": c, "dump": str(p)}
                           for (t, c), p in zip(curve, args.dump)]
    return result, list(args.dump), [], cfg


def cmd_energy(args, cfg):
    cfg = cfg.override("metrics", power=args.power)
    ds = load_activation_dump(args.dump)
    z = _features(ds)
    u = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    power = cfg.metrics.power
    result = hyperspherical_energy(u, power, check_norm=False).to_dict()
    result["class_conditional"] = class_conditional_energy(z, ds.class_labels, power)
    return result, [args.dump], [], cfg


def cmd_project(args, cfg):
    cfg = cfg.override("metrics", projection_seed=args.seed)
    ds = load_activation_dump(args.dump)
    p = export_projection(_features(ds), args.out, cfg.metrics.projection_seed,
                          labels=list(ds.class_labels))
    return {"rows": int(p.shape[0]), "out": str(args.out)}, [args.dump], [args.out], cfg


def cmd_gen_data(args, cfg):
    cfg = cfg.override("data", n_classes=args.classes, n_domains=args.domains,
                       samples_per_cell=args.samples_per_cell, input_dim=args.input_dim,
                       seed=args.seed)
    data = generate_synthetic_dg(cfg.data)
    write_activation_dump(data.to_dump(), args.out)
    result = {"n_samples": len(data.class_labels), "n_source": int(data.source_mask.sum()),
              "target_domain": data.target_domain, "out": str(args.out)}
    return result, [], [args.out], cfg


def cmd_train_toy(args, cfg):
    if args.data:
        data = DGData.from_dump(load_activation_dump(args.data))
    else:
        data = generate_synthetic_dg(cfg.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, tlog = run_toy(data, cfg.model, cfg.schedule, cfg.summarizer, out)
    final = tlog.records[-1]
    result = {
        "rundir": str(out),
        "final": {k: final[k] for k in ("source_accuracy", "target_accuracy", "coverage", "energy")},
        "reclusters": [{"step": e["step"], "n_clusters": e["n_clusters"]}
                       for e in tlog.events("recluster")],
        "checkpoints": [Path(p).name for p in tlog.checkpoints],
        "timing": tlog.timing,
    }
    return result, [args.data] if args.data else [], [out], cfg


def build_parser():
    p = _Parser(prog="coco", description="Concept-level contrastive learning toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--threads", type=int, help="worker threads (env COCO_THREADS)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("validate", parents=[common], help="check a dump and/or cluster file")
    s.add_argument("--dump")
    s.add_argument("--clusters")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("summarize", parents=[common], help="neuron summarization")
    s.add_argument("--dump", required=True)
    s.add_argument("--k", type=int)
    s.add_argument("--quantile", type=float)
    s.add_argument("--lambda", dest="lam", type=float, help="noisy-neuron ratio")
    s.add_argument("--merge-threshold", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--correct-only", type=_bool)
    s.add_argument("--step", type=int, default=0, help="step tag stored with the clusters")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_summarize)

    s = sub.add_parser("cav", parents=[common], help="concept activation vectors")
    s.add_argument("--dump", required=True)
    s.add_argument("--clusters", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_cav)

    s = sub.add_parser("loss", parents=[common], help="feature and concept contrast losses")
    s.add_argument("--dump", required=True)
    s.add_argument("--clusters")
    s.add_argument("--mode", choices=["feature", "concept", "both"], default="both")
    s.add_argument("--renormalize", type=_bool, default=True)
    s.add_argument("--grad-out", help="write summed embedding gradients as a dump")
    s.set_defaults(func=cmd_loss)

    s = sub.add_parser("coverage", parents=[common], help="neuron coverage (or a curve)")
    s.add_argument("--dump", required=True, nargs="+")
    s.add_argument("--quantile", type=float)
    s.add_argument("--scope", choices=["global", "neuron"])
    s.add_argument("--mode", choices=["exists", "forall"])
    s.set_defaults(func=cmd_coverage)

    s = sub.add_parser("energy", parents=[common], help="hyperspherical energy")
    s.add_argument("--dump", required=True)
    s.add_argument("--power", type=float)
    s.set_defaults(func=cmd_energy)

    s = sub.add_parser("project", parents=[common], help="export features on the 2-sphere")
    s.add_argument("--dump", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("gen-data", parents=[common], help="synthetic multi-domain data")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int)
    s.add_argument("--domains", type=int)
    s.add_argument("--samples-per-cell", type=int)
    s.add_argument("--input-dim", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-toy", parents=[common], help="ERM pre-train then fine-tune")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--data", help="input dump from gen-data (default: generate from config)")
    s.set_defaults(func=cmd_train_toy)
    return p


def _resolve_threads(args):
    if args.threads is None:
        env = os.environ.get("COCO_THREADS")
        if env:
            try:
                args.threads = int(env)
            except ValueError:
                raise UsageError(f"COCO_THREADS must be an integer, got {env!r}") from None
    if args.threads is not None and args.threads < 1:
        raise UsageError("--threads must be >= 1")


def _emit(obj, stream=None):
    stream = stream or sys.stdout
    stream.write(json.dumps(obj, sort_keys=True) + "\n")
    stream.flush()


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        _resolve_threads(args)
    except UsageError as exc:
        _emit({"error": {"category": "usage", "message": str(exc)}})
        print(str(exc), file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.threads is not None:
            cfg = cfg.override("run", threads=args.threads)
            cfg = cfg.override("summarizer", threads=args.threads)
        level = logging.getLevelName(cfg.run.verbosity.upper())
        if args.verbose:
            level = logging.WARNING - 10 * min(args.verbose, 2)
        logging.getLogger().setLevel(level)
        out = args.func(args, cfg)
        result, inputs, outputs = out[:3]
        cfg = out[3] if len(out) > 3 else cfg
        manifest = _manifest(args.command, argv, cfg, inputs + ([args.config] if args.config else []),
                             outputs)
        if outputs:
            result["manifest"] = str(_write_manifest(manifest, outputs[0]))
        else:
            result["manifest"] = manifest
    except (UsageError, ConfigError) as exc:
        category = "config" if isinstance(exc, ConfigError) else "usage"
        _emit({"error": {"category": category, "message": str(exc)}})
        print(str(exc), file=sys.stderr)
        return 2
    except (CocoError, OSError) as exc:
        category = exc.category if isinstance(exc, CocoError) else "io"
        _emit({"error": {"category": category, "message": str(exc)}})
        log.error("%s: %s", category, exc)
        return 1
    result.update({"schema": f"conceptcontrast.cli.{args.command}",
                   "schema_version": SCHEMA_VERSION, "command": args.command})
    _emit(result)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
