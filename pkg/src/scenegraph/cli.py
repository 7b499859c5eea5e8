"""Command-line entry point: data generation, prior building, training, evaluation, scoring.

Exit codes: 0 success, 2 malformed input, 3 non-finite numerics,
4 a check that ran but did not pass.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig
from .metrics import (EvalConfig, EvalScene, MetricReport, gt_triplets, mean_recall_at_k, per_predicate_recall,
                      rank_triplets, recall_at_k, weighted_score, wmap, zero_shot_recall_at_k)
from .model import SceneGraphModel, parameter_group
from .numeric import NumericError, finite_difference_check, sample_coordinates
from .prior import build_prior, format_top_predicates, zero_shot_triples
from .protocols import ProtocolError, read_predictions, run_protocol, write_predictions
from .scene import SceneFormatError, load_manifest, load_scene_file
from .synthetic import SyntheticSpec, generate_synthetic
from . import training

EXIT_OK, EXIT_FORMAT, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4

log = logging.getLogger("scenegraph")


class CheckFailed(Exception):
    pass


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise argparse.ArgumentTypeError("K values must be positive")
    return ks


def read_zero_shot_file(path) -> set[tuple[int, int, int]]:
    """Label triples, one ``subject predicate object`` per line; ``#`` starts a comment."""
    out = set()
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].split()
        if not line:
            continue
        if len(line) != 3:
            raise SceneFormatError(f"{path}:{lineno}: expected 'subject predicate object'")
        try:
            out.add(tuple(int(v) for v in line))
        except ValueError:
            raise SceneFormatError(f"{path}:{lineno}: non-integer class id") from None
    return out


def write_zero_shot_file(path, triples) -> None:
    Path(path).write_text("".join(f"{s} {p} {o}\n" for s, p, o in sorted(triples)))


def _write_report(report: MetricReport, path, plot: bool) -> None:
    path = Path(path)
    path.write_text(report.to_csv())
    if plot:
        plotting.plot_metric_report(report, path.with_suffix(".svg"))


def _model_from_checkpoint(ckpt: Checkpoint) -> SceneGraphModel:
    if ckpt.config is None or ckpt.prior is None or not ckpt.params:
        raise CheckpointError("checkpoint lacks config, prior or parameters")
    return SceneGraphModel(ckpt.config.model_config(), ckpt.prior, store=ckpt.param_store())


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> None:
    spec = SyntheticSpec.from_text(Path(args.spec).read_text()) if args.spec else SyntheticSpec()
    paths = generate_synthetic(spec, args.seed, args.out, prefix=args.prefix)
    print(f"wrote {len(paths)} scenes and {Path(args.out) / 'manifest.txt'}")


def cmd_build_prior(args) -> None:
    scenes = load_manifest(args.manifest)
    prior = build_prior(s.annotation for s in scenes)
    save_checkpoint(args.out, Checkpoint(prior=prior, metadata={"kind": "prior", "n_scenes": len(scenes)}))
    print(f"prior from {len(scenes)} scenes, {int(prior.counts.sum())} triplets -> {args.out}")


def cmd_train(args) -> None:
    config = TrainConfig.from_text(Path(args.config).read_text()) if args.config else TrainConfig()
    scenes = load_manifest(args.data)
    val = load_manifest(args.val) if args.val else None
    prior = None
    if args.prior:
        prior = load_checkpoint(args.prior).prior
        if prior is None:
            raise CheckpointError(f"{args.prior}: no prior stored")

    def report(it, loss, r20):
        print(f"iter {it:6d}  loss {loss:.5f}  val R@20 {r20:6.2f}")

    result = training.train(config, scenes, val, prior, on_eval=report)
    ckpt = Checkpoint.from_store(result.model.store, config=config, prior=result.model.prior,
                                 iteration=config.max_iterations, rng_state=result.rng.bit_generator.state,
                                 metadata={"final_loss": result.losses[-1],
                                           "val_history": [[i, v] for i, v in result.val_history]})
    save_checkpoint(args.out, ckpt)
    out = Path(args.out)
    log_path = out.with_suffix(".train.csv")
    log_path.write_text("iteration,loss,learning_rate\n" + "".join(
        f"{i},{loss:.10g},{lr:.10g}\n" for i, (loss, lr) in enumerate(zip(result.losses, result.lr_history), 1)))
    if args.plot:
        plotting.plot_training(result.losses, result.val_history, out.with_suffix(".train.svg"))
    print(f"checkpoint -> {out}")


def cmd_eval(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    model = _model_from_checkpoint(ckpt)
    scenes = load_manifest(args.data)
    zs = read_zero_shot_file(args.zero_shot) if args.zero_shot else None
    evals = run_protocol(scenes, model, args.protocol, nms=not args.no_nms)
    gc = not args.no_graph_constraint
    tag = "R" if gc else "nGR"
    report = MetricReport()
    for k in args.k:
        cfg = EvalConfig(args.protocol, k, gc)
        report.add(f"{tag}@K", args.protocol, k, recall_at_k(evals, cfg))
        report.add(f"m{tag}@K", args.protocol, k, mean_recall_at_k(evals, cfg))
        if zs is not None:
            report.add(f"zs{tag}@K", args.protocol, k, zero_shot_recall_at_k(evals, cfg, zs))
    _write_report(report, args.report, args.plot)
    if args.plot:
        cfg = EvalConfig(args.protocol, max(args.k), gc)
        plotting.plot_per_predicate(per_predicate_recall(evals, cfg), Path(args.report).with_suffix(".predicates.svg"),
                                    title=f"{tag}@{max(args.k)} per predicate ({args.protocol})")
    if args.predictions:
        cfg = EvalConfig(args.protocol, max(args.k), gc)
        write_predictions(args.predictions, {e.name: rank_triplets(e, cfg) for e in evals})
    sys.stdout.write(report.to_csv())


def cmd_score(args) -> None:
    preds = read_predictions(args.predictions)
    scenes = load_manifest(args.gt)
    known = {s.name for s in scenes}
    unknown = sorted(set(preds) - known)
    if unknown:
        raise SceneFormatError(f"{args.predictions}: scene ids not in the gt manifest: {unknown[:5]}")
    evals = [EvalScene(s.name, gt_triplets(s.annotation), triplets=preds.get(s.name, [])) for s in scenes]
    report = MetricReport()
    if args.openimages:
        r50 = recall_at_k(evals, EvalConfig("reldet", 50))
        rel = wmap(evals, "rel", iou_threshold=args.iou)
        phr = wmap(evals, "phr", iou_threshold=args.iou)
        report.add("R@K", "reldet", 50, r50)
        report.add("wmAP_rel", "reldet", "all", rel)
        report.add("wmAP_phr", "phrdet", "all", phr)
        report.add("score_wtd", "openimages", "all", weighted_score(r50, rel, phr))
    else:
        for protocol in ("reldet", "phrdet"):
            for k in (50, 100):
                report.add("R@K", protocol, k, recall_at_k(evals, EvalConfig(protocol, k, True, args.iou)))
    _write_report(report, args.report, args.plot)
    sys.stdout.write(report.to_csv())


def cmd_grad_check(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    model = _model_from_checkpoint(ckpt)
    scene = load_scene_file(args.scene)
    if not scene.annotation.gt_triplets:
        raise ProtocolError(f"{args.scene}: scene has no gt triplets to build a loss from")
    sample = training.make_sample(scene, np.random.default_rng(args.seed), ckpt.config.neg_ratio)
    coords = sample_coordinates(model.store, args.samples, args.seed, parameter_group)
    err = finite_difference_check(lambda: training.loss(model, [sample]), model.store, h=args.h, coords=coords)
    ok = err < args.tol
    print(f"max relative error {err:.3e} over {len(coords)} coordinates: "
          f"{'PASS' if ok else 'FAIL'} (tolerance {args.tol:g})")
    if not ok:
        raise CheckFailed(f"gradient check error {err:.3e} >= {args.tol:g}")


def cmd_zero_shot(args) -> None:
    train = load_manifest(args.train)
    evaluation = load_manifest(args.eval)
    triples = zero_shot_triples((s.annotation for s in train), (s.annotation for s in evaluation))
    write_zero_shot_file(args.out, triples)
    print(f"{len(triples)} zero-shot triples -> {args.out}")


def cmd_prior_top(args) -> None:
    prior = load_checkpoint(args.ckpt).prior
    if prior is None:
        raise CheckpointError(f"{args.ckpt}: no prior stored")
    print(format_top_predicates(prior, [(args.subject, args.object)], args.k))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scenegraph", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write seeded synthetic scene files and a manifest")
    g.add_argument("--spec", help="key=value synthetic spec file (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--prefix", default="scene")
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("build-prior", help="count (subject, object, predicate) frequencies")
    g.add_argument("--manifest", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_build_prior)

    g = sub.add_parser("train", help="train a model from scratch")
    g.add_argument("--config", help="key=value TrainConfig file (defaults if omitted)")
    g.add_argument("--data", required=True, help="training manifest")
    g.add_argument("--val", help="validation manifest (training scenes if omitted)")
    g.add_argument("--prior", help="checkpoint holding a prior (built from --data if omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--plot", action="store_true", help="also write <out>.train.svg")
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("eval", help="run a protocol and write recall metrics")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--protocol", choices=("predcls", "sgcls", "sgdet"), required=True)
    g.add_argument("--k", type=_parse_ks, default=[20, 50, 100])
    g.add_argument("--no-graph-constraint", action="store_true")
    g.add_argument("--no-nms", action="store_true", help="sgdet: skip per-class NMS")
    g.add_argument("--zero-shot", help="file of zero-shot label triples")
    g.add_argument("--report", required=True)
    g.add_argument("--predictions", help="also write the ranked triplets at the largest K")
    g.add_argument("--plot", action="store_true", help="write SVG figures next to the report")
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("score", help="score a prediction file against gt scenes")
    g.add_argument("--predictions", required=True)
    g.add_argument("--gt", required=True, help="gt manifest")
    mode = g.add_mutually_exclusive_group(required=True)
    mode.add_argument("--openimages", action="store_true")
    mode.add_argument("--vrd", action="store_true")
    g.add_argument("--iou", type=float, default=0.5)
    g.add_argument("--report", required=True)
    g.add_argument("--plot", action="store_true")
    g.set_defaults(func=cmd_score)

    g = sub.add_parser("grad-check", help="compare backward against central differences")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--scene", required=True)
    g.add_argument("--samples", type=int, default=200)
    g.add_argument("--h", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-5)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_grad_check)

    g = sub.add_parser("zero-shot", help="label triples in eval gt never seen in training gt")
    g.add_argument("--train", required=True)
    g.add_argument("--eval", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_zero_shot)

    g = sub.add_parser("prior-top", help="most frequent predicates for a class pair")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--subject", type=int, required=True)
    g.add_argument("--object", type=int, required=True)
    g.add_argument("--k", type=int, default=5)
    g.set_defaults(func=cmd_prior_top)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (SceneFormatError, ConfigError, CheckpointError, ProtocolError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
