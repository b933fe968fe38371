"""``tbhsu`` command-line entry point.

Exit codes: 0 success, 1 domain failure, 2 usage or parse failure.  Every
command writes a run manifest next to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .baselines import NeighborVoteConfig, fit_tfidf, predict_neighbor_vote, predict_tfidf
from .errors import EmptyScene, ParseError, TbhsuError
from .graph import assemble_graph, dumps_graph, loads_graph, validate_graph
from .metrics import ConfusionMatrix, report
from .model import collate
from .prompt import build_prompt
from .scene_io import filter_structural, load_scene, load_scene_dir, save_scene, split_dataset
from .synth import SynthConfig, default_config, generate_scene
from .train import Checkpoint, TrainConfig, evaluate, fit, make_model_config, predict_batch


def _sha(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _manifest(path: Path, command: str, config: dict, seed, inputs, outputs, started: float) -> None:
    _write_json(
        path,
        {
            "command": command,
            "config_sha256": _sha(config),
            "config": config,
            "seed": seed,
            "inputs": [str(p) for p in inputs],
            "outputs": [str(p) for p in outputs],
            "tool_version": __version__,
            "wall_clock_seconds": round(time.time() - started, 3),
        },
    )


def _side_manifest(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc


def _load_corpus(directory) -> list:
    scenes = [filter_structural(s) for s in load_scene_dir(directory)]
    scenes = [s for s in scenes if s.objects]
    if not scenes:
        raise EmptyScene(f"no non-empty scenes found in {directory}")
    return scenes


def cmd_synth(args) -> int:
    started = time.time()
    cfg = SynthConfig.load(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = SynthConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(args.n):
        path = out / f"scene_{i:05d}.json"
        save_scene(generate_scene(cfg, i), path)
        written.append(path)
    _manifest(out / "manifest.json", "synth", {**cfg.to_dict(), "n": args.n}, cfg.seed, [args.config or "<default>"], written, started)
    return 0


def _train_settings(args) -> tuple[dict, TrainConfig, float]:
    raw = _read_json(args.config) if args.config else {}
    model_over = dict(raw.get("model", {}))
    train_raw = dict(raw.get("train", {}))
    if args.epochs is not None:
        train_raw["epochs"] = args.epochs
    if args.lr is not None:
        train_raw["base_lr"] = args.lr
    if args.seed is not None:
        train_raw["seed"] = args.seed
    return model_over, TrainConfig.from_dict(train_raw), float(raw.get("train_fraction", 0.8))


def _prepare_training(args, arch: Optional[str] = None):
    model_over, tcfg, fraction = _train_settings(args)
    if arch is not None:
        model_over["arch"] = arch
    scenes = _load_corpus(args.data)
    if getattr(args, "test_data", None):
        train, test = scenes, _load_corpus(args.test_data)
    else:
        train, test = split_dataset(scenes, fraction, tcfg.seed)
    n_max = model_over.pop("n_max", None)
    mcfg, vocab, rooms, regions = make_model_config(list(train) + list(test), n_max, **model_over)
    return train, test, mcfg, tcfg, vocab, rooms, regions


def cmd_train(args) -> int:
    started = time.time()
    train, test, mcfg, tcfg, vocab, rooms, regions = _prepare_training(args)
    ckpt, history = fit(train, test, mcfg, tcfg, vocab, rooms, regions)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt.save(out / "model.tns")
    (out / "history.json").write_text(history.to_json(), encoding="utf-8")
    metrics = {k: v.to_dict() for k, v in evaluate(ckpt, test or train).items()}
    _write_json(out / "metrics.json", metrics)
    config = {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "n_train": len(train), "n_test": len(test)}
    outputs = [out / n for n in ("model.tns", "model.tns.json", "history.json", "metrics.json")]
    _manifest(out / "manifest.json", "train", config, tcfg.seed, [args.data], outputs, started)
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    ckpt = Checkpoint.load(args.checkpoint)
    scenes = _load_corpus(args.data)
    metrics = {k: v.to_dict() for k, v in evaluate(ckpt, scenes, args.region_average).items()}
    text = json.dumps(metrics, indent=2) + "\n"
    if args.out:
        out = Path(args.out)
        out.write_text(text, encoding="utf-8")
        _manifest(_side_manifest(out), "eval", {"region_average": args.region_average}, None, [args.checkpoint, args.data], [out], started)
    else:
        sys.stdout.write(text)
    return 0


def _infer(ckpt: Checkpoint, scene) -> dict:
    batch = collate([ckpt.tokenize(scene)])
    preds = predict_batch(ckpt, batch)
    room_logits = preds.room_logits.data[0]
    n = len(scene.objects)
    region_logits = preds.region_logits.data[0, :n]
    return {
        "scan_id": scene.scan_id,
        "room_type": ckpt.room_classes[int(room_logits.argmax())],
        "room_logits": room_logits.tolist(),
        "objects": [
            {
                "id": o.object_id,
                "label": o.label,
                "region_affordance": ckpt.region_classes[int(region_logits[i].argmax())],
                "region_logits": region_logits[i].tolist(),
            }
            for i, o in enumerate(scene.objects)
        ],
    }


def _emit(text: str, out: Optional[str], command: str, config: dict, inputs, started: float) -> None:
    if out:
        path = Path(out)
        path.write_text(text, encoding="utf-8")
        _manifest(_side_manifest(path), command, config, None, inputs, [path], started)
    else:
        sys.stdout.write(text)


def _unlabeled(scene):
    from dataclasses import replace

    objs = tuple(replace(o, region_affordance=None) for o in scene.objects)
    return replace(scene, room_type=None, objects=objs)


def cmd_infer(args) -> int:
    started = time.time()
    ckpt = Checkpoint.load(args.checkpoint)
    scene = filter_structural(load_scene(args.scene))
    if not scene.objects:
        raise EmptyScene(f"scene {scene.scan_id!r} has no objects")
    result = _infer(ckpt, _unlabeled(scene))
    _emit(json.dumps(result, indent=2) + "\n", args.out, "infer", {}, [args.checkpoint, args.scene], started)
    return 0


def cmd_build_graph(args) -> int:
    started = time.time()
    ckpt = Checkpoint.load(args.checkpoint)
    scene = filter_structural(load_scene(args.scene))
    if not scene.objects:
        raise EmptyScene(f"scene {scene.scan_id!r} has no objects")
    result = _infer(ckpt, _unlabeled(scene))
    graph = assemble_graph(scene, result["room_type"], [o["region_affordance"] for o in result["objects"]])
    problems = validate_graph(graph)
    if problems:
        raise TbhsuError(f"assembled graph failed validation: {[p.to_dict() for p in problems]}")
    _emit(dumps_graph(graph), args.out, "build-graph", {}, [args.checkpoint, args.scene], started)
    return 0


def cmd_export_prompt(args) -> int:
    started = time.time()
    scene = load_scene(args.scene)
    graph = loads_graph(Path(args.graph).read_text(encoding="utf-8")) if args.graph else None
    kwargs = {}
    if args.classes:
        classes = _read_json(args.classes)
        kwargs = {"room_types": classes["room_types"], "region_affordances": classes["region_affordances"]}
    text = build_prompt(scene, graph, rounded=not args.no_round, **kwargs)
    inputs = [args.scene] + ([args.graph] if args.graph else [])
    _emit(text, args.out, "export-prompt", {"rounded": not args.no_round}, inputs, started)
    return 0


def cmd_validate(args) -> int:
    try:
        text = Path(args.graph).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(str(exc)) from exc
    problems = validate_graph(loads_graph(text))
    sys.stdout.write(json.dumps({"valid": not problems, "violations": [p.to_dict() for p in problems]}, indent=2) + "\n")
    return 1 if problems else 0


def _region_report(gts, preds, classes) -> dict:
    cm = ConfusionMatrix(len(classes))
    index = {c: i for i, c in enumerate(classes)}
    cm.accumulate_many([index[g] for g in gts], [index[p] for p in preds])
    return report("region", cm, classes).to_dict()


def cmd_baseline(args) -> int:
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config: dict = {"kind": args.kind}
    if args.kind == "mlp":
        train, test, mcfg, tcfg, vocab, rooms, regions = _prepare_training(args, arch="mlp")
        ckpt, history = fit(train, test, mcfg, tcfg, vocab, rooms, regions)
        ckpt.save(out / "model.tns")
        (out / "history.json").write_text(history.to_json(), encoding="utf-8")
        metrics = {k: v.to_dict() for k, v in evaluate(ckpt, test or train).items()}
        config.update(model=mcfg.to_dict(), train=tcfg.to_dict())
        seed = tcfg.seed
    else:
        _, tcfg, fraction = _train_settings(args)
        scenes = _load_corpus(args.data)
        if args.test_data:
            train, test = scenes, _load_corpus(args.test_data)
        else:
            train, test = split_dataset(scenes, fraction, tcfg.seed)
        model = fit_tfidf(train)
        (out / "tfidf.json").write_text(model.dumps(), encoding="utf-8")
        gts, preds = [], []
        nv = NeighborVoteConfig(alpha=args.alpha, fallback_uniform=args.fallback_uniform)
        for scene in test or train:
            if args.kind == "tfidf":
                p = [predict_tfidf(model, o.label, args.fallback_uniform) for o in scene.objects]
            else:
                p = predict_neighbor_vote(model, scene, nv)
            for o, pr in zip(scene.objects, p):
                if o.region_affordance is not None:
                    gts.append(o.region_affordance)
                    preds.append(pr)
        classes = sorted(set(model.affordances) | set(gts))
        metrics = {"region": _region_report(gts, preds, classes)}
        config.update(alpha=args.alpha, fallback_uniform=args.fallback_uniform)
        seed = tcfg.seed
    _write_json(out / "metrics.json", metrics)
    _manifest(out / "manifest.json", "baseline", config, seed, [args.data], [out / "metrics.json"], started)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tbhsu", description="Hierarchical scene graphs from labeled object point clouds.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic scene files")
    p.add_argument("--config", help="synth config JSON (default: built-in separable config)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    def training_flags(p):
        p.add_argument("--data", required=True)
        p.add_argument("--test-data", dest="test_data")
        p.add_argument("--config", help='JSON with optional "model", "train" and "train_fraction" keys')
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)

    p = sub.add_parser("train", help="train the transformer")
    training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a scene directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--region-average", choices=("micro", "macro"), default="micro")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict room type and region affordances for one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("build-graph", help="predict and assemble the scene graph for one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("export-prompt", help="render a scene (and optional graph) as an LLM prompt")
    p.add_argument("--scene", required=True)
    p.add_argument("--graph")
    p.add_argument("--classes", help='JSON with "room_types" and "region_affordances" lists')
    p.add_argument("--no-round", action="store_true", help="print full-precision coordinates")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_prompt)

    p = sub.add_parser("validate", help="check a graph JSON file against the structural rules")
    p.add_argument("graph")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("baseline", help="run a region baseline")
    p.add_argument("--kind", choices=("tfidf", "neighbor-vote", "mlp"), required=True)
    training_flags(p)
    p.add_argument("--alpha", type=float, default=0.8)
    p.add_argument("--fallback-uniform", action="store_true", help="score unseen labels uniformly instead of failing")
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ParseError as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 2
    except (TbhsuError, OSError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
