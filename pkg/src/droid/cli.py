"""Command-line driver: gen, train, eval, identify, assess, export-graph.

Exit status 0 on success, 1 on a domain error (JSON error object on
stderr), 2 on bad usage.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from importlib import resources

import jsonschema

from droid.causal import DEFAULT_CANDIDATES, assess_risk, model_predictor
from droid.errors import DroidError
from droid.evaluation import benchmark
from droid.features import prepare_scene
from droid.graphs import EDGE_THRESHOLD, graph_json
from droid.model import Model, ModelConfig, save_checkpoint
from droid.simulator import (
    SimConfig,
    Scenario,
    generate_dataset,
    read_jsonl,
    scenario_from_dict,
    write_jsonl,
)
from droid.training import TrainConfig, train, write_log

DATA_ENV = "DROID_DATA_DIR"
SPLITS = ("train", "test1", "test2")


def load_schema(name: str) -> dict:
    return json.loads(resources.files("droid").joinpath("schemas", f"{name}.schema.json").read_text())


def validate(doc: dict, schema: str) -> None:
    try:
        jsonschema.validate(doc, load_schema(schema))
    except jsonschema.ValidationError as exc:
        raise DroidError("schema_violation", f"{schema}: {exc.message}", path=list(exc.absolute_path)) from None


def _data_dir(arg: str | None) -> str:
    path = arg or os.environ.get(DATA_ENV)
    if not path:
        raise DroidError("missing_data_dir", f"pass --data or set {DATA_ENV}")
    return path


def _split_path(directory: str, split: str) -> str:
    return os.path.join(directory, f"{split}.jsonl")


def _load_split(directory: str, split: str) -> list[Scenario]:
    path = _split_path(directory, split)
    if not os.path.exists(path):
        raise DroidError("missing_dataset", f"no dataset file at {path}")
    return read_jsonl(path)


def _load_scenario(path: str, index: int) -> Scenario:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise DroidError("missing_scenario", f"cannot read {path}: {exc.strerror}") from None
    lines = [ln for ln in text.splitlines() if ln.strip()]
    try:
        docs = [json.loads(text)] if not path.endswith(".jsonl") else [json.loads(ln) for ln in lines]
    except json.JSONDecodeError as exc:
        raise DroidError("invalid_json", f"{path}: {exc.msg}") from None
    if not 0 <= index < len(docs):
        raise DroidError("invalid_index", f"{path} holds {len(docs)} scenarios, index {index} requested")
    validate(docs[index], "scenario")
    return scenario_from_dict(docs[index])


def _write(path: str | None, text: str) -> None:
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ------------------------------------------------------------------ commands


def cmd_gen(args) -> None:
    out = _data_dir(args.out)
    os.makedirs(out, exist_ok=True)
    config = SimConfig(
        go_weight=args.go_weight, stop_weight=args.stop_weight,
        confound_prob=args.confound_prob, isolated_bystander=args.isolated_bystander,
    )
    data = generate_dataset(config, (args.train, args.test1, args.test2), seed=args.seed)
    for split in SPLITS:
        write_jsonl(_split_path(out, split), data[split])


def cmd_train(args) -> None:
    data = _load_split(_data_dir(args.data), "train")
    cfg = TrainConfig(
        batch_size=args.batch_size, stage1_steps=args.stage1_steps, stage2_steps=args.stage2_steps,
        lr_stage1=args.lr1, lr_stage2=args.lr2, aug_prob=args.aug_prob, augment=not args.no_augment,
        seed=args.seed, checkpoint_every=args.checkpoint_every,
    )
    model = Model.load(args.init) if args.init else None
    if args.stage in ("1", "all"):
        mcfg = ModelConfig(dim=args.dim, hidden=args.hidden, seed=args.seed)
        model, log = train(data, cfg, 1, model=model, model_config=mcfg, checkpoint_dir=args.checkpoint_dir)
        if args.log:
            write_log(args.log, log)
    if args.stage in ("2", "all"):
        model, log = train(data, cfg, 2, model=model, checkpoint_dir=args.checkpoint_dir)
        if args.log:
            write_log(args.log, log, append=args.stage == "all")
    save_checkpoint(args.out, model.params, model.config)


def cmd_eval(args) -> None:
    directory = _data_dir(args.data)
    model = Model.load(args.ckpt)
    report = benchmark(model, _load_split(directory, "test1"), _load_split(directory, "test2"), args.mode)
    doc = report.to_dict()
    validate(doc, "metrics")
    with open(f"{args.out}.json", "w") as fh:
        fh.write(report.to_json())
    with open(f"{args.out}.csv", "w") as fh:
        fh.write(report.to_csv())


def _risk(args) -> None:
    scenario = _load_scenario(args.scenario, args.index)
    model = Model.load(args.ckpt)
    categories = tuple(args.candidates.split(",")) if args.candidates else DEFAULT_CANDIDATES
    report = assess_risk(scenario, model_predictor(model), categories=categories)
    doc = report.to_dict()
    validate(doc, "riskreport")
    _write(args.out, report.to_json() + "\n")


def cmd_export_graph(args) -> None:
    scenario = _load_scenario(args.scenario, args.index)
    model = Model.load(args.ckpt)
    out = model.run([prepare_scene(scenario.clip, None, model.config.grid)])
    t = scenario.clip.frames - 1 if args.frame is None else args.frame
    if not 0 <= t < scenario.clip.frames:
        raise DroidError("invalid_frame", f"frame {t} outside [0, {scenario.clip.frames})")
    clip = scenario.clip
    if args.graph == "ego_thing":
        n = len(clip.tracklets)
        g = out.thing_affinity[0, t]
        keep = list(range(n)) + [g.shape[0] - 1]
        g = g[keep][:, keep]
        nodes = []
        for tr in clip.tracklets:
            pos = clip.object_position(tr.id, t)
            nodes.append({"id": tr.id, "category": tr.category, "anchor": None if pos is None else pos.tolist()})
    else:
        m = len(clip.stuff)
        g = out.stuff_affinity[0, t]
        keep = list(range(m)) + [g.shape[0] - 1]
        g = g[keep][:, keep]
        nodes = [{"id": i, "category": s.category, "anchor": None} for i, s in enumerate(clip.stuff)]
    nodes.append({"id": "ego", "category": "ego", "anchor": clip.ego_anchor(t).tolist()})
    _write(args.out, graph_json(g, nodes, args.threshold) + "\n")


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="droid", description="Driver-centric risk object identification toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate train/test1/test2 scenario files")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--train", type=int, default=2000)
    g.add_argument("--test1", type=int, default=500)
    g.add_argument("--test2", type=int, default=200)
    g.add_argument("--out", help=f"output directory (default ${DATA_ENV})")
    g.add_argument("--go-weight", type=float, default=4.0)
    g.add_argument("--stop-weight", type=float, default=1.0)
    g.add_argument("--confound-prob", type=float, default=SimConfig.confound_prob)
    g.add_argument("--isolated-bystander", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the behaviour model")
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--data", help=f"dataset directory (default ${DATA_ENV})")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--stage", choices=("1", "2", "all"), default="all")
    t.add_argument("--init", help="checkpoint to start from (required for --stage 2)")
    t.add_argument("--stage1-steps", type=int, default=TrainConfig.stage1_steps)
    t.add_argument("--stage2-steps", type=int, default=TrainConfig.stage2_steps)
    t.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    t.add_argument("--lr1", type=float, default=TrainConfig.lr_stage1)
    t.add_argument("--lr2", type=float, default=TrainConfig.lr_stage2)
    t.add_argument("--aug-prob", type=float, default=TrainConfig.aug_prob)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--dim", type=int, default=ModelConfig.dim)
    t.add_argument("--hidden", type=int, default=ModelConfig.hidden)
    t.add_argument("--log", help="training curve CSV")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--checkpoint-dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="benchmark a checkpoint on test1/test2")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", help=f"dataset directory (default ${DATA_ENV})")
    e.add_argument("--mode", choices=("causation", "correlation"), default="causation")
    e.add_argument("--out", required=True, help="output prefix; writes PREFIX.json and PREFIX.csv")
    e.set_defaults(func=cmd_eval)

    for name, full in (("identify", False), ("assess", True)):
        r = sub.add_parser(name, help=("find the risk object" if not full else "score every object's risk"))
        r.add_argument("--ckpt", required=True)
        r.add_argument("--scenario", required=True, help="scenario .json or .jsonl file")
        r.add_argument("--index", type=int, default=0, help="line to use from a .jsonl file")
        r.add_argument("--candidates", help="comma-separated Thing categories to test (default: all)")
        r.add_argument("--out")
        r.set_defaults(func=_risk)

    x = sub.add_parser("export-graph", help="export thresholded interaction-graph edges")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--scenario", required=True)
    x.add_argument("--index", type=int, default=0)
    x.add_argument("--frame", type=int)
    x.add_argument("--graph", choices=("ego_thing", "ego_stuff"), default="ego_thing")
    x.add_argument("--threshold", type=float, default=EDGE_THRESHOLD)
    x.add_argument("--out")
    x.set_defaults(func=cmd_export_graph)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "stage", None) == "2" and not args.init:
        err = DroidError("missing_checkpoint", "stage 2 needs the stage-1 checkpoint (--init)")
        print(json.dumps(err.to_dict(), sort_keys=True), file=sys.stderr)
        return 1
    try:
        args.func(args)
    except DroidError as err:
        print(json.dumps(err.to_dict(), sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
