"""Command-line entry point: generate | train | evaluate | predict | plan | plot.

Configuration comes from an optional JSON file (``--config``) with the
sections below; unknown keys are rejected. Any value can be overridden by an
environment variable ``HYPERTRAJ_<SECTION>__<KEY>`` (JSON-parsed when
possible), e.g. ``HYPERTRAJ_TRAIN__EPOCHS=2`` or ``HYPERTRAJ_SEED=3``.
Nested model keys use a further ``__``: ``HYPERTRAJ_TRAIN__MODEL__HIDDEN=32``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import jsonschema
import numpy as np
import torch

from . import data as D
from .checkpoint import model_from_checkpoint, read_checkpoint, save_checkpoint
from .errors import CheckpointStageMismatch, ConfigError, HypertrajError, InvalidSpec, SchemaViolation
from .metrics import aggregate, interaction_level
from .model import ModelConfig
from .planner import CostWeights, cut_in_problem, head_on_problem, optimize, problem_from_prediction
from .training import DTYPES, Dataset, StageConfig, predict, run_stage, write_log_csv

log = logging.getLogger("hypertraj")

ENV_PREFIX = "HYPERTRAJ_"
MANIFEST_FORMAT = "hypertraj-dataset"

DEFAULTS = {
    "seed": 0,
    "generate": {"count": 500, "noise_std": 0.03, "kinds": None, "eval_fraction": 0.2},
    "train": {},
    "evaluate": {"plots": 4, "split": "eval"},
    "planner": {"comfort": 1.0, "lane": 2.0, "safety": 10.0, "max_iterations": 100},
}

METRIC_PROPS = {
    "min_ade": {"type": "number", "minimum": 0},
    "min_fde": {"type": "number", "minimum": 0},
    "miss_rate": {"type": "number", "minimum": 0, "maximum": 1},
    "brier_min_fde": {"type": "number", "minimum": 0},
    "count": {"type": "integer", "minimum": 0},
}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["stage", "split", "metrics"],
    "additionalProperties": False,
    "properties": {
        "stage": {"type": "integer", "minimum": 0, "maximum": 3},
        "split": {"type": "string"},
        "metrics": {
            "type": "object",
            "required": list(METRIC_PROPS) + ["buckets"],
            "properties": {
                **METRIC_PROPS,
                "buckets": {
                    "type": "object",
                    "propertyNames": {"enum": ["slight", "moderate", "strong"]},
                    "additionalProperties": {"type": "object", "required": list(METRIC_PROPS), "properties": METRIC_PROPS},
                },
            },
        },
    },
}

PREDICTION_SCHEMA = {
    "type": "object",
    "additionalProperties": {
        "type": "object",
        "required": ["modes", "frame"],
        "properties": {
            "frame": {"const": "world"},
            "modes": {
                "type": "array",
                "minItems": 1,
                "items": {
                    "type": "object",
                    "required": ["positions", "confidence"],
                    "properties": {
                        "positions": {"type": "array", "items": {"type": "array", "minItems": 2, "maxItems": 2}},
                        "confidence": {"type": "number", "minimum": 0, "maximum": 1},
                    },
                },
            },
        },
    },
}

PLAN_SCHEMA = {
    "type": "object",
    "required": ["controls", "positions", "initial_positions", "iterations", "converged", "min_distance"],
    "properties": {
        "controls": {"type": "array", "items": {"type": "array", "minItems": 2, "maxItems": 2}},
        "positions": {"type": "array", "items": {"type": "array", "minItems": 2, "maxItems": 2}},
        "initial_positions": {"type": "array"},
        "iterations": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "object", "required": ["iteration", "cost", "terms"]},
        },
        "converged": {"type": "boolean"},
        "min_distance": {"type": "object", "required": ["initial", "final"]},
    },
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- config


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        # the train section is checked field-by-field by StageConfig
        if key not in base and not path.startswith("train."):
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def _env_overrides(environ) -> dict:
    tree: dict = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in name[len(ENV_PREFIX):].split("__") if p]
        if not parts:
            continue
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = tree
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return tree


def load_config(path: Optional[str], environ=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            payload = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(payload, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, payload)
    return _merge(cfg, _env_overrides(os.environ if environ is None else environ))


def stage_config(cfg: dict, stage: int, seed: int) -> StageConfig:
    payload = dict(cfg.get("train") or {})
    payload["stage"] = stage
    payload["seed"] = seed
    try:
        return StageConfig.from_dict(payload)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def planner_settings(cfg: dict) -> Tuple[CostWeights, int]:
    p = cfg["planner"]
    try:
        return CostWeights(float(p["comfort"]), float(p["lane"]), float(p["safety"])), int(p["max_iterations"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------- dataset IO


def _write_scene(args) -> None:
    spec, path = args
    D.save_scene(D.generate(spec), path)


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    manifest = json.loads(path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise HypertrajError(f"{path} is not a dataset manifest")
    return manifest


def load_split(root, split: Optional[str]) -> List:
    manifest = load_manifest(root)
    entries = [e for e in manifest["scenes"] if split is None or e["split"] == split]
    return [D.load_scene(Path(root) / e["path"]) for e in entries]


def load_any_scene(path):
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return D.load_argoverse_csv(path)
    return D.load_scene(path)


def _dump_json(payload, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def predictions_json(scene, mu_world: np.ndarray, pi: np.ndarray) -> dict:
    out = {}
    for i, agent in enumerate(scene.agents):
        modes = [
            {"positions": mu_world[i, k].tolist(), "confidence": float(pi[i, k])}
            for k in np.argsort(-pi[i], kind="stable")
        ]
        out[agent.id] = {"modes": modes, "frame": "world"}
    return out


# ---------------------------------------------------------------- commands


def cmd_generate(args, cfg) -> int:
    g = cfg["generate"]
    count = int(args.count if args.count is not None else g["count"])
    if count < 0:
        raise ConfigError("count must be >= 0")
    frac = float(g["eval_fraction"])
    if not 0.0 <= frac <= 1.0:
        raise ConfigError("eval_fraction must lie in [0, 1]")
    kinds = g["kinds"]
    if kinds is not None:
        bad = [k for k in kinds if k not in D.KINDS]
        if bad:
            raise InvalidSpec(f"unknown scenario kinds {bad}; expected a subset of {D.KINDS}")
    specs = D.generate_specs(count, args.seed, float(g["noise_std"]), kinds)
    out = Path(args.out)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    n_eval = int(round(frac * count))
    entries, jobs = [], []
    for i, spec in enumerate(specs):
        rel = f"scenes/scene_{i:05d}.json"
        split = "train" if i < count - n_eval else "eval"
        entries.append({"path": rel, "split": split, **D.spec_to_dict(spec)})
        jobs.append((spec, out / rel))
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            list(pool.map(_write_scene, jobs, chunksize=8))
    else:
        for job in jobs:
            _write_scene(job)
    manifest = {"format": MANIFEST_FORMAT, "version": 1, "seed": args.seed, "count": count, "scenes": entries}
    _dump_json(manifest, out / "manifest.json")
    print(f"wrote {count} scenes to {out}")
    return 0


def cmd_train(args, cfg) -> int:
    if args.stage is None:
        raise ConfigError("--stage is required for train")
    config = stage_config(cfg, args.stage, args.seed)
    ckpt_in = read_checkpoint(args.checkpoint) if args.checkpoint else None
    if args.stage > 1 and ckpt_in is None:
        raise CheckpointStageMismatch(f"stage {args.stage} needs --checkpoint from stage {args.stage - 1}")
    train_scenes = load_split(args.data, "train")
    eval_scenes = load_split(args.data, "eval")
    model_cfg = config.model if ckpt_in is None else ModelConfig(**ckpt_in["model_config"])
    train = Dataset.from_scenes(train_scenes, model_cfg)
    eval_data = Dataset.from_scenes(eval_scenes, model_cfg) if eval_scenes else None
    result = run_stage(config, train, ckpt_in, eval_data)
    out = Path(args.out)
    save_checkpoint(result.checkpoint, out / f"stage{args.stage}.ckpt.json")
    write_log_csv(result.log_rows, out / f"stage{args.stage}_metrics.csv")
    if result.report is not None:
        report = {"stage": args.stage, "split": "eval", "metrics": result.report.to_dict()}
        jsonschema.validate(report, REPORT_SCHEMA)
        _dump_json(report, out / f"stage{args.stage}_report.json")
        print(f"stage {args.stage}: eval minFDE {result.report.min_fde:.4f} minADE {result.report.min_ade:.4f}")
    print(f"wrote {out / f'stage{args.stage}.ckpt.json'}")
    return 0


def _load_model(path, stage: Optional[int]):
    ckpt = read_checkpoint(path)
    stage = ckpt["stage"] if stage is None else stage
    if stage > ckpt["stage"] + 1 or stage < 1:
        raise CheckpointStageMismatch(f"cannot run stage {stage} from a stage-{ckpt['stage']} checkpoint")
    dtype = DTYPES.get(ckpt.get("meta", {}).get("config", {}).get("dtype"), torch.float32)
    model = model_from_checkpoint(ckpt, dtype=dtype)
    return model, stage


def cmd_evaluate(args, cfg) -> int:
    from .plotting import plot_buckets, plot_modes

    e = cfg["evaluate"]
    split = args.split or e["split"]
    scenes = load_split(args.data, split)
    if not scenes:
        raise HypertrajError(f"split {split!r} is empty")
    out = Path(args.out)
    if args.oracle:
        # ground truth as a single-mode prediction
        preds = []
        for s in scenes:
            mu = np.stack([s.ground_truth[a.id] for a in s.agents])[:, None]
            preds.append((mu, np.ones((len(s.agents), 1))))
        stage = 0
    else:
        if not args.checkpoint:
            raise ConfigError("evaluate needs --checkpoint (or --oracle)")
        model, stage = _load_model(args.checkpoint, args.stage)
        data = Dataset.from_scenes(scenes, model.config)
        preds = predict(model, data.arrays, stage)
    mus = [p[0][0] for p in preds]
    pis = [p[1][0] for p in preds]
    gts = [s.ground_truth[s.agents[0].id] for s in scenes]
    report_obj = aggregate(mus, pis, gts, [interaction_level(s) for s in scenes])
    report = {"stage": stage, "split": split, "metrics": report_obj.to_dict()}
    jsonschema.validate(report, REPORT_SCHEMA)
    _dump_json(report, out / "report.json")
    n_plots = int(args.plots if args.plots is not None else e["plots"])
    for i in range(min(n_plots, len(scenes))):
        plot_modes(scenes[i], preds[i][0][0], preds[i][1][0], out / f"overlay_{i:03d}.svg")
    if report["metrics"]["buckets"]:
        plot_buckets(report["metrics"], out / "buckets.svg")
    m = report["metrics"]
    print(f"minADE {m['min_ade']:.4f} minFDE {m['min_fde']:.4f} MR {m['miss_rate']:.4f} brier-minFDE {m['brier_min_fde']:.4f}")
    return 0


def cmd_predict(args, cfg) -> int:
    if not args.checkpoint:
        raise ConfigError("predict needs --checkpoint")
    model, stage = _load_model(args.checkpoint, args.stage)
    if args.scene:
        scenes, names = [load_any_scene(args.scene)], [Path(args.scene).stem]
    elif args.data:
        manifest = load_manifest(args.data)
        entries = [e for e in manifest["scenes"] if args.split is None or e["split"] == args.split]
        scenes = [D.load_scene(Path(args.data) / e["path"]) for e in entries]
        names = [Path(e["path"]).stem for e in entries]
    else:
        raise ConfigError("predict needs --scene or --data")
    data = Dataset.from_scenes(scenes, model.config)
    preds = predict(model, data.arrays, stage)
    out = Path(args.out)
    for name, scene, (mu, pi) in zip(names, scenes, preds):
        payload = predictions_json(scene, mu, pi)
        jsonschema.validate(payload, PREDICTION_SCHEMA)
        _dump_json(payload, out / f"{name}.pred.json")
    print(f"wrote {len(scenes)} prediction files to {out}")
    return 0


def cmd_plan(args, cfg) -> int:
    from .plotting import plot_plan

    weights, max_iter = planner_settings(cfg)
    if args.builtin:
        problem = {"head_on": head_on_problem, "cut_in": cut_in_problem}[args.builtin]()
        problem.weights = weights
    else:
        if not args.scene:
            raise ConfigError("plan needs --scene or --builtin")
        scene = load_any_scene(args.scene)
        if args.use_ground_truth:
            mu = np.stack([scene.ground_truth[a.id] for a in scene.agents])[:, None]
            pi = np.ones((len(scene.agents), 1))
        else:
            if not args.checkpoint:
                raise ConfigError("plan needs --checkpoint unless --use-ground-truth is set")
            model, stage = _load_model(args.checkpoint, args.stage)
            data = Dataset.from_scenes([scene], model.config)
            mu, pi = predict(model, data.arrays, stage)[0]
        problem = problem_from_prediction(scene, mu, pi, 0, weights)
    result = optimize(problem, max_iterations=max_iter)
    payload = result.to_dict()
    payload["min_distance"] = {
        "initial": _finite(result.min_distance(problem.neighbors, "initial")),
        "final": _finite(result.min_distance(problem.neighbors, "final")),
    }
    jsonschema.validate(payload, PLAN_SCHEMA)
    out = Path(args.out)
    _dump_json(payload, out / "plan.json")
    plot_plan(problem, result, out / "plan.svg")
    md = payload["min_distance"]
    print(f"cost {result.costs[0]:.4g} -> {result.costs[-1]:.4g}; min distance {md['initial']} -> {md['final']}")
    return 0


def _finite(x: float):
    return None if not np.isfinite(x) else x


def cmd_plot(args, cfg) -> int:
    from .plotting import plot_buckets, plot_modes

    out = Path(args.out)
    done = False
    if args.report:
        report = json.loads(Path(args.report).read_text())
        jsonschema.validate(report, REPORT_SCHEMA)
        plot_buckets(report["metrics"], out / "buckets.svg")
        done = True
    if args.predictions:
        if not args.scene:
            raise ConfigError("--predictions needs --scene")
        scene = load_any_scene(args.scene)
        preds = json.loads(Path(args.predictions).read_text())
        jsonschema.validate(preds, PREDICTION_SCHEMA)
        for i, agent in enumerate(scene.agents[: max(1, args.agents)]):
            modes = preds[agent.id]["modes"]
            mu = np.array([m["positions"] for m in modes])
            pi = np.array([m["confidence"] for m in modes])
            plot_modes(scene, mu, pi, out / f"{agent.id}.svg", agent_index=i)
        done = True
    if not done:
        raise ConfigError("plot needs --report and/or --predictions")
    print(f"wrote plots to {out}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "plan": cmd_plan,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes / torch threads")
    common.add_argument("--stage", type=int, choices=(1, 2, 3), help="training or inference stage")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="hypertraj", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic dataset and manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)

    p = sub.add_parser("train", parents=[common], help="train one stage")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="previous-stage checkpoint (stages 2 and 3)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", parents=[common], help="metrics report and overlays")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--split")
    p.add_argument("--plots", type=int)
    p.add_argument("--oracle", action="store_true", help="score the ground truth itself")
    p.add_argument("--out", required=True)

    p = sub.add_parser("predict", parents=[common], help="world-frame multimodal predictions")
    p.add_argument("--checkpoint")
    p.add_argument("--scene", help="scene JSON or Argoverse CSV")
    p.add_argument("--data")
    p.add_argument("--split")
    p.add_argument("--out", required=True)

    p = sub.add_parser("plan", parents=[common], help="optimize the ego plan against predictions")
    p.add_argument("--checkpoint")
    p.add_argument("--scene")
    p.add_argument("--builtin", choices=("head_on", "cut_in"))
    p.add_argument("--use-ground-truth", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("plot", parents=[common], help="re-render figures from saved outputs")
    p.add_argument("--report")
    p.add_argument("--predictions")
    p.add_argument("--scene")
    p.add_argument("--agents", type=int, default=1)
    p.add_argument("--out", required=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is None:
            args.seed = int(cfg["seed"])
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        torch.set_num_threads(args.jobs)
        torch.use_deterministic_algorithms(True)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, InvalidSpec, CheckpointStageMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (HypertrajError, OSError, ValueError, KeyError, jsonschema.ValidationError, SchemaViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
