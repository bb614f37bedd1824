"""Command-line entry point: generate, train, eval, inspect, raster.

Settings come from an INI file (``--config``); flags override file values.
The seed is mandatory: ``--seed``, then ``[run] seed``, then ``VTRACK_SEED``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import dataset, evaluation, models, pipeline
from .evaluation import MissingCheckpoint, MissingSplit, Task
from .roadnet import Archetype, generate_map
from .scenario import ScenarioConfig, SpawnFailure
from .schema import COLUMNS, SchemaViolation
from .traffic import FuzzBounds

log = logging.getLogger("vtrack")

MODEL_TAGS = {"tgan": "TGAN", "infragan": "InfraGAN"}


class UsageError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).replace(",", " ").split())


def _words(text: str) -> tuple[str, ...]:
    return tuple(v for v in str(text).replace(",", " ").split())


def _bool(text) -> bool:
    return str(text).strip().lower() in ("1", "true", "yes", "on")


@dataclass
class RunConfig:
    seed: int | None = None
    generation: pipeline.GenerationConfig = field(default_factory=pipeline.GenerationConfig)
    train: models.TrainConfig = field(default_factory=models.TrainConfig)
    ks: tuple[int, ...] = (1, 3, 5)
    horizons: tuple[int, ...] = (5, 6, 8)
    task: Task = Task.AllVehicles
    miss_threshold: float = evaluation.MISS_THRESHOLD
    missrate_per_sample: bool = False
    eval_seed: int = 0

    @classmethod
    def from_ini(cls, path: str | Path | None) -> RunConfig:
        cp = configparser.ConfigParser()
        if path is not None:
            if not Path(path).is_file():
                raise UsageError(f"config file {path} not found")
            cp.read(path)
        run = cp["run"] if cp.has_section("run") else {}
        gen = cp["generate"] if cp.has_section("generate") else {}
        fuzz = FuzzBounds.from_mapping(cp["fuzz"]) if cp.has_section("fuzz") else FuzzBounds()
        scen = ScenarioConfig(fuzz=fuzz)
        if cp.has_section("scenario"):
            s = cp["scenario"]
            scen = replace(
                scen,
                duration=float(s.get("duration", scen.duration)),
                n_aggressive=int(s.get("n_aggressive", scen.n_aggressive)),
                n_cautious=int(s.get("n_cautious", scen.n_cautious)),
                dry_friction=float(s.get("dry_friction", scen.dry_friction)),
                wet_limit_scale=float(s.get("wet_limit_scale", scen.wet_limit_scale)),
            )
        defaults = pipeline.GenerationConfig()
        generation = pipeline.GenerationConfig(
            maps=_words(gen["maps"]) if "maps" in gen else defaults.maps,
            scenarios_per_map=int(gen.get("scenarios_per_map", defaults.scenarios_per_map)),
            n_actors=int(gen.get("n_actors", defaults.n_actors)),
            map_seed=int(gen.get("map_seed", defaults.map_seed)),
            ratios=_ints(gen["ratios"]) if "ratios" in gen else defaults.ratios,
            scenario=scen,
        )
        train = models.TrainConfig.from_mapping(cp["train"]) if cp.has_section("train") else models.TrainConfig()
        ev = cp["eval"] if cp.has_section("eval") else {}
        return cls(
            seed=int(run["seed"]) if "seed" in run else None,
            generation=generation,
            train=train,
            ks=_ints(ev["ks"]) if "ks" in ev else (1, 3, 5),
            horizons=_ints(ev["horizons"]) if "horizons" in ev else (5, 6, 8),
            task=Task(ev.get("task", Task.AllVehicles.value)),
            miss_threshold=float(ev.get("miss_threshold", evaluation.MISS_THRESHOLD)),
            missrate_per_sample=_bool(ev.get("missrate_per_sample", "false")),
            eval_seed=int(ev.get("seed", 0)),
        )


def resolve_seed(flag: int | None, cfg: RunConfig) -> int:
    if flag is not None:
        return flag
    if cfg.seed is not None:
        return cfg.seed
    env = os.environ.get("VTRACK_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"VTRACK_SEED must be an integer, got {env!r}") from None
    raise UsageError("a seed is required: pass --seed, set [run] seed in the config, or export VTRACK_SEED")


# commands ---------------------------------------------------------------------

def cmd_generate(args, cfg: RunConfig) -> int:
    seed = resolve_seed(args.seed, cfg)
    gen = cfg.generation
    overrides = {}
    if args.maps:
        overrides["maps"] = _words(args.maps)
    if args.scenarios_per_map is not None:
        overrides["scenarios_per_map"] = args.scenarios_per_map
    if args.n_actors is not None:
        overrides["n_actors"] = args.n_actors
    if overrides:
        gen = replace(gen, **overrides)
    summary = pipeline.generate_dataset(args.out, gen, seed, workers=args.workers)
    sp = summary["splits"]
    print(f"generated {summary['scenarios']} scenarios into {args.out}")
    print(f"splits: train {sp['train']}, val {sp['val']}, test {sp['test']}, unused {sp['unused']}")
    print(f"ego crashes: {summary['ego_crashes']}, collisions: {summary['collisions']}")
    for m, t in sorted(summary["per_map"].items()):
        print(f"  {m}: {t['scenarios']} scenarios, {t['ego_crashes']} ego crashes")
    return 0


def _write_losses(path: Path, history: list[dict]) -> None:
    cols: list[str] = []
    for row in history:
        cols += [c for c in row if c not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def cmd_train(args, cfg: RunConfig) -> int:
    seed = resolve_seed(args.seed, cfg)
    tcfg = replace(cfg.train, seed=seed)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    out = Path(args.out)
    tgan_path = Path(args.tgan) if args.tgan else out / "tgan.ckpt"
    if args.model == "infragan" and not tgan_path.is_file():
        raise MissingCheckpoint(f"pretrained TGAN required: {tgan_path} not found; run `vtrack train --model tgan` first")
    stats = pipeline.load_stats(args.data)
    train = pipeline.load_windows(args.data, "train", stats)
    if not train:
        raise MissingSplit(f"training split under {args.data} yields no windows")
    out.mkdir(parents=True, exist_ok=True)
    if args.model == "tgan":
        result = models.tgan_train(train, tcfg)
    else:
        tgan, _ = models.load_model(tgan_path)
        val = pipeline.load_windows(args.data, "val", stats)
        result = models.infragan_train(train, tgan, tcfg, val=val or None)
    ckpt = out / f"{args.model}.ckpt"
    models.save_model(ckpt, result, args.model, tcfg)
    _write_losses(out / f"{args.model}.losses.csv", result.history)
    print(f"trained {MODEL_TAGS[args.model]} for {tcfg.epochs} epochs on {len(train)} windows -> {ckpt}")
    return 0


def _predictor(path: str) -> evaluation.GanPredictor:
    p = Path(path)
    if not p.is_file():
        raise MissingCheckpoint(f"checkpoint {p} not found; run `vtrack train` first")
    result, meta = models.load_model(p)
    tag = MODEL_TAGS.get(meta.get("model", ""), p.stem)
    return evaluation.GanPredictor(result.generator, result.correction, tag)


def cmd_eval(args, cfg: RunConfig) -> int:
    tables = sorted(set(_ints(args.tables))) if args.tables else [6, 7, 8, 9]
    for t in tables:
        if t not in evaluation.TABLE_TITLES:
            raise UsageError(f"unknown table {t}; choose from 6, 7, 8, 9")
    if args.oracle:
        predictors = [evaluation.OraclePredictor()]
    elif args.compare:
        predictors = [_predictor(p) for p in args.compare]
    elif args.checkpoint:
        predictors = [_predictor(args.checkpoint)]
    else:
        raise UsageError("pass --checkpoint, --compare BEFORE AFTER, or --oracle")
    stats = pipeline.load_stats(args.data)
    windows = pipeline.load_windows(args.data, args.split, stats)
    seed = args.seed if args.seed is not None else cfg.eval_seed
    kw = dict(ks=cfg.ks, horizons=cfg.horizons, seed=seed, split=args.split, threshold=cfg.miss_threshold,
              missrate_per_sample=cfg.missrate_per_sample)
    task = Task(args.task) if args.task else cfg.task
    main = [evaluation.benchmark(p, windows, task, per_map=True, **kw) for p in predictors]
    ego = [evaluation.benchmark(p, windows, Task.EgoOnly, per_map=False, **kw) for p in predictors] \
        if 9 in tables else []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = "\n".join(evaluation.render_table(t, ego if t == 9 else main) for t in tables)
    (out / "report.txt").write_text(text)
    (out / "report.json").write_text(evaluation.report_json(main + ego))
    labels = ["Before", "After"] if args.compare else [p.tag for p in predictors]
    for metric in ("ade", "fde"):
        evaluation.error_histogram([getattr(r, f"{metric}_samples") for r in main], labels=labels,
                                   path=out / f"{metric}_hist.png", title=f"{metric.upper()} distribution")
    print(text, end="")
    return 0


def cmd_inspect(args, cfg: RunConfig) -> int:
    path = Path(args.path)
    csv_path = path / "frames.csv" if path.is_dir() else path
    if not csv_path.is_file():
        raise UsageError(f"{csv_path} not found")
    frames = dataset.frames_from_csv(csv_path.read_text())
    actors = sorted({f.actor_id for f in frames})
    ego = sorted({f.actor_id for f in frames if f.actor_type == "Ego"})
    last = frames[-1].timestamp if frames else 0.0
    print(f"{csv_path}: {len(frames)} records, {len(actors)} actors (ego {ego}), last timestamp {last:.2f} s")
    print("schema: OK (28 columns)")
    width = max(len(c) for c in COLUMNS)
    for f in frames[: args.rows]:
        print("-" * 40)
        for c in COLUMNS:
            print(f"{c:<{width}}  {getattr(f, c)}")
    return 0


def cmd_raster(args, cfg: RunConfig) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    src = Path(args.path)
    if not (src / "frames.csv").is_file():
        raise UsageError(f"{src} is not a scenario directory (no frames.csv)")
    log_ = dataset.read_scenario(src)
    road = generate_map(Archetype(log_.map_ref[0]), log_.map_ref[1])
    fig, ax = plt.subplots(figsize=(8, 8))
    for lane in road.lanes:
        c = np.asarray(lane.centerline)
        ax.plot(c[:, 0], c[:, 1], color="0.8", lw=0.8, zorder=1)
    tracks: dict[int, list] = {}
    for f in log_.frames:
        tracks.setdefault(f.actor_id, []).append((f.pos_x, f.pos_y, f.actor_type))
    for aid, pts in sorted(tracks.items()):
        xy = np.array([(x, y) for x, y, _ in pts])
        is_ego = pts[0][2] == "Ego"
        ax.plot(xy[:, 0], xy[:, 1], lw=2.0 if is_ego else 1.0, color="tab:red" if is_ego else "tab:blue", zorder=2)
        ax.plot(xy[-1, 0], xy[-1, 1], "o", ms=4, color="tab:red" if is_ego else "tab:blue", zorder=3)
    ax.set_aspect("equal")
    ax.set_title(f"{log_.scenario_id} ({log_.map_ref[0]}, {log_.weather.preset.value})")
    out = Path(args.out) if args.out else src / "raster.png"
    fig.savefig(out, dpi=120)
    plt.close(fig)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vtrack", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="INI settings file")
        if seed:
            sp.add_argument("--seed", type=int, help="global seed (overrides config and VTRACK_SEED)")

    g = sub.add_parser("generate", help="simulate scenarios and write a split dataset")
    common(g)
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--workers", type=int, help="worker processes (default: all cores)")
    g.add_argument("--maps", help="comma-separated archetypes")
    g.add_argument("--scenarios-per-map", type=int)
    g.add_argument("--n-actors", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train TGAN, or InfraGAN on top of a TGAN checkpoint")
    common(t)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--model", choices=sorted(MODEL_TAGS), required=True)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--tgan", help="TGAN checkpoint for InfraGAN (default: <out>/tgan.ckpt)")
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="benchmark checkpoints and write reports")
    common(e)
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--checkpoint")
    e.add_argument("--compare", nargs=2, metavar=("BEFORE", "AFTER"))
    e.add_argument("--oracle", action="store_true", help="score the ground truth itself")
    e.add_argument("--tables", help="comma-separated table layouts among 6,7,8,9")
    e.add_argument("--task", choices=[t.value for t in Task])
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True, help="report directory")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="validate and pretty-print one frames.csv")
    i.add_argument("path", help="scenario directory or frames.csv")
    i.add_argument("--rows", type=int, default=1)
    i.set_defaults(func=cmd_inspect, config=None, seed=None)

    r = sub.add_parser("raster", help="schematic top-down PNG of one scenario")
    r.add_argument("path", help="scenario directory")
    r.add_argument("--out")
    r.set_defaults(func=cmd_raster, config=None, seed=None)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.from_ini(args.config)
        return args.func(args, cfg)
    except models.Diverged as exc:
        print(f"error: {exc}", file=sys.stderr)
    except SchemaViolation as exc:
        print(f"error: schema violation: {exc}", file=sys.stderr)
    except SpawnFailure as exc:
        print(f"error: spawn failure: {exc}", file=sys.stderr)
    except (MissingCheckpoint, MissingSplit, dataset.InsufficientScenarios, UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
