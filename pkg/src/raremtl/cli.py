"""Command line entry point: generate -> assign -> train/sweep -> prune -> eval -> simulate.

Every stage writes into ``<out>/<stage>/`` together with a ``manifest.json``
holding the stage config, its hash, the seeds and the sha256 of every input
and output file. Stages are pure functions of (inputs, config, seed), so a
rerun with the same config reproduces the manifests byte for byte.

Exit codes: 0 ok, 2 config error, 3 missing upstream artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from raremtl import __version__
from raremtl import abtest, assignment, metrics, model, synth
from raremtl.nn import NumericError

logger = logging.getLogger("raremtl")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
SECTIONS = ("run", "generator", "assignment", "model", "sweep", "simulation")
STAGES = ("generate", "assign", "train", "sweep", "prune", "eval", "simulate")
# sections whose values feed each stage (directly or through upstream artifacts hashed as inputs)
STAGE_SECTIONS = {
    "generate": ("generator",),
    "assign": ("assignment",),
    "train": ("assignment", "model"),
    "sweep": ("assignment", "model", "sweep"),
    "prune": (),
    "eval": ("assignment",),
    "simulate": ("assignment", "simulation"),
}
STAGE_HELP = {
    "generate": "write a synthetic click log, its setups and feature schema",
    "assign": "label each setup hard or soft from decayed CVR on the training days",
    "train": "train the multi-task model and the single-task baseline",
    "sweep": "task-weight and shared-layer sweeps (weight_sweep.csv, layer_sweep.csv)",
    "prune": "drop the soft tower and check the pruned model on probe events",
    "eval": "hard-task RIG and AUC of multi-task vs single-task on held-out days",
    "simulate": "budget-split A/B simulation of pruned multi-task vs single-task bids",
    "pipeline": "run every stage in order",
}
PROBE_EVENTS = 1000
SWEEP_COLUMNS = ("config_id", "w_hard", "w_soft", "shared_layers", "rig", "auc", "rig_rel", "auc_rel", "rig_delta")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


class MissingArtifact(CliError):
    def __init__(self, stage: str, path: Path):
        super().__init__(f"missing artifact {path} from stage {stage!r}; run `raremtl {stage}` first", EXIT_MISSING)


# -- config -------------------------------------------------------------------

def default_config_text() -> str:
    return resources.files("raremtl").joinpath("default.toml").read_text(encoding="utf-8")


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_config(path: str | None, overrides: list[str] = ()) -> dict:
    """Read a TOML run config and apply ``section.key=value`` overrides."""
    try:
        if path is None:
            cfg = tomllib.loads(default_config_text())
        else:
            with open(path, "rb") as fh:
                cfg = tomllib.load(fh)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise CliError(f"cannot parse {path}: {exc}")
    unknown = set(cfg) - set(SECTIONS)
    if unknown:
        raise CliError(f"unknown config sections: {sorted(unknown)}")
    for item in overrides:
        key, sep, value = item.partition("=")
        parts = key.strip().split(".")
        if not sep or len(parts) < 2 or parts[0] not in SECTIONS:
            raise CliError(f"--set expects section.key=value, got {item!r}")
        node = cfg.setdefault(parts[0], {})
        for p in parts[1:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(value.strip())
    return cfg


def section(cfg: dict, name: str) -> dict:
    if name not in cfg:
        raise CliError(f"config is missing section [{name}]")
    d = dict(cfg[name])
    if name != "run" and "seed" in d:
        raise CliError(f"[{name}] must not set 'seed'; stage seeds derive from [run].seed")
    return d


def derive_seed(seed: int, stage: str) -> int:
    """Stable 32-bit sub-seed for ``stage`` from the global seed."""
    return int(hashlib.sha256(f"{seed}:{stage}".encode()).hexdigest()[:8], 16)


def _build(cls, d: dict, what: str):
    try:
        obj = cls.from_dict(d)
        obj.validate()
        return obj
    except (TypeError, ValueError) as exc:
        raise CliError(f"[{what}] {exc}")


def generator_config(cfg: dict, seed: int) -> synth.GeneratorConfig:
    d = section(cfg, "generator")
    d["seed"] = derive_seed(seed, "generator")
    return _build(synth.GeneratorConfig, d, "generator")


def assignment_config(cfg: dict) -> assignment.AssignmentConfig:
    d = section(cfg, "assignment")
    if "hysteresis_band" in d:
        d["hysteresis_band"] = tuple(d["hysteresis_band"])
    return _build(assignment.AssignmentConfig, d, "assignment")


def model_config(cfg: dict, seed: int, features) -> model.ModelConfig:
    d = section(cfg, "model")
    d["features"] = features
    d["seed"] = derive_seed(seed, "model")
    return _build(model.ModelConfig, d, "model")


def sim_config(cfg: dict, seed: int) -> tuple[abtest.SimConfig, dict]:
    d = section(cfg, "simulation")
    extra = {k: d.pop(k) for k in ("replications", "oracle_check", "plot") if k in d}
    d.setdefault("router_threshold", assignment_config(cfg).online_threshold)
    d["seed"] = derive_seed(seed, "simulation")
    sc = _build(abtest.SimConfig, d, "simulation")
    extra.setdefault("replications", 1)
    if int(extra["replications"]) < 1:
        raise CliError("[simulation] replications must be >= 1")
    return sc, extra


# -- run context -------------------------------------------------------------

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class Run:
    def __init__(self, cfg: dict, out: Path, seed: int, workers: int, force: bool):
        self.cfg = cfg
        self.out = out
        self.seed = seed
        self.workers = workers
        self.force = force
        run = cfg.get("run", {})
        self.train_fraction = float(run.get("train_fraction", 0.8))
        if not 0 < self.train_fraction < 1:
            raise CliError("[run] train_fraction must be in (0,1)")

    def stage_dir(self, stage: str) -> Path:
        return self.out / stage

    def artifact(self, stage: str, name: str) -> Path:
        path = self.stage_dir(stage) / name
        if not path.exists():
            raise MissingArtifact(stage, path)
        return path

    def begin(self, stage: str) -> Path:
        d = self.stage_dir(stage)
        if (d / "manifest.json").exists() or (d.exists() and any(d.iterdir())):
            if not self.force:
                raise CliError(f"{d} already exists; pass --force to overwrite")
            shutil.rmtree(d)
        d.mkdir(parents=True, exist_ok=True)
        return d

    def finish(self, stage: str, inputs: list[Path], extra: dict | None = None) -> Path:
        d = self.stage_dir(stage)
        used = {name: self.cfg.get(name, {}) for name in STAGE_SECTIONS[stage]}
        used["run"] = {"seed": self.seed, "train_fraction": self.train_fraction}
        rel = lambda p: p.relative_to(self.out).as_posix()  # noqa: E731
        outputs = sorted(p for p in d.rglob("*") if p.is_file() and p.name != "manifest.json")
        manifest = {
            "stage": stage,
            "version": __version__,
            "seed": self.seed,
            "config": used,
            "config_hash": hashlib.sha256(canonical_json(used).encode()).hexdigest(),
            "inputs": {rel(p): sha256_file(p) for p in sorted(inputs)},
            "outputs": {rel(p): sha256_file(p) for p in outputs},
        }
        if extra:
            manifest.update(extra)
        path = d / "manifest.json"
        path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        logger.info("%s: wrote %d files to %s", stage, len(outputs), d)
        return path

    # shared loaders
    def load_generated(self):
        schema = synth.read_schema(self.artifact("generate", "schema.json"))
        names = [f["name"] for f in schema["features"]]
        log, skipped = synth.read_log(self.artifact("generate", "log.jsonl"), names)
        if skipped:
            logger.warning("skipped %d malformed log lines", skipped)
        setups = synth.read_setups(self.artifact("generate", "setups.csv"))
        features = [(f["name"], f["vocab_size"]) for f in schema["model_features"]]
        return setups, log, features

    def load_assignments(self):
        return assignment.read_assignments(self.artifact("assign", "assignments.csv"))

    def datasets(self):
        setups, log, features = self.load_generated()
        acfg = assignment_config(self.cfg)
        assignments = self.load_assignments()
        cats = {s.setup_id: s.category for s in setups}
        train, ev = synth.split(log, self.train_fraction)
        tr = (train.model_inputs(), train.converted, assignment.task_labels(train.setup_id, assignments, acfg, cats))
        evd = (ev.model_inputs(), ev.converted, assignment.task_labels(ev.setup_id, assignments, acfg, cats))
        return setups, features, train, ev, tr, evd, assignments


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- stages ---------------------------------------------------------------------

def cmd_generate(run: Run) -> None:
    gcfg = generator_config(run.cfg, run.seed)
    d = run.begin("generate")
    setups, log = synth.generate(gcfg)
    synth.write_log(log, d / "log.jsonl")
    synth.write_setups(setups, d / "setups.csv")
    synth.write_schema(gcfg, d / "schema.json")
    run.finish("generate", [], {"stage_seed": gcfg.seed, "n_events": len(log), "n_setups": len(setups)})


def cmd_assign(run: Run) -> None:
    acfg = assignment_config(run.cfg)
    setups, log, _ = run.load_generated()
    train, _ = synth.split(log, run.train_fraction)
    first, last = int(train.day.min()), int(train.day.max())
    d = run.begin("assign")
    cats = {s.setup_id: s.category for s in setups}
    result, history = assignment.assign_daily(train, first, last, acfg, cats)
    assignment.write_assignments(result.assignments, d / "assignments.csv")
    labels = {t: sum(a.label is t for a in result.assignments.values()) for t in assignment.Task}
    run.finish("assign", [run.artifact("generate", n) for n in ("log.jsonl", "setups.csv")],
               {"as_of_day": last, "online_threshold": result.online_threshold,
                "labels": {t.value: n for t, n in labels.items()}, "skipped_rows": result.skipped_rows})


def cmd_train(run: Run) -> None:
    _, features, _, _, tr, _, _ = run.datasets()
    mcfg = model_config(run.cfg, run.seed, features)
    d = run.begin("train")
    net = model.MtlNetwork.build(mcfg)
    if mcfg.validation_fraction > 0:
        a, b = model.holdout(len(tr[1]), mcfg.validation_fraction)
        pick = lambda idx: tuple(np.asarray(t)[idx] for t in tr)  # noqa: E731
        _, history = model.train(net, *pick(a), mcfg, validation=pick(b))
    else:
        _, history = model.train(net, *tr, mcfg)
    baseline = model.fit_single_task(mcfg, tr[0], tr[1])
    model.save_checkpoint(net, d / "mtl.json")
    model.save_checkpoint(baseline, d / "baseline.json")
    _write_json(d / "history.json", [asdict(h) for h in history])
    run.finish("train", _inputs(run, "generate", "assign"), {"stage_seed": mcfg.seed})


def _inputs(run: Run, *stages: str) -> list[Path]:
    names = {
        "generate": ("log.jsonl", "setups.csv", "schema.json"),
        "assign": ("assignments.csv",),
        "train": ("mtl.json", "baseline.json"),
        "prune": ("inference.json", "baseline_inference.json"),
    }
    return [run.artifact(s, n) for s in stages for n in names[s]]


def cmd_sweep(run: Run) -> None:
    _, features, _, _, tr, evd, _ = run.datasets()
    base = model_config(run.cfg, run.seed, features)
    sw = section(run.cfg, "sweep")
    weights = [tuple(map(float, w)) for w in sw.get("weights", model.SWEEP_WEIGHTS)]
    layers = [int(k) for k in sw.get("shared_layers", model.SWEEP_SHARED_LAYERS)]
    d = run.begin("sweep")
    try:
        t1 = model.sweep(model.weight_sweep_configs(base, weights), tr, evd, workers=run.workers)
        t2 = model.sweep(model.layer_sweep_configs(base, layers), tr, evd, workers=run.workers)
    except model.ConfigError as exc:
        raise CliError(str(exc))
    for name, rows in (("weight_sweep.csv", t1), ("layer_sweep.csv", t2)):
        _write_csv(d / name, SWEEP_COLUMNS,
                   [(r.config_id, r.w_hard, r.w_soft, r.shared_layers, repr(r.rig), repr(r.auc), repr(r.rig_rel),
                     repr(r.auc_rel), metrics.format_pct(r.rig_rel)) for r in rows])
    run.finish("sweep", _inputs(run, "generate", "assign"))


def _probe_check(full: model.MtlNetwork, pruned: model.InferenceModel, x: np.ndarray) -> None:
    probe = x[:PROBE_EVENTS]
    if not np.array_equal(full.predict(probe)[1], pruned.predict(probe)):
        raise CliError("pruned model disagrees with the full model's p_hard on the probe set", EXIT_NUMERIC)


def cmd_prune(run: Run) -> None:
    full = model.load_checkpoint(run.artifact("train", "mtl.json"))
    base = model.load_checkpoint(run.artifact("train", "baseline.json"))
    _, log, _ = run.load_generated()
    d = run.begin("prune")
    pairs = []
    for name, net in (("inference.json", full), ("baseline_inference.json", base)):
        pruned = model.prune_to_inference(net)
        _probe_check(net, pruned, log.model_inputs())
        model.save_checkpoint(pruned, d / name)
        pairs.append((name, pruned.num_params(), net.num_params()))
    run.finish("prune", _inputs(run, "train"),
               {"params": {n: {"pruned": p, "full": f} for n, p, f in pairs}})


def cmd_eval(run: Run) -> None:
    _, _, _, _, _, evd, _ = run.datasets()
    mtl = model.load_checkpoint(run.artifact("train", "mtl.json"))
    base = model.load_checkpoint(run.artifact("train", "baseline.json"))
    d = run.begin("eval")
    try:
        rep_m = model.evaluate_hard(mtl, *evd, label="mtl")
        rep_b = model.evaluate_hard(base, *evd, label="single_task")
    except metrics.UndefinedMetricError as exc:
        raise CliError(f"evaluation set: {exc}", EXIT_NUMERIC)
    rel = metrics.relative(rep_m, rep_b)
    _write_json(d / "report.json", {"mtl": asdict(rep_m), "baseline": asdict(rep_b), "relative": rel})
    lines = [f"{'Metric':<8}{'MTL vs single-task':>20}{'MTL':>12}{'single-task':>14}"]
    for key in ("rig", "auc"):
        lines.append(f"{key.upper():<8}{metrics.format_pct(rel[key]):>20}"
                     f"{getattr(rep_m, key):>12.5f}{getattr(rep_b, key):>14.5f}")
    lines.append(f"hard-task eval events: {rep_m.n} (gamma {rep_m.gamma:.6f})")
    if rep_b.rig <= 0:
        lines.append("note: baseline RIG <= 0, so the relative RIG delta is not meaningful")
    (d / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    run.finish("eval", _inputs(run, "generate", "assign", "train"))


def _simulate_one(args):
    ev, setups, assignments, control, variant, cfg, acfg = args
    return abtest.run_ab(ev, setups, assignments, control, variant, cfg, assignment_cfg=acfg)


def _plot(report: abtest.AbReport, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "raremtl"
    defined = [o for o in report.outcomes if o.defined]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter([o.spend_control for o in defined], [o.cpa_ratio for o in defined], s=12)
    ax.axhline(1.0, color="grey", lw=0.8)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("control spend")
    ax.set_ylabel("CPA ratio (variant / control)")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_simulate(run: Run) -> None:
    scfg, extra = sim_config(run.cfg, run.seed)
    acfg = assignment_config(run.cfg)
    setups, _, train, ev, _, _, assignments = run.datasets()
    full = model.load_checkpoint(run.artifact("train", "mtl.json"))
    variant = model.load_checkpoint(run.artifact("prune", "inference.json"))
    control = model.load_checkpoint(run.artifact("prune", "baseline_inference.json"))
    _probe_check(full, variant, ev.model_inputs())
    d = run.begin("simulate")
    reps = int(extra["replications"])
    cfgs = [scfg] + [abtest.SimConfig(**{**asdict(scfg), "seed": derive_seed(scfg.seed, f"rep{r}")})
                     for r in range(1, reps)]
    jobs = [(ev, setups, assignments, abtest.ModelScorer(control), abtest.ModelScorer(variant), c, acfg)
            for c in cfgs]
    if extra.get("oracle_check", False):
        gamma = float(np.mean(train.converted))
        jobs += [(ev, setups, assignments, abtest.ConstantScorer(gamma), abtest.OracleScorer(), c, acfg)
                 for c in cfgs]
    try:
        if run.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=run.workers) as pool:
                reports = list(pool.map(_simulate_one, jobs))
        else:
            reports = [_simulate_one(j) for j in jobs]
    except abtest.ReportError as exc:
        raise CliError(f"simulation: {exc}", EXIT_NUMERIC)
    main, oracle = reports[:reps], reports[reps:]
    _write_json(d / "ab_report.json", {
        "replicates": [{"seed": c.seed, **r.to_dict()} for c, r in zip(cfgs, main)],
        "oracle_vs_constant": [{"seed": c.seed, **r.to_dict()} for c, r in zip(cfgs, oracle)],
    })
    text = []
    for c, r in zip(cfgs, main):
        text.append(f"# replicate seed {c.seed}: pruned MTL (variant) vs single-task (control)\n{r.table()}")
    for c, r in zip(cfgs, oracle):
        text.append(f"# replicate seed {c.seed}: true-pCVR oracle vs constant-gamma control\n{r.table()}")
    (d / "ab_table.txt").write_text("\n".join(text), encoding="utf-8")
    abtest.write_outcomes(main[0], d / "outcomes.csv")
    if extra.get("plot", False):
        _plot(main[0], d / "cpa_ratio.svg")
    run.finish("simulate", _inputs(run, "generate", "assign", "train", "prune"))


def cmd_pipeline(run: Run) -> None:
    for stage in STAGES:
        if stage == "sweep" and not run.cfg.get("sweep", {}).get("enabled", True):
            continue
        COMMANDS[stage](run)


COMMANDS = {
    "generate": cmd_generate,
    "assign": cmd_assign,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "prune": cmd_prune,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "pipeline": cmd_pipeline,
}


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raremtl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--print-default-config", action="store_true", help="print the bundled config and exit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run config (default: the bundled default.toml)")
    common.add_argument("--out", help="output directory (overrides [run].out)")
    common.add_argument("--seed", type=int, help="global seed (overrides [run].seed)")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="parallel workers for sweeps and simulation replicates")
    common.add_argument("--force", action="store_true", help="overwrite existing stage outputs")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (TOML syntax), repeatable")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=STAGE_HELP[name])
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_default_config:
        sys.stdout.write(default_config_text())
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        run_cfg = cfg.setdefault("run", {})
        if args.seed is not None:
            run_cfg["seed"] = args.seed
        if args.out is not None:
            run_cfg["out"] = args.out
        seed = run_cfg.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise CliError("[run] seed must be a non-negative integer")
        run = Run(cfg, Path(run_cfg.get("out", "runs/default")), seed, max(1, args.workers), args.force)
        COMMANDS[args.command](run)
    except CliError as exc:
        print(f"raremtl {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except NumericError as exc:
        print(f"raremtl {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (synth.ConfigError, model.ConfigError) as exc:
        print(f"raremtl {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
