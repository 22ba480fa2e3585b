"""Command-line entry point: train, matrix, probe and exploit runs.

Configs are INI files with one section per module::

    [training]
    algorithm = ADALIGN
    env = IPD
    steps = 3000

    [evaluation]
    exploit_threshold = 0.15

    [run]
    frozen =

``--config`` accepts a path or the name of a bundled preset (``ipd_grpo``,
``tas_adalign`` ...).  ``--override key=value`` (or ``section.key=value``)
replaces single entries.  Every command writes ``manifest.json`` before doing
any work and finalises it on exit.
"""

from __future__ import annotations

import argparse
import configparser
import contextlib
import dataclasses
import datetime as _dt
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import __version__
from .core import make_eval_specs, run_batch, write_transcript
from .envs import EnvId, make_game
from .errors import ConfigurationError, InternalError, InvalidProposalError, StepAborted
from .evaluation import (
    cross_play, exploitability_report, grim_probe_split, reciprocity_probe_ipd, split_efficiency,
    tas_behavior_probe, ProbeStats,
)
from .policy import (
    BUILTIN_NAMES, POLICY_HEADER, Policy, TabularPolicy, builtin_policy, load_policy, truthful_cooperator,
)
from .training import TrainConfig, train

log = logging.getLogger("dilemmarl")

OUT_ROOT_ENV = "DILEMMARL_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

PRESETS = tuple(f"{e}_{a}" for e in ("ipd", "split", "tas") for a in ("grpo", "adalign"))
PROBES = ("reciprocity", "grim", "tas_behavior", "split_efficiency")

EVAL_DEFAULTS = {
    "exploit_threshold": 0.15,
    "exploit_seeds": (0, 1, 2),
    "eval_games": 512,
    "eval_seed": 7,
}
RUN_DEFAULTS = {
    "frozen": "",
    "init": "",
    "transcripts": 0,
    "workers": 0,
}


# ---------------------------------------------------------------- config

def _parse_value(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        nums = [float(p) for p in parts]
        return tuple(int(x) if x.is_integer() else x for x in nums)
    return text


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


_TRAIN_DEFAULTS = {f.name: f.default for f in dataclasses.fields(TrainConfig)}


@dataclass
class RunConfig:
    """Fully resolved configuration: every default materialised."""

    training: TrainConfig
    evaluation: dict = field(default_factory=lambda: dict(EVAL_DEFAULTS))
    run: dict = field(default_factory=lambda: dict(RUN_DEFAULTS))

    def sections(self) -> dict:
        return {"training": self.training.to_dict(), "evaluation": dict(self.evaluation), "run": dict(self.run)}

    def to_ini(self) -> str:
        lines = []
        for name, values in self.sections().items():
            lines.append(f"[{name}]")
            lines += [f"{k} = {_format_value(v)}" for k, v in values.items()]
            lines.append("")
        return "\n".join(lines)


_SCHEMA = {"training": _TRAIN_DEFAULTS, "evaluation": EVAL_DEFAULTS, "run": RUN_DEFAULTS}


def _valid_keys() -> str:
    return "; ".join(f"[{s}] " + ", ".join(keys) for s, keys in _SCHEMA.items())


def preset_path(name: str) -> Path:
    return Path(str(resources.files("dilemmarl") / "presets" / f"{name}.ini"))


def _read_config_text(spec: str) -> tuple[str, str]:
    path = Path(spec)
    if path.is_file():
        return path.read_text(), str(path)
    stem = spec[:-4] if spec.endswith(".ini") else spec
    if stem in PRESETS:
        p = preset_path(stem)
        return p.read_text(), f"preset:{stem}"
    raise ConfigurationError(f"config {spec!r} is neither a file nor a preset ({', '.join(PRESETS)})")


def load_config(spec: str | None, overrides=()) -> RunConfig:
    """Read an INI file or preset, apply ``key=value`` overrides, validate."""
    raw = {s: {} for s in _SCHEMA}
    if spec:
        text, _ = _read_config_text(spec)
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigurationError(f"cannot parse config: {exc}") from None
        for section in cp.sections():
            if section not in _SCHEMA:
                raise ConfigurationError(f"unknown section [{section}]; valid sections: {', '.join(_SCHEMA)}")
            for k, v in cp.items(section):
                if k not in _SCHEMA[section]:
                    raise ConfigurationError(f"unknown key {section}.{k}; valid keys: {_valid_keys()}")
                raw[section][k] = v
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        key = key.strip()
        if "." in key:
            section, key = key.split(".", 1)
            if section not in _SCHEMA or key not in _SCHEMA[section]:
                raise ConfigurationError(f"unknown key {section}.{key}; valid keys: {_valid_keys()}")
        else:
            owners = [s for s, keys in _SCHEMA.items() if key in keys]
            if not owners:
                raise ConfigurationError(f"unknown key {key!r}; valid keys: {_valid_keys()}")
            section = owners[0]
        raw[section][key] = value

    env = raw["training"].get("env", _TRAIN_DEFAULTS["env"])
    algorithm = raw["training"].get("algorithm", _TRAIN_DEFAULTS["algorithm"]).strip()
    typed = {}
    for section, values in raw.items():
        typed[section] = {}
        for k, v in values.items():
            try:
                typed[section][k] = _parse_value(v, _SCHEMA[section][k])
            except ValueError as exc:
                raise ConfigurationError(f"bad value for {section}.{k}: {exc}") from None
    train_values = {k: v for k, v in typed["training"].items() if k not in ("env", "algorithm")}
    training = TrainConfig.for_env(env.strip(), algorithm, **train_values)
    evaluation = dict(EVAL_DEFAULTS, **typed["evaluation"])
    run = dict(RUN_DEFAULTS, **typed["run"])
    if not 0 < evaluation["exploit_threshold"] < 1:
        raise ConfigurationError("exploit_threshold must lie in (0, 1)")
    if evaluation["eval_games"] < 1:
        raise ConfigurationError("eval_games must be positive")
    if run["workers"] < 0 or run["transcripts"] < 0:
        raise ConfigurationError("workers and transcripts must be non-negative")
    return RunConfig(training, evaluation, run)


def resolve_workers(n: int) -> int:
    return n if n > 0 else (os.cpu_count() or 1)


# --------------------------------------------------------------- manifest

class Manifest:
    """``manifest.json`` in the run directory; written first, finalised at exit."""

    def __init__(self, run_dir: Path, command: str, argv, config: dict, seeds):
        self.path = Path(run_dir) / "manifest.json"
        self.start = time.time()
        self.data = {
            "tool": "dilemmarl",
            "version": __version__,
            "command": command,
            "argv": list(argv),
            "status": "incomplete",
            "config": config,
            "seeds": list(seeds),
            "artifacts": [],
            "started": _dt.datetime.now().isoformat(timespec="seconds"),
        }
        self.write()

    def write(self):
        tmp = self.path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.data, indent=1, default=str))
        tmp.replace(self.path)

    def add(self, *paths):
        base = self.path.parent
        for p in paths:
            p = Path(p)
            self.data["artifacts"].append(str(p.relative_to(base)) if p.is_relative_to(base) else str(p))

    @contextlib.contextmanager
    def guard(self):
        """Mark the run failed on errors; interrupts leave it ``incomplete``."""
        try:
            yield self
        except Exception as exc:
            self.finish("failed", error=f"{type(exc).__name__}: {exc}")
            raise

    def finish(self, status: str, **extra):
        self.data.update(extra)
        self.data["status"] = status
        self.data["finished"] = _dt.datetime.now().isoformat(timespec="seconds")
        self.data["wall_seconds"] = round(time.time() - self.start, 3)
        self.write()


def output_root(cli_value: str | None) -> Path:
    return Path(cli_value or os.environ.get(OUT_ROOT_ENV) or "runs")


def make_run_dir(root: Path, name: str, explicit: str | None = None) -> Path:
    """``root/name_<timestamp>`` (suffixed if taken), or ``explicit`` verbatim."""
    if explicit:
        path = Path(explicit)
    else:
        stamp = _dt.datetime.now().strftime("%Y%m%dT%H%M%S")
        path = root / f"{name}_{stamp}"
        n = 1
        while path.exists():
            path = root / f"{name}_{stamp}-{n}"
            n += 1
    path.mkdir(parents=True, exist_ok=True)
    return path


# ------------------------------------------------------------- policies

def resolve_policy(entry: str, env=None, game=None) -> Policy:
    """A builtin name, ``TRUTHFUL_COOPERATOR``, or a checkpoint path."""
    entry = entry.strip()
    if game is None and env is not None:
        game = make_game(env)
    upper = entry.upper()
    if upper in BUILTIN_NAMES or upper == "TRUTHFUL_COOPERATOR":
        if game is None:
            raise ConfigurationError(f"builtin {entry} needs an environment")
        return truthful_cooperator(game) if upper == "TRUTHFUL_COOPERATOR" else builtin_policy(upper, game)
    path = Path(entry)
    if not path.is_file():
        raise ConfigurationError(f"roster entry {entry!r} is neither a builtin nor a checkpoint file")
    policy = load_policy(path)
    if game is not None and not policy.game.same_as(game):
        raise ConfigurationError(f"checkpoint {entry} was trained on {policy.game!r}, not {game!r}")
    return policy


def _is_checkpoint(path: Path) -> bool:
    with path.open() as fh:
        return fh.readline().strip() == POLICY_HEADER


def read_roster(spec: str) -> list[tuple[str, str]]:
    """Roster file (one ``entry`` or ``label = entry`` per line, ``#`` comments)
    or a comma-separated list of entries."""
    path = Path(spec)
    if path.is_file() and not _is_checkpoint(path):
        lines = [ln.split("#", 1)[0].strip() for ln in path.read_text().splitlines()]
        items = [ln for ln in lines if ln]
        base = path.parent
    else:
        items = [s.strip() for s in spec.split(",") if s.strip()]
        base = None
    out = []
    for item in items:
        label, target = (p.strip() for p in item.split("=", 1)) if "=" in item else ("", item)
        named = target.upper() in BUILTIN_NAMES or target.upper() == "TRUTHFUL_COOPERATOR"
        if base is not None and not named and (base / target).is_file():
            target = str(base / target)
        if not label:
            label = target.upper() if named else Path(target).stem
        out.append((label, target))
    if not out:
        raise ConfigurationError("empty roster")
    return out


# ------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = load_config(args.config, args.override)
    tc = cfg.training
    frozen = resolve_policy(cfg.run["frozen"], game=tc.make_game()) if cfg.run["frozen"] else None
    init = None
    if cfg.run["init"]:
        init = resolve_policy(cfg.run["init"], game=tc.make_game())
        if not isinstance(init, TabularPolicy):
            raise ConfigurationError(f"init must be a checkpoint, not the builtin {cfg.run['init']}")
    run_dir = make_run_dir(output_root(args.out_root),
                           f"{tc.env_id.value}_{tc.algorithm}_{tc.seed}", args.run_dir)
    (run_dir / "config.ini").write_text(cfg.to_ini())
    manifest = Manifest(run_dir, "train", sys.argv[1:], cfg.sections(), [tc.seed])
    manifest.add(run_dir / "config.ini")
    with manifest.guard():
        result = train(tc, frozen=frozen, out_dir=run_dir, init=init)
    manifest.add(run_dir / "curve.csv", *result.checkpoints)
    if cfg.run["transcripts"]:
        specs = make_eval_specs(cfg.run["transcripts"], [tc.seed, 3], tc.env_id, tc.rounds)
        batch = run_batch(result.params.game, specs, result.params, frozen or result.params)
        with (run_dir / "transcripts.jsonl").open("w") as fh:
            write_transcript((batch.trajectory(i) for i in range(batch.size)), batch.game, fh)
        manifest.add(run_dir / "transcripts.jsonl")
    if result.aborted:
        manifest.finish("aborted", error=result.aborted, steps_completed=len(result.curve))
        print(f"run aborted: {result.aborted}", file=sys.stderr)
        print(run_dir)
        return EXIT_RUNTIME
    manifest.finish("complete", steps_completed=len(result.curve))
    print(run_dir)
    return EXIT_OK


def cmd_matrix(args) -> int:
    if args.n < 1:
        raise ConfigurationError("n must be positive")
    env = EnvId.parse(args.env)
    entries = read_roster(args.roster)
    # builtins are built on the first checkpoint's game so options such as
    # the greedy threshold match; without checkpoints the defaults apply
    game = make_game(env)
    for _, target in entries:
        if Path(target).is_file():
            game = load_policy(target).game
            if game.env_id != env:
                raise ConfigurationError(f"checkpoint {target} is a {game.env_id.value} policy, not {env.value}")
            break
    roster = [(label, resolve_policy(target, game=game)) for label, target in entries]
    labels = [label for label, _ in roster]
    if len(set(labels)) != len(labels):
        raise ConfigurationError(f"duplicate roster labels: {labels}")
    run_dir = make_run_dir(output_root(args.out_root), f"matrix_{env.value}_{args.seed}", args.run_dir)
    manifest = Manifest(run_dir, "matrix", sys.argv[1:],
                        {"env": env.value, "roster": entries, "n": args.n,
                         "rounds": args.rounds, "seed": args.seed}, [args.seed])
    with manifest.guard():
        report = cross_play(roster, env, args.n, args.rounds, args.seed)
    manifest.add(*report.write(run_dir))
    manifest.finish("complete")
    print(run_dir)
    return EXIT_OK


def _run_probe(name: str, policy: Policy, n: int, seed: int, rounds: int) -> ProbeStats:
    if name == "reciprocity":
        return reciprocity_probe_ipd(policy, n, seed, rounds)
    if name == "grim":
        return grim_probe_split(policy, n, seed, rounds)
    if name == "tas_behavior":
        return tas_behavior_probe(policy, n, seed, rounds)
    if policy.env_id != EnvId.SPLIT:
        raise ConfigurationError("split_efficiency needs a Split No-Comm policy")
    return ProbeStats("split_efficiency", n, split_efficiency(policy, n, seed, rounds))


def cmd_probe(args) -> int:
    if args.n < 1:
        raise ConfigurationError("n must be positive")
    policy = resolve_policy(args.policy, env=args.env)
    run_dir = make_run_dir(output_root(args.out_root), f"probe_{args.probe}_{args.seed}", args.run_dir)
    manifest = Manifest(run_dir, "probe", sys.argv[1:],
                        {"policy": args.policy, "env": policy.env_id.value, "probe": args.probe,
                         "n": args.n, "rounds": args.rounds, "seed": args.seed}, [args.seed])
    with manifest.guard():
        stats = _run_probe(args.probe, policy, args.n, args.seed, args.rounds)
    manifest.add(*stats.write(run_dir))
    manifest.finish("complete")
    print(json.dumps(stats.stats, sort_keys=True))
    print(run_dir)
    return EXIT_OK


def cmd_exploit(args) -> int:
    cfg = load_config(args.config, args.override)
    tc = cfg.training
    if tc.algorithm != "GRPO":
        log.info("exploit learner uses %s as configured", tc.algorithm)
    frozen = resolve_policy(args.frozen, game=tc.make_game())
    ev = cfg.evaluation
    run_dir = make_run_dir(output_root(args.out_root), f"exploit_{tc.env_id.value}_{frozen.name}", args.run_dir)
    (run_dir / "config.ini").write_text(cfg.to_ini())
    manifest = Manifest(run_dir, "exploit", sys.argv[1:], dict(cfg.sections(), frozen=args.frozen),
                        list(ev["exploit_seeds"]))
    with manifest.guard():
        report = exploitability_report(frozen, tc, seeds=ev["exploit_seeds"], threshold=ev["exploit_threshold"],
                                       eval_games=ev["eval_games"], eval_seed=ev["eval_seed"],
                                       workers=resolve_workers(cfg.run["workers"]))
    manifest.add(run_dir / "config.ini", *report.write(run_dir))
    status = "aborted" if any(report.aborted) else "complete"
    manifest.finish(status, verdict=report.verdict)
    print(f"verdict: {report.verdict} (mean drop {report.mean_drop:.3f}, threshold {report.threshold})")
    print(run_dir)
    return EXIT_RUNTIME if status == "aborted" else EXIT_OK


def cmd_presets(args) -> int:
    for name in PRESETS:
        print(name)
    if args.show:
        print(load_config(args.show).to_ini())
    return EXIT_OK


# ------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dilemmarl", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"dilemmarl {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def outputs(p):
        p.add_argument("--out-root", help=f"output root (default ${OUT_ROOT_ENV} or ./runs)")
        p.add_argument("--run-dir", help="exact output directory, bypassing the naming scheme")

    p = sub.add_parser("train", help="train a tabular policy")
    p.add_argument("--config", required=True, help="INI file or preset name")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    outputs(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("matrix", help="cross-play matrix over a roster")
    p.add_argument("--roster", required=True, help="roster file or comma-separated entries")
    p.add_argument("--env", required=True)
    p.add_argument("--n", type=int, default=100, help="games per ordered pair")
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    outputs(p)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("probe", help="behavioural probe of one policy")
    p.add_argument("--policy", required=True, help="checkpoint path or builtin name")
    p.add_argument("--probe", required=True, choices=PROBES)
    p.add_argument("--env", help="environment for builtin policies")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    outputs(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("exploit", help="train fresh learners against a frozen policy")
    p.add_argument("--frozen", required=True, help="checkpoint path or builtin name")
    p.add_argument("--config", required=True, help="learner config (INI file or preset)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    outputs(p)
    p.set_defaults(func=cmd_exploit)

    p = sub.add_parser("presets", help="list bundled presets")
    p.add_argument("--show", help="print the resolved form of one preset")
    p.set_defaults(func=cmd_presets)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, InvalidProposalError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StepAborted, InternalError) as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
