"""Command-line entry point: ``python -m dsla {distill,analyze,gen-trace,simulate}``.

Every command reads an optional flat ``key = value`` config file, takes its
randomness from an explicit seed and writes into ``--out``.  Exit codes: 0
on success, 2 for bad configuration or missing inputs, 3 when the run
itself fails.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import artifacts
from .config import config_hash, from_mapping, load_flat
from .distill.chain import FinetuneConfig, chained_finetune, heldout_l_dist
from .distill.toy import ToyModel, recall_dataset, toy_teacher
from .errors import ConfigError, DomainError, NumericError, ShapeError
from .sensitivity import ranking_csv, sensitivity_report
from .serve.calibration import BUNDLED_CALIBRATION, BUNDLED_TRACE, data_path, load_calibration
from .serve.simulator import simulate
from .serve.trace import TraceConfig, generate_trace, read_trace, trace_lines

log = logging.getLogger("dsla")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class InputError(Exception):
    """Raised for anything that should end with exit code 2."""


@dataclass(frozen=True)
class DistillSettings:
    d: int = 16
    heads: int = 2
    n_layers: int = 2
    recall_layers: tuple[int, ...] = (0,)
    seq_len: int = 16
    train_sequences: int = 256
    heldout_sequences: int = 64
    calibration_sequences: int = 16
    noise: float = 0.5


@dataclass(frozen=True)
class AnalyzeSettings:
    checkpoint: str = "stage_1.npz"
    conversions: Optional[int] = None  # defaults to the checkpoint's own count
    seq_len: int = 16
    calibration_sequences: int = 16
    noise: float = 0.5


@dataclass(frozen=True)
class SimulateSettings:
    trace: str = ""  # empty: bundled trace
    calibration: str = ""  # empty: bundled calibration
    compare: bool = True


def _settings(values: dict, seed: Optional[int], *classes):
    """Split flat values across dataclasses; ``seed`` from the command line wins."""
    known = {"seed"}
    for cls in classes:
        known |= {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    values = dict(values)
    if seed is not None:
        values["seed"] = str(seed)
    seed_value = int(values.get("seed", "0"))
    if seed_value < 0 or seed_value >= 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    parts = []
    for cls in classes:
        names = {f.name for f in dataclasses.fields(cls)}
        parts.append(from_mapping(cls, {k: v for k, v in values.items() if k in names}))
    return seed_value, parts


def _provenance(command: str, values: dict, seed: int) -> dict:
    return {"command": command, "config_hash": config_hash({**values, "seed": seed}), "seed": seed}


def _resolve(base: Optional[Path], p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() or base is None else base / path


def _sequences(settings, n: int, d: int, seed: int, stream: int) -> np.ndarray:
    return recall_dataset(n, settings.seq_len, d, np.random.default_rng([seed, stream]), settings.noise)


def cmd_distill(values: dict, seed: Optional[int], out: Path, base: Optional[Path]) -> int:
    """Rank teacher layers by entropy, then convert them one by one, chained."""
    try:
        seed, (ds, ft) = _settings(values, seed, DistillSettings, FinetuneConfig)
        ft = dataclasses.replace(ft, seed=seed)
        teacher = toy_teacher(ds.d, ds.heads, ds.n_layers, seed=seed, recall_layers=ds.recall_layers)
    except (ValueError, ArithmeticError) as exc:
        raise InputError(str(exc)) from exc
    prov = _provenance("distill", values, seed)
    calib = _sequences(ds, ds.calibration_sequences, ds.d, seed, 1)
    train = _sequences(ds, ds.train_sequences, ds.d, seed, 2)
    heldout = _sequences(ds, ds.heldout_sequences, ds.d, seed, 3)

    report = sensitivity_report(teacher, list(calib))
    order = [s.layer_index for s in report]
    artifacts.atomic_write(out / "ranking.csv", artifacts.header_lines(prov) + ranking_csv(report))
    stages = chained_finetune(ToyModel(teacher.layers), order, train, ft)

    reference = ToyModel(teacher.layers, order)
    artifacts.save_checkpoint(out / "teacher.npz", stages[-1].bank, 0, prov)
    summary = {"provenance": prov, "order": order, "stages": []}
    rates, scores = [0.0], [1.0]
    for st in stages:
        k = st.stage + 1
        artifacts.save_checkpoint(out / f"stage_{k}.npz", st.bank, k, prov)
        artifacts.atomic_write(out / f"training_stage_{k}.csv", artifacts.history_csv(st.result.history, prov))
        ld = heldout_l_dist(st.model(), reference, heldout)
        summary["stages"].append(
            {
                "stage": k,
                "layer": st.result.layer_index,
                "steps": st.result.steps,
                "converged": st.result.converged,
                "gamma": st.result.layer.gamma,
                "heldout_l_dist": ld,
            }
        )
        rates.append(k / teacher.n_layers)
        scores.append(min(scores[-1], float(np.exp(-ld))))
        print(f"stage {k}: layer {st.result.layer_index} converted, held-out l_dist {ld:.6g}")
    artifacts.atomic_write(out / "summary.json", json.dumps(summary, indent=2) + "\n")
    # quality proxy for the serving controller: exp(-l_dist), made non-increasing
    quality = "".join(f"# {k}: {v}\n" for k, v in prov.items())
    quality += f"quality_rates = {', '.join(repr(r) for r in rates)}\n"
    quality += f"quality_scores = {', '.join(repr(s) for s in scores)}\n"
    artifacts.atomic_write(out / "quality.cfg", quality)
    return EXIT_OK


def cmd_analyze(values: dict, seed: Optional[int], out: Path, base: Optional[Path]) -> int:
    """Score curves per layer and head, gamma values and an entropy report."""
    try:
        seed, (an,) = _settings(values, seed, AnalyzeSettings)
        ckpt = artifacts.load_checkpoint(_resolve(base, an.checkpoint))
        model = ckpt.model(an.conversions)
    except (ValueError, ArithmeticError) as exc:
        raise InputError(str(exc)) from exc
    prov = _provenance("analyze", values, seed)
    d = model.d
    X = recall_dataset(1, an.seq_len, d, np.random.default_rng([seed, 4]), an.noise)[0]
    rows = artifacts.profile_rows(model, X)
    artifacts.atomic_write(out / "profiles.csv", artifacts.csv_text(artifacts.PROFILE_COLUMNS, rows, prov))
    gammas = [(i, p.kind.value, "" if p.kind.value == "teacher" else p.gamma) for i, p in enumerate(model.layers)]
    artifacts.atomic_write(out / "gamma.csv", artifacts.csv_text(("layer", "kind", "gamma"), gammas, prov))
    calib = recall_dataset(an.calibration_sequences, an.seq_len, d, np.random.default_rng([seed, 1]), an.noise)
    if any(p.kind.value == "teacher" for p in model.layers):
        text = ranking_csv(sensitivity_report(model, list(calib)))
    else:
        text = "layer,mean_entropy,rank\n"
    artifacts.atomic_write(out / "entropy.csv", artifacts.header_lines(prov) + text)
    print(f"wrote {len(rows)} profile rows for {model.n_layers} layers")
    return EXIT_OK


def cmd_gen_trace(values: dict, seed: Optional[int], out: Path, base: Optional[Path]) -> int:
    """Write a synthetic multi-turn trace as JSON lines plus a provenance sidecar."""
    try:
        seed, (tc,) = _settings(values, seed, TraceConfig)
    except (ValueError, ArithmeticError) as exc:
        raise InputError(str(exc)) from exc
    prov = _provenance("gen-trace", values, seed)
    trace = generate_trace(tc, seed)
    artifacts.atomic_write(out / "trace.jsonl", trace_lines(trace))
    meta = {"provenance": prov, "config": dataclasses.asdict(tc), "requests": len(trace)}
    artifacts.atomic_write(out / "trace.meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(trace)} requests")
    return EXIT_OK


def cmd_simulate(values: dict, seed: Optional[int], out: Path, base: Optional[Path]) -> int:
    """Replay a trace with the conversion policy, optionally also with it off."""
    try:
        seed, (ss,) = _settings(values, seed, SimulateSettings)
        trace_path = _resolve(base, ss.trace) if ss.trace else data_path(BUNDLED_TRACE)
        calib_path = _resolve(base, ss.calibration) if ss.calibration else data_path(BUNDLED_CALIBRATION)
        if not trace_path.is_file():
            raise ConfigError(f"trace not found: {trace_path}")
        trace = read_trace(trace_path)
        if not trace:
            raise ConfigError(f"trace is empty: {trace_path}")
        profile, controller, cost = load_calibration(calib_path)
    except (ValueError, ArithmeticError, OSError) as exc:
        raise InputError(str(exc)) from exc
    prov = _provenance("simulate", values, seed)
    runs = [("policy_on", controller)]
    if ss.compare:
        runs.insert(0, ("policy_off", dataclasses.replace(controller, enabled=False)))
    means = {}
    for tag, cfg in runs:
        rep = simulate(trace, profile, cfg, cost, seed)
        summary = {"provenance": prov, **rep.summary()}
        artifacts.atomic_write(out / f"{tag}_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
        artifacts.atomic_write(out / f"{tag}_timeline.csv", artifacts.header_lines(prov) + rep.timeline_csv())
        artifacts.atomic_write(out / f"{tag}_requests.csv", artifacts.header_lines(prov) + rep.requests_csv())
        means[tag] = summary["mean_normalized_latency_ms"]
        print(f"{tag}: mean normalized latency {means[tag]:.3f} ms/token")
    if ss.compare:
        ratio = means["policy_off"] / means["policy_on"]
        print(f"speedup (policy_off / policy_on): {ratio:.3f}x")
    return EXIT_OK


COMMANDS = {
    "distill": cmd_distill,
    "analyze": cmd_analyze,
    "gen-trace": cmd_gen_trace,
    "simulate": cmd_simulate,
}


def _common(parser: argparse.ArgumentParser, default) -> None:
    parser.add_argument("--config", type=Path, default=default, help="flat key = value config file")
    parser.add_argument("--seed", type=int, default=default, help="seed (unsigned 64-bit), overrides the config")
    parser.add_argument("--out", type=Path, default=default, help="output directory (default: current directory)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsla", description=__doc__.splitlines()[0])
    _common(parser, None)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        _common(sub.add_parser(name, help=fn.__doc__.splitlines()[0]), argparse.SUPPRESS)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2 already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = args.out if args.out is not None else Path.cwd()
    try:
        values = load_flat(args.config) if args.config is not None else {}
        base = args.config.resolve().parent if args.config is not None else None
        return COMMANDS[args.command](values, args.seed, out, base)
    except (InputError, ConfigError) as exc:
        print(f"dsla {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, DomainError, ShapeError, ArithmeticError, OSError) as exc:
        print(f"dsla {args.command}: run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
