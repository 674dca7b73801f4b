"""Command-line driver for the peerscore pipeline.

Every global option can also be set through an environment variable named
``PEERSCORE_`` plus the option name in upper case with dashes as underscores,
e.g. ``PEERSCORE_W_BLOCK=0.25`` or ``PEERSCORE_FEE_SCALE=1e4``. Subcommand
options follow the same pattern with the subcommand inserted, e.g.
``PEERSCORE_SWEEP_JOBS=4``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import contextlib
import csv
import logging
import math
import pickle
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import click

from . import __version__
from .features import SchemaMismatch, encode, extract_windows
from .models import ModelSpec, SchemaFingerprintError, evaluate, fit, predict, write_report
from .pipeline import DEFAULT_DURATIONS, DEFAULT_W_BLOCK, MODEL_KINDS, SweepGrid, build_dataset, summarize, sweep
from .scoring import ConfigError, ScoreConfig, SessionError, score_trace
from .simulator import Scenario, ScenarioError, load_scenario, simulate
from .trace import (
    TraceFormatError,
    TraceOrderError,
    export_peer_csv,
    export_score_csv,
    read_events,
    validate_trace,
    write_events,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

log = logging.getLogger("peerscore")


class DataError(Exception):
    """Input data (trace, scenario, model file) is unusable."""


_DATA_ERRORS = (DataError, TraceFormatError, TraceOrderError, ScenarioError, SessionError,
                SchemaMismatch, SchemaFingerprintError, FileNotFoundError, IsADirectoryError)


@dataclass
class Context:
    seed: int | None
    config: ScoreConfig
    remembrance: bool
    exclude: tuple[str, ...]
    out: str | None
    strict: bool

    def load(self, path: str):
        events = read_events(path, strict=self.strict)
        if not events:
            raise DataError(f"{path}: no events")
        return events

    def samples(self, events, config: ScoreConfig | None = None):
        try:
            return extract_windows(events, config or self.config, exclude=self.exclude)
        except ValueError as exc:
            if "unknown features" in str(exc):
                raise click.BadParameter(str(exc), param_hint="--exclude") from None
            raise

    def open_out(self):
        if self.out in (None, "-"):
            return contextlib.nullcontext(click.get_text_stream("stdout"))
        return open(self.out, "w", encoding="utf-8", newline="")


def _on_off(value: str) -> bool:
    return value == "on"


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise click.BadParameter(f"expected a comma-separated list of numbers, got {text!r}") from None


@click.group(context_settings={"auto_envvar_prefix": "PEERSCORE", "help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="peerscore")
@click.option("--seed", type=int, default=None, help="Master seed (simulator, forest, sweep cells).")
@click.option("--w-block", type=float, default=0.5, show_default=True, help="Block weight w_B; w_T = 1 - w_B.")
@click.option("--gamma", type=float, default=1.0, show_default=True, help="Decay factor.")
@click.option("--window-seconds", type=float, default=1.0, show_default=True)
@click.option("--decay-mode", type=click.Choice(["increment", "prior"]), default="increment", show_default=True)
@click.option("--fee-scale", type=float, default=1.0, show_default=True,
              help="Divisor for satoshi fees; 1e4 is the documented preset.")
@click.option("--remembrance", type=click.Choice(["on", "off"]), default="on", show_default=True,
              help="Feed the previous score to models as a feature.")
@click.option("--remembrance-identity", type=click.Choice(["address_only", "address_and_port"]),
              default="address_only", show_default=True)
@click.option("--exclude", multiple=True, metavar="FEATURE", help="Drop a feature (repeatable).")
@click.option("--strict", is_flag=True, help="Reject malformed trace lines instead of skipping them.")
@click.option("--out", "-o", default=None, help="Output file or directory; '-' or unset means stdout where sensible.")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def cli(ctx, seed, w_block, gamma, window_seconds, decay_mode, fee_scale, remembrance,
        remembrance_identity, exclude, strict, out, verbose):
    """Peer beneficialness scoring, feature extraction and prediction."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = ScoreConfig(gamma=gamma, w_block=w_block, fee_scale=fee_scale,
                             window_seconds=window_seconds, decay_mode=decay_mode,
                             identity_mode=remembrance_identity)
    except ConfigError as exc:
        raise click.UsageError(str(exc)) from None
    ctx.obj = Context(seed, config, _on_off(remembrance), tuple(exclude), out, strict)


@cli.command("simulate")
@click.option("--scenario", "scenario_path", type=click.Path(dir_okay=False), default=None,
              help="Scenario file of 'key = value' lines.")
@click.option("--duration", type=float, default=None, help="Override the scenario duration (s).")
@click.pass_obj
def cmd_simulate(obj: Context, scenario_path, duration):
    """Generate a synthetic trace."""
    if obj.out in (None, "-"):
        raise click.UsageError("simulate needs --out PATH")
    overrides = {"seed": obj.seed, "duration_s": duration}
    if scenario_path:
        scenario = load_scenario(scenario_path, **overrides)
    else:
        scenario = Scenario(**{k: v for k, v in overrides.items() if v is not None})
    events, truth = simulate(scenario)
    write_events(obj.out, events)
    click.echo(f"wrote {len(events)} events, {len(truth.peers)} sessions to {obj.out}", err=True)


@cli.command("validate")
@click.argument("trace", type=click.Path(dir_okay=False))
@click.pass_obj
def cmd_validate(obj: Context, trace):
    """Check ordering and session structure; exit 2 on any violation."""
    skipped: list = []
    report = validate_trace(read_events(trace, strict=obj.strict, skipped=skipped))
    click.echo(f"events={report.event_count} peers={report.peer_count} "
               f"sessions={report.session_count} violations={len(report.violations)} "
               f"skipped_lines={len(skipped)}")
    for v in report.violations:
        click.echo(f"line {v.line}: {v.rule}: {v.description}")
    if not report.ok:
        sys.exit(EXIT_DATA)


@cli.command("score")
@click.argument("trace", type=click.Path(dir_okay=False))
@click.option("--end-ts", type=float, default=None, help="Close windows up to this time (default: last event).")
@click.pass_obj
def cmd_score(obj: Context, trace, end_ts):
    """Write per-peer score CSVs (window_end, partial, remembrance, label) into --out DIR."""
    if obj.out in (None, "-"):
        raise click.UsageError("score needs --out DIRECTORY")
    records = score_trace(obj.load(trace), obj.config, end_ts)
    paths = export_score_csv(records, obj.out)
    click.echo(f"wrote {len(paths)} peer files, {len(records)} windows", err=True)


@cli.command("featurize")
@click.argument("trace", type=click.Path(dir_okay=False))
@click.pass_obj
def cmd_featurize(obj: Context, trace):
    """Write per-peer feature CSVs into --out DIR."""
    if obj.out in (None, "-"):
        raise click.UsageError("featurize needs --out DIRECTORY")
    samples = obj.samples(obj.load(trace))
    paths = export_peer_csv(samples, obj.out)
    click.echo(f"wrote {len(paths)} peer files, {len(samples)} samples", err=True)


@cli.command("mi-rank")
@click.argument("trace", type=click.Path(dir_okay=False))
@click.option("-k", "top_k", type=int, default=None, help="Print only the top k features.")
@click.option("--bins", type=int, default=16, show_default=True)
@click.pass_obj
def cmd_mi_rank(obj: Context, trace, top_k, bins):
    """Rank features by mutual information with the score."""
    from .features import fit_encoder, mutual_information

    samples = obj.samples(obj.load(trace))
    if not samples:
        raise DataError("trace yields no scored windows")
    ds = encode(fit_encoder(samples), samples, obj.remembrance)
    ranking = mutual_information(ds, bins)
    k = len(ranking) if top_k is None else top_k
    if not 1 <= k <= len(ranking):
        raise click.BadParameter(f"must be in [1, {len(ranking)}]", param_hint="-k")
    with obj.open_out() as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "feature", "mi_bits"])
        for i, (name, mi) in enumerate(ranking.entries[:k], start=1):
            w.writerow([i, name, repr(mi)])


def _model_options(f):
    opts = [
        click.option("--model", "kind", type=click.Choice(MODEL_KINDS), default="linear", show_default=True),
        click.option("--ridge-eps", type=float, default=1e-8, show_default=True),
        click.option("--k", "k", type=int, default=5, show_default=True, help="KNN neighbours."),
        click.option("--standardize/--no-standardize", default=False, show_default=True),
        click.option("--trees", type=int, default=100, show_default=True),
        click.option("--max-depth", type=int, default=None),
        click.option("--min-leaf", type=int, default=2, show_default=True),
        click.option("--feature-subsample", type=float, default=1 / 3, show_default=True),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def _spec(kind, ridge_eps, k, standardize, trees, max_depth, min_leaf, feature_subsample, seed=0) -> ModelSpec:
    hp = {
        "linear": dict(ridge_eps=ridge_eps),
        "knn": dict(k=k, standardize=standardize),
        "forest": dict(trees=trees, max_depth=max_depth, min_leaf=min_leaf,
                       feature_subsample=feature_subsample, seed=seed or 0),
    }[kind]
    try:
        return ModelSpec(kind, hp)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None


@cli.command("train")
@click.argument("trace", type=click.Path(dir_okay=False))
@_model_options
@click.option("--train-fraction", type=float, default=0.8, show_default=True)
@click.option("--duration", type=float, default=None, help="Use only this many seconds of the training prefix.")
@click.pass_obj
def cmd_train(obj: Context, trace, kind, ridge_eps, k, standardize, trees, max_depth, min_leaf,
              feature_subsample, train_fraction, duration):
    """Fit a model on the chronological training prefix and pickle it to --out."""
    from .models import truncate_training

    if obj.out in (None, "-"):
        raise click.UsageError("train needs --out PATH")
    spec = _spec(kind, ridge_eps, k, standardize, trees, max_depth, min_leaf, feature_subsample, obj.seed)
    train, _ = build_dataset(obj.samples(obj.load(trace)), obj.remembrance, train_fraction)
    if duration is not None:
        train = truncate_training(train, duration)
    model = fit(spec, train, obj.seed)
    bundle = {"model": model, "schema": train.schema, "config": obj.config, "exclude": obj.exclude,
              "remembrance": obj.remembrance, "train_fraction": train_fraction}
    with open(obj.out, "wb") as fh:
        pickle.dump(bundle, fh)
    click.echo(f"trained {kind} on {len(train)} rows", err=True)


@cli.command("eval")
@click.argument("model_path", type=click.Path(dir_okay=False))
@click.argument("trace", type=click.Path(dir_okay=False))
@click.option("--all-rows", is_flag=True, help="Evaluate every row instead of the held-out suffix.")
@click.option("--mae-averaging", type=click.Choice(["pooled", "per-peer"]), default="pooled", show_default=True)
@click.pass_obj
def cmd_eval(obj: Context, model_path, trace, all_rows, mae_averaging):
    """Evaluate a trained model; prints one report row."""
    try:
        with open(model_path, "rb") as fh:
            bundle = pickle.load(fh)
        model, schema = bundle["model"], bundle["schema"]
    except (pickle.UnpicklingError, EOFError, KeyError, TypeError) as exc:
        raise DataError(f"{model_path}: not a peerscore model ({exc})") from None
    samples = extract_windows(obj.load(trace), bundle["config"], exclude=bundle["exclude"])
    ds = encode(schema, sorted(samples, key=lambda s: s.window_end), bundle["remembrance"])
    if not all_rows:
        cut = math.ceil(len(ds) * bundle["train_fraction"] - 1e-9)
        ds = ds.take(slice(cut, len(ds)))
    if len(ds) == 0:
        raise DataError("no rows to evaluate")
    report = evaluate(predict(model, ds), ds.y, ds.peers if mae_averaging == "per-peer" else None,
                      model=model.spec.kind, w_block=bundle["config"].w_block,
                      remembrance=bundle["remembrance"])
    with obj.open_out() as fh:
        write_report([report], fh)


@cli.command("sweep")
@click.argument("trace", type=click.Path(dir_okay=False))
@click.option("--w-block-values", default=",".join(map(str, DEFAULT_W_BLOCK)), show_default=True)
@click.option("--remembrance-values", default="on,off", show_default=True)
@click.option("--models", default="linear", show_default=True, help="Comma-separated subset of linear,knn,forest.")
@click.option("--durations", default=",".join(f"{d:g}" for d in DEFAULT_DURATIONS), show_default=True,
              help="Training durations in trace seconds.")
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--mae-averaging", type=click.Choice(["pooled", "per-peer"]), default="pooled", show_default=True)
@click.option("--trees", type=int, default=100, show_default=True, help="Forest size.")
@click.option("--k", "k", type=int, default=5, show_default=True, help="KNN neighbours.")
@click.pass_obj
def cmd_sweep(obj: Context, trace, w_block_values, remembrance_values, models, durations, jobs,
              mae_averaging, trees, k):
    """Evaluate the cross-product grid; report CSV to --out, summary to the terminal."""
    rem_tokens = [t.strip() for t in remembrance_values.split(",") if t.strip()]
    if any(t not in ("on", "off") for t in rem_tokens):
        raise click.BadParameter("values must be on/off", param_hint="--remembrance-values")
    grid = SweepGrid(
        w_block=_float_list(w_block_values),
        remembrance=tuple(_on_off(t) for t in rem_tokens),
        models=tuple(m.strip() for m in models.split(",") if m.strip()),
        durations=_float_list(durations),
    )
    try:
        grid.validate()
        specs = {"forest": ModelSpec("forest", {"trees": trees}), "knn": ModelSpec("knn", {"k": k})}
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None
    if jobs < 1:
        raise click.BadParameter("must be >= 1", param_hint="--jobs")
    events = obj.load(trace)
    reports = sweep(events, grid, obj.config, obj.seed or 0, specs, jobs, mae_averaging == "per-peer")
    to_stdout = obj.out in (None, "-")
    with obj.open_out() as fh:
        write_report(reports, fh)
    for model, with_, without, ratio in summarize(reports):
        click.echo(f"{model:<7} mae_with={with_:.6g} mae_without={without:.6g} ratio={ratio:.6g}",
                   err=to_stdout)


@cli.command("sense")
@click.option("--peer", "peers", multiple=True, required=True, metavar="HOST:PORT",
              help="Seed peer address (repeatable).")
@click.option("--max-outbound", type=click.IntRange(1, 10), default=10, show_default=True)
@click.option("--duration", type=float, default=None, help="Stop after this many seconds.")
@click.option("--handshake-timeout", type=float, default=10.0, show_default=True)
@click.option("--user-agent", default="/peerscore:0.1.0/", show_default=True)
@click.pass_obj
def cmd_sense(obj: Context, peers, max_outbound, duration, handshake_timeout, user_agent):
    """Collect a live trace from Bitcoin Mainnet peers (listen-only)."""
    from .sensor import SensorConfig, SensorConfigError, run_sensor

    if obj.out in (None, "-"):
        raise click.UsageError("sense needs --out PATH")
    try:
        config = SensorConfig(list(peers), Path(obj.out), max_outbound, user_agent,
                              handshake_timeout_s=handshake_timeout, duration_s=duration)
        config.validate()
    except (SensorConfigError, ValueError) as exc:
        raise click.UsageError(str(exc)) from None
    try:
        stats = run_sensor(config)
    except KeyboardInterrupt:
        return
    click.echo(f"sessions={stats.sessions} events={stats.events} suppressed_dials={stats.suppressed}", err=True)


def main(argv: Sequence[str] | None = None) -> int:
    """Run the CLI and map failures onto the documented exit codes."""
    try:
        cli.main(args=list(argv) if argv is not None else None, prog_name="peerscore",
                 standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_INTERNAL
    except _DATA_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_DATA
    except (ValueError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_DATA
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
