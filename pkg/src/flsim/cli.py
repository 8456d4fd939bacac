"""Command-line entry points.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import logging
import os
import sys
from pathlib import Path

import click

from .core import ConfigError, TaskConfig, load_config
from .data import heterogeneity_report, write_mapping, write_report
from .learner import save_checkpoint
from .tracker import Tracker, import_records, summarize_records

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

MAPPING_FILE = "mapping.txt"
METRICS_FILE = "metrics.ndl"
CHECKPOINT_FILE = "checkpoint.bin"
HETEROGENEITY_FILE = "heterogeneity.txt"

log = logging.getLogger("flsim")


def _setup_logging(verbose: int) -> None:
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _load(config_path: str, seed: int | None) -> TaskConfig:
    try:
        config = load_config(config_path)
    except OSError as exc:
        raise ConfigError("readable", f"cannot read {config_path}: {exc.strerror}") from exc
    if seed is None and os.environ.get("FLSIM_SEED"):
        seed = int(os.environ["FLSIM_SEED"])
    if seed is not None:
        config = config.replace(data={"seed": seed})
    return config


def _out_dir(out: str | None) -> Path:
    return Path(out or os.environ.get("FLSIM_OUT", "out"))


def _partition_outputs(config: TaskConfig, out: Path) -> None:
    from .runtime import default_registry

    fed = default_registry().build_data(config)
    write_mapping(out / MAPPING_FILE, fed.spec, fed.partitions)
    keys = ["label"] + sorted(fed.train.attributes)
    write_report(out / HETEROGENEITY_FILE, [heterogeneity_report(fed.partitions, fed.train, k) for k in keys])


def _guard(fn):
    """Map failures onto the documented exit codes."""
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except BrokenPipeError:
            # reader went away (e.g. piped into head); silence the flush at exit
            os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
            return EXIT_OK
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            return EXIT_CONFIG
        except (OSError, ValueError, RuntimeError, LookupError) as exc:
            log.debug("failure", exc_info=True)
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
            return EXIT_RUNTIME
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_guard
def cmd_run(config_path: str, out: str | None = None, seed: int | None = None) -> int:
    """Run the configured workflow in-process and write all outputs under ``out``."""
    from .runtime import run_task

    config = _load(config_path, seed)
    out_dir = _out_dir(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = out_dir / METRICS_FILE
    if metrics.exists():
        metrics.unlink()
    _partition_outputs(config, out_dir)
    tracker = Tracker(metrics)
    try:
        report = run_task(config, tracker=tracker)
    finally:
        tracker.close()
    save_checkpoint(out_dir / CHECKPOINT_FILE, report.params)
    click.echo(f"{report.task_id}: final accuracy {report.final_accuracy:.4f}, best {report.best_accuracy:.4f} "
               f"(round {report.best_round})")
    return EXIT_OK


@_guard
def cmd_partition(config_path: str, out: str | None = None, seed: int | None = None) -> int:
    """Write the partition mapping and heterogeneity report only."""
    config = _load(config_path, seed)
    out_dir = _out_dir(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _partition_outputs(config, out_dir)
    click.echo(f"wrote {out_dir / MAPPING_FILE} and {out_dir / HETEROGENEITY_FILE}")
    return EXIT_OK


@_guard
def cmd_report(metrics_path: str) -> int:
    """Print best/final per metric, bytes, time and per-client selection counts."""
    records = import_records(metrics_path)
    if not records:
        click.echo("no records", err=True)
        return EXIT_RUNTIME
    for task_id in dict.fromkeys(r.task_id for r in records):
        s = summarize_records(records, task_id)
        click.echo(f"task\t{task_id}")
        click.echo("scope\tmetric\tbest\tround_of_best\tfinal\tfinal_round\tcount")
        for (scope, name), m in sorted(s.metrics.items()):
            if scope != "server":
                continue
            click.echo(f"{scope}\t{name}\t{m.best:.6g}\t{m.round_of_best}\t{m.final:.6g}\t{m.final_round}\t{m.count}")
        click.echo(f"total_bytes\t{int(s.total_bytes)}")
        click.echo(f"total_wall_time\t{s.total_wall_time:.3f}")
        click.echo("client\tselected")
        for scope in sorted(s.selection_counts, key=lambda x: int(x.split(":")[1])):
            click.echo(f"{scope}\t{s.selection_counts[scope]}")
    return EXIT_OK


@_guard
def cmd_serve(config_path: str, listen: str, out: str | None = None, seed: int | None = None) -> int:
    from .runtime import serve

    config = _load(config_path, seed)
    out_dir = _out_dir(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = out_dir / METRICS_FILE
    if metrics.exists():
        metrics.unlink()
    _partition_outputs(config, out_dir)
    tracker = Tracker(metrics)
    try:
        report = serve(config, listen, tracker=tracker)
    finally:
        tracker.close()
    save_checkpoint(out_dir / CHECKPOINT_FILE, report.params)
    click.echo(f"{report.task_id}: final accuracy {report.final_accuracy:.4f}")
    return EXIT_OK


@_guard
def cmd_join(config_path: str, server: str, client_id: int, seed: int | None = None) -> int:
    from .runtime import join

    join(_load(config_path, seed), server, client_id)
    return EXIT_OK


# --------------------------------------------------------------------------- #
# click wiring
# --------------------------------------------------------------------------- #

_config_opt = click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
_out_opt = click.option("--out", default=None, help="Output directory (default: $FLSIM_OUT or ./out).")
_seed_opt = click.option("--seed", type=int, default=None, help="Override data.seed.")


@click.group()
@click.option("-v", "--verbose", count=True)
def main(verbose: int) -> None:
    """Federated learning workflow engine and simulator."""
    _setup_logging(verbose)


@main.command("run")
@_config_opt
@_out_opt
@_seed_opt
def _run(config_path, out, seed):
    sys.exit(cmd_run(config_path, out, seed))


@main.command("partition")
@_config_opt
@_out_opt
@_seed_opt
def _partition(config_path, out, seed):
    sys.exit(cmd_partition(config_path, out, seed))


@main.command("report")
@click.argument("metrics_path", type=click.Path(dir_okay=False))
def _report(metrics_path):
    sys.exit(cmd_report(metrics_path))


@main.command("serve")
@_config_opt
@click.option("--listen", required=True, help="host:port to listen on.")
@_out_opt
@_seed_opt
def _serve(config_path, listen, out, seed):
    sys.exit(cmd_serve(config_path, listen, out, seed))


@main.command("join")
@_config_opt
@click.option("--server", required=True, help="host:port of the server.")
@click.option("--client-id", required=True, type=int)
@_seed_opt
def _join(config_path, server, client_id, seed):
    sys.exit(cmd_join(config_path, server, client_id, seed))


if __name__ == "__main__":  # pragma: no cover
    main()
