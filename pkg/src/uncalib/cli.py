"""Command-line entry point: ``uncalib {simulate,train,detect,retrain,evaluate}``.

Exit codes: 0 success, 1 evaluation expectations not met, 2 usage or input
error, 3 runtime failure (training divergence, numerical breakdown).  Errors
are reported as a single ``error: <code>: <message>`` line on stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import queue
import sys
import threading
import time

from . import __version__
from . import engine as en
from . import simulator as sm
from .config import RunConfig
from .errors import (ConfigurationError, DivergenceError, InputError, NumericError, SchemaError, UncalibError,
                     UsageError)
from .scorecard import evaluate, read_manifest
from .telemetry import SensorGrid, parse_rows, read_csv_file, read_header, split_dataset

EXIT_OK, EXIT_FAILED, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2, 3


def _warn(msg):
    print(f"warning: {msg}", file=sys.stderr)


def _info(msg):
    print(msg, file=sys.stderr)


# -- shared helpers --------------------------------------------------------------------

def _manifest(data_dir):
    if not data_dir:
        return {}
    path = os.path.join(data_dir, "manifest.txt")
    if not os.path.isfile(path):
        return {}
    with open(path, encoding="utf-8") as fh:
        return read_manifest(fh.read())


def _grid_for(path, cfg: RunConfig, manifest: dict) -> SensorGrid:
    if not os.path.isfile(path):
        raise InputError(f"no such file: {path}")
    ids = read_header(path)
    if not ids:
        raise SchemaError(f"{path}: header names no sensors", column=2)
    return SensorGrid(tuple(ids), cfg.sensor_kind(manifest.get("kind")), cfg["grid.cadence_minutes"])


def _read_series(path, cfg, manifest):
    series = read_csv_file(path, _grid_for(path, cfg, manifest))
    if len(series) == 0:
        raise InputError(f"{path}: no data rows")
    return series


def _pick(explicit, data_dir, name):
    if explicit:
        return explicit
    if data_dir:
        return os.path.join(data_dir, name)
    return None


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# -- simulate -----------------------------------------------------------------------------

def cmd_simulate(args, cfg: RunConfig) -> int:
    out = args.out or cfg["paths.output"]
    if not out:
        raise ConfigurationError("simulate needs an output directory (--out)")
    bundle = sm.make_experiment(args.scenario, cfg.seed, args.scale)
    paths = sm.write_bundle(bundle, out)
    _info(f"wrote {len(paths)} files to {out}")
    return EXIT_OK


# -- train --------------------------------------------------------------------------------

def cmd_train(args, cfg: RunConfig) -> int:
    data_dir = args.data or cfg["paths.data"]
    train_path = _pick(args.train, data_dir, "train.csv")
    if not train_path:
        raise ConfigurationError("train needs --train FILE or --data DIR")
    manifest = _manifest(data_dir or os.path.dirname(os.path.abspath(train_path)))
    train = _read_series(train_path, cfg, manifest)
    val_path = _pick(args.val, data_dir, "val.csv")
    if val_path and os.path.isfile(val_path):
        val = _read_series(val_path, cfg, manifest)
    else:
        frac = cfg["train.validation_fraction"]
        train, val = split_dataset(train, [1.0 - frac, frac])
    out = args.out or cfg["paths.model"] or cfg["paths.output"]
    if not out:
        raise ConfigurationError("train needs an output directory (--out)")
    system = en.fit_system(train, val, cfg.seed, cfg.preprocess(), cfg.train(), cfg["residual.alpha"],
                           cfg["train.hidden"])
    system.save(out)
    report = en.training_report(system, train.grid.kind.kind)
    _write_text(os.path.join(out, en.REPORT_FILE), report)
    _info(f"model for {train.grid.size} sensors written to {out}")
    return EXIT_OK


# -- retrain ------------------------------------------------------------------------------

def cmd_retrain(args, cfg: RunConfig) -> int:
    data_dir = args.data or cfg["paths.data"]
    model_dir = args.model or cfg["paths.model"]
    if not model_dir:
        raise ConfigurationError("retrain needs --model DIR")
    system = en.DetectorSystem.load(model_dir)
    train_path = _pick(args.train, data_dir, "retrain.csv")
    if not train_path:
        raise ConfigurationError("retrain needs --train FILE or --data DIR")
    manifest = _manifest(data_dir or os.path.dirname(os.path.abspath(train_path)))
    train = _read_series(train_path, cfg, manifest)
    val_path = _pick(args.val, data_dir, "retrain_val.csv")
    if val_path and os.path.isfile(val_path):
        val = _read_series(val_path, cfg, manifest)
    else:
        frac = cfg["train.validation_fraction"]
        train, val = split_dataset(train, [1.0 - frac, frac])
    if train.grid.size < len(system.sensor_ids):
        raise ConfigurationError(
            f"unsupported: data has {train.grid.size} sensors but the model serves {len(system.sensor_ids)}"
        )
    minimum = cfg["retrain.min_frames"]
    if len(train) < minimum:
        _warn(f"retraining on {len(train)} frames, fewer than the recommended {minimum}")
    out = args.out or cfg["paths.output"]
    if not out:
        raise ConfigurationError("retrain needs an output directory (--out)")
    new = en.retrain_system(system, train, val, cfg.retrain())
    new.save(out)
    old_ids = system.sensor_ids
    before = en.sensor_mae(system, val.select(old_ids))
    after = en.sensor_mae(new, val)
    lines = [f"retrained on {len(train)} frames; held-out slice {len(val)} frames",
             "sensor        MAE before    MAE after"]
    for j, sid in enumerate(new.sensor_ids):
        b = f"{before[j]:.6f}" if j < len(old_ids) else "new"
        lines.append(f"{sid:<13} {b:<13} {after[j]:.6f}")
    report = "\n".join(lines) + "\n\n" + en.training_report(new, train.grid.kind.kind)
    _write_text(os.path.join(out, en.REPORT_FILE), report)
    _info(f"retrained model for {len(new.sensor_ids)} sensors written to {out}")
    return EXIT_OK


# -- detect -------------------------------------------------------------------------------

class _Tail(threading.Thread):
    """Follow a growing CSV file, putting parsed frame batches on a queue.

    Only complete lines are consumed.  The thread stops after ``idle``
    seconds without new data, or when ``stop`` is set.
    """

    def __init__(self, path, grid, out: queue.Queue, poll: float, idle: float, skip_until=None):
        super().__init__(daemon=True)
        self.path, self.grid, self.out = path, grid, out
        self.poll, self.idle = poll, idle
        self.skip_until = skip_until
        self.stop = threading.Event()

    def run(self):
        try:
            self._run()
        except BaseException as exc:  # handed to the consumer
            self.out.put(exc)
        self.out.put(None)

    def _run(self):
        with open(self.path, "r", encoding="utf-8", newline="") as fh:
            pending = ""
            header_seen = False
            row = 1
            prev = None
            quiet_since = time.monotonic()
            while not self.stop.is_set():
                chunk = fh.read()
                if chunk:
                    quiet_since = time.monotonic()
                    pending += chunk
                    cut = pending.rfind("\n") + 1
                    complete, pending = pending[:cut], pending[cut:]
                    lines = complete.splitlines()
                    if lines and not header_seen:
                        header = next(csv.reader([lines.pop(0)]))
                        if header != ["timestamp", *self.grid.sensor_ids]:
                            raise SchemaError(f"{self.path}: header does not match the model grid", column=1)
                        header_seen = True
                    if lines:
                        minutes, values, mask = parse_rows(csv.reader(lines), self.grid, row, prev)
                        row += len(lines)
                        prev = int(minutes[-1])
                        if self.skip_until is not None:
                            keep = minutes > self.skip_until
                            minutes, values, mask = minutes[keep], values[keep], mask[keep]
                        if len(minutes):
                            self.out.put((minutes, values, mask))
                    continue
                if time.monotonic() - quiet_since >= self.idle:
                    return
                time.sleep(self.poll)


class _Writer(threading.Thread):
    def __init__(self, fh, inbox: queue.Queue):
        super().__init__(daemon=True)
        self.fh, self.inbox = fh, inbox
        self.error = None

    def run(self):
        while True:
            records = self.inbox.get()
            if records is None:
                break
            if self.error is not None:
                continue
            try:
                en.write_records(records, self.fh)
                self.fh.flush()
            except Exception as exc:  # re-raised by the caller
                self.error = exc


def _save_checkpoint(path, engine):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(engine.checkpoint(), fh, separators=(",", ":"))
    os.replace(tmp, path)


def cmd_detect(args, cfg: RunConfig) -> int:
    model_dir = args.model or cfg["paths.model"]
    if not model_dir:
        raise ConfigurationError("detect needs --model DIR")
    data_dir = args.data or cfg["paths.data"]
    input_path = _pick(args.input, data_dir, "test.csv")
    if not input_path:
        raise ConfigurationError("detect needs --input FILE or --data DIR")
    manifest = _manifest(data_dir or os.path.dirname(os.path.abspath(input_path)))
    system = en.DetectorSystem.load(model_dir)
    grid = _grid_for(input_path, cfg, manifest)
    system.check_grid(grid)
    state_path = args.state or cfg["paths.state"] or None

    engine = None
    if state_path and os.path.isfile(state_path):
        with open(state_path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InputError(f"{state_path}: corrupt checkpoint ({exc.msg})") from None
        engine = en.StreamEngine.resume(system, grid, data)
    resumed = engine is not None
    if engine is None:
        engine = en.StreamEngine(system, grid, cfg.detector())
    skip = engine.last_ingested if resumed else None

    out_path = args.out or cfg["paths.output"] or "-"
    fh = sys.stdout if out_path == "-" else open(out_path, "a" if resumed else "w", encoding="utf-8",
                                                   newline="\n")
    outbox: queue.Queue = queue.Queue()
    writer = _Writer(fh, outbox)
    writer.start()
    try:
        if args.follow:
            inbox: queue.Queue = queue.Queue()
            tail = _Tail(input_path, grid, inbox, cfg["detect.poll_seconds"], cfg["detect.idle_timeout"], skip)
            tail.start()
            while True:
                item = inbox.get()
                if item is None:
                    break
                if isinstance(item, BaseException):
                    raise item
                outbox.put(engine.push(*item))
                if state_path and engine.checkpoint_due():
                    _save_checkpoint(state_path, engine)
        else:
            series = read_csv_file(input_path, grid)
            keep = slice(None) if skip is None else series.minutes > skip
            minutes, values, mask = series.minutes[keep], series.values[keep], series.mask[keep]
            for a in range(0, len(minutes), en.DAY):
                outbox.put(engine.push(minutes[a:a + en.DAY], values[a:a + en.DAY], mask[a:a + en.DAY]))
                if state_path and engine.checkpoint_due():
                    _save_checkpoint(state_path, engine)
        # with a state file the stream is open-ended: the last frames stay
        # pending (awaiting look-ahead) in the checkpoint instead of being flushed
        if state_path:
            _save_checkpoint(state_path, engine)
        else:
            outbox.put(engine.flush())
    finally:
        outbox.put(None)
        writer.join()
        if fh is not sys.stdout:
            fh.close()
    if writer.error is not None:
        raise writer.error
    return EXIT_OK


# -- evaluate -----------------------------------------------------------------------------

def cmd_evaluate(args, cfg: RunConfig) -> int:
    data_dir = args.data or cfg["paths.data"]
    if not data_dir:
        raise ConfigurationError("evaluate needs --data DIR (the scenario directory)")
    manifest = _manifest(data_dir)
    if not manifest:
        raise InputError(f"{data_dir}: no manifest.txt")
    if not os.path.isfile(args.alerts):
        raise InputError(f"no such file: {args.alerts}")
    records = en.read_records(args.alerts)
    card = evaluate(manifest, records)
    sys.stdout.write(card.text())
    if args.out:
        _write_text(args.out, card.text())
    return EXIT_OK if card.passed else EXIT_FAILED


# -- argument parsing ---------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--out", "-o", help="output directory or file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key")

    parser = _Parser(prog="uncalib", description="Sensor uncalibration detector.")
    parser.add_argument("--version", action="version", version=f"uncalib {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic scenario bundle")
    p.add_argument("scenario")
    p.add_argument("--scale", type=float, default=1.0, help="shrink all durations by this factor")

    p = sub.add_parser("train", parents=[common], help="fit preprocessing, network and residual bands")
    p.add_argument("--data", help="scenario directory with train.csv and val.csv")
    p.add_argument("--train")
    p.add_argument("--val")

    p = sub.add_parser("detect", parents=[common], help="stream frames through a trained system")
    p.add_argument("--model", help="directory written by train or retrain")
    p.add_argument("--data", help="scenario directory (reads test.csv)")
    p.add_argument("--input", help="CSV file to process")
    p.add_argument("--state", help="checkpoint file to resume from and update")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--replay", action="store_true", help="process the file as fast as possible (default)")
    mode.add_argument("--follow", action="store_true", help="tail a growing file")

    p = sub.add_parser("retrain", parents=[common], help="retrain the output layer on new data")
    p.add_argument("--model", help="directory of the model to adapt")
    p.add_argument("--data", help="scenario directory with retrain.csv and retrain_val.csv")
    p.add_argument("--train")
    p.add_argument("--val")

    p = sub.add_parser("evaluate", parents=[common], help="score an alert file against a scenario")
    p.add_argument("--data", help="scenario directory with manifest.txt")
    p.add_argument("--alerts", required=True)
    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "detect": cmd_detect,
    "retrain": cmd_retrain,
    "evaluate": cmd_evaluate,
}


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    if args.seed is not None:
        out["seed"] = str(args.seed)
    return out


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = RunConfig.load(args.config, _overrides(args))
        return COMMANDS[args.command](args, cfg)
    except (DivergenceError, NumericError) as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except UncalibError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: io: {exc.strerror or exc}: {exc.filename or ''}".rstrip(": "), file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
