"""Command line entry point: ``confmax <study> --config PATH --out DIR [--seeds LIST] [--workers N]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 partial or aborted run.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import bench
from .bench import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_PARTIAL
from .engine import load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, FormatError

log = logging.getLogger("confmax")

STUDIES = ("pretrain", "adapt", "losscape", "kappa", "subset", "clean", "itstudy")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="confmax", description="Test-time adaptation benchmark.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STUDIES:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI file read on top of the packaged defaults")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seeds", help="comma-separated seeds, overriding [run] seeds")
        p.add_argument("--workers", type=int, default=1, help="parallel processes (default 1)")
        p.add_argument("-q", "--quiet", action="store_true")
    return parser


def _pretrain(cfg, out: Path, started: str) -> int:
    model, history, reached = bench.pretrain_model(cfg, log=lambda row: log.info("pretrain %s", row))
    blob = save_checkpoint(model)
    ckpt = bench.checkpoint_path(cfg, out)
    ckpt.write_bytes(blob)
    csv_path = out / "pretrain.csv"
    bench.write_csv(csv_path, "pretrain", history)
    code = EXIT_OK if reached else EXIT_PARTIAL
    if not reached:
        log.warning("pretraining finished below the %.2f target accuracy", cfg.pretrain.target_accuracy)
    bench.write_manifest(out / "manifest.json", command="pretrain", cfg=cfg, started=started,
                         outputs=[csv_path, ckpt], status="ok" if reached else "below-target",
                         exit_code=code, checkpoint=blob)
    return code


def _losscape(cfg, out: Path, started: str) -> int:
    points = int(cfg.get("losscape", "points") or 499)
    csv_path = out / "losscape.csv"
    bench.write_csv(csv_path, "losscape", bench.losscape_rows(points))
    bench.write_manifest(out / "manifest.json", command="losscape", cfg=cfg, started=started,
                         outputs=[csv_path], status="ok", exit_code=EXIT_OK)
    return EXIT_OK


def _study(name: str, cfg, out: Path, started: str, workers: int) -> int:
    ckpt = bench.checkpoint_path(cfg, out)
    if not ckpt.is_file():
        log.error("checkpoint %s not found; run `confmax pretrain` first", ckpt)
        return EXIT_DATA
    blob = ckpt.read_bytes()
    load_checkpoint(blob)  # validate before fanning out
    rows = bench.run_study(name, cfg, blob, workers, progress=lambda cell: log.info("%s %s", name, cell[1]))
    csv_path = out / f"{name}.csv"
    bench.write_csv(csv_path, name, rows)
    outputs = [csv_path]
    if name == "adapt":
        summary = out / "adapt_summary.csv"
        bench.write_csv(summary, "adapt_summary", bench.summarize_adapt(rows))
        outputs.append(summary)
    aborted = sum(1 for r in rows if r["status"] != "ok")
    code = EXIT_PARTIAL if aborted else EXIT_OK
    bench.write_manifest(out / "manifest.json", command=name, cfg=cfg, started=started, outputs=outputs,
                         status="partial" if aborted else "ok", exit_code=code, checkpoint=blob)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    started = bench.now()
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = bench.load_config(args.config, args.seeds)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "pretrain":
            return _pretrain(cfg, out, started)
        if args.command == "losscape":
            return _losscape(cfg, out, started)
        return _study(args.command, cfg, out, started, args.workers)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except ContractError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        log.error("interrupted")
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
