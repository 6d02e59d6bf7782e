"""``xmrank <stage> --config <path> [--force] [--seed N]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .dataset_io import DataFormatError
from .pipeline import STAGES, ConfigMismatchError, MissingArtifactError, Pipeline

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_MISSING, EXIT_MISMATCH = 0, 1, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xmrank", description="two-stage cross-market ranking pipeline")
    p.add_argument("stage", choices=[*STAGES, "all"])
    p.add_argument("--config", required=True, help="flat key=value config file")
    p.add_argument("--force", action="store_true", help="accept upstream artifacts built with another config")
    p.add_argument("--seed", type=int, default=None, help="override the global seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    log = logging.getLogger("xmrank")
    try:
        cfg = load_config(args.config, seed=args.seed)
        Pipeline(cfg, force=args.force).run(args.stage)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except ConfigMismatchError as exc:
        log.error("%s", exc)
        return EXIT_MISMATCH
    except (DataFormatError, FileNotFoundError) as exc:
        log.error("input error: %s", exc)
        return EXIT_ERROR
    if args.stage in ("eval", "all"):
        report = cfg.output_dir / "eval" / "report.txt"
        sys.stdout.write(report.read_text(encoding="utf-8"))
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
