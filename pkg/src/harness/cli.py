"""
Command-line interface of the polaron lab.

Usage:
    polaron-lab <command> [--config FILE] [--verify] [--threads N] [--eps SPEC]
                          [--seed N] [--output DIR] [--log-level LEVEL]

Commands: crystal, cellmode, response, defect, pekar, limit, counterexample, all.
Exit codes: 0 success (including a "no binding" Pekar report), 1 invariant
violation, 2 configuration error, 3 numerical non-convergence.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from dotenv import load_dotenv

from crystal.crystal_scf import CrystalGroundState
from harness.config import LOG_LEVEL_ENV, ExperimentConfig, load_config
from harness.experiments import (
    build_crystal,
    resolve_eps,
    run_cellmode,
    run_counterexample,
    run_crystal,
    run_defect,
    run_macrolimit,
    run_pekar,
    run_polaron_limit,
    run_receding_bumps,
    run_response,
)
from harness.report_generation import save_index, save_report, save_status
from harness.verification import run_verification
from lattice_core.checkpoint import save_crystal
from response.dielectric import DielectricMatrix, parse_eps
from utils.errors import ConfigError, InvariantViolation, NoBinding, PolaronLabError
from utils.parallel import set_thread_override

logger = logging.getLogger(__name__)

COMMANDS = ("crystal", "cellmode", "response", "defect", "pekar", "limit", "counterexample", "all")
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: Optional[str] = None) -> None:
    """Install one stream handler on the root logger."""
    name = (level or os.getenv(LOG_LEVEL_ENV, "INFO")).upper()
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(getattr(logging, name, logging.INFO))


def eps_argument(text: str) -> Any:
    """``identity``, a number, three diagonal entries or nine entries, comma separated."""
    if "," not in text:
        return text
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"cannot read dielectric matrix {text!r}") from exc
    if len(values) == 3:
        return values
    if len(values) == 9:
        return [values[0:3], values[3:6], values[6:9]]
    raise argparse.ArgumentTypeError("give 1, 3 or 9 comma-separated entries")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polaron-lab", description="Crystal polaron lab")
    parser.add_argument("command", choices=COMMANDS, help="Experiment to run")
    parser.add_argument("--config", help="YAML configuration file (default: built-in reference)")
    parser.add_argument("--verify", action="store_true", help="Run the invariant suite afterwards")
    parser.add_argument("--threads", type=int, help="Worker threads (overrides POLARON_LAB_THREADS)")
    parser.add_argument("--eps", type=eps_argument, help="Dielectric matrix override, e.g. identity or 2.5")
    parser.add_argument("--seed", type=int, help="Random seed override")
    parser.add_argument("--output", help="Output directory (overrides POLARON_LAB_OUTPUT_DIR)")
    parser.add_argument("--log-level", help="Logging level (default: POLARON_LAB_LOG_LEVEL or INFO)")
    return parser


class _Run:
    """Shared state of one invocation: the host crystal and eps are built once."""

    def __init__(self, cfg: ExperimentConfig, eps_override: Any, output_dir: Path) -> None:
        self.cfg = cfg
        self.eps_override = eps_override
        self.output_dir = output_dir
        self.files: Dict[str, Dict[str, str]] = {}
        self._crystal: Optional[CrystalGroundState] = None
        self._eps: Optional[DielectricMatrix] = None

    @property
    def crystal(self) -> CrystalGroundState:
        if self._crystal is None:
            self._crystal = build_crystal(self.cfg)
            if self.cfg.output.checkpoints:
                save_crystal(self.output_dir / "crystal.chk", self._crystal, {"name": self.cfg.name})
        return self._crystal

    @property
    def eps(self) -> DielectricMatrix:
        if self._eps is None:
            self._eps = resolve_eps(self.cfg, self.crystal, self.eps_override)
        return self._eps

    def pekar_eps(self) -> DielectricMatrix:
        spec = self.eps_override if self.eps_override is not None else self.cfg.pekar.eps
        if spec is not None:
            return parse_eps(spec)
        return self.eps

    def emit(self, report) -> None:
        self.files[report.name] = save_report(report, self.output_dir)

    def run(self, command: str) -> None:
        cfg = self.cfg
        if command in ("crystal", "all"):
            self.emit(run_crystal(cfg, self.crystal))
        if command in ("cellmode", "all"):
            self.emit(run_cellmode(cfg, self.crystal))
        if command in ("response", "all"):
            report, eps = run_response(cfg, self.crystal)
            self._eps = self._eps or eps
            self.emit(report)
        if command in ("defect", "all"):
            self.emit(run_defect(cfg, self.crystal, checkpoint_dir=self.output_dir))
        if command in ("pekar", "all"):
            try:
                self.emit(run_pekar(cfg, self.pekar_eps()))
            except NoBinding as exc:
                if command == "pekar":
                    raise
                logger.info("pekar: %s", exc)
                self.files["pekar"] = save_status("pekar", exc.to_dict(), self.output_dir)
        if command in ("limit", "all"):
            self.emit(run_macrolimit(cfg, self.crystal, self.eps))
            self.emit(run_receding_bumps(cfg, self.crystal, self.eps))
            self.emit(run_polaron_limit(cfg, self.crystal, self.eps))
        if command in ("counterexample", "all"):
            self.emit(run_counterexample(cfg, self.crystal, self.eps))

    def verify(self) -> List[str]:
        report = run_verification(self.cfg, self.crystal, self.eps)
        self.emit(report)
        return report.checks["violations"]


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one command of the lab.

    Args:
        argv: Arguments without the program name (default: sys.argv[1:])

    Returns:
        Process exit code
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and ConfigError.exit_code
    load_dotenv()
    configure_logging(args.log_level)

    output_dir: Optional[Path] = None
    try:
        overrides: Dict[str, Any] = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.output:
            overrides["output"] = {"directory": args.output}
        if args.threads is not None:
            overrides["threads"] = args.threads
        cfg = load_config(args.config, overrides)
        set_thread_override(cfg.threads)
        output_dir = cfg.output.resolved_directory()
        output_dir.mkdir(parents=True, exist_ok=True)

        session = _Run(cfg, args.eps, output_dir)
        session.run(args.command)
        violations = session.verify() if args.verify else []
        save_index(session.files, cfg.model_dump(mode="json"), output_dir)
        if violations:
            raise InvariantViolation(f"invariant suite failed: {', '.join(violations)}")
    except NoBinding as exc:
        logger.info("%s: %s", args.command, exc)
        if output_dir is not None:
            save_status(args.command, exc.to_dict(), output_dir)
        return NoBinding.exit_code
    except PolaronLabError as exc:
        logger.error("%s failed: %s", args.command, exc)
        if output_dir is not None:
            save_status(f"{args.command}_error", exc.to_dict(), output_dir)
        return exc.exit_code
    logger.info("%s finished; results in %s", args.command, output_dir)
    return 0


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
