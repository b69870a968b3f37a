#!/usr/bin/env python3
"""
Crystal Polaron Lab MCP Server

A FastMCP server that provides tools for:
1. Host crystals and their dielectric matrix
2. Pekar polaron ground states
3. Macroscopic-limit, counterexample and polaron-limit studies
"""

import argparse
import logging
import sys
from typing import Any, Callable, Dict, List, Optional

from dotenv import load_dotenv
from fastmcp import FastMCP

# Load environment variables
load_dotenv()

# Initialize FastMCP server
mcp = FastMCP("Crystal Polaron Lab")

from harness.analysis import ConvergenceReport
from harness.config import ExperimentConfig, load_config
from harness.experiments import (
    build_crystal,
    resolve_eps,
    run_counterexample,
    run_crystal,
    run_macrolimit,
    run_pekar,
    run_polaron_limit,
    run_response,
)
from harness.report_generation import to_jsonable
from response.dielectric import parse_eps
from utils.errors import PolaronLabError

logger = logging.getLogger(__name__)


def _run_tool(name: str, config_path: Optional[str], body: Callable[[ExperimentConfig], Dict[str, Any]]) -> Dict[str, Any]:
    """Load the configuration, run body and turn lab failures into a status payload."""
    try:
        cfg = load_config(config_path)
        result = body(cfg)
    except PolaronLabError as exc:
        logger.info("%s ended: %s", name, exc)
        return {"tool": name, **exc.to_dict()}
    return to_jsonable({"tool": name, "status": "success", **result})


def _summary(report: ConvergenceReport) -> Dict[str, Any]:
    return report.to_dict()


@mcp.tool
def compute_crystal(config_path: Optional[str] = None) -> Dict[str, Any]:
    """
    Solve the periodic host crystal.

    Args:
        config_path: YAML experiment configuration (default: built-in reference host)

    Returns:
        Dictionary with the ground-state summary: Fermi level, gap, density checks
    """

    def body(cfg: ExperimentConfig) -> Dict[str, Any]:
        return {"report": _summary(run_crystal(cfg, build_crystal(cfg)))}

    return _run_tool("compute_crystal", config_path, body)


@mcp.tool
def compute_dielectric_matrix(config_path: Optional[str] = None) -> Dict[str, Any]:
    """
    Extract the macroscopic dielectric matrix of the host crystal.

    Args:
        config_path: YAML experiment configuration

    Returns:
        Dictionary with the 3x3 matrix, its eigenvalues and the response checks
    """

    def body(cfg: ExperimentConfig) -> Dict[str, Any]:
        report, eps = run_response(cfg, build_crystal(cfg))
        return {"eps": eps.to_dict(), "report": _summary(report)}

    return _run_tool("compute_dielectric_matrix", config_path, body)


@mcp.tool
def solve_pekar_polaron(config_path: Optional[str] = None, eps: Optional[List[float]] = None) -> Dict[str, Any]:
    """
    Minimize the anisotropic Pekar functional.

    Args:
        config_path: YAML experiment configuration
        eps: Diagonal of the dielectric matrix (default: configuration, then the host)

    Returns:
        Dictionary with the Pekar energy and convergence data, or a no_binding status
    """

    def body(cfg: ExperimentConfig) -> Dict[str, Any]:
        spec = eps if eps is not None else cfg.pekar.eps
        matrix = parse_eps(spec) if spec is not None else resolve_eps(cfg, build_crystal(cfg))
        return {"report": _summary(run_pekar(cfg, matrix))}

    return _run_tool("solve_pekar_polaron", config_path, body)


@mcp.tool
def run_macroscopic_limit(config_path: Optional[str] = None) -> Dict[str, Any]:
    """
    Compare m^-1 F_crys[U_m nu] with the Pekar interaction over the configured m list.

    Args:
        config_path: YAML experiment configuration

    Returns:
        Dictionary with the per-m table, the m -> 0 extrapolation and error bars
    """

    def body(cfg: ExperimentConfig) -> Dict[str, Any]:
        crystal = build_crystal(cfg)
        return {"report": _summary(run_macrolimit(cfg, crystal, resolve_eps(cfg, crystal)))}

    return _run_tool("run_macroscopic_limit", config_path, body)


@mcp.tool
def run_counterexample_study(config_path: Optional[str] = None) -> Dict[str, Any]:
    """
    Show that the auxiliary energy does not converge to the Pekar interaction.

    Args:
        config_path: YAML experiment configuration

    Returns:
        Dictionary with the per-m table and the persistent gap
    """

    def body(cfg: ExperimentConfig) -> Dict[str, Any]:
        crystal = build_crystal(cfg)
        return {"report": _summary(run_counterexample(cfg, crystal, resolve_eps(cfg, crystal)))}

    return _run_tool("run_counterexample_study", config_path, body)


@mcp.tool
def run_polaron_limit_study(config_path: Optional[str] = None) -> Dict[str, Any]:
    """
    Compare the corrected polaron energy with the Pekar energy as m decreases.

    Args:
        config_path: YAML experiment configuration

    Returns:
        Dictionary with the per-m energies, error bars and the limit check
    """

    def body(cfg: ExperimentConfig) -> Dict[str, Any]:
        crystal = build_crystal(cfg)
        return {"report": _summary(run_polaron_limit(cfg, crystal, resolve_eps(cfg, crystal)))}

    return _run_tool("run_polaron_limit_study", config_path, body)


def parse_arguments(argv: Optional[List[str]] = None):
    """Parse command line arguments; unknown arguments are kept for cli mode."""
    parser = argparse.ArgumentParser(description="Crystal Polaron Lab MCP Server")

    parser.add_argument(
        "--mode",
        choices=["server", "cli"],
        default="server",
        help="Run as an MCP server or forward the remaining arguments to the lab CLI",
    )
    parser.add_argument(
        "--transport",
        choices=["stdio", "http"],
        default="stdio",
        help="Transport protocol for server mode",
    )
    parser.add_argument("--host", default="127.0.0.1", help="Host for HTTP transport")
    parser.add_argument("--port", type=int, default=8000, help="Port for HTTP transport")

    return parser.parse_known_args(argv)


if __name__ == "__main__":
    args, rest = parse_arguments()

    if args.mode == "cli":
        from harness.cli import cli_main

        sys.exit(cli_main(rest))

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logger.info("Starting FastMCP server...")
    if args.transport == "stdio":
        mcp.run()
    else:
        mcp.run(transport=args.transport, host=args.host, port=args.port)
