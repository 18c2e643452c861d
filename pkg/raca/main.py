"""Main entry point for raca."""

import csv
import json
from pathlib import Path
from typing import Annotated, Any, Dict, List, NoReturn, Optional

import typer

from raca.config.manager import VARIANTS, ConfigManager, RunConfig
from raca.core.arena import ArenaConfig
from raca.core.checkpoint import Checkpoint, load_checkpoint
from raca.core.harness import (
    RandomPolicy,
    ScriptedAllyPolicy,
    evaluate,
    evaluate_policy,
    run_training,
    transfer_protocol,
)
from raca.core.selftest import SUITES, run_selftest
from raca.utils.errors import ConfigError, RacaError
from raca.utils.logger import close_logging, get_logger, setup_logging

app = typer.Typer(help="raca - relation-aware credit assignment on a combat micro-arena")

USAGE_EXIT = 2
RUNTIME_EXIT = 1


def _fail(error: Exception) -> NoReturn:
    """Log ``error`` and exit with the code for its kind."""
    logger = get_logger()
    if isinstance(error, (ConfigError, FileNotFoundError)):
        logger.error(f"Usage error: {error}")
        raise typer.Exit(USAGE_EXIT)
    logger.error(f"Error: {error}")
    raise typer.Exit(RUNTIME_EXIT)


def _run_config(
    config_file: Optional[Path], overrides: Dict[str, Any]
) -> RunConfig:
    return ConfigManager().load_run_config(config_file, overrides)


def _arena_for(run_config: RunConfig, config_file: Optional[Path]) -> ArenaConfig:
    base_dir = config_file.parent if config_file is not None else None
    return ConfigManager().resolve_arena(run_config.arena, base_dir)


def _checkpoint_arena(checkpoint: Checkpoint, checkpoint_path: Path) -> ArenaConfig:
    """The arena a checkpoint was trained on: the run directory copy, else its config entry."""
    saved = checkpoint_path.parent / "arena.json"
    if saved.exists():
        return ArenaConfig.load(saved)
    arena = checkpoint.run_config.get("arena")
    if arena is None:
        raise ConfigError("arena", "checkpoint records no arena; pass --arena")
    return ConfigManager().resolve_arena(arena)


def _pooling(checkpoint: Checkpoint) -> str:
    variant = checkpoint.run_config.get("variant", "raca")
    if variant not in VARIANTS:
        raise ConfigError("variant", f"checkpoint variant {variant!r} is unknown")
    return VARIANTS[variant][0]


@app.command()
def train(
    config_file: Annotated[
        Optional[Path],
        typer.Option("--config", "-c", help="Path to run configuration file (JSON or YAML)"),
    ] = None,
    seed: Annotated[Optional[int], typer.Option("--seed", "-s", help="Random seed")] = None,
    out: Annotated[
        Path, typer.Option("--out", "-o", help="Run directory for metrics and checkpoints")
    ] = Path("runs/latest"),
    arena: Annotated[
        Optional[str],
        typer.Option("--arena", "-a", help="Arena preset name or ArenaConfig file"),
    ] = None,
    variant: Annotated[
        Optional[str],
        typer.Option("--variant", help=f"Algorithm variant: {', '.join(VARIANTS)}"),
    ] = None,
    total_steps: Annotated[
        Optional[int], typer.Option("--total-steps", help="Environment steps to train for")
    ] = None,
    print_config: Annotated[
        bool, typer.Option("--print-config", help="Print the merged configuration and exit")
    ] = False,
    verbose: Annotated[
        bool, typer.Option("--verbose", "-v", help="Enable verbose logging")
    ] = False,
):
    """
    Train a variant on an arena with periodic greedy evaluation.

    Writes metrics.csv, train.log, config.json, arena.json and checkpoints
    (latest.ckpt, final.ckpt) into the run directory.
    """
    logger = setup_logging("DEBUG" if verbose else "INFO")
    try:
        overrides = {"seed": seed, "arena": arena, "variant": variant, "total_steps": total_steps}
        run_config = _run_config(config_file, overrides)
        if print_config:
            typer.echo(json.dumps(run_config.to_dict(), indent=2))
            return
        arena_config = _arena_for(run_config, config_file)
        setup_logging("DEBUG" if verbose else run_config.log_level, out / "train.log")
        summary = run_training(run_config, arena_config, out)
    except (RacaError, FileNotFoundError) as e:
        _fail(e)
    except KeyboardInterrupt:
        logger.info("Training interrupted by user")
        raise typer.Exit(RUNTIME_EXIT)
    finally:
        close_logging()

    final = summary.rows[-1] if summary.rows else None
    typer.echo(f"Run directory: {summary.out_dir}")
    typer.echo(f"  Env steps: {summary.env_steps}")
    if final is not None:
        typer.echo(f"  Final win rate: {final.win_rate:.3f}")
    typer.echo(f"  Checkpoint: {summary.final_checkpoint}")


@app.command(name="eval")
def eval_command(
    checkpoint_path: Annotated[
        Optional[Path], typer.Option("--checkpoint", "-k", help="Checkpoint to evaluate")
    ] = None,
    arena: Annotated[
        Optional[str],
        typer.Option("--arena", "-a", help="Arena preset or file (defaults to the checkpoint's own)"),
    ] = None,
    episodes: Annotated[int, typer.Option("--episodes", "-n", help="Greedy episodes")] = 32,
    seed: Annotated[int, typer.Option("--seed", "-s", help="Evaluation seed")] = 0,
    policy: Annotated[
        str, typer.Option("--policy", help="agent, scripted or random")
    ] = "agent",
    verbose: Annotated[
        bool, typer.Option("--verbose", "-v", help="Enable verbose logging")
    ] = False,
):
    """Score a checkpoint (or a baseline policy) with greedy decentralised rollouts."""
    setup_logging("DEBUG" if verbose else "INFO")
    try:
        if policy not in ("agent", "scripted", "random"):
            raise ConfigError("policy", "must be agent, scripted or random")
        if policy == "agent":
            if checkpoint_path is None:
                raise ConfigError("checkpoint", "required when --policy is agent")
            checkpoint = load_checkpoint(checkpoint_path)
            arena_config = (
                ConfigManager().resolve_arena(arena)
                if arena is not None
                else _checkpoint_arena(checkpoint, checkpoint_path)
            )
            result = evaluate(checkpoint.params, arena_config, episodes, seed, pooling=_pooling(checkpoint))
        else:
            if arena is None:
                raise ConfigError("arena", "required for baseline policies")
            arena_config = ConfigManager().resolve_arena(arena)
            baseline = ScriptedAllyPolicy() if policy == "scripted" else RandomPolicy(seed)
            result = evaluate_policy(baseline, arena_config, episodes, seed)
    except (RacaError, FileNotFoundError) as e:
        _fail(e)

    typer.echo(f"Arena: {arena_config.name}")
    typer.echo(f"  Win rate: {result.win_rate:.3f} over {result.n_episodes} episodes")
    typer.echo(f"  Mean return: {result.mean_return:.4f}")
    typer.echo(f"  Mean length: {result.mean_length:.1f}")


@app.command(name="transfer-eval")
def transfer_eval(
    checkpoint_path: Annotated[
        Path, typer.Option("--checkpoint", "-k", help="Checkpoint whose agent network is scored")
    ],
    arena: Annotated[
        str, typer.Option("--arena", "-a", help="Target arena preset or file")
    ],
    episodes: Annotated[int, typer.Option("--episodes", "-n", help="Greedy episodes")] = 32,
    seed: Annotated[int, typer.Option("--seed", "-s", help="Evaluation seed")] = 0,
    verbose: Annotated[
        bool, typer.Option("--verbose", "-v", help="Enable verbose logging")
    ] = False,
):
    """Zero-shot evaluation of a checkpoint's agent network on a different arena."""
    logger = setup_logging("DEBUG" if verbose else "INFO")
    try:
        checkpoint = load_checkpoint(checkpoint_path, agent_only=True)
        arena_config = ConfigManager().resolve_arena(arena)
        result = evaluate(checkpoint.params, arena_config, episodes, seed, pooling=_pooling(checkpoint))
    except (RacaError, FileNotFoundError) as e:
        _fail(e)

    logger.info(f"Parameter updates during transfer: {checkpoint.params.updates}")
    typer.echo(f"{arena_config.name}: win rate {result.win_rate:.3f} over {result.n_episodes} episodes")


@app.command()
def transfer(
    train_arena: Annotated[str, typer.Option("--train-arena", help="Arena to train on")],
    test_arena: Annotated[str, typer.Option("--test-arena", help="Arena for zero-shot scoring")],
    config_file: Annotated[
        Optional[Path],
        typer.Option("--config", "-c", help="Path to run configuration file (JSON or YAML)"),
    ] = None,
    seeds: Annotated[
        str, typer.Option("--seeds", help="Comma-separated training seeds")
    ] = "0,1,2,3,4",
    out: Annotated[
        Optional[Path], typer.Option("--out", "-o", help="CSV file for the transfer table")
    ] = None,
    verbose: Annotated[
        bool, typer.Option("--verbose", "-v", help="Enable verbose logging")
    ] = False,
):
    """Run the ad-hoc transfer protocol: train on one arena, score zero-shot on another."""
    setup_logging("DEBUG" if verbose else "INFO")
    try:
        try:
            seed_list = [int(s) for s in seeds.split(",") if s.strip()]
        except ValueError as e:
            raise ConfigError("seeds", f"cannot parse {seeds!r}") from e
        if not seed_list:
            raise ConfigError("seeds", "need at least one seed")
        run_config = _run_config(config_file, {})
        base_dir = config_file.parent if config_file is not None else None
        manager = ConfigManager()
        table = transfer_protocol(
            manager.resolve_arena(train_arena, base_dir),
            manager.resolve_arena(test_arena, base_dir),
            run_config,
            seed_list,
        )
    except (RacaError, FileNotFoundError) as e:
        _fail(e)

    band = table.test_band
    rows: List[List[Any]] = []
    for k, (mean, p25, p75) in enumerate(zip(band.mean, band.p25, band.p75)):
        rows.append([table.env_steps[k], mean, p25, p75])
        typer.echo(f"step={table.env_steps[k]} {table.test_arena} win rate {mean:.3f} [{p25:.3f}, {p75:.3f}]")
    typer.echo(f"Parameter updates during zero-shot scoring: {table.param_updates}")
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["env_step", "win_rate_mean", "win_rate_p25", "win_rate_p75"])
            writer.writerows(rows)


@app.command()
def selftest(
    suite: Annotated[
        Optional[List[str]],
        typer.Option("--suite", help=f"Suites to run (repeatable): {', '.join(SUITES)}"),
    ] = None,
    instances: Annotated[
        int, typer.Option("--instances", help="Random instances per property")
    ] = 20,
    seed: Annotated[int, typer.Option("--seed", "-s", help="Random seed")] = 0,
    verbose: Annotated[
        bool, typer.Option("--verbose", "-v", help="Enable verbose logging")
    ] = False,
):
    """Run the gradient, graph, mixer and invariance property checks."""
    setup_logging("DEBUG" if verbose else "INFO")
    try:
        results = run_selftest(suite, instances, seed)
    except ValueError as e:
        _fail(ConfigError("suite", str(e)))

    failed = 0
    for result in results:
        mark = "ok" if result.passed else "FAILED"
        typer.echo(f"  {result.name:<32} {mark:<7} {result.value:.3g}")
        failed += not result.passed
    if failed:
        typer.echo(f"{failed} of {len(results)} checks failed")
        raise typer.Exit(RUNTIME_EXIT)
    typer.echo(f"All {len(results)} checks passed")


@app.command()
def config(
    show: Annotated[
        bool, typer.Option("--show", help="Show current configuration")
    ] = False,
    arenas: Annotated[
        bool, typer.Option("--arenas", help="List bundled arena presets")
    ] = False,
    config_file: Annotated[
        Optional[Path],
        typer.Option("--config", "-c", help="Path to run configuration file"),
    ] = None,
):
    """Show configuration defaults and bundled arenas."""
    config_manager = ConfigManager()
    setup_logging("WARNING")

    if arenas:
        for name in config_manager.list_scenarios():
            typer.echo(name)
        return

    if show:
        try:
            run_config = config_manager.load_run_config(config_file)
        except (RacaError, FileNotFoundError) as e:
            _fail(e)
        typer.echo(json.dumps(run_config.to_dict(), indent=2))
        return

    typer.echo("Use --show to display configuration or --arenas to list arena presets")


if __name__ == "__main__":
    app()
