"""Training runs, greedy evaluation, baselines and the zero-shot transfer protocol."""

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import psutil

from raca.config.manager import ConfigManager, RunConfig
from raca.core import numerics as nx
from raca.core.agentnet import AgentNet, AgentNetSpec, pad_observations, select_actions
from raca.core.arena import N_BASE_ACTIONS, Arena, ArenaConfig, ObservationTriple, attack_nearest_actions
from raca.core.checkpoint import AGENT_PREFIX, Checkpoint, save_checkpoint
from raca.core.learner import Learner, TrainUpdate
from raca.core.numerics import ParamStore
from raca.utils.errors import ContractError, TrainingDivergenceError
from raca.utils.logger import get_logger

EVAL_SEED_OFFSET = 10**6


@dataclass(frozen=True)
class EvalResult:
    win_rate: float
    mean_return: float
    mean_length: float
    n_episodes: int


class Policy(Protocol):
    """Decentralised controller for the allied side of an arena."""

    def reset(self, arena: Arena) -> None: ...

    def act(self, arena: Arena, observations: List[ObservationTriple], avail: np.ndarray) -> List[int]: ...


class GreedyAgentPolicy:
    """Agent network at epsilon = 0; reads observations and its own hidden state only."""

    def __init__(self, net: AgentNet, params: ParamStore):
        self.net = net
        self.params = params
        self._consts = params.constants()
        self._hidden: Optional[nx.Tensor] = None
        self._rng = np.random.default_rng(0)

    def reset(self, arena: Arena) -> None:
        self.net.check_arena(arena.config.n_actions)
        self._hidden = self.net.initial_hidden((arena.config.n_allies,))

    def act(self, arena: Arena, observations: List[ObservationTriple], avail: np.ndarray) -> List[int]:
        assert self._hidden is not None
        own, variant, mask, invariant = pad_observations(observations, arena.config.max_variant_rows)
        step = self.net.forward(own, variant, mask, invariant, self._hidden, self._consts)
        self._hidden = step.hidden
        return select_actions(step.q_values.data, avail, 0.0, self._rng)


class ScriptedAllyPolicy:
    """Attack-nearest script driving the allies, chasing enemies anywhere on the map."""

    def reset(self, arena: Arena) -> None:
        pass

    def act(self, arena: Arena, observations: List[ObservationTriple], avail: np.ndarray) -> List[int]:
        occupied = {(u.x, u.y) for u in arena.units if u.alive}
        return attack_nearest_actions(
            arena.allies,
            arena.enemies,
            arena.allies,
            occupied,
            arena.config.width,
            arena.config.height,
            chase_limit=math.inf,
        )


class RandomPolicy:
    """Uniformly random available action per agent."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def reset(self, arena: Arena) -> None:
        pass

    def act(self, arena: Arena, observations: List[ObservationTriple], avail: np.ndarray) -> List[int]:
        return [int(self._rng.choice(np.flatnonzero(mask))) for mask in avail]


def agent_net_for(params: ParamStore, pooling: str = "attention") -> AgentNet:
    """Rebuild the agent network whose widths ``params`` were trained with."""
    d_k = params["agent.h.query.w"].shape[1]
    d_h = params["agent.rnn.w_h"].shape[0]
    slots = params["agent.q.w"].shape[1] - N_BASE_ACTIONS
    return AgentNet(AgentNetSpec(d_k=d_k, d_h=d_h, action_slots=slots, pooling=pooling))


def evaluate_policy(
    policy: Policy, arena_config: ArenaConfig, n_episodes: int = 32, seed: int = 0
) -> EvalResult:
    """Run ``n_episodes`` on arenas seeded ``seed + 10**6 + k``."""
    if n_episodes < 1:
        raise ContractError("n_episodes must be at least 1")
    arena = Arena(arena_config)
    wins, returns, lengths = 0, [], []
    for k in range(n_episodes):
        _, observations, avail = arena.reset(seed + EVAL_SEED_OFFSET + k)
        policy.reset(arena)
        total, won, length = 0.0, False, 0
        while not arena.done:
            result = arena.step(policy.act(arena, observations, avail))
            total += result.reward
            won = result.won
            length += 1
            observations, avail = result.observations, result.avail
        wins += int(won)
        returns.append(total)
        lengths.append(length)
    arena.close()
    return EvalResult(
        win_rate=wins / n_episodes,
        mean_return=float(np.mean(returns)),
        mean_length=float(np.mean(lengths)),
        n_episodes=n_episodes,
    )


def evaluate(
    params: ParamStore,
    arena_config: ArenaConfig,
    n_episodes: int = 32,
    seed: int = 0,
    net: Optional[AgentNet] = None,
    pooling: str = "attention",
) -> EvalResult:
    """Greedy decentralised evaluation of the agent network alone.

    Only ``agent.*`` tensors are read; ``params.updates`` must not move.
    """
    agent_params = params.subset(AGENT_PREFIX)
    if net is None:
        net = agent_net_for(agent_params, pooling)
    before = params.updates
    result = evaluate_policy(GreedyAgentPolicy(net, agent_params), arena_config, n_episodes, seed)
    if params.updates != before or agent_params.updates != before:
        raise ContractError("Evaluation changed the parameter update counter")
    return result


METRICS_HEADER = (
    "env_step",
    "episode",
    "loss",
    "q_tot_mean",
    "win_rate",
    "mean_return",
    "mean_length",
    "epsilon",
)


@dataclass(frozen=True)
class MetricsRow:
    env_step: int
    episode: int
    loss: float
    q_tot_mean: float
    win_rate: float
    mean_return: float
    mean_length: float
    epsilon: float


class MetricsWriter:
    """Appends MetricsRow records to a CSV file with a fixed header."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.rows: List[MetricsRow] = []
        with open(self.path, "w", newline="") as f:
            csv.writer(f).writerow(METRICS_HEADER)

    def write(self, row: MetricsRow) -> None:
        if self.rows and row.env_step <= self.rows[-1].env_step:
            raise ContractError(
                f"Metrics rows must increase in env_step ({row.env_step} after {self.rows[-1].env_step})"
            )
        if not 0.0 <= row.win_rate <= 1.0:
            raise ContractError(f"win_rate {row.win_rate} outside [0, 1]")
        values = asdict(row)
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([values[name] for name in METRICS_HEADER])
        self.rows.append(row)


def read_metrics(path: Path) -> List[MetricsRow]:
    types = {f.name: f.type for f in fields(MetricsRow)}
    with open(path, newline="") as f:
        return [
            MetricsRow(**{k: (int(v) if types[k] is int else float(v)) for k, v in record.items()})
            for record in csv.DictReader(f)
        ]


def _rss_mb() -> float:
    return psutil.Process().memory_info().rss / (1024 * 1024)


def _eval_points(learner: Learner) -> Iterator[Tuple[int, Optional[TrainUpdate]]]:
    """Train and yield (nominal step, latest update) at evaluation boundaries.

    Boundaries passed before the first gradient step, or several passed by a
    single episode, collapse into one point at the last of them.
    """
    interval = learner.run_config.eval_interval
    next_eval = interval
    last: Optional[TrainUpdate] = None
    reported: Optional[TrainUpdate] = None
    reported_step = 0
    for update in learner.train():
        last = update
        if learner.env_steps < next_eval:
            continue
        step = next_eval + (learner.env_steps - next_eval) // interval * interval
        if step > next_eval:
            get_logger().debug(f"Skipping evaluations at steps {next_eval}..{step - interval}; no update between them")
        yield step, update
        reported, reported_step = update, step
        next_eval = step + interval
    if learner.env_steps > reported_step and (last is None or last is not reported):
        yield learner.env_steps, last


def _checkpoint(learner: Learner) -> Checkpoint:
    return Checkpoint(
        params=learner.params.copy(),
        run_config=learner.run_config.to_dict(),
        env_step=learner.env_steps,
        optimizer=learner.optimizer,
    )


@dataclass
class TrainingSummary:
    out_dir: Path
    rows: List[MetricsRow] = field(default_factory=list)
    final_checkpoint: Optional[Path] = None
    env_steps: int = 0


def run_training(run_config: RunConfig, arena_config: ArenaConfig, out_dir: Path) -> TrainingSummary:
    """Train with periodic greedy evaluation, writing metrics.csv and checkpoints."""
    logger = get_logger()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ConfigManager().save_config(run_config.to_dict(), out_dir / "config.json")
    arena_config.save(out_dir / "arena.json")

    learner = Learner(run_config, arena_config)
    writer = MetricsWriter(out_dir / "metrics.csv")
    summary = TrainingSummary(out_dir=out_dir)
    logger.info(
        f"Training variant={run_config.variant} on {arena_config.name} "
        f"({arena_config.n_allies}v{arena_config.n_enemies}), seed={run_config.seed}, "
        f"{learner.params.num_parameters} parameters"
    )

    next_checkpoint = run_config.checkpoint_interval
    try:
        for step, update in _eval_points(learner):
            result = evaluate(
                learner.params,
                arena_config,
                run_config.eval_episodes,
                run_config.seed,
                net=learner.joint_q.agent_net,
            )
            metrics = update.metrics if update is not None else {}
            row = MetricsRow(
                env_step=step,
                episode=learner.episodes,
                loss=metrics.get("loss", float("nan")),
                q_tot_mean=metrics.get("q_tot_mean", float("nan")),
                win_rate=result.win_rate,
                mean_return=result.mean_return,
                mean_length=result.mean_length,
                epsilon=learner.epsilon,
            )
            writer.write(row)
            logger.info(
                f"step={step} win_rate={result.win_rate:.3f} return={result.mean_return:.3f} "
                f"length={result.mean_length:.1f} eps={learner.epsilon:.3f} rss={_rss_mb():.0f}MB"
            )
            if step >= next_checkpoint:
                save_checkpoint(_checkpoint(learner), out_dir / "latest.ckpt")
                logger.info(f"Checkpoint saved to {out_dir / 'latest.ckpt'}")
                while next_checkpoint <= step:
                    next_checkpoint += run_config.checkpoint_interval
    except TrainingDivergenceError as e:
        path = save_checkpoint(_checkpoint(learner), out_dir / "diverged.ckpt")
        logger.error(f"Training diverged at env_step={learner.env_steps}: {e}; state saved to {path}")
        raise

    summary.final_checkpoint = save_checkpoint(_checkpoint(learner), out_dir / "final.ckpt")
    summary.rows = writer.rows
    summary.env_steps = learner.env_steps
    logger.info(f"Training finished after {learner.env_steps} env steps; final checkpoint {summary.final_checkpoint}")
    return summary


@dataclass(frozen=True)
class SeedBand:
    mean: np.ndarray
    p25: np.ndarray
    p75: np.ndarray


def aggregate_seeds(curves: Sequence[Sequence[float]]) -> SeedBand:
    """Mean and 25th/75th percentiles per point, over the common curve length."""
    if not curves:
        raise ContractError("aggregate_seeds needs at least one curve")
    length = min(len(c) for c in curves)
    stacked = np.array([list(c)[:length] for c in curves], dtype=np.float64)
    return SeedBand(
        mean=stacked.mean(axis=0),
        p25=np.percentile(stacked, 25, axis=0),
        p75=np.percentile(stacked, 75, axis=0),
    )


@dataclass
class TransferTable:
    train_arena: str
    test_arena: str
    variant: str
    seeds: List[int]
    env_steps: List[int]
    train_win_rates: List[List[float]]
    test_win_rates: List[List[float]]
    param_updates: int = 0

    @property
    def test_band(self) -> SeedBand:
        return aggregate_seeds(self.test_win_rates)

    @property
    def train_band(self) -> SeedBand:
        return aggregate_seeds(self.train_win_rates)


def transfer_protocol(
    train_config: ArenaConfig,
    test_config: ArenaConfig,
    run_config: RunConfig,
    seeds: Sequence[int],
) -> TransferTable:
    """Train on one arena per seed and score the agent network zero-shot on another."""
    logger = get_logger()
    table = TransferTable(
        train_arena=train_config.name,
        test_arena=test_config.name,
        variant=run_config.variant,
        seeds=list(seeds),
        env_steps=[],
        train_win_rates=[],
        test_win_rates=[],
    )
    for seed in seeds:
        config = run_config.replace(seed=seed)
        learner = Learner(config, train_config)
        steps, train_curve, test_curve = [], [], []
        for step, _ in _eval_points(learner):
            agent_params = learner.params.subset(AGENT_PREFIX)
            agent_params.updates = 0
            own = evaluate(agent_params, train_config, config.eval_episodes, seed, net=learner.joint_q.agent_net)
            zero_shot = evaluate(agent_params, test_config, config.eval_episodes, seed, net=learner.joint_q.agent_net)
            table.param_updates += agent_params.updates
            steps.append(step)
            train_curve.append(own.win_rate)
            test_curve.append(zero_shot.win_rate)
            logger.info(
                f"seed={seed} step={step} {train_config.name}={own.win_rate:.3f} "
                f"{test_config.name}={zero_shot.win_rate:.3f}"
            )
        if len(steps) > len(table.env_steps):
            table.env_steps = steps
        table.train_win_rates.append(train_curve)
        table.test_win_rates.append(test_curve)
    return table
