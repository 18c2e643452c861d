"""Centralised TD training of the agent network, relation encoder and mixer.

Rollouts act from local observations only; the learner replays whole
episodes, unrolls the recurrent agents over padded batches and regresses
Q_tot on one-step targets from a periodically refreshed target network.
"""

from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, Iterator, List, Optional, Tuple

import numpy as np

from raca.config.manager import RunConfig
from raca.core import numerics as nx
from raca.core.agentnet import (
    AgentNet,
    AgentNetSpec,
    greedy_actions,
    pad_avail,
    pad_observations,
    select_actions,
)
from raca.core.agentnet import init_params as init_agent_params
from raca.core.arena import NO_OP, Arena, ArenaConfig
from raca.core.numerics import OptimizerState, ParamStore, Tape, Tensor
from raca.core.relmix import RelationMixer, RelMixSpec
from raca.utils.errors import (
    ConfigError,
    ContractError,
    NumericDomainError,
    TrainingDivergenceError,
)
from raca.utils.logger import get_logger


@dataclass
class EpisodeRecord:
    """One full episode; per-step arrays carry T + 1 entries (final observation last)."""

    own: np.ndarray  # [T+1, n, 5]
    variant: np.ndarray  # [T+1, n, M, 9]
    variant_mask: np.ndarray  # [T+1, n, M]
    invariant: np.ndarray  # [T+1, n, 6]
    avail: np.ndarray  # [T+1, n, A]
    relation: np.ndarray  # [T+1, n, n]
    state: np.ndarray  # [T+1, S]
    actions: np.ndarray  # [T, n]
    rewards: np.ndarray  # [T]
    terminated: np.ndarray  # [T]
    truncated: np.ndarray  # [T]
    won: bool = False

    @property
    def length(self) -> int:
        return int(self.actions.shape[0])

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())


@dataclass
class EpisodeBatch:
    """Episodes padded to a common length, with a validity mask over steps."""

    own: np.ndarray  # [B, T+1, n, 5]
    variant: np.ndarray
    variant_mask: np.ndarray
    invariant: np.ndarray
    avail: np.ndarray
    relation: np.ndarray
    state: np.ndarray  # [B, T+1, S]
    actions: np.ndarray  # [B, T, n]
    rewards: np.ndarray  # [B, T]
    terminated: np.ndarray
    truncated: np.ndarray
    mask: np.ndarray  # [B, T]

    @property
    def size(self) -> int:
        return int(self.actions.shape[0])

    @property
    def max_length(self) -> int:
        return int(self.actions.shape[1])

    @classmethod
    def from_episodes(cls, episodes: List[EpisodeRecord]) -> "EpisodeBatch":
        if not episodes:
            raise ContractError("Cannot batch zero episodes")
        horizon = max(ep.length for ep in episodes)

        def pad(arrays: List[np.ndarray], length: int, fill=0) -> np.ndarray:
            out = np.full((len(arrays), length) + arrays[0].shape[1:], fill, dtype=arrays[0].dtype)
            for b, arr in enumerate(arrays):
                out[b, : arr.shape[0]] = arr
            return out

        avail = pad([ep.avail for ep in episodes], horizon + 1, fill=False)
        # Padded steps expose no-op so greedy targets stay well defined
        empty = ~avail.any(axis=-1)
        avail[..., NO_OP] |= empty

        mask = np.zeros((len(episodes), horizon))
        for b, ep in enumerate(episodes):
            mask[b, : ep.length] = 1.0

        return cls(
            own=pad([ep.own for ep in episodes], horizon + 1),
            variant=pad([ep.variant for ep in episodes], horizon + 1),
            variant_mask=pad([ep.variant_mask for ep in episodes], horizon + 1, fill=False),
            invariant=pad([ep.invariant for ep in episodes], horizon + 1),
            avail=avail,
            relation=pad([ep.relation for ep in episodes], horizon + 1, fill=False),
            state=pad([ep.state for ep in episodes], horizon + 1),
            actions=pad([ep.actions for ep in episodes], horizon),
            rewards=pad([ep.rewards for ep in episodes], horizon),
            terminated=pad([ep.terminated for ep in episodes], horizon, fill=False),
            truncated=pad([ep.truncated for ep in episodes], horizon, fill=False),
            mask=mask,
        )


class ReplayBuffer:
    """FIFO store of whole episodes with uniform sampling."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 1:
            raise ConfigError("buffer_size", "must be at least 1")
        self.capacity = capacity
        self.rng = rng
        self._episodes: Deque[EpisodeRecord] = deque(maxlen=capacity)

    def add(self, episode: EpisodeRecord) -> None:
        self._episodes.append(episode)

    def __len__(self) -> int:
        return len(self._episodes)

    def can_sample(self, batch_size: int) -> bool:
        return len(self._episodes) >= batch_size

    def sample(self, batch_size: int) -> List[EpisodeRecord]:
        if not self.can_sample(batch_size):
            raise ContractError(
                f"Buffer holds {len(self._episodes)} episodes, need {batch_size}"
            )
        picks = self.rng.choice(len(self._episodes), size=batch_size, replace=False)
        return [self._episodes[int(i)] for i in picks]


class JointQ:
    """Agent network plus relation mixer for one ablation variant."""

    def __init__(self, agent_spec: AgentNetSpec, mix_spec: RelMixSpec):
        self.agent_net = AgentNet(agent_spec)
        self.mixer = RelationMixer(mix_spec)

    @classmethod
    def from_configs(cls, run_config: RunConfig, arena_config: ArenaConfig) -> "JointQ":
        agent_spec = AgentNetSpec(
            d_k=run_config.d_k,
            d_h=run_config.d_h,
            action_slots=run_config.action_slots,
            pooling=run_config.pooling,
        )
        mix_spec = RelMixSpec(
            node_width=agent_spec.node_width,
            n_agents=arena_config.n_allies,
            state_dim=arena_config.state_dim,
            d_gcn=run_config.d_gcn,
            d_mix=run_config.d_mix,
            relation=run_config.relation,
            mixer=run_config.mixer,
        )
        return cls(agent_spec, mix_spec)

    def init_params(self, rng: np.random.Generator) -> ParamStore:
        agent = init_agent_params(self.agent_net.spec, rng)
        return agent.merge(self.mixer.init_params(rng))

    def unroll(
        self, batch: EpisodeBatch, params: Dict[str, Tensor]
    ) -> Tuple[List[Tensor], List[Tensor]]:
        """Per-step Q-values [B, n, A] and node features [B, n, d] over T + 1 steps."""
        b, steps, n = batch.own.shape[:3]
        hidden = self.agent_net.initial_hidden((b * n,))
        q_steps: List[Tensor] = []
        feature_steps: List[Tensor] = []
        for t in range(steps):
            out = self.agent_net.forward(
                batch.own[:, t].reshape(b * n, -1),
                batch.variant[:, t].reshape((b * n,) + batch.variant.shape[3:]),
                batch.variant_mask[:, t].reshape(b * n, -1),
                batch.invariant[:, t].reshape(b * n, -1),
                hidden,
                params,
            )
            hidden = out.hidden
            q_steps.append(nx.reshape(out.q_values, (b, n, -1)))
            feature_steps.append(nx.reshape(out.node_features, (b, n, -1)))
        return q_steps, feature_steps

    def q_tot(
        self,
        chosen: List[Tensor],
        features: List[Tensor],
        relation: np.ndarray,
        state: np.ndarray,
        params: Dict[str, Tensor],
    ) -> Tensor:
        """Mixed value [B, T] from per-step chosen utilities and node features."""
        b, steps = relation.shape[:2]
        n = relation.shape[-1]
        q = nx.reshape(nx.stack(chosen, axis=1), (b * steps, n))
        x = nx.reshape(nx.stack(features, axis=1), (b * steps, n, -1))
        mixed = self.mixer(
            q,
            x,
            relation.reshape(b * steps, n, n),
            state.reshape(b * steps, -1),
            params,
        )
        return nx.reshape(mixed, (b, steps))


@dataclass
class TdLossResult:
    loss: Tensor
    q_tot_mean: float
    target_mean: float


def td_loss(
    batch: EpisodeBatch,
    joint_q: JointQ,
    params: ParamStore,
    target_params: ParamStore,
    gamma: float,
    tape: Optional[Tape] = None,
    bootstrap_truncated: bool = False,
) -> TdLossResult:
    """Masked mean squared TD error against y = r + gamma * Q_tot(tau', u*; target).

    y = r on every terminal step, the max_steps cut-off included. With
    ``bootstrap_truncated`` the cut-off steps bootstrap like any other.
    """
    if not 0.0 <= gamma < 1.0:
        raise ConfigError("gamma", "must lie in [0, 1)")
    horizon = batch.max_length

    live = params.watch(tape) if tape is not None else params.constants()
    q_steps, features = joint_q.unroll(batch, live)
    chosen = [nx.gather(q_steps[t], batch.actions[:, t]) for t in range(horizon)]
    q_tot = joint_q.q_tot(
        chosen, features[:horizon], batch.relation[:, :horizon], batch.state[:, :horizon], live
    )

    frozen = target_params.constants()
    target_q, target_features = joint_q.unroll(batch, frozen)
    target_chosen = []
    for t in range(1, horizon + 1):
        best = greedy_actions(target_q[t].data, batch.avail[:, t])
        target_chosen.append(nx.gather(target_q[t], best))
    next_q_tot = joint_q.q_tot(
        target_chosen,
        target_features[1:],
        batch.relation[:, 1:],
        batch.state[:, 1:],
        frozen,
    ).data

    done = batch.terminated & ~batch.truncated if bootstrap_truncated else batch.terminated
    targets = batch.rewards + gamma * (1.0 - done) * next_q_tot

    valid = batch.mask
    count = valid.sum()
    error = nx.sub(q_tot, Tensor(targets))
    loss = nx.mul(nx.reduce_sum(nx.mul(nx.square(error), valid)), 1.0 / count)
    return TdLossResult(
        loss=loss,
        q_tot_mean=float((q_tot.data * valid).sum() / count),
        target_mean=float((targets * valid).sum() / count),
    )


def run_episode(
    arena: Arena,
    net: AgentNet,
    params: ParamStore,
    epsilon: float,
    rng: np.random.Generator,
    seed: int = 0,
) -> EpisodeRecord:
    """Roll out one episode with decentralised epsilon-greedy agents."""
    config = arena.config
    net.check_arena(config.n_actions)
    consts = params.subset("agent.").constants()
    n, rows, n_actions = config.n_allies, config.max_variant_rows, net.spec.n_actions

    state, observations, avail = arena.reset(seed)
    hidden = net.initial_hidden((n,))
    own, variant, vmask, invariant = [], [], [], []
    avails, relations, states = [], [], []
    actions, rewards, terminated, truncated = [], [], [], []
    won = False

    while True:
        o, v, m, i = pad_observations(observations, rows)
        own.append(o)
        variant.append(v)
        vmask.append(m)
        invariant.append(i)
        avails.append(pad_avail(avail, n_actions))
        relations.append(arena.ally_visibility())
        states.append(state)
        if arena.done:
            break

        out = net.forward(o, v, m, i, hidden, consts)
        hidden = out.hidden
        joint = select_actions(out.q_values.data, avail, epsilon, rng)
        result = arena.step(joint)

        actions.append(joint)
        rewards.append(result.reward)
        terminated.append(result.terminated)
        truncated.append(result.truncated)
        won = result.won
        state, observations, avail = result.state, result.observations, result.avail

    return EpisodeRecord(
        own=np.array(own),
        variant=np.array(variant),
        variant_mask=np.array(vmask),
        invariant=np.array(invariant),
        avail=np.array(avails),
        relation=np.array(relations),
        state=np.array(states),
        actions=np.array(actions, dtype=np.int64).reshape(-1, n),
        rewards=np.array(rewards, dtype=np.float64),
        terminated=np.array(terminated, dtype=bool),
        truncated=np.array(truncated, dtype=bool),
        won=won,
    )


@dataclass
class TrainUpdate:
    """One gradient step, as emitted by Learner.train()."""

    env_step: int
    episode: int
    params: ParamStore
    metrics: Dict[str, float] = field(default_factory=dict)


class Learner:
    """Owns parameters, target copy, optimiser state and the replay buffer."""

    def __init__(self, run_config: RunConfig, arena_config: ArenaConfig):
        self.run_config = run_config
        self.arena_config = arena_config
        self.logger = get_logger()
        self.rng = np.random.default_rng(run_config.seed)
        self.joint_q = JointQ.from_configs(run_config, arena_config)
        self.joint_q.agent_net.check_arena(arena_config.n_actions)
        self.params = self.joint_q.init_params(self.rng)
        self.target_params = self.params.copy()
        self.optimizer = OptimizerState.for_params(
            self.params, lr=run_config.lr, alpha=run_config.rms_alpha, eps=run_config.rms_eps
        )
        self.buffer = ReplayBuffer(run_config.buffer_size, self.rng)
        self.arena = Arena(arena_config)
        self.env_steps = 0
        self.episodes = 0
        self.target_refreshes = 0

    @property
    def epsilon(self) -> float:
        cfg = self.run_config
        fraction = min(1.0, self.env_steps / cfg.epsilon_anneal_steps)
        return cfg.epsilon_start + fraction * (cfg.epsilon_finish - cfg.epsilon_start)

    def refresh_target(self) -> None:
        self.target_params = self.params.copy()
        self.target_refreshes += 1
        self.logger.debug(f"Target network refreshed at episode {self.episodes}")

    def collect(self) -> EpisodeRecord:
        seed = int(self.rng.integers(2**31 - 1))
        episode = run_episode(
            self.arena, self.joint_q.agent_net, self.params, self.epsilon, self.rng, seed
        )
        self.buffer.add(episode)
        self.env_steps += episode.length
        self.episodes += 1
        if self.episodes % self.run_config.target_interval == 0:
            self.refresh_target()
        return episode

    def update(self, episodes: List[EpisodeRecord]) -> Dict[str, float]:
        """One clipped RMSProp step on the TD loss of ``episodes``."""
        tape = Tape()
        batch = EpisodeBatch.from_episodes(episodes)
        try:
            result = td_loss(
                batch,
                self.joint_q,
                self.params,
                self.target_params,
                self.run_config.gamma,
                tape,
                bootstrap_truncated=self.run_config.bootstrap_truncated,
            )
        except NumericDomainError as e:
            raise TrainingDivergenceError(f"Non-finite values in TD loss: {e}") from e
        loss = result.loss.item()
        if not np.isfinite(loss):
            raise TrainingDivergenceError(f"TD loss became {loss}")

        grads = nx.backward(tape, result.loss)
        grads, grad_norm = nx.clip_grad_norm(grads, self.run_config.grad_clip)
        nx.rmsprop_update(self.params, grads, self.optimizer)
        return {
            "loss": loss,
            "grad_norm": grad_norm,
            "q_tot_mean": result.q_tot_mean,
            "target_mean": result.target_mean,
        }

    def train(self, total_steps: Optional[int] = None) -> Iterator[TrainUpdate]:
        """Collect an episode, then take one gradient step once the buffer allows."""
        limit = self.run_config.total_steps if total_steps is None else total_steps
        while self.env_steps < limit:
            episode = self.collect()
            if not self.buffer.can_sample(self.run_config.batch_size):
                continue
            metrics = self.update(self.buffer.sample(self.run_config.batch_size))
            metrics.update(
                epsilon=self.epsilon,
                episode_return=episode.episode_return,
                episode_length=float(episode.length),
                won=float(episode.won),
            )
            self.logger.debug(
                f"step={self.env_steps} episode={self.episodes} loss={metrics['loss']:.5f} "
                f"q_tot={metrics['q_tot_mean']:.3f} eps={metrics['epsilon']:.3f}"
            )
            yield TrainUpdate(
                env_step=self.env_steps,
                episode=self.episodes,
                params=self.params.copy(),
                metrics=metrics,
            )
