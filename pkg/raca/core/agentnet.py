"""Shared recurrent agent Q-network with attention over visible entities.

Each agent's own features form the attention query; every visible entity row
is projected to a key and a value by the same weights, so the network takes
any number of entities. The attention output passes through one dense layer,
is joined with the population-invariant features and drives a GRU whose
state summarises the agent's history. A linear head scores every action slot.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from raca.core import numerics as nx
from raca.core.arena import (
    INVARIANT_WIDTH,
    N_BASE_ACTIONS,
    OWN_WIDTH,
    VARIANT_WIDTH,
    ObservationTriple,
)
from raca.core.numerics import GruParams, ParamStore, Tensor
from raca.utils.errors import ContractError, DimensionError

POOLING_MODES = ("attention", "mean")


@dataclass(frozen=True)
class AgentNetSpec:
    d_k: int = 64
    d_h: int = 64
    action_slots: int = 16
    pooling: str = "attention"

    @property
    def n_actions(self) -> int:
        return N_BASE_ACTIONS + self.action_slots

    @property
    def node_width(self) -> int:
        """Width of the per-agent features handed to the relation encoder."""
        return self.d_k + INVARIANT_WIDTH


@dataclass
class AgentStep:
    q_values: Tensor
    hidden: Tensor
    node_features: Tensor


def init_params(spec: AgentNetSpec, rng: np.random.Generator) -> ParamStore:
    d_k, d_h = spec.d_k, spec.d_h
    d_in = d_k + INVARIANT_WIDTH
    shapes = {
        "agent.h.query.w": ((OWN_WIDTH, d_k), OWN_WIDTH),
        "agent.h.query.b": ((d_k,), OWN_WIDTH),
        "agent.h.key.w": ((VARIANT_WIDTH, d_k), VARIANT_WIDTH),
        "agent.h.key.b": ((d_k,), VARIANT_WIDTH),
        "agent.h.value.w": ((VARIANT_WIDTH, d_k), VARIANT_WIDTH),
        "agent.h.value.b": ((d_k,), VARIANT_WIDTH),
        "agent.g.w": ((d_k, d_k), d_k),
        "agent.g.b": ((d_k,), d_k),
        "agent.rnn.w_x": ((d_in, 3 * d_h), d_h),
        "agent.rnn.w_h": ((d_h, 3 * d_h), d_h),
        "agent.rnn.b_x": ((3 * d_h,), d_h),
        "agent.rnn.b_h": ((3 * d_h,), d_h),
        "agent.q.w": ((d_h, spec.n_actions), d_h),
        "agent.q.b": ((spec.n_actions,), d_h),
    }
    return ParamStore(
        {name: nx.uniform_init(rng, fan_in, shape) for name, (shape, fan_in) in shapes.items()}
    )


def build_qkv(
    own: Tensor, variant: Tensor, params: Dict[str, Tensor]
) -> Tuple[Tensor, Tensor, Tensor]:
    """Project own features to a query row and entity rows to keys and values.

    ``own`` is [..., 5] and ``variant`` [..., m, 9]; the result is
    Q [..., 1, d_k], K and V [..., m, d_k].
    """
    if own.shape[-1] != params["agent.h.query.w"].shape[0]:
        raise DimensionError("own feature width", own.shape, params["agent.h.query.w"].shape)
    if variant.shape[-1] != params["agent.h.key.w"].shape[0]:
        raise DimensionError("entity feature width", variant.shape, params["agent.h.key.w"].shape)
    query = nx.linear(own, params["agent.h.query.w"], params["agent.h.query.b"])
    query = nx.reshape(query, own.shape[:-1] + (1, query.shape[-1]))
    if variant.shape[-2] == 0:
        empty = Tensor(np.zeros(variant.shape[:-1] + (query.shape[-1],)))
        return query, empty, empty
    key = nx.linear(variant, params["agent.h.key.w"], params["agent.h.key.b"])
    value = nx.linear(variant, params["agent.h.value.w"], params["agent.h.value.b"])
    return query, key, value


def attend(
    query: Tensor, key: Tensor, value: Tensor, mask: Optional[np.ndarray] = None
) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the unmasked rows; no rows gives zeros."""
    d_k = query.shape[-1]
    if key.shape[-1] != d_k or value.shape[-2] != key.shape[-2]:
        raise DimensionError("attention operand widths", query.shape, key.shape, value.shape)
    if key.shape[-2] == 0:
        return Tensor(np.zeros(query.shape))
    logits = nx.mul(nx.matmul(query, nx.transpose(key)), 1.0 / math.sqrt(d_k))
    row_mask = None if mask is None else np.asarray(mask, dtype=bool)[..., None, :]
    weights = nx.softmax_rows(logits, row_mask)
    return nx.matmul(weights, value)


def mean_pool(value: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Masked mean of value rows, shaped like attend()'s output."""
    m = value.shape[-2]
    if m == 0:
        return Tensor(np.zeros(value.shape[:-2] + (1, value.shape[-1])))
    if mask is None:
        mask = np.ones(value.shape[:-1], dtype=bool)
    keep = np.asarray(mask, dtype=np.float64)
    counts = keep.sum(axis=-1, keepdims=True)
    weights = np.divide(keep, counts, out=np.zeros_like(keep), where=counts > 0)
    return nx.matmul(Tensor(weights[..., None, :]), value)


def _gru(params: Dict[str, Tensor]) -> GruParams:
    return GruParams(
        w_x=params["agent.rnn.w_x"],
        w_h=params["agent.rnn.w_h"],
        b_x=params["agent.rnn.b_x"],
        b_h=params["agent.rnn.b_h"],
    )


class AgentNet:
    """Batched forward pass of the shared agent network."""

    def __init__(self, spec: AgentNetSpec):
        if spec.pooling not in POOLING_MODES:
            raise ValueError(f"Unknown pooling mode {spec.pooling!r}")
        self.spec = spec

    def initial_hidden(self, batch_shape: Sequence[int]) -> Tensor:
        return Tensor(np.zeros(tuple(batch_shape) + (self.spec.d_h,)))

    def check_arena(self, n_actions: int) -> None:
        if n_actions > self.spec.n_actions:
            raise DimensionError(
                f"Arena needs {n_actions} action slots but the agent network has "
                f"{self.spec.n_actions}; retrain with a larger action_slots",
                (n_actions,),
                (self.spec.n_actions,),
            )

    def forward(
        self,
        own: np.ndarray,
        variant: np.ndarray,
        variant_mask: np.ndarray,
        invariant: np.ndarray,
        hidden: Tensor,
        params: Dict[str, Tensor],
    ) -> AgentStep:
        """One step for a batch of agents.

        Shapes: own [B, 5], variant [B, M, 9], variant_mask [B, M],
        invariant [B, 6], hidden [B, d_h].
        """
        query, key, value = build_qkv(Tensor(own), Tensor(variant), params)
        if self.spec.pooling == "attention":
            pooled = attend(query, key, value, variant_mask)
        else:
            pooled = mean_pool(value, variant_mask)
        pooled = nx.reshape(pooled, pooled.shape[:-2] + (pooled.shape[-1],))
        embedding = nx.relu(nx.linear(pooled, params["agent.g.w"], params["agent.g.b"]))

        core_input = nx.concat([embedding, Tensor(invariant)], axis=-1)
        hidden_next = nx.gru_step(core_input, hidden, _gru(params))
        q_values = nx.linear(hidden_next, params["agent.q.w"], params["agent.q.b"])
        return AgentStep(q_values=q_values, hidden=hidden_next, node_features=core_input)


def pad_observations(
    observations: Sequence[ObservationTriple], max_rows: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Stack per-agent triples into (own, variant, variant_mask, invariant) arrays."""
    rows = max((obs.n_entities for obs in observations), default=0)
    if max_rows is not None:
        if rows > max_rows:
            raise DimensionError("more visible entities than padding allows", (rows,), (max_rows,))
        rows = max_rows
    n = len(observations)
    own = np.zeros((n, OWN_WIDTH))
    variant = np.zeros((n, rows, VARIANT_WIDTH))
    mask = np.zeros((n, rows), dtype=bool)
    invariant = np.zeros((n, INVARIANT_WIDTH))
    for i, obs in enumerate(observations):
        own[i] = obs.own
        invariant[i] = obs.invariant
        m = obs.n_entities
        variant[i, :m] = obs.variant
        mask[i, :m] = True
    return own, variant, mask, invariant


def pad_avail(avail: np.ndarray, n_actions: int) -> np.ndarray:
    """Widen an arena's availability mask to the network's action slots."""
    padded = np.zeros(avail.shape[:-1] + (n_actions,), dtype=bool)
    padded[..., : avail.shape[-1]] = avail
    return padded


def agent_q(
    obs: ObservationTriple,
    hidden: Tensor,
    params: ParamStore,
    net: AgentNet,
) -> Tuple[np.ndarray, Tensor]:
    """Q-values and next hidden state for a single agent."""
    own, variant, mask, invariant = pad_observations([obs])
    step = net.forward(own, variant, mask, invariant, nx.reshape(hidden, (1, -1)), params.constants())
    return step.q_values.data[0], nx.reshape(step.hidden, (hidden.shape[-1],))


def select_action(
    q_values: np.ndarray,
    mask: np.ndarray,
    epsilon: float,
    rng: np.random.Generator,
) -> int:
    """Epsilon-greedy over available actions; greedy ties go to the lowest index."""
    mask = np.asarray(mask, dtype=bool)
    available = np.flatnonzero(mask)
    if available.size == 0:
        raise ContractError("Availability mask admits no action")
    if epsilon > 0 and rng.random() < epsilon:
        return int(available[rng.integers(available.size)])
    masked = np.where(mask, q_values[: mask.shape[-1]], -np.inf)
    return int(np.argmax(masked))


def greedy_actions(q_values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked argmax along the last axis."""
    return np.argmax(np.where(mask, q_values, -np.inf), axis=-1)


def select_actions(
    q_values: np.ndarray,
    masks: np.ndarray,
    epsilon: float,
    rng: np.random.Generator,
) -> List[int]:
    return [select_action(q, m, epsilon, rng) for q, m in zip(q_values, masks)]
