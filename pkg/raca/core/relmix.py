"""Relation-aware mixing: visibility graph, GCN relation encoder, monotone mixer.

The GCN turns each agent's node features into one logit; a softmax across
agents gives relation weights w on the simplex. Agent utilities are rescaled
to n * w_i * Q_i before a QMIX-style mixer whose state-conditioned weights
pass through abs(), so Q_tot is nondecreasing in every Q_i.
"""

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from raca.core import numerics as nx
from raca.core.numerics import ParamStore, Tensor
from raca.utils.errors import DimensionError

RELATION_MODES = ("gcn", "uniform")
MIXER_MODES = ("qmix", "vdn")


@dataclass(frozen=True)
class VisibilityGraph:
    """Symmetric, zero-diagonal adjacency over the controlled agents."""

    adjacency: np.ndarray

    @property
    def n(self) -> int:
        return int(self.adjacency.shape[-1])


@dataclass(frozen=True)
class RelMixSpec:
    node_width: int
    n_agents: int
    state_dim: int
    d_gcn: int = 32
    d_mix: int = 32
    relation: str = "gcn"
    mixer: str = "qmix"


def build_adjacency(relation: np.ndarray) -> VisibilityGraph:
    """e_uv = 1 if u sees v or v sees u; works on [..., n, n] relations."""
    seen = np.asarray(relation, dtype=bool)
    symmetric = seen | np.swapaxes(seen, -1, -2)
    n = symmetric.shape[-1]
    symmetric = symmetric & ~np.eye(n, dtype=bool)
    return VisibilityGraph(adjacency=symmetric.astype(np.float64))


def normalize_adjacency(graph: VisibilityGraph) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    a = graph.adjacency
    a_tilde = a + np.eye(graph.n)
    inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=-1))
    return inv_sqrt[..., :, None] * a_tilde * inv_sqrt[..., None, :]


def init_gcn_params(spec: RelMixSpec, rng: np.random.Generator) -> ParamStore:
    d_x, d_g = spec.node_width, spec.d_gcn
    return ParamStore(
        {
            "gcn.w0": nx.uniform_init(rng, d_x, (d_x, d_g)),
            "gcn.w1": nx.uniform_init(rng, d_g + d_x, (d_g + d_x, d_g)),
            "gcn.w2": nx.uniform_init(rng, d_g + d_x, (d_g + d_x, 1)),
        }
    )


def gcn_forward(x: Tensor, a_hat: np.ndarray, params: Dict[str, Tensor]) -> Tensor:
    """Three graph convolutions with the input features re-joined at layers 1 and 2.

    x is [..., n, d]; returns one logit per node, [..., n, 1].
    """
    if x.shape[-1] != params["gcn.w0"].shape[0]:
        raise DimensionError("GCN node feature width", x.shape, params["gcn.w0"].shape)
    if a_hat.shape[-1] != x.shape[-2]:
        raise DimensionError("adjacency does not match node count", a_hat.shape, x.shape)
    propagate = Tensor(a_hat)
    h = nx.elu(nx.matmul(nx.matmul(propagate, x), params["gcn.w0"]))
    h = nx.elu(nx.matmul(nx.matmul(propagate, nx.concat([h, x], axis=-1)), params["gcn.w1"]))
    return nx.matmul(nx.matmul(propagate, nx.concat([h, x], axis=-1)), params["gcn.w2"])


def relation_weights(logits: Tensor) -> Tensor:
    """Softmax across agents of the per-node GCN outputs ([..., n, 1] or [..., n])."""
    if logits.shape[-1] == 1 and logits.ndim >= 2:
        logits = nx.reshape(logits, logits.shape[:-1])
    return nx.softmax_rows(logits)


def uniform_weights(batch_shape, n: int) -> Tensor:
    return Tensor(np.full(tuple(batch_shape) + (n,), 1.0 / n))


def init_mixer_params(spec: RelMixSpec, rng: np.random.Generator) -> ParamStore:
    s, n, d = spec.state_dim, spec.n_agents, spec.d_mix
    return ParamStore(
        {
            "mixer.hyper_w1.w": nx.uniform_init(rng, s, (s, n * d)),
            "mixer.hyper_w1.b": nx.uniform_init(rng, s, (n * d,)),
            "mixer.hyper_b1.w": nx.uniform_init(rng, s, (s, d)),
            "mixer.hyper_b1.b": nx.uniform_init(rng, s, (d,)),
            "mixer.hyper_w2.w": nx.uniform_init(rng, s, (s, d)),
            "mixer.hyper_w2.b": nx.uniform_init(rng, s, (d,)),
            "mixer.hyper_b2a.w": nx.uniform_init(rng, s, (s, d)),
            "mixer.hyper_b2a.b": nx.uniform_init(rng, s, (d,)),
            "mixer.hyper_b2b.w": nx.uniform_init(rng, d, (d, 1)),
            "mixer.hyper_b2b.b": nx.uniform_init(rng, d, (1,)),
        }
    )


def qmix_mix(q: Tensor, state: Tensor, params: Dict[str, Tensor]) -> Tensor:
    """Plain QMIX mixer; q is [B, n], state [B, S], result [B]."""
    n = q.shape[-1]
    s_width = params["mixer.hyper_w1.w"].shape[0]
    if state.shape[-1] != s_width:
        raise DimensionError("global state width differs from hypernetwork input", state.shape, (s_width,))
    d = params["mixer.hyper_b1.w"].shape[1]
    if params["mixer.hyper_w1.w"].shape[1] != n * d:
        raise DimensionError("agent count differs from mixer", q.shape, params["mixer.hyper_w1.w"].shape)
    batch = q.shape[:-1]

    w1 = nx.absolute(nx.linear(state, params["mixer.hyper_w1.w"], params["mixer.hyper_w1.b"]))
    w1 = nx.reshape(w1, batch + (n, d))
    b1 = nx.linear(state, params["mixer.hyper_b1.w"], params["mixer.hyper_b1.b"])
    w2 = nx.absolute(nx.linear(state, params["mixer.hyper_w2.w"], params["mixer.hyper_w2.b"]))
    b2 = nx.relu(nx.linear(state, params["mixer.hyper_b2a.w"], params["mixer.hyper_b2a.b"]))
    b2 = nx.linear(b2, params["mixer.hyper_b2b.w"], params["mixer.hyper_b2b.b"])

    q_row = nx.reshape(q, batch + (1, n))
    hidden = nx.elu(nx.add(nx.reshape(nx.matmul(q_row, w1), batch + (d,)), b1))
    q_tot = nx.reduce_sum(nx.mul(hidden, w2), axis=-1)
    return nx.add(q_tot, nx.reshape(b2, batch))


def mix(
    q: Tensor,
    weights: Tensor,
    state: Optional[Tensor],
    params: Dict[str, Tensor],
    mode: str = "qmix",
) -> Tensor:
    """Q_tot from chosen-action utilities q [B, n] and relation weights [B, n].

    Utilities are rescaled to n * w_i * q_i, so uniform weights reproduce the
    unweighted mixer exactly.
    """
    if weights.shape != q.shape:
        raise DimensionError("relation weights must match agent utilities", weights.shape, q.shape)
    n = q.shape[-1]
    scaled = nx.mul(nx.mul(weights, q), float(n))
    if mode == "vdn":
        return nx.reduce_sum(scaled, axis=-1)
    if mode != "qmix":
        raise ValueError(f"Unknown mixer mode {mode!r}")
    assert state is not None
    return qmix_mix(scaled, state, params)


class RelationMixer:
    """Relation encoder plus mixer for one variant."""

    def __init__(self, spec: RelMixSpec):
        if spec.relation not in RELATION_MODES:
            raise ValueError(f"Unknown relation mode {spec.relation!r}")
        if spec.mixer not in MIXER_MODES:
            raise ValueError(f"Unknown mixer mode {spec.mixer!r}")
        self.spec = spec

    def init_params(self, rng: np.random.Generator) -> ParamStore:
        params = ParamStore()
        if self.spec.relation == "gcn":
            params = params.merge(init_gcn_params(self.spec, rng))
        if self.spec.mixer == "qmix":
            params = params.merge(init_mixer_params(self.spec, rng))
        return params

    def weights(self, node_features: Tensor, relation: np.ndarray, params: Dict[str, Tensor]) -> Tensor:
        """Relation weights [B, n] from node features [B, n, d] and relations [B, n, n]."""
        batch = node_features.shape[:-2]
        n = node_features.shape[-2]
        if self.spec.relation == "uniform":
            return uniform_weights(batch, n)
        a_hat = normalize_adjacency(build_adjacency(relation))
        return relation_weights(gcn_forward(node_features, a_hat, params))

    def __call__(
        self,
        q: Tensor,
        node_features: Tensor,
        relation: np.ndarray,
        state: np.ndarray,
        params: Dict[str, Tensor],
    ) -> Tensor:
        weights = self.weights(node_features, relation, params)
        return mix(q, weights, Tensor(state), params, self.spec.mixer)
