"""Property checks behind ``raca selftest``; the test suite calls them too."""

import itertools
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from raca.core import numerics as nx
from raca.core.agentnet import AgentNet, AgentNetSpec, attend, build_qkv, init_params
from raca.core.arena import INVARIANT_WIDTH, MAX_TEAM_SIZE, OWN_WIDTH, VARIANT_WIDTH
from raca.core.numerics import GruParams, Tensor
from raca.core.relmix import (
    RelationMixer,
    RelMixSpec,
    build_adjacency,
    gcn_forward,
    init_mixer_params,
    mix,
    normalize_adjacency,
    qmix_mix,
    relation_weights,
    uniform_weights,
)
from raca.utils.logger import get_logger

GRAD_TOLERANCE = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    detail: str = ""


def _weighted_sum(out: Tensor, rng_weights: np.ndarray) -> Tensor:
    return nx.reduce_sum(nx.mul(out, rng_weights))


def _grad_case(name: str, build: Callable[[np.random.Generator], tuple], instances: int, rng) -> CheckResult:
    worst = 0.0
    for _ in range(instances):
        fn, inputs = build(rng)
        worst = max(worst, nx.gradcheck(fn, inputs))
    return CheckResult(
        name=f"grad/{name}",
        passed=worst < GRAD_TOLERANCE,
        value=worst,
        detail=f"max relative error over {instances} instances",
    )


def _linear_case(rng):
    c = rng.normal(size=(3, 2))
    inputs = {"x": rng.normal(size=(3, 4)), "w": rng.normal(size=(4, 2)), "b": rng.normal(size=(2,))}
    return (lambda t: _weighted_sum(nx.linear(t["x"], t["w"], t["b"]), c)), inputs


def _gru_case(rng):
    c = rng.normal(size=(2, 4))
    inputs = {
        "x": rng.normal(size=(2, 3)),
        "h": rng.normal(size=(2, 4)),
        "w_x": rng.normal(scale=0.5, size=(3, 12)),
        "w_h": rng.normal(scale=0.5, size=(4, 12)),
        "b_x": rng.normal(scale=0.5, size=(12,)),
        "b_h": rng.normal(scale=0.5, size=(12,)),
    }

    def fn(t):
        params = GruParams(w_x=t["w_x"], w_h=t["w_h"], b_x=t["b_x"], b_h=t["b_h"])
        return _weighted_sum(nx.gru_step(t["x"], t["h"], params), c)

    return fn, inputs


def _softmax_case(rng):
    c = rng.normal(size=(3, 5))
    return (lambda t: _weighted_sum(nx.softmax_rows(t["m"]), c)), {"m": rng.normal(size=(3, 5))}


def _attention_case(rng):
    d_k, m = 4, 3
    mask = rng.random((2, m)) < 0.7
    mask[:, 0] = True
    c = rng.normal(size=(2, 1, d_k))
    inputs = {
        "own": rng.normal(size=(2, OWN_WIDTH)),
        "variant": rng.normal(size=(2, m, VARIANT_WIDTH)),
        "agent.h.query.w": rng.normal(scale=0.5, size=(OWN_WIDTH, d_k)),
        "agent.h.query.b": rng.normal(scale=0.5, size=(d_k,)),
        "agent.h.key.w": rng.normal(scale=0.5, size=(VARIANT_WIDTH, d_k)),
        "agent.h.key.b": rng.normal(scale=0.5, size=(d_k,)),
        "agent.h.value.w": rng.normal(scale=0.5, size=(VARIANT_WIDTH, d_k)),
        "agent.h.value.b": rng.normal(scale=0.5, size=(d_k,)),
    }

    def fn(t):
        query, key, value = build_qkv(t["own"], t["variant"], t)
        return _weighted_sum(attend(query, key, value, mask), c)

    return fn, inputs


def _gcn_case(rng):
    n, d_x, d_g = 4, 3, 2
    a_hat = normalize_adjacency(build_adjacency(rng.random((n, n)) < 0.5))
    c = rng.normal(size=(n,))
    inputs = {
        "x": rng.normal(size=(n, d_x)),
        "gcn.w0": rng.normal(size=(d_x, d_g)),
        "gcn.w1": rng.normal(size=(d_g + d_x, d_g)),
        "gcn.w2": rng.normal(size=(d_g + d_x, 1)),
    }
    return (lambda t: _weighted_sum(relation_weights(gcn_forward(t["x"], a_hat, t)), c)), inputs


def _mixer_case(rng):
    spec = RelMixSpec(node_width=3, n_agents=3, state_dim=4, d_mix=2)
    inputs = {name: value for name, value in init_mixer_params(spec, rng).items()}
    inputs["q"] = rng.normal(size=(2, 3))
    inputs["state"] = rng.normal(size=(2, 4))
    c = rng.normal(size=(2,))
    return (lambda t: _weighted_sum(qmix_mix(t["q"], t["state"], t), c)), inputs


GRAD_CASES: Dict[str, Callable] = {
    "linear": _linear_case,
    "gru": _gru_case,
    "softmax": _softmax_case,
    "attention": _attention_case,
    "gcn": _gcn_case,
    "mixer": _mixer_case,
}


def check_gradients(instances: int = 20, seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    return [_grad_case(name, build, instances, rng) for name, build in GRAD_CASES.items()]


def _normalized_oracle(relation: np.ndarray) -> np.ndarray:
    """Entrywise D^-1/2 (A + I) D^-1/2 for a single directed relation."""
    n = relation.shape[0]
    a = np.zeros((n, n))
    for u in range(n):
        for v in range(n):
            if u != v and (relation[u, v] or relation[v, u]):
                a[u, v] = 1.0
    a_tilde = a + np.eye(n)
    degree = a_tilde.sum(axis=1)
    out = np.zeros((n, n))
    for u in range(n):
        for v in range(n):
            out[u, v] = a_tilde[u, v] / np.sqrt(degree[u] * degree[v])
    return out


def check_adjacency(max_agents: int = 4) -> List[CheckResult]:
    """Every directed relation on up to ``max_agents`` agents against the entrywise formula."""
    results = []
    for n in range(1, max_agents + 1):
        pairs = [(u, v) for u in range(n) for v in range(n) if u != v]
        relations = np.zeros((2 ** len(pairs), n, n), dtype=bool)
        for g, bits in enumerate(itertools.product((False, True), repeat=len(pairs))):
            for (u, v), bit in zip(pairs, bits):
                relations[g, u, v] = bit
        batched = normalize_adjacency(build_adjacency(relations))
        worst = max(float(np.max(np.abs(batched[g] - _normalized_oracle(relations[g])))) for g in range(len(relations)))
        symmetric = bool(np.allclose(batched, np.swapaxes(batched, -1, -2)))
        results.append(
            CheckResult(
                name=f"adjacency/n={n}",
                passed=worst < 1e-12 and symmetric,
                value=worst,
                detail=f"{len(relations)} relations",
            )
        )
    return results


def _random_mixer(rng, n: int, node_width: int = 5, state_dim: int = 6, relation: str = "gcn"):
    spec = RelMixSpec(node_width=node_width, n_agents=n, state_dim=state_dim, d_gcn=4, d_mix=4, relation=relation)
    mixer = RelationMixer(spec)
    params = mixer.init_params(rng).constants()
    return mixer, params


def check_monotonicity(instances: int = 50, seed: int = 0, step: float = 1e-5) -> CheckResult:
    """Finite-difference dQ_tot/dQ_i is never negative."""
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(instances):
        n = int(rng.integers(2, 6))
        mixer, params = _random_mixer(rng, n)
        x = Tensor(rng.normal(size=(1, n, 5)))
        relation = rng.random((1, n, n)) < 0.5
        state = rng.normal(size=(1, 6))
        q = rng.normal(size=(1, n)) * 3.0
        for i in range(n):
            up, down = q.copy(), q.copy()
            up[0, i] += step
            down[0, i] -= step
            slope = (
                mixer(Tensor(up), x, relation, state, params).item()
                - mixer(Tensor(down), x, relation, state, params).item()
            ) / (2 * step)
            worst = min(worst, slope)
    return CheckResult(name="mixer/monotone", passed=worst >= -1e-6, value=float(worst), detail="smallest slope")


def check_igm(instances: int = 20, seed: int = 0, n_agents: int = 3, n_actions: int = 4) -> CheckResult:
    """Per-agent greedy actions maximise Q_tot over every joint action."""
    rng = np.random.default_rng(seed)
    worst_gap = 0.0
    joints = np.array(list(itertools.product(range(n_actions), repeat=n_agents)))
    rows = np.arange(n_agents)
    for _ in range(instances):
        mixer, params = _random_mixer(rng, n_agents)
        utilities = rng.normal(size=(n_agents, n_actions))
        x = np.repeat(rng.normal(size=(1, n_agents, 5)), len(joints), axis=0)
        relation = np.repeat(rng.random((1, n_agents, n_agents)) < 0.5, len(joints), axis=0)
        state = np.repeat(rng.normal(size=(1, 6)), len(joints), axis=0)
        q = utilities[rows, joints]
        q_tot = mixer(Tensor(q), Tensor(x), relation, state, params).data
        greedy = tuple(np.argmax(utilities, axis=1))
        greedy_index = next(k for k, joint in enumerate(joints) if tuple(joint) == greedy)
        worst_gap = max(worst_gap, float(q_tot.max() - q_tot[greedy_index]))
    return CheckResult(
        name="mixer/igm",
        passed=worst_gap <= 1e-9,
        value=worst_gap,
        detail=f"{len(joints)} joint actions per instance",
    )


def check_qmix_reduction(instances: int = 20, seed: int = 0) -> CheckResult:
    """Uniform relation weights reproduce the plain mixer."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(1, 7))
        spec = RelMixSpec(node_width=3, n_agents=n, state_dim=5, d_mix=4)
        params = init_mixer_params(spec, rng).constants()
        q = Tensor(rng.normal(size=(4, n)))
        state = Tensor(rng.normal(size=(4, 5)))
        weighted = mix(q, uniform_weights((4,), n), state, params, "qmix").data
        plain = qmix_mix(q, state, params).data
        additive = mix(q, uniform_weights((4,), n), None, params, "vdn").data
        worst = max(worst, float(np.max(np.abs(weighted - plain))), float(np.max(np.abs(additive - q.data.sum(-1)))))
    return CheckResult(name="mixer/qmix_reduction", passed=worst <= 1e-12, value=worst)


def check_invariance(seed: int = 0, pooling: str = "attention") -> List[CheckResult]:
    """Entity-order invariance and any-team-size operation of the agent network."""
    rng = np.random.default_rng(seed)
    spec = AgentNetSpec(d_k=8, d_h=8, pooling=pooling)
    net = AgentNet(spec)
    params = init_params(spec, rng)
    consts = params.constants()
    count = params.num_parameters

    m = 6
    own = rng.normal(size=(1, OWN_WIDTH))
    variant = rng.normal(size=(1, m, VARIANT_WIDTH))
    mask = np.ones((1, m), dtype=bool)
    invariant = rng.normal(size=(1, INVARIANT_WIDTH))
    hidden = Tensor(rng.normal(size=(1, spec.d_h)))
    base = net.forward(own, variant, mask, invariant, hidden, consts).q_values.data
    worst_perm = 0.0
    for _ in range(10):
        order = rng.permutation(m)
        permuted = net.forward(own, variant[:, order], mask, invariant, hidden, consts).q_values.data
        worst_perm = max(worst_perm, float(np.max(np.abs(permuted - base))))

    sizes_ok = True
    for teammates in range(1, MAX_TEAM_SIZE + 1):
        rows = teammates - 1 + teammates
        out = net.forward(
            own,
            rng.normal(size=(1, rows, VARIANT_WIDTH)),
            np.ones((1, rows), dtype=bool),
            invariant,
            net.initial_hidden((1,)),
            consts,
        )
        sizes_ok &= out.q_values.shape == (1, spec.n_actions) and bool(np.all(np.isfinite(out.q_values.data)))
    sizes_ok &= init_params(spec, np.random.default_rng(seed)).num_parameters == count

    mixer, mix_params = _random_mixer(rng, 5, node_width=spec.node_width)
    x = rng.normal(size=(1, 5, spec.node_width))
    relation = rng.random((1, 5, 5)) < 0.5
    weights = mixer.weights(Tensor(x), relation, mix_params).data
    order = rng.permutation(5)
    shuffled = mixer.weights(Tensor(x[:, order]), relation[:, order][:, :, order], mix_params).data
    worst_equiv = float(np.max(np.abs(shuffled - weights[:, order])))

    return [
        CheckResult(name=f"agentnet/{pooling}/permutation", passed=worst_perm < 1e-9, value=worst_perm),
        CheckResult(
            name=f"agentnet/{pooling}/population",
            passed=sizes_ok,
            value=float(count),
            detail=f"team sizes 1..{MAX_TEAM_SIZE}",
        ),
        CheckResult(name="relmix/equivariance", passed=worst_equiv < 1e-9, value=worst_equiv),
    ]


SUITES = ("gradients", "adjacency", "monotonicity", "igm", "qmix_reduction", "invariance")


def run_selftest(
    suites: Optional[Sequence[str]] = None, instances: int = 20, seed: int = 0
) -> List[CheckResult]:
    logger = get_logger()
    chosen = list(suites) if suites else list(SUITES)
    unknown = sorted(set(chosen) - set(SUITES))
    if unknown:
        raise ValueError(f"Unknown selftest suites: {unknown}")

    results: List[CheckResult] = []
    for suite in chosen:
        if suite == "gradients":
            results.extend(check_gradients(instances, seed))
        elif suite == "adjacency":
            results.extend(check_adjacency())
        elif suite == "monotonicity":
            results.append(check_monotonicity(instances, seed))
        elif suite == "igm":
            results.append(check_igm(instances, seed))
        elif suite == "qmix_reduction":
            results.append(check_qmix_reduction(instances, seed))
        elif suite == "invariance":
            results.extend(check_invariance(seed, "attention"))
            results.extend(check_invariance(seed, "mean")[:2])
    for result in results:
        status = "ok" if result.passed else "FAILED"
        logger.debug(f"{result.name}: {status} ({result.value:.3g}) {result.detail}")
    return results
