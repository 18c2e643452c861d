"""Grid combat arena: a small, SMAC-like cooperative Dec-POMDP.

Allies are controlled by learners, enemies follow a scripted attack-nearest
policy. Every unit type exposes the same feature layout (shield slot included,
zero when the type has no shield) so one agent network serves any team mix.
"""

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import IO, Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from raca.utils.errors import ConfigError, ContractError
from raca.utils.logger import get_logger

UNIT_TYPES = ("ranger", "bruiser", "medic")

# Stats applied when a unit entry names only its type
DEFAULT_UNIT_STATS: Dict[str, Dict[str, float]] = {
    "ranger": {
        "max_health": 45.0,
        "max_shield": 0.0,
        "attack_range": 6.0,
        "damage_or_heal": 6.0,
        "sight_range": 9.0,
    },
    "bruiser": {
        "max_health": 100.0,
        "max_shield": 50.0,
        "attack_range": 1.5,
        "damage_or_heal": 8.0,
        "sight_range": 9.0,
    },
    "medic": {
        "max_health": 80.0,
        "max_shield": 0.0,
        "attack_range": 4.0,
        "damage_or_heal": 9.0,
        "sight_range": 9.0,
    },
}

NO_OP, STOP, MOVE_N, MOVE_S, MOVE_E, MOVE_W = range(6)
N_BASE_ACTIONS = 6
MOVES: Dict[int, Tuple[int, int]] = {
    MOVE_N: (0, 1),
    MOVE_S: (0, -1),
    MOVE_E: (1, 0),
    MOVE_W: (-1, 0),
}

OWN_WIDTH = 2 + len(UNIT_TYPES)
VARIANT_WIDTH = 6 + len(UNIT_TYPES)
INVARIANT_WIDTH = 4 + 2
STATE_UNIT_WIDTH = 2 + len(UNIT_TYPES) + 2

MAX_TEAM_SIZE = 16


@dataclass(frozen=True)
class UnitSpec:
    """Static description of one unit."""

    type_id: str
    max_health: float
    max_shield: float
    attack_range: float
    damage_or_heal: float
    sight_range: float
    move_step: int = 1
    initial_health_frac: float = 1.0

    @classmethod
    def of_type(cls, type_id: str, **overrides: Any) -> "UnitSpec":
        if type_id not in DEFAULT_UNIT_STATS:
            raise ConfigError("type_id", f"unknown unit type {type_id!r}")
        stats: Dict[str, Any] = dict(DEFAULT_UNIT_STATS[type_id])
        stats.update(overrides)
        return cls(type_id=type_id, **stats)

    @property
    def is_healer(self) -> bool:
        return self.type_id == "medic"

    def type_one_hot(self) -> np.ndarray:
        onehot = np.zeros(len(UNIT_TYPES))
        onehot[UNIT_TYPES.index(self.type_id)] = 1.0
        return onehot

    def validate(self, path: str) -> None:
        if self.type_id not in UNIT_TYPES:
            raise ConfigError(f"{path}.type_id", f"unknown unit type {self.type_id!r}")
        if self.max_health <= 0:
            raise ConfigError(f"{path}.max_health", "must be positive")
        if self.max_shield < 0:
            raise ConfigError(f"{path}.max_shield", "must be non-negative")
        if self.attack_range <= 0:
            raise ConfigError(f"{path}.attack_range", "must be positive")
        if self.sight_range < self.attack_range:
            raise ConfigError(f"{path}.sight_range", "must be at least attack_range")
        if self.damage_or_heal < 0:
            raise ConfigError(f"{path}.damage_or_heal", "must be non-negative")
        if self.move_step != 1:
            raise ConfigError(f"{path}.move_step", "only single-cell moves are supported")
        if not 0.0 <= self.initial_health_frac <= 1.0:
            raise ConfigError(f"{path}.initial_health_frac", "must lie in [0, 1]")


Zone = Tuple[int, int, int, int]


@dataclass(frozen=True)
class SpawnRule:
    """Fixed coordinates, or uniform cells inside inclusive (x0, y0, x1, y1) zones."""

    mode: str = "fixed"
    ally_positions: Tuple[Tuple[int, int], ...] = ()
    enemy_positions: Tuple[Tuple[int, int], ...] = ()
    ally_zone: Optional[Zone] = None
    enemy_zone: Optional[Zone] = None


@dataclass(frozen=True)
class RewardSpec:
    damage_weight: float = 1.0
    kill_bonus: float = 10.0
    win_bonus: float = 200.0


@dataclass(frozen=True)
class ArenaConfig:
    """Full scenario description; serialised as JSON."""

    allies: Tuple[UnitSpec, ...]
    enemies: Tuple[UnitSpec, ...]
    spawn: SpawnRule = field(default_factory=SpawnRule)
    name: str = "arena"
    width: int = 32
    height: int = 32
    max_steps: int = 100
    opponent_script: str = "attack_nearest"
    reward: RewardSpec = field(default_factory=RewardSpec)

    @property
    def n_allies(self) -> int:
        return len(self.allies)

    @property
    def n_enemies(self) -> int:
        return len(self.enemies)

    @property
    def n_actions(self) -> int:
        return N_BASE_ACTIONS + self.n_enemies

    @property
    def max_variant_rows(self) -> int:
        return self.n_allies - 1 + self.n_enemies

    @property
    def state_dim(self) -> int:
        return STATE_UNIT_WIDTH * (self.n_allies + self.n_enemies)

    @property
    def reward_scale(self) -> float:
        """Reward normaliser: total enemy max health plus every kill and the win bonus.

        Shields are left out, so returns on shielded maps can exceed 1.
        """
        return (
            self.reward.damage_weight * sum(u.max_health for u in self.enemies)
            + self.reward.kill_bonus * self.n_enemies
            + self.reward.win_bonus
        )

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ConfigError("width", "grid extents must be positive")
        if not 1 <= self.n_allies <= MAX_TEAM_SIZE:
            raise ConfigError("allies", f"team size must lie in [1, {MAX_TEAM_SIZE}]")
        if not 1 <= self.n_enemies <= MAX_TEAM_SIZE:
            raise ConfigError("enemies", f"team size must lie in [1, {MAX_TEAM_SIZE}]")
        if self.max_steps < 1:
            raise ConfigError("max_steps", "must be at least 1")
        if self.opponent_script != "attack_nearest":
            raise ConfigError("opponent_script", f"unknown script {self.opponent_script!r}")
        for i, unit in enumerate(self.allies):
            unit.validate(f"allies[{i}]")
        for i, unit in enumerate(self.enemies):
            unit.validate(f"enemies[{i}]")
        self._validate_spawn()

    def _validate_spawn(self) -> None:
        spawn = self.spawn
        if spawn.mode == "fixed":
            if len(spawn.ally_positions) != self.n_allies:
                raise ConfigError("spawn.ally_positions", "need one position per ally")
            if len(spawn.enemy_positions) != self.n_enemies:
                raise ConfigError("spawn.enemy_positions", "need one position per enemy")
            cells = list(spawn.ally_positions) + list(spawn.enemy_positions)
            for x, y in cells:
                if not (0 <= x < self.width and 0 <= y < self.height):
                    raise ConfigError("spawn", f"position {(x, y)} is off the grid")
            if len(set(cells)) != len(cells):
                raise ConfigError("spawn", "spawn positions must be distinct")
        elif spawn.mode == "zones":
            for label, zone, count in (
                ("spawn.ally_zone", spawn.ally_zone, self.n_allies),
                ("spawn.enemy_zone", spawn.enemy_zone, self.n_enemies),
            ):
                if zone is None:
                    raise ConfigError(label, "required when mode is 'zones'")
                x0, y0, x1, y1 = zone
                if not (0 <= x0 <= x1 < self.width and 0 <= y0 <= y1 < self.height):
                    raise ConfigError(label, f"zone {zone} is off the grid")
                if (x1 - x0 + 1) * (y1 - y0 + 1) < count:
                    raise ConfigError(label, "zone has fewer cells than units")
        else:
            raise ConfigError("spawn.mode", f"unknown spawn mode {spawn.mode!r}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ArenaConfig":
        """Parse the JSON form; unit entries may carry a ``count``."""
        try:
            allies = _parse_units(data["allies"], "allies")
            enemies = _parse_units(data["enemies"], "enemies")
        except KeyError as e:
            raise ConfigError(str(e.args[0]), "missing required field") from e

        spawn_data = dict(data.get("spawn", {}))
        spawn = SpawnRule(
            mode=spawn_data.get("mode", "fixed"),
            ally_positions=tuple(tuple(p) for p in spawn_data.get("ally_positions", ())),
            enemy_positions=tuple(tuple(p) for p in spawn_data.get("enemy_positions", ())),
            ally_zone=_zone(spawn_data.get("ally_zone")),
            enemy_zone=_zone(spawn_data.get("enemy_zone")),
        )
        known = {"damage_weight", "kill_bonus", "win_bonus"}
        reward_data = data.get("reward", {})
        unknown = set(reward_data) - known
        if unknown:
            raise ConfigError("reward", f"unknown fields {sorted(unknown)}")

        config = cls(
            allies=allies,
            enemies=enemies,
            spawn=spawn,
            name=str(data.get("name", "arena")),
            width=int(data.get("width", 32)),
            height=int(data.get("height", 32)),
            max_steps=int(data.get("max_steps", 100)),
            opponent_script=str(data.get("opponent_script", "attack_nearest")),
            reward=RewardSpec(**{k: float(v) for k, v in reward_data.items()}),
        )
        config.validate()
        return config

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["spawn"] = {k: v for k, v in data["spawn"].items() if v not in (None, ())}
        return data

    @classmethod
    def load(cls, path: Path) -> "ArenaConfig":
        with open(path, "r") as f:
            return cls.from_dict(json.load(f))

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    def mirrored(self) -> "ArenaConfig":
        """Reflect fixed spawn positions across the vertical axis."""
        if self.spawn.mode != "fixed":
            raise ConfigError("spawn.mode", "only fixed spawns can be mirrored")
        flip = lambda cells: tuple((self.width - 1 - x, y) for x, y in cells)  # noqa: E731
        spawn = replace(
            self.spawn,
            ally_positions=flip(self.spawn.ally_positions),
            enemy_positions=flip(self.spawn.enemy_positions),
        )
        return replace(self, spawn=spawn, name=f"{self.name}_mirrored")


def _zone(value: Optional[Sequence[int]]) -> Optional[Zone]:
    if value is None:
        return None
    if len(value) != 4:
        raise ConfigError("spawn.zone", "zones are [x0, y0, x1, y1]")
    x0, y0, x1, y1 = (int(v) for v in value)
    return (x0, y0, x1, y1)


def _parse_units(entries: Sequence[Dict[str, Any]], label: str) -> Tuple[UnitSpec, ...]:
    units: List[UnitSpec] = []
    for i, entry in enumerate(entries):
        entry = dict(entry)
        type_id = entry.pop("type_id", entry.pop("type", None))
        if type_id is None:
            raise ConfigError(f"{label}[{i}].type_id", "missing unit type")
        count = int(entry.pop("count", 1))
        try:
            spec = UnitSpec.of_type(type_id, **entry)
        except TypeError as e:
            raise ConfigError(f"{label}[{i}]", str(e)) from e
        units.extend([spec] * count)
    return tuple(units)


@dataclass
class ObservationTriple:
    """One agent's local view, split by how it scales with team size."""

    own: np.ndarray
    variant: np.ndarray
    invariant: np.ndarray

    @property
    def n_entities(self) -> int:
        return int(self.variant.shape[0])


@dataclass
class StepResult:
    reward: float
    terminated: bool
    won: bool
    truncated: bool
    state: np.ndarray
    observations: List[ObservationTriple]
    avail: np.ndarray
    info: Dict[str, Any] = field(default_factory=dict)


@dataclass
class Unit:
    """Mutable runtime state of one unit."""

    spec: UnitSpec
    side: str
    index: int
    x: int
    y: int
    health: float
    shield: float
    alive: bool

    def distance_to(self, other: "Unit") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def take_damage(self, amount: float) -> float:
        """Apply damage to shield first, then health; returns damage absorbed."""
        absorbed = min(self.shield, amount)
        self.shield -= absorbed
        rest = min(self.health, amount - absorbed)
        self.health -= rest
        return absorbed + rest

    def heal(self, amount: float) -> None:
        self.health = min(self.spec.max_health, self.health + amount)

    def as_dict(self) -> Dict[str, Any]:
        return {
            "side": self.side,
            "index": self.index,
            "x": self.x,
            "y": self.y,
            "health": self.health,
            "shield": self.shield,
            "alive": self.alive,
        }


def visibility(i: int, j: int, units: Sequence[Unit]) -> bool:
    """Whether unit i sees unit j: both alive and within i's sight (closed ball)."""
    viewer, target = units[i], units[j]
    if not (viewer.alive and target.alive):
        return False
    return viewer.distance_to(target) <= viewer.spec.sight_range


def _step_toward(
    actor: Unit, target: Unit, occupied: set, width: int, height: int
) -> int:
    """Move that most reduces distance to target; ties go N, S, E, W."""
    best, best_dist = STOP, actor.distance_to(target)
    for action, (dx, dy) in MOVES.items():
        nx, ny = actor.x + dx, actor.y + dy
        if not (0 <= nx < width and 0 <= ny < height) or (nx, ny) in occupied:
            continue
        dist = math.hypot(nx - target.x, ny - target.y)
        if dist < best_dist - 1e-12:
            best, best_dist = action, dist
    return best


def _nearest(actor: Unit, candidates: Sequence[Unit], limit: float) -> Optional[Unit]:
    """Closest living candidate within ``limit``; ties go to the lower index."""
    best, best_dist = None, math.inf
    for unit in candidates:
        if not unit.alive or unit is actor:
            continue
        dist = actor.distance_to(unit)
        if dist <= limit and dist < best_dist:
            best, best_dist = unit, dist
    return best


def attack_nearest_actions(
    actors: Sequence[Unit],
    foes: Sequence[Unit],
    friends: Sequence[Unit],
    occupied: set,
    width: int,
    height: int,
    chase_limit: Optional[float] = None,
) -> List[int]:
    """Attack-nearest behaviour for a whole side, in the shared action layout.

    Healers tend the most injured friend in range instead of attacking.
    Movement chases the nearest foe within sight (or ``chase_limit``).
    """
    actions: List[int] = []
    for actor in actors:
        if not actor.alive:
            actions.append(NO_OP)
            continue
        if actor.spec.is_healer:
            injured = [
                f
                for f in friends
                if f.alive
                and f is not actor
                and f.health < f.spec.max_health
                and actor.distance_to(f) <= actor.spec.attack_range
                and f.index < len(foes)
            ]
            if injured:
                patient = min(injured, key=lambda f: (f.health / f.spec.max_health, f.index))
                actions.append(N_BASE_ACTIONS + patient.index)
                continue
        else:
            target = _nearest(actor, foes, actor.spec.attack_range)
            if target is not None:
                actions.append(N_BASE_ACTIONS + target.index)
                continue
        limit = actor.spec.sight_range if chase_limit is None else chase_limit
        quarry = _nearest(actor, foes, limit)
        if quarry is None:
            actions.append(STOP)
        else:
            actions.append(_step_toward(actor, quarry, occupied, width, height))
    return actions


def scripted_opponent(enemies: Sequence[Unit], allies: Sequence[Unit], width: int = 32, height: int = 32) -> List[int]:
    """Enemy actions under the attack-nearest script.

    Attack indices address allies: ``6 + k`` attacks ally k.
    """
    occupied = {(u.x, u.y) for u in list(enemies) + list(allies) if u.alive}
    return attack_nearest_actions(enemies, allies, enemies, occupied, width, height)


class Arena:
    """One running episode of an ArenaConfig."""

    def __init__(self, config: ArenaConfig, trace_path: Optional[Path] = None):
        config.validate()
        self.config = config
        self.trace_path = trace_path
        self.logger = get_logger()
        self.allies: List[Unit] = []
        self.enemies: List[Unit] = []
        self.t = 0
        self.done = True
        self._trace: Optional[IO[str]] = None

    @property
    def units(self) -> List[Unit]:
        return self.allies + self.enemies

    @property
    def positions(self) -> List[Tuple[int, int]]:
        return [(u.x, u.y) for u in self.units]

    def reset(self, seed: int = 0) -> Tuple[np.ndarray, List[ObservationTriple], np.ndarray]:
        """Spawn all units and return (state, observations, availability masks)."""
        ally_cells, enemy_cells = self._spawn_cells(seed)
        self.allies = [
            self._make_unit(spec, "ally", i, cell)
            for i, (spec, cell) in enumerate(zip(self.config.allies, ally_cells))
        ]
        self.enemies = [
            self._make_unit(spec, "enemy", i, cell)
            for i, (spec, cell) in enumerate(zip(self.config.enemies, enemy_cells))
        ]
        self.t = 0
        self.done = False

        if self.trace_path is not None:
            self._close_trace()
            self.trace_path.parent.mkdir(parents=True, exist_ok=True)
            self._trace = open(self.trace_path, "a")
            self._write_trace({"event": "reset", "seed": seed, "units": [u.as_dict() for u in self.units]})

        return self.get_state(), self.get_observations(), self.get_avail_actions()

    def _make_unit(self, spec: UnitSpec, side: str, index: int, cell: Tuple[int, int]) -> Unit:
        health = spec.max_health * spec.initial_health_frac
        alive = health > 0
        return Unit(
            spec=spec,
            side=side,
            index=index,
            x=int(cell[0]),
            y=int(cell[1]),
            health=health,
            shield=spec.max_shield if alive else 0.0,
            alive=alive,
        )

    def _spawn_cells(self, seed: int) -> Tuple[List[Tuple[int, int]], List[Tuple[int, int]]]:
        spawn = self.config.spawn
        if spawn.mode == "fixed":
            return list(spawn.ally_positions), list(spawn.enemy_positions)

        rng = np.random.default_rng(seed)
        taken: set = set()
        picked = []
        for zone, count in (
            (spawn.ally_zone, self.config.n_allies),
            (spawn.enemy_zone, self.config.n_enemies),
        ):
            assert zone is not None
            x0, y0, x1, y1 = zone
            cells = [
                (x, y)
                for x in range(x0, x1 + 1)
                for y in range(y0, y1 + 1)
                if (x, y) not in taken
            ]
            if len(cells) < count:
                raise ConfigError("spawn", "overlapping zones leave too few free cells")
            chosen = [cells[k] for k in rng.choice(len(cells), size=count, replace=False)]
            taken.update(chosen)
            picked.append(chosen)
        return picked[0], picked[1]

    def _occupied(self) -> set:
        return {(u.x, u.y) for u in self.units if u.alive}

    def _in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.config.width and 0 <= y < self.config.height

    def _move(self, unit: Unit, action: int, occupied: set) -> None:
        dx, dy = MOVES[action]
        nx, ny = unit.x + dx, unit.y + dy
        # Blocked moves resolve to stop
        if not self._in_bounds(nx, ny) or (nx, ny) in occupied:
            return
        occupied.discard((unit.x, unit.y))
        unit.x, unit.y = nx, ny
        occupied.add((nx, ny))

    def visibility(self, i: int, j: int) -> bool:
        """Visibility between entities indexed over allies then enemies."""
        return visibility(i, j, self.units)

    def ally_visibility(self) -> np.ndarray:
        """Directed n x n relation: entry (i, j) is whether ally i sees ally j."""
        n = self.config.n_allies
        relation = np.zeros((n, n), dtype=bool)
        for i in range(n):
            for j in range(n):
                if i != j:
                    relation[i, j] = visibility(i, j, self.allies)
        return relation

    def get_avail_actions(self) -> np.ndarray:
        config = self.config
        avail = np.zeros((config.n_allies, config.n_actions), dtype=bool)
        for i, ally in enumerate(self.allies):
            if not ally.alive:
                avail[i, NO_OP] = True
                continue
            avail[i, STOP] = True
            avail[i, MOVE_N : MOVE_W + 1] = True
            if ally.spec.is_healer:
                for k in range(min(config.n_allies, config.n_enemies)):
                    other = self.allies[k]
                    if k != i and other.alive and ally.distance_to(other) <= ally.spec.attack_range:
                        avail[i, N_BASE_ACTIONS + k] = True
            else:
                for k, enemy in enumerate(self.enemies):
                    if enemy.alive and ally.distance_to(enemy) <= ally.spec.attack_range:
                        avail[i, N_BASE_ACTIONS + k] = True
        return avail

    def get_state(self) -> np.ndarray:
        width = max(self.config.width - 1, 1)
        height = max(self.config.height - 1, 1)
        rows = []
        for unit in self.units:
            if not unit.alive:
                rows.append(np.zeros(STATE_UNIT_WIDTH))
                continue
            rows.append(
                np.concatenate(
                    [
                        [unit.health / unit.spec.max_health, _shield_frac(unit)],
                        unit.spec.type_one_hot(),
                        [unit.x / width, unit.y / height],
                    ]
                )
            )
        return np.concatenate(rows)

    def get_observations(self) -> List[ObservationTriple]:
        return [self._observe(i) for i in range(self.config.n_allies)]

    def _observe(self, i: int) -> ObservationTriple:
        agent = self.allies[i]
        if not agent.alive:
            return ObservationTriple(
                own=np.zeros(OWN_WIDTH),
                variant=np.zeros((0, VARIANT_WIDTH)),
                invariant=np.zeros(INVARIANT_WIDTH),
            )

        own = np.concatenate(
            [[agent.health / agent.spec.max_health, _shield_frac(agent)], agent.spec.type_one_hot()]
        )

        sight = agent.spec.sight_range
        rows = []
        units = self.units
        for j, other in enumerate(units):
            if other is agent or not visibility(i, j, units):
                continue
            rows.append(
                np.concatenate(
                    [
                        [
                            1.0 if other.side == "ally" else 0.0,
                            agent.distance_to(other) / sight,
                            (other.x - agent.x) / sight,
                            (other.y - agent.y) / sight,
                            other.health / other.spec.max_health,
                            _shield_frac(other),
                        ],
                        other.spec.type_one_hot(),
                    ]
                )
            )
        variant = np.array(rows) if rows else np.zeros((0, VARIANT_WIDTH))

        occupied = self._occupied()
        move_flags = []
        for action in (MOVE_N, MOVE_S, MOVE_E, MOVE_W):
            dx, dy = MOVES[action]
            nx, ny = agent.x + dx, agent.y + dy
            move_flags.append(float(self._in_bounds(nx, ny) and (nx, ny) not in occupied))
        invariant = np.array(
            move_flags
            + [
                agent.x / max(self.config.width - 1, 1),
                agent.y / max(self.config.height - 1, 1),
            ]
        )
        return ObservationTriple(own=own, variant=variant, invariant=invariant)

    def step(self, joint_action: Sequence[int]) -> StepResult:
        """Advance one step: ally moves, ally attacks, enemy script, deaths."""
        if self.done:
            raise ContractError("step() called on a finished episode; call reset() first")
        config = self.config
        if len(joint_action) != config.n_allies:
            raise ContractError(
                f"Expected {config.n_allies} actions, got {len(joint_action)}"
            )
        avail = self.get_avail_actions()
        for i, action in enumerate(joint_action):
            if not (0 <= int(action) < config.n_actions) or not avail[i, int(action)]:
                raise ContractError(f"Agent {i} chose unavailable action {action}")

        occupied = self._occupied()
        for ally, action in zip(self.allies, joint_action):
            if action in MOVES:
                self._move(ally, int(action), occupied)

        damage = 0.0
        for ally, action in zip(self.allies, joint_action):
            if action < N_BASE_ACTIONS:
                continue
            k = int(action) - N_BASE_ACTIONS
            if ally.spec.is_healer:
                self.allies[k].heal(ally.spec.damage_or_heal)
            else:
                damage += self.enemies[k].take_damage(ally.spec.damage_or_heal)

        enemy_actions = scripted_opponent(self.enemies, self.allies, config.width, config.height)
        occupied = self._occupied()
        for enemy, action in zip(self.enemies, enemy_actions):
            if action in MOVES:
                self._move(enemy, action, occupied)
            elif action >= N_BASE_ACTIONS:
                k = action - N_BASE_ACTIONS
                if enemy.spec.is_healer:
                    self.enemies[k].heal(enemy.spec.damage_or_heal)
                else:
                    self.allies[k].take_damage(enemy.spec.damage_or_heal)

        kills = 0
        for unit in self.units:
            if unit.alive and unit.health <= 0:
                unit.alive = False
                unit.health = 0.0
                unit.shield = 0.0
                if unit.side == "enemy":
                    kills += 1

        self.t += 1
        won = all(not e.alive for e in self.enemies)
        lost = all(not a.alive for a in self.allies)
        wiped = won or lost
        terminated = wiped or self.t >= config.max_steps
        truncated = terminated and not wiped
        self.done = terminated

        raw = (
            config.reward.damage_weight * damage
            + config.reward.kill_bonus * kills
            + (config.reward.win_bonus if won else 0.0)
        )
        reward = raw / config.reward_scale

        info = {"damage": damage, "kills": kills, "enemy_actions": enemy_actions, "t": self.t}
        if self._trace is not None:
            self._write_trace(
                {
                    "event": "step",
                    "t": self.t,
                    "actions": [int(a) for a in joint_action],
                    "enemy_actions": enemy_actions,
                    "reward": reward,
                    "terminated": terminated,
                    "won": won,
                    "units": [u.as_dict() for u in self.units],
                }
            )
            if terminated:
                self._close_trace()

        if terminated:
            self.logger.debug(f"Episode ended at t={self.t} won={won} truncated={truncated}")

        return StepResult(
            reward=reward,
            terminated=terminated,
            won=won,
            truncated=truncated,
            state=self.get_state(),
            observations=self.get_observations(),
            avail=self.get_avail_actions(),
            info=info,
        )

    def _write_trace(self, record: Dict[str, Any]) -> None:
        assert self._trace is not None
        self._trace.write(json.dumps(record) + "\n")

    def _close_trace(self) -> None:
        if self._trace is not None:
            self._trace.close()
            self._trace = None

    def close(self) -> None:
        self._close_trace()


def _shield_frac(unit: Unit) -> float:
    if unit.spec.max_shield <= 0:
        return 0.0
    return unit.shield / unit.spec.max_shield
