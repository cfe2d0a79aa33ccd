"""Gridworld dynamics and the convex per-step objectives used in the experiments.

States are the open (non-wall) cells of the grid, in row-major order. Actions
are up, down, left, right and stay.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .mdp import Distribution, SpaceDims, TransitionKernel

ACTIONS = ("up", "down", "left", "right", "stay")
STAY = ACTIONS.index("stay")
_MOVES = {0: (-1, 0), 1: (1, 0), 2: (0, -1), 3: (0, 1), 4: (0, 0)}
_NEIGHBOURS = ((-1, 0), (1, 0), (0, -1), (0, 1))
MAP_CHARS = {"#", ".", "D", "S", "T", "C"}
DEFAULT_NOISE = 0.1
DEFAULT_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Grid layout. ``walls`` is a boolean ``(height, width)`` mask; cells are ``(row, col)``."""

    walls: np.ndarray
    start: tuple
    doors: tuple = ()
    targets: tuple = ()
    constraints: tuple = ()
    noise: float = DEFAULT_NOISE
    start_action: int = STAY
    cells: tuple = field(init=False, repr=False)

    def __post_init__(self):
        walls = np.array(self.walls, dtype=bool)
        if walls.ndim != 2 or walls.size == 0:
            raise ConfigurationError("wall mask must be a non-empty 2-D grid")
        walls.setflags(write=False)
        object.__setattr__(self, "walls", walls)
        if not 0.0 <= self.noise <= 1.0:
            raise ConfigurationError(f"noise must lie in [0, 1], got {self.noise}")
        if not 0 <= self.start_action < len(ACTIONS):
            raise ConfigurationError(f"start action {self.start_action} out of range")
        cells = tuple((int(r), int(c)) for r, c in zip(*np.nonzero(~walls)))
        object.__setattr__(self, "cells", cells)
        for name in ("start", "doors", "targets", "constraints"):
            value = getattr(self, name)
            group = (value,) if name == "start" else value
            group = tuple((int(r), int(c)) for r, c in group)
            for cell in group:
                if not self.is_open(cell):
                    raise ConfigurationError(f"{name} cell {cell} is a wall or off the grid")
            object.__setattr__(self, name, group[0] if name == "start" else group)
        if set(self.targets) & set(self.constraints):
            raise ConfigurationError("target and constraint cells must be disjoint")

    @property
    def height(self):
        return self.walls.shape[0]

    @property
    def width(self):
        return self.walls.shape[1]

    @property
    def num_states(self):
        return len(self.cells)

    def is_open(self, cell):
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width and not self.walls[r, c]

    def state_index(self, cell):
        try:
            return self.cells.index((int(cell[0]), int(cell[1])))
        except ValueError:
            raise ConfigurationError(f"cell {cell} is not an open cell") from None

    @property
    def start_state(self):
        return self.state_index(self.start)

    def open_neighbours(self, cell):
        r, c = cell
        return [(r + dr, c + dc) for dr, dc in _NEIGHBOURS if self.is_open((r + dr, c + dc))]

    def with_noise(self, noise):
        return GridSpec(self.walls, self.start, self.doors, self.targets, self.constraints,
                        noise, self.start_action)

    def to_grid(self, values):
        """Scatter a per-state vector onto the grid; walls become NaN."""
        grid = np.full(self.walls.shape, np.nan)
        for (r, c), v in zip(self.cells, np.asarray(values)):
            grid[r, c] = v
        return grid


def parse_map(text: str, noise: float = DEFAULT_NOISE) -> GridSpec:
    """Parse a plain-text map, one row per line; exactly one ``S`` is required."""
    rows = [line.rstrip("\n") for line in text.strip("\n").splitlines() if line.strip()]
    if not rows:
        raise ConfigurationError("empty map")
    width = len(rows[0])
    walls, doors, targets, constraints, starts = [], [], [], [], []
    for r, line in enumerate(rows):
        line = line.rstrip()
        if len(line) != width:
            raise ConfigurationError(f"map row {r} has length {len(line)}, expected {width}")
        bad = set(line) - MAP_CHARS
        if bad:
            raise ConfigurationError(f"unknown map characters {sorted(bad)} in row {r}")
        walls.append([ch == "#" for ch in line])
        for c, ch in enumerate(line):
            {"D": doors, "T": targets, "C": constraints, "S": starts}.get(ch, []).append((r, c))
    if len(starts) != 1:
        raise ConfigurationError(f"map needs exactly one start cell, found {len(starts)}")
    return GridSpec(np.array(walls), starts[0], tuple(doors), tuple(targets), tuple(constraints), noise)


def load_map(path, noise: float = DEFAULT_NOISE) -> GridSpec:
    return parse_map(Path(path).read_text(), noise)


def four_room_kernel(spec: GridSpec, dims: SpaceDims | None = None):
    """Stationary gridworld kernel and the Dirac start distribution ``rho``.

    A move into a wall or off the grid resolves to staying put. For the four
    moves, probability ``noise`` is spread uniformly over the open neighbours of
    the resolved destination; "stay" is deterministic.
    """
    num_states, num_actions = spec.num_states, len(ACTIONS)
    if dims is not None and (dims.num_states, dims.num_actions) != (num_states, num_actions):
        raise ConfigurationError("dims disagree with the grid")
    step = np.zeros((num_states, num_actions, num_states))
    for s, (r, c) in enumerate(spec.cells):
        for a, (dr, dc) in _MOVES.items():
            dest = (r + dr, c + dc)
            if not spec.is_open(dest):
                dest = (r, c)
            d = spec.state_index(dest)
            nbrs = spec.open_neighbours(dest)
            if a == STAY or spec.noise == 0.0 or not nbrs:
                step[s, a, d] = 1.0
                continue
            step[s, a, d] += 1.0 - spec.noise
            for nb in nbrs:
                step[s, a, spec.state_index(nb)] += spec.noise / len(nbrs)
    rho = Distribution.dirac(SpaceDims(num_states, num_actions, 1), spec.start_state, spec.start_action)
    if dims is None:
        return step, rho
    return TransitionKernel.stationary(step, dims.horizon), rho


# ---------------------------------------------------------------------------
# Objectives


@dataclass(frozen=True)
class ObjectiveSpec:
    """Per-step convex loss ``f(mu_n)`` on state-action distributions.

    ``step_value`` and ``step_gradient`` accept arrays of shape ``(..., X, A)``
    and act on the trailing two axes. ``F(mu) = sum_{n=1..N} f(mu_n)``.
    """

    name: str
    step_value: object
    step_gradient: object
    lipschitz: float
    floor: float = DEFAULT_FLOOR

    def per_step(self, slices) -> np.ndarray:
        return np.asarray(self.step_value(np.asarray(slices)[1:]), dtype=np.float64)

    def value(self, slices) -> float:
        return float(self.per_step(slices).sum())

    def gradient(self, slices) -> np.ndarray:
        """Stacked per-step gradients on steps ``1..N``, shape ``(N, X, A)``."""
        return self.step_gradient(np.asarray(slices)[1:])

    def at(self, episode):
        """Objective of episode ``episode``; fixed objectives ignore the index."""
        return self


def entropy_objective(dims: SpaceDims | None = None, floor: float = DEFAULT_FLOOR) -> ObjectiveSpec:
    """Negative entropy ``<mu, log max(mu, floor)>``; minimising it spreads mass out."""
    if not floor > 0:
        raise ConfigurationError("entropy floor must be positive")
    log_floor = math.log(floor)

    def value(mu):
        return np.sum(mu * np.log(np.maximum(mu, floor)), axis=(-2, -1))

    def gradient(mu):
        return np.where(mu >= floor, np.log(np.maximum(mu, floor)) + 1.0, log_floor)

    return ObjectiveSpec("max-entropy", value, gradient, abs(log_floor) + 1.0, floor)


def indicator(spec: GridSpec, cells) -> np.ndarray:
    """``(X, A)`` indicator of ``cells``, constant across actions."""
    out = np.zeros((spec.num_states, len(ACTIONS)))
    for cell in cells:
        out[spec.state_index(cell)] = 1.0
    return out


def obstacle_objective(dims: SpaceDims | None, targets, constraints) -> ObjectiveSpec:
    """``-<r, mu> + <c, mu>^2`` for ``{0,1}`` indicator arrays ``r`` (targets) and ``c`` (constraints)."""
    r = np.asarray(targets, dtype=np.float64)
    c = np.asarray(constraints, dtype=np.float64)
    if r.shape != c.shape:
        raise ConfigurationError("target and constraint indicators differ in shape")
    if np.any(r * c):
        raise ConfigurationError("target and constraint cells must be disjoint")
    if not np.all(np.isin(r, (0.0, 1.0))) or not np.all(np.isin(c, (0.0, 1.0))):
        raise ConfigurationError("targets and constraints must be 0/1 indicators")

    def value(mu):
        return -(r * mu).sum(axis=(-2, -1)) + (c * mu).sum(axis=(-2, -1)) ** 2

    def gradient(mu):
        return -r + 2.0 * (c * mu).sum(axis=(-2, -1), keepdims=True) * c

    lipschitz = float(r.max(initial=0.0)) + 2.0 * float(c.sum())
    return ObjectiveSpec("obstacles", value, gradient, max(lipschitz, 1.0))


# ---------------------------------------------------------------------------
# Presets

FOUR_ROOM = """\
S....#.....
.....#.....
.....D.....
.....#.....
.....#.....
##D#####D##
.....#.....
.....#.....
.....D.....
.....#.....
.....#.....
"""

FOUR_ROOM_OBSTACLES = """\
S....#.....
.....#.....
.....D.....
.....#.....
.....#.....
##D#####D##
.....#.CCC.
.....#.....
.....D..T..
.....#.....
.....#.....
"""

TWO_ROOM = """\
S..#...
...#...
...#...
...D...
...#...
...#...
...#...
"""

TWO_ROOM_OBSTACLES = """\
S..#...
...#...
...#...
...D...
...#CC.
...#.T.
...#...
"""


@dataclass(frozen=True)
class Environment:
    """A grid with its kernel, target distribution and objective."""

    name: str
    grid: GridSpec
    dims: SpaceDims
    kernel: TransitionKernel
    rho: Distribution
    objective: ObjectiveSpec


PRESETS = {
    "max-entropy": (FOUR_ROOM, 40, "max-entropy"),
    "obstacles": (FOUR_ROOM_OBSTACLES, 80, "obstacles"),
    "max-entropy-small": (TWO_ROOM, 20, "max-entropy"),
    "obstacles-small": (TWO_ROOM_OBSTACLES, 30, "obstacles"),
}


def build_environment(grid: GridSpec, horizon: int, objective: str, name: str = "custom",
                      floor: float = DEFAULT_FLOOR) -> Environment:
    if horizon < 1:
        raise ConfigurationError("horizon must be positive")
    dims = SpaceDims(grid.num_states, len(ACTIONS), horizon)
    kernel, rho = four_room_kernel(grid, dims)
    if objective == "max-entropy":
        obj = entropy_objective(dims, floor)
    elif objective == "obstacles":
        obj = obstacle_objective(dims, indicator(grid, grid.targets), indicator(grid, grid.constraints))
    else:
        raise ConfigurationError(f"unknown objective {objective!r}")
    return Environment(name, grid, dims, kernel, rho, obj)


def preset(name: str, noise: float = DEFAULT_NOISE, horizon: int | None = None,
           floor: float = DEFAULT_FLOOR) -> Environment:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    text, default_horizon, objective = PRESETS[name]
    return build_environment(parse_map(text, noise), horizon or default_horizon, objective, name, floor)
