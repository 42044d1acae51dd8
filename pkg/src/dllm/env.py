"""Seedable achievement gridworld with scripted captioners.

An 8x8 world of trees, stones, and placeable tables. Sparse +1 rewards come
from a five-step achievement chain (collect wood, place table, craft wood
pickaxe, collect stone, craft stone pickaxe); everything else pays zero.
Transitions are described by fixed-format captions drawn from a closed
vocabulary, observations by a "sees / has / status" sentence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .textembed import CaptionVocabulary

EMPTY, TREE, STONE, TABLE = 0, 1, 2, 3
CELL_NAMES = ("empty", "tree", "stone", "table")

ACTIONS = (
    "up",
    "down",
    "left",
    "right",
    "interact",
    "place_table",
    "craft_wood_pickaxe",
    "craft_stone_pickaxe",
)
NUM_ACTIONS = len(ACTIONS)

_DIRS = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}
_FACING_ORDER = ("up", "down", "left", "right")

INVENTORY_ITEMS = ("wood", "stone", "wood_pickaxe", "stone_pickaxe")

ACHIEVEMENTS = (
    "collect_wood",
    "place_table",
    "craft_wood_pickaxe",
    "collect_stone",
    "craft_stone_pickaxe",
)

TRANSITION_CAPTIONS = (
    "noop",
    "move",
    "collect the wood",
    "collect the stone",
    "place the table",
    "craft the wood pickaxe",
    "craft the stone pickaxe",
)

ACHIEVEMENT_CAPTIONS = {
    "collect_wood": "collect the wood",
    "place_table": "place the table",
    "craft_wood_pickaxe": "craft the wood pickaxe",
    "collect_stone": "collect the stone",
    "craft_stone_pickaxe": "craft the stone pickaxe",
}

VIEW = 5
OBS_DIM = VIEW * VIEW * 4 + len(INVENTORY_ITEMS) + 4


class StepAfterTerminationError(RuntimeError):
    pass


def caption_vocabulary() -> CaptionVocabulary:
    return CaptionVocabulary(list(TRANSITION_CAPTIONS))


@dataclass
class EnvEvent:
    kind: str  # moved | collected | placed | crafted | noop
    obj: str = ""


@dataclass
class EnvStateSummary:
    """What the captioners, the scripted goal rules, and the goal-quality
    assessors need to know about the current state."""

    visible: frozenset[str]
    inventory: dict[str, int]
    achievements: frozenset[str]
    table_adjacent: bool


@dataclass
class WorldState:
    grid: np.ndarray
    row: int
    col: int
    facing: str
    inventory: dict[str, int] = field(default_factory=lambda: {k: 0 for k in INVENTORY_ITEMS})
    achievements: set[str] = field(default_factory=set)
    step_count: int = 0


class AchievementGridEnv:
    """Deterministic given (seed, action sequence)."""

    def __init__(self, size: int = 8, episode_limit: int = 256,
                 n_trees: int = 6, n_stones: int = 4, trace_path=None):
        if n_trees < 2 or n_stones < 2:
            raise ValueError("generator contract needs at least 2 trees and 2 stones")
        self.size = size
        self.episode_limit = episode_limit
        self.n_trees = n_trees
        self.n_stones = n_stones
        self.state: WorldState | None = None
        self.terminated = True
        self._trace_path = trace_path
        self._trace_file = None

    # -- lifecycle ----------------------------------------------------------

    def reset(self, seed: int):
        """Place trees and stones, clear progress; returns the initial
        observation plus its observation caption and the empty-transition
        caption."""
        rng = np.random.default_rng(seed)
        grid = np.zeros((self.size, self.size), dtype=np.int8)
        cells = rng.permutation(self.size * self.size)
        objects = [TREE] * self.n_trees + [STONE] * self.n_stones
        for cell, kind in zip(cells, objects):
            grid[divmod(int(cell), self.size)] = kind
        player_cell = int(cells[len(objects)])
        row, col = divmod(player_cell, self.size)
        facing = _FACING_ORDER[int(rng.integers(0, 4))]
        self.state = WorldState(grid=grid, row=row, col=col, facing=facing)
        self.terminated = False
        if self._trace_path is not None:
            if self._trace_file is not None:
                self._trace_file.close()
            self._trace_file = open(self._trace_path, "w", encoding="utf-8")
        return self.observation(), self.caption_observation(), self.caption_transition(EnvEvent("noop"))

    def step(self, action):
        """Apply one action; returns (observation, reward, continue flag, event)."""
        if self.terminated or self.state is None:
            raise StepAfterTerminationError("episode is over; call reset")
        if isinstance(action, (int, np.integer)):
            action = ACTIONS[int(action)]
        s = self.state
        event = EnvEvent("noop")

        if action in _DIRS:
            s.facing = action
            dr, dc = _DIRS[action]
            nr, nc = s.row + dr, s.col + dc
            if self._in_bounds(nr, nc) and s.grid[nr, nc] == EMPTY:
                s.row, s.col = nr, nc
                event = EnvEvent("moved")
        elif action == "interact":
            target = self._faced_cell()
            if target is not None:
                kind = s.grid[target]
                if kind == TREE:
                    s.inventory["wood"] += 1
                    event = EnvEvent("collected", "wood")
                elif kind == STONE and s.inventory["wood_pickaxe"] >= 1:
                    s.inventory["stone"] += 1
                    event = EnvEvent("collected", "stone")
        elif action == "place_table":
            target = self._faced_cell()
            if target is not None and s.grid[target] == EMPTY and s.inventory["wood"] >= 1:
                s.inventory["wood"] -= 1
                s.grid[target] = TABLE
                event = EnvEvent("placed", "table")
        elif action == "craft_wood_pickaxe":
            if s.inventory["wood"] >= 1 and self._table_adjacent():
                s.inventory["wood"] -= 1
                s.inventory["wood_pickaxe"] += 1
                event = EnvEvent("crafted", "wood_pickaxe")
        elif action == "craft_stone_pickaxe":
            if s.inventory["stone"] >= 1 and self._table_adjacent():
                s.inventory["stone"] -= 1
                s.inventory["stone_pickaxe"] += 1
                event = EnvEvent("crafted", "stone_pickaxe")
        else:
            raise ValueError(f"unknown action: {action}")

        reward = 0.0
        achievement = _EVENT_ACHIEVEMENT.get((event.kind, event.obj))
        if achievement is not None and achievement not in s.achievements:
            s.achievements.add(achievement)
            reward = 1.0

        s.step_count += 1
        done = s.step_count >= self.episode_limit or len(s.achievements) == len(ACHIEVEMENTS)
        cont = 0.0 if done else 1.0
        self.terminated = done

        if self._trace_file is not None:
            self._trace_file.write(json.dumps({
                "step": s.step_count, "action": action,
                "event": [event.kind, event.obj], "r": reward, "c": cont,
            }) + "\n")
            if done:
                self._trace_file.flush()

        return self.observation(), reward, cont, event

    # -- views --------------------------------------------------------------

    def observation(self) -> np.ndarray:
        """One-hot 5x5 egocentric window, inventory counts, facing one-hot."""
        s = self.state
        vec = np.zeros(OBS_DIM, dtype=np.float64)
        half = VIEW // 2
        i = 0
        for dr in range(-half, half + 1):
            for dc in range(-half, half + 1):
                r, c = s.row + dr, s.col + dc
                if self._in_bounds(r, c):
                    vec[i + int(s.grid[r, c])] = 1.0
                i += 4
        for j, item in enumerate(INVENTORY_ITEMS):
            # saturating encoding keeps reconstruction error bounded while
            # preserving the thresholds the mechanics read (count >= 1)
            vec[i + j] = min(s.inventory[item], 9) / 9.0
        i += len(INVENTORY_ITEMS)
        vec[i + _FACING_ORDER.index(s.facing)] = 1.0
        return vec

    def visible_objects(self) -> frozenset[str]:
        s = self.state
        half = VIEW // 2
        seen = set()
        for dr in range(-half, half + 1):
            for dc in range(-half, half + 1):
                r, c = s.row + dr, s.col + dc
                if self._in_bounds(r, c) and s.grid[r, c] != EMPTY:
                    seen.add(CELL_NAMES[int(s.grid[r, c])])
        return frozenset(seen)

    def caption_observation(self) -> str:
        """Deduplicated view contents, inventory, and status in one sentence."""
        seen = sorted(self.visible_objects())
        sees = ", ".join(seen) if seen else "nothing"
        held = [item.replace("_", " ") for item in INVENTORY_ITEMS
                if self.state.inventory[item] > 0]
        has = ", ".join(held) if held else "nothing"
        return (f"The player sees {sees}, The player has {has}, "
                f"The status of the player is healthy")

    def caption_transition(self, event: EnvEvent) -> str:
        return _EVENT_CAPTIONS[(event.kind, event.obj)]

    def state_summary(self) -> EnvStateSummary:
        s = self.state
        return EnvStateSummary(
            visible=self.visible_objects(),
            inventory=dict(s.inventory),
            achievements=frozenset(s.achievements),
            table_adjacent=self._table_adjacent(),
        )

    # -- internals ----------------------------------------------------------

    def _in_bounds(self, r: int, c: int) -> bool:
        return 0 <= r < self.size and 0 <= c < self.size

    def _faced_cell(self):
        dr, dc = _DIRS[self.state.facing]
        r, c = self.state.row + dr, self.state.col + dc
        return (r, c) if self._in_bounds(r, c) else None

    def _table_adjacent(self) -> bool:
        s = self.state
        for dr, dc in _DIRS.values():
            r, c = s.row + dr, s.col + dc
            if self._in_bounds(r, c) and s.grid[r, c] == TABLE:
                return True
        return False


_EVENT_CAPTIONS = {
    ("noop", ""): "noop",
    ("moved", ""): "move",
    ("collected", "wood"): "collect the wood",
    ("collected", "stone"): "collect the stone",
    ("placed", "table"): "place the table",
    ("crafted", "wood_pickaxe"): "craft the wood pickaxe",
    ("crafted", "stone_pickaxe"): "craft the stone pickaxe",
}

_EVENT_ACHIEVEMENT = {
    ("collected", "wood"): "collect_wood",
    ("placed", "table"): "place_table",
    ("crafted", "wood_pickaxe"): "craft_wood_pickaxe",
    ("collected", "stone"): "collect_stone",
    ("crafted", "stone_pickaxe"): "craft_stone_pickaxe",
}
