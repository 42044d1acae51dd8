"""Replay buffer of whole episodes with in-episode window sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .goals import GoalSet


class NotEnoughDataError(RuntimeError):
    pass


@dataclass
class TransitionRecord:
    """One acting step: the observation the step produced, the caption of
    the transition into it, the action that caused it, reward, continue
    flag, and the goal set active when the action was chosen. Goal sets are
    shared by reference between the steps of one query interval."""

    x: np.ndarray
    u_text: str
    u: np.ndarray
    caption_index: int
    a: int
    r: float
    c: float
    goals: GoalSet


class ReplayBuffer:
    """Ring of episodes, evicted whole and oldest first, capacity in steps.

    Sampled windows never cross an episode boundary; the episode still being
    acted is sampleable as soon as it is long enough.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._episodes: list[list[TransitionRecord]] = []
        self._current: list[TransitionRecord] = []
        self._closed_steps = 0

    @property
    def num_steps(self) -> int:
        return self._closed_steps + len(self._current)

    @property
    def num_episodes(self) -> int:
        return len(self._episodes) + (1 if self._current else 0)

    def append(self, record: TransitionRecord, episode_done: bool) -> None:
        self._current.append(record)
        if episode_done:
            self._episodes.append(self._current)
            self._closed_steps += len(self._current)
            self._current = []
            while self._closed_steps + len(self._current) > self.capacity and self._episodes:
                evicted = self._episodes.pop(0)
                self._closed_steps -= len(evicted)

    def _window_sources(self, length: int):
        episodes = self._episodes + ([self._current] if self._current else [])
        sources = []
        for ep in episodes:
            starts = len(ep) - length + 1
            if starts > 0:
                sources.append((ep, starts))
        return sources

    def sample_windows(self, batch_size: int, length: int,
                       rng: np.random.Generator) -> list[list[TransitionRecord]]:
        """batch_size windows drawn uniformly over all valid start offsets."""
        if self.num_steps < batch_size * length:
            raise NotEnoughDataError(
                f"buffer has {self.num_steps} steps, need {batch_size * length}")
        sources = self._window_sources(length)
        total = sum(starts for _, starts in sources)
        if total == 0:
            raise NotEnoughDataError("no episode is long enough for a window")
        cumulative = np.cumsum([starts for _, starts in sources])
        picks = rng.integers(0, total, size=batch_size)
        windows = []
        for pick in picks:
            ep_idx = int(np.searchsorted(cumulative, pick, side="right"))
            offset = int(pick) - (int(cumulative[ep_idx - 1]) if ep_idx else 0)
            windows.append(sources[ep_idx][0][offset:offset + length])
        return windows


def collate(windows: list[list[TransitionRecord]], action_dim: int) -> dict:
    """Stack windows into (B, L, ...) arrays for the world-model loss."""
    B, L = len(windows), len(windows[0])
    x = np.stack([[rec.x for rec in w] for w in windows])
    u = np.stack([[rec.u for rec in w] for w in windows])
    caption_idx = np.array([[rec.caption_index for rec in w] for w in windows])
    actions = np.array([[rec.a for rec in w] for w in windows])
    return {
        "x": x,
        "u": u,
        "caption_idx": caption_idx,
        "action": np.eye(action_dim)[actions],
        "r": np.array([[rec.r for rec in w] for w in windows]),
        "c": np.array([[rec.c for rec in w] for w in windows]),
    }
