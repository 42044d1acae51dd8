"""Language-goal providers: scripted rules, uniform-random, and a remote
text-completion service with a persistent query cache.

Every provider yields K goal texts per query; a wrapper reuses the latest
set between queries so at most ceil(steps / query_interval) provider calls
happen per environment instance.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
from dataclasses import dataclass

import numpy as np

from .env import ACHIEVEMENT_CAPTIONS, EnvStateSummary
from .textembed import CaptionVocabulary, embed

ENDPOINT_ENV_VAR = "DLLM_LLM_ENDPOINT"
TOKEN_ENV_VAR = "DLLM_LLM_TOKEN"

REMOTE_TEMPERATURE = 0.5
REMOTE_TOP_P = 1.0
REMOTE_MAX_TOKENS = 500

FALLBACK_GOAL = "explore the map"

_SLOT_RE = re.compile(r"\[[a-z_]+\]")


class EmptyCompletionError(ValueError):
    pass


class RemoteUnavailableError(RuntimeError):
    pass


@dataclass
class GoalSet:
    """Exactly K goal texts with unit-norm embeddings."""

    texts: list[str]
    embeddings: np.ndarray  # (K, D)
    query_step: int

    def __len__(self) -> int:
        return len(self.texts)


def make_goal_set(texts: list[str], k: int, query_step: int, dim: int | None = None) -> GoalSet:
    """Embed and pad to exactly k goals by repeating the last one."""
    if not texts:
        raise EmptyCompletionError("provider returned no goals")
    texts = list(texts[:k])
    while len(texts) < k:
        texts.append(texts[-1])
    kwargs = {} if dim is None else {"dim": dim}
    embeddings = np.stack([embed(t, **kwargs).vector for t in texts])
    return GoalSet(texts=texts, embeddings=embeddings, query_step=query_step)


# ---------------------------------------------------------------------------
# Prompts
# ---------------------------------------------------------------------------

@dataclass
class PromptTemplate:
    """System text plus a game-info format with an [observation] slot."""

    system_text: str
    game_info_format: str = "[observation]"

    def render(self, obs_caption: str) -> str:
        if not obs_caption.strip():
            raise ValueError("observation caption is empty")
        game_info = self.game_info_format.replace("[observation]", obs_caption)
        rendered = self.system_text + "\n\n" + game_info
        leftover = _SLOT_RE.findall(rendered.replace(obs_caption, ""))
        if leftover:
            raise ValueError(f"unfilled prompt slots: {leftover}")
        return rendered


def default_template(k: int = 5, mode: str = "free_form") -> PromptTemplate:
    if mode == "typed":
        # Per-slot goal types (pick one goal per category) only make sense in
        # environments with disjoint goal kinds; this gridworld has one kind.
        raise NotImplementedError("typed goal slots are not supported for this environment")
    if mode != "free_form":
        raise ValueError(f"unknown prompt mode: {mode}")
    system = (
        "You are coaching a player in a small survival crafting game. "
        "The player can move around, collect wood from trees, place a crafting table, "
        "craft a wood pickaxe at a table, mine stone with a wood pickaxe, and craft a "
        f"stone pickaxe. Given the report below, reply with the {k} most useful goals "
        "to pursue next, as short imperative phrases separated by commas and nothing "
        "else. Example reply: collect wood, place table."
    )
    return PromptTemplate(system_text=system)


def render_prompt(template: PromptTemplate, obs_caption: str) -> str:
    return template.render(obs_caption)


def parse_goals(completion: str, k: int) -> list[str]:
    """Split a completion on commas, trim, drop empties, truncate to k."""
    parts = [part.strip() for part in completion.split(",")]
    goals = [p for p in parts if p]
    if not goals:
        raise EmptyCompletionError(f"no goals parsed from completion: {completion!r}")
    return goals[:k]


# ---------------------------------------------------------------------------
# Query cache
# ---------------------------------------------------------------------------

def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class QueryCache:
    """Append-only JSON-lines cache mapping prompt hashes to goal lists."""

    def __init__(self, path):
        self.path = path
        self._lock = threading.Lock()
        self._entries: dict[str, list[str]] = {}
        if os.path.exists(path):
            with open(path, encoding="utf-8") as f:
                for line in f:
                    if line.strip():
                        record = json.loads(line)
                        self._entries[record["hash"]] = record["goals"]

    def lookup(self, key: str) -> list[str] | None:
        with self._lock:
            goals = self._entries.get(key)
            return list(goals) if goals is not None else None

    def insert(self, key: str, prompt: str, goals: list[str]) -> None:
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = list(goals)
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps({"hash": key, "prompt": prompt, "goals": goals}) + "\n")

    def __len__(self) -> int:
        return len(self._entries)


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------

class ScriptedGoalProvider:
    """Hand-written rule table over inventory and visibility.

    Doubles as the ground-truth oracle for goal-quality metrics: it proposes
    the not-yet-unlocked chain steps whose preconditions currently hold,
    padded with a generic exploration goal.
    """

    name = "scripted"

    def propose(self, summary: EnvStateSummary, obs_caption: str, k: int) -> list[str]:
        suggestions = []
        inv, ach = summary.inventory, summary.achievements
        table_known = summary.table_adjacent or "table" in summary.visible
        if "collect_wood" not in ach and "tree" in summary.visible:
            suggestions.append(ACHIEVEMENT_CAPTIONS["collect_wood"])
        if "place_table" not in ach and inv["wood"] >= 1:
            suggestions.append(ACHIEVEMENT_CAPTIONS["place_table"])
        if "craft_wood_pickaxe" not in ach and inv["wood"] >= 1 and table_known:
            suggestions.append(ACHIEVEMENT_CAPTIONS["craft_wood_pickaxe"])
        if ("collect_stone" not in ach and inv["wood_pickaxe"] >= 1
                and "stone" in summary.visible):
            suggestions.append(ACHIEVEMENT_CAPTIONS["collect_stone"])
        if ("craft_stone_pickaxe" not in ach and inv["stone"] >= 1 and table_known):
            suggestions.append(ACHIEVEMENT_CAPTIONS["craft_stone_pickaxe"])
        while len(suggestions) < k:
            suggestions.append(FALLBACK_GOAL)
        return suggestions[:k]


class RandomGoalProvider:
    """Uniform draws (with replacement) from the caption vocabulary."""

    name = "random"

    def __init__(self, vocab: CaptionVocabulary, seed: int):
        if len(vocab) == 0:
            raise ValueError("vocabulary is empty")
        self.vocab = vocab
        self.rng = np.random.default_rng(seed)

    def propose(self, summary, obs_caption: str, k: int) -> list[str]:
        indices = self.rng.integers(0, len(self.vocab), size=k)
        return [self.vocab.caption_at(int(i)) for i in indices]


class RemoteGoalProvider:
    """HTTP text-completion service behind the query cache.

    POSTs {"system", "user", "temperature", "top_p", "max_tokens"} and
    expects {"completion": "..."} back. The endpoint comes from the
    DLLM_LLM_ENDPOINT variable unless given explicitly; a bearer token is
    read from DLLM_LLM_TOKEN.
    """

    name = "remote"

    def __init__(self, template: PromptTemplate, cache: QueryCache,
                 endpoint: str | None = None, timeout: float = 30.0):
        self.template = template
        self.cache = cache
        self.endpoint = endpoint if endpoint is not None else os.environ.get(ENDPOINT_ENV_VAR)
        self.timeout = timeout
        self.network_calls = 0

    def propose(self, summary, obs_caption: str, k: int) -> list[str]:
        prompt = self.template.render(obs_caption)
        key = prompt_hash(prompt)
        cached = self.cache.lookup(key)
        if cached is not None:
            return cached
        if not self.endpoint:
            raise RemoteUnavailableError(
                f"no endpoint configured ({ENDPOINT_ENV_VAR} unset) and prompt not cached")
        completion = self._call(prompt, obs_caption)
        goals = parse_goals(completion, k)
        self.cache.insert(key, prompt, goals)
        return goals

    def _call(self, prompt: str, obs_caption: str) -> str:
        import requests

        headers = {}
        token = os.environ.get(TOKEN_ENV_VAR)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        body = {
            "system": self.template.system_text,
            "user": self.template.game_info_format.replace("[observation]", obs_caption),
            "temperature": REMOTE_TEMPERATURE,
            "top_p": REMOTE_TOP_P,
            "max_tokens": REMOTE_MAX_TOKENS,
        }
        try:
            response = requests.post(self.endpoint, json=body, headers=headers,
                                     timeout=self.timeout)
            response.raise_for_status()
            payload = response.json()
        except Exception as exc:  # noqa: BLE001 - any transport failure maps the same way
            raise RemoteUnavailableError(f"completion request failed: {exc}") from exc
        self.network_calls += 1
        if "completion" not in payload:
            raise EmptyCompletionError("response is missing the completion field")
        return payload["completion"]


class FallbackProvider:
    """Delegates to a primary provider and falls back when it is unreachable."""

    def __init__(self, primary, fallback):
        self.primary = primary
        self.fallback = fallback
        self.name = f"{primary.name}+{fallback.name}"
        self.fallback_uses = 0

    def propose(self, summary, obs_caption: str, k: int) -> list[str]:
        try:
            return self.primary.propose(summary, obs_caption, k)
        except RemoteUnavailableError:
            self.fallback_uses += 1
            return self.fallback.propose(summary, obs_caption, k)


class GoalSource:
    """Queries a provider every query_interval steps, reusing the latest
    GoalSet in between; one instance per environment."""

    def __init__(self, provider, k: int, query_interval: int, dim: int | None = None):
        self.provider = provider
        self.k = k
        self.query_interval = query_interval
        self.dim = dim
        self.invocations = 0
        self._current: GoalSet | None = None

    def goals_for_step(self, step_index: int, summary, obs_caption: str) -> GoalSet:
        if self._current is None or step_index % self.query_interval == 0:
            texts = self.provider.propose(summary, obs_caption, self.k)
            self.invocations += 1
            self._current = make_goal_set(texts, self.k, step_index, dim=self.dim)
        return self._current
