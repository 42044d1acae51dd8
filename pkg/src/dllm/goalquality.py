"""Goal-quality metrics scored against the environment's rule table.

Four pure assessors over (goal text, state) pairs: novelty (preconditions
hold and the achievement is still locked), context sensitivity
(preconditions hold, locked or not), common sense (the goal maps onto some
caption the environment can produce at all), and correctness (the goal
matches one of the scripted oracle's answers for this state). Goals map to
achievements by nearest caption embedding above a fixed threshold; goals
that map nowhere are counted separately as not assessable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .env import ACHIEVEMENT_CAPTIONS, ACHIEVEMENTS, EnvStateSummary
from .textembed import CaptionVocabulary, EmptyTextError, embed

MAP_THRESHOLD = 0.8

_ACHIEVEMENT_LIST = list(ACHIEVEMENTS)
_ACHIEVEMENT_EMBEDDINGS = np.stack(
    [embed(ACHIEVEMENT_CAPTIONS[a]).vector for a in _ACHIEVEMENT_LIST])


def preconditions_hold(achievement: str, s: EnvStateSummary) -> bool:
    inv = s.inventory
    if achievement == "collect_wood":
        return "tree" in s.visible
    if achievement == "place_table":
        return inv["wood"] >= 1
    if achievement == "craft_wood_pickaxe":
        return inv["wood"] >= 1 and s.table_adjacent
    if achievement == "collect_stone":
        return "stone" in s.visible and inv["wood_pickaxe"] >= 1
    if achievement == "craft_stone_pickaxe":
        return inv["stone"] >= 1 and s.table_adjacent
    raise KeyError(achievement)


def map_goal_to_achievement(goal_text: str) -> str | None:
    """Nearest achievement caption by cosine, or None below the threshold."""
    try:
        vec = embed(goal_text).vector
    except EmptyTextError:
        return None
    sims = _ACHIEVEMENT_EMBEDDINGS @ vec
    idx = int(np.argmax(sims))
    return _ACHIEVEMENT_LIST[idx] if sims[idx] >= MAP_THRESHOLD else None


def assess_novelty(goal_text: str, s: EnvStateSummary) -> bool | None:
    achievement = map_goal_to_achievement(goal_text)
    if achievement is None:
        return None
    return preconditions_hold(achievement, s) and achievement not in s.achievements


def assess_context_sensitivity(goal_text: str, s: EnvStateSummary) -> bool | None:
    achievement = map_goal_to_achievement(goal_text)
    if achievement is None:
        return None
    return preconditions_hold(achievement, s)


def assess_common_sense(goal_text: str, vocab: CaptionVocabulary) -> bool:
    try:
        e = embed(goal_text, dim=vocab.dim)
    except EmptyTextError:
        return False
    _, sim = vocab.nearest(e)
    return sim >= MAP_THRESHOLD


def assess_correctness(goal_text: str, oracle_goals: list[str]) -> bool:
    try:
        vec = embed(goal_text).vector
    except EmptyTextError:
        return False
    for answer in oracle_goals:
        if float(np.dot(vec, embed(answer).vector)) >= MAP_THRESHOLD:
            return True
    return False


@dataclass
class MetricCounts:
    true_count: int = 0
    false_count: int = 0
    not_assessable: int = 0

    def add(self, verdict: bool | None) -> None:
        if verdict is None:
            self.not_assessable += 1
        elif verdict:
            self.true_count += 1
        else:
            self.false_count += 1

    @property
    def sample_size(self) -> int:
        return self.true_count + self.false_count + self.not_assessable

    @property
    def rate(self) -> float:
        assessable = self.true_count + self.false_count
        return self.true_count / assessable if assessable else 0.0


@dataclass
class GoalQualityReport:
    novelty: MetricCounts = field(default_factory=MetricCounts)
    correctness: MetricCounts = field(default_factory=MetricCounts)
    context_sensitivity: MetricCounts = field(default_factory=MetricCounts)
    common_sense: MetricCounts = field(default_factory=MetricCounts)

    CSV_HEADER = ("window_end_step,samples,novelty_rate,correctness_rate,"
                  "context_rate,common_sense_rate")

    def add_goal(self, goal_text: str, s: EnvStateSummary, oracle_goals: list[str],
                 vocab: CaptionVocabulary) -> None:
        novelty = assess_novelty(goal_text, s)
        context = assess_context_sensitivity(goal_text, s)
        if novelty:
            assert context, "novelty implies context sensitivity"
        self.novelty.add(novelty)
        self.context_sensitivity.add(context)
        self.common_sense.add(assess_common_sense(goal_text, vocab))
        self.correctness.add(assess_correctness(goal_text, oracle_goals))

    @property
    def sample_size(self) -> int:
        return self.novelty.sample_size

    def rates(self) -> dict[str, float]:
        return {
            "novelty": self.novelty.rate,
            "correctness": self.correctness.rate,
            "context_sensitivity": self.context_sensitivity.rate,
            "common_sense": self.common_sense.rate,
        }

    def csv_row(self, window_end_step: int) -> str:
        r = self.rates()
        return (f"{window_end_step},{self.sample_size},{r['novelty']:.6f},"
                f"{r['correctness']:.6f},{r['context_sensitivity']:.6f},"
                f"{r['common_sense']:.6f}")
