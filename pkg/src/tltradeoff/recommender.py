"""FE-vs-FT recommendation from an ordered, editable rule table.

A rule's ``when`` mapping is a conjunction over context fields:
``priority`` / ``pretrained_available`` compare for equality, ``overlap_in``
tests membership, and ``ic_lt`` / ``ic_le`` / ``ic_gt`` / ``ic_ge`` bound the
samples per class. The first matching rule decides.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import ConfigError
from .tasks import Overlap


class Priority(str, enum.Enum):
    PERFORMANCE = "performance"
    COST = "cost"


class Choice(str, enum.Enum):
    FE = "FE"
    FT = "FT"
    PROBE_BOTH = "probe_both"


@dataclass(frozen=True)
class RecommendationContext:
    pretrained_available: bool
    overlap: Overlap
    ic: int
    priority: Priority = Priority.PERFORMANCE

    def __post_init__(self):
        object.__setattr__(self, "overlap", Overlap(self.overlap))
        object.__setattr__(self, "priority", Priority(self.priority))
        if self.ic < 1:
            raise ConfigError("ic must be >= 1")


@dataclass(frozen=True)
class Recommendation:
    choice: Choice
    path: tuple          # ((question, "yes" | "no"), ...)
    rule_id: str
    rationale: str


_BOUNDS = {
    "ic_lt": lambda ic, v: ic < v,
    "ic_le": lambda ic, v: ic <= v,
    "ic_gt": lambda ic, v: ic > v,
    "ic_ge": lambda ic, v: ic >= v,
}


def _matches(when, ctx):
    for key, value in when.items():
        if key == "priority":
            ok = ctx.priority == Priority(value)
        elif key == "pretrained_available":
            ok = ctx.pretrained_available == bool(value)
        elif key == "overlap_in":
            ok = ctx.overlap.value in value
        elif key in _BOUNDS:
            ok = _BOUNDS[key](ctx.ic, value)
        else:
            raise ConfigError(f"unknown rule condition {key!r}")
        if not ok:
            return False
    return True


def load_rules(path=None):
    if path is None:
        text = resources.files("tltradeoff").joinpath("data/rules.json").read_text()
    else:
        text = Path(path).read_text()
    rules = json.loads(text)["rules"]
    for r in rules:
        Choice(r["choice"])
        if not {"id", "question", "when", "choice"} <= set(r):
            raise ConfigError(f"rule {r.get('id')!r} is missing fields")
    return rules


def recommend(ctx, rules=None):
    rules = load_rules() if rules is None else rules
    path = []
    for rule in rules:
        hit = _matches(rule["when"], ctx)
        path.append((rule["question"], "yes" if hit else "no"))
        if hit:
            return Recommendation(Choice(rule["choice"]), tuple(path), rule["id"],
                                  f"{rule['id']}: {rule.get('citation', '')}".rstrip(": "))
    raise ConfigError("rule table has no fallback rule and nothing matched")


def resolve_probe(ft_t_acc, fe_t_acc):
    """Settle a probe_both verdict from measured test accuracies: FT only if it is ahead."""
    return Choice.FT if ft_t_acc > fe_t_acc else Choice.FE
