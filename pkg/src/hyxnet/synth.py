"""Deterministic synthetic DNS traffic for desk-scale training and demos.

Each class recipe draws query names and packet statistics from its own
distributions. Frame length and response TTL ranges are disjoint between
classes, so the corpus is separable on those two features alone; the query
names add a second, independent signal (label length, alphabet, depth).
"""

from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .ingest import CANONICAL_CLASSES, DnsEvent, LabelMap

WORDS = (
    "www", "mail", "api", "cdn", "static", "login", "shop", "news", "blog", "docs",
    "app", "img", "video", "portal", "support", "status", "search", "maps", "cloud", "auth",
)
BENIGN_BASES = (
    "example.com", "wikipedia.org", "github.com", "python.org", "kernel.org",
    "mozilla.org", "debian.org", "gnu.org", "apache.org", "ietf.org",
)
BASE32 = string.ascii_lowercase + "234567"
HEX = "0123456789abcdef"
ALNUM = string.ascii_lowercase + string.digits


@dataclass(frozen=True)
class Recipe:
    name: str
    # None draws dictionary words; otherwise random labels over this alphabet
    alphabet: Optional[str]
    label_len: tuple[int, int]
    depth: tuple[int, int]
    bases: tuple[str, ...]
    frame_len: tuple[float, float]
    ttl: tuple[float, float]
    qtypes: tuple[int, ...]
    answers: tuple[int, int]
    mean_gap: float

    def expected_qname_len(self) -> float:
        """Mean qname length implied by the recipe (labels, dots and base name)."""
        mean_depth = sum(self.depth) / 2
        if self.alphabet is None:
            mean_label = sum(map(len, WORDS)) / len(WORDS)
        else:
            mean_label = sum(self.label_len) / 2
        mean_base = sum(map(len, self.bases)) / len(self.bases)
        return mean_depth * (mean_label + 1) + mean_base


def default_recipes() -> dict[str, Recipe]:
    """One recipe per canonical class; class i owns frame-length band [60+60i, 100+60i]."""
    recipes = {}
    for i, name in enumerate(CANONICAL_CLASSES):
        frame = (60.0 + 60 * i, 100.0 + 60 * i)
        ttl = (2.0 + 100 * i, 60.0 + 100 * i)
        if name == "normal":
            r = Recipe(name, None, (0, 0), (0, 2), BENIGN_BASES, frame, ttl, (1, 28), (1, 3), 1.0)
        elif name == "wildcard":
            r = Recipe(name, ALNUM, (4, 10), (1, 2), ("wild-cdn.net", "catchall.io"), frame, ttl, (1, 5), (1, 2), 0.5)
        else:
            alphabet = (BASE32, HEX, ALNUM)[i % 3]
            lo = 12 + 4 * (i % 5)
            recipes_base = (f"{name.lower()}-t{i}.net",)
            r = Recipe(name, alphabet, (lo, min(lo + 30, 63)), (2, 4), recipes_base, frame, ttl,
                       (16, 10, 5, 15)[i % 4: i % 4 + 1], (0, 2), 0.05)
        recipes[name] = r
    return recipes


@dataclass
class SynthSpec:
    counts: dict[str, int]
    seed: int = 0
    recipes: dict[str, Recipe] = field(default_factory=default_recipes)

    @classmethod
    def balanced(cls, classes: Sequence[str] = ("normal", "dnscat2", "iodine"), per_class: int = 1000,
                 seed: int = 0) -> "SynthSpec":
        return cls({c: per_class for c in classes}, seed)

    @property
    def labels(self) -> LabelMap:
        return LabelMap.infer(self.counts)


def char_entropy(text: str) -> float:
    counts = Counter(text)
    n = len(text)
    return -sum(c / n * math.log2(c / n) for c in counts.values())


def qname_features(qname: str) -> tuple[float, float, float]:
    """(character length, label count, character entropy in bits)."""
    return float(len(qname)), float(qname.count(".") + 1), char_entropy(qname)


def _qname(recipe: Recipe, rng: np.random.Generator) -> str:
    depth = int(rng.integers(recipe.depth[0], recipe.depth[1] + 1))
    parts = []
    for _ in range(depth):
        if recipe.alphabet is None:
            parts.append(WORDS[rng.integers(len(WORDS))])
        else:
            n = int(rng.integers(recipe.label_len[0], recipe.label_len[1] + 1))
            parts.append("".join(recipe.alphabet[j] for j in rng.integers(len(recipe.alphabet), size=n)))
    parts.append(recipe.bases[rng.integers(len(recipe.bases))])
    return ".".join(parts)


def _events(recipe: Recipe, count: int, label: int, rng: np.random.Generator) -> list[DnsEvent]:
    out = []
    for _ in range(count):
        q = _qname(recipe, rng)
        qlen, nlabels, ent = qname_features(q)
        nums = (
            float(np.round(rng.uniform(*recipe.frame_len))),
            float(np.round(rng.uniform(*recipe.ttl))),
            qlen,
            nlabels,
            round(ent, 6),
            float(recipe.qtypes[rng.integers(len(recipe.qtypes))]),
            float(rng.integers(recipe.answers[0], recipe.answers[1] + 1)),
            round(float(rng.exponential(recipe.mean_gap)), 6),
        )
        out.append(DnsEvent(q, nums, label))
    return out


def generate(spec: SynthSpec) -> tuple[list[DnsEvent], LabelMap]:
    """Labeled events, class by class in label order; each class has its own child seed."""
    labels = spec.labels
    seeds = np.random.SeedSequence(spec.seed).spawn(labels.k)
    events = []
    for idx, name in enumerate(labels.names):
        if name not in spec.recipes:
            raise KeyError(f"no recipe for class {name!r}")
        events += _events(spec.recipes[name], spec.counts[name], idx, np.random.default_rng(seeds[idx]))
    return events, labels
