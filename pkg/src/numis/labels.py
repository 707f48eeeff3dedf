"""Weak labels from free-text descriptions, and frequency mining of candidate concepts."""

from __future__ import annotations

import csv
import io
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

log = logging.getLogger(__name__)

_TOKEN = re.compile(r"\w+", re.UNICODE)


def tokenize(description: str) -> list[str]:
    """Lowercased word tokens; punctuation and whitespace separate, diacritics are kept."""
    return [t.lower() for t in _TOKEN.findall(description or "")]


@dataclass(frozen=True)
class ConceptLexicon:
    concept: str
    search_words: frozenset[str]
    exclusions: frozenset[str] = frozenset()

    def __post_init__(self):
        words = frozenset(w.lower() for w in self.search_words)
        excl = frozenset(w.lower() for w in self.exclusions)
        if not words:
            raise ValueError(f"lexicon {self.concept!r} has no search words")
        if words & excl:
            raise ValueError(f"lexicon {self.concept!r}: {sorted(words & excl)} both searched and excluded")
        object.__setattr__(self, "search_words", words)
        object.__setattr__(self, "exclusions", excl)

    def matches(self, tokens) -> bool:
        return any(t in self.search_words and t not in self.exclusions for t in tokens)


def label(description: str, lexicon: ConceptLexicon) -> int:
    return int(lexicon.matches(tokenize(description)))


def parse_lexicons(data: dict) -> list[ConceptLexicon]:
    out = []
    for concept, entry in data.items():
        entry = entry or {}
        out.append(
            ConceptLexicon(
                concept=str(concept),
                search_words=frozenset(str(w) for w in entry.get("search_words", [])),
                exclusions=frozenset(str(w) for w in entry.get("exclusions", []) or []),
            )
        )
    return out


def load_lexicons(path=None, concepts=None) -> list[ConceptLexicon]:
    """Read a concept -> {search_words, exclusions} YAML file (the bundled one when ``path`` is None)."""
    if path is None:
        text = resources.files("numis.data").joinpath("lexicons.yaml").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    lexicons = parse_lexicons(yaml.safe_load(text) or {})
    if concepts is not None:
        by_name = {l.concept: l for l in lexicons}
        missing = [c for c in concepts if c not in by_name]
        if missing:
            raise KeyError(f"no lexicon for concepts {missing}")
        lexicons = [by_name[c] for c in concepts]
    return lexicons


def load_stop_words(path=None) -> set[str]:
    if path is None:
        text = resources.files("numis.data").joinpath("stopwords.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return {w.strip().lower() for w in text.splitlines() if w.strip() and not w.startswith("#")}


def mine_concepts(descriptions, stop_words=()) -> list[tuple[str, int]]:
    """Words ranked by the number of descriptions containing them, stop words removed.

    Ties are ordered alphabetically.
    """
    stop = {w.lower() for w in stop_words}
    df: Counter[str] = Counter()
    for text in descriptions:
        df.update(set(tokenize(text)) - stop)
    return sorted(df.items(), key=lambda kv: (-kv[1], kv[0]))


@dataclass
class LabelTable:
    concepts: list[str]
    image_ids: list[str] = field(default_factory=list)
    rows: list[list[int]] = field(default_factory=list)
    dropped: list[str] = field(default_factory=list)

    @property
    def positive_counts(self) -> dict[str, int]:
        return {c: sum(r[j] for r in self.rows) for j, c in enumerate(self.concepts)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image_id", *self.concepts])
        for image_id, row in zip(self.image_ids, self.rows):
            w.writerow([image_id, *row])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_bytes(self.to_csv().encode("utf-8"))

    @classmethod
    def read_csv(cls, path) -> "LabelTable":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0] != "image_id":
                raise ValueError(f"{path}: expected header starting with image_id")
            table = cls(concepts=header[1:])
            for rec in reader:
                if len(rec) != len(header):
                    raise ValueError(f"{path}: row {rec[:1]} has {len(rec)} fields, expected {len(header)}")
                table.image_ids.append(rec[0])
                table.rows.append([int(v) for v in rec[1:]])
        return table


def build_label_table(corpus, lexicons) -> LabelTable:
    """Label every (image_id, description) pair; pairs without a description are dropped and logged."""
    lexicons = list(lexicons)
    if not lexicons:
        raise ValueError("no lexicons given; nothing to label")
    table = LabelTable(concepts=[l.concept for l in lexicons])
    for image_id, description in corpus:
        if description is None:
            log.warning("no description for %s; dropping", image_id)
            table.dropped.append(image_id)
            continue
        tokens = tokenize(description)
        table.image_ids.append(image_id)
        table.rows.append([int(l.matches(tokens)) for l in lexicons])
    return table
