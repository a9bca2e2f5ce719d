"""Positive/negative TTS prompt generation with prosody control symbols.

Control symbols understood by the synthesizer:

    word     default rendering
    (word)   slow
    word:    pause after
    word?    rising pitch at the end
    word!    loud
"""

from __future__ import annotations

import dataclasses
import json
import re
from typing import FrozenSet, Iterable, Iterator, List, Optional, Tuple, Union

import numpy as np

from .audio import NEGATIVE, POSITIVE
from .errors import EmptyQuery

CONTROL_CHARS = "():?!"

POSITIVE_TEMPLATES = (
    "{prefix} {key_name} {query}",
    "{prefix} ({key_name}) {query}",
    "({prefix}): ({key_name}) {query}",
    "{prefix}: ({key_name})? {query}",
    "{prefix}: {key_name}! {query}",
)
NEGATIVE_TEMPLATE = "{query}"
NEGATIVE_TEMPLATE_ID = len(POSITIVE_TEMPLATES) + 1
TEMPLATES = POSITIVE_TEMPLATES + (NEGATIVE_TEMPLATE,)

_NON_WORD = re.compile(r"[^\w]+", re.UNICODE)


@dataclasses.dataclass(frozen=True)
class Keyword:
    prefix: str
    key_name: str

    def __post_init__(self):
        for part in (self.prefix, self.key_name):
            if not part.strip():
                raise ValueError("keyword parts must be non-empty")
            if any(c in part for c in CONTROL_CHARS):
                raise ValueError(f"keyword part {part!r} contains a control symbol")

    @classmethod
    def parse(cls, text: str) -> "Keyword":
        """'Hey Google' -> Keyword('Hey', 'Google'); the first word is the prefix."""
        parts = text.split(None, 1)
        if len(parts) != 2:
            raise ValueError(f"keyword {text!r} needs a prefix and a key name")
        return cls(parts[0], parts[1])

    def __str__(self):
        return f"{self.prefix} {self.key_name}"


@dataclasses.dataclass(frozen=True)
class PromptSpec:
    text: str
    label: str
    template_id: int  # 1-based row of TEMPLATES
    query: str
    controls: FrozenSet[str] = frozenset()
    keyword: Optional[Tuple[str, str]] = None

    def to_json(self) -> dict:
        d = {"text": self.text, "label": self.label, "template_id": self.template_id, "query": self.query}
        if self.keyword is not None:
            d["keyword"] = list(self.keyword)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PromptSpec":
        kw = tuple(d["keyword"]) if d.get("keyword") else None
        text = d["text"]
        return cls(text, d["label"], int(d.get("template_id", NEGATIVE_TEMPLATE_ID)), d.get("query", text),
                   frozenset(c for c in CONTROL_CHARS if c in text), kw)


@dataclasses.dataclass(frozen=True)
class Rejected:
    line: str
    reason: str = "contains keyword"


def normalize(text: str) -> List[str]:
    """Lowercase, drop control symbols and punctuation, split into words."""
    return _NON_WORD.sub(" ", text.lower().replace("_", " ")).split()


def contains_keyword(text: str, kw: Keyword) -> bool:
    words = normalize(text)
    needle = normalize(kw.prefix) + normalize(kw.key_name)
    n = len(needle)
    return any(words[i:i + n] == needle for i in range(len(words) - n + 1))


def make_positive(kw: Keyword, query: str, rng: np.random.Generator,
                  template_id: Optional[int] = None) -> PromptSpec:
    """Fill a uniformly drawn positive template (or ``template_id``, 1-based)."""
    query = query.strip()
    if not query:
        raise EmptyQuery("positive prompts need a non-empty query")
    if template_id is None:
        template_id = int(rng.integers(len(POSITIVE_TEMPLATES))) + 1
    if not 1 <= template_id <= len(POSITIVE_TEMPLATES):
        raise ValueError(f"template_id {template_id} is not a positive template")
    template = POSITIVE_TEMPLATES[template_id - 1]
    text = template.format(prefix=kw.prefix, key_name=kw.key_name, query=query)
    controls = frozenset(c for c in CONTROL_CHARS if c in template.replace("{query}", ""))
    return PromptSpec(text, POSITIVE, template_id, query, controls, (kw.prefix, kw.key_name))


def make_negative(corpus_line: str, kw: Keyword) -> Union[PromptSpec, Rejected]:
    line = corpus_line.strip()
    if not normalize(line):
        return Rejected(corpus_line, "no words")
    if contains_keyword(line, kw):
        return Rejected(corpus_line)
    return PromptSpec(line, NEGATIVE, NEGATIVE_TEMPLATE_ID, line, frozenset(), (kw.prefix, kw.key_name))


def generate(kw: Keyword, corpus: List[str], count: int, label: str,
             rng: np.random.Generator) -> Iterator[PromptSpec]:
    """Yield ``count`` prompts of one label, drawing queries from ``corpus``."""
    usable = [line.strip() for line in corpus if normalize(line)]
    if label == POSITIVE:
        if not usable:
            raise EmptyQuery("corpus has no usable queries")
        for _ in range(count):
            yield make_positive(kw, usable[int(rng.integers(len(usable)))], rng)
        return
    clean = [line for line in usable if not contains_keyword(line, kw)]
    if count and not clean:
        raise EmptyQuery("every corpus line contains the keyword")
    for _ in range(count):
        prompt = make_negative(clean[int(rng.integers(len(clean)))], kw)
        assert isinstance(prompt, PromptSpec)
        yield prompt


_VOCAB = (
    "what time is it the weather today tomorrow play some music jazz rock news set an alarm for "
    "seven morning timer minutes turn on off lights kitchen living room call mom dad send message "
    "to how far moon tell me a joke remind buy milk bread eggs open door close window volume up down "
    "next song stop pause resume navigate home work traffic route show photos from last week order "
    "pizza dinner tonight who won game score read book chapter translate hello into french spanish "
    "add meeting calendar friday cancel appointment find restaurant nearby coffee shop open now "
    "temperature outside thermostat degrees lower raise fan heater speaker bedroom garage garden "
    "water plants schedule vacuum start cleaning battery status phone where my keys wallet glasses "
    "spell dictionary define word meaning recipe pasta chicken soup salad dessert cake cookies"
).split()


def desk_corpus(n_lines: int, seed: int = 0, min_words: int = 2, max_words: int = 5) -> List[str]:
    """Deterministic query corpus drawn from a small built-in vocabulary."""
    rng = np.random.default_rng(seed)
    lines = []
    for _ in range(n_lines):
        k = int(rng.integers(min_words, max_words + 1))
        lines.append(" ".join(_VOCAB[int(i)] for i in rng.integers(len(_VOCAB), size=k)))
    return lines


def read_corpus(path) -> List[str]:
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f if line.strip()]


def iter_jsonl_prompts(lines: Iterable[str]) -> Iterator[PromptSpec]:
    for line in lines:
        if line.strip():
            yield PromptSpec.from_json(json.loads(line))
