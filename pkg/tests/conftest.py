"""Shared builders for schemas, patterns, and seeded random streams."""

from __future__ import annotations

import numpy as np
import pytest

from cepshed import (
    AttributeSpec,
    Branch,
    Element,
    EventStream,
    Pattern,
    Predicate,
    StreamSchema,
)


def make_schema(n_types: int = 3, low: int = 1, high: int = 10) -> StreamSchema:
    names = [chr(ord("A") + i) for i in range(n_types)]
    return StreamSchema.from_names(names, [AttributeSpec("V1", low, high)])


def make_pattern(schema, body: str, where: str = "", pattern_id: str = "q",
                 weight: float = 1.0, window: float = 50.0, slide: float = 10.0) -> Pattern:
    """Tiny body syntax: 'A;!B;C' atoms/negation, 'B+' kleene, 'any2(B,C):N' any."""
    branches = []
    for branch_text in body.split("|"):
        elements = []
        seen: dict[str, int] = {}

        def uniq(name: str) -> str:
            seen[name] = seen.get(name, 0) + 1
            return name if seen[name] == 1 else f"{name}{seen[name]}"

        for token in branch_text.split(";"):
            token = token.strip()
            if token.startswith("any"):
                spec, _, alias = token.partition(":")
                k = int(spec[3 : spec.index("(")])
                names = spec[spec.index("(") + 1 : spec.index(")")].split(",")
                tids = tuple(schema.type_by_name(n.strip()).id for n in names)
                elements.append(Element(uniq(alias or "N"), tids, count=k))
            elif token.endswith("+"):
                name = token[:-1]
                elements.append(Element(uniq(name), (schema.type_by_name(name).id,), kleene=True))
            elif token.startswith("!"):
                name = token[1:]
                elements.append(Element(uniq(name), (schema.type_by_name(name).id,), negated=True))
            else:
                elements.append(Element(uniq(token), (schema.type_by_name(token).id,)))
        branches.append(Branch(elements, Predicate.parse(where, elements, schema)))
    return Pattern(pattern_id, weight, window, slide, branches)


def random_stream(seed: int, n_events: int, n_types: int = 3, max_gap: float = 2.0,
                  low: int = 1, high: int = 10) -> EventStream:
    rng = np.random.default_rng(seed)
    gaps = rng.uniform(0.0, max_gap, size=n_events)
    ts = np.cumsum(gaps)
    tids = rng.integers(0, n_types, size=n_events)
    attrs = rng.integers(low, high + 1, size=(n_events, 1)).astype(np.float64)
    return EventStream(ts, tids, attrs)


@pytest.fixture
def schema3():
    return make_schema(3)


@pytest.fixture
def schema6():
    return make_schema(6)
