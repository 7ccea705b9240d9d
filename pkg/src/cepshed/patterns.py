"""Pattern definitions: sequence bodies with negation/Kleene/any elements and
attribute predicates evaluated incrementally over partial bindings."""

from __future__ import annotations

import ast
import re
from dataclasses import dataclass
from typing import Sequence

from .events import Event, StreamSchema


class PatternSyntaxError(ValueError):
    """A pattern body or predicate expression is malformed."""


@dataclass(frozen=True)
class Element:
    """One position in a pattern body.

    Plain atoms have a single type and count 1. ``kleene`` elements accept one
    or more events of their type. Multi-type elements with ``count`` k bind the
    first k qualifying events drawn from ``type_ids``. Negated elements are
    guards: an arriving event matching one abandons the partial match.
    """

    alias: str
    type_ids: tuple[int, ...]
    negated: bool = False
    kleene: bool = False
    count: int = 1

    def __post_init__(self) -> None:
        if not self.type_ids:
            raise PatternSyntaxError(f"element {self.alias!r}: needs at least one event type")
        if self.count < 1:
            raise PatternSyntaxError(f"element {self.alias!r}: count must be >= 1")
        if self.negated and (self.kleene or self.count != 1 or len(self.type_ids) != 1):
            raise PatternSyntaxError(f"element {self.alias!r}: negation applies to single-type atoms only")
        if self.kleene and (self.count != 1 or len(self.type_ids) != 1):
            raise PatternSyntaxError(f"element {self.alias!r}: kleene applies to a single type")

    def accepts(self, type_id: int) -> bool:
        return type_id in self.type_ids


# Predicate values: float | None (unknown yet) | _VACUOUS (touches an unbound
# negated element, so the comparison is vacuously satisfied).
_VACUOUS = object()

_CMP_OPS = {
    ast.Lt: lambda a, b: a < b,
    ast.LtE: lambda a, b: a <= b,
    ast.Gt: lambda a, b: a > b,
    ast.GtE: lambda a, b: a >= b,
    ast.Eq: lambda a, b: a == b,
    ast.NotEq: lambda a, b: a != b,
}

_EQ_RE = re.compile(r"(?<![<>=!])=(?!=)")


class Predicate:
    """Boolean expression over bound events' attributes.

    Supports +, -, comparison chains, and/or/not, numeric literals,
    ``alias.attr`` references and ``sum(alias.attr)`` over multi-bind elements.
    Evaluation is three-valued: True / False / None (not determined yet), so a
    candidate binding qualifies as long as the result is not False, while a
    completed match requires strictly True.

    Bare references to negated or multi-bind (kleene/any) elements are
    per-candidate constraints: they are enforced when an event is tested at
    that element and are vacuously satisfied in every other evaluation.
    Cross-element constraints over a multi-bind element's values must use
    ``sum(...)``, which is final once the element has closed.
    """

    def __init__(self, root, text: str = ""):
        self._root = root
        self.text = text

    @classmethod
    def true(cls) -> "Predicate":
        return cls(("bool", True), "")

    @classmethod
    def parse(cls, text: str, elements: Sequence[Element], schema: StreamSchema) -> "Predicate":
        if not text or not text.strip():
            return cls.true()
        alias_idx = {el.alias: i for i, el in enumerate(elements)}
        normalized = _EQ_RE.sub("==", text)
        try:
            tree = ast.parse(normalized, mode="eval")
        except SyntaxError as exc:
            raise PatternSyntaxError(f"bad predicate {text!r}: {exc.msg}") from None
        root = _build(tree.body, alias_idx, elements, schema, text)
        return cls(root, text)

    def referenced_elements(self) -> frozenset[int]:
        out: set[int] = set()
        _collect_refs(self._root, out)
        return frozenset(out)

    def evaluate(
        self,
        bindings: Sequence[Sequence[Event]],
        candidate_idx: int | None = None,
        candidate: Event | None = None,
    ):
        """Three-valued evaluation with ``candidate`` tentatively bound at ``candidate_idx``.

        Pass candidate_idx=None for a completion-time check over final bindings.
        """
        return _eval_bool(self._root, bindings, candidate_idx, candidate)

    def __repr__(self) -> str:
        return f"Predicate({self.text!r})" if self.text else "Predicate(true)"


def _build(node, alias_idx, elements, schema, text):
    if isinstance(node, ast.BoolOp):
        op = "and" if isinstance(node.op, ast.And) else "or"
        return (op, tuple(_build(v, alias_idx, elements, schema, text) for v in node.values))
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.Not):
        return ("not", _build(node.operand, alias_idx, elements, schema, text))
    if isinstance(node, ast.Compare):
        operands = [node.left] + list(node.comparators)
        ops = []
        for op in node.ops:
            if type(op) not in _CMP_OPS:
                raise PatternSyntaxError(f"bad predicate {text!r}: unsupported comparison")
            ops.append(type(op))
        built = tuple(_build_arith(v, alias_idx, elements, schema, text) for v in operands)
        return ("cmp", tuple(ops), built)
    raise PatternSyntaxError(f"bad predicate {text!r}: expected a boolean expression")


def _build_arith(node, alias_idx, elements, schema, text):
    if isinstance(node, ast.BinOp) and isinstance(node.op, (ast.Add, ast.Sub)):
        op = "add" if isinstance(node.op, ast.Add) else "sub"
        return (
            op,
            _build_arith(node.left, alias_idx, elements, schema, text),
            _build_arith(node.right, alias_idx, elements, schema, text),
        )
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
        return ("negate", _build_arith(node.operand, alias_idx, elements, schema, text))
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return ("const", float(node.value))
    if isinstance(node, ast.Attribute) and isinstance(node.value, ast.Name):
        ref = _resolve_ref(node.value.id, node.attr, alias_idx, elements, schema, text)
        el = elements[ref[0]]
        # candidate-only references: guards never hold bindings, and multi-bind
        # instances are each checked at their own binding time
        kind = "attr_cand" if (el.negated or el.kleene or el.count > 1) else "attr"
        return (kind,) + ref
    if (
        isinstance(node, ast.Call)
        and isinstance(node.func, ast.Name)
        and node.func.id == "sum"
        and len(node.args) == 1
        and not node.keywords
        and isinstance(node.args[0], ast.Attribute)
        and isinstance(node.args[0].value, ast.Name)
    ):
        ref = _resolve_ref(node.args[0].value.id, node.args[0].attr, alias_idx, elements, schema, text)
        el = elements[ref[0]]
        if el.negated:
            raise PatternSyntaxError(f"bad predicate {text!r}: sum() over a negated element")
        return ("sum",) + ref
    raise PatternSyntaxError(f"bad predicate {text!r}: unsupported term")


def _resolve_ref(alias, attr_name, alias_idx, elements, schema, text):
    if alias not in alias_idx:
        raise PatternSyntaxError(f"bad predicate {text!r}: unknown element alias {alias!r}")
    try:
        attr = schema.attr_index(attr_name)
    except KeyError:
        raise PatternSyntaxError(f"bad predicate {text!r}: unknown attribute {attr_name!r}") from None
    return (alias_idx[alias], attr)


def _collect_refs(node, out: set[int]) -> None:
    kind = node[0]
    if kind in ("attr", "attr_cand", "sum"):
        out.add(node[1])
    elif kind in ("and", "or"):
        for child in node[1]:
            _collect_refs(child, out)
    elif kind == "not":
        _collect_refs(node[1], out)
    elif kind == "cmp":
        for child in node[2]:
            _collect_refs(child, out)
    elif kind in ("add", "sub"):
        _collect_refs(node[1], out)
        _collect_refs(node[2], out)
    elif kind == "negate":
        _collect_refs(node[1], out)


def _eval_value(node, bindings, cand_idx, cand):
    kind = node[0]
    if kind == "const":
        return node[1]
    if kind == "attr":
        idx, attr = node[1], node[2]
        if cand_idx is not None and idx == cand_idx and cand is not None:
            return cand.attrs[attr]
        bound = bindings[idx]
        if bound:
            return bound[-1].attrs[attr]
        return None
    if kind == "attr_cand":
        idx, attr = node[1], node[2]
        if cand_idx is not None and idx == cand_idx and cand is not None:
            return cand.attrs[attr]
        return _VACUOUS
    if kind == "sum":
        idx, attr = node[1], node[2]
        total = 0.0
        for ev in bindings[idx]:
            total += ev.attrs[attr]
        if cand_idx is None or idx <= cand_idx:
            # Element already closed (or is the candidate itself, whose prior
            # bindings the incremental sum ranges over): the sum is final.
            return total
        return None
    if kind == "add":
        a = _eval_value(node[1], bindings, cand_idx, cand)
        b = _eval_value(node[2], bindings, cand_idx, cand)
        return _combine(a, b, lambda x, y: x + y)
    if kind == "sub":
        a = _eval_value(node[1], bindings, cand_idx, cand)
        b = _eval_value(node[2], bindings, cand_idx, cand)
        return _combine(a, b, lambda x, y: x - y)
    if kind == "negate":
        a = _eval_value(node[1], bindings, cand_idx, cand)
        if a is None or a is _VACUOUS:
            return a
        return -a
    raise AssertionError(f"unexpected value node {kind}")


def _combine(a, b, fn):
    if a is _VACUOUS or b is _VACUOUS:
        return _VACUOUS
    if a is None or b is None:
        return None
    return fn(a, b)


def _eval_bool(node, bindings, cand_idx, cand):
    kind = node[0]
    if kind == "bool":
        return node[1]
    if kind == "and":
        unknown = False
        for child in node[1]:
            v = _eval_bool(child, bindings, cand_idx, cand)
            if v is False:
                return False
            if v is None:
                unknown = True
        return None if unknown else True
    if kind == "or":
        unknown = False
        for child in node[1]:
            v = _eval_bool(child, bindings, cand_idx, cand)
            if v is True:
                return True
            if v is None:
                unknown = True
        return None if unknown else False
    if kind == "not":
        v = _eval_bool(node[1], bindings, cand_idx, cand)
        return None if v is None else (not v)
    if kind == "cmp":
        ops, operands = node[1], node[2]
        values = []
        for term in operands:
            v = _eval_value(term, bindings, cand_idx, cand)
            if v is _VACUOUS:
                return True
            values.append(v)
        if any(v is None for v in values):
            return None
        for op, a, b in zip(ops, values, values[1:]):
            if not _CMP_OPS[op](a, b):
                return False
        return True
    raise AssertionError(f"unexpected bool node {kind}")


class Branch:
    """One sequence body of a pattern, with its predicate.

    A partial match owns, per element, the (possibly empty) list of bound
    events; ``route_from(state)`` gives the guard (negated) element indices
    active at a state together with the next element to satisfy.
    """

    def __init__(self, elements: Sequence[Element], predicate: Predicate | None = None):
        elements = tuple(elements)
        if not elements:
            raise PatternSyntaxError("a branch needs at least one element")
        if elements[0].negated:
            raise PatternSyntaxError("the first element of a branch must not be negated")
        if elements[-1].negated:
            raise PatternSyntaxError("the last element of a branch must not be negated")
        if elements[-1].kleene:
            raise PatternSyntaxError("a kleene element cannot be last: its closure needs a successor")
        aliases = [el.alias for el in elements]
        if len(set(aliases)) != len(aliases):
            raise PatternSyntaxError(f"duplicate element aliases in branch: {aliases}")
        self.elements = elements
        self.predicate = predicate if predicate is not None else Predicate.true()
        # route_from[s] = (guard element indices, index of next non-negated element or None)
        self._routes: list[tuple[tuple[int, ...], int | None]] = []
        for s in range(len(elements) + 1):
            guards: list[int] = []
            target: int | None = None
            for i in range(s, len(elements)):
                if elements[i].negated:
                    guards.append(i)
                else:
                    target = i
                    break
            self._routes.append((tuple(guards), target))

    def route_from(self, state: int) -> tuple[tuple[int, ...], int | None]:
        return self._routes[state]

    def __len__(self) -> int:
        return len(self.elements)


class Pattern:
    """A weighted windowed query: one or more alternative sequence branches."""

    def __init__(
        self,
        pattern_id: str,
        weight: float,
        window_size: float,
        slide: float,
        branches: Sequence[Branch],
    ):
        if weight <= 0:
            raise ValueError(f"pattern {pattern_id!r}: weight must be positive")
        if window_size <= 0 or slide <= 0:
            raise ValueError(f"pattern {pattern_id!r}: window size and slide must be positive")
        if not branches:
            raise ValueError(f"pattern {pattern_id!r}: needs at least one branch")
        self.id = pattern_id
        self.weight = float(weight)
        self.window_size = float(window_size)
        self.slide = float(slide)
        self.branches = tuple(branches)

    def __repr__(self) -> str:
        return f"Pattern({self.id!r}, w={self.weight}, ws={self.window_size}, slide={self.slide})"
