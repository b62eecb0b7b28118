"""Numeric constants in free text: literals, scientific notation and adjacent units."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

# a bare number must not continue a word (R1), a decimal, an exponent (m/s^2) or a ratio
_NUMBER = r"""
    (?<![\w.^/])
    (?P<num>(?P<mantissa>[-+−]?(?:\d+(?:\.\d+)?|\.\d+))
    (?:
        [eE](?P<exp>[-+−]?\d+)
      | \s*[×xX*]\s*10\s*(?:\^|\*\*)\s*\{?(?P<exp10>[-+−]?\d+)\}?
    )?)
    (?![\d])
"""
_UNIT = r"""
    (?:[ \t]*(?P<unit>
        °[A-Za-z]?
      | %
      | [^\W\d_][^\s,;:()\[\]{}=।॥]*
    ))?
"""
_CONSTANT_RE = re.compile(_NUMBER + _UNIT, re.VERBOSE)

# words that commonly follow a number but are not units
_NOT_UNITS = {
    "and", "or", "to", "of", "the", "is", "are", "in", "on", "at", "by", "for", "from",
    "with", "times", "then", "than", "into", "per", "if", "so", "as", "we", "it",
    "और", "से", "का", "की", "के", "है", "हैं", "में", "पर", "तथा", "या", "को",
}


@dataclass(frozen=True)
class Constant:
    literal: str
    value: float
    unit: str
    start: int
    end: int


def _to_float(text: str) -> float:
    return float(text.replace("−", "-"))


def _clean_unit(unit: str | None) -> str:
    if not unit:
        return ""
    unit = unit.rstrip(".")
    if unit.lower() in _NOT_UNITS:
        return ""
    return unit


def extract_constants(text: str) -> list[Constant]:
    """All numeric literals in ``text`` with the unit token that follows them, if any."""
    out = []
    for m in _CONSTANT_RE.finditer(text):
        value = _to_float(m.group("mantissa"))
        exp = m.group("exp") or m.group("exp10")
        if exp is not None:
            value *= 10.0 ** _to_float(exp)
        unit = _clean_unit(m.group("unit"))
        end = m.start("unit") + len(unit) if unit else m.end("num")
        literal = text[m.start():end].strip()
        out.append(Constant(literal, value, unit, m.start(), end))
    return out


def final_numeric(text: str) -> tuple[float, str] | None:
    """Best guess at the final numeric answer in a worked solution.

    Prefers the first number after the last ``=`` sign; otherwise the last
    number in the text.
    """
    constants = extract_constants(text)
    if not constants:
        return None
    eq = text.rfind("=")
    if eq >= 0:
        after = [c for c in constants if c.start > eq]
        if after:
            return after[0].value, after[0].unit
    last = constants[-1]
    return last.value, last.unit


def same_value(a: float, b: float, rel_tol: float = 1e-9, abs_tol: float = 1e-12) -> bool:
    return math.isclose(a, b, rel_tol=rel_tol, abs_tol=abs_tol)
