"""Versioned prompt templates shipped with the package.

A template file is plain text with ``str.format`` placeholders. Chat
templates may carry a system part above a line containing only ``---``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

_SEPARATOR = "\n---\n"


class TemplateError(KeyError):
    pass


@dataclass(frozen=True)
class Template:
    name: str
    user: str
    system: str | None = None

    def render(self, **values: str) -> str:
        try:
            return self.user.format_map(values)
        except KeyError as exc:
            raise TemplateError(f"template {self.name!r} needs placeholder {exc}") from None


def parse_template(name: str, text: str) -> Template:
    text = text.rstrip("\n")
    if _SEPARATOR in text:
        system, user = text.split(_SEPARATOR, 1)
        return Template(name, user, system.strip() or None)
    return Template(name, text)


@lru_cache(maxsize=None)
def load_template(name: str, directory: str | None = None) -> Template:
    """Load ``name`` from ``directory`` or from the packaged templates."""
    if directory is not None:
        path = Path(directory) / f"{name}.txt"
        if not path.is_file():
            raise TemplateError(f"unknown template {name!r} in {directory}")
        return parse_template(name, path.read_text(encoding="utf-8"))
    res = resources.files(__name__).joinpath(f"{name}.txt")
    if not res.is_file():
        raise TemplateError(f"unknown template {name!r}")
    return parse_template(name, res.read_text(encoding="utf-8"))


def available_templates() -> list[str]:
    return sorted(
        p.name[:-4] for p in resources.files(__name__).iterdir() if p.name.endswith(".txt")
    )
