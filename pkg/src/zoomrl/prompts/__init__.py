"""System-prompt templates that fix the output grammar for policies emitting traces."""

from __future__ import annotations

from importlib import resources

from ..trace import DEFAULT_MAX_ROUNDS, DEFAULT_TOOL_NAME

TEMPLATES = ("clear", "ambiguous")


def load_template(name: str) -> str:
    if name not in TEMPLATES:
        raise ValueError(f"unknown prompt template {name!r}; expected one of {TEMPLATES}")
    return resources.files(__name__).joinpath(f"{name}.txt").read_text(encoding="utf-8")


def render_prompt(
    name: str,
    question: str,
    tool_name: str = DEFAULT_TOOL_NAME,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
) -> str:
    return load_template(name).format(question=question, tool_name=tool_name, max_rounds=max_rounds)
