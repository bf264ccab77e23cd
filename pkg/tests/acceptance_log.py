"""Shared store for acceptance-criterion result lines."""

LINES: list[str] = []
