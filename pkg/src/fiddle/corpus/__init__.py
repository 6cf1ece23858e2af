"""Bundled example programs and behavior scripts."""

from pathlib import Path

DIR = Path(__file__).resolve().parent


def path(name: str) -> Path:
    return DIR / name
