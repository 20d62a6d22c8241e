#!/usr/bin/env python3
"""
Package manifest for the channel-locality attention training stack.
"""

from pathlib import Path

from setuptools import find_packages, setup


def read_requirements() -> list[str]:
    """Runtime requirements, one per line."""
    path = Path(__file__).parent / "requirements.txt"
    return [
        line.strip()
        for line in path.read_text(encoding="utf-8").splitlines()
        if line.strip() and not line.startswith("#")
    ]


setup(
    name="chanloc",
    version="1.0.0",
    description="C-Local and SE channel attention blocks in a NumPy CNN stack",
    python_requires=">=3.11",
    packages=find_packages(include=["config", "controllers", "data", "data.*", "models", "utils"]),
    py_modules=["main"],
    install_requires=read_requirements(),
    extras_require={"test": ["pytest>=7.0", "hypothesis>=6.80"]},
    entry_points={"console_scripts": ["chanloc=main:main"]},
)
