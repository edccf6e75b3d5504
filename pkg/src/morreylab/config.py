"""INI configuration files.

Keys in ``[common]`` apply to every subcommand; a section named after a
subcommand adds or overrides keys for that subcommand only.  Command line
flags override both.  Values are read as booleans (true/false/yes/no),
``none``, integers, floats or plain strings, in that order.
"""
from __future__ import annotations

import configparser
import os


def coerce(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    for kind in (int, float):
        try:
            return kind(t)
        except ValueError:
            pass
    return t


def load_config(path: str | os.PathLike | None, section: str, known=None) -> dict:
    """Merged ``[common]`` and ``[section]`` values with keys normalised to
    underscores.

    With ``known`` given, unknown keys in ``[section]`` are an error and
    unknown keys in ``[common]`` are skipped (they may belong to another
    subcommand).
    """
    if path is None:
        return {}
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep M_n and N case-sensitive
    with open(path) as fh:
        parser.read_file(fh)
    out = {}
    for name in ("common", section):
        if parser.has_section(name):
            for key, value in parser.items(name):
                key = key.replace("-", "_")
                if known is not None and key not in known:
                    if name == section:
                        raise ValueError(f"unknown option {key!r} in [{section}] of {path}")
                    continue
                out[key] = coerce(value)
    return out


def merge(defaults: dict, file_values: dict, flags: dict) -> dict:
    """Defaults, then file values, then flags that were given explicitly."""
    out = dict(defaults)
    out.update(file_values)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out
