"""Bundled scenario files, addressable by name from the CLI."""

from importlib import resources

from ..core import ConfigError


def builtin_names() -> list[str]:
    names = []
    for entry in resources.files(__package__).iterdir():
        if entry.name.endswith(".cfg"):
            names.append(entry.name[: -len(".cfg")])
    return sorted(names)


def builtin_text(name: str) -> str:
    stem = name[: -len(".cfg")] if name.endswith(".cfg") else name
    res = resources.files(__package__) / f"{stem}.cfg"
    if not res.is_file():
        raise ConfigError(
            f"unknown scenario {name!r}; bundled: {', '.join(builtin_names())}"
        )
    return res.read_text()
