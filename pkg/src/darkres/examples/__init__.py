"""Bundled example configurations, one INI file per named scenario."""

from importlib import resources

__all__ = ["names", "path"]


def names():
    """Sorted names of the bundled example configs."""
    root = resources.files(__package__)
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".ini"))


def path(name: str):
    """Filesystem path of a bundled config (without the .ini suffix)."""
    p = resources.files(__package__).joinpath(f"{name}.ini")
    if not p.is_file():
        raise FileNotFoundError(f"no bundled config named {name!r}; have: {', '.join(names())}")
    return p
