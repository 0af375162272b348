"""Shipped experiment configs; config_path(name) resolves one."""

from importlib import resources


def config_path(name):
    """Filesystem path of a shipped .cfg file (e.g. "example1_case1_H10")."""
    if not name.endswith(".cfg"):
        name += ".cfg"
    ref = resources.files(__name__).joinpath(name)
    if not ref.is_file():
        have = sorted(p.name for p in resources.files(__name__).iterdir()
                      if p.name.endswith(".cfg"))
        raise FileNotFoundError("no shipped config %r; have: %s"
                                % (name, ", ".join(have)))
    return str(ref)
