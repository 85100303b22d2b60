"""Plain ``key=value`` configuration files.

One pair per line; blank lines and lines starting with ``#`` are skipped.
Values may contain ``%XX`` hex escapes for characters that would otherwise
be awkward (``%3D`` for ``=``, ``%23`` for ``#``)::

    name=cifar10
    path=/data/cifar-10-batches-bin
    mean=0.4914,0.4822,0.4465
"""
import re
from typing import Dict, Tuple

__all__ = ['ConfigError', 'unescape', 'parse_config', 'read_config', 'parse_floats']


class ConfigError(ValueError):
    """Raised for malformed configuration files or invalid settings"""
    pass


_escape_pat = re.compile(r'%([0-9A-Fa-f]{2})')
_key_pat = re.compile(r'[A-Za-z_][A-Za-z0-9_-]*$')


def unescape(v):
    def repl(match):
        n = int(match.group(1), base=16)
        return chr(n)
    return _escape_pat.sub(repl, v)


def parse_config(s: str, source='<config>') -> Dict[str, str]:
    kv = {}
    for lineno, line in enumerate(s.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        if '=' not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split('=', 1)
        k = k.strip()
        if not _key_pat.match(k):
            raise ConfigError(f"{source}:{lineno}: invalid key {k!r}")
        if k in kv:
            raise ConfigError(f"{source}:{lineno}: duplicate key {k!r}")
        kv[k] = unescape(v.strip())
    return kv


def read_config(path) -> Dict[str, str]:
    with open(path, encoding='utf-8') as f:
        return parse_config(f.read(), source=str(path))


def parse_floats(value: str, key='value') -> Tuple[float, ...]:
    """Comma-separated floats, e.g. per-channel normalization constants"""
    try:
        return tuple(float(x) for x in value.split(','))
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated numbers, got {value!r}") from None
