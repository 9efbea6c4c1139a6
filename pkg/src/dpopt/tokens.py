"""Sentinel tokens shared by backends and mechanisms.

Tokens are opaque strings; two sentinels sit outside the string space.
"""

from __future__ import annotations


class _Sentinel:
    __slots__ = ("name",)

    def __init__(self, name: str):
        self.name = name

    def __repr__(self) -> str:
        return self.name

    def __reduce__(self):
        return self.name


EOS = _Sentinel("EOS")
BOTTOM = _Sentinel("BOTTOM")


def token_sort_key(token) -> tuple:
    """Total order on tokens: sentinels first, then strings lexicographically."""
    if isinstance(token, str):
        return (1, token)
    return (0, repr(token))


def token_to_json(token):
    return token if isinstance(token, str) else repr(token)
