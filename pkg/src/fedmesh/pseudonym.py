"""Identifier normalisation and HMAC-SHA256 case-token derivation.

A case token is the lowercase-hex HMAC-SHA256 of the canonical (trimmed,
uppercased) identifier under a node-held secret key. The token links a case
across organisations without revealing the identifier itself.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .errors import InvalidIdentifier, SecretNotFound, WeakSecret

TOKEN_RE = re.compile(r"^[0-9a-f]{64}$")

MIN_KEY_BYTES = 16

ENV_PREFIX = "FEDMESH_SECRET_"


@dataclass(frozen=True)
class CanonicalId:
    """Identifier in canonical form: trimmed, uppercased, non-empty."""

    value: str

    def __post_init__(self) -> None:
        if not self.value:
            raise InvalidIdentifier("identifier is empty")
        if self.value != self.value.strip().upper():
            raise InvalidIdentifier(f"identifier {self.value!r} is not in canonical form")


@dataclass(frozen=True)
class SecretKey:
    """Named key material. The material never appears in repr or logs."""

    name: str
    material: bytes = field(repr=False)

    def __post_init__(self) -> None:
        if len(self.material) < MIN_KEY_BYTES:
            raise WeakSecret(
                f"secret {self.name!r} is {len(self.material)} bytes; "
                f"minimum is {MIN_KEY_BYTES}"
            )


@dataclass(frozen=True)
class CaseToken:
    """64-character lowercase-hex pseudonymous token."""

    hex: str

    def __post_init__(self) -> None:
        if not TOKEN_RE.fullmatch(self.hex):
            raise ValueError("token must be 64 lowercase hex characters")

    def __str__(self) -> str:
        return self.hex


def normalize_id(raw: str) -> CanonicalId:
    """Trim and uppercase an identifier; idempotent on canonical input."""
    trimmed = raw.strip()
    if not trimmed:
        raise InvalidIdentifier("identifier is empty after trimming")
    return CanonicalId(trimmed.upper())


def derive_token(key: SecretKey, cid: CanonicalId) -> CaseToken:
    """HMAC-SHA256 of the UTF-8 canonical identifier, rendered lowercase hex."""
    digest = hmac.new(key.material, cid.value.encode("utf-8"), hashlib.sha256)
    return CaseToken(digest.hexdigest())


@dataclass(frozen=True)
class SecretSource:
    """Node-local secret resolution.

    A name resolves to a configured key file when one is declared, else to
    the ``FEDMESH_SECRET_<NAME>`` environment variable. Key files may end
    with a trailing newline, which is stripped.
    """

    files: Mapping[str, Path] = field(default_factory=dict)
    env: Mapping[str, str] | None = None

    def resolve(self, name: str) -> bytes:
        path = self.files.get(name)
        if path is not None:
            if not Path(path).is_file():
                raise SecretNotFound(f"secret {name!r}: key file not found")
            return Path(path).read_bytes().rstrip(b"\r\n")
        env = os.environ if self.env is None else self.env
        var = ENV_PREFIX + name.upper()
        if var not in env:
            raise SecretNotFound(f"secret {name!r} not found (no key file, no ${var})")
        return env[var].encode("utf-8")


def load_secret(name: str, source: SecretSource) -> SecretKey:
    """Resolve named key material from the node-local source."""
    return SecretKey(name=name, material=source.resolve(name))
