"""Image/text feature providers (512-d vectors).

The real encoder is external; these are the seams. ``StubHashProvider`` maps
any string deterministically to a pseudo-random unit vector so the pipeline
runs offline. ``FileProvider`` serves precomputed vectors and
``HttpProvider`` talks to an embedding service (POST /embed).
"""

from __future__ import annotations

import base64
import hashlib
import json
import urllib.error
import urllib.request
from pathlib import Path

import numpy as np

FEATURE_DIM = 512


class ProviderError(RuntimeError):
    pass


def _check(vec, dim=FEATURE_DIM) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    if v.shape != (dim,):
        raise ProviderError(f"expected a {dim}-vector, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise ProviderError("non-finite feature")
    return v


class FeatureProvider:
    kind = "abstract"
    dim = FEATURE_DIM

    def text(self, content: str) -> np.ndarray:
        return self.embed("text", content)

    def image(self, content) -> np.ndarray:
        return self.embed("image", content)

    def embed(self, kind: str, content) -> np.ndarray:
        raise NotImplementedError


class StubHashProvider(FeatureProvider):
    """Unit vector seeded by a SHA-256 of (kind, content)."""

    kind = "stub-hash"

    def embed(self, kind, content):
        if isinstance(content, bytes):
            content = content.hex()
        digest = hashlib.sha256(f"{kind}\x00{content}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)


class FileProvider(FeatureProvider):
    """Precomputed vectors from a JSON file {"text": {...}, "image": {...}}."""

    kind = "file-precomputed"

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            raise FileNotFoundError(self.path)
        raw = json.loads(self.path.read_text())
        self.table = {k: {name: _check(v) for name, v in raw.get(k, {}).items()} for k in ("text", "image")}

    def embed(self, kind, content):
        try:
            return self.table[kind][content].copy()
        except KeyError:
            raise ProviderError(f"no precomputed {kind} feature for {content!r}") from None


class HttpProvider(FeatureProvider):
    """Client for ``POST {url}/embed`` with body {kind, content}, reply {vector}.

    Image bytes are sent base64-encoded. Each call opens its own connection,
    so one instance may be shared across threads.
    """

    kind = "http-service"

    def __init__(self, url: str, timeout: float = 10.0):
        self.url = url.rstrip("/") + "/embed"
        self.timeout = timeout

    def embed(self, kind, content):
        if isinstance(content, bytes):
            content = base64.b64encode(content).decode()
        body = json.dumps({"kind": kind, "content": content}).encode()
        req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                if resp.status != 200:
                    raise ProviderError(f"embedding service returned {resp.status}")
                payload = json.loads(resp.read())
        except urllib.error.HTTPError as e:
            raise ProviderError(f"embedding service returned {e.code}") from e
        except (urllib.error.URLError, TimeoutError, OSError) as e:
            raise ProviderError(f"embedding service unreachable: {e}") from e
        if not isinstance(payload, dict) or "vector" not in payload:
            raise ProviderError("response lacks a vector field")
        return _check(payload["vector"], self.dim)


def make_provider(spec: str | None) -> FeatureProvider:
    """'stub' (default), 'file:<path>' or an http(s) URL."""
    if not spec or spec in ("stub", "stub-hash"):
        return StubHashProvider()
    if spec.startswith("file:"):
        return FileProvider(spec[5:])
    if spec.startswith(("http://", "https://")):
        return HttpProvider(spec)
    raise ProviderError(f"unknown provider {spec!r}")
