"""Chat-completion clients used by context generation.

Both expose ``complete(system, user, key=None) -> str``.
"""

from __future__ import annotations

import json
import os
import threading
import urllib.error
import urllib.request
from pathlib import Path
from typing import Dict, List, Optional


class ReplayClient:
    """Offline client replaying stored completions.

    Fixtures map a record key (the ``known_id`` as a string) to the list of
    completions returned on successive calls for that key. Running past the
    end of a list is an error.
    """

    def __init__(self, fixtures: Dict[str, List[str]]):
        self.fixtures = {str(k): list(v) for k, v in fixtures.items()}
        self._calls: Dict[str, int] = {}
        self._lock = threading.Lock()
        self.requests: List[tuple] = []

    @classmethod
    def from_file(cls, path) -> "ReplayClient":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def complete(self, system: str, user: str, key: Optional[str] = None) -> str:
        with self._lock:
            self.requests.append((key, system, user))
            replies = self.fixtures.get(str(key))
            if replies is None:
                raise LookupError(f"no fixture completions for record {key}")
            n = self._calls.get(str(key), 0)
            if n >= len(replies):
                raise LookupError(f"fixture completions for record {key} exhausted after {n} calls")
            self._calls[str(key)] = n + 1
            return replies[n]


class HttpChatClient:
    """OpenAI-compatible ``/chat/completions`` client.

    Configured from ``RAGPROBE_BASE_URL``, ``RAGPROBE_MODEL`` and
    ``RAGPROBE_API_KEY`` (falling back to ``OPENAI_API_KEY``).
    """

    def __init__(self, base_url: str, model: str, api_key: str, timeout: float = 60.0,
                 max_in_flight: int = 4):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self._slots = threading.BoundedSemaphore(max_in_flight)

    @classmethod
    def from_env(cls, **kwargs) -> "HttpChatClient":
        key = os.environ.get("RAGPROBE_API_KEY") or os.environ.get("OPENAI_API_KEY")
        if not key:
            raise RuntimeError("set RAGPROBE_API_KEY (or OPENAI_API_KEY) to use the HTTP client")
        return cls(
            os.environ.get("RAGPROBE_BASE_URL", "https://api.openai.com/v1"),
            os.environ.get("RAGPROBE_MODEL", "gpt-4"),
            key,
            **kwargs,
        )

    def request_body(self, system: str, user: str) -> dict:
        return {
            "model": self.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        }

    def complete(self, system: str, user: str, key: Optional[str] = None) -> str:
        req = urllib.request.Request(
            self.base_url + "/chat/completions",
            data=json.dumps(self.request_body(system, user)).encode("utf-8"),
            headers={"Content-Type": "application/json", "Authorization": f"Bearer {self.api_key}"},
            method="POST",
        )
        with self._slots:
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
            except urllib.error.HTTPError as e:
                raise RuntimeError(f"HTTP {e.code} from {self.base_url}: {e.reason}") from e
        try:
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise RuntimeError(f"unexpected completion payload: {str(payload)[:200]}") from None
