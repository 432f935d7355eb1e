"""Part-area ratios for fine-grained masks.

A ratio says what share of the map a part (an apple's stem, say) should
cover. Ratios come from a static JSON table or from an external planner
service that answers ``POST {"concept", "part"}`` with ``{"ratio"}``.
Planner failures fall back to the table.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from ..core import SCGError

log = logging.getLogger(__name__)

PLANNER_URL_ENV = "SCG_PLANNER_URL"
PLANNER_TIMEOUT_ENV = "SCG_PLANNER_TIMEOUT"
DEFAULT_TIMEOUT = 2.0


class UnresolvedRatioError(SCGError, LookupError):
    pass


class PlannerError(SCGError, RuntimeError):
    pass


@dataclass(frozen=True)
class RatioPlan:
    concept: str
    part: str
    ratio: float
    source: str = "table"  # table | planner | fallback
    note: str = ""

    def __post_init__(self):
        if not (0.0 < self.ratio <= 1.0):
            raise ValueError(f"ratio must lie in (0, 1], got {self.ratio}")


class RatioTable:
    def __init__(self, ratios: dict[str, dict[str, float]]):
        self._ratios = {c.lower(): {p.lower(): float(r) for p, r in parts.items()} for c, parts in ratios.items()}
        for concept, parts in self._ratios.items():
            for part, r in parts.items():
                if not (0.0 < r <= 1.0):
                    raise ValueError(f"table ratio for {concept}/{part} outside (0, 1]: {r}")

    @classmethod
    def load(cls, path=None) -> "RatioTable":
        if path is None:
            text = resources.files("selfcoherence.scg").joinpath("data/ratios.json").read_text()
        else:
            text = Path(path).read_text()
        data = json.loads(text)
        return cls(data.get("ratios", data))

    def get(self, concept: str, part: str) -> float | None:
        return self._ratios.get(concept.lower(), {}).get(part.lower())

    def __contains__(self, key) -> bool:
        return self.get(*key) is not None


class PlannerClient:
    """JSON-over-HTTP ratio planner. One request in flight per endpoint."""

    _locks: dict[str, threading.Lock] = {}
    _locks_guard = threading.Lock()

    def __init__(self, url: str, timeout: float = DEFAULT_TIMEOUT):
        self.url = url
        self.timeout = timeout
        with PlannerClient._locks_guard:
            self._lock = PlannerClient._locks.setdefault(url, threading.Lock())

    @classmethod
    def from_env(cls, config: dict | None = None) -> "PlannerClient | None":
        config = config or {}
        url = os.environ.get(PLANNER_URL_ENV) or config.get("planner_url")
        if not url:
            return None
        timeout = float(os.environ.get(PLANNER_TIMEOUT_ENV) or config.get("planner_timeout", DEFAULT_TIMEOUT))
        return cls(url, timeout)

    def request_ratio(self, concept: str, part: str) -> float:
        body = json.dumps({"concept": concept, "part": part}).encode("utf-8")
        req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"}, method="POST")
        with self._lock:
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    status = resp.status
                    payload = resp.read()
            except urllib.error.HTTPError as exc:
                raise PlannerError(f"planner returned HTTP {exc.code}") from exc
            except (urllib.error.URLError, TimeoutError, OSError) as exc:
                raise PlannerError(f"planner unreachable: {exc}") from exc
        if not 200 <= status < 300:
            raise PlannerError(f"planner returned HTTP {status}")
        try:
            ratio = json.loads(payload)["ratio"]
        except (ValueError, KeyError, TypeError) as exc:
            raise PlannerError("planner response is not {\"ratio\": number}") from exc
        if isinstance(ratio, bool) or not isinstance(ratio, (int, float)):
            raise PlannerError(f"planner ratio is not a number: {ratio!r}")
        if not (0.0 < ratio <= 1.0):
            raise PlannerError(f"planner ratio {ratio} outside (0, 1]")
        return float(ratio)


def plan_ratio(
    concept: str,
    part: str,
    source: str = "static-table",
    table: RatioTable | None = None,
    client: PlannerClient | None = None,
) -> RatioPlan:
    if source not in ("static-table", "external-planner"):
        raise ValueError(f"unknown ratio source {source!r}")
    table = table if table is not None else RatioTable.load()
    note = ""
    if source == "external-planner":
        if client is None:
            note = "no planner endpoint configured"
        else:
            try:
                return RatioPlan(concept, part, client.request_ratio(concept, part), "planner")
            except PlannerError as exc:
                note = str(exc)
        log.warning("ratio planner fallback for %s/%s: %s", concept, part, note)
    ratio = table.get(concept, part)
    if ratio is None:
        raise UnresolvedRatioError(f"no ratio for part {part!r} of {concept!r}" + (f" ({note})" if note else ""))
    return RatioPlan(concept, part, ratio, "fallback" if note else "table", note)
