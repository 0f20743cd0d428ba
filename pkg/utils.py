# utils.py
import asyncio
import json
import logging
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path
from typing import Any, Iterable, Optional

import httpx

logger = logging.getLogger(__name__)

RETRYABLE_STATUS = {429, 500, 502, 503, 504}
MAX_BACKOFF = 60.0


class PipelineError(Exception):
    """Root of every error raised by the toolkit."""


class DataError(PipelineError, ValueError):
    """Bad input data, shapes or configuration."""


class NumericError(PipelineError, ArithmeticError):
    """Non-finite numbers during training."""


class NetworkError(DataError):
    pass


class RateLimited(NetworkError):
    def __init__(self, message: str, retry_after: Optional[float] = None):
        super().__init__(message)
        self.retry_after = retry_after


@dataclass
class RetryEvent:
    attempt: int
    reason: str
    delay: float


def _retry_after(response: httpx.Response) -> Optional[float]:
    value = response.headers.get("Retry-After")
    if value is None:
        return None
    try:
        return float(value)
    except ValueError:
        return None


async def api_call(method, url, params=None, headers=None, base_url='', timeout: float = 10,
                   retries: int = 5, backoff_factor: float = 0.5, max_backoff: float = MAX_BACKOFF, transport=None,
                   retry_log: Optional[list] = None):
    """Issue one HTTP request with bounded exponential backoff.

    Transport errors, 429 and 5xx responses are retried; anything else is
    returned as-is. Waits never exceed ``max_backoff`` seconds. Returns
    ``(response, data)`` where ``data`` is the decoded JSON body (or ``None``
    for non-JSON payloads).
    """
    async with httpx.AsyncClient(base_url=base_url, transport=transport, timeout=timeout) as ac:
        call_map = {
            "get": ac.get,
            "post": ac.post,
        }
        if method not in call_map:
            raise ValueError(f"Unsupported API type: {method}")

        response = None
        for attempt in range(retries):
            delay = backoff_factor * (2 ** attempt)
            try:
                response = await call_map[method](url, headers=headers, params=params)
            except httpx.TransportError as e:
                if attempt + 1 == retries:
                    raise NetworkError(f"{url}: {e!r} after {retries} attempts") from e
                reason = type(e).__name__
            else:
                if response.status_code not in RETRYABLE_STATUS:
                    break
                retry_after = _retry_after(response)
                if attempt + 1 == retries:
                    if response.status_code == 429:
                        raise RateLimited(f"{url}: rate limited after {retries} attempts",
                                          retry_after=retry_after)
                    raise NetworkError(f"{url}: HTTP {response.status_code} after {retries} attempts")
                if retry_after is not None:
                    delay = max(delay, retry_after)
                reason = f"HTTP {response.status_code}"

            delay = min(delay, max_backoff)
            logger.warning("[http] attempt %d/%d failed (%s), retrying in %.2fs",
                           attempt + 1, retries, reason, delay)
            if retry_log is not None:
                retry_log.append(RetryEvent(attempt=attempt + 1, reason=reason, delay=delay))
            await asyncio.sleep(delay)

        data = None
        if 'application/json' in response.headers.get('Content-Type', ''):
            try:
                data = response.json()
            except json.JSONDecodeError:
                data = None

    return response, data


def write_jsonl(path, records: Iterable[dict], append: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a" if append else "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def read_jsonl(path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def package_versions(names=("numpy", "pandas", "scipy", "pydantic", "sqlalchemy", "httpx")) -> dict[str, str]:
    versions = {}
    for name in names:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def write_manifest(out_dir, command: str, config: dict[str, Any], seed: int) -> Path:
    """Record everything needed to re-run a command bit-identically."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "seed": seed,
        "config": config,
        "versions": package_versions(),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str), encoding="utf-8")
    return path
