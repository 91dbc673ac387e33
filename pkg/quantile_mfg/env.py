from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from dotenv import dotenv_values


def _load_dotenv(path: Path) -> dict[str, str]:
    if not path.exists():
        return {}
    # Hand-edited .env files are not always UTF-8; keys are ASCII.
    for enc in ("utf-8", "gbk"):
        try:
            vals = dotenv_values(path, encoding=enc)
        except UnicodeDecodeError:
            continue
        return {str(k).strip(): str(v).strip() for k, v in vals.items() if k is not None and v is not None}
    return {}


@dataclass(frozen=True)
class Settings:
    repo_root: Path
    env: dict[str, str]

    def _get(self, key: str) -> str:
        return (self.env.get(key) or "").strip()

    def _int(self, key: str, default: int, minimum: int) -> int:
        raw = self._get(key)
        if not raw:
            return default
        try:
            v = int(float(raw)) if "e" in raw.lower() else int(raw)
        except ValueError:
            raise RuntimeError(f"Bad `{key}`={raw!r}: expected an integer") from None
        if v < minimum:
            raise RuntimeError(f"Bad `{key}`={raw!r}: must be >= {minimum}")
        return v

    @property
    def log_level(self) -> str:
        return (self._get("QMFG_LOG_LEVEL") or "INFO").upper()

    @property
    def workers(self) -> int:
        return self._int("QMFG_WORKERS", 1, 1)

    @property
    def memory_budget(self) -> int:
        return self._int("QMFG_MEMORY_BUDGET", 200_000_000, 1)

    @property
    def progress(self) -> bool:
        raw = self._get("QMFG_PROGRESS")
        if not raw:
            return True
        if raw.lower() in {"1", "true", "yes", "on"}:
            return True
        if raw.lower() in {"0", "false", "no", "off"}:
            return False
        raise RuntimeError(f"Bad `QMFG_PROGRESS`={raw!r}: expected 1 or 0")


def load_settings(repo_root: Path | None = None, environ: dict[str, str] | None = None) -> Settings:
    root = repo_root or Path(__file__).resolve().parents[1]
    env = {k: v for k, v in (os.environ if environ is None else environ).items() if k.startswith("QMFG_")}
    # Process environment wins over .env.
    merged = {**_load_dotenv(root / ".env"), **env}
    return Settings(repo_root=root, env=merged)
