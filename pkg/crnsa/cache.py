"""Calibration cache for expensive Monte Carlo constants."""

import hashlib
import json
import logging
import os
import shutil
import time
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from .errors import CacheCorruptionError

logger = logging.getLogger(__name__)

CACHE_VERSION = 1
CACHE_ENV = "CRNSA_CACHE_DIR"


class CacheJSONEncoder(json.JSONEncoder):
    """JSON encoder that understands numpy scalars and arrays and paths."""

    def default(self, obj):
        if isinstance(obj, np.integer):
            return int(obj)
        elif isinstance(obj, np.floating):
            return float(obj)
        elif isinstance(obj, np.ndarray):
            return obj.tolist()
        elif isinstance(obj, Path):
            return str(obj)
        return super().default(obj)


def default_cache_dir() -> Path:
    """``$CRNSA_CACHE_DIR`` or ``~/.cache/crnsa``."""
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "crnsa"


def parameter_key(params: Dict[str, Any]) -> str:
    """16-character sha256 of the canonical JSON form of ``params``."""
    payload = json.dumps(params, sort_keys=True, separators=(',', ':'), cls=CacheJSONEncoder)
    return hashlib.sha256(payload.encode('utf-8')).hexdigest()[:16]


class CalibrationCache:
    """Stores calibration results keyed by a hash of the parameters that produced them.

    The manifest indexes every entry; entries live as one JSON file each
    under ``entries/``. A manifest or entry that cannot be read is logged
    and recomputed, never fatal.
    """

    def __init__(self, cache_dir: Optional[Path] = None):
        self.cache_dir = Path(cache_dir) if cache_dir is not None else default_cache_dir()
        self.manifest_file = self.cache_dir / "manifest.json"
        self._init_cache_dir()
        self.manifest = self._load_manifest()

    def _init_cache_dir(self) -> None:
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        (self.cache_dir / "entries").mkdir(exist_ok=True)

    def _load_manifest(self) -> Dict[str, Any]:
        """Load the manifest from disk."""
        if not self.manifest_file.exists():
            return self._create_empty_manifest()

        try:
            with open(self.manifest_file, 'r', encoding='utf-8') as f:
                manifest = json.load(f)

            if manifest.get('version') != CACHE_VERSION:
                logger.warning(f"Cache version mismatch. Expected {CACHE_VERSION}, got {manifest.get('version')}. Clearing cache.")
                return self._create_empty_manifest()

            return manifest

        except (json.JSONDecodeError, OSError) as e:
            logger.warning(f"Failed to load cache manifest: {e}. Creating new cache.")
            return self._create_empty_manifest()

    def _create_empty_manifest(self) -> Dict[str, Any]:
        return {
            "version": CACHE_VERSION,
            "entries": {},
        }

    def _save_manifest(self) -> None:
        """Save the manifest to disk atomically."""
        try:
            temp_file = self.manifest_file.with_suffix('.tmp')
            with open(temp_file, 'w', encoding='utf-8') as f:
                json.dump(self.manifest, f, indent=2, separators=(',', ': '), cls=CacheJSONEncoder)
            temp_file.replace(self.manifest_file)
        except OSError as e:
            logger.error(f"Failed to save cache manifest: {e}")

    def _entry_file(self, key: str) -> Path:
        return self.cache_dir / "entries" / f"{key}.json"

    def _read_entry(self, key: str) -> Dict[str, Any]:
        try:
            with open(self._entry_file(key), 'r', encoding='utf-8') as f:
                entry = json.load(f)
        except (json.JSONDecodeError, OSError) as e:
            raise CacheCorruptionError(f"cache entry {key} unreadable: {e}") from e
        if entry.get("version") != CACHE_VERSION or "value" not in entry:
            raise CacheCorruptionError(f"cache entry {key} has an unexpected layout")
        return entry

    def get(self, kind: str, params: Dict[str, Any]) -> Optional[Dict[str, Any]]:
        """Cached value for ``(kind, params)`` or None.

        Args:
            kind: Calibration family, e.g. ``"queue-cost"``
            params: Parameters that determine the value

        Returns:
            The stored value dictionary, or None on a miss or a corrupt entry
        """
        key = parameter_key({"kind": kind, **params})
        if key not in self.manifest["entries"]:
            return None
        try:
            entry = self._read_entry(key)
        except CacheCorruptionError as e:
            logger.warning(f"{e}. Recomputing.")
            self.manifest["entries"].pop(key, None)
            self._save_manifest()
            return None
        logger.info(f"Calibration cache hit for {kind} ({key})")
        return entry["value"]

    def put(self, kind: str, params: Dict[str, Any], value: Dict[str, Any]) -> str:
        """Store ``value`` and return its key."""
        key = parameter_key({"kind": kind, **params})
        entry = {
            "version": CACHE_VERSION,
            "kind": kind,
            "params": params,
            "value": value,
            "cached_at": time.time(),
        }
        try:
            temp_file = self._entry_file(key).with_suffix('.tmp')
            with open(temp_file, 'w', encoding='utf-8') as f:
                json.dump(entry, f, indent=2, separators=(',', ': '), cls=CacheJSONEncoder)
            temp_file.replace(self._entry_file(key))
        except (OSError, TypeError) as e:
            logger.error(f"Failed to cache {kind} {key}: {e}")
            return key
        self.manifest["entries"][key] = {"kind": kind, "cached_at": entry["cached_at"]}
        self._save_manifest()
        return key

    def clear(self) -> None:
        """Remove every cached entry."""
        entries_dir = self.cache_dir / "entries"
        if entries_dir.exists():
            shutil.rmtree(entries_dir)
        self.manifest = self._create_empty_manifest()
        self._init_cache_dir()
        self._save_manifest()
        logger.info("Calibration cache cleared")

    def get_cache_stats(self) -> Dict[str, Any]:
        """Entry counts per kind and total size on disk."""
        kinds: Dict[str, int] = {}
        for info in self.manifest["entries"].values():
            kinds[info["kind"]] = kinds.get(info["kind"], 0) + 1
        size = sum(p.stat().st_size for p in self.cache_dir.rglob("*.json") if p.is_file())
        return {
            "cache_dir": str(self.cache_dir),
            "entries": len(self.manifest["entries"]),
            "kinds": kinds,
            "cache_size_mb": size / (1024 * 1024),
        }
