"""Content-addressed, append-only prediction cache."""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from pathlib import Path
from typing import Mapping

from ..domain import Prediction

log = logging.getLogger(__name__)


def cache_key(model: str, prompt_text: str, inputs: Mapping[str, str], wants_probs: bool,
              temperature: float, **extra: str | None) -> str:
    """Hex digest identifying one inference request.

    ``extra`` carries fields that only some backends depend on (the mock uses
    the example id and the base prompt text); ``None`` values are dropped so
    they do not perturb keys of backends that ignore them.
    """
    payload = {
        "model": model,
        "prompt": prompt_text,
        "inputs": dict(sorted(inputs.items())),
        "wants_probs": bool(wants_probs),
        "temperature": float(temperature),
    }
    payload.update({k: v for k, v in sorted(extra.items()) if v is not None})
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class PredictionCache:
    """In-memory map of digest -> Prediction, mirrored to a JSON-lines file.

    Records are ``{"digest": ..., "prediction": {...}}``. The file is only
    appended to; on load, the first record for a digest wins.
    """

    FILENAME = "predictions.jsonl"

    def __init__(self, directory: str | Path | None = None) -> None:
        self._data: dict[str, Prediction] = {}
        self._lock = threading.Lock()
        self.path: Path | None = None
        if directory is not None:
            d = Path(directory)
            d.mkdir(parents=True, exist_ok=True)
            self.path = d / self.FILENAME
            self._load()

    def _load(self) -> None:
        if not self.path.exists():
            return
        with self.path.open(encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    self._data.setdefault(rec["digest"], Prediction.from_dict(rec["prediction"]))
                except (json.JSONDecodeError, KeyError, ValueError):
                    # torn final line from an interrupted writer
                    log.warning("skipping unreadable cache line in %s", self.path)

    def __len__(self) -> int:
        return len(self._data)

    def __contains__(self, digest: str) -> bool:
        return digest in self._data

    def get(self, digest: str) -> Prediction | None:
        return self._data.get(digest)

    def put(self, digest: str, prediction: Prediction) -> None:
        with self._lock:
            if digest in self._data:
                return
            self._data[digest] = prediction
            if self.path is not None:
                line = json.dumps({"digest": digest, "prediction": prediction.to_dict()}, ensure_ascii=False)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
