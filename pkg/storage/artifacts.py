'''
JSON artifact writing shared by the cache and the pipeline outputs.
'''

import json
import logging
import os
import tempfile
from pathlib import Path

logger = logging.getLogger(__name__)


def write_json_atomic(path, payload, indent: int | None = 2) -> Path:
    """Write to a temp file next to `path`, then rename over it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=indent)
        os.replace(tmp, path)
    except (OSError, TypeError, ValueError):
        logger.exception("Failed to write %s", path)
        Path(tmp).unlink(missing_ok=True)
        raise
    return path
