"""Line-delimited metrics logging shared by the training loops."""
from __future__ import annotations

import json
from pathlib import Path


class MetricsLog:
    """Appends one JSON object per event; optionally mirrors to memory."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, **record):
        self.rows.append(record)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
