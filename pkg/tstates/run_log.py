"""
Transformational States Run Logging
Structured JSON event logging for training, evaluation and dataset runs
"""

import os
import json
import hashlib
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional


class RunLogger:
    """
    Component logger that emits one JSON object per event.

    Events go to the `<component>.events` child of the component's named
    logger and, when a log file is configured, are appended to it as JSON
    lines. The component logger itself keeps its level and handlers.
    """

    def __init__(self, component: str, log_file: Optional[Path] = None,
                 echo: bool = True):
        """
        Args:
            component: Component name, used as the logger name
            log_file: Optional JSON-lines file receiving every event; existing content is kept
            echo: Also write events to stderr
        """
        self.component = component
        self.log_file = Path(log_file) if log_file is not None else None
        self.events: List[Dict[str, Any]] = []
        self._setup_logging(echo)

    def _setup_logging(self, echo: bool) -> None:
        """Setup logging handlers"""
        self.logger = logging.getLogger(f"{self.component}.events")
        self.logger.setLevel(logging.INFO)
        self.logger.propagate = False
        for handler in list(self.logger.handlers):
            self.logger.removeHandler(handler)
            handler.close()

        if echo:
            self.logger.addHandler(logging.StreamHandler())

        if self.log_file is not None:
            self.log_file.parent.mkdir(parents=True, exist_ok=True)
            file_handler = logging.FileHandler(self.log_file, mode="a", encoding="utf-8")
            file_handler.setFormatter(logging.Formatter("%(message)s"))
            self.logger.addHandler(file_handler)

    def log_event(self, event_type: str, message: str,
                  severity: str = "INFO", details: Optional[Dict] = None) -> Dict[str, Any]:
        """
        Log a run event with structured data

        Args:
            event_type: Type of event (e.g., "TRAIN_STEP", "VALIDATION")
            message: Human-readable message
            severity: Log level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
            details: Additional structured data

        Returns:
            The event as written
        """
        event: Dict[str, Any] = {
            "timestamp": datetime.now().isoformat(),
            "type": event_type,
            "component": self.component,
            "message": message,
            "pid": os.getpid(),
        }

        if details:
            event["details"] = details

        event["checksum"] = hashlib.sha256(
            json.dumps(event, sort_keys=True, default=str).encode()
        ).hexdigest()[:16]

        self.events.append(event)
        log_level = getattr(logging, severity.upper(), logging.INFO)
        self.logger.log(log_level, json.dumps(event, default=str))
        return event

    def close(self) -> None:
        """Flush and detach every handler"""
        for handler in list(self.logger.handlers):
            handler.flush()
            self.logger.removeHandler(handler)
            handler.close()


def compute_file_hash(path: Path, algorithm: str = "sha256") -> str:
    """Hash a file in chunks"""
    digest = hashlib.new(algorithm)
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()
