from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

from rich.console import Console
from rich.logging import RichHandler

NOISY_LOGGERS = ("langgraph", "langchain", "httpx", "asyncio")


@dataclass(frozen=True)
class RuntimeSettings:
    output_dir: Path
    log_level: str

    @staticmethod
    def default() -> "RuntimeSettings":
        output_dir = Path(os.getenv("ASYNC_BLOCKOPT_OUTPUT_DIR", "out"))
        log_level = os.getenv("ASYNC_BLOCKOPT_LOG_LEVEL", "INFO").upper()
        return RuntimeSettings(output_dir=output_dir, log_level=log_level)


def quiet_third_party_logs() -> None:
    for name in NOISY_LOGGERS:
        logging.getLogger(name).setLevel(logging.WARNING)


def configure_logging(level: str = "INFO", console: Console | None = None) -> None:
    """Route library logs through rich; safe to call more than once."""
    root = logging.getLogger()
    for handler in list(root.handlers):
        if isinstance(handler, RichHandler):
            root.removeHandler(handler)
    handler = RichHandler(console=console or Console(stderr=True), show_path=False, rich_tracebacks=True)
    handler.setFormatter(logging.Formatter("%(message)s"))
    root.addHandler(handler)
    root.setLevel(getattr(logging, level.upper(), logging.INFO))
    quiet_third_party_logs()
