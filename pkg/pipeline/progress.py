"""
Run-state tracking for long pipeline commands.

RunState keeps a rolling message log and wall-clock time per phase;
create_progress_callback() returns the (message, processed, total, current)
callback that generation, training and verification report through.
"""

from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, Iterator, List, Optional

logger = logging.getLogger(__name__)

MAX_MESSAGES = 50


@dataclass
class RunState:
    """State container for progress and phase timings of one command."""
    current_phase: str = ""
    messages: List[str] = field(default_factory=list)
    current_item: Optional[str] = None
    processed: int = 0
    total: int = 0
    timings: Dict[str, float] = field(default_factory=dict)
    start_time: Optional[datetime] = None
    end_time: Optional[datetime] = None

    def start(self, what: str):
        self.start_time = datetime.now()
        self.add_message(f"🚀 Starting {what}")

    def finish(self):
        self.end_time = datetime.now()
        self.current_phase = "complete"
        if self.start_time:
            duration = (self.end_time - self.start_time).total_seconds()
            self.add_message(f"🎉 Completed in {duration:.1f} seconds")

    def add_message(self, message: str):
        timestamp = datetime.now().strftime("%H:%M:%S")
        self.messages.append(f"[{timestamp}] {message}")
        if len(self.messages) > MAX_MESSAGES:
            self.messages = self.messages[-MAX_MESSAGES:]

    def update_progress(self, message: str, processed: int, total: int, current: Optional[str] = None):
        self.processed = processed
        self.total = total
        self.current_item = current
        self.add_message(message)

    def get_progress_percentage(self) -> float:
        if self.total == 0:
            return 0.0
        return (self.processed / self.total) * 100.0

    @contextmanager
    def phase(self, name: str) -> Iterator[None]:
        """Time a named phase; repeated phases accumulate"""
        previous = self.current_phase
        self.current_phase = name
        started = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - started
            self.current_phase = previous


def create_progress_callback(state: Optional[RunState] = None, log_level: int = logging.INFO):
    """Progress callback that records into `state` and forwards to the logger."""
    state = state if state is not None else RunState()

    def progress_callback(message: str, processed: int, total: int, current: Optional[str] = None):
        state.update_progress(message, processed, total, current)
        pct = f" ({state.get_progress_percentage():.0f}%)" if total else ""
        logger.log(log_level, f"{message}{pct}")

    progress_callback.state = state
    return progress_callback
