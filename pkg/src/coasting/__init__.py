"""Coasting-behavior analytics for classroom practice logs.

Pipeline: ingest events -> infer class sessions -> measure per-student
coasting -> reliability (G-theory) and random-intercept models.
"""

__version__ = "0.1.0"

from coasting.kernels import BACKEND  # noqa: E402
from coasting.measures import CoastingRecord, measure_all  # noqa: E402
from coasting.model import EventTable, IngestError, SchoolCalendar  # noqa: E402
from coasting.sessions import SessionType, infer_sessions  # noqa: E402

__all__ = [
    "BACKEND",
    "CoastingRecord",
    "EventTable",
    "IngestError",
    "SchoolCalendar",
    "SessionType",
    "infer_sessions",
    "measure_all",
    "__version__",
]
