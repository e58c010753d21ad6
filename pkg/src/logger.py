import logging
import sys

_MARKERS = {
    logging.DEBUG: "[i]",
    logging.INFO: "[*]",
    logging.WARNING: "[!]",
    logging.ERROR: "[!!]",
    logging.CRITICAL: "[!!]",
}


class MarkerFormatter(logging.Formatter):
    """Prefixes each record with a short severity marker."""

    def format(self, record: logging.LogRecord) -> str:
        marker = _MARKERS.get(record.levelno, "[*]")
        return f"{marker} {super().format(record)}"


def setup_logging(level: str | int = "INFO") -> None:
    handler = logging.StreamHandler(sys.stdout)
    handler.setFormatter(MarkerFormatter("%(message)s"))
    root = logging.getLogger("src")
    root.handlers[:] = [handler]
    root.setLevel(level if isinstance(level, int) else level.upper())
    root.propagate = False
