"""
Logging setup for the CLI, the API server and tools
"""
import logging
import os
from typing import Optional

from dotenv import load_dotenv
from pythonjsonlogger import jsonlogger

PLAIN_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
JSON_FORMAT = "%(asctime)s %(name)s %(levelname)s %(message)s"

_CONFIGURED = False


def configure_logging(level: Optional[str] = None, json_lines: Optional[bool] = None) -> None:
    """
    Install a single root handler. Reads HRF_LOG_LEVEL / HRF_LOG_FORMAT from the
    environment (and a local .env) when arguments are not given.
    """
    global _CONFIGURED
    load_dotenv()
    level = (level or os.environ.get("HRF_LOG_LEVEL", "INFO")).upper()
    if json_lines is None:
        json_lines = os.environ.get("HRF_LOG_FORMAT", "plain").lower() == "json"

    root = logging.getLogger()
    root.setLevel(level)
    if _CONFIGURED:
        return

    handler = logging.StreamHandler()
    if json_lines:
        handler.setFormatter(jsonlogger.JsonFormatter(JSON_FORMAT))
    else:
        handler.setFormatter(logging.Formatter(PLAIN_FORMAT))
    root.addHandler(handler)
    _CONFIGURED = True
