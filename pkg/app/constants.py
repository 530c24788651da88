"""Constantes compartilhadas da linha de comando DeskSeg."""

from __future__ import annotations

import os
from pathlib import Path

PREFETCH_DEPTH = int(os.environ.get("DESKSEG_PREFETCH_DEPTH", "4"))

ROOT_DIR = Path(__file__).resolve().parent.parent
LOGS_DIR = Path(os.environ.get("DESKSEG_LOGS_DIR", str(ROOT_DIR / "logs")))

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
