import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

TABLE_DIR_VAR = "COUNTERPOOLS_TABLE_DIR"

LOG_LEVEL = os.getenv("COUNTERPOOLS_LOG_LEVEL", "INFO")
DEFAULT_PRESET = os.getenv("COUNTERPOOLS_DEFAULT_PRESET", "64,4,0,1")


def table_dir() -> Optional[Path]:
    """Directory for lookup-table cache files, or None to build in memory.

    Read on every call rather than at import so a changed environment
    (tests, long-running sweeps) is honoured.
    """
    value = os.getenv(TABLE_DIR_VAR, "").strip()
    if not value:
        return None
    path = Path(value)
    path.mkdir(parents=True, exist_ok=True)
    return path
