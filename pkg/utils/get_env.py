import os
from dotenv import load_dotenv

load_dotenv()

DATA_DIR = os.getenv("DATA_DIR", "./data")
RUNS_DIR = os.getenv("RUNS_DIR", "./runs")
PRESET_DIR = os.getenv("PRESET_DIR") or os.path.join(os.path.dirname(os.path.dirname(__file__)), "presets")

if (seed := os.getenv("SBT_SEED")) is not None:
    if not seed.lstrip("-").isdigit():
        raise ValueError(f"SBT_SEED must be an integer, got {seed!r}")
    SBT_SEED = int(seed)
else:
    SBT_SEED = 0

SBT_LOG_LEVEL = os.getenv("SBT_LOG_LEVEL", "INFO").upper()
assert SBT_LOG_LEVEL in ("DEBUG", "INFO", "WARNING", "ERROR"), \
    f"SBT_LOG_LEVEL must be DEBUG, INFO, WARNING or ERROR, got {SBT_LOG_LEVEL}"

match os.getenv("SBT_PROGRESS", "on").lower():
    case "on" | "1" | "true":
        SBT_PROGRESS = True
    case "off" | "0" | "false":
        SBT_PROGRESS = False
    case other:
        raise ValueError(f"SBT_PROGRESS must be 'on' or 'off', got {other!r}")
