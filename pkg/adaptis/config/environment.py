"""Environment helpers shared by the command-line tools."""

from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Optional

LOGGER = logging.getLogger(__name__)

OUTPUT_ROOT_VARIABLE = "ADAPTIS_OUTPUT_ROOT"
DEVICE_VARIABLE = "ADAPTIS_DEVICE"


def load_local_env(filename: str = ".env") -> None:
    """Load environment variables from ``filename`` relative to the project root."""
    project_root = Path(__file__).resolve().parent.parent.parent
    env_path = project_root / filename
    if not env_path.is_file():
        return
    try:
        for raw_line in env_path.read_text(encoding="utf-8").splitlines():
            line = raw_line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            key, value = line.split("=", 1)
            # Variables already exported by the shell win over the file.
            os.environ.setdefault(key.strip(), value.strip().strip('"'))
    except OSError:
        LOGGER.warning("Failed to read %s", env_path)


def default_output_dir(command: str) -> Optional[Path]:
    """Return ``$ADAPTIS_OUTPUT_ROOT/<command>`` or ``None`` when the variable is unset."""
    load_local_env()
    root = os.getenv(OUTPUT_ROOT_VARIABLE)
    if not root:
        return None
    return Path(root).expanduser() / command


def resolve_device(requested: str = "auto") -> str:
    """Pick the torch device string, honouring ``$ADAPTIS_DEVICE`` for ``auto``."""
    import torch

    if requested == "auto":
        requested = os.getenv(DEVICE_VARIABLE, "auto")
    if requested == "auto":
        return "cuda" if torch.cuda.is_available() else "cpu"
    if requested.startswith("cuda") and not torch.cuda.is_available():
        LOGGER.warning("CUDA requested but unavailable; falling back to CPU.")
        return "cpu"
    return requested


__all__ = ["default_output_dir", "load_local_env", "resolve_device"]
