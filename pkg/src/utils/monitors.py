import logging
import os
from pathlib import Path
from typing import Dict, Tuple, Union

import colorlog

# Project root is two levels above this file (src/utils/monitors.py)
MAIN_DIR = Path(__file__).resolve().parents[2]

LOG_DIR = Path(os.getenv("FOCUSFT_LOG_DIR", MAIN_DIR / "logs"))
LOG_DIR.mkdir(parents=True, exist_ok=True)

DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
file_formatter = logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s", datefmt=DATE_FORMAT)

# name -> (emoji, console colour, level)
CATEGORIES: Dict[str, Tuple[str, str, int]] = {
    "HighLevelErrors": ("🔴", "red", logging.ERROR),
    "ModelingOperation": ("🟣", "cyan", logging.INFO),
    "DataOperation": ("🔵", "blue", logging.INFO),
    "TrainingOperation": ("🟠", "purple", logging.INFO),
    "AnalysisOperation": ("🟢", "green", logging.INFO),
    "PipelineOperation": ("🟡", "yellow", logging.INFO),
}


def setup_logger(name: str, log_file: Path, level: int = logging.INFO) -> logging.Logger:
    """
    Category logger: plain lines to log_file, emoji + colour lines to the console.

    Parameters:
        name (str): Category name, a key of CATEGORIES (unknown names get a white console style).
        log_file (Path): File under LOG_DIR receiving this category only.
        level (int): Threshold for both handlers.
    """
    emoji, colour, _ = CATEGORIES.get(name, ("⚪", "white", level))
    logger = logging.getLogger(name)
    logger.setLevel(level)
    logger.propagate = False

    if not logger.handlers:
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(level)
        file_handler.setFormatter(file_formatter)

        console_handler = logging.StreamHandler()
        console_handler.setLevel(level)
        console_handler.setFormatter(colorlog.ColoredFormatter(
            f"%(asctime)s - %(name)s - {emoji}%(log_color)s%(levelname)s - %(message)s",
            datefmt=DATE_FORMAT,
            log_colors={level_name: colour for level_name in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")},
        ))

        logger.addHandler(file_handler)
        logger.addHandler(console_handler)
    return logger


def set_console_level(level: Union[int, str]) -> None:
    """Raise or lower the console threshold of every category; files keep their level."""
    level = logging.getLevelName(level.upper()) if isinstance(level, str) else level
    for name, (_, _, floor) in CATEGORIES.items():
        for handler in logging.getLogger(name).handlers:
            if not isinstance(handler, logging.FileHandler):
                handler.setLevel(max(level, floor))


def _category(name: str) -> logging.Logger:
    return setup_logger(name, LOG_DIR / f"{name}.log", CATEGORIES[name][2])


HighLevelErrors = _category("HighLevelErrors")
ModelingOperation = _category("ModelingOperation")
DataOperation = _category("DataOperation")
TrainingOperation = _category("TrainingOperation")
AnalysisOperation = _category("AnalysisOperation")
PipelineOperation = _category("PipelineOperation")
