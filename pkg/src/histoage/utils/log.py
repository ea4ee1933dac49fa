import logging
import os
from logging.handlers import RotatingFileHandler
from pathlib import Path

from dotenv import load_dotenv

LOG_FORMAT = '%(asctime)s %(levelname)s: %(message)s [in %(pathname)s:%(lineno)d]'
CONSOLE_FORMAT = '%(asctime)s %(levelname)s: %(message)s'


def configure_logging(log_dir=None, level=None) -> logging.Logger:
    """
    Attach a rotating file handler (under log_dir) and a console handler to the
    package logger. Safe to call more than once; handlers are replaced.
    """
    load_dotenv()
    level = level or os.getenv("HISTOAGE_LOG_LEVEL", "INFO")

    root = logging.getLogger("histoage")
    root.setLevel(level)
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    console = logging.StreamHandler()
    console.setFormatter(logging.Formatter(CONSOLE_FORMAT))
    root.addHandler(console)

    if log_dir is not None:
        Path(log_dir).mkdir(parents=True, exist_ok=True)
        file_handler = RotatingFileHandler(Path(log_dir) / "histoage.log", maxBytes=10240000, backupCount=10)
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        file_handler.setLevel(logging.INFO)
        root.addHandler(file_handler)

    root.propagate = False
    return root
