import logging
from typing import Optional

from rich.console import Console
from rich.logging import RichHandler

from ..config import DeftConfig, get_config


def setup_logging(config: Optional[DeftConfig] = None, console: Optional[Console] = None) -> None:
    """
    Sets up logging: a Rich console handler plus an optional file.
    """
    config = config or get_config()
    target_level = getattr(logging, config.log_level.value.upper(), logging.INFO)

    rich_handler = RichHandler(
        console=console or Console(stderr=True),
        show_path=False,
        rich_tracebacks=True,
        markup=False,
    )
    rich_handler.setLevel(target_level)
    rich_handler.setFormatter(logging.Formatter("%(message)s"))
    handlers_list: list[logging.Handler] = [rich_handler]

    if config.log_to_file:
        try:
            file_handler = logging.FileHandler(config.log_file_path, mode="a", encoding="utf-8")
            # the file always gets DEBUG, whatever the console level
            file_handler.setLevel(logging.DEBUG)
            file_handler.setFormatter(logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s"))
            handlers_list.append(file_handler)
        except Exception as e:
            print(f"Failed to setup file logging: {e}")

    root_logger = logging.getLogger()
    root_logger.handlers = []
    for h in handlers_list:
        root_logger.addHandler(h)
    root_logger.setLevel(min(h.level for h in handlers_list))
    logging.captureWarnings(True)
