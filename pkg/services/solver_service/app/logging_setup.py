"""Stream logging for the solver package.

Module loggers (``app.solver``, ``app.bench_cli``, ...) are children of the
package logger, so one handler there covers every solve, table and request.
"""

import logging

SOLVER_LOGGER = __name__.rpartition(".")[0] or "app"
# Grid sizes, residuals and iteration counts go into the message itself.
LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"


def configure_solver_logging(level: int = logging.INFO) -> logging.Logger:
    """Attach a single stream handler to the package logger; calling it again only changes the level."""
    solver_logger = logging.getLogger(SOLVER_LOGGER)
    solver_logger.setLevel(level)

    if not solver_logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        solver_logger.addHandler(handler)
    for handler in solver_logger.handlers:
        handler.setLevel(level)

    solver_logger.propagate = False
    return solver_logger
