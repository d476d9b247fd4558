import logging
import os


def setup_logging(log_filename, log_dir="logs", level=logging.INFO):
    """
    Configure file logging for a pipeline stage.

    Args:
        log_filename: Name of the log file (without path, e.g., 'fit.log')
        log_dir: Directory receiving the log file, created when missing
        level: Logging level for the package loggers

    Returns:
        logging.Logger: Logger named after the log file
    """
    os.makedirs(log_dir, exist_ok=True)

    log_path = os.path.join(log_dir, log_filename)

    handler = logging.FileHandler(log_path)
    handler.setFormatter(logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s'))

    # Package modules log under "ltpdpm.*"; route them all to this run's file
    package_logger = logging.getLogger("ltpdpm")
    for existing in list(package_logger.handlers):
        if isinstance(existing, logging.FileHandler):
            package_logger.removeHandler(existing)
            existing.close()
    package_logger.addHandler(handler)
    package_logger.setLevel(level)

    logger = logging.getLogger(f"ltpdpm.{log_filename.replace('.log', '')}")
    return logger
