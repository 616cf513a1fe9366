import logging
import sys
from pathlib import Path
from typing import Optional
from app.config import settings

class CustomLogger:
    _instance: Optional['CustomLogger'] = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __init__(self):
        if not hasattr(self, 'logger'):
            self.logger = logging.getLogger('DualDomainWSOD')
            self.logger.setLevel(getattr(logging, settings.LOG_LEVEL))
            self.logger.propagate = False

            # File handler
            log_path = Path(settings.LOG_FILE)
            log_path.parent.mkdir(parents=True, exist_ok=True)

            file_handler = logging.FileHandler(log_path, encoding='utf-8')
            file_handler.setLevel(logging.DEBUG)

            # Console handler
            console_handler = logging.StreamHandler(sys.stdout)
            console_handler.setLevel(logging.INFO)

            # Formatter
            formatter = logging.Formatter(
                '%(asctime)s - %(name)s - %(levelname)s - [%(filename)s:%(lineno)d] - %(message)s',
                datefmt='%Y-%m-%d %H:%M:%S'
            )

            file_handler.setFormatter(formatter)
            console_handler.setFormatter(formatter)

            self.logger.addHandler(file_handler)
            self.logger.addHandler(console_handler)

    def info(self, message: str, **kwargs):
        self.logger.info(message, extra=kwargs, stacklevel=2)

    def debug(self, message: str, **kwargs):
        self.logger.debug(message, extra=kwargs, stacklevel=2)

    def warning(self, message: str, **kwargs):
        self.logger.warning(message, extra=kwargs, stacklevel=2)

    def error(self, message: str, **kwargs):
        self.logger.error(message, extra=kwargs, stacklevel=2)

    def exception(self, message: str, **kwargs):
        self.logger.exception(message, extra=kwargs, stacklevel=2)

    def critical(self, message: str, **kwargs):
        self.logger.critical(message, extra=kwargs, stacklevel=2)

    def log_stage(self, run_id: str, stage: str, status: str, metric: Optional[float] = None):
        message = f"Run {run_id} - Stage: {stage} - Status: {status}"
        if metric is not None:
            message += f" - mAP: {metric:.4f}"
        self.logger.info(message, stacklevel=2)

    def log_training_step(self, component: str, step: int, loss: float, lr: float):
        self.logger.debug(f"{component} step {step} - loss: {loss:.6f} - lr: {lr:.2e}", stacklevel=2)

    def log_checkpoint(self, run_id: str, tag: str, path: str):
        self.logger.info(f"Checkpoint saved - Run: {run_id} - Tag: {tag} - Path: {path}", stacklevel=2)

logger = CustomLogger()
