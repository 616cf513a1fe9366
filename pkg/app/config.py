from pathlib import Path
from pydantic_settings import BaseSettings

class Settings(BaseSettings):
    # Defaults
    DEFAULT_SEED: int = 0
    DEFAULT_CONFIG_NAME: str = "run.yaml"

    # Run ledger
    DATABASE_PATH: str = "./runs/ledger.db"

    # Logging
    LOG_FILE: str = "./runs/pipeline.log"
    LOG_LEVEL: str = "INFO"

    # Paths
    BASE_DIR: Path = Path(__file__).parent.parent
    RUNS_DIR: Path = BASE_DIR / "runs"
    TEMPLATES_DIR: Path = Path(__file__).parent / "templates"

    class Config:
        env_file = ".env"
        case_sensitive = True

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        # Create necessary directories
        self.RUNS_DIR.mkdir(parents=True, exist_ok=True)

settings = Settings()
