from pydantic_settings import BaseSettings
from pydantic import ConfigDict

from typing import List, Optional


class Settings(BaseSettings):
    app_name: str = "Domain Adaptation NMT"
    app_version: str = "1.0.0"
    debug: bool = False
    environment: str = "development"
    log_level: str = "WARNING"

    host: str = "0.0.0.0"
    port: int = 8000

    # 32 for training, 64 for verification runs
    default_precision: int = 32

    runs_dir: str = "runs"
    serve_run_dir: Optional[str] = None
    allowed_origins_str: str = "http://localhost:3000,http://localhost:8000"

    decode_workers: int = 1
    progress_bars: bool = True

    model_config = ConfigDict(
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )

    @property
    def allowed_origins(self) -> List[str]:
        return [origin.strip() for origin in self.allowed_origins_str.split(",") if origin.strip()]

    @property
    def logging_level(self) -> str:
        return "INFO" if self.debug else self.log_level.upper()


settings = Settings()
