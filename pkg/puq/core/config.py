import os

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    PUQ_THREADS: int | None = None
    PUQ_LOG_LEVEL: str = "INFO"
    PUQ_SCORE_CHUNK_SIZE: int = 512
    PUQ_MNIST_DIR: str | None = None

    model_config = SettingsConfigDict(env_file=".env", extra="ignore")

    @property
    def evaluation_threads(self) -> int:
        value = self.PUQ_THREADS if self.PUQ_THREADS is not None else os.cpu_count() or 1
        if value < 1:
            value = 1
        return value


settings = Settings()
