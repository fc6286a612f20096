"""
Configuration management for roadsplat
Handles environment-specific runtime settings and validation
"""

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict
import os


class Settings(BaseSettings):
    """Runtime settings with environment-specific overrides"""

    model_config = SettingsConfigDict(
        env_file=".env", env_prefix="ROADSPLAT_", case_sensitive=True, extra="ignore"
    )

    # Basic Configuration
    ENVIRONMENT: str = Field(default="development")
    DEBUG: bool = Field(default=False)
    LOG_LEVEL: str = Field(default="INFO")

    # Execution Configuration
    THREADS: int = Field(default=4, ge=1)
    RENDER_TILE_ROWS: int = Field(default=64, ge=1)
    BEV_CHUNK_PIXELS: int = Field(default=2000, ge=16)
    PROGRESS_BARS: bool = Field(default=True)

    # Reconstruction defaults (CLI flags override)
    DEFAULT_RESOLUTION: float = Field(default=0.05, gt=0)
    DEFAULT_EXPAND: float = Field(default=10.0, ge=0)
    DEFAULT_SEED: int = Field(default=0)

    @field_validator("ENVIRONMENT")
    @classmethod
    def validate_environment(cls, v: str) -> str:
        allowed = ["development", "staging", "production"]
        v = v.lower()
        if v not in allowed:
            raise ValueError(f"ENVIRONMENT must be one of {allowed}")
        return v

    @field_validator("LOG_LEVEL")
    @classmethod
    def validate_log_level(cls, v) -> str:
        allowed = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]

        if not isinstance(v, str):
            v = str(v)

        v_upper = v.upper()
        if v_upper not in allowed:
            raise ValueError(f"LOG_LEVEL must be one of {allowed}")
        return v_upper


class DevelopmentSettings(Settings):
    """Development-specific settings"""

    DEBUG: bool = True
    THREADS: int = 2


class ProductionSettings(Settings):
    """Production-specific settings"""

    DEBUG: bool = False
    LOG_LEVEL: str = "INFO"
    PROGRESS_BARS: bool = False


def get_settings() -> Settings:
    """Get settings based on environment"""
    environment = os.getenv("ROADSPLAT_ENVIRONMENT", "development").lower()

    if environment == "production":
        return ProductionSettings()
    elif environment == "development":
        return DevelopmentSettings()
    else:
        return Settings()


# Global settings instance
settings = get_settings()
