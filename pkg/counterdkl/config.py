"""
Configuration module for counterdkl
Runtime settings for the library, the CLI and the benchmark harness
"""

from pathlib import Path

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Settings class using Pydantic to validate and load configuration from the environment / .env file"""

    model_config = SettingsConfigDict(
        env_prefix="COUNTERDKL_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Application settings
    app_name: str = Field(default="counterdkl", description="Application name")
    app_version: str = Field(default="1.0.0", description="Library version written into run manifests")
    debug: bool = Field(default=False, description="Debug mode; logs at DEBUG when no level is given")
    environment: str = Field(default="local", description="Environment label")

    # Output settings
    output_dir: str = Field(default="./outputs", description="Default directory for benchmark outputs")
    csv_float_format: str = Field(default="%.17g", description="Float format for CSV files (round-trip exact)")

    # Numerical settings
    jitter_base: float = Field(default=1e-8, ge=0.0, description="First jitter added before Cholesky")
    jitter_factor: float = Field(default=10.0, gt=1.0, description="Jitter escalation factor per retry")
    jitter_cap: float = Field(default=1e-2, gt=0.0, description="Largest jitter tried before giving up")
    coregion_diag_floor: float = Field(default=1e-6, gt=0.0, description="Floor on the diagonal term of B")
    credible_z: float = Field(default=1.96, gt=0.0, description="Normal quantile of the 95% bands")
    ci_z: float = Field(default=1.96, gt=0.0, description="Normal quantile of the confidence intervals in aggregates.csv")

    # Logging settings
    log_level: str = Field(default="INFO", description="Logging level")
    log_file: str = Field(default="", description="Log file, e.g. ./logs/counterdkl.log; empty disables the file sink")
    log_rotation: str = Field(default="10 MB", description="Rotation policy of the file sink")

    @property
    def output_path(self) -> Path:
        """Default output directory as a Path"""
        return Path(self.output_dir)


# Settings instance
settings = Settings()
