"""
Configuration settings for the auto-context facade segmenter
"""

import os
from typing import Optional
from dotenv import load_dotenv

# Load environment variables
load_dotenv()


class Settings:
    """Process-wide settings read from the environment"""

    # Data Storage
    DATA_DIR: str = os.getenv("ACSEG_DATA_DIR", "data")
    MODEL_PATH: Optional[str] = os.getenv("ACSEG_MODEL_PATH")

    # Execution
    THREADS: int = int(os.getenv("ACSEG_THREADS", "1"))
    SEED: int = int(os.getenv("ACSEG_SEED", "0"))

    # Logging
    LOG_LEVEL: str = os.getenv("ACSEG_LOG_LEVEL", "INFO").upper()
    LOG_FORMAT: str = os.getenv(
        "ACSEG_LOG_FORMAT", "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )


# Global settings instance
settings = Settings()
