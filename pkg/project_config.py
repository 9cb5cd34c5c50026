"""Configuration settings for the robust control toolkit."""

import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

class Config:
    """Base configuration class with environment-based settings."""

    # Base directory
    BASE_DIR = Path(__file__).parent

    # Output locations
    RESULTS_DIR = Path(os.environ.get('RC_RESULTS_DIR', BASE_DIR / "results"))
    LOGS_DIR = Path(os.environ.get('RC_LOGS_DIR', BASE_DIR / "logs"))
    SCENE_DIR = BASE_DIR / "scenes"

    # Estimation
    LAMBDA = float(os.environ.get('RC_LAMBDA', 1.0))
    DELTA = float(os.environ.get('RC_DELTA', 0.9))
    D_MAX = int(os.environ.get('RC_D_MAX', 8))
    TOLERANCE = float(os.environ.get('RC_TOLERANCE', 1e-9))
    POLYTOPE_MODE = os.environ.get('RC_POLYTOPE_MODE', 'box')
    # Test level used by the model adequacy check
    DELTA_TEST = float(os.environ.get('RC_DELTA_TEST', 0.05))

    # Prediction
    SUBSTEPS = int(os.environ.get('RC_SUBSTEPS', 4))
    PREDICTOR_MODE = os.environ.get('RC_PREDICTOR_MODE', 'auto')
    MAX_CONDITION = float(os.environ.get('RC_MAX_CONDITION', 1e8))

    # Planning
    GAMMA = float(os.environ.get('RC_GAMMA', 0.9))
    BUDGET = int(os.environ.get('RC_BUDGET', 100))
    ORACLE_BUDGET_FACTOR = int(os.environ.get('RC_ORACLE_BUDGET_FACTOR', 10))

    # Batch execution
    N_JOBS = int(os.environ.get('RC_N_JOBS', 1))
    BASE_SEED = int(os.environ.get('RC_BASE_SEED', 0))
    SUBOPTIMALITY_BUCKETS = (5, 10, 20, 40, 80)

    # Validate ranges
    if not 0.0 < DELTA < 1.0:
        raise ValueError("RC_DELTA must lie in (0, 1)")
    if not 0.0 < DELTA_TEST < 1.0:
        raise ValueError("RC_DELTA_TEST must lie in (0, 1)")
    if not 0.0 < GAMMA < 1.0:
        raise ValueError("RC_GAMMA must lie in (0, 1)")
    if LAMBDA <= 0.0:
        raise ValueError("RC_LAMBDA must be positive")
    if BUDGET < 1 or SUBSTEPS < 1:
        raise ValueError("RC_BUDGET and RC_SUBSTEPS must be at least 1")
    if PREDICTOR_MODE not in ('simple', 'enhanced', 'auto'):
        raise ValueError("RC_PREDICTOR_MODE must be one of simple, enhanced, auto")
    if POLYTOPE_MODE not in ('box', 'tight'):
        raise ValueError("RC_POLYTOPE_MODE must be one of box, tight")

    # Logging
    LOG_LEVEL = os.environ.get('LOG_LEVEL', 'INFO')
    LOG_FILE = LOGS_DIR / 'robust_control.log'
    LOG_MAX_BYTES = int(os.environ.get('LOG_MAX_BYTES', 10485760))  # 10MB
    LOG_BACKUP_COUNT = int(os.environ.get('LOG_BACKUP_COUNT', 5))

class DevelopmentConfig(Config):
    """Development configuration."""
    LOG_LEVEL = os.environ.get('LOG_LEVEL', 'DEBUG')

class TestingConfig(Config):
    """Testing configuration."""
    BUDGET = 20
    N_JOBS = 1
    LOG_LEVEL = 'WARNING'

class ExperimentConfig(Config):
    """Full-scale experiment configuration."""
    BUDGET = 100
    N_JOBS = int(os.environ.get('RC_N_JOBS', -1))

# Configuration mapping
config = {
    'development': DevelopmentConfig,
    'testing': TestingConfig,
    'experiment': ExperimentConfig,
    'default': Config
}
