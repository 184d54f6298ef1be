"""
Configuration module for the clustered NOMA federated learning simulator

Contains default settings, physical constants and configuration parameters
used when an experiment file leaves a field out.
"""

import logging
import os
from pathlib import Path


class Config:
    """Configuration class containing all application defaults."""

    # Device and link defaults (desk-scale reproduction of the reference setup)
    DEFAULT_ENERGY_COEFF = 1e-28  # kappa, effective switched capacitance
    DEFAULT_CYCLES_PER_BIT = 1e7  # varsigma
    DEFAULT_CPU_HZ_RANGE = (1.8e9, 2.2e9)  # vartheta
    DEFAULT_MODEL_BITS = 1.1e6  # D, uploaded model size
    DEFAULT_PATHLOSS_EXP = 2.0
    DEFAULT_CELL_RADIUS_M = 600.0
    DEFAULT_MIN_DISTANCE_M = 10.0
    DEFAULT_BANDWIDTH_HZ = 1e6  # per sub-channel
    DEFAULT_NOISE_PSD_DBM_HZ = -174.0
    DEFAULT_WAVELENGTH_M = 0.125  # 2.4 GHz carrier
    DEFAULT_ANTENNA_GAIN = 1.0

    # Allocation settings
    DEFAULT_P_MAX_W = 1.0
    DEFAULT_FIXED_POWER_FRACTION = 0.5
    DEFAULT_T_MAX_S = 6.0
    DEFAULT_NUM_SUBCHANNELS = 5
    MATCHING_MAX_CYCLES = 100
    BRUTE_FORCE_MAX_USERS = 12
    FEASIBILITY_RTOL = 1e-6

    # Concentration estimation (BFGS) settings
    DEFAULT_ESTIMATION_TOL = 1e-6
    DEFAULT_ESTIMATION_MAX_ITERS = 500
    ARMIJO_C = 1e-4
    BACKTRACK_FACTOR = 0.5
    MAX_BACKTRACKS = 60

    # Clustering settings
    DEFAULT_KMEANS_RESTARTS = 20
    DEFAULT_KMEANS_MAX_ITERS = 200
    EIGENGAP_AMBIGUITY_RATIO = 0.9  # top gap within 10% of the runner-up
    DEFAULT_Z_MIN = 1
    DEFAULT_Z_MAX = 10
    DEFAULT_KAPPA_S = 1.0
    DEFAULT_DELTA = 0.05

    # Training settings
    DEFAULT_LEARNING_RATE = 0.1
    DEFAULT_LOCAL_EPOCHS = 1
    DEFAULT_BATCH_SIZE = 16
    DEFAULT_ROUNDS = 20
    DEFAULT_LEARNING_RATE_GRID = (1e-3, 5e-3, 1e-2, 5e-2, 1e-1, 5e-1)
    MOVING_AVERAGE_WINDOW = 5
    REFERENCE_OPTIMUM_MAX_ITERS = 500

    # Data partition settings
    DEFAULT_NUM_USERS = 30
    DEFAULT_NUM_CLASSES = 10
    DEFAULT_CONCENTRATION = 0.5
    DEFAULT_SAMPLES_PER_USER = (100, 200)  # inclusive range drawn per user
    DEFAULT_FEATURE_DIM = 20
    DEFAULT_CLASS_SEPARATION = 1.0
    DEFAULT_FEATURE_NOISE = 1.0
    DEFAULT_TEST_FRACTION = 0.2
    DEFAULT_POOL_SIZE_PER_CLASS = 2000

    # Seeding
    DEFAULT_SEED = 42

    # File paths
    PROJECT_ROOT = Path(__file__).parent
    DEFAULT_OUTPUT_DIR = PROJECT_ROOT / "output"

    # Output file names
    METRICS_FILE = 'metrics.csv'
    MATCHING_FILE = 'matching.csv'
    ALPHAS_FILE = 'alphas.csv'
    CLUSTERS_FILE = 'clusters.csv'
    HISTOGRAMS_FILE = 'histograms.csv'
    SPECTRUM_FILE = 'spectrum.csv'
    CHANNELS_FILE = 'channels.csv'
    REPORT_FILE = 'report.json'

    # Logging settings
    LOG_LEVEL = 'INFO'
    LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

    @classmethod
    def noise_variance(cls, bandwidth_hz: float = None,
                       psd_dbm_hz: float = None) -> float:
        """Thermal noise power in watts over the given bandwidth."""
        bandwidth_hz = cls.DEFAULT_BANDWIDTH_HZ if bandwidth_hz is None else bandwidth_hz
        psd_dbm_hz = cls.DEFAULT_NOISE_PSD_DBM_HZ if psd_dbm_hz is None else psd_dbm_hz
        return 10.0 ** ((psd_dbm_hz - 30.0) / 10.0) * bandwidth_hz


def load_environment_config():
    """Load configuration overrides from environment variables."""
    if 'CFLNOMA_OUTPUT_DIR' in os.environ:
        Config.DEFAULT_OUTPUT_DIR = Path(os.environ['CFLNOMA_OUTPUT_DIR'])

    if 'CFLNOMA_LOG_LEVEL' in os.environ:
        Config.LOG_LEVEL = os.environ['CFLNOMA_LOG_LEVEL'].upper()

    if 'CFLNOMA_SEED' in os.environ:
        try:
            Config.DEFAULT_SEED = int(os.environ['CFLNOMA_SEED'])
        except ValueError:
            logging.warning(f"Ignoring CFLNOMA_SEED={os.environ['CFLNOMA_SEED']!r}: not an integer")


load_environment_config()


if __name__ == "__main__":
    print("Clustered NOMA FL simulator configuration:")
    print(f"  Bandwidth per sub-channel: {Config.DEFAULT_BANDWIDTH_HZ:.0f} Hz")
    print(f"  Noise variance: {Config.noise_variance():.3e} W")
    print(f"  Model size: {Config.DEFAULT_MODEL_BITS:.0f} bits")
    print(f"  Deadline: {Config.DEFAULT_T_MAX_S} s")
    print(f"  Output directory: {Config.DEFAULT_OUTPUT_DIR}")
