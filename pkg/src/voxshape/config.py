"""Numerical constants used throughout the pipeline."""

import numpy as np

LEAKY_SLOPE = 0.2
IN_EPS = 1e-5
DICE_EPS = 1e-7

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64
