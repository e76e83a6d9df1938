"""Data generators: the two-component scale mixture and a synthetic fall-feature table.

The fall-feature generator is a stand-in for the raw accelerometer corpus,
which is not redistributed.  Each trial's component is drawn from its
activity's reference allocation profile and its features from a Gaussian
around that component's reference mean.  The output is labeled synthetic.
"""

from __future__ import annotations

import numpy as np

from .core import Dataset
from .rng import stream

SCALE_MIXTURE = {"n": 80, "means": (0.0, 0.0), "variances": (2.25, 0.25), "weights": (0.35, 0.65)}

# log max SMV, log min SMV, log max |dSMV| per component
FALL_COMPONENT_MEANS = np.array([
    [7.096, 4.537, 5.444],
    [7.412, 3.596, 6.373],
    [6.297, 3.881, 4.033],
    [7.030, 2.918, 5.287],
    [5.857, 5.233, 3.442],
])
FALL_COMPONENT_SD = np.array([0.15, 0.25, 0.3])

FALL_ACTIVITY_PROFILES = {
    "D05": (0.191, 0.017, 0.027, 0.004, 0.761),
    "D06": (0.000, 0.412, 0.000, 0.588, 0.000),
    "D07": (0.000, 0.000, 0.000, 0.000, 0.999),
    "D08": (0.053, 0.069, 0.762, 0.059, 0.057),
    "D09": (0.370, 0.041, 0.007, 0.009, 0.574),
    "D10": (0.113, 0.067, 0.725, 0.065, 0.030),
    "D11": (0.552, 0.239, 0.001, 0.208, 0.000),
    "D12": (0.006, 0.003, 0.000, 0.000, 0.990),
    "D13": (0.502, 0.071, 0.008, 0.008, 0.412),
    "D14": (0.003, 0.001, 0.000, 0.000, 0.996),
    "D15": (0.000, 0.000, 0.000, 0.000, 0.999),
    "D16": (0.001, 0.000, 0.000, 0.000, 0.999),
    "D17": (0.005, 0.001, 0.001, 0.000, 0.993),
    "D18": (0.135, 0.621, 0.000, 0.244, 0.000),
    "D19": (0.000, 0.139, 0.013, 0.848, 0.000),
    "F01": (0.227, 0.735, 0.000, 0.038, 0.000),
    "F02": (0.619, 0.340, 0.000, 0.041, 0.000),
    "F03": (0.842, 0.136, 0.000, 0.022, 0.000),
    "F04": (0.149, 0.780, 0.000, 0.071, 0.000),
    "F05": (0.000, 0.868, 0.000, 0.132, 0.000),
    "F06": (0.956, 0.035, 0.000, 0.008, 0.001),
    "F07": (0.772, 0.159, 0.000, 0.069, 0.000),
    "F08": (0.583, 0.350, 0.001, 0.059, 0.007),
    "F09": (0.950, 0.041, 0.000, 0.009, 0.000),
    "F10": (0.423, 0.549, 0.000, 0.028, 0.000),
    "F11": (0.684, 0.225, 0.001, 0.090, 0.000),
    "F12": (0.740, 0.222, 0.000, 0.038, 0.000),
    "F13": (0.239, 0.435, 0.026, 0.117, 0.183),
    "F14": (0.448, 0.335, 0.008, 0.176, 0.034),
    "F15": (0.756, 0.190, 0.002, 0.050, 0.001),
}


def scale_mixture_data(seed: int, replicate: int = 0) -> tuple[Dataset, np.ndarray]:
    """n = 80 draws from 0.35 N(0, 2.25) + 0.65 N(0, 0.25); returns (data, true 0-based labels)."""
    rng = stream(seed, "scale_mixture", replicate)
    c = SCALE_MIXTURE
    labels = rng.choice(2, size=c["n"], p=c["weights"])
    y = np.asarray(c["means"])[labels] + np.sqrt(np.asarray(c["variances"]))[labels] * rng.standard_normal(c["n"])
    return Dataset(y), labels


def fall_feature_data(seed: int = 0, trials: int = 5) -> tuple[Dataset, np.ndarray]:
    """150 x 3 synthetic log-feature table with activity groups; returns (data, true 0-based labels)."""
    rng = stream(seed, "synthetic")
    ids, groups, labels, rows = [], [], [], []
    for activity, profile in FALL_ACTIVITY_PROFILES.items():
        p = np.asarray(profile) / np.sum(profile)
        for t in range(trials):
            j = int(rng.choice(5, p=p))
            rows.append(FALL_COMPONENT_MEANS[j] + FALL_COMPONENT_SD * rng.standard_normal(3))
            ids.append(f"{activity}_R{t + 1:02d}")
            groups.append(activity)
            labels.append(j)
    return Dataset(np.array(rows), tuple(ids), tuple(groups)), np.array(labels)
