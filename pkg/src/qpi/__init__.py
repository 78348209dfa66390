"""Quantum process identification.

Infers a minimal linear model F(t) = S T^t P of a repeated qubit process
from tomographic count data taken on a biexponential time schedule.
"""
from .model import Model, gauge_transform, predict, predict_many, random_model
from .schedule import ScheduleParams, build_schedule

__version__ = "0.1.0"

__all__ = ["Model", "ScheduleParams", "build_schedule", "gauge_transform",
           "predict", "predict_many", "random_model", "__version__"]
