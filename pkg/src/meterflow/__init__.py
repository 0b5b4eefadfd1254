"""Conditional flow matching for smart-meter load profiles with projection guidance."""

from .data import ConditionEncoder, ConditionSet, Dataset, Profile, SynthConfig, synth_dataset
from .errors import NumericError, StateError
from .flow import FlowSchedule, GuidanceSpec, TrainConfig, sample, train
from .nn import NetConfig, VelocityNet

__version__ = "0.1.0"

__all__ = [
    "ConditionEncoder",
    "ConditionSet",
    "Dataset",
    "FlowSchedule",
    "GuidanceSpec",
    "NetConfig",
    "NumericError",
    "Profile",
    "StateError",
    "SynthConfig",
    "TrainConfig",
    "VelocityNet",
    "sample",
    "synth_dataset",
    "train",
]
