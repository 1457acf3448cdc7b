"""Event sequences as per-polarity voxel point clouds: conversion, octree
coding and rate/quality evaluation."""

from .event_io import NEG, POS, Event, EventSequence, FormatParams

__version__ = "0.1.0"

__all__ = ["NEG", "POS", "Event", "EventSequence", "FormatParams", "__version__"]
