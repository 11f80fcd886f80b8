"""Deterministic federated fine-tuning simulator with transformer block expansion."""

from fedbe._core import *  # noqa: F401,F403
from fedbe._core import __version__  # noqa: F401
