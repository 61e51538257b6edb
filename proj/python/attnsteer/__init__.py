"""Attention-guided concept vectors and activation steering on a toy transformer."""

from ._attnsteer import *  # noqa: F401,F403
from ._attnsteer import Error, Pipeline, default_config, default_suite

__all__ = ["Error", "Pipeline", "default_config", "default_suite"]
