"""Hierarchical language-model piano transcription."""

from ._pianolm import *  # noqa: F401,F403
from ._pianolm import __doc__ as _core_doc

__all__ = [name for name in dir() if not name.startswith("_")]
