from ._pharnet import *  # noqa: F401,F403
