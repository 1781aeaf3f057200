from ._normlab import *  # noqa: F401,F403
