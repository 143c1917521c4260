"""Count-Gap guided semi-supervised learning on synthetic benchmarks.

The training signal for unlabeled data is routed through a per-iteration
three-way split: high-confidence samples get cross-entropy on their strong
view, low-confidence samples whose pseudo-label history is stable (large
count-gap) get a noise-tolerant generalized cross-entropy on both views, and
the rest sit out. Thresholds track exponential moving averages of per-batch
statistics.
"""

__version__ = "0.1.0"

from .config import RunConfig  # noqa: F401
from .training import run  # noqa: F401
