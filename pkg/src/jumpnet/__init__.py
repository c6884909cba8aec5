"""Jump-filter state estimation over multi-hop lossy wireless networks.

Builds the delivery-history Markov chain of a relay network, designs
mode-dependent estimator gains, reduces their number, trades transmit power
against estimation accuracy, and validates everything by simulation.
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"
