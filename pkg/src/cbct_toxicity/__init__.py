"""Toxicity prediction from longitudinal pCT/CBCT deformation."""

from importlib.metadata import version, PackageNotFoundError

try:
    __version__ = version(__name__)
except PackageNotFoundError:
    # running from a source checkout
    pass
