"""
counterdkl - counterfactual multitask Gaussian-process and deep-kernel regression
"""

from counterdkl.config import settings

__version__ = settings.app_version
