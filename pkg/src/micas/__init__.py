"""Multi-grained adaptive sampling and prompt ranking for point-cloud
in-context learning, small enough to train and test on one desk machine."""

__version__ = "0.1.0"
