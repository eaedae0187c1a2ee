"""Virtual-time simulator for clustered semi-asynchronous federated learning."""

__version__ = "0.1.0"
