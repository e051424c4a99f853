"""Multi-agent neuroimaging workflows with just-in-time primitive selection,
hierarchical quality control and a tamper-evident trace ledger."""

__version__ = "0.1.0"
