"""masforge: meta-agent construction, execution, and repair of LLM workflows.

The engine composes task-specific multi-agent workflows from a
generator/implementer/rectifier meta-agent team, runs them under cost
and failure monitoring, and curates the resulting decision trees into
value-weighted preference datasets with an evaluable alignment loss.
"""

__version__ = "0.1.0"
