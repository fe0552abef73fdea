"""Tree-search code generation agent.

Turns multi-step natural-language tasks into executable programs: a
Monte Carlo tree search over candidate code cells, retrieval-augmented
prompting, a persistent execution sandbox, traceback-driven self-repair
with optional human intervention, and a benchmark harness.
"""

__version__ = "0.1.0"
