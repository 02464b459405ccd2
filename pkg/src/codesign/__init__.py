"""Co-design of capsule-walker morphology and locomotion policy.

Modules: ``morphology`` (agent graphs, genes, constraints), ``physics``
(articulated-body simulation), ``nn`` (MLP, Gaussian policy, Adam),
``reward``, ``ppo``, ``evolution`` and ``cli``.
"""

__version__ = "0.1.0"
