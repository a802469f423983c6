"""Personalized group-level preference alignment at toy scale.

Subpackages: ``numerics`` (autodiff + AdamW), ``personalization`` (user
representation), ``reward`` (personalized two-tower reward model),
``diffusion`` (toy DDPM with a personalized branch), ``groupdpo`` (group-level
preference objective), ``synthdata`` (synthetic preference world) and ``cli``.
"""

__version__ = "0.1.0"
