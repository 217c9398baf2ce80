"""Latent world-model imitation pretraining with supervised transfer finetuning.

Modules: ``nn`` (dense nets, Adam, two-hot values), ``envs`` (2-D manipulation
tasks and scripted experts), ``buffers``, ``world_model``, ``planner``,
``trainer``, ``baselines``, ``reports`` and ``cli``.
"""

__version__ = "0.1.0"
