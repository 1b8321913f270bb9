"""Personalized federated learning for 5-minute radar VIL nowcasting.

Modules: ``grid`` (fields and zones), ``data`` / ``synthetic`` / ``frameio``
(client datasets), ``nn`` (convolutional regressor), ``federation`` (FedAvg and
adaptive fine-tuning), ``baselines`` (TREC/COTREC), ``metrics`` and
``experiment`` / ``cli`` (the study runner).
"""

__version__ = "0.1.0"
