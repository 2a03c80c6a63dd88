"""Popularity-bias mitigation by steering sparse-autoencoder neurons of a sequential recommender.

Pipeline: :mod:`popsteer.data` (logs, splits, popularity partition, synthetic
profiles), :mod:`popsteer.backbone` (decayed-sum BPR recommender),
:mod:`popsteer.sae` (top-K sparse autoencoder), :mod:`popsteer.bias`
(Cohen's d statistics, steering, ablations), :mod:`popsteer.rerank`
(re-ranking baselines), :mod:`popsteer.evaluation` (metrics and sweeps) and
:mod:`popsteer.cli`.
"""

__version__ = "0.1.0"
