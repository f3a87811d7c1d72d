from .gradmatch import AttackConfig, Scenario, VictimDims, attack_success_rate, grad_match_attack
from .reprecon import ReconConfig, reprecon_attack, reprecon_train
from .rss import DegenerateQueryError, RssIndex, rss_build_index, rss_query
from .subset_sum import SubsetSumResult, plant_instance, subset_sum_recover

__all__ = [
    "AttackConfig",
    "DegenerateQueryError",
    "ReconConfig",
    "RssIndex",
    "Scenario",
    "SubsetSumResult",
    "VictimDims",
    "attack_success_rate",
    "grad_match_attack",
    "plant_instance",
    "reprecon_attack",
    "reprecon_train",
    "rss_build_index",
    "rss_query",
    "subset_sum_recover",
]
