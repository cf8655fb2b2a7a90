from .mechanisms import add_gaussian, clip_and_sum, clip_l2, per_example_norms
from .rdp import (DEFAULT_ORDERS, PrivacyBudget, RdpAccountant, accumulate, basic_composition,
                  epsilon_after, rdp_step, steps_until_exceeded, to_epsilon)

__all__ = [
    "DEFAULT_ORDERS", "PrivacyBudget", "RdpAccountant", "accumulate", "add_gaussian",
    "basic_composition", "clip_and_sum", "clip_l2", "epsilon_after", "per_example_norms",
    "rdp_step", "steps_until_exceeded", "to_epsilon",
]
