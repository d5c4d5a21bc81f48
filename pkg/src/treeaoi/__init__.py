"""Average Age of Information of gated tree-splitting random access.

Exact analysis of the Capetanakis (CTM) algorithm and its early-terminated
variant (CTM-ET) under Bernoulli traffic, plus a slot-accurate simulator used
to cross-check every analytical quantity.
"""
from .analysis import (
    PLAIN,
    AoiReport,
    RefreshMoments,
    RefreshPairLaw,
    age_reset_expectation,
    average_aoi,
    delivery_rate,
    inter_refresh_moments,
    mean_delay,
    optimize_lmax,
    refresh_pair_law,
    slotted_aloha_aoi,
)
from .markov import (
    ProtocolConfig,
    StationaryDist,
    TransitionKernel,
    contender_dist,
    generation_prob,
    stationary_dist,
    transition_kernel,
    truncated_cri_pmf,
)
from .pgf import (
    Pmf,
    PgfSampler,
    cri_length_pmf,
    decode_slot_pmf,
    eval_cri_pgf,
    eval_decode_pgf,
    unresolved_prob,
)
from .sim import SimMetrics, replay_cri, run_replicas, run_simulation

__version__ = "0.1.0"
