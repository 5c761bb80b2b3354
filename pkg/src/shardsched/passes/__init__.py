from .offload import (OffloadResult, apply_offload_forward, apply_offload_sync_all,
                      apply_reload_backward)
from .prefetch import PrefetchGroup, PrefetchResult, apply_prefetch, fuse, plan_fusion
from .shard import ShardResult, apply_sharding
from .unshard import UnshardSelection, apply_unshard, gathered_params, select_unshard

__all__ = [
    "OffloadResult", "apply_offload_forward", "apply_offload_sync_all", "apply_reload_backward",
    "PrefetchGroup", "PrefetchResult", "apply_prefetch", "fuse", "plan_fusion",
    "ShardResult", "apply_sharding",
    "UnshardSelection", "apply_unshard", "gathered_params", "select_unshard",
]
