"""Value-driven patch classification.

Labels each dataflow branch by whether its input patch contains outlier
values, and maps the label to a quantization policy: outlier-class patches
keep the 8-bit scheme on their whole branch, non-outlier patches are
handed to the bitwidth search.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .actstats import OutlierModel
from .errors import EmptyPatch
from .refengine import CalibrationPools


class PatchLabel(str, Enum):
    OUTLIER = "outlier"
    NON_OUTLIER = "non_outlier"


class Policy(str, Enum):
    FIXED8 = "fixed8"
    MIXED_PRECISION = "mixed_precision"


@dataclass(frozen=True)
class PatchClass:
    branch_id: tuple[int, int]
    label: PatchLabel
    outlier_count: int
    fraction_outlier_values: float


@dataclass(frozen=True)
class BranchPolicy:
    branch_id: tuple[int, int]
    policy: Policy


def classify_patch(patch_values, om: OutlierModel,
                   branch_id: tuple[int, int] = (0, 0)) -> PatchClass:
    """Outlier class iff any value in the patch is an outlier."""
    arr = np.asarray(patch_values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise EmptyPatch("cannot classify an empty patch")
    mask = om.outlier_mask(arr)
    count = int(mask.sum())
    label = PatchLabel.OUTLIER if count >= 1 else PatchLabel.NON_OUTLIER
    return PatchClass(
        branch_id=branch_id,
        label=label,
        outlier_count=count,
        fraction_outlier_values=count / arr.size,
    )


def classify_all(pools: CalibrationPools, om: OutlierModel | None,
) -> tuple[list[PatchClass], list[list[PatchLabel]]]:
    """Classify every branch's input patch, per calibration sample.

    Returns the static per-branch classes (majority label across samples,
    ties resolved to the outlier class since that is the accuracy-preserving
    direction) plus the full per-sample label table. A degenerate sigma
    (``om`` is None) classifies everything non-outlier: no value deviates
    from the mean.
    """
    num_branches = len(pools.branches)
    table: list[list[PatchLabel]] = []
    for s in range(pools.num_samples):
        row = []
        for b in range(num_branches):
            values = pools.branch_sample_values(b, 0, s)
            if om is None:
                row.append(PatchLabel.NON_OUTLIER)
            else:
                row.append(classify_patch(values, om, pools.branches[b].patch_id).label)
        table.append(row)

    classes = []
    for b, branch in enumerate(pools.branches):
        labels = [table[s][b] for s in range(pools.num_samples)]
        outlier_votes = sum(1 for v in labels if v is PatchLabel.OUTLIER)
        majority = (PatchLabel.OUTLIER
                    if 2 * outlier_votes >= len(labels)
                    else PatchLabel.NON_OUTLIER)
        if om is None:
            count, fraction = 0, 0.0
            majority = PatchLabel.NON_OUTLIER
        else:
            pool = pools.branch_pool(b, 0)
            mask = om.outlier_mask(pool)
            count = int(mask.sum())
            fraction = count / pool.size
        classes.append(
            PatchClass(
                branch_id=branch.patch_id,
                label=majority,
                outlier_count=count,
                fraction_outlier_values=fraction,
            )
        )
    return classes, table


def assign_policies(classes: list[PatchClass]) -> list[BranchPolicy]:
    """Outlier class -> fixed 8-bit; non-outlier class -> mixed precision."""
    return [
        BranchPolicy(
            branch_id=pc.branch_id,
            policy=(Policy.FIXED8 if pc.label is PatchLabel.OUTLIER
                    else Policy.MIXED_PRECISION),
        )
        for pc in classes
    ]
