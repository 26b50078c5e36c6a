"""Shared fixtures: reference count tables and small synthetic datasets."""
import numpy as np
import pytest
from hypothesis import settings

from ordmlm import EncodedDataset, ParamVector

settings.register_profile("suite", deadline=None)
settings.load_profile("suite")

# Anemia-level counts (Severe, Moderate, Mild, None) by state of residence,
# from the survey the default codebook mirrors.
STATE_LEVEL_COUNTS = {
    "Sikkim": (159, 301, 42, 206),
    "Arunachal Pradesh": (317, 724, 261, 1611),
    "Nagaland": (33, 180, 35, 277),
    "Manipur": (241, 526, 118, 1198),
    "Mizoram": (51, 258, 57, 296),
    "Tripura": (67, 181, 20, 93),
    "Meghalaya": (22, 55, 17, 105),
    "Assam": (334, 1189, 136, 1026),
}

# Anemia-level counts by risk factor (rows in codebook category order).
RISK_FACTOR_COUNTS = {
    "residence": {
        "Rural": (1035, 2705, 516, 3818),
        "Urban": (189, 709, 170, 994),
    },
    "religion": {
        "Hindu": (537, 1330, 238, 1667),
        "Muslim": (83, 442, 48, 350),
        "Christian": (352, 1050, 245, 1824),
        "Others": (252, 592, 155, 971),
    },
    "living_standard": {
        "Low": (764, 2031, 400, 2956),
        "Medium": (336, 999, 199, 1312),
        "High": (124, 384, 87, 544),
    },
    "sex": {
        "Male": (636, 1772, 368, 2453),
        "Female": (588, 1642, 318, 2359),
    },
    "literacy": {
        "Can read and write": (692, 2024, 385, 2771),
        "Cannot read and write": (497, 1257, 276, 1867),
    },
    "children_ever_born": {
        "2 or less": (548, 1444, 276, 2014),
        "3-4": (423, 1214, 271, 1805),
        "5 or more": (218, 623, 114, 819),
    },
    "age_at_marriage": {
        "Below 18": (384, 1016, 183, 1556),
        "18-26": (748, 2090, 445, 2846),
        "Above 26": (57, 175, 33, 236),
    },
    "child_age": {
        "<48": (725, 1937, 373, 2778),
        "48 or more": (499, 1477, 313, 2034),
    },
}

# Intercept-only and three-covariate fits reported for the same survey
# (thresholds; slopes for age at marriage, children ever born, child age).
MODEL1_PARAMS = ParamVector(
    thresholds=np.array([-1.95, -0.07, 0.21]), beta=np.zeros(0), tau00=0.2015
)
MODEL3_PARAMS = ParamVector(
    thresholds=np.array([-2.35, -0.48, -0.19]),
    beta=np.array([0.12, 0.09, -0.08]),
    tau00=0.2015,
)


def dataset_from_counts(count_map, factor_name=None, categories=None):
    """Expand a {row_label: level counts} table into an EncodedDataset.

    With factor_name, rows become scores of a single covariate in one
    cluster; otherwise rows become clusters.
    """
    responses, group = [], []
    for i, counts in enumerate(count_map.values()):
        for level, count in enumerate(counts, start=1):
            responses.extend([level] * count)
            group.extend([i] * count)
    responses = np.asarray(responses)
    group = np.asarray(group, dtype=float)
    if factor_name is None:
        return EncodedDataset(
            responses=responses,
            design=np.zeros((responses.size, 0)),
            cluster_index=group.astype(int),
            n_clusters=len(count_map),
            n_levels=4,
            covariate_names=(),
            covariate_categories=(),
            cluster_labels=tuple(count_map),
        )
    return EncodedDataset(
        responses=responses,
        design=group.reshape(-1, 1),
        cluster_index=np.zeros(responses.size, dtype=int),
        n_clusters=1,
        n_levels=4,
        covariate_names=(factor_name,),
        covariate_categories=(categories or tuple(count_map),),
        cluster_labels=("all",),
    )


@pytest.fixture(scope="session")
def state_dataset():
    return dataset_from_counts(STATE_LEVEL_COUNTS)


@pytest.fixture(scope="session")
def model3_params():
    return MODEL3_PARAMS


@pytest.fixture(scope="session")
def model1_params():
    return MODEL1_PARAMS
