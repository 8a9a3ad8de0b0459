import numpy as np
import pytest

from rehab_rl import (PhysioPolicy, SeedTree, SimParams, generate_cohort,
                      sample_actual_benefits)


@pytest.fixture(scope="session")
def params():
    return SimParams()


@pytest.fixture(scope="session")
def tree():
    return SeedTree(2024)


@pytest.fixture(scope="session")
def world(params, tree):
    return sample_actual_benefits(tree.child("atb").generator(), params)


@pytest.fixture(scope="session")
def pt_cohort(params, tree, world):
    """A 300-patient behaviour cohort shared across read-only tests."""
    return generate_cohort(300, PhysioPolicy(), world, tree.child("train"), params)
