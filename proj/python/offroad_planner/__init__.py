"""Python bindings for the hybrid offroad planner."""

from ._core import (
    DomainError,
    IntegrationError,
    ModelParams,
    VehicleState,
    categorical_mi,
    cem_minimize,
    cma_minimize,
    derivative,
    dispatch,
    gaussian_mi,
    generate_world,
    step_rk4,
    throttle_to_dt,
)

__all__ = [
    "DomainError",
    "IntegrationError",
    "ModelParams",
    "VehicleState",
    "categorical_mi",
    "cem_minimize",
    "cma_minimize",
    "derivative",
    "dispatch",
    "gaussian_mi",
    "generate_world",
    "step_rk4",
    "throttle_to_dt",
]
