"""Certificate wrappers, witnesses, and the verified docking-time bound."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import geometry, nn
from .geometry import BoxRegion, Region
from .nn import Mlp

__all__ = [
    "Witness",
    "FrwaCertificate",
    "RwaCertificate",
    "evaluate",
    "evaluate_raw",
    "step_bound",
    "StepBoundUnknown",
]


@dataclass(frozen=True)
class Witness:
    """Threshold triple: sublevel bound beta, unsafe floor alpha, per-step decrease epsilon."""

    alpha: float
    beta: float
    epsilon: float

    def __post_init__(self):
        if not (self.alpha > self.beta):
            raise ValueError(f"witness needs alpha > beta, got {self.alpha} <= {self.beta}")
        if not (self.epsilon > 0):
            raise ValueError("witness needs epsilon > 0")


# Values that worked well experimentally for the docking study.
DEFAULT_WITNESS = Witness(alpha=1.0 + 1e-5, beta=1.0, epsilon=1e-7)
DEFAULT_C1 = -10.0
DEFAULT_C2 = 1.2


@dataclass(frozen=True, eq=False)
class FrwaCertificate:
    """Filtered certificate: clamps to c1 on the goal and c2 on the unsafe set.

    The clamp to c2 makes the unsafe-floor condition hold by construction, and
    the clamp to c1 keeps goal states safely inside the sublevel set, so only
    the raw network on the remaining states is subject to training and
    verification.
    """

    net: Mlp
    witness: Witness
    goal: Region
    unsafe: Region
    c1: float = DEFAULT_C1
    c2: float = DEFAULT_C2

    def __post_init__(self):
        if self.net.output_size != 1:
            raise ValueError("certificate network must have a single output")
        if not (self.c1 <= self.witness.beta < self.witness.alpha <= self.c2):
            raise ValueError(
                f"need c1 <= beta < alpha <= c2, got "
                f"{self.c1}, {self.witness.beta}, {self.witness.alpha}, {self.c2}"
            )

    def with_net(self, net: Mlp) -> FrwaCertificate:
        return replace(self, net=net)


@dataclass(frozen=True, eq=False)
class RwaCertificate:
    """Unfiltered certificate; the raw network is the certificate everywhere."""

    net: Mlp
    witness: Witness

    def __post_init__(self):
        if self.net.output_size != 1:
            raise ValueError("certificate network must have a single output")

    def with_net(self, net: Mlp) -> RwaCertificate:
        return replace(self, net=net)


def evaluate_raw(cert: FrwaCertificate | RwaCertificate, s) -> float | np.ndarray:
    """The bare network value, ignoring any filters."""
    out = nn.forward(cert.net, s)
    return float(out[0]) if out.ndim == 1 else out[:, 0]


def evaluate(cert: FrwaCertificate | RwaCertificate, s) -> float | np.ndarray:
    """Certificate value with goal/unsafe clamps applied (goal wins overlaps)."""
    raw = evaluate_raw(cert, s)
    if isinstance(cert, RwaCertificate):
        return raw
    in_goal = geometry.region_contains(cert.goal, s)
    in_unsafe = geometry.region_contains(cert.unsafe, s)
    out = np.where(in_goal, cert.c1, np.where(in_unsafe, cert.c2, raw))
    return float(out) if np.ndim(out) == 0 else out


class StepBoundUnknown(RuntimeError):
    """The verified lower-bound pass could not produce a finite floor."""


def step_bound(
    cert: FrwaCertificate,
    domain: BoxRegion,
    bnb_config=None,
) -> int:
    """Number of steps within which every safe-sublevel start must reach the goal.

    A trajectory that starts at V <= beta and has not docked loses at least
    epsilon of certificate value per step, so it docks within
    ceil((beta - psi) / epsilon) steps, where psi is a verified lower bound of
    the filtered certificate over the domain. The floor combines the goal
    clamp c1 with a sound branch-and-bound lower bound of the raw network.
    """
    from .verifier import BnbConfig, minimize_lower_bound  # deferred: verifier imports us

    cfg = bnb_config if bnb_config is not None else BnbConfig()
    raw_floor = minimize_lower_bound(cert.net, domain, cfg)
    if not math.isfinite(raw_floor):
        raise StepBoundUnknown("bound pass returned a non-finite certificate floor")
    psi = min(cert.c1, raw_floor)
    return int(math.ceil((cert.witness.beta - psi) / cert.witness.epsilon))


# ---------------------------------------------------------------------------
# Bundle serialization
# ---------------------------------------------------------------------------


def certificate_to_dict(cert: FrwaCertificate | RwaCertificate) -> dict:
    doc = {
        "witness": {
            "alpha": cert.witness.alpha,
            "beta": cert.witness.beta,
            "epsilon": cert.witness.epsilon,
        },
        "network": nn.to_dict(cert.net),
    }
    if isinstance(cert, FrwaCertificate):
        doc["mode"] = "frwa"
        doc["c1"] = cert.c1
        doc["c2"] = cert.c2
        doc["goal"] = geometry.region_to_dict(cert.goal)
        doc["unsafe"] = geometry.region_to_dict(cert.unsafe)
    else:
        doc["mode"] = "rwa"
    return doc


def certificate_from_dict(doc: dict) -> FrwaCertificate | RwaCertificate:
    witness = Witness(**doc["witness"])
    net = nn.from_dict(doc["network"])
    if doc.get("mode") == "rwa":
        return RwaCertificate(net=net, witness=witness)
    return FrwaCertificate(
        net=net,
        witness=witness,
        goal=geometry.region_from_dict(doc["goal"]),
        unsafe=geometry.region_from_dict(doc["unsafe"]),
        c1=float(doc["c1"]),
        c2=float(doc["c2"]),
    )
