"""Decentralized password-based recovery of end-to-end encryption keys.

A user's secret ``s`` is Shamir-shared across a committee of recovery
nodes. Recovering runs a threshold OPRF on the password, so nodes never see
the password and the user never sees ``s``; the OPRF output keys an
encrypted backup of the user's payload. Committees can be refreshed or
replaced without changing ``s``.
"""

from __future__ import annotations

from .client import (
    RecoverySession,
    RegistrationPlan,
    RegistrationSession,
    RotationSession,
    RefreshScheduler,
)
from .directory import CommitteeMember, DirectoryEntry, DirectoryStore, merge_replicas
from .errors import KintsugiError
from .group import RistrettoGroup, ToyGroup, group_by_name
from .netsim import SimConfig, Scenario, collusion_oracle, run_simulation
from .node import RecoveryNode

__all__ = [
    "CommitteeMember",
    "DirectoryEntry",
    "DirectoryStore",
    "KintsugiError",
    "RecoveryNode",
    "RecoverySession",
    "RefreshScheduler",
    "RegistrationPlan",
    "RegistrationSession",
    "RistrettoGroup",
    "RotationSession",
    "Scenario",
    "SimConfig",
    "ToyGroup",
    "collusion_oracle",
    "group_by_name",
    "merge_replicas",
    "run_simulation",
]
