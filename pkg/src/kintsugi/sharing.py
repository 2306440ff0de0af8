"""Shamir sharing over Z_q and proactive resharing to a new committee.

Resharing works share-by-share: each contributing holder ``i`` deals its
own share ``s_i`` with a fresh polynomial of the *new* degree and sends
one evaluation to every new index ``j``. Node ``j`` then interpolates the
received values with the Lagrange coefficients of the contributor set,
which yields a share of the original secret on a new polynomial.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import (
    DuplicateIndex,
    EpochMismatch,
    InsufficientIndices,
    InsufficientShares,
    InsufficientSubshares,
    MisaddressedSubshare,
    MixedEpoch,
)
from .group import SYSTEM_RNG, Scalar


@dataclass(frozen=True)
class Share:
    index: int
    value: Scalar
    epoch: int
    threshold: int

    def __post_init__(self):
        if self.index < 1:
            raise ValueError("share index must be >= 1")
        if self.epoch < 0 or self.threshold < 0:
            raise ValueError("epoch and threshold must be non-negative")


@dataclass(frozen=True)
class RefreshSubshare:
    from_index: int
    to_index: int
    value: Scalar
    old_epoch: int
    new_epoch: int
    new_threshold: int

    def __post_init__(self):
        if self.new_epoch != self.old_epoch + 1:
            raise ValueError("new_epoch must be old_epoch + 1")


@dataclass(frozen=True)
class SecretPolynomial:
    """``c_0 + c_1 x + ... + c_t x^t``; ``c_0`` is the shared secret."""

    coefficients: tuple[Scalar, ...]

    @classmethod
    def random(cls, secret: Scalar, degree: int, rng: random.Random = SYSTEM_RNG) -> SecretPolynomial:
        q = secret.q
        return cls((secret,) + tuple(Scalar(rng.randrange(q), q) for _ in range(degree)))

    @property
    def degree(self) -> int:
        return len(self.coefficients) - 1

    def __call__(self, x: int) -> Scalar:
        acc = self.coefficients[-1] * 0
        for c in reversed(self.coefficients):
            acc = acc * x + c
        return acc


def _check_indices(indices: Iterable[int], t: int) -> list[int]:
    indices = list(indices)
    if len(set(indices)) != len(indices):
        raise DuplicateIndex(f"duplicate indices in {indices}")
    if any(i < 1 for i in indices):
        raise ValueError("indices must be >= 1")
    if len(indices) < t + 1:
        raise InsufficientIndices(f"threshold {t} needs at least {t + 1} indices, got {len(indices)}")
    return indices


def shares_from_polynomial(poly: SecretPolynomial, indices: Iterable[int], epoch: int = 0) -> list[Share]:
    indices = _check_indices(indices, poly.degree)
    return [Share(i, poly(i), epoch, poly.degree) for i in indices]


def deal_shares(secret: Scalar, t: int, indices: Iterable[int], rng: random.Random = SYSTEM_RNG) -> list[Share]:
    indices = _check_indices(indices, t)
    return shares_from_polynomial(SecretPolynomial.random(secret, t, rng), indices)


def lagrange_at_zero(indices: Sequence[int], q: int) -> list[Scalar]:
    """Coefficients ``lambda_i(0)`` for interpolating at zero, in input order."""
    if len(set(indices)) != len(indices):
        raise DuplicateIndex(f"duplicate indices in {list(indices)}")
    if any(i % q == 0 for i in indices):
        raise ValueError("indices must be nonzero mod q")
    coeffs = []
    for i in indices:
        num, den = 1, 1
        for m in indices:
            if m != i:
                num = num * (-m) % q
                den = den * (i - m) % q
        coeffs.append(Scalar(num * pow(den, -1, q), q))
    return coeffs


def interpolate_at_zero(points: Sequence[tuple[int, Scalar]]) -> Scalar:
    """Unchecked interpolation of ``(index, value)`` pairs at zero."""
    q = points[0][1].q
    lambdas = lagrange_at_zero([i for i, _ in points], q)
    return sum((lam * v for lam, (_, v) in zip(lambdas, points)), Scalar(0, q))


def reconstruct_secret(shares: Sequence[Share]) -> Scalar:
    if not shares:
        raise InsufficientShares("no shares")
    first = shares[0]
    for s in shares:
        if s.epoch != first.epoch or s.threshold != first.threshold:
            raise EpochMismatch(
                f"share {s.index} is (epoch {s.epoch}, t={s.threshold}), "
                f"expected (epoch {first.epoch}, t={first.threshold})"
            )
    if len(shares) < first.threshold + 1:
        raise InsufficientShares(f"need {first.threshold + 1} shares, got {len(shares)}")
    return interpolate_at_zero([(s.index, s.value) for s in shares])


def make_refresh_subshares(
    share: Share,
    t_new: int,
    new_indices: Iterable[int],
    rng: random.Random = SYSTEM_RNG,
    polynomial: SecretPolynomial | None = None,
) -> list[RefreshSubshare]:
    new_indices = _check_indices(new_indices, t_new)
    if polynomial is None:
        polynomial = SecretPolynomial.random(share.value, t_new, rng)
    elif polynomial.coefficients[0] != share.value or polynomial.degree != t_new:
        raise ValueError("refresh polynomial must have the share as constant term and degree t_new")
    return [
        RefreshSubshare(share.index, j, polynomial(j), share.epoch, share.epoch + 1, t_new)
        for j in new_indices
    ]


def combine_subshares(
    to_index: int,
    subshares: Sequence[RefreshSubshare],
    contributor_indices: Sequence[int],
) -> Share:
    """Interpolate the subshares addressed to ``to_index`` into its new share.

    ``contributor_indices`` must be the same set for every new node, otherwise
    the resulting shares lie on different polynomials.
    """
    if not subshares:
        raise InsufficientSubshares("no subshares")
    first = subshares[0]
    for sub in subshares:
        if sub.to_index != to_index:
            raise MisaddressedSubshare(f"subshare for {sub.to_index} delivered to {to_index}")
        if (sub.old_epoch, sub.new_epoch, sub.new_threshold) != (
            first.old_epoch,
            first.new_epoch,
            first.new_threshold,
        ):
            raise MixedEpoch("subshares disagree on epoch or new threshold")
    by_sender: dict[int, RefreshSubshare] = {}
    for sub in subshares:
        if sub.from_index in by_sender:
            raise DuplicateIndex(f"two subshares from {sub.from_index}")
        by_sender[sub.from_index] = sub
    contributors = list(contributor_indices)
    if len(set(contributors)) != len(contributors):
        raise DuplicateIndex("duplicate contributor index")
    missing = [i for i in contributors if i not in by_sender]
    if missing:
        raise InsufficientSubshares(f"missing subshares from {missing}")
    extra = set(by_sender) - set(contributors)
    if extra:
        raise MisaddressedSubshare(f"subshares from non-contributors {sorted(extra)}")
    value = interpolate_at_zero([(i, by_sender[i].value) for i in contributors])
    return Share(to_index, value, first.new_epoch, first.new_threshold)
