"""Prime-order groups and their scalar fields.

Two instantiations share one interface:

* :class:`RistrettoGroup` -- ristretto255, 32-byte elements, the
  deployment group.
* :class:`ToyGroup` -- the additive group of integers mod a small prime
  (default 101). Discrete logs are trivial here, so it is only useful as a
  hand-checkable oracle for the protocol layers above.

Scalars and elements are immutable values with operator overloading::

    >>> g = ToyGroup()
    >>> (g.scalar(19) * g.element(7)).to_bytes().hex()
    '2000000000000000'
"""

from __future__ import annotations

import hashlib
import random
import secrets
from abc import ABC, abstractmethod
from typing import Any

from . import _ristretto
from .errors import MalformedElement, ZeroInverse

PASSWORD_TAG = b"kintsugi/pwd"
KDF_TAG = b"kintsugi/kdf"

SYSTEM_RNG = secrets.SystemRandom()


class Scalar:
    """An element of Z_q, always reduced."""

    __slots__ = ("value", "q")

    def __init__(self, value: int, q: int):
        self.value = value % q
        self.q = q

    def _coerce(self, other: Any) -> int:
        if isinstance(other, Scalar):
            if other.q != self.q:
                raise ValueError("scalars from different fields")
            return other.value
        if isinstance(other, int):
            return other
        return NotImplemented

    def __add__(self, other):
        o = self._coerce(other)
        return NotImplemented if o is NotImplemented else Scalar(self.value + o, self.q)

    __radd__ = __add__

    def __sub__(self, other):
        o = self._coerce(other)
        return NotImplemented if o is NotImplemented else Scalar(self.value - o, self.q)

    def __rsub__(self, other):
        o = self._coerce(other)
        return NotImplemented if o is NotImplemented else Scalar(o - self.value, self.q)

    def __mul__(self, other):
        if isinstance(other, GroupElement):
            return other.group.mul(self.value, other)
        o = self._coerce(other)
        return NotImplemented if o is NotImplemented else Scalar(self.value * o, self.q)

    __rmul__ = __mul__

    def __neg__(self):
        return Scalar(-self.value, self.q)

    def invert(self) -> Scalar:
        if self.value == 0:
            raise ZeroInverse("0 has no inverse")
        return Scalar(pow(self.value, -1, self.q), self.q)

    def __bool__(self) -> bool:
        return self.value != 0

    def __int__(self) -> int:
        return self.value

    def __eq__(self, other) -> bool:
        if isinstance(other, Scalar):
            return self.q == other.q and self.value == other.value
        if isinstance(other, int):
            return self.value == other % self.q
        return NotImplemented

    def __hash__(self) -> int:
        return hash((self.value, self.q))

    def __repr__(self) -> str:
        return f"Scalar({self.value})"


class GroupElement:
    """An element of a prime-order group; compares by canonical encoding."""

    __slots__ = ("group", "raw")

    def __init__(self, group: Group, raw: Any):
        self.group = group
        self.raw = raw

    def __add__(self, other: GroupElement) -> GroupElement:
        return self.group.add(self, other)

    def __neg__(self) -> GroupElement:
        return self.group.neg(self)

    def __sub__(self, other: GroupElement) -> GroupElement:
        return self.group.add(self, self.group.neg(other))

    def __rmul__(self, k) -> GroupElement:
        if isinstance(k, Scalar):
            k = k.value
        if not isinstance(k, int):
            return NotImplemented
        return self.group.mul(k, self)

    def is_identity(self) -> bool:
        return self == self.group.identity()

    def to_bytes(self) -> bytes:
        return self.group.encode_element(self)

    def __eq__(self, other) -> bool:
        if not isinstance(other, GroupElement):
            return NotImplemented
        return self.group == other.group and self.group.equal(self, other)

    def __hash__(self) -> int:
        return hash(self.to_bytes())

    def __repr__(self) -> str:
        return f"GroupElement({self.group.name}:{self.to_bytes().hex()})"


class Group(ABC):
    name: str
    order: int
    element_size: int
    scalar_size: int

    def __init__(self, hash_name: str = "sha512"):
        if hashlib.new(hash_name).digest_size != 64:
            raise ValueError(f"{hash_name} does not produce 512-bit output")
        self.hash_name = hash_name

    def hash(self, *parts: bytes) -> bytes:
        h = hashlib.new(self.hash_name)
        for part in parts:
            h.update(part)
        return h.digest()

    # scalars
    def scalar(self, value: int) -> Scalar:
        return Scalar(value, self.order)

    def random_scalar(self, rng: random.Random = SYSTEM_RNG, nonzero: bool = False) -> Scalar:
        if nonzero:
            return Scalar(1 + rng.randrange(self.order - 1), self.order)
        return Scalar(rng.randrange(self.order), self.order)

    def encode_scalar(self, k: Scalar) -> bytes:
        return k.value.to_bytes(self.scalar_size, "little")

    def decode_scalar(self, data: bytes) -> Scalar:
        if len(data) != self.scalar_size:
            raise MalformedElement(f"scalar must be {self.scalar_size} bytes")
        v = int.from_bytes(data, "little")
        if v >= self.order:
            raise MalformedElement("non-canonical scalar")
        return Scalar(v, self.order)

    # elements
    @abstractmethod
    def identity(self) -> GroupElement: ...

    @abstractmethod
    def generator(self) -> GroupElement: ...

    @abstractmethod
    def add(self, a: GroupElement, b: GroupElement) -> GroupElement: ...

    @abstractmethod
    def neg(self, a: GroupElement) -> GroupElement: ...

    @abstractmethod
    def mul(self, k: int, a: GroupElement) -> GroupElement: ...

    @abstractmethod
    def equal(self, a: GroupElement, b: GroupElement) -> bool: ...

    @abstractmethod
    def encode_element(self, a: GroupElement) -> bytes: ...

    @abstractmethod
    def decode_element(self, data: bytes) -> GroupElement: ...

    @abstractmethod
    def hash_to_group(self, data: bytes, tag: bytes = PASSWORD_TAG) -> GroupElement: ...

    def __eq__(self, other) -> bool:
        return isinstance(other, Group) and self.descriptor() == other.descriptor()

    def __hash__(self) -> int:
        return hash(self.descriptor())

    def descriptor(self) -> tuple:
        return (self.name, self.order, self.element_size, self.hash_name)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(order={self.order})"


class RistrettoGroup(Group):
    name = "ristretto255"
    order = _ristretto.L
    element_size = 32
    scalar_size = 32

    def identity(self):
        return GroupElement(self, _ristretto.IDENTITY)

    def generator(self):
        return GroupElement(self, _ristretto.BASE)

    def add(self, a, b):
        return GroupElement(self, _ristretto.add(a.raw, b.raw))

    def neg(self, a):
        return GroupElement(self, _ristretto.negate(a.raw))

    def mul(self, k, a):
        return GroupElement(self, _ristretto.scalar_mult(k, a.raw))

    def equal(self, a, b):
        return _ristretto.equal(a.raw, b.raw)

    def encode_element(self, a):
        return _ristretto.encode(a.raw)

    def decode_element(self, data):
        if len(data) != 32:
            raise MalformedElement(f"expected 32 bytes, got {len(data)}")
        raw = _ristretto.decode(bytes(data))
        if raw is None:
            raise MalformedElement("not a canonical ristretto255 encoding")
        return GroupElement(self, raw)

    def hash_to_group(self, data, tag=PASSWORD_TAG):
        if not data:
            raise ValueError("hash_to_group input must be non-empty")
        return GroupElement(self, _ristretto.from_uniform_bytes(self.hash(tag, data)))


class ToyGroup(Group):
    """Integers mod a small prime under addition; generator 1.

    Insecure by construction: the discrete log of every element is itself.
    """

    name = "toy"
    element_size = 8
    scalar_size = 8

    def __init__(self, p: int = 101, hash_name: str = "sha512"):
        super().__init__(hash_name)
        if p < 3 or any(p % d == 0 for d in range(2, int(p**0.5) + 1)):
            raise ValueError(f"{p} is not an odd prime")
        if p >= 2**63:
            raise ValueError("toy modulus must fit in 8 bytes")
        self.order = p

    def element(self, v: int) -> GroupElement:
        return GroupElement(self, v % self.order)

    def identity(self):
        return GroupElement(self, 0)

    def generator(self):
        return GroupElement(self, 1)

    def add(self, a, b):
        return GroupElement(self, (a.raw + b.raw) % self.order)

    def neg(self, a):
        return GroupElement(self, (-a.raw) % self.order)

    def mul(self, k, a):
        return GroupElement(self, k * a.raw % self.order)

    def equal(self, a, b):
        return a.raw == b.raw

    def encode_element(self, a):
        return a.raw.to_bytes(8, "little")

    def decode_element(self, data):
        if len(data) != 8:
            raise MalformedElement(f"expected 8 bytes, got {len(data)}")
        v = int.from_bytes(data, "little")
        if v >= self.order:
            raise MalformedElement("non-canonical toy element")
        return GroupElement(self, v)

    def hash_to_group(self, data, tag=PASSWORD_TAG):
        if not data:
            raise ValueError("hash_to_group input must be non-empty")
        # never the identity, so blinded elements stay non-trivial
        h = int.from_bytes(self.hash(tag, data), "little")
        return GroupElement(self, 1 + h % (self.order - 1))


def group_by_name(name: str, **kwargs) -> Group:
    if name in ("ristretto255", "ristretto", "production"):
        return RistrettoGroup(**kwargs)
    if name == "toy":
        return ToyGroup(**kwargs)
    raise ValueError(f"unknown group {name!r}")
