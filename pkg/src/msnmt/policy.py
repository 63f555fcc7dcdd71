"""Fixed read/write schedules: wait-k and full-sentence."""
from __future__ import annotations

from dataclasses import dataclass

from .tensor import ContractError


@dataclass(frozen=True)
class Policy:
    """``k=None`` means the full-sentence policy."""

    k: int | None = None

    def __post_init__(self):
        if self.k is not None and self.k < 1:
            raise ValueError(f"wait-k needs k >= 1, got {self.k}")

    @classmethod
    def wait(cls, k: int) -> "Policy":
        return cls(int(k))

    @classmethod
    def full(cls) -> "Policy":
        return cls(None)

    @classmethod
    def parse(cls, text: str | int) -> "Policy":
        if isinstance(text, int):
            return cls.wait(text)
        text = str(text).strip().lower()
        if text == "full":
            return cls.full()
        try:
            return cls.wait(int(text))
        except ValueError:
            raise ValueError(f"policy must be a positive integer or 'full', got {text!r}") from None

    @property
    def is_full(self) -> bool:
        return self.k is None

    def __str__(self) -> str:
        return "full" if self.k is None else str(self.k)

    def g(self, t: int, n: int) -> int:
        return g(self, t, n)

    def tau(self, n: int) -> int:
        return tau_g(self, n)


def g(policy: Policy, t: int, n: int) -> int:
    """Number of source tokens read when target token ``t`` (1-based) is written."""
    if t < 1 or n < 1:
        raise ContractError(f"g needs t >= 1 and n >= 1, got t={t}, n={n}")
    if policy.k is None:
        return n
    return min(policy.k + t - 1, n)


def tau_g(policy: Policy, n: int) -> int:
    """First target step at which the whole source has been read."""
    if n < 1:
        raise ContractError(f"tau_g needs n >= 1, got {n}")
    if policy.k is None:
        return 1
    return max(1, n - policy.k + 1)
