"""Student-to-teacher layer mappings.

Index 0 is the embedding layer and index ``M + 1`` (student) / ``N + 1``
(teacher) the prediction layer; interior student layers ``1..M`` map to
teacher transformer layers ``1..N``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


class MappingError(ValueError):
    pass


@dataclass(frozen=True)
class LayerMapping:
    M: int
    N: int
    table: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "table", tuple(int(v) for v in self.table))

    def __call__(self, m: int) -> int:
        return self.table[m]

    def interior(self) -> tuple[int, ...]:
        return self.table[1 : self.M + 1]

    def to_list(self) -> list[int]:
        return list(self.table)


def validate(mapping: LayerMapping) -> LayerMapping:
    """Raise MappingError describing every violated invariant."""
    M, N, table = mapping.M, mapping.N, mapping.table
    problems = []
    if M < 1 or N < 1:
        problems.append(f"need M >= 1 and N >= 1, got M={M}, N={N}")
    if len(table) != M + 2:
        problems.append(f"table has {len(table)} entries, expected M+2={M + 2}")
    else:
        if table[0] != 0:
            problems.append(f"endpoint: g(0) must be 0, got {table[0]}")
        if table[-1] != N + 1:
            problems.append(f"endpoint: g(M+1) must be N+1={N + 1}, got {table[-1]}")
        inner = table[1:-1]
        out_of_range = [(m, n) for m, n in enumerate(inner, 1) if not 1 <= n <= N]
        if out_of_range:
            problems.append(f"range: interior layers must map into 1..{N}, bad (m, g(m)) {out_of_range}")
        if any(b <= a for a, b in zip(inner, inner[1:])):
            problems.append(f"monotonicity: interior {list(inner)} is not strictly increasing")
    if problems:
        raise MappingError("; ".join(problems))
    return mapping


def _check_sizes(M: int, N: int) -> None:
    if M < 1 or N < 1:
        raise MappingError(f"need M >= 1 and N >= 1, got M={M}, N={N}")
    if M > N:
        raise MappingError(f"student has more layers than teacher (M={M} > N={N})")


def uniform(M: int, N: int) -> LayerMapping:
    """g(m) = m * N / M; only defined when M divides N."""
    _check_sizes(M, N)
    if N % M:
        raise MappingError(f"uniform mapping needs N divisible by M, got N={N}, M={M}")
    step = N // M
    return LayerMapping(M, N, (0, *(m * step for m in range(1, M + 1)), N + 1))


def top(M: int, N: int) -> LayerMapping:
    """g(m) = m + N - M: the student imitates the teacher's last M layers."""
    _check_sizes(M, N)
    return LayerMapping(M, N, (0, *(m + N - M for m in range(1, M + 1)), N + 1))


def bottom(M: int, N: int) -> LayerMapping:
    """g(m) = m: the student imitates the teacher's first M layers."""
    _check_sizes(M, N)
    return LayerMapping(M, N, (0, *range(1, M + 1), N + 1))


def custom(table: Sequence[int], N: int) -> LayerMapping:
    return validate(LayerMapping(len(table) - 2, N, tuple(table)))


STRATEGIES = {"uniform": uniform, "top": top, "bottom": bottom}


def build(strategy, M: int, N: int) -> LayerMapping:
    """A mapping from a strategy name or an explicit table."""
    if isinstance(strategy, str):
        if strategy not in STRATEGIES:
            raise MappingError(f"unknown mapping strategy {strategy!r}; choose from {sorted(STRATEGIES)}")
        return validate(STRATEGIES[strategy](M, N))
    mapping = custom(strategy, N)
    if mapping.M != M:
        raise MappingError(f"explicit table covers {mapping.M} student layers, model has {M}")
    return mapping
