"""Covering designs over (super-)attributes and the attribute-joining heuristic.

Attributes are 0-based everywhere in the API; the design text format uses
1-based indices, as published covering tables do.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from .errors import CoverageError, InfeasibleDesignError, ParseError, PlanError, TooLargeError

ENUMERATION_GUARD = 10**7


@dataclass(frozen=True)
class AttributeJoinPlan:
    """Disjoint groups of original attributes; each group becomes one super-attribute.

    ``groups`` is ordered by each group's smallest member and members inside a
    group are ascending, so super-attribute ``g`` encodes
    ``sum_i code[m_i] * prod_{l>i} dom[m_l]`` (mixed radix, first member slowest).
    """

    groups: tuple
    member_domains: tuple

    def __post_init__(self):
        groups = tuple(tuple(int(a) for a in g) for g in self.groups)
        seen = set()
        for g in groups:
            if not g:
                raise ValueError("empty join group")
            if seen.intersection(g) or len(set(g)) != len(g):
                raise PlanError(f"join groups overlap at {sorted(seen.intersection(g))}")
            seen.update(g)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "member_domains", tuple(int(d) for d in self.member_domains))

    @classmethod
    def identity(cls, domain_sizes: Sequence[int]) -> "AttributeJoinPlan":
        return cls(tuple((i,) for i in range(len(domain_sizes))), tuple(domain_sizes))

    @classmethod
    def from_groups(cls, groups, domain_sizes) -> "AttributeJoinPlan":
        """Normalize ``groups`` (adding singletons for unlisted attributes)."""
        listed = {a for g in groups for a in g}
        full = [tuple(sorted(g)) for g in groups]
        full += [(a,) for a in range(len(domain_sizes)) if a not in listed]
        full.sort(key=lambda g: g[0])
        return cls(tuple(full), tuple(domain_sizes))

    @property
    def domain_sizes(self) -> tuple:
        return tuple(math.prod(self.member_domains[a] for a in g) for g in self.groups)

    @property
    def is_identity(self) -> bool:
        return all(len(g) == 1 for g in self.groups)

    def locate(self, attr: int) -> tuple:
        """(super-attribute index, position inside its group) of an original attribute."""
        for gi, g in enumerate(self.groups):
            if attr in g:
                return gi, g.index(attr)
        raise KeyError(attr)

    def to_json(self):
        return {"groups": [list(g) for g in self.groups], "member_domains": list(self.member_domains)}

    @classmethod
    def from_json(cls, obj):
        return cls(tuple(tuple(g) for g in obj["groups"]), tuple(obj["member_domains"]))


@dataclass(frozen=True)
class Block:
    members: tuple
    domain_size: int

    def __post_init__(self):
        members = tuple(int(a) for a in self.members)
        if not members or len(set(members)) != len(members):
            raise ValueError(f"block members must be nonempty and distinct: {members}")
        object.__setattr__(self, "members", members)

    @classmethod
    def of(cls, members, domain_sizes=None) -> "Block":
        members = tuple(sorted(int(a) for a in members))
        eta = math.prod(domain_sizes[a] for a in members) if domain_sizes is not None else 0
        return cls(members, eta)

    def __len__(self):
        return len(self.members)

    def __contains__(self, a):
        return a in self.members


@dataclass(frozen=True)
class CoveringDesign:
    v: int
    k: int
    t: int
    blocks: tuple
    m_k: float | None = None
    valid: bool | None = None

    def with_blocks(self, blocks) -> "CoveringDesign":
        return CoveringDesign(self.v, self.k, self.t, tuple(blocks), self.m_k, None)

    def over_budget(self) -> list:
        if self.m_k is None:
            return []
        return [b for b in self.blocks if b.domain_size > self.m_k]

    def to_text(self) -> str:
        lines = [f"{self.v} {self.k} {self.t}"]
        lines += [" ".join(str(a + 1) for a in b.members) for b in self.blocks]
        return "\n".join(lines) + "\n"


def _mask(members) -> int:
    m = 0
    for a in members:
        m |= 1 << a
    return m


def verify_covering(design: CoveringDesign) -> list:
    """All t-subsets (0-based tuples, lexicographic) contained in no block."""
    v, t = design.v, design.t
    if not 0 < t < v:
        raise ValueError(f"need 0 < t < v, got t={t}, v={v}")
    if math.comb(v, t) > ENUMERATION_GUARD:
        raise TooLargeError(f"C({v},{t}) = {math.comb(v, t)} subsets exceeds the enumeration guard")
    masks = [_mask(b.members) for b in design.blocks]
    missing = []
    for sub in combinations(range(v), t):
        sm = _mask(sub)
        if not any(sm & bm == sm for bm in masks):
            missing.append(sub)
    return missing


def greedy_covering(domain_sizes: Sequence[int], m_k: float, t: int) -> CoveringDesign:
    """Greedy covering of every t-subset under the per-block domain budget ``m_k``.

    Each block is seeded with the lexicographically first uncovered t-subset and
    grown one attribute at a time, taking the attribute that covers the most new
    t-subsets (lowest index on ties) while the block's domain size stays within
    ``m_k``; growth stops when no admissible attribute adds coverage.
    """
    doms = [int(d) for d in domain_sizes]
    v = len(doms)
    if t < 1:
        raise ValueError("t must be at least 1")
    for a, d in enumerate(doms):
        if d > m_k:
            raise InfeasibleDesignError(f"attribute {a} alone has domain {d} > m_k={m_k}", (a,))
    if t >= v:
        if math.prod(doms) > m_k:
            raise InfeasibleDesignError(
                f"all {v} attributes must share a block but their domain {math.prod(doms)} > m_k",
                tuple(range(v)),
            )
        blk = Block.of(range(v), doms)
        return CoveringDesign(v, v, t, (blk,), m_k, True)
    if math.comb(v, t) > ENUMERATION_GUARD:
        raise TooLargeError(f"C({v},{t}) subsets exceeds the enumeration guard")

    uncovered = set()
    for sub in combinations(range(v), t):
        if math.prod(doms[a] for a in sub) > m_k:
            raise InfeasibleDesignError(
                f"subset {tuple(a + 1 for a in sub)} (1-based) has domain "
                f"{math.prod(doms[a] for a in sub)} > m_k={m_k}",
                sub,
            )
        uncovered.add(sub)

    blocks = []
    while uncovered:
        block = list(min(uncovered))
        eta = math.prod(doms[a] for a in block)
        while True:
            best_gain, best_a = 0, None
            for a in range(v):
                if a in block or eta * doms[a] > m_k:
                    continue
                gain = 0
                for rest in combinations(sorted(block), t - 1):
                    if tuple(sorted(rest + (a,))) in uncovered:
                        gain += 1
                if gain > best_gain:
                    best_gain, best_a = gain, a
            if best_a is None:
                break
            block.append(best_a)
            eta *= doms[best_a]
        blk = Block.of(block, doms)
        blocks.append(blk)
        uncovered.difference_update(combinations(blk.members, t))

    k = max(len(b) for b in blocks)
    return CoveringDesign(v, k, t, tuple(blocks), m_k, True)


def plan_joins(domain_sizes: Sequence[int], target_balance: float = 1.25) -> AttributeJoinPlan:
    """Merge small attributes by Cartesian product to even out domain sizes.

    Repeatedly takes the group with the smallest domain and merges it with the
    partner whose product lands closest below ``target_balance * median`` of
    the current group domains (never above ``target_balance`` times the largest
    original domain).  Stops as soon as the smallest group has no admissible
    partner.
    """
    doms = [int(d) for d in domain_sizes]
    if not doms:
        return AttributeJoinPlan((), ())
    cap = target_balance * max(doms)
    groups = [[i] for i in range(len(doms))]
    gdom = list(doms)
    while len(groups) > 1:
        limit = min(target_balance * float(np.median(gdom)), cap)
        g = min(range(len(groups)), key=lambda i: (gdom[i], groups[i][0]))
        best, best_prod = None, -1
        for h in range(len(groups)):
            if h == g:
                continue
            prod = gdom[g] * gdom[h]
            if prod <= limit and prod > best_prod:
                best, best_prod = h, prod
        if best is None:
            break
        merged = sorted(groups[g] + groups[best])
        keep = [i for i in range(len(groups)) if i not in (g, best)]
        groups = [groups[i] for i in keep] + [merged]
        gdom = [gdom[i] for i in keep] + [best_prod]
    return AttributeJoinPlan.from_groups(groups, doms)


def load_design(text: str, verify: bool = True, domain_sizes=None, m_k=None) -> CoveringDesign:
    """Parse a design file: header ``v k t`` then one block of 1-based indices per line.

    With ``verify`` the design must cover every t-subset (``CoverageError``
    lists the misses) and, when ``domain_sizes`` and ``m_k`` are given, respect
    the budget.  Without it the design is returned with ``valid=None``.
    """
    header = None
    blocks = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            nums = [int(tok) for tok in line.split()]
        except ValueError:
            raise ParseError(f"non-integer token in {line!r}", line=lineno) from None
        if header is None:
            if len(nums) != 3:
                raise ParseError("header must be 'v k t'", line=lineno)
            header = nums
            v = nums[0]
            if domain_sizes is not None and len(domain_sizes) != v:
                raise PlanError(f"{len(domain_sizes)} domain sizes given for a design over v={v} attributes")
            continue
        if len(set(nums)) != len(nums):
            raise ParseError(f"duplicate attribute in block {nums}", line=lineno)
        bad = [a for a in nums if not 1 <= a <= v]
        if bad:
            raise ParseError(f"attribute index {bad[0]} outside 1..{v}", line=lineno)
        blocks.append(Block.of([a - 1 for a in nums], domain_sizes))
    if header is None:
        raise ParseError("empty design file", line=1)
    v, k, t = header
    design = CoveringDesign(v, k, t, tuple(blocks), m_k, None)
    if not verify:
        return design
    missing = verify_covering(design)
    if missing:
        shown = ", ".join("{" + ",".join(str(a + 1) for a in s) + "}" for s in missing[:10])
        raise CoverageError(f"{len(missing)} uncovered {t}-subsets (1-based): {shown}", missing)
    if design.over_budget():
        raise InfeasibleDesignError(f"{len(design.over_budget())} blocks exceed m_k={m_k}")
    return CoveringDesign(v, k, t, tuple(blocks), m_k, True)
