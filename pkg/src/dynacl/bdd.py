"""Reduced ordered binary decision diagrams over a fixed variable order.

Nodes live in one shared store and are identified by small integers.  The
unique table makes the representation canonical: two functions are equal iff
their node ids are equal.  Variable 0 is tested first.

Node 0 is FALSE and node 1 is TRUE.  No complement edges.
"""

from __future__ import annotations

import logging
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FALSE_ID = 0
TRUE_ID = 1

_AND, _OR, _XOR, _NOT, _ITE = range(5)


class StoreMismatch(ValueError):
    pass


class BoolFn:
    """Handle to a function in a :class:`BDD` store.

    Holding a handle keeps its nodes alive across garbage collection.
    Supports ``&``, ``|``, ``^`` and ``~``.
    """

    __slots__ = ("bdd", "node")

    def __init__(self, bdd: BDD, node: int):
        self.bdd = bdd
        self.node = node
        refs = bdd._refs
        refs[node] = refs.get(node, 0) + 1

    def __del__(self):
        try:
            refs = self.bdd._refs
            c = refs[self.node] - 1
            if c:
                refs[self.node] = c
            else:
                del refs[self.node]
        except (AttributeError, KeyError, TypeError):
            pass

    def __eq__(self, other):
        if not isinstance(other, BoolFn):
            return NotImplemented
        return self.bdd is other.bdd and self.node == other.node

    def __hash__(self):
        return hash((id(self.bdd), self.node))

    def __repr__(self):
        return f"BoolFn({self.node})"

    def __and__(self, other):
        return self.bdd.apply_and(self, other)

    def __or__(self, other):
        return self.bdd.apply_or(self, other)

    def __xor__(self, other):
        return self.bdd.apply_xor(self, other)

    def __invert__(self):
        return self.bdd.negate(self)

    @property
    def is_false(self) -> bool:
        return self.node == FALSE_ID

    @property
    def is_true(self) -> bool:
        return self.node == TRUE_ID

    def __bool__(self):
        raise TypeError("use .is_true / .is_false; truthiness of a BoolFn is ambiguous")


class BDD:
    """Node store with unique table and operation cache.

    One mutator at a time.  Readers may evaluate handles they hold while a
    mutation is in progress; nodes reachable from a live handle are never
    reclaimed or rewritten.
    """

    def __init__(self, nvars: int = 104):
        self.nvars = nvars
        # terminals carry var == nvars so they sort below every variable
        self._var = [nvars, nvars]
        self._lo = [FALSE_ID, TRUE_ID]
        self._hi = [FALSE_ID, TRUE_ID]
        self._unique: dict[tuple[int, int, int], int] = {}
        self._cache: dict[tuple, int] = {}
        self._free: list[int] = []
        self._refs: dict[int, int] = {}
        self.cache_hits = 0
        self.cache_misses = 0
        self.collections = 0
        self.true = BoolFn(self, TRUE_ID)
        self.false = BoolFn(self, FALSE_ID)

    # -- node table ---------------------------------------------------------

    def __len__(self):
        """Number of allocated internal nodes."""
        return len(self._var) - 2 - len(self._free)

    def _mk(self, v: int, lo: int, hi: int) -> int:
        if lo == hi:
            return lo
        key = (v, lo, hi)
        n = self._unique.get(key)
        if n is not None:
            return n
        if self._free:
            n = self._free.pop()
            self._var[n] = v
            self._lo[n] = lo
            self._hi[n] = hi
        else:
            n = len(self._var)
            self._var.append(v)
            self._lo.append(lo)
            self._hi.append(hi)
        self._unique[key] = n
        return n

    def _wrap(self, node: int) -> BoolFn:
        return BoolFn(self, node)

    def _check(self, *fns: BoolFn):
        for f in fns:
            if f.bdd is not self:
                raise StoreMismatch("operand belongs to a different BDD store")

    def node(self, f: BoolFn) -> tuple[int, int, int]:
        """(var, low, high) of the root of ``f``."""
        n = f.node
        return self._var[n], self._lo[n], self._hi[n]

    def var(self, i: int) -> BoolFn:
        if not 0 <= i < self.nvars:
            raise IndexError(f"variable {i} out of range 0..{self.nvars - 1}")
        return self._wrap(self._mk(i, FALSE_ID, TRUE_ID))

    def from_node(self, node: int) -> BoolFn:
        return self._wrap(node)

    # -- operations ---------------------------------------------------------

    def _apply(self, op: int, a: int, b: int) -> int:
        if op == _AND:
            if a == FALSE_ID or b == FALSE_ID:
                return FALSE_ID
            if a == TRUE_ID or a == b:
                return b
            if b == TRUE_ID:
                return a
        elif op == _OR:
            if a == TRUE_ID or b == TRUE_ID:
                return TRUE_ID
            if a == FALSE_ID or a == b:
                return b
            if b == FALSE_ID:
                return a
        else:
            if a == b:
                return FALSE_ID
            if a == FALSE_ID:
                return b
            if b == FALSE_ID:
                return a
            if a == TRUE_ID:
                return self._not(b)
            if b == TRUE_ID:
                return self._not(a)
        if a > b:
            a, b = b, a
        key = (op, a, b)
        r = self._cache.get(key)
        if r is not None:
            self.cache_hits += 1
            return r
        self.cache_misses += 1
        va, vb = self._var[a], self._var[b]
        if va == vb:
            r = self._mk(va, self._apply(op, self._lo[a], self._lo[b]),
                         self._apply(op, self._hi[a], self._hi[b]))
        elif va < vb:
            r = self._mk(va, self._apply(op, self._lo[a], b), self._apply(op, self._hi[a], b))
        else:
            r = self._mk(vb, self._apply(op, a, self._lo[b]), self._apply(op, a, self._hi[b]))
        self._cache[key] = r
        return r

    def _not(self, a: int) -> int:
        if a <= TRUE_ID:
            return 1 - a
        key = (_NOT, a)
        r = self._cache.get(key)
        if r is not None:
            self.cache_hits += 1
            return r
        self.cache_misses += 1
        r = self._mk(self._var[a], self._not(self._lo[a]), self._not(self._hi[a]))
        self._cache[key] = r
        return r

    def _ite(self, f: int, g: int, h: int) -> int:
        if f == TRUE_ID:
            return g
        if f == FALSE_ID:
            return h
        if g == h:
            return g
        if g == TRUE_ID and h == FALSE_ID:
            return f
        if g == TRUE_ID:
            return self._apply(_OR, f, h)
        if h == FALSE_ID:
            return self._apply(_AND, f, g)
        key = (_ITE, f, g, h)
        r = self._cache.get(key)
        if r is not None:
            self.cache_hits += 1
            return r
        self.cache_misses += 1
        v = min(self._var[f], self._var[g], self._var[h])

        def cof(n):
            if self._var[n] == v:
                return self._lo[n], self._hi[n]
            return n, n

        f0, f1 = cof(f)
        g0, g1 = cof(g)
        h0, h1 = cof(h)
        r = self._mk(v, self._ite(f0, g0, h0), self._ite(f1, g1, h1))
        self._cache[key] = r
        return r

    def apply_and(self, f: BoolFn, g: BoolFn) -> BoolFn:
        self._check(f, g)
        return self._wrap(self._apply(_AND, f.node, g.node))

    def apply_or(self, f: BoolFn, g: BoolFn) -> BoolFn:
        self._check(f, g)
        return self._wrap(self._apply(_OR, f.node, g.node))

    def apply_xor(self, f: BoolFn, g: BoolFn) -> BoolFn:
        self._check(f, g)
        return self._wrap(self._apply(_XOR, f.node, g.node))

    def negate(self, f: BoolFn) -> BoolFn:
        self._check(f)
        return self._wrap(self._not(f.node))

    def ite(self, f: BoolFn, g: BoolFn, h: BoolFn) -> BoolFn:
        self._check(f, g, h)
        return self._wrap(self._ite(f.node, g.node, h.node))

    def conjoin(self, fns) -> BoolFn:
        r = TRUE_ID
        for f in fns:
            self._check(f)
            r = self._apply(_AND, r, f.node)
        return self._wrap(r)

    def disjoin(self, fns) -> BoolFn:
        r = FALSE_ID
        for f in fns:
            self._check(f)
            r = self._apply(_OR, r, f.node)
        return self._wrap(r)

    def clear_cache(self):
        self._cache.clear()

    # -- queries ------------------------------------------------------------

    def evaluate(self, f: BoolFn, bits) -> bool:
        """Value of ``f`` under ``bits``.

        ``bits`` is either an int whose bit i is variable i, or a sequence
        indexed by variable.
        """
        return self.lookup(f, bits)[0]

    def lookup(self, f: BoolFn, bits) -> tuple[bool, int]:
        """Like :meth:`evaluate` but also returns the number of internal nodes visited."""
        var, lo, hi = self._var, self._lo, self._hi
        n = f.node
        visits = 0
        if isinstance(bits, int):
            while n > TRUE_ID:
                visits += 1
                n = hi[n] if (bits >> var[n]) & 1 else lo[n]
        else:
            while n > TRUE_ID:
                visits += 1
                n = hi[n] if bits[var[n]] else lo[n]
        return n == TRUE_ID, visits

    def _arrays(self):
        size = min(len(self._var), len(self._lo), len(self._hi))
        return (np.asarray(self._var[:size], dtype=np.int64),
                np.asarray(self._lo[:size], dtype=np.int64),
                np.asarray(self._hi[:size], dtype=np.int64))

    def evaluate_many(self, f: BoolFn, bits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Evaluate ``f`` on each row of a (N, nvars) 0/1 matrix.

        Returns (values, visits): the boolean results and the number of
        internal nodes each descent touched.
        """
        bits = np.asarray(bits)
        if bits.ndim != 2 or bits.shape[1] != self.nvars:
            raise ValueError(f"expected an (N, {self.nvars}) bit matrix")
        var, lo, hi = self._arrays()
        rows = np.arange(bits.shape[0])
        cur = np.full(bits.shape[0], f.node, dtype=np.int64)
        visits = np.zeros(bits.shape[0], dtype=np.int64)
        while True:
            internal = cur > TRUE_ID
            if not internal.any():
                break
            idx = rows[internal]
            c = cur[idx]
            b = bits[idx, var[c]].astype(bool)
            cur[idx] = np.where(b, hi[c], lo[c])
            visits[idx] += 1
        return cur == TRUE_ID, visits

    def support(self, f: BoolFn) -> set[int]:
        return {self._var[n] for n in self._reachable(f.node)}

    def _reachable(self, root: int) -> set[int]:
        seen = set()
        stack = [root]
        while stack:
            n = stack.pop()
            if n <= TRUE_ID or n in seen:
                continue
            seen.add(n)
            stack.append(self._lo[n])
            stack.append(self._hi[n])
        return seen

    def node_count(self, f: BoolFn) -> int:
        """Internal nodes reachable from ``f``."""
        return len(self._reachable(f.node))

    def enumerate_cubes(self, f: BoolFn) -> Iterator[str]:
        """Yield the root-to-TRUE paths of ``f`` as ternary strings.

        Character i is '0', '1' or '-' (don't care) for variable i.  The
        cubes are pairwise disjoint and their union is ``f``.
        """
        self._check(f)
        if f.node == FALSE_ID:
            return
        cube = ["-"] * self.nvars
        stack = [(f.node, None, None)]
        # explicit stack of (node, var to set, value); var None means descend
        while stack:
            n, v, val = stack.pop()
            if v is not None:
                cube[v] = val
                continue
            if n == TRUE_ID:
                yield "".join(cube)
                continue
            if n == FALSE_ID:
                continue
            vn = self._var[n]
            stack.append((0, vn, "-"))
            stack.append((self._hi[n], None, None))
            stack.append((0, vn, "1"))
            stack.append((self._lo[n], None, None))
            stack.append((0, vn, "0"))

    def from_cube(self, cube: Sequence[str] | str) -> BoolFn:
        r = TRUE_ID
        for v in range(len(cube) - 1, -1, -1):
            c = cube[v]
            if c == "1":
                r = self._mk(v, FALSE_ID, r)
            elif c == "0":
                r = self._mk(v, r, FALSE_ID)
        return self._wrap(r)

    def pick_cube(self, f: BoolFn) -> str | None:
        """One satisfying cube, or None when ``f`` is unsatisfiable."""
        return next(self.enumerate_cubes(f), None)

    def sat_count(self, f: BoolFn) -> int:
        memo = {FALSE_ID: 0, TRUE_ID: 1}

        def level(n):
            return self._var[n]

        def count(n):
            # solutions over variables level(n)..nvars-1
            if n in memo:
                return memo[n]
            lo, hi = self._lo[n], self._hi[n]
            v = level(n)
            r = (count(lo) << (level(lo) - v - 1)) + (count(hi) << (level(hi) - v - 1))
            memo[n] = r
            return r

        return count(f.node) << level(f.node)

    # -- garbage collection -------------------------------------------------

    def collect(self, extra_roots: Sequence[BoolFn] = ()) -> int:
        """Reclaim nodes unreachable from any live handle.  Returns the count freed."""
        live: set[int] = set()
        for root in list(self._refs) + [f.node for f in extra_roots]:
            if root > TRUE_ID and root not in live:
                live |= self._reachable(root)
        freed = 0
        for key, n in list(self._unique.items()):
            if n not in live:
                del self._unique[key]
                self._var[n] = -1
                self._free.append(n)
                freed += 1

        def alive(x):
            return x <= TRUE_ID or x in live

        self._cache = {k: r for k, r in self._cache.items()
                       if alive(r) and all(alive(x) for x in k[1:])}
        self.collections += 1
        logger.debug("bdd gc: freed %d nodes, %d live", freed, len(live))
        return freed

    # -- diagnostics --------------------------------------------------------

    def to_dot(self, f: BoolFn, names: Sequence[str] | None = None) -> str:
        lines = ["digraph bdd {", '  n0 [label="0", shape=box];', '  n1 [label="1", shape=box];']
        for n in sorted(self._reachable(f.node)):
            v = self._var[n]
            label = names[v] if names else f"x{v}"
            lines.append(f'  n{n} [label="{label}"];')
            lines.append(f"  n{n} -> n{self._lo[n]} [style=dashed];")
            lines.append(f"  n{n} -> n{self._hi[n]};")
        lines.append(f"  root -> n{f.node};")
        lines.append('  root [shape=plaintext, label="f"];')
        lines.append("}")
        return "\n".join(lines) + "\n"
