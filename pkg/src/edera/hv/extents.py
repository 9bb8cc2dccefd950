"""First-fit extent allocator over hardware page indices."""

from __future__ import annotations

from bisect import bisect_left, insort
from typing import Iterable, Iterator

Extent = tuple[int, int]  # (start, length)


class ExtentPool:
    """Set of free page ranges kept sorted and coalesced.

    Allocation is first-fit from the lowest address so that identical call
    sequences always yield identical page indices.
    """

    def __init__(self, total: int):
        self.total = total
        self._free: list[list[int]] = [[0, total]] if total else []
        self.free_count = total

    def __iter__(self) -> Iterator[Extent]:
        for start, length in self._free:
            yield start, length

    def alloc(self, n: int) -> list[Extent]:
        if n > self.free_count:
            raise ValueError(f"requested {n} pages, {self.free_count} free")
        out: list[Extent] = []
        need = n
        while need:
            start, length = self._free[0]
            take = min(length, need)
            out.append((start, take))
            if take == length:
                self._free.pop(0)
            else:
                self._free[0] = [start + take, length - take]
            need -= take
        self.free_count -= n
        return out

    def release(self, extents: Iterable[Extent]) -> None:
        for start, length in extents:
            if length <= 0:
                continue
            i = bisect_left(self._free, [start, 0])
            insort(self._free, [start, length])
            self.free_count += length
            # coalesce with neighbours
            if i + 1 < len(self._free) and start + length == self._free[i + 1][0]:
                self._free[i][1] += self._free[i + 1][1]
                self._free.pop(i + 1)
            if i > 0 and self._free[i - 1][0] + self._free[i - 1][1] == start:
                self._free[i - 1][1] += self._free[i][1]
                self._free.pop(i)

    def take_page(self, page: int) -> bool:
        """Remove one specific page from the pool; False if it is not free."""
        for i, (start, length) in enumerate(self._free):
            if start <= page < start + length:
                left = [start, page - start]
                right = [page + 1, start + length - page - 1]
                repl = [e for e in (left, right) if e[1] > 0]
                self._free[i : i + 1] = repl
                self.free_count -= 1
                return True
        return False


def extent_pages(extents: Iterable[Extent]) -> Iterator[int]:
    for start, length in extents:
        yield from range(start, start + length)


def extents_size(extents: Iterable[Extent]) -> int:
    return sum(length for _, length in extents)


def remove_page(extents: list[Extent], page: int) -> bool:
    for i, (start, length) in enumerate(extents):
        if start <= page < start + length:
            repl = [(start, page - start), (page + 1, start + length - page - 1)]
            extents[i : i + 1] = [e for e in repl if e[1] > 0]
            return True
    return False


def guest_to_hw(extents: list[Extent], guest_page: int) -> int:
    """Translate a guest-physical page number into a hardware page index."""
    off = guest_page
    for start, length in extents:
        if off < length:
            return start + off
        off -= length
    raise IndexError(guest_page)
