"""
Named collection of 2-D float64 arrays, the unit every data, result and
checkpoint file holds.
"""
from collections import OrderedDict
from typing import Dict, Iterator, Mapping, Optional

import numpy as np

from sgplvm.core.exceptions import DataFormatError


class MatrixFile(Mapping[str, np.ndarray]):
    """
    Ordered name -> array mapping. Arrays are stored as 2-D float64 with
    finite values; vectors become single rows, scalars 1 x 1.
    """

    def __init__(self, arrays: Optional[Mapping[str, object]] = None):
        self._arrays: Dict[str, np.ndarray] = OrderedDict()
        for name, value in (arrays or {}).items():
            self[name] = value

    def __setitem__(self, name: str, value) -> None:
        if not name or len(name.encode("utf-8")) > 0xFFFF:
            raise DataFormatError(f"invalid array name {name!r}")
        array = np.asarray(value, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1, 1)
        elif array.ndim == 1:
            array = array.reshape(1, -1)
        elif array.ndim != 2:
            raise DataFormatError(f"array {name!r} must be at most 2-D, got shape {array.shape}")
        if not np.all(np.isfinite(array)):
            raise DataFormatError(f"array {name!r} contains non-finite values")
        self._arrays[name] = np.ascontiguousarray(array)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._arrays[name]
        except KeyError:
            raise DataFormatError(f"missing array {name!r}; have {list(self._arrays)}") from None

    def __contains__(self, name: object) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def scalar(self, name: str) -> float:
        array = self[name]
        if array.size != 1:
            raise DataFormatError(f"array {name!r} should hold one value, has shape {array.shape}")
        return float(array.reshape(-1)[0])

    def first(self) -> np.ndarray:
        if not self._arrays:
            raise DataFormatError("file holds no arrays")
        return next(iter(self._arrays.values()))

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{v.shape}" for k, v in self._arrays.items())
        return f"<MatrixFile({shapes})>"
