import io
import logging
import struct
from pathlib import Path
from typing import Literal, Optional

import numpy as np

from sgplvm.core.exceptions import DataFormatError
from sgplvm.models.matrix_file import MatrixFile
from sgplvm.repositories.base import BaseRepository, PathLike
from sgplvm.storage import atomic_write

logger = logging.getLogger(__name__)

MAGIC = b"SGPL"
FORMAT_VERSION = 1
CSV_SUFFIXES = (".csv", ".txt")

Encoding = Literal["csv", "binary"]


class MatrixFileRepository(BaseRepository[MatrixFile]):
    """
    Reads and writes MatrixFiles in two encodings.

    CSV: each array is a ``#name:<name>`` line, a ``#shape:rows,cols`` line and
    the rows, values printed with 17 significant digits. A file without any
    header is one array named ``array0``.

    Binary: ``SGPL``, version u32, count u32, then per array a u16 name length,
    the UTF-8 name, rows u64, cols u64 and row-major float64 values, all
    little-endian.
    """

    def load(self, path: PathLike) -> MatrixFile:
        """
        Load a file, detecting the encoding from its first bytes.

        Raises:
            DataFormatError: If the file is missing, malformed or holds non-finite values
        """
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise DataFormatError(f"cannot read {path}: {exc}") from exc
        try:
            if raw.startswith(MAGIC):
                return self._decode_binary(raw)
            return self._decode_csv(raw.decode("utf-8"))
        except DataFormatError as exc:
            raise DataFormatError(f"{path}: {exc}") from exc
        except (UnicodeDecodeError, ValueError, struct.error) as exc:
            raise DataFormatError(f"{path}: cannot parse: {exc}") from exc

    def save(self, path: PathLike, obj: MatrixFile, encoding: Optional[Encoding] = None) -> Path:
        """
        Write a file atomically. The encoding defaults to CSV for .csv/.txt
        paths and binary otherwise.
        """
        path = Path(path)
        if encoding is None:
            encoding = "csv" if path.suffix.lower() in CSV_SUFFIXES else "binary"
        if encoding == "csv":
            with atomic_write(path, "w") as handle:
                handle.write(self._encode_csv(obj))
        else:
            with atomic_write(path, "wb") as handle:
                handle.write(self._encode_binary(obj))
        logger.debug("Wrote %r to %s (%s)", obj, path, encoding)
        return path

    # CSV

    @staticmethod
    def _encode_csv(obj: MatrixFile) -> str:
        out = io.StringIO()
        for name, array in obj.items():
            out.write(f"#name:{name}\n#shape:{array.shape[0]},{array.shape[1]}\n")
            if array.size:
                np.savetxt(out, array, delimiter=",", fmt="%.17g")
        return out.getvalue()

    @staticmethod
    def _decode_csv(text: str) -> MatrixFile:
        lines = [line.strip() for line in text.splitlines()]
        lines = [line for line in lines if line]
        result = MatrixFile()
        if not any(line.startswith("#shape:") for line in lines):
            rows = [line for line in lines if not line.startswith("#")]
            if rows:
                result["array0"] = np.loadtxt(io.StringIO("\n".join(rows)), delimiter=",", ndmin=2)
            return result

        i, pending_name = 0, None
        while i < len(lines):
            line = lines[i]
            if line.startswith("#name:"):
                pending_name = line[len("#name:"):].strip()
                i += 1
                continue
            if not line.startswith("#shape:"):
                raise DataFormatError(f"expected a #shape header, got {line[:40]!r}")
            try:
                n_rows, n_cols = (int(v) for v in line[len("#shape:"):].split(","))
            except ValueError:
                raise DataFormatError(f"malformed shape header {line!r}") from None
            body = lines[i + 1:i + 1 + n_rows]
            if len(body) != n_rows or any(b.startswith("#") for b in body):
                raise DataFormatError(f"declared {n_rows} rows but found {len(body)}")
            if n_rows:
                array = np.loadtxt(io.StringIO("\n".join(body)), delimiter=",", ndmin=2)
            else:
                array = np.zeros((0, n_cols))
            if array.shape != (n_rows, n_cols):
                raise DataFormatError(f"declared shape ({n_rows}, {n_cols}) but payload is {array.shape}")
            name = pending_name or f"array{len(result)}"
            result[name] = array
            pending_name = None
            i += 1 + n_rows
        return result

    # Binary

    @staticmethod
    def _encode_binary(obj: MatrixFile) -> bytes:
        parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(obj))]
        for name, array in obj.items():
            encoded = name.encode("utf-8")
            parts.append(struct.pack("<H", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack("<QQ", *array.shape))
            parts.append(array.astype("<f8").tobytes(order="C"))
        return b"".join(parts)

    @staticmethod
    def _decode_binary(raw: bytes) -> MatrixFile:
        version, count = struct.unpack_from("<II", raw, len(MAGIC))
        if version != FORMAT_VERSION:
            raise DataFormatError(f"unsupported format version {version}")
        offset = len(MAGIC) + 8
        result = MatrixFile()
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            n_rows, n_cols = struct.unpack_from("<QQ", raw, offset)
            offset += 16
            n_bytes = 8 * n_rows * n_cols
            if offset + n_bytes > len(raw):
                raise DataFormatError(f"array {name!r} is truncated")
            if n_bytes:
                values = np.frombuffer(raw, dtype="<f8", count=n_rows * n_cols, offset=offset)
                result[name] = values.reshape(n_rows, n_cols).astype(np.float64)
            else:
                result[name] = np.zeros((n_rows, n_cols))
            offset += n_bytes
        if offset != len(raw):
            raise DataFormatError(f"{len(raw) - offset} trailing bytes after {count} arrays")
        return result


matrix_files = MatrixFileRepository(MatrixFile)
