from pathlib import Path
from typing import Generic, Type, TypeVar, Union

RecordType = TypeVar("RecordType")
PathLike = Union[str, Path]


class BaseRepository(Generic[RecordType]):
    """
    Base repository persisting one record type to files.

    Type Parameters:
        RecordType: Class of the objects this repository reads and writes
    """

    def __init__(self, record_type: Type[RecordType]):
        """
        Initialize repository with the record class.

        Args:
            record_type: The class this repository manages
        """
        self.record_type = record_type

    def exists(self, path: PathLike) -> bool:
        """
        Check if a record file exists.

        Args:
            path: File path

        Returns:
            True if the file exists, False otherwise
        """
        return Path(path).is_file()

    def load(self, path: PathLike) -> RecordType:
        raise NotImplementedError

    def save(self, path: PathLike, obj: RecordType) -> Path:
        raise NotImplementedError
