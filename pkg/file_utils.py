import os
import shutil
import hashlib
from datetime import datetime
from pathlib import Path
from typing import Tuple, Union


def ensure_output_dir(directory: Union[str, Path]) -> Path:
    """
    Creates the output directory (and parents) if needed and returns it.
    """
    path = Path(directory)
    if path.exists() and not path.is_dir():
        raise ValueError(f"The provided output path is not a directory: {directory}")
    path.mkdir(parents=True, exist_ok=True)
    return path


def create_backup(file_path: Union[str, Path]) -> Tuple[bool, str]:
    """
    Copies an existing output file aside with a timestamp suffix before it is overwritten.
    Returns a tuple (success: bool, backup_path or error message: str).
    """
    try:
        stamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        backup_path = f"{file_path}.{stamp}.bak"
        counter = 1
        while os.path.exists(backup_path):
            backup_path = f"{file_path}.{stamp}_{counter}.bak"
            counter += 1
        shutil.copy2(file_path, backup_path)
        return True, backup_path
    except Exception as e:
        return False, str(e)


def prepare_output(file_path: Union[str, Path], backup: bool = True) -> Tuple[Path, str]:
    """
    Makes the parent directory of an output file and backs up any existing copy.
    Returns (path, backup_path) with an empty backup_path when nothing was copied.
    """
    path = Path(file_path)
    ensure_output_dir(path.parent if str(path.parent) else ".")
    if backup and path.exists():
        success, backup_path = create_backup(path)
        if not success:
            raise OSError(f"Could not back up {path}: {backup_path}")
        return path, backup_path
    return path, ""


def file_sha256(file_path: Union[str, Path]) -> str:
    """
    Hex SHA-256 digest of a file, read in chunks.
    """
    digest = hashlib.sha256()
    with open(file_path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
