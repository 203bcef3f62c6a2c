import os
from pathlib import Path
from typing import Union

from src.utils.monitors import HighLevelErrors


def get_size(file_path: Union[str, Path]) -> str:
    """
    Function to get the size of a run artifact (checkpoint blob, metrics file, figure).

    Parameters:
    -----------
    file_path (str | Path): The path of the file for which size is to be calculated.

    Returns:
    --------
    str: The size of the file in a human-readable unit.

    Raises:
    -------
    FileNotFoundError: If the file does not exist at the given path.
    TypeError: If the file_path is neither a string nor a Path.
    """
    if not isinstance(file_path, (str, Path)):
        error_msg = f"The file path must be a string or Path, not: {type(file_path)}"
        HighLevelErrors.error(error_msg)
        raise TypeError(error_msg)

    if not os.path.exists(file_path):
        error_msg = f"The file at the path '{file_path}' was not found."
        HighLevelErrors.error(error_msg)
        raise FileNotFoundError(error_msg)

    file_size_bytes = os.path.getsize(file_path)
    if file_size_bytes < 1024:
        return f"{file_size_bytes} B"
    if file_size_bytes < 1024 ** 2:
        return f"{file_size_bytes / 1024:.1f} KB"
    return f"{file_size_bytes / (1024 ** 2):.3f} MB"
