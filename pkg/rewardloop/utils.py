import hashlib
import json
import os
from typing import Any, Iterable

import numpy as np


def calculate_text_sha256(text: str) -> str:
    """
    Calculate the SHA256 digest of a text.

    Args:
        text (str): The text, encoded as UTF-8 before hashing.

    Returns:
        str: The hex digest.
    """
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def canonical_json(obj: Any) -> str:
    """Sorted-key JSON with a fixed layout, used for digests and manifests."""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False)


def derive_seed(*keys: int) -> int:
    """
    Derive an independent 32-bit seed from a tuple of non-negative integers.

    The same keys always give the same seed, so no RNG state is shared
    between workers.
    """
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def get_cpu_cores_minus_one() -> int:
    cores = os.cpu_count() or 1
    return max(cores - 1, 1)


class DirectoryCreationError(Exception):
    """
    Custom exception raised when there is an issue creating the directory.
    """

    pass


def ensure_dir_exist(path: str) -> None:
    try:
        if not os.path.exists(path):
            os.makedirs(path)
    except PermissionError:
        raise DirectoryCreationError(
            f"Permission denied to create the directory: {path}"
        )
    except OSError as e:
        raise DirectoryCreationError(f"Failed to create directory {path}: {e}")


def write_text(path: str, text: str) -> None:
    ensure_dir_exist(os.path.dirname(os.path.abspath(path)))
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


def read_text(path: str) -> str:
    with open(path, "r", encoding="utf-8") as f:
        return f.read()


def write_json(path: str, obj: Any) -> None:
    write_text(path, canonical_json(obj) + "\n")


def read_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_jsonl(path: str, records: Iterable[dict[str, Any]]) -> None:
    lines = [json.dumps(r, sort_keys=True, ensure_ascii=False) for r in records]
    write_text(path, "".join(line + "\n" for line in lines))


def read_jsonl(path: str) -> list[dict[str, Any]]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
