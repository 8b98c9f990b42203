"""Progress bars for long iteration loops, notebook-aware when IPython is loaded."""

import sys
from typing import Iterable, Iterator, TypeVar

T = TypeVar("T")

try:
    if 'ipykernel' in sys.modules and 'IPython' in sys.modules:
        try:
            from tqdm.notebook import tqdm
            TQDM_BACKEND = 'notebook'
        except ImportError:
            from tqdm import tqdm  # type: ignore
            TQDM_BACKEND = 'standard'
    else:
        raise ImportError("Not in a Jupyter environment")
except ImportError:
    from tqdm import tqdm  # type: ignore
    TQDM_BACKEND = 'standard'


def progress(iterable: Iterable[T], total: int | None = None, desc: str = "Iterating",
             enabled: bool = False) -> Iterator[T]:
    """Wrap ``iterable`` in a tqdm bar; a no-op pass-through when ``enabled`` is False."""
    if not enabled:
        return iter(iterable)
    return iter(tqdm(iterable, total=total, desc=desc, leave=False))


__all__ = ['tqdm', 'TQDM_BACKEND', 'progress']
