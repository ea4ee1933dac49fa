import os
from concurrent.futures import ThreadPoolExecutor

from dotenv import load_dotenv


def worker_count() -> int:
    """Worker cap from HISTOAGE_THREADS (defaults to the CPU count)."""
    load_dotenv()
    raw = os.getenv("HISTOAGE_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


def ordered_map(fn, items, workers=None) -> list:
    """Map fn over items on a thread pool; results come back in input order."""
    items = list(items)
    workers = workers or worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as executor:
        return list(executor.map(fn, items))
