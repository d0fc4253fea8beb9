import concurrent.futures
import logging
import time
import uuid
from datetime import datetime
from typing import Callable, Iterable, List, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

jobs = {}  # In-memory job status, keyed by job id


def generate_job_id():
    return str(uuid.uuid4())


def update_job_status(job_id, status, progress, message, result=None):
    """Updates the in-memory status table and logs the transition."""
    jobs[job_id] = {
        "status": status,
        "progress": progress,
        "message": message,
        "updated_at": datetime.now(),
    }
    if result is not None:
        jobs[job_id]["result"] = result
    logger.info("[%s] %s %d%% %s", job_id[:8], status, progress, message)


def get_job_status(job_id):
    if job_id in jobs:
        return jobs[job_id]
    return {"status": "unknown", "message": "Job not found."}


def parallel_map(func: Callable[[T], R], items: Iterable[T], workers: int = 1) -> List[R]:
    """Order-preserving map; workers=1 runs sequentially in the calling thread."""
    items = list(items)
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    if workers == 1 or len(items) < 2:
        return [func(x) for x in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(func, items))


def run_job(job_id, task_func, *args, **kwargs):
    """
    Runs one command under status tracking: queued -> processing ->
    completed or failed. Failures are recorded and re-raised.
    """
    update_job_status(job_id, "queued", 0, "Waiting to start...")
    started = time.perf_counter()
    try:
        update_job_status(job_id, "processing", 10, f"Running {getattr(task_func, '__name__', 'task')}...")
        result = task_func(*args, **kwargs)
    except Exception as e:
        logger.error("Job %s failed: %s", job_id, e)
        update_job_status(job_id, "failed", 0, f"Error: {e}")
        raise
    elapsed = time.perf_counter() - started
    update_job_status(job_id, "completed", 100, f"Done in {elapsed:.2f}s", result={"elapsed_s": elapsed})
    return result
