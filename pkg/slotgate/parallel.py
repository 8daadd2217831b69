import logging
from concurrent.futures import ThreadPoolExecutor


LOGGER = logging.getLogger(__name__)

# Worker cap, set once per run from `--threads`.
MAX_THREADS = 1


def set_max_threads(threads):

    global MAX_THREADS

    MAX_THREADS = max(1, int(threads))

    LOGGER.debug('Worker threads capped at {0}.'.format(MAX_THREADS))


def map_ordered(func, items, threads=None):
    ''' Apply :param:`func` to every item, possibly on worker threads.

        Results come back in input order whatever the completion order,
        so reductions over them stay deterministic.

        :param threads: worker count, defaults to the run-wide cap.
    '''

    items = list(items)

    if threads is None:
        threads = MAX_THREADS

    if threads <= 1 or len(items) <= 1:
        return [func(item) for item in items]

    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(func, items))
