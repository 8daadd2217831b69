import time
import functools
import logging

from slotgate.strings import seconds_to_string

LOGGER = logging.getLogger(__name__)
FUNC_MOST_CALLS = {}


def ldebug(message, *args, **kwargs):
    ''' function meant to be wrapped in an assert call. '''

    LOGGER.debug(message.format(*args, **kwargs))

    return True


def build_signature(func, args, limit=None):
    ''' Very simple signature generator, hard-assuming how I use the decorators. '''

    if limit is None:
        # with "2", we get self and first argument.
        # In most of our uses cases this is sufficient.
        limit = 2

    return '{}{}'.format(
        func.__name__,
        ''.join(
            str(id(arg))
            for arg in args[:limit]
        )
    )


def run_at_most_every(delay, limit=None):
    ''' Execute the decorated function at most every :param:`delay`
        seconds; calls in between are dropped. The first call always runs.

        Used for progress logging in loops.

        :param delay: float, in seconds.
        :param limit: how many leading arguments tell calls apart, see
            :func:`build_signature`.
    '''

    def decorator(func):

        @functools.wraps(func)
        def wrapper(*args, **kwargs):

            signature = build_signature(func, args, limit)
            now = time.monotonic()

            last_run = FUNC_MOST_CALLS.get(signature)

            if last_run is not None and now - last_run < delay:
                return None

            FUNC_MOST_CALLS[signature] = now

            return func(*args, **kwargs)

        return wrapper

    return decorator


def log_duration(message):
    ''' Log how long the decorated function took, at INFO level. '''

    def decorator(func):

        @functools.wraps(func)
        def wrapper(*args, **kwargs):

            start = time.monotonic()

            try:
                return func(*args, **kwargs)

            finally:
                LOGGER.info('{0} took {1}.'.format(
                    message, seconds_to_string(time.monotonic() - start)))

        return wrapper

    return decorator
