import logging

from slotgate.constants import (
    APP_VERSION,
)

from slotgate.foundations import Singleton

LOGGER = logging.getLogger(__name__)


class SentryHelper(metaclass=Singleton):
    ''' Optional error reporting. Enabled only when a run sets
        `run.sentry_dsn`; a missing SDK only disables reporting. '''

    def __init__(self):

        self.__enabled = False

        try:
            import sentry_sdk  # NOQA

        except Exception:
            LOGGER.debug('Unable to import sentry SDK. '
                         'Errors will not be reported.')
            self.__usable = False

        else:
            self.__usable = True

    @property
    def usable(self):

        return self.__usable and self.__enabled

    def enable(self, sentry_dsn):

        if self.__enabled or not sentry_dsn:
            return

        if not self.__usable:
            LOGGER.warning('A sentry DSN is configured but the SDK '
                           'is not installed; not reporting errors.')
            return

        import sentry_sdk

        sentry_sdk.init(sentry_dsn, release=APP_VERSION)

        LOGGER.info('Using sentry to report errors to {}'.format(sentry_dsn))

        self.__enabled = True

    def capture(self, exception):
        ''' Report :param:`exception` when enabled. Never raises. '''

        if not self.usable:
            return

        try:
            import sentry_sdk

            sentry_sdk.capture_exception(exception)

        except Exception:
            LOGGER.exception('Sentry reporting failed.')

    def disable(self):

        if not self.__enabled:
            return

        import sentry_sdk

        client = sentry_sdk.Hub.current.client

        if client is not None:
            # https://getsentry.github.io/sentry-python/#sentry_sdk.Client.close
            client.close()

        LOGGER.info('Disabled sentry error reporting.')

        self.__enabled = False


sentry = SentryHelper()
