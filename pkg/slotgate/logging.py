import os
import gzip
import logging
import logging.handlers

from slotgate.constants import (
    LOGS_DIRNAME,
    LOG_FILENAME,
    LOG_FILE_MAX_BYTES,
    LOG_FILE_BACKUPS,
)
from slotgate import styles


LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'
CONSOLE_FORMAT = '%(levelname)s %(message)s'


class GZipNamer:

    def __call__(self, default_filename):

        return default_filename + '.gz'


class GZipRotator:
    ''' Inspired from https://stackoverflow.com/a/16461440/654755 '''

    def __call__(self, source, destination):

        os.rename(source, destination)

        gziped_destination = '{}.gz'.format(destination)

        with open(destination, 'rb') as file_in, \
                gzip.open(gziped_destination, 'wb') as file_out:
            file_out.writelines(file_in)

        os.rename(gziped_destination, destination)


class StylizedFormatter(logging.Formatter):
    ''' Colorize the level name through :func:`styles.stylize`. '''

    def format(self, record):

        message = super().format(record)

        style = styles.LEVEL_STYLES.get(record.levelname)

        if style is None:
            return message

        return message.replace(
            record.levelname,
            styles.stylize(style, record.levelname), 1)


def setup_logging(out_dir=None, level='INFO', colors=None):
    ''' Install console and (when :param:`out_dir` is given) rotating
        file handlers on the `slotgate` root logger.

        :returns: the list of installed handlers, for later removal.
    '''

    root = logging.getLogger('slotgate')
    root.setLevel(level)

    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    styles.set_colors(colors)

    handlers = []

    console = logging.StreamHandler()
    console.setFormatter(StylizedFormatter(CONSOLE_FORMAT))
    root.addHandler(console)
    handlers.append(console)

    if out_dir is not None:
        log_dir = os.path.join(out_dir, LOGS_DIRNAME)
        os.makedirs(log_dir, exist_ok=True)

        file_handler = logging.handlers.RotatingFileHandler(
            os.path.join(log_dir, LOG_FILENAME),
            maxBytes=LOG_FILE_MAX_BYTES,
            backupCount=LOG_FILE_BACKUPS,
        )
        file_handler.rotator = GZipRotator()
        file_handler.namer = GZipNamer()
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(file_handler)
        handlers.append(file_handler)

    return handlers
