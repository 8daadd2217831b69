"""
styles - ascii colors for the command line.

Only the few styles the CLI and log handlers use are kept. The choice
between colored and plain output is made once, by :func:`set_colors`,
before anything is printed.
"""

import sys

ST_NO      = 0
ST_OK      = 1
ST_BAD     = 2
ST_PATH    = 3
ST_NAME    = 4
ST_VALUE   = 5
ST_DEBUG   = 6
ST_INFO    = 7
ST_WARNING = 8
ST_ERROR   = 9
ST_COMMENT = 10

cli_ascii_codes = {
    'red'   : '\x1b[01;31m',
    'green' : '\x1b[01;32m',
    'brown' : '\x1b[00;33m',
    'yellow': '\x1b[01;33m',
    'navy'  : '\x1b[00;34m',
    'cadet' : '\x1b[00;36m',
    'forest': '\x1b[00;32m',
    'grey'  : '\x1b[00;37m',
    'none'  : '\x1b[0;0m',
}

colors = {
    ST_NO     : cli_ascii_codes['none'],
    ST_OK     : cli_ascii_codes['green'],
    ST_BAD    : cli_ascii_codes['red'],
    ST_PATH   : cli_ascii_codes['navy'],
    ST_NAME   : cli_ascii_codes['cadet'],
    ST_VALUE  : cli_ascii_codes['forest'],
    ST_DEBUG  : cli_ascii_codes['brown'],
    ST_INFO   : cli_ascii_codes['grey'],
    ST_WARNING: cli_ascii_codes['yellow'],
    ST_ERROR  : cli_ascii_codes['red'],
    ST_COMMENT: cli_ascii_codes['brown'],
}

LEVEL_STYLES = {
    'DEBUG'   : ST_DEBUG,
    'INFO'    : ST_INFO,
    'WARNING' : ST_WARNING,
    'ERROR'   : ST_ERROR,
    'CRITICAL': ST_ERROR,
}


def stylize_cli_no_colors(style, what):
    """ Return a non-colorized string. """

    return str(what)


def stylize_cli_colors(style, what):
    """ Return a colorized string.

        This won't work as expected on nested styles,
        but in CLI they shouldn't be used anyway.
    """

    return '{0}{1}{2}'.format(colors[style], what, colors[ST_NO])


stylize = stylize_cli_no_colors


def set_colors(enabled=None, stream=None):
    ''' Choose the styling for the entire run.

        :param enabled: force colors on or off. `None` means
            “colors when :param:`stream` is a terminal”.
    '''

    global stylize

    if enabled is None:
        stream = sys.stderr if stream is None else stream
        enabled = hasattr(stream, 'isatty') and stream.isatty()

    stylize = stylize_cli_colors if enabled else stylize_cli_no_colors

    return enabled
