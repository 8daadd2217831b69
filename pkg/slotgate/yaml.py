import os
import json
import logging

import yaml

from slotgate.exceptions import ConfigError, MissingFileError
from slotgate.foundations import AttributeDict


LOGGER = logging.getLogger(__name__)


def load_settings_file(filename):
    ''' Load a JSON or YAML settings file into a plain dict.

        JSON goes through :mod:`json` (PyYAML would read `1e-07` as a
        string); everything else through :func:`yaml.safe_load`.
    '''

    if not os.path.exists(filename):
        raise MissingFileError(
            filename, 'settings file “{0}” does not exist.'.format(filename))

    with open(filename, 'r') as f:
        if filename.lower().endswith('.json'):
            try:
                data = json.load(f)

            except ValueError as e:
                raise ConfigError(filename, 'invalid JSON ({0})'.format(e))

        else:
            try:
                data = yaml.safe_load(f)

            except yaml.YAMLError as e:
                raise ConfigError(filename, 'invalid YAML ({0})'.format(e))

    if data is None:
        data = {}

    if not isinstance(data, dict):
        raise ConfigError(filename, 'top level must be a mapping.')

    LOGGER.debug('Settings loaded from “{0}”.'.format(filename))

    return data


class AttributeDictFromYaml(AttributeDict):
    ''' Read-only settings loaded from :attr:`filename`.

        This class is meant to be subclassed.
    '''

    filename = None

    def __init__(self, *args, **kwargs):

        assert(self.filename)

        ydata = load_settings_file(self.filename)

        super().__init__(ydata, *args, **kwargs)

        LOGGER.debug('{0} loaded from “{1}”.'.format(
                     self.__class__.__name__, self.filename))

    def dump(self):
        ''' YAML rendering of the current values. '''

        return yaml.safe_dump(self.as_dict(), default_flow_style=False,
                              width=72, indent=2, sort_keys=False)
