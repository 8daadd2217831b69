import os
import json
import logging
import dataclasses

from slotgate.constants import (
    DEFAULTS_FILENAME,
    RESOLVED_CONFIG_FILENAME,
)
from slotgate.exceptions import ConfigError
from slotgate.foundations import Singleton, AttributeDict
from slotgate.strings import parse_layers
from slotgate.yaml import AttributeDictFromYaml, load_settings_file

LOGGER = logging.getLogger(__name__)


# ————————————————————————————————————————————————————————————————— Classes


class ApplicationDefaults(AttributeDictFromYaml, metaclass=Singleton):
    filename = DEFAULTS_FILENAME


# ——————————————————————————————————————————————————————————————— Functions


def gpod(section, name):
    ''' Get packaged default for `section.name`. '''

    return getattr(getattr(defaults, section), name)


def merge_settings(base, overrides, prefix=''):
    ''' Deep-merge :param:`overrides` into a copy of :param:`base`.

        Both are plain dicts. Keys unknown to :param:`base` are rejected
        with their dotted name.
    '''

    merged = dict(base)

    for key, value in overrides.items():
        dotted = '{0}{1}'.format(prefix, key)

        if key not in base:
            raise ConfigError(dotted, 'unknown setting.')

        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(dotted, 'expected a section.')

            merged[key] = merge_settings(base[key], value, dotted + '.')

        else:
            merged[key] = value

    return merged


def resolve_settings(config_filename=None, overrides=None):
    ''' Layer packaged defaults, a settings file, then explicit overrides.

        :param overrides: nested dict, typically built from CLI flags.
        :returns: an :class:`AttributeDict`.
    '''

    settings = defaults.as_dict()

    if config_filename is not None:
        settings = merge_settings(settings,
                                  load_settings_file(config_filename))

    if overrides:
        settings = merge_settings(settings, overrides)

    return AttributeDict(settings)


def write_resolved_settings(settings, out_dir):

    filename = os.path.join(out_dir, RESOLVED_CONFIG_FILENAME)

    os.makedirs(out_dir, exist_ok=True)

    with open(filename, 'w') as f:
        json.dump(settings.as_dict(), f, indent=2, sort_keys=True)
        f.write('\n')

    LOGGER.info('Resolved settings written to “{0}”.'.format(filename))

    return filename


def coerce_value(default, value, dotted):
    ''' Convert a settings value to the type of the dataclass default. '''

    if value is None or default is None:
        return value

    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError('expected true or false')
            return value

        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError('expected an integer')
            return int(value)

        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError('expected a number')
            return float(value)

        if isinstance(default, tuple):
            if isinstance(value, str):
                return parse_layers(value)
            return tuple(value)

        if isinstance(default, str):
            return str(value)

    except (TypeError, ValueError) as e:
        raise ConfigError(dotted, 'invalid value {0!r} ({1}).'.format(
            value, e))

    return value


def build_config(cls, settings, section_name, **extra):
    ''' Build a frozen config dataclass from one settings section.

        :param extra: values computed elsewhere (eg. from a dataset),
            which take precedence over the section.
    '''

    section = settings[section_name]

    if isinstance(section, AttributeDict):
        section = section.as_dict()

    fields = {field.name: field for field in dataclasses.fields(cls)}

    for key in section:
        if key not in fields:
            raise ConfigError('{0}.{1}'.format(section_name, key),
                              'unknown setting.')

    kwargs = {}

    for name, field in fields.items():
        if name in extra:
            value = extra[name]

        elif name in section:
            value = section[name]

        else:
            continue

        default = (field.default
                   if field.default is not dataclasses.MISSING else None)

        kwargs[name] = coerce_value(
            default, value, '{0}.{1}'.format(section_name, name))

    return cls(**kwargs)


# ——————————————————————————————————————————————————————— Defaults singleton


defaults = ApplicationDefaults()
