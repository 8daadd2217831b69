import os
import logging


#
# HEADS UP: do NOT import constants here.
#


LOGGER = logging.getLogger(__name__)

# Package data (eg. defaults.yaml)
SLOTGATE_DATA_DIR = os.path.join(os.path.realpath(
    os.path.abspath(os.path.dirname(__file__))), 'data')


class Singleton(type):
    ''' https://stackoverflow.com/q/6760685/654755 '''

    _instances = {}

    def __call__(cls, *args, **kwargs):

        if cls not in cls._instances:
            cls._instances[cls] = super(Singleton,
                                        cls).__call__(*args, **kwargs)

        return cls._instances[cls]


class Anything:
    ''' An object that can have any attribute. Used for named integer enums. '''

    def __init__(self, names=None):
        '''
            :param names: an iterable of strings, of which any will be
                set as attribute of self with incremental integer value.
        '''
        if names:
            for index, name in enumerate(names):
                setattr(self, name, index)


class AttributeDict(object):
    """
    Convert a nested dictionary into an object whose keys are reachable
    with attribute notation (``settings.train.lr``) as well as with
    ``settings['train']``. Nested dicts become nested `AttributeDict`.

    Key order is remembered so the object dumps back to a plain dict
    (see :meth:`as_dict`) in the order it was built.

    Cf. http://databio.org/posts/python_AttributeDict.html
    """

    def __init__(self, entries=None, default=False):
        """
        :param entries: A dictionary (key-value pairs) to add as
            attributes.
        :param default: if True, missing attributes return `None`
            instead of raising `AttributeError`.
        """

        # bypass __setattr__ to avoid loop. These 2
        # attributes will not be dumped back.
        self.__dict__['return_defaults'] = default
        self.__dict__['keys_to_dump'] = []

        if entries is not None:
            self.add_entries(entries, default)

    def add_entries(self, entries, default=False):
        ''' Convert `entries` to attributes, creating
            `:class:AttributeDict` on the fly when relevant. '''

        for key, value in entries.items():
            if isinstance(value, dict):
                value = AttributeDict(value, default)

            setattr(self, key, value)

    def __getitem__(self, key):
        ''' Provides dict-style access to attributes. '''

        return getattr(self, key)

    def __contains__(self, key):

        return key in self.keys_to_dump

    def __repr__(self):
        return '{0}({1})'.format(self.__class__.__name__, self.as_dict())

    def as_dict(self):
        ''' Recursive plain-dict copy. '''

        return {
            key: (value.as_dict()
                  if isinstance(value, AttributeDict) else value)
            for key, value in self.items()
        }

    def items(self):

        for key in self.keys_to_dump:
            yield key, getattr(self, key)

    def keys(self):

        return list(self.keys_to_dump)

    def __setattr__(self, prop, val):
        ''' Record new attributes for future dumping. '''

        super().__setattr__(prop, val)

        if prop not in self.keys_to_dump:
            # avoid duplicates when re-assigning attributes,
            # like in obj.mylist += ['item']
            self.keys_to_dump.append(prop)

    def __delattr__(self, prop):
        ''' Remove attributes from future dumps. '''

        super().__delattr__(prop)
        self.keys_to_dump.remove(prop)

    def __getattr__(self, name):

        # Only called when normal lookup failed.
        if self.return_defaults:
            return None

        raise AttributeError(
            'No attribute “{0}” on {1}'.format(
                name, self.__class__.__name__))
