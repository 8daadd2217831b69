import os
import csv
import json
import hashlib
import logging

from threading import RLock

import numpy as np

from slotgate.constants import (
    TENSOR_DTYPE,
    MANIFEST_FILENAME,
    CHECKPOINT_FORMAT_VERSION,
)
from slotgate.exceptions import (
    TensorFileError,
    ManifestError,
    ChecksumMismatchError,
    MissingFileError,
)


LOGGER = logging.getLogger(__name__)

# Global lock to avoid interleaved appends to shared log files.
file_write_lock = RLock()

SIDECAR_SUFFIX = '.json'
TENSOR_SUFFIX = '.bin'
LITTLE_ENDIAN_F64 = np.dtype('<f8')


# ——————————————————————————————————————————————————————————————— Files


def sidecar_filename(filename):

    base, _ = os.path.splitext(filename)

    return base + SIDECAR_SUFFIX


def sha256_file(filename, block_size=65536):

    digest = hashlib.sha256()

    with open(filename, 'rb') as f:
        for block in iter(lambda: f.read(block_size), b''):
            digest.update(block)

    return digest.hexdigest()


def check_file_exists(filename, what='file'):

    if not os.path.exists(filename):
        raise MissingFileError(
            filename, '{0} “{1}” does not exist.'.format(what, filename))


def write_json(filename, data):
    ''' Deterministic JSON: sorted keys, fixed indentation. '''

    with open(filename, 'w') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write('\n')


def read_json(filename):

    check_file_exists(filename)

    with open(filename, 'r') as f:
        try:
            return json.load(f)

        except ValueError as e:
            raise ManifestError(filename, 'invalid JSON ({0}).'.format(e))


def write_jsonl(filename, records):

    with open(filename, 'w') as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True))
            f.write('\n')


def append_jsonl(filename, record):

    line = json.dumps(record, sort_keys=True) + '\n'

    with file_write_lock:
        with open(filename, 'a') as f:
            f.write(line)


def read_jsonl(filename):

    check_file_exists(filename)

    records = []

    with open(filename, 'r') as f:
        for line_number, line in enumerate(f, start=1):
            line = line.strip()

            if not line:
                continue

            try:
                records.append(json.loads(line))

            except ValueError as e:
                raise ManifestError(
                    '{0}:{1}'.format(filename, line_number),
                    'invalid JSON line ({0}).'.format(e))

    return records


def write_csv(filename, rows, fieldnames=None):
    ''' One row per dict; columns follow :param:`fieldnames` or the first
        row's keys. '''

    rows = list(rows)

    if fieldnames is None:
        fieldnames = list(rows[0]) if rows else []

    with open(filename, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)

    return filename


# —————————————————————————————————————————————————————————————— Tensors


def write_tensor(filename, array):
    ''' Write :param:`array` as row-major little-endian float64 in
        :param:`filename`, with a `{"shape": [...], "dtype": "f64"}`
        sidecar next to it. '''

    array = np.ascontiguousarray(array, dtype=LITTLE_ENDIAN_F64)

    with open(filename, 'wb') as f:
        f.write(array.tobytes(order='C'))

    write_json(sidecar_filename(filename), {
        'shape': list(array.shape),
        'dtype': TENSOR_DTYPE,
    })

    return filename


def read_tensor(filename):

    check_file_exists(filename, 'tensor file')

    sidecar = sidecar_filename(filename)

    check_file_exists(sidecar, 'tensor sidecar')

    with open(sidecar, 'r') as f:
        try:
            header = json.load(f)

        except ValueError as e:
            raise TensorFileError('{0}: invalid sidecar ({1}).'.format(
                sidecar, e))

    if header.get('dtype') != TENSOR_DTYPE:
        raise TensorFileError('{0}: unsupported dtype {1!r}.'.format(
            sidecar, header.get('dtype')))

    shape = header.get('shape')

    if not isinstance(shape, list) or not all(
            isinstance(size, int) and size >= 0 for size in shape):
        raise TensorFileError('{0}: invalid shape {1!r}.'.format(
            sidecar, shape))

    with open(filename, 'rb') as f:
        raw = f.read()

    expected = int(np.prod(shape, dtype=np.int64)) * LITTLE_ENDIAN_F64.itemsize

    if len(raw) != expected:
        raise TensorFileError(
            '{0}: holds {1} bytes, shape {2} needs {3}.'.format(
                filename, len(raw), shape, expected))

    return np.frombuffer(raw, dtype=LITTLE_ENDIAN_F64).astype(
        np.float64).reshape(shape)


# ——————————————————————————————————————————————————————————— Checkpoints


def save_checkpoint(directory, params, metadata):
    ''' One tensor file per named parameter plus a manifest listing names,
        shapes, checksums and :param:`metadata` (configs, step…).

        :param params: mapping of parameter name to numpy array.
    '''

    os.makedirs(directory, exist_ok=True)

    tensors = []

    for name in sorted(params):
        filename = '{0}{1}'.format(name, TENSOR_SUFFIX)
        path = os.path.join(directory, filename)

        write_tensor(path, params[name])

        tensors.append({
            'name': name,
            'file': filename,
            'shape': list(np.shape(params[name])),
            'sha256': sha256_file(path),
        })

    write_json(os.path.join(directory, MANIFEST_FILENAME), {
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'tensors': tensors,
        'metadata': metadata,
    })

    LOGGER.info('Checkpoint with {0} tensors saved to “{1}”.'.format(
        len(tensors), directory))

    return directory


def load_checkpoint(directory):
    ''' :returns: `(params, metadata)`, checksums verified. '''

    manifest = read_json(os.path.join(directory, MANIFEST_FILENAME))

    for field in ('format_version', 'tensors', 'metadata'):
        if field not in manifest:
            raise ManifestError(field, 'missing from checkpoint manifest.')

    if manifest['format_version'] != CHECKPOINT_FORMAT_VERSION:
        raise ManifestError('format_version', 'unsupported version {0}.'.format(
            manifest['format_version']))

    params = {}

    for entry in manifest['tensors']:
        for field in ('name', 'file', 'shape', 'sha256'):
            if field not in entry:
                raise ManifestError('tensors.{0}'.format(field),
                                    'missing from checkpoint manifest.')

        path = os.path.join(directory, entry['file'])

        check_file_exists(path, 'checkpoint tensor')

        if sha256_file(path) != entry['sha256']:
            raise ChecksumMismatchError(
                path, 'checksum mismatch for “{0}”.'.format(path))

        array = read_tensor(path)

        if list(array.shape) != entry['shape']:
            raise ManifestError('tensors.shape', '{0}: shape {1} differs '
                                'from manifest {2}.'.format(
                                    path, list(array.shape), entry['shape']))

        params[entry['name']] = array

    LOGGER.info('Checkpoint with {0} tensors loaded from “{1}”.'.format(
        len(params), directory))

    return params, manifest['metadata']
